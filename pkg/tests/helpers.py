"""Small dataset builders shared by the test modules."""

import numpy as np

from mrt_integration.datamodel import CombinedDataset

# Filled by the acceptance tests, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def tiny_dataset(y, a, ph=0.5, study=None, T=None, X=None):
    """One participant per row unless ``T`` groups rows into participants."""
    y = np.asarray(y, dtype=float)
    N = y.size
    T = T or 1
    pid = np.repeat(np.arange(N // T), T)
    t = np.tile(np.arange(1, T + 1), N // T)
    study = np.ones(N, dtype=int) if study is None else np.asarray(study)
    X = np.zeros((N, 1)) if X is None else np.asarray(X, dtype=float)
    return CombinedDataset.from_arrays(pid, study, t, X, a, y, np.full(N, ph) if np.ndim(ph) == 0 else ph)
