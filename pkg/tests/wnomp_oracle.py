"""Exhaustive support enumeration for small sparse non-negative problems."""

import itertools

import numpy as np
from scipy.optimize import nnls


def best_support(A, r, k):
    """Support of size ``k`` with the smallest non-negative least-squares residual."""
    return min(itertools.combinations(range(A.shape[1]), k), key=lambda s: nnls(A[:, list(s)], r)[1])


def support_recovery_trial(rng, m=16, n=64, k=2):
    """One random instance: Gaussian (low-coherence) A, k-sparse positive x."""
    from rflscm.wnomp import WnompConfig, wnomp_solve

    A = rng.normal(size=(m, n))
    support = tuple(sorted(rng.choice(n, k, replace=False)))
    x = np.zeros(n)
    x[list(support)] = rng.uniform(0.5, 2.0, k)
    r = A @ x
    est = tuple(np.flatnonzero(wnomp_solve(A, r, WnompConfig(max_sparsity=k))))
    return support, est, best_support(A, r, k)
