"""Stage-wise audit decomposition, robust aggregation, and concentration measures.

The audit splits total rollout improvement exactly into a global-stage share A
and a local-stage share (1-A)*J_loc; everything here works on positive
aggregated losses and is a pure scalar/array manipulation.
"""

from dataclasses import dataclass, field

import numpy as np


def audit(l_raw, l_glob, l_hyb):
    """Return (A, J_loc, total) for positive losses; the identity
    total == A + (1-A)*J_loc holds exactly by construction.

    Accepts scalars or equal-shaped arrays.
    """
    l_raw = np.asarray(l_raw, dtype=float)
    l_glob = np.asarray(l_glob, dtype=float)
    l_hyb = np.asarray(l_hyb, dtype=float)
    if np.any(l_raw <= 0) or np.any(l_glob <= 0):
        raise ValueError("audit requires positive raw and post-global losses")
    if np.any(l_hyb < 0):
        raise ValueError("audit requires non-negative hybrid loss")
    a = 1.0 - l_glob / l_raw
    j_loc = 1.0 - l_hyb / l_glob
    total = 1.0 - l_hyb / l_raw
    return a, j_loc, total


def median_of_ratios(method_losses, raw_losses):
    """Median of per-run paired loss ratios (not the ratio of medians)."""
    m = np.asarray(method_losses, dtype=float)
    r = np.asarray(raw_losses, dtype=float)
    if m.shape != r.shape:
        raise ValueError(f"paired sequences differ in length: {m.shape} vs {r.shape}")
    if np.any(r <= 0):
        raise ValueError("raw losses must be positive")
    return float(np.median(m / r))


def _nearest_rank(sorted_vals, q):
    # nearest-rank percentile: value at rank ceil(q*n), 1-indexed
    n = len(sorted_vals)
    rank = max(1, int(np.ceil(q * n)))
    return float(sorted_vals[rank - 1])


def bootstrap_ci(ratios, n_boot=10000, alpha=0.05, seed=0):
    """Percentile bootstrap CI on the median: resample with replacement,
    median each replicate, return nearest-rank (alpha/2, 1-alpha/2) bounds.

    Deterministic given seed.
    """
    x = np.asarray(ratios, dtype=float)
    if x.size == 0:
        raise ValueError("empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    meds = np.sort(np.median(x[idx], axis=1))
    return _nearest_rank(meds, alpha / 2.0), _nearest_rank(meds, 1.0 - alpha / 2.0)


def sign_test_floor(n):
    """Smallest two-sided p attainable from a paired sign test with n pairs."""
    return 2.0 / (2.0 ** n)


def gini(shares):
    """Mean-absolute-difference Gini: sum_ij |x_i - x_j| / (2 n sum x).

    Zero-sum input returns 0 by convention.
    """
    x = np.asarray(shares, dtype=float)
    if np.any(x < 0):
        raise ValueError("gini requires non-negative entries")
    total = x.sum()
    n = x.size
    if total == 0 or n == 0:
        return 0.0
    xs = np.sort(x)
    # sum_ij |x_i - x_j| = 2 * sum_i (2i - n + 1) x_(i), i zero-based ascending
    i = np.arange(n)
    mad = 2.0 * np.sum((2 * i - n + 1) * xs)
    return float(mad / (2.0 * n * total))


def topq_share(shares, q):
    """Share carried by the ceil(q*B) largest entries (input normalized)."""
    x = np.asarray(shares, dtype=float)
    if np.any(x < 0):
        raise ValueError("topq_share requires non-negative entries")
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    total = x.sum()
    if total == 0:
        return 0.0
    k = int(np.ceil(q * x.size))
    top = np.sort(x)[::-1][:k]
    return float(top.sum() / total)


@dataclass
class ConcentrationReport:
    """Per-block error-share inequality summary."""

    shares: np.ndarray
    gini: float
    top20_share: float

    @classmethod
    def from_energies(cls, energies):
        e = np.asarray(energies, dtype=float)
        total = e.sum()
        shares = e / total if total > 0 else np.zeros_like(e)
        return cls(shares=shares, gini=gini(e), top20_share=topq_share(e, 0.2))


@dataclass
class AuditReport:
    """Per-run audit terms plus aggregated medians and bootstrap CIs."""

    l_raw: np.ndarray
    l_glob: np.ndarray
    l_hyb: np.ndarray
    a: np.ndarray = field(init=False)
    j_loc: np.ndarray = field(init=False)
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.l_raw = np.asarray(self.l_raw, dtype=float)
        self.l_glob = np.asarray(self.l_glob, dtype=float)
        self.l_hyb = np.asarray(self.l_hyb, dtype=float)
        self.a, self.j_loc, self.total = audit(self.l_raw, self.l_glob, self.l_hyb)

    @property
    def n_runs(self):
        return int(self.l_raw.size)

    def summary(self, n_boot=10000, seed=0):
        glob_ratio = self.l_glob / self.l_raw
        hyb_ratio = self.l_hyb / self.l_raw
        out = {
            "n_runs": self.n_runs,
            "median_ratio_glob": float(np.median(glob_ratio)),
            "median_ratio_hyb": float(np.median(hyb_ratio)),
            "median_A": float(np.median(self.a)),
            "median_J_loc": float(np.median(self.j_loc)),
            "median_total": float(np.median(self.total)),
            "sign_test_floor": sign_test_floor(self.n_runs),
        }
        out["ci_glob"] = bootstrap_ci(glob_ratio, n_boot=n_boot, seed=seed)
        out["ci_hyb"] = bootstrap_ci(hyb_ratio, n_boot=n_boot, seed=seed)
        return out
