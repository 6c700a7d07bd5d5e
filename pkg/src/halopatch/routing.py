"""Label-free risk scoring, top-k block selection, and alternative policies.

The deployed score combines velocity innovation with the post-correction
kinetic-energy gradient; alternative per-pixel scores (spectral and wavelet
high-frequency detail), a seeded random baseline, a label-using oracle upper
bound, and a training-time static mask share the same per-block mean-pool +
top-k interface.
"""

from dataclasses import dataclass

import numpy as np

from .fields import block_mean_map, block_sum_map

# 8-tap Daubechies orthonormal pair with four vanishing moments (analysis
# order, lowpass sums to sqrt(2))
DB4_LO = np.array([
    0.23037781330885523, 0.7148465705525415, 0.6308807679295904,
    -0.02798376941698385, -0.18703481171888114, 0.030841381835986965,
    0.032883011666982945, -0.010597401784997278,
])
DB4_HI = ((-1.0) ** np.arange(8)) * DB4_LO[::-1]

POLICY_NAMES = ("innovation_keg", "spectral_hf", "wavelet_hf", "random", "oracle", "static")


@dataclass(frozen=True)
class RiskConfig:
    lambda_ke: float = 0.05
    scheme: str = "central"  # periodic central differences

    def __post_init__(self):
        if self.lambda_ke < 0:
            raise ValueError("lambda_ke must be non-negative")
        if self.scheme != "central":
            raise ValueError(f"unknown derivative scheme {self.scheme!r}")


@dataclass(frozen=True)
class ActiveSet:
    indices: tuple
    budget: int

    def __contains__(self, idx):
        return idx in set(self.indices)

    def as_array(self):
        return np.asarray(self.indices, dtype=int)


def _central_diff(a, axis, spacing):
    return (np.roll(a, -1, axis=axis) - np.roll(a, 1, axis=axis)) / (2.0 * spacing)


def risk_map(x_t, x_g, cfg=RiskConfig()):
    """Per-pixel deployment score: |du| + |dv| plus the weighted L1 gradient
    magnitude of the post-correction kinetic energy."""
    du = np.abs(x_g[0] - x_t[0]) + np.abs(x_g[1] - x_t[1])
    if cfg.lambda_ke == 0.0:
        return du
    ke = 0.5 * (x_g[0] ** 2 + x_g[1] ** 2)
    H, W = ke.shape
    dx = 2.0 * np.pi / W
    dy = 2.0 * np.pi / H
    grad = np.abs(_central_diff(ke, axis=1, spacing=dx)) + np.abs(
        _central_diff(ke, axis=0, spacing=dy)
    )
    return du + cfg.lambda_ke * grad


def select_topk(scores, k):
    """Indices of the k largest scores; ties break toward the lowest block
    index, so selections nest across budgets."""
    scores = np.asarray(scores)
    B = scores.size
    if not 0 <= k <= B:
        raise ValueError(f"budget k={k} out of range [0, {B}]")
    order = np.argsort(-scores, kind="stable")
    chosen = np.sort(order[:k])
    return ActiveSet(indices=tuple(int(i) for i in chosen), budget=k)


def policy_spectral_hf(x_g):
    """Per-pixel velocity energy above half the maximum radial wavenumber."""
    H, W = x_g.shape[1], x_g.shape[2]
    ky = np.fft.fftfreq(H)[:, None] * H
    kx = np.fft.fftfreq(W)[None, :] * W
    kmag = np.sqrt(kx ** 2 + ky ** 2)
    keep = (kmag > 0.5 * (min(H, W) // 2)).astype(float)
    out = np.zeros((H, W))
    for c in range(2):
        hp = np.real(np.fft.ifft2(keep * np.fft.fft2(x_g[c])))
        out += hp ** 2
    return out


def _dwt_rows(a, lo, hi):
    """Single-level 1-D DWT along the last axis with linear-extrapolation
    padding (keeps low-order polynomial trends out of the detail band)."""
    n = a.shape[-1]
    taps = lo.size
    pad = taps - 2
    left_slope = a[..., 1:2] - a[..., 0:1]
    right_slope = a[..., -1:] - a[..., -2:-1]
    left = a[..., 0:1] - left_slope * np.arange(pad, 0, -1)
    right = a[..., -1:] + right_slope * np.arange(1, pad + 1)
    ext = np.concatenate([left, a, right], axis=-1)
    detail = np.zeros(a.shape[:-1] + (n // 2,))
    approx = np.zeros_like(detail)
    # alignment puts the filter's dominant taps over original position ~2i,
    # so detail energy registers on the feature rather than beside it
    idx = 2 * np.arange(n // 2)
    for j in range(taps):
        seg = ext[..., idx + j]
        approx += lo[j] * seg
        detail += hi[j] * seg
    return approx, detail


def _dwt2_detail(a):
    """|LH| + |HL| + |HH| of a single-level 2-D db4 transform, half resolution."""
    lo_r, hi_r = _dwt_rows(a, DB4_LO, DB4_HI)
    ll, lh = _dwt_rows(np.swapaxes(lo_r, -1, -2), DB4_LO, DB4_HI)
    hl, hh = _dwt_rows(np.swapaxes(hi_r, -1, -2), DB4_LO, DB4_HI)
    det = np.abs(np.swapaxes(lh, -1, -2)) + np.abs(np.swapaxes(hl, -1, -2))
    det += np.abs(np.swapaxes(hh, -1, -2))
    return det


def policy_wavelet_hf(x_g):
    """Per-pixel detail energy of the velocity channels, nearest-neighbor
    upsampled back to grid resolution."""
    det = _dwt2_detail(x_g[0]) + _dwt2_detail(x_g[1])
    return np.repeat(np.repeat(det, 2, axis=0), 2, axis=1)


def policy_oracle(x_g, x_star, p):
    """Label-using reference: per-block L2 norm of the true uv residual."""
    res = x_star[:2] - x_g[:2]
    sq = (res ** 2).sum(axis=0)
    return np.sqrt(block_sum_map(sq, p))


def policy_static_mask(train_trajs, host, g, cfg, p, t0_pool=(3, 5, 7)):
    """Time-averaged block scores over training samples; fixed at deployment."""
    total = np.zeros(p.n_blocks)
    count = 0
    for traj in train_trajs:
        for t0 in t0_pool:
            if t0 + 1 >= len(traj):
                continue
            x_t = traj.frames[t0]
            x_hat = host.forecast(x_t)
            x_g = g.forward(x_t, x_hat)
            total += block_mean_map(risk_map(x_t, x_g, cfg), p)
            count += 1
    if count == 0:
        raise ValueError("no usable training samples for the static mask")
    return total / count


def jaccard_stability(sets):
    """Jaccard overlap of consecutive active sets; 1.0 for two empty sets."""
    out = []
    for a, b in zip(sets[:-1], sets[1:]):
        sa, sb = set(a.indices), set(b.indices)
        union = sa | sb
        out.append(1.0 if not union else len(sa & sb) / len(union))
    return out


def make_policy(name, *, partition, risk_cfg=RiskConfig(), static_scores=None, seed=0):
    """Build a per-step block-score function ctx -> scores[B].

    ctx is a mapping with keys x_t, x_g, step, and (for the oracle) truth.
    """
    if name == "innovation_keg":
        def score(ctx):
            return block_mean_map(risk_map(ctx["x_t"], ctx["x_g"], risk_cfg), partition)
    elif name == "spectral_hf":
        def score(ctx):
            return block_mean_map(policy_spectral_hf(ctx["x_g"]), partition)
    elif name == "wavelet_hf":
        def score(ctx):
            return block_mean_map(policy_wavelet_hf(ctx["x_g"]), partition)
    elif name == "random":
        def score(ctx):
            rng = np.random.default_rng([seed, ctx["step"]])
            return rng.random(partition.n_blocks)
    elif name == "oracle":
        def score(ctx):
            if ctx.get("truth") is None:
                raise ValueError("oracle policy needs ground truth at every step")
            return policy_oracle(ctx["x_g"], ctx["truth"], partition)
    elif name == "static":
        if static_scores is None:
            raise ValueError("static policy needs precomputed scores")
        frozen = np.asarray(static_scores, dtype=float)

        def score(ctx):
            return frozen
    else:
        raise ValueError(f"unknown policy {name!r}; choose from {POLICY_NAMES}")
    return score
