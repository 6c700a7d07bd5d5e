"""Deployment pipeline: forecast, globally correct, score, route, refine,
feed back; plus the per-run error metric and budget sweeps.

A single step runs: host forecast -> global correction -> per-pixel risk ->
per-block mean scores -> dense or top-k selection -> halo-read/center-write
refinement with Hann blending on the selected blocks only. Unselected blocks
and non-velocity channels stay bit-identical to the post-global field.
"""

from dataclasses import dataclass

import numpy as np

from .fields import (
    center_crop,
    extract_all_windows,
    hann_window,
    write_block_residual,
)
from .routing import ActiveSet, RiskConfig, make_policy, select_topk
from .stats import bootstrap_ci, median_of_ratios


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 10
    budget: int | None = None  # absolute k; None means dense (k = B)
    policy: str = "innovation_keg"
    hann_on: bool = True
    keep_fields: bool = False
    seed: int = 0
    lambda_ke: float = 0.05

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def resolve_budget(self, n_blocks):
        k = n_blocks if self.budget is None else self.budget
        if not 0 <= k <= n_blocks:
            raise ValueError(f"budget {k} out of range [0, {n_blocks}]")
        return k


@dataclass
class Components:
    """Frozen pieces wired into a rollout."""

    host: object
    corrector: object
    refiner: object
    partition: object

    def __post_init__(self):
        self.refiner.check_geometry(self.partition)


@dataclass
class RolloutResult:
    per_step_loss: list
    run_loss: float
    active_sets: list
    fields: list | None = None


def hybrid_step(x_t, comps, k, score_fn, hann_on=True, step=0, truth=None):
    """One deployment step; returns (next state, selected block set)."""
    part = comps.partition
    x_hat = comps.host.forecast(x_t)
    x_g = comps.corrector.forward(x_t, x_hat)
    scores = score_fn({"x_t": x_t, "x_g": x_g, "step": step, "truth": truth})
    if k == part.n_blocks:
        active = ActiveSet(indices=tuple(range(part.n_blocks)), budget=k)
    else:
        active = select_topk(scores, k)
    out = x_g.copy()
    if active.indices:
        idx = active.as_array()
        stacked = np.concatenate([x_t, x_g], axis=0)
        windows = extract_all_windows(stacked, part)[idx]
        delta = center_crop(comps.refiner.forward(windows), part.h)
        win = hann_window(part.b) if hann_on else np.ones((part.b, part.b))
        for j, block_idx in enumerate(idx):
            write_block_residual(out, part, int(block_idx), delta[j], win)
    return out, active


def uv_relative_l2(pred, truth):
    num = np.linalg.norm(pred[:2] - truth[:2])
    den = np.linalg.norm(truth[:2])
    if den == 0:
        raise ValueError("truth velocity norm is zero")
    return float(num / den)


def run_rollout(traj, t0, cfg, comps):
    """Autoregressive rollout from frame t0, scored against the trajectory."""
    part = comps.partition
    if t0 + cfg.horizon >= len(traj):
        raise ValueError(
            f"trajectory too short: need t0+horizon+1 = {t0 + cfg.horizon + 1} frames, "
            f"have {len(traj)}"
        )
    k = cfg.resolve_budget(part.n_blocks)
    score_fn = make_policy(
        cfg.policy,
        partition=part,
        risk_cfg=RiskConfig(lambda_ke=cfg.lambda_ke),
        seed=cfg.seed,
    )
    z = traj.frames[t0]
    losses = []
    sets = []
    kept = [] if cfg.keep_fields else None
    for i in range(cfg.horizon):
        truth = traj.frames[t0 + 1 + i]
        z, active = hybrid_step(
            z, comps, k, score_fn, hann_on=cfg.hann_on, step=i, truth=truth
        )
        losses.append(uv_relative_l2(z, truth))
        sets.append(active)
        if kept is not None:
            kept.append(z.copy())
    return RolloutResult(
        per_step_loss=losses,
        run_loss=float(np.mean(losses)),
        active_sets=sets,
        fields=kept,
    )


def run_raw_rollout(traj, t0, horizon, host):
    """Uncorrected forecaster rollout; the denominator of every ratio."""
    z = traj.frames[t0]
    losses = []
    for i in range(horizon):
        z = host.forecast(z)
        losses.append(uv_relative_l2(z, traj.frames[t0 + 1 + i]))
    return RolloutResult(per_step_loss=losses, run_loss=float(np.mean(losses)), active_sets=[])


def run_global_only_rollout(traj, t0, horizon, host, corrector):
    z = traj.frames[t0]
    losses = []
    for i in range(horizon):
        x_hat = host.forecast(z)
        z = corrector.forward(z, x_hat)
        losses.append(uv_relative_l2(z, traj.frames[t0 + 1 + i]))
    return RolloutResult(per_step_loss=losses, run_loss=float(np.mean(losses)), active_sets=[])


def evaluation_runs(trajs, t0_pool):
    """The (trajectory, t0) grid defining one evaluation protocol."""
    return [(ti, t0) for ti in range(len(trajs)) for t0 in t0_pool]


def budget_sweep(trajs, t0_pool, budget_fractions, comps, cfg,
                 raw_losses=None, n_boot=2000):
    """Median-of-ratios at each budget, reusing one trained refiner
    throughout; per-budget percentile-bootstrap CIs included."""
    part = comps.partition
    runs = evaluation_runs(trajs, t0_pool)
    if raw_losses is None:
        raw_losses = np.array([
            run_raw_rollout(trajs[ti], t0, cfg.horizon, comps.host).run_loss
            for ti, t0 in runs
        ])
    rows = []
    for frac in budget_fractions:
        k = int(round(frac * part.n_blocks))
        bcfg = RolloutConfig(
            horizon=cfg.horizon, budget=k, policy=cfg.policy,
            hann_on=cfg.hann_on, seed=cfg.seed, lambda_ke=cfg.lambda_ke,
        )
        losses = np.array([
            run_rollout(trajs[ti], t0, bcfg, comps).run_loss for ti, t0 in runs
        ])
        ratios = losses / raw_losses
        lo, hi = bootstrap_ci(ratios, n_boot=n_boot, seed=cfg.seed)
        rows.append({
            "budget_fraction": float(frac),
            "k": k,
            "median_ratio": median_of_ratios(losses, raw_losses),
            "ci_lo": lo,
            "ci_hi": hi,
            "per_run_loss": [float(x) for x in losses],
        })
    return {"raw_losses": [float(x) for x in raw_losses], "rows": rows}


def active_set_bitmask(active, n_blocks):
    mask = np.zeros(n_blocks, dtype=int)
    mask[list(active.indices)] = 1
    return "".join(str(b) for b in mask)
