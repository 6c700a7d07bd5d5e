"""The two trainable correction stages and their staged training procedure.

Stage 1 trains a full-field velocity-residual corrector closed-loop against
the frozen forecaster (the corrected state is fed back each step, and
gradients flow through the forecaster's adjoint). Stage 2a pretrains a
blockwise halo-read/center-write refiner by dense per-patch regression onto
the post-global residual; Stage 2b fine-tunes it inside the full hybrid
rollout with every block active, under an AR-depth curriculum.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .fields import (
    center_crop,
    crop_adjoint,
    extract_all_windows,
    hann_window,
    scatter_add_windows,
)

STATE_CHANNELS = 4


def _coord_features(H, W):
    x = 2.0 * np.pi * np.arange(W)[None, :] / W * np.ones((H, 1))
    y = 2.0 * np.pi * np.arange(H)[:, None] / H * np.ones((1, W))
    return np.stack([np.sin(x), np.cos(x), np.sin(y), np.cos(y)])


class GlobalCorrector:
    """Full-field corrector: spectral-conv stack predicting a clipped
    velocity residual added onto the raw forecast. Non-velocity channels of
    the forecast pass through untouched."""

    def __init__(self, H, W, width=16, n_spectral=2, modes=8, clip_bound=0.8293,
                 coord_features=True, seed=0):
        self.H, self.W = H, W
        self.width, self.n_spectral, self.modes = width, n_spectral, modes
        self.clip_bound = float(clip_bound)
        self.use_coords = coord_features
        self.seed = seed
        rng = np.random.default_rng(seed)
        in_ch = 2 * STATE_CHANNELS + (4 if coord_features else 0)
        layers = [nn.Conv2d(in_ch, width, kernel=1, rng=rng, name="lift")]
        for i in range(n_spectral):
            layers.append(nn.SpectralConv2d(width, width, modes, rng=rng, name=f"spec{i}"))
            layers.append(nn.Gelu())
        layers.append(nn.Conv2d(width, width, kernel=1, rng=rng, name="head0"))
        layers.append(nn.Gelu())
        layers.append(nn.Conv2d(width, 2, kernel=1, zero_init=True, name="head1"))
        self.stack = nn.Sequential(layers)
        self._coords = _coord_features(H, W) if coord_features else None

    def params(self):
        return self.stack.params()

    def _assemble(self, x_t, x_hat):
        parts = [x_t, x_hat]
        if self.use_coords:
            parts.append(self._coords)
        return np.concatenate(parts, axis=0)[None]

    def forward(self, x_t, x_hat, want_cache=False):
        """Return the post-global field x_hat + clip(residual) on (u, v)."""
        inp = self._assemble(x_t, x_hat)
        raw, caches = self.stack.forward(inp)
        res = np.clip(raw[0], -self.clip_bound, self.clip_bound)
        out = x_hat.copy()
        out[:2] += res
        if want_cache:
            mask = np.abs(raw[0]) < self.clip_bound
            return out, (caches, mask)
        return out

    def backward(self, dout, cache, accumulate=True):
        """VJP onto (x_t, x_hat); parameter grads accumulate unless frozen."""
        caches, mask = cache
        dres = dout[:2] * mask
        if not accumulate:
            saved = [p.grad.copy() for p in self.params()]
        dinp = self.stack.backward(dres[None], caches)[0]
        if not accumulate:
            for p, g in zip(self.params(), saved):
                p.grad[...] = g
        dx_t = dinp[:STATE_CHANNELS]
        dx_hat = dinp[STATE_CHANNELS:2 * STATE_CHANNELS] + dout
        return dx_t, dx_hat

    def manifest(self):
        return {
            "kind": "global_corrector",
            "H": self.H, "W": self.W, "width": self.width,
            "n_spectral": self.n_spectral, "modes": self.modes,
            "clip_bound": repr(self.clip_bound),
            "coord_features": int(self.use_coords), "seed": self.seed,
        }

    def save(self, path, extra=None):
        named = {p.name: p.value for p in self.params()}
        man = self.manifest()
        if extra:
            man.update(extra)
        nn.save_tensors(path, named, man)

    @classmethod
    def load(cls, path):
        named, man = nn.load_tensors(path)
        g = cls(
            H=int(man["H"]), W=int(man["W"]), width=int(man["width"]),
            n_spectral=int(man["n_spectral"]), modes=int(man["modes"]),
            clip_bound=float(man["clip_bound"]),
            coord_features=bool(int(man["coord_features"])), seed=int(man["seed"]),
        )
        for p in g.params():
            p.value[...] = named[p.name]
        return g


class LocalRefiner:
    """Patch refiner: reads an 8-channel halo window (state ++ post-global),
    writes a velocity residual for the window; callers center-crop it."""

    def __init__(self, b, h, width=24, depth=3, seed=0):
        self.b, self.h = b, h
        self.width, self.depth = width, depth
        self.seed = seed
        rng = np.random.default_rng(seed)
        layers = [nn.Conv2d(8, width, kernel=3, rng=rng, name="in")]
        layers.append(nn.Gelu())
        for i in range(depth - 2):
            layers.append(nn.Conv2d(width, width, kernel=3, rng=rng, name=f"mid{i}"))
            layers.append(nn.Gelu())
        layers.append(nn.Conv2d(width, 2, kernel=3, zero_init=True, name="out"))
        self.stack = nn.Sequential(layers)

    @property
    def window_side(self):
        return self.b + 2 * self.h

    def params(self):
        return self.stack.params()

    def check_geometry(self, p):
        if (p.b, p.h) != (self.b, self.h):
            raise ValueError(
                f"refiner trained for b={self.b}, h={self.h}; partition has b={p.b}, h={p.h}"
            )

    def forward(self, windows, want_cache=False):
        """windows [n, 8, b+2h, b+2h] -> full-window residuals [n, 2, ., .]."""
        if windows.shape[-1] != self.window_side or windows.shape[1] != 8:
            raise ValueError(
                f"window shape {windows.shape[1:]} incompatible with "
                f"(8, {self.window_side}, {self.window_side})"
            )
        out, caches = self.stack.forward(windows)
        if want_cache:
            return out, caches
        return out

    def backward(self, dout, caches, accumulate=True):
        if not accumulate:
            saved = [p.grad.copy() for p in self.params()]
        dwin = self.stack.backward(dout, caches)
        if not accumulate:
            for p, g in zip(self.params(), saved):
                p.grad[...] = g
        return dwin

    def manifest(self):
        return {
            "kind": "local_refiner",
            "b": self.b, "h": self.h,
            "width": self.width, "depth": self.depth, "seed": self.seed,
        }

    def save(self, path, extra=None):
        named = {p.name: p.value for p in self.params()}
        man = self.manifest()
        if extra:
            man.update(extra)
        nn.save_tensors(path, named, man)

    @classmethod
    def load(cls, path):
        named, man = nn.load_tensors(path)
        ref = cls(
            b=int(man["b"]), h=int(man["h"]), width=int(man["width"]),
            depth=int(man["depth"]), seed=int(man["seed"]),
        )
        for p in ref.params():
            p.value[...] = named[p.name]
        return ref


def local_forward(window, refiner):
    """Spec surface: one halo window [8, s, s] -> cropped residual [2, b, b]."""
    out = refiner.forward(window[None])
    return center_crop(out[0], refiner.h)


@dataclass
class TrainConfig:
    ar_depth: int = 5
    t0_pool: tuple = (3, 5, 7, 10)
    epochs: int = 60
    steps: int = 300  # patch-pretraining steps
    lr: float = 5e-4
    weight_decay: float = 1e-4
    patch_weight_mode: str = "uniform"  # or "energy"
    eps: float = 1e-12
    aux_weight: float = 1e-4
    patience: int = 15
    seed: int = 0
    val_fraction: float = 0.1
    grad_clip: float = 1.0
    curriculum: tuple = (0.15, 0.30)  # epoch fractions for AR depth 1 -> 2 -> N

    def __post_init__(self):
        if self.ar_depth < 1:
            raise ValueError("ar_depth must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.patch_weight_mode not in ("uniform", "energy"):
            raise ValueError(f"unknown patch weight mode {self.patch_weight_mode!r}")


def split_train_val(trajs, val_fraction):
    """Hold back the trailing fraction of trajectories for validation."""
    n_val = max(1, round(val_fraction * len(trajs)))
    if n_val >= len(trajs):
        raise ValueError("not enough trajectories to split off a validation set")
    return trajs[:-n_val], trajs[-n_val:]


class TrainerState:
    """Resumable bookkeeping around a model + optimizer: round counter,
    early-stopping state, best-so-far parameters. Saving after every round
    makes an interrupted run continue bit-identically."""

    def __init__(self, model, opt):
        self.model = model
        self.opt = opt
        self.round_idx = 0
        self.best_val = np.inf
        self.bad_rounds = 0
        self.best_params = None
        self.done = False

    def observe(self, val_loss, patience):
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_params = [p.value.copy() for p in self.model.params()]
            self.bad_rounds = 0
        else:
            self.bad_rounds += 1
            if self.bad_rounds >= patience:
                self.done = True
        self.round_idx += 1

    def finalize(self):
        if self.best_params is not None:
            for p, v in zip(self.model.params(), self.best_params):
                p.value[...] = v
        return self.model

    def save(self, path):
        named = {p.name: p.value for p in self.model.params()}
        named.update(self.opt.export_state())
        if self.best_params is not None:
            for p, b in zip(self.model.params(), self.best_params):
                named["best." + p.name] = b
        man = dict(self.model.manifest())
        man.update({
            "round_idx": self.round_idx,
            "best_val": repr(float(self.best_val)),
            "bad_rounds": self.bad_rounds,
            "done": int(self.done),
            "has_best": int(self.best_params is not None),
        })
        nn.save_tensors(path, named, man)

    def load(self, path):
        named, man = nn.load_tensors(path)
        for p in self.model.params():
            p.value[...] = named[p.name]
        self.opt.import_state(named)
        self.round_idx = int(man["round_idx"])
        self.best_val = float(man["best_val"])
        self.bad_rounds = int(man["bad_rounds"])
        self.done = bool(int(man["done"]))
        if int(man["has_best"]):
            self.best_params = [named["best." + p.name].copy() for p in self.model.params()]
        return self

    def maybe_resume(self, path, resume):
        if resume and path is not None and os.path.exists(path):
            self.load(path)
        return self


def _uv_mse(pred, target):
    d = pred[:2] - target[:2]
    return float(np.mean(d ** 2)), d


def clip_calibration(trajs, host, t0_pool=(3, 5, 7, 10), percentile=0.95):
    """Residual clamp from single-step true-residual statistics: the
    nearest-rank percentile of per-sample max |uv residual|."""
    maxima = []
    for traj in trajs:
        for t0 in t0_pool:
            if t0 + 1 >= len(traj):
                continue
            x_hat = host.forecast(traj.frames[t0])
            res = traj.frames[t0 + 1][:2] - x_hat[:2]
            maxima.append(float(np.max(np.abs(res))))
    if not maxima:
        raise ValueError("empty calibration set")
    maxima.sort()
    rank = max(1, int(math.ceil(percentile * len(maxima))))
    return maxima[rank - 1]


def _global_unroll(x0, truth, host, g, n_steps, want_cache):
    """Closed-loop unroll of forecaster + corrector; returns per-step loss."""
    z = x0
    loss = 0.0
    caches = []
    states = []
    for i in range(n_steps):
        if want_cache:
            z_hat, h_cache = host.forward(z)
            z_g, g_cache = g.forward(z, z_hat, want_cache=True)
        else:
            z_hat = host.forecast(z)
            z_g = g.forward(z, z_hat)
        step_loss, diff = _uv_mse(z_g, truth[i])
        loss += step_loss
        if want_cache:
            caches.append((h_cache, g_cache, diff))
            states.append(z_g)
        z = z_g
    return loss, caches, states


def _global_unroll_backward(caches, host, g, per_elem):
    """Reverse pass through the closed-loop unroll; fills parameter grads."""
    dz_next = None
    for h_cache, g_cache, diff in reversed(caches):
        dzg = np.zeros((STATE_CHANNELS,) + diff.shape[1:])
        dzg[:2] = 2.0 * diff * per_elem
        if dz_next is not None:
            dzg += dz_next
        dx_t, dx_hat = g.backward(dzg, g_cache, accumulate=True)
        dz_next = dx_t + host.backward(dx_hat, h_cache)


def train_global(trajs, host, cfg, width=16, n_spectral=2, modes=8,
                 state_path=None, resume=False, stop_after=None):
    """Alg. Step 1: closed-loop AR training of the global corrector."""
    train, val = split_train_val(trajs, cfg.val_fraction)
    first = trajs[0]
    H, W = first.frames.shape[2], first.frames.shape[3]
    bound = clip_calibration(train, host, cfg.t0_pool)
    g = GlobalCorrector(H, W, width=width, n_spectral=n_spectral, modes=modes,
                        clip_bound=bound, seed=cfg.seed)
    opt = nn.AdamW(g.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    st = TrainerState(g, opt).maybe_resume(state_path, resume)
    per_elem = 1.0 / (2 * H * W)
    history = []
    while st.round_idx < cfg.epochs and not st.done:
        if stop_after is not None and len(history) >= stop_after:
            return g, history
        epoch = st.round_idx
        opt.lr = nn.cosine_lr(cfg.lr, epoch, cfg.epochs, floor=cfg.lr * 0.05)
        rng = np.random.default_rng([cfg.seed, 101, epoch])
        order = rng.permutation(len(train))
        for ti in order:
            traj = train[ti]
            t0 = int(rng.choice(cfg.t0_pool))
            n = min(cfg.ar_depth, len(traj) - t0 - 1)
            truth = traj.frames[t0 + 1: t0 + 1 + n]
            nn.zero_grads(g.params())
            loss, caches, _ = _global_unroll(traj.frames[t0], truth, host, g, n, True)
            _global_unroll_backward(caches, host, g, per_elem)
            gnorm = nn.global_grad_norm(g.params())
            nn.clip_grad_norm(g.params(), cfg.grad_clip)
            opt.step()
        val_loss = validation_loss_global(val, host, g, cfg)
        history.append(
            f"epoch={epoch} loss={loss:.6e} lr={opt.lr:.3e} grad_norm={gnorm:.3e} "
            f"val={val_loss:.6e}"
        )
        st.observe(val_loss, cfg.patience)
        if state_path is not None:
            st.save(state_path)
    st.finalize()
    return g, history


def validation_loss_global(val, host, g, cfg):
    total = 0.0
    count = 0
    for traj in val:
        t0 = cfg.t0_pool[len(cfg.t0_pool) // 2]
        n = min(cfg.ar_depth, len(traj) - t0 - 1)
        truth = traj.frames[t0 + 1: t0 + 1 + n]
        loss, _, _ = _global_unroll(traj.frames[t0], truth, host, g, n, False)
        total += loss
        count += 1
    return total / max(count, 1)


def patch_targets(x_t, x_star, host, g, part):
    """Dense per-block supervision: windows of (x_t ++ x_g) and the
    center-cropped post-global uv residual per block."""
    x_hat = host.forecast(x_t)
    x_g = g.forward(x_t, x_hat)
    stacked = np.concatenate([x_t, x_g], axis=0)
    windows = extract_all_windows(stacked, part)
    res = x_star[:2] - x_g[:2]
    hb, wb = part.H // part.b, part.W // part.b
    targets = (
        res.reshape(2, hb, part.b, wb, part.b)
        .transpose(1, 3, 0, 2, 4)
        .reshape(part.n_blocks, 2, part.b, part.b)
    )
    return windows, targets


def patch_weights(targets, mode, eps=1e-12):
    """Per-block weights: 1, or the block's share of the max residual energy."""
    if mode == "uniform":
        return np.ones(targets.shape[0])
    energy = np.sum(targets ** 2, axis=(1, 2, 3))
    return energy / (energy.max() + eps)


def patch_loss(pred_windows, targets, weights, h):
    """Weighted mean over blocks of per-block MSE on the cropped residual."""
    cropped = center_crop(pred_windows, h)
    diff = cropped - targets
    per_block = np.mean(diff ** 2, axis=(1, 2, 3))
    loss = float(np.sum(weights * per_block) / len(weights))
    return loss, diff


def _patch_pool(trajs, host, g, part, t0_pool):
    """Precompute (stacked input field, residual targets, weights-energy)
    per sample; the frozen host/corrector make these static for Step 2a."""
    samples = []
    for traj in trajs:
        for t0 in t0_pool:
            if t0 + 1 >= len(traj):
                continue
            x_t = traj.frames[t0]
            x_hat = host.forecast(x_t)
            x_g = g.forward(x_t, x_hat)
            stacked = np.concatenate([x_t, x_g], axis=0)
            res = traj.frames[t0 + 1][:2] - x_g[:2]
            samples.append((stacked, res))
    return samples


def _sample_patches(sample, part):
    stacked, res = sample
    windows = extract_all_windows(stacked, part)
    hb, wb = part.H // part.b, part.W // part.b
    targets = (
        res.reshape(2, hb, part.b, wb, part.b)
        .transpose(1, 3, 0, 2, 4)
        .reshape(part.n_blocks, 2, part.b, part.b)
    )
    return windows, targets


def train_local_patch(trajs, host, g, cfg, part, width=24, depth=3,
                      state_path=None, resume=False, stop_after=None):
    """Alg. Step 2a: dense patch pretraining of the refiner; corrector frozen.

    The loss is taken on the bare cropped residual, before any Hann taper
    (the taper applies at write time in the rollout)."""
    train, val = split_train_val(trajs, cfg.val_fraction)
    ref = LocalRefiner(part.b, part.h, width=width, depth=depth, seed=cfg.seed)
    opt = nn.AdamW(ref.params(), lr=cfg.lr, weight_decay=0.0)
    st = TrainerState(ref, opt).maybe_resume(state_path, resume)
    pool = [t for t in cfg.t0_pool if t + 1 < len(trajs[0])]
    train_samples = _patch_pool(train, host, g, part, pool)
    val_samples = _patch_pool(val, host, g, part, pool[:2])
    history = []
    steps_per_round = max(1, cfg.steps // 10)
    n_rounds = math.ceil(cfg.steps / steps_per_round)
    n_pix = 2 * part.b * part.b
    while st.round_idx < n_rounds and not st.done:
        if stop_after is not None and len(history) >= stop_after:
            return ref, history
        rnd = st.round_idx
        rng = np.random.default_rng([cfg.seed, 202, rnd])
        n_steps = min(steps_per_round, cfg.steps - rnd * steps_per_round)
        for _ in range(n_steps):
            windows, targets = _sample_patches(
                train_samples[int(rng.integers(len(train_samples)))], part
            )
            weights = patch_weights(targets, cfg.patch_weight_mode, cfg.eps)
            nn.zero_grads(ref.params())
            pred, caches = ref.forward(windows, want_cache=True)
            loss, diff = patch_loss(pred, targets, weights, part.h)
            dcrop = 2.0 * diff * weights[:, None, None, None] / (len(weights) * n_pix)
            ref.backward(crop_adjoint(dcrop, part.h, part.b + 2 * part.h), caches)
            gnorm = nn.global_grad_norm(ref.params())
            nn.clip_grad_norm(ref.params(), cfg.grad_clip)
            opt.step()
        val_loss = _patch_val_loss(val_samples, ref, cfg, part)
        history.append(
            f"step={(rnd + 1) * steps_per_round - 1} loss={loss:.6e} lr={opt.lr:.3e} "
            f"grad_norm={gnorm:.3e} val={val_loss:.6e}"
        )
        st.observe(val_loss, cfg.patience)
        if state_path is not None:
            st.save(state_path)
    st.finalize()
    return ref, history


def _patch_val_loss(val_samples, ref, cfg, part):
    total = 0.0
    for sample in val_samples:
        windows, targets = _sample_patches(sample, part)
        weights = patch_weights(targets, cfg.patch_weight_mode, cfg.eps)
        pred = ref.forward(windows)
        loss, _ = patch_loss(pred, targets, weights, part.h)
        total += loss
    return total / max(len(val_samples), 1)


def hybrid_unroll(x0, truth, host, g, ref, part, win, n_steps, want_cache,
                  aux_weight=0.0):
    """Dense (every block active) hybrid rollout with caches for backprop."""
    z = x0
    loss = 0.0
    caches = []
    for i in range(n_steps):
        if want_cache:
            z_hat, h_cache = host.forward(z)
            z_g, g_cache = g.forward(z, z_hat, want_cache=True)
        else:
            z_hat = host.forecast(z)
            z_g = g.forward(z, z_hat)
        stacked = np.concatenate([z, z_g], axis=0)
        windows = extract_all_windows(stacked, part)
        if want_cache:
            raw, l_cache = ref.forward(windows, want_cache=True)
        else:
            raw = ref.forward(windows)
        delta = center_crop(raw, part.h)
        z_hyb = z_g.copy()
        hb, wb = part.H // part.b, part.W // part.b
        add = (win[None, None] * delta).reshape(hb, wb, 2, part.b, part.b)
        z_hyb[:2] += add.transpose(2, 0, 3, 1, 4).reshape(2, part.H, part.W)
        step_loss, diff = _uv_mse(z_hyb, truth[i])
        loss += step_loss
        if aux_weight:
            loss += aux_weight * float(np.mean(delta ** 2))
        if want_cache:
            caches.append((h_cache, g_cache, l_cache, diff, delta))
        z = z_hyb
    return loss, caches


def hybrid_unroll_backward(caches, host, g, ref, part, win, per_elem,
                           aux_weight=0.0, train_g=False):
    """Reverse pass through the dense hybrid unroll into refiner grads."""
    side = part.b + 2 * part.h
    dz_next = None
    for h_cache, g_cache, l_cache, diff, delta in reversed(caches):
        dz_hyb = np.zeros((STATE_CHANNELS,) + diff.shape[1:])
        dz_hyb[:2] = 2.0 * diff * per_elem
        if dz_next is not None:
            dz_hyb += dz_next
        hb, wb = part.H // part.b, part.W // part.b
        dadd = (
            dz_hyb[:2]
            .reshape(2, hb, part.b, wb, part.b)
            .transpose(1, 3, 0, 2, 4)
            .reshape(part.n_blocks, 2, part.b, part.b)
        )
        ddelta = win[None, None] * dadd
        if aux_weight:
            ddelta = ddelta + 2.0 * aux_weight * delta / delta.size
        draw = crop_adjoint(ddelta, part.h, side)
        dwindows = ref.backward(draw, l_cache, accumulate=True)
        dstacked = np.zeros((2 * STATE_CHANNELS, part.H, part.W))
        scatter_add_windows(dstacked, part, dwindows)
        dz = dstacked[:STATE_CHANNELS]
        dz_g = dstacked[STATE_CHANNELS:] + dz_hyb
        dx_t, dx_hat = g.backward(dz_g, g_cache, accumulate=train_g)
        dz_next = dz + dx_t + host.backward(dx_hat, h_cache)


def _curriculum_depth(epoch, cfg):
    lo = math.floor(cfg.curriculum[0] * cfg.epochs)
    hi = math.floor(cfg.curriculum[1] * cfg.epochs)
    if epoch < lo:
        return 1
    if epoch < hi:
        return min(2, cfg.ar_depth)
    return cfg.ar_depth


def train_local_ar(trajs, host, g, ref0, cfg, part, state_path=None, resume=False,
                   stop_after=None):
    """Alg. Step 2b: hybrid AR fine-tuning at full coverage, corrector frozen."""
    train, val = split_train_val(trajs, cfg.val_fraction)
    ref = LocalRefiner(part.b, part.h, width=ref0.width, depth=ref0.depth, seed=ref0.seed)
    for p, p0 in zip(ref.params(), ref0.params()):
        p.value[...] = p0.value
    opt = nn.AdamW(ref.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    st = TrainerState(ref, opt).maybe_resume(state_path, resume)
    win = hann_window(part.b)
    per_elem = 1.0 / (2 * part.H * part.W)
    history = []
    while st.round_idx < cfg.epochs and not st.done:
        if stop_after is not None and len(history) >= stop_after:
            return ref, history
        epoch = st.round_idx
        depth = _curriculum_depth(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, 303, epoch])
        order = rng.permutation(len(train))
        for ti in order:
            traj = train[ti]
            t0 = int(rng.choice(cfg.t0_pool))
            n = min(depth, len(traj) - t0 - 1)
            truth = traj.frames[t0 + 1: t0 + 1 + n]
            nn.zero_grads(ref.params())
            loss, caches = hybrid_unroll(
                traj.frames[t0], truth, host, g, ref, part, win, n, True,
                aux_weight=cfg.aux_weight,
            )
            hybrid_unroll_backward(
                caches, host, g, ref, part, win, per_elem, aux_weight=cfg.aux_weight
            )
            gnorm = nn.global_grad_norm(ref.params())
            nn.clip_grad_norm(ref.params(), cfg.grad_clip)
            opt.step()
        val_loss = _hybrid_val_loss(val, host, g, ref, cfg, part, win)
        history.append(
            f"epoch={epoch} depth={depth} loss={loss:.6e} lr={opt.lr:.3e} "
            f"grad_norm={gnorm:.3e} val={val_loss:.6e}"
        )
        st.observe(val_loss, cfg.patience)
        if state_path is not None:
            st.save(state_path)
    st.finalize()
    return ref, history


def _hybrid_val_loss(val, host, g, ref, cfg, part, win):
    total = 0.0
    count = 0
    for traj in val:
        t0 = cfg.t0_pool[len(cfg.t0_pool) // 2]
        n = min(cfg.ar_depth, len(traj) - t0 - 1)
        truth = traj.frames[t0 + 1: t0 + 1 + n]
        loss, _ = hybrid_unroll(
            traj.frames[t0], truth, host, g, ref, part, win, n, False
        )
        total += loss
        count += 1
    return total / max(count, 1)
