"""Synthetic ground-truth generator and degraded surrogate forecaster.

Ground truth is 2-D incompressible Navier-Stokes in vorticity form on a
periodic [0, 2pi)^2 grid: spectral derivatives, 2/3-rule dealiased advection,
integrating-factor RK4 in time. The surrogate forecaster wraps the same
stepper behind spectral truncation, a low-mode bias, and a smooth seeded
perturbation tied to the local velocity-gradient magnitude, so its rollout
error drifts and concentrates at shear/vortex structures the way a frozen
pretrained solver's does. The surrogate also exposes a hand-written adjoint
(vector-Jacobian product) so training can backpropagate through it.
"""

from dataclasses import dataclass

import numpy as np

from .fields import U, V, save_fields, load_fields

CFL_LIMIT = 0.5


class CFLError(RuntimeError):
    """Time step violates the advective CFL bound; step rejected."""


@dataclass(frozen=True)
class SolverConfig:
    H: int = 64
    W: int = 64
    nu: float = 1.0e-3
    dt: float = 0.01
    family: str = "shear"
    seed: int = 0
    substeps_per_frame: int = 5
    forcing_amplitude: float = 0.0  # constant Kolmogorov-type column forcing

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if self.dt <= 0:
            raise ValueError("time step must be positive")
        if self.family not in IC_FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {sorted(IC_FAMILIES)}")

    @property
    def frame_dt(self):
        return self.dt * self.substeps_per_frame


@dataclass(frozen=True)
class SurrogateHostConfig:
    mode_cutoff: float = 0.6
    bias_scale: float = 0.05
    noise_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mode_cutoff <= 1:
            raise ValueError("mode_cutoff must lie in (0, 1]")


@dataclass
class Trajectory:
    frames: np.ndarray  # [T, 4, H, W]
    dt: float
    config: SolverConfig
    traj_seed: int = 0

    def __len__(self):
        return self.frames.shape[0]


class SpectralGrid:
    """Cached wavenumber arrays and masks for one (H, W) resolution."""

    _cache = {}

    def __init__(self, H, W):
        self.H, self.W = H, W
        self.ky = (np.fft.fftfreq(H) * H)[:, None] * np.ones((1, W))
        self.kx = (np.fft.fftfreq(W) * W)[None, :] * np.ones((H, 1))
        self.k2 = self.kx ** 2 + self.ky ** 2
        inv = np.zeros_like(self.k2)
        nz = self.k2 > 0
        inv[nz] = 1.0 / self.k2[nz]
        self.inv_k2 = inv
        self.kmag = np.sqrt(self.k2)
        # 2/3-rule square mask
        self.dealias = (
            (np.abs(self.kx) < (2.0 / 3.0) * (W // 2))
            & (np.abs(self.ky) < (2.0 / 3.0) * (H // 2))
        ).astype(float)
        # spectral symbols for velocity recovery from vorticity
        self.sym_u = 1j * self.ky * self.inv_k2
        self.sym_v = -1j * self.kx * self.inv_k2

    @classmethod
    def get(cls, H, W):
        key = (H, W)
        if key not in cls._cache:
            cls._cache[key] = cls(H, W)
        return cls._cache[key]


def _fft2(a):
    return np.fft.fft2(a)


def _ifft2r(a):
    return np.real(np.fft.ifft2(a))


def velocity_from_vorticity_hat(w_hat, grid):
    u = _ifft2r(grid.sym_u * w_hat)
    v = _ifft2r(grid.sym_v * w_hat)
    return u, v


def state_from_vorticity_hat(w_hat, grid):
    """Full 4-channel state (u, v, streamfunction, vorticity)."""
    u, v = velocity_from_vorticity_hat(w_hat, grid)
    psi = _ifft2r(grid.inv_k2 * w_hat)
    om = _ifft2r(w_hat)
    return np.stack([u, v, psi, om])


def vorticity_hat_from_velocity(u, v, grid):
    return 1j * grid.kx * _fft2(v) - 1j * grid.ky * _fft2(u)


def _check_cfl(u, v, dt, H):
    umax = max(np.max(np.abs(u)), np.max(np.abs(v)))
    if dt * umax * H / (2.0 * np.pi) >= CFL_LIMIT:
        raise CFLError(
            f"CFL violation: dt*max|u|*H/(2pi) = {dt * umax * H / (2 * np.pi):.3f} >= {CFL_LIMIT}"
        )


def _nonlinear(w_hat, grid, dt, forcing_hat, want_cache=False):
    """Dealiased advection term -(u.grad omega) in spectral space."""
    u = _ifft2r(grid.sym_u * w_hat)
    v = _ifft2r(grid.sym_v * w_hat)
    wx = _ifft2r(1j * grid.kx * w_hat)
    wy = _ifft2r(1j * grid.ky * w_hat)
    _check_cfl(u, v, dt, grid.H)
    adv = u * wx + v * wy
    n_hat = -grid.dealias * _fft2(adv)
    if forcing_hat is not None:
        n_hat = n_hat + forcing_hat
    if want_cache:
        return n_hat, (u, v, wx, wy)
    return n_hat


def _nonlinear_adjoint(g_n, cache, grid):
    """VJP of _nonlinear w.r.t. w_hat, complex (Re, Im) gradient convention."""
    u, v, wx, wy = cache
    scale = grid.H * grid.W
    dadv = scale * _ifft2r(-grid.dealias * g_n)
    du = dadv * wx
    dv = dadv * wy
    dwx = dadv * u
    dwy = dadv * v
    g = np.conj(grid.sym_u) * _fft2(du)
    g += np.conj(grid.sym_v) * _fft2(dv)
    g += np.conj(1j * grid.kx) * _fft2(dwx)
    g += np.conj(1j * grid.ky) * _fft2(dwy)
    return g / scale


def step_spectrum(w_hat, grid, nu, dt, forcing_hat=None, want_cache=False):
    """One integrating-factor RK4 substep on the vorticity spectrum.

    Viscous decay is applied exactly via exp(-nu k^2 dt).
    """
    e_half = np.exp(-nu * grid.k2 * dt / 2.0)
    e_full = e_half ** 2
    k1 = _nonlinear(w_hat, grid, dt, forcing_hat, want_cache)
    if want_cache:
        k1, c1 = k1
    a = e_half * (w_hat + 0.5 * dt * k1)
    k2 = _nonlinear(a, grid, dt, forcing_hat, want_cache)
    if want_cache:
        k2, c2 = k2
    b = e_half * w_hat + 0.5 * dt * k2
    k3 = _nonlinear(b, grid, dt, forcing_hat, want_cache)
    if want_cache:
        k3, c3 = k3
    c = e_full * w_hat + dt * e_half * k3
    k4 = _nonlinear(c, grid, dt, forcing_hat, want_cache)
    if want_cache:
        k4, c4 = k4
    w_next = e_full * w_hat + (dt / 6.0) * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)
    if want_cache:
        return w_next, (e_half, e_full, c1, c2, c3, c4)
    return w_next


def step_spectrum_adjoint(g_out, cache, grid, dt):
    """VJP of step_spectrum w.r.t. the input spectrum."""
    e_half, e_full, c1, c2, c3, c4 = cache
    g_w = e_full * g_out
    g_k1 = (dt / 6.0) * e_full * g_out
    g_k2 = (dt / 3.0) * e_half * g_out
    g_k3 = (dt / 3.0) * e_half * g_out
    g_k4 = (dt / 6.0) * g_out
    g_c = _nonlinear_adjoint(g_k4, c4, grid)
    g_w += e_full * g_c
    g_k3 += dt * e_half * g_c
    g_b = _nonlinear_adjoint(g_k3, c3, grid)
    g_w += e_half * g_b
    g_k2 += 0.5 * dt * g_b
    g_a = _nonlinear_adjoint(g_k2, c2, grid)
    g_w += e_half * g_a
    g_k1 += 0.5 * dt * e_half * g_a
    g_w += _nonlinear_adjoint(g_k1, c1, grid)
    return g_w


def _forcing_hat(cfg, grid):
    if cfg.forcing_amplitude == 0.0:
        return None
    y = 2.0 * np.pi * np.arange(cfg.H)[:, None] / cfg.H * np.ones((1, cfg.W))
    f_omega = -4.0 * cfg.forcing_amplitude * np.cos(4.0 * y)
    return grid.dealias * _fft2(f_omega)


def ns_step(omega, cfg):
    """One time step of vorticity-form NS on a real [H, W] vorticity field."""
    grid = SpectralGrid.get(cfg.H, cfg.W)
    w_hat = grid.dealias * _fft2(omega)
    w_next = step_spectrum(w_hat, grid, cfg.nu, cfg.dt, _forcing_hat(cfg, grid))
    return _ifft2r(w_next)


# ---------------------------------------------------------------------------
# Initial-condition families


def _ic_gaussian(grid, rng):
    white = rng.standard_normal((grid.H, grid.W))
    k0 = 6.0
    filt = np.exp(-((grid.kmag / k0) ** 2)) * grid.dealias
    filt[0, 0] = 0.0
    return filt * _fft2(white)


def _ic_sines(grid, rng):
    om = np.zeros((grid.H, grid.W))
    x = 2.0 * np.pi * np.arange(grid.W)[None, :] / grid.W
    y = 2.0 * np.pi * np.arange(grid.H)[:, None] / grid.H
    for _ in range(4):
        kx = rng.integers(1, 5)
        ky = rng.integers(1, 5)
        amp = rng.uniform(0.5, 1.5)
        phx = rng.uniform(0, 2 * np.pi)
        phy = rng.uniform(0, 2 * np.pi)
        om = om + amp * np.sin(kx * x + phx) * np.sin(ky * y + phy)
    w_hat = grid.dealias * _fft2(om)
    w_hat[0, 0] = 0.0
    return w_hat


def _ic_shear(grid, rng):
    # two opposing velocity strips plus a small sinusoidal trigger
    x = 2.0 * np.pi * np.arange(grid.W)[None, :] / grid.W * np.ones((grid.H, 1))
    y = 2.0 * np.pi * np.arange(grid.H)[:, None] / grid.H * np.ones((1, grid.W))
    rho = np.pi / 15.0
    u = np.tanh((y - np.pi / 2.0) / rho) - np.tanh((y - 3.0 * np.pi / 2.0) / rho) - 1.0
    eps = 0.05 * rng.uniform(0.8, 1.2)
    v = eps * np.sin(x + rng.uniform(0, 2 * np.pi))
    w_hat = grid.dealias * vorticity_hat_from_velocity(u, v, grid)
    w_hat[0, 0] = 0.0
    return w_hat


def _ic_piecewise(grid, rng):
    om = np.zeros((grid.H, grid.W))
    n_blobs = rng.integers(4, 8)
    for _ in range(n_blobs):
        r0 = rng.integers(0, grid.H)
        c0 = rng.integers(0, grid.W)
        hh = rng.integers(grid.H // 8, grid.H // 3)
        ww = rng.integers(grid.W // 8, grid.W // 3)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
        rows = (r0 + np.arange(hh)) % grid.H
        cols = (c0 + np.arange(ww)) % grid.W
        om[np.ix_(rows, cols)] += amp
    w_hat = grid.dealias * _fft2(om)
    w_hat[0, 0] = 0.0
    return w_hat


IC_FAMILIES = {
    "gaussian": _ic_gaussian,
    "sines": _ic_sines,
    "shear": _ic_shear,
    "piecewise": _ic_piecewise,
}


def _normalize_velocity(w_hat, grid, target=0.8):
    u, v = velocity_from_vorticity_hat(w_hat, grid)
    umax = max(np.max(np.abs(u)), np.max(np.abs(v)))
    if umax == 0:
        return w_hat
    return w_hat * (target / umax)


def initial_vorticity_hat(cfg, traj_index):
    grid = SpectralGrid.get(cfg.H, cfg.W)
    rng = np.random.default_rng([cfg.seed, traj_index])
    w_hat = IC_FAMILIES[cfg.family](grid, rng)
    return _normalize_velocity(w_hat, grid)


def generate_trajectory(cfg, traj_index, n_frames):
    """Integrate one seeded trajectory, recording full states every frame."""
    grid = SpectralGrid.get(cfg.H, cfg.W)
    f_hat = _forcing_hat(cfg, grid)
    w_hat = initial_vorticity_hat(cfg, traj_index)
    frames = np.empty((n_frames, 4, cfg.H, cfg.W))
    for t in range(n_frames):
        frames[t] = state_from_vorticity_hat(w_hat, grid)
        if t < n_frames - 1:
            for _ in range(cfg.substeps_per_frame):
                w_hat = step_spectrum(w_hat, grid, cfg.nu, cfg.dt, f_hat)
    return Trajectory(frames=frames, dt=cfg.frame_dt, config=cfg, traj_seed=traj_index)


def generate_dataset(cfg, n_traj, n_frames):
    return [generate_trajectory(cfg, i, n_frames) for i in range(n_traj)]


def save_dataset(dirpath, trajs):
    """One binary file per trajectory plus a plain-text manifest."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    cfg = trajs[0].config
    lines = [
        "format = halopatch-dataset-v1",
        f"n_traj = {len(trajs)}",
        f"n_frames = {len(trajs[0])}",
        f"H = {cfg.H}",
        f"W = {cfg.W}",
        f"nu = {cfg.nu!r}",
        f"dt = {cfg.dt!r}",
        f"family = {cfg.family}",
        f"seed = {cfg.seed}",
        f"substeps_per_frame = {cfg.substeps_per_frame}",
        f"forcing_amplitude = {cfg.forcing_amplitude!r}",
        f"frame_dt = {cfg.frame_dt!r}",
        "traj_seeds = " + ",".join(str(t.traj_seed) for t in trajs),
    ]
    with open(os.path.join(dirpath, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for i, t in enumerate(trajs):
        save_fields(os.path.join(dirpath, f"traj_{i:04d}.bin"), t.frames)


def load_dataset(dirpath):
    import os

    manifest = {}
    with open(os.path.join(dirpath, "manifest.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            k, v = line.split("=", 1)
            manifest[k.strip()] = v.strip()
    cfg = SolverConfig(
        H=int(manifest["H"]),
        W=int(manifest["W"]),
        nu=float(manifest["nu"]),
        dt=float(manifest["dt"]),
        family=manifest["family"],
        seed=int(manifest["seed"]),
        substeps_per_frame=int(manifest["substeps_per_frame"]),
        forcing_amplitude=float(manifest.get("forcing_amplitude", "0.0")),
    )
    seeds = [int(s) for s in manifest["traj_seeds"].split(",")]
    trajs = []
    for i in range(int(manifest["n_traj"])):
        frames = np.stack(load_fields(os.path.join(dirpath, f"traj_{i:04d}.bin")))
        trajs.append(Trajectory(frames=frames, dt=cfg.frame_dt, config=cfg, traj_seed=seeds[i]))
    return trajs


# ---------------------------------------------------------------------------
# Degraded surrogate forecaster


class SurrogateHost:
    """Frozen degraded forecaster: truncate, bias, step, perturb.

    Reads the velocity channels of the input state, recovers vorticity by a
    spectral curl, drops modes above mode_cutoff * k_max, scales retained
    modes by (1 + bias_scale), advances one frame with the true stepper, and
    adds a fixed seeded smooth perturbation modulated by the forecast's local
    velocity-gradient magnitude. Pure and deterministic: equal inputs give
    bit-equal outputs. `forward`/`backward` expose the differentiable path.
    """

    def __init__(self, cfg, solver_cfg):
        self.cfg = cfg
        self.solver = solver_cfg
        self.grid = SpectralGrid.get(solver_cfg.H, solver_cfg.W)
        g = self.grid
        kmax = min(solver_cfg.H, solver_cfg.W) // 2
        # input sanitized through the solver's dealias band; cutoff shrinks it
        keep = (g.kmag <= cfg.mode_cutoff * kmax) & (g.dealias > 0)
        self.trunc = np.where(keep, 1.0 + cfg.bias_scale, 0.0)
        self.trunc[0, 0] = 1.0
        self.forcing_hat = _forcing_hat(solver_cfg, g)
        rng = np.random.default_rng(cfg.seed)
        white = rng.standard_normal((2, solver_cfg.H, solver_cfg.W))
        lp = (g.kmag <= max(4, kmax // 4)).astype(float)
        lp[0, 0] = 0.0
        eta = np.stack([_ifft2r(lp * _fft2(white[i])) for i in range(2)])
        rms = np.sqrt(np.mean(eta ** 2, axis=(1, 2), keepdims=True))
        self.eta = eta / rms

    def forecast(self, state):
        out, _ = self.forward(state, want_cache=False)
        return out

    def forward(self, state, want_cache=True):
        g = self.grid
        cfg, solver = self.cfg, self.solver
        u0, v0 = state[U], state[V]
        w_hat = self.trunc * vorticity_hat_from_velocity(u0, v0, g)
        sub_caches = []
        for _ in range(solver.substeps_per_frame):
            if want_cache:
                w_hat, c = step_spectrum(
                    w_hat, g, solver.nu, solver.dt, self.forcing_hat, want_cache=True
                )
                sub_caches.append(c)
            else:
                w_hat = step_spectrum(w_hat, g, solver.nu, solver.dt, self.forcing_hat)
        u_hat = g.sym_u * w_hat
        v_hat = g.sym_v * w_hat
        u1 = _ifft2r(u_hat)
        v1 = _ifft2r(v_hat)
        psi = _ifft2r(g.inv_k2 * w_hat)
        om = _ifft2r(w_hat)
        ux = _ifft2r(1j * g.kx * u_hat)
        uy = _ifft2r(1j * g.ky * u_hat)
        vx = _ifft2r(1j * g.kx * v_hat)
        vy = _ifft2r(1j * g.ky * v_hat)
        gradmag = np.abs(ux) + np.abs(uy) + np.abs(vx) + np.abs(vy)
        out = np.stack(
            [
                u1 + cfg.noise_scale * gradmag * self.eta[0],
                v1 + cfg.noise_scale * gradmag * self.eta[1],
                psi,
                om,
            ]
        )
        cache = (sub_caches, (ux, uy, vx, vy)) if want_cache else None
        return out, cache

    def backward(self, dout, cache):
        """VJP: gradient w.r.t. the input state (all four channels)."""
        g = self.grid
        cfg, solver = self.cfg, self.solver
        sub_caches, (ux, uy, vx, vy) = cache
        scale = g.H * g.W
        du1 = dout[0].copy()
        dv1 = dout[1].copy()
        dpsi = dout[2]
        dom = dout[3]
        dgrad = cfg.noise_scale * (self.eta[0] * dout[0] + self.eta[1] * dout[1])
        dux = np.sign(ux) * dgrad
        duy = np.sign(uy) * dgrad
        dvx = np.sign(vx) * dgrad
        dvy = np.sign(vy) * dgrad
        g_w = np.conj(g.sym_u) * _fft2(du1) + np.conj(g.sym_v) * _fft2(dv1)
        g_w += g.inv_k2 * _fft2(dpsi) + _fft2(dom)
        g_w += np.conj(1j * g.kx * g.sym_u) * _fft2(dux)
        g_w += np.conj(1j * g.ky * g.sym_u) * _fft2(duy)
        g_w += np.conj(1j * g.kx * g.sym_v) * _fft2(dvx)
        g_w += np.conj(1j * g.ky * g.sym_v) * _fft2(dvy)
        g_w /= scale
        for c in reversed(sub_caches):
            g_w = step_spectrum_adjoint(g_w, c, g, solver.dt)
        g_w *= self.trunc
        du0 = scale * _ifft2r(np.conj(-1j * g.ky) * g_w)
        dv0 = scale * _ifft2r(np.conj(1j * g.kx) * g_w)
        dstate = np.zeros_like(dout)
        dstate[U] = du0
        dstate[V] = dv0
        return dstate


def surrogate_forecast(x, cfg, solver):
    """Single-call convenience wrapper around SurrogateHost.forecast."""
    return SurrogateHost(cfg, solver).forecast(x)


def truth_step(state, solver_cfg):
    """Advance a state one frame with the undegraded solver (reference)."""
    grid = SpectralGrid.get(solver_cfg.H, solver_cfg.W)
    w_hat = grid.dealias * vorticity_hat_from_velocity(state[U], state[V], grid)
    f_hat = _forcing_hat(solver_cfg, grid)
    for _ in range(solver_cfg.substeps_per_frame):
        w_hat = step_spectrum(w_hat, grid, solver_cfg.nu, solver_cfg.dt, f_hat)
    return state_from_vorticity_hat(w_hat, grid)
