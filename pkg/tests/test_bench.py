import numpy as np
import pytest

from halopatch.bench import (
    CFLError,
    SolverConfig,
    SpectralGrid,
    SurrogateHost,
    SurrogateHostConfig,
    generate_dataset,
    generate_trajectory,
    load_dataset,
    ns_step,
    save_dataset,
    step_spectrum,
    surrogate_forecast,
    truth_step,
)
from halopatch.diagnostics import mean_abs_divergence, total_ke
from halopatch.fields import block_mean_map, make_partition
from halopatch.stats import gini


def solver(N=32, nu=1e-3, dt=0.01, family="gaussian", seed=0, substeps=3):
    return SolverConfig(H=N, W=N, nu=nu, dt=dt, family=family, seed=seed,
                        substeps_per_frame=substeps)


def grid_xy(N):
    x = 2.0 * np.pi * np.arange(N)[None, :] / N * np.ones((N, 1))
    y = 2.0 * np.pi * np.arange(N)[:, None] / N * np.ones((1, N))
    return x, y


class TestNsStep:
    def test_zero_is_fixed_point(self):
        cfg = solver()
        out = ns_step(np.zeros((32, 32)), cfg)
        assert np.all(out == 0.0)

    def test_taylor_green_decay(self):
        # closed-form oracle: omega(t) = 2 exp(-2 nu t) cos x cos y
        cfg = solver(N=32, nu=1e-2, dt=0.01)
        x, y = grid_xy(32)
        om0 = 2.0 * np.cos(x) * np.cos(y)
        om = om0.copy()
        steps = 40
        for _ in range(steps):
            om = ns_step(om, cfg)
        expected = np.exp(-2.0 * cfg.nu * cfg.dt * steps) * om0
        assert np.max(np.abs(om - expected)) < 1e-8

    def test_energy_never_increases_unforced(self):
        cfg = solver(N=32, nu=2e-3)
        traj = generate_trajectory(cfg, 0, 1)
        state = traj.frames[0]
        om = state[3]
        ke_prev = total_ke(state)
        for _ in range(10):
            om = ns_step(om, cfg)
            grid = SpectralGrid.get(32, 32)
            from halopatch.bench import state_from_vorticity_hat

            state = state_from_vorticity_hat(np.fft.fft2(om), grid)
            ke = total_ke(state)
            assert ke <= ke_prev + 1e-12
            ke_prev = ke

    def test_cfl_violation_raises(self):
        cfg = solver(N=32, dt=1.0)
        x, y = grid_xy(32)
        with pytest.raises(CFLError):
            ns_step(10.0 * np.cos(x) * np.cos(y), cfg)

    def test_dealiased_modes_stay_exactly_zero_in_spectrum(self):
        cfg = solver(N=32)
        grid = SpectralGrid.get(32, 32)
        rng = np.random.default_rng(0)
        w_hat = grid.dealias * np.fft.fft2(rng.standard_normal((32, 32)))
        for _ in range(5):
            w_hat = step_spectrum(w_hat, grid, cfg.nu, cfg.dt)
        outside = w_hat[grid.dealias == 0.0]
        assert np.all(outside == 0.0)

    def test_dealiased_modes_small_through_real_interface(self):
        cfg = solver(N=32)
        grid = SpectralGrid.get(32, 32)
        traj = generate_trajectory(cfg, 1, 1)
        om = traj.frames[0][3]
        for _ in range(5):
            om = ns_step(om, cfg)
        spec = np.fft.fft2(om)
        scale = np.max(np.abs(spec))
        assert np.max(np.abs(spec[grid.dealias == 0.0])) < 1e-13 * scale

    def test_momentum_conserved(self):
        cfg = solver(N=32, family="shear", seed=4)
        traj = generate_trajectory(cfg, 0, 6)
        for frame in traj.frames:
            assert abs(np.mean(frame[0])) < 1e-12
            assert abs(np.mean(frame[1])) < 1e-12


class TestDatasetGeneration:
    def test_deterministic_rerun(self):
        a = generate_dataset(solver(seed=5), 2, 4)
        b = generate_dataset(solver(seed=5), 2, 4)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.frames, tb.frames)

    def test_shear_family_opposing_strips(self):
        cfg = solver(N=64, family="shear", seed=1)
        traj = generate_trajectory(cfg, 0, 1)
        u = traj.frames[0][0]
        mid_band = np.mean(u[24:40, :])   # around y = pi
        outer_band = np.mean(np.concatenate([u[:8, :], u[-8:, :]]))
        assert np.sign(mid_band) != np.sign(outer_band)
        assert abs(mid_band) > 0.3 and abs(outer_band) > 0.3

    def test_frames_divergence_free(self):
        for family in ("gaussian", "sines", "shear", "piecewise"):
            cfg = solver(N=32, family=family, seed=2)
            traj = generate_trajectory(cfg, 0, 3)
            for frame in traj.frames:
                assert _spectral_divergence(frame) < 1e-10

    def test_channels_hold_streamfunction_and_vorticity(self):
        cfg = solver(N=32, family="sines", seed=3)
        traj = generate_trajectory(cfg, 0, 1)
        u, v, psi, om = traj.frames[0]
        grid = SpectralGrid.get(32, 32)
        u_back = np.real(np.fft.ifft2(1j * grid.ky * np.fft.fft2(psi)))
        assert np.allclose(u_back, u, atol=1e-10)
        om_back = np.real(np.fft.ifft2(grid.k2 * np.fft.fft2(psi)))
        assert np.allclose(om_back, om, atol=1e-8)

    def test_trajectory_length_contract(self):
        traj = generate_trajectory(solver(), 0, 7)
        assert len(traj) == 7
        assert np.all(np.isfinite(traj.frames))

    def test_save_load_round_trip(self, tmp_path):
        trajs = generate_dataset(solver(seed=6), 3, 4)
        save_dataset(tmp_path / "ds", trajs)
        back = load_dataset(tmp_path / "ds")
        assert len(back) == 3
        for a, b in zip(trajs, back):
            assert np.array_equal(a.frames, b.frames)
            assert a.config == b.config

    def test_rejects_bad_family(self):
        with pytest.raises(ValueError):
            SolverConfig(family="vortex_soup")


def _spectral_divergence(frame):
    H, W = frame.shape[1:]
    grid = SpectralGrid.get(H, W)
    div = np.real(
        np.fft.ifft2(1j * grid.kx * np.fft.fft2(frame[0]))
        + np.fft.ifft2(1j * grid.ky * np.fft.fft2(frame[1]))
    )
    return float(np.mean(np.abs(div)))


class TestSurrogate:
    def test_degenerate_config_matches_truth_step(self):
        cfg = solver(N=32, family="gaussian", seed=7)
        host = SurrogateHost(
            SurrogateHostConfig(mode_cutoff=1.0, bias_scale=0.0, noise_scale=0.0, seed=7),
            cfg,
        )
        traj = generate_trajectory(cfg, 0, 2)
        a = host.forecast(traj.frames[0])
        b = truth_step(traj.frames[0], cfg)
        assert np.array_equal(a, b)

    def test_determinism(self):
        cfg = solver(N=32, seed=8)
        hcfg = SurrogateHostConfig(seed=8)
        traj = generate_trajectory(cfg, 0, 2)
        a = surrogate_forecast(traj.frames[0], hcfg, cfg)
        b = surrogate_forecast(traj.frames[0], hcfg, cfg)
        assert np.array_equal(a, b)

    def test_rollout_error_grows_monotonically(self, desk_host_and_data):
        host, trajs, _ = desk_host_and_data
        traj = trajs[-1]
        z = traj.frames[3]
        errs = []
        for i in range(10):
            z = host.forecast(z)
            truth = traj.frames[4 + i]
            errs.append(np.linalg.norm(z[:2] - truth[:2]) / np.linalg.norm(truth[:2]))
        grows = sum(errs[i + 1] > errs[i] for i in range(9))
        assert grows >= 7  # monotone in >= 8/10 steps incl. the first

    def test_error_concentration_gini(self, desk_host_and_data):
        host, trajs, part = desk_host_and_data
        traj = trajs[-1]
        z = traj.frames[3]
        for i in range(10):
            z = host.forecast(z)
        truth = traj.frames[13]
        err = ((z[:2] - truth[:2]) ** 2).sum(axis=0)
        shares = block_mean_map(err, part)
        assert gini(shares) > 0.2

    def test_bias_and_cutoff_validation(self):
        with pytest.raises(ValueError):
            SurrogateHostConfig(mode_cutoff=0.0)
        with pytest.raises(ValueError):
            SurrogateHostConfig(mode_cutoff=1.5)


@pytest.fixture(scope="module")
def desk_host_and_data():
    cfg = SolverConfig(H=64, W=64, nu=1e-3, dt=0.01, family="shear", seed=11,
                       substeps_per_frame=5)
    host = SurrogateHost(SurrogateHostConfig(seed=11), cfg)
    trajs = generate_dataset(cfg, 2, 16)
    part = make_partition(64, 64, 8, 4)
    return host, trajs, part
