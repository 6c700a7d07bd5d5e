"""Physical-fidelity diagnostics: divergence, radial KE spectrum, drifts.

All derivatives assume the periodic [0, 2pi)^2 grid convention of fields.py.
"""

from dataclasses import dataclass

import numpy as np


def _central_diff(a, axis, spacing):
    return (np.roll(a, -1, axis=axis) - np.roll(a, 1, axis=axis)) / (2.0 * spacing)


def mean_abs_divergence(f):
    """Mean |du/dx + dv/dy| by periodic central differences."""
    u, v = f[0], f[1]
    H, W = u.shape
    dx = 2.0 * np.pi / W
    dy = 2.0 * np.pi / H
    div = _central_diff(u, axis=1, spacing=dx) + _central_diff(v, axis=0, spacing=dy)
    return float(np.mean(np.abs(div)))


def shell_wavenumbers(H, W):
    """Integer radial shell index round(|k|) for each FFT mode."""
    ky = np.fft.fftfreq(H) * H
    kx = np.fft.fftfreq(W) * W
    kmag = np.sqrt(kx[None, :] ** 2 + ky[:, None] ** 2)
    return np.rint(kmag).astype(int)


def ke_spectrum(f):
    """Radially-binned kinetic-energy spectrum E(k), k = 0, 1, ...

    Normalized so that sum_k E(k) equals the spatial mean of u^2 + v^2
    (twice the mean kinetic energy).
    """
    u, v = f[0], f[1]
    H, W = u.shape
    uh = np.fft.fft2(u)
    vh = np.fft.fft2(v)
    energy = (np.abs(uh) ** 2 + np.abs(vh) ** 2) / (H * W) ** 2
    shells = shell_wavenumbers(H, W)
    n_shell = shells.max() + 1
    spec = np.zeros(n_shell)
    np.add.at(spec, shells.ravel(), energy.ravel())
    return spec


def total_ke(f):
    """Mean kinetic energy (1/2)<u^2 + v^2>."""
    return float(0.5 * np.mean(f[0] ** 2 + f[1] ** 2))


def enstrophy(f):
    """Mean enstrophy (1/2)<omega^2> with spectral curl of (u, v)."""
    u, v = f[0], f[1]
    H, W = u.shape
    ky = np.fft.fftfreq(H)[:, None] * H
    kx = np.fft.fftfreq(W)[None, :] * W
    om = np.real(np.fft.ifft2(1j * kx * np.fft.fft2(v) - 1j * ky * np.fft.fft2(u)))
    return float(0.5 * np.mean(om ** 2))


def high_band_energy(spec, H):
    """Energy above half the maximum resolved wavenumber, k > k_max/2."""
    kmax = H // 2
    cut = kmax // 2
    return float(np.sum(spec[cut + 1:]))


def drift(q_initial, q_final):
    """(q_final - q_initial) / |q_initial|."""
    if q_initial == 0:
        raise ValueError("drift undefined for zero initial value")
    return float((q_final - q_initial) / abs(q_initial))


@dataclass
class DiagnosticsReport:
    mean_abs_div: float
    spectrum: np.ndarray
    total_ke: float
    enstrophy: float
    high_band: float
    ke_drift: float | None = None
    enstrophy_drift: float | None = None

    @classmethod
    def from_field(cls, f, initial=None):
        spec = ke_spectrum(f)
        ke = total_ke(f)
        ens = enstrophy(f)
        kdrift = edrift = None
        if initial is not None:
            kdrift = drift(total_ke(initial), ke)
            edrift = drift(enstrophy(initial), ens)
        return cls(
            mean_abs_div=mean_abs_divergence(f),
            spectrum=spec,
            total_ke=ke,
            enstrophy=ens,
            high_band=high_band_energy(spec, f.shape[1]),
            ke_drift=kdrift,
            enstrophy_drift=edrift,
        )

    def as_dict(self):
        out = {
            "mean_abs_div": self.mean_abs_div,
            "total_ke": self.total_ke,
            "enstrophy": self.enstrophy,
            "high_band_energy": self.high_band,
        }
        if self.ke_drift is not None:
            out["ke_drift"] = self.ke_drift
            out["enstrophy_drift"] = self.enstrophy_drift
        return out
