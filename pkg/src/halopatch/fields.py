"""Grid, field, and block-geometry primitives.

Fields are float64 arrays of shape [C, H, W] on a periodic [0, 2pi)^2 grid.
State fields carry C = 4 channels in the fixed order (u, v, s1, s2); learned
residuals are velocity-only [2, H, W]. All operations here are pure.
"""

from dataclasses import dataclass

import numpy as np

U, V, S1, S2 = 0, 1, 2, 3
N_CHANNELS = 4

FIELD_MAGIC = b"FLD1"
_HEADER_BYTES = 16


class GeometryError(ValueError):
    """Raised for invalid block/halo geometries or shape mismatches."""


def validate_field(f, channels=N_CHANNELS):
    f = np.asarray(f)
    if f.ndim != 3 or f.shape[0] != channels:
        raise GeometryError(f"expected [{channels},H,W] field, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite entries")
    return f


def project_uv(f):
    """Velocity channels of a state field, shape [2, H, W] (a view)."""
    return f[:2]


def embed_uv(uv, template):
    """New field with the given velocity channels and template's s1, s2."""
    out = template.copy()
    out[:2] = uv
    return out


@dataclass(frozen=True)
class BlockPartition:
    """Non-overlapping b x b center blocks tiling an H x W periodic grid,
    each readable through a halo of width h. Block order is row-major."""

    H: int
    W: int
    b: int
    h: int

    def __post_init__(self):
        if self.b <= 0 or self.H % self.b or self.W % self.b:
            raise GeometryError(f"block edge {self.b} must divide grid {self.H}x{self.W}")
        if not 0 < self.h < self.b:
            raise GeometryError(f"degenerate halo: need 0 < h < b, got h={self.h}, b={self.b}")

    @property
    def n_blocks(self):
        return (self.H // self.b) * (self.W // self.b)

    @property
    def window_side(self):
        return self.b + 2 * self.h

    @property
    def blocks_per_row(self):
        return self.W // self.b

    def origin(self, block_idx):
        """Top-left pixel (row, col) of center block block_idx."""
        if not 0 <= block_idx < self.n_blocks:
            raise IndexError(f"block index {block_idx} out of range [0, {self.n_blocks})")
        r, c = divmod(block_idx, self.blocks_per_row)
        return r * self.b, c * self.b

    def window_indices(self, block_idx):
        """Wrapped (rows, cols) index vectors of the halo-extended window."""
        r0, c0 = self.origin(block_idx)
        rows = np.arange(r0 - self.h, r0 + self.b + self.h) % self.H
        cols = np.arange(c0 - self.h, c0 + self.b + self.h) % self.W
        return rows, cols

    def all_window_indices(self):
        """Stacked wrapped window indices, shapes [B, b+2h] each."""
        rows = np.empty((self.n_blocks, self.window_side), dtype=np.intp)
        cols = np.empty((self.n_blocks, self.window_side), dtype=np.intp)
        for i in range(self.n_blocks):
            rows[i], cols[i] = self.window_indices(i)
        return rows, cols


def make_partition(H, W, b, h):
    return BlockPartition(H=H, W=W, b=b, h=h)


def halo_extract(f, p, block_idx):
    """Window of side b+2h centered on block block_idx, periodic wrap."""
    rows, cols = p.window_indices(block_idx)
    return f[:, rows[:, None], cols[None, :]]


def extract_all_windows(f, p):
    """All halo windows of a [C,H,W] array as one [B, C, b+2h, b+2h] batch."""
    rows, cols = p.all_window_indices()
    win = f[:, rows[:, :, None], cols[:, None, :]]
    # fancy indexing yields [C, B, side, side]
    return np.ascontiguousarray(win.transpose(1, 0, 2, 3))


def scatter_add_windows(df, p, dwin):
    """Adjoint of extract_all_windows: accumulate window grads into df in place.

    Overlapping halo pixels accumulate, hence np.add.at.
    """
    rows, cols = p.all_window_indices()
    C = df.shape[0]
    np.add.at(
        df,
        (
            np.arange(C)[:, None, None, None],
            rows[None, :, :, None],
            cols[None, :, None, :],
        ),
        dwin.transpose(1, 0, 2, 3),
    )


def center_crop(w, h):
    """Drop h pixels from each side of the trailing two axes."""
    if h == 0:
        return w
    side_r, side_c = w.shape[-2], w.shape[-1]
    if side_r < 2 * h + 1 or side_c < 2 * h + 1:
        raise GeometryError(f"window sides {side_r}x{side_c} too small for halo {h}")
    return w[..., h:side_r - h, h:side_c - h]


def crop_adjoint(g, h, side):
    """Adjoint of center_crop: zero-pad the gradient back to window size."""
    out = np.zeros(g.shape[:-2] + (side, side), dtype=g.dtype)
    out[..., h:side - h, h:side - h] = g
    return out


def hann_profile(b):
    """1-D half-sample-offset Hann profile, strictly positive entries."""
    if b < 2:
        raise GeometryError("Hann window needs b >= 2")
    n = np.arange(b)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * (n + 0.5) / b))


def hann_window(b):
    """Separable [b, b] taper w(i)*w(j); entries in (0, 1]."""
    w = hann_profile(b)
    return np.outer(w, w)


def apply_block_residual(xg, p, block_idx, delta, win):
    """Add a Hann-tapered velocity residual onto center block block_idx.

    Returns a new field; every pixel outside the block and all non-velocity
    channels are bit-identical to the input.
    """
    if delta.shape != (2, p.b, p.b):
        raise GeometryError(f"residual shape {delta.shape} != (2, {p.b}, {p.b})")
    if not np.all(np.isfinite(delta)):
        raise ValueError("residual contains non-finite entries")
    out = xg.copy()
    write_block_residual(out, p, block_idx, delta, win)
    return out


def write_block_residual(out, p, block_idx, delta, win):
    """In-place variant of apply_block_residual; touches only uv on the block."""
    r0, c0 = p.origin(block_idx)
    out[:2, r0:r0 + p.b, c0:c0 + p.b] += win[None] * delta


def block_mean_map(r, p):
    """Per-block arithmetic mean of an [H, W] map, row-major block order."""
    hb, wb = p.H // p.b, p.W // p.b
    return r.reshape(hb, p.b, wb, p.b).mean(axis=(1, 3)).ravel()


def block_sum_map(r, p):
    hb, wb = p.H // p.b, p.W // p.b
    return r.reshape(hb, p.b, wb, p.b).sum(axis=(1, 3)).ravel()


def save_field(path, f):
    """Serialize one [C,H,W] field: 16-byte header, float64 LE row-major."""
    with open(path, "wb") as fh:
        _write_record(fh, f)


def load_field(path):
    with open(path, "rb") as fh:
        f = _read_record(fh)
    if f is None:
        raise ValueError(f"{path}: empty field file")
    return f


def save_fields(path, frames):
    """Serialize a sequence of fields back-to-back into one file."""
    with open(path, "wb") as fh:
        for f in frames:
            _write_record(fh, f)


def load_fields(path):
    frames = []
    with open(path, "rb") as fh:
        while True:
            f = _read_record(fh)
            if f is None:
                break
            frames.append(f)
    return frames


def _write_record(fh, f):
    f = np.ascontiguousarray(f, dtype="<f8")
    if f.ndim != 3:
        raise GeometryError(f"expected [C,H,W], got shape {f.shape}")
    C, H, W = f.shape
    fh.write(FIELD_MAGIC)
    fh.write(np.asarray([C, H, W], dtype="<u4").tobytes())
    fh.write(f.tobytes())


def _read_record(fh):
    header = fh.read(_HEADER_BYTES)
    if not header:
        return None
    if len(header) != _HEADER_BYTES or header[:4] != FIELD_MAGIC:
        raise ValueError("bad field header")
    C, H, W = np.frombuffer(header[4:], dtype="<u4")
    n = int(C) * int(H) * int(W)
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise ValueError("truncated field record")
    return np.frombuffer(raw, dtype="<f8").reshape(int(C), int(H), int(W)).copy()
