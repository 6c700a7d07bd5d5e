"""Minimal differentiable layers with hand-written reverse-mode gradients.

No autodiff graph: each layer owns a forward that returns (output, cache) and
a backward that consumes (grad_output, cache), accumulates parameter
gradients, and returns the input gradient. Everything runs in float64 on
batched [N, C, H, W] arrays. Composition is explicit (Sequential).
"""

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
GELU_CUBIC = 0.044715


@dataclass
class Param:
    """A learnable tensor paired with a gradient accumulator of equal shape."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    name: str = ""

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def circ_pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")


def circ_pad_adjoint(g, p):
    """Fold wrap-padded gradient strips back onto the core array."""
    if p == 0:
        return g
    H = g.shape[2] - 2 * p
    W = g.shape[3] - 2 * p
    rows = g[:, :, p:p + H, :].copy()
    rows[:, :, H - p:, :] += g[:, :, :p, :]
    rows[:, :, :p, :] += g[:, :, p + H:, :]
    out = rows[:, :, :, p:p + W].copy()
    out[:, :, :, W - p:] += rows[:, :, :, :p]
    out[:, :, :, :p] += rows[:, :, :, p + W:]
    return out


def _windows(x, k):
    # [N, C, H', W', k, k] view over the trailing spatial axes
    return np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))


_scratch = threading.local()


def _scratch_buffer(slot, shape):
    """Reusable per-thread work arrays; avoids large alloc/free churn in the
    conv hot path. Contents never outlive a single forward/backward call."""
    store = getattr(_scratch, "bufs", None)
    if store is None:
        store = _scratch.bufs = {}
    buf = store.get(slot)
    if buf is None or buf.shape != shape:
        buf = np.empty(shape)
        store[slot] = buf
    return buf


def _im2col(x, k, slot):
    """[N, C, Hp, Wp] -> ([N, C*k*k, H*W] columns, (H, W)) for k x k windows.

    Offset-sliced contiguous copies into a pooled scratch buffer; the result
    is only valid until the next _im2col call with the same slot.
    """
    N, C, Hp, Wp = x.shape
    H, W = Hp - k + 1, Wp - k + 1
    col = _scratch_buffer(slot, (N, C, k, k, H, W))
    for a in range(k):
        for b in range(k):
            col[:, :, a, b] = x[:, :, a:a + H, b:b + W]
    return col.reshape(N, C * k * k, H * W), (H, W)


class Conv2d:
    """k x k cross-correlation with circular padding (periodic fields)."""

    def __init__(self, in_ch, out_ch, kernel=3, rng=None, zero_init=False, name="conv"):
        if kernel % 2 != 1:
            raise ValueError("odd kernels only")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = kernel
        self.pad = kernel // 2
        scale = 1.0 / np.sqrt(in_ch * kernel * kernel)
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel, kernel))
        else:
            w = (rng or np.random.default_rng()).uniform(
                -scale, scale, size=(out_ch, in_ch, kernel, kernel)
            )
        self.weight = Param(w, name=f"{name}.weight")
        self.bias = Param(np.zeros(out_ch), name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        N = x.shape[0]
        xp = circ_pad(x, self.pad)
        col, (H, W) = _im2col(xp, self.kernel, "conv_fwd")
        wmat = self.weight.value.reshape(self.out_ch, -1)
        y = np.matmul(wmat[None], col).reshape(N, self.out_ch, H, W)
        y += self.bias.value[None, :, None, None]
        return y, xp

    def backward(self, dy, cache):
        xp = cache
        k = self.kernel
        N, O, H, W = dy.shape
        col, _ = _im2col(xp, k, "conv_bwd_x")
        dy_mat = dy.reshape(N, O, H * W)
        self.weight.grad += np.matmul(dy_mat, col.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.weight.value.shape
        )
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        dy_zp = _scratch_buffer("conv_bwd_pad", (N, O, H + 2 * (k - 1), W + 2 * (k - 1)))
        dy_zp[...] = 0.0
        dy_zp[:, :, k - 1:k - 1 + H, k - 1:k - 1 + W] = dy
        dy_col, (Hp, Wp) = _im2col(dy_zp, k, "conv_bwd_dy")
        # full correlation with flipped kernels, in/out channels swapped
        w_flip = self.weight.value[:, :, ::-1, ::-1]
        wmat = np.ascontiguousarray(w_flip.transpose(1, 0, 2, 3)).reshape(self.in_ch, -1)
        dxp = np.matmul(wmat[None], dy_col).reshape(N, self.in_ch, Hp, Wp)
        return circ_pad_adjoint(dxp, self.pad)


class SpectralConv2d:
    """Fourier-space channel mixing on the lowest m modes per axis, plus a
    1x1 pointwise skip path: y = IFFT(W_spec . FFT(x)|_modes) + W_skip x + b.

    With zero spectral and skip weights removed the layer is linear; a GELU
    belongs outside (see Gelu).
    """

    def __init__(self, in_ch, out_ch, modes, rng=None, name="spec"):
        self.in_ch, self.out_ch, self.modes = in_ch, out_ch, modes
        rng = rng or np.random.default_rng()
        scale = 1.0 / (in_ch * out_ch)
        # trailing axis holds (real, imag)
        self.w_spec = Param(
            scale * rng.standard_normal((in_ch, out_ch, 2 * modes, 2 * modes, 2)),
            name=f"{name}.w_spec",
        )
        self.w_skip = Param(
            rng.uniform(-1, 1, size=(out_ch, in_ch)) / np.sqrt(in_ch),
            name=f"{name}.w_skip",
        )
        self.bias = Param(np.zeros(out_ch), name=f"{name}.bias")

    def params(self):
        return [self.w_spec, self.w_skip, self.bias]

    def _mode_idx(self, H, W):
        m = self.modes
        if 2 * m > min(H, W):
            raise ValueError(f"modes {m} too large for grid {H}x{W}")
        rows = np.r_[0:m, H - m:H]
        cols = np.r_[0:m, W - m:W]
        return rows, cols

    def forward(self, x):
        N, C, H, W = x.shape
        rows, cols = self._mode_idx(H, W)
        x_ft = np.fft.fft2(x, axes=(-2, -1))
        xk = x_ft[:, :, rows[:, None], cols[None, :]]
        wc = self.w_spec.value[..., 0] + 1j * self.w_spec.value[..., 1]
        zk = np.einsum("nixy,ioxy->noxy", xk, wc, optimize=True)
        z_ft = np.zeros((N, self.out_ch, H, W), dtype=complex)
        z_ft[:, :, rows[:, None], cols[None, :]] = zk
        y = np.real(np.fft.ifft2(z_ft, axes=(-2, -1)))
        y += np.einsum("oi,nihw->nohw", self.w_skip.value, x, optimize=True)
        y += self.bias.value[None, :, None, None]
        return y, (x, xk)

    def backward(self, dy, cache):
        x, xk = cache
        N, C, H, W = x.shape
        rows, cols = self._mode_idx(H, W)
        wc = self.w_spec.value[..., 0] + 1j * self.w_spec.value[..., 1]
        g_ft = np.fft.fft2(dy, axes=(-2, -1)) / (H * W)
        gk = g_ft[:, :, rows[:, None], cols[None, :]]
        dwc = np.einsum("nixy,noxy->ioxy", np.conj(xk), gk, optimize=True)
        self.w_spec.grad[..., 0] += np.real(dwc)
        self.w_spec.grad[..., 1] += np.imag(dwc)
        dxk = np.einsum("ioxy,noxy->nixy", np.conj(wc), gk, optimize=True)
        dx_ft = np.zeros((N, C, H, W), dtype=complex)
        dx_ft[:, :, rows[:, None], cols[None, :]] = dxk
        dx = (H * W) * np.real(np.fft.ifft2(dx_ft, axes=(-2, -1)))
        self.w_skip.grad += np.einsum("nohw,nihw->oi", dy, x, optimize=True)
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        dx += np.einsum("oi,nohw->nihw", self.w_skip.value, dy, optimize=True)
        return dx


class Gelu:
    """tanh-approximated GELU."""

    def params(self):
        return []

    def forward(self, x):
        inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)
        t = np.tanh(inner)
        return 0.5 * x * (1.0 + t), (x, t)

    def backward(self, dy, cache):
        x, t = cache
        dt = (1.0 - t ** 2) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x ** 2)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


def zero_grads(params):
    for p in params:
        p.zero_grad()


def global_grad_norm(params):
    sq = 0.0
    for p in params:
        sq += float(np.sum(p.grad ** 2))
    return np.sqrt(sq)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the scaling factor applied (1.0 when already within bound).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = field(default=0)
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class AdamW:
    """Adam with decoupled multiplicative weight decay.

    weight_decay = 0 recovers plain Adam.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(
            lr=lr,
            weight_decay=weight_decay,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=[np.zeros_like(p.value) for p in self.params],
            v=[np.zeros_like(p.value) for p in self.params],
        )

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def step(self):
        s = self.state
        s.step_count += 1
        bc1 = 1.0 - s.beta1 ** s.step_count
        bc2 = 1.0 - s.beta2 ** s.step_count
        for p, m, v in zip(self.params, s.m, s.v):
            if s.weight_decay:
                p.value *= 1.0 - s.lr * s.weight_decay
            m *= s.beta1
            m += (1.0 - s.beta1) * p.grad
            v *= s.beta2
            v += (1.0 - s.beta2) * p.grad ** 2
            p.value -= s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)

    def export_state(self):
        """Flat dict of moment arrays + step counter; bit-exact round trip."""
        out = {"opt_step": np.asarray([float(self.state.step_count)])}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"opt_m_{i}"] = m
            out[f"opt_v_{i}"] = v
        return out

    def import_state(self, named):
        self.state.step_count = int(named["opt_step"][0])
        for i in range(len(self.params)):
            self.state.m[i][...] = named[f"opt_m_{i}"]
            self.state.v[i][...] = named[f"opt_v_{i}"]


def cosine_lr(base_lr, epoch, total_epochs, floor=0.0):
    if total_epochs <= 1:
        return base_lr
    frac = min(epoch / (total_epochs - 1), 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + np.cos(np.pi * frac))


def param_checksum(params):
    """SHA-256 over parameter bytes; detects any training-time mutation."""
    digest = hashlib.sha256()
    for p in params:
        digest.update(np.ascontiguousarray(p.value).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Named-tensor checkpoint format: deterministic binary blob + text manifest

CKPT_MAGIC = b"NTB1"


def save_tensors(path, named, manifest=None):
    """Write named float64 tensors to a deterministic binary blob.

    A plain-text manifest (key = value lines) goes to `<path>.manifest`.
    """
    names = list(named)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.asarray([len(names)], dtype="<u4").tobytes())
        for name in names:
            arr = np.ascontiguousarray(named[name], dtype="<f8")
            blob = name.encode()
            fh.write(np.asarray([len(blob)], dtype="<u4").tobytes())
            fh.write(blob)
            fh.write(np.asarray([arr.ndim], dtype="<u4").tobytes())
            fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
            fh.write(arr.tobytes())
    if manifest is not None:
        with open(str(path) + ".manifest", "w") as fh:
            for k in manifest:
                fh.write(f"{k} = {manifest[k]}\n")


def load_tensors(path):
    named = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (count,) = np.frombuffer(fh.read(4), dtype="<u4")
        for _ in range(int(count)):
            (nlen,) = np.frombuffer(fh.read(4), dtype="<u4")
            name = fh.read(int(nlen)).decode()
            (ndim,) = np.frombuffer(fh.read(4), dtype="<u4")
            shape = tuple(np.frombuffer(fh.read(4 * int(ndim)), dtype="<u4").astype(int))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
            named[name] = arr
    manifest = {}
    try:
        with open(str(path) + ".manifest") as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.split("=", 1)
                    manifest[k.strip()] = v.strip()
    except FileNotFoundError:
        pass
    return named, manifest
