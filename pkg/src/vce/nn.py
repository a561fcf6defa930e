"""Layers and optimizer for the convertor-encoder networks.

Everything here is stride-1, SAME-padded and shape-preserving: the glyph
conversion pipeline never downsamples, so 28x28 geometry survives every layer.
Convolutions are computed as one GEMM per call via an im2col unrolling; the
unrolled patch matrix is recomputed in the backward pass instead of stored,
trading a little compute for a much smaller live set during training.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, as_tensor

__all__ = [
    "ConvLayer",
    "ResidualBlock",
    "LinearLayer",
    "Adam",
    "conv2d_same",
    "residual_forward",
    "linear",
    "activation",
    "he_uniform",
]


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
               dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvLayer:
    """2D convolution parameters: weights [out_ch, in_ch, k, k], bias [out_ch].

    Kernel size must be odd so SAME padding with stride 1 preserves spatial
    dims exactly.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 zero_init: bool = False):
        if kernel_size % 2 != 1 or kernel_size < 1:
            raise ShapeError(f"kernel size must be odd and positive, got {kernel_size}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel_size = kernel_size
        shape = (out_ch, in_ch, kernel_size, kernel_size)
        if zero_init or rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = he_uniform(shape, in_ch * kernel_size * kernel_size, rng, dtype)
        self.weights = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_same(x, self)


class ResidualBlock:
    """Identity-shortcut block: x + conv_b(relu(conv_a(x))), 3x3, 32->32."""

    def __init__(self, channels: int = 32, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.channels = channels
        self.conv_a = ConvLayer(channels, channels, 3, rng, dtype)
        self.conv_b = ConvLayer(channels, channels, 3, rng, dtype)

    def parameters(self) -> list[Tensor]:
        return self.conv_a.parameters() + self.conv_b.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return residual_forward(x, self)


class LinearLayer:
    """Affine map y = W x + b with W of shape [out, in]."""

    def __init__(self, in_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 zero_init: bool = False):
        if in_dim < 1 or out_dim < 1:
            raise ShapeError("linear dims must be positive")
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init or rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = he_uniform((out_dim, in_dim), in_dim, rng, dtype)
        self.weights = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)


def _im2col_same(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Unroll SAME-padded input (B,C,H+2p,W+2p) into patches (B*H*W, C*k*k)."""
    b, c = xp.shape[0], xp.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (B, C, H, W, k, k) -> (B, H, W, C, k, k) -> flat rows
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def conv2d_same(x, layer: ConvLayer) -> Tensor:
    """SAME-padded stride-1 convolution; out-of-bounds taps read zero.

    Accepts (C,H,W) or a batched (B,C,H,W) tensor; output spatial dims equal
    input spatial dims either way.
    """
    xt = as_tensor(x)
    squeeze = xt.data.ndim == 3
    xd = xt.data[None] if squeeze else xt.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d_same expects (C,H,W) or (B,C,H,W), got {xt.shape}")
    b, c, h, w = xd.shape
    if c != layer.in_ch:
        raise ShapeError(f"conv2d_same: input has {c} channels, layer expects {layer.in_ch}")
    if not np.isfinite(xd).all():
        raise NumericError("conv2d_same: non-finite input")

    k = layer.kernel_size
    pad = k // 2
    out_ch = layer.out_ch
    wt, bt = layer.weights, layer.bias
    wmat = wt.data.reshape(out_ch, c * k * k)

    if pad:
        xpad = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xpad = xd
    cols = _im2col_same(xpad, k, h, w)            # (B*H*W, C*k*k)
    flat = cols @ wmat.T + bt.data                # (B*H*W, out)
    out = flat.reshape(b, h, w, out_ch).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    x_needs, w_needs, b_needs = xt.requires_grad, wt.requires_grad, bt.requires_grad

    def vjp(g):
        gd = g[None] if squeeze else g
        go = gd.transpose(0, 2, 3, 1).reshape(b * h * w, out_ch)
        gw = gb = gx = None
        if b_needs:
            gb = go.sum(axis=0)
        if w_needs:
            pcols = _im2col_same(xpad, k, h, w)
            gw = (go.T @ pcols).reshape(wt.shape)
        if x_needs:
            gcols = (go @ wmat).reshape(b, h, w, c, k, k)
            gxp = np.zeros_like(xpad)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + h, kj:kj + w] += \
                        gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    return Tensor._from_op(out, (xt, wt, bt), vjp)


def residual_forward(x, block: ResidualBlock) -> Tensor:
    """x + conv_b(relu(conv_a(x))); channels and spatial dims preserved."""
    xt = as_tensor(x)
    ch = xt.shape[0] if xt.data.ndim == 3 else xt.shape[1]
    if ch != block.channels:
        raise ShapeError(f"residual block expects {block.channels} channels, got {ch}")
    return xt + conv2d_same(conv2d_same(xt, block.conv_a).relu(), block.conv_b)


def linear(x, layer: LinearLayer) -> Tensor:
    """y = W x + b for a vector (in,) or a batch (B, in)."""
    xt = as_tensor(x)
    squeeze = xt.data.ndim == 1
    xd = xt.data[None] if squeeze else xt.data
    if xd.ndim != 2 or xd.shape[1] != layer.in_dim:
        raise ShapeError(f"linear: input {xt.shape} incompatible with in_dim {layer.in_dim}")
    wt, bt = layer.weights, layer.bias
    out = xd @ wt.data.T + bt.data
    if squeeze:
        out = out[0]

    x_needs, w_needs, b_needs = xt.requires_grad, wt.requires_grad, bt.requires_grad

    def vjp(g):
        gd = g[None] if squeeze else g
        gw = gd.T @ xd if w_needs else None
        gb = gd.sum(axis=0) if b_needs else None
        gx = None
        if x_needs:
            gx = gd @ wt.data
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    return Tensor._from_op(out, (xt, wt, bt), vjp)


def activation(x, kind: str) -> Tensor:
    """Elementwise nonlinearity, kind in {"relu", "sigmoid"}."""
    xt = as_tensor(x)
    if kind == "relu":
        return xt.relu()
    if kind == "sigmoid":
        return xt.sigmoid()
    raise ValueError(f"unknown activation kind {kind!r}")


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    Moment buffers match parameter shapes and stay non-negative in the second
    moment; ``t`` counts completed steps. ``step`` consumes the gradients
    currently stored on the parameters.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: list[Tensor]):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.t += 1
        b1, b2 = self.BETA1, self.BETA2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + self.EPS)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> tuple[list[np.ndarray], list[np.ndarray], int]:
        return self.m, self.v, self.t

    def load_state(self, m: list[np.ndarray], v: list[np.ndarray], t: int) -> None:
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ShapeError("adam state length does not match parameter list")
        for buf, p in zip(m, self.params):
            if buf.shape != p.data.shape:
                raise ShapeError("adam state shape mismatch")
        self.m = [b.copy() for b in m]
        self.v = [b.copy() for b in v]
        self.t = int(t)
