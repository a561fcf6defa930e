"""The convertor-encoder pair.

The encoder reads a (target, condition) image pair stacked as two channels and
emits a latent Gaussian (mu, logvar) describing the conversion rules between
them. The convertor reads the condition image juxtaposed with sampled rules -
two noise values broadcast along each image row as extra channels - and
produces the converted image. Both towers are stride-1 SAME residual stacks,
so pixel coordinates are preserved end to end.

Latent dimension is twice the image width (two rule values per row): 56 for
28x28 glyphs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .nn import ConvLayer, LinearLayer, ResidualBlock
from .tensor import ShapeError, Tensor, as_tensor, concat

__all__ = [
    "VceModel",
    "LatentSample",
    "encode",
    "reparameterize",
    "juxtapose",
    "convert",
    "sample_prior",
    "frozen",
]

IMAGE_SIZE = 28
CHANNELS = 32
N_BLOCKS = 8
LOGVAR_CLAMP = 20.0


@dataclass
class LatentSample:
    """Reparameterized draw z = mu + exp(logvar/2) * eps.

    ``eps`` is a graph constant: gradients flow to mu and logvar only.
    """

    mu: Tensor
    logvar: Tensor
    eps: np.ndarray
    z: Tensor


class VceModel:
    """Encoder + convertor parameter sets with fixed architecture metadata.

    Encoder: 5x5 stem (2->32), 8 residual blocks, flatten, linear head to
    2*latent_dim (mu, logvar). Convertor: 5x5 stem (3->32), 8 residual blocks,
    1x1 output conv (32->1), sigmoid.

    The two output heads (encoder linear head, convertor output conv) start at
    zero so a fresh model emits mu = logvar = 0 and converts everything to a
    uniform 0.5 image; all other layers use fan-in-scaled uniform init.
    """

    def __init__(self, latent_dim: int = 2 * IMAGE_SIZE, image_size: int = IMAGE_SIZE,
                 seed: int = 0, dtype=np.float32, zero_init_heads: bool = True):
        if latent_dim != 2 * image_size:
            raise ShapeError(
                f"latent_dim must be twice the image width ({2 * image_size}), "
                f"got {latent_dim}")
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.seed = seed
        self.dtype = dtype

        rng = np.random.default_rng(seed)
        head_rng = None if zero_init_heads else rng

        self.enc_stem = ConvLayer(2, CHANNELS, 5, rng, dtype)
        self.enc_blocks = [ResidualBlock(CHANNELS, rng, dtype) for _ in range(N_BLOCKS)]
        self.enc_head = LinearLayer(image_size * image_size * CHANNELS, 2 * latent_dim,
                                    head_rng, dtype, zero_init=zero_init_heads)

        self.con_stem = ConvLayer(3, CHANNELS, 5, rng, dtype)
        self.con_blocks = [ResidualBlock(CHANNELS, rng, dtype) for _ in range(N_BLOCKS)]
        self.con_out = ConvLayer(CHANNELS, 1, 1, head_rng, dtype,
                                 zero_init=zero_init_heads)

    # -- parameter bookkeeping ----------------------------------------------
    # Traversal order is the checkpoint wire order: encoder stem, encoder
    # blocks (conv_a, conv_b each), encoder head, convertor stem, convertor
    # blocks, convertor output conv; weights before bias within each layer.

    def encoder_parameters(self) -> list[Tensor]:
        params = self.enc_stem.parameters()
        for b in self.enc_blocks:
            params += b.parameters()
        return params + self.enc_head.parameters()

    def convertor_parameters(self) -> list[Tensor]:
        params = self.con_stem.parameters()
        for b in self.con_blocks:
            params += b.parameters()
        return params + self.con_out.parameters()

    def parameters(self) -> list[Tensor]:
        return self.encoder_parameters() + self.convertor_parameters()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def snapshot(self) -> list[np.ndarray]:
        """Value copies of all parameters in traversal order."""
        return [p.data.copy() for p in self.parameters()]

    def load_snapshot(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError(f"snapshot has {len(arrays)} tensors, model has {len(params)}")
        for p, a in zip(params, arrays):
            if a.shape != p.data.shape:
                raise ShapeError(f"snapshot shape {a.shape} != parameter {p.data.shape}")
            p.data = a.astype(p.data.dtype).copy()

    # -- forward passes -------------------------------------------------------

    def encode(self, x, q) -> tuple[Tensor, Tensor]:
        return encode(x, q, self)

    def convert(self, z, q) -> Tensor:
        return convert(z, q, self)


@contextlib.contextmanager
def frozen(params: list[Tensor]):
    """Temporarily exclude parameters from gradient recording.

    Forward passes taken inside the context treat these tensors as constants;
    gradients still flow through them to their inputs.
    """
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _as_batch(img, size: int, name: str) -> tuple[Tensor, bool]:
    t = as_tensor(img)
    if t.data.ndim == 2:
        if t.shape != (size, size):
            raise ShapeError(f"{name} must be {size}x{size}, got {t.shape}")
        return t.reshape(1, size, size), True
    if t.data.ndim == 3 and t.shape[1:] == (size, size):
        return t, False
    raise ShapeError(f"{name} must be ({size},{size}) or (B,{size},{size}), got {t.shape}")


def encode(x, q, model: VceModel) -> tuple[Tensor, Tensor]:
    """Map an image pair to latent Gaussian parameters (mu, logvar).

    ``x`` may be a single image or a batch; ``q`` is broadcast across the
    batch when given as a single image. The pair is stacked as two channels,
    so the encoder is not symmetric in its arguments. logvar is clamped to
    +/-20 to keep exp() and the KL log term well-behaved.
    """
    s = model.image_size
    xt, x_single = _as_batch(x, s, "x")
    qt, _ = _as_batch(q, s, "q")
    b = xt.shape[0]
    if qt.shape[0] == 1 and b > 1:
        qt = qt.broadcast_to((b, s, s))
    elif qt.shape[0] != b:
        raise ShapeError(f"condition batch {qt.shape[0]} != input batch {b}")

    h = concat([xt.reshape(b, 1, s, s), qt.reshape(b, 1, s, s)], axis=1)
    h = model.enc_stem(h).relu()
    for block in model.enc_blocks:
        h = block(h)
    out = model.enc_head(h.reshape(b, s * s * CHANNELS))
    d = model.latent_dim
    mu = out[:, :d]
    logvar = out[:, d:].clip(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    if x_single:
        mu, logvar = mu.reshape(d), logvar.reshape(d)
    return mu, logvar


def reparameterize(mu, logvar, rng_or_eps) -> LatentSample:
    """Draw z = mu + exp(logvar/2) * eps with eps ~ N(0, I) or injected."""
    mu = as_tensor(mu)
    logvar = as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    if isinstance(rng_or_eps, np.random.Generator):
        eps = rng_or_eps.standard_normal(mu.shape).astype(mu.data.dtype)
    else:
        eps = np.asarray(rng_or_eps, dtype=mu.data.dtype)
        if eps.shape != mu.shape:
            raise ShapeError(f"eps shape {eps.shape} != mu shape {mu.shape}")
    z = mu + (logvar * 0.5).exp() * eps
    return LatentSample(mu=mu, logvar=logvar, eps=eps, z=z)


def juxtapose(z, q) -> Tensor:
    """Assemble the convertor input: condition plus row-broadcast rule noise.

    Channel 0 is the condition image; channels 1 and 2 carry the even- and
    odd-indexed rule values, one per row, broadcast across the row.
    """
    zt = as_tensor(z)
    z_single = zt.data.ndim == 1
    if z_single:
        zt = zt.reshape(1, zt.shape[0])
    b, d = zt.shape
    s = d // 2
    if d != 2 * s or d < 2:
        raise ShapeError(f"rule vector length must be even, got {d}")
    qt, _ = _as_batch(q, s, "q")
    if qt.shape[0] == 1 and b > 1:
        qt = qt.broadcast_to((b, s, s))
    elif qt.shape[0] != b:
        raise ShapeError(f"condition batch {qt.shape[0]} != rule batch {b}")

    pairs = zt.reshape(b, s, 2)
    even = pairs[:, :, 0].reshape(b, 1, s, 1).broadcast_to((b, 1, s, s))
    odd = pairs[:, :, 1].reshape(b, 1, s, 1).broadcast_to((b, 1, s, s))
    out = concat([qt.reshape(b, 1, s, s), even, odd], axis=1)
    return out[0] if z_single else out


def convert(z, q, model: VceModel) -> Tensor:
    """Apply conversion rules z to condition q; output in (0,1)^{28x28}."""
    h = juxtapose(z, q)
    single = h.data.ndim == 3
    if single:
        h = h.reshape((1,) + h.shape)
    b = h.shape[0]
    s = model.image_size
    h = model.con_stem(h).relu()
    for block in model.con_blocks:
        h = block(h)
    y = model.con_out(h).sigmoid().reshape(b, s, s)
    return y[0] if single else y


def sample_prior(d: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Draw conversion rules from the standard-normal prior."""
    if d < 1:
        raise ShapeError(f"latent dimension must be positive, got {d}")
    return rng.standard_normal(d).astype(dtype)
