"""Objectives: KL, Bernoulli conversion error, margin hinge, style mix.

All loss functions are polymorphic over plain numbers/arrays and autodiff
tensors: given floats they return floats, given :class:`~vce.tensor.Tensor`
inputs they build a differentiable graph. The combinators accept per-sample
vectors as well as scalars (everything is elementwise), so a batched episode
can apply the margin hinge per sample before averaging.

Units are nats, summed over pixels per image (not averaged), which keeps
reported magnitudes on the usual per-image scale for 28x28 glyphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "LossWeights",
    "LossReport",
    "kl_divergence",
    "conversion_loss",
    "style_regularization",
    "hinge",
    "vae_losses",
    "introvae_losses",
    "lmvae_losses",
]


@dataclass
class LossWeights:
    """Knobs of the adversarial objective family.

    margin: KL level the encoder/convertor game pushes re-encoded conversions
    toward. adv_weight: weight of the adversarial KL/hinge term. style_mix:
    blend in [0,1] between the conversion target and the condition image.
    intro_alpha/intro_beta: weights of the two-sided introspective variant.
    """

    margin: float = 50.0
    adv_weight: float = 0.2
    style_mix: float = 0.15
    intro_alpha: float = 0.2
    intro_beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.style_mix <= 1.0:
            raise ValueError(f"style_mix must be in [0,1], got {self.style_mix}")
        if self.margin < 0.0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


CSV_HEADER = ("step", "phase", "l_kl_z", "l_kl_zc", "l_con", "l_reg",
              "hinge", "total_encoder", "total_convertor")


@dataclass
class LossReport:
    """One training step's loss decomposition, in nats."""

    step: int
    phase: str
    l_kl_z: float
    l_kl_zc: float
    l_con: float
    l_reg: float
    hinge: float
    total_encoder: float
    total_convertor: float

    def __post_init__(self):
        vals = (self.l_kl_z, self.l_kl_zc, self.l_con, self.l_reg, self.hinge,
                self.total_encoder, self.total_convertor)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite loss report at step {self.step}: {vals}")
        if self.hinge < 0 or self.l_con < 0 or self.l_reg < 0:
            raise ValueError(f"negative nonnegative-by-construction loss: {self}")
        if self.l_kl_z < -1e-6 or self.l_kl_zc < -1e-6:
            raise ValueError(f"negative KL in loss report: {self}")

    def csv_row(self) -> list[str]:
        return [str(self.step), self.phase] + [
            repr(float(v)) for v in (self.l_kl_z, self.l_kl_zc, self.l_con,
                                     self.l_reg, self.hinge,
                                     self.total_encoder, self.total_convertor)]


def _pair(a, b, name_a: str, name_b: str) -> tuple:
    """Validate equal shapes; return (value-or-tensor, value-or-tensor)."""
    sa = a.shape if isinstance(a, (Tensor, np.ndarray)) else ()
    sb = b.shape if isinstance(b, (Tensor, np.ndarray)) else ()
    if sa != sb:
        raise ShapeError(f"{name_a} shape {sa} != {name_b} shape {sb}")
    return a, b


def _sum(v, per_sample: bool):
    """Sum all axes, or all but the leading (sample) axis."""
    if isinstance(v, Tensor):
        if per_sample:
            if v.data.ndim < 2:
                raise ShapeError("per_sample reduction needs a batch axis")
            return v.sum(axis=tuple(range(1, v.data.ndim)))
        return v.sum()
    v = np.asarray(v)
    if per_sample:
        if v.ndim < 2:
            raise ShapeError("per_sample reduction needs a batch axis")
        return v.sum(axis=tuple(range(1, v.ndim)))
    return float(v.sum())


def kl_divergence(mu, logvar, per_sample: bool = False):
    """KL(N(mu, exp(logvar)) || N(0, I)) = 1/2 sum(mu^2 + var - logvar - 1).

    With ``per_sample=True`` the inputs are (B, D) and a length-B vector of
    per-sample divergences is returned.
    """
    mu, logvar = _pair(mu, logvar, "mu", "logvar")
    if isinstance(mu, Tensor) or isinstance(logvar, Tensor):
        mu = mu if isinstance(mu, Tensor) else Tensor(mu)
        logvar = logvar if isinstance(logvar, Tensor) else Tensor(logvar)
        elems = mu.square() + logvar.exp() - logvar - 1.0
        return _sum(elems, per_sample) * 0.5
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if not (np.isfinite(mu).all() and np.isfinite(logvar).all()):
        raise ValueError("kl_divergence: non-finite inputs")
    elems = mu * mu + np.exp(logvar) - logvar - 1.0
    out = _sum(elems, per_sample)
    return out * 0.5


def _bernoulli_nll(target, y, per_sample: bool):
    if isinstance(y, Tensor):
        t = target.data if isinstance(target, Tensor) else np.asarray(target, y.data.dtype)
        elems = -(y.log() * t) - (1.0 - y).log() * (1.0 - t)
        return _sum(elems, per_sample)
    t = np.asarray(target, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    elems = -t * np.log(yv) - (1.0 - t) * np.log(1.0 - yv)
    return _sum(elems, per_sample)


def conversion_loss(x, y, per_sample: bool = False):
    """Bernoulli conversion error sum_i [-x_i log y_i - (1-x_i) log(1-y_i)].

    ``y`` must be strictly inside (0,1); the sigmoid guard upstream ensures
    this for network outputs. Summed over pixels, optionally per sample.
    """
    _pair(x, y, "x", "y")
    return _bernoulli_nll(x, y, per_sample)


def style_regularization(q, y, per_sample: bool = False):
    """Same Bernoulli form as the conversion error, with the condition image
    as the target; penalizes drifting too far from the glyph being converted."""
    _pair(q, y, "q", "y")
    return _bernoulli_nll(q, y, per_sample)


def hinge(margin, l_kl):
    """max(0, margin - l_kl), elementwise on vectors."""
    d = margin - l_kl
    if isinstance(d, Tensor):
        return d.relu()
    if isinstance(d, np.ndarray):
        return np.maximum(0.0, d)
    return max(0.0, float(d))


def vae_losses(l_kl_z, l_con) -> tuple:
    """Plain negative-ELBO objective: both sides share KL + conversion error."""
    total = l_kl_z + l_con
    return total, total


def introvae_losses(l_kl_z, l_kl_zc, l_kl_zs, l_con, w: LossWeights) -> tuple:
    """Two-sided introspective pair over converted and prior-sampled images.

    encoder:   L_KL(z) + alpha * sum_j max(0, m - L_KL(z_j)) + beta * L_CON
    convertor: alpha * sum_j L_KL(z_j) + beta * L_CON        (j in {c, s})
    """
    a, b = w.intro_alpha, w.intro_beta
    l_e = l_kl_z + a * (hinge(w.margin, l_kl_zc) + hinge(w.margin, l_kl_zs)) + b * l_con
    l_c = a * (l_kl_zc + l_kl_zs) + b * l_con
    return l_e, l_c


def lmvae_losses(l_kl_z, l_kl_zc, l_con, l_reg, w: LossWeights) -> tuple:
    """Large-margin pair with the style mix.

    encoder:   L_KL(z) + adv * max(0, m - L_KL(z_c)) + (1-mix)*L_CON + mix*L_REG
    convertor: L_KL(z) + adv * L_KL(z_c)             + (1-mix)*L_CON + mix*L_REG

    At style_mix = 0 this is exactly the bare large-margin pair, and with
    adv_weight = 0 as well it reduces bitwise to the plain VAE objective.
    """
    if not 0.0 <= w.style_mix <= 1.0:
        raise ValueError(f"style_mix must be in [0,1], got {w.style_mix}")
    recon = (1.0 - w.style_mix) * l_con + w.style_mix * l_reg
    l_e = l_kl_z + w.adv_weight * hinge(w.margin, l_kl_zc) + recon
    l_c = l_kl_z + w.adv_weight * l_kl_zc + recon
    return l_e, l_c
