"""Three-phase training: meta pre-training, plain VAE, large-margin fine-tune.

Phase 1 interpolates parameters toward the result of a few inner optimization
steps per episode (first-order meta-learning). Phase 2 minimizes the shared
negative-ELBO objective with one joint Adam step per episode. Phase 3
alternates: an encoder step on the margin objective (re-encoding conversions
from a frozen convertor), then a convertor step whose re-encode runs through
the freshly updated, frozen encoder.

Episodes are batched over the support set; per-sample losses (including the
margin hinge) are averaged over the support, which makes phase 3 with zero
adversarial and style weights collapse bitwise onto phase 2.

All randomness flows through the single generator carried in
:class:`TrainState`, in a fixed per-episode order, so seeded runs are
bit-reproducible and checkpoints can resume mid-stream.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import CharacterClass, Episode, episode_arrays, sample_episode
from .losses import (LossReport, LossWeights, conversion_loss, kl_divergence,
                     lmvae_losses, style_regularization, vae_losses)
from .model import VceModel, convert, encode, frozen, reparameterize
from .nn import Adam
from .tensor import Tensor, no_grad

__all__ = [
    "TrainConfig",
    "TrainState",
    "MonitorStatus",
    "MetricsWriter",
    "CheckpointError",
    "make_state",
    "lr_schedule",
    "train_vae_episode",
    "train_lmvae_episode",
    "train_vae_phase",
    "train_lmvae_phase",
    "pretrain_reptile",
    "reptile_interpolate",
    "vae_episode_loss",
    "theorem1_monitor",
    "checkpoint_save",
    "checkpoint_load",
    "load_model",
]

log = logging.getLogger(__name__)

PHASES = ("pretrain", "vae", "lmvae")
WINDOW = 1000

CKPT_MAGIC = b"VCE1"
CKPT_VERSION = 1
SECTION_ADAM = b"ADAM"
SECTION_TRAIN = b"TRN0"


class CheckpointError(Exception):
    """Checkpoint missing sections, truncated, or from an incompatible build."""


@dataclass
class TrainConfig:
    """Every training knob: fixed hyperparameters plus gap-filling decisions.

    margin/adv_weight/style_mix/support_size/lr_init carry the published
    operating point (50, 0.2, 0.15, 19, 0.0002); the rest are artifact
    decisions recorded here so runs are fully reproducible from the manifest.
    """

    support_size: int = 19
    latent_dim: int = 56
    margin: float = 50.0
    adv_weight: float = 0.2
    style_mix: float = 0.15
    lr_init: float = 0.0002
    lr_halve_steps: list[int] = field(default_factory=list)
    pretrain_episodes: int = 500
    vae_episodes: int = 5000
    lmvae_episodes: int = 5000
    reptile_outer_stepsize: float = 0.5
    reptile_inner_iterations: int = 5
    reptile_inner_optimizer: str = "adam"
    vae_early_stop: bool = False
    checkpoint_every: int = 1000
    split_mode: str = "auto"
    split_seed: int = 0
    seed: int = 0
    thread_count: int = 1

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError(f"lr_init must be > 0, got {self.lr_init}")
        if self.support_size < 1:
            raise ValueError(f"support_size must be >= 1, got {self.support_size}")
        for name in ("pretrain_episodes", "vae_episodes", "lmvae_episodes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.reptile_inner_iterations < 1:
            raise ValueError("reptile_inner_iterations must be >= 1")
        if self.reptile_inner_optimizer not in ("adam", "sgd"):
            raise ValueError(f"reptile_inner_optimizer must be adam or sgd, "
                             f"got {self.reptile_inner_optimizer!r}")
        if not 0.0 <= self.style_mix <= 1.0:
            raise ValueError(f"style_mix must be in [0,1], got {self.style_mix}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.thread_count < 1:
            raise ValueError("thread_count must be >= 1")

    def loss_weights(self) -> LossWeights:
        return LossWeights(margin=self.margin, adv_weight=self.adv_weight,
                           style_mix=self.style_mix)


@dataclass
class TrainState:
    model: VceModel
    adam_enc: Adam
    adam_con: Adam
    step: int
    phase: str
    kl_z_window: deque
    kl_zc_window: deque
    rng: np.random.Generator


@dataclass
class MonitorStatus:
    """Advisory check of the saddle-point regime over the trailing window."""

    window: int
    mean_kl_z: float
    mean_kl_zc: float
    kl_z_ok: bool
    kl_zc_ok: bool
    satisfied: bool


def make_state(config: TrainConfig) -> TrainState:
    model = VceModel(latent_dim=config.latent_dim, seed=config.seed)
    return TrainState(
        model=model,
        adam_enc=Adam(model.encoder_parameters()),
        adam_con=Adam(model.convertor_parameters()),
        step=0,
        phase="pretrain",
        kl_z_window=deque(maxlen=WINDOW),
        kl_zc_window=deque(maxlen=WINDOW),
        rng=np.random.default_rng(config.seed),
    )


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Piecewise-constant rate: halved once each configured step is reached."""
    halvings = sum(1 for s in config.lr_halve_steps if step >= s)
    return config.lr_init * (0.5 ** halvings)


def _zero_grads(state: TrainState) -> None:
    for p in state.model.parameters():
        p.grad = None


class MetricsWriter:
    """Append-only CSV sink for loss reports (schema: see losses.CSV_HEADER)."""

    def __init__(self, path, append: bool = False):
        from .losses import CSV_HEADER
        self.path = Path(path)
        fresh = not (append and self.path.exists() and self.path.stat().st_size > 0)
        self._fh = open(self.path, "a" if append else "w", encoding="ascii", newline="")
        if fresh:
            self._fh.write(",".join(CSV_HEADER) + "\n")
            self._fh.flush()

    def write(self, report: LossReport) -> None:
        self._fh.write(",".join(report.csv_row()) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# episode objectives
# ---------------------------------------------------------------------------

def vae_episode_loss(model: VceModel, episode: Episode, rng: np.random.Generator):
    """Build the support-averaged negative-ELBO graph for one episode.

    Returns (scalar loss tensor, mean KL, mean conversion error). Consumes one
    standard-normal draw of shape (support, latent) from ``rng``.
    """
    xs, q = episode_arrays(episode)
    mu, logvar = encode(xs, q, model)
    latent = reparameterize(mu, logvar, rng)
    y = convert(latent.z, q, model)
    kl_per = kl_divergence(mu, logvar, per_sample=True)
    con_per = conversion_loss(xs, y, per_sample=True)
    enc_per, _ = vae_losses(kl_per, con_per)
    loss = enc_per.mean()
    return loss, float(kl_per.data.mean()), float(con_per.data.mean())


def train_vae_episode(state: TrainState, episode: Episode,
                      config: TrainConfig) -> LossReport:
    """Phase-2 step: one joint Adam update of encoder and convertor."""
    loss, kl_mean, con_mean = vae_episode_loss(state.model, episode, state.rng)
    loss.backward()
    lr = lr_schedule(state.step, config)
    state.adam_enc.step(lr)
    state.adam_con.step(lr)
    _zero_grads(state)
    state.step += 1
    state.phase = "vae"
    total = float(loss.data)
    state.kl_z_window.append(kl_mean)
    return LossReport(state.step, "vae", kl_mean, 0.0, con_mean, 0.0, 0.0,
                      total, total)


def train_lmvae_episode(state: TrainState, episode: Episode,
                        config: TrainConfig) -> LossReport:
    """Phase-3 step: encoder update, then convertor update.

    For each support image x: encode (x, q), convert to x_c, re-encode x_c
    with the convertor detached, and take the encoder step on the margin
    objective. Then re-encode x_c through the updated-but-frozen encoder and
    take the convertor step. Losses are per-sample, averaged over the support.
    """
    model = state.model
    w = config.loss_weights()
    xs, q = episode_arrays(episode)
    q_target = np.broadcast_to(q, xs.shape)

    # forward: conversion of every support image under this episode's rules
    mu, logvar = encode(xs, q, model)
    latent = reparameterize(mu, logvar, state.rng)
    x_c = convert(latent.z, q, model)
    kl_z_per = kl_divergence(mu, logvar, per_sample=True)
    con_per = conversion_loss(xs, x_c, per_sample=True)
    reg_per = style_regularization(q_target, x_c, per_sample=True)

    # encoder update: the re-encoded conversion is a constant w.r.t. the
    # convertor (detached), so the hinge pushes only the encoder
    mu_r, logvar_r = encode(x_c.detach(), q, model)
    kl_zc_per = kl_divergence(mu_r, logvar_r, per_sample=True)
    le_per, _ = lmvae_losses(kl_z_per, kl_zc_per, con_per, reg_per, w)
    loss_e = le_per.mean()
    loss_e.backward()
    lr = lr_schedule(state.step, config)
    state.adam_enc.step(lr)
    _zero_grads(state)

    # convertor update: re-encode through the *updated* encoder, parameters
    # frozen so only the input gradient (into x_c) flows
    with frozen(model.encoder_parameters()):
        mu_r2, logvar_r2 = encode(x_c, q, model)
    kl_zc2_per = kl_divergence(mu_r2, logvar_r2, per_sample=True)
    _, lc_per = lmvae_losses(kl_z_per, kl_zc2_per, con_per, reg_per, w)
    loss_c = lc_per.mean()
    loss_c.backward()
    state.adam_con.step(lr)
    _zero_grads(state)

    state.step += 1
    state.phase = "lmvae"
    kl_mean = float(kl_z_per.data.mean())
    kl_zc_mean = float(kl_zc_per.data.mean())
    hinge_mean = float(np.maximum(0.0, w.margin - kl_zc_per.data).mean())
    state.kl_z_window.append(kl_mean)
    state.kl_zc_window.append(kl_zc_mean)
    return LossReport(state.step, "lmvae", kl_mean, kl_zc_mean,
                      float(con_per.data.mean()), float(reg_per.data.mean()),
                      hinge_mean, float(loss_e.data), float(loss_c.data))


# ---------------------------------------------------------------------------
# phase drivers
# ---------------------------------------------------------------------------

def train_vae_phase(state: TrainState, classes: list[CharacterClass],
                    config: TrainConfig, episodes: int | None = None,
                    metrics: MetricsWriter | None = None,
                    log_every: int = 500, on_episode=None) -> TrainState:
    """Run the plain-VAE phase for a fixed budget, with optional early stop
    when the windowed mean improves by < 0.5% over two consecutive windows."""
    if not classes:
        raise ValueError("empty training class list")
    budget = config.vae_episodes if episodes is None else episodes
    state.phase = "vae"
    window_means: list[float] = []
    window_acc: list[float] = []
    stale = 0
    for i in range(budget):
        episode = sample_episode(classes, config.support_size, state.rng)
        report = train_vae_episode(state, episode, config)
        if metrics is not None:
            metrics.write(report)
        if on_episode is not None:
            on_episode(state, i)
        if log_every and (i + 1) % log_every == 0:
            log.info("vae episode %d/%d step=%d l_con=%.2f l_kl=%.2f",
                     i + 1, budget, state.step, report.l_con, report.l_kl_z)
        if config.vae_early_stop:
            window_acc.append(report.total_encoder)
            if len(window_acc) == WINDOW:
                window_means.append(float(np.mean(window_acc)))
                window_acc.clear()
                if len(window_means) >= 2:
                    prev, cur = window_means[-2], window_means[-1]
                    stale = stale + 1 if cur > prev * (1 - 0.005) else 0
                    if stale >= 2:
                        log.info("vae early stop at episode %d", i + 1)
                        break
    return state


def train_lmvae_phase(state: TrainState, classes: list[CharacterClass],
                      config: TrainConfig, episodes: int | None = None,
                      metrics: MetricsWriter | None = None,
                      log_every: int = 500, on_episode=None) -> TrainState:
    if not classes:
        raise ValueError("empty training class list")
    budget = config.lmvae_episodes if episodes is None else episodes
    state.phase = "lmvae"
    for i in range(budget):
        episode = sample_episode(classes, config.support_size, state.rng)
        report = train_lmvae_episode(state, episode, config)
        if metrics is not None:
            metrics.write(report)
        if on_episode is not None:
            on_episode(state, i)
        if log_every and (i + 1) % log_every == 0:
            status = theorem1_monitor(state, config)
            log.info("lmvae episode %d/%d step=%d l_con=%.2f kl_z=%.2f "
                     "kl_zc=%.2f margin_ok=%s", i + 1, budget, state.step,
                     report.l_con, report.l_kl_z, report.l_kl_zc,
                     status.satisfied)
    return state


def reptile_interpolate(before: list[np.ndarray], after: list[np.ndarray],
                        alpha: float) -> list[np.ndarray]:
    """Convex blend (1-alpha)*before + alpha*after; exact at the endpoints."""
    if alpha == 0.0:
        return [b.copy() for b in before]
    if alpha == 1.0:
        return [a.copy() for a in after]
    return [(1.0 - alpha) * b + alpha * a for b, a in zip(before, after)]


def pretrain_reptile(state: TrainState, classes: list[CharacterClass],
                     config: TrainConfig, iterations: int | None = None,
                     metrics: MetricsWriter | None = None,
                     log_every: int = 200, on_episode=None) -> TrainState:
    """Phase-1 meta pre-training.

    One outer iteration: sample one class's episode, run k inner negative-ELBO
    steps from the current parameters with a transient optimizer, then move
    the parameters a fraction of the way toward the inner result.
    """
    if not classes:
        raise ValueError("empty training class list")
    budget = config.pretrain_episodes if iterations is None else iterations
    state.phase = "pretrain"
    model = state.model
    for i in range(budget):
        before = model.snapshot()
        episode = sample_episode(classes, config.support_size, state.rng)
        inner_params = model.parameters()
        inner_opt = Adam(inner_params) if config.reptile_inner_optimizer == "adam" else None
        lr = lr_schedule(state.step, config)
        kl_means, con_means = [], []
        for _ in range(config.reptile_inner_iterations):
            loss, kl_mean, con_mean = vae_episode_loss(model, episode, state.rng)
            loss.backward()
            if inner_opt is not None:
                inner_opt.step(lr)
            else:
                for p in inner_params:
                    if p.grad is not None:
                        p.data = p.data - (lr * p.grad).astype(p.data.dtype)
            _zero_grads(state)
            kl_means.append(kl_mean)
            con_means.append(con_mean)
        model.load_snapshot(
            reptile_interpolate(before, model.snapshot(),
                                config.reptile_outer_stepsize))
        state.step += 1
        kl_m, con_m = float(np.mean(kl_means)), float(np.mean(con_means))
        state.kl_z_window.append(kl_m)
        report = LossReport(state.step, "pretrain", kl_m, 0.0, con_m, 0.0, 0.0,
                            kl_m + con_m, kl_m + con_m)
        if metrics is not None:
            metrics.write(report)
        if on_episode is not None:
            on_episode(state, i)
        if log_every and (i + 1) % log_every == 0:
            log.info("pretrain iteration %d/%d l_con=%.2f", i + 1, budget, con_m)
    return state


def theorem1_monitor(state: TrainState, config: TrainConfig,
                     tol: float = 0.1) -> MonitorStatus:
    """Check the expected equilibrium over the trailing window: windowed mean
    KL(z) at or below the margin (with tolerance) and the re-encoded KL(z_c)
    inside [0.5m, 1.5m]. Advisory only; never aborts training."""
    m = config.margin
    n = min(len(state.kl_z_window), len(state.kl_zc_window))
    if n == 0 or m <= 0:
        return MonitorStatus(0, float("nan"), float("nan"), False, False, False)
    mean_z = float(np.mean(list(state.kl_z_window)))
    mean_zc = float(np.mean(list(state.kl_zc_window)))
    z_ok = mean_z <= m * (1.0 + tol)
    zc_ok = 0.5 * m <= mean_zc <= 1.5 * m
    return MonitorStatus(n, mean_z, mean_zc, z_ok, zc_ok, z_ok and zc_ok)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic "VCE1" | version u16 | latent_dim u16
#   u32 n_params | per tensor: rank u8, dims u32 x rank, float32 values
#   sections until EOF: 4-byte tag | u64 payload length | payload
#     "ADAM": for encoder then convertor optimizer:
#             u64 t | u32 n | per param: first-moment tensor, second-moment
#             tensor (same rank/dims/f32 encoding)
#     "TRN0": u64 step | u8 phase | u32 json_len | json (rng state + windows)
#
# Inference-only loads stop after the parameter block and skip all sections.

def _pack_tensor(arr: np.ndarray) -> bytes:
    dims = arr.shape
    head = struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + arr.astype("<f4").tobytes()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.view = memoryview(blob)
        self.pos = 0
        self.path = path

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.view):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} in {self.path}")
        chunk = self.view[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if dims else 1
        flat = np.frombuffer(self.take(4 * count), dtype="<f4")
        return flat.reshape(dims).copy()

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.view)


def checkpoint_save(state: TrainState, path) -> None:
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<HH", CKPT_VERSION, state.model.latent_dim)
    params = state.model.parameters()
    out += struct.pack("<I", len(params))
    for p in params:
        out += _pack_tensor(p.data)

    adam = bytearray()
    for opt in (state.adam_enc, state.adam_con):
        adam += struct.pack("<QI", opt.t, len(opt.params))
        for m, v in zip(opt.m, opt.v):
            adam += _pack_tensor(m)
            adam += _pack_tensor(v)
    out += SECTION_ADAM + struct.pack("<Q", len(adam)) + adam

    trn = bytearray()
    trn += struct.pack("<QB", state.step, PHASES.index(state.phase))
    payload = json.dumps({
        "rng_state": _jsonable(state.rng.bit_generator.state),
        "kl_z_window": list(state.kl_z_window),
        "kl_zc_window": list(state.kl_zc_window),
    }, sort_keys=True).encode("utf-8")
    trn += struct.pack("<I", len(payload)) + payload
    out += SECTION_TRAIN + struct.pack("<Q", len(trn)) + trn

    Path(path).write_bytes(bytes(out))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _read_header(reader: _Reader) -> tuple[int, list[np.ndarray]]:
    if bytes(reader.take(4)) != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {reader.path}")
    version, latent_dim = reader.unpack("<HH")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {reader.path}")
    (n_params,) = reader.unpack("<I")
    return latent_dim, [reader.tensor() for _ in range(n_params)]


def load_model(path) -> VceModel:
    """Inference-only load: parameters only, optimizer/progress skipped."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(blob, path)
    latent_dim, arrays = _read_header(reader)
    model = VceModel(latent_dim=latent_dim)
    model.load_snapshot(arrays)
    return model


def checkpoint_load(path) -> TrainState:
    """Full resume load: parameters, both Adam states, progress, rng stream."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(blob, path)
    latent_dim, arrays = _read_header(reader)

    adam_payload = train_payload = None
    while not reader.exhausted:
        tag = bytes(reader.take(4))
        (length,) = reader.unpack("<Q")
        payload = bytes(reader.take(length))
        if tag == SECTION_ADAM:
            adam_payload = payload
        elif tag == SECTION_TRAIN:
            train_payload = payload
        # unknown sections are skipped for forward compatibility
    if adam_payload is None or train_payload is None:
        raise CheckpointError(f"checkpoint {path} lacks optimizer/progress sections")

    model = VceModel(latent_dim=latent_dim)
    model.load_snapshot(arrays)
    adam_enc = Adam(model.encoder_parameters())
    adam_con = Adam(model.convertor_parameters())

    sub = _Reader(adam_payload, path)
    for opt in (adam_enc, adam_con):
        t, n = sub.unpack("<QI")
        if n != len(opt.params):
            raise CheckpointError(f"adam section has {n} tensors, expected "
                                  f"{len(opt.params)} in {path}")
        ms, vs = [], []
        for _ in range(n):
            ms.append(sub.tensor())
            vs.append(sub.tensor())
        opt.load_state(ms, vs, int(t))

    sub = _Reader(train_payload, path)
    step, phase_idx = sub.unpack("<QB")
    (json_len,) = sub.unpack("<I")
    meta = json.loads(bytes(sub.take(json_len)).decode("utf-8"))
    if phase_idx >= len(PHASES):
        raise CheckpointError(f"unknown phase tag {phase_idx} in {path}")

    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = meta["rng_state"]
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"cannot restore rng stream from {path}: {exc}") from exc

    return TrainState(
        model=model,
        adam_enc=adam_enc,
        adam_con=adam_con,
        step=int(step),
        phase=PHASES[phase_idx],
        kl_z_window=deque(meta.get("kl_z_window", []), maxlen=WINDOW),
        kl_zc_window=deque(meta.get("kl_zc_window", []), maxlen=WINDOW),
        rng=rng,
    )


def config_as_dict(config: TrainConfig) -> dict:
    return asdict(config)
