"""The ``vce`` command: ingest -> pretrain -> train -> finetune -> eval -> convert.

Exit codes are a stable contract: 0 success, 2 I/O or data problems, 3
configuration or usage problems, 4 checkpoint incompatibility.

Configuration files are flat ``key = value`` text (a TOML-compatible subset)
holding every training knob; command-line flags override file values. The
``VCE_THREADS`` environment variable caps math-library threading and is
recorded in the run manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

EXIT_OK = 0
EXIT_DATA = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4


class ConfigError(Exception):
    """Config file unreadable, malformed, or holding invalid values."""


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines (ints, floats, booleans, quoted
    strings, [int, ...] lists; ``#`` comments)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        values[key] = _parse_value(val, lineno)
    return values


def _parse_value(s: str, lineno: int):
    if s.startswith("[") and s.endswith("]"):
        inner = s[1:-1].strip()
        if not inner:
            return []
        try:
            return [int(x.strip()) for x in inner.split(",")]
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad integer list {s!r}") from exc
    if s == "true":
        return True
    if s == "false":
        return False
    if len(s) >= 2 and s[0] == '"' and s[-1] == '"':
        return s[1:-1]
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s  # bare word; field typing validates downstream


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, list):
        return "[" + ", ".join(str(int(x)) for x in v) + "]"
    return repr(v) if isinstance(v, float) else str(v)


def config_text(config) -> str:
    """Render every training knob as flat key = value lines."""
    lines = []
    for f in fields(config):
        lines.append(f"{f.name} = {_render_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def build_config(file_values: dict, **overrides):
    """Merge defaults <- file <- explicit overrides into a TrainConfig."""
    from .training import TrainConfig

    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    coerced = {}
    for key, val in merged.items():
        want = known[key].type
        if want == "int" and isinstance(val, bool):
            raise ConfigError(f"config key {key} expects an integer")
        if want == "int" and not isinstance(val, int):
            raise ConfigError(f"config key {key} expects an integer, got {val!r}")
        if want == "float":
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"config key {key} expects a number, got {val!r}")
            val = float(val)
        if want == "str" and not isinstance(val, str):
            raise ConfigError(f"config key {key} expects a string, got {val!r}")
        if want == "bool" and not isinstance(val, bool):
            raise ConfigError(f"config key {key} expects true/false, got {val!r}")
        if want == "list[int]" and not isinstance(val, list):
            raise ConfigError(f"config key {key} expects an [int, ...] list, got {val!r}")
        coerced[key] = val
    try:
        return TrainConfig(**coerced)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_config(args, **overrides):
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(encoding="utf-8"))
    config = build_config(file_values, **overrides)
    threads = os.environ.get("VCE_THREADS")
    if threads and threads.isdigit() and int(threads) >= 1:
        config.thread_count = int(threads)
    return config


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _now() -> int:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return int(epoch) if epoch and epoch.isdigit() else int(time.time())


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, config, phase: str, cache_path, resumed_from,
                   outputs: dict, started: int) -> None:
    from . import __version__
    from .training import config_as_dict

    manifest = {
        "tool": "vce",
        "version": __version__,
        "phase": phase,
        "config": config_as_dict(config),
        "seed": config.seed,
        "split_seed": config.split_seed,
        "cache": str(cache_path) if cache_path else None,
        "cache_sha256": _sha256(cache_path) if cache_path else None,
        "resumed_from": str(resumed_from) if resumed_from else None,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started_unix": started,
        "finished_unix": _now(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    from .data import ingest

    dataset = ingest(args.root, cache_path=args.out_cache)
    print(dataset.summary())
    print(f"cache written: {args.out_cache} (sha256 {_sha256(args.out_cache)})")
    return EXIT_OK


def _require_file(path, code: int, kind: str):
    if not Path(path).is_file():
        print(f"error: {kind} not found: {path}", file=sys.stderr)
        raise SystemExit(code)


def _run_training_phase(args, phase: str) -> int:
    from .data import load_cache, split_dataset
    from .training import (MetricsWriter, checkpoint_load, checkpoint_save,
                           make_state, pretrain_reptile, theorem1_monitor,
                           train_lmvae_phase, train_vae_phase)

    started = _now()
    config = _load_config(args, seed=getattr(args, "seed", None))
    print(f"effective config ({phase}):")
    print(config_text(config), end="")

    _require_file(args.cache, EXIT_DATA, "data cache")
    dataset = load_cache(args.cache)
    split = split_dataset(dataset, config.split_seed, config.split_mode)
    classes = split.train_classes
    print(f"training on {len(classes)} classes from "
          f"{len(split.train_alphabets)} alphabets "
          f"({len(split.test_alphabets)} held out)")

    if phase == "lmvae" and not args.resume and not args.from_scratch:
        print("error: finetune requires --resume <phase-2 checkpoint> "
              "or --from-scratch", file=sys.stderr)
        return EXIT_CONFIG

    if args.resume:
        _require_file(args.resume, EXIT_DATA, "checkpoint")
        state = checkpoint_load(args.resume)
        print(f"resumed from {args.resume} at step {state.step} "
              f"(phase {state.phase})")
    else:
        state = make_state(config)

    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(str(out) + ".metrics.csv")
    manifest_path = Path(str(out) + ".manifest.json")

    kept: list[Path] = []

    def rolling_checkpoint(st, i):
        if config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
            p = Path(f"{out}.step{st.step}")
            checkpoint_save(st, p)
            kept.append(p)
            while len(kept) > 3:
                kept.pop(0).unlink(missing_ok=True)

    with MetricsWriter(metrics_path, append=args.resume is not None) as metrics:
        if phase == "pretrain":
            pretrain_reptile(state, classes, config, iterations=args.episodes,
                             metrics=metrics, on_episode=rolling_checkpoint)
        elif phase == "vae":
            train_vae_phase(state, classes, config, episodes=args.episodes,
                            metrics=metrics, on_episode=rolling_checkpoint)
        else:
            train_lmvae_phase(state, classes, config, episodes=args.episodes,
                              metrics=metrics, on_episode=rolling_checkpoint)
            status = theorem1_monitor(state, config)
            print(f"margin monitor: window={status.window} "
                  f"mean_kl_z={status.mean_kl_z:.2f} "
                  f"mean_kl_zc={status.mean_kl_zc:.2f} "
                  f"satisfied={status.satisfied}")

    checkpoint_save(state, out)
    write_manifest(manifest_path, config, phase, args.cache, args.resume,
                   {"checkpoint": out, "metrics": metrics_path}, started)
    print(f"checkpoint written: {out} (step {state.step})")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _run_training_phase(args, "pretrain")


def cmd_train(args) -> int:
    return _run_training_phase(args, "vae")


def cmd_finetune(args) -> int:
    return _run_training_phase(args, "lmvae")


def cmd_eval(args) -> int:
    import numpy as np

    from .data import load_cache, split_dataset
    from .evaluation import test_nll, write_report
    from .training import load_model

    if args.episodes < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.k < 1:
        print("error: --K must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _require_file(args.cache, EXIT_DATA, "data cache")
    _require_file(args.checkpoint, EXIT_DATA, "checkpoint")

    dataset = load_cache(args.cache)
    split = split_dataset(dataset, args.split_seed, args.split_mode)
    model = load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    result = test_nll(model, split.test_classes, episodes=args.episodes,
                      k=args.k, rng=rng, support_size=args.support_size)
    out = Path(args.out_report)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report([("Convertor-encoder", f"measured ({Path(args.checkpoint).name})",
                   result)], out)
    print(f"test NLL: {result.mean_test_nll:.2f} nats/image "
          f"(soft {result.mean_test_nll_soft:.2f}, "
          f"neg ELBO {result.mean_neg_elbo:.2f}) over {result.pairs} pairs, "
          f"K={result.samples_per_pair}")
    print(f"report: {out} and {out.with_suffix('.csv')}")
    return EXIT_OK


def cmd_convert(args) -> int:
    import numpy as np

    from .data import preprocess
    from .evaluation import emit_grid, generate_variations
    from .images import read_gray
    from .training import load_model

    if args.n < 1:
        print("error: --n must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _require_file(args.checkpoint, EXIT_DATA, "checkpoint")
    _require_file(args.image, EXIT_DATA, "input image")

    model = load_model(args.checkpoint)
    q = preprocess(read_gray(args.image))
    grid = generate_variations(
        model, q, args.n, np.random.default_rng(args.seed),
        provenance={"checkpoint": str(args.checkpoint), "seed": args.seed})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_grid(grid, out, ascii_pgm=args.ascii_pgm)
    print(f"variation grid ({grid.rows}x{grid.cols} variants + condition): {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def _add_train_flags(p, finetune: bool = False):
    p.add_argument("--cache", required=True, help="binary glyph cache from `vce ingest`")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-checkpoint", required=True, help="final checkpoint path")
    p.add_argument("--episodes", type=int, help="override the phase episode budget")
    p.add_argument("--seed", type=int, help="override the config seed")
    if finetune:
        p.add_argument("--from-scratch", action="store_true",
                       help="fine-tune from a fresh model instead of a checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vce",
                     description="one-shot glyph style conversion laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a glyph tree and write the binary cache")
    p.add_argument("--root", required=True, help="dataset root (alphabet/character/images)")
    p.add_argument("--out-cache", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="phase 1: meta pre-training")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="phase 2: plain VAE objective")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="phase 3: large-margin objective")
    _add_train_flags(p, finetune=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="held-out NLL and comparison report")
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--K", "--samples-per-pair", dest="k", type=int, default=10)
    p.add_argument("--out-report", required=True, help="markdown report path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--support-size", type=int, default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-mode", choices=("auto", "canonical", "random"),
                   default="auto")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="one-shot variations of a new glyph image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="glyph image file to convert")
    p.add_argument("--n", type=int, default=9, help="number of variants")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output grid (.png or .pgm)")
    p.add_argument("--ascii-pgm", action="store_true")
    p.set_defaults(func=cmd_convert)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("VCE_THREADS")
    if threads and threads.isdigit() and int(threads) >= 1:
        # must land before the first numpy import to take effect
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    logging.basicConfig(level=os.environ.get("VCE_LOG", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    from .data import CacheError, IngestError, SamplingError, SplitError
    from .images import DecodeError
    from .training import CheckpointError

    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (IngestError, CacheError, DecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, SplitError, SamplingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
