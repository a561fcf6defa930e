"""Omniglot-style glyph ingestion, normalization, splits and episode sampling.

The data protocol: grayscale glyph files are decoded, inverted to stroke-high
polarity, area-averaged down to 28x28 in [0,1], and grouped into character
classes of same-glyph exemplars drawn by different people. Training consumes
episodes: one condition image plus a same-class support set.

A binary cache avoids re-decoding image files on every run; its layout is the
stable interchange format (see ``save_cache``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import read_gray, to_u8, DecodeError

__all__ = [
    "GlyphImage",
    "CharacterClass",
    "GlyphDataset",
    "DatasetSplit",
    "Episode",
    "IngestError",
    "SplitError",
    "SamplingError",
    "CacheError",
    "preprocess",
    "area_resize",
    "ingest",
    "save_cache",
    "load_cache",
    "split_dataset",
    "sample_episode",
    "episode_arrays",
]

IMAGE_SIZE = 28

CACHE_MAGIC = b"VCED"
CACHE_VERSION = 1

# Standard Omniglot background/evaluation alphabet convention: when a dataset's
# alphabets all come from these two lists, the split is fixed rather than random.
BACKGROUND_ALPHABETS = frozenset({
    "Alphabet_of_the_Magi", "Anglo-Saxon_Futhorc", "Arcadian", "Armenian",
    "Asomtavruli_(Georgian)", "Balinese", "Bengali",
    "Blackfoot_(Canadian_Aboriginal_Syllabics)", "Braille", "Burmese_(Myanmar)",
    "Cyrillic", "Early_Aramaic", "Futurama", "Grantha", "Greek", "Gujarati",
    "Hebrew", "Inuktitut_(Canadian_Aboriginal_Syllabics)", "Japanese_(hiragana)",
    "Japanese_(katakana)", "Korean", "Latin", "Malay_(Jawi_-_Arabic)",
    "Mkhedruli_(Georgian)", "N_Ko", "Ojibwe_(Canadian_Aboriginal_Syllabics)",
    "Sanskrit", "Syriac_(Estrangelo)", "Tagalog", "Tifinagh",
})
EVALUATION_ALPHABETS = frozenset({
    "Angelic", "Atemayar_Qelisayer", "Atlantean", "Aurek-Besh", "Avesta",
    "Ge_ez", "Glagolitic", "Gurmukhi", "Kannada", "Keble", "Malayalam",
    "Manipuri", "Mongolian", "Old_Church_Slavonic_(Cyrillic)", "Oriya",
    "Sylheti", "Syriac_(Serto)", "Tengwar", "Tibetan", "ULOG",
})


class IngestError(Exception):
    """Dataset directory missing, malformed, or containing unreadable files."""


class SplitError(ValueError):
    """Not enough alphabets to split, or unknown alphabets in canonical mode."""


class SamplingError(ValueError):
    """Episode request incompatible with the chosen class."""


class CacheError(Exception):
    """Cache file corrupt, truncated, or of an unknown version."""


@dataclass
class GlyphImage:
    """One 28x28 glyph, stroke-high in [0,1]."""

    pixels: np.ndarray
    class_id: tuple[str, str]
    drawer_id: int

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"glyph must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {self.pixels.shape}")


@dataclass
class CharacterClass:
    """All exemplars of one character, each drawn by a different person."""

    alphabet: str
    character: str
    exemplars: list[GlyphImage]

    @property
    def class_id(self) -> tuple[str, str]:
        return (self.alphabet, self.character)

    def __post_init__(self):
        if len(self.exemplars) < 2:
            raise IngestError(
                f"class {self.alphabet}/{self.character} has {len(self.exemplars)} "
                "exemplar(s); at least 2 are required")


@dataclass
class GlyphDataset:
    classes: list[CharacterClass]

    @property
    def alphabets(self) -> list[str]:
        return sorted({c.alphabet for c in self.classes})

    def classes_for(self, alphabets) -> list[CharacterClass]:
        wanted = set(alphabets)
        return [c for c in self.classes if c.alphabet in wanted]

    def summary(self) -> str:
        n_ex = sum(len(c.exemplars) for c in self.classes)
        return (f"{len(self.alphabets)} alphabets, {len(self.classes)} classes, "
                f"{n_ex} exemplars")


@dataclass
class DatasetSplit:
    train_classes: list[CharacterClass]
    test_classes: list[CharacterClass]
    split_seed: int
    train_alphabets: list[str] = field(default_factory=list)
    test_alphabets: list[str] = field(default_factory=list)


@dataclass
class Episode:
    """One condition glyph plus a same-class support set (condition excluded)."""

    condition: GlyphImage
    support: list[GlyphImage]
    class_id: tuple[str, str]


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic overlap weights for 1D area-average resampling."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for j in range(n_out):
        a, b = j * scale, (j + 1) * scale
        lo, hi = int(np.floor(a)), min(int(np.ceil(b)), n_in)
        for i in range(lo, hi):
            w[j, i] = min(i + 1.0, b) - max(float(i), a)
    return w / scale


def area_resize(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Box-filter (area-average) resample of a 2D array to size x size."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    wr = _box_weights(img.shape[0], size)
    wc = _box_weights(img.shape[1], size)
    return wr @ img @ wc.T


def preprocess(raw) -> np.ndarray:
    """Normalize a glyph image to 28x28 stroke-high float32 in [0,1].

    Integer input is treated as a raw scan (bright background, dark ink,
    0..max) and inverted; float input must already be stroke-high in [0,1] and
    is only resampled, which makes the function idempotent on its own output.
    """
    arr = np.asarray(raw)
    if arr.ndim != 2:
        raise DecodeError(f"expected a 2D grayscale image, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        peak = float(np.iinfo(arr.dtype).max)
        strokes = 1.0 - arr.astype(np.float64) / peak
    elif np.issubdtype(arr.dtype, np.floating):
        if not np.isfinite(arr).all():
            raise DecodeError("non-finite pixel values")
        if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
            raise DecodeError("float input must be normalized to [0,1]")
        strokes = arr.astype(np.float64)
    else:
        raise DecodeError(f"unsupported pixel dtype {arr.dtype}")
    out = area_resize(strokes, IMAGE_SIZE)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".pgm", ".ppm", ".tif", ".tiff"}


def _drawer_id(stem: str, fallback: int) -> int:
    tail = stem.rsplit("_", 1)[-1]
    return int(tail) if tail.isdigit() else fallback


def ingest(root_path, cache_path=None) -> GlyphDataset:
    """Load an Omniglot-layout directory tree (alphabet/character/images).

    Also accepts the distribution layout with ``images_background`` and
    ``images_evaluation`` at the top level. Optionally writes the binary cache.
    Raises :class:`IngestError` listing every offending path on failure.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestError(f"dataset root does not exist: {root}")

    sections = [d for d in (root / "images_background", root / "images_evaluation")
                if d.is_dir()]
    if not sections:
        sections = [root]

    alphabet_dirs: list[Path] = []
    for section in sections:
        alphabet_dirs.extend(sorted(p for p in section.iterdir() if p.is_dir()))
    if not alphabet_dirs:
        raise IngestError(f"no alphabet directories under {root}")

    classes: list[CharacterClass] = []
    bad_paths: list[str] = []
    for alpha_dir in alphabet_dirs:
        char_dirs = sorted(p for p in alpha_dir.iterdir() if p.is_dir())
        if not char_dirs:
            bad_paths.append(f"{alpha_dir} (no character directories)")
            continue
        for char_dir in char_dirs:
            files = sorted(p for p in char_dir.iterdir()
                           if p.suffix.lower() in _IMAGE_SUFFIXES)
            exemplars: list[GlyphImage] = []
            for i, f in enumerate(files):
                try:
                    pixels = preprocess(read_gray(f))
                except DecodeError as exc:
                    bad_paths.append(f"{f} ({exc})")
                    continue
                exemplars.append(GlyphImage(
                    pixels=pixels,
                    class_id=(alpha_dir.name, char_dir.name),
                    drawer_id=_drawer_id(f.stem, i)))
            if len(exemplars) < 2:
                bad_paths.append(f"{char_dir} ({len(exemplars)} readable exemplar(s), need 2)")
                continue
            classes.append(CharacterClass(alpha_dir.name, char_dir.name, exemplars))

    if bad_paths:
        listing = "\n  ".join(bad_paths)
        raise IngestError(f"ingestion failed for {len(bad_paths)} path(s):\n  {listing}")
    if not classes:
        raise IngestError(f"no character classes found under {root}")

    dataset = GlyphDataset(classes)
    if cache_path is not None:
        save_cache(dataset, cache_path)
    return dataset


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic "VCED" | version u16 | class_count u32
#   per class: alpha_len u16, alpha utf8 | char_len u16, char utf8
#              | exemplar_count u16 | exemplars as 784 bytes each
#              (u8 0-255, stroke-high, row-major)

def save_cache(dataset: GlyphDataset, path) -> None:
    out = bytearray()
    out += CACHE_MAGIC
    out += struct.pack("<HI", CACHE_VERSION, len(dataset.classes))
    for cls in dataset.classes:
        for name in (cls.alphabet, cls.character):
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw))
            out += raw
        out += struct.pack("<H", len(cls.exemplars))
        for ex in cls.exemplars:
            out += to_u8(ex.pixels).tobytes()
    Path(path).write_bytes(bytes(out))


def load_cache(path) -> GlyphDataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CacheError(f"cannot read cache {path}: {exc}") from exc
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CacheError(f"cache truncated at byte {pos} in {path}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CACHE_MAGIC:
        raise CacheError(f"bad cache magic in {path}")
    (version, n_classes) = struct.unpack("<HI", take(6))
    if version != CACHE_VERSION:
        raise CacheError(f"unsupported cache version {version} in {path}")

    npix = IMAGE_SIZE * IMAGE_SIZE
    classes: list[CharacterClass] = []
    for _ in range(n_classes):
        names = []
        for _ in range(2):
            (ln,) = struct.unpack("<H", take(2))
            names.append(bytes(take(ln)).decode("utf-8"))
        alphabet, character = names
        (n_ex,) = struct.unpack("<H", take(2))
        exemplars = []
        for i in range(n_ex):
            u8 = np.frombuffer(take(npix), dtype=np.uint8)
            pixels = (u8.astype(np.float32) / 255.0).reshape(IMAGE_SIZE, IMAGE_SIZE)
            exemplars.append(GlyphImage(pixels, (alphabet, character), i))
        classes.append(CharacterClass(alphabet, character, exemplars))
    if pos != len(view):
        raise CacheError(f"{len(view) - pos} trailing bytes in cache {path}")
    return GlyphDataset(classes)


# ---------------------------------------------------------------------------
# splitting and episode sampling
# ---------------------------------------------------------------------------

def split_dataset(dataset: GlyphDataset, seed: int, mode: str = "auto") -> DatasetSplit:
    """Partition alphabets into train/test sets.

    ``auto`` uses the fixed background/evaluation convention when every
    alphabet name belongs to it (30/20 on the full dataset) and otherwise falls
    back to a seeded proportional random split. ``canonical`` and ``random``
    force the respective behavior.
    """
    alphabets = dataset.alphabets
    if len(alphabets) < 2:
        raise SplitError(f"need at least 2 alphabets to split, got {len(alphabets)}")

    known = BACKGROUND_ALPHABETS | EVALUATION_ALPHABETS
    canonical_ok = (all(a in known for a in alphabets)
                    and any(a in BACKGROUND_ALPHABETS for a in alphabets)
                    and any(a in EVALUATION_ALPHABETS for a in alphabets))
    if mode == "canonical" and not canonical_ok:
        unknown = [a for a in alphabets if a not in known]
        raise SplitError(f"canonical split requested but alphabets are not the "
                         f"standard ones (unknown: {unknown[:5]})")
    if mode not in ("auto", "canonical", "random"):
        raise SplitError(f"unknown split mode {mode!r}")

    if mode != "random" and canonical_ok:
        train_alpha = sorted(a for a in alphabets if a in BACKGROUND_ALPHABETS)
        test_alpha = sorted(a for a in alphabets if a in EVALUATION_ALPHABETS)
    else:
        rng = np.random.default_rng(seed)
        order = list(rng.permutation(np.array(alphabets, dtype=object)))
        n_train = int(np.clip(round(0.6 * len(order)), 1, len(order) - 1))
        train_alpha = sorted(order[:n_train])
        test_alpha = sorted(order[n_train:])

    return DatasetSplit(
        train_classes=dataset.classes_for(train_alpha),
        test_classes=dataset.classes_for(test_alpha),
        split_seed=seed,
        train_alphabets=train_alpha,
        test_alphabets=test_alpha)


def sample_episode(classes: list[CharacterClass], support_size: int,
                   rng: np.random.Generator) -> Episode:
    """Draw one episode: uniform class, uniform condition, support without
    replacement from the remaining exemplars."""
    if not classes:
        raise SamplingError("cannot sample an episode from an empty class list")
    if support_size < 1:
        raise SamplingError(f"support_size must be >= 1, got {support_size}")
    cls = classes[int(rng.integers(len(classes)))]
    n = len(cls.exemplars)
    if support_size + 1 > n:
        raise SamplingError(
            f"support_size {support_size} + 1 condition exceeds the "
            f"{n} exemplars of class {cls.class_id}")
    cond_idx = int(rng.integers(n))
    pool = [i for i in range(n) if i != cond_idx]
    picked = rng.choice(len(pool), size=support_size, replace=False)
    support = [cls.exemplars[pool[int(i)]] for i in picked]
    return Episode(condition=cls.exemplars[cond_idx], support=support,
                   class_id=cls.class_id)


def episode_arrays(episode: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Stack an episode into (support batch [S,28,28], condition [28,28])."""
    xs = np.stack([g.pixels for g in episode.support]).astype(np.float32)
    return xs, episode.condition.pixels.astype(np.float32)
