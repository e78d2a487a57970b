"""Dataset ingestion and the desk-scale source registry.

File formats:
  * IDX (big-endian magic 2051 images / 2049 labels, plain or gzip), the
    MNIST container format; both reader and writer are provided.
  * CIFAR-10 binary batches (3073-byte records: label byte + 3072 pixels).

Sources normalize everything to (3, 32, 32) float images in [0, 1] so a
single backbone serves every task. When real MNIST/FashionMNIST IDX files
exist under the data root (``DUALNETS_DATA`` or an explicit path) they are
used; otherwise deterministic synthetic stand-ins take their place:

  digits         font-rendered 0-9 glyphs with affine/contrast/noise jitter
  letters        A-J glyphs, same pipeline (FashionMNIST stand-in)
  gratings       oriented sinusoidal textures, 10 orientation classes
  rings          concentric ring textures, 10 radial-frequency classes
  tinted-digits  digits over a tinted background (R-MNIST stand-in)

Every sample is a pure function of (source, split, seed, index), so draws
are reproducible and train/val streams never collide.
"""

from __future__ import annotations

import gzip
import os
import struct
from functools import lru_cache

import numpy as np

from .engine import EngineError
from .seeding import child_rng

IDX_IMAGE_MAGIC = 2051  # 0x00000803
IDX_LABEL_MAGIC = 2049  # 0x00000801
DATA_ROOT_ENV = "DUALNETS_DATA"

IMAGE_SHAPE = (3, 32, 32)


# -- IDX format ----------------------------------------------------------------


def _open_maybe_gzip(path, mode="rb"):
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, mode)
    return open(path, mode)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (uint8 payload, gzip accepted) into an array."""
    with _open_maybe_gzip(path) as f:
        header = f.read(4)
        if len(header) != 4 or header[0] != 0 or header[1] != 0:
            raise EngineError(f"not an IDX file: {path}")
        dtype_code, ndim = header[2], header[3]
        if dtype_code != 0x08:
            raise EngineError(f"unsupported IDX dtype 0x{dtype_code:02x} in {path}")
        dims = struct.unpack(f">{ndim}i", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
        expect = int(np.prod(dims))
        if data.size != expect:
            raise EngineError(f"IDX payload size {data.size} != header {expect} in {path}")
        return data.reshape(dims)


def write_idx(path, array, compress=False):
    """Write a uint8 array as IDX (optionally gzip)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">bbbb", 0, 0, 0x08, array.ndim)
    header += struct.pack(f">{array.ndim}i", *array.shape)
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes())


def load_idx_images(path) -> np.ndarray:
    a = read_idx(path)
    if a.ndim != 3:
        raise EngineError(f"expected a 3-d IDX image file, got {a.ndim}-d in {path}")
    return a


def load_idx_labels(path) -> np.ndarray:
    a = read_idx(path)
    if a.ndim != 1:
        raise EngineError(f"expected a 1-d IDX label file, got {a.ndim}-d in {path}")
    return a


# -- CIFAR-10 binary batches -----------------------------------------------------

CIFAR_RECORD = 3073


def load_cifar10_batch(path):
    """Parse one CIFAR-10 binary batch into (N, 3, 32, 32) uint8 + labels."""
    with _open_maybe_gzip(path) as f:
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise EngineError(f"{path} is not a whole number of 3073-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(int)
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


# -- base source behaviour --------------------------------------------------------


class Source:
    """A labeled image distribution with seeded, balanced draws."""

    name: str
    n_classes: int

    def available(self, split: str) -> int:  # pragma: no cover - abstract
        raise NotImplementedError

    def _draw_uncached(self, split, classes, count, seed):  # pragma: no cover
        raise NotImplementedError

    def draw(self, split: str, classes: tuple, count: int, seed: int):
        """``count`` images drawn from ``classes`` (balanced, shuffled).

        Returns (X, y) with X (count, 3, 32, 32) in [0, 1]; arrays are
        read-only (draws are cached).
        """
        if split not in ("train", "val"):
            raise EngineError(f"split must be train|val, got '{split}'")
        classes = tuple(int(c) for c in classes)
        if any(c < 0 or c >= self.n_classes for c in classes):
            raise EngineError(f"class out of range for {self.name}: {classes}")
        if count > self.available(split):
            raise EngineError(
                f"requested {count} {split} samples from {self.name}, "
                f"only {self.available(split)} available"
            )
        X, y = self._draw_cached(split, classes, int(count), int(seed))
        return X, y

    @lru_cache(maxsize=256)
    def _draw_cached(self, split, classes, count, seed):
        X, y = self._draw_uncached(split, classes, count, seed)
        X = np.ascontiguousarray(X)
        y = np.ascontiguousarray(y)
        X.setflags(write=False)
        y.setflags(write=False)
        return X, y

    def _balanced_labels(self, classes, count, rng):
        reps = int(np.ceil(count / len(classes)))
        y = np.tile(np.asarray(classes, dtype=int), reps)[:count]
        rng.shuffle(y)
        return y


class SyntheticSource(Source):
    """Generative source: each sample is a function of (split, seed-stream)."""

    nominal_train = 60000
    nominal_val = 10000

    def available(self, split):
        return self.nominal_train if split == "train" else self.nominal_val

    def render(self, class_id: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError  # pragma: no cover

    def _draw_uncached(self, split, classes, count, seed):
        order_rng = child_rng(seed, self.name, split, "order")
        y = self._balanced_labels(classes, count, order_rng)
        X = np.empty((count,) + IMAGE_SHAPE)
        for i in range(count):
            rng = child_rng(seed, self.name, split, "sample", i)
            X[i] = self.render(int(y[i]), rng)
        return X, y


def _to_three_channel(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray[None, :, :], 3, axis=0)


# -- glyph rendering ---------------------------------------------------------------

_GLYPH_FONTS = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSansMono-Bold.ttf",
)


@lru_cache(maxsize=None)
def _font(file_name: str, size: int):
    from PIL import ImageFont
    import matplotlib

    path = os.path.join(matplotlib.get_data_path(), "fonts", "ttf", file_name)
    return ImageFont.truetype(path, size)


class GlyphSource(SyntheticSource):
    """Characters rendered with jittered font, placement, rotation and noise."""

    def __init__(self, name, chars, noise_sigma=0.08):
        self.name = name
        self.chars = tuple(chars)
        self.n_classes = len(self.chars)
        self.noise_sigma = noise_sigma

    def render(self, class_id, rng):
        from PIL import Image, ImageDraw

        font = _font(
            _GLYPH_FONTS[int(rng.integers(len(_GLYPH_FONTS)))],
            int(rng.integers(17, 25)),
        )
        img = Image.new("L", (32, 32), 0)
        draw = ImageDraw.Draw(img)
        char = self.chars[class_id]
        x0, y0, x1, y1 = draw.textbbox((0, 0), char, font=font)
        ox = (32 - (x1 - x0)) // 2 - x0 + int(rng.integers(-3, 4))
        oy = (32 - (y1 - y0)) // 2 - y0 + int(rng.integers(-3, 4))
        draw.text((ox, oy), char, fill=255, font=font)
        img = img.rotate(float(rng.uniform(-14, 14)), fillcolor=0)
        a = np.asarray(img, dtype=float) / 255.0
        a *= rng.uniform(0.65, 1.0)
        a += rng.normal(0.0, self.noise_sigma, size=a.shape)
        return _to_three_channel(np.clip(a, 0.0, 1.0))


class TintedGlyphSource(GlyphSource):
    """Glyphs over a tinted background on one channel (input-shifted family)."""

    def __init__(self, name, chars, tint=0.35, channel=0, noise_sigma=0.08):
        super().__init__(name, chars, noise_sigma=noise_sigma)
        self.tint = tint
        self.channel = channel

    def render(self, class_id, rng):
        img = super().render(class_id, rng).copy()
        img[self.channel] = np.clip(img[self.channel] + self.tint, 0.0, 1.0)
        return img


# -- procedural textures -------------------------------------------------------------

_UV = np.linspace(0.0, 1.0, 32)
_UU, _VV = np.meshgrid(_UV, _UV, indexing="xy")


class GratingSource(SyntheticSource):
    """Oriented sinusoidal gratings; class = orientation bin over [0, pi)."""

    def __init__(self, name="gratings", n_classes=10, noise_sigma=0.06):
        self.name = name
        self.n_classes = n_classes
        self.noise_sigma = noise_sigma

    def render(self, class_id, rng):
        theta = np.pi * class_id / self.n_classes + rng.uniform(-np.pi / 40, np.pi / 40)
        freq = rng.uniform(2.5, 4.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = _UU * np.cos(theta) + _VV * np.sin(theta)
        a = 0.5 + 0.45 * np.sin(2.0 * np.pi * freq * wave + phase)
        a += rng.normal(0.0, self.noise_sigma, size=a.shape)
        return _to_three_channel(np.clip(a, 0.0, 1.0))


class RingSource(SyntheticSource):
    """Concentric rings; class = radial frequency bin."""

    def __init__(self, name="rings", n_classes=10, noise_sigma=0.06):
        self.name = name
        self.n_classes = n_classes
        self.noise_sigma = noise_sigma

    def render(self, class_id, rng):
        cx = 0.5 + rng.uniform(-0.15, 0.15)
        cy = 0.5 + rng.uniform(-0.15, 0.15)
        freq = 1.5 + 0.6 * class_id + rng.uniform(-0.15, 0.15)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        r = np.sqrt((_UU - cx) ** 2 + (_VV - cy) ** 2)
        a = 0.5 + 0.45 * np.sin(2.0 * np.pi * freq * r + phase)
        a += rng.normal(0.0, self.noise_sigma, size=a.shape)
        return _to_three_channel(np.clip(a, 0.0, 1.0))


# -- file-backed sources ----------------------------------------------------------


class IdxSource(Source):
    """MNIST-layout IDX files: 28x28 uint8 images padded to 32x32."""

    def __init__(self, name, root, prefix_train="train", prefix_val="t10k"):
        self.name = name
        self.root = root
        self._files = {
            "train": (self._find(f"{prefix_train}-images-idx3-ubyte"),
                      self._find(f"{prefix_train}-labels-idx1-ubyte")),
            "val": (self._find(f"{prefix_val}-images-idx3-ubyte"),
                    self._find(f"{prefix_val}-labels-idx1-ubyte")),
        }
        self._cache = {}
        self.n_classes = 10

    def _find(self, stem):
        for suffix in ("", ".gz"):
            path = os.path.join(self.root, stem + suffix)
            if os.path.exists(path):
                return path
        raise FileNotFoundError(stem)

    def _load(self, split):
        if split not in self._cache:
            img_path, lab_path = self._files[split]
            images = load_idx_images(img_path).astype(float) / 255.0
            labels = load_idx_labels(lab_path).astype(int)
            pad = (32 - images.shape[1]) // 2
            if pad > 0:
                images = np.pad(images, ((0, 0), (pad, pad), (pad, pad)))
            X = np.repeat(images[:, None, :, :], 3, axis=1)
            self._cache[split] = (X, labels)
        return self._cache[split]

    def available(self, split):
        return len(self._load(split)[1])

    def _draw_uncached(self, split, classes, count, seed):
        X_all, y_all = self._load(split)
        rng = child_rng(seed, self.name, split, "order")
        y = self._balanced_labels(classes, count, rng)
        pick_rng = child_rng(seed, self.name, split, "pick")
        pools = {c: np.flatnonzero(y_all == c) for c in classes}
        chosen = np.empty(count, dtype=int)
        for c in classes:
            rows = np.flatnonzero(y == c)
            if len(rows) > len(pools[c]):
                raise EngineError(f"class {c} of {self.name} has too few {split} samples")
            chosen[rows] = pick_rng.choice(pools[c], size=len(rows), replace=False)
        return X_all[chosen].copy(), y


# -- registry -----------------------------------------------------------------------

_ALIASES = {
    "mnist": "digits",
    "fashion": "letters",
    "fashion-mnist": "letters",
    "fmnist": "letters",
    "textures": "gratings",
    "textures2": "rings",
    "rmnist": "tinted-digits",
}

_DIGIT_CHARS = tuple("0123456789")
_LETTER_CHARS = tuple("ABCDEFGHIJ")


def canonical_source_name(name: str) -> str:
    return _ALIASES.get(name.lower(), name.lower())


@lru_cache(maxsize=None)
def _builtin_source(canonical: str) -> Source:
    if canonical == "digits":
        return GlyphSource("digits", _DIGIT_CHARS)
    if canonical == "letters":
        return GlyphSource("letters", _LETTER_CHARS)
    if canonical == "gratings":
        return GratingSource()
    if canonical == "rings":
        return RingSource()
    if canonical == "tinted-digits":
        return TintedGlyphSource("tinted-digits", _DIGIT_CHARS)
    raise EngineError(f"unknown dataset source '{canonical}'")


def data_root(explicit=None):
    return explicit if explicit is not None else os.environ.get(DATA_ROOT_ENV)


@lru_cache(maxsize=None)
def _idx_source_if_present(name: str, root: str) -> Source | None:
    try:
        return IdxSource(name, root)
    except FileNotFoundError:
        return None


def get_source(name: str, root=None) -> Source:
    """Resolve a source name (alias-aware). Real IDX data under the data root
    is preferred for mnist/fashion; synthetic stand-ins otherwise."""
    canonical = canonical_source_name(name)
    root = data_root(root)
    if root and name.lower() in ("mnist", "fashion", "fashion-mnist", "fmnist"):
        sub = "mnist" if canonical == "digits" else "fashion"
        for candidate in (os.path.join(root, sub), root):
            found = _idx_source_if_present(name.lower(), candidate)
            if found is not None:
                return found
    return _builtin_source(canonical)


def registry_names():
    return ["digits", "letters", "gratings", "rings", "tinted-digits"]
