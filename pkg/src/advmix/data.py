"""Dataset builders: MNIST IDX ingestion, Color-MNIST colorization, biased
decoder-training subsets and the two-cluster toy problem."""

from __future__ import annotations

import colorsys
import gzip
import importlib.resources
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .generators import FactorLatent, ProceduralGlyphDecoder, pad_to_32, H, W, C

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
RGB = np.eye(3)
RGB_NAMES = ("red", "green", "blue")


class DataFormatError(ValueError):
    pass


@dataclass
class GrayDataset:
    images: np.ndarray  # [N, rows, cols] in [0, 1]
    labels: np.ndarray  # [N] int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "GrayDataset":
        return GrayDataset(self.images[idx], self.labels[idx])


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise DataFormatError(f"{path}: wrong magic 0x{got:08x} at offset 0 for {what} "
                              f"(expected 0x{magic:08x})")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    need = hdr + int(np.prod(dims))
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated payload at offset {len(raw)} (expected {need} bytes)")
    if len(raw) > need:
        raise DataFormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    return dims, raw[hdr:]


def load_idx(images_path, labels_path) -> GrayDataset:
    dims, payload = _read_idx(images_path, IMAGES_MAGIC, "images")
    count, rows, cols = dims
    (n_labels,), lab = _read_idx(labels_path, LABELS_MAGIC, "labels")
    if n_labels != count:
        raise DataFormatError(f"{labels_path}: label count {n_labels} at offset 4 does not match "
                              f"image count {count}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return GrayDataset(images, labels)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n)
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


def bundled_mnist_u8() -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """The 5000-digit MNIST sample shipped with mlxtend, split 4000/1000.

    Every fifth digit of each class goes to test; both splits are ordered so
    that classes interleave, which keeps any prefix class-balanced.
    """
    path = importlib.resources.files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    with importlib.resources.as_file(path) as p:
        table = np.loadtxt(p, delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :784].astype(np.uint8).reshape(-1, 28, 28), table[:, 784]
    rank = np.zeros(len(labels), dtype=np.int64)
    for k in range(10):
        members = np.flatnonzero(labels == k)
        rank[members] = np.arange(len(members))
    is_test = rank % 5 == 4
    out = {}
    for name, mask in (("train", ~is_test), ("test", is_test)):
        idx = np.flatnonzero(mask)
        order = idx[np.lexsort((labels[idx], rank[idx]))]
        out[name] = (pixels[order], labels[order])
    return out


def export_bundled_idx(directory) -> dict[str, tuple[Path, Path]]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, (img, lab) in bundled_mnist_u8().items():
        pi = directory / f"{split}-images-idx3-ubyte"
        pl = directory / f"{split}-labels-idx1-ubyte"
        write_idx(pi, pl, img, lab)
        paths[split] = (pi, pl)
    return paths


def bundled_mnist(split: str) -> GrayDataset:
    img, lab = bundled_mnist_u8()[split]
    return GrayDataset(img / 255.0, lab.astype(np.int64))


def palette() -> np.ndarray:
    """Ten class colors at HSV hues k/10 with full saturation and value."""
    return np.array([colorsys.hsv_to_rgb(k / 10, 1.0, 1.0) for k in range(10)])


RGB_WEIGHTS = {
    "unbiased": (1 / 3, 1 / 3, 1 / 3),
    "99% red": (0.99, 0.005, 0.005),
    "99.9% red": (0.999, 0.0005, 0.0005),
}


@dataclass
class ColorSpec:
    mode: str = "gaussian_palette"  # gaussian_palette | rgb_restricted | uniform_random
    means: np.ndarray | None = None
    sigma: float = 0.0
    rgb_weights: tuple = RGB_WEIGHTS["unbiased"]

    def __post_init__(self):
        if self.mode not in ("gaussian_palette", "rgb_restricted", "uniform_random"):
            raise ValueError(f"unknown color mode {self.mode!r}")
        if self.means is None:
            self.means = palette()
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.shape != (10, 3) or self.means.min() < 0 or self.means.max() > 1:
            raise ValueError("means must be 10 RGB triples in [0, 1]")
        w = np.asarray(self.rgb_weights, dtype=np.float64)
        if w.shape != (3,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError(f"rgb_weights must be 3 probabilities, got {self.rgb_weights}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def draw(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(labels)
        if self.mode == "gaussian_palette":
            return np.clip(self.means[labels] + self.sigma * rng.standard_normal((n, 3)), 0.0, 1.0)
        if self.mode == "rgb_restricted":
            return RGB[rng.choice(3, size=n, p=np.asarray(self.rgb_weights) / np.sum(self.rgb_weights))]
        return rng.random((n, 3))


@dataclass
class ColoredExample:
    image: np.ndarray
    label: int
    provenance: FactorLatent


class ColoredDataset:
    """Colorized digits with their ground-truth (glyph index, color) provenance.

    ``glyph_index`` indexes the glyph bank of ``decoder`` (the padded gray split
    the set was built from), so a subset keeps decoding against the same bank.
    """

    def __init__(self, images, labels, glyph_index, colors, decoder: ProceduralGlyphDecoder):
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.glyph_index = np.asarray(glyph_index, dtype=np.int64)
        self.colors = np.asarray(colors, dtype=np.float64)
        self.decoder = decoder

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> ColoredExample:
        return ColoredExample(self.images[i], int(self.labels[i]),
                              FactorLatent([float(self.glyph_index[i])], self.colors[i]))

    def take(self, idx) -> "ColoredDataset":
        idx = np.asarray(idx)
        return ColoredDataset(self.images[idx], self.labels[idx], self.glyph_index[idx],
                              self.colors[idx], self.decoder)

    @property
    def z_par(self) -> np.ndarray:
        return self.glyph_index[:, None].astype(np.float64)

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)


def colorize(gray: GrayDataset, spec: ColorSpec, rng: np.random.Generator,
             decoder: ProceduralGlyphDecoder | None = None) -> ColoredDataset:
    if decoder is None:
        decoder = ProceduralGlyphDecoder(pad_to_32(gray.images))
    colors = spec.draw(gray.labels, rng)
    glyph_index = np.arange(len(gray))
    images = decoder.decode_batch(glyph_index[:, None], colors).data.reshape(len(gray), H, W, C)
    out = ColoredDataset(images, gray.labels.copy(), glyph_index, colors, decoder)
    for i in range(len(out)):
        decoder.register(images[i], out[i].provenance)
    return out


def decoder_bias_subset(colored: ColoredDataset, profile: str, rng: np.random.Generator) -> ColoredDataset:
    """Resample (with replacement, same size) to skew the class, hence color, mix.

    more_biased: 90% class 0, 10% spread evenly over 1-9.
    less_biased: 45% class 0, 45% class 1, 10% spread evenly over 2-9.
    """
    if profile == "unbiased":
        return colored
    if profile == "more_biased":
        probs = np.r_[0.9, np.full(9, 0.1 / 9)]
    elif profile == "less_biased":
        probs = np.r_[0.45, 0.45, np.full(8, 0.1 / 8)]
    else:
        raise ValueError(f"unknown bias profile {profile!r}")
    n = len(colored)
    classes = rng.choice(10, size=n, p=probs)
    picked = np.empty(n, dtype=np.int64)
    for k in range(10):
        slots = np.flatnonzero(classes == k)
        members = np.flatnonzero(colored.labels == k)
        if len(slots) and not len(members):
            raise ValueError(f"class {k} has no examples to resample")
        picked[slots] = rng.choice(members, size=len(slots)) if len(slots) else picked[slots]
    return colored.take(picked)


@dataclass
class ToyDataset:
    points: np.ndarray  # [n, 2]
    labels: np.ndarray
    z_par: np.ndarray
    z_perp: np.ndarray


def make_toy(n: int, rng: np.random.Generator) -> ToyDataset:
    from .generators import ToyDecoder

    if n < 1:
        raise ValueError("n must be >= 1")
    y = rng.integers(0, 2, size=n)
    z_par = 20.0 * y
    z_perp = ToyDecoder.perp_values[rng.integers(0, 2, size=n)]
    x1 = rng.normal(z_perp, ToyDecoder.x1_std)
    x2 = rng.normal(z_par, ToyDecoder.x2_std)
    return ToyDataset(np.stack([x1, x2], axis=1), y, z_par, z_perp)


# colored cache layout (little-endian):
#   b"ADVMIXX1", int32 count, H, W, C; then per record:
#   int32 label, float64[3] color, int32 glyph index, float64[H*W*C] image
def save_colored(colored: ColoredDataset, path) -> None:
    n = len(colored)
    rec = np.dtype([("label", "<i4"), ("color", "<f8", (3,)), ("glyph", "<i4"), ("image", "<f8", (H * W * C,))])
    arr = np.empty(n, dtype=rec)
    arr["label"] = colored.labels
    arr["color"] = colored.colors
    arr["glyph"] = colored.glyph_index
    arr["image"] = colored.flat()
    Path(path).write_bytes(b"ADVMIXX1" + struct.pack("<4i", n, H, W, C) + arr.tobytes())


def load_colored(path, gray: GrayDataset) -> ColoredDataset:
    """Read a colored cache; ``gray`` is the split whose glyph bank the records index."""
    raw = Path(path).read_bytes()
    if raw[:8] != b"ADVMIXX1":
        raise DataFormatError(f"{path}: wrong magic {raw[:8]!r} at offset 0")
    n, h, w, c = struct.unpack_from("<4i", raw, 8)
    rec = np.dtype([("label", "<i4"), ("color", "<f8", (3,)), ("glyph", "<i4"), ("image", "<f8", (h * w * c,))])
    if len(raw) != 24 + n * rec.itemsize:
        raise DataFormatError(f"{path}: expected {24 + n * rec.itemsize} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=rec, offset=24)
    decoder = ProceduralGlyphDecoder(pad_to_32(gray.images))
    out = ColoredDataset(arr["image"].astype(np.float64).reshape(n, h, w, c), arr["label"].astype(np.int64),
                         arr["glyph"].astype(np.int64), arr["color"].astype(np.float64), decoder)
    for i in range(n):
        decoder.register(out.images[i], out[i].provenance)
    return out
