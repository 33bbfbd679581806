"""Disentangled decoders over a latent space split into (z_par, z_perp).

``z_par`` carries everything the label depends on, ``z_perp`` carries a
label-independent style factor (here: the RGB color of a digit). Three decoders
share one duck-typed contract::

    d_par, d_perp          latent widths
    image_shape            shape of one decoded sample
    perp_box               (lo, hi) bounds of valid z_perp, or None
    decode_batch(z_par, z_perp[, rng]) -> Tensor [B, prod(image_shape)]
    sample_perp(rng, n)    -> ndarray [n, d_perp]

``decode_batch`` is differentiable in ``z_perp`` (and in ``z_par`` for the
learned decoder). Images are flattened in (h, w, channel) order.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

H = W = 32
C = 3
N_PIXELS = H * W
IMAGE_SHAPE = (H, W, C)
JITTER_STD = 0.02
JITTER_CLIP = 5.0


@dataclass
class FactorLatent:
    z_par: np.ndarray
    z_perp: np.ndarray

    def __post_init__(self):
        self.z_par = np.atleast_1d(np.asarray(self.z_par, dtype=np.float64))
        self.z_perp = np.atleast_1d(np.asarray(self.z_perp, dtype=np.float64))

    def concat(self) -> np.ndarray:
        return np.concatenate([self.z_par, self.z_perp])


@dataclass
class PerpRegion:
    """l-inf ball of radius ``radius_inf`` around ``center``, optionally cut by a box.

    ``simplex`` additionally restricts colors to the convex hull of the three base
    colors. The ball must then contain the whole simplex (radius >= 1), so the
    final simplex projection cannot leave the ball.
    """

    center: np.ndarray
    radius_inf: float
    box_lo: np.ndarray | None = None
    box_hi: np.ndarray | None = None
    simplex: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.radius_inf > 0:
            raise ValueError(f"radius_inf must be positive, got {self.radius_inf}")
        if self.simplex and self.radius_inf < 1:
            raise ValueError("a simplex region needs radius_inf >= 1")


def project_perp(z, region: PerpRegion) -> np.ndarray:
    """Clip to the l-inf ball around ``region.center``, then to the box (then onto
    the simplex for simplex regions).

    Works row-wise when ``z`` and ``region.center`` are [B, d] arrays.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != region.center.shape[-1]:
        raise ValueError(f"project_perp: dimension {z.shape[-1]} vs center {region.center.shape[-1]}")
    out = np.clip(z, region.center - region.radius_inf, region.center + region.radius_inf)
    if region.box_lo is not None:
        out = np.maximum(out, region.box_lo)
    if region.box_hi is not None:
        out = np.minimum(out, region.box_hi)
    if region.simplex:
        out = project_simplex(out)
    return out


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of each row onto {c >= 0, sum(c) = 1}."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1, v.shape[-1])
    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, flat.shape[1] + 1)
    cond = u - css / k > 0
    rho = flat.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(flat)), rho] / (rho + 1)
    return np.maximum(flat - theta[:, None], 0.0).reshape(v.shape)


def typical_shell_check(z_raw, delta: float = 0.5) -> bool:
    z = np.asarray(z_raw, dtype=np.float64).ravel()
    d = z.size
    norm = float(np.linalg.norm(z))
    half_width = delta * d ** 0.25
    return math.sqrt(d) - half_width <= norm <= math.sqrt(d) + half_width


def pad_to_32(gray: np.ndarray) -> np.ndarray:
    """Zero-pad [N, 28, 28] glyphs (centered) to [N, 32, 32]."""
    gray = np.asarray(gray, dtype=np.float64)
    n, h, w = gray.shape
    out = np.zeros((n, H, W))
    top, left = (H - h) // 2, (W - w) // 2
    out[:, top:top + h, left:left + w] = gray
    return out


def _rows(z, width: int, what: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != width:
        raise ValueError(f"{what}: expected width {width}, got {z.shape[1]}")
    return z


class ProceduralGlyphDecoder:
    """Exactly disentangled colorizer: pixel (h, w, ch) = clamp01(G_i[h, w] * clamp01(c[ch])).

    ``z_par`` is the glyph index (stored as a float), ``z_perp`` the RGB color.
    ``perp_colors``/``perp_weights`` restrict what ``sample_perp`` draws from; by
    default it draws uniformly from the unit cube.
    """

    d_par = 1
    d_perp = 3
    image_shape = IMAGE_SHAPE
    perp_box = (np.zeros(3), np.ones(3))

    def __init__(self, glyphs, perp_colors=None, perp_weights=None):
        glyphs = np.asarray(glyphs, dtype=np.float64)
        if glyphs.ndim != 3 or glyphs.shape[1:] != (H, W):
            raise ValueError(f"glyph bank must be [N, {H}, {W}], got {list(glyphs.shape)}")
        self.glyphs = glyphs.reshape(len(glyphs), N_PIXELS)
        self.glyphs.flags.writeable = False
        self._set_sampler(perp_colors, perp_weights)
        self.provenance: dict[bytes, FactorLatent] = {}

    def _set_sampler(self, perp_colors, perp_weights):
        self.perp_colors = None if perp_colors is None else np.asarray(perp_colors, dtype=np.float64)
        self.perp_weights = None
        if self.perp_colors is not None:
            w = np.full(len(self.perp_colors), 1.0 / len(self.perp_colors)) if perp_weights is None \
                else np.asarray(perp_weights, dtype=np.float64)
            if not np.isclose(w.sum(), 1.0) or np.any(w < 0):
                raise ValueError(f"perp_weights must be a probability vector, got {w}")
            self.perp_weights = w

    def with_sampler(self, perp_colors=None, perp_weights=None) -> "ProceduralGlyphDecoder":
        """Same glyph bank and provenance registry, different z_perp sampler."""
        dec = ProceduralGlyphDecoder.__new__(ProceduralGlyphDecoder)
        dec.__dict__.update(self.__dict__)
        dec._set_sampler(perp_colors, perp_weights)
        return dec

    def glyph_rows(self, z_par) -> np.ndarray:
        idx = _rows(z_par, 1, "procedural decode z_par")[:, 0]
        ii = idx.astype(np.int64)
        if np.any(ii != idx) or np.any(ii < 0) or np.any(ii >= len(self.glyphs)):
            raise ValueError(f"glyph index out of range [0, {len(self.glyphs)})")
        return self.glyphs[ii]

    def decode_batch(self, z_par, z_perp, rng=None) -> Tensor:
        gray = self.glyph_rows(z_par)
        color = z_perp if isinstance(z_perp, Tensor) else Tensor(_rows(z_perp, 3, "procedural decode z_perp"))
        if color.data.ndim != 2 or color.shape[1] != 3:
            raise ValueError(f"procedural decode z_perp: expected [B, 3], got {list(color.shape)}")
        return ad.clamp01(ad.outer_channels(Tensor(gray), ad.clamp01(color)))

    def sample_perp(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        m = 1 if n is None else n
        if self.perp_colors is None:
            out = rng.random((m, 3))
        else:
            out = self.perp_colors[rng.choice(len(self.perp_colors), size=m, p=self.perp_weights)]
        return out[0] if n is None else out

    def register(self, image: np.ndarray, latent: FactorLatent) -> None:
        self.provenance[image_digest(image)] = latent


def image_digest(image: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).digest()


@dataclass
class LearnedDecoder:
    """Dense imitation decoder: z_par -> relu hidden -> sigmoid gray glyph, tinted by clamp01(z_perp).

    The z_perp sampler (the "map" stage) is the empirical color table of the
    decoder's training subset plus truncated Gaussian jitter; this is where a
    biased training subset shows up.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    embeddings: np.ndarray
    color_table: np.ndarray
    recon_rmse: float = float("nan")
    recon_tol: float = float("nan")
    jitter_std: float = JITTER_STD

    d_perp = 3
    image_shape = IMAGE_SHAPE
    perp_box = (np.zeros(3), np.ones(3))

    @property
    def d_par(self) -> int:
        return self.w1.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def gray_batch(self, z_par, params=None) -> Tensor:
        w1, b1, w2, b2 = params if params is not None else [Tensor(p) for p in self.params()]
        zp = z_par if isinstance(z_par, Tensor) else Tensor(_rows(z_par, self.d_par, "learned decode z_par"))
        h = ad.relu(ad.linear(zp, w1, b1))
        return ad.sigmoid(ad.linear(h, w2, b2))

    def decode_batch(self, z_par, z_perp, rng=None, params=None) -> Tensor:
        color = z_perp if isinstance(z_perp, Tensor) else Tensor(_rows(z_perp, 3, "learned decode z_perp"))
        gray = self.gray_batch(z_par, params)
        if gray.shape[0] != color.shape[0]:
            raise ValueError(f"learned decode: {gray.shape[0]} z_par rows vs {color.shape[0]} z_perp rows")
        return ad.outer_channels(gray, ad.clamp01(color))

    def sample_perp(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        m = 1 if n is None else n
        base = self.color_table[rng.integers(0, len(self.color_table), size=m)]
        jitter = np.clip(rng.normal(0.0, self.jitter_std, size=(m, 3)),
                         -JITTER_CLIP * self.jitter_std, JITTER_CLIP * self.jitter_std)
        out = base + jitter
        return out[0] if n is None else out

    def sample_par(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.embeddings[rng.integers(0, len(self.embeddings), size=n)]

    # checkpoint layout (all little-endian):
    #   b"ADVMIXD1", int32 d_par, d_perp, hidden, n_pixels, n_embeddings, n_colors,
    #   float64 w1, b1, w2, b2, embeddings, float64 color table [n_colors, 3],
    #   float64 recon_rmse, recon_tol, jitter_std
    def save(self, path) -> None:
        hidden = self.w1.shape[1]
        header = b"ADVMIXD1" + struct.pack("<6i", self.d_par, 3, hidden, N_PIXELS,
                                           len(self.embeddings), len(self.color_table))
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in
                        (self.w1, self.b1, self.w2, self.b2, self.embeddings, self.color_table))
        tail = struct.pack("<3d", self.recon_rmse, self.recon_tol, self.jitter_std)
        Path(path).write_bytes(header + body + tail)

    @classmethod
    def load(cls, path) -> "LearnedDecoder":
        raw = Path(path).read_bytes()
        if raw[:8] != b"ADVMIXD1":
            raise ValueError(f"{path}: wrong magic {raw[:8]!r} at offset 0, expected b'ADVMIXD1'")
        d_par, d_perp, hidden, n_pix, n_emb, n_col = struct.unpack_from("<6i", raw, 8)
        shapes = [(d_par, hidden), (hidden,), (hidden, n_pix), (n_pix,), (n_emb, d_par), (n_col, d_perp)]
        off = 32
        arrays = []
        for shp in shapes:
            k = int(np.prod(shp))
            if off + 8 * k > len(raw):
                raise ValueError(f"{path}: truncated at offset {off}")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=k, offset=off).reshape(shp).astype(np.float64))
            off += 8 * k
        if off + 24 != len(raw):
            raise ValueError(f"{path}: expected {off + 24} bytes, found {len(raw)}")
        rmse, tol, jit = struct.unpack_from("<3d", raw, off)
        return cls(*arrays, recon_rmse=rmse, recon_tol=tol, jitter_std=jit)


def train_learned_decoder(glyph_index: np.ndarray, images: np.ndarray, colors: np.ndarray,
                          rng: np.random.Generator, d_par: int = 16, hidden: int = 256,
                          epochs: int = 30, batch_size: int = 64, lr: float = 3e-3) -> LearnedDecoder:
    """Fit the imitation decoder on a (multiset) subset of colored examples.

    One embedding is learned per distinct glyph index (generative latent
    optimization); the provenance color of each example is fed as its z_perp.
    The color table records every example's color, so duplicates weight it.
    """
    glyph_index = np.asarray(glyph_index)
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    colors = np.asarray(colors, dtype=np.float64)
    uniq, inverse = np.unique(glyph_index, return_inverse=True)
    emb = rng.normal(0.0, 0.1, size=(len(uniq), d_par))
    w1 = rng.normal(0.0, math.sqrt(2.0 / d_par), size=(d_par, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, math.sqrt(1.0 / hidden), size=(hidden, N_PIXELS))
    b2 = np.full(N_PIXELS, -2.0)
    params = [w1, b1, w2, b2]
    state = ad.AdamState.for_params(params)
    emb_m = np.zeros_like(emb)
    emb_v = np.zeros_like(emb)
    dec = LearnedDecoder(w1, b1, w2, b2, emb, colors.copy())
    n = len(images)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            rows = inverse[idx]
            tp = [Tensor(p, requires_grad=True) for p in params]
            z = Tensor(emb[rows], requires_grad=True)
            x_hat = dec.decode_batch(z, colors[idx], params=tp)
            diff = ad.sub(x_hat, Tensor(images[idx]))
            loss = ad.mul(ad.sum(ad.square(diff)), 1.0 / len(idx))
            ad.backward(loss)
            ad.adam_step(params, [t.grad for t in tp], state, lr)
            # sparse Adam on the touched embedding rows
            g = np.zeros_like(emb)
            np.add.at(g, rows, z.grad)
            touched = np.unique(rows)
            emb_m[touched] = 0.9 * emb_m[touched] + 0.1 * g[touched]
            emb_v[touched] = 0.999 * emb_v[touched] + 0.001 * g[touched] ** 2
            t = state.t
            emb[touched] -= lr * (emb_m[touched] / (1 - 0.9 ** t)) / (
                np.sqrt(emb_v[touched] / (1 - 0.999 ** t)) + 1e-8)
    x_hat = dec.decode_batch(emb[inverse], colors).data
    per_image = np.sqrt(((x_hat - images) ** 2).mean(axis=1))
    dec.recon_rmse = float(np.sqrt(((x_hat - images) ** 2).mean()))
    dec.recon_tol = float(per_image.max())
    return dec


class ToyDecoder:
    """Two-dimensional toy: (x1, x2) = (z_perp + n1, z_par + n2), n1 ~ N(0, sqrt(3)), n2 ~ N(0, 1).

    The second parameter of N(., .) is read as a standard deviation.
    """

    d_par = 1
    d_perp = 1
    image_shape = (2,)
    perp_values = np.array([0.0, 10.0])
    perp_box = (np.array([0.0]), np.array([10.0]))
    x1_std = math.sqrt(3.0)
    x2_std = 1.0

    def decode_batch(self, z_par, z_perp, rng: np.random.Generator | None = None) -> Tensor:
        if rng is None:
            raise ValueError("ToyDecoder.decode needs an explicit rng")
        zp = _rows(z_par, 1, "toy decode z_par")
        zq = z_perp if isinstance(z_perp, Tensor) else Tensor(_rows(z_perp, 1, "toy decode z_perp"))
        if zq.data.ndim != 2 or zq.shape[1] != 1:
            raise ValueError(f"toy decode z_perp: expected [B, 1], got {list(zq.shape)}")
        B = zp.shape[0]
        n1 = rng.normal(0.0, self.x1_std, size=(B, 1))
        n2 = rng.normal(0.0, self.x2_std, size=(B, 1))
        x1 = ad.add(zq, n1)
        e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
        return ad.add(ad.matmul(x1, e1), Tensor((zp + n2) @ e2))

    def sample_perp(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        m = 1 if n is None else n
        out = self.perp_values[rng.integers(0, 2, size=m)][:, None]
        return out[0] if n is None else out


def _check(dec, z: FactorLatent):
    if z.z_par.size != dec.d_par or z.z_perp.size != dec.d_perp:
        raise ValueError(f"latent dims ({z.z_par.size}, {z.z_perp.size}) do not match decoder "
                         f"({dec.d_par}, {dec.d_perp})")


def decode(dec, z: FactorLatent, rng=None) -> np.ndarray:
    _check(dec, z)
    out = dec.decode_batch(z.z_par[None, :], z.z_perp[None, :], rng)
    return out.data.reshape(dec.image_shape)


def mix(dec, z_a: FactorLatent, z_b: FactorLatent, rng=None) -> np.ndarray:
    """Render z_a's content with z_b's style."""
    _check(dec, z_b)
    return decode(dec, FactorLatent(z_a.z_par, z_b.z_perp), rng)


def sample_perp(dec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    return dec.sample_perp(rng, n)


def perp_region(dec, center, epsilon: float) -> PerpRegion:
    lo, hi = dec.perp_box if dec.perp_box is not None else (None, None)
    return PerpRegion(np.asarray(center, dtype=np.float64), epsilon, lo, hi)
