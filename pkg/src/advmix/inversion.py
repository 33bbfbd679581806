"""Latent inversion: find (z_par, z_perp) whose decoding matches a target image.

The objective is a pixel + perceptual reconstruction loss plus a mixing loss
that asks the content latent to still match the target's features after its
style is swapped for a random one. Features come from a trained classifier's
hidden layers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .generators import FactorLatent, ProceduralGlyphDecoder, image_digest


class InversionError(RuntimeError):
    pass


class FeatureNet:
    """Activations of the first ``n_layers`` layers of a classifier."""

    def __init__(self, classifier, n_layers: int = 3):
        self.classifier = classifier.snapshot() if not getattr(classifier, "frozen", False) else classifier
        self.n_layers = min(n_layers, len(classifier.params) // 2)

    def __call__(self, x) -> list[Tensor]:
        return self.classifier.activations(x)[:self.n_layers]


@dataclass
class EncoderConfig:
    feature_net: FeatureNet
    M: int = 256
    N: int = 400
    step: float = 0.05
    alpha_weights: list[float] | None = None
    beta_weights: list[float] | None = None

    def __post_init__(self):
        L = self.feature_net.n_layers
        if self.alpha_weights is None:
            self.alpha_weights = [1.0] * (L + 1)
        if self.beta_weights is None:
            self.beta_weights = [0.2] * L
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if min(self.alpha_weights) < 0 or min(self.beta_weights, default=0) < 0:
            raise ValueError("loss weights must be non-negative")
        if len(self.alpha_weights) != L + 1 or len(self.beta_weights) != L:
            raise ValueError(f"need {L + 1} alpha and {L} beta weights for {L} feature layers")


def _sqdist(a, b) -> Tensor:
    return ad.sum(ad.square(ad.sub(a, b)))


def reconstruct_loss(x_hat, x, feats_hat, feats, alpha_weights) -> Tensor:
    """alpha_0 * ||x_hat - x||^2 + sum_i alpha_i * ||A_hat_i - A_i||^2."""
    if len(feats_hat) != len(feats) or len(alpha_weights) != len(feats) + 1:
        raise ValueError(f"layer-count mismatch: {len(feats_hat)} vs {len(feats)} features, "
                         f"{len(alpha_weights)} alpha weights")
    total = ad.mul(_sqdist(x_hat, x), float(alpha_weights[0]))
    for a, fh, f in zip(alpha_weights[1:], feats_hat, feats):
        total = ad.add(total, ad.mul(_sqdist(fh, f), float(a)))
    return total


def mix_loss(feats_mixed, feats_target, beta_weights) -> Tensor:
    """sum_i beta_i * ||A_mix_i - A_i||^2."""
    if len(feats_mixed) != len(feats_target) or len(beta_weights) != len(feats_target):
        raise ValueError(f"layer-count mismatch: {len(feats_mixed)} vs {len(feats_target)} features, "
                         f"{len(beta_weights)} beta weights")
    total = Tensor(0.0)
    for b, fm, f in zip(beta_weights, feats_mixed, feats_target):
        total = ad.add(total, ad.mul(_sqdist(fm, f), float(b)))
    return total


def _row_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d * d).sum(axis=1)


@dataclass
class EncodeResult:
    z_par: np.ndarray
    z_perp: np.ndarray
    loss: np.ndarray  # final per-image objective
    initial_loss: np.ndarray
    trace: list[np.ndarray] = field(default_factory=list)

    def latent(self, i: int = 0) -> FactorLatent:
        return FactorLatent(self.z_par[i], self.z_perp[i])


def encode_batch(dec, x, cfg: EncoderConfig, rng: np.random.Generator,
                 init: tuple[np.ndarray, np.ndarray] | None = None) -> EncodeResult:
    """Gradient descent on reconstruction + mixing loss, one step size per image.

    A step is kept only if it does not increase that image's objective
    (evaluated with the same mixing partner); otherwise the step size halves.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    B = len(x)
    if init is None:
        zp = np.stack([dec.sample_par(rng, cfg.M).mean(axis=0) for _ in range(B)])
        zq = np.stack([np.asarray(dec.sample_perp(rng, cfg.M)).mean(axis=0) for _ in range(B)])
    else:
        zp = np.array(init[0], dtype=np.float64).reshape(B, -1)
        zq = np.array(init[1], dtype=np.float64).reshape(B, -1)
    target_feats = [t.data for t in cfg.feature_net(x)]
    gamma = np.full(B, cfg.step)
    aw, bw = cfg.alpha_weights, cfg.beta_weights

    def evaluate(zp_, zq_, partner, need_grad):
        tp = Tensor(zp_, requires_grad=need_grad)
        tq = Tensor(zq_, requires_grad=need_grad)
        x_hat = dec.decode_batch(tp, tq)
        feats_hat = cfg.feature_net(x_hat)
        x_mix = dec.decode_batch(tp, Tensor(partner))
        feats_mix = cfg.feature_net(x_mix)
        rows = aw[0] * _row_sq(x_hat.data, x)
        for a, fh, f in zip(aw[1:], feats_hat, target_feats):
            rows = rows + a * _row_sq(fh.data, f)
        for b, fm, f in zip(bw, feats_mix, target_feats):
            rows = rows + b * _row_sq(fm.data, f)
        if not need_grad:
            return rows, None, None
        total = ad.add(reconstruct_loss(x_hat, Tensor(x), feats_hat, [Tensor(f) for f in target_feats], aw),
                       mix_loss(feats_mix, [Tensor(f) for f in target_feats], bw))
        ad.backward(total)
        return rows, tp.grad, tq.grad

    initial = None
    trace = []
    current = None
    for k in range(cfg.N):
        partner = np.asarray(dec.sample_perp(rng, B)).reshape(B, -1)
        current, gp, gq = evaluate(zp, zq, partner, True)
        if initial is None:
            initial = current.copy()
        bad = ~np.isfinite(current) | ~np.isfinite(gp).all(axis=1) | ~np.isfinite(gq).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InversionError(f"non-finite objective at step {k}, image {i}: loss={current[i]!r}")
        cand_p = zp - gamma[:, None] * gp
        cand_q = zq - gamma[:, None] * gq
        trial, _, _ = evaluate(cand_p, cand_q, partner, False)
        accept = np.isfinite(trial) & (trial <= current)
        zp = np.where(accept[:, None], cand_p, zp)
        zq = np.where(accept[:, None], cand_q, zq)
        gamma = np.where(accept, gamma, gamma / 2)
        trace.append(np.where(accept, trial, current))
    final, _, _ = evaluate(zp, zq, np.asarray(dec.sample_perp(rng, B)).reshape(B, -1), False)
    return EncodeResult(zp, zq, final, initial, trace)


def encode(dec, x, cfg: EncoderConfig, rng: np.random.Generator, init: FactorLatent | None = None):
    """Invert one image; returns (latent, final loss)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    res = encode_batch(dec, x, cfg, rng, None if init is None else (init.z_par[None], init.z_perp[None]))
    return res.latent(0), float(res.loss[0])


def invert_procedural(dec: ProceduralGlyphDecoder, x) -> FactorLatent:
    """Exact inverse for images the data module rendered (it records their provenance)."""
    prov = getattr(x, "provenance", None)
    if prov is not None:
        return FactorLatent(prov.z_par.copy(), prov.z_perp.copy())
    hit = dec.provenance.get(image_digest(np.asarray(x)))
    if hit is None:
        raise InversionError("image has no recorded provenance; use encode() with a learned decoder")
    return FactorLatent(hit.z_par.copy(), hit.z_perp.copy())


# latent file layout (little-endian): b"ADVMIXL1", int32 count, d_par, d_perp;
# per record int32 label, float64 z_par[d_par], float64 z_perp[d_perp]
def save_latents(path, labels, z_par, z_perp) -> None:
    labels = np.asarray(labels)
    z_par = np.asarray(z_par, dtype=np.float64).reshape(len(labels), -1)
    z_perp = np.asarray(z_perp, dtype=np.float64).reshape(len(labels), -1)
    rec = np.dtype([("label", "<i4"), ("z_par", "<f8", (z_par.shape[1],)), ("z_perp", "<f8", (z_perp.shape[1],))])
    arr = np.empty(len(labels), dtype=rec)
    arr["label"], arr["z_par"], arr["z_perp"] = labels, z_par, z_perp
    Path(path).write_bytes(b"ADVMIXL1" + struct.pack("<3i", len(labels), z_par.shape[1], z_perp.shape[1])
                           + arr.tobytes())


def load_latents(path):
    raw = Path(path).read_bytes()
    if raw[:8] != b"ADVMIXL1":
        raise ValueError(f"{path}: wrong magic {raw[:8]!r} at offset 0")
    n, dp, dq = struct.unpack_from("<3i", raw, 8)
    rec = np.dtype([("label", "<i4"), ("z_par", "<f8", (dp,)), ("z_perp", "<f8", (dq,))])
    if len(raw) != 20 + n * rec.itemsize:
        raise ValueError(f"{path}: expected {20 + n * rec.itemsize} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=rec, offset=20)
    return (arr["label"].astype(np.int64), arr["z_par"].astype(np.float64).reshape(n, dp),
            arr["z_perp"].astype(np.float64).reshape(n, dq))
