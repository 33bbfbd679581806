"""Worst-case search over z_perp (restarted latent PGD), input-space l-inf PGD,
and the environment-enumeration worst-case risk."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .generators import FactorLatent, PerpRegion, project_perp, project_simplex


class AttackError(RuntimeError):
    pass


@dataclass
class LatentAttackConfig:
    n_restarts: int = 5
    steps: int = 10
    epsilon: float = 0.03
    alpha: float | None = None  # defaults to epsilon / 4
    seed: int = 0
    simplex: bool = False  # search the color simplex; needs epsilon >= 1

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = self.epsilon / 4
        if self.n_restarts < 1 or self.steps < 1 or not self.alpha > 0 or not self.epsilon > 0:
            raise ValueError(f"invalid attack config {self}")
        if self.simplex and self.epsilon < 1:
            raise ValueError("simplex-restricted attacks need epsilon >= 1")


@dataclass
class AttackReport:
    success: bool
    image: np.ndarray
    z_perp: np.ndarray
    restarts_used: int
    steps_used: int
    loss_trace: list[float] = field(default_factory=list)
    centers: list[np.ndarray] = field(default_factory=list)
    best_loss: float = float("-inf")


@dataclass
class BatchAttackResult:
    success: np.ndarray
    images: np.ndarray
    z_perp: np.ndarray
    restarts_used: np.ndarray
    steps_used: np.ndarray
    best_loss: np.ndarray
    failed: np.ndarray
    traces: list[list[float]] | None = None
    centers: list[list[np.ndarray]] | None = None


def _forward_ce(f, dec, z_par, z, labels, noise_rng, need_grad):
    zt = Tensor(z, requires_grad=need_grad)
    x = dec.decode_batch(z_par, zt, noise_rng)
    logits = f.forward(x)
    return zt, x, logits


def latent_pgd_batch(f, dec, z_par, labels, cfg: LatentAttackConfig,
                     rng: np.random.Generator | None = None, record: bool = False) -> BatchAttackResult:
    """Restarted projected gradient ascent on the cross-entropy over z_perp.

    Each restart draws a fresh start from the decoder's z_perp sampler and
    keeps every iterate inside the l-inf ball of radius ``epsilon`` around that
    start (and inside the decoder's valid box). The start is tested before
    any ascent; a row stops as soon as one of its iterates is misclassified.
    Rows that never flip return the highest-loss variant they visited.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    z_par = np.asarray(z_par, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels, dtype=np.int64)
    B = len(labels)
    lo, hi = dec.perp_box if dec.perp_box is not None else (None, None)
    n_out = int(np.prod(dec.image_shape))
    best_loss = np.full(B, -np.inf)
    best_img = np.zeros((B, n_out))
    best_z = np.zeros((B, dec.d_perp))
    success = np.zeros(B, bool)
    restarts_used = np.zeros(B, np.int64)
    steps_used = np.zeros(B, np.int64)
    finite_restart = np.zeros(B, bool)
    traces = [[] for _ in range(B)] if record else None
    centers = [[] for _ in range(B)] if record else None

    for _ in range(cfg.n_restarts):
        starts = np.asarray(dec.sample_perp(rng, B), dtype=np.float64).reshape(B, dec.d_perp)
        noise_rng = np.random.default_rng(rng.integers(2 ** 63))
        rows = np.flatnonzero(~success)
        if not len(rows):
            break
        restarts_used[rows] += 1
        center = starts[rows]
        if lo is not None:
            center = np.clip(center, lo, hi)
        if cfg.simplex:
            center = project_simplex(center)
        z = center.copy()
        if record:
            for j, i in enumerate(rows):
                centers[i].append(center[j].copy())
        for k in range(cfg.steps + 1):
            need_grad = k < cfg.steps
            zt, x, logits = _forward_ce(f, dec, z_par[rows], z, labels[rows], noise_rng, need_grad)
            ce = ad.per_example_cross_entropy(logits.data, labels[rows])
            pred = logits.data.argmax(axis=1)
            ok = np.isfinite(ce)
            finite_restart[rows[ok]] = True
            if record:
                for j, i in enumerate(rows):
                    traces[i].append(float(ce[j]))
            flip = ok & (pred != labels[rows])
            better = ok & (ce > best_loss[rows])
            upd = flip | better
            best_loss[rows[upd]] = ce[upd]
            best_img[rows[upd]] = x.data[upd]
            best_z[rows[upd]] = z[upd]
            success[rows[flip]] = True
            keep = ok & ~flip
            if not need_grad:
                break
            # gradient of the summed per-row losses gives every row its own gradient
            loss = ad.mul(ad.cross_entropy(logits, labels[rows]), float(len(rows)))
            ad.backward(loss)
            g = zt.grad
            keep &= np.isfinite(g).all(axis=1)
            rows, z, g, center = rows[keep], z[keep], g[keep], center[keep]
            if not len(rows):
                break
            region = PerpRegion(center, cfg.epsilon, lo, hi, cfg.simplex)
            z = project_perp(z + cfg.alpha * g, region)
            steps_used[rows] += 1

    return BatchAttackResult(success, best_img, best_z, restarts_used, steps_used, best_loss,
                             ~finite_restart, traces, centers)


def latent_pgd(f, dec, z: FactorLatent, y: int, cfg: LatentAttackConfig,
               rng: np.random.Generator | None = None) -> AttackReport:
    res = latent_pgd_batch(f, dec, z.z_par[None, :], np.array([y]), cfg, rng, record=True)
    if res.failed[0]:
        raise AttackError("latent_pgd: every restart produced a non-finite loss or gradient")
    return AttackReport(bool(res.success[0]), res.images[0].reshape(dec.image_shape), res.z_perp[0],
                        int(res.restarts_used[0]), int(res.steps_used[0]), res.traces[0],
                        res.centers[0], float(res.best_loss[0]))


def input_pgd(f, x, y, epsilon: float, steps: int, step_size: float,
              rng: np.random.Generator | None = None, clip: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """l-inf PGD in input space: random start in the ball, signed steps, clip to the ball
    and to ``clip`` (pixel range by default; None for unbounded inputs)."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    xb = x.reshape(len(np.atleast_1d(y)), -1)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if epsilon == 0:
        return x.copy()
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = clip if clip is not None else (-np.inf, np.inf)
    adv = np.clip(xb + rng.uniform(-epsilon, epsilon, size=xb.shape), lo, hi)
    for _ in range(steps):
        xt = Tensor(adv, requires_grad=True)
        ad.backward(ad.cross_entropy(f.forward(xt), labels))
        adv = adv + step_size * np.sign(xt.grad)
        adv = np.clip(np.clip(adv, xb - epsilon, xb + epsilon), lo, hi)
    return adv.reshape(shape)


def environment_worst_case(f, dec, z_par, labels, env_perps, rng=None):
    """0-1 risk of ``f`` on every environment {dec(z_par_i, e), y_i}; returns (risks, max)."""
    env_perps = [np.asarray(e, dtype=np.float64) for e in env_perps]
    if not env_perps:
        raise ValueError("env_perps must be non-empty")
    z_par = np.asarray(z_par, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels)
    risks = []
    for e in env_perps:
        x = dec.decode_batch(z_par, np.tile(e, (len(labels), 1)), rng).data
        risks.append(float(np.mean(f.predict(x) != labels)))
    risks = np.array(risks)
    return risks, float(risks.max())
