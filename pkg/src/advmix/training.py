"""Training regimes sharing one Adam loop: nominal ERM, input-space adversarial
training, mixup, random latent mixing (RandMix) and adversarial latent mixing
(AdvMix)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackError, LatentAttackConfig, input_pgd, latent_pgd_batch
from .autodiff import Tensor
from .models import Classifier

log = logging.getLogger(__name__)

REGIMES = ("nominal", "at", "mixup", "randmix", "advmix")


class TrainingError(RuntimeError):
    pass


@dataclass
class RegimeConfig:
    regime: str
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    arch: str = "mlp2"
    at_epsilon: float | None = None
    at_steps: int | None = None
    at_step_size: float | None = None
    mixup_alpha: float | None = None
    attack: LatentAttackConfig | None = None
    input_clip: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        knobs = {
            "at": ("at_epsilon", "at_steps", "at_step_size"),
            "mixup": ("mixup_alpha",),
            "advmix": ("attack",),
        }
        defaults = {"at_epsilon": 0.1, "at_steps": 5, "at_step_size": None, "mixup_alpha": 0.2,
                    "attack": None}
        for regime, names in knobs.items():
            for name in names:
                if regime == self.regime:
                    if getattr(self, name) is None:
                        setattr(self, name, defaults[name])
                elif getattr(self, name) is not None:
                    raise ValueError(f"{name} given but regime is {self.regime!r}")
        if self.regime == "at" and self.at_step_size is None:
            self.at_step_size = 2.5 * self.at_epsilon / self.at_steps
        if self.regime == "advmix" and self.attack is None:
            self.attack = LatentAttackConfig(n_restarts=5, steps=10)
        if self.regime == "mixup" and not self.mixup_alpha > 0:
            raise ValueError("mixup_alpha must be positive")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError(f"invalid optimisation settings in {self}")


@dataclass
class TrainingData:
    """Labels plus original images and/or content latents (z_par)."""

    labels: np.ndarray
    images: np.ndarray | None = None
    z_par: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not len(self.labels):
            raise ValueError("training data is empty")
        if self.images is not None:
            self.images = np.asarray(self.images, dtype=np.float64).reshape(len(self.labels), -1)


@dataclass
class TrainingLog:
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float):
        self.rows.append((epoch, split, metric, float(value)))

    def values(self, metric: str) -> list[float]:
        return [r[3] for r in self.rows if r[2] == metric]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "metric", "value"])
            for epoch, split, metric, value in self.rows:
                w.writerow([epoch, split, metric, repr(value)])


def one_hot(labels, n_classes: int = 10) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def batch_mixup(x_a, y_a, x_b, y_b, alpha: float, rng: np.random.Generator, lam=None):
    """Convex combination of two batches; labels are (soft) one-hot rows.

    ``lam`` may be passed explicitly (scalar or per-row); otherwise each row
    draws its own lambda ~ Beta(alpha, alpha).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x_a, x_b = np.asarray(x_a, dtype=np.float64), np.asarray(x_b, dtype=np.float64)
    y_a, y_b = np.asarray(y_a, dtype=np.float64), np.asarray(y_b, dtype=np.float64)
    n = len(x_a)
    lam = rng.beta(alpha, alpha, size=n) if lam is None else np.broadcast_to(np.asarray(lam, float), (n,))
    lx = lam.reshape((n,) + (1,) * (x_a.ndim - 1))
    ly = lam.reshape((n,) + (1,) * (y_a.ndim - 1))
    return lx * x_a + (1 - lx) * x_b, ly * y_a + (1 - ly) * y_b


def batch_randmix(z_par, labels, dec, rng: np.random.Generator):
    """Re-render each example with a freshly sampled z_perp; labels pass through."""
    labels = np.asarray(labels)
    z_par = np.asarray(z_par, dtype=np.float64).reshape(len(labels), -1)
    perp = np.asarray(dec.sample_perp(rng, len(labels))).reshape(len(labels), -1)
    return dec.decode_batch(z_par, perp, rng).data, labels.copy()


def batch_advmix(z_par, labels, dec, f_snapshot, atk: LatentAttackConfig, rng: np.random.Generator):
    """Replace every example by the attack's best visited variant; labels pass through.

    Returns (images, labels, attack result). Rows whose restarts all failed
    numerically are dropped, up to 1% of the batch.
    """
    labels = np.asarray(labels)
    res = latent_pgd_batch(f_snapshot, dec, z_par, labels, atk, rng)
    if res.failed.any():
        n_bad = int(res.failed.sum())
        if n_bad > 0.01 * len(labels):
            raise AttackError(f"batch_advmix: {n_bad}/{len(labels)} examples failed numerically")
        log.warning("batch_advmix: skipping %d numerically failed examples", n_bad)
        keep = ~res.failed
        return res.images[keep], labels[keep].copy(), res
    return res.images, labels.copy(), res


def train(cfg: RegimeConfig, data: TrainingData, dec, rng: np.random.Generator,
          n_classes: int = 10, n_in: int | None = None) -> tuple[Classifier, TrainingLog]:
    if cfg.regime in ("randmix", "advmix"):
        if dec is None or data.z_par is None:
            raise ValueError(f"{cfg.regime} needs a decoder and content latents")
        n_in = n_in or int(np.prod(dec.image_shape))
    else:
        if data.images is None:
            raise ValueError(f"{cfg.regime} needs images")
        n_in = n_in or data.images.shape[1]
    f = Classifier(cfg.arch, n_in, n_classes, rng=rng)
    state = ad.AdamState.for_params(f.params)
    tlog = TrainingLog()
    n = len(data.labels)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        attack_hits = attack_total = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            y = data.labels[idx]
            targets = None
            if cfg.regime == "nominal":
                x = data.images[idx]
            elif cfg.regime == "at":
                x = input_pgd(f, data.images[idx], y, cfg.at_epsilon, cfg.at_steps, cfg.at_step_size, rng,
                              cfg.input_clip)
            elif cfg.regime == "mixup":
                perm = rng.permutation(len(idx))
                x, targets = batch_mixup(data.images[idx], one_hot(y, n_classes), data.images[idx][perm],
                                         one_hot(y[perm], n_classes), cfg.mixup_alpha, rng)
            elif cfg.regime == "randmix":
                x, y = batch_randmix(data.z_par[idx], y, dec, rng)
            else:
                x, y, res = batch_advmix(data.z_par[idx], y, dec, f.snapshot(), cfg.attack, rng)
                attack_hits += int(res.success.sum())
                attack_total += len(res.success)
            if targets is None:
                targets = one_hot(y, n_classes)
            params = [Tensor(p, requires_grad=True) for p in f.params]
            loss = ad.soft_cross_entropy(f.forward(Tensor(x), params), targets)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            ad.backward(loss)
            ad.adam_step(f.params, [p.grad for p in params], state, cfg.lr)
        if data.images is not None:
            tlog.add(epoch, "train", "clean_accuracy", np.mean(f.predict(data.images) == data.labels))
        if attack_total:
            tlog.add(epoch, "train", "attack_success_rate", attack_hits / attack_total)
    return f, tlog


def save_log(tlog: TrainingLog, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tlog.write_csv(path)
