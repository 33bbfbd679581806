"""Clean, robust and invariance evaluation plus CSV/PPM emission.

Robust accuracy follows the dominance rule: an example misclassified on its
clean image is counted as non-robust without attacking it, so robust accuracy
can never exceed clean accuracy.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackError, LatentAttackConfig, environment_worst_case, latent_pgd_batch

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("experiment_id", "metric", "value", "seed", "config_hash")
RGB_GRID = np.eye(3)


def color_grid(kind: str = "cube", n: int = 5) -> np.ndarray:
    """``rgb``: the three base colors. ``cube``: an n^3 uniform grid over [0, 1]^3."""
    if kind == "rgb":
        return RGB_GRID.copy()
    if kind == "cube":
        t = np.linspace(0.0, 1.0, n)
        return np.array(list(itertools.product(t, t, t)))
    raise ValueError(f"unknown grid kind {kind!r}")


def eval_clean(f, images, labels) -> float:
    labels = np.asarray(labels)
    if not len(labels):
        raise ValueError("eval_clean: empty dataset")
    return float(np.mean(f.predict(images) == labels))


@dataclass
class RobustResult:
    accuracy: float
    clean_correct: np.ndarray
    robust: np.ndarray
    attacked: np.ndarray  # indices that were attacked
    success: np.ndarray   # per attacked example
    restarts_used: np.ndarray
    steps_used: np.ndarray
    adv_images: np.ndarray


def eval_robust(f, dec, z_par, labels, images, atk: LatentAttackConfig,
                rng: np.random.Generator | None = None, batch: int = 256) -> RobustResult:
    """Robust iff clean-correct and no variant visited by the latent attack is misclassified."""
    labels = np.asarray(labels, dtype=np.int64)
    if not len(labels):
        raise ValueError("eval_robust: empty dataset")
    rng = np.random.default_rng(atk.seed) if rng is None else rng
    z_par = np.asarray(z_par, dtype=np.float64).reshape(len(labels), -1)
    clean_ok = f.predict(images) == labels
    idx = np.flatnonzero(clean_ok)
    success = np.zeros(len(idx), bool)
    failed = np.zeros(len(idx), bool)
    restarts = np.zeros(len(idx), np.int64)
    steps = np.zeros(len(idx), np.int64)
    adv = np.zeros((len(idx), int(np.prod(dec.image_shape))))
    for s in range(0, len(idx), batch):
        sl = slice(s, s + batch)
        res = latent_pgd_batch(f, dec, z_par[idx[sl]], labels[idx[sl]], atk, rng)
        success[sl], failed[sl] = res.success, res.failed
        restarts[sl], steps[sl], adv[sl] = res.restarts_used, res.steps_used, res.images
    if failed.sum() > 0.01 * len(labels):
        raise AttackError(f"eval_robust: {int(failed.sum())}/{len(labels)} attacks failed numerically")
    robust = clean_ok.copy()
    robust[idx[success | failed]] = False
    return RobustResult(float(robust.mean()), clean_ok, robust, idx, success, restarts, steps, adv)


def eval_invariance(f, dec, z_par, grid, rng: np.random.Generator | None = None) -> float:
    """Fraction of glyphs whose predicted label is the same for every grid color."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1, dec.d_perp)
    z_par = np.asarray(z_par, dtype=np.float64).reshape(-1, dec.d_par)
    preds = np.stack([f.predict(dec.decode_batch(z_par, np.tile(c, (len(z_par), 1)), rng).data)
                      for c in grid], axis=1)
    return float(np.mean((preds == preds[:, :1]).all(axis=1)))


@dataclass
class EvalReport:
    clean_accuracy: float
    robust_accuracy: float | None = None
    env_risks: np.ndarray | None = None
    invariance_rate: float | None = None
    per_class_clean: np.ndarray | None = None
    mean_restarts_to_success: float | None = None
    mean_steps_to_success: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("clean_accuracy", "robust_accuracy", "invariance_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.robust_accuracy is not None and self.robust_accuracy > self.clean_accuracy:
            raise ValueError("robust accuracy exceeds clean accuracy")

    def rows(self) -> list[tuple[str, float]]:
        out = [("clean_accuracy", self.clean_accuracy)]
        if self.robust_accuracy is not None:
            out.append(("robust_accuracy", self.robust_accuracy))
            out.append(("dominance_rule", 1.0))
        if self.env_risks is not None:
            out += [(f"env_risk_{i}", float(r)) for i, r in enumerate(self.env_risks)]
            out += [("env_risk_max", float(np.max(self.env_risks))),
                    ("env_risk_mean", float(np.mean(self.env_risks)))]
        if self.invariance_rate is not None:
            out.append(("invariance_rate", self.invariance_rate))
        if self.per_class_clean is not None:
            out += [(f"clean_accuracy_class_{k}", float(v)) for k, v in enumerate(self.per_class_clean)]
        if self.mean_restarts_to_success is not None:
            out.append(("mean_restarts_to_success", self.mean_restarts_to_success))
        if self.mean_steps_to_success is not None:
            out.append(("mean_steps_to_success", self.mean_steps_to_success))
        out += sorted(self.extra.items())
        return out


def per_class_accuracy(pred, labels, n_classes: int = 10) -> np.ndarray:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return np.array([np.mean(pred[labels == k] == k) if np.any(labels == k) else np.nan
                     for k in range(n_classes)])


def evaluate(f, dec, z_par, labels, images, atk: LatentAttackConfig | None = None, grid=None,
             env_perps=None, rng: np.random.Generator | None = None) -> tuple[EvalReport, RobustResult | None]:
    """Everything the report needs in one pass; pieces are skipped when their inputs are None."""
    rng = np.random.default_rng(0) if rng is None else rng
    labels = np.asarray(labels)
    pred = f.predict(images)
    clean = eval_clean(f, images, labels)
    rob = None
    rep = EvalReport(clean, per_class_clean=per_class_accuracy(pred, labels, f.n_out))
    if atk is not None:
        rob = eval_robust(f, dec, z_par, labels, images, atk, rng)
        rep.robust_accuracy = rob.accuracy
        hit = rob.success
        if hit.any():
            rep.mean_restarts_to_success = float(rob.restarts_used[hit].mean())
            rep.mean_steps_to_success = float(rob.steps_used[hit].mean())
    if grid is not None:
        rep.invariance_rate = eval_invariance(f, dec, z_par, grid, rng)
    if env_perps is not None:
        rep.env_risks, _ = environment_worst_case(f, dec, z_par, labels, env_perps, rng)
    rep.__post_init__()
    return rep, rob


def write_rows(path, rows) -> None:
    """Write (experiment_id, metric, value, seed, config_hash) rows with a fixed header."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for exp, metric, value, seed, h in rows:
                w.writerow([exp, metric, repr(float(value)), int(seed), h])
    except OSError as e:
        raise OSError(f"cannot write report {path}: {e}") from e


def emit_report(report: EvalReport, path, experiment_id: str, seed: int, config_hash: str) -> None:
    write_rows(path, [(experiment_id, m, v, seed, config_hash) for m, v in report.rows()])


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def to_bytes(image) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up: 0.5 -> 128."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_ppm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3], got {list(img.shape)}")
    h, w, _ = img.shape
    try:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_bytes(img).tobytes())
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not a P6/255 PPM")
    w, h = int(parts[1]), int(parts[2])
    body = parts[4]
    return np.frombuffer(body, np.uint8, h * w * 3).reshape(h, w, 3)


def rescaled_difference(original, variant) -> np.ndarray:
    d = np.asarray(variant, dtype=np.float64) - np.asarray(original, dtype=np.float64)
    span = d.max() - d.min()
    return np.full_like(d, 0.5) if span == 0 else (d - d.min()) / span


def comparison_grid(originals, variants, gap: int = 2) -> np.ndarray:
    """Rows of (original | variant | rescaled difference) separated by white gaps."""
    rows = []
    for o, v in zip(originals, variants):
        o = np.asarray(o, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64).reshape(o.shape)
        sep = np.ones((o.shape[0], gap, o.shape[2]))
        rows.append(np.concatenate([o, sep, v, sep, rescaled_difference(o, v)], axis=1))
        rows.append(np.ones((gap, rows[-1].shape[1], o.shape[2])))
    return np.concatenate(rows[:-1], axis=0)


def emit_images(images, directory, prefix: str = "img") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = directory / f"{prefix}_{i:04d}.ppm"
        write_ppm(p, img)
        paths.append(p)
    return paths
