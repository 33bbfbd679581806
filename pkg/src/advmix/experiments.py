"""Pipeline stages shared by the command-line commands and the reproduction presets.

Every stage reads its inputs from the output directory (or from the in-memory
cache of an earlier stage in the same process), writes its artifacts there and
echoes the config beside them. Randomness comes from named sub-streams of the
config seed, so each stage can be rerun on its own with identical results.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import evaluation as E
from . import generators as G
from . import inversion as I
from . import training as T
from .attacks import LatentAttackConfig
from .models import Classifier

log = logging.getLogger(__name__)

REGIME_ORDER = T.REGIMES


class DataError(RuntimeError):
    """Missing or unreadable cached artifact."""


@dataclass
class Context:
    cfg: dict
    out: Path
    seed: int
    cache: dict = field(default_factory=dict)

    def rng(self, name: str, sub: int = 0) -> np.random.Generator:
        return C.stream(self.seed, name, sub)

    @property
    def hash(self) -> str:
        return C.config_hash(self.cfg)


def make_context(cfg: dict, out=None, seed: int | None = None) -> Context:
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["dataset"]["seed"] = int(seed)
    if out is not None:
        cfg["output"]["dir"] = str(out)
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return Context(cfg, out, int(cfg["dataset"]["seed"]))


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path}; run `advmix {command}` with the same config first")
    return path


def _is_toy(ctx) -> bool:
    return ctx.cfg["dataset"]["mode"] == "toy"


def _rgb_weights(ds: dict) -> tuple:
    w = ds["rgb_weights"]
    return D.RGB_WEIGHTS[w] if isinstance(w, str) else tuple(w)


# ---------------------------------------------------------------- data

def _idx_paths(ctx) -> dict:
    ds = ctx.cfg["dataset"]
    if "idx_dir" in ds:
        d = Path(ds["idx_dir"])
        return {s: (_need(d / f"{s}-images-idx3-ubyte", "build-data"), _need(d / f"{s}-labels-idx1-ubyte", "build-data"))
                for s in ("train", "test")}
    d = ctx.out / "data" / "mnist"
    if not (d / "test-labels-idx1-ubyte").exists():
        return D.export_bundled_idx(d)
    return {s: (d / f"{s}-images-idx3-ubyte", d / f"{s}-labels-idx1-ubyte") for s in ("train", "test")}


def _gray(ctx):
    if "gray" not in ctx.cache:
        ds = ctx.cfg["dataset"]
        paths = _idx_paths(ctx)
        tr = D.load_idx(*paths["train"])
        te = D.load_idx(*paths["test"])
        if ds["n_train"] > len(tr) or ds["n_test"] > len(te):
            raise DataError(f"requested {ds['n_train']}/{ds['n_test']} examples, have {len(tr)}/{len(te)}")
        ctx.cache["gray"] = (tr.take(np.arange(ds["n_train"])), te.take(np.arange(ds["n_test"])))
    return ctx.cache["gray"]


def _toy_csv(path: Path, toy: D.ToyDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "label", "z_par", "z_perp"])
        for (x1, x2), y, zp, zq in zip(toy.points, toy.labels, toy.z_par, toy.z_perp):
            w.writerow([repr(float(x1)), repr(float(x2)), int(y), repr(float(zp)), repr(float(zq))])


def _read_toy(path: Path) -> D.ToyDataset:
    with open(_need(path, "build-data"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
    return D.ToyDataset(pts, np.array([int(r["label"]) for r in rows]),
                        np.array([float(r["z_par"]) for r in rows]), np.array([float(r["z_perp"]) for r in rows]))


def build_data(ctx: Context):
    ds = ctx.cfg["dataset"]
    rng = ctx.rng("dataset")
    ddir = ctx.out / "data"
    ddir.mkdir(parents=True, exist_ok=True)
    if _is_toy(ctx):
        tr, te = D.make_toy(ds["n_train"], rng), D.make_toy(ds["n_test"], rng)
        _toy_csv(ddir / "toy_train.csv", tr)
        _toy_csv(ddir / "toy_test.csv", te)
        ctx.cache["data"] = (tr, te)
    else:
        gtr, gte = _gray(ctx)
        spec = D.ColorSpec(ds["mode"], sigma=ds["sigma"], rgb_weights=_rgb_weights(ds))
        test_spec = D.ColorSpec(ds["test_mode"])
        ctr, cte = D.colorize(gtr, spec, rng), D.colorize(gte, test_spec, rng)
        D.save_colored(ctr, ddir / "train.advmixx")
        D.save_colored(cte, ddir / "test.advmixx")
        ctx.cache["data"] = (ctr, cte)
    C.echo(ctx.cfg, ddir, artifacts=sorted(p for p in ddir.iterdir() if p.suffix in (".csv", ".advmixx")))
    return ctx.cache["data"]


def load_data(ctx: Context):
    if "data" not in ctx.cache:
        ddir = ctx.out / "data"
        if _is_toy(ctx):
            ctx.cache["data"] = (_read_toy(ddir / "toy_train.csv"), _read_toy(ddir / "toy_test.csv"))
        else:
            gtr, gte = _gray(ctx)
            try:
                ctx.cache["data"] = (D.load_colored(_need(ddir / "train.advmixx", "build-data"), gtr),
                                     D.load_colored(_need(ddir / "test.advmixx", "build-data"), gte))
            except D.DataFormatError as e:
                raise DataError(str(e)) from e
    return ctx.cache["data"]


# ---------------------------------------------------------------- decoder

def _procedural_sampler(dec: G.ProceduralGlyphDecoder, mode: str):
    """rgb_restricted experiments sample the three base colors; all others the unit cube."""
    return dec.with_sampler(D.RGB) if mode == "rgb_restricted" else dec.with_sampler(None)


def train_decoder(ctx: Context):
    kind = ctx.cfg["decoder"]["kind"]
    ctr, _ = load_data(ctx)
    if kind == "toy":
        dec = G.ToyDecoder()
    elif kind == "procedural":
        ds = ctx.cfg["dataset"]
        dec = _procedural_sampler(ctr.decoder, ds["mode"])
    else:
        rng = ctx.rng("decoder")
        tp = ctx.cfg["decoder"]["train_params"]
        sub = D.decoder_bias_subset(ctr, ctx.cfg["decoder"]["bias_profile"], rng)
        dec = G.train_learned_decoder(sub.glyph_index, sub.flat(), sub.colors, rng, d_par=tp["d_par"],
                                      hidden=tp["hidden"], epochs=tp["epochs"], batch_size=tp["batch_size"],
                                      lr=tp["lr"])
        dec.save(ctx.out / "decoder.advmixd")
        C.echo(ctx.cfg, ctx.out, "decoder.config", [ctx.out / "decoder.advmixd"])
    ctx.cache["decoder"] = dec
    return dec


def load_decoder(ctx: Context):
    if "decoder" not in ctx.cache:
        kind = ctx.cfg["decoder"]["kind"]
        if kind == "learned":
            ctx.cache["decoder"] = G.LearnedDecoder.load(_need(ctx.out / "decoder.advmixd", "train-decoder"))
        else:
            return train_decoder(ctx)
    return ctx.cache["decoder"]


# ---------------------------------------------------------------- encoder

def encode(ctx: Context):
    """Content latents for the training set: exact for procedural and toy data, gradient inversion otherwise."""
    ctr, _ = load_data(ctx)
    dec = load_decoder(ctx)
    kind = ctx.cfg["decoder"]["kind"]
    summary = {}
    if kind == "toy":
        z_par, z_perp = ctr.z_par[:, None], ctr.z_perp[:, None]
    elif kind == "procedural":
        lat = [I.invert_procedural(ctr.decoder, ctr[i]) for i in range(len(ctr))]
        z_par = np.array([z.z_par for z in lat])
        z_perp = np.array([z.z_perp for z in lat])
    else:
        ec = ctx.cfg["decoder"]["encode"]
        feat_cfg = T.RegimeConfig("nominal", epochs=ec["feature_epochs"])
        feat_model, _ = T.train(feat_cfg, T.TrainingData(ctr.labels, ctr.flat()), None, ctx.rng("decoder", 1))
        ecfg = I.EncoderConfig(I.FeatureNet(feat_model), M=ec["M"], N=ec["N"], step=ec["step"])
        res = I.encode_batch(dec, ctr.flat(), ecfg, ctx.rng("decoder", 2))
        z_par, z_perp = res.z_par, res.z_perp
        x_hat = dec.decode_batch(z_par, z_perp).data
        summary = {"inversion_rmse": float(np.sqrt(np.mean((x_hat - ctr.flat()) ** 2))),
                   "decoder_recon_rmse": dec.recon_rmse}
    I.save_latents(ctx.out / "latents_train.advmixl", ctr.labels, z_par, z_perp)
    C.echo(ctx.cfg, ctx.out, "latents.config", [ctx.out / "latents_train.advmixl"])
    ctx.cache["latents"] = (z_par, z_perp)
    ctx.cache["encode_summary"] = summary
    return z_par, z_perp


def load_latents(ctx: Context):
    if "latents" not in ctx.cache:
        _, z_par, z_perp = I.load_latents(_need(ctx.out / "latents_train.advmixl", "encode"))
        ctx.cache["latents"] = (z_par, z_perp)
    return ctx.cache["latents"]


# ---------------------------------------------------------------- training

def attack_config(ctx: Context, for_eval: bool = False) -> LatentAttackConfig:
    a = ctx.cfg["attack"]
    n_r, k = (ctx.cfg["eval"]["N_r"], ctx.cfg["eval"]["K"]) if for_eval else (a["N_r"], a["K"])
    return LatentAttackConfig(n_restarts=n_r, steps=k, epsilon=a["epsilon"], alpha=a.get("alpha"),
                              simplex=a["simplex"])


def regime_config(ctx: Context, regime: str | None = None) -> T.RegimeConfig:
    r = dict(ctx.cfg["regime"])
    name = regime or r.pop("regime")
    r.pop("regime", None)
    knobs = {"at": ("at_epsilon", "at_steps", "at_step_size"), "mixup": ("mixup_alpha",)}
    for reg, names in knobs.items():
        if reg != name:
            for n in names:
                r.pop(n, None)
    kw = {}
    if name == "advmix":
        kw["attack"] = attack_config(ctx)
    if _is_toy(ctx):
        kw["input_clip"] = None
    return T.RegimeConfig(name, **r, **kw)


def train_model(ctx: Context, regime: str | None = None):
    rc = regime_config(ctx, regime)
    ctr, _ = load_data(ctx)
    z_par, _ = load_latents(ctx)
    sub = REGIME_ORDER.index(rc.regime) + 1
    if _is_toy(ctx):
        td = T.TrainingData(ctr.labels, ctr.points, z_par)
        f, tlog = T.train(rc, td, load_decoder(ctx), ctx.rng("train", sub), n_classes=2, n_in=2)
    else:
        td = T.TrainingData(ctr.labels, ctr.flat(), z_par)
        f, tlog = T.train(rc, td, load_decoder(ctx), ctx.rng("train", sub))
    f.save(ctx.out / f"model_{rc.regime}.advmixc")
    T.save_log(tlog, ctx.out / f"log_{rc.regime}.csv")
    C.echo(ctx.cfg, ctx.out, f"model_{rc.regime}.config",
           [ctx.out / f"model_{rc.regime}.advmixc", ctx.out / f"log_{rc.regime}.csv"])
    ctx.cache[("model", rc.regime)] = f
    return f, tlog


def load_model(ctx: Context, regime: str) -> Classifier:
    key = ("model", regime)
    if key not in ctx.cache:
        ctx.cache[key] = Classifier.load(_need(ctx.out / f"model_{regime}.advmixc", "train"))
    return ctx.cache[key]


# ---------------------------------------------------------------- evaluation

def eval_decoder(ctx: Context):
    """Test-time decoder: the ground-truth colorizer over the test glyphs."""
    _, cte = load_data(ctx)
    if _is_toy(ctx):
        return G.ToyDecoder()
    return _procedural_sampler(cte.decoder, ctx.cfg["dataset"]["test_mode"])


def evaluate_model(ctx: Context, regime: str | None = None, emit: bool = True) -> E.EvalReport:
    regime = regime or ctx.cfg["regime"]["regime"]
    f = load_model(ctx, regime)
    _, cte = load_data(ctx)
    ev = ctx.cfg["eval"]
    dec = eval_decoder(ctx)
    if _is_toy(ctx):
        n = min(ev["n_eval"], len(cte.labels))
        rep, rob = E.evaluate(f, dec, cte.z_par[:n, None], cte.labels[:n], cte.points[:n],
                              env_perps=[[v] for v in G.ToyDecoder.perp_values], rng=ctx.rng("eval"))
    else:
        sub = cte.take(np.arange(min(ev["n_eval"], len(cte))))
        grid = E.color_grid(ev["grid"])
        rep, rob = E.evaluate(f, dec, sub.z_par, sub.labels, sub.flat(), atk=attack_config(ctx, True),
                              grid=grid, env_perps=grid if ev["grid"] == "rgb" else None, rng=ctx.rng("attack"))
        if emit and ev["n_images"] and rob is not None and len(rob.attacked):
            k = min(ev["n_images"], len(rob.attacked))
            originals = sub.images[rob.attacked[:k]]
            variants = rob.adv_images[:k].reshape(originals.shape)
            E.write_ppm(ctx.out / f"adversarial_{regime}.ppm", E.comparison_grid(originals, variants))
    if emit:
        E.emit_report(rep, ctx.out / f"report_{regime}.csv", ctx.cfg["experiment_id"], ctx.seed, ctx.hash)
        emitted = [p for p in (ctx.out / f"report_{regime}.csv", ctx.out / f"adversarial_{regime}.ppm") if p.exists()]
        C.echo(ctx.cfg, ctx.out, f"report_{regime}.config", emitted)
    return rep


# ---------------------------------------------------------------- toy augmentation

TOY_CENTERS = np.array([[x1, x2] for x2 in (0.0, 20.0) for x1 in G.ToyDecoder.perp_values])
TOY_STDS = np.array([G.ToyDecoder.x1_std, G.ToyDecoder.x2_std])


def toy_std_distance(points) -> np.ndarray:
    """Per point, the l-inf distance in per-axis standard deviations to the nearest cluster center."""
    d = np.abs(np.asarray(points)[:, None, :] - TOY_CENTERS[None]) / TOY_STDS
    return d.max(axis=2).min(axis=1)


def toy_augmented_points(ctx: Context, f_nominal: Classifier):
    """Mixup points (alpha from the config) and AdvMix points for the toy training set.

    AdvMix enumerates the two admissible z_perp values, keeps the one with the
    higher loss under the nominal model and renders it with fresh noise.
    """
    tr, _ = load_data(ctx)
    rng = ctx.rng("train", 10)
    alpha = ctx.cfg["regime"].get("mixup_alpha", 0.2)
    perm = rng.permutation(len(tr.labels))
    y1 = T.one_hot(tr.labels, 2)
    x_mix, y_mix = T.batch_mixup(tr.points, y1, tr.points[perm], y1[perm], alpha, rng)
    dec = G.ToyDecoder()
    losses = []
    for v in dec.perp_values:
        x = dec.decode_batch(tr.z_par[:, None], np.full((len(tr.labels), 1), v), rng).data
        logits = f_nominal.logits(x)
        losses.append(-(logits - np.logaddexp.reduce(logits, axis=1, keepdims=True))[np.arange(len(x)), tr.labels])
    worst = dec.perp_values[np.argmax(np.stack(losses, axis=1), axis=1)]
    x_adv = dec.decode_batch(tr.z_par[:, None], worst[:, None], rng).data
    return (x_mix, y_mix[:, 1]), (x_adv, tr.labels.astype(np.float64))


def _points_csv(path: Path, x, y) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "label_weight_class1"])
        for (a, b), c in zip(x, y):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


# ---------------------------------------------------------------- presets

def _base(mode: str, kind: str, **kw) -> dict:
    cfg = {"dataset": {"mode": mode}, "decoder": {"kind": kind}}
    for section, values in kw.items():
        cfg.setdefault(section, {}).update(values)
    return cfg


def preset_settings(name: str, scale: str = "full") -> list[tuple[str, dict]]:
    """(setting name, raw config) pairs; ``smoke`` shrinks every size for quick checks."""
    small = scale == "smoke"
    if scale not in ("full", "smoke"):
        raise ValueError(f"unknown scale {scale!r}")
    if name == "fig5-sigma-sweep":
        out = []
        for sigma in (0.0, 0.1, 0.3):
            out.append((f"sigma={sigma}", _base(
                "gaussian_palette", "procedural",
                dataset={"sigma": sigma, "n_train": 200 if small else 2000, "n_test": 100 if small else 1000,
                         "test_mode": "uniform_random"},
                regime={"arch": "mlp2", "epochs": 1 if small else 5},
                attack={"N_r": 5, "K": 10, "epsilon": 0.03},
                eval={"N_r": 10, "K": 10, "grid": "cube", "n_eval": 100 if small else 1000})))
        return out
    if name == "table1-decoder-bias":
        return [(profile, _base(
            "gaussian_palette", "learned",
            dataset={"sigma": 0.0, "n_train": 200 if small else 2000, "n_test": 100 if small else 1000,
                     "test_mode": "uniform_random"},
            decoder={"bias_profile": profile, "train_params": {"epochs": 2 if small else 20},
                     "encode": {"N": 10 if small else 100, "M": 256, "step": 0.05, "feature_epochs": 3}},
            regime={"arch": "mlp2", "epochs": 1 if small else 5},
            attack={"N_r": 5, "K": 10, "epsilon": 0.03},
            eval={"N_r": 10, "K": 10, "grid": "cube", "n_eval": 100 if small else 1000}))
            for profile in ("unbiased", "less_biased", "more_biased")]
    if name == "table2-rgb-linear":
        return [(weights, _base(
            "rgb_restricted", "learned",
            dataset={"rgb_weights": weights, "n_train": 200 if small else 1000, "n_test": 100 if small else 1000,
                     "test_mode": "rgb_restricted"},
            decoder={"train_params": {"epochs": 2 if small else 20},
                     "encode": {"N": 10 if small else 100, "M": 256, "step": 0.05, "feature_epochs": 3}},
            regime={"arch": "linear", "epochs": 1 if small else 5, "lr": 1e-2},
            attack={"N_r": 5, "K": 10, "epsilon": 1.0, "simplex": True},
            eval={"N_r": 10, "K": 10, "grid": "rgb", "n_eval": 100 if small else 1000}))
            for weights in ("unbiased", "99% red", "99.9% red")]
    if name == "fig3-toy":
        return [("toy", _base(
            "toy", "toy", dataset={"n_train": 200, "n_test": 1000},
            regime={"arch": "linear", "epochs": 5 if small else 20, "batch_size": 20, "lr": 0.05,
                    "at_epsilon": 1.0, "mixup_alpha": 0.2},
            attack={"N_r": 2, "K": 10, "epsilon": 10.0, "alpha": 2.5},
            eval={"n_eval": 1000, "n_images": 0}))]
    raise C.ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("fig5-sigma-sweep", "table1-decoder-bias", "table2-rgb-linear", "fig3-toy")


def reproduce(name: str, out, seed: int = 0, scale: str = "full",
              regimes=REGIME_ORDER) -> Path:
    """Run the full pipeline for every setting of a preset and write one comparison CSV."""
    out = Path(out)
    rows = []
    used = []
    for setting, raw in preset_settings(name, scale):
        raw = copy.deepcopy(raw)
        raw["experiment_id"] = f"{name}/{setting}"
        cfg = C.validate(raw)
        if name != "table2-rgb-linear" and name != "fig3-toy" and cfg["dataset"]["test_mode"] != "uniform_random":
            raise C.ConfigError(f"{name}: test colorization must be uniform_random")
        ctx = make_context(cfg, out / _slug(setting), seed)
        used.append(ctx.cfg)
        log.info("%s: %s", name, setting)
        build_data(ctx)
        train_decoder(ctx)
        encode(ctx)
        for metric, value in sorted(ctx.cache["encode_summary"].items()):
            rows.append((f"{name}/{setting}", metric, value, ctx.seed, ctx.hash))
        for regime in regimes:
            train_model(ctx, regime)
            rep = evaluate_model(ctx, regime)
            rows += [(f"{name}/{setting}/{regime}", m, v, ctx.seed, ctx.hash) for m, v in rep.rows()]
        if name == "fig3-toy":
            (xm, ym), (xa, ya) = toy_augmented_points(ctx, load_model(ctx, "nominal"))
            _points_csv(ctx.out / "augmented_mixup.csv", xm, ym)
            _points_csv(ctx.out / "augmented_advmix.csv", xa, ya)
            rows.append((f"{name}/{setting}/mixup", "frac_beyond_4std", float(np.mean(toy_std_distance(xm) > 4)),
                         ctx.seed, ctx.hash))
            rows.append((f"{name}/{setting}/advmix", "frac_beyond_4std", float(np.mean(toy_std_distance(xa) > 4)),
                         ctx.seed, ctx.hash))
    path = out / "comparison.csv"
    E.write_rows(path, rows)
    C.echo({"preset": name, "scale": scale, "seed": seed, "settings": used}, out, "comparison.config", [path])
    return path


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)
