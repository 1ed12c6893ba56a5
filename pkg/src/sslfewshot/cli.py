"""Command-line front end: ``python -m sslfewshot <command> ...``.

Every command reads an optional ``key = value`` config file, then applies
flag overrides (flags win). The seed falls back to ``SSL_FEWSHOT_SEED`` when
neither the file nor a flag sets it. Commands that write an output directory
echo the resolved config there as ``config.resolved`` and stamp its digest
into each report.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _accel
from .analysis import export_embeddings, occupancy_stats, prototype_angles
from .data import (
    Dataset,
    EpisodeSpec,
    ParseError,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    rng_for,
    save_dataset,
    split_by_class,
)
from .loss import sl_loss, ssl_loss
from .nn import CheckpointError, ClassifierWeights, load_checkpoint, save_checkpoint
from .tensor import finite_diff_check
from .train import TrainConfig, evaluate, pretrain, run_ablation

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "SSL_FEWSHOT_SEED"


class ConfigError(ValueError):
    pass


# -- run configuration --------------------------------------------------------

_TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}

_RUN_DEFAULTS = {
    "data": "",
    "classes": 30,
    "per_class": 60,
    "dim": 16,
    "center_scale": 1.0,
    "noise": 0.15,
    "data_seed": 0,
    # three numbers: fractions summing to 1, or class counts
    "split": "20,0,10",
    "split_seed": 0,
    "hidden": "32,8",
    "train_classes": "base",
    "eval_classes": "novel",
    "way": 5,
    "shot": 1,
    "query": 16,
    "episodes": 600,
    "jobs": 1,
}

DEFAULTS: dict[str, object] = {**_TRAIN_DEFAULTS, **_RUN_DEFAULTS}


def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return type(default)(raw)
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def resolve(cls, file_values: dict, overrides: dict, env: dict | None = None) -> "RunConfig":
        env = os.environ if env is None else env
        values = dict(DEFAULTS)
        if env.get(SEED_ENV, "").strip():
            values["seed"] = _coerce("seed", env[SEED_ENV])
        values.update(file_values)
        values.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
        cfg = cls(values)
        cfg.train_config()  # validate early
        cfg.episode_spec()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def train_config(self, **changes) -> TrainConfig:
        kw = {k: self.values[k] for k in _TRAIN_DEFAULTS}
        kw.update(changes)
        try:
            return TrainConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def episode_spec(self) -> EpisodeSpec:
        try:
            return EpisodeSpec(self["way"], self["shot"], self["query"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def hidden(self) -> tuple[int, ...]:
        try:
            sizes = tuple(int(v) for v in str(self["hidden"]).split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"hidden: expected comma-separated ints, got {self['hidden']!r}") from None
        if not sizes or min(sizes) < 1:
            raise ConfigError("hidden needs at least one positive layer width")
        return sizes

    def text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]


def load_config(path: str | None, overrides: dict) -> RunConfig:
    file_values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from None
        file_values = parse_config_text(text, path)
    return RunConfig.resolve(file_values, overrides)


# -- data and split ------------------------------------------------------------

def load_data(cfg: RunConfig) -> Dataset:
    if cfg["data"]:
        return load_dataset(cfg["data"])
    spec = SyntheticSpec(cfg["classes"], cfg["per_class"], cfg["dim"], cfg["center_scale"], cfg["noise"])
    return generate_synthetic(spec, cfg["data_seed"])


def make_split(cfg: RunConfig, n_classes: int) -> SplitSpec:
    try:
        parts = [float(v) for v in str(cfg["split"]).split(",")]
    except ValueError:
        raise ConfigError(f"split: expected three numbers, got {cfg['split']!r}") from None
    if len(parts) != 3 or min(parts) < 0:
        raise ConfigError("split needs three non-negative numbers (base, val, novel)")
    total = sum(parts)
    if abs(total - 1.0) > 1e-9:
        if abs(total - n_classes) > 1e-9:
            raise ConfigError(f"split counts sum to {total:g}, dataset has {n_classes} classes")
        parts = [p / total for p in parts]
        parts[2] = 1.0 - parts[0] - parts[1]
    try:
        return split_by_class(n_classes, parts, seed=cfg["split_seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def classes_for(split: SplitSpec, which: str) -> tuple[int, ...]:
    if which in ("base", "base+val"):
        return split.train_classes(which)
    if which == "val":
        return split.val
    if which == "novel":
        return split.novel
    raise ConfigError(f"unknown class group {which!r}")


# -- reports ---------------------------------------------------------------------

def write_report(out_dir: Path, name: str, items: Sequence[tuple[str, object]], table: str = "") -> None:
    width = max((len(k) for k, _ in items), default=0)
    text = "".join(f"{k.ljust(width)}: {v}\n" for k, v in items)
    if table:
        text += "\n" + table
    (out_dir / f"{name}.txt").write_text(text)
    (out_dir / f"{name}.tsv").write_text("".join(f"{k}\t{v}\n" for k, v in items))


def _out_dir(path: str, cfg: RunConfig | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "config.resolved").write_text(cfg.text())
    return out


def _header(cfg: RunConfig) -> list[tuple[str, object]]:
    return [("seed", cfg["seed"]), ("config_digest", cfg.digest()), ("backend", _accel.backend_name())]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _check_dims(ds: Dataset, fe) -> None:
    if fe.input_dim != ds.input_dim:
        raise ConfigError(f"checkpoint expects {fe.input_dim}-dim inputs, dataset has {ds.input_dim}")


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(args.classes, args.per_class, args.dim, args.center_scale, args.noise)
    seed = args.seed if args.seed is not None else _coerce("seed", os.environ.get(SEED_ENV, "0") or "0")
    try:
        ds = generate_synthetic(spec, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} rows x {ds.input_dim} dims, {ds.num_classes} classes -> {args.output}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, _overrides(args, {"stage1_loss": args.loss}))
    ds = load_data(cfg)
    split = make_split(cfg, ds.num_classes)
    classes = classes_for(split, cfg["train_classes"])
    out = _out_dir(args.output, cfg)
    t0 = time.perf_counter()
    result = pretrain(cfg.train_config(), ds, classes, cfg.hidden())
    save_checkpoint(out / "model.ckpt", result.extractor, result.classifier)
    (out / "losses.txt").write_text("".join(f"{v!r}\n" for v in result.losses))
    angles = prototype_angles(result.classifier)
    items = _header(cfg) + [
        ("stage1_loss", cfg["stage1_loss"]),
        ("train_classes", cfg["train_classes"]),
        ("class_count", len(classes)),
        ("epochs", len(result.losses)),
        ("first_loss", _fmt(result.losses[0]) if result.losses else "n/a"),
        ("final_loss", _fmt(result.losses[-1]) if result.losses else "n/a"),
        ("prototype_angle_mean", _fmt(angles.mean)),
        ("seconds", f"{time.perf_counter() - t0:.2f}"),
    ]
    write_report(out, "report", items)
    print(f"checkpoint -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args, {"stage2_loss": args.loss}))
    fe, _ = load_checkpoint(args.checkpoint)
    ds = load_data(cfg)
    _check_dims(ds, fe)
    split = make_split(cfg, ds.num_classes)
    classes = classes_for(split, cfg["eval_classes"])
    es = cfg.episode_spec()
    out = _out_dir(args.output, cfg)
    report = evaluate(fe, ds, classes, es, cfg["episodes"], cfg.train_config(), cfg["seed"], cfg["jobs"])
    (out / "accuracies.txt").write_text("".join(f"{a!r}\n" for a in report.per_episode_accuracy))
    items = _header(cfg) + [
        ("stage2_loss", cfg["stage2_loss"]),
        ("eval_classes", cfg["eval_classes"]),
        ("way", es.way),
        ("shot", es.shot),
        ("query", es.query),
        ("episodes", report.episode_count),
        ("mean", _fmt(report.mean)),
        ("ci95", _fmt(report.ci95_half_width)),
        ("accuracy", f"{100 * report.mean:.2f} +- {100 * report.ci95_half_width:.2f} %"),
    ]
    write_report(out, "report", items)
    print(f"{es.way}-way {es.shot}-shot: {100 * report.mean:.2f} +- {100 * report.ci95_half_width:.2f} %")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _overrides(args, {}))
    ds = load_data(cfg)
    split = make_split(cfg, ds.num_classes)
    es = cfg.episode_spec()
    out = _out_dir(args.output, cfg)
    rows, pretrained = run_ablation(
        cfg.train_config(), ds,
        classes_for(split, cfg["train_classes"]), classes_for(split, cfg["eval_classes"]),
        es, cfg["episodes"], cfg["seed"], cfg.hidden(), cfg["jobs"],
    )
    for kind, res in pretrained.items():
        save_checkpoint(out / f"model_{kind}.ckpt", res.extractor, res.classifier)
    lines = [f"{'stage1':<7}{'stage2':<7}{'accuracy %':>12}{'ci95 %':>9}"]
    items = _header(cfg) + [("way", es.way), ("shot", es.shot), ("episodes", cfg["episodes"])]
    for r in rows:
        tag = f"{r.stage1.lower()}_{r.stage2.lower()}"
        lines.append(f"{r.stage1:<7}{r.stage2:<7}{100 * r.report.mean:>12.2f}{100 * r.report.ci95_half_width:>9.2f}")
        items += [(f"{tag}_mean", _fmt(r.report.mean)), (f"{tag}_ci95", _fmt(r.report.ci95_half_width))]
    table = "\n".join(lines) + "\n"
    write_report(out, "ablation", items, table)
    print(table, end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, _overrides(args, {}))
    out = _out_dir(args.output, cfg)
    ds = load_data(cfg) if args.embeddings else None
    items = _header(cfg)
    for i, path in enumerate(args.checkpoint):
        fe, cw = load_checkpoint(path)
        tag = f"model{i}"
        stats = prototype_angles(cw)
        items += [
            (f"{tag}_path", path),
            (f"{tag}_prototypes", cw.class_count),
            (f"{tag}_angle_mean", _fmt(stats.mean)),
            (f"{tag}_angle_std", _fmt(stats.std)),
            (f"{tag}_angle_hist_5deg", ",".join(str(int(c)) for c in stats.histogram)),
        ]
        if ds is not None:
            _check_dims(ds, fe)
            split = make_split(cfg, ds.num_classes)
            X, y = ds.subset(classes_for(split, cfg["train_classes"]))
            occ = occupancy_stats(fe.forward(X), y)
            n = export_embeddings(fe, ds, out / f"embeddings_{tag}.txt")
            items += [
                (f"{tag}_within_deg", _fmt(occ.within)),
                (f"{tag}_between_deg", _fmt(occ.between)),
                (f"{tag}_compactness_ratio", _fmt(occ.compactness_ratio)),
                (f"{tag}_embedding_rows", n),
            ]
    write_report(out, "analysis", items)
    for k, v in items:
        print(f"{k}: {v}")
    return EXIT_OK


def gradcheck_instance(seed: int, index: int):
    """One random gradient-check problem: C in [2, 8], d in [2, 16], m in [1, 8]."""
    rng = rng_for(seed, "gradcheck", index)
    C, d, m = int(rng.integers(2, 9)), int(rng.integers(2, 17)), int(rng.integers(1, 9))
    W = rng.uniform(-2.0, 2.0, (d, C))
    F = rng.uniform(-2.0, 2.0, (m, d))
    y = rng.integers(0, C, m)
    return W, F, y


def gradient_checks(seed: int, instances: int, alpha: float = 10.0, h: float = 1e-5):
    """Finite-difference checks of both losses w.r.t. weights and features.

    Yields ``(index, label, GradCheckResult)``.
    """
    for i in range(instances):
        W, F, y = gradcheck_instance(seed, i)
        for name, fn in (("ssl", ssl_loss), ("sl", sl_loss)):
            yield i, f"{name}/W", finite_diff_check(lambda w: fn(ClassifierWeights(w, alpha), F, y), W, h)
            yield i, f"{name}/F", finite_diff_check(lambda f: fn(ClassifierWeights(W, alpha), f, y), F, h)


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else _coerce("seed", os.environ.get(SEED_ENV, "0") or "0")
    worst_rel, failures, total = 0.0, [], 0
    for i, label, res in gradient_checks(seed, args.instances, args.alpha, args.h):
        total += 1
        worst_rel = max(worst_rel, res.max_rel_error)
        err = np.abs(res.analytic - res.numeric)
        scale = np.maximum(np.abs(res.analytic), np.abs(res.numeric))
        if np.any(err > args.rtol * scale + args.atol):
            failures.append((i, label, float(err.max())))
    print(f"checks: {total}")
    print(f"max_rel_error: {worst_rel:.3e}")
    print(f"tolerance: rtol {args.rtol:g}, atol {args.atol:g}")
    for i, label, err in failures[:10]:
        print(f"FAIL instance {i} {label}: max abs error {err:.3e}")
    print("result: " + ("FAIL" if failures else "PASS"))
    return EXIT_FAIL if failures else EXIT_OK


# -- argument parsing ------------------------------------------------------------

_OVERRIDE_FLAGS = ("seed", "way", "shot", "query", "episodes", "jobs", "train_classes", "data")


def _overrides(args, extra: dict) -> dict:
    out = {k: getattr(args, k, None) for k in _OVERRIDE_FLAGS}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"--set: unknown key {key!r}")
        out[key] = value
    out.update(extra)
    return out


def _run_flags(p: argparse.ArgumentParser, episodes: bool = False) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", help="FSDS dataset (default: synthetic from config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-classes", choices=("base", "base+val"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-o", "--output", required=True, help="output directory")
    if episodes:
        p.add_argument("--way", type=int)
        p.add_argument("--shot", type=int)
        p.add_argument("--query", type=int)
        p.add_argument("--episodes", type=int)
        p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslfewshot", description="Few-shot classification with SSL.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic FSDS dataset")
    p.add_argument("--classes", type=int, default=30)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--center-scale", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage 1 on the base classes")
    _run_flags(p)
    p.add_argument("--loss", choices=("ssl", "sl"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="stage 2 episodes with a frozen extractor")
    _run_flags(p, episodes=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--loss", choices=("ssl", "sl"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="SSL/SL x SSL/SL stage grid")
    _run_flags(p, episodes=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="prototype angles, occupancy and embedding export")
    _run_flags(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--embeddings", action="store_true", help="also compute occupancy and export embeddings")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of both losses")
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--atol", type=float, default=1e-7)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, CheckpointError) else EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
