"""Command-line interface: ``waferseg <command> [--config FILE] [--key value ...]``.

Settings are resolved as defaults < config file (``key=value`` lines) <
command-line options. Every command writes the resolved settings to
``run_config.txt`` in its output directory; that file can be passed back
with ``--config`` to repeat the run. Without ``--out`` the output goes to
``$WAFERSEG_OUTPUT_ROOT/<command>`` (default root: ``runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import persistence as io
from .evaluation import ConfusionMatrix, cross_validate, evaluate, metrics, summarize
from .model import INIT_MODES, VARIANTS, ModelConfig, build_model
from .pipeline import PreprocessConfig, augment_rotations, preprocess
from .training import HISTORY_FIELDS, TrainConfig, train
from .wafergen import WaferGenConfig, default_split, generate_dataset

OUTPUT_ROOT_ENV = "WAFERSEG_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
ABLATION_WEIGHTS = {"none": 100.0, "500": 500.0, "2000": 2000.0, "15000": 15000.0}
ABLATION_SKIPS = (0, 3, 5)
ABLATION_GRIDS = ("variants", "skips", "weights")

log = logging.getLogger("waferseg")


class CliError(ValueError):
    pass


# -- option registry -------------------------------------------------------


@dataclass(frozen=True)
class Option:
    key: str
    section: str
    field: str
    kind: str  # int, float, str, bool, ints, floats, path
    default: object
    help: str = ""


def _kind_of(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, tuple):
        return "ints" if value and all(isinstance(v, int) for v in value) else "floats"
    return "str"


ALIASES = {"skip_count": "skips", "residual_shortcuts": "residual", "init_mode": "init",
           "class_weights": "weights"}
SKIPPED_FIELDS = {("gen", "seed"), ("gen", "cluster_count"), ("train", "seed")}


def _section_options(section: str, cls) -> list[Option]:
    out = []
    instance = cls()
    for f in fields(cls):
        if (section, f.name) in SKIPPED_FIELDS:
            continue
        default = getattr(instance, f.name)
        out.append(Option(ALIASES.get(f.name, f.name), section, f.name, _kind_of(default), default))
    return out


RUN_OPTIONS = [
    Option("seed", "run", "seed", "int", 0, "seed for every stochastic component"),
    Option("out", "run", "out", "path", None, "output directory"),
    Option("data", "run", "data", "path", None, "dataset directory"),
    Option("checkpoint", "run", "checkpoint", "path", None, "model checkpoint"),
    Option("resume", "run", "resume", "path", None, "training checkpoint to continue from"),
    Option("import_weights", "run", "import_weights", "path", None, "weights file for import4/import10"),
    Option("input", "run", "input", "path", None, "single .wfr file to predict"),
    Option("split", "run", "split", "str", None, "generate: train:val sizes; eval/predict: train, val or all"),
    Option("count", "run", "count", "int", 145, "number of wafers"),
    Option("cluster_fraction", "run", "cluster_fraction", "float", 0.37, "fraction of wafers with a cluster"),
    Option("ensemble", "run", "ensemble", "ints", (0,), "rotation angles to combine"),
    Option("combine", "run", "combine", "str", "mean", "mean or vote"),
    Option("folds", "run", "folds", "int", 4, "number of folds"),
    Option("stratify", "run", "stratify", "bool", True, "balance cluster wafers across folds"),
    Option("grids", "run", "grids", "str", ",".join(ABLATION_GRIDS), "ablation grids to run"),
    Option("dry_run", "run", "dry_run", "bool", False, "list ablation rows without training"),
]

SECTIONS = {
    "gen": _section_options("gen", WaferGenConfig),
    "model": _section_options("model", ModelConfig),
    "train": _section_options("train", TrainConfig),
    "prep": _section_options("prep", PreprocessConfig),
}
ALL_OPTIONS = {o.key: o for group in [RUN_OPTIONS, *SECTIONS.values()] for o in group}

COMMANDS = {
    "generate": (("gen",), ("seed", "out", "count", "split", "cluster_fraction")),
    "train": (("model", "train", "prep"), ("seed", "out", "data", "resume", "import_weights")),
    "eval": ((), ("out", "data", "checkpoint", "split", "ensemble", "combine")),
    "predict": ((), ("out", "data", "input", "checkpoint", "split", "ensemble", "combine")),
    "xval": (("model", "train", "prep"), ("seed", "out", "data", "folds", "stratify", "import_weights")),
    "ablate": (("model", "train", "prep"), ("seed", "out", "data", "grids", "dry_run", "import_weights")),
}

HELP = {
    "generate": "generate a synthetic wafer dataset",
    "train": "train a model on a dataset's train split",
    "eval": "evaluate a checkpoint: metrics, confusion matrix, prediction images",
    "predict": "write prediction maps for a dataset or a single wafer file",
    "xval": "k-fold cross-validation",
    "ablate": "run the variant/init, skip and weight ablation grids",
}


def command_options(command: str) -> list[Option]:
    sections, run_keys = COMMANDS[command]
    return [ALL_OPTIONS[k] for k in run_keys] + [o for s in sections for o in SECTIONS[s]]


def convert(option: Option, text: str):
    """Parse a string value for ``option``; errors name the key."""
    text = text.strip()
    try:
        if option.kind == "int":
            return int(text)
        if option.kind == "float":
            return float(text)
        if option.kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if option.kind in ("ints", "floats"):
            parse = int if option.kind == "ints" else float
            return tuple(parse(v) for v in text.split(",") if v.strip())
        if option.kind == "path":
            return Path(text) if text else None
        return text
    except ValueError:
        raise CliError(f"invalid value {text!r} for {option.key} (expected {option.kind})") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


@dataclass
class Settings:
    command: str
    values: dict
    explicit: set

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        return {o.field: self.values[o.key] for o in SECTIONS[name]}

    def descriptor(self) -> str:
        lines = [f"# waferseg {self.command}"]
        lines += [f"{o.key}={format_value(self.values[o.key])}" for o in command_options(self.command)]
        return "\n".join(lines) + "\n"


def resolve(command: str, cli_values: dict, config_path=None) -> Settings:
    options = command_options(command)
    allowed = {o.key: o for o in options}
    values = {o.key: o.default for o in options}
    explicit = set()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        for key, text in io.parse_config_text(path.read_text(), str(path)).items():
            if key not in allowed:
                raise CliError(f"{path}: unknown setting {key!r} for {command}")
            values[key] = convert(allowed[key], text)
            explicit.add(key)
    for key, text in cli_values.items():
        if text is not None:
            values[key] = convert(allowed[key], text)
            explicit.add(key)
    if values.get("out") is None and "out" in values:
        values["out"] = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / command
    return Settings(command, values, explicit)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waferseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, help=HELP[command])
        p.add_argument("--config", type=Path, help="key=value settings file")
        for o in command_options(command):
            flag = "--" + o.key.replace("_", "-")
            shown = format_value(o.default) if o.default is not None else "-"
            p.add_argument(flag, dest=o.key, metavar=o.kind.upper(), default=None,
                           help=f"{o.help or o.section + ' setting'} (default: {shown})")
    return parser


# -- helpers ---------------------------------------------------------------


def _require(settings: Settings, *keys):
    for key in keys:
        if settings[key] is None:
            raise CliError(f"--{key.replace('_', '-')} is required for {settings.command}")


def _prepare_output(settings: Settings) -> Path:
    out = Path(settings["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e}") from e
    io.atomic_write(out / "run_config.txt", settings.descriptor().encode())
    return out


def _write_json(path: Path, obj) -> None:
    io.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode())


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj).__name__)


def _split_samples(samples, which: str):
    if which in (None, "all"):
        return list(samples)
    if which not in ("train", "val"):
        raise CliError(f"split must be train, val or all, got {which!r}")
    return [s for s in samples if s.meta.get("split") == which]


def _model_config(settings: Settings) -> ModelConfig:
    return ModelConfig(**settings.section("model"))


def _train_config(settings: Settings, **overrides) -> TrainConfig:
    return TrainConfig(**{**settings.section("train"), "seed": settings["seed"], **overrides})


def _prep_config(settings: Settings) -> PreprocessConfig:
    return PreprocessConfig(**settings.section("prep"))


def _load_dataset(settings: Settings):
    _require(settings, "data")
    return io.read_dataset(settings["data"])


def _training_sets(samples, prep: PreprocessConfig):
    train_raw = _split_samples(samples, "train")
    val_raw = _split_samples(samples, "val")
    if not train_raw:
        raise CliError("dataset has no train split")
    if prep.rotations:
        train_raw = augment_rotations(train_raw, prep.rotations, prep.pad_to_square)
    return [preprocess(s, prep) for s in train_raw], [preprocess(s, prep) for s in val_raw]


def _write_maps(directory: Path, name: str, pred: np.ndarray, truth: np.ndarray | None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    io.atomic_write(directory / f"{name}_classes.pgm", io.pgm_bytes(pred))
    io.atomic_write(directory / f"{name}_pred.ppm", io.ppm_bytes(io.class_map_rgb(pred)))
    if truth is not None:
        io.atomic_write(directory / f"{name}_truth.ppm", io.ppm_bytes(io.class_map_rgb(truth)))
        io.atomic_write(directory / f"{name}_diff.ppm", io.ppm_bytes(io.difference_rgb(pred, truth)))


# -- commands --------------------------------------------------------------


def cmd_generate(settings: Settings) -> int:
    out = _prepare_output(settings)
    count = settings["count"]
    if settings["split"]:
        try:
            n_train, n_val = (int(v) for v in settings["split"].split(":"))
        except ValueError:
            raise CliError(f"split must look like TRAIN:VAL, got {settings['split']!r}") from None
    else:
        n_train, n_val = default_split(count)
    template = WaferGenConfig(**settings.section("gen"))
    samples, manifest = generate_dataset(template, count, settings["cluster_fraction"], settings["seed"],
                                         split=(n_train, n_val))
    io.write_dataset(out, samples, manifest)
    print(f"wrote {count} wafers ({n_train} train / {n_val} val, {manifest['cluster_count']} with clusters) to {out}")
    return 0


def cmd_train(settings: Settings) -> int:
    out = _prepare_output(settings)
    samples, _ = _load_dataset(settings)
    prep = _prep_config(settings)
    train_set, val_set = _training_sets(samples, prep)
    config = _train_config(settings)
    model_cfg = _model_config(settings)

    optimizer, start_epoch = None, 0
    if settings["resume"] is not None:
        ckpt = io.read_checkpoint(settings["resume"])
        given = {o.field for o in SECTIONS["model"] if o.key in settings.explicit}
        clash = [f for f in given if getattr(ckpt.model_config, f) != getattr(model_cfg, f)]
        if clash:
            raise CliError(f"resume checkpoint model config differs in {sorted(clash)}")
        model, _ = io.load_model(ckpt)
        optimizer, start_epoch = ckpt.optimizer, ckpt.epoch
        if optimizer is None:
            raise CliError(f"{settings['resume']} holds no optimizer state; cannot resume")
        model_cfg = model.config
    else:
        model = build_model(model_cfg, seed=settings["seed"], import_weights=settings["import_weights"])

    history_path = out / "history.jsonl"
    if start_epoch == 0 or not history_path.exists():
        io.write_history(history_path, [], HISTORY_FIELDS)

    def on_record(epoch, record, _model):
        io.write_history(history_path, [record], HISTORY_FIELDS, append=True)
        log.info("epoch %d: %s", epoch, record)

    result = train(model, train_set, val_set, config, callbacks=[on_record], optimizer=optimizer,
                   start_epoch=start_epoch, checkpoint_dir=out / "checkpoints")
    extra = {"train_config": config.to_dict(), "preprocess": asdict(prep)}
    io.write_checkpoint(out / "model.ckpt", io.model_checkpoint(model, result.epochs_done, result.optimizer, extra))
    last = result.history[-1] if result.history else {}
    print(f"trained {model_cfg.variant} (skips={model_cfg.skip_count}) to epoch {result.epochs_done}; "
          f"val DCA {last.get('dca')}; checkpoint {out / 'model.ckpt'}")
    return 0


def _load_for_inference(settings: Settings):
    _require(settings, "checkpoint")
    model, ckpt = io.load_model(settings["checkpoint"])
    prep = PreprocessConfig(**ckpt.extra["preprocess"]) if "preprocess" in ckpt.extra else PreprocessConfig()
    return model, prep


def _metrics_json(report) -> dict:
    return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in report.as_dict().items()}


def cmd_eval(settings: Settings) -> int:
    out = _prepare_output(settings)
    model, prep = _load_for_inference(settings)
    samples, _ = _load_dataset(settings)
    chosen = _split_samples(samples, settings["split"] or "val")
    if not chosen:
        raise CliError(f"no samples in split {settings['split'] or 'val'}")
    prepared = [preprocess(s, prep) for s in chosen]
    result = evaluate(model, prepared, settings["ensemble"], settings["combine"], keep_predictions=True)
    per_wafer = []
    for (name, cm, rep), pred, s in zip(result.per_wafer, result.predictions, prepared):
        _write_maps(out / "images", name, pred, s.labels)
        per_wafer.append({"name": name, "confusion": cm.counts.tolist(), **_metrics_json(rep)})
    # pooled counts are the headline; the unweighted mean over wafers is kept alongside
    wafer_mean = {k: None if np.isnan(v["mean"]) else v["mean"]
                  for k, v in summarize([rep for _, _, rep in result.per_wafer]).items()}
    report = {"pooled": _metrics_json(result.report), "confusion": result.pooled.counts.tolist(),
              "per_wafer_mean": wafer_mean, "ensemble": list(settings["ensemble"]), "wafers": per_wafer}
    _write_json(out / "report.json", report)
    io.atomic_write(out / "confusion.txt", result.pooled.to_text().encode())
    r = result.report
    print(f"PA {r.pixel_accuracy:.4f}  MPA {r.mean_pixel_accuracy:.4f}  mIoU {r.mean_iou:.4f}  "
          f"DCA {r.defect_class_accuracy:.4f}  ({len(prepared)} wafers)")
    return 0


def cmd_predict(settings: Settings) -> int:
    from .evaluation import confusion, predict_sample

    out = _prepare_output(settings)
    model, prep = _load_for_inference(settings)
    if settings["input"] is not None:
        sample = io.read_wafer(settings["input"])
        sample.meta.setdefault("name", Path(settings["input"]).stem)
        chosen = [sample]
    else:
        samples, _ = _load_dataset(settings)
        chosen = _split_samples(samples, settings["split"] or "all")
    pooled = ConfusionMatrix(np.zeros((3, 3), dtype=np.int64))
    for s in chosen:
        prepared = preprocess(s, prep)
        pred = predict_sample(model, prepared, settings["ensemble"], settings["combine"])
        _write_maps(out / "images", s.meta["name"], pred, s.labels)
        pooled = pooled + confusion(pred, s.labels)
    _write_json(out / "predictions.json", {"wafers": [s.meta["name"] for s in chosen],
                                           "ensemble": list(settings["ensemble"]),
                                           "metrics": _metrics_json(metrics(pooled, allow_empty=True))})
    print(f"wrote prediction maps for {len(chosen)} wafers to {out / 'images'}")
    return 0


def cmd_xval(settings: Settings) -> int:
    out = _prepare_output(settings)
    samples, _ = _load_dataset(settings)
    prep = _prep_config(settings)
    prepared = [preprocess(s, prep) for s in samples]
    config = _train_config(settings, eval_every=0)

    def on_fold(k, report, _result):
        _write_json(out / f"fold_{k}.json", {"fold": k, **_metrics_json(report)})
        print(f"fold {k}: PA {report.pixel_accuracy:.4f} DCA {report.defect_class_accuracy:.4f}")

    result = cross_validate(prepared, settings["folds"], settings["stratify"], settings["seed"], config,
                            _model_config(settings), settings["import_weights"], on_fold=on_fold)
    names = [s.meta.get("name") for s in samples]
    _write_json(out / "summary.json", {
        "folds": [[names[i] for i in f] for f in result.folds],
        "reports": [_metrics_json(r) for r in result.reports],
        "summary": result.summary,
    })
    return 0


def ablation_rows(base: ModelConfig, weights: tuple, grids, have_import: bool) -> list[dict]:
    """Rows of the ablation table; rows needing import weights are marked skipped without them."""
    rows = []
    for grid in grids:
        if grid == "variants":
            for variant in VARIANTS:
                limit = len(VARIANTS[variant]) - 1
                for init in INIT_MODES:
                    cfg = replace(base, variant=variant, init_mode=init, skip_count=min(base.skip_count, limit))
                    skip = None if init == "he" or have_import else "no import weights given"
                    rows.append({"grid": grid, "model": cfg, "weights": weights, "skipped": skip})
        elif grid == "skips":
            for n in ABLATION_SKIPS:
                rows.append({"grid": grid, "model": replace(base, skip_count=n, init_mode="he"),
                             "weights": weights, "skipped": None})
        elif grid == "weights":
            for label, w in ABLATION_WEIGHTS.items():
                rows.append({"grid": grid, "model": replace(base, init_mode="he"),
                             "weights": (weights[0], weights[1], w), "weight_label": label, "skipped": None})
        else:
            raise CliError(f"unknown ablation grid {grid!r}; choose from {ABLATION_GRIDS}")
    return rows


ABLATION_COLUMNS = ("grid", "variant", "init", "skips", "weights", "status", "pa", "mpa", "miou", "dca")


def cmd_ablate(settings: Settings) -> int:
    out = _prepare_output(settings)
    grids = [g.strip() for g in settings["grids"].split(",") if g.strip()]
    base = _model_config(settings)
    config = _train_config(settings)
    rows = ablation_rows(base, config.class_weights, grids, settings["import_weights"] is not None)
    if not settings["dry_run"]:
        samples, _ = _load_dataset(settings)
        train_set, val_set = _training_sets(samples, _prep_config(settings))
        if not val_set:
            raise CliError("dataset has no val split to evaluate ablation rows on")
    lines = ["\t".join(ABLATION_COLUMNS)]
    for row in rows:
        cfg = row["model"]
        status, rep = row["skipped"] and f"skipped: {row['skipped']}", None
        if status is None:
            if settings["dry_run"]:
                status = "planned"
            else:
                model = build_model(cfg, seed=settings["seed"], import_weights=settings["import_weights"])
                train(model, train_set, None, replace(config, class_weights=row["weights"], eval_every=0))
                rep = evaluate(model, val_set).report
                status = "done"
        values = [row["grid"], cfg.variant, cfg.init_mode, str(cfg.skip_count), format_value(row["weights"]),
                  status]
        values += [format_value(getattr(rep, f)) if rep else "" for f in
                   ("pixel_accuracy", "mean_pixel_accuracy", "mean_iou", "defect_class_accuracy")]
        lines.append("\t".join(values))
        print("  ".join(values), flush=True)
        io.atomic_write(out / "results.tsv", ("\n".join(lines) + "\n").encode())
    return 0


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "xval": cmd_xval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cli_values = {o.key: getattr(args, o.key) for o in command_options(args.command)}
    try:
        settings = resolve(args.command, cli_values, args.config)
        return HANDLERS[args.command](settings)
    except (ValueError, OSError, KeyError) as e:
        print(f"waferseg {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
