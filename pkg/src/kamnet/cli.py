"""Command-line entry point: ``kamnet <command> [flags]``.

Commands: synth, cv, bench, sweep, pdp, ptc, channels.  Data files go
through z-scoring per epoch and channel before training or analysis.
Settings resolve as defaults < ``--config`` JSON < flags, and the resolved
values are written into a manifest beside every output.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import EpochSet, load_epochs, make_split, normalized, save_epochs, synth_generate
from .interpret import (
    alpha_sweep, default_alpha_grid, export_channel_weights, partial_dependence, ptc,
    write_alpha_sweep, write_channel_weights, write_partial_dependence, write_ptc,
)
from .io import atomic_write_text, sha256_file, write_csv
from .model import ConfigError, FormatError, ModelConfig, load_checkpoint, param_count
from .trainer import (
    MODEL_VARIANTS, CVResult, TrainConfig, fold_rows, model_config, run_cv, summary_rows, table_rows,
)

log = logging.getLogger("kamnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3
MODELS = tuple(MODEL_VARIANTS)
NORMALIZATION = "zscore per epoch and channel"
SKIP_NOTE = "every attention variant returns x + f(x) at the same insertion point"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class TrainingError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


DEFAULTS = {
    "synth": dict(n_per_class=300, fs=200, snr=4.0, seed=0, subject="SYN", out=None),
    "cv": dict(data=None, model="kam", a=-0.1, seed=0, out_dir=None, epochs=80, batch_size=64, lr0=1e-2),
    "bench": dict(data=None, models=list(MODELS), a=-0.1, seed=0, out_dir=None, epochs=80,
                  batch_size=64, lr0=1e-2),
    "sweep": dict(checkpoint=None, data=None, grid=None, subset="test", out=None),
    "pdp": dict(checkpoint=None, data=None, grid=None, samples=32, subset="test", out=None),
    "ptc": dict(checkpoint=None, data=None, i=None, j=None, steps=51, out=None),
    "channels": dict(checkpoints=None, kernel=0, out=None),
}
REQUIRED = {
    "synth": ("out",), "cv": ("data", "out_dir"), "bench": ("data", "out_dir"),
    "sweep": ("checkpoint", "data", "out"), "pdp": ("checkpoint", "data", "out"),
    "ptc": ("checkpoint", "data", "i", "j", "out"), "channels": ("checkpoints", "out"),
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # every option defaults to None so that explicitly given flags can be told
    # apart from config-file values during resolution
    p = _Parser(prog="kamnet", description="Kernel-attention EEG classifier toolkit.")
    p.add_argument("--version", action="version", version=f"kamnet {__version__}")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of settings (or a manifest from an earlier run)")
        return sp

    s = cmd("synth", "generate a synthetic three-class epoch file")
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--fs", type=int)
    s.add_argument("--snr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--subject")
    s.add_argument("--out")

    def training_flags(sp):
        sp.add_argument("--a", type=float, help="lower bound of alpha for the kam model")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--epochs", type=int, help="maximum epochs per fold")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr0", type=float)

    s = cmd("cv", "five-fold cross-validation of one model on one subject")
    s.add_argument("--data")
    s.add_argument("--model", choices=MODELS)
    training_flags(s)

    s = cmd("bench", "cross-validate several models over several subjects")
    s.add_argument("--data", nargs="+")
    s.add_argument("--models", nargs="+", choices=MODELS)
    training_flags(s)

    for name, help_ in (("sweep", "accuracy as a function of alpha"),
                        ("pdp", "gradients of each logit with respect to alpha")):
        s = cmd(name, help_)
        s.add_argument("--checkpoint")
        s.add_argument("--data")
        s.add_argument("--grid", type=_floats, help="comma-separated alpha values")
        s.add_argument("--subset", choices=("test", "validation", "all"))
        s.add_argument("--out")
        if name == "pdp":
            s.add_argument("--samples", type=int, help="number of epochs from the subset")

    s = cmd("ptc", "prediction transition curve between two epochs")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--i", type=int)
    s.add_argument("--j", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--out")

    s = cmd("channels", "first-layer spatial kernel statistics across fold checkpoints")
    s.add_argument("--checkpoints", nargs="+")
    s.add_argument("--kernel", type=int)
    s.add_argument("--out")
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[command])
    if ns.config:
        try:
            loaded = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {ns.config}: {exc}") from None
        if isinstance(loaded, dict) and loaded.get("tool") == "kamnet":
            if loaded.get("command") != command:
                raise DataError(f"manifest {ns.config} is for command {loaded.get('command')!r}, not {command!r}")
            loaded = loaded.get("config", {})
        if not isinstance(loaded, dict):
            raise DataError(f"config {ns.config} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise DataError(f"config {ns.config}: unknown keys {unknown}; valid keys are {sorted(cfg)}")
        cfg.update(loaded)
    for key in cfg:
        v = getattr(ns, key, None)
        if v is not None:
            cfg[key] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"kamnet {command}: missing required setting(s) {flags}")
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _load_data(path) -> EpochSet:
    try:
        return normalized(load_epochs(path))
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except (FormatError, ValueError, OSError) as exc:
        raise DataError(f"cannot load {path}: {exc}") from None


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (FormatError, ValueError, KeyError, OSError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def _base_config(data: EpochSet) -> ModelConfig:
    N, C, T = data.data.shape
    return ModelConfig(n_channels=C, n_samples=T, electrodes=data.electrodes)


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(max_epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                           lr0=float(cfg["lr0"]), seed=int(cfg["seed"]))
    except (ValueError, TypeError) as exc:
        raise DataError(str(exc)) from None


def _model_config(name: str, base: ModelConfig, a: float) -> ModelConfig:
    if name not in MODEL_VARIANTS:
        raise UsageError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")
    try:
        cfg = model_config(name, base, a=float(a)) if name == "kam" else model_config(name, base)
        cfg.validate()
    except (ValueError, ConfigError) as exc:
        raise DataError(f"invalid model configuration: {exc}") from None
    return cfg


def _digests(paths) -> dict:
    return {str(p): sha256_file(p) for p in paths if Path(p).is_file()}


def write_manifest(path, command: str, argv, cfg: dict, inputs=(), outputs=(), **extra) -> None:
    manifest = {
        "tool": "kamnet",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "normalization": NORMALIZATION,
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
        **extra,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (tuple, set)):
        return list(v)
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {d}: {exc}") from None
    return d


def _subset(data: EpochSet, meta: dict, which: str, data_path) -> EpochSet:
    if which == "all":
        return data
    if "split_seed" not in meta or "fold" not in meta:
        raise DataError("checkpoint carries no split information; use --subset all")
    digest = meta.get("data_sha256")
    if digest is not None and digest != sha256_file(data_path):
        raise DataError(f"{data_path} is not the data file this checkpoint was trained on")
    plan = make_split(data, int(meta["split_seed"]), n_folds=int(meta.get("n_folds", 5)))
    idx = plan.validation if which == "validation" else plan.test_indices(int(meta["fold"]))
    return data.subset(idx)


def _check_match(model, data: EpochSet, ckpt) -> None:
    c = model.config
    if (c.n_channels, c.n_samples) != data.data.shape[1:]:
        raise DataError(f"checkpoint {ckpt} expects ({c.n_channels}, {c.n_samples}) epochs, "
                        f"data has {data.data.shape[1:]}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, argv) -> int:
    if int(cfg["n_per_class"]) < 1:
        raise UsageError("--n-per-class must be at least 1")
    if int(cfg["fs"]) < 2:
        raise UsageError("--fs must be at least 2")
    data = synth_generate(int(cfg["n_per_class"]), fs=int(cfg["fs"]), seed=int(cfg["seed"]),
                          snr=float(cfg["snr"]), subject=str(cfg["subject"]))
    out = Path(cfg["out"])
    try:
        save_epochs(data, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from None
    write_manifest(f"{out}.manifest.json", "synth", argv, cfg, outputs=[out], seeds={"seed": cfg["seed"]})
    log.info("wrote %d epochs to %s", len(data), out)
    return EXIT_OK


def _cv_one(data: EpochSet, data_path, name: str, cfg: dict, out: Path) -> CVResult:
    mcfg = _model_config(name, _base_config(data), cfg["a"])
    tcfg = _train_config(cfg)
    log.info("cv: subject %s, model %s (%d parameters)", data.subject, name, param_count(mcfg))
    try:
        return run_cv(data, mcfg, tcfg, model_name=name, checkpoint_dir=out,
                      meta={"data_sha256": sha256_file(data_path)})
    except ValueError as exc:
        # raised before any training step when the data cannot be split
        raise DataError(f"{data_path}: {exc}") from None
    except (FloatingPointError, ArithmeticError) as exc:
        raise TrainingError(f"{data_path}, model {name}: {exc}") from None


def cmd_cv(cfg: dict, argv) -> int:
    data = _load_data(cfg["data"])
    out = _out_dir(cfg["out_dir"])
    result = _cv_one(data, cfg["data"], cfg["model"], cfg, out)
    cols, rows = fold_rows([result])
    write_csv(out / "folds.csv", cols, rows)
    cols, rows = summary_rows([result])
    write_csv(out / "summary.csv", cols, rows)
    ckpts = [out / f"fold{k}.ckpt" for k in range(len(result.folds))]
    write_manifest(out / "manifest.json", "cv", argv, cfg, inputs=[cfg["data"]],
                   outputs=[out / "folds.csv", out / "summary.csv", *ckpts],
                   model_config=result.config.to_dict(), train_config=result.train_config.to_dict(),
                   seeds={"seed": cfg["seed"], "fold_subseeds": [f.seed for f in result.folds]},
                   init_hash=result.folds[0].init_hash, attention_skip=SKIP_NOTE)
    return EXIT_OK


def cmd_bench(cfg: dict, argv) -> int:
    out = _out_dir(cfg["out_dir"])
    paths = cfg["data"] if isinstance(cfg["data"], list) else [cfg["data"]]
    models = cfg["models"] if isinstance(cfg["models"], list) else [cfg["models"]]
    for name in models:
        if name not in MODEL_VARIANTS:
            raise UsageError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")
    results, failures, code = [], [], EXIT_OK
    for si, path in enumerate(paths):
        try:
            data = _load_data(path)
        except DataError as exc:
            log.error("%s", exc)
            failures.append({"data": str(path), "model": None, "error": str(exc)})
            code = max(code, EXIT_DATA)
            continue
        for name in models:
            ckdir = _out_dir(out / "checkpoints" / f"{si:02d}_{data.subject}" / name)
            try:
                results.append(_cv_one(data, path, name, cfg, ckdir))
            except (DataError, TrainingError) as exc:
                log.error("%s", exc)
                failures.append({"data": str(path), "model": name, "error": str(exc)})
                code = max(code, EXIT_DATA if isinstance(exc, DataError) else EXIT_TRAIN)
    cols, rows = fold_rows(results, with_alpha="kam" in models)
    write_csv(out / "folds.csv", cols, rows)
    cols, rows = summary_rows(results)
    write_csv(out / "summary.csv", cols, rows)
    cols, rows = table_rows(results)
    write_csv(out / "table.csv", cols, rows)
    write_manifest(out / "manifest.json", "bench", argv, cfg, inputs=paths,
                   outputs=[out / "folds.csv", out / "summary.csv", out / "table.csv"],
                   train_config=_train_config(cfg).to_dict(),
                   model_configs={r.model: r.config.to_dict() for r in results},
                   seeds={"seed": cfg["seed"]}, attention_skip=SKIP_NOTE, failures=failures)
    if failures:
        log.error("%d run(s) failed", len(failures))
    return code


def _analysis_inputs(cfg):
    model, meta = _load_ckpt(cfg["checkpoint"])
    data = _load_data(cfg["data"])
    _check_match(model, data, cfg["checkpoint"])
    return model, meta, data


def _grid(model, cfg) -> np.ndarray:
    try:
        return np.asarray(cfg["grid"], dtype=np.float64) if cfg["grid"] else default_alpha_grid(model)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_sweep(cfg: dict, argv) -> int:
    model, meta, data = _analysis_inputs(cfg)
    subset = _subset(data, meta, cfg["subset"], cfg["data"])
    try:
        grid = _grid(model, cfg)
        result = alpha_sweep(model, subset, grid)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_alpha_sweep(cfg["out"], result)
    write_manifest(f"{cfg['out']}.manifest.json", "sweep", argv, cfg, inputs=[cfg["checkpoint"], cfg["data"]],
                   outputs=[cfg["out"]], learned_alpha=result.learned_alpha)
    return EXIT_OK


def cmd_pdp(cfg: dict, argv) -> int:
    model, meta, data = _analysis_inputs(cfg)
    subset = _subset(data, meta, cfg["subset"], cfg["data"])
    n = int(cfg["samples"])
    if n < 1:
        raise UsageError("--samples must be at least 1")
    try:
        grid = _grid(model, cfg)
        grads = partial_dependence(model, subset.data[:n], grid)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_partial_dependence(cfg["out"], grid, grads)
    write_manifest(f"{cfg['out']}.manifest.json", "pdp", argv, cfg, inputs=[cfg["checkpoint"], cfg["data"]],
                   outputs=[cfg["out"]])
    return EXIT_OK


def cmd_ptc(cfg: dict, argv) -> int:
    model, _, data = _analysis_inputs(cfg)
    i, j, n = int(cfg["i"]), int(cfg["j"]), int(cfg["steps"])
    for k in (i, j):
        if not 0 <= k < len(data):
            raise UsageError(f"epoch index {k} outside [0, {len(data)})")
    if n < 2:
        raise UsageError("--steps must be at least 2")
    rec = ptc(model, data.data[i], data.data[j], n, i=i, j=j)
    write_ptc(cfg["out"], rec)
    write_manifest(f"{cfg['out']}.manifest.json", "ptc", argv, cfg, inputs=[cfg["checkpoint"], cfg["data"]],
                   outputs=[cfg["out"]], labels={"i": int(data.labels[i]), "j": int(data.labels[j])})
    return EXIT_OK


def cmd_channels(cfg: dict, argv) -> int:
    paths = cfg["checkpoints"] if isinstance(cfg["checkpoints"], list) else [cfg["checkpoints"]]
    models = [_load_ckpt(p)[0] for p in paths]
    try:
        cmap = export_channel_weights(models, int(cfg["kernel"]))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_channel_weights(cfg["out"], cmap)
    write_manifest(f"{cfg['out']}.manifest.json", "channels", argv, cfg, inputs=paths, outputs=[cfg["out"]],
                   normalization_mode=cmap.normalization)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "cv": cmd_cv, "bench": cmd_bench, "sweep": cmd_sweep,
    "pdp": cmd_pdp, "ptc": cmd_ptc, "channels": cmd_channels,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=ns.log_level, stream=sys.stderr,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
