"""Command-line harness: ``generate``, ``train``, ``eval`` and ``sweep``.

Every invocation reads one flat config file (``section.key = value``) and
writes its outputs plus a ``run_metadata.json`` into ``--out``. Inputs
(config, datasets, checkpoints) are only ever read.

Exit status: 0 on success, 2 on usage errors (bad flags, missing or
malformed config), 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import benchmark
from .config import ConfigError, Section, file_sha256, load_config, scenario_from_section
from .dataset import generate_dataset, load_dataset, save_dataset
from .diffusion import (LOSSES, TARGETS, TrainConfig, items_for_split, load_model, new_model,
                        save_model, train)

log = logging.getLogger("isacdiff")


class UsageError(Exception):
    pass


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_metadata(out: Path, command: str, argv: list[str], config_path: Path, seed: int,
                   extra: dict | None = None) -> None:
    info = {
        "command": command,
        "argv": argv,
        "config_path": str(config_path),
        "config_sha256": file_sha256(config_path),
        "seed": seed,
        "versions": {"artifact": package_version(), "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    info.update(extra or {})
    (out / "run_metadata.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _scenario(cfg: dict, seed: int | None):
    return scenario_from_section(cfg.get("scenario", {}), seed)


def _load_or_generate(cfg: dict, seed: int | None, out: Path):
    data = Section(cfg.get("dataset", {}))
    path = data.get("path", "")
    if path:
        return load_dataset(path)
    scenario = _scenario(cfg, seed)
    ds = generate_dataset(scenario, data.get("samples", 2000), scenario.seed)
    save_dataset(ds, out / "dataset")
    return ds


def cmd_generate(args, cfg) -> dict:
    scenario = _scenario(cfg, args.seed)
    n = Section(cfg.get("dataset", {})).get("samples", 2000)
    ds = generate_dataset(scenario, n, scenario.seed)
    target = save_dataset(ds, args.out / "dataset")
    print(f"wrote {n} samples to {target}")
    return {"seed": scenario.seed, "scenario_fingerprint": scenario.fingerprint(),
            "splits": ds.manifest.counts}


def cmd_train(args, cfg) -> dict:
    section = Section(cfg.get("train", {}))
    dataset = _load_or_generate(cfg, args.seed, args.out)
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    variants = section.get("variants", ("cddm", "tddm"))
    variants = (variants,) if isinstance(variants, str) else variants
    defaults = TrainConfig()
    tc = TrainConfig(epochs=section.get("epochs", 60), batch_size=section.get("batch_size", 32),
                     learning_rate=section.get("learning_rate", 1e-3), seed=seed,
                     target=section.get("target", defaults.target),
                     loss=section.get("loss", defaults.loss),
                     link_floor=section.get("link_floor", defaults.link_floor))
    if tc.target not in TARGETS or tc.loss not in LOSSES:
        raise ConfigError(f"train.target must be one of {TARGETS} and train.loss one of {LOSSES}")
    steps = section.get("steps", 50)
    written = {}
    for variant in variants:
        if variant not in ("cddm", "tddm"):
            raise ConfigError(f"unknown model variant {variant!r}")
        model = new_model(dataset, steps, variant == "cddm", seed)
        tr = items_for_split(model, dataset, "train")
        va = items_for_split(model, dataset, "val")
        opt, history = train(model, tr, va, tc)
        ckpt = args.checkpoint if (args.checkpoint and len(variants) == 1) else args.out / f"{variant}.ckpt"
        save_model(ckpt, model, opt, dataset.manifest.scenario.to_dict(),
                   {"variant": variant, "train_seed": seed, "epochs_run": len(history)})
        with open(args.out / f"train_log_{variant}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for h in history:
                w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.lr)])
        written[variant] = str(ckpt)
        print(f"{variant}: {len(history)} epochs, final train loss {history[-1].train_loss:.6g} -> {ckpt}")
    return {"seed": seed, "checkpoints": written, "steps": steps}


def _models(args) -> dict:
    if args.baseline_only:
        return {}
    models = {}
    for path in args.checkpoint or []:
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        model, _, _ = load_model(path)
        label = "CDDM" if model.conditioned else "TDDM"
        if label in models:
            label = f"{label}:{Path(path).stem}"
        models[label] = model
    return models


def _start_step(text):
    if text is None or text == "matched":
        return text
    return int(text)


def cmd_eval(args, cfg) -> dict:
    models = _models(args)
    dataset = _load_or_generate(cfg, args.seed, args.out)
    split = Section(cfg.get("eval", {})).get("split", "test")
    samples = dataset.split(split)
    results = benchmark.per_trial_nmse(samples, dataset.manifest.scenario, models,
                                       _start_step(args.start_step))
    rows = [benchmark.SweepRow(float("nan"), m, *benchmark.summarize(v), len(v))
            for m, v in results.items()]
    text = benchmark.rows_to_csv(rows)
    (args.out / "eval.csv").write_text(text)
    sys.stdout.write(text)
    return {"seed": dataset.manifest.root_seed, "split": split}


def cmd_sweep(args, cfg) -> dict:
    models = _models(args)
    section = Section(cfg.get("sweep", {}))
    variable = section.get("variable", "snr")
    raw_grid = section.values.get("grid")
    if raw_grid is None:
        raise ConfigError("sweep.grid is required")
    grid = tuple(float(v) for v in (raw_grid if isinstance(raw_grid, list) else [raw_grid]))
    fixed = {k: float(v) for k, v in section.values.items()
             if k in ("num_ues", "pilot_length", "distance", "snr_db")}
    scenario = _scenario(cfg, args.seed)
    spec = benchmark.ExperimentSpec(variable, grid, fixed, section.get("trials", 200),
                                    scenario.seed, _start_step(args.start_step))
    links: list = []
    rows = benchmark.run_sweep(spec, scenario, models, links)
    text = benchmark.rows_to_csv(rows)
    (args.out / f"sweep_{variable}.csv").write_text(text)
    (args.out / f"sweep_{variable}_links.csv").write_text(benchmark.links_to_csv(links))
    sys.stdout.write(text)
    return {"seed": scenario.seed, "variable": variable, "grid": list(grid), "trials": spec.trials}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isacdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, default=Path("runs"))
        p.add_argument("--checkpoint", type=Path, action="append" if name in ("eval", "sweep") else "store")
        p.add_argument("--baseline-only", action="store_true")
        p.add_argument("--start-step")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        if args.start_step not in (None, "matched") and not args.start_step.lstrip("-").isdigit():
            raise UsageError(f"--start-step must be an integer or 'matched', got {args.start_step!r}")
        cfg = load_config(args.config)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg)
        seed = extra.pop("seed", args.seed)
        write_metadata(args.out, args.command, argv, args.config, seed, extra)
    except ConfigError as exc:
        print(f"isacdiff {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        print(f"isacdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
