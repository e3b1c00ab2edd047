"""Command line entry point: generate, train, simulate, evaluate, grid.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (Dataset, from_events, from_rain, read_dataset, read_runoff, read_trajectory,
                       write_dataset, write_trajectory)
from .evaluation import benchmark_speedup, evaluate, write_report
from .hifi import HifiConfig, HifiState, SolverError, Trajectory
from .net import Network, NetworkError, build_network
from .rain import GeneratorConfig, RunoffSeries, generate_events, read_rain_file, simulate_runoff
from .surrogate import (DivergenceError, ResidueSpec, fit_scaler, init_model, load_checkpoint, rollout,
                        save_checkpoint)
from .train import TrainConfig, train

log = logging.getLogger("drainsurrogate")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class UsageError(ValueError):
    pass


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, inputs: dict, seed: int | None, extra: dict | None = None) -> dict:
    """Check that inputs exist, then record them with hashes before any work starts."""
    missing = [str(p) for p in inputs.values() if p is not None and not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"missing input(s): {', '.join(missing)}")
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, p in inputs.items():
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            files[key] = {"path": str(p), "sha256": {f.name: file_hash(f) for f in sorted(p.iterdir()) if f.is_file()}}
        else:
            files[key] = {"path": str(p), "sha256": file_hash(p)}
    manifest = {"command": command, "version": __version__, "seed": seed, "output": str(out), "inputs": files,
                "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _dataset_network(data_dir: Path, net_path) -> tuple[Network, Path]:
    """Network from --net, else the one recorded in the dataset manifest."""
    if net_path is None:
        man = data_dir / "manifest.json"
        if not man.exists():
            raise UsageError(f"{data_dir}: no manifest; pass --net")
        net_path = _load_json(man)["inputs"]["net"]["path"]
    return build_network(net_path), Path(net_path)


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.rain and args.config:
        raise UsageError("give either --rain or --config, not both")
    write_manifest(out, "generate", {"net": args.net, "rain": args.rain, "config": args.config}, args.seed,
                   {"extreme": args.extreme, "dt": args.dt})
    net = build_network(args.net)
    hcfg = HifiConfig(dt=args.dt)
    if args.rain:
        ds = from_rain(net, read_rain_file(args.rain), source=Path(args.rain).stem, hifi_cfg=hcfg)
    else:
        gen = _load_json(args.config) if args.config else {}
        known = {f.name for f in fields(GeneratorConfig)}
        unknown = set(gen) - known
        if unknown:
            raise UsageError(f"unknown generator option(s): {', '.join(sorted(unknown))}")
        if "peak_range" in gen:
            gen["peak_range"] = tuple(gen["peak_range"])
        if "duration_range" in gen:
            gen["duration_range"] = tuple(gen["duration_range"])
        gen["seed"] = args.seed
        if args.extreme:
            gen["mode"] = "extreme"
        ds = from_events(net, generate_events(GeneratorConfig(**gen), source="synthetic"), hcfg)
    paths = write_dataset(ds, net, out)
    log.info("wrote %s", ", ".join(p.name for p in paths))
    return EXIT_OK


# ---------------------------------------------------------------- train


def _train_settings(args) -> dict:
    cfg = _load_json(args.config) if args.config else {}
    allowed = {f.name for f in fields(TrainConfig)} | {"spec", "constrained", "train", "validation"}
    unknown = set(cfg) - allowed - {"seed"}
    if unknown:
        raise UsageError(f"{args.config}: unknown setting(s): {', '.join(sorted(unknown))}")
    base = Path(args.config).parent if args.config else Path(".")
    for key in ("train", "validation"):
        if key in cfg:
            cfg[key] = str(base / cfg[key])
    for key, val in (("window_size", args.window), ("spec", args.spec), ("constrained", args.constrained),
                     ("train", args.data), ("validation", args.val)):
        if val is not None:
            cfg[key] = val
    cfg.setdefault("spec", "S4")
    cfg.setdefault("constrained", True)
    if "train" not in cfg or "validation" not in cfg:
        raise UsageError("training and validation dataset directories are required (config or --data/--val)")
    return cfg


def _train_one(settings: dict, net: Network, train_ds: Dataset, val_ds: Dataset, seed: int, out: Path) -> dict:
    known = {f.name for f in fields(TrainConfig)}
    opts = {k: v for k, v in settings.items() if k in known}
    opts["seed"] = seed
    cfg = TrainConfig(**opts)
    scaler = fit_scaler(train_ds.trajectory)
    m0 = init_model(net, scaler, ResidueSpec.parse(settings["spec"]), bool(settings["constrained"]), seed)
    model, report = train(net, train_ds.trajectory, val_ds.trajectory, m0, cfg)
    model.provenance = {"train_fingerprint": train_ds.fingerprint(), "validation_fingerprint": val_ds.fingerprint(),
                        "train_config": asdict(cfg), "spec": settings["spec"]}
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.json")
    (out / "report.json").write_text(report.to_json())
    return {"seed": seed, "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss,
            "epochs_run": report.epochs_run, "wall_time": report.wall_time}


def cmd_train(args) -> int:
    settings = _train_settings(args)
    out = Path(args.out)
    train_dir, val_dir = Path(settings["train"]), Path(settings["validation"])
    write_manifest(out, "train", {"net": args.net, "config": args.config, "train": train_dir, "validation": val_dir},
                   args.seed, {"settings": settings})
    net, _ = _dataset_network(train_dir, args.net)
    summary = _train_one(settings, net, read_dataset(train_dir, net), read_dataset(val_dir, net), args.seed, out)
    (out / "seed.json").write_text(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_grid(args) -> int:
    settings = _train_settings(args)
    out = Path(args.out)
    train_dir, val_dir = Path(settings["train"]), Path(settings["validation"])
    windows = [int(w) for w in (args.windows or str(settings.get("window_size", 60))).split(",")]
    specs = (args.specs or settings["spec"]).split(",")
    write_manifest(out, "grid", {"net": args.net, "config": args.config, "train": train_dir, "validation": val_dir},
                   args.seed, {"settings": settings, "windows": windows, "specs": specs, "repeats": args.repeats})
    net, _ = _dataset_network(train_dir, args.net)
    tr, va = read_dataset(train_dir, net), read_dataset(val_dir, net)
    rows = []
    for spec in specs:
        ResidueSpec.parse(spec)
        for w in windows:
            for rep in range(args.repeats):
                cell = dict(settings, spec=spec, window_size=w)
                res = _train_one(cell, net, tr, va, args.seed + rep, out / f"{spec}_w{w}_r{rep}")
                rows.append({"spec": spec, "window": w, "repeat": rep, **res})
                log.info("cell %s w%d r%d: val %.4g", spec, w, rep, res["best_val_loss"])
    (out / "grid.json").write_text(json.dumps(rows, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if bool(args.rain) == bool(args.runoff):
        raise UsageError("give exactly one of --rain or --runoff")
    write_manifest(out, "simulate", {"checkpoint": args.checkpoint, "rain": args.rain, "runoff": args.runoff,
                                     "init": args.init}, None, {"init_row": args.init_row})
    m = load_checkpoint(args.checkpoint)
    net = m.network
    runoff = simulate_runoff(net, read_rain_file(args.rain)) if args.rain else read_runoff(args.runoff, net)
    if args.init:
        ref = read_trajectory(args.init, net)
        if not 0 <= args.init_row < ref.states.shape[0]:
            raise UsageError(f"--init-row {args.init_row} outside the initial-state file")
        x0 = ref.states[args.init_row]
    else:
        dry = HifiState.dry(net)
        x0 = np.concatenate([dry.levels(net), dry.flow, np.zeros(net.n_nodes)])
    pred = rollout(m, x0, runoff)
    write_trajectory(out / "trajectory.csv", pred)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    data = Path(args.data)
    write_manifest(out, "evaluate", {"checkpoint": args.checkpoint, "test": data}, None)
    m = load_checkpoint(args.checkpoint)
    net = m.network
    ds = read_dataset(data, net)
    report, _ = evaluate(m, ds.trajectory, ds.bounds, net, peak_split=args.peak_split)
    fp = ds.fingerprint()
    prov = m.provenance
    if fp in (prov.get("train_fingerprint"), prov.get("validation_fingerprint")):
        report.notes.append("overlap: test dataset is identical to a dataset used in training")
        log.warning("test dataset overlaps with the training data of this checkpoint")
    write_report(report, out)
    if args.timing:
        timing = benchmark_speedup(net, ds.runoff, m, HifiConfig(dt=args.dt), x0=ds.trajectory.states[0])
        (out / "timing.json").write_text(json.dumps(timing.to_dict(), indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drainsurrogate", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="label rain with the reference solver")
    g.add_argument("--net", required=True)
    g.add_argument("--rain", help="rain file (minute, intensity)")
    g.add_argument("--config", help="generator options as JSON")
    g.add_argument("--extreme", action="store_true", help="oversample intense storms")
    g.add_argument("--dt", type=float, default=5.0, help="solver step in seconds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def training_flags(t):
        t.add_argument("--config", help="training settings as JSON")
        t.add_argument("--data", help="training dataset directory")
        t.add_argument("--val", help="validation dataset directory")
        t.add_argument("--net", help="network file (default: from the dataset manifest)")
        t.add_argument("--window", type=int)
        t.add_argument("--spec", help="S1..S4 or DEPTHxWIDTH")
        t.add_argument("--constrained", action=argparse.BooleanOptionalAction, default=None)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one surrogate")
    training_flags(t)
    t.set_defaults(func=cmd_train)

    gr = sub.add_parser("grid", help="train over windows x specs x repeats")
    training_flags(gr)
    gr.add_argument("--windows", help="comma separated window sizes")
    gr.add_argument("--specs", help="comma separated residue specs")
    gr.add_argument("--repeats", type=int, default=5)
    gr.set_defaults(func=cmd_grid)

    s = sub.add_parser("simulate", help="roll out a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rain")
    s.add_argument("--runoff")
    s.add_argument("--init", help="trajectory file holding the initial state")
    s.add_argument("--init-row", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="score a checkpoint on a test dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="test dataset directory")
    e.add_argument("--peak-split", type=float, help="outlet peak flow separating high and low flow events")
    e.add_argument("--timing", action="store_true", help="also benchmark against the reference solver")
    e.add_argument("--dt", type=float, default=5.0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DivergenceError, SolverError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NetworkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
