"""Command-line entry point: ``python -m rangecorr <command> ...``.

Commands share ``--config`` (an INI file), ``--seed`` and ``--out``. The
config file may hold ``[scenario]``, ``[train]`` and ``[engine]`` sections;
command-line flags override it.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import bench
from .edf import build_cost_map, load_map, read_route, save_map
from .estimate import ENGINES, EngineConfig
from .model import NoiseModel
from .neural import load_checkpoint, predict_corrections, save_checkpoint
from .sim import ScenarioConfig, synthesize_days
from .train import TrainConfig, TrainingError, TrainingTrace, train_corrector

log = logging.getLogger("rangecorr")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _read_config(path):
    parser = configparser.ConfigParser()
    if path is not None and not parser.read(path):
        raise CliError(f"cannot read config file {path}")
    return parser


def _section(parser, name):
    return dict(parser[name]) if parser.has_section(name) else {}


def scenario_from_mapping(mapping) -> ScenarioConfig:
    """``[scenario]`` keys: ScenarioConfig fields plus ``origin_lat_deg``,
    ``origin_lon_deg``, ``origin_alt_m``, ``velocity_e/n/u`` and ``route``
    (a CSV/KML path)."""
    mapping = dict(mapping)
    defaults = ScenarioConfig()
    kwargs = {}
    lat, lon, alt = math.degrees(defaults.origin[0]), math.degrees(defaults.origin[1]), defaults.origin[2]
    lat = float(mapping.pop("origin_lat_deg", lat))
    lon = float(mapping.pop("origin_lon_deg", lon))
    alt = float(mapping.pop("origin_alt_m", alt))
    kwargs["origin"] = (math.radians(lat), math.radians(lon), alt)
    vel = [float(mapping.pop(f"velocity_{c}", 0.0)) for c in "enu"]
    kwargs["velocity_enu"] = tuple(vel)
    if "route" in mapping:
        kwargs["route"] = read_route(mapping.pop("route"))
    simple = {f.name for f in fields(ScenarioConfig)} - {"origin", "velocity_enu", "route"}
    for key, raw in mapping.items():
        if key not in simple:
            raise CliError(f"unknown scenario option {key!r}")
        current = getattr(defaults, key)
        kwargs[key] = type(current)(raw) if not isinstance(current, str) else raw.strip()
    return ScenarioConfig(**kwargs)


def engine_from_mapping(mapping, **overrides) -> EngineConfig:
    m = {**dict(mapping), **{k: v for k, v in overrides.items() if v is not None}}
    noise = NoiseModel(float(m.pop("q_pos", 1.0)), float(m.pop("q_clock", 1.0)))
    kwargs = {"noise": noise}
    defaults = EngineConfig()
    for key, raw in m.items():
        if key not in {f.name for f in fields(EngineConfig)}:
            raise CliError(f"unknown engine option {key!r}")
        current = getattr(defaults, key)
        kwargs[key] = type(current)(raw) if not isinstance(current, str) else str(raw).strip()
    return EngineConfig(**kwargs)


def _write_json(path, obj):
    bench.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, parser):
    mapping = _section(parser, "scenario")
    days = int(args.days if args.days is not None else mapping.pop("days", 3))
    if args.duration is not None:
        mapping["duration"] = args.duration
    if args.trajectory is not None:
        mapping["trajectory"] = args.trajectory
    if args.route is not None:
        mapping["route"] = args.route
    cfg = scenario_from_mapping(mapping)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, tr in enumerate(synthesize_days(cfg, days)):
        bench.emit_trace(tr.epochs, out / f"day{k}_trace.csv")
        truth = bench.Track.from_ecef([e.timestamp for e in tr.epochs], tr.truth_states()[:, [0, 2, 4]])
        bench.write_track(truth, out / f"day{k}_labels.csv")
    print(f"wrote {days} day(s) to {out}")
    return 0


def _load_training_trace(trace_path, label_path, loss):
    epochs, labels = bench.ingest(trace_path, label_path)
    if labels is None:
        return TrainingTrace(epochs)
    if loss == "3d":
        if np.isnan(labels.alt_m).any():
            raise CliError(f"{label_path}: 3D loss needs alt_m on every label")
        return TrainingTrace(epochs, positions=labels.ecef())
    latlon = np.radians(np.column_stack([labels.lat_deg, labels.lon_deg]))
    return TrainingTrace(epochs, latlon=latlon)


def cmd_train(args, parser):
    mapping = _section(parser, "train")
    if args.seed is not None:
        mapping["seed"] = args.seed
    if args.epochs is not None:
        mapping["epochs"] = args.epochs
    if args.loss is not None:
        mapping["loss"] = args.loss
    cfg = TrainConfig.from_mapping(mapping)
    labels = args.labels or []
    if cfg.loss != "edf" and len(labels) != len(args.trace):
        raise CliError("give one --labels file per --trace")
    labels = labels + [None] * (len(args.trace) - len(labels))
    traces = [_load_training_trace(t, l, cfg.loss) for t, l in zip(args.trace, labels)]
    cost_map = load_map(args.map) if args.map else None
    validation = None
    if args.val_trace:
        if not args.val_labels:
            raise CliError("--val-trace needs --val-labels")
        validation = _load_training_trace(args.val_trace, args.val_labels, "3d")
    params, report = train_corrector(traces, cfg, cost_map=cost_map, validation=validation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model.npz", extra={"train": cfg.as_dict()})
    report.write_csv(out / "train_log.csv")
    cfg.to_file(out / "train.ini")
    print(f"final loss {report.rows[-1][1]:.6g}; model written to {out / 'model.npz'}")
    return 0


def cmd_eval(args, parser):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pred is not None:
        if args.labels is None:
            raise CliError("--pred needs --labels")
        errs = bench.horizontal_errors(bench.read_track(args.pred), bench.read_track(args.labels))
        report = bench.EvalReport.from_errors(errs)
    else:
        if args.trace is None or args.labels is None:
            raise CliError("eval needs --pred/--labels or --trace/--labels")
        epochs, labels = bench.ingest(args.trace, args.labels)
        config = engine_from_mapping(_section(parser, "engine"), engine=args.engine, horizon=args.horizon)
        corrections = None
        if args.model is not None:
            corrections = predict_corrections(load_checkpoint(args.model), epochs)
        report, track = bench.evaluate_engine(epochs, labels, config, corrections)
        bench.write_track(track, out / "pred.csv")
    _write_json(out / "report.json", report.as_dict())
    print(f"horizontal score {report.score:.3f} m over {len(report.errors)} epochs")
    return 0


def cmd_profile(args, parser):
    epochs, labels = bench.ingest(args.trace, args.labels)
    if labels is None:
        raise CliError("profile needs --labels with altitude")
    engine = _section(parser, "engine")
    noise = NoiseModel(float(engine.get("q_pos", 1.0)), float(engine.get("q_clock", 1.0)))
    horizons = [int(n) for n in args.horizons.split(",")]
    engines = args.engines.split(",")
    for e in engines:
        if e not in ENGINES:
            raise CliError(f"unknown engine {e!r}")
    rows = bench.profile_horizons(epochs, labels.ecef(), engines, horizons, noise=noise, repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.atomic_write_text(out / "profile.csv", bench.profile_to_csv(rows))
    print(f"profiled {len(rows)} cell(s) into {out / 'profile.csv'}")
    return 0


def cmd_buildmap(args, parser):
    route = read_route(args.route)
    cost_map = build_cost_map(route, cell_m=args.cell, margin=args.margin)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_map(cost_map, out / "map.edf")
    print(f"map {cost_map.shape[0]}x{cost_map.shape[1]} written to {out / 'map.edf'}")
    return 0


def cmd_serve(args, parser):
    from .serve import FixService, make_server

    model = load_checkpoint(args.model) if args.model else None
    cost_map = load_map(args.map) if args.map else None
    config = engine_from_mapping(_section(parser, "engine"))
    service = FixService(model, config, cost_map)
    server = make_server(service, args.host, args.port)
    print(f"serving on http://{args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [scenario], [train] and [engine] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rangecorr", description="Learned pseudorange corrections and MHE positioning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write synthetic trace and label files")
    s.add_argument("--days", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--trajectory", choices=("static", "constant_velocity", "route"))
    s.add_argument("--route", help="route CSV/KML for --trajectory route")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train the correction network")
    s.add_argument("--trace", nargs="+", required=True)
    s.add_argument("--labels", nargs="+")
    s.add_argument("--map", help="cost map for the edf loss")
    s.add_argument("--loss", choices=("3d", "2d", "edf"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--val-trace")
    s.add_argument("--val-labels")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a track or an engine run")
    s.add_argument("--pred")
    s.add_argument("--labels")
    s.add_argument("--trace")
    s.add_argument("--model")
    s.add_argument("--engine", choices=ENGINES)
    s.add_argument("--horizon", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", parents=[common], help="accuracy and timing against horizon size")
    s.add_argument("--trace", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--engines", default="mhe_f,mhe_ac,mhe_noac")
    s.add_argument("--horizons", default="1,5,15,30,65")
    s.add_argument("--repeats", type=int, default=1)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("buildmap", parents=[common], help="rasterize a route into a cost map")
    s.add_argument("--route", required=True)
    s.add_argument("--cell", type=float, default=1.0, help="cell size in meters")
    s.add_argument("--margin", type=float, default=150.0, help="margin around the route in meters")
    s.set_defaults(func=cmd_buildmap)

    s = sub.add_parser("serve", parents=[common], help="run the HTTP fix service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--model")
    s.add_argument("--map")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = _read_config(args.config)
        return args.func(args, config)
    except (CliError, TrainingError, ValueError, OSError, KeyError) as exc:
        print(f"rangecorr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
