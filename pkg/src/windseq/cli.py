"""Command-line entry point: ``windseq <subcommand> [flags]``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
Every subcommand writes its outputs plus ``manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .data import Normalizer, format_timestamp, ingest, make_windows, spans_a_year, synth_farm
from .data import write_series_csv
from .evaluation import (acf, evaluate, mlp_baseline, persistence_baseline, rnn_baseline,
                         write_acf_csv, write_metrics_csv)
from .graph import build_knn, read_layout_csv, write_layout_csv, write_neighbors_csv
from .model import Checkpoint, ModelConfig, Seq2Seq, _atomic_write, parameter_count
from .training import TrainConfig, TrainingDiverged, fit, write_log_csv

log = logging.getLogger("windseq")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags given on the command line win")
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--backend", choices=("auto", "numba", "numpy"), default="auto",
                   help="kernel implementation; auto keeps the library default")
    p.add_argument("--log-level", default="WARNING", help="python logging level")


def _farm_inputs(p, series=True):
    p.add_argument("--layout", required=True, help="layout CSV: turbine_id,x,y")
    p.add_argument("--latlon", action="store_true", help="layout x/y are longitude/latitude degrees")
    if series:
        p.add_argument("--series", required=True, help="series CSV: timestamp,turbine_id,speed[,power]")
        p.add_argument("--allow-split", action="store_true",
                       help="drop gaps longer than --max-gap instead of failing")
        p.add_argument("--max-gap", type=int, default=3, help="longest gap (hours) to interpolate")
        p.add_argument("--hemisphere", choices=("north", "south"), default="north")


def _model_flags(p):
    p.add_argument("--k", type=int, default=6, help="neighbour channels including the turbine itself")
    p.add_argument("--m", type=int, default=48, help="input window length (hours)")
    p.add_argument("--horizon", type=int, default=12, help="forecast steps (hours)")
    p.add_argument("--hidden", type=int, default=48, help="GRU hidden size")
    p.add_argument("--embed-dim", type=int, default=16, help="turbine embedding size")
    p.add_argument("--head-hidden", type=int, default=32, help="MLP head hidden width")
    p.add_argument("--embed-encoder", action="store_true", help="also feed the embedding to the encoder")
    p.add_argument("--power-history", action="store_true", help="add the turbine's past power as an encoder channel")
    p.add_argument("--annual-features", choices=("auto", "on", "off"), default="auto",
                   help="day-of-year and season inputs; auto uses them only when the "
                        "training span covers a full year")


def _train_flags(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--shard-size", type=int, default=32,
                   help="samples per gradient shard (fixes the reduction order)")
    p.add_argument("--train-end", help="use hours strictly before this timestamp for training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="windseq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"windseq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic farm (layout + series CSV)")
    _common(p)
    p.add_argument("--turbines", type=int, default=20)
    p.add_argument("--days", type=int, default=120)
    p.add_argument("--corr-length", type=float, default=800.0, help="spatial correlation length (m)")
    p.add_argument("--noise", type=float, default=0.8, help="white-noise std of speed (m/s)")
    p.add_argument("--ar-coef", type=float, default=0.9, help="hourly AR(1) coefficient")
    p.add_argument("--start", default="2021-01-01T00:00:00", help="first timestamp")
    p.add_argument("--speed-only", action="store_true", help="omit the power column")

    p = sub.add_parser("graph", help="write the k-NN neighbour table")
    _common(p)
    _farm_inputs(p, series=False)
    p.add_argument("--k", type=int, default=6)

    p = sub.add_parser("train", help="train the encoder-decoder")
    _common(p)
    _farm_inputs(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("forecast", help="forecast every turbine from an origin hour")
    _common(p)
    _farm_inputs(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--origin", help="forecast origin (default: last hour in the series)")
    p.add_argument("--start", help="also forecast from every hour between this and --origin")

    p = sub.add_parser("evaluate", help="per-horizon MAE/RMSE of a checkpoint")
    _common(p)
    _farm_inputs(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-start", help="score origins from this timestamp on")
    p.add_argument("--units", choices=("normalized", "raw"), default="normalized")
    p.add_argument("--name", default="ours", help="row label in the metrics files")

    p = sub.add_parser("baseline", help="per-horizon MAE/RMSE of PER / MLP / RNN baselines")
    _common(p)
    _farm_inputs(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--methods", default="per", help="comma list from per,mlp,rnn")
    p.add_argument("--mlp-hidden", type=int, default=None, help="MLP width (default: match model size)")
    p.add_argument("--test-start", help="score origins from this timestamp on (default --train-end)")
    p.add_argument("--units", choices=("normalized", "raw"), default="normalized")

    p = sub.add_parser("acf", help="sample autocorrelation of one turbine's speed")
    _common(p)
    _farm_inputs(p)
    p.add_argument("--turbine", help="turbine id (default: first in layout)")
    p.add_argument("--max-lag", type=int, default=50)
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def _apply_config(sub_parser: argparse.ArgumentParser, path) -> None:
    """Install config-file values as defaults of ``sub_parser``."""
    cfg = read_config(path)
    actions = {a.dest: a for a in sub_parser._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    defaults = {}
    for key, val in cfg.items():
        act = actions[key]
        if act.nargs == 0:  # store_true flags
            defaults[key] = val.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                defaults[key] = act.type(val)
            except ValueError:
                raise UsageError(f"{path}: bad value for {key}: {val!r}") from None
        else:
            defaults[key] = val
        if act.choices is not None and defaults[key] not in act.choices:
            raise UsageError(f"{path}: {key} must be one of {list(act.choices)}")
        act.required = False
    sub_parser.set_defaults(**defaults)


def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_farm(args, until=None):
    layout = read_layout_csv(args.layout, latlon=args.latlon)
    table = ingest(args.series, layout, allow_split=args.allow_split, max_gap=args.max_gap,
                   until=until)
    return layout, table


def _model_config(args, n_turbines) -> ModelConfig:
    return ModelConfig(
        n_turbines=n_turbines, k=args.k, m=args.m, horizon=args.horizon, hidden=args.hidden,
        embed_dim=args.embed_dim, head_hidden=args.head_hidden,
        embed_encoder=args.embed_encoder, power_history=args.power_history,
        annual_features={"auto": None, "on": True, "off": False}[args.annual_features],
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, patience=args.patience,
        seed=args.seed, val_fraction=args.val_fraction, clip_norm=args.clip_norm,
        shard_size=args.shard_size, threads=args.threads,
    )


def _write_metric_files(out: Path, rows: dict, units: str) -> list[str]:
    names = []
    for metric in ("mae", "rmse"):
        path = out / f"metrics_{metric}.csv"
        write_metrics_csv({k: v.select(metric, units) for k, v in rows.items()}, path)
        names.append(path.name)
    return names


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, out: Path) -> list[str]:
    layout, table = synth_farm(args.turbines, args.days, args.seed, args.corr_length, args.noise,
                               ar_coef=args.ar_coef, start=args.start)
    if args.speed_only:
        table.power = None
    write_layout_csv(layout, out / "layout.csv")
    write_series_csv(table, out / "series.csv")
    return ["layout.csv", "series.csv"]


def cmd_graph(args, out: Path) -> list[str]:
    layout = read_layout_csv(args.layout, latlon=args.latlon)
    index = build_knn(layout, args.k)
    write_neighbors_csv(layout, index, out / "neighbors.csv")
    return ["neighbors.csv"]


def cmd_train(args, out: Path) -> list[str]:
    layout, table = _load_farm(args)
    if args.train_end:
        table, _ = table.split_at(args.train_end)
    mc = _model_config(args, layout.n)
    if mc.annual_features is None:
        mc = replace(mc, annual_features=spans_a_year(table))
    tc = _train_config(args)
    neighbors = build_knn(layout, mc.k)
    log.info("training %d parameters on %d hours", parameter_count(mc), table.n_hours)

    def save(result, normalizer):
        ckpt = Checkpoint(mc, result.params, normalizer, layout.digest(), neighbors.digest(),
                          table.mode, args.hemisphere,
                          meta={"best_epoch": result.best_epoch, "seed": args.seed})
        ckpt.save(out / "checkpoint.json")
        write_log_csv(result.history, out / "train_log.csv")

    try:
        res = fit(table, neighbors, mc, tc, hemisphere=args.hemisphere)
    except TrainingDiverged as exc:
        from .training import chronological_split

        save(exc.result, Normalizer.fit(chronological_split(table, tc.val_fraction)[0]))
        raise
    save(res.train, res.normalizer)
    return ["checkpoint.json", "train_log.csv"]


def _checkpoint_for(args, layout) -> Checkpoint:
    ckpt = Checkpoint.load(args.checkpoint)
    ckpt.check_farm(layout.digest(), build_knn(layout, ckpt.config.k).digest()
                    if ckpt.config.k <= layout.n else "k-exceeds-farm")
    return ckpt


def cmd_forecast(args, out: Path) -> list[str]:
    layout = read_layout_csv(args.layout, latlon=args.latlon)
    ckpt = _checkpoint_for(args, layout)
    cfg = ckpt.config
    table = ingest(args.series, layout, allow_split=args.allow_split, max_gap=args.max_gap,
                   until=args.origin)
    neighbors = build_knn(layout, cfg.k)
    windows = make_windows(table, neighbors, ckpt.normalizer, cfg.m, cfg.horizon,
                           hemisphere=ckpt.hemisphere, require_targets=False,
                           **cfg.window_options())
    last = table.n_hours - 1
    if args.start:
        first = int(np.searchsorted(table.timestamps, np.datetime64(args.start, "s")))
    else:
        first = last
    valid = set(windows.valid_origins(cfg.m, 0).tolist())
    origins = [t for t in range(first, last + 1) if t in valid]
    if not origins:
        raise ValueError(f"no forecast origin has {cfg.m} hours of history")
    turbines = np.repeat(np.arange(layout.n), len(origins))
    org = np.tile(np.asarray(origins, dtype=np.int64), layout.n)
    pred = Seq2Seq(cfg).predict(ckpt.params, windows.batch(turbines=turbines, origins=org))
    pred = pred * ckpt.normalizer.target_scale[turbines][:, None]
    path = out / "forecast.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["turbine_id", "origin"] + [f"h{h}" for h in range(1, cfg.horizon + 1)]) + "\n")
        for i, t, row in zip(turbines, org, pred):
            cells = [layout.turbine_ids[i], format_timestamp(table.timestamps[t])]
            fh.write(",".join(cells + [repr(float(v)) for v in row]) + "\n")
    return [path.name]


def cmd_evaluate(args, out: Path) -> list[str]:
    layout, table = _load_farm(args)
    capacity = table.target.max(axis=1)
    ckpt = _checkpoint_for(args, layout)
    test = table.split_at(args.test_start)[1] if args.test_start else table
    metrics = evaluate(ckpt, test, layout, capacity=capacity, threads=args.threads)
    return _write_metric_files(out, {args.name: metrics}, args.units)


def cmd_baseline(args, out: Path) -> list[str]:
    layout, table = _load_farm(args)
    capacity = table.target.max(axis=1)
    methods = [s.strip().lower() for s in args.methods.split(",") if s.strip()]
    bad = sorted(set(methods) - {"per", "mlp", "rnn"})
    if bad or not methods:
        raise UsageError(f"--methods: unknown baseline(s) {bad or methods}")
    split = args.test_start or args.train_end
    if ("mlp" in methods or "rnn" in methods) and not args.train_end:
        raise UsageError("--train-end is required for trained baselines (mlp, rnn)")
    train_tab = table.split_at(args.train_end)[0] if args.train_end else None
    test = table.split_at(split)[1] if split else table
    mc = _model_config(args, layout.n)
    rows = {}
    for meth in methods:
        if meth == "per":
            rows["PER"] = persistence_baseline(test, mc.m, mc.horizon, capacity=capacity)
        elif meth == "mlp":
            nb = build_knn(layout, mc.k)
            rows["MLP"], _ = mlp_baseline(train_tab, test, nb, mc.m, mc.horizon, _train_config(args),
                                          hidden=args.mlp_hidden, capacity=capacity,
                                          hemisphere=args.hemisphere)
        else:
            nb = build_knn(layout, mc.k)
            rows["RNN"], _ = rnn_baseline(train_tab, test, nb, mc, _train_config(args),
                                          capacity=capacity, hemisphere=args.hemisphere)
    return _write_metric_files(out, rows, args.units)


def cmd_acf(args, out: Path) -> list[str]:
    layout, table = _load_farm(args)
    i = layout.index_of(args.turbine) if args.turbine else 0
    res = acf(table.speed[i], args.max_lag)
    write_acf_csv(res, out / "acf.csv")
    return ["acf.csv"]


COMMANDS = {
    "synth": cmd_synth, "graph": cmd_graph, "train": cmd_train, "forecast": cmd_forecast,
    "evaluate": cmd_evaluate, "baseline": cmd_baseline, "acf": cmd_acf,
}
_INPUT_FLAGS = ("config", "layout", "series", "checkpoint")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = next((a for a in argv if not a.startswith("-")), None)
    cfg_path = _config_path(argv)
    if command in COMMANDS and cfg_path:
        sub_parser = parser._subparsers._group_actions[0].choices[command]
        try:
            _apply_config(sub_parser, cfg_path)
        except (UsageError, OSError) as exc:
            parser.print_usage(sys.stderr)
            print(f"windseq: error: {exc}", file=sys.stderr)
            return 2
    args = parser.parse_args(argv)  # exits 2 on usage errors

    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.backend != "auto":
        _kernels.set_backend(args.backend)
    if args.threads < 1:
        print("windseq: error: --threads must be >= 1", file=sys.stderr)
        return 2

    out = Path(args.out)
    started = time.time()
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs = {flag: _digest(getattr(args, flag)) for flag in _INPUT_FLAGS
                  if getattr(args, flag, None)}
        outputs = COMMANDS[args.command](args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"windseq: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"windseq: error: {exc}", file=sys.stderr)
        return 1

    manifest = {
        "tool": "windseq",
        "version": __version__,
        "command": args.command,
        "argv": argv,
        "config": {k: v for k, v in sorted(vars(args).items())},
        "seed": args.seed,
        "backend": _kernels.BACKEND,
        "inputs": {flag: {"path": str(getattr(args, flag)), "sha256": d}
                   for flag, d in inputs.items()},
        "outputs": outputs,
        "timings": {"started_unix": started, "wall_seconds": time.perf_counter() - t0},
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, default=str) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
