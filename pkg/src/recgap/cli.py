"""Batch command line: ``recgap <subcommand> [--config FILE] [flags]``.

Settings resolve as built-in defaults < ``key = value`` config file < flags.
Commands that write files also write ``manifest.json`` (the resolved config)
next to their outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import (atomic_write_json, atomic_write_text, dump_config, fmt, load_config,
                     parse_list)
from .data import compute_popularity, ingest_log
from .errors import RecgapError
from .experiment import (DEFAULT_MODELS, DESK_WORLD, ExperimentGrid, best_config, build_report,
                         read_results_csv, run_grid, simulated_worlds)
from .models import ModelSpec, load_model, save_model
from .offline import ColdStart, MetricConfig, Val, evaluate
from .online import DEFAULT_WINDOW, ictr, ictr_by_model, read_recs_csv, write_recs_csv
from .simulator import DAY, generate_history, ground_truth, run_live_phase

_log = logging.getLogger("recgap")

COMMANDS = ("ingest", "train", "eval-offline", "eval-online", "simulate", "experiment", "report")

WORLD_KEYS = tuple(f.name for f in dataclasses.fields(DESK_WORLD) if f.name not in ("seed", "horizon"))

DEFAULTS: dict[str, dict[str, str]] = {
    "ingest": {},
    "train": {"kind": "mf-knn", "factors": "16", "reg": "0.1", "alpha": "10", "iters": "10",
              "neighbors": "100", "seed": "0"},
    "eval-offline": {"val": "loo", "beta": "0", "k": "10", "cold_start": ColdStart.INCLUDE.value,
                     "kind": "popularity", "seed": "0"},
    "eval-online": {"d": str(DEFAULT_WINDOW)},
    "simulate": {**{k: str(getattr(DESK_WORLD, k)) for k in WORLD_KEYS},
                 "horizon_days": "6", "retrain_hours": "48", "k_serve": "10", "seed": "0"},
    "experiment": {**{k: str(getattr(DESK_WORLD, k)) for k in WORLD_KEYS},
                   "horizon_days": "6", "retrain_hours": "48", "k_serve": "10", "seed": "0",
                   "n_datasets": "5", "holdout_fraction": "0.2",
                   "k_values": ",".join(str(k) for k in ExperimentGrid([]).k_values),
                   "beta_values": ",".join(fmt(b) for b in ExperimentGrid([]).beta_values),
                   "val_values": "loo,lloo", "d": str(DEFAULT_WINDOW),
                   "cold_start": ColdStart.INCLUDE.value},
    "report": {},
}


def _spec_to_text(spec: ModelSpec) -> str:
    parts = [spec.kind] + [f"{k}={v}" for k, v in spec.params.items()]
    if spec.name:
        parts.append(f"name={spec.name}")
    return " ".join(parts)


for _n, _s in enumerate(DEFAULT_MODELS, 1):
    DEFAULTS["simulate"][f"model.{_n}"] = _spec_to_text(_s)
    DEFAULTS["experiment"][f"model.{_n}"] = _spec_to_text(_s)


def parse_model_spec(text: str) -> ModelSpec:
    """``mf-knn f=8 lambda=1.0 name=knn-f8`` -> ModelSpec."""
    kind, *rest = text.split()
    params, name = {}, None
    for tok in rest:
        key, _, value = tok.partition("=")
        if key == "name":
            name = value
            continue
        try:
            params[key] = int(value)
        except ValueError:
            params[key] = float(value)
    return ModelSpec(kind, params, name)


def _model_specs(cfg: dict) -> list[ModelSpec]:
    keys = sorted((k for k in cfg if k.startswith("model.")), key=lambda k: int(k.split(".")[1]))
    return [parse_model_spec(cfg[k]) for k in keys]


def _world(cfg: dict):
    kw = {k: type(getattr(DESK_WORLD, k))(cfg[k]) for k in WORLD_KEYS}
    kw["horizon"] = int(round(float(cfg["horizon_days"]) * DAY))
    kw["seed"] = int(cfg["seed"])
    return dataclasses.replace(DESK_WORLD, **kw)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("RECGAP_THREADS", "1"))


def _emit(obj, args) -> None:
    text = json.dumps(obj, sort_keys=True)
    if getattr(args, "output", None):
        atomic_write_text(args.output, text + "\n")
    print(text)


def _write_manifest(out_dir: Path, command: str, cfg: dict) -> None:
    atomic_write_text(out_dir / "manifest.cfg", dump_config(cfg))
    atomic_write_json(out_dir / "manifest.json",
                      {"command": command, "version": __version__, "config": cfg})


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(cfg, args):
    log = ingest_log(cfg["input"])
    pop = compute_popularity(log)
    summary = {"n_interactions": len(log), "n_users": log.n_users, "n_items": log.n_items,
               "first_timestamp": int(log.timestamps.min()),
               "last_timestamp": int(log.timestamps.max())}
    if "out" in cfg:
        out = Path(cfg["out"])
        lines = ["item_id,count,popularity"] + [
            f"{it},{log.item_counts[it]},{fmt(pop[it])}" for it in pop.item_ids]
        atomic_write_text(out / "popularity.csv", "\n".join(lines) + "\n")
        atomic_write_json(out / "summary.json", summary)
        _write_manifest(out, "ingest", cfg)
    _emit(summary, args)


def _train_spec(cfg) -> ModelSpec:
    kind = cfg["kind"]
    if kind in ("mf-knn", "mf"):
        params = {"f": int(cfg["factors"]), "lambda": float(cfg["reg"]),
                  "alpha": float(cfg["alpha"]), "iters": int(cfg["iters"]),
                  "seed": int(cfg["seed"])}
        if kind == "mf-knn":
            params["m"] = int(cfg["neighbors"])
        return ModelSpec(kind, params)
    if kind == "random":
        return ModelSpec(kind, {"seed": int(cfg["seed"])})
    return ModelSpec(kind)


def cmd_train(cfg, args):
    log = ingest_log(cfg["input"])
    model = _train_spec(cfg).fit(log)
    out = Path(cfg["out"])
    save_model(model, out)
    _write_manifest(out.parent, "train", cfg)
    _emit(model.metadata, args)


def cmd_eval_offline(cfg, args):
    log = ingest_log(cfg["input"])
    model = load_model(cfg["model"]) if "model" in cfg else _train_spec(cfg).fit(log)
    mc = MetricConfig(Val(cfg["val"]), float(cfg["beta"]), int(cfg["k"]), ColdStart(cfg["cold_start"]))
    res = evaluate(log, model, mc, compute_popularity(log))
    d = res.to_dict(per_user=args.per_user)
    d["value"] = float(fmt(d["value"]))
    _emit(d, args)


def cmd_eval_online(cfg, args):
    log = ingest_log(cfg["input"])
    recs = read_recs_csv(cfg["recs"])
    d = int(cfg["d"])
    out = ictr(recs, log, d).to_dict()
    if any(r.model is not None for r in recs):
        out["per_model"] = {t: r.to_dict() for t, r in ictr_by_model(recs, log, d).items()}
    _emit(out, args)


def cmd_simulate(cfg, args):
    world = _world(cfg)
    specs = _model_specs(cfg)
    truth = ground_truth(world)
    history = generate_history(world, truth)
    live = run_live_phase(history, specs, world, int(float(cfg["retrain_hours"]) * 3600),
                          int(cfg["k_serve"]), truth=truth)
    out = Path(cfg["out"])
    history.to_csv(buf := io.StringIO())
    atomic_write_text(out / "history.csv", buf.getvalue())
    write_recs_csv(live.events, out / "recs.csv", with_model=True)
    if live.clicks is not None:
        live.clicks.to_csv(buf := io.StringIO())
        atomic_write_text(out / "live.csv", buf.getvalue())
    else:
        atomic_write_text(out / "live.csv", "user_id,item_id,timestamp\n")
    _write_manifest(out, "simulate", cfg)
    atomic_write_json(out / "run.json", live.manifest)
    _emit({"history": len(history), "recommendations": len(live.events),
           "clicks": 0 if live.clicks is None else len(live.clicks)}, args)


def _grid_from(cfg, datasets) -> ExperimentGrid:
    return ExperimentGrid(datasets, tuple(parse_list(cfg["k_values"], int)),
                          tuple(parse_list(cfg["beta_values"], float)),
                          tuple(Val(v.strip()) for v in cfg["val_values"].split(",")),
                          ColdStart(cfg["cold_start"]), int(cfg["d"]))


def _write_report(out: Path, report) -> None:
    atomic_write_json(out / "msr_report.json", report.to_dict())
    atomic_write_text(out / "plot_data.csv", report.plot_data_csv())


def cmd_experiment(cfg, args):
    world = _world(cfg)
    worlds = simulated_worlds(int(cfg["seed"]), int(cfg["n_datasets"]), world, _model_specs(cfg),
                              int(cfg["k_serve"]), int(float(cfg["retrain_hours"]) * 3600),
                              float(cfg["holdout_fraction"]))
    grid = _grid_from(cfg, [w.tag for w in worlds])
    results = run_grid(grid, worlds, threads=_threads(args))
    report = build_report(results)
    out = Path(cfg["out"])
    atomic_write_text(out / "results.csv", results.to_csv())
    _write_report(out, report)
    _write_manifest(out, "experiment", cfg)
    best = best_config(report)
    _emit({"best_val": best[0].value, "best_beta": best[1], "best_msr": report.msr(*best),
           "msr_loo_beta0": report.msr(Val.LOO, 0.0) if (Val.LOO, 0.0) in report.entries else None},
          args)


def cmd_report(cfg, args):
    results = read_results_csv(cfg["results"])
    report = build_report(results)
    out = Path(cfg["out"])
    _write_report(out, report)
    _write_manifest(out, "report", cfg)
    best = best_config(report)
    _emit({"best_val": best[0].value, "best_beta": best[1], "best_msr": report.msr(*best)}, args)


HANDLERS = {"ingest": cmd_ingest, "train": cmd_train, "eval-offline": cmd_eval_offline,
            "eval-online": cmd_eval_online, "simulate": cmd_simulate,
            "experiment": cmd_experiment, "report": cmd_report}

REQUIRED = {"ingest": ("input",), "train": ("input", "out"), "eval-offline": ("input",),
            "eval-online": ("input", "recs"), "simulate": ("out",), "experiment": ("out",),
            "report": ("results", "out")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recgap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeded=False):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
        sp.add_argument("--output", help="also write the JSON summary to this file")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: $RECGAP_THREADS or 1)")
        if seeded:
            sp.add_argument("--seed", type=int)
        return sp

    s = common(sub.add_parser("ingest", help="parse and summarise an interaction CSV"))
    s.add_argument("--input")
    s.add_argument("--out")

    s = common(sub.add_parser("train", help="train a model and save it"), seeded=True)
    s.add_argument("--input")
    s.add_argument("--out")
    s.add_argument("--kind", choices=("popularity", "random", "mf-knn", "mf"))
    for flag in ("factors", "iters", "neighbors"):
        s.add_argument(f"--{flag}", type=int)
    for flag in ("reg", "alpha"):
        s.add_argument(f"--{flag}", type=float)

    s = common(sub.add_parser("eval-offline", help="LOO/LLOO recall of a model"), seeded=True)
    s.add_argument("--input")
    s.add_argument("--model", help="saved model (default: fit --kind on the input)")
    s.add_argument("--kind", choices=("popularity", "random", "mf-knn", "mf"))
    s.add_argument("--val", choices=("loo", "lloo"))
    s.add_argument("--beta", type=float)
    s.add_argument("--k", type=int)
    s.add_argument("--cold-start", choices=[c.value for c in ColdStart])
    s.add_argument("--per-user", action="store_true")

    s = common(sub.add_parser("eval-online", help="implicit CTR of a recommendation log"))
    s.add_argument("--input", help="interaction CSV")
    s.add_argument("--recs", help="recommendation CSV")
    s.add_argument("--d", type=int, help="window in seconds")

    s = common(sub.add_parser("simulate", help="simulate history and a live A/B phase"), seeded=True)
    s.add_argument("--out")

    s = common(sub.add_parser("experiment", help="run the offline/online MSR experiment"), seeded=True)
    s.add_argument("--out")

    s = common(sub.add_parser("report", help="recompute the MSR report from a results CSV"))
    s.add_argument("--results")
    s.add_argument("--out")
    return p


_NOT_CONFIG = {"command", "config", "set", "output", "threads", "per_user"}


def resolve_config(args) -> dict[str, str]:
    user = load_config(args.config) if args.config else {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        user[key.strip().replace("-", "_")] = value.strip()
    cfg = dict(DEFAULTS[args.command])
    if any(k.startswith("model.") for k in user):
        # a user-supplied model list replaces the default one wholesale
        cfg = {k: v for k, v in cfg.items() if not k.startswith("model.")}
    cfg.update(user)
    for key, value in vars(args).items():
        if key not in _NOT_CONFIG and value is not None:
            cfg[key] = str(value)
    missing = [k for k in REQUIRED[args.command] if k not in cfg]
    if missing:
        raise ValueError(f"missing required setting(s): {', '.join(missing)}")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg, args)
    except (RecgapError, ValueError, OSError, KeyError) as exc:
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
