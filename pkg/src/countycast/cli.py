"""``countycast`` command-line entry point.

Every subcommand reads one JSON config file (``--config``) whose keys all
have defaults; command-line flags override config values. Errors print one
line to stderr, ``error code=<exit> kind=<class> message=<text>``, and exit
with 2 (config), 3 (data) or 4 (numeric fault).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigError, CountycastError, DataError

SUBCOMMANDS = ("build-panel", "analyze", "synth", "train", "forecast", "backtest", "report")


def _dataclass_defaults(cls) -> dict:
    inst = cls()
    out = {}
    for f in fields(cls):
        v = getattr(inst, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    from .dataset import PanelConfig, SynthSpec
    from .forecast import DwlstmConfig
    from .windows import ForecastTask

    model = _dataclass_defaults(DwlstmConfig)
    for k in ("w_in", "w_out", "dynamic_size", "static_size", "seed"):
        model.pop(k)  # task and root seed own these
    return {
        "seed": 0,
        "out": "out",
        "paths": {
            "outbreak": None,
            "static": [],
            "dynamic": [],
            "panel": None,
            "checkpoint": None,
            "reports": [],
        },
        "panel": _dataclass_defaults(PanelConfig),
        "synth": _dataclass_defaults(SynthSpec),
        "task": _dataclass_defaults(ForecastTask),
        "model": model,
        "analyze": {
            "retain": 0.98,
            "outcomes": ["cumulative_cases", "cumulative_deaths", "cumulative_recoveries"],
            "report_date": None,
            "hist_bins": 16,
            "mi_bins": 16,
            "aggregate": False,
            "scale": True,
        },
        "backtest": {
            "models": ["dwlstm", "arima_star"],
            "horizons": [10],
            "ensemble": 1,
            "arima_order": [1, 2, 0],
            "max_p": 3,
            "max_q": 3,
            "kfold": 0,
            "ablate_states": [],
        },
    }


# sections (or top-level keys) each subcommand reads
READS = {
    "build-panel": ("out", "paths.outbreak", "paths.static", "paths.dynamic", "panel"),
    "analyze": ("out", "paths.panel", "analyze"),
    "synth": ("seed", "out", "synth"),
    "train": ("seed", "out", "paths.panel", "task", "model"),
    "forecast": ("out", "paths.panel", "paths.checkpoint"),
    "backtest": ("seed", "out", "paths.panel", "paths.checkpoint", "task", "model", "backtest"),
    "report": ("out", "paths.reports"),
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[k] = _merge(base[k], v, path + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    if not isinstance(user, dict):
        raise ConfigError("config root must be an object")
    return _merge(cfg, user)


def _flat_keys(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for k, v in d.items():
        if isinstance(v, dict):
            out += _flat_keys(v, f"{prefix}{k}.")
        else:
            out.append((f"{prefix}{k}", v))
    return out


def keys_read(command: str) -> list[tuple[str, object]]:
    allk = _flat_keys(default_config())
    prefixes = READS[command]
    return [(k, v) for k, v in allk if any(k == p or k.startswith(p + ".") for p in prefixes)]


def _epilog(command: str) -> str:
    lines = ["config keys read (default):"]
    for k, v in keys_read(command):
        lines.append(f"  {k} = {json.dumps(v)}")
    return "\n".join(lines)


# ---- helpers -----------------------------------------------------------------


def _require_path(value, key: str, kind: str = "file") -> Path:
    if value is None:
        raise ConfigError(f"config key {key} is required")
    p = Path(value)
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise ConfigError(f"{key}: path does not exist: {p}")
    return p


def _as_config(factory, values: dict, section: str):
    try:
        return factory(**values)
    except (TypeError, DataError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from None


def _task(cfg):
    from .windows import ForecastTask

    return _as_config(ForecastTask, cfg["task"], "task")


def _model_config(cfg, task, seed):
    from .forecast import DwlstmConfig

    return _as_config(
        DwlstmConfig, dict(cfg["model"], w_in=task.w_in, w_out=task.w_out, seed=seed), "model"
    )


def _load_panel(cfg):
    from .dataset import FeaturePanel

    return FeaturePanel.load(_require_path(cfg["paths"]["panel"], "paths.panel", "dir"))


def _write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "seed": cfg["seed"], "config": cfg}
    if extra:
        doc.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"manifest_{command}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _table_entries(value, key: str) -> list[tuple[Path, Path]]:
    """A table is {"csv": path, "schema": path}; lists of them for static/dynamic."""
    items = value if isinstance(value, list) else [value]
    out = []
    for j, item in enumerate(items):
        k = f"{key}[{j}]" if isinstance(value, list) else key
        if not isinstance(item, dict) or set(item) != {"csv", "schema"}:
            raise ConfigError(f"{k} must be an object with 'csv' and 'schema' paths")
        out.append((_require_path(item["csv"], f"{k}.csv"), _require_path(item["schema"], f"{k}.schema")))
    return out


# ---- subcommands ---------------------------------------------------------------


def cmd_build_panel(cfg: dict) -> Path:
    from .dataset import DatasetSchema, PanelConfig, build_panel, load_dataset

    if cfg["paths"]["outbreak"] is None:
        raise ConfigError("config key paths.outbreak is required")
    ob = _table_entries(cfg["paths"]["outbreak"], "paths.outbreak")[0]
    st = _table_entries(cfg["paths"]["static"], "paths.static")
    dy = _table_entries(cfg["paths"]["dynamic"], "paths.dynamic")
    pc = _as_config(PanelConfig, cfg["panel"], "panel")

    def load(pair):
        return load_dataset(DatasetSchema.load(pair[1]), pair[0])

    panel = build_panel(load(ob), [load(p) for p in st], [load(p) for p in dy], pc)
    out = Path(cfg["out"])
    panel.save(out / "panel")
    _write_manifest(out, "build-panel", cfg, {"n_counties": panel.n_counties, "n_days": panel.n_days})
    print(f"panel: {panel.n_counties} counties x {panel.n_days} days -> {out / 'panel'}")
    return out / "panel"


def cmd_analyze(cfg: dict) -> Path:
    from .pca import components_for_variance, fit_panel_pca
    from .stats import correlate_panel

    a = cfg["analyze"]
    panel = _load_panel(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name in a["outcomes"]:
        try:
            panel.outcome(name)
        except DataError as exc:
            raise ConfigError(f"analyze.outcomes: {exc}") from None
    report = correlate_panel(panel, tuple(a["outcomes"]), a["report_date"], a["hist_bins"], a["mi_bins"])
    report.to_csv(out / "correlations.csv")
    model = fit_panel_pca(panel, retain=a["retain"], aggregate=a["aggregate"], scale=a["scale"])
    model.save(out)
    k, cum = components_for_variance(model, a["retain"])
    _write_manifest(out, "analyze", cfg, {"components_for_retain": k})
    print(f"components for {a['retain']:g} of variance: {k} of {len(cum)}")
    return out


def cmd_synth(cfg: dict) -> Path:
    from .dataset import SynthSpec, generate_synthetic_panel, write_raw_tables

    s = dict(cfg["synth"])
    s["pop_range"] = tuple(s["pop_range"])
    s["midpoint_range"] = tuple(s["midpoint_range"])
    spec = _as_config(SynthSpec, s, "synth")
    panel = generate_synthetic_panel(spec, int(cfg["seed"]))
    out = Path(cfg["out"])
    panel.save(out / "panel")
    write_raw_tables(panel, out / "raw")
    _write_manifest(out, "synth", cfg)
    print(f"synthetic panel: {panel.n_counties} counties x {panel.n_days} days -> {out / 'panel'}")
    return out / "panel"


def cmd_train(cfg: dict) -> Path:
    from .forecast import save_checkpoint, train, write_training_log

    panel = _load_panel(cfg)
    task = _task(cfg)
    model = train(panel, task, _model_config(cfg, task, int(cfg["seed"])))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.json")
    write_training_log(model, out / "training_log.csv")
    _write_manifest(out, "train", cfg)
    e0, last = model.log[0][1], model.meta["final_train_loss"]
    print(f"trained {len(model.log) - 1} epochs (best {model.meta['best_epoch']}); train loss {e0:.6g} -> {last:.6g}")
    return out / "model.json"


def cmd_forecast(cfg: dict) -> Path:
    import numpy as np

    from .forecast import load_checkpoint, rollout
    from .windows import build_windows

    panel = _load_panel(cfg)
    model = load_checkpoint(_require_path(cfg["paths"]["checkpoint"], "paths.checkpoint"))
    w_in, w_out = model.config.w_in, model.config.w_out
    if tuple(panel.static_names) != model.static_names or tuple(panel.dynamic_names) != model.dynamic_names[:-1]:
        raise DataError("panel features do not match the checkpoint")
    if panel.n_days < w_in:
        raise DataError(f"panel has {panel.n_days} days, the model needs {w_in}")
    target = panel.outcome(model.objective)
    ws = build_windows(panel, target, w_in, w_out, [panel.n_days - w_in])
    fc = rollout(model, ws, w_out)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "forecast.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["county", "date", "objective", "point"])
        for n in range(len(ws)):
            for k in range(w_out):
                day = panel.dates[-1] + np.timedelta64(k + 1, "D")
                w.writerow([panel.fips[int(ws.county[n])], str(day), model.objective, repr(float(fc[n, k]))])
    _write_manifest(out, "forecast", cfg)
    print(f"forecast: {len(ws)} counties x {w_out} days -> {path}")
    return path


def cmd_backtest(cfg: dict) -> Path:
    from .evaluate import ModelSpec, backtest, backtest_kfold, exclusion_ablation

    b = cfg["backtest"]
    panel = _load_panel(cfg)
    task = _task(cfg)
    seed = int(cfg["seed"])
    if int(b["ensemble"]) < 1:
        raise ConfigError("backtest.ensemble must be >= 1")
    ckpt = cfg["paths"]["checkpoint"]
    if ckpt is not None:
        _require_path(ckpt, "paths.checkpoint")
    spec = _as_config(
        ModelSpec,
        {
            "models": tuple(b["models"]),
            "dwlstm": _model_config(cfg, task, seed),
            "seeds": tuple(seed + i for i in range(int(b["ensemble"]))),
            "checkpoints": (ckpt,) if ckpt else (),
            "arima_order": tuple(b["arima_order"]),
            "max_p": b["max_p"],
            "max_q": b["max_q"],
        },
        "backtest",
    )
    out = Path(cfg["out"]) / "backtest"
    for h in b["horizons"]:
        t = _as_config(lambda **kw: replace(task, **kw), {"w_out": int(h)}, "backtest.horizons")
        s = replace(spec, dwlstm=replace(spec.dwlstm, w_out=int(h)))
        hdir = out / f"h{int(h)}"
        report = backtest(panel, t, s, hdir)
        for row in report.rows():
            print(f"h={h} {row['model']}: macro {row['macro_rmse']:.4f} micro {row['micro_rmse']:.4f}")
        if int(b["kfold"]) > 0:
            reports, summary = backtest_kfold(panel, t, s, int(b["kfold"]))
            for j, r in enumerate(reports):
                r.write(hdir / f"fold{j + 1}")
            _write_rows(hdir / "kfold_summary.csv", summary)
        if b["ablate_states"]:
            _, reduced = exclusion_ablation(panel, t, s, tuple(b["ablate_states"]))
            reduced.write(hdir / "ablation")
    _write_manifest(out, "backtest", cfg)
    return out


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in cols)])


def cmd_report(cfg: dict) -> Path:
    """Merge backtest report.csv files into one table and a summary."""
    dirs = [Path(d) for d in cfg["paths"]["reports"]]
    if not dirs:
        default = Path(cfg["out"]) / "backtest"
        if not default.is_dir():
            raise ConfigError("paths.reports is empty and no backtest output exists under out/backtest")
        dirs = [default]
    files = []
    for d in dirs:
        if not d.exists():
            raise ConfigError(f"paths.reports: path does not exist: {d}")
        files += sorted(d.rglob("report.csv")) if d.is_dir() else [d]
    if not files:
        raise DataError("no report.csv files found")
    out = Path(cfg["out"])
    header, rows = None, []
    for f in files:
        with f.open(newline="", encoding="utf-8") as fh:
            r = list(csv.reader(fh))
        if header is None:
            header = r[0]
        elif r[0] != header:
            raise DataError(f"{f} has a different report layout")
        try:
            rel = f.parent.relative_to(out).as_posix()
        except ValueError:
            rel = f.parent.as_posix()
        rows += [[rel, *row] for row in r[1:]]
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", *header])
        w.writerows(rows)
    lines = []
    for row in rows:
        d = dict(zip(["source", *header], row))
        lines.append(f"{d['source']}  {d['model']:<10} h={d['horizon']:<3} macro={float(d['macro_rmse']):.4f} micro={float(d['micro_rmse']):.4f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return out / "report.csv"


COMMANDS = {
    "build-panel": cmd_build_panel,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "backtest": cmd_backtest,
    "report": cmd_report,
}

# flag -> (config key, type)
FLAGS = {
    "build-panel": {"--max-gap-days": ("panel.max_gap_days", int)},
    "analyze": {"--panel": ("paths.panel", str), "--retain": ("analyze.retain", float), "--aggregate": ("analyze.aggregate", "flag")},
    "synth": {
        "--beta": ("synth.beta", float),
        "--n-counties": ("synth.n_counties", int),
        "--n-days": ("synth.n_days", int),
    },
    "train": {
        "--panel": ("paths.panel", str),
        "--objective": ("task.objective", str),
        "--w-in": ("task.w_in", int),
        "--w-out": ("task.w_out", int),
        "--epochs": ("model.epochs", int),
    },
    "forecast": {"--panel": ("paths.panel", str), "--checkpoint": ("paths.checkpoint", str)},
    "backtest": {
        "--panel": ("paths.panel", str),
        "--checkpoint": ("paths.checkpoint", str),
        "--objective": ("task.objective", str),
        "--models": ("backtest.models", "list"),
        "--horizons": ("backtest.horizons", "intlist"),
        "--ensemble": ("backtest.ensemble", int),
        "--epochs": ("model.epochs", int),
    },
    "report": {"--reports": ("paths.reports", "list")},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="countycast", description="County-level outbreak analytics and forecasting.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; unknown keys are an error")
    common.add_argument("--out", help="output directory (config key: out)")
    common.add_argument("--seed", type=int, help="root seed (config key: seed)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (computation is single-threaded; accepted for compatibility)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        doc = (COMMANDS[name].__doc__ or "").strip().splitlines()
        p = sub.add_parser(
            name,
            parents=[common],
            help=doc[0] if doc else name,
            epilog=_epilog(name),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        for flag, (key, typ) in FLAGS[name].items():
            dest = flag.lstrip("-").replace("-", "_")
            if typ == "flag":
                p.add_argument(flag, dest=dest, action="store_true", default=None, help=f"sets {key}")
            elif typ in ("list", "intlist"):
                p.add_argument(flag, dest=dest, help=f"comma-separated; sets {key}")
            else:
                p.add_argument(flag, dest=dest, type=typ, help=f"sets {key}")
    return parser


def _set(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    d = cfg
    for p in parts[:-1]:
        d = d[p]
    d[parts[-1]] = value


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag, (key, typ) in FLAGS[args.command].items():
        v = getattr(args, flag.lstrip("-").replace("-", "_"))
        if v is None:
            continue
        if typ == "list":
            v = [s for s in v.split(",") if s]
        elif typ == "intlist":
            try:
                v = [int(s) for s in v.split(",") if s]
            except ValueError:
                raise ConfigError(f"{flag} expects comma-separated integers") from None
        _set(cfg, key, v)
    return cfg


def _error_line(exc: BaseException, code: int) -> str:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    return f"error code={code} kind={exc.__class__.__name__} message={msg}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except CountycastError as exc:
        print(_error_line(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        code = DataError.exit_code
        print(_error_line(exc, code), file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
