"""Command-line entry point: ``jointsampler {train,sample-error,sweep,plot}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .harness import (
    METRICS_HEADER,
    ExperimentConfig,
    config_from_mapping,
    load_config,
    run_sampling_error,
    run_training,
    streams,
)
from .metrics import bootstrap_ci
from .plotting import Series, line_chart

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SUMMARY_HEADER = ["sampler", "step", "metric", "n", "mean", "ci_low", "ci_high"]
SUMMARY_METRICS = METRICS_HEADER[2:]
_SAMPLER_ALIASES = {"on-policy": "on_policy", "props": "props", "ma-props": "ma_props"}
_FLAG_ALIASES = {"algo": "algorithm", "steps": "total_steps", "out": "out_dir"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _sampler(name: str) -> str:
    if name not in _SAMPLER_ALIASES:
        raise argparse.ArgumentTypeError(f"invalid sampler {name!r} (choose from on-policy, props, ma-props)")
    return _SAMPLER_ALIASES[name]


def _checkpoints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad checkpoint list {text!r}") from None
    if not values or any(v < 1 for v in values) or values != sorted(set(values)):
        raise argparse.ArgumentTypeError("checkpoints must be increasing positive integers")
    return values


def _seed_range(text: str) -> list[int]:
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            return list(range(lo, hi))
        return list(range(int(text)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed range {text!r}") from None


def _default_out(name: str) -> str:
    return str(Path(os.environ.get("JOINTSAMPLER_OUT_DIR", "runs")) / name)


def _overrides(extra: list[str]) -> dict[str, str]:
    """Turn trailing ``--key value`` pairs into config overrides."""
    out, i = {}, 0
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--"):
            raise UsageError(f"unexpected argument {flag!r}")
        key, eq, value = flag[2:].partition("=")
        key = key.replace("-", "_")
        key = _FLAG_ALIASES.get(key, key)
        if key not in fields:
            raise UsageError(f"unknown option --{flag[2:]}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"option {flag} needs a value")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def _base_parser(sub, name: str, help_text: str):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--game")
    p.add_argument("--algo", dest="algorithm", choices=("mappo", "ippo"))
    p.add_argument("--out")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jointsampler", description="Adaptive joint-action sampling experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = _base_parser(sub, "train", "run one training job")
    p.add_argument("--sampler", type=_sampler)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", dest="total_steps", type=int)

    p = _base_parser(sub, "sample-error", "fixed-policy sampling-error experiment")
    p.add_argument("--sampler", type=_sampler)
    p.add_argument("--budget", type=int, default=4096)
    p.add_argument("--checkpoints", type=_checkpoints, default=[16, 64, 256, 1024, 4096])
    p.add_argument("--seeds", type=_seed_range, default=_seed_range("10"))

    p = _base_parser(sub, "sweep", "many seeds and samplers over one game, with a summary")
    p.add_argument("--mode", choices=("train", "sample-error"), default="train")
    p.add_argument("--samplers", default="on-policy,props,ma-props")
    p.add_argument("--seeds", type=_seed_range, default=_seed_range("10"))
    p.add_argument("--steps", dest="total_steps", type=int)
    p.add_argument("--budget", type=int, default=4096)
    p.add_argument("--checkpoints", type=_checkpoints, default=[16, 64, 256, 1024, 4096])
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("plot", help="render metrics or summary CSVs as an SVG line chart")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--metric", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="")
    return parser


def _config(args, extra: dict) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    flags = {k: getattr(args, k) for k in ("game", "algorithm", "sampler", "seed", "total_steps")
             if getattr(args, k, None) is not None}
    cfg = dataclasses.replace(cfg, **flags)
    cfg = config_from_mapping(extra, cfg)
    return cfg


# -- commands ---------------------------------------------------------------------


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    cfg = dataclasses.replace(cfg, out_dir=args.out or cfg.out_dir or _default_out(f"{cfg.game}_{cfg.sampler}_{cfg.seed}"))
    cfg.resolved()
    record = run_training(cfg)
    print(f"wrote {cfg.out_dir} ({len(record.rows)} rows, {record.duration:.1f}s)")
    return EXIT_OK


def cmd_sample_error(args, extra) -> int:
    cfg = _config(args, extra)
    root = Path(args.out or cfg.out_dir or _default_out(f"sample_error_{cfg.game}_{cfg.sampler}"))
    if args.checkpoints[-1] > args.budget:
        raise UsageError("checkpoints must not exceed the budget")
    cfg.resolved()
    for seed in args.seeds:
        c = dataclasses.replace(cfg, seed=seed, out_dir=str(root / f"seed_{seed}"))
        run_sampling_error(c, args.budget, args.checkpoints)
    print(f"wrote {len(args.seeds)} runs under {root}")
    return EXIT_OK


def _run_job(kind: str, cfg: ExperimentConfig, budget: int, checkpoints: list[int]) -> str:
    if kind == "train":
        run_training(cfg)
    else:
        run_sampling_error(cfg, budget, checkpoints)
    return cfg.out_dir


def summarize(runs: dict[str, list[Path]]) -> str:
    """Mean and percentile-bootstrap CI per (sampler, step, metric) across runs."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for sampler, dirs in runs.items():
        values: dict[tuple[int, str], list[float]] = {}
        for d in dirs:
            with open(d / "metrics.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    for m in SUMMARY_METRICS:
                        if row[m] != "":
                            values.setdefault((int(row["step"]), m), []).append(float(row[m]))
        for (step_, metric) in sorted(values, key=lambda k: (k[0], SUMMARY_METRICS.index(k[1]))):
            xs = values[(step_, metric)]
            lo, hi = bootstrap_ci(xs, streams(step_)["bootstrap"])
            w.writerow([sampler, step_, metric, len(xs), repr(float(np.mean(xs))), repr(lo), repr(hi)])
    return out.getvalue()


def cmd_sweep(args, extra) -> int:
    cfg = _config(args, extra)
    samplers = [_sampler(s) for s in args.samplers.split(",") if s]
    if not samplers:
        raise UsageError("no samplers given")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if args.mode == "sample-error" and args.checkpoints[-1] > args.budget:
        raise UsageError("checkpoints must not exceed the budget")
    root = Path(args.out or cfg.out_dir or _default_out(f"sweep_{cfg.game}"))
    kind = "train" if args.mode == "train" else "sample-error"
    jobs, runs = [], {}
    for sampler in samplers:
        for seed in args.seeds:
            c = dataclasses.replace(cfg, sampler=sampler, seed=seed, out_dir=str(root / sampler / f"seed_{seed}"))
            c.resolved()
            jobs.append(c)
            runs.setdefault(sampler, []).append(Path(c.out_dir))
    if args.jobs == 1:
        for c in jobs:
            _run_job(kind, c, args.budget, args.checkpoints)
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for f in [pool.submit(_run_job, kind, c, args.budget, args.checkpoints) for c in jobs]:
                f.result()
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.csv").write_text(summarize(runs))
    print(f"wrote {len(jobs)} runs and {root / 'summary.csv'}")
    return EXIT_OK


def _read_series(path: Path, metric: str) -> list[Series]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    if header == SUMMARY_HEADER:
        groups: dict[str, list[dict]] = {}
        for r in rows:
            if r["metric"] == metric:
                groups.setdefault(r["sampler"], []).append(r)
        if not groups:
            raise UsageError(f"{path}: no rows for metric {metric!r}")
        return [
            Series(name, [float(r["step"]) for r in g], [float(r["mean"]) for r in g],
                   [float(r["ci_low"]) for r in g], [float(r["ci_high"]) for r in g])
            for name, g in groups.items()
        ]
    if metric not in header or metric in ("step", "seed"):
        raise UsageError(f"{path}: no column {metric!r}")
    pts = [(float(r["step"]), float(r[metric])) for r in rows if r[metric] != ""]
    label = path.parent.name or path.stem
    return [Series(label, [p[0] for p in pts], [p[1] for p in pts])]


def cmd_plot(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {' '.join(extra)}")
    series = []
    for name in args.inputs:
        path = Path(name)
        if not path.is_file():
            raise UsageError(f"no such file {name!r}")
        series.extend(_read_series(path, args.metric))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(line_chart(series, title=args.title, ylabel=args.metric))
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample-error": cmd_sample_error, "sweep": cmd_sweep, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        extra = _overrides(rest) if args.command != "plot" else rest
        return COMMANDS[args.command](args, extra)
    except (UsageError, InvalidArgumentError, ParseError) as exc:
        print(f"jointsampler: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"jointsampler: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
