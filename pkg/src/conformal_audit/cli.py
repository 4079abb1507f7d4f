"""Command-line surface: simulate, calibrate, predict, audit, compare.

Predictors persist to JSON files between commands so calibration and auditing
can run as separate invocations against third-party score tables. Every
output file embeds the resolved run configuration. All writes are atomic
(temp file in the target directory, then rename).

Exit codes: 0 success (warnings allowed), 1 usage error, 2 data/validation
error, 3 internal error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .calibration import (
    CalibratedPredictor,
    fit_aggregate,
    fit_group,
    fit_temperature,
    naive_predictor,
)
from .data import (
    SplitSpec,
    TableSchema,
    normalize_rows,
    parse_score_table,
    split_calibration_test,
    write_score_table,
)
from .errors import ConfigError, ToolkitError
from .metrics import CSV_COLUMNS, AuditReport, audit_csv_rows, audit_predictor
from .prediction import predict_table
from .scoring import RAPS_DEFAULT_KREG, RAPS_DEFAULT_LAM, ScoreMethod
from .synth import (
    SynthConfig,
    GroupSpec,
    fitzpatrick_config,
    generate,
    shifted_groups_config,
    single_group_config,
)

OUTDIR_ENV = "CONFORMAL_AUDIT_OUTDIR"
METHOD_CHOICES = ("naive", "aps", "raps", "gaps", "graps")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _out_dir(args) -> Path:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    env = os.environ.get(OUTDIR_ENV)
    return Path(env) if env else Path(".")


def _parse_list(text: str, cast):
    return tuple(cast(x) for x in text.split(",") if x.strip())


def _config_echo(args) -> dict:
    echo = {"version": __version__}
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        echo[key] = str(value) if isinstance(value, Path) else value
    return echo


def _load_table(args):
    schema = TableSchema(logits=getattr(args, "logits", False))
    critical = _parse_list(args.critical_classes, int) if getattr(args, "critical_classes", None) else ()
    table = parse_score_table(args.input, format=args.format, schema=schema,
                              critical_classes=critical)
    if schema.logits:
        table = normalize_rows(table, "softmax_from_logits")
    return table


def _split_spec_from(config: dict) -> SplitSpec | None:
    try:
        return SplitSpec(
            calibration_fraction=float(config["calibration_fraction"]),
            seed=int(config["split_seed"]),
            stratify_by_group=not config.get("no_stratify", False),
        )
    except (KeyError, TypeError, ValueError):
        return None


def _resolve_eval_table(args, table, predictor: CalibratedPredictor):
    """Pick the records a predictor is evaluated on.

    ``--split test`` re-derives the calibration/test partition embedded in the
    predictor's config (deterministic in its seed) and keeps the test half;
    ``--split none`` uses the whole input, for genuinely held-out files.
    """
    if args.split == "none":
        return table
    if predictor.config.get("use_all"):
        raise ConfigError(
            "this predictor was calibrated on its entire input; re-deriving a "
            "test split would overlap the calibration data. Pass --split none "
            "together with a held-out test file"
        )
    spec = _split_spec_from(predictor.config)
    if spec is None:
        raise ConfigError(
            "predictor carries no split parameters; pass --split none and "
            "provide a held-out test file"
        )
    cal, test = split_calibration_test(table, spec)
    return cal if args.split == "calibration" else test


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.config:
        config = _synth_config_from_json(Path(args.config), args)
    elif args.preset == "fitzpatrick3":
        config = fitzpatrick_config(args.n_per_group or 1500, seed=seed,
                                    t_samples=args.t_samples)
    elif args.preset == "shift10":
        config = shifted_groups_config(args.n_per_group or 2000, seed=seed,
                                       t_samples=args.t_samples)
    elif args.preset == "single10":
        config = single_group_config(args.n_per_group or 2000, seed=seed,
                                     t_samples=args.t_samples,
                                     emit_logits=args.emit_logits)
    else:
        raise ConfigError("simulate needs --preset or --config")
    table = generate(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp"
    try:
        write_score_table(table, tmp, format=args.format)
        os.replace(tmp, out)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    print(f"wrote {len(table)} records, K={table.k}, "
          f"groups={','.join(table.groups)} -> {out}")
    if config.critical_classes:
        # table files carry no critical-class metadata; remind downstream commands
        crit = ",".join(str(c) for c in sorted(config.critical_classes))
        print(f"note: pass --critical-classes {crit} to audit/compare for "
              f"rule-in/rule-out evaluation", file=sys.stderr)
    return 0


def _synth_config_from_json(path: Path, args) -> SynthConfig:
    if not path.exists():
        raise ConfigError(f"synth config not found: {path}")
    obj = json.loads(path.read_text())
    groups = tuple(
        GroupSpec(
            name=str(g["name"]),
            n_records=int(g.get("n_records", args.n_per_group or 1000)),
            class_prevalence=tuple(g["class_prevalence"]) if g.get("class_prevalence") else None,
            difficulty=float(g.get("difficulty", 1.0)),
            miscalibration=float(g.get("miscalibration", 1.0)),
        )
        for g in obj["groups"]
    )
    return SynthConfig(
        k=int(obj["k"]),
        groups=groups,
        seed=args.seed if args.seed is not None else int(obj.get("seed", 0)),
        t_samples=args.t_samples or obj.get("t_samples"),
        critical_classes=tuple(obj.get("critical_classes", ())),
        emit_logits=bool(obj.get("emit_logits", False)) or args.emit_logits,
    )


# ---------------------------------------------------------------- calibrate


def cmd_calibrate(args) -> int:
    table = _load_table(args)
    spec = SplitSpec(
        calibration_fraction=args.calibration_fraction,
        seed=args.split_seed,
        stratify_by_group=not args.no_stratify,
    )
    if args.use_all:
        cal = table
    else:
        cal, _ = split_calibration_test(table, spec)

    echo = _config_echo(args)
    temperature = None
    group_temperatures = None
    if args.fit_temperature:
        if args.temperature_per_group:
            fits = fit_temperature(cal, per_group=True)
            group_temperatures = {g: f.beta for g, f in fits.items()}
            boundary = [g for g, f in fits.items() if f.at_boundary]
            if boundary:
                print(f"warning: temperature at search boundary for groups: "
                      f"{', '.join(boundary)}", file=sys.stderr)
        else:
            fit = fit_temperature(cal)
            temperature = fit.beta
            if fit.at_boundary:
                print("warning: fitted temperature sits at the search boundary",
                      file=sys.stderr)

    methods = _parse_list(args.methods, str)
    if not methods:
        raise ConfigError("the method list must not be empty")
    unknown = [m for m in methods if m not in METHOD_CHOICES]
    if unknown:
        raise ConfigError(f"unknown methods: {', '.join(unknown)}")
    alphas = _parse_list(args.alphas, float)
    if not alphas:
        raise ConfigError("the alpha list must not be empty")
    if any(not (0.0 < a < 1.0) for a in alphas):
        raise ConfigError(f"alphas must lie in (0,1); got {args.alphas}")
    out_dir = _out_dir(args)
    written = []
    for alpha in alphas:
        for method in methods:
            if method == "naive":
                pred = naive_predictor(alpha, config=echo)
            else:
                score = (
                    ScoreMethod.raps(args.raps_lambda, args.raps_kreg)
                    if method in ("raps", "graps")
                    else ScoreMethod.aps()
                )
                fitter = fit_group if method in ("gaps", "graps") else fit_aggregate
                kwargs = dict(
                    temperature=temperature,
                    group_temperatures=group_temperatures,
                    randomize=args.randomized_aps,
                    randomize_seed=args.seed,
                    config=echo,
                )
                if method in ("gaps", "graps"):
                    kwargs["unseen_group_policy"] = args.unseen_group_policy
                pred = fitter(cal, alpha, score, **kwargs)
            for w in pred.warnings:
                print(f"warning: {w}", file=sys.stderr)
            path = out_dir / f"predictor_{method}_alpha{alpha:g}.json"
            _atomic_write_text(
                path, json.dumps(pred.to_json_dict(), indent=2, sort_keys=True) + "\n"
            )
            written.append(path)
    print(f"wrote {len(written)} predictor file(s) to {out_dir}")
    return 0


# ---------------------------------------------------------------- predict


def cmd_predict(args) -> int:
    predictor = CalibratedPredictor.load(args.predictor)
    table = _load_table(args)
    table = _resolve_eval_table(args, table, predictor)
    sets = predict_table(predictor, table)
    lines = []
    for record, s in zip(table.records, sets):
        obj = {
            "id": record.id,
            "group": record.group,
            "set": list(s.classes),
            "set_size": s.size,
            "method": s.method,
            "alpha": predictor.alpha,
        }
        if predictor.is_group_method and s.group_used is None:
            obj["fallback"] = predictor.unseen_group_policy
        lines.append(json.dumps(obj))
    out = Path(args.out)
    _atomic_write_text(out, "\n".join(lines) + "\n")
    _write_meta_sidecar(out, args)
    fallbacks = sum(1 for s in sets if predictor.is_group_method and s.group_used is None)
    if fallbacks:
        print(f"warning: {fallbacks} record(s) used the "
              f"'{predictor.unseen_group_policy}' unseen-group policy", file=sys.stderr)
    print(f"wrote {len(sets)} prediction sets -> {out}")
    return 0


# ---------------------------------------------------------------- audit


def _load_predictors(paths) -> list[CalibratedPredictor]:
    if not paths:
        raise ConfigError("no predictor files given")
    preds = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise ConfigError(f"predictor file not found: {path}")
        preds.append(CalibratedPredictor.load(path))
    return preds


def _run_audit(args, predictors) -> AuditReport:
    table = _load_table(args)
    rows = []
    for pred in predictors:
        eval_table = _resolve_eval_table(args, table, pred)
        rows.append(audit_predictor(pred, eval_table, normalize_pairs=args.normalize_pairs))
    return AuditReport(rows=rows, config_echo=_config_echo(args))


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in CSV_COLUMNS})
    return buf.getvalue()


def _write_meta_sidecar(out: Path, args) -> None:
    """Line- and column-oriented outputs cannot carry the run configuration
    inline; it goes to a sibling .meta.json instead."""
    meta = out.with_suffix(out.suffix + ".meta.json")
    _atomic_write_text(meta, json.dumps(_config_echo(args), indent=2, sort_keys=True) + "\n")


def cmd_audit(args) -> int:
    predictors = _load_predictors(args.predictors)
    report = _run_audit(args, predictors)
    out_dir = _out_dir(args)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    _atomic_write_text(
        json_path,
        json.dumps(report.to_json_dict(__version__), indent=2, sort_keys=True) + "\n",
    )
    _atomic_write_text(csv_path, _csv_text(audit_csv_rows(report.rows)))
    for row in report.rows:
        for flag in row.flags:
            print(f"note [{row.method} a={row.alpha:g}]: {flag}", file=sys.stderr)
    if args.svg:
        from .plots import uncertainty_scatter_svg

        table = _load_table(args)
        for pred in predictors:
            eval_table = _resolve_eval_table(args, table, pred)
            sets = predict_table(pred, eval_table)
            svg_path = out_dir / f"scatter_{pred.method}_alpha{pred.alpha:g}.svg"
            uncertainty_scatter_svg(sets, eval_table, svg_path,
                                    title=f"{pred.method} at alpha={pred.alpha:g}")
    print(f"wrote {json_path} and {csv_path} ({len(report.rows)} method/alpha rows)")
    return 0


def cmd_compare(args) -> int:
    predictors = _load_predictors(args.predictors)
    if args.methods:
        wanted = set(_parse_list(args.methods, str))
        available = {p.method for p in predictors}
        predictors = [p for p in predictors if p.method in wanted]
        if not predictors:
            raise ConfigError(
                f"none of the requested methods {sorted(wanted)} are among the "
                f"loaded predictors (available: {sorted(available)})"
            )
    if len({p.method for p in predictors}) < 2:
        raise ConfigError("compare needs predictors from at least 2 methods")
    report = _run_audit(args, predictors)
    out = Path(args.out)
    _atomic_write_text(out, _csv_text(audit_csv_rows(report.rows)))
    _write_meta_sidecar(out, args)
    print(f"wrote consolidated sweep ({len(report.rows)} method/alpha rows) -> {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conformal-audit",
                     description="Calibrate, apply, and audit conformal prediction sets "
                                 "on classifier score tables with group attributes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic score table")
    p.add_argument("--preset", choices=("fitzpatrick3", "shift10", "single10"))
    p.add_argument("--config", help="JSON file with a full synthetic-generator config")
    p.add_argument("--n-per-group", type=int, default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="default 0, or the config file's seed when --config is given")
    p.add_argument("--t-samples", type=int, default=None,
                   help="emit this many Monte-Carlo rows per record")
    p.add_argument("--emit-logits", action="store_true")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit predictors on the calibration split")
    _add_table_args(p)
    p.add_argument("--methods", default="aps,gaps",
                   help=f"comma list from {{{','.join(METHOD_CHOICES)}}}")
    p.add_argument("--alphas", default="0.1,0.2,0.3,0.4,0.5",
                   help="comma list of miscoverage levels")
    p.add_argument("--calibration-fraction", type=float, default=0.5)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--use-all", action="store_true",
                   help="calibrate on every input record (separate test file expected)")
    p.add_argument("--raps-lambda", type=float, default=RAPS_DEFAULT_LAM)
    p.add_argument("--raps-kreg", type=int, default=RAPS_DEFAULT_KREG)
    p.add_argument("--fit-temperature", action="store_true",
                   help="fit a probability-calibration temperature on the calibration split")
    p.add_argument("--temperature-per-group", action="store_true")
    p.add_argument("--unseen-group-policy", choices=("fallback-aggregate", "full-set"),
                   default="fallback-aggregate")
    p.add_argument("--randomized-aps", action="store_true",
                   help="randomized score variant (seeded, off by default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="emit prediction sets as JSONL")
    _add_table_args(p)
    p.add_argument("--predictor", required=True)
    p.add_argument("--split", choices=("none", "test", "calibration"), default="none",
                   help="optionally re-derive the predictor's embedded split first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("audit", help="evaluate predictors and write report files")
    _add_table_args(p)
    p.add_argument("--predictors", nargs="+", required=True)
    p.add_argument("--split", choices=("none", "test", "calibration"), default="test",
                   help="'test' re-derives the embedded split; "
                        "'none' treats the input as held out")
    p.add_argument("--normalize-pairs", action="store_true",
                   help="divide disparities by the pair count instead of the group count")
    p.add_argument("--svg", action="store_true", help="emit uncertainty scatter SVGs")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("compare", help="consolidated method sweep as one flat CSV")
    _add_table_args(p)
    p.add_argument("--predictors", nargs="+", required=True)
    p.add_argument("--methods", default=None,
                   help="restrict to a comma list of methods (default: all loaded)")
    p.add_argument("--split", choices=("none", "test", "calibration"), default="test")
    p.add_argument("--normalize-pairs", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def _add_table_args(p) -> None:
    p.add_argument("--input", required=True, help="score table file")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--logits", action="store_true",
                   help="interpret the score columns as raw logits")
    p.add_argument("--critical-classes", default=None,
                   help="comma list of class indices treated as critical")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for usage errors and --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 0
    except OSError as exc:  # unreadable input / unwritable output directory
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        import traceback

        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
