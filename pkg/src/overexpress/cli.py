"""Command-line batch jobs.

Each subcommand writes its results (CSV plus JSON/JSON lines) and a
``manifest.json`` into ``--out``. ``overexpress replay <manifest>`` re-runs the
recorded command and reproduces the result files byte for byte.

Exit codes: 0 success, 2 usage / schema / protocol error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .detectors import KnnConfig, ProbeConfig
from .evaluation import EvalResult, mean_over_runs
from .experiments import (
    RECORD_COLUMNS,
    ParseError,
    ProtocolConfig,
    ProtocolError,
    SchemaError,
    dimensionality_sweep,
    guided_run,
    load_csv,
    make_attribute_dataset,
    make_toy_dataset,
    rank_features,
    result_record,
    run_protocol,
    write_csv,
    write_records,
)
from .stats_core import RandomStream
from .toy_model import (
    InsufficientDataError,
    RateMethod,
    ThresholdSpec,
    ToyModelParams,
    decay_curve,
    empirical_rates,
    fit_decay_exponent,
    fpr_exact,
    tpr_exact,
)

SEED_ENV = "OVEREXPRESS_SEED"
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(ValueError):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def parse_dims(text: str) -> list[int]:
    """``"64..8192"`` (doubling from lo up to hi) or ``"2,8,32"``."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
        else:
            dims = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse dimension grid {text!r}") from None
    if ".." in text:
        if lo < 1 or hi < lo:
            raise UsageError(f"bad dimension range {text!r}: need 1 <= lo <= hi")
        dims = []
        d = lo
        while d <= hi:
            dims.append(d)
            d *= 2
    if not dims or any(d < 1 for d in dims) or any(b <= a for a, b in zip(dims, dims[1:])):
        raise UsageError(f"dimension grid must be positive and strictly increasing: {text!r}")
    return dims


def _split_list(text):
    return [v.strip() for v in text.split(",") if v.strip()] if text else []


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(rows, columns, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -- subcommands ------------------------------------------------------------------

THEORY_COLUMNS = ["d", "y", "delta", "method", "fpr", "tpr", "gap", "flags"]


def cmd_theory(args, out: Path) -> dict:
    dims = parse_dims(args.dims)
    methods = [RateMethod(m) for m in _split_list(args.method)]
    spec = ThresholdSpec(args.y)
    rows, slopes = [], {}
    for method in methods:
        curve = decay_curve(dims, spec, args.delta, method, n=args.n, stream=RandomStream(args.seed))
        rows.extend(p.to_record() for p in curve)
        try:
            slopes[method.value] = fit_decay_exponent(curve)
        except InsufficientDataError:
            slopes[method.value] = None
    _write_rows(rows, THEORY_COLUMNS, out / "theory.csv")
    _dump_json({"points": rows, "decay_exponent": slopes}, out / "theory.json")
    return {"seeds": [args.seed], "outputs": ["theory.csv", "theory.json"]}


SIMULATE_COLUMNS = [
    "d", "y", "delta", "pi", "n", "seed",
    "fpr_empirical", "fpr_se", "fpr_exact",
    "tpr_empirical", "tpr_se", "tpr_exact",
    "gap_empirical", "gap_exact", "n_normal", "n_anomalous", "flags",
]


def cmd_simulate(args, out: Path) -> dict:
    params = ToyModelParams(args.d, args.delta, args.pi, args.seed)
    spec = ThresholdSpec(args.y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        point = empirical_rates(params, spec, args.n, RandomStream(args.seed))
    fe, te = fpr_exact(args.d, spec), tpr_exact(args.d, spec, args.delta)
    row = {
        "d": args.d, "y": args.y, "delta": args.delta, "pi": args.pi, "n": args.n, "seed": args.seed,
        "fpr_empirical": point.fpr, "fpr_se": point.fpr_se, "fpr_exact": fe,
        "tpr_empirical": point.tpr, "tpr_se": point.tpr_se, "tpr_exact": te,
        "gap_empirical": point.gap, "gap_exact": te - fe,
        "n_normal": point.n_normal, "n_anomalous": point.n_anomalous,
        "flags": ";".join(point.flags),
    }
    _write_rows([row], SIMULATE_COLUMNS, out / "simulate.csv")
    _dump_json(row, out / "simulate.json")
    return {"seeds": [args.seed], "outputs": ["simulate.csv", "simulate.json"]}


def _load(args):
    return load_csv(args.dataset, args.label_column, _split_list(args.attribute_columns))


def _protocol(args, value=None, setting=None):
    return ProtocolConfig(
        setting=setting or args.setting,
        attribute=args.attribute,
        designated_value=value if value is not None else args.value,
        split_ratio=args.split_ratio,
        seed=args.seed,
        standardize=not args.no_standardize,
    )


def _knn(args):
    return KnnConfig(args.k, args.aggregation)


def _probe(args):
    return ProbeConfig(args.epochs, args.lr, args.momentum, args.batch_size)


def cmd_sweep(args, out: Path) -> dict:
    ds = _load(args)
    cfg = _protocol(args)
    knn, probe = _knn(args), _probe(args)
    order, single_auc = rank_features(ds, cfg, knn, return_auc=True)
    sweep = dimensionality_sweep(ds, cfg, knn, probe, order=order)
    records = []
    for d, (ka, pa) in enumerate(zip(sweep.knn_auc, sweep.probe_auc), start=1):
        for scorer, auc in (("knn", ka), ("probe", pa)):
            res = EvalResult(auc, sweep.n_normal, sweep.n_anomalous)
            records.append(result_record("sweep", ds, cfg, scorer, d, res))
    write_records(records, out / "sweep")
    _dump_json({"feature_order": order, "single_feature_knn_auc": single_auc}, out / "feature_order.json")
    return {
        "seeds": [args.seed],
        "dataset_digests": {str(args.dataset): ds.source_digest},
        "outputs": ["sweep.csv", "sweep.jsonl", "feature_order.json"],
    }


def cmd_bench(args, out: Path) -> dict:
    if args.attribute is None:
        raise UsageError("bench needs --attribute")
    ds = _load(args)
    if args.attribute not in ds.attribute_columns:
        raise SchemaError(f"attribute {args.attribute!r} not in dataset (declare it with --attribute-columns)")
    values = _split_list(args.values)
    if not values:
        values = sorted(set(ds.attribute_columns[args.attribute].tolist()))[:3]
    knn, probe = _knn(args), _probe(args)
    records, ok = [], {"knn": [], "probe": []}
    d = len(ds.feature_names)
    for value in values:
        cfg = _protocol(args, value=value)
        try:
            results = run_protocol(ds, cfg, knn, probe)
        except (ProtocolError, SchemaError) as exc:
            for scorer in ("knn", "probe"):
                rec = {k: "" for k in ("auc", "n_normal", "n_anomalous")}
                rec.update(
                    experiment_id="bench", dataset_digest=ds.source_digest, setting=cfg.setting,
                    attribute=cfg.attribute, value=value, scorer=scorer, d=d, seed=cfg.seed, error=str(exc),
                )
                records.append(rec)
            continue
        for scorer, res in zip(("knn", "probe"), results):
            records.append(result_record("bench", ds, cfg, scorer, d, res) | {"error": ""})
            ok[scorer].append(res)
    if not ok["knn"]:
        write_records(records, out / "bench", columns=(*RECORD_COLUMNS, "error"))
        raise ProtocolError("every requested value failed; see bench.csv")
    mean_cfg = _protocol(args, value="mean")
    for scorer in ("knn", "probe"):
        records.append(result_record("bench", ds, mean_cfg, scorer, d, mean_over_runs(ok[scorer])) | {"error": ""})
    write_records(records, out / "bench", columns=(*RECORD_COLUMNS, "error"))
    return {
        "seeds": [args.seed],
        "dataset_digests": {str(args.dataset): ds.source_digest},
        "outputs": ["bench.csv", "bench.jsonl"],
    }


def cmd_guided(args, out: Path) -> dict:
    ds = _load(args)
    cfg = _protocol(args)
    knn = _knn(args)
    sets = [_split_list(g) for g in args.guidance]
    if any(not s for s in sets):
        raise UsageError("empty guidance feature list")
    for s in sets:
        ds.columns(s)  # raises SchemaError on unknown names
    unguided = guided_run(ds, cfg, ds.feature_names, knn)
    records = [result_record("unguided", ds, cfg, "knn", len(ds.feature_names), unguided)]
    for s in sets:
        res = guided_run(ds, cfg, s, knn)
        records.append(result_record("guided:" + "+".join(s), ds, cfg, "knn", len(s), res))
    write_records(records, out / "guided")
    return {
        "seeds": [args.seed],
        "dataset_digests": {str(args.dataset): ds.source_digest},
        "outputs": ["guided.csv", "guided.jsonl"],
    }


def cmd_make_fixture(args, out: Path) -> dict:
    if args.kind == "toy":
        ds = make_toy_dataset(args.n, n_noise=args.n_noise, delta=args.delta, seed=args.seed)
    else:
        ds = make_attribute_dataset(args.n, n_noise=args.n_noise, seed=args.seed)
    name = f"{args.kind}_fixture.csv"
    write_csv(ds, out / name)
    return {"seeds": [args.seed], "outputs": [name]}


COMMANDS = {
    "theory": cmd_theory,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "guided": cmd_guided,
    "make-fixture": cmd_make_fixture,
}


# -- argument parsing -------------------------------------------------------------

def _add_protocol_flags(p, seed_default):
    p.add_argument("dataset", type=Path, help="CSV file with a header row")
    p.add_argument("--label-column", default="label")
    p.add_argument("--attribute-columns", default="", help="comma-separated categorical columns")
    p.add_argument("--setting", choices=["label", "single_value", "multi_value"], default="label")
    p.add_argument("--attribute", default=None)
    p.add_argument("--value", default=None, help="designated attribute value")
    p.add_argument("--split-ratio", type=float, default=0.85)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--aggregation", choices=["mean_of_k", "kth_distance"], default="mean_of_k")


def _add_probe_flags(p):
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=None)


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overexpress", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("theory", help="exact / CLT / bound rate curves over d")
    p.add_argument("--dims", default="64..8192", help="'lo..hi' doubling range or comma list")
    p.add_argument("--y", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--method", default="exact", help="comma list of exact, clt, asymptotic_bound, monte_carlo")
    p.add_argument("--n", type=int, default=100_000, help="samples per d for monte_carlo")
    p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("simulate", help="Monte Carlo rates next to exact rates")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--y", type=float, default=1.0)
    p.add_argument("--pi", type=float, default=0.5)
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("sweep", help="AUC vs number of ranked features")
    _add_protocol_flags(p, seed_default)
    _add_probe_flags(p)

    p = sub.add_parser("bench", help="single-/multi-value protocol over attribute values")
    _add_protocol_flags(p, seed_default)
    _add_probe_flags(p)
    p.add_argument("--values", default="", help="comma list; default: first three sorted values")

    p = sub.add_parser("guided", help="kNN restricted to guidance features vs all features")
    _add_protocol_flags(p, seed_default)
    p.add_argument("--guidance", action="append", required=True, help="comma list; repeat to compare sets")

    p = sub.add_parser("make-fixture", help="write a synthetic CSV fixture")
    p.add_argument("kind", choices=["toy", "attribute"])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-noise", type=int, default=15)
    p.add_argument("--delta", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)

    for name, sp in sub.choices.items():
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
    return parser


def _strip_out(argv):
    clean, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        clean.append(tok)
    return clean


def _run(argv, parser) -> int:
    args = parser.parse_args(argv)
    out = args.out
    if args.command == "replay":
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        replay_argv = list(manifest["argv"])
        if SEED_ENV in manifest.get("environment", {}):
            os.environ[SEED_ENV] = manifest["environment"][SEED_ENV]
        return _run([*replay_argv, "--out", str(out)], build_parser(_default_seed()))

    out.mkdir(parents=True, exist_ok=True)
    info = COMMANDS[args.command](args, out)
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "out"}
    manifest = {
        "command": args.command,
        "argv": _strip_out(argv),
        "parameters": params,
        "seeds": info.get("seeds", []),
        "dataset_digests": info.get("dataset_digests", {}),
        "outputs": info.get("outputs", []),
        "environment": {SEED_ENV: os.environ[SEED_ENV]} if SEED_ENV in os.environ else {},
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _dump_json(manifest, out / "manifest.json")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser(_default_seed())
        return _run(argv, parser)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (UsageError, SchemaError, ParseError, ProtocolError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
