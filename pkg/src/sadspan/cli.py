"""Command-line entry point: ``sadspan <subcommand> ...``.

Exit status is 0 on success, 1 on a data error (the error class is named in
the message) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import __version__
from .catalog import demo_catalog, read_catalog
from .classifier import ForestParams, LabeledSample, load_model, save_model, train
from .errors import SadspanError
from .eval_harness import (
    cross_validate,
    format_report,
    holdout_eval,
    span_eval,
    summarize,
    write_report_csv,
    write_summary_csv,
)
from .sad_extractor import (
    DenominatorMode,
    ReachabilityMode,
    SadProfile,
    extract_profile,
    read_profiles_csv,
    write_profiles_csv,
)
from .synth_gen import (
    DEFAULT_SPECS,
    default_spec,
    group_tags,
    read_corpus_spec,
    synth_corpus,
    with_seed,
    write_corpus,
)
from .trace_model import Label, Trace, read_trace, validate_trace


class UsageError(Exception):
    pass


def write_atomic(path, data: str | bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _trace_paths(inputs: Iterable[str]) -> list[Path]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.trc")))
        else:
            paths.append(p)
    return paths


def read_manifest(path) -> dict[str, dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "app_id" not in rows[0]:
        raise UsageError(f"manifest {path} has no app_id column")
    return {row["app_id"]: row for row in rows}


def _apply_manifest(trace: Trace, manifest: Optional[dict]) -> Trace:
    if not manifest or trace.app_id not in manifest:
        return trace
    row = manifest[trace.app_id]
    label = Label.parse(row["label"]) if row.get("label") else trace.label
    year = int(row["year"]) if row.get("year") else trace.year
    return Trace(trace.app_id, label, year, trace.records)


def _extract_one(path, catalog, reachability, denominator, manifest) -> SadProfile:
    trace = _apply_manifest(read_trace(path), manifest)
    return extract_profile(trace, catalog, reachability, denominator)


def _load_catalog(path: Optional[str]):
    return read_catalog(path) if path else demo_catalog()


def _profiles(path: str) -> list[SadProfile]:
    with open(path, newline="", encoding="utf-8") as fh:
        return read_profiles_csv(fh)


def _samples(profiles: Sequence[SadProfile]) -> list[LabeledSample]:
    labeled = [p for p in profiles if p.label is not Label.UNLABELED]
    skipped = len(profiles) - len(labeled)
    if skipped:
        print(f"note: skipped {skipped} UNLABELED profile(s)", file=sys.stderr)
    return [LabeledSample.from_profile(p) for p in labeled]


def _params(args) -> ForestParams:
    return ForestParams(
        n_trees=args.trees,
        max_depth=args.max_depth,
        min_samples_split=args.min_samples_split,
        features_per_split=args.features_per_split,
        bootstrap=not args.no_bootstrap,
        seed=args.seed,
    )


# -- subcommands ----------------------------------------------------------------


def cmd_extract(args) -> int:
    catalog = _load_catalog(args.catalog)
    manifest = read_manifest(args.manifest) if args.manifest else None
    paths = _trace_paths(args.traces)
    if not paths:
        raise UsageError("no trace files given")
    work = partial(
        _extract_one,
        catalog=catalog,
        reachability=ReachabilityMode(args.reachability),
        denominator=DenominatorMode(args.denominator),
        manifest=manifest,
    )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            profiles = list(pool.map(work, paths, chunksize=32))
    else:
        profiles = [work(p) for p in paths]
    buf = io.StringIO()
    write_profiles_csv(profiles, buf)
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_train(args) -> int:
    model = train(_samples(_profiles(args.profiles)), _params(args))
    write_atomic(args.out, save_model(model))
    return 0


def cmd_predict(args) -> int:
    with open(args.model, "rb") as fh:
        model = load_model(fh.read())
    profiles: list[SadProfile] = []
    trace_inputs = []
    for item in args.inputs:
        if item.endswith(".csv"):
            profiles.extend(_profiles(item))
        else:
            trace_inputs.append(item)
    if trace_inputs:
        catalog = _load_catalog(args.catalog)
        for path in _trace_paths(trace_inputs):
            profiles.append(
                extract_profile(read_trace(path), catalog, ReachabilityMode(args.reachability),
                                DenominatorMode(args.denominator))
            )
    if not profiles:
        raise UsageError("nothing to predict")
    X = [p.features for p in profiles]
    verdicts = model.predict_many(X)
    scores = model.predict_scores(X)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["app_id", "verdict", "score"])
    for p, v, s in zip(profiles, verdicts, scores):
        writer.writerow([p.app_id, v.value, f"{s:.6f}"])
    _emit(buf.getvalue(), args.out)
    return 0


def _report(report, args) -> int:
    buf = io.StringIO()
    write_report_csv(report, buf)
    if args.out:
        write_atomic(args.out, buf.getvalue())
        print(format_report(report))
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_crossval(args) -> int:
    samples = _samples(_profiles(args.profiles))
    return _report(cross_validate(samples, _params(args), k=args.folds, seed=args.seed, tag=args.tag), args)


def cmd_holdout(args) -> int:
    samples = _samples(_profiles(args.profiles))
    report = holdout_eval(samples, _params(args), test_fraction=args.test_fraction, seed=args.seed, tag=args.tag)
    return _report(report, args)


def cmd_span(args) -> int:
    samples = _samples(_profiles(args.profiles))
    if not samples:
        raise UsageError("no labeled profiles")
    cutoff = args.train_until if args.train_until is not None else min(s.year for s in samples)
    train_set = [s for s in samples if s.year <= cutoff]
    later = sorted({s.year for s in samples if s.year > cutoff})
    if not later:
        raise UsageError(f"no profiles after year {cutoff} to test on")
    tests = [(str(y), [s for s in samples if s.year == y], y - cutoff) for y in later]
    report = span_eval(train_set, tests, _params(args), seed=args.seed, train_tag=f"<={cutoff}")
    return _report(report, args)


def cmd_summarize(args) -> int:
    profiles = _profiles(args.profiles)
    if args.manifest:
        manifest = read_manifest(args.manifest)
        tag_of = lambda p: manifest.get(p.app_id, {}).get("group_tag") or str(p.year)  # noqa: E731
    else:
        tag_of = lambda p: str(p.year)  # noqa: E731
    buf = io.StringIO()
    write_summary_csv(summarize(profiles, tag_of), buf)
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_synth(args) -> int:
    if bool(args.spec) == bool(args.default):
        raise UsageError("give exactly one of --spec or --default")
    spec = read_corpus_spec(args.spec) if args.spec else default_spec(args.default)
    if args.seed is not None:
        spec = with_seed(spec, args.seed)
    traces = synth_corpus(spec)
    write_corpus(traces, args.out, group_tags(spec))
    print(f"wrote {len(traces)} traces to {args.out}")
    return 0


def cmd_validate(args) -> int:
    problems = 0
    for item in args.files:
        path = Path(item)
        if path.suffix == ".ssl":
            try:
                catalog = read_catalog(path)
                print(f"{path}: ok ({len(catalog.sources)} sources, {len(catalog.sinks)} sinks)")
            except SadspanError as exc:
                problems += 1
                print(f"{path}: {type(exc).__name__}: {exc}")
            continue
        for trc in _trace_paths([item]):
            try:
                findings = validate_trace(read_trace(trc))
            except SadspanError as exc:
                problems += 1
                print(f"{trc}: {type(exc).__name__}: {exc}")
                continue
            problems += len(findings)
            for f in findings:
                print(f"{trc}: {f}")
            if not findings:
                print(f"{trc}: ok")
    return 1 if problems else 0


# -- parser -------------------------------------------------------------------


def _add_extraction_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--catalog", help="source/sink catalog (.ssl); default: bundled demo catalog")
    p.add_argument(
        "--reachability", choices=[m.value for m in ReachabilityMode], default=ReachabilityMode.TEMPORAL.value,
        help="vulnerability rule: call-graph reachability plus execution order (temporal) or reachability alone",
    )
    p.add_argument(
        "--denominator", choices=[m.value for m in DenominatorMode], default=DenominatorMode.LITERAL_TABLE.value,
        help="denominator of the vulnerable-instance category shares f42-f52",
    )


def _add_forest_flags(p: argparse.ArgumentParser) -> None:
    defaults = ForestParams()
    g = p.add_argument_group("forest")
    g.add_argument("--trees", type=int, default=defaults.n_trees)
    g.add_argument("--max-depth", type=int, default=None)
    g.add_argument("--min-samples-split", type=int, default=defaults.min_samples_split)
    g.add_argument("--features-per-split", type=int, default=defaults.features_per_split)
    g.add_argument("--no-bootstrap", action="store_true", help="grow every tree on the full training set")
    g.add_argument("--seed", type=int, default=0, help="master seed; same seed, same output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sadspan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("extract", help="traces + catalog -> profile CSV")
    p.add_argument("traces", nargs="+", help=".trc files or directories of them")
    p.add_argument("--out", "-o", help="output CSV (default: stdout)")
    p.add_argument("--manifest", help="CSV (app_id,label,year[,group_tag]) overriding trace headers")
    p.add_argument("--jobs", "-j", type=int, default=1, help="worker processes")
    _add_extraction_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="profile CSV -> model file")
    p.add_argument("profiles")
    p.add_argument("--out", "-o", required=True, help="model file (.sadmodel)")
    _add_forest_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="model + profiles/traces -> verdict CSV")
    p.add_argument("inputs", nargs="+", help="profile CSVs, .trc files or directories")
    p.add_argument("--model", "-m", required=True)
    p.add_argument("--out", "-o", help="output CSV (default: stdout)")
    _add_extraction_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("profiles")
    p.add_argument("--folds", "-k", type=int, default=10)
    p.add_argument("--tag", default="all", help="dataset tag used in the report")
    p.add_argument("--out", "-o", help="report CSV; the table goes to stdout")
    _add_forest_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("holdout", help="stratified train/test split")
    p.add_argument("profiles")
    p.add_argument("--test-fraction", type=float, default=0.30)
    p.add_argument("--tag", default="all")
    p.add_argument("--out", "-o")
    _add_forest_flags(p)
    p.set_defaults(func=cmd_holdout)

    p = sub.add_parser("span", help="train on early years, test on each later year")
    p.add_argument("profiles")
    p.add_argument("--train-until", type=int, help="last training year (default: earliest year present)")
    p.add_argument("--out", "-o")
    _add_forest_flags(p)
    p.set_defaults(func=cmd_span)

    p = sub.add_parser("summarize", help="per-group feature means with 95%% t intervals")
    p.add_argument("profiles")
    p.add_argument("--manifest", help="take group tags from this manifest (default: year)")
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("synth", help="generate a synthetic trace corpus")
    p.add_argument("--spec", help="corpus spec (.ini)")
    p.add_argument("--default", choices=DEFAULT_SPECS, help="use a bundled spec")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--out", "-o", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="lint .trc and .ssl files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_validate)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sadspan: error: {exc}", file=sys.stderr)
        return 2
    except (SadspanError, ValueError) as exc:
        print(f"sadspan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"sadspan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
