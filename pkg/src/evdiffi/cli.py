"""Command-line entry point: synth, extract, fit, score, explain, select, pipeline.

Exit codes: 0 success, 1 internal error, 2 input or validation error.

``--config FILE`` reads ``key = value`` lines (``#`` starts a comment); keys are
long flag names without the dashes (``trees``, ``top-k``, ...) and override
values given on the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from .diffi_global import DEFAULT_TOP_K, COUNT_SOURCES, DiffiError, GfiReport, compute_gfi, multi_run_gfi, select_features
from .diffi_local import LocalDiffiError, explain, rank_distribution
from .features import FEATURE_NAMES, FeatureError, FeatureMatrix, extract_all, read_features, write_features
from .forest import FORMAT_VERSION, ForestParams, IsolationForest, ModelFormatError, SchemaMismatchError, fit
from .ingest import IngestError, parse_sessions, write_drop_report, write_sessions
from .synth import synth_generate

logger = logging.getLogger("evdiffi")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2


class InputError(Exception):
    """Bad user input detected by the CLI itself."""


_INPUT_ERRORS = (
    InputError,
    IngestError,
    FeatureError,
    SchemaMismatchError,
    ModelFormatError,
    DiffiError,
    LocalDiffiError,
    FileNotFoundError,
    ValueError,
)


def read_config(path: Path) -> dict[str, str]:
    """Parse a ``key = value`` config file."""
    out: dict[str, str] = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if not getattr(args, "config", None):
        return
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    for key, value in read_config(Path(args.config)).items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise InputError(f"unknown config key {key!r} for command {args.command}")
        if action.type is not None:
            try:
                value = action.type(value)
            except (TypeError, ValueError) as exc:
                raise InputError(f"config key {key!r}: {exc}") from exc
        elif isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            value = value.lower() in ("1", "true", "yes", "on")
        setattr(args, key, value)


def _require_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    if not path.is_file():
        raise InputError(f"{what} not found: {path}")
    return path


def _prepare_out_dir(path: Path) -> Path:
    if path.exists() and not path.is_dir():
        raise InputError(f"output path is not a directory: {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare_out_file(path: Path) -> Path:
    if path.exists() and path.is_dir():
        raise InputError(f"output path is a directory: {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _params(args: argparse.Namespace) -> ForestParams:
    return ForestParams(
        n_trees=args.trees,
        subsample_size=args.subsample,
        max_depth=args.max_depth,
        contamination=args.contamination,
        seed=args.seed,
        bootstrap=args.bootstrap,
    )


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_json(path: Path, obj: object) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj: object) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_model(path: Path) -> IsolationForest:
    return IsolationForest.from_bytes(_require_file(path, "model file").read_bytes())


def _read_features_for(model: IsolationForest, path: Path) -> FeatureMatrix:
    return read_features(_require_file(path, "features file"), schema=model.schema)


# commands


def cmd_synth(args: argparse.Namespace) -> int:
    out = _prepare_out_dir(args.out)
    corpus = synth_generate(args.n, args.contamination, seed=args.seed)
    write_sessions(corpus.sessions, out / "sessions_meta.csv", out / "sessions_signals.csv")
    _write_text(out / "labels.csv", corpus.labels_csv())
    _emit({"sessions": len(corpus.sessions), "anomalies": int(corpus.labels.sum()), "out": str(out)})
    return EXIT_OK


def _extract(meta: Path, signals: Path, out: Path) -> tuple[FeatureMatrix, int]:
    result = parse_sessions(meta, signals)
    fm = extract_all(result.sessions)
    write_features(fm, out)
    write_drop_report(result.dropped, out.with_name(out.stem + "_drops.jsonl"))
    for d in result.dropped:
        logger.info("dropped session %s: %s", d.session_id, d.reason)
    return fm, len(result.dropped)


def cmd_extract(args: argparse.Namespace) -> int:
    meta = _require_file(args.meta, "metadata file")
    signals = _require_file(args.signals, "signals file")
    out = _prepare_out_file(args.out)
    fm, dropped = _extract(meta, signals, out)
    _emit({"sessions": fm.n, "dropped": dropped, "features": str(out)})
    if fm.n == 0:
        logger.error("no valid sessions in input")
        return EXIT_INPUT
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    features = _require_file(args.features, "features file")
    out = _prepare_out_file(args.out)
    fm = read_features(features, schema=None if args.any_schema else FEATURE_NAMES)
    forest = fit(fm, _params(args))
    blob = forest.to_bytes()
    out.write_bytes(blob)
    report = forest.classify(fm)
    _emit(
        {
            "model": str(out),
            "n": fm.n,
            "d": fm.d,
            "n_outliers": int(report.outliers.size),
            "threshold_score": forest.threshold_score,
            "checksum": json.loads(blob)["checksum"],
        }
    )
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    fm = _read_features_for(model, args.features)
    out = _prepare_out_file(args.out)
    report = model.classify(fm)
    _write_text(out, report.to_csv())
    _emit({"scores": str(out), "n": fm.n, "n_outliers": int(report.outliers.size)})
    return EXIT_OK


def _explain_global(model: IsolationForest, fm: FeatureMatrix, out: Path, runs: int, counts: str, top_k: int | None) -> GfiReport:
    if runs == 1:
        report, _ = compute_gfi(model, fm, counts=counts)
    else:
        report = multi_run_gfi(fm, model.params, runs, counts=counts, first=model)
    _write_text(out / "gfi.csv", report.to_csv())
    if top_k is not None:
        _write_json(out / "selection.json", select_features(report, top_k).to_json_obj())
    return report


def _explain_local(model: IsolationForest, fm: FeatureMatrix, out: Path, all_points: bool) -> int:
    explanations = explain(model, fm, all_points=all_points)
    _write_text(out / "explanations.jsonl", "".join(e.to_json() + "\n" for e in explanations))
    if explanations:
        _write_text(out / "rank_distribution.csv", rank_distribution(explanations).to_csv())
    else:
        logger.warning("no points to explain; rank distribution not written")
    return len(explanations)


def cmd_explain(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    fm = _read_features_for(model, args.features)
    out = _prepare_out_dir(args.out)
    if args.mode == "global":
        report = _explain_global(model, fm, out, args.runs, args.counts, args.top_k)
        _emit({"gfi": str(out / "gfi.csv"), "runs": report.runs, "top": model.schema[report.ranking[0]]})
    else:
        n = _explain_local(model, fm, out, args.all_points)
        _emit({"explanations": str(out / "explanations.jsonl"), "explained": n})
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    gfi = _require_file(args.gfi, "GFI file")
    out = _prepare_out_file(args.out)
    report = GfiReport.from_csv(gfi.read_text(encoding="utf-8"))
    selection = select_features(report, args.top_k)
    _write_json(out, selection.to_json_obj())
    _emit({"selection": str(out), "kept": selection.kept_names()})
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    """extract -> fit -> score -> global DIFFI -> select top-k -> refit -> score + local DIFFI."""
    if args.features is None and (args.meta is None or args.signals is None):
        raise InputError("pipeline needs --features or both --meta and --signals")
    if args.features is not None:
        _require_file(args.features, "features file")
    else:
        _require_file(args.meta, "metadata file")
        _require_file(args.signals, "signals file")
    out = _prepare_out_dir(args.out)

    if args.features is not None:
        fm = read_features(args.features)
    else:
        fm, _ = _extract(args.meta, args.signals, out / "features.csv")
        if fm.n == 0:
            logger.error("no valid sessions in input")
            return EXIT_INPUT
    if not 1 <= args.top_k <= fm.d:
        raise InputError(f"--top-k must lie in [1, {fm.d}], got {args.top_k}")

    params = _params(args)
    forest = fit(fm, params)
    (out / "model.json").write_bytes(forest.to_bytes())
    _write_text(out / "scores.csv", forest.classify(fm).to_csv())
    report = _explain_global(forest, fm, out, args.runs, args.counts, args.top_k)
    selection = select_features(report, args.top_k)

    reduced = fm.select(selection.kept)
    write_features(reduced, out / "features_reduced.csv")
    reduced_forest = fit(reduced, params)
    (out / "model_reduced.json").write_bytes(reduced_forest.to_bytes())
    reduced_report = reduced_forest.classify(reduced)
    _write_text(out / "scores_reduced.csv", reduced_report.to_csv())
    red_dir = _prepare_out_dir(out / "reduced")
    red_gfi, _ = compute_gfi(reduced_forest, reduced, reduced_report, counts=args.counts)
    _write_text(red_dir / "gfi.csv", red_gfi.to_csv())
    n_local = _explain_local(reduced_forest, reduced, red_dir, args.all_points)
    _emit(
        {
            "out": str(out),
            "sessions": fm.n,
            "kept": selection.kept_names(),
            "n_outliers": int(reduced_report.outliers.size),
            "explained": n_local,
        }
    )
    return EXIT_OK


def _add_forest_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trees", type=int, default=100, help="number of isolation trees (default: 100)")
    p.add_argument("--subsample", type=int, default=256, help="points per tree, clamped to n (default: 256)")
    p.add_argument("--max-depth", type=int, default=None, help="depth limit (default: ceil(log2 subsample))")
    p.add_argument("--contamination", type=float, default=0.05, help="expected outlier fraction in (0, 0.5] (default: 0.05)")
    p.add_argument("--seed", type=int, default=0, help="master random seed (default: 0)")
    p.add_argument("--bootstrap", action="store_true", help="sample each tree's points with replacement")


def _add_explain_flags(p: argparse.ArgumentParser, top_k_default: int | None) -> None:
    p.add_argument("--runs", type=int, default=5, help="forests averaged for global importances (default: 5)")
    p.add_argument(
        "--top-k",
        type=int,
        default=top_k_default,
        help=f"features kept by selection (default: {top_k_default})",
    )
    p.add_argument(
        "--counts",
        choices=COUNT_SOURCES,
        default=COUNT_SOURCES[0],
        help="node counts feeding the imbalance coefficient (default: evaluation)",
    )
    p.add_argument("--all-points", action="store_true", help="explain every point, not only predicted outliers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evdiffi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"evdiffi {__version__} (model format {FORMAT_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic session corpus with planted anomalies")
    p.add_argument("--n", type=int, default=1000, help="number of sessions (default: 1000)")
    p.add_argument("--contamination", type=float, default=0.05, help="fraction of anomalous sessions (default: 0.05)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="sessions -> features.csv")
    p.add_argument("--meta", type=Path, required=True)
    p.add_argument("--signals", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="features.csv path")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit", help="train a model on features.csv")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="model file path")
    p.add_argument(
        "--any-schema",
        action="store_true",
        help="accept any feature columns instead of the 22 session features",
    )
    _add_forest_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score features with a model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="scores.csv path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("explain", help="global or local DIFFI explanations")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--mode", choices=("global", "local"), default="global")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_explain_flags(p, None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("select", help="keep the top-k features of a gfi.csv")
    p.add_argument("--gfi", type=Path, required=True)
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--out", type=Path, required=True, help="selection.json path")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("pipeline", help="extract, fit, explain, select and refit in one go")
    p.add_argument("--meta", type=Path)
    p.add_argument("--signals", type=Path)
    p.add_argument("--features", type=Path, help="use an existing features.csv instead of session files")
    p.add_argument("--out", type=Path, help="output directory")
    _add_forest_flags(p)
    _add_explain_flags(p, DEFAULT_TOP_K)
    p.set_defaults(func=cmd_pipeline)

    for p in sub.choices.values():
        p.add_argument("--config", type=Path, help="key = value file overriding flags")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _apply_config(args, parser)
        if getattr(args, "out", "unset") is None:
            raise InputError("--out is required")
        return args.func(args)
    except _INPUT_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
