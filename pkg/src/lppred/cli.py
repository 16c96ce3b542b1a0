"""Command-line entry point for the learner performance prediction suite.

Subcommands: ingest, summarize, cv, fit, predict, tune, simulate, llm-run,
report. Every command is a pure function of its flags, input files, and the
root seed; artifacts are written under the output directory as JSON plus a
plain-text rendering. Exit codes: 0 success, 1 usage error, 2 data error,
3 model error, 4 client/transport error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bkt import BktParams
from .data import DataError, Dataset, parse_dataset, summarize, write_dataset
from .gbt import GbtConfig
from .llm import (
    ClientError,
    HttpChatClient,
    LlmPredictor,
    MockHeuristicClient,
    llm_predict_pipeline,
    select_method,
)
from .metrics import CvReport, FoldFitError, cross_validate, report_table, reports_to_json
from .registry import ALL_MODELS, LOCAL_MODELS, make_model
from .seeds import derive_seed
from .simulate import GENERATORS, SimSpec, simulate
from .tuner import (
    CyclingProposalClient,
    Grid,
    default_grid,
    format_summary_rows,
    grid_search,
    llm_tuning_loop,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MODEL = 3
EXIT_CLIENT = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise UsageError(message)


def _inject_config_args(argv: list[str]) -> list[str]:
    """Expand `--config FILE` into flags placed before the user's own flags.

    The file holds `key = value` lines mirroring long option names; because
    injected flags precede explicit ones, explicit flags win on conflict.
    """
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    if at + 1 >= len(argv):
        raise UsageError("--config requires a file path")
    path = argv[at + 1]
    rest = argv[:at] + argv[at + 2 :]
    if not rest:
        raise UsageError("--config given without a subcommand")
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    injected: list[str] = []
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line not key = value: {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            injected.append(flag)
        else:
            injected.extend([flag, value])
    return [rest[0]] + injected + rest[1:]


def _add_common(p: _Parser, data: bool = True):
    if data:
        p.add_argument("--data", required=True, help="interaction-record CSV file")
        p.add_argument("--meta", help="optional lesson metadata JSON file")
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--out", default="out", help="output directory (default ./out)")
    p.add_argument(
        "--workers",
        type=int,
        default=os.cpu_count() or 1,
        help="worker processes for parallel sections",
    )


def _add_client_flags(p: _Parser):
    p.add_argument("--mock", action="store_true", help="use the offline heuristic client")
    p.add_argument("--endpoint", help="chat-completion HTTP endpoint URL")
    p.add_argument("--chat-model", default="gpt-4", help="model name sent to the endpoint")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--retries", type=int, default=2)


def _add_gbt_flags(p: _Parser):
    p.add_argument("--n-trees", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--subsample", type=float, default=None)
    p.add_argument("--colsample-bytree", type=float, default=None)
    p.add_argument("--gbt-gamma", type=float, default=None)
    p.add_argument("--min-child-weight", type=float, default=None)


def _gbt_config(args) -> GbtConfig:
    base = GbtConfig()
    fields = {
        "n_trees": args.n_trees,
        "learning_rate": args.learning_rate,
        "max_depth": args.max_depth,
        "subsample": args.subsample,
        "colsample_bytree": args.colsample_bytree,
        "gamma": args.gbt_gamma,
        "min_child_weight": args.min_child_weight,
    }
    return GbtConfig(**{k: (v if v is not None else getattr(base, k)) for k, v in fields.items()})


def _build_client(args):
    if args.mock:
        return MockHeuristicClient()
    if args.endpoint:
        return HttpChatClient(
            endpoint=args.endpoint,
            model=args.chat_model,
            temperature=args.temperature,
            timeout=args.timeout,
            max_retries=args.retries,
        )
    raise UsageError("llm mode needs --endpoint or --mock")


def _model_overrides(name: str, args) -> dict:
    if name == "gbt":
        return {"config": _gbt_config(args)}
    if name == "bkt":
        return {"individualized": args.individualized}
    if name == "pfa":
        return {"l2": args.l2}
    if name == "tensor":
        return {"rank": args.rank, "ridge": args.ridge}
    if name == "sparfa":
        return {"rank_candidates": tuple(int(r) for r in args.ranks.split(","))}
    return {}


def _load_dataset(args) -> Dataset:
    return parse_dataset(args.data, meta_path=args.meta)


def _outdir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, content: str, echo: bool = True):
    path.write_text(content, encoding="utf-8")
    if echo:
        print(f"wrote {path}")


def _make_factory(name: str, args, ds: Dataset):
    """Factory of per-fold predictors; llm variants wrap a configured client."""
    if name in LOCAL_MODELS:
        overrides = _model_overrides(name, args)
        return lambda fold_seed: make_model(name, seed=fold_seed, **overrides)
    client = _build_client(args)
    meta = ds.meta if ds.meta.questions else None
    if name == "llm":
        return lambda fold_seed: LlmPredictor(client, meta=meta)
    if name == "llm-gbt":
        chosen = select_method(client, ds, meta)
        print(f"client selected method: {chosen}")
        overrides = _model_overrides(chosen, args) if chosen in LOCAL_MODELS else {}
        return lambda fold_seed: make_model(chosen, seed=fold_seed, **overrides)
    raise UsageError(f"unknown model {name!r}; choose from {', '.join(ALL_MODELS)}")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    ds = _load_dataset(args)
    s = summarize(ds)
    print(
        f"ok: {ds.n_records} records ({len(ds.labeled_positions())} labeled), "
        f"{s.meta.n_learners} learners, {s.meta.n_questions} questions, "
        f"max attempt {s.meta.max_attempt}"
    )
    return EXIT_OK


def cmd_summarize(args) -> int:
    ds = _load_dataset(args)
    s = summarize(ds)
    out = _outdir(args)
    _write(out / "summary.json", json.dumps(s.to_dict(), indent=2))
    print(s.to_text())
    return EXIT_OK


def cmd_cv(args) -> int:
    ds = _load_dataset(args)
    factory = _make_factory(args.model, args, ds)
    report = cross_validate(
        factory,
        ds,
        k=args.k,
        seed=args.seed,
        model_name=args.model,
        dataset_name=ds.meta.lesson_name or Path(args.data).stem,
    )
    out = _outdir(args)
    _write(out / "report.json", reports_to_json([report]))
    _write(out / "report.txt", report_table([report]))
    print(report_table([report]))
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.model not in LOCAL_MODELS:
        raise UsageError(f"fit supports local models only: {', '.join(LOCAL_MODELS)}")
    ds = _load_dataset(args)
    model = make_model(
        args.model, seed=derive_seed(args.seed, "fit", args.model), **_model_overrides(args.model, args)
    )
    model.fit(ds.subset(ds.labeled_positions()))
    out = _outdir(args)
    _write(out / f"{args.model}-model.json", json.dumps(model.export_json(), indent=2))
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.model not in LOCAL_MODELS:
        raise UsageError(f"predict supports local models only: {', '.join(LOCAL_MODELS)}")
    ds = _load_dataset(args)
    labeled = ds.subset(ds.labeled_positions())
    if args.targets:
        targets = parse_dataset(args.targets)
        rows = [r.key() for r in targets.records]
    else:
        rows = [ds.records[i].key() for i in ds.unlabeled_positions()]
        if not rows:
            raise DataError("no rows to predict: data has no unlabeled rows and no --targets given")
    model = make_model(
        args.model, seed=derive_seed(args.seed, "fit", args.model), **_model_overrides(args.model, args)
    )
    model.fit(labeled)
    preds = model.predict(rows)
    out = _outdir(args)
    lines = ["learner_id,question_id,attempt,prediction"]
    for (lid, qid, attempt), p in zip(rows, preds):
        lines.append(f"{lid},{qid},{attempt},{p:.6f}")
    _write(out / "predictions.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_tune(args) -> int:
    if args.model != "gbt":
        raise UsageError("tuning targets the gbt model")
    ds = _load_dataset(args)
    if args.grid == "default":
        grid = default_grid()
    else:
        grid = Grid.from_json(Path(args.grid).read_text(encoding="utf-8"))
    if args.method == "grid":
        report = grid_search(ds, grid, k=args.k, seed=args.seed, workers=args.workers)
    else:
        client = CyclingProposalClient() if args.mock else _build_client(args)
        report = llm_tuning_loop(ds, client, budget=args.budget, k=args.k, seed=args.seed, grid=grid)
    out = _outdir(args)
    _write(out / "tune.json", report.to_json())
    text = report.summary_text() + f"\nbest: {report.best.config.to_dict()} -> {report.best.mean_rmse:.4f}"
    _write(out / "tune.txt", text)
    print(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        n_l, n_q, n_a = (int(part) for part in args.shape.lower().split("x"))
    except ValueError:
        raise UsageError(f"--shape must look like 66x8x9, got {args.shape!r}") from None
    bkt = None
    if args.bkt_params:
        values = json.loads(args.bkt_params)
        bkt = BktParams(**values)
    spec = SimSpec(
        n_learners=n_l,
        n_questions=n_q,
        max_attempt=n_a,
        generator=args.generator,
        seed=args.seed,
        bkt=bkt,
        rank=args.rank,
        mask_fraction=args.mask,
        stop_on_correct=args.stop_on_correct,
    )
    result = simulate(spec)
    out = _outdir(args)
    write_dataset(result.dataset, out / "data.csv")
    print(f"wrote {out / 'data.csv'}")
    _write(out / "truth.json", result.truth_json())
    s = summarize(result.dataset)
    print(
        f"{spec.generator}: {result.dataset.n_records} records, "
        f"{s.meta.n_learners}x{s.meta.n_questions}x{s.meta.max_attempt}"
    )
    return EXIT_OK


def cmd_llm_run(args) -> int:
    train = parse_dataset(args.train, meta_path=args.meta)
    test = parse_dataset(args.test)
    client = _build_client(args)
    meta = train.meta if train.meta.questions else None
    result = llm_predict_pipeline(
        train,
        test,
        client,
        repeats=args.repeats,
        meta=meta,
        rows_per_chunk=args.rows_per_chunk,
        concurrency=args.workers,
    )
    out = _outdir(args)
    payload = {
        "repeats": result.repeats,
        "coverage": result.coverage,
        "imputed_per_run": result.imputed_per_run,
        "run_rmse": result.run_rmse,
        "mean_rmse": result.mean_rmse,
        "std_error": result.std_error,
    }
    _write(out / "report.json", json.dumps(payload, indent=2))
    _write(out / "script.txt", result.script_text)
    lines = ["learner_id,question_id,attempt,prediction"]
    for (lid, qid, attempt), p in zip(result.test_keys, result.mean_predictions):
        lines.append(f"{lid},{qid},{attempt},{p:.6f}")
    _write(out / "predictions.csv", "\n".join(lines) + "\n")
    if result.mean_rmse is not None:
        print(f"mean RMSE over {result.repeats} runs: {result.mean_rmse:.4f} "
              f"(SE {result.std_error:.4f}, coverage {result.coverage:.3f})")
    else:
        print(f"predictions written (no test labels; coverage {result.coverage:.3f})")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        for model_name, value in payload.items():
            if isinstance(value, dict) and "fold_rmse" in value:
                reports.append(
                    CvReport(
                        model_name=model_name,
                        fold_rmse=tuple(value["fold_rmse"]),
                        dataset=value.get("dataset", "") or Path(path).stem,
                    )
                )
            else:  # nested: model -> dataset -> record
                for dataset, record in value.items():
                    reports.append(
                        CvReport(model_name=model_name, fold_rmse=tuple(record["fold_rmse"]), dataset=dataset)
                    )
    if not reports:
        raise DataError("no cross-validation reports found in the given files")
    out = _outdir(args)
    table = report_table(reports)
    _write(out / "report.txt", table)
    _write(out / "report.json", reports_to_json(reports))
    print(table)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="lppred", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a data file", parents=[], add_help=True)
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("summarize", help="descriptive statistics")
    _add_common(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("cv", help="k-fold cross-validated RMSE for one model")
    _add_common(p)
    p.add_argument("--model", required=True, choices=ALL_MODELS)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--individualized", action="store_true", help="bkt: per-learner start offsets")
    p.add_argument("--l2", type=float, default=0.1, help="pfa: regularization strength")
    p.add_argument("--rank", type=int, default=3, help="tensor: factor rank")
    p.add_argument("--ridge", type=float, default=0.1, help="tensor: ridge strength")
    p.add_argument("--ranks", default="1,2,3,4", help="sparfa: comma-separated rank candidates")
    _add_gbt_flags(p)
    _add_client_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("fit", help="fit a local model on all labeled rows, export JSON")
    _add_common(p)
    p.add_argument("--model", required=True, choices=LOCAL_MODELS)
    p.add_argument("--individualized", action="store_true")
    p.add_argument("--l2", type=float, default=0.1)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--ridge", type=float, default=0.1)
    p.add_argument("--ranks", default="1,2,3,4")
    _add_gbt_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="fit on labeled rows, predict targets")
    _add_common(p)
    p.add_argument("--model", required=True, choices=LOCAL_MODELS)
    p.add_argument("--targets", help="CSV of rows to predict (defaults to unlabeled rows of --data)")
    p.add_argument("--individualized", action="store_true")
    p.add_argument("--l2", type=float, default=0.1)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--ridge", type=float, default=0.1)
    p.add_argument("--ranks", default="1,2,3,4")
    _add_gbt_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("tune", help="hyperparameter search for gbt")
    _add_common(p)
    p.add_argument("--model", default="gbt")
    p.add_argument("--method", choices=("grid", "llm"), default="grid")
    p.add_argument("--grid", default="default", help="'default' or a JSON grid file")
    p.add_argument("--budget", type=int, default=10, help="llm method: evaluations")
    p.add_argument("--k", type=int, default=5)
    _add_client_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    _add_common(p, data=False)
    p.add_argument("--generator", choices=GENERATORS, default="bkt-process")
    p.add_argument("--shape", required=True, help="learners x questions x attempts, e.g. 66x8x9")
    p.add_argument("--bkt-params", help='JSON like {"p_init":0.3,...} for bkt-process')
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--mask", type=float, default=0.0, help="fraction of cells left unlabeled")
    p.add_argument("--stop-on-correct", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("llm-run", help="encode -> client -> decode prediction pipeline")
    _add_common(p, data=False)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--meta")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--rows-per-chunk", type=int, default=0)
    _add_client_flags(p)
    p.set_defaults(func=cmd_llm_run)

    p = sub.add_parser("report", help="merge cv report JSONs into one comparison table")
    _add_common(p, data=False)
    p.add_argument("--inputs", nargs="+", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _inject_config_args(argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ClientError as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    except (FoldFitError, ValueError, RuntimeError, KeyError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
