"""Batch command-line front door for every stage and report.

Each command reads flags, runs, writes its files, and prints one
machine-readable result (JSON or CSV) on stdout; progress notes go to the
error stream and --quiet silences them. Exit codes: 0 success, 2 usage or
configuration error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .data import Column, ColumnSchema, apply_preprocess, fit_apply_preprocess, generate_synthetic, load_csv, save_csv
from .distill import TeacherBundle, build_distill_set, distill_student, split_distill_set, teacher_predict
from .ensemble import build_meta_dataset, fit_ensemble, oof_from_csv, oof_predictions, oof_to_csv
from .errors import ConfigError, DataError, PipelineError, TrainingError
from .metrics import auc, evaluate_scores, psi_drift, report_to_json
from .meta_model import train_meta
from .pipeline import (
    PipelineConfig,
    ablation_to_csv,
    default_base_specs,
    load_config,
    manifest_to_payload,
    run_ablation,
    run_pipeline,
    with_seed,
    write_ablation_table,
)
from .serialize import (
    TEACHER_FORMAT,
    load_model,
    load_preprocessor,
    load_teacher,
    save_model,
    save_preprocessor,
    save_teacher,
)

_KIND_BY_SUFFIX = {"cnt": "count", "bin": "binary", "num": "numeric"}


def _note(args, message: str) -> None:
    if not getattr(args, "quiet", False):
        print(message, file=sys.stderr)


def _emit(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


def _seeded_config(args) -> PipelineConfig:
    config = load_config(args.config)
    seed = getattr(args, "seed", None)
    if seed is not None:
        config = with_seed(config, seed)
    return config


def _infer_schema(path) -> ColumnSchema:
    """Schema from a CSV header alone; column kinds come from the name
    suffix the synthetic generator uses, anything else counts as numeric."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise DataError(f"{path}: empty file")
    id_column = "id" if "id" in header else header[0]
    names = [c for c in header if c not in (id_column, "label")]
    if not names:
        raise DataError(f"{path}: no feature columns in header")
    columns = tuple(Column(n, _KIND_BY_SUFFIX.get(n.rsplit("_", 1)[-1], "numeric")) for n in names)
    return ColumnSchema(columns, id_column=id_column, label_column="label")


def _schema_for(config: PipelineConfig, path) -> ColumnSchema:
    if config.csv_schema is not None:
        return config.csv_schema
    return _infer_schema(path)


def _load_dataset(path, schema: ColumnSchema | None = None):
    return load_csv(path, schema if schema is not None else _infer_schema(path))


def _resolved_specs(config: PipelineConfig, data):
    return tuple(config.base_specs or default_base_specs(data.feature_names, config.seed))


# --- command handlers -------------------------------------------------------


def _cmd_gen_data(args) -> int:
    config = _seeded_config(args)
    if config.synthetic is None:
        raise ConfigError("gen-data needs a synthetic data source in the config")
    data = generate_synthetic(config.synthetic)
    save_csv(data, args.out)
    _note(args, f"wrote {data.n_rows} rows to {args.out}")
    _emit(
        {
            "path": args.out,
            "rows": data.n_rows,
            "positives": int(data.labels.sum()),
            "columns": [[c.name, c.kind] for c in data.schema.columns],
        }
    )
    return 0


def _cmd_preprocess(args) -> int:
    config = _seeded_config(args)
    if args.apply is not None:
        pre = load_preprocessor(args.apply)
        data = _load_dataset(args.input, pre.schema)
        out = apply_preprocess(pre, data)
    else:
        data = _load_dataset(args.input, _schema_for(config, args.input))
        out, pre = fit_apply_preprocess(data, config.preprocess)
        if args.preprocessor is not None:
            save_preprocessor(pre, args.preprocessor)
    save_csv(out, args.out)
    _note(args, f"preprocessed {out.n_rows} rows to {args.out}")
    _emit({"path": args.out, "rows": out.n_rows, "preprocessor": args.preprocessor or args.apply})
    return 0


def _cmd_train_base(args) -> int:
    config = _seeded_config(args)
    schema = load_preprocessor(args.preprocessor).schema if args.preprocessor else _schema_for(config, args.train)
    data = _load_dataset(args.train, schema)
    specs = _resolved_specs(config, data)
    _note(args, f"fitting {len(specs)} base learners on {data.n_rows} rows")
    models = fit_ensemble(list(specs), data, config.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = {}
    for i, (spec, model) in enumerate(zip(specs, models)):
        path = os.path.join(args.out_dir, f"base_{i}_{spec.name}.json")
        save_model(model, path)
        paths[spec.name] = path
    _emit({"models": paths})
    return 0


def _cmd_oof(args) -> int:
    config = _seeded_config(args)
    schema = load_preprocessor(args.preprocessor).schema if args.preprocessor else _schema_for(config, args.train)
    data = _load_dataset(args.train, schema)
    specs = _resolved_specs(config, data)
    _note(args, f"cross-fitting {len(specs)} learners over {config.k_folds} folds")
    oof, _ = oof_predictions(list(specs), data, config.k_folds, config.seed)
    oof_to_csv(oof, args.out)
    _emit(
        {
            "path": args.out,
            "rows": oof.n_rows,
            "learners": list(oof.learner_names),
            "oof_auc": {name: auc(oof.labels, oof.values[:, j]) for j, name in enumerate(oof.learner_names)},
        }
    )
    return 0


def _cmd_train_meta(args) -> int:
    config = _seeded_config(args)
    oof = oof_from_csv(args.oof)
    _note(args, f"training meta-model on {oof.n_rows} out-of-fold rows")
    meta = train_meta(build_meta_dataset(oof), config.hybrid)
    save_model(meta, args.out)
    _emit({"path": args.out, "n_models": meta.n_models, "meta_features": meta.n_features})
    return 0


def _cmd_distill(args) -> int:
    config = _seeded_config(args)
    teacher = load_teacher(args.teacher)
    data = _load_dataset(args.train)
    dset = build_distill_set(teacher, data)
    d_train, d_valid = split_distill_set(dset, 0.2, config.seed)
    _note(args, f"distilling with loss={args.loss} on {d_train.n_rows} rows")
    student = distill_student(d_train, d_valid, config.resolved_student(), loss=args.loss)
    save_model(student, args.out)
    _emit(
        {
            "path": args.out,
            "loss": student.loss,
            "best_iteration": student.metadata.get("best_iteration"),
            "valid_mse_to_teacher": float(np.min(student.metadata["valid_mse_to_teacher"])),
        }
    )
    return 0


def _load_scorer(path):
    try:
        with open(path) as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no model file at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from exc
    if document.get("format") == TEACHER_FORMAT:
        return load_teacher(path)
    return load_model(path)


def _cmd_predict(args) -> int:
    scorer = _load_scorer(args.model)
    data = _load_dataset(args.input)
    if isinstance(scorer, TeacherBundle):
        scores = teacher_predict(scorer, data)
    else:
        scores = scorer.predict(data)
    with open(args.out, "w") as fh:
        fh.write("id,score\n")
        for i in range(data.n_rows):
            fh.write(f"{data.ids[i]},{repr(float(scores[i]))}\n")
    _note(args, f"scored {data.n_rows} rows to {args.out}")
    _emit({"path": args.out, "rows": data.n_rows})
    return 0


def _read_scores(path) -> tuple[list, np.ndarray]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "score"]:
            raise DataError(f"{path}: expected header 'id,score', got {header}")
        ids, scores = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 cells")
            ids.append(row[0])
            try:
                scores.append(float(row[1]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse score {row[1]!r}") from None
    if not ids:
        raise DataError(f"{path}: no score rows")
    return ids, np.asarray(scores)


def _cmd_evaluate(args) -> int:
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    ids, scores = _read_scores(args.scores)
    labeled = _load_dataset(args.labels)
    if labeled.labels is None:
        raise DataError(f"{args.labels} has no label column")
    by_id = {str(labeled.ids[i]): int(labeled.labels[i]) for i in range(labeled.n_rows)}
    try:
        labels = np.array([by_id[i] for i in ids], dtype=np.int8)
    except KeyError as exc:
        raise DataError(f"score id {exc.args[0]!r} is missing from {args.labels}") from None
    report = evaluate_scores(labels, scores, args.k)
    with open(args.out, "w") as fh:
        fh.write(report_to_json(report))
    _note(args, f"evaluated {len(ids)} rows at k={args.k}")
    _emit(
        {
            "path": args.out,
            "k": report.k,
            "n": report.n,
            "auc": report.auc,
            "precision_at_k": report.precision_at_k,
            "business_recall_at_k": report.business_recall_at_k,
            "log_loss": report.log_loss,
            "lift_at_k": report.lift_at_k,
        }
    )
    return 0


def _cmd_ablate(args) -> int:
    config = _seeded_config(args)
    suite = args.suite.replace("-", "_")
    _note(args, f"running ablation suite {suite!r}")
    table = run_ablation(config, suite)
    out_dir = args.out_dir or config.out_dir
    if out_dir:
        write_ablation_table(table, out_dir)
    sys.stdout.write(ablation_to_csv(table))
    return 0


def _cmd_pipeline(args) -> int:
    config = _seeded_config(args)
    if args.out_dir is not None:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    if config.out_dir is None:
        raise ConfigError("pass --out-dir or set out_dir in the config")
    _note(args, f"running pipeline into {config.out_dir}")
    manifest = run_pipeline(config, resume=args.resume)
    _emit(manifest_to_payload(manifest))
    return 0


def _cmd_drift(args) -> int:
    reference = _load_dataset(args.reference)
    current = _load_dataset(args.current)
    psi = psi_drift(reference, current)
    _emit({name: psi[name] for name in sorted(psi)})
    return 0


# --- parser -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed end to end")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress progress notes")

    parser = argparse.ArgumentParser(prog="rarelift", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override the config seed end to end")
    parser.add_argument("--quiet", action="store_true", default=False, help="suppress progress notes")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("preprocess", parents=[common], help="fit-and-apply (or apply) preprocessing to a CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preprocessor", default=None, help="where to save the fitted preprocessor")
    p.add_argument("--apply", default=None, help="apply this fitted preprocessor instead of fitting")
    p.set_defaults(handler=_cmd_preprocess)

    p = sub.add_parser("train-base", parents=[common], help="fit every base learner on a training CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preprocessor", default=None, help="take the column schema from this preprocessor")
    p.set_defaults(handler=_cmd_train_base)

    p = sub.add_parser("oof", parents=[common], help="write the out-of-fold prediction matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preprocessor", default=None)
    p.set_defaults(handler=_cmd_oof)

    p = sub.add_parser("train-meta", parents=[common], help="train the fused meta-model on an OOF matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--oof", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_train_meta)

    p = sub.add_parser("distill", parents=[common], help="distill a teacher bundle into one student")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--teacher", required=True, help="teacher manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--loss", default="mse", choices=("mse", "hard_label", "kl"))
    p.set_defaults(handler=_cmd_distill)

    p = sub.add_parser("predict", parents=[common], help="score a CSV with any saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a score file against labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--k", required=True, type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation suite, print its CSV table")
    p.add_argument("--suite", required=True, choices=("fusion", "diversity", "distill-loss"))
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("pipeline", parents=[common], help="run all four stages into an output directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--resume", action="store_true", help="reuse stage artifacts already on disk")
    p.set_defaults(handler=_cmd_pipeline)

    p = sub.add_parser("drift", parents=[common], help="population-stability drift between two CSVs")
    p.add_argument("--reference", required=True)
    p.add_argument("--current", required=True)
    p.set_defaults(handler=_cmd_drift)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        if isinstance(cause, ConfigError):
            return 2
        if isinstance(cause, DataError):
            return 3
        return 4
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
