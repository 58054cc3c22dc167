"""End-to-end orchestration and the ablation harness.

A run walks four stages: base fits with out-of-fold stacking, fused
meta-model training, distillation into one boosted-tree student, and scored
evaluation of teacher and student on a held-out split. Every stage persists
its artifacts before the next begins, so a run whose later artifacts were
deleted resumes from whatever is still on disk and reproduces the same
downstream results.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import (
    ColumnSchema,
    Column,
    LabeledDataset,
    PreprocessSpec,
    SynthConfig,
    apply_preprocess,
    fit_apply_preprocess,
    generate_synthetic,
    load_csv,
    save_csv,
    split_dataset,
)
from .distill import (
    TeacherBundle,
    build_distill_set,
    distill_set_to_csv,
    distill_student,
    split_distill_set,
    teacher_predict,
)
from .ensemble import OofMatrix, build_meta_dataset, oof_from_csv, oof_to_csv, oof_predictions
from .errors import ConfigError, DataError, PipelineError
from .learners import LearnerSpec
from .learners.fm import FmParams
from .learners.gbdt import FocalParams, GbdtParams
from .learners.mlp import MlpParams
from .meta_model import HybridParams, fuse_baseline, fusion_predict, train_meta
from .metrics import auc, evaluate_scores, lead_list_to_csv, pr_curve_to_csv, rank_top_k, report_to_json
from .serialize import load_model, load_preprocessor, save_model, save_preprocessor, save_teacher

STAGE_NAMES = ("base", "meta", "distill", "evaluate")
ABLATION_SUITES = ("fusion", "diversity", "distill_loss")
FUSION_ROWS = ("simple_average", "weighted_average", "stacking_gbdt", "hybrid_no_split", "hybrid")
DIVERSITY_ROWS = ("trees-only", "neural-only", "no-focal", "no-subset", "all")
DISTILL_ROWS = ("teacher-only", "hard_label", "kl", "mse", "mse-deeper")

_DISTILL_VALID_FRACTION = 0.2
MANIFEST_FORMAT = "rarelift-run"


def default_student_params(seed: int = 0) -> GbdtParams:
    return GbdtParams(
        n_trees=200,
        max_depth=4,
        learning_rate=0.1,
        min_samples_leaf=20,
        early_stopping_rounds=25,
        seed=seed,
    )


def default_base_specs(feature_names, seed: int = 0) -> tuple[LearnerSpec, ...]:
    """The five shipped base-learner families.

    The subset specialist sees a seeded eighth of the columns: a true
    single-domain model whose errors decorrelate from the full-width
    boosters, the way a team would train one scorer per behavioral domain.
    """
    names = list(feature_names)
    narrow = max(1, len(names) // 8)
    picked = np.random.default_rng([seed, 7]).permutation(names)[:narrow]
    mask = tuple(sorted(picked.tolist()))
    return (
        LearnerSpec(
            "gbdt_logloss",
            "gbdt",
            GbdtParams(n_trees=120, max_depth=5, early_stopping_rounds=20, seed=seed),
        ),
        LearnerSpec(
            "mlp",
            "mlp",
            MlpParams(hidden_sizes=(32,), epochs=12, batch_size=1024, early_stopping_rounds=4, seed=seed + 1),
        ),
        LearnerSpec(
            "fm",
            "fm",
            FmParams(embedding_dim=8, epochs=12, batch_size=1024, deep_hidden_sizes=(16,), early_stopping_rounds=4, seed=seed + 2),
        ),
        LearnerSpec(
            "gbdt_focal",
            "gbdt",
            GbdtParams(n_trees=120, max_depth=5, objective="focal", early_stopping_rounds=20, seed=seed + 3),
            focal=FocalParams(gamma=2.0, alpha=0.25),
        ),
        LearnerSpec(
            "gbdt_subset",
            "gbdt",
            GbdtParams(n_trees=100, max_depth=4, early_stopping_rounds=20, seed=seed + 4),
            feature_mask=mask,
        ),
    )


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; exactly one data source must be set."""

    synthetic: SynthConfig | None = None
    csv_path: str | None = None
    csv_schema: ColumnSchema | None = None
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    base_specs: tuple[LearnerSpec, ...] | None = None
    k_folds: int = 5
    hybrid: HybridParams = field(default_factory=HybridParams)
    student: GbdtParams | None = None
    k_leads: int = 100
    train_fraction: float = 0.8
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("configure exactly one data source: synthetic or csv_path")
        if self.csv_path is not None and self.csv_schema is None:
            raise ConfigError("csv_path needs csv_schema naming every column")
        if self.base_specs is not None:
            object.__setattr__(self, "base_specs", tuple(self.base_specs))
            if len(self.base_specs) < 2:
                raise ConfigError("at least two base learner specs are required")
            names = [s.name for s in self.base_specs]
            if len(set(names)) != len(names):
                raise ConfigError("base learner names must be unique")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.k_leads < 1:
            raise ConfigError("k_leads must be >= 1")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.student is not None and self.student.objective != "logloss":
            raise ConfigError("student params must keep objective 'logloss'")

    def resolved_student(self) -> GbdtParams:
        return self.student if self.student is not None else default_student_params(self.seed)


def with_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
    """The same run re-seeded end to end: data, folds, every learner."""
    synthetic = config.synthetic
    if synthetic is not None:
        synthetic = dataclasses.replace(synthetic, seed=seed)
    specs = config.base_specs
    if specs is not None:
        specs = tuple(
            dataclasses.replace(s, params=dataclasses.replace(s.resolved_params(), seed=seed + 10 + i))
            for i, s in enumerate(specs)
        )
    student = config.student
    if student is not None:
        student = dataclasses.replace(student, seed=seed + 103)
    return dataclasses.replace(
        config,
        synthetic=synthetic,
        base_specs=specs,
        hybrid=dataclasses.replace(config.hybrid, seed=seed + 101),
        student=student,
        seed=seed,
    )


# --- config JSON ------------------------------------------------------------


def _dataclass_payload(obj) -> dict:
    out = {}
    for key, value in dataclasses.asdict(obj).items():
        if isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


def _dataclass_from(cls, payload: dict, what: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{what} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
    return cls(**kwargs)


_PARAM_TYPES = {"gbdt": GbdtParams, "mlp": MlpParams, "fm": FmParams}


def _spec_payload(spec: LearnerSpec) -> dict:
    return {
        "name": spec.name,
        "kind": spec.kind,
        "params": None if spec.params is None else _dataclass_payload(spec.params),
        "focal": None if spec.focal is None else _dataclass_payload(spec.focal),
        "feature_mask": None if spec.feature_mask is None else list(spec.feature_mask),
    }


def _spec_from(payload: dict) -> LearnerSpec:
    if not isinstance(payload, dict):
        raise ConfigError("each base learner entry must be an object")
    extra = sorted(set(payload) - {"name", "kind", "params", "focal", "feature_mask"})
    if extra:
        raise ConfigError(f"unknown keys in base learner entry: {extra}")
    kind = payload.get("kind")
    if kind not in _PARAM_TYPES:
        raise ConfigError(f"unknown learner kind {kind!r}")
    params = payload.get("params")
    focal = payload.get("focal")
    mask = payload.get("feature_mask")
    return LearnerSpec(
        name=payload.get("name", ""),
        kind=kind,
        params=None if params is None else _dataclass_from(_PARAM_TYPES[kind], params, f"{kind} params"),
        focal=None if focal is None else _dataclass_from(FocalParams, focal, "focal params"),
        feature_mask=None if mask is None else tuple(mask),
    )


def config_to_payload(config: PipelineConfig) -> dict:
    if config.synthetic is not None:
        data = {"synthetic": _dataclass_payload(config.synthetic)}
    else:
        data = {
            "csv": {
                "path": config.csv_path,
                "columns": [[c.name, c.kind] for c in config.csv_schema.columns],
                "id_column": config.csv_schema.id_column,
                "label_column": config.csv_schema.label_column,
            }
        }
    return {
        "data": data,
        "preprocess": _dataclass_payload(config.preprocess),
        "base_learners": None if config.base_specs is None else [_spec_payload(s) for s in config.base_specs],
        "k_folds": config.k_folds,
        "hybrid": _dataclass_payload(config.hybrid),
        "student": None if config.student is None else _dataclass_payload(config.student),
        "k_leads": config.k_leads,
        "train_fraction": config.train_fraction,
        "seed": config.seed,
        "out_dir": config.out_dir,
    }


_CONFIG_KEYS = {
    "data",
    "preprocess",
    "base_learners",
    "k_folds",
    "hybrid",
    "student",
    "k_leads",
    "train_fraction",
    "seed",
    "out_dir",
}


def config_from_payload(payload: dict) -> PipelineConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(payload) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if "data" not in payload:
        raise ConfigError("config needs a 'data' section")
    data = payload["data"]
    if not isinstance(data, dict) or len(data) != 1 or next(iter(data)) not in ("synthetic", "csv"):
        raise ConfigError("'data' must hold exactly one of 'synthetic' or 'csv'")
    synthetic = None
    csv_path = None
    csv_schema = None
    if "synthetic" in data:
        synthetic = _dataclass_from(SynthConfig, data["synthetic"], "synthetic config")
    else:
        section = data["csv"]
        if not isinstance(section, dict) or "path" not in section or "columns" not in section:
            raise ConfigError("'csv' section needs 'path' and 'columns'")
        csv_path = section["path"]
        try:
            columns = tuple(Column(name, kind) for name, kind in section["columns"])
        except (TypeError, ValueError):
            raise ConfigError("'columns' must be [name, kind] pairs") from None
        csv_schema = ColumnSchema(
            columns,
            id_column=section.get("id_column", "id"),
            label_column=section.get("label_column", "label"),
        )
    specs = payload.get("base_learners")
    hybrid = payload.get("hybrid")
    student = payload.get("student")
    preprocess = payload.get("preprocess")
    return PipelineConfig(
        synthetic=synthetic,
        csv_path=csv_path,
        csv_schema=csv_schema,
        preprocess=PreprocessSpec() if preprocess is None else _dataclass_from(PreprocessSpec, preprocess, "preprocess"),
        base_specs=None if specs is None else tuple(_spec_from(s) for s in specs),
        k_folds=payload.get("k_folds", 5),
        hybrid=HybridParams() if hybrid is None else _dataclass_from(HybridParams, hybrid, "hybrid params"),
        student=None if student is None else _dataclass_from(GbdtParams, student, "student params"),
        k_leads=payload.get("k_leads", 100),
        train_fraction=payload.get("train_fraction", 0.8),
        seed=payload.get("seed", 0),
        out_dir=payload.get("out_dir"),
    )


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no config file at {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_payload(payload)


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_payload(config), fh, indent=2)
        fh.write("\n")


# --- run manifest -----------------------------------------------------------


@dataclass
class StageRecord:
    name: str
    seconds: float
    artifacts: dict
    metrics: dict


@dataclass
class RunManifest:
    library_version: str
    seed: int
    config: dict
    status: str
    failed_stage: str | None
    stages: list[StageRecord]

    def stage(self, name: str) -> StageRecord:
        for record in self.stages:
            if record.name == name:
                return record
        raise KeyError(name)


def manifest_to_payload(manifest: RunManifest) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "library_version": manifest.library_version,
        "seed": manifest.seed,
        "config": manifest.config,
        "status": manifest.status,
        "failed_stage": manifest.failed_stage,
        "stages": [dataclasses.asdict(s) for s in manifest.stages],
    }


def save_manifest(manifest: RunManifest, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest_to_payload(manifest), fh, indent=2)
        fh.write("\n")


def load_manifest(path) -> RunManifest:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no run manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"run manifest {path} is not valid JSON: {exc}") from exc
    if payload.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path} is not a run manifest")
    return RunManifest(
        library_version=payload["library_version"],
        seed=payload["seed"],
        config=payload["config"],
        status=payload["status"],
        failed_stage=payload["failed_stage"],
        stages=[StageRecord(**s) for s in payload["stages"]],
    )


# --- pipeline run -----------------------------------------------------------


def _library_version() -> str:
    from rarelift import __version__

    return __version__


def _ms_per_1000(fn, n_rows: int) -> float:
    start = time.perf_counter()
    fn()
    elapsed = time.perf_counter() - start
    return elapsed * 1000.0 * (1000.0 / max(n_rows, 1))


def _distill_split(dset, seed: int):
    return split_distill_set(dset, _DISTILL_VALID_FRACTION, seed)


class _Runner:
    """Executes the stage list, persisting the manifest after every stage
    and loading completed stages from disk when resuming."""

    def __init__(self, out_dir: str, manifest: RunManifest, previous: RunManifest | None):
        self.out = out_dir
        self.manifest = manifest
        self.previous = previous

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def _previous_record(self, name: str) -> StageRecord | None:
        if self.previous is None:
            return None
        try:
            record = self.previous.stage(name)
        except KeyError:
            return None
        paths = [self.path(rel) for rel in record.artifacts.values()]
        if paths and all(os.path.exists(p) for p in paths):
            return record
        return None

    def run(self, name: str, compute, load):
        """compute() -> (result, artifacts, metrics); load(record) -> result."""
        record = self._previous_record(name)
        try:
            if record is not None and load is not None:
                result = load(record)
                self.manifest.stages.append(StageRecord(name, 0.0, dict(record.artifacts), dict(record.metrics)))
            else:
                start = time.perf_counter()
                result, artifacts, metrics = compute()
                seconds = time.perf_counter() - start
                self.manifest.stages.append(StageRecord(name, round(seconds, 3), artifacts, metrics))
        except PipelineError:
            raise
        except Exception as exc:
            self.manifest.status = "failed"
            self.manifest.failed_stage = name
            save_manifest(self.manifest, self.path("manifest.json"))
            raise PipelineError(name, str(exc)) from exc
        save_manifest(self.manifest, self.path("manifest.json"))
        return result


def _load_source(config: PipelineConfig) -> LabeledDataset:
    if config.synthetic is not None:
        return generate_synthetic(config.synthetic)
    return load_csv(config.csv_path, config.csv_schema)


def run_pipeline(config: PipelineConfig, resume: bool = False) -> RunManifest:
    if config.out_dir is None:
        raise ConfigError("run_pipeline needs out_dir set")
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    for sub in ("data", "stage1", "stage2", "stage3", "stage4"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)

    payload = config_to_payload(config)
    config_path = os.path.join(out, "config.json")
    previous = None
    if resume:
        if os.path.exists(config_path):
            with open(config_path) as fh:
                stored = json.load(fh)
            # out_dir is the one key that may differ: runs are relocatable.
            if {k: v for k, v in stored.items() if k != "out_dir"} != {
                k: v for k, v in payload.items() if k != "out_dir"
            }:
                raise ConfigError(f"{out} holds a run with a different config; cannot resume")
        if os.path.exists(os.path.join(out, "manifest.json")):
            previous = load_manifest(os.path.join(out, "manifest.json"))
    save_config(config, config_path)

    manifest = RunManifest(
        library_version=_library_version(),
        seed=config.seed,
        config=payload,
        status="running",
        failed_stage=None,
        stages=[],
    )
    runner = _Runner(out, manifest, previous)

    # Stage 1: data preparation, base fits, out-of-fold matrix.
    def compute_base():
        source = _load_source(config)
        train_raw, eval_raw = split_dataset(source, config.train_fraction, config.seed)
        train, pre = fit_apply_preprocess(train_raw, config.preprocess)
        holdout = apply_preprocess(pre, eval_raw)
        if holdout.labels is None:
            raise DataError("evaluation split needs labels")
        if config.k_leads > holdout.n_rows:
            raise ConfigError(
                f"k_leads={config.k_leads} exceeds the {holdout.n_rows}-row evaluation split"
            )
        specs = config.base_specs or default_base_specs(train.feature_names, config.seed)
        oof, refits = oof_predictions(list(specs), train, config.k_folds, config.seed)
        artifacts = {
            "train": "data/train.csv",
            "eval": "data/eval.csv",
            "preprocessor": "data/preprocessor.json",
            "oof": "stage1/oof.csv",
        }
        save_csv(train, runner.path(artifacts["train"]))
        save_csv(holdout, runner.path(artifacts["eval"]))
        save_preprocessor(pre, runner.path(artifacts["preprocessor"]))
        oof_to_csv(oof, runner.path(artifacts["oof"]))
        for i, (spec, model) in enumerate(zip(specs, refits)):
            rel = f"stage1/base_{i}_{spec.name}.json"
            save_model(model, runner.path(rel))
            artifacts[f"model_{i}"] = rel
        manifest.config["base_learners"] = [_spec_payload(s) for s in specs]
        metrics = {
            "n_train": train.n_rows,
            "n_eval": holdout.n_rows,
            "train_positives": int(train.labels.sum()),
            "oof_auc": {name: auc(oof.labels, oof.values[:, j]) for j, name in enumerate(oof.learner_names)},
        }
        return (train, holdout, oof, refits), artifacts, metrics

    def load_base(record: StageRecord):
        pre = load_preprocessor(runner.path(record.artifacts["preprocessor"]))
        train = load_csv(runner.path(record.artifacts["train"]), pre.schema)
        holdout = load_csv(runner.path(record.artifacts["eval"]), pre.schema)
        oof = oof_from_csv(runner.path(record.artifacts["oof"]))
        refits = []
        for i in range(len(oof.learner_names)):
            refits.append(load_model(runner.path(record.artifacts[f"model_{i}"])))
        specs = config.base_specs or default_base_specs(train.feature_names, config.seed)
        manifest.config["base_learners"] = [_spec_payload(s) for s in specs]
        return train, holdout, oof, refits

    train, holdout, oof, refits = runner.run("base", compute_base, load_base)

    # Stage 2: meta dataset and hybrid fusion training.
    def compute_meta():
        meta = train_meta(build_meta_dataset(oof), config.hybrid)
        artifacts = {"meta": "stage2/meta.json"}
        save_model(meta, runner.path(artifacts["meta"]))
        metrics = {
            "n_models": meta.n_models,
            "meta_features": meta.n_features,
            "pos_weight": meta.metadata.get("pos_weight"),
        }
        return meta, artifacts, metrics

    def load_meta(record: StageRecord):
        return load_model(runner.path(record.artifacts["meta"]))

    meta = runner.run("meta", compute_meta, load_meta)

    teacher = TeacherBundle(tuple(refits), meta, oof.learner_names, train.feature_names)

    # Stage 3: distillation set and student.
    def compute_distill():
        dset = build_distill_set(teacher, train)
        d_train, d_valid = _distill_split(dset, config.seed)
        student = distill_student(d_train, d_valid, config.resolved_student(), loss="mse")
        artifacts = {
            "distill_set": "stage3/distill.csv",
            "student": "stage3/student.json",
            "teacher": "stage3/teacher/teacher.json",
        }
        distill_set_to_csv(dset, runner.path(artifacts["distill_set"]))
        save_model(student, runner.path(artifacts["student"]))
        save_teacher(teacher, runner.path("stage3", "teacher"))
        metrics = {
            "best_iteration": student.metadata.get("best_iteration"),
            "valid_mse_to_teacher": float(np.min(student.metadata["valid_mse_to_teacher"])),
        }
        return student, artifacts, metrics

    def load_distill(record: StageRecord):
        return load_model(runner.path(record.artifacts["student"]))

    student = runner.run("distill", compute_distill, load_distill)

    # Stage 4: score the held-out split with both models.
    def compute_evaluate():
        start = time.perf_counter()
        teacher_scores = teacher_predict(teacher, holdout)
        teacher_ms = (time.perf_counter() - start) * 1000.0 * 1000.0 / holdout.n_rows
        start = time.perf_counter()
        student_scores = student.predict(holdout)
        student_ms = (time.perf_counter() - start) * 1000.0 * 1000.0 / holdout.n_rows
        artifacts = {}
        metrics = {"teacher_ms_per_1000": round(teacher_ms, 3), "student_ms_per_1000": round(student_ms, 3)}
        for tag, scores in (("teacher", teacher_scores), ("student", student_scores)):
            report = evaluate_scores(holdout.labels, scores, config.k_leads)
            leads = rank_top_k(holdout.ids, scores, config.k_leads)
            artifacts[f"{tag}_report"] = f"stage4/{tag}_report.json"
            artifacts[f"{tag}_pr"] = f"stage4/{tag}_pr.csv"
            artifacts[f"{tag}_leads"] = f"stage4/{tag}_leads.csv"
            with open(runner.path(artifacts[f"{tag}_report"]), "w") as fh:
                fh.write(report_to_json(report))
            pr_curve_to_csv(report, runner.path(artifacts[f"{tag}_pr"]))
            lead_list_to_csv(leads, runner.path(artifacts[f"{tag}_leads"]))
            metrics[tag] = {
                "auc": report.auc,
                "precision_at_k": report.precision_at_k,
                "business_recall_at_k": report.business_recall_at_k,
                "log_loss": report.log_loss,
                "lift_at_k": report.lift_at_k,
            }
        return None, artifacts, metrics

    runner.run("evaluate", compute_evaluate, None)

    manifest.status = "complete"
    save_manifest(manifest, runner.path("manifest.json"))
    return manifest


# --- ablation harness -------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    name: str
    precision_at_k: float
    business_recall_at_k: float
    auc: float
    ms_per_1000: float


@dataclass(frozen=True)
class AblationTable:
    suite: str
    k: int
    rows: tuple[AblationRow, ...]


@dataclass(frozen=True)
class AblationInputs:
    """Shared preparation: one split, one out-of-fold matrix, one refit set.

    Every row of every suite scores the same holdout with models derived
    from these, so row differences isolate the ablated component.
    """

    train: LabeledDataset
    holdout: LabeledDataset
    specs: tuple[LearnerSpec, ...]
    oof: OofMatrix
    refits: tuple

    @property
    def raw_holdout(self) -> np.ndarray:
        return np.column_stack([m.predict(self.holdout) for m in self.refits])


def prepare_ablation_inputs(config: PipelineConfig) -> AblationInputs:
    source = _load_source(config)
    train_raw, eval_raw = split_dataset(source, config.train_fraction, config.seed)
    train, pre = fit_apply_preprocess(train_raw, config.preprocess)
    holdout = apply_preprocess(pre, eval_raw)
    if holdout.labels is None:
        raise DataError("evaluation split needs labels")
    if config.k_leads > holdout.n_rows:
        raise ConfigError(f"k_leads={config.k_leads} exceeds the {holdout.n_rows}-row evaluation split")
    specs = tuple(config.base_specs or default_base_specs(train.feature_names, config.seed))
    oof, refits = oof_predictions(list(specs), train, config.k_folds, config.seed)
    return AblationInputs(train, holdout, specs, oof, tuple(refits))


def _row_from_scores(name: str, labels, scores, k: int, ms: float) -> AblationRow:
    report = evaluate_scores(labels, scores, k)
    return AblationRow(
        name=name,
        precision_at_k=report.precision_at_k,
        business_recall_at_k=report.business_recall_at_k,
        auc=report.auc,
        ms_per_1000=round(ms, 3),
    )


def _fusion_suite(config: PipelineConfig, inputs: AblationInputs) -> tuple[AblationRow, ...]:
    holdout = inputs.holdout
    rows = []
    for name in FUSION_ROWS:
        fitted, _ = fuse_baseline(
            name,
            inputs.oof.values,
            inputs.oof.labels,
            seed=config.seed,
            hybrid_params=config.hybrid,
        )
        start = time.perf_counter()
        raw = np.column_stack([m.predict(holdout) for m in inputs.refits])
        scores = fusion_predict(fitted, raw)
        ms = (time.perf_counter() - start) * 1000.0 * 1000.0 / holdout.n_rows
        rows.append(_row_from_scores(name, holdout.labels, scores, config.k_leads, ms))
    return tuple(rows)


def _diversity_groups(specs: tuple[LearnerSpec, ...]) -> dict[str, list[int]]:
    def is_focal(s: LearnerSpec) -> bool:
        return s.focal is not None or getattr(s.resolved_params(), "objective", None) == "focal"

    return {
        "trees-only": [i for i, s in enumerate(specs) if s.kind == "gbdt"],
        "neural-only": [i for i, s in enumerate(specs) if s.kind in ("mlp", "fm")],
        "no-focal": [i for i, s in enumerate(specs) if not is_focal(s)],
        "no-subset": [i for i, s in enumerate(specs) if s.feature_mask is None],
        "all": list(range(len(specs))),
    }


def _diversity_suite(config: PipelineConfig, inputs: AblationInputs) -> tuple[AblationRow, ...]:
    holdout = inputs.holdout
    groups = _diversity_groups(inputs.specs)
    rows = []
    for name in DIVERSITY_ROWS:
        idx = groups[name]
        if len(idx) < 2:
            raise ConfigError(
                f"diversity variant {name!r} keeps {len(idx)} learner(s); it needs at least two"
            )
        fitted, _ = fuse_baseline(
            "hybrid",
            inputs.oof.values[:, idx],
            inputs.oof.labels,
            seed=config.seed,
            hybrid_params=config.hybrid,
        )
        members = [inputs.refits[i] for i in idx]
        start = time.perf_counter()
        raw = np.column_stack([m.predict(holdout) for m in members])
        scores = fusion_predict(fitted, raw)
        ms = (time.perf_counter() - start) * 1000.0 * 1000.0 / holdout.n_rows
        rows.append(_row_from_scores(name, holdout.labels, scores, config.k_leads, ms))
    return tuple(rows)


def _distill_suite(config: PipelineConfig, inputs: AblationInputs) -> tuple[AblationRow, ...]:
    holdout = inputs.holdout
    meta = train_meta(build_meta_dataset(inputs.oof), config.hybrid)
    teacher = TeacherBundle(inputs.refits, meta, inputs.oof.learner_names, inputs.train.feature_names)
    dset = build_distill_set(teacher, inputs.train)
    d_train, d_valid = _distill_split(dset, config.seed)
    params = config.resolved_student()
    rows = []
    for name in DISTILL_ROWS:
        if name == "teacher-only":
            start = time.perf_counter()
            scores = teacher_predict(teacher, holdout)
            ms = (time.perf_counter() - start) * 1000.0 * 1000.0 / holdout.n_rows
        else:
            loss = "mse" if name == "mse-deeper" else name
            student_params = params
            if name == "mse-deeper":
                student_params = dataclasses.replace(params, max_depth=params.max_depth + 2)
            student = distill_student(d_train, d_valid, student_params, loss=loss)
            start = time.perf_counter()
            scores = student.predict(holdout)
            ms = (time.perf_counter() - start) * 1000.0 * 1000.0 / holdout.n_rows
        rows.append(_row_from_scores(name, holdout.labels, scores, config.k_leads, ms))
    return tuple(rows)


def run_ablation(
    config: PipelineConfig, suite: str, inputs: AblationInputs | None = None
) -> AblationTable:
    """One comparison table; rows share the split and out-of-fold matrix.

    Pass `inputs` from `prepare_ablation_inputs` to amortize the expensive
    shared preparation over several suites.
    """
    if suite not in ABLATION_SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; pick one of {list(ABLATION_SUITES)}")
    if inputs is None:
        inputs = prepare_ablation_inputs(config)
    if suite == "fusion":
        rows = _fusion_suite(config, inputs)
    elif suite == "diversity":
        rows = _diversity_suite(config, inputs)
    else:
        rows = _distill_suite(config, inputs)
    return AblationTable(suite=suite, k=config.k_leads, rows=rows)


_ABLATION_COLUMNS = ("variant", "precision_at_k", "business_recall_at_k", "auc", "inference_ms_per_1000_rows")


def ablation_to_csv(table: AblationTable) -> str:
    lines = [",".join(_ABLATION_COLUMNS)]
    for row in table.rows:
        lines.append(
            ",".join(
                [
                    row.name,
                    repr(float(row.precision_at_k)),
                    repr(float(row.business_recall_at_k)),
                    repr(float(row.auc)),
                    repr(float(row.ms_per_1000)),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def ablation_to_text(table: AblationTable) -> str:
    header = ["variant", "prec@k", "bus_recall@k", "auc", "ms/1000"]
    body = [
        [
            row.name,
            f"{row.precision_at_k:.4f}",
            f"{row.business_recall_at_k:.4f}",
            f"{row.auc:.4f}",
            f"{row.ms_per_1000:.2f}",
        ]
        for row in table.rows
    ]
    widths = [max(len(header[j]), *(len(r[j]) for r in body)) for j in range(len(header))]
    lines = [f"suite: {table.suite} (k={table.k})"]
    lines.append("  ".join(h.ljust(widths[j]) for j, h in enumerate(header)))
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(r[j].ljust(widths[j]) for j in range(len(header))))
    return "\n".join(lines) + "\n"


def write_ablation_table(table: AblationTable, out_dir) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"ablation_{table.suite}.csv")
    text_path = os.path.join(out_dir, f"ablation_{table.suite}.txt")
    with open(csv_path, "w") as fh:
        fh.write(ablation_to_csv(table))
    with open(text_path, "w") as fh:
        fh.write(ablation_to_text(table))
    return {"csv": csv_path, "text": text_path}
