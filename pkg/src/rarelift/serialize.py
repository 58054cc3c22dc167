"""Versioned JSON persistence for every fitted model kind.

One container format: {"format": "rarelift-model", "version": 1, "kind":
..., "payload": ...}. Floats ride through JSON at full precision (shortest
round-trip repr), so a reloaded model reproduces its predictions bit for
bit. The teacher bundle is a directory manifest referencing one file per
member model.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict

import numpy as np

from .data import Column, ColumnSchema, ColumnTransform, FittedPreprocessor, PreprocessSpec
from .distill import StudentModel, TeacherBundle
from .errors import ConfigError, DataError
from .learners.fm import FmCore, FmModel, FmParams
from .learners.gbdt import FocalParams, GbdtModel, GbdtParams, _Tree
from .learners.mlp import MlpModel, MlpParams
from .meta_model import DenseFusionModel, HybridParams, MetaModel
from .nn import DenseStack, SigmoidNet, TwoBranchNet

FORMAT_NAME = "rarelift-model"
FORMAT_VERSION = 1
TEACHER_FORMAT = "rarelift-teacher"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _params_dict(params) -> dict:
    return _jsonable(asdict(params))


def _params_from(cls, payload: dict):
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
    return cls(**kwargs)


# --- dense stacks ----------------------------------------------------------


def _stack_payload(stack: DenseStack) -> dict:
    return {
        "sizes": list(stack.sizes),
        "final_relu": stack.final_relu,
        "weights": [w.tolist() for w in stack.weights],
        "biases": [b.tolist() for b in stack.biases],
    }


def _fill_stack(stack: DenseStack, payload: dict) -> None:
    weights = payload["weights"]
    biases = payload["biases"]
    if len(weights) != stack.n_layers or len(biases) != stack.n_layers:
        raise DataError("stored network layer count does not match its sizes")
    for l in range(stack.n_layers):
        w = np.asarray(weights[l], dtype=np.float64)
        b = np.asarray(biases[l], dtype=np.float64)
        if w.shape != stack.weights[l].shape or b.shape != stack.biases[l].shape:
            raise DataError("stored network arrays have the wrong shape")
        stack.weights[l] = w
        stack.biases[l] = b


def _restore_sigmoid_net(payload: dict) -> SigmoidNet:
    net = SigmoidNet(payload["sizes"], seed=0)
    net.stack.final_relu = payload["final_relu"]
    _fill_stack(net.stack, payload)
    return net


# --- per-kind payloads ------------------------------------------------------


def _tree_payload(tree: _Tree) -> dict:
    return {
        "feature": tree.feature.tolist(),
        "threshold": tree.threshold.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "value": tree.value.tolist(),
        "gain_by_feature": tree.gain_by_feature.tolist(),
    }


def _tree_from(payload: dict) -> _Tree:
    return _Tree(
        feature=np.asarray(payload["feature"], dtype=np.int32),
        threshold=np.asarray(payload["threshold"], dtype=np.float64),
        left=np.asarray(payload["left"], dtype=np.int32),
        right=np.asarray(payload["right"], dtype=np.int32),
        value=np.asarray(payload["value"], dtype=np.float64),
        gain_by_feature=np.asarray(payload["gain_by_feature"], dtype=np.float64),
    )


def _gbdt_payload(model: GbdtModel) -> dict:
    return {
        "feature_names": list(model.feature_names),
        "params": _params_dict(model.params),
        "focal": None if model.focal is None else _params_dict(model.focal),
        "init_raw": model.init_raw,
        "link": model.link,
        "trees": [_tree_payload(t) for t in model.trees],
        "metadata": _jsonable(model.metadata),
    }


def _gbdt_from(payload: dict) -> GbdtModel:
    return GbdtModel(
        feature_names=tuple(payload["feature_names"]),
        params=_params_from(GbdtParams, payload["params"]),
        focal=None if payload["focal"] is None else _params_from(FocalParams, payload["focal"]),
        init_raw=payload["init_raw"],
        trees=[_tree_from(t) for t in payload["trees"]],
        link=payload["link"],
        metadata=payload["metadata"],
    )


def _mlp_payload(model: MlpModel) -> dict:
    return {
        "feature_names": list(model.feature_names),
        "params": _params_dict(model.params),
        "net": _stack_payload(model.net.stack),
        "metadata": _jsonable(model.metadata),
    }


def _mlp_from(payload: dict) -> MlpModel:
    return MlpModel(
        feature_names=tuple(payload["feature_names"]),
        params=_params_from(MlpParams, payload["params"]),
        net=_restore_sigmoid_net(payload["net"]),
        metadata=payload["metadata"],
    )


def _fm_payload(model: FmModel) -> dict:
    core = model.core
    return {
        "feature_names": list(model.feature_names),
        "params": _params_dict(model.params),
        "w0": core.w0.tolist(),
        "w": core.w.tolist(),
        "v": core.v.tolist(),
        "deep": None if core.deep is None else _stack_payload(core.deep),
        "metadata": _jsonable(model.metadata),
    }


def _fm_from(payload: dict) -> FmModel:
    params = _params_from(FmParams, payload["params"])
    names = tuple(payload["feature_names"])
    core = FmCore(len(names), params)
    core.w0 = np.asarray(payload["w0"], dtype=np.float64)
    core.w = np.asarray(payload["w"], dtype=np.float64)
    core.v = np.asarray(payload["v"], dtype=np.float64)
    if payload["deep"] is not None:
        if core.deep is None:
            raise DataError("stored deep head but params declare none")
        _fill_stack(core.deep, payload["deep"])
    return FmModel(feature_names=names, params=params, core=core, metadata=payload["metadata"])


def _meta_payload(model: MetaModel) -> dict:
    return {
        "n_models": model.n_models,
        "params": _params_dict(model.params),
        "first": _stack_payload(model.net.first),
        "second": _stack_payload(model.net.second),
        "head": _stack_payload(model.net.head),
        "metadata": _jsonable(model.metadata),
    }


def _meta_from(payload: dict) -> MetaModel:
    params = _params_from(HybridParams, payload["params"])
    m = payload["n_models"]
    net = TwoBranchNet(
        m,
        3 * m + 6,
        params.raw_branch_hidden,
        params.rel_branch_hidden,
        params.fusion_hidden,
        seed=0,
    )
    _fill_stack(net.first, payload["first"])
    _fill_stack(net.second, payload["second"])
    _fill_stack(net.head, payload["head"])
    return MetaModel(net, m, params, payload["metadata"])


def _dense_fusion_payload(model: DenseFusionModel) -> dict:
    return {
        "n_models": model.n_models,
        "params": _params_dict(model.params),
        "net": _stack_payload(model.net.stack),
        "metadata": _jsonable(model.metadata),
    }


def _dense_fusion_from(payload: dict) -> DenseFusionModel:
    return DenseFusionModel(
        net=_restore_sigmoid_net(payload["net"]),
        n_models=payload["n_models"],
        params=_params_from(HybridParams, payload["params"]),
        metadata=payload["metadata"],
    )


def _student_payload(model: StudentModel) -> dict:
    return {
        "loss": model.loss,
        "gbdt": _gbdt_payload(model.model),
        "metadata": _jsonable(model.metadata),
    }


def _student_from(payload: dict) -> StudentModel:
    return StudentModel(
        model=_gbdt_from(payload["gbdt"]),
        loss=payload["loss"],
        metadata=payload["metadata"],
    )


_SAVERS = {
    "gbdt": _gbdt_payload,
    "mlp": _mlp_payload,
    "fm": _fm_payload,
    "meta": _meta_payload,
    "meta_dense": _dense_fusion_payload,
    "student": _student_payload,
}
_LOADERS = {
    "gbdt": _gbdt_from,
    "mlp": _mlp_from,
    "fm": _fm_from,
    "meta": _meta_from,
    "meta_dense": _dense_fusion_from,
    "student": _student_from,
}


def save_model(model, path) -> None:
    kind = getattr(model, "kind", None)
    if kind not in _SAVERS:
        raise ConfigError(f"cannot serialize model kind {kind!r}")
    document = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "payload": _SAVERS[kind](model),
    }
    with open(path, "w") as fh:
        json.dump(document, fh)


def load_model(path):
    try:
        with open(path) as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no model file at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict) or document.get("format") != FORMAT_NAME:
        raise DataError(f"{path} is not a model file")
    if document.get("version") != FORMAT_VERSION:
        raise DataError(
            f"{path} uses format version {document.get('version')}, "
            f"this library reads version {FORMAT_VERSION}"
        )
    kind = document.get("kind")
    if kind not in _LOADERS:
        raise DataError(f"{path} holds unknown model kind {kind!r}")
    return _LOADERS[kind](document["payload"])


# --- fitted preprocessor ----------------------------------------------------

PREPROCESSOR_FORMAT = "rarelift-preprocessor"


def save_preprocessor(pre: FittedPreprocessor, path) -> None:
    document = {
        "format": PREPROCESSOR_FORMAT,
        "version": FORMAT_VERSION,
        "schema": [[c.name, c.kind] for c in pre.schema.columns],
        "id_column": pre.schema.id_column,
        "label_column": pre.schema.label_column,
        "spec": {
            "cap_percentiles": list(pre.spec.cap_percentiles),
            "scale_kinds": list(pre.spec.scale_kinds),
        },
        "transforms": [_jsonable(asdict(t)) for t in pre.transforms],
    }
    with open(path, "w") as fh:
        json.dump(document, fh)


def load_preprocessor(path) -> FittedPreprocessor:
    try:
        with open(path) as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no preprocessor file at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"preprocessor file {path} is not valid JSON: {exc}") from exc
    if document.get("format") != PREPROCESSOR_FORMAT:
        raise DataError(f"{path} is not a preprocessor file")
    if document.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported preprocessor version {document.get('version')}")
    schema = ColumnSchema(
        tuple(Column(name, kind) for name, kind in document["schema"]),
        id_column=document["id_column"],
        label_column=document["label_column"],
    )
    spec = PreprocessSpec(
        cap_percentiles=tuple(document["spec"]["cap_percentiles"]),
        scale_kinds=tuple(document["spec"]["scale_kinds"]),
    )
    transforms = tuple(ColumnTransform(**t) for t in document["transforms"])
    return FittedPreprocessor(schema=schema, spec=spec, transforms=transforms)


# --- teacher bundle ---------------------------------------------------------


def _safe_file_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_teacher(teacher: TeacherBundle, directory) -> str:
    """Writes one file per member model plus a manifest; returns the
    manifest path."""
    os.makedirs(directory, exist_ok=True)
    members = {}
    for name, model in zip(teacher.learner_names, teacher.base_models):
        fname = f"base_{_safe_file_name(name)}.json"
        save_model(model, os.path.join(directory, fname))
        members[name] = fname
    save_model(teacher.meta, os.path.join(directory, "meta.json"))
    manifest = {
        "format": TEACHER_FORMAT,
        "version": FORMAT_VERSION,
        "learner_names": list(teacher.learner_names),
        "members": members,
        "meta_file": "meta.json",
        "feature_names": list(teacher.feature_names),
        "epsilon": teacher.epsilon,
    }
    manifest_path = os.path.join(directory, "teacher.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest_path


def load_teacher(manifest_path) -> TeacherBundle:
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no teacher manifest at {manifest_path}") from None
    if manifest.get("format") != TEACHER_FORMAT:
        raise DataError(f"{manifest_path} is not a teacher manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported teacher manifest version {manifest.get('version')}")
    directory = os.path.dirname(manifest_path)
    models = []
    for name in manifest["learner_names"]:
        fname = manifest["members"][name]
        models.append(load_model(os.path.join(directory, fname)))
    meta = load_model(os.path.join(directory, manifest["meta_file"]))
    return TeacherBundle(
        base_models=tuple(models),
        meta=meta,
        learner_names=tuple(manifest["learner_names"]),
        feature_names=tuple(manifest["feature_names"]),
        epsilon=manifest["epsilon"],
    )
