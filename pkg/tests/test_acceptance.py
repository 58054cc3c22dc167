"""End-to-end acceptance gate: ten numbered shipping criteria.

Each test checks exactly one criterion and registers a one-line verdict
that the terminal summary prints after the run. Criteria 4 through 7 read
the session-scoped five-seed benchmark tables from conftest; everything
else builds its own small fixtures and runs in seconds to a few minutes.
"""

import dataclasses
import math

import numpy as np
import pytest

import conftest
from rarelift.data import (
    PreprocessSpec,
    SynthConfig,
    apply_preprocess,
    fit_apply_preprocess,
    generate_synthetic,
    split_dataset,
)
from rarelift.distill import (
    TeacherBundle,
    build_distill_set,
    distill_student,
    split_distill_set,
    teacher_predict,
)
from rarelift.ensemble import (
    NORM_EPS,
    build_meta_dataset,
    meta_feature_matrix,
    meta_feature_vector,
    oof_predictions,
    stratified_fold_assignment,
)
from rarelift.learners import GbdtParams
from rarelift.learners.base import LearnerSpec
from rarelift.learners.fm import FmParams, fit_fm
from rarelift.learners.gbdt import (
    FocalParams,
    fit_gbdt,
    fit_subset,
    focal_grad_hess,
    focal_loss_value,
)
from rarelift.learners.mlp import MlpParams, fit_mlp
from rarelift.meta_model import HybridParams, fuse_baseline, train_meta
from rarelift.metrics import auc, business_recall_at_k, pr_curve, precision_at_k
from rarelift.nn import SigmoidNet, TwoBranchNet, logit_loss_grads, logit_loss_value
from rarelift.pipeline import PipelineConfig, default_base_specs, run_pipeline
from rarelift.serialize import (
    load_model,
    load_preprocessor,
    load_teacher,
    save_model,
    save_preprocessor,
    save_teacher,
)


def _verdict(num: int, label: str, ok: bool, detail: str) -> None:
    line = f"criterion {num:02d} {'PASS' if ok else 'FAIL'} {label}: {detail}"
    conftest.record_verdict(line)
    print(line)
    assert ok, line


# --- criterion 1 -------------------------------------------------------------


def _naive_meta_vector(p: list[float], eps: float) -> list[float]:
    """Plain-Python second implementation of the meta-feature expansion."""
    m = len(p)
    mean = sum(p) / m
    std = math.sqrt(sum((v - mean) ** 2 for v in p) / m)
    ordered = sorted(p)
    median = (ordered[(m - 1) // 2] + ordered[m // 2]) / 2.0
    hi, lo = max(p), min(p)
    norm = [(v - mean) / (std + eps) for v in p]
    diff = [v - mean for v in p]
    by_score = sorted(range(m), key=lambda j: (-p[j], j))
    rank = [0.0] * m
    for position, j in enumerate(by_score, start=1):
        rank[j] = float(position)
    return [*p, mean, std, median, hi, lo, *norm, *diff, *rank, hi - lo]


def test_criterion_01_meta_feature_oracle():
    rng = np.random.default_rng(20260816)
    worst = 0.0
    for trial in range(1000):
        m = int(rng.choice([2, 3, 5, 8]))
        p = rng.uniform(0.0, 1.0, m)
        if trial % 4 == 0:
            p = np.round(p, 1)  # quantized draws exercise the tie-break
        vec = meta_feature_vector(p)
        naive = np.array(_naive_meta_vector(p.tolist(), NORM_EPS))
        assert vec.shape == (4 * m + 6,)
        worst = max(worst, float(np.max(np.abs(vec - naive))))
        np.testing.assert_allclose(vec, naive, rtol=0.0, atol=1e-12)
        diff_block = vec[2 * m + 5 : 3 * m + 5]
        assert abs(float(diff_block.sum())) <= 1e-9
        rank_block = vec[3 * m + 5 : 4 * m + 5]
        assert sorted(rank_block.tolist()) == [float(r) for r in range(1, m + 1)]
    _verdict(
        1,
        "meta-feature oracle",
        True,
        f"max |vector - naive| {worst:.2e} over 1000 draws, m in {{2,3,5,8}}",
    )


# --- criterion 2 -------------------------------------------------------------


def _fd_net_grads(net, x, y, w, l2, h=1e-6):
    out = []
    for arr in net.param_arrays():
        fd = np.zeros_like(arr)
        flat, fd_flat = arr.ravel(), fd.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = logit_loss_value(net, x, y, w, l2)
            flat[i] = keep - h
            down = logit_loss_value(net, x, y, w, l2)
            flat[i] = keep
            fd_flat[i] = (up - down) / (2.0 * h)
        out.append(fd)
    return out


def _max_rel(analytic, fd) -> float:
    worst = 0.0
    for a, f in zip(analytic, fd):
        worst = max(worst, float(np.max(np.abs(a - f) / np.maximum(np.abs(f), 1e-8))))
    return worst


def test_criterion_02_gradient_checks():
    rng = np.random.default_rng(7)

    # focal objective: first and second derivative against the loss value;
    # the loss is non-convex, and the returned curvature is clamped at
    # 1e-12 for Newton steps, so the finite difference gets the same clamp
    z = rng.uniform(-6.0, 6.0, 400)
    y = rng.integers(0, 2, 400)
    h = 1e-4
    focal_worst = 0.0
    for gamma, alpha in ((2.0, 0.25), (0.5, 0.5), (3.0, 0.1), (0.0, 0.4)):
        g, hess = focal_grad_hess(z, y, gamma, alpha)
        up = focal_loss_value(z + h, y, gamma, alpha)
        mid = focal_loss_value(z, y, gamma, alpha)
        down = focal_loss_value(z - h, y, gamma, alpha)
        g_fd = (up - down) / (2.0 * h)
        h_fd = np.maximum((up - 2.0 * mid + down) / (h * h), 1e-12)
        focal_worst = max(
            focal_worst,
            float(np.max(np.abs(g - g_fd))),
            float(np.max(np.abs(hess - h_fd))),
        )
        np.testing.assert_allclose(g, g_fd, rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(hess, h_fd, rtol=1e-4, atol=1e-6)

    # dense sigmoid net (the base MLP body)
    x = rng.standard_normal((12, 4))
    y_net = rng.integers(0, 2, 12).astype(np.float64)
    y_net[0], y_net[1] = 0.0, 1.0
    w = np.where(y_net == 1.0, 9.0, 1.0)
    mlp_net = SigmoidNet([4, 6, 1], seed=3)
    mlp_grads = logit_loss_grads(mlp_net, x, y_net, w, 1e-3)
    mlp_fd = _fd_net_grads(mlp_net, x, y_net, w, 1e-3)
    mlp_worst = _max_rel(mlp_grads, mlp_fd)
    for a, f in zip(mlp_grads, mlp_fd):
        np.testing.assert_allclose(a, f, rtol=1e-4, atol=1e-8)

    # two-branch fusion net on a real meta-feature layout (m = 3)
    meta_x = meta_feature_matrix(rng.uniform(0.0, 1.0, (10, 3)))
    y_meta = rng.integers(0, 2, 10).astype(np.float64)
    y_meta[0], y_meta[1] = 0.0, 1.0
    w_meta = np.where(y_meta == 1.0, 5.0, 1.0)
    hybrid_net = TwoBranchNet(3, 15, (4,), (6,), (4,), seed=5)
    hybrid_grads = logit_loss_grads(hybrid_net, meta_x, y_meta, w_meta, 1e-3)
    hybrid_fd = _fd_net_grads(hybrid_net, meta_x, y_meta, w_meta, 1e-3)
    hybrid_worst = _max_rel(hybrid_grads, hybrid_fd)
    for a, f in zip(hybrid_grads, hybrid_fd):
        np.testing.assert_allclose(a, f, rtol=1e-4, atol=1e-8)

    _verdict(
        2,
        "gradient checks",
        True,
        f"focal abs {focal_worst:.2e}, mlp rel {mlp_worst:.2e}, "
        f"hybrid rel {hybrid_worst:.2e}",
    )


# --- criterion 3 -------------------------------------------------------------


def _auc_pairwise(labels, scores) -> float:
    pos = [s for s, v in zip(scores, labels) if v == 1]
    neg = [s for s, v in zip(scores, labels) if v == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def _top_k_indices(scores, k) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def test_criterion_03_metric_oracles():
    rng = np.random.default_rng(11)

    auc_worst = 0.0
    for trial in range(50):
        n = int(rng.integers(10, 101))
        labels = (rng.random(n) < 0.3).astype(np.int8)
        labels[0], labels[1] = 1, 0
        scores = rng.uniform(0.0, 1.0, n)
        if trial % 3 == 0:
            scores = np.round(scores, 1)
        delta = abs(auc(labels, scores) - _auc_pairwise(labels, scores))
        auc_worst = max(auc_worst, delta)
        assert delta <= 1e-12

    for trial in range(12):
        n = int(rng.integers(4, 21))
        labels = (rng.random(n) < 0.4).astype(np.int8)
        labels[0], labels[1] = 1, 0
        scores = rng.uniform(0.0, 1.0, n)
        if trial % 2 == 0:
            scores = np.round(scores, 1)
        for k in range(1, n + 1):
            top = _top_k_indices(scores.tolist(), k)
            expected = float(labels[top].sum()) / k
            assert abs(precision_at_k(labels, scores, k) - expected) <= 1e-12
        total = float(labels.sum())
        expected_curve = []
        for t in sorted(set(scores.tolist()), reverse=True):
            hit = [i for i, s in enumerate(scores) if s >= t]
            tp = float(labels[hit].sum())
            expected_curve.append((tp / total, tp / len(hit)))
        got_curve = pr_curve(labels, scores)
        assert len(got_curve) == len(expected_curve)
        for (gr, gp), (er, ep) in zip(got_curve, expected_curve):
            assert abs(gr - er) <= 1e-12 and abs(gp - ep) <= 1e-12

    for _ in range(20):
        n = int(rng.integers(5, 40))
        labels = (rng.random(n) < 0.3).astype(np.int8)
        labels[0] = 1
        scores = rng.uniform(0.0, 1.0, n)
        k = int(rng.integers(1, n + 1))
        hits = float(labels[_top_k_indices(scores.tolist(), k)].sum())
        standard_recall = hits / float(labels.sum())
        assert business_recall_at_k(labels, scores, k) == 3.0 * standard_recall

    _verdict(
        3,
        "metric oracles",
        True,
        f"auc max dev {auc_worst:.2e} over 50 instances; precision/PR exact "
        f"on 12; 3x recall identity exact on 20",
    )


# --- criteria 4-7: five-seed benchmark trends --------------------------------


def _median_by_row(tables, suite: str, field: str) -> dict[str, float]:
    values: dict[str, list[float]] = {}
    for per_seed in tables:
        for row in per_seed[suite].rows:
            values.setdefault(row.name, []).append(getattr(row, field))
    return {name: float(np.median(v)) for name, v in values.items()}


def test_criterion_04_fusion_trend(benchmark_tables):
    med = _median_by_row(benchmark_tables, "fusion", "auc")
    simple, stack, hybrid = (
        med["simple_average"],
        med["stacking_gbdt"],
        med["hybrid"],
    )
    margin = hybrid - simple
    ok = simple <= stack <= hybrid and margin >= 0.005
    _verdict(
        4,
        "fusion trend",
        ok,
        f"median AUC simple {simple:.4f} <= stacking {stack:.4f} <= "
        f"hybrid {hybrid:.4f}, margin {margin:+.4f} (floor +0.005)",
    )


def test_criterion_05_diversity_trend(benchmark_tables):
    med = _median_by_row(benchmark_tables, "diversity", "auc")
    ok = med["all"] >= med["trees-only"]
    _verdict(
        5,
        "diversity trend",
        ok,
        f"median AUC all five {med['all']:.4f} vs trees-only "
        f"{med['trees-only']:.4f} ({med['all'] - med['trees-only']:+.4f})",
    )


def test_criterion_06_distillation_fidelity(benchmark_tables):
    retention = []
    for per_seed in benchmark_tables:
        rows = {r.name: r for r in per_seed["distill_loss"].rows}
        retention.append(
            rows["mse"].precision_at_k / rows["teacher-only"].precision_at_k
        )
    med_retention = float(np.median(retention))
    med = _median_by_row(benchmark_tables, "distill_loss", "precision_at_k")
    ok = med_retention >= 0.90 and med["mse"] >= med["hard_label"]
    _verdict(
        6,
        "distillation fidelity",
        ok,
        f"median retention {med_retention:.1%} (floor 90%), median P@K "
        f"mse {med['mse']:.4f} vs hard_label {med['hard_label']:.4f}",
    )


def test_criterion_07_student_speedup(benchmark_tables):
    med = _median_by_row(benchmark_tables, "distill_loss", "ms_per_1000")
    teacher_ms, student_ms = med["teacher-only"], med["mse"]
    ok = student_ms <= teacher_ms / 3.0
    _verdict(
        7,
        "student speedup",
        ok,
        f"median {student_ms:.2f} ms/1000 vs teacher {teacher_ms:.2f} "
        f"({teacher_ms / max(student_ms, 1e-9):.1f}x, floor 3x)",
    )


# --- criterion 8 -------------------------------------------------------------


def test_criterion_08_oof_leakage():
    data = generate_synthetic(SynthConfig(200, 5, positive_rate=0.12, seed=11))
    specs = [
        LearnerSpec(
            "trees",
            "gbdt",
            GbdtParams(n_trees=8, max_depth=2, early_stopping_rounds=None, seed=3),
        ),
        LearnerSpec(
            "net",
            "mlp",
            MlpParams(
                hidden_sizes=(4,),
                epochs=4,
                batch_size=64,
                early_stopping_rounds=None,
                seed=4,
            ),
        ),
        LearnerSpec(
            "factor",
            "fm",
            FmParams(
                embedding_dim=2,
                epochs=3,
                batch_size=64,
                deep_hidden_sizes=None,
                early_stopping_rounds=None,
                seed=5,
            ),
        ),
    ]
    folds = stratified_fold_assignment(data.labels, 3, seed=9)
    base, _ = oof_predictions(specs, data, 3, seed=9, fold_assignment=folds)

    worst = 0.0
    for i in range(data.n_rows):
        flipped = data.labels.copy()
        flipped[i] = 1 - flipped[i]
        tweaked = dataclasses.replace(data, labels=flipped)
        redone, _ = oof_predictions(specs, tweaked, 3, seed=9, fold_assignment=folds)
        delta = float(np.max(np.abs(redone.values[i] - base.values[i])))
        worst = max(worst, delta)
        assert delta <= 1e-12, f"row {i}: flipping its label moved its OOF score"
    _verdict(
        8,
        "OOF leakage oracle",
        True,
        f"max own-row delta {worst:.2e} across all 200 label flips",
    )


# --- criterion 9 -------------------------------------------------------------


def test_criterion_09_determinism_round_trip(tmp_path):
    synth = SynthConfig(2500, 6, positive_rate=0.06, seed=13)
    masked = generate_synthetic(synth).feature_names[:3]
    specs = (
        LearnerSpec(
            "trees",
            "gbdt",
            GbdtParams(n_trees=12, max_depth=3, early_stopping_rounds=None, seed=21),
        ),
        LearnerSpec(
            "focal_trees",
            "gbdt",
            GbdtParams(
                n_trees=12,
                max_depth=3,
                objective="focal",
                early_stopping_rounds=None,
                seed=22,
            ),
            focal=FocalParams(2.0, 0.25),
        ),
        LearnerSpec(
            "half_trees",
            "gbdt",
            GbdtParams(n_trees=10, max_depth=2, early_stopping_rounds=None, seed=23),
            feature_mask=masked,
        ),
        LearnerSpec(
            "net",
            "mlp",
            MlpParams(
                hidden_sizes=(8,),
                epochs=6,
                batch_size=128,
                early_stopping_rounds=None,
                seed=24,
            ),
        ),
        LearnerSpec(
            "factor",
            "fm",
            FmParams(
                embedding_dim=3,
                epochs=5,
                batch_size=128,
                deep_hidden_sizes=(6,),
                early_stopping_rounds=None,
                seed=25,
            ),
        ),
    )
    cfg = PipelineConfig(
        synthetic=synth,
        base_specs=specs,
        k_folds=3,
        hybrid=HybridParams(epochs=10, batch_size=256, learning_rate=0.1, seed=17),
        student=GbdtParams(n_trees=30, max_depth=3, early_stopping_rounds=8, seed=19),
        k_leads=50,
        seed=13,
        out_dir=str(tmp_path / "a"),
    )
    run_pipeline(cfg)
    run_pipeline(dataclasses.replace(cfg, out_dir=str(tmp_path / "b")))
    leads_a = (tmp_path / "a" / "stage4" / "student_leads.csv").read_bytes()
    leads_b = (tmp_path / "b" / "stage4" / "student_leads.csv").read_bytes()
    reran_equal = leads_a == leads_b
    assert reran_equal

    # round-trip every serialized artifact kind at 1e-12
    raw = generate_synthetic(SynthConfig(600, 5, positive_rate=0.1, seed=23))
    train_raw, probe_raw = split_dataset(raw, 0.7, seed=23)
    train, pre = fit_apply_preprocess(train_raw, PreprocessSpec())
    probe = apply_preprocess(pre, probe_raw)
    fast_gbdt = GbdtParams(n_trees=10, max_depth=3, early_stopping_rounds=None, seed=1)
    fast_mlp = MlpParams(
        hidden_sizes=(6,), epochs=4, batch_size=64, early_stopping_rounds=None, seed=2
    )
    oof, _ = oof_predictions(
        [LearnerSpec("trees", "gbdt", fast_gbdt), LearnerSpec("net", "mlp", fast_mlp)],
        train,
        3,
        seed=29,
    )
    tiny_hybrid = HybridParams(epochs=6, batch_size=128, learning_rate=0.1, seed=29)
    gbdt_model = fit_gbdt(train, None, fast_gbdt, None)
    mlp_model = fit_mlp(train, None, fast_mlp)
    meta = train_meta(build_meta_dataset(oof), tiny_hybrid)
    dense = fuse_baseline(
        "hybrid_no_split", oof.values, oof.labels, hybrid_params=tiny_hybrid
    )[0].model
    teacher = TeacherBundle(
        (gbdt_model, mlp_model), meta, oof.learner_names, train.feature_names
    )
    dset = build_distill_set(teacher, train)
    fit_part, valid_part = split_distill_set(dset, 0.2, seed=31)
    student = distill_student(
        fit_part,
        valid_part,
        GbdtParams(n_trees=12, max_depth=3, early_stopping_rounds=None, seed=31),
    )
    raw_probe = np.column_stack([gbdt_model.predict(probe), mlp_model.predict(probe)])
    meta_probe = meta_feature_matrix(raw_probe)
    flat_models = {
        "gbdt": (gbdt_model, lambda m: m.predict(probe)),
        "gbdt_focal": (
            fit_gbdt(
                train,
                None,
                dataclasses.replace(fast_gbdt, objective="focal"),
                FocalParams(2.0, 0.25),
            ),
            lambda m: m.predict(probe),
        ),
        "gbdt_subset": (
            fit_subset(train, None, train.feature_names[:2], fast_gbdt, None),
            lambda m: m.predict(probe),
        ),
        "mlp": (mlp_model, lambda m: m.predict(probe)),
        "fm_shallow": (
            fit_fm(
                train,
                None,
                FmParams(
                    embedding_dim=2,
                    epochs=3,
                    batch_size=64,
                    deep_hidden_sizes=None,
                    early_stopping_rounds=None,
                    seed=6,
                ),
            ),
            lambda m: m.predict(probe),
        ),
        "fm_deep": (
            fit_fm(
                train,
                None,
                FmParams(
                    embedding_dim=2,
                    epochs=3,
                    batch_size=64,
                    deep_hidden_sizes=(4,),
                    early_stopping_rounds=None,
                    seed=7,
                ),
            ),
            lambda m: m.predict(probe),
        ),
        "meta": (meta, lambda m: m.predict_matrix(meta_probe)),
        "meta_dense": (dense, lambda m: m.predict_matrix(meta_probe)),
        "student": (student, lambda m: m.predict(probe)),
    }
    worst = 0.0
    for name, (model, scorer) in flat_models.items():
        path = tmp_path / f"{name}.json"
        save_model(model, path)
        reloaded = load_model(path)
        delta = float(np.max(np.abs(scorer(reloaded) - scorer(model))))
        worst = max(worst, delta)
        assert delta <= 1e-12, f"{name} reload moved predictions by {delta}"

    manifest = save_teacher(teacher, tmp_path / "teacher")
    teacher_delta = float(
        np.max(np.abs(teacher_predict(load_teacher(manifest), probe) - teacher_predict(teacher, probe)))
    )
    worst = max(worst, teacher_delta)
    assert teacher_delta <= 1e-12

    save_preprocessor(pre, tmp_path / "pre.json")
    redone = apply_preprocess(load_preprocessor(tmp_path / "pre.json"), probe_raw)
    pre_delta = float(np.max(np.abs(redone.features - probe.features)))
    worst = max(worst, pre_delta)
    assert pre_delta <= 1e-12

    _verdict(
        9,
        "determinism and round-trip",
        reran_equal and worst <= 1e-12,
        f"rerun lead list byte-identical; max reload delta {worst:.2e} "
        f"over 11 artifact kinds",
    )


# --- criterion 10 ------------------------------------------------------------


def test_criterion_10_no_signal_control():
    synth = SynthConfig(
        100_000, 10, positive_rate=0.02, intent_signal_strength=0.0, seed=37
    )
    raw = generate_synthetic(synth)
    train_raw, hold_raw = split_dataset(raw, 0.8, seed=37)
    train, pre = fit_apply_preprocess(train_raw, PreprocessSpec())
    hold = apply_preprocess(pre, hold_raw)

    specs = default_base_specs(train.feature_names, seed=37)
    oof, refits = oof_predictions(list(specs), train, 3, seed=37)
    aucs = {
        spec.name: auc(hold.labels, model.predict(hold))
        for spec, model in zip(specs, refits)
    }
    meta = train_meta(
        build_meta_dataset(oof), HybridParams(epochs=20, batch_size=2048, seed=41)
    )
    teacher = TeacherBundle(tuple(refits), meta, oof.learner_names, train.feature_names)
    aucs["hybrid"] = auc(hold.labels, teacher_predict(teacher, hold))
    dset = build_distill_set(teacher, train)
    fit_part, valid_part = split_distill_set(dset, 0.2, seed=43)
    student = distill_student(
        fit_part,
        valid_part,
        GbdtParams(n_trees=60, max_depth=3, early_stopping_rounds=10, seed=43),
    )
    aucs["student"] = auc(hold.labels, student.predict(hold))

    lo, hi = min(aucs.values()), max(aucs.values())
    ok = all(0.45 <= v <= 0.55 for v in aucs.values())
    _verdict(
        10,
        "no-signal control",
        ok,
        f"holdout AUC spans [{lo:.3f}, {hi:.3f}] across {len(aucs)} models "
        f"(band [0.45, 0.55])",
    )
