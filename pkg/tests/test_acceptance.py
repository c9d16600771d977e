"""Acceptance criteria, one test per criterion, each printing a PASS line.

Criteria 7-10 share one execution of the stock benchmark matrix; criterion
11 performs a second full execution and compares report bytes. Run with
``pytest -s tests/test_acceptance.py`` to see the per-criterion lines.
"""

import collections
import math
import os
import time

import numpy as np
import pytest

from oodnoise import detectors as det
from oodnoise import harness, metrics, mlp, noise, tensorio
from oodnoise.numerics import softmax

WORKERS = max(1, min(4, os.cpu_count() or 1))


def _report_line(num, name):
    print(f"ACCEPTANCE {num:02d} {name}: PASS")


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance-matrix")
    config = harness.default_matrix_config()
    start = time.time()
    report = harness.run_matrix(config, out, workers=WORKERS)
    elapsed = time.time() - start
    csv_text = harness.rows_csv_text(report)
    return config, report, csv_text, elapsed, out


def test_01_auroc_oracle_equivalence():
    # 200 random score-set pairs, sizes 1-500, heavy ties
    gen = np.random.Generator(np.random.Philox(key=1))
    for trial in range(200):
        n_pos = int(gen.integers(1, 501))
        n_neg = int(gen.integers(1, 501))
        if trial % 2:
            pos = gen.integers(0, 12, n_pos).astype(float)
            neg = gen.integers(0, 12, n_neg).astype(float)
        else:
            pos = np.round(gen.standard_normal(n_pos), 1)
            neg = np.round(gen.standard_normal(n_neg), 1)
        fast = metrics.auroc(pos, neg)
        wins = (pos[:, None] > neg[None, :]).sum()
        ties = (pos[:, None] == neg[None, :]).sum()
        oracle = (wins + 0.5 * ties) / (n_pos * n_neg)
        assert abs(fast - oracle) <= 1e-12
    _report_line(1, "auroc-rank-vs-pairwise-oracle")


def test_02_decomposition_identity():
    gen = np.random.Generator(np.random.Philox(key=2))
    checked = 0
    for _ in range(100):
        n_id = int(gen.integers(2, 200))
        scores = gen.integers(0, 9, n_id).astype(float)
        mask = gen.random(n_id) < gen.uniform(0.2, 0.8)
        if mask.all() or not mask.any():
            mask[0] = not mask[0]
        ood = np.round(gen.standard_normal(int(gen.integers(1, 200))), 1)
        t = metrics.auroc_triple(scores, mask, ood)
        combined = (t.n_correct * t.correct_vs_ood
                    + t.n_incorrect * t.incorrect_vs_ood) / n_id
        assert abs(t.id_vs_ood - combined) <= 1e-9
        checked += 1
    assert checked == 100
    _report_line(2, "auroc-triple-weighted-identity")


def test_03_degenerate_reduction_suite():
    gen = np.random.Generator(np.random.Philox(key=3))
    spec = mlp.MlpSpec(input_dim=5, hidden_dims=(6, 5), num_classes=4, seed=9)
    g2 = np.random.Generator(np.random.Philox(key=99))
    weights, biases = mlp._init_params(spec, g2)
    model = mlp.ClassifierModel(spec=spec, weights=weights, biases=biases)
    n = 1000
    data = tensorio.TensorBundle("r", {
        "feat": gen.standard_normal((n, 5)).astype(np.float32),
        "label": gen.integers(0, 4, n).astype(np.int32)})
    trace = mlp.export_bundle(model, data)
    ctx = det.FitContext(id_train=trace, id_val=trace, model=model,
                         label_source="train")
    feats = trace.features.astype(np.float64)
    w, b = model.last_layer
    ebo_ref = det.score_ebo(feats @ w.T + b)

    react = det.fit_detector("react", ctx, {"percentile": 100.0})
    assert np.abs(det.score_bundle(react, trace, model) - ebo_ref).max() <= 1e-6

    ash = det.fit_detector("ash", ctx, {"percentile": 0.0})
    assert np.abs(det.score_bundle(ash, trace, model) - ebo_ref).max() <= 1e-6

    dice = det.fit_detector("dice", ctx, {"sparsity": 0.0})
    assert np.abs(det.score_bundle(dice, trace, model) - ebo_ref).max() <= 1e-6

    vim = det.fit_detector("vim", ctx, {"dim": 5})
    ebo_logits = det.score_ebo(trace.logits.astype(np.float64))
    assert np.abs(det.score_bundle(vim, trace) - ebo_logits).max() <= 1e-6

    odin = det.DetectorState("odin", {"temperature": 1.0, "magnitude": 0.0})
    msp_ref = det.score_bundle(det.DetectorState("msp", {}), trace)
    assert np.abs(det.score_bundle(odin, trace, model) - msp_ref).max() <= 1e-6

    temp = det.DetectorState("tempscale", {"temperature": 1.0})
    assert np.abs(det.score_bundle(temp, trace) - msp_ref).max() <= 1e-6
    _report_line(3, "degenerate-reductions-1000-samples")


def test_04_gradnorm_closed_form_vs_finite_differences():
    gen = np.random.Generator(np.random.Philox(key=4))
    worst = 0.0
    for _ in range(20):
        c = int(gen.integers(2, 7))
        d = int(gen.integers(2, 9))
        w = gen.standard_normal((c, d))
        b = gen.standard_normal(c)
        f = gen.standard_normal(d)

        def kl_uniform(weights):
            p = softmax(weights @ f + b, 1.0)
            u = np.full(c, 1.0 / c)
            return float((u * (np.log(u) - np.log(p))).sum())

        h = 1e-6
        fd = np.empty_like(w)
        for i in range(c):
            for j in range(d):
                delta = np.zeros_like(w)
                delta[i, j] = h
                fd[i, j] = (kl_uniform(w + delta) - kl_uniform(w - delta)) / (2 * h)
        oracle = np.abs(fd).sum()
        closed = det.score_gradnorm(f[None, :], (w @ f + b)[None, :])[0]
        worst = max(worst, abs(closed - oracle) / oracle)
    assert worst <= 1e-4
    _report_line(4, "gradnorm-closed-form-vs-fd")


def test_05_noise_lab_exactness():
    gen = np.random.Generator(np.random.Philox(key=5))
    labels = gen.integers(0, 7, 10_000)
    for rate in (0.1, 0.25, 0.4):
        noisy = noise.inject_uniform(labels, 7, rate, seed=50)
        flipped = noisy != labels
        assert int(flipped.sum()) == round(rate * 10_000)
        assert (noisy[flipped] != labels[flipped]).all()
    g13 = np.random.default_rng(13)
    raw = g13.uniform(0.1, 1.0, size=(4, 4))
    target = noise.TransitionMatrix(raw / raw.sum(1, keepdims=True))
    clean = g13.integers(0, 4, 10_000)
    noisy = noise.inject_class_conditional(clean, target, seed=14)
    estimated, _ = noise.estimate_transition(clean, noisy, 4)
    worst = np.abs(estimated.matrix - target.matrix).sum(axis=1).max()
    assert worst <= 0.05
    _report_line(5, "noise-injection-exactness-and-closure")


def test_06_aso_calibration():
    gen = np.random.Generator(np.random.Philox(key=6))
    base = gen.standard_normal(50)
    assert metrics.aso(base + 10.0, base, seed=60).eps_min <= 0.05
    assert metrics.aso(base, base + 10.0, seed=61).eps_min >= 0.95
    a = gen.standard_normal(50)
    b = gen.standard_normal(50)
    assert metrics.aso(a, b, seed=62).eps_min >= 0.4
    _report_line(6, "aso-calibration")


def _cell_medians(report):
    return report.median_by_cell()


def test_07_noise_degradation_monotone(acceptance_run):
    config, report, _, elapsed, _ = acceptance_run
    assert not report.failures, [f.message for f in report.failures[:3]]
    rates = {nz.tag: nz.rate for nz in config.noise}
    per_rate = collections.defaultdict(list)
    for key, (median, _, _) in _cell_medians(report).items():
        if key[5] == "train":  # default label source axis of the figure
            per_rate[rates[key[2]]].append(median)
    series = [float(np.median(v)) for _, v in sorted(per_rate.items())]
    assert len(series) == 4
    violations = [series[i + 1] - series[i] for i in range(3)
                  if series[i + 1] > series[i]]
    assert len(violations) <= 1
    assert all(v <= 0.01 for v in violations)
    assert elapsed < 900, f"matrix took {elapsed:.0f}s"
    _report_line(7, f"noise-degradation-monotone ({elapsed:.0f}s)")


def test_08_msp_incorrect_near_chance(acceptance_run):
    _, report, _, _, _ = acceptance_run
    inc = [r.auroc_incorrect for r in report.rows
           if r.detector == "msp" and r.auroc_incorrect is not None]
    cor = [r.auroc_correct for r in report.rows
           if r.detector == "msp" and r.auroc_correct is not None]
    med_inc = float(np.median(inc))
    med_cor = float(np.median(cor))
    assert 0.35 <= med_inc <= 0.65
    assert med_cor >= med_inc + 0.10
    _report_line(8, f"msp-incorrect-near-chance (inc {med_inc:.3f}, cor {med_cor:.3f})")


def test_09_distance_methods_lead_under_noise(acceptance_run):
    config, report, _, _, _ = acceptance_run
    med = _cell_medians(report)
    wins = 0
    for seed in config.seeds:
        def seed_median(detector):
            vals = [m for key, (m, _, _) in med.items()
                    if key[2] == "su40" and key[3] == seed
                    and key[5] == "train" and key[6] == detector]
            return float(np.median(vals))
        best_distance = max(seed_median(d) for d in ("mds", "knn", "gram"))
        wins += best_distance >= seed_median("msp")
    assert wins >= 2
    _report_line(9, f"distance-methods-lead-at-su40 ({wins}/3 seeds)")


def test_10_label_source_contract(acceptance_run):
    config, report, _, _, _ = acceptance_run
    check = harness.label_source_crosscheck(report)
    assert check["checked"] and not check["violations"]
    # the six class-statistic methods must actually change
    by_cell = {}
    for key, digest in report.score_hashes.items():
        ds, arch, nz, seed, ckpt, ls, detector = key
        by_cell.setdefault((ds, arch, nz, seed, ckpt, detector), {})[ls] = digest
    changed = {d: False for d in det.CLASS_STAT_DETECTORS}
    for key, by_ls in by_cell.items():
        detector = key[-1]
        if detector in changed and len(set(by_ls.values())) > 1:
            changed[detector] = True
    assert all(changed.values()), changed
    med = _cell_medians(report)
    wins = 0
    for seed in config.seeds:
        def mds_median(ls):
            vals = [m for key, (m, _, _) in med.items()
                    if key[2] == "su40" and key[3] == seed
                    and key[5] == ls and key[6] == "mds"]
            return float(np.median(vals))
        wins += mds_median("train") >= mds_median("val")
    assert wins >= 2
    _report_line(10, f"label-source-six-only-and-mds-train-wins ({wins}/3 seeds)")


def test_11_determinism_byte_identical(acceptance_run, tmp_path):
    config, _, csv_first, _, _ = acceptance_run
    report = harness.run_matrix(config, tmp_path / "second", workers=WORKERS)
    assert harness.rows_csv_text(report) == csv_first
    _report_line(11, "rows-csv-byte-identical-across-executions")
