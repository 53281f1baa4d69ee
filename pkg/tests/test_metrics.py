import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cgns.metrics import (
    ade,
    cvm_predict,
    fde,
    lr_predict,
    lsq_discriminator_objective,
    min_of_k,
    pearson_chi2,
    tabular_optimal_discriminator,
    write_report_csv,
    write_report_json,
)
from cgns.verify import golden_minimizer, random_pair


def test_cvm_constant_velocity_and_stationary():
    track = np.arange(14.0)[:, None] * np.array([0.75, -0.25]) + 3.0
    pred = cvm_predict(track[:4], 10)
    assert ade(pred, track[4:]) == 0 and fde(pred, track[4:]) == 0
    still = np.ones((4, 2)) * 5.0
    assert np.array_equal(cvm_predict(still, 3), np.ones((3, 2)) * 5.0)


def test_cvm_hand_formula(rng):
    obs = rng.normal(size=(4, 2))
    pred = cvm_predict(obs, 3)
    v = obs[3] - obs[2]
    for j in range(3):
        assert np.allclose(pred[j], obs[3] + (j + 1) * v, rtol=0, atol=1e-15)


def test_lr_exact_on_lines_and_constants():
    t = np.arange(12.0)
    line = np.stack([2 * t - 1, -0.5 * t + 4], axis=1)
    assert np.allclose(lr_predict(line[:8], 4), line[8:], atol=1e-12)
    assert np.allclose(lr_predict(np.full((5, 2), 2.5), 3), 2.5, atol=1e-14)


def test_lr_matches_normal_equations(rng):
    obs = rng.normal(size=(100, 8, 2))
    a = np.stack([np.ones(8), np.arange(8.0)], axis=1)
    for w in range(100):
        coef = np.linalg.solve(a.T @ a, a.T @ obs[w])
        oracle = np.stack([np.ones(5), np.arange(8.0, 13.0)], axis=1) @ coef
        assert np.max(np.abs(lr_predict(obs[w], 5) - oracle)) <= 1e-9


def test_baselines_need_two_steps():
    with pytest.raises(ValueError):
        cvm_predict(np.zeros((1, 2)), 3)
    with pytest.raises(ValueError):
        lr_predict(np.zeros((1, 2)), 3)


def test_ade_fde_examples(rng):
    truth = rng.normal(size=(3, 4, 5, 2))
    assert ade(truth, truth) == 0 and fde(truth, truth) == 0
    shift = truth + np.array([0.6, 0.8])
    assert ade(shift, truth) == pytest.approx(1.0) and fde(shift, truth) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ade(truth[:, :2], truth)


def test_ade_fde_loop_oracle(rng):
    pred, truth = rng.normal(size=(3, 4, 5, 2)), rng.normal(size=(3, 4, 5, 2))
    valid = rng.uniform(size=(3, 4)) > 0.3
    d = [[np.hypot(*(pred[w, n, t] - truth[w, n, t])) for t in range(5)]
         for w in range(3) for n in range(4) if valid[w, n]]
    assert ade(pred, truth, valid) == pytest.approx(np.mean(d), rel=1e-13)
    assert fde(pred, truth, valid) == pytest.approx(np.mean([r[-1] for r in d]), rel=1e-13)


def test_min_of_k_single_sample_equals_plain(rng):
    pred, truth = rng.normal(size=(1, 6, 3, 4, 2)), rng.normal(size=(6, 3, 4, 2))
    valid = rng.uniform(size=(6, 3)) > 0.3
    valid[:, 0] = True
    rep = min_of_k(pred, truth, valid, dt=0.5)
    assert rep.best_ade == pytest.approx(ade(pred[0], truth, valid), rel=1e-13)
    assert rep.best_fde == pytest.approx(fde(pred[0], truth, valid), rel=1e-13)
    assert rep.mean_ade == pytest.approx(rep.best_ade, rel=1e-13)
    assert rep.row_at(1.0).step == 2


def test_min_of_k_truth_among_samples(rng):
    truth = rng.normal(size=(4, 2, 5, 2))
    preds = rng.normal(size=(5, 4, 2, 5, 2))
    preds[3] = truth
    rep = min_of_k(preds, truth)
    assert rep.best_ade == 0 and rep.best_fde == 0 and rep.mean_ade > 0


def test_min_of_k_enumeration_oracle(rng):
    preds, truth = rng.normal(size=(3, 4, 2, 5, 2)), rng.normal(size=(4, 2, 5, 2))
    best_ade = best_fde = 0.0
    for w in range(4):
        errs = [np.hypot(*(preds[k, w] - truth[w]).transpose(2, 0, 1)) for k in range(3)]  # (N, T)
        best_ade += min(e.mean(axis=1).sum() for e in errs)
        best_fde += min(e[:, -1].sum() for e in errs)
    rep = min_of_k(preds, truth)
    assert rep.best_ade == pytest.approx(best_ade / 8, rel=1e-13)
    assert rep.best_fde == pytest.approx(best_fde / 8, rel=1e-13)
    mean = np.mean([ade(preds[k], truth) for k in range(3)])
    assert rep.mean_ade == pytest.approx(mean, rel=1e-13)


def test_min_of_k_single_window_form(rng):
    preds, truth = rng.normal(size=(4, 2, 5, 2)), rng.normal(size=(2, 5, 2))
    a = min_of_k(preds, truth)
    b = min_of_k(preds[:, None], truth[None])
    assert a.best_ade == b.best_ade
    with pytest.raises(ValueError):
        min_of_k(preds, truth[:, :3])


def test_report_files(tmp_path, rng):
    truth = rng.normal(size=(3, 2, 4, 2))
    reps = {"model": min_of_k(rng.normal(size=(2, 3, 2, 4, 2)), truth, dt=0.5, violation_rate=0.1),
            "cvm": min_of_k(truth[None], truth, dt=0.5)}
    write_report_csv(tmp_path / "r.csv", reps)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("step,seconds,model_best_ade") and len(lines) == 5
    assert lines[-1].split(",")[1] == "2.0"
    write_report_json(tmp_path / "r.json", reps, {"seed": 1})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["meta"] == {"seed": 1} and doc["reports"]["model"]["violation_rate"] == 0.1


def test_pearson_examples():
    assert pearson_chi2([0.2, 0.8], [0.2, 0.8]) == 0
    assert pearson_chi2([1.0, 0.0], [0.0, 1.0]) == 2.0
    assert pearson_chi2([0.5, 0.5, 0.0], [0.5, 0.5, 0.0]) == 0
    with pytest.raises(ValueError):
        pearson_chi2([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        pearson_chi2([1.0], [0.5, 0.5])


def test_pearson_summation_oracle(rng):
    for _ in range(20):
        p, q = random_pair(rng)
        ref = sum((2 * b - (a + b)) ** 2 / (a + b) for a, b in zip(p, q) if a + b > 0)
        assert pearson_chi2(p, q) == pytest.approx(ref, rel=1e-12)


def test_tabular_discriminator_boundaries():
    d = tabular_optimal_discriminator([0.5, 0.5, 0.0, 0.0], [0.0, 0.5, 0.5, 0.0])
    assert d[0] == 1 and d[1] == 0 and d[2] == -1 and np.isnan(d[3])
    assert np.all(tabular_optimal_discriminator([0.3, 0.7], [0.3, 0.7]) == 0)


def test_tabular_discriminator_golden_oracle(rng):
    for _ in range(10):
        p, q = random_pair(rng)
        d = tabular_optimal_discriminator(p, q)
        for y in np.flatnonzero(p + q > 0):
            assert abs(golden_minimizer(p[y], q[y]) - d[y]) <= 1e-6
        on = p + q > 0
        scores = np.where(on, d, 0.0)
        base = lsq_discriminator_objective(scores, p, q)
        assert base <= lsq_discriminator_objective(scores + 1e-3 * rng.normal(size=p.size), p, q)


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=16).filter(lambda v: sum(v) > 1e-3))
def test_chi2_zero_iff_equal(v):
    p = np.array(v) / np.sum(v)
    assert pearson_chi2(p, p) <= 1e-12
    q = np.roll(p, 1)
    if not np.allclose(p, q, atol=1e-9):
        assert pearson_chi2(p, q) > 1e-12
