import numpy as np
import pytest

from abftlab.analysis import (
    ConnectivityGrid,
    attention_heatmap,
    connectivity_grid,
    consistency_metric,
    count_induction_heads,
    eval_accuracy,
    eval_ood,
    interpolate_models,
    layer_profile,
    random_vote_expectation,
    shift_map,
    unseen_label_eval,
    write_pgm,
)
from abftlab.data import DataError, build_icl_sample, build_test_set, make_synthetic_task
from abftlab.model import init_model
from abftlab.tensor import ContractError

from .conftest import TINY, plant_label_head


def perturbed(model, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    out = model.copy()
    for p in out.parameters():
        p.data = (p.data + scale * rng.normal(size=p.shape)).astype(p.dtype)
    return out


def test_constant_predictor_gets_chance(task, plan):
    model = init_model(TINY)
    label = task.label_tokens[2]
    # every label logit is forced equal except one, through the tied embedding
    model["tok_emb"].data[list(task.label_tokens)] = 0.0
    model["tok_emb"].data[label] = 10.0 * model["lnf.g"].data.size ** -0.5
    model["lnf.b"].data[:] = 1.0
    test = build_test_set(task, plan, np.random.default_rng(0), 4, per_query=1)
    acc = eval_accuracy(model, test, task.label_tokens)
    assert acc == np.mean([s.query_label == 2 for s in test])
    assert eval_accuracy(model, test, task.label_tokens) == acc


def test_eval_ood_reports_every_task(layout, tiny_model):
    sets = {}
    for v in (1, 2):
        t = make_synthetic_task(layout, 4, variant=v)
        sets[t.task_id] = ([build_icl_sample(t, 4, c % 4, np.random.default_rng(c)) for c in range(8)], t.label_tokens)
    report = eval_ood(tiny_model, tiny_model, sets)
    assert set(report) == set(sets) and all(a == b for a, b in report.values())


def test_head_counts(task, plan, tiny_model):
    test = build_test_set(task, plan, np.random.default_rng(1), 4, per_query=1)
    assert count_induction_heads(tiny_model, test) == 0.0
    planted = plant_label_head(tiny_model.copy(), task)
    n = count_induction_heads(planted, test)
    assert 0 < n <= TINY.n_layers * TINY.n_heads


def test_layer_profile(task, plan):
    model = plant_label_head(init_model(TINY), task)
    test = build_test_set(task, plan, np.random.default_rng(2), 4, per_query=1)
    prof = layer_profile(model, test)
    assert np.all(prof.S_plus <= prof.S + 1e-12) and np.all(prof.S <= 1 + 1e-6)
    shuffled = [test[i] for i in np.random.default_rng(3).permutation(len(test))]
    assert np.allclose(layer_profile(model, shuffled).S, prof.S, rtol=0, atol=1e-12)
    with pytest.raises(DataError):
        layer_profile(model, [build_icl_sample(task, 0, 0, np.random.default_rng(0))])


def test_interpolation_anchors_are_bit_exact(tiny_model):
    mE, mA = perturbed(tiny_model, 1), perturbed(tiny_model, 2)
    for (aE, aA), ref in (((0, 0), tiny_model), ((1, 0), mE), ((0, 1), mA)):
        mixed = interpolate_models(tiny_model, mE, mA, aE, aA)
        for k, p in ref.named_parameters():
            assert mixed[k].data.tobytes() == p.data.tobytes()
    same = interpolate_models(tiny_model, mE, mE, 0.5, 0.5)
    assert all(same[k].data.tobytes() == p.data.tobytes() for k, p in mE.named_parameters())


def test_interpolation_is_affine(tiny_model):
    s0, sE, sA = (perturbed(tiny_model, i, 1.0).state() for i in (4, 5, 6))
    both = interpolate_models(s0, sE, sA, 0.5, 0.5)
    onlyE = interpolate_models(s0, sE, sA, 1.0, 0.0)
    onlyA = interpolate_models(s0, sE, sA, 0.0, 1.0)
    for k in s0:
        assert np.allclose(both[k], 0.5 * onlyE[k].astype(np.float64) + 0.5 * onlyA[k], atol=1e-6)


def test_interpolation_shape_mismatch(tiny_model):
    bad = tiny_model.state()
    bad["lnf.g"] = np.ones(3, dtype=np.float32)
    with pytest.raises(ContractError):
        interpolate_models(tiny_model.state(), bad, tiny_model.state(), 0.5, 0.5)


def test_connectivity_grid_anchors_and_completeness(task, plan, tiny_model):
    mE, mA = perturbed(tiny_model, 7, 0.5), perturbed(tiny_model, 8, 0.5)
    test = build_test_set(task, plan, np.random.default_rng(4), 4, per_query=1, n_queries=24)
    grid = connectivity_grid(tiny_model, mE, mA, test, task.label_tokens, values=[0.0, 0.5, 1.0])
    assert grid.accuracy.shape == (3, 3) and np.all(np.isfinite(grid.accuracy))
    assert grid.at(0, 0) == eval_accuracy(tiny_model, test, task.label_tokens)
    assert grid.at(1, 0) == eval_accuracy(mE, test, task.label_tokens)
    assert grid.at(0, 1) == eval_accuracy(mA, test, task.label_tokens)
    assert [(aE, aA) for aE, aA, _ in grid.segment()] == [(1.0, 0.0), (0.5, 0.5), (0.0, 1.0)]


def test_grid_csv(tmp_path):
    g = ConnectivityGrid(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([[0.5, 0.25], [0.75, 1.0]]))
    g.write_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "alpha_E,alpha_A,accuracy" and len(lines) == 5


def test_consistency_examples():
    assert consistency_metric([[1] * 6 + [0] * 3]) == 6 / 9
    assert consistency_metric([[2] * 9, [0] * 9]) == 1.0
    with pytest.raises(ContractError):
        consistency_metric([[1], [0]])


def test_consistency_monte_carlo_matches_closed_form():
    rng = np.random.default_rng(0)
    votes = rng.integers(0, 2, size=(100_000, 9))
    assert abs(consistency_metric(votes) - random_vote_expectation(2, 9)) < 0.01
    assert 0.5 <= consistency_metric(votes) <= 1.0


def test_unseen_label_eval(task, plan, tiny_model):
    rep = unseen_label_eval(tiny_model, task, plan, np.random.default_rng(5), n_queries=32)
    assert rep.all_I_plus_empty and rep.n_queries == 32
    for v in (rep.unseen_accuracy, rep.random_accuracy, rep.zero_shot_accuracy):
        assert 0.0 <= v <= 1.0


def test_shift_map(tiny_model):
    assert all(d == 0.0 for *_, d in shift_map(tiny_model, tiny_model.copy()).entries)
    other = tiny_model.copy()
    other["layers.1.W_V"].data[3, 4] += 1.0
    sm = shift_map(tiny_model, other)
    assert abs(sm.get("layers.1.W_V") - 1.0) < 1e-6
    assert sum(d > 0 for *_, d in sm.entries) == 1
    assert sm.matrix().shape == (2, 6)
    bad = tiny_model.state()
    bad["tok_emb"] = bad["tok_emb"][:3]
    with pytest.raises(ContractError):
        shift_map(tiny_model.state(), bad)


def test_analysis_is_read_only(task, plan, tiny_model):
    before = {k: p.data.tobytes() for k, p in tiny_model.named_parameters()}
    test = build_test_set(task, plan, np.random.default_rng(6), 4, per_query=1, n_queries=8)
    eval_accuracy(tiny_model, test, task.label_tokens)
    layer_profile(tiny_model, test)
    count_induction_heads(tiny_model, test)
    assert {k: p.data.tobytes() for k, p in tiny_model.named_parameters()} == before


def test_heatmap_pgm(tmp_path, task, tiny_model):
    s = build_icl_sample(task, 4, 0, np.random.default_rng(0))
    img = attention_heatmap(tiny_model, s)
    assert img.shape == (4, s.n_t) and np.allclose(img.sum(axis=1), 1, atol=1e-5)
    write_pgm(tmp_path / "a.pgm", img, scale=2)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5") and len(raw) > 8 * s.n_t
