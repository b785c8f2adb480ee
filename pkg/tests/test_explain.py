import itertools
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtbirads import explain as E
from mtbirads import model as M
from mtbirads.lexicon import DESCRIPTORS, FEATURE_DIM, HEAD_SIZES, head_slices

from oracles import shapley_by_formula, shapley_by_permutations


def table_game(table, d):
    """Game given by an explicit value per coalition bitmask."""
    return E.SetGame(lambda c: table[int(np.dot(c, 1 << np.arange(d)))], d)


def as_set_fn(table, d):
    return lambda s: table[sum(1 << i for i in s)]


@st.composite
def games(draw, max_d=5):
    d = draw(st.integers(1, max_d))
    vals = draw(st.lists(st.floats(-5, 5), min_size=2 ** d, max_size=2 ** d))
    return d, np.array(vals)


def random_mlp(d, seed, hidden=6):
    rng = np.random.default_rng(seed)
    w1, b1 = rng.normal(0, 1.5, (hidden, d)), rng.normal(0, 0.5, hidden)
    w2 = rng.normal(0, 1.5, hidden)

    def f(z):
        h = np.tanh(np.atleast_2d(z) @ w1.T + b1)
        return 1.0 / (1.0 + np.exp(-(h @ w2)))

    return f


# --- value function ----------------------------------------------------------------------------


def test_value_full_and_empty():
    f = lambda z: z.sum(axis=1) ** 2
    x, b = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.5, 0.5])
    v = E.ValueFunction(f, x, b)
    assert v.value([0, 1, 2]) == f(x[None])[0]
    assert v.value([]) == f(b[None])[0]
    assert v.value([1]) == f(np.array([[0.5, 2.0, 0.5]]))[0]


def test_value_constant_when_instance_is_baseline():
    x = np.array([0.2, 0.4, 0.6, 0.8])
    v = E.ValueFunction(random_mlp(4, 0), x, x.copy())
    vals = v(E._all_coalitions(4))
    assert np.ptp(vals) == 0
    np.testing.assert_array_equal(E.shapley_exact(v).phi, 0.0)


def test_value_function_shape_check():
    with pytest.raises(ValueError):
        E.ValueFunction(lambda z: z, np.zeros(3), np.zeros(4))


# --- exact -----------------------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(games())
def test_exact_matches_formula_and_permutation_oracles(case):
    d, table = case
    rep = E.shapley_exact(table_game(table, d))
    np.testing.assert_allclose(rep.phi, shapley_by_formula(as_set_fn(table, d), d), atol=1e-10)
    np.testing.assert_allclose(rep.phi, shapley_by_permutations(as_set_fn(table, d), d), atol=1e-10)
    assert rep.efficiency_gap() < 1e-9


def test_single_player():
    rep = E.shapley_exact(table_game(np.array([0.3, 1.1]), 1))
    assert rep.phi[0] == pytest.approx(0.8, abs=1e-15)


def test_squared_size_game_is_symmetric():
    game = E.SetGame(lambda c: float(c.sum()) ** 2, 3)
    rep = E.shapley_exact(game)
    np.testing.assert_allclose(rep.phi, [3.0, 3.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(E.brute_force_permutations(game), rep.phi, atol=1e-12)


def test_dummy_player_gets_zero():
    # player 2 never affects the value
    game = E.SetGame(lambda c: 2.0 * c[0] + c[0] * c[1] - 0.5 * c[3], 4)
    assert abs(E.shapley_exact(game).phi[2]) < 1e-12


def test_symmetric_players_equal():
    game = E.SetGame(lambda c: math.sqrt(c[0] + c[1] + 0.3 * c[2]) + c[2] * c[3], 4)
    phi = E.shapley_exact(game).phi
    assert phi[0] == pytest.approx(phi[1], abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(games(4), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_linearity(case, alpha, beta, seed):
    d, t1 = case
    t2 = np.random.default_rng(seed).normal(size=2 ** d)
    phi1 = E.shapley_exact(table_game(t1, d)).phi
    phi2 = E.shapley_exact(table_game(t2, d)).phi
    combo = E.shapley_exact(table_game(alpha * t1 + beta * t2, d)).phi
    np.testing.assert_allclose(combo, alpha * phi1 + beta * phi2, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_player_order_invariance(d, seed):
    rng = np.random.default_rng(seed)
    x, b = rng.uniform(size=d), rng.uniform(size=d)
    f = random_mlp(d, seed)
    perm = rng.permutation(d)
    phi = E.shapley_exact(E.ValueFunction(f, x, b)).phi
    g = lambda z: f(z[:, np.argsort(perm)])
    phi_perm = E.shapley_exact(E.ValueFunction(g, x[perm], b[perm])).phi
    np.testing.assert_allclose(phi_perm, phi[perm], atol=1e-12)


def test_weights_sum_to_one_up_to_25_players():
    for d in (1, 5, 9, 20, 25):
        w = E.shapley_weights(d)
        total = sum(math.comb(d - 1, k) * w[k] for k in range(d))
        assert total == pytest.approx(1.0, abs=1e-12)
        # direct factorial formula
        for k in (0, d // 2, d - 1):
            assert w[k] == pytest.approx(math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d), rel=1e-12)


def test_too_many_players():
    v = E.ValueFunction(lambda z: z.sum(axis=1), np.ones(21), np.zeros(21))
    with pytest.raises(E.TooManyPlayers, match="sampled"):
        E.shapley_exact(v)


def test_exact_evaluates_each_coalition_once():
    calls = []

    def f(z):
        calls.append(len(z))
        return z.sum(axis=1)

    E.shapley_exact(E.ValueFunction(f, np.ones(6), np.zeros(6)))
    assert calls == [64]


# --- grouped -------------------------------------------------------------------------------------


def test_grouped_linear_closed_form():
    rng = np.random.default_rng(0)
    w = rng.normal(size=FEATURE_DIM)
    x, b = rng.uniform(size=FEATURE_DIM), rng.uniform(size=FEATURE_DIM)
    rep = E.shapley_grouped(E.ValueFunction(lambda z: z @ w, x, b))
    sl = head_slices()
    expected = [np.sum(w[sl[n]] * (x[sl[n]] - b[sl[n]])) for n in DESCRIPTORS]
    np.testing.assert_allclose(rep.phi, expected, atol=1e-12)
    assert rep.feature_names == list(DESCRIPTORS) and rep.mode == "exact-group"


def test_grouped_efficiency_and_dummy_group():
    rng = np.random.default_rng(1)
    b = rng.uniform(size=FEATURE_DIM)
    x = b.copy()
    sl = head_slices()
    x[sl["echo"]] = rng.uniform(size=6)
    x[sl["shape"]] = rng.uniform(size=3)
    rep = E.shapley_grouped(E.ValueFunction(random_mlp(FEATURE_DIM, 3), x, b))
    assert rep.efficiency_gap() < 1e-9
    phi = dict(zip(rep.feature_names, rep.phi))
    for n in DESCRIPTORS:
        if n not in ("echo", "shape"):
            assert abs(phi[n]) < 1e-12


def test_grouped_matches_brute_force():
    rng = np.random.default_rng(2)
    v = E.ValueFunction(random_mlp(8, 2), rng.uniform(size=8), rng.uniform(size=8))
    groups = [[0, 1], [2], [3, 4, 5], [6, 7]]
    game = E.GroupedGame(v, groups)
    rep = E.shapley_grouped(v, groups)
    np.testing.assert_allclose(rep.phi, E.brute_force_permutations(game), atol=1e-12)


@pytest.mark.parametrize("groups", [[[0, 1], [1, 2]], [[0], [1]], [[0, 1, 2], []]])
def test_grouped_rejects_non_partitions(groups):
    v = E.ValueFunction(lambda z: z.sum(axis=1), np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        E.shapley_grouped(v, groups)


# --- sampled ---------------------------------------------------------------------------------------


def test_all_permutations_reproduce_exact():
    rng = np.random.default_rng(4)
    v = E.ValueFunction(random_mlp(3, 4), rng.uniform(size=3), rng.uniform(size=3))
    rep = E.shapley_sampled(v, 0, permutations=list(itertools.permutations(range(3))))
    np.testing.assert_allclose(rep.phi, E.shapley_exact(v).phi, atol=1e-12)
    assert rep.n_permutations == 6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 20), st.integers(0, 10_000))
def test_sampled_efficiency_is_exact(d, n, seed):
    rng = np.random.default_rng(seed)
    v = E.ValueFunction(random_mlp(d, seed), rng.uniform(size=d), rng.uniform(size=d))
    rep = E.shapley_sampled(v, n, seed)
    assert rep.efficiency_gap() < 1e-12


def test_sampled_converges_for_nine_players():
    rng = np.random.default_rng(5)
    v = E.ValueFunction(random_mlp(9, 5, hidden=12), rng.uniform(-1, 1, 9), rng.uniform(-1, 1, 9))
    exact = E.shapley_exact(v).phi
    est = E.shapley_sampled(v, 2000, seed=0)
    assert np.max(np.abs(est.phi - exact)) < 0.02
    assert est.mode == "sampled-class" and est.n_permutations == 2000


def test_sampled_deterministic_per_seed():
    rng = np.random.default_rng(6)
    v = E.ValueFunction(random_mlp(5, 6), rng.uniform(size=5), rng.uniform(size=5))
    a, b = E.shapley_sampled(v, 50, seed=3), E.shapley_sampled(v, 50, seed=3)
    c = E.shapley_sampled(v, 50, seed=4)
    np.testing.assert_array_equal(a.phi, b.phi)
    assert not np.array_equal(a.phi, c.phi)


def test_sampled_needs_a_permutation():
    v = E.ValueFunction(lambda z: z.sum(axis=1), np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        E.shapley_sampled(v, 0)


# --- baseline ---------------------------------------------------------------------------------------


def test_baseline_single_and_midpoint():
    a = np.linspace(0, 1, 25)
    np.testing.assert_array_equal(E.baseline_from_reference([a]), a)
    np.testing.assert_allclose(E.baseline_from_reference([a, 1 - a]), 0.5)


def test_baseline_empty_errors():
    with pytest.raises(ValueError):
        E.baseline_from_reference([])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_baseline_stays_on_simplices(n, seed):
    rng = np.random.default_rng(seed)
    refs = np.concatenate([rng.dirichlet(np.ones(s), n) for s in HEAD_SIZES], axis=1)
    b = E.baseline_from_reference(refs)
    for sl in head_slices().values():
        assert b[sl].sum() == pytest.approx(1.0, abs=1e-12)


# --- model integration and rendering -------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    cfg = M.ModelConfig(input_size=16, blocks=2, base_channels=4, head_hidden=8)
    params = M.init(cfg, 0)
    rng = np.random.default_rng(0)
    refs = M.predict(params, rng.uniform(size=(6, 3, 16, 16)), cfg)["features"]
    return cfg, params, E.baseline_from_reference(refs), rng.uniform(size=(3, 16, 16))


def test_model_value_function_endpoints(tiny_model):
    cfg, params, base, img = tiny_model
    rep = E.explain(params, cfg, img, base, mode="group", sample_id="s0")
    pred = M.forward(params, img, cfg)
    assert rep.v_full == pytest.approx(pred.tumor_probs.data[1], abs=1e-12)
    assert rep.v_empty == pytest.approx(M.tumor_head(params, base).data[1], abs=1e-12)
    assert rep.efficiency_gap() < 1e-9
    d = rep.to_dict()
    assert d["sample_id"] == "s0" and len(d["baseline"]) == 25 and len(d["phi"]) == 9
    assert set(d["descriptor_probs"]) == set(DESCRIPTORS)
    json.loads(rep.to_json())


def test_class_mode_over_25_players_is_refused(tiny_model):
    cfg, params, base, img = tiny_model
    with pytest.raises(E.TooManyPlayers):
        E.explain(params, cfg, img, base, mode="class")


def test_sampled_mode_on_model(tiny_model):
    cfg, params, base, img = tiny_model
    rep = E.explain(params, cfg, img, base, mode="sampled", n_perms=20, seed=1)
    assert len(rep.phi) == 25 and rep.efficiency_gap() < 1e-9


def test_pooled_features_are_held_fixed():
    cfg = M.ModelConfig(input_size=16, blocks=2, base_channels=4, head_hidden=8, tumor_uses_pooled_features=True)
    params = M.init(cfg, 1)
    img = np.random.default_rng(1).uniform(size=(3, 16, 16))
    rep = E.explain(params, cfg, img, np.full(25, 0.3))
    assert rep.v_full == pytest.approx(M.forward(params, img, cfg).tumor_probs.data[1], abs=1e-12)
    assert rep.efficiency_gap() < 1e-9


def test_ranked_sorted_by_magnitude():
    rep = E.AttributionReport(["a", "b", "c"], np.array([0.1, -0.5, 0.3]), 1.0, 0.1, "exact-class")
    assert [n for n, _ in rep.ranked()] == ["b", "c", "a"]


def test_text_bars_direction():
    rep = E.AttributionReport(["shape", "margin"], np.array([0.2, -0.1]), 0.6, 0.5, "exact-group")
    lines = E.render_text_bars(rep, width=10).splitlines()
    shape_line = next(l for l in lines if l.strip().startswith("shape"))
    margin_line = next(l for l in lines if l.strip().startswith("margin"))
    left, right = shape_line.split("|")
    assert "#" not in left and right.count("#") == 10
    left, right = margin_line.split("|")
    assert left.count("#") == 5 and "#" not in right.split()[0]


def test_svg_is_well_formed():
    rep = E.AttributionReport(["shape", "margin"], np.array([0.2, -0.1]), 0.6, 0.5, "exact-group")
    root = ET.fromstring(E.render_svg(rep))
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("rect")]) >= 2
