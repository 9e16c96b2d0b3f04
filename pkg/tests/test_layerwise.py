import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from decoupleq.config import QuantConfig
from decoupleq.errors import ValidationError
from decoupleq.layerwise import (
    ColumnProblem,
    box_qp_objective,
    dequantize,
    grid_search_init,
    group_expand,
    layer_loss,
    pgd_box_minimize,
    quantize_layer,
    rtn_quantize,
    solve_column,
    solve_sz,
    solve_w,
)
from decoupleq.linalg import Hessian, build_hessian

from conftest import random_spd

H21 = Hessian.from_matrix([[2.0, 1.0], [1.0, 1.0]])


def test_config_bounds():
    assert (QuantConfig(bits=2).alpha, QuantConfig(bits=2).beta) == (-2, 1)
    assert (QuantConfig(bits=3).alpha, QuantConfig(bits=3).beta) == (-4, 3)
    assert (QuantConfig(bits=4).alpha, QuantConfig(bits=4).beta) == (-8, 7)
    with pytest.raises(ValidationError):
        QuantConfig(bits=2, alpha=-2, beta=2)
    with pytest.raises(ValidationError):
        QuantConfig(bits=5)


def test_config_group_divisibility():
    with pytest.raises(ValidationError, match="divide"):
        QuantConfig(group_count=3).check_layer(8)


def test_group_expand():
    np.testing.assert_array_equal(group_expand([1.0, 2.0], 4), [1, 1, 2, 2])
    np.testing.assert_array_equal(group_expand([3.0], 3), [3, 3, 3])
    np.testing.assert_array_equal(group_expand([1.0, 2.0, 3.0], 3), [1, 2, 3])
    with pytest.raises(ValidationError):
        group_expand([1.0, 2.0], 5)


def test_layer_loss_examples():
    h = np.array([[10.0, 14.0], [14.0, 20.0]])
    # residual [0.1, 0]: w = 0, z = 0, b = -r
    assert layer_loss([0, 0], [1.0], [0.0], [-0.1, 0.0], h) == pytest.approx(0.05)
    assert layer_loss([1, -2], [0.5], [0.1], [0.6, -0.9], h) == pytest.approx(0.0, abs=1e-15)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_layer_loss_matches_trace_form(ng, d_out, seed):
    rng = np.random.default_rng(seed)
    d_in = ng * int(rng.integers(1, 4))
    h = random_spd(rng, d_in).matrix
    w0 = rng.standard_normal((d_in, d_out))
    w = rng.integers(-2, 2, (d_in, d_out))
    s, z = rng.standard_normal((d_out, ng)), rng.standard_normal((d_out, ng))
    wt = np.empty_like(w0)
    gs = d_in // ng
    for i in range(d_in):
        for j in range(d_out):
            wt[i, j] = s[j, i // gs] * w[i, j] + z[j, i // gs]
    e = wt - w0
    trace = np.trace(e.T @ h @ e)
    total = sum(layer_loss(w[:, j], s[j], z[j], w0[:, j], h) for j in range(d_out))
    assert 2 * total == pytest.approx(trace, rel=1e-10)


def test_rtn_examples():
    np.testing.assert_array_equal(rtn_quantize([0.7, -1.3], [0.5], [0.0], -2, 1), [1, -2])
    np.testing.assert_array_equal(rtn_quantize([0.3, 0.3], [0.2], [0.3], -2, 1), [0, 0])


def test_rtn_half_to_even():
    np.testing.assert_array_equal(rtn_quantize([0.5, 1.5, -0.5, -1.5], [1.0], [0.0], -2, 1), [0, 1, 0, -2])


@given(
    st.lists(st.floats(-100, 100), min_size=1, max_size=12),
    st.floats(-10, 10),
    st.floats(-10, 10),
)
def test_rtn_stays_on_two_bit_grid(b, s, z):
    w = rtn_quantize(b, [s], [z], -2, 1)
    assert set(w.tolist()) <= {-2, -1, 0, 1}


def test_dequantize_examples():
    np.testing.assert_allclose(dequantize([1, -2], [0.5], [0.1]), [0.6, -0.9])
    np.testing.assert_array_equal(dequantize([0, 0, 0, 0], [1.0, 2.0], [3.0, 4.0]), [3, 3, 4, 4])


@given(st.lists(st.integers(-2, 1), min_size=2, max_size=8), st.floats(0.01, 5), st.floats(-5, 5))
def test_rtn_dequantize_round_trip_on_grid(w, s, z):
    # values exactly on the grid quantize back to themselves
    s, z = float(np.float32(s)), float(np.float32(z))
    b = dequantize(w, [s], [z])
    np.testing.assert_array_equal(rtn_quantize(b, [s], [z], -2, 1), w)


def _prob(b, h=None, **kw):
    b = np.asarray(b, float)
    return ColumnProblem(b, h if h is not None else Hessian.from_matrix(np.eye(b.size)), QuantConfig(**kw))


def test_grid_search_endpoints_exact():
    s, z, w = grid_search_init(_prob([-1.0, 1.0]))
    np.testing.assert_allclose([s[0], z[0]], [2 / 3, 1 / 3])
    np.testing.assert_array_equal(w, [-2, 1])
    assert layer_loss(w, s, z, [-1.0, 1.0], np.eye(2)) == pytest.approx(0.0, abs=1e-30)


def test_grid_search_constant_column():
    s, z, w = grid_search_init(_prob([0.7, 0.7, 0.7]))
    assert s[0] == 0.0
    assert layer_loss(w, s, z, [0.7] * 3, np.eye(3)) == pytest.approx(0.0, abs=1e-30)


def _rescan(prob):
    # straightforward per-p loop, independent of the vectorized scan
    cfg, b = prob.cfg, prob.b
    best = np.inf
    for p in np.linspace(cfg.p_min, cfg.p_max, cfg.grid_points):
        s, z = [], []
        for g in np.split(b, cfg.group_count):
            sg = p * (g.max() - g.min()) / (cfg.beta - cfg.alpha)
            s.append(sg)
            z.append(p * g.min() - sg * cfg.alpha)
        w = rtn_quantize(b, s, z, cfg.alpha, cfg.beta)
        best = min(best, layer_loss(w, s, z, b, prob.H))
    return best


@pytest.mark.parametrize("ng", [1, 2])
def test_grid_search_is_best_on_grid(rng, ng):
    for _ in range(20):
        d = 8
        prob = ColumnProblem(rng.standard_normal(d), random_spd(rng, d), QuantConfig(group_count=ng))
        s, z, w = grid_search_init(prob)
        g = layer_loss(w, s, z, prob.b, prob.H)
        assert g == pytest.approx(_rescan(prob), rel=1e-12)


def test_grid_search_identity_h_exhaustive(rng):
    b = rng.standard_normal(10)
    prob = _prob(b)
    s, z, w = grid_search_init(prob)
    assert layer_loss(w, s, z, b, np.eye(10)) <= _rescan(prob) + 1e-15


def test_per_group_p_option(rng):
    b = rng.standard_normal(8)
    prob = ColumnProblem(b, random_spd(rng, 8), QuantConfig(group_count=2, per_group_p=True))
    s, z, w = grid_search_init(prob)
    assert s.shape == z.shape == (2,)
    assert set(w.tolist()) <= {-2, -1, 0, 1}


def test_solve_sz_exact_fit():
    s, z, ridge = solve_sz([1, 0], _prob([1.5, 0.5]))
    assert (s[0], z[0]) == pytest.approx((1.0, 0.5))
    assert ridge == 0.0


def test_solve_sz_zero_w_gives_weighted_mean(rng):
    h = random_spd(rng, 4)
    b = rng.standard_normal(4)
    s, z, ridge = solve_sz([0, 0, 0, 0], ColumnProblem(b, h, QuantConfig()))
    one = np.ones(4)
    assert ridge > 0
    assert abs(s[0]) < 1e-12
    assert z[0] == pytest.approx(one @ h.matrix @ b / (one @ h.matrix @ one), rel=1e-8)


@pytest.mark.parametrize("ng", [1, 2])
def test_solve_sz_is_optimal_against_perturbations(rng, ng):
    for _ in range(10):
        prob = ColumnProblem(rng.standard_normal(8), random_spd(rng, 8), QuantConfig(group_count=ng))
        w = rng.integers(-2, 2, 8)
        s, z, _ = solve_sz(w, prob)
        g = layer_loss(w, s, z, prob.b, prob.H)
        for _ in range(100):
            ds, dz = rng.standard_normal((2, ng)) * 10 ** rng.uniform(-6, 0)
            assert g <= layer_loss(w, s + ds, z + dz, prob.b, prob.H) + 1e-12


def test_pgd_separable_projection():
    x = pgd_box_minimize(np.eye(2), -np.array([3.0, -5.0]), np.zeros(2), -2, 1, iters=5)
    np.testing.assert_array_equal(x, [1.0, -2.0])


def test_pgd_fixed_point_returns_unchanged():
    rec = []
    x0 = np.array([0.25, -0.5])
    x = pgd_box_minimize(np.eye(2), -x0, x0, -2, 1, iters=10, record=rec)
    np.testing.assert_array_equal(x, x0)
    assert len(rec) == 1


def test_pgd_respects_fixed_mask(rng):
    hq = random_spd(rng, 5).matrix
    x0 = np.array([1.0, -2.0, 0.0, 0.5, -0.5])
    mask = np.array([True, True, False, False, False])
    x = pgd_box_minimize(hq, rng.standard_normal(5), x0, -2, 1, mask, iters=30)
    np.testing.assert_array_equal(x[:2], x0[:2])
    assert np.all((x >= -2) & (x <= 1))


@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_pgd_monotone_descent(d, seed):
    rng = np.random.default_rng(seed)
    hq = random_spd(rng, d, rows=int(rng.integers(1, 3 * d + 1))).matrix
    c = rng.standard_normal(d) * 10
    rec = []
    x = pgd_box_minimize(hq, c, rng.uniform(-2, 1, d), -2.0, 1.0, iters=50, tol=0.0, record=rec)
    assert np.all(np.diff(rec) <= 1e-12 * (1 + np.abs(rec[:-1])))
    assert rec[-1] == pytest.approx(box_qp_objective(hq, c, x))


def test_level2_diagonal_is_elementwise_rtn():
    prob = _prob([0.4, 0.6], approx="level2")
    np.testing.assert_array_equal(solve_w(prob, [1.0], [0.0]), [0, 1])


def test_level2_worked_example_matches_enumeration():
    b = np.array([0.6, 0.0])
    prob = ColumnProblem(b, H21, QuantConfig(approx="level2"))
    w = solve_w(prob, [1.0], [0.0])
    np.testing.assert_array_equal(w, [1, 0])
    g = layer_loss(w, [1.0], [0.0], b, H21)
    assert g == pytest.approx(0.16, abs=1e-15)
    brute = min(
        (layer_loss(c, [1.0], [0.0], b, H21), c) for c in itertools.product(range(-2, 2), repeat=2)
    )
    assert brute[1] == (1, 0) and brute[0] == pytest.approx(g, abs=1e-15)


def test_level2_uses_shared_factor(rng, monkeypatch):
    h = random_spd(rng, 6)
    u = h.inverse_upper_factor
    called = []
    import scipy.linalg

    monkeypatch.setattr(scipy.linalg, "cho_factor", lambda *a, **k: called.append(1))
    prob = ColumnProblem(rng.standard_normal(6), h, QuantConfig(approx="level2", group_count=2))
    solve_w(prob, [0.3, -0.7], [0.1, 0.2])
    assert not called and h.inverse_upper_factor is u


def test_level1_iterates_stay_in_box(rng, monkeypatch):
    import decoupleq.layerwise as lw

    seen = []
    orig = lw.pgd_box_minimize

    def spy(*a, **k):
        x = orig(*a, **k)
        seen.append(x.copy())
        return x

    monkeypatch.setattr(lw, "pgd_box_minimize", spy)
    for _ in range(5):
        prob = ColumnProblem(rng.standard_normal(8) * 3, random_spd(rng, 8),
                             QuantConfig(approx="level1", inner_iters=3, warmup_iters=10))
        s, z, w0 = grid_search_init(prob)
        w = solve_w(prob, s * 0.5, z, w0)
        assert set(w.tolist()) <= {-2, -1, 0, 1}
    assert len(seen) > 5
    assert all(np.all((x >= -2) & (x <= 1)) for x in seen)


@pytest.mark.parametrize("approx", ["level1", "level2"])
def test_solve_column_on_grid_column_is_exact(approx):
    b = np.array([-1.0, 1.0, 1 / 3, -1 / 3])
    prob = ColumnProblem(b, build_hessian(np.random.default_rng(0).standard_normal((10, 4))),
                         QuantConfig(approx=approx))
    sol = solve_column(prob)
    assert sol.g_init == pytest.approx(0.0, abs=1e-28)
    assert sol.g_final == pytest.approx(0.0, abs=1e-28)
    assert all(g < 1e-20 for g in sol.g_trajectory)


@pytest.mark.parametrize("approx", ["level1", "level2"])
def test_solve_column_invariants(rng, approx):
    for _ in range(15):
        prob = ColumnProblem(rng.standard_normal(6), random_spd(rng, 6, rows=32), QuantConfig(approx=approx))
        sol = solve_column(prob)
        assert sol.g_final <= sol.g_init
        assert sol.g_final == pytest.approx(layer_loss(sol.w, sol.s, sol.z, prob.b, prob.H), rel=1e-9)
        assert sol.w.dtype.kind == "i" and set(sol.w.tolist()) <= {-2, -1, 0, 1}
        assert len(sol.g_trajectory) == prob.cfg.rounds
        # (s, z) half-steps never increase the loss
        for before, after in zip(sol.half_steps[1::2], sol.half_steps[2::2]):
            assert after <= before + 1e-9


def test_best_seen_non_increasing_in_rounds(rng):
    for _ in range(10):
        b, h = rng.standard_normal(8), random_spd(rng, 8)
        finals = [solve_column(ColumnProblem(b, h, QuantConfig(rounds=n, group_count=2))).g_final for n in range(6)]
        assert all(b2 <= a2 for a2, b2 in zip(finals, finals[1:]))


def test_rounds_zero_is_initialization(rng):
    prob = ColumnProblem(rng.standard_normal(8), random_spd(rng, 8), QuantConfig(rounds=0))
    sol = solve_column(prob)
    s, z, w = grid_search_init(prob)
    np.testing.assert_array_equal(sol.w, w)
    assert sol.g_final == sol.g_init


def test_fixed_sz_pins_scale_and_zero():
    prob = ColumnProblem([0.6, 0.0], H21, QuantConfig(approx="level2"))
    sol = solve_column(prob, fixed_sz=(1.0, 0.0))
    np.testing.assert_array_equal(sol.w, [1, 0])
    assert sol.g_final == pytest.approx(0.16)
    assert sol.s[0] == 1.0 and sol.z[0] == 0.0


@pytest.mark.parametrize("approx", ["level1", "level2"])
def test_zero_scale_group(rng, approx):
    # second group's column is constant -> grid init gives s = 0 there
    b = np.concatenate([rng.standard_normal(4), np.full(4, 0.37)])
    prob = ColumnProblem(b, random_spd(rng, 8), QuantConfig(group_count=2, approx=approx))
    s, z, w = grid_search_init(prob)
    assert s[1] == 0.0
    w1 = solve_w(prob, s, z, w)
    np.testing.assert_array_equal(w1[4:], 0)
    np.testing.assert_array_equal(dequantize(w1, s, z)[4:], z[1])
    sol = solve_column(prob)
    assert np.isfinite(sol.g_final) and sol.g_final <= sol.g_init


def test_negative_scale_allowed(rng):
    prob = ColumnProblem(rng.standard_normal(6), random_spd(rng, 6), QuantConfig())
    w = solve_w(prob, [-0.5], [0.1])
    assert set(w.tolist()) <= {-2, -1, 0, 1}


def test_quantize_layer_single_column_consistency(rng):
    h = random_spd(rng, 8)
    w0 = rng.standard_normal((8, 1))
    layer, rep = quantize_layer(w0, h, QuantConfig(group_count=2))
    sol = solve_column(ColumnProblem(w0[:, 0], h, QuantConfig(group_count=2)))
    np.testing.assert_array_equal(layer.w[:, 0], sol.w)
    np.testing.assert_array_equal(layer.scales[0], sol.s)
    assert rep.totals["g_total"] == sol.g_final


def test_quantize_layer_workers_identical(rng):
    h = random_spd(rng, 8)
    w0 = rng.standard_normal((8, 12))
    for approx in ("level1", "level2"):
        cfg = QuantConfig(approx=approx, group_count=2)
        a, ra = quantize_layer(w0, h, cfg, workers=1)
        b, rb = quantize_layer(w0, h, cfg, workers=8)
        assert np.array_equal(a.w, b.w) and np.array_equal(a.scales, b.scales) and np.array_equal(a.zeros, b.zeros)
        assert ra.per_column == rb.per_column


def test_quantize_layer_on_grid_zero_loss():
    s, z = 0.3, -0.1
    w0 = np.array([[-2, 1, 0], [1, -2, 1], [0, 0, -1], [-1, 1, -2]]) * s + z
    h = build_hessian(np.random.default_rng(1).standard_normal((9, 4)))
    _, rep = quantize_layer(w0, h, QuantConfig())
    assert rep.totals["g_total"] < 1e-20


def test_quantize_layer_dimension_mismatch(rng):
    with pytest.raises(ValidationError):
        quantize_layer(np.ones((5, 2)), random_spd(rng, 4), QuantConfig())


def test_quantized_layer_dequantize_matches_definition(rng):
    h = random_spd(rng, 8)
    layer, _ = quantize_layer(rng.standard_normal((8, 3)), h, QuantConfig(group_count=4))
    wt = layer.dequantize()
    for i in range(8):
        for j in range(3):
            assert wt[i, j] == layer.scales[j, i // 2] * layer.w[i, j] + layer.zeros[j, i // 2]


def test_level1_vs_level2_config_switch(rng):
    prob = ColumnProblem(rng.standard_normal(6), random_spd(rng, 6), QuantConfig(approx="level1"))
    sol1 = solve_column(prob)
    prob.cfg = replace(prob.cfg, approx="level2")
    sol2 = solve_column(prob)
    assert sol1.g_final <= sol1.g_init and sol2.g_final <= sol2.g_init
