import json
import math

import numpy as np
import pytest

from conftest import PHI
from dissdp import dp
from dissdp.dissipativity import (
    CERT_TOL,
    ComparisonFunction,
    StorageFunction,
    build_rotations,
    check_beta_property,
    check_dissipativity,
    check_two_storage,
    detect_strictness_obstruction,
    policy_evaluation_quadratic,
    rotated_cost,
    rotated_cost_table,
    verify_value_bounds,
)
from dissdp.grid import ExtendedField, default_grids
from dissdp.model import StageCost, make_model

SQRT5 = math.sqrt(5.0)


def storage(field, label):
    return StorageFunction(ExtendedField(field.grid, field.values, label), label)


@pytest.fixture(scope="module")
def lq_fields(lq_ws):
    return {k: s.value for k, s in lq_ws.solutions().items()}


@pytest.fixture(scope="module")
def lq_lyap(lq_ws):
    return policy_evaluation_quadratic(lq_ws.model, lq_ws.grids, lq_ws.v_plus)


def test_comparison_function():
    assert ComparisonFunction("quadratic", 2.0)(3.0) == 18.0
    assert ComparisonFunction("scaled_norm", 2.0)(3.0) == 6.0
    tab = ComparisonFunction("custom", table=([0.0, 1.0, 2.0], [0.0, 1.0, 4.0]))
    assert tab(1.5) == 2.5 and tab(0.0) == 0.0
    with pytest.raises(ValueError):
        ComparisonFunction(c=-1.0)
    with pytest.raises(ValueError):
        ComparisonFunction("custom", table=([0.5, 1.0], [0.0, 1.0]))


def test_storage_needs_finite_origin(lq_grids):
    sg = lq_grids[0]
    with pytest.raises(ValueError):
        StorageFunction.from_values(sg, np.full(sg.size, np.inf))


def test_rotated_cost_zero_storage(lq, lq_grids, rng):
    lam = StorageFunction.zero(lq_grids[0])
    for x, u in rng.uniform(-1, 1, size=(20, 2)):
        assert rotated_cost(lq, lam, [x * 5], [u]) == pytest.approx(25 * x**2 + u**2, abs=1e-12)


def test_rotated_cost_riccati_storage(lq, lq_grids):
    sg = lq_grids[0]
    x = sg.points()[:, 0]
    lam = StorageFunction.from_values(sg, -PHI * x**2, "riccati")
    h = sg.spacing[0]
    for x0 in (0.3, 1.0, 1.5):
        # only the interpolation error of the quadratic remains
        assert abs(rotated_cost(lq, lam, [x0], [-x0 / PHI])) <= PHI * h**2 / 4


def test_rotated_cost_outside_grid(lq, lq_grids):
    lam = StorageFunction.zero(lq_grids[0])
    assert rotated_cost(lq, lam, [10.0], [1.0]) == math.inf


def test_narrow_storage_negative_for_wide_inputs(lq_wide, lq_fields):
    lam = storage(-lq_fields["v_plus"], "-V+[-1,1]")
    vals = [rotated_cost(lq_wide, lam, [x], [u]) for x in np.linspace(-3, 3, 61) for u in (-2.0, -1.5, 1.5, 2.0)]
    assert min(vals) < -1e-3


def test_zero_storage_strict(lq, lq_grids):
    rep = check_dissipativity(lq, lq_grids, StorageFunction.zero(lq_grids[0]), "strict", ComparisonFunction(c=1.0))
    assert rep.passed and rep.violation_count == 0
    assert rep.fitted_coefficient == pytest.approx(1.0)


def test_strict_needs_rho(lq, lq_grids):
    with pytest.raises(ValueError):
        check_dissipativity(lq, lq_grids, StorageFunction.zero(lq_grids[0]), "strict")


def test_ominus_storage_plain(lq_ws, nl_ws):
    for ws in (lq_ws, nl_ws):
        rep = check_dissipativity(ws.model, ws.grids, storage(-ws.v_ominus.value, "-Vominus"))
        assert rep.passed, rep.to_dict()


def test_double_value_storage_fails(lq, lq_grids, lq_fields):
    vp = lq_fields["v_plus"]
    rep = check_dissipativity(lq, lq_grids, StorageFunction.from_values(lq_grids[0], -2 * vp.values, "-2V+"))
    assert not rep.passed and rep.violation_count > 0
    x, u, margin, tol = rep.violations[0]
    assert margin < -tol
    assert rep.min_margin < 0 and rep.argmin is not None


def test_report_exports(lq, lq_grids, lq_fields):
    rep = check_dissipativity(lq, lq_grids, StorageFunction.from_values(lq_grids[0], -2 * lq_fields["v_plus"].values, "bad"))
    d = json.loads(rep.to_json())
    assert d["pass"] is False and d["violation_count"] == rep.violation_count
    lines = rep.violations_csv().splitlines()
    assert len(lines) == min(rep.violation_count, len(rep.violations)) + 1


def test_value_storage_is_never_strict(lq_ws):
    # with lam = -V+ every node has a control with zero rotated cost
    vp = lq_ws.v_plus.value
    L, valid = rotated_cost_table(lq_ws.model, lq_ws.grids, storage(-vp, "-V+"))
    assert np.nanmin(np.where(valid, L, np.nan)) >= -CERT_TOL
    best = np.where(valid, np.abs(L), np.inf).min(axis=1)
    assert np.all(best[vp.finite_mask] <= CERT_TOL)


def test_two_storage_identical_fails(lq_ws):
    lam = storage(-lq_ws.v_ominus.value, "l")
    rep = check_two_storage(lq_ws.model, lq_ws.grids, lam, lam, ComparisonFunction(c=0.5))
    assert not rep.passed and rep.gap_fitted_coefficient == 0.0


def test_two_storage_lq_riccati_gap(lq_ws):
    lam1 = storage(-lq_ws.v_ominus.value, "l1")
    lam2 = storage(-lq_ws.v_oplus.value, "l2")
    rep = check_two_storage(lq_ws.model, lq_ws.grids, lam1, lam2, ComparisonFunction(c=2.0))
    assert rep.passed
    assert rep.gap_fitted_coefficient == pytest.approx(SQRT5, abs=2e-2)
    assert json.loads(rep.to_json())["pass"] is True


def test_two_storage_nonlinear(nl_ws):
    lam1 = storage(-nl_ws.v_ominus.value, "l1")
    lam2 = storage(-nl_ws.v_oplus.value, "l2")
    probe = check_two_storage(nl_ws.model, nl_ws.grids, lam1, lam2, ComparisonFunction(c=0.0))
    c = probe.gap_fitted_coefficient
    assert c > 0
    rep = check_two_storage(nl_ws.model, nl_ws.grids, lam1, lam2, ComparisonFunction(c=c))
    assert rep.passed


def test_gap_coefficient_matches_value_gap(lq_ws):
    vo, vm = lq_ws.v_oplus.value, lq_ws.v_ominus.value
    rep = check_two_storage(lq_ws.model, lq_ws.grids, storage(-vm, "a"), storage(-vo, "b"), ComparisonFunction(c=0.0))
    bounds = verify_value_bounds(vo, vm, storage(-vo, "b"))
    assert rep.gap_fitted_coefficient == bounds.fitted_coefficient


def test_value_bounds_tight(lq_fields):
    vp, vm = lq_fields["v_plus"], lq_fields["v_minus"]
    for lam in (-vp, -vm):
        rep = verify_value_bounds(vp, vm, storage(lam, "lam"))
        assert rep.passed and rep.min_margin == 0.0


def test_value_bounds_riccati_gap(lq_fields):
    vp, vm = lq_fields["v_plus"], lq_fields["v_minus"]
    rep = verify_value_bounds(vp, vm, storage(-vp, "lam"), "two_storage", ComparisonFunction(c=SQRT5))
    assert rep.passed


def test_value_bounds_detects_bad_storage(lq_fields):
    vp, vm = lq_fields["v_plus"], lq_fields["v_minus"]
    rep = verify_value_bounds(vp, vm, StorageFunction.from_values(vp.grid, -2 * vp.values, "bad"))
    assert not rep.passed


def test_obstruction_nonlinear_empty(nl_ws):
    assert detect_strictness_obstruction(nl_ws.v_plus.value, nl_ws.v_minus.value) == []


def test_obstruction_zero_cost(lq):
    zero = make_model(lq.system, StageCost(lambda x, u: 0.0 * x[..., 0]), lq.constraints, "zero-cost")
    g = default_grids(lq)
    vp = dp.solve_forward(zero, g).value
    vm = dp.solve_backward(zero, g).value
    hits = detect_strictness_obstruction(vp, vm)
    both = vp.finite_mask & vm.finite_mask
    assert len(hits) == int(both.sum()) - 1
    assert [0.0] not in hits


def test_lyapunov_lq(lq_ws, lq_lyap):
    assert not lq_lyap.diverged
    V = lq_lyap.field
    assert V.at_origin() == 0.0
    x = V.grid.points()[:, 0]
    band = (np.abs(x) >= 0.5) & (np.abs(x) <= 1.5)
    coeff = 1.0 / (1.0 - (1.0 - 1.0 / PHI) ** 2)
    # control quantization shifts the closed-loop factor slightly
    np.testing.assert_allclose(V.values[band] / x[band] ** 2, coeff, atol=0.05)


def test_lyapunov_exact_decrease(lq_ws, lq_lyap):
    sol = lq_ws.v_plus
    tr = dp.transitions(lq_ws.model, *lq_ws.grids, "forward")
    rows = np.nonzero(np.isfinite(lq_lyap.values))[0]
    nxt = tr.interp(lq_lyap.values, "min")[rows, sol.policy[rows]]
    x = lq_ws.grids[0].points()[rows, 0]
    np.testing.assert_allclose(lq_lyap.values[rows] - nxt, x**2, atol=1e-8)


def test_backward_policy_destabilizes_forward(lq_ws):
    res = policy_evaluation_quadratic(lq_ws.model, lq_ws.grids, lq_ws.v_minus)
    assert res.diverged


def test_rotations_lq(lq_ws, lq_lyap):
    rot = build_rotations(lq_ws.model, lq_ws.v_oplus, lq_ws.v_ominus, lq_lyap)
    assert set(rot) == {"L1", "L2", "L3"}
    sol = lq_ws.v_plus
    rows = np.nonzero(sol.policy >= 0)[0]
    x = lq_ws.grids[0].points()[rows, 0]
    L1, _ = rotated_cost_table(lq_ws.model, lq_ws.grids, rot["L1"])
    L3, _ = rotated_cost_table(lq_ws.model, lq_ws.grids, rot["L3"])
    assert np.all(L1[rows, sol.policy[rows]] >= -CERT_TOL)
    assert np.all(L3[rows, sol.policy[rows]] >= x**2 - CERT_TOL)
    assert check_dissipativity(lq_ws.model, lq_ws.grids, rot["L1"]).passed
    assert check_dissipativity(lq_ws.model, lq_ws.grids, rot["L2"]).passed


def test_rotation_telescoping(lq_ws):
    m, g = lq_ws.model, lq_ws.grids
    sg = g[0]
    lam = -lq_ws.v_ominus.value.values
    term = dp.origin_indicator(sg)
    plain = dp.value_iterate_finite(m, g, term, 6)
    rotated = dp.value_iterate_finite(m, g, term.with_values(term.values + lam), 6,
                                      storage=ExtendedField(sg, lam, "lam"))
    for a, b in zip(plain, rotated):
        fa, fb = a.value.values, b.value.values
        assert np.array_equal(np.isfinite(fa), np.isfinite(fb))
        fin = np.isfinite(fa)
        np.testing.assert_allclose(fb[fin], fa[fin] + lam[fin], atol=CERT_TOL)


def test_strict_implies_two_storage(lq, lq_grids):
    rho = ComparisonFunction(c=1.0)
    lam = StorageFunction.zero(lq_grids[0])
    strict = check_dissipativity(lq, lq_grids, lam, "strict", rho)
    assert strict.passed
    x = lq_grids[0].points()
    lam2 = lam - rho(np.linalg.norm(x, axis=-1))
    assert check_two_storage(lq, lq_grids, lam, lam2, rho).passed


@pytest.mark.parametrize(
    "beta,expected",
    [(lambda a: a, True), (lambda a: 2 * a, False), (lambda a: a / (1 + a), True)],
)
def test_beta_property(beta, expected):
    assert check_beta_property(beta) is expected


def test_beta_property_pairs():
    assert check_beta_property(lambda a: a**2, [(0.5, 0.1)])
    assert not check_beta_property(lambda a: a**2, [(3.0, 2.0)])
