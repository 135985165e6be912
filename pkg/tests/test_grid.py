import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dissdp.grid import (
    ControlGrid,
    DataCorruptionError,
    ExtendedField,
    GridError,
    StateGrid,
    field_from_csv,
    field_summary,
    field_to_csv,
    inf_convolve_l1,
    interpolate,
    sup_convolve_l1,
)

INF = np.inf


def unit_grid():
    return StateGrid([-1.0], [1.0], [3])


def test_grid_construction():
    g = StateGrid([-1.0, -2.0], [1.0, 2.0], [5, 9])
    assert g.shape == (5, 9) and g.size == 45
    np.testing.assert_allclose(g.spacing, [0.5, 0.5])
    assert np.all(g.points()[g.origin_index] == 0)
    assert list(g.strides) == [9, 1]


def test_too_few_nodes():
    with pytest.raises(GridError, match=">= 3 nodes"):
        StateGrid([-1.0], [1.0], [2])


def test_origin_must_be_node():
    with pytest.raises(GridError, match="origin"):
        StateGrid([-1.0], [2.0], [3])
    with pytest.raises(GridError):
        ControlGrid([0.5], [1.5], [3])


def test_control_zero_index():
    c = ControlGrid([-1.0], [1.0], [41])
    assert c.points()[c.zero_index, 0] == 0.0


def test_interpolate_midpoint():
    g = StateGrid([0.0], [2.0], [3])
    f = ExtendedField(g, [0.0, 2.0, 4.0])
    assert interpolate(f, [0.5]) == 1.0


def test_interpolate_infinity_propagates():
    g = StateGrid([0.0], [2.0], [3])
    f = ExtendedField(g, [0.0, INF, 4.0])
    assert interpolate(f, [0.5]) == INF
    # the vertex at +inf does not participate at the left node itself
    assert interpolate(f, [0.0]) == 0.0


def test_interpolate_mixed_infinities():
    g = StateGrid([0.0], [2.0], [3])
    f = ExtendedField(g, [-INF, INF, 4.0])
    with pytest.raises(DataCorruptionError):
        interpolate(f, [0.5])


def test_interpolate_outside_box_by_polarity():
    g = unit_grid()
    assert interpolate(ExtendedField(g, [0, 0, 0]), [1.5]) == INF
    assert interpolate(ExtendedField(g, [0, 0, 0], polarity="max"), [1.5]) == -INF


def test_interpolate_reproduces_nodes(rng):
    g = StateGrid([-1.0, -2.0], [1.0, 2.0], [5, 9])
    v = rng.normal(size=g.size)
    f = ExtendedField(g, v)
    np.testing.assert_array_equal(interpolate(f, g.points()), v)


def test_interpolate_bilinear(rng):
    g = StateGrid([-1.0, -1.0], [1.0, 1.0], [3, 3])
    a, b, c = rng.normal(size=3)
    pts = g.points()
    f = ExtendedField(g, a + b * pts[:, 0] + c * pts[:, 1] + pts[:, 0] * pts[:, 1])
    x = rng.uniform(-1, 1, size=(50, 2))
    exact = a + b * x[:, 0] + c * x[:, 1] + x[:, 0] * x[:, 1]
    np.testing.assert_allclose(interpolate(f, x), exact, atol=1e-12)


def test_inf_convolve_examples():
    g = unit_grid()
    out = inf_convolve_l1(ExtendedField(g, [INF, 0.0, INF]), 2.0)
    np.testing.assert_array_equal(out.values, [2.0, 0.0, 2.0])
    out = inf_convolve_l1(ExtendedField(g, [4.0, 0.0, 4.0]), 1.0)
    np.testing.assert_array_equal(out.values, [1.0, 0.0, 1.0])
    out = inf_convolve_l1(ExtendedField(g, np.zeros(3)), 7.5)
    np.testing.assert_array_equal(out.values, np.zeros(3))


def test_sup_convolve_examples():
    g = unit_grid()
    out = sup_convolve_l1(ExtendedField(g, [-INF, 0.0, -INF], polarity="max"), 2.0)
    np.testing.assert_array_equal(out.values, [-2.0, 0.0, -2.0])
    out = sup_convolve_l1(ExtendedField(g, np.zeros(3), polarity="max"), 3.0)
    np.testing.assert_array_equal(out.values, np.zeros(3))


def test_convolve_rejects_bad_input():
    g = unit_grid()
    with pytest.raises(GridError):
        inf_convolve_l1(ExtendedField(g, np.zeros(3)), 0.0)
    with pytest.raises(GridError):
        inf_convolve_l1(ExtendedField(g, [-INF, 0.0, 0.0]), 1.0)


def brute_force_inf_convolve(f, p):
    pts = f.grid.points()
    d = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=-1)
    return np.min(f.values[None, :] + p * d, axis=1)


def field_strategy(max_dims=3, max_nodes=15):
    @st.composite
    def build(draw):
        nd = draw(st.integers(1, max_dims))
        nodes = [draw(st.sampled_from([3, 5, 7, 9, 11, 13, 15][: max_nodes // 2])) for _ in range(nd)]
        spans = [draw(st.sampled_from([0.5, 1.0, 2.0, 3.0])) for _ in range(nd)]
        g = StateGrid([-s for s in spans], spans, nodes)
        finite = st.floats(-50, 50, allow_nan=False, width=32)
        vals = draw(arrays(float, g.size, elements=st.one_of(finite, finite, finite, st.just(INF))))
        return ExtendedField(g, vals)

    return build()


@settings(max_examples=60, deadline=None)
@given(field_strategy(), st.sampled_from([0.25, 1.0, 3.0, 10.0]))
def test_inf_convolve_matches_brute_force(f, p):
    out = inf_convolve_l1(f, p)
    ref = brute_force_inf_convolve(f, p)
    # sweeps accumulate the same path sums as the brute-force distance, up to rounding
    fin = np.isfinite(ref)
    assert np.array_equal(np.isfinite(out.values), fin)
    np.testing.assert_allclose(out.values[fin], ref[fin], rtol=0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(field_strategy(), st.sampled_from([0.5, 2.0, 8.0]))
def test_inf_convolve_idempotent_and_below(f, p):
    once = inf_convolve_l1(f, p)
    twice = inf_convolve_l1(once, p)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-9)
    assert np.all(once.values <= f.values)


@settings(max_examples=60, deadline=None)
@given(field_strategy(), st.sampled_from([0.5, 2.0, 8.0]))
def test_sup_convolve_duality_and_above(f, p):
    neg = ExtendedField(f.grid, -f.values, polarity="max")
    sup = sup_convolve_l1(neg, p)
    np.testing.assert_array_equal(sup.values, -inf_convolve_l1(f, p).values)
    assert np.all(sup.values >= neg.values)


@settings(max_examples=80, deadline=None)
@given(
    arrays(float, 9, elements=st.floats(-10, 10, allow_nan=False)),
    st.integers(0, 8),
    st.floats(0, 5, allow_nan=False),
    arrays(float, (20, 2), elements=st.floats(-1, 1, allow_nan=False)),
)
def test_interpolate_monotone(vals, k, bump, x):
    g = StateGrid([-1.0, -1.0], [1.0, 1.0], [3, 3])
    raised = vals.copy()
    raised[k] += bump
    lo = interpolate(ExtendedField(g, vals), x)
    hi = interpolate(ExtendedField(g, raised), x)
    assert np.all(hi >= lo - 1e-12)


def test_csv_round_trip(rng):
    g = StateGrid([-1.0, -1.0], [1.0, 1.0], [3, 5])
    v = rng.normal(size=g.size)
    v[[0, 4]] = INF
    f = ExtendedField(g, v, "V")
    text = field_to_csv(f)
    lines = text.splitlines()
    assert lines[0] == "x1,x2,value"
    assert lines[1].endswith("+inf")
    back = field_from_csv(text, g)
    np.testing.assert_array_equal(back.values, v)


def test_field_summary_json():
    g = unit_grid()
    s = field_summary(ExtendedField(g, [3.0, -1.0, INF], "W"))
    assert s["min"] == -1.0 and s["finite_nodes"] == 2
    json.dumps(s)


def test_field_rejects_wrong_size():
    with pytest.raises(GridError):
        ExtendedField(unit_grid(), np.zeros(4))


def test_row_major_storage():
    g = StateGrid([-1.0, -2.0], [1.0, 2.0], [3, 5])
    pts = g.points()
    expected = list(itertools.product(g.axes[0], g.axes[1]))
    np.testing.assert_array_equal(pts, np.array(expected))
