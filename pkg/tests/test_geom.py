import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bundlemap.geom import (
    BOUNDS,
    LABELS,
    PARAM_NAMES,
    DesignParams,
    GeometryError,
    GridSpec,
    build_domain,
    c_row_count,
    design_distance,
    feature_node_count,
    sample_geometry_cloud,
    sample_params,
)


def unit_params(**kw):
    return DesignParams.midpoint().with_values(width=1.0, height=1.0, **kw)


def params_strategy():
    return st.builds(
        lambda *v: DesignParams(*v),
        *[st.floats(lo, hi) for lo, hi in BOUNDS.values()],
    ).filter(lambda p: p.is_valid())


def test_bounds_cover_seven_parameters():
    assert PARAM_NAMES == (
        "width", "height", "tab_center", "tab_width", "electrode_frac", "applied_current", "initial_temperature",
    )
    assert DesignParams.midpoint().is_valid()


def test_out_of_bounds_rejected():
    with pytest.raises(GeometryError):
        DesignParams.midpoint().with_values(width=1.5).validate()
    with pytest.raises(GeometryError):
        DesignParams.midpoint().with_values(electrode_frac=1.0).validate()


def test_tab_must_fit_on_edge():
    # tab_center - tab_width / 2 < 0 is impossible inside the bounds, so probe validate directly
    p = DesignParams.midpoint().with_values(tab_center=0.2, tab_width=0.3)
    assert p.is_valid()
    assert not DesignParams(tab_center=0.1, tab_width=0.3).is_valid()


def test_grid_minimum():
    with pytest.raises(ValueError):
        GridSpec(3, 8)
    assert GridSpec(4, 4).spacing(unit_params()) == (1 / 3, 1 / 3)


def test_symmetric_tab_placement():
    p = unit_params(tab_center=0.5, tab_width=0.3)
    dom = build_domain(p, GridSpec(11, 11))
    np.testing.assert_allclose(dom.coords[dom.tab_nodes, 0], [0.4, 0.5, 0.6])
    assert list(dom.tab_nodes) == [114, 115, 116]
    dom = build_domain(p, GridSpec(5, 5))
    np.testing.assert_allclose(dom.coords[dom.tab_nodes], [[0.5, 1.0]])


def test_c_rows_rule():
    assert c_row_count(0.7, 11) == math.floor(0.7 * 10) + 1 == 8
    dom = build_domain(unit_params(electrode_frac=0.7), GridSpec(7, 11))
    assert dom.field_size("c") == 8 * 7
    assert dom.c_rows == 8
    assert np.all(dom.coords[dom.field_nodes["c"], 1] <= 0.7 + 1e-12)


def test_domain_invariants_and_determinism():
    p = DesignParams.midpoint()
    g = GridSpec()
    a, b = build_domain(p, g), build_domain(p, g)
    assert a == b
    n = g.nx * g.ny
    for f, idx in a.field_nodes.items():
        assert np.all(np.diff(idx) > 0)
        assert idx.min() >= 0 and idx.max() < n
    assert set(a.tab_nodes) <= set(a.boundary_nodes)
    assert a.tab_nodes.size > 0
    assert a.field_size("c") > 0
    # contiguous in y: c rows are 0..rows-1
    rows = np.unique(a.field_nodes["c"] // g.nx)
    assert list(rows) == list(range(len(rows)))
    # interface is the top row of the c subdomain
    assert np.all(a.interface_nodes // g.nx == rows[-1])


def test_dimension_on_4x4():
    dom = build_domain(unit_params(tab_center=1 / 3, tab_width=0.3), GridSpec(4, 4))
    assert len(dom.boundary_nodes) == 12
    assert dom.total_size == 16 + 16 + dom.field_size("c")


def test_tab_without_nodes_rejected():
    p = unit_params(tab_center=0.5, tab_width=0.05)
    with pytest.raises(GeometryError, match="holds no node"):
        build_domain(p, GridSpec(6, 6))


def test_operating_conditions_do_not_gate_geometry():
    dom = build_domain(DesignParams.midpoint().with_values(applied_current=0.0), GridSpec())
    assert dom.n_nodes == 144


@given(st.floats(0.3, 0.7), st.floats(0.3, 0.7))
def test_electrode_frac_monotone(a, b):
    lo, hi = sorted((a, b))
    g = GridSpec(8, 9)
    small = build_domain(unit_params(electrode_frac=lo), g)
    big = build_domain(unit_params(electrode_frac=hi), g)
    assert set(small.field_nodes["c"]) <= set(big.field_nodes["c"])


def test_cloud_determinism_and_labels():
    dom = build_domain(DesignParams.midpoint(), GridSpec())
    a = sample_geometry_cloud(dom, 20, 7)
    b = sample_geometry_cloud(dom, 20, 7)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not a.with_replacement
    idx, lab = dom.feature_nodes()
    lookup = {tuple(dom.coords[i]): l for i, l in zip(idx, lab)}
    for p, l in zip(a.points, a.labels):
        assert lookup[tuple(p)] == l
    feats = a.features()
    assert feats.shape == (20, 2 + len(LABELS))
    np.testing.assert_array_equal(feats[:, 2:].sum(axis=1), 1)


def test_labeled_points_on_features():
    p = DesignParams.midpoint()
    dom = build_domain(p, GridSpec())
    cloud = sample_geometry_cloud(dom, feature_node_count(GridSpec()), 0)
    hx, hy = GridSpec().spacing(p)
    for (x, y), l in zip(cloud.points, cloud.labels):
        name = LABELS[l]
        if name == "tab":
            assert abs(y - p.height) < 1e-12
            assert p.tab_center - p.tab_width / 2 - hx <= x / p.width <= p.tab_center + p.tab_width / 2 + hx
        elif name == "interface":
            assert abs(y - (dom.c_rows - 1) * hy) <= hy
        else:
            assert min(x, y, p.width - x, p.height - y) < 1e-9


def test_cloud_exhaustion_and_replacement():
    g = GridSpec()
    dom = build_domain(DesignParams.midpoint(), g)
    n = feature_node_count(g)
    idx, _ = dom.feature_nodes()
    assert n == idx.size == 54
    full = sample_geometry_cloud(dom, n, 3)
    assert {tuple(p) for p in full.points} == {tuple(dom.coords[i]) for i in idx}
    over = sample_geometry_cloud(dom, n + 5, 3)
    assert over.with_replacement and len(over) == n + 5
    with pytest.raises(ValueError):
        sample_geometry_cloud(dom, 7, 0)


def test_design_distance_examples():
    a = DesignParams.midpoint()
    assert design_distance(a, a) == 0.0
    lo, hi = BOUNDS["width"]
    assert design_distance(a.with_values(width=lo), a.with_values(width=hi)) == pytest.approx(1.0, abs=1e-15)
    low = DesignParams(*[b[0] for b in BOUNDS.values()])
    high = DesignParams(*[b[1] for b in BOUNDS.values()])
    assert design_distance(low, high) == pytest.approx(math.sqrt(7), abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(params_strategy(), params_strategy(), params_strategy())
def test_design_distance_metric_axioms(a, b, c):
    assert design_distance(a, b) == design_distance(b, a)
    assert design_distance(a, b) >= 0
    assert design_distance(a, c) <= design_distance(a, b) + design_distance(b, c) + 1e-12


def test_sampled_params_within_bounds():
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = sample_params(rng)
        for n, (lo, hi) in BOUNDS.items():
            assert lo <= getattr(p, n) <= hi
        assert p.is_valid()


def test_array_round_trip():
    p = DesignParams.midpoint().with_values(width=0.77)
    assert DesignParams.from_array(p.to_array()) == p
    with pytest.raises(ValueError):
        DesignParams.from_array([1.0, 2.0])
