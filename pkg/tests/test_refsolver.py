import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bundlemap.geom import DesignParams, GridSpec, build_domain, sample_params
from bundlemap.refsolver import (
    KERNEL_MAX_DIM,
    PHYSICS,
    FiberState,
    GreensKernel,
    SolverError,
    Trajectory,
    apply_kernel,
    assemble_operator,
    continuity_ratios,
    derived_scalars,
    greens_kernel,
    initial_state,
    mass_proxy,
    simulate,
    step,
    tab_potential,
)

GRID6 = GridSpec(6, 6)


def valid_on(grid, rng, n):
    out = []
    while len(out) < n:
        p = sample_params(rng)
        try:
            build_domain(p, grid)
        except ValueError:
            continue
        out.append(p)
    return out


def mid_state(p, grid, n=3):
    return simulate(p, grid, n).states[-1]


def test_operator_shape_and_dimension(wide_tab):
    dom = build_domain(wide_tab, GRID6)
    sys_ = assemble_operator(dom, wide_tab, initial_state(dom), 0.01)
    assert sys_.A.shape == (sys_.dim, sys_.dim) == (dom.total_size,) * 2
    assert sys_.r.shape == (dom.total_size,)
    assert sys_.capacity[sys_.offsets["phi"]].max() == 0.0
    assert np.all(sys_.capacity[sys_.offsets["T"]] == 1.0)


def test_kernel_equals_step_on_random_designs():
    rng = np.random.default_rng(0)
    for p in valid_on(GRID6, rng, 6):
        dom = build_domain(p, GRID6)
        s = mid_state(p, GRID6)
        nxt = step(dom, p, s, 0.01).stacked()
        k = greens_kernel(dom, p, s, 0.01)
        r = assemble_operator(dom, p, s, 0.01).r
        via = apply_kernel(k, r)
        assert np.max(np.abs(nxt - via)) / np.max(np.abs(nxt)) <= 1e-10


def test_kernel_is_inverse(wide_tab):
    dom = build_domain(wide_tab, GRID6)
    s = initial_state(dom)
    k = greens_kernel(dom, wide_tab, s, 0.01)
    A = assemble_operator(dom, wide_tab, s, 0.01).A.toarray()
    assert np.max(np.abs(A @ k.K - np.eye(A.shape[0]))) <= 1e-10


def test_decoupled_kernel_is_block_diagonal(wide_tab):
    phys = PHYSICS.decoupled()
    dom = build_domain(wide_tab, GRID6)
    s = simulate(wide_tab, GRID6, 2, physics=phys).states[-1]
    k = greens_kernel(dom, wide_tab, s, 0.01, phys)
    for a in ("T", "phi", "c"):
        for b in ("T", "phi", "c"):
            if a != b:
                assert np.all(k.block(a, b) == 0.0), (a, b)
    coupled = greens_kernel(dom, wide_tab, s, 0.01)
    assert np.abs(coupled.block("T", "phi")).max() > 0
    assert np.abs(coupled.block("phi", "c")).max() > 0


@pytest.mark.parametrize("const,block", [("kappa_q", ("T", "phi")), ("kappa_j", ("phi", "c"))])
def test_zeroing_a_coupling_zeroes_its_block(wide_tab, const, block):
    phys = dataclasses.replace(PHYSICS, **{const: 0.0})
    dom = build_domain(wide_tab, GRID6)
    s = mid_state(wide_tab, GRID6)
    k = greens_kernel(dom, wide_tab, s, 0.01, phys)
    assert np.all(k.block(*block) == 0.0)


def test_kernel_dimension_guard():
    grid = GridSpec(30, 30)
    p = DesignParams.midpoint()
    dom = build_domain(p, grid)
    assert dom.total_size > KERNEL_MAX_DIM
    with pytest.raises(ValueError, match="dense guard"):
        greens_kernel(dom, p, initial_state(dom), 0.01)


def test_apply_kernel_identity_and_linearity():
    rng = np.random.default_rng(1)
    K = GreensKernel(np.eye(5), {})
    r = rng.normal(size=5)
    np.testing.assert_array_equal(apply_kernel(K, r), r)
    K = GreensKernel(rng.normal(size=(6, 6)), {})
    r1, r2 = rng.normal(size=6), rng.normal(size=6)
    lhs = apply_kernel(K, 2.5 * r1 - 0.7 * r2)
    rhs = 2.5 * apply_kernel(K, r1) - 0.7 * apply_kernel(K, r2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.abs(lhs).max())
    with pytest.raises(ValueError):
        apply_kernel(K, np.ones(5))


def test_equilibrium_fixed_point(wide_tab):
    p = wide_tab.with_values(applied_current=0.0)
    phys = dataclasses.replace(PHYSICS, kappa_q=0.0)
    dom = build_domain(p, GRID6)
    s = initial_state(dom, phys)
    for _ in range(3):
        s = step(dom, p, s, 0.01, phys)
        assert np.max(np.abs(s.values["T"] - p.initial_temperature)) <= 1e-8


def test_static_field_ignores_its_previous_values(wide_tab):
    dom = build_domain(wide_tab, GRID6)
    s = mid_state(wide_tab, GRID6)
    bumped = s.copy()
    bumped.values["phi"] = bumped.values["phi"] + np.random.default_rng(0).normal(size=dom.n_nodes)
    a = step(dom, wide_tab, s, 0.01, dataclasses.replace(PHYSICS, kappa_q=0.0))
    b = step(dom, wide_tab, bumped, 0.01, dataclasses.replace(PHYSICS, kappa_q=0.0))
    np.testing.assert_allclose(b.values["phi"], a.values["phi"], atol=1e-9)


def test_mean_c_and_voltage_decrease():
    rng = np.random.default_rng(5)
    grid = GridSpec(8, 8)
    for p in valid_on(grid, rng, 20):
        tr = simulate(p, grid, 10)
        mean_c = tr.field_series("c").mean(axis=1)
        assert np.all(np.diff(mean_c) < 0)
        assert np.all(np.diff(tr.voltage) <= 1e-12)
        assert np.all(np.diff(tr.soc) < 0)


def test_simulate_preconditions_and_cutoff(wide_tab):
    with pytest.raises(ValueError):
        simulate(wide_tab, GRID6, 0)
    tr = simulate(wide_tab, GRID6, 5, cutoff=10.0)
    assert len(tr) == 1
    tr = simulate(wide_tab, GRID6, 5)
    assert len(tr) == 6 and [s.t for s in tr.states] == list(range(6))
    assert len(tr.voltage) == len(tr.soc) == len(tr.t_max) == len(tr)


def test_cutoff_keeps_crossing_state():
    p = DesignParams.midpoint().with_values(applied_current=2.0)
    tr = simulate(p, GridSpec(8, 8), 400, dt=0.05, cutoff=0.6)
    assert tr.voltage[-1] < 0.6
    assert np.all(tr.voltage[:-1] >= 0.6)


def test_simulate_is_deterministic(wide_tab):
    a = simulate(wide_tab, GRID6, 4)
    b = simulate(wide_tab, GRID6, 4)
    for x, y in zip(a.states, b.states):
        np.testing.assert_array_equal(x.stacked(), y.stacked())


def test_states_are_finite_and_sized(wide_tab):
    dom = build_domain(wide_tab, GRID6)
    for s in simulate(wide_tab, GRID6, 4).states:
        s.check(dom)
    bad = FiberState({"T": np.full(dom.n_nodes, np.nan), "phi": np.zeros(dom.n_nodes), "c": np.ones(dom.field_size("c"))}, 0)
    with pytest.raises(ValueError):
        bad.check(dom)


def test_trajectory_time_indices():
    s = FiberState({"T": np.ones(2), "phi": np.ones(2), "c": np.ones(1)}, 1)
    with pytest.raises(ValueError):
        Trajectory(DesignParams.midpoint(), GRID6, 0.01, [s])


def test_derived_scalars(wide_tab):
    tr = simulate(wide_tab, GRID6, 6)
    single = Trajectory(tr.params, tr.grid, tr.dt, tr.states[:1])
    e, t = derived_scalars(single)
    assert e == 0.0 and t == tr.states[0].values["T"].max()
    e, t = derived_scalars(tr)
    expect = np.sum(wide_tab.applied_current * tr.voltage[1:] * tr.dt) / mass_proxy(wide_tab)
    assert e == pytest.approx(expect, rel=1e-14)
    assert t >= wide_tab.initial_temperature


def test_energy_riemann_scaling(wide_tab):
    # a frozen voltage series: halving the steps and doubling dt keeps the sum
    tr = simulate(wide_tab, GRID6, 4)
    frozen = [tr.states[0]] + [dataclasses.replace(tr.states[1], t=k) for k in range(1, 5)]
    long = Trajectory(wide_tab, GRID6, 0.01, frozen)
    short = Trajectory(wide_tab, GRID6, 0.02, frozen[:3])
    assert derived_scalars(long)[0] == pytest.approx(derived_scalars(short)[0], rel=1e-14)


def test_peak_temperature_never_below_start():
    rng = np.random.default_rng(11)
    grid = GridSpec(8, 8)
    for p in valid_on(grid, rng, 20):
        _, t = derived_scalars(simulate(p, grid, 5))
        assert t >= p.initial_temperature - 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_tab_potential_monotone(current, soc_a, soc_b):
    p = DesignParams.midpoint()
    lo, hi = sorted((soc_a, soc_b))
    assert tab_potential(p, current, lo) <= tab_potential(p, current, hi)
    assert tab_potential(p, current * 1.1, hi) < tab_potential(p, current, hi)
    # bigger electrodes lose less to the tab resistance
    assert tab_potential(p.with_values(width=1.3), current, hi) > tab_potential(p.with_values(width=0.7), current, hi)


def test_singular_operator_reports_params(wide_tab):
    dom = build_domain(wide_tab, GRID6)
    s = initial_state(dom)
    with pytest.raises(SolverError) as info:
        greens_kernel(dom, wide_tab, s, 0.01, dataclasses.replace(PHYSICS, sigma0=0.0))
    assert info.value.params == wide_tab


def test_geometry_continuity_has_no_outliers():
    ratios = continuity_ratios(GridSpec(12, 12), 50, seed=0)
    ok = ratios[np.isfinite(ratios)]
    assert ok.size >= 40
    assert np.all(ok <= 10 * np.median(ok))
