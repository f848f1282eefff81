"""Reference solver for the three-field analog system.

Each time step assembles ``A = M + dt*L`` over the stacked vector
``[T, phi, c]`` with all nonlinear coefficients frozen at the previous
step, then solves ``A u_next = r``.  Fields use finite-volume 5-point
stencils with half-width control volumes on the boundary.
"""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geom import FIELDS, DesignParams, DiscreteDomain, GridSpec, build_domain

log = logging.getLogger(__name__)

DEFAULT_DT = 0.01
DEFAULT_CUTOFF = 0.6
KERNEL_MAX_DIM = 2000
RESIDUAL_TOL = 1e-8

TRANSIENT = {"T": 1.0, "phi": 0.0, "c": 1.0}


class SolverError(RuntimeError):
    def __init__(self, message: str, params: DesignParams | None = None, step: int | None = None):
        super().__init__(message)
        self.params = params
        self.step = step

    def __str__(self):
        msg = super().__str__()
        if self.step is not None:
            msg = f"step {self.step}: {msg}"
        if self.params is not None:
            msg = f"{msg} [params={self.params}]"
        return msg


@dataclass(frozen=True)
class Physics:
    alpha: float = 0.05  # thermal diffusivity
    kappa_q: float = 0.2  # ohmic heating
    h_conv: float = 0.05
    sigma0: float = 1.0
    beta: float = -0.2  # conductivity temperature slope
    T_ref: float = 1.0
    kappa_j: float = 0.5  # potential source from concentration
    c_ref: float = 0.0
    phi0: float = 1.0
    rho: float = 0.05  # tab resistance at the reference electrode area
    D: float = 0.02
    gamma: float = 0.1
    inflow_frac: float = 0.5  # share of the sink returned through the interface row
    ocv_slope: float = 0.2  # tab potential drop per unit of lost state of charge
    ref_area: float = 0.5  # electrode area of the midpoint design

    def decoupled(self) -> "Physics":
        return replace(self, kappa_q=0.0, kappa_j=0.0, beta=0.0)


PHYSICS = Physics()


@dataclass
class FiberState:
    values: dict[str, np.ndarray]
    t: int = 0

    def __post_init__(self):
        self.values = {f: np.asarray(self.values[f], dtype=np.float64) for f in FIELDS}

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.values[f] for f in FIELDS])

    def check(self, domain: DiscreteDomain) -> None:
        for f in FIELDS:
            if self.values[f].shape != (domain.field_size(f),):
                raise ValueError(
                    f"field {f}: {self.values[f].shape[0]} values for {domain.field_size(f)} nodes"
                )
            if not np.all(np.isfinite(self.values[f])):
                raise ValueError(f"field {f} holds non-finite values")

    @classmethod
    def from_stacked(cls, vec: np.ndarray, domain: DiscreteDomain, t: int) -> "FiberState":
        out, start = {}, 0
        for f in FIELDS:
            n = domain.field_size(f)
            out[f] = vec[start : start + n].copy()
            start += n
        return cls(out, t)

    def copy(self) -> "FiberState":
        return FiberState({f: v.copy() for f, v in self.values.items()}, self.t)


class _Stencil:
    """Geometry factors of one domain, independent of the field values."""

    def __init__(self, domain: DiscreteDomain):
        nx, ny = domain.grid.nx, domain.grid.ny
        hx, hy = domain.grid.spacing(domain.params)
        self.n = nx * ny
        self.nc = domain.field_size("c")
        self.width = domain.params.width

        def half(n):
            w = np.ones(n)
            w[0] = w[-1] = 0.5
            return w

        wx = half(nx) * hx
        wy = half(ny) * hy
        idx = np.arange(self.n).reshape(ny, nx)
        self.volume = np.outer(wy, wx).ravel()

        # x-edges: face length wy[j], distance hx; y-edges: face length wx[i], distance hy
        a_x, b_x = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        g_x = np.repeat(wy, nx - 1) / hx
        a_y, b_y = idx[:-1, :].ravel(), idx[1:, :].ravel()
        g_y = np.tile(wx, ny - 1) / hy
        self.edge_a = np.concatenate([a_x, a_y])
        self.edge_b = np.concatenate([b_x, b_y])
        self.edge_g = np.concatenate([g_x, g_y])

        bl = np.zeros((ny, nx))
        bl[:, 0] += wy
        bl[:, -1] += wy
        bl[0, :] += wx
        bl[-1, :] += wx
        self.boundary_len = bl.ravel()

        rows = domain.c_rows
        wyc = np.full(rows, hy)
        wyc[0] = wyc[-1] = 0.5 * hy
        if rows == 1:
            wyc[0] = 0.5 * hy
        cidx = np.arange(rows * nx).reshape(rows, nx)
        self.c_volume = np.outer(wyc, wx).ravel()
        self.c_area = float(self.c_volume.sum())
        ca_x, cb_x = cidx[:, :-1].ravel(), cidx[:, 1:].ravel()
        cg_x = np.repeat(wyc, nx - 1) / hx
        ca_y, cb_y = cidx[:-1, :].ravel(), cidx[1:, :].ravel()
        cg_y = np.tile(wx, rows - 1) / hy
        self.c_edge_a = np.concatenate([ca_x, ca_y])
        self.c_edge_b = np.concatenate([cb_x, cb_y])
        self.c_edge_g = np.concatenate([cg_x, cg_y])
        self.interface_local = cidx[-1, :]
        self.interface_len = wx.copy()

        self.Gx, self.Gy = _gradient_matrices(nx, ny, hx, hy)
        gx, gy = self.Gx.tocoo(), self.Gy.tocoo()
        self.grad_rows = np.concatenate([gx.row, gy.row])
        self.grad_cols = np.concatenate([gx.col, gy.col])
        self.grad_data = np.concatenate([gx.data, gy.data])
        self.grad_split = gx.nnz
        self.tab = domain.tab_nodes
        self.is_tab = np.zeros(self.n, dtype=bool)
        self.is_tab[self.tab] = True


def _gradient_matrices(nx, ny, hx, hy):
    def d1(n, h):
        m = sp.lil_matrix((n, n))
        for k in range(1, n - 1):
            m[k, k - 1] = -0.5 / h
            m[k, k + 1] = 0.5 / h
        m[0, 0], m[0, 1] = -1 / h, 1 / h
        m[n - 1, n - 2], m[n - 1, n - 1] = -1 / h, 1 / h
        return m.tocsr()

    Gx = sp.kron(sp.identity(ny), d1(nx, hx), format="csr")
    Gy = sp.kron(d1(ny, hy), sp.identity(nx), format="csr")
    return Gx, Gy


@functools.lru_cache(maxsize=256)
def _stencil(params: DesignParams, grid: GridSpec) -> _Stencil:
    return _Stencil(build_domain(params, grid))


def stencil_for(domain: DiscreteDomain) -> _Stencil:
    return _stencil(domain.params, domain.grid)


def _laplacian_triplets(a, b, w):
    """COO triplets of the weighted graph Laplacian sum_e w_e (u_a - u_b)."""
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([w, w, -w, -w])
    return rows, cols, vals


def electrode_area(params: DesignParams) -> float:
    return params.width * params.height * params.electrode_frac


def tab_potential(params: DesignParams, current: float, soc: float, physics: Physics = PHYSICS) -> float:
    """Dirichlet value on the tab: ohmic drop plus a state-of-charge term.

    The drop shrinks with the square root of the electrode area, so larger
    electrodes behave as lower internal resistance.
    """
    resistance = physics.rho * np.sqrt(physics.ref_area / electrode_area(params))
    return physics.phi0 - resistance * current - physics.ocv_slope * (1.0 - soc)


def state_of_charge(domain: DiscreteDomain, c: np.ndarray, c_initial_mean: float = 1.0) -> float:
    st = stencil_for(domain)
    return float(np.dot(st.c_volume, c) / st.c_area / c_initial_mean)


def sigma(T: np.ndarray, physics: Physics = PHYSICS) -> np.ndarray:
    return physics.sigma0 * (1.0 + physics.beta * (T - physics.T_ref))


@dataclass
class SystemMatrices:
    A: sp.csr_matrix
    r: np.ndarray
    offsets: dict[str, slice] = field(default_factory=dict)
    capacity: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def _offsets(domain: DiscreteDomain) -> dict[str, slice]:
    out, start = {}, 0
    for f in FIELDS:
        n = domain.field_size(f)
        out[f] = slice(start, start + n)
        start += n
    return out


def assemble_operator(
    domain: DiscreteDomain,
    params: DesignParams,
    state: FiberState,
    dt: float,
    physics: Physics = PHYSICS,
    current: float | None = None,
    heat_exchange: np.ndarray | None = None,
) -> SystemMatrices:
    """Build ``A`` and ``r`` for one implicit-Euler step from ``state``.

    ``current`` overrides the design's applied current (pack cells);
    ``heat_exchange`` is an explicit per-node rate added to the T equation.
    """
    state.check(domain)
    st = stencil_for(domain)
    n, nc = st.n, st.nc
    I_app = params.applied_current if current is None else current
    T, phi, c = state.values["T"], state.values["phi"], state.values["c"]
    oT, oP, oC = 0, n, 2 * n

    rows, cols, vals = [], [], []

    def add(r, c_, v, ro, co):
        rows.append(r + ro)
        cols.append(c_ + co)
        vals.append(v)

    # temperature: I + dt/V (alpha Lap + h*boundary)
    r_, c_, v_ = _laplacian_triplets(st.edge_a, st.edge_b, physics.alpha * st.edge_g)
    add(r_, c_, dt * v_ / st.volume[r_], oT, oT)
    diag = np.arange(n)
    add(diag, diag, 1.0 + dt * physics.h_conv * st.boundary_len / st.volume, oT, oT)
    if physics.kappa_q != 0.0:
        # linearized ohmic heating: kappa_q * grad(phi_t) . grad(phi_next)
        gx, gy = st.Gx @ phi, st.Gy @ phi
        k = st.grad_split
        frozen = np.concatenate([gx[st.grad_rows[:k]], gy[st.grad_rows[k:]]])
        add(st.grad_rows, st.grad_cols, -dt * physics.kappa_q * frozen * st.grad_data, oT, oP)

    # potential (static): dt/V * div(sigma grad) - dt*kappa_j*c on the electrode, tab rows replaced
    s = sigma(T, physics)
    w = 0.5 * (s[st.edge_a] + s[st.edge_b]) * st.edge_g
    r_, c_, v_ = _laplacian_triplets(st.edge_a, st.edge_b, w)
    keep = ~st.is_tab[r_]
    add(r_[keep], c_[keep], dt * v_[keep] / st.volume[r_[keep]], oP, oP)
    add(st.tab, st.tab, np.ones(st.tab.size), oP, oP)
    if physics.kappa_j != 0.0:
        cn = np.arange(nc)
        keep = ~st.is_tab[cn]
        add(cn[keep], cn[keep], np.full(keep.sum(), -dt * physics.kappa_j), oP, oC)

    # concentration: I + dt/Vc * D Lap on the electrode subdomain
    r_, c_, v_ = _laplacian_triplets(st.c_edge_a, st.c_edge_b, physics.D * st.c_edge_g)
    add(r_, c_, dt * v_ / st.c_volume[r_], oC, oC)
    add(np.arange(nc), np.arange(nc), np.ones(nc), oC, oC)

    dim = 2 * n + nc
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
    )

    rT = T + dt * physics.h_conv * st.boundary_len * params.initial_temperature / st.volume
    if heat_exchange is not None:
        rT = rT + dt * heat_exchange
    rP = np.zeros(n)
    rP[:nc] = -dt * physics.kappa_j * physics.c_ref
    soc = state_of_charge(domain, c)
    rP[st.tab] = tab_potential(params, I_app, soc, physics)
    rC = c - dt * physics.gamma * I_app / st.c_area
    rC = rC.copy()
    rC[st.interface_local] += (
        dt * physics.inflow_frac * physics.gamma * I_app / st.width * st.interface_len
        / st.c_volume[st.interface_local]
    )

    capacity = np.concatenate([np.full(domain.field_size(f), TRANSIENT[f]) for f in FIELDS])
    return SystemMatrices(A, np.concatenate([rT, rP, rC]), _offsets(domain), capacity)


def capacity_matrix(domain: DiscreteDomain) -> sp.dia_matrix:
    return sp.diags(np.concatenate([np.full(domain.field_size(f), TRANSIENT[f]) for f in FIELDS]))


def solve_system(system: SystemMatrices, params: DesignParams | None = None) -> np.ndarray:
    try:
        with np.errstate(all="raise"):
            u = spla.spsolve(system.A.tocsc(), system.r)
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise SolverError(f"linear solve failed: {exc}", params) from exc
    res = np.linalg.norm(system.A @ u - system.r)
    scale = np.linalg.norm(system.r)
    if not np.all(np.isfinite(u)) or res > RESIDUAL_TOL * max(scale, 1e-300):
        raise SolverError(f"relative residual {res / max(scale, 1e-300):.3e} above tolerance", params)
    return u


def step(
    domain: DiscreteDomain,
    params: DesignParams,
    state: FiberState,
    dt: float,
    physics: Physics = PHYSICS,
    current: float | None = None,
    heat_exchange: np.ndarray | None = None,
) -> FiberState:
    system = assemble_operator(domain, params, state, dt, physics, current, heat_exchange)
    u = solve_system(system, params)
    return FiberState.from_stacked(u, domain, state.t + 1)


def initial_state(domain: DiscreteDomain, physics: Physics = PHYSICS, current: float | None = None) -> FiberState:
    """Uniform T and c; phi from one static solve with the initial coefficients."""
    params = domain.params
    n, nc = domain.n_nodes, domain.field_size("c")
    T = np.full(n, params.initial_temperature)
    c = np.ones(nc)
    st = stencil_for(domain)
    I_app = params.applied_current if current is None else current
    s = sigma(T, physics)
    w = 0.5 * (s[st.edge_a] + s[st.edge_b]) * st.edge_g
    r_, c_, v_ = _laplacian_triplets(st.edge_a, st.edge_b, w)
    keep = ~st.is_tab[r_]
    A = sp.csr_matrix(
        (
            np.concatenate([v_[keep] / st.volume[r_[keep]], np.ones(st.tab.size)]),
            (np.concatenate([r_[keep], st.tab]), np.concatenate([c_[keep], st.tab])),
        ),
        shape=(n, n),
    )
    rhs = np.zeros(n)
    rhs[:nc] = physics.kappa_j * (c - physics.c_ref)
    rhs[st.tab] = tab_potential(params, I_app, 1.0, physics)
    phi = spla.spsolve(A.tocsc(), rhs)
    return FiberState({"T": T, "phi": phi, "c": c}, 0)


@dataclass
class Trajectory:
    params: DesignParams
    grid: GridSpec
    dt: float
    states: list[FiberState]
    current: float | None = None  # overrides params.applied_current when set

    def __post_init__(self):
        for k, s in enumerate(self.states):
            if s.t != k:
                raise ValueError(f"state {k} carries time index {s.t}")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def applied_current(self) -> float:
        return self.params.applied_current if self.current is None else self.current

    @functools.cached_property
    def domain(self) -> DiscreteDomain:
        return build_domain(self.params, self.grid)

    def field_series(self, name: str) -> np.ndarray:
        return np.stack([s.values[name] for s in self.states])

    @property
    def voltage(self) -> np.ndarray:
        tab = self.domain.tab_nodes
        return np.array([s.values["phi"][tab].mean() for s in self.states])

    @property
    def soc(self) -> np.ndarray:
        c0 = state_of_charge(self.domain, self.states[0].values["c"])
        return np.array([state_of_charge(self.domain, s.values["c"], c0) for s in self.states])

    @property
    def t_max(self) -> np.ndarray:
        return np.array([s.values["T"].max() for s in self.states])


def simulate(
    params: DesignParams,
    grid: GridSpec,
    n_steps: int,
    dt: float = DEFAULT_DT,
    cutoff: float | None = None,
    physics: Physics = PHYSICS,
) -> Trajectory:
    """Discharge from the uniform initial state.

    With ``cutoff`` set, the run stops after the first state whose tab
    voltage falls below it; that state is kept.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    domain = build_domain(params, grid)
    state = initial_state(domain, physics)
    states = [state]
    tab = domain.tab_nodes
    if cutoff is None or state.values["phi"][tab].mean() >= cutoff:
        for k in range(n_steps):
            try:
                state = step(domain, params, state, dt, physics)
            except SolverError as exc:
                exc.step = k
                raise
            states.append(state)
            if cutoff is not None and state.values["phi"][tab].mean() < cutoff:
                break
    traj = Trajectory(params, grid, dt, states)
    traj.__dict__["domain"] = domain
    return traj


def mass_proxy(params: DesignParams) -> float:
    return params.width * params.height * (1.0 + params.electrode_frac)


def derived_scalars(traj: Trajectory) -> tuple[float, float]:
    """(energy-density analog, peak temperature) of a discharge run.

    Energy sums ``I * V * dt`` over transitions, using the voltage at the
    end of each interval.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    v = traj.voltage
    energy = float(np.sum(traj.applied_current * v[1:] * traj.dt)) / mass_proxy(traj.params)
    return energy, float(traj.t_max.max())


@dataclass
class GreensKernel:
    K: np.ndarray
    offsets: dict[str, slice]

    def block(self, target: str, source: str) -> np.ndarray:
        return self.K[self.offsets[target], self.offsets[source]]


def greens_kernel(
    domain: DiscreteDomain,
    params: DesignParams,
    state: FiberState,
    dt: float,
    physics: Physics = PHYSICS,
) -> GreensKernel:
    system = assemble_operator(domain, params, state, dt, physics)
    if system.dim > KERNEL_MAX_DIM:
        raise ValueError(f"kernel dimension {system.dim} exceeds the dense guard {KERNEL_MAX_DIM}")
    A = system.A.toarray()
    try:
        with warnings.catch_warnings():
            # singularity is reported below as a SolverError
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(A, check_finite=True)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"dense factorization failed: {exc}", params) from exc
    if np.any(np.diag(lu[0]) == 0.0):
        raise SolverError("singular step operator", params)
    K = scipy.linalg.lu_solve(lu, np.eye(system.dim))
    return GreensKernel(K, system.offsets)


def apply_kernel(kernel: GreensKernel, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (kernel.K.shape[1],):
        raise ValueError(f"right-hand side of length {r.shape} for kernel of size {kernel.K.shape}")
    return kernel.K @ r


def continuity_ratios(
    grid: GridSpec,
    n_probes: int,
    seed: int,
    dt: float = DEFAULT_DT,
    rel_step: float = 0.01,
) -> np.ndarray:
    """Sensitivity of the one-step output to single-parameter nudges.

    Returns ``|du| / |u| / rel_step`` per probe; probes whose perturbed
    design changes the node layout come back as NaN.
    """
    from .geom import BOUNDS, PARAM_NAMES, sample_params

    rng = np.random.default_rng(seed)
    out = np.full(n_probes, np.nan)
    for k in range(n_probes):
        base = sample_params(rng)
        name = PARAM_NAMES[rng.integers(len(PARAM_NAMES))]
        lo, hi = BOUNDS[name]
        delta = rel_step * (hi - lo)
        v = getattr(base, name)
        moved = base.with_values(**{name: v + delta if v + delta <= hi else v - delta})
        try:
            u0 = simulate(base, grid, 1, dt).states[-1].stacked()
            u1 = simulate(moved, grid, 1, dt).states[-1].stacked()
        except (SolverError, ValueError):
            continue
        if u0.shape != u1.shape:
            continue
        out[k] = np.linalg.norm(u1 - u0) / np.linalg.norm(u0) / rel_step
    return out
