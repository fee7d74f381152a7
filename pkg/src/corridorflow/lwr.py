"""Closed-form cumulative-count (Moskowitz) solutions for the kinematic-wave
model with a triangular flux law.

A link [xi, chi] carries a piecewise-constant initial density over k_max
equal segments plus per-step inflow and outflow sequences at its boundaries.
Each of those value conditions generates an explicit piecewise-affine
solution; the true cumulative count at any (t, x) is the pointwise minimum
over all of them, and the density is the negative space-slope of whichever
component attains the minimum.

All quantities are SI and lane-aggregated: m, s, veh/m, veh/s.  Segment and
step indices in the public functions are 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: absolute tolerance for the case guards; boundaries between adjacent cases
#: are shared, so either branch is valid at a boundary point.
GUARD_TOL = 1e-9

INF = math.inf


class InvalidParameterError(ValueError):
    pass


def critical_density(vf: float, w: float, rho_m: float) -> float:
    """Density at which a triangular flux law reaches capacity."""
    if vf <= 0 or w >= 0 or rho_m <= 0:
        raise InvalidParameterError(
            f"need vf > 0, w < 0, rho_m > 0; got vf={vf}, w={w}, rho_m={rho_m}"
        )
    return -rho_m * w / (vf - w)


@dataclass(frozen=True)
class TriangularFD:
    """Triangular flux law: free-flow slope vf, congested slope w (< 0)."""

    vf: float
    w: float
    rho_m: float

    def __post_init__(self):
        critical_density(self.vf, self.w, self.rho_m)  # validates signs

    @property
    def rho_c(self) -> float:
        return critical_density(self.vf, self.w, self.rho_m)

    @property
    def Q(self) -> float:
        return self.vf * self.rho_c


def flux(fd: TriangularFD, rho: float) -> float:
    """Flow at a given density; concave, zero at rho=0 and rho=rho_m."""
    if rho < -GUARD_TOL or rho > fd.rho_m + GUARD_TOL:
        raise InvalidParameterError(f"density {rho} outside [0, {fd.rho_m}]")
    return min(fd.vf * rho, fd.w * (rho - fd.rho_m))


@dataclass(frozen=True)
class LinkGeometry:
    """Spatial extent of a link split into k_max equal segments."""

    xi: float
    chi: float
    k_max: int
    lanes: int = 1

    def __post_init__(self):
        if self.chi <= self.xi or self.k_max < 1:
            raise InvalidParameterError("need chi > xi and k_max >= 1")

    @property
    def X(self) -> float:
        return (self.chi - self.xi) / self.k_max

    @property
    def length(self) -> float:
        return self.chi - self.xi

    def segment_edges(self) -> np.ndarray:
        return self.xi + self.X * np.arange(self.k_max + 1)


@dataclass
class ValueConditionSet:
    """Initial densities plus boundary flow sequences for one link."""

    initial_density: np.ndarray
    inflow: np.ndarray
    outflow: np.ndarray
    T: float

    def __post_init__(self):
        self.initial_density = np.asarray(self.initial_density, dtype=float)
        self.inflow = np.asarray(self.inflow, dtype=float)
        self.outflow = np.asarray(self.outflow, dtype=float)
        if self.T <= 0:
            raise InvalidParameterError("step size must be positive")
        if len(self.inflow) != len(self.outflow):
            raise InvalidParameterError("inflow/outflow must cover the same steps")

    @property
    def k_max(self) -> int:
        return len(self.initial_density)

    @property
    def n_max(self) -> int:
        return len(self.inflow)

    def validate(self, fd: TriangularFD) -> None:
        if np.any(self.initial_density < -GUARD_TOL) or np.any(
            self.initial_density > fd.rho_m + GUARD_TOL
        ):
            raise InvalidParameterError("initial densities outside [0, rho_m]")
        for q in (self.inflow, self.outflow):
            if np.any(q < -GUARD_TOL) or np.any(q > fd.Q + GUARD_TOL):
                raise InvalidParameterError("boundary flows outside [0, Q]")


# ---------------------------------------------------------------------------
# Per-component solutions.  Each component is affine in the boundary flows,
# which the constraint builders exploit; numeric evaluation just folds the
# coefficients with actual flow values.
# ---------------------------------------------------------------------------


@dataclass
class ComponentExpr:
    """One value-condition component at a fixed (t, x), affine in the flows.

    value = const + rcvf * (rho_c*vf) + sum qin[n]*q_in(n) + sum qout[n]*q_out(n)
                  + sum kin[n] * (q_in(n)/vf)

    ``rcvf`` and ``kin`` terms are kept separate so models with a selectable
    free-flow speed can substitute their linearized counterparts; ``slope``
    carries the analytic d/dx of the branch (flow coefficients included via
    the same dictionaries in ``slope_qin``/``slope_qout``).
    """

    const: float = 0.0
    rcvf: float = 0.0
    qin: dict = field(default_factory=dict)
    qout: dict = field(default_factory=dict)
    kin: dict = field(default_factory=dict)
    slope_const: float = 0.0
    slope_qin: dict = field(default_factory=dict)
    slope_qout: dict = field(default_factory=dict)
    tag: str = ""

    def value(self, fd: TriangularFD, inflow, outflow) -> float:
        v = self.const + self.rcvf * fd.Q
        for n, a in self.qin.items():
            v += a * inflow[n - 1]
        for n, a in self.kin.items():
            v += a * inflow[n - 1] / fd.vf
        for n, a in self.qout.items():
            v += a * outflow[n - 1]
        return v

    def slope(self, inflow, outflow) -> float:
        s = self.slope_const
        for n, a in self.slope_qin.items():
            s += a * inflow[n - 1]
        for n, a in self.slope_qout.items():
            s += a * outflow[n - 1]
        return s


def initial_component_expr(
    fd: TriangularFD, geom: LinkGeometry, densities, k: int, t: float, x: float
) -> ComponentExpr | None:
    """Component generated by the initial density of segment k (Eq. branch
    selection per the triangular specialization); None outside its cone."""
    rho = np.asarray(densities, dtype=float)
    xh = x - geom.xi
    X = geom.X
    left = (k - 1) * X
    right = k * X
    if xh < left + t * fd.w - GUARD_TOL or xh > right + fd.vf * t + GUARD_TOL:
        return None
    head = -float(np.sum(rho[: k - 1])) * X
    rk = float(rho[k - 1])
    rc = fd.rho_c
    if rk <= rc + GUARD_TOL:
        if xh >= left + fd.vf * t - GUARD_TOL:
            val = head + rk * (t * fd.vf + left - xh)
            return ComponentExpr(const=val, slope_const=-rk, tag=f"ic{k}b")
        val = head + rc * (t * fd.vf + left - xh)
        return ComponentExpr(const=val, slope_const=-rc, tag=f"ic{k}c")
    if xh <= right + t * fd.w + GUARD_TOL:
        val = head + rk * (t * fd.w + left - xh) - fd.rho_m * t * fd.w
        return ComponentExpr(const=val, slope_const=-rk, tag=f"ic{k}d")
    val = head - rk * X + rc * (t * fd.w + right - xh) - fd.rho_m * t * fd.w
    return ComponentExpr(const=val, slope_const=-rc, tag=f"ic{k}e")


def upstream_component_expr(
    fd: TriangularFD, geom: LinkGeometry, T: float, n: int, t: float, x: float
) -> ComponentExpr | None:
    """Component generated by the inflow of step n; None before its
    free-flow characteristic reaches x."""
    xh = x - geom.xi
    lag = xh / fd.vf
    if t < (n - 1) * T + lag - GUARD_TOL:
        return None
    expr = ComponentExpr(tag=f"up{n}")
    for i in range(1, n):
        expr.qin[i] = T
    if t <= n * T + lag + GUARD_TOL:
        # affine in the step-n inflow; the /vf part stays separate
        expr.qin[n] = expr.qin.get(n, 0.0) + (t - (n - 1) * T)
        expr.kin[n] = -xh
        expr.slope_qin[n] = -1.0 / fd.vf
        expr.tag += "b"
        return expr
    expr.qin[n] = expr.qin.get(n, 0.0) + T
    expr.rcvf = t - n * T
    expr.const = -fd.rho_c * xh
    expr.slope_const = -fd.rho_c
    expr.tag += "c"
    return expr


def downstream_component_expr(
    fd: TriangularFD,
    geom: LinkGeometry,
    densities,
    T: float,
    n: int,
    t: float,
    x: float,
) -> ComponentExpr | None:
    """Component generated by the outflow of step n; None before its
    backward wave reaches x."""
    rho = np.asarray(densities, dtype=float)
    xt = x - geom.chi
    lag = xt / fd.w  # >= 0 for x <= chi
    mass = float(np.sum(rho)) * geom.X
    if t < (n - 1) * T + lag - GUARD_TOL:
        return None
    expr = ComponentExpr(tag=f"dn{n}")
    for i in range(1, n):
        expr.qout[i] = T
    if t <= n * T + lag + GUARD_TOL:
        expr.qout[n] = expr.qout.get(n, 0.0) + (t - lag - (n - 1) * T)
        expr.const = -mass - fd.rho_m * xt
        expr.slope_const = -fd.rho_m
        expr.slope_qout[n] = -1.0 / fd.w
        expr.tag += "b"
        return expr
    expr.qout[n] = expr.qout.get(n, 0.0) + T
    expr.rcvf = t - n * T
    expr.const = -mass - fd.rho_c * xt
    expr.slope_const = -fd.rho_c
    expr.tag += "c"
    return expr


def all_component_exprs(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, t: float, x: float
) -> list[ComponentExpr]:
    comps = []
    for k in range(1, geom.k_max + 1):
        c = initial_component_expr(fd, geom, vc.initial_density, k, t, x)
        if c is not None:
            comps.append(c)
    for n in range(1, vc.n_max + 1):
        c = upstream_component_expr(fd, geom, vc.T, n, t, x)
        if c is not None:
            comps.append(c)
        c = downstream_component_expr(fd, geom, vc.initial_density, vc.T, n, t, x)
        if c is not None:
            comps.append(c)
    return comps


# ---------------------------------------------------------------------------
# Public point evaluations.
# ---------------------------------------------------------------------------


def _check_domain(geom: LinkGeometry, t: float, x: float):
    if t < -GUARD_TOL:
        raise InvalidParameterError("t must be nonnegative")
    if x < geom.xi - GUARD_TOL or x > geom.chi + GUARD_TOL:
        raise InvalidParameterError(f"x={x} outside [{geom.xi}, {geom.chi}]")


def m_initial(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, k: int, t: float, x: float
) -> float:
    """Cumulative-count solution from segment k's initial condition; +inf
    outside its domain of influence."""
    if not 1 <= k <= geom.k_max:
        raise InvalidParameterError(f"segment index {k} outside 1..{geom.k_max}")
    _check_domain(geom, t, x)
    c = initial_component_expr(fd, geom, vc.initial_density, k, t, x)
    return INF if c is None else c.value(fd, vc.inflow, vc.outflow)


def m_upstream(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, n: int, t: float, x: float
) -> float:
    """Cumulative-count solution from the step-n inflow condition."""
    if not 1 <= n <= vc.n_max:
        raise InvalidParameterError(f"step index {n} outside 1..{vc.n_max}")
    _check_domain(geom, t, x)
    c = upstream_component_expr(fd, geom, vc.T, n, t, x)
    return INF if c is None else c.value(fd, vc.inflow, vc.outflow)


def m_downstream(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, n: int, t: float, x: float
) -> float:
    """Cumulative-count solution from the step-n outflow condition."""
    if not 1 <= n <= vc.n_max:
        raise InvalidParameterError(f"step index {n} outside 1..{vc.n_max}")
    _check_domain(geom, t, x)
    c = downstream_component_expr(fd, geom, vc.initial_density, vc.T, n, t, x)
    return INF if c is None else c.value(fd, vc.inflow, vc.outflow)


def moskowitz(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, t: float, x: float
) -> float:
    """Pointwise minimum over all value-condition components."""
    _check_domain(geom, t, x)
    comps = all_component_exprs(vc, fd, geom, t, x)
    if not comps:
        return INF
    return min(c.value(fd, vc.inflow, vc.outflow) for c in comps)


def density_profile(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, t: float, positions
) -> np.ndarray:
    """Density at each position: negative space-slope of the minimizing
    component; at a kink the slope of the downstream-side branch is used."""
    out = np.empty(len(positions))
    for i, x in enumerate(positions):
        comps = all_component_exprs(vc, fd, geom, t, x)
        if not comps:
            out[i] = 0.0
            continue
        vals = [c.value(fd, vc.inflow, vc.outflow) for c in comps]
        best = min(vals)
        tol = 1e-7 * max(1.0, abs(best))
        # downstream-side branch = the tied component that stays minimal for
        # x slightly larger, i.e. the one with the smallest slope
        slope = min(
            c.slope(vc.inflow, vc.outflow)
            for c, v in zip(comps, vals)
            if v <= best + tol
        )
        out[i] = min(max(-slope, 0.0), fd.rho_m)
    return out


def segment_mean_densities(
    vc: ValueConditionSet,
    fd: TriangularFD,
    geom: LinkGeometry,
    t: float,
    resolution: int = 1,
) -> np.ndarray:
    """Exact per-segment mean densities at time t via cumulative-count
    differences; subdividing each segment (resolution > 1) telescopes to the
    same value and is kept for spot-checking."""
    resolution = max(1, int(resolution))
    edges = geom.segment_edges()
    means = np.empty(geom.k_max)
    for k in range(geom.k_max):
        sub = np.linspace(edges[k], edges[k + 1], resolution + 1)
        total = 0.0
        for a, b in zip(sub[:-1], sub[1:]):
            total += moskowitz(vc, fd, geom, t, a) - moskowitz(vc, fd, geom, t, b)
        means[k] = total / geom.X
    return np.clip(means, 0.0, fd.rho_m)


def max_exit_count(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, t: float
) -> float:
    """Most vehicles that could have left through chi by time t if the
    downstream were unrestricted (initial + upstream components only)."""
    mass = float(np.sum(vc.initial_density)) * geom.X
    best = INF
    for k in range(1, geom.k_max + 1):
        c = initial_component_expr(fd, geom, vc.initial_density, k, t, geom.chi)
        if c is not None:
            best = min(best, c.value(fd, vc.inflow, vc.outflow))
    for n in range(1, vc.n_max + 1):
        c = upstream_component_expr(fd, geom, vc.T, n, t, geom.chi)
        if c is not None:
            best = min(best, c.value(fd, vc.inflow, vc.outflow))
    return best + mass if best < INF else INF


def max_entry_count(
    vc: ValueConditionSet, fd: TriangularFD, geom: LinkGeometry, t: float
) -> float:
    """Most vehicles that could have entered through xi by time t if the
    upstream demand were unrestricted (initial + downstream components)."""
    best = INF
    for k in range(1, geom.k_max + 1):
        c = initial_component_expr(fd, geom, vc.initial_density, k, t, geom.xi)
        if c is not None:
            best = min(best, c.value(fd, vc.inflow, vc.outflow))
    for n in range(1, vc.n_max + 1):
        c = downstream_component_expr(
            fd, geom, vc.initial_density, vc.T, n, t, geom.xi
        )
        if c is not None:
            best = min(best, c.value(fd, vc.inflow, vc.outflow))
    return best


# ---------------------------------------------------------------------------
# First-order finite-volume reference solution.
# ---------------------------------------------------------------------------


class CFLError(ValueError):
    pass


@dataclass
class GodunovField:
    """Cell densities over time plus cumulative boundary counts."""

    dt: float
    dx: float
    densities: np.ndarray  # (n_steps+1, n_cells)
    cum_in: np.ndarray  # (n_steps+1,)
    cum_out: np.ndarray

    def cell_centers(self, geom: LinkGeometry) -> np.ndarray:
        n = self.densities.shape[1]
        return geom.xi + self.dx * (np.arange(n) + 0.5)

    def count(self, step: int, x: float, geom: LinkGeometry) -> float:
        """Cumulative count at (step*dt, x): inflow so far minus vehicles
        currently stored between xi and x."""
        rho = self.densities[step]
        edges = geom.xi + self.dx * np.arange(len(rho) + 1)
        stored = 0.0
        for i in range(len(rho)):
            if edges[i + 1] <= x:
                stored += rho[i] * self.dx
            elif edges[i] < x:
                stored += rho[i] * (x - edges[i])
        return self.cum_in[step] - stored


def godunov_oracle(
    vc: ValueConditionSet,
    fd: TriangularFD,
    geom: LinkGeometry,
    dt: float,
    dx: float,
) -> GodunovField:
    """March the conservation law with demand/supply interface fluxes.

    The prescribed inflow is clipped by the first cell's receiving capacity
    and the prescribed outflow by the last cell's sending capacity, mirroring
    how boundary conditions act on the exact solution.
    """
    if dt > dx / fd.vf + GUARD_TOL:
        raise CFLError(f"dt={dt} violates dt <= dx/vf = {dx / fd.vf}")
    n_cells = int(round(geom.length / dx))
    if abs(n_cells * dx - geom.length) > 1e-6:
        raise InvalidParameterError("dx must divide the link length")
    t_end = vc.n_max * vc.T
    n_steps = int(round(t_end / dt))

    # start cells from the segment-wise initial densities
    rho = np.empty(n_cells)
    centers = geom.xi + dx * (np.arange(n_cells) + 0.5)
    seg = np.minimum(((centers - geom.xi) / geom.X).astype(int), geom.k_max - 1)
    rho[:] = vc.initial_density[seg]

    def sending(r):
        return np.minimum(fd.vf * r, fd.Q)

    def receiving(r):
        return np.minimum(fd.Q, fd.w * (r - fd.rho_m))

    densities = np.empty((n_steps + 1, n_cells))
    densities[0] = rho
    cum_in = np.zeros(n_steps + 1)
    cum_out = np.zeros(n_steps + 1)

    for s in range(n_steps):
        t = s * dt
        step_idx = min(int(t / vc.T), vc.n_max - 1)
        q_in = min(vc.inflow[step_idx], receiving(rho[0]))
        q_out = min(vc.outflow[step_idx], sending(rho[-1]))
        flows = np.minimum(sending(rho[:-1]), receiving(rho[1:]))
        rho = rho + (dt / dx) * (
            np.concatenate(([q_in], flows)) - np.concatenate((flows, [q_out]))
        )
        densities[s + 1] = rho
        cum_in[s + 1] = cum_in[s] + q_in * dt
        cum_out[s + 1] = cum_out[s] + q_out * dt
    return GodunovField(dt, dx, densities, cum_in, cum_out)
