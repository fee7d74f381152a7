"""Linear constraint blocks for a single link.

Everything a link contributes to the control MILP is emitted here as rows
over link-local variable keys:

* compatibility conditions tying boundary flows to the initial state,
* the discrete speed-limit linearization (selection binaries, the rho_c*vf
  product, and the q_in/vf auxiliaries),
* step demand/supply definitions built from the boundary-evaluated
  cumulative-count components,
* density chaining between consecutive solve periods.

Row coefficients reference keys like ("qin", n) or ("delta", s); callers map
them into a concrete LinearProgram namespace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lp import EQ, GE, LE
from . import lwr
from .lwr import (
    GUARD_TOL,
    ComponentExpr,
    LinkGeometry,
    TriangularFD,
    ValueConditionSet,
)

FD = "fd"
ENTRY = "entry"


@dataclass(frozen=True)
class SpeedLimitSet:
    """Candidate free-flow speeds with the induced critical densities and
    capacities (backwave speed and jam density stay fixed)."""

    speeds: tuple
    w: float
    rho_m: float

    @property
    def fds(self) -> tuple:
        return tuple(TriangularFD(v, self.w, self.rho_m) for v in self.speeds)

    @property
    def rho_cs(self) -> tuple:
        return tuple(fd.rho_c for fd in self.fds)

    @property
    def capacities(self) -> tuple:
        return tuple(fd.Q for fd in self.fds)

    @property
    def Q_max(self) -> float:
        return max(self.capacities)

    def __len__(self) -> int:
        return len(self.speeds)


@dataclass
class LinkSpec:
    """Static description of one link."""

    id: str
    kind: str = FD
    geometry: LinkGeometry | None = None
    fd: TriangularFD | None = None
    is_vsl: bool = False
    vsl_set: SpeedLimitSet | None = None
    controlled: bool = False  # entry links: carries a boundary control
    demand: float = 0.0  # entry links: exogenous arrival rate (veh/s)

    def __post_init__(self):
        if self.kind == FD and (self.geometry is None or self.fd is None):
            raise ValueError(f"link {self.id}: FD links need geometry and fd")
        if self.is_vsl and self.vsl_set is None:
            raise ValueError(f"link {self.id}: VSL link without a speed set")

    @property
    def capacity(self) -> float:
        if self.kind != FD:
            raise ValueError("entry links have no capacity of their own")
        return self.vsl_set.Q_max if self.is_vsl else self.fd.Q

    def fd_for_speed(self, speed: float) -> TriangularFD:
        if not self.is_vsl:
            return self.fd
        for v, fd in zip(self.vsl_set.speeds, self.vsl_set.fds):
            if abs(v - speed) < 1e-9:
                return fd
        raise ValueError(f"speed {speed} not in candidate set of link {self.id}")


@dataclass
class LinRow:
    coeffs: dict
    sense: str
    rhs: float
    name: str = ""

    def evaluate(self, values: dict) -> float:
        """Signed slack: >= 0 means satisfied for inequality rows."""
        lhs = sum(c * values[k] for k, c in self.coeffs.items())
        if self.sense == LE:
            return self.rhs - lhs
        if self.sense == GE:
            return lhs - self.rhs
        return -abs(lhs - self.rhs)


class LinkVariables:
    """Key factory for one link's slice of the model."""

    def __init__(self, link: LinkSpec, n_max: int):
        self.link = link
        self.n_max = n_max

    def qin(self, n: int):
        return ("qin", self.link.id, n)

    def qout(self, n: int):
        return ("qout", self.link.id, n)

    def kin(self, n: int):
        return ("kin", self.link.id, n)

    def ka(self, s: int, n: int):
        return ("ka", self.link.id, s, n)

    def qa(self, s: int, n: int):
        return ("qa", self.link.id, s, n)

    def delta(self, s: int):
        return ("delta", self.link.id, s)

    def rcvf(self):
        return ("rcvf", self.link.id)

    def demand_count(self, n: int):
        return ("L", self.link.id, n)

    def demand_flow(self, n: int):
        return ("D", self.link.id, n)

    def supply_count(self, n: int):
        return ("U", self.link.id, n)

    def supply_flow(self, n: int):
        return ("S", self.link.id, n)

    def y_demand(self, n: int, c: int):
        return ("yL", self.link.id, n, c)

    def y_supply(self, n: int, c: int):
        return ("yU", self.link.id, n, c)


def count_big_m(link: LinkSpec, n_max: int, T: float) -> float:
    """Cumulative-count bound: stored vehicles plus everything that can
    cross a boundary over the horizon.  Used to relax count-scaled rows."""
    rho_m = link.fd.rho_m if link.fd else link.vsl_set.rho_m
    return rho_m * link.geometry.length + link.capacity * n_max * T


# ---------------------------------------------------------------------------
# Compatibility conditions.
# ---------------------------------------------------------------------------


def _expr_coeffs(expr: ComponentExpr, vars: LinkVariables, fd: TriangularFD):
    """Flatten a component into (coeffs, const) over link-local flow keys;
    the 1/vf and rho_c*vf parts fold numerically with the given flux law."""
    coeffs = {}
    const = expr.const + expr.rcvf * fd.Q
    for n, a in expr.qin.items():
        coeffs[vars.qin(n)] = coeffs.get(vars.qin(n), 0.0) + a
    for n, a in expr.qout.items():
        coeffs[vars.qout(n)] = coeffs.get(vars.qout(n), 0.0) + a
    for n, a in expr.kin.items():
        coeffs[vars.qin(n)] = coeffs.get(vars.qin(n), 0.0) + a / fd.vf
    return coeffs, const


def _vc_upstream_coeffs(vars: LinkVariables, T: float, p: int, t: float):
    """Inflow value condition at (t in step p, xi)."""
    coeffs = {vars.qin(i): T for i in range(1, p)}
    coeffs[vars.qin(p)] = coeffs.get(vars.qin(p), 0.0) + (t - (p - 1) * T)
    return coeffs, 0.0


def _vc_downstream_coeffs(vars: LinkVariables, T: float, p: int, t: float, mass: float):
    """Outflow value condition at (t in step p, chi)."""
    coeffs = {vars.qout(i): T for i in range(1, p)}
    coeffs[vars.qout(p)] = coeffs.get(vars.qout(p), 0.0) + (t - (p - 1) * T)
    return coeffs, -mass


def _step_containing(t: float, T: float, n_max: int) -> int | None:
    """1-based step whose interval [(p-1)T, pT] contains t, or None."""
    if t < -GUARD_TOL or t > n_max * T + GUARD_TOL:
        return None
    p = int(math.floor(t / T + GUARD_TOL)) + 1
    return min(p, n_max)


def _ge_row(rows, lhs, rhs, name):
    """Append lhs >= rhs; drop tautologies, fail on constant violations."""
    coeffs_l, const_l = lhs
    coeffs_r, const_r = rhs
    coeffs = dict(coeffs_l)
    for k, v in coeffs_r.items():
        coeffs[k] = coeffs.get(k, 0.0) - v
    coeffs = {k: v for k, v in coeffs.items() if abs(v) > 1e-12}
    rhs_val = const_r - const_l
    if not coeffs:
        if rhs_val > 1e-9:
            raise ValueError(f"constant compatibility row violated: {name}")
        return
    rows.append(LinRow(coeffs, GE, rhs_val, name))


def _compat_rows_for_fd(
    fd: TriangularFD,
    geom: LinkGeometry,
    densities,
    vars: LinkVariables,
    n_max: int,
    T: float,
    prefix: str = "",
) -> list[LinRow]:
    rows: list[LinRow] = []
    mass = float(np.sum(densities)) * geom.X
    k_max = geom.k_max
    edges = geom.segment_edges()

    def comp_initial(k, t, x):
        c = lwr.initial_component_expr(fd, geom, densities, k, t, x)
        return None if c is None else _expr_coeffs(c, vars, fd)

    def comp_upstream(n, t, x):
        c = lwr.upstream_component_expr(fd, geom, T, n, t, x)
        return None if c is None else _expr_coeffs(c, vars, fd)

    def comp_downstream(n, t, x):
        c = lwr.downstream_component_expr(fd, geom, densities, T, n, t, x)
        return None if c is None else _expr_coeffs(c, vars, fd)

    # initial components against both boundary conditions
    for k in range(1, k_max + 1):
        for p in range(1, n_max + 1):
            lhs = comp_initial(k, p * T, geom.chi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_downstream_coeffs(vars, T, p, p * T, mass),
                        f"{prefix}ic{k}_beta{p}")
            lhs = comp_initial(k, p * T, geom.xi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_upstream_coeffs(vars, T, p, p * T),
                        f"{prefix}ic{k}_gamma{p}")
        # kink of segment k's forward characteristic at chi
        t_star = (geom.chi - edges[k]) / fd.vf
        p = _step_containing(t_star, T, n_max)
        if p is not None:
            lhs = comp_initial(k, t_star, geom.chi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_downstream_coeffs(vars, T, p, t_star, mass),
                        f"{prefix}ic{k}_beta_arr")
        # kink of segment k's backward characteristic at xi
        t_star = (geom.xi - edges[k - 1]) / fd.w
        p = _step_containing(t_star, T, n_max)
        if p is not None:
            lhs = comp_initial(k, t_star, geom.xi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_upstream_coeffs(vars, T, p, t_star),
                        f"{prefix}ic{k}_gamma_arr")

    # inflow components against both boundary conditions
    travel = geom.length / fd.vf
    for n in range(1, n_max + 1):
        for p in range(1, n_max + 1):
            lhs = comp_upstream(n, p * T, geom.xi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_upstream_coeffs(vars, T, p, p * T),
                        f"{prefix}up{n}_gamma{p}")
            lhs = comp_upstream(n, p * T, geom.chi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_downstream_coeffs(vars, T, p, p * T, mass),
                        f"{prefix}up{n}_beta{p}")
        t_star = n * T + travel
        p = _step_containing(t_star, T, n_max)
        if p is not None:
            lhs = comp_upstream(n, t_star, geom.chi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_downstream_coeffs(vars, T, p, t_star, mass),
                        f"{prefix}up{n}_beta_arr")

    # outflow components against both boundary conditions
    backtravel = (geom.xi - geom.chi) / fd.w
    for n in range(1, n_max + 1):
        for p in range(1, n_max + 1):
            lhs = comp_downstream(n, p * T, geom.xi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_upstream_coeffs(vars, T, p, p * T),
                        f"{prefix}dn{n}_gamma{p}")
            lhs = comp_downstream(n, p * T, geom.chi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_downstream_coeffs(vars, T, p, p * T, mass),
                        f"{prefix}dn{n}_beta{p}")
        t_star = n * T + backtravel
        p = _step_containing(t_star, T, n_max)
        if p is not None:
            lhs = comp_downstream(n, t_star, geom.xi)
            if lhs is not None:
                _ge_row(rows, lhs, _vc_upstream_coeffs(vars, T, p, t_star),
                        f"{prefix}dn{n}_gamma_arr")
    return rows


def build_compatibility(
    link: LinkSpec,
    vars: LinkVariables,
    initial_density,
    n_max: int,
    T: float,
) -> list[LinRow]:
    """All compatibility inequalities for one link as linear rows in the
    boundary flows (initial densities enter as fixed parameters).

    A speed-controlled link gets one copy of its rows per candidate speed in
    disaggregated form: the rows act on per-candidate flow copies (the
    inflow copies are the k_a auxiliaries of the speed linearization, scaled
    by the candidate speed) with constants switched by the selection binary,
    and the aggregate flows are the sums of the copies.  The relaxation is
    then the convex hull of the per-speed flow sets, so no big-M slack is
    involved.
    """
    densities = np.asarray(initial_density, dtype=float)
    if np.any(densities < -GUARD_TOL):
        raise ValueError("negative initial density")
    if not link.is_vsl:
        return _compat_rows_for_fd(
            link.fd, link.geometry, densities, vars, n_max, T
        )
    rows: list[LinRow] = []
    sls = link.vsl_set
    plain = LinkVariables(link, n_max)
    for s, fd_s in enumerate(sls.fds):
        v_s = sls.speeds[s]
        static = _compat_rows_for_fd(
            fd_s, link.geometry, densities, plain, n_max, T, prefix=f"s{s}_"
        )
        for row in static:
            coeffs = {}
            for key, coef in row.coeffs.items():
                if key[0] == "qin":
                    coeffs[vars.ka(s, key[2])] = coef * v_s
                elif key[0] == "qout":
                    coeffs[vars.qa(s, key[2])] = coef
                else:
                    raise AssertionError(f"unexpected key {key} in static row")
            coeffs[vars.delta(s)] = coeffs.get(vars.delta(s), 0.0) - row.rhs
            rows.append(LinRow(coeffs, row.sense, 0.0, row.name))
        # outflow copy active only for the selected candidate
        for n in range(1, n_max + 1):
            rows.append(
                LinRow({vars.qa(s, n): 1.0, vars.delta(s): -fd_s.Q}, LE, 0.0,
                       f"s{s}_qa_cap_{n}")
            )
    # aggregate flows are the sums of the candidate copies
    for n in range(1, n_max + 1):
        coeffs = {vars.qin(n): 1.0}
        for s, v_s in enumerate(sls.speeds):
            coeffs[vars.ka(s, n)] = -v_s
        rows.append(LinRow(coeffs, EQ, 0.0, f"qin_agg_{n}"))
        coeffs = {vars.qout(n): 1.0}
        for s in range(len(sls)):
            coeffs[vars.qa(s, n)] = -1.0
        rows.append(LinRow(coeffs, EQ, 0.0, f"qout_agg_{n}"))
    return rows


def build_vsl_linearization(link: LinkSpec, vars: LinkVariables, n_max: int) -> list[LinRow]:
    """Selection constraints for the discrete speed-limit set: exactly one
    candidate active, the rho_c*vf product pinned to the active candidate,
    and the q_in/vf auxiliaries sandwiched so k_in equals q_in over the
    active speed."""
    if not link.is_vsl:
        raise ValueError(f"link {link.id} has no speed-limit control")
    sls = link.vsl_set
    rows = [
        LinRow({vars.delta(s): 1.0 for s in range(len(sls))}, EQ, 1.0, "one_speed")
    ]
    coeffs = {vars.rcvf(): 1.0}
    for s, (rc, v) in enumerate(zip(sls.rho_cs, sls.speeds)):
        coeffs[vars.delta(s)] = -rc * v
    rows.append(LinRow(coeffs, EQ, 0.0, "rcvf_select"))
    q_max = sls.Q_max
    for n in range(1, n_max + 1):
        for s, (v, Q_s) in enumerate(zip(sls.speeds, sls.capacities)):
            rows.append(
                LinRow({vars.ka(s, n): 1.0, vars.delta(s): -Q_s / v}, LE, 0.0,
                       f"ka_ub_{s}_{n}")
            )
            rows.append(
                LinRow({vars.ka(s, n): 1.0, vars.qin(n): -1.0 / v}, LE, 0.0,
                       f"ka_le_qv_{s}_{n}")
            )
            rows.append(
                LinRow(
                    {vars.ka(s, n): 1.0, vars.qin(n): -1.0 / v, vars.delta(s): -q_max / v},
                    GE,
                    -q_max / v,
                    f"ka_ge_qv_{s}_{n}",
                )
            )
        coeffs = {vars.ka(s, n): 1.0 for s in range(len(sls))}
        coeffs[vars.kin(n)] = -1.0
        rows.append(LinRow(coeffs, EQ, 0.0, f"kin_def_{n}"))
    return rows


# ---------------------------------------------------------------------------
# Step demand and supply.
# ---------------------------------------------------------------------------


def _boundary_components(link, densities, n_max, T, side):
    """Numeric-FD component expressions feeding the demand (side='demand',
    at chi, initial + inflow conditions) or supply (at xi, initial + outflow
    conditions) count at each step end."""
    fd, geom = link.fd, link.geometry
    out = []
    for n in range(1, n_max + 1):
        t = n * T
        comps = []
        for k in range(1, geom.k_max + 1):
            x = geom.chi if side == "demand" else geom.xi
            c = lwr.initial_component_expr(fd, geom, densities, k, t, x)
            if c is not None:
                comps.append(c)
        for m in range(1, n_max + 1):
            if side == "demand":
                c = lwr.upstream_component_expr(fd, geom, T, m, t, geom.chi)
            else:
                c = lwr.downstream_component_expr(fd, geom, densities, T, m, t, geom.xi)
            if c is not None:
                comps.append(c)
        out.append(comps)
    return out


def build_demand_supply(
    link: LinkSpec,
    vars: LinkVariables,
    initial_density,
    n_max: int,
    T: float,
    exact: bool = True,
) -> list[LinRow]:
    """Define per-step demand D_n and supply S_n from the boundary-evaluated
    cumulative-count components.

    The count variables are upper-bounded by every applicable component; with
    ``exact`` they are also pinned to the componentwise minimum through a
    big-M selection with one binary per component.  D_n converts counts to a
    step flow net of what already left; S_n mirrors it at the entrance.
    """
    if link.is_vsl:
        raise ValueError("demand/supply builder expects a fixed-speed link")
    densities = np.asarray(initial_density, dtype=float)
    mass = float(np.sum(densities)) * link.geometry.X
    big_m = count_big_m(link, n_max, T)
    rows: list[LinRow] = []

    for side in ("demand", "supply"):
        comps_by_step = _boundary_components(link, densities, n_max, T, side)
        offset = mass if side == "demand" else 0.0
        count = vars.demand_count if side == "demand" else vars.supply_count
        flow = vars.demand_flow if side == "demand" else vars.supply_flow
        chooser = vars.y_demand if side == "demand" else vars.y_supply
        past = vars.qout if side == "demand" else vars.qin
        for n in range(1, n_max + 1):
            # the boundary's own value condition can only grow at capacity,
            # so it joins the component minimum; this caps D_n and S_n at Q
            bounds = [({past(i): T for i in range(1, n)}, link.fd.Q * T)]
            for comp in comps_by_step[n - 1]:
                coeffs, const = _expr_coeffs(comp, vars, link.fd)
                bounds.append((coeffs, const + offset))
            for c_idx, (coeffs, const) in enumerate(bounds):
                row = {count(n): 1.0}
                for k, v in coeffs.items():
                    row[k] = row.get(k, 0.0) - v
                rows.append(LinRow(row, LE, const, f"{side}_ub_{n}_{c_idx}"))
                if exact:
                    row = dict(row)
                    row[chooser(n, c_idx)] = big_m
                    rows.append(
                        LinRow(row, GE, const - big_m, f"{side}_lb_{n}_{c_idx}")
                    )
            if exact:
                rows.append(
                    LinRow({chooser(n, c): 1.0 for c in range(len(bounds))}, EQ, 1.0,
                           f"{side}_pick_{n}")
                )
            # count-to-flow conversion net of flow already through the boundary
            coeffs = {flow(n): T, count(n): -1.0}
            for i in range(1, n):
                coeffs[past(i)] = T
            rows.append(LinRow(coeffs, EQ, 0.0, f"{side}_flow_{n}"))
    return rows


def demand_supply_binary_keys(link, vars, initial_density, n_max, T):
    """Keys of the selection binaries build_demand_supply(exact=True) uses."""
    densities = np.asarray(initial_density, dtype=float)
    keys = []
    for side in ("demand", "supply"):
        chooser = vars.y_demand if side == "demand" else vars.y_supply
        for n, comps in enumerate(_boundary_components(link, densities, n_max, T, side), 1):
            keys.extend(chooser(n, c) for c in range(len(comps) + 1))
    return keys


# ---------------------------------------------------------------------------
# Horizon-to-horizon density chaining.
# ---------------------------------------------------------------------------


def chain_initial_densities(
    link: LinkSpec,
    solved_vc: ValueConditionSet,
    t_boundary: float,
    resolution: int = 4,
    fd: TriangularFD | None = None,
) -> np.ndarray:
    """Per-segment mean densities at a period boundary, used as the next
    period's initial condition.  Averages are cumulative-count differences,
    so the per-segment vehicle total is preserved exactly at any resolution."""
    if t_boundary < -GUARD_TOL:
        raise ValueError("t_boundary must be nonnegative")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    use_fd = fd if fd is not None else link.fd
    return lwr.segment_mean_densities(
        solved_vc, use_fd, link.geometry, t_boundary, resolution
    )


# ---------------------------------------------------------------------------
# Post-solve certification.
# ---------------------------------------------------------------------------


def compatibility_violation(
    fd: TriangularFD,
    geom: LinkGeometry,
    densities,
    inflow,
    outflow,
    T: float,
) -> float:
    """Worst violation of the compatibility inequalities for realized flows
    (0 when all rows hold)."""
    inflow = np.asarray(inflow, dtype=float)
    outflow = np.asarray(outflow, dtype=float)
    n_max = len(inflow)
    link = LinkSpec("tmp", FD, geom, fd)
    vars = LinkVariables(link, n_max)
    rows = _compat_rows_for_fd(fd, geom, np.asarray(densities, float), vars,
                               n_max, T)
    values = {}
    for n in range(1, n_max + 1):
        values[vars.qin(n)] = inflow[n - 1]
        values[vars.qout(n)] = outflow[n - 1]
    worst = 0.0
    for row in rows:
        worst = max(worst, -row.evaluate(values))
    return worst
