"""Rolling-horizon closed loop coordinating boundary-flow and speed control.

Each project horizon runs two solves.  At its start the controller commits
the boundary control for the whole horizon (hedging over demand scenarios,
or using a fixed assumed level).  Once the horizon's demand has been
observed at the rolling-horizon mark, a re-solve over a shifted window
re-decides only the speed limit, which takes effect immediately; the
committed control merely caps the re-solve's internal control copy.  Traffic
itself always evolves through the analytic engine with the realized demand,
and queues and densities carry forward between horizons.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import demand as demand_ops
from . import solver, twostage
from .network import Corridor
from .sim import CorridorSimulator
from .twostage import (
    DemandDistribution,
    HorizonState,
    ModelOptions,
    ObjectiveWeights,
)

TWO_STAGE = "two-stage"
D_MIN = "d-min"
D_MEAN = "d-mean"
D_MAX = "d-max"
CONTROLLER_KINDS = (TWO_STAGE, D_MIN, D_MEAN, D_MAX)


@dataclass(frozen=True)
class HorizonConfig:
    n_project: int  # steps per project horizon
    n_rolling: int  # steps until the speed limit is updated
    T: float

    def __post_init__(self):
        if not 0 < self.n_rolling <= self.n_project:
            raise ValueError("need 0 < n_rolling <= n_project")


# distribution-aware wrappers around the demand-matrix operations


def init_demand_matrix(dist: DemandDistribution, n_steps: int) -> np.ndarray:
    return demand_ops.init_demand_matrix(dist.levels, n_steps)


def apply_queue_update(matrix, e: float, capacity: float):
    return demand_ops.apply_queue_update(matrix, e, capacity)


def observed_demand_vector(
    observed: float,
    dist: DemandDistribution,
    cfg: HorizonConfig,
    e: float = 0.0,
    capacity: float | None = None,
    tail_level: float | None = None,
) -> np.ndarray:
    return demand_ops.observed_demand_vector(
        observed, dist.levels, dist.probs, cfg.n_project, cfg.n_rolling, e,
        capacity, tail_level,
    )


def compute_realized_inflow(control, demand, queue: float = 0.0):
    return demand_ops.compute_realized_inflow(control, demand, queue)


@dataclass
class ControlSchedule:
    """What one project horizon commits to: boundary flows per controlled
    entry for every step, plus one speed selection per speed-managed link."""

    horizon: int
    controls: dict  # entry id -> per-step control (n_project values)
    speeds: dict  # vsl link id -> speed applied from the horizon midpoint


@dataclass
class HorizonLog:
    horizon: int
    stage: str  # "plan" or "update"
    objective: float
    status: str
    nodes: int
    solve_time: float
    speed: dict


@dataclass
class Trajectory:
    """Realized per-step history of one closed-loop run."""

    cfg: HorizonConfig
    controller: str
    demand_levels: np.ndarray  # per project horizon
    steps: list = field(default_factory=list)  # simulator step records
    solves: list = field(default_factory=list)
    schedules: list = field(default_factory=list)  # ControlSchedule per horizon
    conservation_error: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def series(self, kind: str, link_id: str) -> np.ndarray:
        return np.array([rec[kind].get(link_id, 0.0) for rec in self.steps])

    def horizon_slice(self, h: int) -> slice:
        n = self.cfg.n_project
        return slice(h * n, (h + 1) * n)

    def to_csv(self, path) -> None:
        link_ids = sorted(self.steps[0]["qin"]) if self.steps else []
        entry_ids = sorted(self.steps[0]["queues"]) if self.steps else []
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            header = ["step", "t", "horizon", "demand_level"]
            for lid in link_ids:
                header += [f"qin_{lid}", f"qout_{lid}"]
            for eid in entry_ids:
                header += [f"queue_{eid}", f"control_{eid}"]
            if self.steps:
                for lid in sorted(self.steps[0]["speeds"]):
                    header.append(f"speed_{lid}")
                for lid in sorted(self.steps[0]["densities"]):
                    k = len(self.steps[0]["densities"][lid])
                    header += [f"rho_{lid}_{i + 1}" for i in range(k)]
            writer.writerow(header)
            for rec in self.steps:
                h = rec["step"] // self.cfg.n_project
                row = [rec["step"], rec["t"], h, self.demand_levels[h]]
                for lid in link_ids:
                    row += [rec["qin"].get(lid, 0.0), rec["qout"].get(lid, 0.0)]
                for eid in entry_ids:
                    row += [rec["queues"][eid], rec["controls"].get(eid, "")]
                for lid in sorted(rec["speeds"]):
                    row.append(rec["speeds"][lid])
                for lid in sorted(rec["densities"]):
                    row.extend(rec["densities"][lid])
                writer.writerow(row)


class ClosedLoopError(RuntimeError):
    pass


def _assumed_level(kind: str, dist: DemandDistribution) -> float:
    if kind == D_MIN:
        return dist.min_level()
    if kind == D_MEAN:
        return dist.mean()
    if kind == D_MAX:
        return dist.max_level()
    raise ValueError(f"unknown controller kind {kind}")


def _warm_map(lp, warm_keys: dict) -> dict:
    warm = {}
    for key, val in warm_keys.items():
        if lp.has_var(key):
            warm[lp.var_id(key)] = val
    return warm


def _solve(bundle, opts, warm_keys, context):
    warm = _warm_map(bundle.lp, warm_keys) if warm_keys else None
    t0 = time.monotonic()
    sol = solver.branch_and_bound(bundle.lp, opts, warm_binaries=warm)
    elapsed = time.monotonic() - t0
    if not sol.ok:
        raise ClosedLoopError(f"{context}: solver returned {sol.status}")
    return sol, elapsed


def run_closed_loop(
    corridor: Corridor,
    demand_stream,
    controller_kind: str,
    dist: DemandDistribution,
    weights: ObjectiveWeights,
    cfg: HorizonConfig,
    solve_options: solver.SolveOptions | None = None,
) -> Trajectory:
    """Simulate the whole demand stream under one controller."""
    if controller_kind not in CONTROLLER_KINDS:
        raise ValueError(f"unknown controller kind {controller_kind}")
    demand_stream = np.asarray(demand_stream, dtype=float)
    levels = set(np.round(dist.levels, 12))
    for lvl in demand_stream:
        if round(float(lvl), 12) not in levels:
            raise ValueError(f"stream level {lvl} not in the demand support")

    opts = solve_options or solver.SolveOptions()
    n1, n2, T = cfg.n_project, cfg.n_rolling, cfg.T
    sim = CorridorSimulator(corridor, T)
    traj = Trajectory(cfg, controller_kind, demand_stream)
    ctrl_entries = [l.id for l in corridor.controlled_entries]
    vsl_ids = [l.id for l in corridor.vsl_links]
    warm_plan: dict = {}
    warm_update: dict = {}

    for h, level in enumerate(demand_stream):
        level = float(level)
        t0 = h * n1 * T

        # plan solve at the horizon start, hedging over unknown demand; the
        # whole horizon's boundary control is committed here
        state = HorizonState(
            {lid: sim.segment_densities(lid) for lid in sim.states},
            dict(sim.queues),
            n1,
            T,
            t0,
        )
        if controller_kind == TWO_STAGE:
            bundle = twostage.build_deterministic_equivalent(corridor, state, dist, weights)
        else:
            bundle = twostage.build_deterministic_baseline(
                corridor, state, _assumed_level(controller_kind, dist), weights
            )
        sol, elapsed = _solve(bundle, opts, warm_plan, f"horizon {h} plan")
        warm_plan = bundle.warm_start_keys(sol)
        controls = {lid: bundle.published_control(sol, lid) for lid in ctrl_entries}
        traj.solves.append(
            HorizonLog(h, "plan", bundle.total_objective(sol), sol.status, sol.nodes,
                       elapsed, {lid: None for lid in vsl_ids})
        )

        arrivals = {
            l.id: (level if l.controlled else l.demand)
            for l in corridor.entry_links
        }
        for t in range(n2):
            sim.step({lid: controls[lid][t] for lid in ctrl_entries}, arrivals)

        # demand observed: only the speed limit is revised; the committed
        # boundary control caps the re-solve's control copy
        state_b = HorizonState(
            {lid: sim.segment_densities(lid) for lid in sim.states},
            dict(sim.queues),
            n1,
            T,
            t0 + n2 * T,
        )
        tail = dist.mean()
        if controller_kind != TWO_STAGE:
            tail = _assumed_level(controller_kind, dist)
        vec = observed_demand_vector(level, dist, cfg, tail_level=tail)
        opts_b = ModelOptions(
            fluct_pairs=[(t, t + 1) for t in range(1, n1) if t != n1 - n2],
            committed_controls={
                lid: controls[lid][n2:] for lid in ctrl_entries
            },
        )
        bundle_b = twostage.build_deterministic_baseline(
            corridor, state_b, vec, weights, opts_b
        )
        sol_b, elapsed = _solve(bundle_b, opts, warm_update, f"horizon {h} update")
        warm_update = bundle_b.warm_start_keys(sol_b)
        speeds = {lid: bundle_b.selected_speed(sol_b, lid) for lid in vsl_ids}
        traj.solves.append(
            HorizonLog(h, "update", bundle_b.total_objective(sol_b), sol_b.status,
                       sol_b.nodes, elapsed, dict(speeds))
        )

        traj.schedules.append(
            ControlSchedule(h, {lid: controls[lid].copy() for lid in ctrl_entries},
                            dict(speeds))
        )

        # only links whose speed actually changes need a fresh period here
        changed = {
            lid: v for lid, v in speeds.items() if abs(v - sim.active_speed(lid)) > 1e-9
        }
        if changed:
            sim.end_period(new_speeds=changed, links=changed.keys())
        for t in range(n1 - n2):
            sim.step({lid: controls[lid][n2 + t] for lid in ctrl_entries}, arrivals)
        sim.end_period()

    traj.steps = sim.records
    traj.conservation_error = sim.conservation_error()
    return traj
