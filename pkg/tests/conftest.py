import numpy as np
import pytest

from corridorflow import lwr
from corridorflow.experiments import case_study


@pytest.fixture(scope="session")
def fd():
    # four-lane aggregate of the reference flux law
    return lwr.TriangularFD(30.0, -4.9, 0.5)


@pytest.fixture(scope="session")
def geom():
    return lwr.LinkGeometry(0.0, 1200.0, 2, lanes=4)


@pytest.fixture(scope="session")
def config():
    return case_study()


def compatible_vc(fd, geom, rng, n_steps=8, T=20.0, densities=None,
                  desired_in=None, desired_out=None):
    """Random value conditions made mutually consistent by clipping desired
    boundary flows with the link's analytic sending/receiving capability.

    Flows are clipped at every step end and at the wave-arrival kinks inside
    each step (a component can become finite mid-step below the boundary
    line, which step-end checks alone would miss).
    """
    if densities is None:
        densities = rng.uniform(0.0, fd.rho_m, geom.k_max)
    densities = np.asarray(densities, dtype=float)
    edges = geom.segment_edges()
    kinks_supply = [(geom.xi - e) / fd.w for e in edges[:-1]]
    kinks_demand = [(geom.chi - e) / fd.vf for e in edges[1:]]

    def max_flow(count_fn, cum_prev, t_prev, t_next, kinks):
        checks = [t_next] + [t for t in kinks if t_prev < t <= t_next]
        bound = fd.Q
        for t in checks:
            if t - t_prev < 1e-12:
                continue
            bound = min(bound, (count_fn(t) - cum_prev) / (t - t_prev))
        return max(bound, 0.0)

    inflow, outflow = [], []
    for n in range(1, n_steps + 1):
        vc = lwr.ValueConditionSet(
            densities,
            np.array(inflow + [0.0]),
            np.array(outflow + [0.0]),
            T,
        )
        supply = max_flow(
            lambda t: lwr.max_entry_count(vc, fd, geom, t),
            sum(inflow) * T, (n - 1) * T, n * T, kinks_supply,
        )
        demand = max_flow(
            lambda t: lwr.max_exit_count(vc, fd, geom, t),
            sum(outflow) * T, (n - 1) * T, n * T, kinks_demand,
        )
        want_in = desired_in[n - 1] if desired_in is not None else rng.uniform(0.0, fd.Q)
        want_out = desired_out[n - 1] if desired_out is not None else rng.uniform(0.0, fd.Q)
        inflow.append(min(want_in, supply))
        outflow.append(min(want_out, demand))
    return lwr.ValueConditionSet(densities, np.array(inflow), np.array(outflow), T)
