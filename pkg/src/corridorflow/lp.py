"""Solver-agnostic container for mixed-integer linear programs.

Variables are created in a fixed order and addressed by integer id or by an
arbitrary hashable key, so models built from the same inputs always number
their columns identically (needed for reproducible solves and exports).
The objective sense is always maximize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

CONTINUOUS = "continuous"
BINARY = "binary"

LE = "<="
GE = ">="
EQ = "=="


@dataclass
class Variable:
    vid: int
    key: object
    lb: float
    ub: float
    kind: str = CONTINUOUS
    obj: float = 0.0


@dataclass
class Constraint:
    coeffs: dict
    sense: str
    rhs: float
    name: str = ""


class LinearProgram:
    """Sparse-row MILP with maximize objective."""

    def __init__(self, name: str = "model"):
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self._by_key: dict = {}
        self._arrays = None

    # -- construction -----------------------------------------------------

    def add_variable(self, key=None, lb=0.0, ub=np.inf, kind=CONTINUOUS, obj=0.0) -> int:
        if kind == BINARY:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        vid = len(self.variables)
        if key is None:
            key = vid
        elif isinstance(key, int):
            raise ValueError("explicit integer keys are reserved for variable ids")
        if key in self._by_key:
            raise ValueError(f"duplicate variable key {key!r}")
        self.variables.append(Variable(vid, key, float(lb), float(ub), kind, float(obj)))
        self._by_key[key] = vid
        self._arrays = None
        return vid

    def var_id(self, key) -> int:
        return self._by_key[key]

    def has_var(self, key) -> bool:
        return key in self._by_key

    def set_objective_coeff(self, key, coef, accumulate=True):
        v = self.variables[self._key_or_id(key)]
        v.obj = v.obj + coef if accumulate else coef
        self._arrays = None

    def set_bounds(self, key, lb=None, ub=None):
        v = self.variables[self._key_or_id(key)]
        if lb is not None:
            v.lb = float(lb)
        if ub is not None:
            v.ub = float(ub)
        self._arrays = None

    def add_constraint(self, coeffs: dict, sense: str, rhs: float, name: str = "") -> int:
        if sense not in (LE, GE, EQ):
            raise ValueError(f"bad sense {sense!r}")
        mapped = {}
        for key, coef in coeffs.items():
            if coef == 0.0:
                continue
            vid = self._key_or_id(key)
            mapped[vid] = mapped.get(vid, 0.0) + float(coef)
        self.constraints.append(Constraint(mapped, sense, float(rhs), name))
        self._arrays = None
        return len(self.constraints) - 1

    def _key_or_id(self, key) -> int:
        if isinstance(key, int) and not isinstance(key, bool):
            if not 0 <= key < len(self.variables):
                raise KeyError(f"variable id {key} out of range")
            return key
        return self._by_key[key]

    # -- views -------------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def binary_ids(self) -> list[int]:
        return [v.vid for v in self.variables if v.kind == BINARY]

    def objective_value(self, x) -> float:
        c, *_ = self.to_arrays()
        return float(c @ x)

    def to_arrays(self):
        """Return (c, A_ub, b_ub, A_eq, b_eq, lb, ub) with >= rows negated."""
        if self._arrays is not None:
            return self._arrays
        n = self.n_vars
        c = np.array([v.obj for v in self.variables])
        lb = np.array([v.lb for v in self.variables])
        ub = np.array([v.ub for v in self.variables])

        ub_rows, ub_cols, ub_vals, b_ub = [], [], [], []
        eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
        for con in self.constraints:
            if con.sense == EQ:
                r = len(b_eq)
                for vid, coef in con.coeffs.items():
                    eq_rows.append(r)
                    eq_cols.append(vid)
                    eq_vals.append(coef)
                b_eq.append(con.rhs)
            else:
                sign = 1.0 if con.sense == LE else -1.0
                r = len(b_ub)
                for vid, coef in con.coeffs.items():
                    ub_rows.append(r)
                    ub_cols.append(vid)
                    ub_vals.append(sign * coef)
                b_ub.append(sign * con.rhs)

        A_ub = sparse.csr_matrix((ub_vals, (ub_rows, ub_cols)), shape=(len(b_ub), n))
        A_eq = sparse.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(len(b_eq), n))
        self._arrays = (c, A_ub, np.array(b_ub), A_eq, np.array(b_eq), lb, ub)
        return self._arrays

    def max_violation(self, x) -> float:
        """Largest constraint/bound violation of a candidate point."""
        _, A_ub, b_ub, A_eq, b_eq, lb, ub = self.to_arrays()
        worst = 0.0
        if b_ub.size:
            worst = max(worst, float(np.max(A_ub @ x - b_ub, initial=0.0)))
        if b_eq.size:
            worst = max(worst, float(np.max(np.abs(A_eq @ x - b_eq), initial=0.0)))
        worst = max(worst, float(np.max(lb - x, initial=0.0)))
        worst = max(worst, float(np.max(x - ub, initial=0.0)))
        return worst
