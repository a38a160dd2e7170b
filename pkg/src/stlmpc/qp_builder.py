"""Compilation of fragment formulas into quadratic (or linear) programs.

The compiled problem maximizes the summed scheduled-average robustness of
the formula over its anchor steps, minus an optional quadratic input
penalty, subject to

* one inequality per (predicate, step) pair that satisfaction requires,
* epigraph rows linking one auxiliary variable per anchor step to each
  conjunct for conjunctions,
* input box bounds, an optional input budget, and arbitrary extra linear
  input constraints.

Disjunctions produce one problem per branch; the caller solves all branches
and applies the input of the best one.  Decision vectors are laid out as
``[epigraph | stacked inputs | slack]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .scheduling import Schedule, compute_schedule
from .stl import (
    Always,
    And,
    Eventually,
    Formula,
    FragmentError,
    Not,
    OneTime,
    Or,
    Pred,
    PredicateTable,
    SamplingGrid,
    TrueNode,
    Until,
    collect_event_ops,
    discrete_length,
    event_index,
    omega,
    unwrap,
    validate_windows,
)

__all__ = [
    "VariableLayout",
    "QpProblem",
    "QpSolution",
    "StackedDynamics",
    "ControlConfig",
    "stack_dynamics",
    "build_E_until",
    "build_E_eventually",
    "build_E_always",
    "build_R",
    "build_problem",
    "add_slack_relaxation",
    "build_sr_baseline",
    "default_slack_weight",
    "dump_problem",
]


# ---------------------------------------------------------------------------
# Problem containers


@dataclass(frozen=True)
class VariableLayout:
    """Split of the decision vector into epigraph, input, and slack parts."""

    n_epigraph: int
    n_steps: int
    n_inputs: int
    n_slack: int = 0

    @property
    def n_u(self) -> int:
        return self.n_steps * self.n_inputs

    @property
    def total(self) -> int:
        return self.n_epigraph + self.n_u + self.n_slack

    @property
    def epigraph_slice(self) -> slice:
        return slice(0, self.n_epigraph)

    @property
    def u_slice(self) -> slice:
        return slice(self.n_epigraph, self.n_epigraph + self.n_u)

    @property
    def slack_slice(self) -> slice:
        return slice(self.n_epigraph + self.n_u, self.total)


@dataclass(frozen=True)
class QpProblem:
    """maximize lin @ y - y @ quad @ y + const  subject to  A_ub @ y <= b_ub.

    ``quad`` is positive semidefinite, so the problem is concave; with a zero
    quadratic block it is a linear program.  ``stl_row_info`` maps the index
    of each satisfaction row to its (predicate id, time step);
    ``cost_pred_mass`` and ``epigraph_pred_mass`` record how much cost /
    epigraph weight rests on each predicate, which is what the slack
    relaxation needs to shift predicates consistently.
    """

    quad: np.ndarray
    lin: np.ndarray
    const: float
    A_ub: np.ndarray
    b_ub: np.ndarray
    layout: VariableLayout
    row_kinds: tuple[str, ...]
    stl_row_info: dict[int, tuple[int, int]]
    n_predicates: int
    cost_pred_mass: np.ndarray
    epigraph_pred_mass: np.ndarray | None = None
    branch: int = 0
    debug: dict | None = None

    def __post_init__(self) -> None:
        for name in ("quad", "lin", "A_ub", "b_ub", "cost_pred_mass"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vars(self) -> int:
        return self.lin.shape[0]

    @property
    def n_rows(self) -> int:
        return self.A_ub.shape[0]

    def objective_value(self, y: np.ndarray) -> float:
        return float(self.lin @ y - y @ self.quad @ y + self.const)


@dataclass(frozen=True)
class QpSolution:
    """Solver output in the problem's maximize sense."""

    status: str  # optimal | infeasible | iteration-limit | relaxed (set by the controller)
    objective: float
    y: np.ndarray
    inputs: np.ndarray          # (N, m)
    epigraph: np.ndarray
    slacks: np.ndarray
    iterations: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]


# ---------------------------------------------------------------------------
# Stacked dynamics


@dataclass(frozen=True)
class StackedDynamics:
    """Predicate prediction z_st = H1 x(k0) + H2 u_st + offset over N steps."""

    H1: np.ndarray
    H2: np.ndarray
    offset: np.ndarray
    N: int
    m: int

    def z_st(self, x0: np.ndarray, u_st: np.ndarray) -> np.ndarray:
        u = np.asarray(u_st, dtype=float).reshape(-1)
        if u.shape[0] != self.N * self.m:
            raise ValueError(f"expected {self.N * self.m} stacked inputs, got {u.shape[0]}")
        return self.H1 @ np.asarray(x0, dtype=float) + self.H2 @ u + self.offset


def stack_dynamics(A: np.ndarray, B: np.ndarray, C: np.ndarray, c: np.ndarray,
                   N: int, x0: np.ndarray | None = None) -> StackedDynamics:
    """Stack z(k0+1..k0+N) as an affine function of x(k0) and the inputs."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"A must be square, got {A.shape}")
    if B.shape[0] != n:
        raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
    if C.shape[1] != n:
        raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
    if c.shape[0] != C.shape[0]:
        raise ValueError(f"offset length {c.shape[0]} does not match {C.shape[0]} predicates")
    if N < 1:
        raise ValueError("horizon must be at least 1")
    m = B.shape[1]
    n_mu = C.shape[0]

    CA = [C @ A]                    # C A^1 ... C A^N
    for _ in range(N - 1):
        CA.append(CA[-1] @ A)
    CAB = [C @ B]                   # C A^0 B ... C A^{N-1} B
    for k in range(N - 1):
        CAB.append(CA[k] @ B)

    H1 = np.vstack(CA)
    H2 = np.zeros((N * n_mu, N * m))
    for i in range(N):
        for j in range(i + 1):
            H2[i * n_mu:(i + 1) * n_mu, j * m:(j + 1) * m] = CAB[i - j]
    offset = np.tile(c, N)
    return StackedDynamics(H1, H2, offset, N, m)


# ---------------------------------------------------------------------------
# Literal E matrices (single-operator layouts)


def build_E_until(N: int, h_d: int, k0: int, k1_fn) -> np.ndarray:
    """Cost matrix for a single until-operator, two interleaved predicates.

    Row i covers the anchor step i + k_l - 1 (k_l = k0 - h_d + 1); odd
    columns belong to the left predicate, even columns to the right one.
    """
    k_l = k0 - h_d + 1
    E = np.zeros((N, 2 * (N + h_d)))
    for i in range(1, N + 1):
        i_k = i + k_l - 1
        k1 = int(k1_fn(i_k))
        j_right = 2 * (h_d + k1 - k0)
        if not (1 <= j_right <= E.shape[1]):
            raise ValueError(f"k1({i_k})={k1} falls outside the representable columns")
        E[i - 1, j_right - 1] = 0.5
        w = 0.5 / (k1 - i_k + 1)
        for j in range(2 * (i - 1) + 1, j_right, 2):  # odd j up to the right column
            E[i - 1, j - 1] = w
    return E


def build_E_eventually(N: int, h_d: int, k0: int, k1_fn) -> np.ndarray:
    """Cost matrix for a single eventually-operator, one predicate."""
    k_l = k0 - h_d + 1
    E = np.zeros((N, N + h_d))
    for i in range(1, N + 1):
        i_k = i + k_l - 1
        k1 = int(k1_fn(i_k))
        j = h_d + k1 - k0
        if not (1 <= j <= E.shape[1]):
            raise ValueError(f"k1({i_k})={k1} falls outside the representable columns")
        E[i - 1, j - 1] = 1.0
    return E


def build_E_always(N: int, h_d: int, k0: int, window_fn) -> np.ndarray:
    """Cost matrix for a single always-operator, one predicate.

    ``window_fn`` maps the anchor step i_k to its absolute (k_min, k_max)
    index pair; the row averages the predicate uniformly over that window.
    """
    k_l = k0 - h_d + 1
    E = np.zeros((N, N + h_d))
    for i in range(1, N + 1):
        i_k = i + k_l - 1
        k_min, k_max = window_fn(i_k)
        w = 1.0 / (k_max - k_min + 1)
        for k in range(k_min, k_max + 1):
            j = k - k_l + 1
            if not (1 <= j <= E.shape[1]):
                raise ValueError(f"window of anchor {i_k} falls outside the representable columns")
            E[i - 1, j - 1] = w
    return E


# ---------------------------------------------------------------------------
# General compilation machinery


@dataclass(frozen=True)
class _Layout:
    t_lo: int
    t_hi: int
    n_mu: int

    @property
    def n_cols(self) -> int:
        return (self.t_hi - self.t_lo + 1) * self.n_mu

    def col(self, k: int, p: int) -> int:
        if not (self.t_lo <= k <= self.t_hi):
            raise ValueError(f"time {k} outside the predicate window [{self.t_lo}, {self.t_hi}]")
        return (k - self.t_lo) * self.n_mu + p


def _atom_pred(g: Formula, role: str) -> int:
    if isinstance(g, Pred):
        return g.pred_id
    if isinstance(g, Not):
        raise FragmentError(
            f"{role} contains a negation; compile positive-normal-form formulas "
            "(see stlmpc.stl.to_pnf)")
    if isinstance(g, TrueNode):
        raise FragmentError(
            f"{role} is the constant true, which has no finite robustness value; "
            "drop it or use an eventually-operator")
    raise FragmentError(f"{role} must be a predicate, got {type(g).__name__}")


def _dnf(theta: Formula):
    """Branches of the disjunctive normal form, each a list of (psi, op_index).

    op_index enumerates eventually/until operators of the whole formula in
    document order (always-operators get None).
    """
    counter = 0

    def walk(g: Formula):
        nonlocal counter
        if isinstance(g, (Until, Eventually)):
            idx = counter
            counter += 1
            return [[(g, idx)]]
        if isinstance(g, Always):
            return [[(g, None)]]
        if isinstance(g, And):
            branches = [[]]
            for ch in g.children:
                child_branches = walk(ch)
                branches = [b + cb for b in branches for cb in child_branches]
            return branches
        if isinstance(g, Or):
            out = []
            for ch in g.children:
                out.extend(walk(ch))
            return out
        raise FragmentError(
            f"{type(g).__name__} is not allowed inside the optimized formula; conjuncts "
            "must be single temporal operators over predicates")

    return walk(theta)


def _psi_weights(psi: Formula, op_index: int | None, anchor: int,
                 schedule: Schedule | None, grid: SamplingGrid) -> dict[tuple[int, int], float]:
    """Scheduled-average robustness of one conjunct at one anchor, as column weights."""
    weights: dict[tuple[int, int], float] = {}

    def add(k: int, p: int, w: float) -> None:
        weights[(k, p)] = weights.get((k, p), 0.0) + w

    if isinstance(psi, (Eventually, Until)) and schedule is None:
        raise ValueError("eventually/until operators need a witness schedule")

    if isinstance(psi, Always):
        p = _atom_pred(psi.child, "always-operand")
        base = omega(psi.a, psi.b, grid)
        w = 1.0 / len(base)
        for k in base:
            add(anchor + k, p, w)
    elif isinstance(psi, Eventually):
        p = _atom_pred(psi.child, "eventually-operand")
        k1 = schedule.k1_at(op_index, anchor)
        add(k1, p, 1.0)
    elif isinstance(psi, Until):
        p1 = _atom_pred(psi.left, "until left operand")
        p2 = _atom_pred(psi.right, "until right operand")
        k1 = schedule.k1_at(op_index, anchor)
        w = 0.5 / (k1 - anchor + 1)
        for k in range(anchor, k1 + 1):
            add(k, p1, w)
        add(k1, p2, 0.5)
    else:
        raise FragmentError(f"conjuncts must be temporal operators, got {type(psi).__name__}")
    return weights


def _psi_constraints(psi: Formula, op_index: int | None, anchor: int,
                     schedule: Schedule | None, grid: SamplingGrid) -> list[tuple[int, int]]:
    """(time, predicate) pairs that must be non-negative for this conjunct."""
    if isinstance(psi, (Eventually, Until)) and schedule is None:
        raise ValueError("eventually/until operators need a witness schedule")
    if isinstance(psi, Always):
        p = _atom_pred(psi.child, "always-operand")
        return [(anchor + k, p) for k in omega(psi.a, psi.b, grid)]
    if isinstance(psi, Eventually):
        p = _atom_pred(psi.child, "eventually-operand")
        return [(schedule.k1_at(op_index, anchor), p)]
    if isinstance(psi, Until):
        p1 = _atom_pred(psi.left, "until left operand")
        p2 = _atom_pred(psi.right, "until right operand")
        k1 = schedule.k1_at(op_index, anchor)
        return [(k, p1) for k in range(anchor, k1 + 1)] + [(k1, p2)]
    raise FragmentError(f"conjuncts must be temporal operators, got {type(psi).__name__}")


def _e_matrix(conjunct, anchors, layout: _Layout, schedule, grid) -> np.ndarray:
    psi, op_index = conjunct
    E = np.zeros((len(anchors), layout.n_cols))
    for i, anchor in enumerate(anchors):
        for (k, p), w in _psi_weights(psi, op_index, anchor, schedule, grid).items():
            E[i, layout.col(k, p)] += w
    return E


def build_R(theta: Formula, schedule: Schedule | None, N: int, k_l: int, k_h: int,
            grid: SamplingGrid, table: PredicateTable):
    """Satisfaction rows over the stacked predicate vector.

    Returns (R, meta): one row per deduplicated (predicate, step) inequality,
    with meta listing the (predicate id, step) of every row in order.  The
    formula must be a conjunction (use one branch of the DNF for
    disjunctions).
    """
    branches = _dnf(theta)
    if len(branches) != 1:
        raise FragmentError("build_R expects a conjunction; compile disjunction branches separately")
    h_d = discrete_length(theta, grid)
    layout = _Layout(k_l, k_l + N + h_d - 1, table.size)
    seen: dict[tuple[int, int], None] = {}
    for psi, op_index in branches[0]:
        for anchor in range(k_l, k_h + 1):
            for point in _psi_constraints(psi, op_index, anchor, schedule, grid):
                seen.setdefault(point, None)
    R = np.zeros((len(seen), layout.n_cols))
    meta = []
    for i, (k, p) in enumerate(seen):
        R[i, layout.col(k, p)] = 1.0
        meta.append((p, k))
    return R, meta


# ---------------------------------------------------------------------------
# Full problem assembly


@dataclass(frozen=True)
class ControlConfig:
    """Optimizer-facing knobs: horizon, input constraints, penalties, slack.

    ``constraint_margin`` tightens every satisfaction row to z >= margin;
    the default of 1e-9 is invisible at problem scales but keeps actively
    pinned predicates boolean-true when the plan is re-simulated through the
    plant recursion, whose rounding differs from the stacked prediction.
    """

    horizon: int
    u_min: float | Sequence[float] = -np.inf
    u_max: float | Sequence[float] = np.inf
    input_penalty: np.ndarray | None = None
    budget_total: float | None = None
    budget_end: int | None = None       # last absolute step the budget covers
    extra_ineqs: tuple[tuple[np.ndarray, float], ...] = ()
    slack_weight: float | None = None
    constraint_margin: float = 1e-9

    def bounds(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.broadcast_to(np.asarray(self.u_min, dtype=float), (m,)).copy()
        hi = np.broadcast_to(np.asarray(self.u_max, dtype=float), (m,)).copy()
        if np.any(lo > hi):
            raise ValueError("u_min exceeds u_max")
        return lo, hi

    def penalty(self, m: int) -> np.ndarray:
        if self.input_penalty is None:
            return np.zeros((m, m))
        M = np.atleast_2d(np.asarray(self.input_penalty, dtype=float))
        if M.shape != (m, m):
            raise ValueError(f"input penalty must be {m}x{m}, got {M.shape}")
        if not np.allclose(M, M.T, atol=1e-12):
            raise ValueError("input penalty must be symmetric")
        if np.linalg.eigvalsh(M).min() < -1e-10:
            raise ValueError("input penalty must be positive semidefinite")
        return M


def default_slack_weight(table: PredicateTable, state_scale: float) -> float:
    """Heuristic penalty that dominates any realistic robustness value."""
    row_norm = float(np.abs(table.C).sum(axis=1).max()) if table.size else 1.0
    off = float(np.abs(table.c).max()) if table.size else 0.0
    return 1e3 * (off + row_norm * max(1.0, state_scale))


def _anchor_range(phi: Formula, k0: int, N: int, h_d: int, grid: SamplingGrid) -> tuple[int, int]:
    if isinstance(phi, OneTime):
        ke = event_index(phi, grid)
        if ke > k0 + N - h_d:
            raise ValueError(
                f"event step {ke} plus formula length {h_d} exceeds the horizon at step {k0}")
        return ke, ke
    k_l = max(0, k0 - h_d + 1)
    k_h = k0 + N - h_d
    return k_l, k_h


def build_problem(phi: Formula, system, table: PredicateTable, config: ControlConfig,
                  k0: int = 0, state_history: np.ndarray | None = None,
                  input_history: np.ndarray | None = None,
                  schedule: Schedule | None = None) -> list[QpProblem]:
    """Compile the formula into one problem per disjunction branch.

    ``system`` provides A, B, x0 and the sampling grid; ``state_history``
    holds the recorded states x(0..k0) (defaults to the initial state at
    k0 = 0) and fixes the past segment of the stacked predicate vector.
    The formula must be negation-free (positive normal form).
    """
    grid = system.grid
    validate_windows(phi, grid)
    theta = unwrap(phi)
    h_d = discrete_length(theta, grid)
    N = config.horizon
    if N < h_d:
        raise ValueError(f"prediction horizon N={N} is shorter than the formula length {h_d}")

    if state_history is None:
        if k0 != 0:
            raise ValueError("state_history is required when k0 > 0")
        state_history = np.atleast_2d(np.asarray(system.x0, dtype=float))
    state_history = np.atleast_2d(np.asarray(state_history, dtype=float))
    if state_history.shape[0] != k0 + 1:
        raise ValueError(f"state_history must hold x(0..{k0}), got {state_history.shape[0]} rows")
    x_now = state_history[k0]

    windows = collect_event_ops(theta)
    if windows and schedule is None:
        schedule = compute_schedule(windows, grid)

    m = np.atleast_2d(np.asarray(system.B, dtype=float)).shape[1]
    dyn = stack_dynamics(system.A, system.B, table.C, table.c, N)
    lo, hi = config.bounds(m)
    M = config.penalty(m)

    k_l, k_h = _anchor_range(phi, k0, N, h_d, grid)
    anchors = range(k_l, k_h + 1)
    t_lo = min(k_l, k0)
    layout_cols = _Layout(t_lo, k0 + N, table.size)

    # Affine model of the stacked predicate vector over [t_lo, k0 + N]:
    # past/current entries are recorded constants, future entries depend on u_st.
    n_u = N * m
    z_const = np.zeros(layout_cols.n_cols)
    z_coeff = np.zeros((layout_cols.n_cols, n_u))
    for k in range(t_lo, k0 + 1):
        z_const[layout_cols.col(k, 0):layout_cols.col(k, 0) + table.size] = table.z(state_history[k])
    future = dyn.H1 @ x_now + dyn.offset
    for k in range(k0 + 1, k0 + N + 1):
        base = layout_cols.col(k, 0)
        h_row = (k - k0 - 1) * table.size
        z_const[base:base + table.size] = future[h_row:h_row + table.size]
        z_coeff[base:base + table.size] = dyn.H2[h_row:h_row + table.size]

    problems = []
    for branch_ix, branch in enumerate(_dnf(theta)):
        problems.append(_assemble_branch(
            branch, branch_ix, anchors, layout_cols, z_const, z_coeff, schedule, grid,
            table, config, k0, N, m, lo, hi, M, input_history))
    return problems


def _assemble_branch(branch, branch_ix, anchors, layout_cols, z_const, z_coeff,
                     schedule, grid, table, config, k0, N, m, lo, hi, M,
                     input_history) -> QpProblem:
    n_anchor = len(anchors)
    multi = len(branch) > 1
    layout = VariableLayout(n_anchor if multi else 0, N, m)
    n_u = layout.n_u
    n_y = layout.total
    u_off = layout.n_epigraph

    E_per_conjunct = [_e_matrix(cj, anchors, layout_cols, schedule, grid) for cj in branch]
    E_total = sum(E_per_conjunct)

    lin = np.zeros(n_y)
    const = 0.0
    cost_pred_mass = np.zeros(table.size)
    epigraph_pred_mass = None
    if multi:
        lin[:n_anchor] = 1.0
    else:
        w = E_total.sum(axis=0)
        lin[u_off:u_off + n_u] = w @ z_coeff
        const += float(w @ z_const)
        for p in range(table.size):
            cost_pred_mass[p] = float(w[p::table.size].sum())

    rows: list[np.ndarray] = []
    bs: list[float] = []
    kinds: list[str] = []
    stl_row_info: dict[int, tuple[int, int]] = {}

    # satisfaction rows, deduplicated across conjuncts and anchors
    seen: dict[tuple[int, int], None] = {}
    for psi, op_index in branch:
        for anchor in anchors:
            for point in _psi_constraints(psi, op_index, anchor, schedule, grid):
                seen.setdefault(point, None)
    for (k, p) in seen:
        col = layout_cols.col(k, p)
        row = np.zeros(n_y)
        row[u_off:u_off + n_u] = -z_coeff[col]
        stl_row_info[len(rows)] = (p, k)
        rows.append(row)
        # the margin is planning headroom; recorded steps only need z >= 0
        margin = config.constraint_margin if k > k0 else 0.0
        bs.append(float(z_const[col]) - margin)
        kinds.append("stl")

    # epigraph rows: u_x[i] <= (E_j z)(i) for every conjunct j
    if multi:
        epigraph_pred_mass = np.zeros((len(branch) * n_anchor, table.size))
        r = 0
        for E_j in E_per_conjunct:
            for i in range(n_anchor):
                row = np.zeros(n_y)
                row[i] = 1.0
                row[u_off:u_off + n_u] = -(E_j[i] @ z_coeff)
                rows.append(row)
                bs.append(float(E_j[i] @ z_const))
                kinds.append("epigraph")
                for p in range(table.size):
                    epigraph_pred_mass[r, p] = float(E_j[i, p::table.size].sum())
                r += 1

    # input box bounds
    for step in range(N):
        for j in range(m):
            if np.isfinite(hi[j]):
                row = np.zeros(n_y)
                row[u_off + step * m + j] = 1.0
                rows.append(row)
                bs.append(float(hi[j]))
                kinds.append("box")
            if np.isfinite(lo[j]):
                row = np.zeros(n_y)
                row[u_off + step * m + j] = -1.0
                rows.append(row)
                bs.append(float(-lo[j]))
                kinds.append("box")

    # input budget over absolute steps [0, budget_end]
    if config.budget_total is not None:
        end = config.budget_end if config.budget_end is not None else k0 + N - 1
        spent = 0.0
        if input_history is not None and k0 > 0:
            hist = np.atleast_2d(np.asarray(input_history, dtype=float))[:k0]
            upto = min(k0, end + 1)
            spent = float(hist[:upto].sum())
        row = np.zeros(n_y)
        for step in range(N):
            if k0 + step <= end:
                row[u_off + step * m:u_off + (step + 1) * m] = 1.0
        rows.append(row)
        bs.append(float(config.budget_total) - spent)
        kinds.append("extra")

    for coeffs, bound in config.extra_ineqs:
        coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
        if coeffs.shape[0] != n_u:
            raise ValueError(f"extra constraint has {coeffs.shape[0]} coefficients, expected {n_u}")
        row = np.zeros(n_y)
        row[u_off:u_off + n_u] = coeffs
        rows.append(row)
        bs.append(float(bound))
        kinds.append("extra")

    quad = np.zeros((n_y, n_y))
    if np.any(M):
        quad[u_off:u_off + n_u, u_off:u_off + n_u] = np.kron(np.eye(N), M)

    debug = {
        "E": E_total,
        "E_per_conjunct": E_per_conjunct,
        "anchors": tuple(anchors),
        "z_const": z_const,
        "z_coeff": z_coeff,
        "t_lo": layout_cols.t_lo,
    }
    return QpProblem(
        quad=quad, lin=lin, const=const,
        A_ub=np.vstack(rows) if rows else np.zeros((0, n_y)),
        b_ub=np.asarray(bs, dtype=float),
        layout=layout, row_kinds=tuple(kinds), stl_row_info=stl_row_info,
        n_predicates=table.size, cost_pred_mass=cost_pred_mass,
        epigraph_pred_mass=epigraph_pred_mass, branch=branch_ix, debug=debug)


def add_slack_relaxation(p: QpProblem, s: float) -> QpProblem:
    """Append one non-negative slack per predicate and penalize their sum.

    Every satisfaction row may be violated by at most its predicate's slack,
    and the robustness terms in the cost and the epigraph rows see the
    shifted predicates as well, so the solution is least-violating for
    sufficiently large ``s``.
    """
    if s <= 0:
        raise ValueError("slack weight must be positive")
    if p.layout.n_slack:
        raise ValueError("problem already has slack variables")
    n_mu = p.n_predicates
    layout = replace(p.layout, n_slack=n_mu)
    n_old = p.n_vars

    quad = np.zeros((n_old + n_mu, n_old + n_mu))
    quad[:n_old, :n_old] = p.quad
    lin = np.concatenate([p.lin, p.cost_pred_mass - s])

    A_old = np.hstack([p.A_ub, np.zeros((p.n_rows, n_mu))])
    kinds = list(p.row_kinds)
    for row_ix, (pred, _k) in p.stl_row_info.items():
        A_old[row_ix, n_old + pred] = -1.0
    if p.epigraph_pred_mass is not None:
        epi_rows = [i for i, kind in enumerate(p.row_kinds) if kind == "epigraph"]
        for r, row_ix in enumerate(epi_rows):
            A_old[row_ix, n_old:] = -p.epigraph_pred_mass[r]

    nonneg = np.zeros((n_mu, n_old + n_mu))
    nonneg[:, n_old:] = -np.eye(n_mu)
    A_ub = np.vstack([A_old, nonneg])
    b_ub = np.concatenate([p.b_ub, np.zeros(n_mu)])
    kinds.extend(["slack"] * n_mu)

    return replace(p, quad=quad, lin=lin, A_ub=A_ub, b_ub=b_ub,
                   layout=layout, row_kinds=tuple(kinds))


def build_sr_baseline(phi: Formula, system, table: PredicateTable, config: ControlConfig,
                      k0: int = 0, state_history: np.ndarray | None = None,
                      input_history: np.ndarray | None = None) -> QpProblem:
    """Worst-case baseline: maximize the minimum predicate margin.

    Only conjunctions of always-operators over axis-aligned unit-normal
    predicates are supported; a single epigraph variable bounds every
    influential margin from below and is maximized.
    """
    grid = system.grid
    validate_windows(phi, grid)
    theta = unwrap(phi)
    h_d = discrete_length(theta, grid)
    N = config.horizon
    if N < h_d:
        raise ValueError(f"prediction horizon N={N} is shorter than the formula length {h_d}")

    def conjuncts(g: Formula):
        if isinstance(g, And):
            out = []
            for ch in g.children:
                out.extend(conjuncts(ch))
            return out
        if isinstance(g, Always) and isinstance(g.child, Pred):
            return [g]
        raise FragmentError(
            "the worst-case baseline supports conjunctions of always-operators over predicates")

    gs = conjuncts(theta)
    for g in gs:
        row, _ = table.row(g.child.pred_id)
        nz = np.nonzero(row)[0]
        if len(nz) != 1 or abs(row[nz[0]]) != 1.0:
            raise FragmentError(
                f"predicate {table.names[g.child.pred_id]!r} is not axis-aligned with unit normal")

    if state_history is None:
        if k0 != 0:
            raise ValueError("state_history is required when k0 > 0")
        state_history = np.atleast_2d(np.asarray(system.x0, dtype=float))
    state_history = np.atleast_2d(np.asarray(state_history, dtype=float))
    x_now = state_history[k0]

    m = np.atleast_2d(np.asarray(system.B, dtype=float)).shape[1]
    dyn = stack_dynamics(system.A, system.B, table.C, table.c, N)
    lo, hi = config.bounds(m)
    M = config.penalty(m)
    k_l, k_h = _anchor_range(phi, k0, N, h_d, grid)

    layout = VariableLayout(1, N, m)
    n_y = layout.total
    rows: list[np.ndarray] = []
    bs: list[float] = []
    kinds: list[str] = []
    stl_row_info: dict[int, tuple[int, int]] = {}

    future = dyn.H1 @ x_now + dyn.offset
    seen: dict[tuple[int, int], None] = {}
    for g in gs:
        p = g.child.pred_id
        for anchor in range(k_l, k_h + 1):
            for k in omega(g.a, g.b, grid):
                seen.setdefault((anchor + k, p), None)
    for (k, p) in seen:
        row = np.zeros(n_y)
        row[0] = 1.0  # t <= z_p(k)
        if k <= k0:
            zc = float(table.z(state_history[k])[p])
        else:
            h_row = (k - k0 - 1) * table.size + p
            zc = float(future[h_row])
            row[1:1 + layout.n_u] = -dyn.H2[h_row]
        stl_row_info[len(rows)] = (p, k)
        rows.append(row)
        bs.append(zc)
        kinds.append("stl")

    for step in range(N):
        for j in range(m):
            if np.isfinite(hi[j]):
                row = np.zeros(n_y)
                row[1 + step * m + j] = 1.0
                rows.append(row)
                bs.append(float(hi[j]))
                kinds.append("box")
            if np.isfinite(lo[j]):
                row = np.zeros(n_y)
                row[1 + step * m + j] = -1.0
                rows.append(row)
                bs.append(float(-lo[j]))
                kinds.append("box")

    if config.budget_total is not None:
        end = config.budget_end if config.budget_end is not None else k0 + N - 1
        spent = 0.0
        if input_history is not None and k0 > 0:
            hist = np.atleast_2d(np.asarray(input_history, dtype=float))[:k0]
            spent = float(hist[:min(k0, end + 1)].sum())
        row = np.zeros(n_y)
        for step in range(N):
            if k0 + step <= end:
                row[1 + step * m:1 + (step + 1) * m] = 1.0
        rows.append(row)
        bs.append(float(config.budget_total) - spent)
        kinds.append("extra")

    for coeffs, bound in config.extra_ineqs:
        coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
        row = np.zeros(n_y)
        row[1:1 + layout.n_u] = coeffs
        rows.append(row)
        bs.append(float(bound))
        kinds.append("extra")

    lin = np.zeros(n_y)
    lin[0] = 1.0
    quad = np.zeros((n_y, n_y))
    if np.any(M):
        quad[1:1 + layout.n_u, 1:1 + layout.n_u] = np.kron(np.eye(N), M)

    return QpProblem(
        quad=quad, lin=lin, const=0.0,
        A_ub=np.vstack(rows), b_ub=np.asarray(bs, dtype=float),
        layout=layout, row_kinds=tuple(kinds), stl_row_info=stl_row_info,
        n_predicates=table.size, cost_pred_mass=np.zeros(table.size))


def dump_problem(p: QpProblem) -> str:
    """Plain-text matrix dump for golden-file comparisons."""

    def mat(name: str, a: np.ndarray) -> str:
        a = np.atleast_2d(a)
        body = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in a)
        return f"{name} {a.shape[0]}x{a.shape[1]}\n{body}"

    parts = [mat("lin", p.lin), mat("quad", p.quad), mat("A_ub", p.A_ub), mat("b_ub", p.b_ub)]
    if p.debug:
        parts.insert(0, mat("E", p.debug["E"]))
    parts.append(f"const {p.const:.17g}")
    return "\n".join(parts)
