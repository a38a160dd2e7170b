"""Core STL fragment: AST nodes, sampling grid, predicate table and formula algebra.

The supported fragment is built from affine predicates and three layers:

* atoms ``gamma``: true, a predicate, or a negated predicate,
* ``psi``: a single bounded temporal operator (until / eventually / always)
  whose children are atoms,
* ``theta``: conjunctions and disjunctions of ``psi`` formulas,

optionally wrapped at the root into an all-time formula (the property must
hold at every sampling step) or a one-time formula (the property is anchored
at a single event instant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

__all__ = [
    "SamplingGrid",
    "PredicateTable",
    "TrueNode",
    "Pred",
    "Not",
    "And",
    "Or",
    "Until",
    "Eventually",
    "Always",
    "AllTime",
    "OneTime",
    "Formula",
    "FragmentError",
    "EmptyWindowError",
    "omega",
    "continuous_length",
    "discrete_length",
    "to_pnf",
    "collect_event_ops",
    "iter_nodes",
    "predicate_ids",
    "is_gamma",
    "is_psi",
    "is_theta",
    "validate_windows",
    "unwrap",
]


class FragmentError(ValueError):
    """Raised when a formula falls outside the supported STL fragment."""


class EmptyWindowError(ValueError):
    """Raised when a temporal interval contains no sampling instant."""


@dataclass(frozen=True)
class SamplingGrid:
    """Uniform sampling of continuous time, tau(k) = k*T."""

    T: float

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError(f"sampling period must be positive, got {self.T}")

    def tau(self, k: int) -> float:
        return k * self.T


# Relative slack when mapping continuous interval bounds onto the grid, so
# that e.g. 216/12 lands on index 18 despite floating point rounding.
_GRID_EPS = 1e-9


def omega(a: float, b: float, grid: SamplingGrid) -> range:
    """Indices k with a <= k*T <= b (possibly empty, never negative)."""
    if a < 0 or b < a:
        raise ValueError(f"invalid interval [{a}, {b}]")
    lo = max(0, math.ceil(a / grid.T - _GRID_EPS))
    hi = math.floor(b / grid.T + _GRID_EPS)
    return range(lo, hi + 1)


# ---------------------------------------------------------------------------
# Predicate bookkeeping


class PredicateTable:
    """Affine predicate functions z(k) = C x(k) + c.

    Row i holds the normal of predicate i; predicate i is true at step k
    exactly when ``C[i] @ x(k) + c[i] >= 0``.  Rows are deduplicated: two
    syntactic occurrences with the same (normal, offset) share one id.
    """

    def __init__(self, rows: Sequence[Sequence[float]], offsets: Sequence[float],
                 names: Sequence[str] | None = None):
        self._C = np.atleast_2d(np.asarray(rows, dtype=float))
        self._c = np.asarray(offsets, dtype=float).reshape(-1)
        if self._C.shape[0] != self._c.shape[0]:
            raise ValueError("row count and offset count differ")
        if names is None:
            names = [f"p{i}" for i in range(self._C.shape[0])]
        if len(names) != self._C.shape[0]:
            raise ValueError("name count and row count differ")
        self._names = tuple(names)
        self._C.setflags(write=False)
        self._c.setflags(write=False)

    @property
    def C(self) -> np.ndarray:
        return self._C

    @property
    def c(self) -> np.ndarray:
        return self._c

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def size(self) -> int:
        return self._C.shape[0]

    @property
    def n_states(self) -> int:
        return self._C.shape[1]

    def z(self, x: np.ndarray) -> np.ndarray:
        """Predicate vector at one state (or a (K+1, n) stack of states)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self._C @ x + self._c
        return x @ self._C.T + self._c

    def row(self, pred_id: int) -> tuple[np.ndarray, float]:
        return self._C[pred_id], float(self._c[pred_id])

    def find(self, row: Sequence[float], offset: float) -> int | None:
        key = (tuple(float(v) for v in row), float(offset))
        for i in range(self.size):
            if (tuple(self._C[i]), float(self._c[i])) == key:
                return i
        return None

    def extended(self, row: Sequence[float], offset: float, name: str) -> tuple["PredicateTable", int]:
        """Table with one more predicate (or this table if already present)."""
        existing = self.find(row, offset)
        if existing is not None:
            return self, existing
        rows = np.vstack([self._C, np.asarray(row, dtype=float)])
        offs = np.append(self._c, float(offset))
        return PredicateTable(rows, offs, self._names + (name,)), self.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PredicateTable):
            return NotImplemented
        return (np.array_equal(self._C, other._C)
                and np.array_equal(self._c, other._c))

    def __repr__(self) -> str:
        return f"PredicateTable(size={self.size}, n_states={self.n_states})"


# ---------------------------------------------------------------------------
# AST nodes


@dataclass(frozen=True)
class TrueNode:
    def __str__(self) -> str:
        return "true"


@dataclass(frozen=True)
class Pred:
    pred_id: int


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    children: tuple["Formula", ...]

    def __post_init__(self) -> None:
        if len(self.children) < 2:
            raise ValueError("conjunction needs at least two children")


@dataclass(frozen=True)
class Or:
    children: tuple["Formula", ...]

    def __post_init__(self) -> None:
        if len(self.children) < 2:
            raise ValueError("disjunction needs at least two children")


def _check_interval(a: float, b: float) -> None:
    if not (0 <= a <= b) or math.isinf(b):
        raise FragmentError(f"temporal interval must satisfy 0 <= a <= b < inf, got [{a}, {b}]")


@dataclass(frozen=True)
class Until:
    left: "Formula"
    right: "Formula"
    a: float
    b: float

    def __post_init__(self) -> None:
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Eventually:
    child: "Formula"
    a: float
    b: float

    def __post_init__(self) -> None:
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Always:
    child: "Formula"
    a: float
    b: float

    def __post_init__(self) -> None:
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class AllTime:
    """Root wrapper: the child must hold at every sampling step."""

    child: "Formula"


@dataclass(frozen=True)
class OneTime:
    """Root wrapper: the child must hold once, at the event instant (seconds)."""

    child: "Formula"
    event_time: float = 0.0


Formula = Union[TrueNode, Pred, Not, And, Or, Until, Eventually, Always, AllTime, OneTime]

_TEMPORAL = (Until, Eventually, Always)
_WRAPPERS = (AllTime, OneTime)


def iter_nodes(f: Formula) -> Iterator[Formula]:
    """Depth-first, document-order iteration over all nodes."""
    yield f
    if isinstance(f, (Not, Eventually, Always, AllTime, OneTime)):
        yield from iter_nodes(f.child)
    elif isinstance(f, (And, Or)):
        for ch in f.children:
            yield from iter_nodes(ch)
    elif isinstance(f, Until):
        yield from iter_nodes(f.left)
        yield from iter_nodes(f.right)


def predicate_ids(f: Formula) -> tuple[int, ...]:
    """Distinct predicate ids in document order."""
    seen: dict[int, None] = {}
    for node in iter_nodes(f):
        if isinstance(node, Pred):
            seen.setdefault(node.pred_id, None)
    return tuple(seen)


def unwrap(f: Formula) -> Formula:
    """Strip a root AllTime/OneTime wrapper, if present."""
    return f.child if isinstance(f, _WRAPPERS) else f


# ---------------------------------------------------------------------------
# Classification


def is_gamma(f: Formula) -> bool:
    if isinstance(f, (TrueNode, Pred)):
        return True
    return isinstance(f, Not) and isinstance(f.child, Pred)


def is_psi(f: Formula) -> bool:
    if isinstance(f, Until):
        return is_gamma(f.left) and is_gamma(f.right)
    if isinstance(f, (Eventually, Always)):
        return is_gamma(f.child)
    return False


def is_theta(f: Formula) -> bool:
    if is_psi(f):
        return True
    if isinstance(f, (And, Or)):
        return all(is_theta(ch) or is_gamma(ch) for ch in f.children)
    return is_gamma(f)


# ---------------------------------------------------------------------------
# Formula length


def continuous_length(f: Formula) -> float:
    """Horizon (seconds) needed beyond the evaluation instant."""
    if isinstance(f, AllTime):
        raise FragmentError("all-time formulas have unbounded length; query the wrapped formula")
    if isinstance(f, OneTime):
        return continuous_length(f.child)
    if isinstance(f, (TrueNode, Pred)):
        return 0.0
    if isinstance(f, Not):
        return continuous_length(f.child)
    if isinstance(f, (And, Or)):
        return max(continuous_length(ch) for ch in f.children)
    if isinstance(f, Until):
        return f.b + max(continuous_length(f.left), continuous_length(f.right))
    if isinstance(f, (Eventually, Always)):
        return f.b + continuous_length(f.child)
    raise TypeError(f"not a formula node: {f!r}")


def discrete_length(f: Formula, grid: SamplingGrid) -> int:
    """Largest sample index within the continuous length."""
    hc = continuous_length(f)
    return max(omega(0.0, hc, grid))


# ---------------------------------------------------------------------------
# Positive normal form


def _negated_name(name: str) -> str:
    return name[1:] if name.startswith("!") else "!" + name


def to_pnf(f: Formula, table: PredicateTable) -> tuple[Formula, PredicateTable]:
    """Push negations inward and encode them into fresh predicates.

    A negated predicate with function z becomes a new predicate with
    function -z; the boundary z = 0 flips from unsatisfied to satisfied,
    which leaves every robustness value unchanged.  Returns the rewritten
    formula together with the (possibly extended) predicate table.
    """

    def pos(g: Formula, tab: PredicateTable) -> tuple[Formula, PredicateTable]:
        if isinstance(g, (TrueNode, Pred)):
            return g, tab
        if isinstance(g, Not):
            return neg(g.child, tab)
        if isinstance(g, (And, Or)):
            out = []
            for ch in g.children:
                ch2, tab = pos(ch, tab)
                out.append(ch2)
            kids = tuple(out)
            if kids == g.children:
                return g, tab
            return type(g)(kids), tab
        if isinstance(g, Until):
            left, tab = pos(g.left, tab)
            right, tab = pos(g.right, tab)
            if left is g.left and right is g.right:
                return g, tab
            return Until(left, right, g.a, g.b), tab
        if isinstance(g, (Eventually, Always)):
            ch, tab = pos(g.child, tab)
            if ch is g.child:
                return g, tab
            return type(g)(ch, g.a, g.b), tab
        if isinstance(g, AllTime):
            ch, tab = pos(g.child, tab)
            return (g if ch is g.child else AllTime(ch)), tab
        if isinstance(g, OneTime):
            ch, tab = pos(g.child, tab)
            return (g if ch is g.child else OneTime(ch, g.event_time)), tab
        raise TypeError(f"not a formula node: {g!r}")

    def neg(g: Formula, tab: PredicateTable) -> tuple[Formula, PredicateTable]:
        if isinstance(g, Pred):
            row, off = tab.row(g.pred_id)
            tab2, new_id = tab.extended(-row, -off, _negated_name(tab.names[g.pred_id]))
            return Pred(new_id), tab2
        if isinstance(g, Not):
            return pos(g.child, tab)
        if isinstance(g, And):
            out = []
            for ch in g.children:
                ch2, tab = neg(ch, tab)
                out.append(ch2)
            return Or(tuple(out)), tab
        if isinstance(g, Or):
            out = []
            for ch in g.children:
                ch2, tab = neg(ch, tab)
                out.append(ch2)
            return And(tuple(out)), tab
        if isinstance(g, Always):
            ch, tab = neg(g.child, tab)
            return Eventually(ch, g.a, g.b), tab
        if isinstance(g, Eventually):
            ch, tab = neg(g.child, tab)
            return Always(ch, g.a, g.b), tab
        if isinstance(g, TrueNode):
            raise FragmentError("negated true is not expressible in the fragment")
        if isinstance(g, Until):
            raise FragmentError("negated until is not expressible in the fragment")
        if isinstance(g, _WRAPPERS):
            raise FragmentError("cannot negate a root wrapper")
        raise TypeError(f"not a formula node: {g!r}")

    return pos(f, table)


# ---------------------------------------------------------------------------
# Temporal operator bookkeeping


def collect_event_ops(theta: Formula) -> list[tuple[float, float]]:
    """Intervals (a, b) of every eventually/until node, in document order."""
    out: list[tuple[float, float]] = []
    for node in iter_nodes(unwrap(theta)):
        if isinstance(node, (Until, Eventually)):
            out.append((node.a, node.b))
    return out


def validate_windows(f: Formula, grid: SamplingGrid) -> None:
    """Reject formulas whose temporal windows contain no sampling instant.

    Every semantics rule takes a min/max over the window's index set, so an
    empty window would make the formula unevaluable; failing early gives a
    much better error message than an empty-sequence crash mid-recursion.
    """
    for node in iter_nodes(f):
        if isinstance(node, _TEMPORAL):
            if len(omega(node.a, node.b, grid)) == 0:
                raise EmptyWindowError(
                    f"interval [{node.a}, {node.b}] contains no multiple of T={grid.T}")
        if isinstance(node, OneTime):
            if len(omega(node.event_time, node.event_time, grid)) != 1:
                raise EmptyWindowError(
                    f"event time {node.event_time} is not a sampling instant of T={grid.T}")


def event_index(f: OneTime, grid: SamplingGrid) -> int:
    """Sample index of the event instant."""
    ks = omega(f.event_time, f.event_time, grid)
    if len(ks) != 1:
        raise EmptyWindowError(
            f"event time {f.event_time} is not a sampling instant of T={grid.T}")
    return ks[0]
