"""Scene grammars: symbols, pose spaces, geometry kernels, rules, bricks.

A grammar generates scenes out of *bricks*, (symbol, pose) pairs.  Each
symbol owns a finite pose grid; rules rewrite a parent brick into child
bricks whose poses are drawn from per-slot geometry kernels.  This module
holds the data model, validation, the dense brick <-> integer id table,
the brick-level expansion graph, and topological ordering.

Everything here is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence, Union

from .errors import (
    CapacityExceeded,
    EmptyPoseSpace,
    GrammarError,
    KernelInvalid,
    KernelUnnormalized,
    RuleProbabilityMismatch,
    UnknownSymbol,
)

Pose = tuple  # (x, y) | (x, y, orientation) | (x, y, scale_index)

PROB_TOL = 1e-9

# 8-neighborhood direction table indexed by orientation step (45 degrees each).
# Rotating a base offset by orientation o shifts its direction index by o.
DIRS8 = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))
_DIR_INDEX = {d: i for i, d in enumerate(DIRS8)}


def rotate_offset(offset: tuple, orientation: int) -> tuple:
    """Rotate an 8-neighborhood offset by orientation * 45 degrees."""
    if offset == (0, 0):
        return offset
    base = _DIR_INDEX.get(tuple(offset))
    if base is None:
        raise KernelInvalid(
            f"offset {offset} is not rotatable: must be (0,0) or an "
            f"8-neighborhood step {sorted(_DIR_INDEX)}"
        )
    return DIRS8[(base + orientation) % 8]


@dataclass(frozen=True)
class PoseSpace:
    """Finite pose grid for one symbol.

    Poses are (x, y), (x, y, orientation) when orientations > 1, or
    (x, y, scale_index) when a scale ladder is declared.  x indexes
    columns in [0, width), y rows in [0, height).
    """

    width: int
    height: int
    orientations: int = 1
    scales: tuple = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise EmptyPoseSpace(f"pose grid {self.width}x{self.height} is empty")
        if self.orientations < 1:
            raise EmptyPoseSpace("orientation count must be >= 1")
        if self.orientations > 1 and self.scales:
            raise GrammarError("a pose space may have orientations or scales, not both")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))

    @property
    def n_extra(self) -> int:
        if self.orientations > 1:
            return self.orientations
        if self.scales:
            return len(self.scales)
        return 1

    @property
    def has_extra(self) -> bool:
        return self.orientations > 1 or bool(self.scales)

    @property
    def size(self) -> int:
        return self.width * self.height * self.n_extra

    def in_bounds(self, pose: Pose) -> bool:
        if len(pose) != (3 if self.has_extra else 2):
            return False
        x, y = pose[0], pose[1]
        if not (0 <= x < self.width and 0 <= y < self.height):
            return False
        if self.has_extra:
            return 0 <= pose[2] < self.n_extra
        return True

    def index(self, pose: Pose) -> int:
        """Dense index of a pose: row-major over (y, x), extras fastest."""
        if not self.in_bounds(pose):
            raise ValueError(f"pose {pose} out of bounds for {self}")
        base = (pose[1] * self.width + pose[0]) * self.n_extra
        return base + (pose[2] if self.has_extra else 0)

    def pose_at(self, index: int) -> Pose:
        if not (0 <= index < self.size):
            raise ValueError(f"pose index {index} out of range")
        extra = index % self.n_extra
        cell = index // self.n_extra
        x, y = cell % self.width, cell // self.width
        return (x, y, extra) if self.has_extra else (x, y)

    def poses(self) -> Iterator[Pose]:
        for i in range(self.size):
            yield self.pose_at(i)


class GeometryKernel:
    """Categorical distribution over a child pose given the parent pose.

    Kernels whose support falls partly out of the child grid are
    renormalized over the in-bounds part; a fully out-of-bounds support is
    empty and the slot silently produces nothing for that parent pose.
    """

    kind = "abstract"

    def support(self, parent_pose: Pose, parent_space: PoseSpace,
                child_space: PoseSpace) -> tuple:
        """In-bounds, renormalized ((child_pose, prob), ...); may be empty."""
        raw = self._raw_support(parent_pose, parent_space, child_space)
        entries = [(z, p) for z, p in raw if child_space.in_bounds(z)]
        total = sum(p for _, p in entries)
        if total <= 0.0:
            return ()
        if abs(total - 1.0) <= PROB_TOL:
            return tuple(entries)
        return tuple((z, p / total) for z, p in entries)

    def _raw_support(self, parent_pose, parent_space, child_space):
        raise NotImplementedError

    def check(self, parent_space: PoseSpace, child_space: PoseSpace) -> None:
        """Structural validation against the two pose spaces."""

    def to_config(self) -> dict:
        """Serializable description (inverse of grammar_io parsing)."""
        raise NotImplementedError


class ExplicitKernel(GeometryKernel):
    """Kernel given by a literal table: parent pose -> [(child pose, prob)].

    Parent poses absent from the table have empty support.  Each declared
    row must sum to one before boundary renormalization.
    """

    kind = "explicit"

    def __init__(self, table: Mapping[Pose, Sequence]):
        self.table = {
            tuple(parent): tuple((tuple(z), float(p)) for z, p in entries)
            for parent, entries in table.items()
        }

    def _raw_support(self, parent_pose, parent_space, child_space):
        return self.table.get(tuple(parent_pose), ())

    def check(self, parent_space, child_space):
        for parent, entries in self.table.items():
            if not parent_space.in_bounds(parent):
                raise KernelInvalid(f"explicit kernel row for out-of-grid parent {parent}")
            total = sum(p for _, p in entries)
            if abs(total - 1.0) > PROB_TOL:
                raise KernelUnnormalized(
                    f"explicit kernel row for parent {parent} sums to {total!r}"
                )
            if any(p < 0 for _, p in entries):
                raise KernelUnnormalized(f"negative probability in row for {parent}")

    def to_config(self):
        return {
            "kind": "explicit",
            "table": [
                {"parent": list(parent),
                 "children": [[list(z), p] for z, p in entries]}
                for parent, entries in sorted(self.table.items())
            ],
        }


class OffsetKernel(GeometryKernel):
    """Uniform over a finite list of integer position offsets.

    With rotate=True each offset is rotated by the parent's orientation
    through the 8-neighborhood table; the parent space must then have
    exactly 8 orientations and every offset must be rotatable.  A child
    with orientations inherits the parent's; a child with scales inherits
    the parent's scale index (the ladders must match).
    """

    kind = "offsets"

    def __init__(self, offsets: Sequence, rotate: bool = False):
        self.offsets = tuple((int(dx), int(dy)) for dx, dy in offsets)
        self.rotate = bool(rotate)
        if not self.offsets:
            raise KernelInvalid("offset kernel needs at least one offset")

    def _raw_support(self, parent_pose, parent_space, child_space):
        x, y = parent_pose[0], parent_pose[1]
        offsets = self.offsets
        if self.rotate:
            offsets = [rotate_offset(o, parent_pose[2]) for o in offsets]
        p = 1.0 / len(offsets)
        out = []
        for dx, dy in offsets:
            child = (x + dx, y + dy)
            if child_space.has_extra:
                if child_space.orientations > 1:
                    child = child + (parent_pose[2],)
                else:
                    child = child + (parent_pose[2] if parent_space.scales else 0,)
            out.append((child, p))
        return out

    def check(self, parent_space, child_space):
        if self.rotate:
            if parent_space.orientations != 8:
                raise KernelInvalid("rotated offsets require an 8-orientation parent")
            for o in self.offsets:
                rotate_offset(o, 0)
        if child_space.orientations > 1 and parent_space.orientations != child_space.orientations:
            raise KernelInvalid("offset kernel cannot invent a child orientation")
        if child_space.scales and parent_space.scales != child_space.scales:
            raise KernelInvalid("offset kernel requires matching scale ladders")

    def to_config(self):
        cfg = {"kind": "offsets", "offsets": [list(o) for o in self.offsets]}
        if self.rotate:
            cfg["rotate"] = True
        return cfg


class RegionKernel(GeometryKernel):
    """Uniform box at a scale-dependent offset from the parent position.

    The box is centered at (x, y) + s * center_offset where s is the
    parent's scale value (1.0 for unscaled parents) and spans
    +-half_size in each axis.  When the child has a scale ladder, a
    scale_map row per parent scale gives the categorical over child
    scale indices; position and scale factorize, and the whole support
    renormalizes jointly over in-bounds entries.
    """

    kind = "region"

    def __init__(self, center_offset: Sequence, half_size: Sequence, scale_map=None):
        self.center_offset = (float(center_offset[0]), float(center_offset[1]))
        self.half_size = (int(half_size[0]), int(half_size[1]))
        self.scale_map = None
        if scale_map is not None:
            self.scale_map = tuple(tuple(float(p) for p in row) for row in scale_map)
        if self.half_size[0] < 0 or self.half_size[1] < 0:
            raise KernelInvalid("region half_size must be nonnegative")

    def _raw_support(self, parent_pose, parent_space, child_space):
        x, y = parent_pose[0], parent_pose[1]
        if parent_space.scales:
            s = parent_space.scales[parent_pose[2]]
        else:
            s = 1.0
        cx = round(x + s * self.center_offset[0])
        cy = round(y + s * self.center_offset[1])
        hx, hy = self.half_size
        cells = [(cx + dx, cy + dy)
                 for dy in range(-hy, hy + 1)
                 for dx in range(-hx, hx + 1)]
        p_cell = 1.0 / len(cells)
        if child_space.scales:
            row = self.scale_map[parent_pose[2] if parent_space.scales else 0]
            return [((px, py, si), p_cell * ps)
                    for px, py in cells
                    for si, ps in enumerate(row) if ps > 0.0]
        return [((px, py), p_cell) for px, py in cells]

    def check(self, parent_space, child_space):
        if parent_space.orientations > 1 or child_space.orientations > 1:
            raise KernelInvalid("region kernels apply to unoriented symbols")
        if child_space.scales:
            if self.scale_map is None:
                raise KernelInvalid("child has a scale ladder but no scale_map given")
            n_rows = len(parent_space.scales) if parent_space.scales else 1
            if len(self.scale_map) != n_rows:
                raise KernelInvalid(
                    f"scale_map needs {n_rows} rows, got {len(self.scale_map)}"
                )
            for row in self.scale_map:
                if len(row) != len(child_space.scales):
                    raise KernelInvalid("scale_map row length != child ladder size")
                if abs(sum(row) - 1.0) > PROB_TOL or any(p < 0 for p in row):
                    raise KernelUnnormalized(f"scale_map row {row} is not a distribution")
        elif self.scale_map is not None:
            raise KernelInvalid("scale_map given but child has no scale ladder")

    def to_config(self):
        cfg = {
            "kind": "region",
            "center_offset": list(self.center_offset),
            "half_size": list(self.half_size),
        }
        if self.scale_map is not None:
            cfg["scale_map"] = [list(row) for row in self.scale_map]
        return cfg


@dataclass(frozen=True)
class Rule:
    """Production lhs -> rhs with one geometry kernel per rhs slot."""

    lhs: str
    probability: float
    rhs: tuple = ()
    kernels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "rhs", tuple(self.rhs))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if len(self.rhs) != len(self.kernels):
            raise GrammarError(
                f"rule {self.lhs}: {len(self.rhs)} rhs symbols but "
                f"{len(self.kernels)} kernels"
            )
        if not (0.0 <= self.probability <= 1.0):
            raise RuleProbabilityMismatch(
                f"rule {self.lhs}: probability {self.probability} outside [0, 1]"
            )


@dataclass
class Grammar:
    """A validated probabilistic scene grammar.

    Build instances through validate_grammar / check_grammar (or the
    builders module) rather than by hand; the checks there establish the
    invariants the rest of the package relies on.
    """

    symbols: tuple
    pose_spaces: dict
    rules: tuple
    self_rooting: dict
    rho: float
    _rules_by_symbol: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.symbols = tuple(self.symbols)
        self.rules = tuple(self.rules)
        if not self._rules_by_symbol:
            by_symbol = {a: [] for a in self.symbols}
            for r in self.rules:
                by_symbol.setdefault(r.lhs, []).append(r)
            self._rules_by_symbol = by_symbol

    def rules_for(self, symbol: str) -> list:
        return list(self._rules_by_symbol.get(symbol, ()))

    def space(self, symbol: str) -> PoseSpace:
        return self.pose_spaces[symbol]

    def epsilon(self, symbol: str) -> float:
        return self.self_rooting.get(symbol, 0.0)

    def with_parameters(self, rule_probs: Mapping = None,
                        self_rooting: Mapping = None) -> "Grammar":
        """Copy with new rule probabilities and/or self-rooting values.

        rule_probs maps symbol -> sequence of probabilities in rule
        declaration order.  Structure (rhs, kernels) is shared.
        """
        new_rules = []
        for sym in self.symbols:
            sym_rules = self._rules_by_symbol.get(sym, ())
            if rule_probs and sym in rule_probs:
                probs = rule_probs[sym]
                if len(probs) != len(sym_rules):
                    raise GrammarError(f"{sym}: expected {len(sym_rules)} probabilities")
                sym_rules = [
                    Rule(r.lhs, float(p), r.rhs, r.kernels)
                    for r, p in zip(sym_rules, probs)
                ]
            new_rules.extend(sym_rules)
        eps = dict(self.self_rooting)
        if self_rooting:
            eps.update({a: float(v) for a, v in self_rooting.items()})
        # structure is unchanged, so skip the kernel re-enumeration
        return check_grammar(Grammar(self.symbols, self.pose_spaces,
                                     tuple(new_rules), eps, self.rho),
                             check_kernels=False)


def check_grammar(g: Grammar, kernel_sample_limit: int = 100_000,
                  check_kernels: bool = True) -> Grammar:
    """Validate a constructed Grammar; returns it unchanged on success.

    Kernel normalization is verified by enumerating supports for every
    parent pose when the total brick count is at most
    kernel_sample_limit, otherwise for a deterministic sample of poses.
    """
    seen = set()
    for a in g.symbols:
        if a in seen:
            raise GrammarError(f"symbol {a} declared twice")
        seen.add(a)
        if a not in g.pose_spaces:
            raise GrammarError(f"symbol {a} has no pose space")
    for a in g.pose_spaces:
        if a not in seen:
            raise UnknownSymbol(f"pose space for undeclared symbol {a}")
    for a, eps in g.self_rooting.items():
        if a not in seen:
            raise UnknownSymbol(f"self-rooting for undeclared symbol {a}")
        if not (0.0 <= eps <= 1.0):
            raise GrammarError(f"self-rooting for {a} is {eps}, outside [0, 1]")
    if not (0.0 < g.rho <= 1.0):
        raise GrammarError(f"rho is {g.rho}, outside (0, 1]")

    for r in g.rules:
        if r.lhs not in seen:
            raise UnknownSymbol(f"rule LHS {r.lhs} undeclared")
        for b in r.rhs:
            if b not in seen:
                raise UnknownSymbol(f"rule {r.lhs}: RHS symbol {b} undeclared")

    for a in g.symbols:
        sym_rules = g.rules_for(a)
        if sym_rules:
            total = sum(r.probability for r in sym_rules)
            if abs(total - 1.0) > PROB_TOL:
                raise RuleProbabilityMismatch(
                    f"rule probabilities for {a} sum to {total!r}"
                )

    if not check_kernels:
        return g

    total_bricks = sum(g.pose_spaces[a].size for a in g.symbols)
    for r in g.rules:
        parent_space = g.pose_spaces[r.lhs]
        for i, (child_sym, kernel) in enumerate(zip(r.rhs, r.kernels)):
            child_space = g.pose_spaces[child_sym]
            kernel.check(parent_space, child_space)
            if total_bricks <= kernel_sample_limit:
                parent_poses = parent_space.poses()
            else:
                step = max(1, parent_space.size // 64)
                parent_poses = (parent_space.pose_at(j)
                                for j in range(0, parent_space.size, step))
            for pose in parent_poses:
                entries = kernel.support(pose, parent_space, child_space)
                if not entries:
                    continue
                total = sum(p for _, p in entries)
                if abs(total - 1.0) > PROB_TOL:
                    raise KernelUnnormalized(
                        f"rule {r.lhs} slot {i}: support at parent {pose} "
                        f"sums to {total!r}"
                    )
    return g


def validate_grammar(desc: Mapping) -> Grammar:
    """Build and validate a Grammar from a parsed description mapping.

    The mapping uses the grammar file schema (sections: symbols,
    pose_spaces, rules, params); see grammar_io for parsing files.
    """
    from . import grammar_io

    return check_grammar(grammar_io.grammar_from_description(desc))


class BrickTable:
    """Dense bijection between bricks (symbol, pose) and integer ids.

    Ids are contiguous per symbol, symbols in declaration order, poses in
    PoseSpace index order.
    """

    def __init__(self, grammar: Grammar):
        self.grammar = grammar
        self.symbols = grammar.symbols
        self._base = {}
        self._spaces = {}
        base = 0
        for a in self.symbols:
            space = grammar.pose_spaces[a]
            self._base[a] = base
            self._spaces[a] = space
            base += space.size
        self.size = base
        self._bounds = [(self._base[a], self._base[a] + self._spaces[a].size, a)
                        for a in self.symbols]

    def to_id(self, symbol: str, pose: Pose) -> int:
        return self._base[symbol] + self._spaces[symbol].index(pose)

    def from_id(self, brick_id: int):
        if not (0 <= brick_id < self.size):
            raise ValueError(f"brick id {brick_id} out of range")
        for lo, hi, a in self._bounds:
            if lo <= brick_id < hi:
                return a, self._spaces[a].pose_at(brick_id - lo)
        raise AssertionError("unreachable")

    def symbol_range(self, symbol: str) -> range:
        lo = self._base[symbol]
        return range(lo, lo + self._spaces[symbol].size)

    def symbol_of(self, brick_id: int) -> str:
        for lo, hi, a in self._bounds:
            if lo <= brick_id < hi:
                return a
        raise ValueError(f"brick id {brick_id} out of range")

    def bricks(self) -> Iterator[int]:
        return iter(range(self.size))


@dataclass(frozen=True)
class CycleReport:
    """One brick-level cycle witnessing that the expansion graph is cyclic."""

    cycle: tuple  # brick ids b0, b1, ..., bk with an edge bk -> b0

    def describe(self, table: BrickTable) -> str:
        names = [f"{a}{pose}" for a, pose in (table.from_id(b) for b in self.cycle)]
        return " -> ".join(names + [names[0]])


class ExpansionGraph:
    """Directed graph on brick ids: an edge when one brick can generate another.

    Successor lists are enumerated lazily from the grammar's kernels and
    cached up to a configurable edge budget; `materialize` forces the full
    edge list and raises CapacityExceeded beyond the budget.
    """

    def __init__(self, grammar: Grammar, table: BrickTable = None,
                 edge_budget: int = 20_000_000):
        self.grammar = grammar
        self.table = table or BrickTable(grammar)
        self.edge_budget = edge_budget
        self._succ_cache = {}
        self._cached_edges = 0

    def successors(self, brick_id: int) -> tuple:
        cached = self._succ_cache.get(brick_id)
        if cached is not None:
            return cached
        symbol, pose = self.table.from_id(brick_id)
        g = self.grammar
        out = set()
        for r in g.rules_for(symbol):
            parent_space = g.pose_spaces[symbol]
            for child_sym, kernel in zip(r.rhs, r.kernels):
                child_space = g.pose_spaces[child_sym]
                for z, _ in kernel.support(pose, parent_space, child_space):
                    out.add(self.table.to_id(child_sym, z))
        result = tuple(sorted(out))
        if self._cached_edges + len(result) <= self.edge_budget:
            self._succ_cache[brick_id] = result
            self._cached_edges += len(result)
        return result

    def iter_edges(self) -> Iterator[tuple]:
        for b in self.table.bricks():
            for c in self.successors(b):
                yield b, c

    def materialize(self, max_edges: int = None) -> list:
        """Full edge list; CapacityExceeded if it would exceed the budget."""
        budget = self.edge_budget if max_edges is None else max_edges
        edges = []
        for e in self.iter_edges():
            edges.append(e)
            if len(edges) > budget:
                raise CapacityExceeded(
                    f"expansion graph exceeds edge budget {budget}"
                )
        return edges


TopoResult = Union[list, CycleReport]


def topological_order(h: ExpansionGraph) -> TopoResult:
    """Order bricks so every generator precedes what it can generate.

    Ties break by ascending brick id, so the result is deterministic.
    Returns a CycleReport carrying one brick-level cycle when the graph
    is cyclic.
    """
    n = h.table.size
    indeg = [0] * n
    for b in range(n):
        for c in h.successors(b):
            indeg[c] += 1
    ready = [b for b in range(n) if indeg[b] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        b = heapq.heappop(ready)
        order.append(b)
        for c in h.successors(b):
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) == n:
        return order
    return _find_cycle(h, [b for b in range(n) if indeg[b] > 0])


def _find_cycle(h: ExpansionGraph, candidates: Iterable) -> CycleReport:
    """Iterative DFS over the residual subgraph; extracts one cycle."""
    candidates = set(candidates)
    color = {}  # 1 = on stack, 2 = done
    parent = {}
    for root in sorted(candidates):
        if color.get(root):
            continue
        stack = [(root, iter(h.successors(root)))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                if child not in candidates:
                    continue
                c = color.get(child)
                if c == 1:
                    cycle = [child]
                    cur = node
                    while cur != child:
                        cycle.append(cur)
                        cur = parent[cur]
                    cycle.reverse()
                    # rotate so the smallest brick id leads (determinism)
                    k = cycle.index(min(cycle))
                    return CycleReport(tuple(cycle[k:] + cycle[:k]))
                if c is None:
                    parent[child] = node
                    color[child] = 1
                    stack.append((child, iter(h.successors(child))))
                    advanced = True
                    break
            if not advanced:
                color[node] = 2
                stack.pop()
    raise AssertionError("residual graph reported cyclic but no cycle found")
