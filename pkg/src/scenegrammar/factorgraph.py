"""Compile a grammar into an explicit sparse factor graph.

Variables are binary: presence X per brick, rule selection R per
(brick, rule), and generation G per (brick, rule, slot, child pose in the
kernel's in-bounds support).  Factors come in two families:

* noisy-OR: one per brick; inputs are all G variables targeting the
  brick, output is the brick's X; leak is the symbol's self-rooting
  probability and the strength is -log(1 - rho).
* switched categorical: rule selection (switch X, outcomes R, outcome
  probabilities the rule distribution) and pose selection (switch R,
  outcomes G, probabilities the kernel support).  With the switch off the
  factor forces all outcomes to zero with value one.

The construction works for cyclic grammars as well; nothing here needs a
topological order.  Adjacency is stored as contiguous index arrays grouped
by factor (scope position 0 is the output/switch), which is the layout the
message-passing engine iterates over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from .errors import CapacityExceeded, ScopeMismatch
from .grammar import BrickTable, Grammar
from .sampler import Assignment

VK_X, VK_R, VK_G = 0, 1, 2
FK_NOISYOR, FK_CATEGORICAL = 0, 1


@dataclass(frozen=True)
class Factor:
    """View of a single factor: scope position 0 is the output (noisy-OR)
    or the switch (categorical); theta aligns with positions 1..N."""

    kind: int
    scope: tuple
    leak: float = 0.0
    beta: float = 0.0
    theta: tuple = ()


def eval_factor(factor: Factor, values: Sequence[int]) -> float:
    """Exact table value of a factor on a local assignment.

    `values` aligns with factor.scope.  This is the brute-force oracle
    that message updates are tested against.
    """
    if len(values) != len(factor.scope):
        raise ScopeMismatch(
            f"factor has scope size {len(factor.scope)}, got {len(values)}"
        )
    if factor.kind == FK_NOISYOR:
        z, ys = values[0], values[1:]
        p_off = (1.0 - factor.leak) * math.exp(-factor.beta * sum(ys))
        return p_off if z == 0 else 1.0 - p_off
    y, zs = values[0], values[1:]
    on = [i for i, v in enumerate(zs) if v]
    if y == 0:
        return 1.0 if not on else 0.0
    if len(on) != 1:
        return 0.0
    return factor.theta[on[0]]


@dataclass
class FactorGraph:
    """Immutable compiled factor graph with array-of-structs layout."""

    grammar: Grammar
    table: BrickTable
    n_vars: int
    var_kind: np.ndarray
    var_brick: np.ndarray
    var_rule: np.ndarray
    var_slot: np.ndarray
    var_child: np.ndarray
    x_var: np.ndarray          # brick id -> X variable id
    n_factors: int
    fac_kind: np.ndarray
    fac_brick: np.ndarray
    fac_rule: np.ndarray       # -1 except pose-selection factors
    fac_slot: np.ndarray       # -1 except pose-selection factors
    fac_leak: np.ndarray
    fac_beta: np.ndarray
    scope_start: np.ndarray    # n_factors + 1
    scope_var: np.ndarray      # edge -> variable id
    scope_theta: np.ndarray    # outcome probability per edge (0 elsewhere)
    var_estart: np.ndarray     # variable -> incident edge slice
    var_edges: np.ndarray
    _psi1_fid: dict = field(repr=False, default_factory=dict)   # symbol -> factor ids
    _psi2_theta_pos: dict = field(repr=False, default_factory=dict)  # symbol -> (n, k) edge pos

    @property
    def n_edges(self) -> int:
        return int(self.scope_var.shape[0])

    def stats(self) -> dict:
        kinds = self.var_kind
        return {
            "variables": self.n_vars,
            "x_variables": int((kinds == VK_X).sum()),
            "r_variables": int((kinds == VK_R).sum()),
            "g_variables": int((kinds == VK_G).sum()),
            "factors": self.n_factors,
            "noisyor_factors": int((self.fac_kind == FK_NOISYOR).sum()),
            "rule_factors": int(((self.fac_kind == FK_CATEGORICAL)
                                 & (self.fac_slot < 0)).sum()),
            "pose_factors": int(((self.fac_kind == FK_CATEGORICAL)
                                 & (self.fac_slot >= 0)).sum()),
            "edges": self.n_edges,
        }

    def factor(self, fid: int) -> Factor:
        lo, hi = int(self.scope_start[fid]), int(self.scope_start[fid + 1])
        scope = tuple(int(v) for v in self.scope_var[lo:hi])
        if self.fac_kind[fid] == FK_NOISYOR:
            return Factor(FK_NOISYOR, scope,
                          leak=float(self.fac_leak[fid]),
                          beta=float(self.fac_beta[fid]))
        return Factor(FK_CATEGORICAL, scope,
                      theta=tuple(float(t) for t in self.scope_theta[lo + 1:hi]))

    def factors(self):
        return (self.factor(f) for f in range(self.n_factors))

    def r_var(self, brick: int, rule_idx: int) -> int:
        return int(self.x_var[brick]) + 1 + rule_idx

    def g_var_index(self) -> dict:
        """(brick, rule, slot, child brick) -> G variable id; test helper."""
        idx = {}
        for v in np.flatnonzero(self.var_kind == VK_G):
            idx[(int(self.var_brick[v]), int(self.var_rule[v]),
                 int(self.var_slot[v]), int(self.var_child[v]))] = int(v)
        return idx

    def assignment_vector(self, assignment: Assignment) -> np.ndarray:
        """Dense 0/1 vector over variables for a sparse Assignment."""
        from .errors import DimensionMismatch

        vec = np.zeros(self.n_vars, dtype=np.int8)
        for b in assignment.x_on:
            vec[self.x_var[b]] = 1
        for b, r in assignment.r_on:
            v = self.r_var(b, r)
            if self.var_kind[v] != VK_R or self.var_brick[v] != b:
                raise DimensionMismatch(f"no rule variable for brick {b} rule {r}")
            vec[v] = 1
        gidx = self.g_var_index()
        for key in assignment.g_on:
            if key not in gidx:
                raise DimensionMismatch(f"no generation variable {key}")
            vec[gidx[key]] = 1
        return vec

    def log_score(self, vec: np.ndarray) -> float:
        """Sum of log factor values for a dense assignment (-inf on zeros)."""
        total = 0.0
        for f in range(self.n_factors):
            lo, hi = int(self.scope_start[f]), int(self.scope_start[f + 1])
            val = eval_factor(self.factor(f), [int(vec[v]) for v in self.scope_var[lo:hi]])
            if val <= 0.0:
                return -math.inf
            total += math.log(val)
        return total

    def reparameterize(self, grammar: Grammar) -> "FactorGraph":
        """Same structure with the new grammar's rule/self-rooting values.

        The grammar must share symbols, pose spaces, rule structure and
        rho with the compiled one; kernels are not re-read.
        """
        if grammar.symbols != self.grammar.symbols:
            raise ValueError("reparameterize requires an identical symbol set")
        fac_leak = self.fac_leak.copy()
        scope_theta = self.scope_theta.copy()
        for sym in grammar.symbols:
            fids = self._psi1_fid.get(sym)
            if fids is not None and len(fids):
                fac_leak[fids] = grammar.epsilon(sym)
            pos = self._psi2_theta_pos.get(sym)
            if pos is not None and pos.size:
                probs = np.array([r.probability for r in grammar.rules_for(sym)])
                scope_theta[pos] = probs[np.newaxis, :]
        return replace(self, grammar=grammar, fac_leak=fac_leak,
                       scope_theta=scope_theta,
                       _psi1_fid=self._psi1_fid,
                       _psi2_theta_pos=self._psi2_theta_pos)

    def dump(self, fh: IO[str]) -> None:
        """Plain-text graph dump for differential testing."""
        kind_name = {VK_X: "X", VK_R: "R", VK_G: "G"}
        for v in range(self.n_vars):
            sym, pose = self.table.from_id(int(self.var_brick[v]))
            kind = kind_name[int(self.var_kind[v])]
            extra = ""
            if self.var_kind[v] == VK_R:
                extra = f" rule={int(self.var_rule[v])}"
            elif self.var_kind[v] == VK_G:
                csym, cpose = self.table.from_id(int(self.var_child[v]))
                extra = (f" rule={int(self.var_rule[v])} slot={int(self.var_slot[v])}"
                         f" child={csym}{tuple(cpose)}")
            fh.write(f"var {v} {kind} {sym}{tuple(pose)}{extra}\n")
        for f in range(self.n_factors):
            lo, hi = int(self.scope_start[f]), int(self.scope_start[f + 1])
            scope = " ".join(str(int(v)) for v in self.scope_var[lo:hi])
            if self.fac_kind[f] == FK_NOISYOR:
                fh.write(f"factor {f} noisyor leak={self.fac_leak[f]:.12g} "
                         f"beta={self.fac_beta[f]:.12g} scope {scope}\n")
            else:
                theta = " ".join(f"{t:.12g}" for t in self.scope_theta[lo + 1:hi])
                fh.write(f"factor {f} categorical theta {theta} scope {scope}\n")


def compile_grammar(grammar: Grammar, table: BrickTable = None,
                    max_variables: int = 50_000_000) -> FactorGraph:
    """Build the factor graph for a grammar (cyclic grammars allowed)."""
    table = table or BrickTable(grammar)
    n_bricks = table.size
    beta = -math.log1p(-grammar.rho) if grammar.rho < 1.0 else float("inf")

    # pass A: kernel supports per (brick, rule, slot), variable layout
    rules_of = {a: grammar.rules_for(a) for a in grammar.symbols}
    supports = []  # (brick, rule_idx, slot, [(child_id, prob), ...]) in factor order
    n_vars = 0
    x_var = np.empty(n_bricks, dtype=np.int64)
    brick_var_base = np.empty(n_bricks, dtype=np.int64)
    for b in range(n_bricks):
        sym, pose = table.from_id(b)
        brick_var_base[b] = n_vars
        x_var[b] = n_vars
        n_vars += 1 + len(rules_of[sym])
        parent_space = grammar.pose_spaces[sym]
        for r_idx, rule in enumerate(rules_of[sym]):
            for slot, (child_sym, kernel) in enumerate(zip(rule.rhs, rule.kernels)):
                entries = kernel.support(pose, parent_space,
                                         grammar.pose_spaces[child_sym])
                if not entries:
                    continue
                child_space_ids = [
                    (table.to_id(child_sym, z), p) for z, p in entries
                ]
                supports.append((b, r_idx, slot, child_space_ids))
                n_vars += len(child_space_ids)
        if n_vars > max_variables:
            raise CapacityExceeded(
                f"factor graph would exceed {max_variables} variables"
            )

    var_kind = np.empty(n_vars, dtype=np.int8)
    var_brick = np.empty(n_vars, dtype=np.int64)
    var_rule = np.full(n_vars, -1, dtype=np.int32)
    var_slot = np.full(n_vars, -1, dtype=np.int32)
    var_child = np.full(n_vars, -1, dtype=np.int64)

    # pass B: assign variable ids; collect G inputs per child brick
    generators_of = [[] for _ in range(n_bricks)]
    g_var_of_support = []  # aligned with supports: first G var id of the run
    v = 0
    sup_iter = iter(supports)
    cur = next(sup_iter, None)
    for b in range(n_bricks):
        sym, _ = table.from_id(b)
        var_kind[v] = VK_X
        var_brick[v] = b
        v += 1
        for r_idx in range(len(rules_of[sym])):
            var_kind[v] = VK_R
            var_brick[v] = b
            var_rule[v] = r_idx
            v += 1
        while cur is not None and cur[0] == b:
            _, r_idx, slot, entries = cur
            g_var_of_support.append(v)
            for child_id, _p in entries:
                var_kind[v] = VK_G
                var_brick[v] = b
                var_rule[v] = r_idx
                var_slot[v] = slot
                var_child[v] = child_id
                generators_of[child_id].append(v)
                v += 1
            cur = next(sup_iter, None)
    assert v == n_vars

    # pass C: factors in per-brick order: presence, rule selection, pose selection
    n_factors = 0
    scope_len = []
    fac_meta = []  # (kind, brick, rule, slot, support_index)
    sup_pos = 0
    for b in range(n_bricks):
        sym, _ = table.from_id(b)
        fac_meta.append((FK_NOISYOR, b, -1, -1, -1))
        scope_len.append(1 + len(generators_of[b]))
        k = len(rules_of[sym])
        if k:
            fac_meta.append((FK_CATEGORICAL, b, -1, -1, -1))
            scope_len.append(1 + k)
        while sup_pos < len(supports) and supports[sup_pos][0] == b:
            _, r_idx, slot, entries = supports[sup_pos]
            fac_meta.append((FK_CATEGORICAL, b, r_idx, slot, sup_pos))
            scope_len.append(1 + len(entries))
            sup_pos += 1
    n_factors = len(fac_meta)

    scope_start = np.zeros(n_factors + 1, dtype=np.int64)
    np.cumsum(scope_len, out=scope_start[1:])
    n_edges = int(scope_start[-1])
    scope_var = np.empty(n_edges, dtype=np.int64)
    scope_theta = np.zeros(n_edges, dtype=np.float64)
    fac_kind = np.empty(n_factors, dtype=np.int8)
    fac_brick = np.empty(n_factors, dtype=np.int64)
    fac_rule = np.full(n_factors, -1, dtype=np.int32)
    fac_slot = np.full(n_factors, -1, dtype=np.int32)
    fac_leak = np.zeros(n_factors, dtype=np.float64)
    fac_beta = np.zeros(n_factors, dtype=np.float64)

    psi1_fid = {a: [] for a in grammar.symbols}
    psi2_theta_pos = {a: [] for a in grammar.symbols}
    for f, (kind, b, r_idx, slot, sup_idx) in enumerate(fac_meta):
        sym, _ = table.from_id(b)
        lo = int(scope_start[f])
        fac_kind[f] = kind
        fac_brick[f] = b
        fac_rule[f] = r_idx
        fac_slot[f] = slot
        if kind == FK_NOISYOR:
            fac_leak[f] = grammar.epsilon(sym)
            fac_beta[f] = beta
            scope_var[lo] = x_var[b]
            gens = sorted(generators_of[b])
            scope_var[lo + 1:lo + 1 + len(gens)] = gens
            psi1_fid[sym].append(f)
        elif slot < 0:  # rule selection
            scope_var[lo] = x_var[b]
            k = len(rules_of[sym])
            scope_var[lo + 1:lo + 1 + k] = x_var[b] + 1 + np.arange(k)
            probs = [r.probability for r in rules_of[sym]]
            scope_theta[lo + 1:lo + 1 + k] = probs
            psi2_theta_pos[sym].append(np.arange(lo + 1, lo + 1 + k))
        else:  # pose selection
            _, _, _, entries = supports[sup_idx]
            scope_var[lo] = x_var[b] + 1 + r_idx
            g0 = g_var_of_support[sup_idx]
            scope_var[lo + 1:lo + 1 + len(entries)] = g0 + np.arange(len(entries))
            scope_theta[lo + 1:lo + 1 + len(entries)] = [p for _, p in entries]

    # variable incidence lists (CSR over edge ids)
    var_deg = np.zeros(n_vars, dtype=np.int64)
    np.add.at(var_deg, scope_var, 1)
    var_estart = np.zeros(n_vars + 1, dtype=np.int64)
    np.cumsum(var_deg, out=var_estart[1:])
    # stable argsort groups edge ids by variable, ascending within each group
    var_edges = np.argsort(scope_var, kind="stable").astype(np.int64)

    return FactorGraph(
        grammar=grammar, table=table,
        n_vars=n_vars, var_kind=var_kind, var_brick=var_brick,
        var_rule=var_rule, var_slot=var_slot, var_child=var_child,
        x_var=x_var,
        n_factors=n_factors, fac_kind=fac_kind, fac_brick=fac_brick,
        fac_rule=fac_rule, fac_slot=fac_slot,
        fac_leak=fac_leak, fac_beta=fac_beta,
        scope_start=scope_start, scope_var=scope_var, scope_theta=scope_theta,
        var_estart=var_estart, var_edges=var_edges,
        _psi1_fid={a: np.array(v, dtype=np.int64) for a, v in psi1_fid.items()},
        _psi2_theta_pos={
            a: (np.array(v, dtype=np.int64) if v else np.empty((0, 0), dtype=np.int64))
            for a, v in psi2_theta_pos.items()
        },
    )
