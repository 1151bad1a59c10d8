"""Ancestral scene sampling and exact joint-probability evaluation.

Sampling follows the four-step generative process of an acyclic grammar:
self-root every brick independently, then sweep bricks in topological
order, expanding each present brick once by drawing a rule, a child pose
per slot, and a survival coin per child.  joint_log_prob scores a full
X/R/G assignment against the factored distribution and doubles as the
test oracle for the compiled factor graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import rng
from .errors import CyclicGrammar, DimensionMismatch
from .grammar import BrickTable, CycleReport, ExpansionGraph, Grammar, topological_order


@dataclass(frozen=True)
class Expansion:
    """How one present brick was expanded.

    rule_index is the per-symbol rule position, or -1 for symbols with no
    rules.  child_poses holds None for slots whose in-bounds support is
    empty (nothing can be produced there).  child_survived records the
    rho-coin per slot; a dead child contributes no presence.
    """

    rule_index: int = -1
    child_poses: tuple = ()
    child_survived: tuple = ()


@dataclass
class Scene:
    """Present bricks plus one expansion record per present brick."""

    present: set
    expansions: dict

    def check(self, grammar: Grammar, table: BrickTable) -> None:
        if set(self.expansions) != self.present:
            raise AssertionError("expansions must cover exactly the present bricks")
        for b, exp in self.expansions.items():
            symbol, pose = table.from_id(b)
            rules = grammar.rules_for(symbol)
            if not rules:
                if exp.rule_index != -1 or exp.child_poses:
                    raise AssertionError(f"brick {b}: expansion for rule-less symbol")
                continue
            rule = rules[exp.rule_index]
            if len(exp.child_poses) != len(rule.rhs):
                raise AssertionError(f"brick {b}: slot count mismatch")
            for child_sym, z, alive in zip(rule.rhs, exp.child_poses,
                                           exp.child_survived):
                if z is None:
                    if alive:
                        raise AssertionError(f"brick {b}: survival without a pose")
                    continue
                if alive and table.to_id(child_sym, z) not in self.present:
                    raise AssertionError(f"brick {b}: surviving child absent")


@dataclass(frozen=True)
class Assignment:
    """Sparse 0/1 assignment to the X/R/G variables of a grammar.

    Variables absent from the sets are 0.  r_on holds (brick, rule_index)
    pairs; g_on holds (brick, rule_index, slot, child_brick) tuples.
    """

    x_on: frozenset
    r_on: frozenset
    g_on: frozenset


@dataclass(frozen=True)
class LogProb:
    """Log-probability with an explicit zero-probability marker."""

    impossible: bool
    log_value: float = 0.0

    @property
    def value(self) -> float:
        if self.impossible:
            raise ValueError("log-probability of an impossible assignment")
        return self.log_value

    def prob(self) -> float:
        return 0.0 if self.impossible else math.exp(self.log_value)


class SceneSampler:
    """Reusable sampler: precomputes the brick table, topological order,
    and per-(rule, slot, pose) kernel supports."""

    def __init__(self, grammar: Grammar, table: BrickTable = None):
        self.grammar = grammar
        self.table = table or BrickTable(grammar)
        order = topological_order(ExpansionGraph(grammar, self.table))
        if isinstance(order, CycleReport):
            raise CyclicGrammar(
                f"grammar is cyclic: {order.describe(self.table)}"
            )
        self.order = order
        self._support_cache = {}
        # per-symbol cumulative rule probabilities for inverse-cdf draws
        self._rule_cdf = {
            a: np.cumsum([r.probability for r in grammar.rules_for(a)])
            for a in grammar.symbols if grammar.rules_for(a)
        }
        self._eps = np.array(
            [grammar.epsilon(self.table.symbol_of(b)) for b in range(self.table.size)]
        )

    def _support(self, symbol: str, rule_idx: int, slot: int, pose):
        key = (symbol, rule_idx, slot, pose)
        hit = self._support_cache.get(key)
        if hit is not None:
            return hit
        rule = self.grammar.rules_for(symbol)[rule_idx]
        child_sym = rule.rhs[slot]
        entries = rule.kernels[slot].support(
            pose, self.grammar.pose_spaces[symbol], self.grammar.pose_spaces[child_sym])
        if entries:
            poses = [z for z, _ in entries]
            cdf = np.cumsum([p for _, p in entries])
            val = (child_sym, poses, cdf)
        else:
            val = (child_sym, (), None)
        self._support_cache[key] = val
        return val

    def sample(self, seed: int) -> Scene:
        g, table = self.grammar, self.table
        # step 2: one vectorized uniform per brick from the bulk stream;
        # entry b is brick b's self-rooting draw regardless of sweep order
        u_root = rng.stream(seed, 0).random(table.size)
        present = set(np.flatnonzero(u_root < self._eps).tolist())
        expansions = {}
        for b in self.order:
            if b not in present:
                continue
            symbol, pose = table.from_id(b)
            cdf = self._rule_cdf.get(symbol)
            if cdf is None:
                expansions[b] = Expansion()
                continue
            gen = rng.brick_stream(seed, b)
            r_idx = int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"))
            r_idx = min(r_idx, len(cdf) - 1)
            rule = g.rules_for(symbol)[r_idx]
            child_poses, child_alive = [], []
            for slot in range(len(rule.rhs)):
                child_sym, poses, pcdf = self._support(symbol, r_idx, slot, pose)
                if not poses:
                    child_poses.append(None)
                    child_alive.append(False)
                    continue
                z = poses[int(min(np.searchsorted(pcdf, gen.random() * pcdf[-1],
                                                  side="right"),
                                  len(poses) - 1))]
                alive = gen.random() < g.rho
                child_poses.append(z)
                child_alive.append(bool(alive))
                if alive:
                    present.add(table.to_id(child_sym, z))
            expansions[b] = Expansion(r_idx, tuple(child_poses), tuple(child_alive))
        return Scene(present=present, expansions=expansions)


def sample_scene(grammar: Grammar, seed: int) -> Scene:
    """One-shot convenience wrapper; use SceneSampler for repeated draws."""
    return SceneSampler(grammar).sample(seed)


def scene_to_assignment(scene: Scene, grammar: Grammar,
                        table: BrickTable = None) -> Assignment:
    """X/R/G encoding of a scene (Assignment invariants hold by construction).

    G marks the chosen pose for every expanded slot whether or not the
    child survived; survival only affects the child's own X.
    """
    table = table or BrickTable(grammar)
    x_on = frozenset(scene.present)
    r_on, g_on = set(), set()
    for b in scene.present:
        exp = scene.expansions[b]
        if exp.rule_index < 0:
            continue
        symbol, _ = table.from_id(b)
        rule = grammar.rules_for(symbol)[exp.rule_index]
        r_on.add((b, exp.rule_index))
        for slot, z in enumerate(exp.child_poses):
            if z is None:
                continue
            g_on.add((b, exp.rule_index, slot, table.to_id(rule.rhs[slot], z)))
    return Assignment(x_on, frozenset(r_on), frozenset(g_on))


def joint_log_prob(assignment: Assignment, grammar: Grammar,
                   table: BrickTable = None,
                   supports: dict = None) -> LogProb:
    """Exact log P(X, R, G) under the factored generative distribution.

    Sums the log values of the per-brick presence factor (noisy-OR over
    incoming generation variables plus the self-rooting leak), the rule
    selection factor, and the pose selection factors.  Returns the
    impossible marker when any factor is zero.
    """
    table = table or BrickTable(grammar)
    if supports is None:
        supports = {}

    def support_of(symbol, pose, rule_idx, slot):
        key = (symbol, rule_idx, slot, pose)
        hit = supports.get(key)
        if hit is None:
            rule = grammar.rules_for(symbol)[rule_idx]
            hit = dict(
                (table.to_id(rule.rhs[slot], z), p)
                for z, p in rule.kernels[slot].support(
                    pose, grammar.pose_spaces[symbol],
                    grammar.pose_spaces[rule.rhs[slot]])
            )
            supports[key] = hit
        return hit

    n = table.size
    for b in assignment.x_on:
        if not (0 <= b < n):
            raise DimensionMismatch(f"brick id {b} outside table of size {n}")

    # active generator counts per child brick
    gen_count = {}
    for (b, r_idx, slot, child) in assignment.g_on:
        if not (0 <= child < n) or not (0 <= b < n):
            raise DimensionMismatch("generation variable references a bad brick id")
        gen_count[child] = gen_count.get(child, 0) + 1

    r_by_brick = {}
    for (b, r_idx) in assignment.r_on:
        r_by_brick.setdefault(b, set()).add(r_idx)
    g_by_brick_rule_slot = {}
    for (b, r_idx, slot, child) in assignment.g_on:
        g_by_brick_rule_slot.setdefault((b, r_idx, slot), set()).add(child)

    log_one_minus_rho = math.log1p(-grammar.rho) if grammar.rho < 1.0 else -math.inf
    total = 0.0
    for b in range(n):
        symbol, pose = table.from_id(b)
        eps = grammar.epsilon(symbol)
        x = b in assignment.x_on
        c = gen_count.get(b, 0)
        # presence factor: off-probability (1-rho)^c (1-eps)
        if eps >= 1.0 or (c > 0 and grammar.rho >= 1.0):
            log_p_off = -math.inf
        elif c == 0:
            log_p_off = math.log1p(-eps)
        else:
            log_p_off = c * log_one_minus_rho + math.log1p(-eps)
        if not x:
            if log_p_off == -math.inf:
                return LogProb(impossible=True)
            total += log_p_off
        else:
            p_on = -math.expm1(log_p_off) if log_p_off != -math.inf else 1.0
            if p_on <= 0.0:
                return LogProb(impossible=True)
            total += math.log(p_on)

        rules = grammar.rules_for(symbol)
        chosen = r_by_brick.get(b, set())
        if rules:
            for r_idx in chosen:
                if not (0 <= r_idx < len(rules)):
                    raise DimensionMismatch(f"brick {b}: rule index {r_idx} out of range")
            if not x:
                if chosen:
                    return LogProb(impossible=True)
            else:
                if len(chosen) != 1:
                    return LogProb(impossible=True)
                r_idx = next(iter(chosen))
                if rules[r_idx].probability <= 0.0:
                    return LogProb(impossible=True)
                total += math.log(rules[r_idx].probability)
        elif chosen:
            raise DimensionMismatch(f"brick {b}: rule variable for rule-less symbol")

        # pose selection factors, one per (rule, slot) with nonempty support
        for r_idx, rule in enumerate(rules):
            r_active = x and (r_idx in chosen)
            for slot in range(len(rule.rhs)):
                sup = support_of(symbol, pose, r_idx, slot)
                picked = g_by_brick_rule_slot.get((b, r_idx, slot), set())
                for child in picked:
                    if child not in sup:
                        raise DimensionMismatch(
                            f"brick {b} rule {r_idx} slot {slot}: child {child} "
                            "is not in the kernel support"
                        )
                if not sup:
                    continue
                if not r_active:
                    if picked:
                        return LogProb(impossible=True)
                else:
                    if len(picked) != 1:
                        return LogProb(impossible=True)
                    total += math.log(sup[next(iter(picked))])
    return LogProb(impossible=False, log_value=total)


def enumerate_valid_assignments(grammar: Grammar,
                                table: BrickTable = None) -> Iterable[Assignment]:
    """All assignments with nonzero probability, for brute-force oracles.

    Valid assignments factor per brick: either off (all local variables 0)
    or on with one rule and one in-support pose per nonempty slot.  Scales
    exponentially; intended for grammars with a handful of bricks.
    """
    table = table or BrickTable(grammar)
    local_states = []
    for b in range(table.size):
        symbol, pose = table.from_id(b)
        rules = grammar.rules_for(symbol)
        states = [None]  # off
        if not rules:
            states.append((-1, ()))
        for r_idx, rule in enumerate(rules):
            slot_support = []
            for slot in range(len(rule.rhs)):
                sup = rule.kernels[slot].support(
                    pose, grammar.pose_spaces[symbol],
                    grammar.pose_spaces[rule.rhs[slot]])
                slot_support.append([table.to_id(rule.rhs[slot], z) for z, _ in sup])
            combos = [()]
            for slot, children in enumerate(slot_support):
                if not children:
                    combos = [c + ((slot, None),) for c in combos]
                else:
                    combos = [c + ((slot, ch),) for c in combos for ch in children]
            for combo in combos:
                states.append((r_idx, combo))
        local_states.append(states)

    def rec(b, x_on, r_on, g_on):
        if b == table.size:
            yield Assignment(frozenset(x_on), frozenset(r_on), frozenset(g_on))
            return
        for state in local_states[b]:
            if state is None:
                yield from rec(b + 1, x_on, r_on, g_on)
            else:
                r_idx, combo = state
                added_r = [(b, r_idx)] if r_idx >= 0 else []
                added_g = [(b, r_idx, slot, ch) for slot, ch in combo if ch is not None]
                yield from rec(b + 1, x_on + [b], r_on + added_r, g_on + added_g)

    yield from rec(0, [], [], [])


def scene_to_text(scene: Scene, grammar: Grammar, table: BrickTable = None) -> str:
    """Line-oriented scene serialization: one record per present brick."""
    table = table or BrickTable(grammar)
    lines = []
    for b in sorted(scene.present):
        symbol, pose = table.from_id(b)
        exp = scene.expansions[b]
        pose_s = ",".join(str(v) for v in pose)
        if exp.rule_index < 0:
            lines.append(f"{symbol} {pose_s} .")
            continue
        slots = []
        for z, alive in zip(exp.child_poses, exp.child_survived):
            if z is None:
                slots.append("-")
            else:
                slots.append(",".join(str(v) for v in z) + ("" if alive else "!"))
        lines.append(f"{symbol} {pose_s} {exp.rule_index} " + " ".join(slots))
    return "\n".join(lines) + ("\n" if lines else "")


def scene_from_text(text: str, grammar: Grammar, table: BrickTable = None) -> Scene:
    table = table or BrickTable(grammar)
    present, expansions = set(), {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        symbol, pose_s = parts[0], parts[1]
        pose = tuple(int(v) for v in pose_s.split(","))
        b = table.to_id(symbol, pose)
        present.add(b)
        if parts[2] == ".":
            expansions[b] = Expansion()
            continue
        r_idx = int(parts[2])
        child_poses, child_alive = [], []
        for tok in parts[3:]:
            if tok == "-":
                child_poses.append(None)
                child_alive.append(False)
                continue
            alive = not tok.endswith("!")
            tok = tok.rstrip("!")
            child_poses.append(tuple(int(v) for v in tok.split(",")))
            child_alive.append(alive)
        expansions[b] = Expansion(r_idx, tuple(child_poses), tuple(child_alive))
    return Scene(present=present, expansions=expansions)


def symbol_mask(scene: Scene, grammar: Grammar, symbol: str,
                table: BrickTable = None) -> np.ndarray:
    """Binary (height, width) map of present bricks of one symbol,
    projected over any orientation/scale component."""
    table = table or BrickTable(grammar)
    space = grammar.pose_spaces[symbol]
    mask = np.zeros((space.height, space.width), dtype=np.uint8)
    lo = table.symbol_range(symbol).start
    for b in scene.present:
        if b in table.symbol_range(symbol):
            pose = space.pose_at(b - lo)
            mask[pose[1], pose[0]] = 1
    return mask
