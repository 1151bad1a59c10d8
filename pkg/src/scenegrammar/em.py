"""EM updates for rule probabilities and self-rooting parameters.

Each iteration runs LBP per training example with the current
parameters, sums the rule-variable beliefs into expected rule counts,
and renormalizes per symbol.  Self-rooting updates analogously from a
per-brick "rooted via the leak" statistic: by default the posterior
probability that the brick's presence came from the leak term of its
noisy-OR factor, or (crude_self_rooting) plain P(X=1).  The noisy-or
survival parameter rho stays fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .bp import BpConfig, Marginals, brick_evidence, run_lbp
from .errors import DimensionMismatch
from .factorgraph import FactorGraph, compile_grammar
from .grammar import Grammar

PARAM_FLOOR = 1e-6


@dataclass
class TrainingExample:
    """Evidence for one training image/scene.

    x_evidence is (n_bricks, 2) message pairs for the X variables (uniform
    rows for latent bricks); clamps lists (brick_id, value) pairs applied
    as delta-like evidence.
    """

    x_evidence: Optional[np.ndarray] = None
    clamps: Sequence = ()

    def check(self, n_bricks: int) -> None:
        if self.x_evidence is not None and self.x_evidence.shape != (n_bricks, 2):
            raise DimensionMismatch(
                f"example evidence {self.x_evidence.shape} != ({n_bricks}, 2)"
            )


@dataclass
class EmState:
    """Parameter trajectory and diagnostics across EM iterations."""

    history: list = field(default_factory=list)  # per-iter {symbol: probs, ("eps", symbol): eps}
    degenerate: list = field(default_factory=list)  # per-iter set of flagged symbols
    iterations: int = 0

    def record(self, grammar: Grammar, flagged) -> None:
        snap = {}
        for a in grammar.symbols:
            probs = [r.probability for r in grammar.rules_for(a)]
            if probs:
                snap[a] = probs
            snap[("eps", a)] = grammar.epsilon(a)
        self.history.append(snap)
        self.degenerate.append(frozenset(flagged))
        self.iterations += 1


def clamp_evidence_from_mask(grammar: Grammar, table, symbol: str,
                             mask: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """(n_bricks, 2) evidence clamping one symbol's X values to a binary map."""
    space = grammar.pose_spaces[symbol]
    if mask.shape != (space.height, space.width):
        raise DimensionMismatch(
            f"mask {mask.shape} != ({space.height}, {space.width})"
        )
    ev = np.full((table.size, 2), 0.5)
    rng_ = table.symbol_range(symbol)
    on = mask.reshape(-1).astype(bool)
    if space.n_extra != 1:
        raise DimensionMismatch(f"{symbol} has extra pose components; no pixel map")
    ev[rng_.start:rng_.stop, 0] = np.where(on, floor, 1.0 - floor)
    ev[rng_.start:rng_.stop, 1] = np.where(on, 1.0 - floor, floor)
    return ev


def _example_marginals(fg: FactorGraph, example: TrainingExample,
                       cfg: BpConfig) -> Marginals:
    example.check(fg.table.size)
    ev = None
    if example.x_evidence is not None:
        ev = brick_evidence(fg, example.x_evidence)
    clamps = [(int(fg.x_var[b]), v) for b, v in example.clamps]
    return run_lbp(fg, evidence=ev, clamps=clamps, cfg=cfg)


def em_step(grammar: Grammar, examples: Iterable[TrainingExample],
            cfg: BpConfig = None, fg: FactorGraph = None,
            crude_self_rooting: bool = False,
            marginals_fn=None):
    """One EM iteration; returns (new_grammar, flagged_symbols).

    marginals_fn(fg, example, cfg) -> Marginals may replace the LBP
    E-step (tests use exact enumeration marginals).  Symbols whose
    expected rule counts sum to zero are left unchanged and flagged.
    """
    cfg = cfg or BpConfig()
    examples = list(examples)
    if not examples:
        raise ValueError("em_step needs at least one training example")
    fg = fg or compile_grammar(grammar)
    if fg.grammar is not grammar:
        fg = fg.reparameterize(grammar)
    marginals_fn = marginals_fn or _example_marginals

    rule_mass = {a: np.zeros(len(grammar.rules_for(a))) for a in grammar.symbols}
    root_mass = np.zeros(fg.table.size)
    for ex in examples:
        marg = marginals_fn(fg, ex, cfg)
        for a in grammar.symbols:
            if len(rule_mass[a]):
                rule_mass[a] += marg.rule_posteriors(a).sum(axis=0)
        if crude_self_rooting:
            root_mass += marg.x_beliefs()
        else:
            root_mass += marg.leak_on

    flagged = []
    new_probs = {}
    for a in grammar.symbols:
        mass = rule_mass[a]
        if not len(mass):
            continue
        z = mass.sum()
        if z <= 0.0:
            flagged.append(a)
            continue
        probs = np.maximum(mass / z, PARAM_FLOOR)
        new_probs[a] = (probs / probs.sum()).tolist()

    n_examples = len(examples)
    new_eps = {}
    for a in grammar.symbols:
        rng_ = fg.table.symbol_range(a)
        denom = n_examples * len(rng_)
        eps = float(root_mass[rng_.start:rng_.stop].sum()) / denom
        new_eps[a] = float(np.clip(eps, PARAM_FLOOR, 1.0 - PARAM_FLOOR))

    return grammar.with_parameters(new_probs, new_eps), flagged


def fit(grammar: Grammar, examples: Iterable[TrainingExample], iters: int,
        cfg: BpConfig = None, crude_self_rooting: bool = False,
        tol: float = 1e-6, marginals_fn=None):
    """Iterate em_step; returns (grammar, EmState).

    Stops early when no parameter moves more than tol between
    iterations.  The trajectory records the parameters after each step.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    examples = list(examples)
    state = EmState()
    fg = compile_grammar(grammar)
    for _ in range(iters):
        old = grammar
        fg = fg.reparameterize(grammar)
        grammar, flagged = em_step(grammar, examples, cfg, fg=fg,
                                   crude_self_rooting=crude_self_rooting,
                                   marginals_fn=marginals_fn)
        state.record(grammar, flagged)
        if _max_param_change(old, grammar) < tol:
            break
    return grammar, state


def _max_param_change(a: Grammar, b: Grammar) -> float:
    delta = 0.0
    for sym in a.symbols:
        for ra, rb in zip(a.rules_for(sym), b.rules_for(sym)):
            delta = max(delta, abs(ra.probability - rb.probability))
        delta = max(delta, abs(a.epsilon(sym) - b.epsilon(sym)))
    return delta


def trajectory_rows(state: EmState) -> list:
    """Flatten an EmState into (iteration, parameter, value) CSV rows."""
    rows = []
    for it, snap in enumerate(state.history):
        for key, val in snap.items():
            if isinstance(key, tuple):
                rows.append((it, f"self_rooting[{key[1]}]", val))
            else:
                for r_idx, p in enumerate(val):
                    rows.append((it, f"P[{key} rule {r_idx}]", p))
    return rows
