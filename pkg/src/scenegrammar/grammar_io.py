"""Grammar file format: parse and write .grammar files.

The format is YAML with four sections (see grammars/FORMAT.md for the
full schema and shipped examples):

    symbols:      [C, J]
    pose_spaces:  C: {width: 64, height: 64, orientations: 8}
    params:       rho, self_rooting per symbol (default 0 when omitted)
    rules:        list of {lhs, probability, rhs: [{symbol, kernel}]}

Kernel specs are {kind: explicit|offsets|region, ...} as accepted by the
corresponding GeometryKernel classes.
"""

from __future__ import annotations

import os
from typing import Mapping

import yaml

from .errors import GrammarError
from .grammar import (
    ExplicitKernel,
    Grammar,
    OffsetKernel,
    PoseSpace,
    RegionKernel,
    Rule,
    check_grammar,
)

_KERNEL_KINDS = ("explicit", "offsets", "region")


def kernel_from_config(cfg: Mapping):
    if not isinstance(cfg, Mapping) or "kind" not in cfg:
        raise GrammarError(f"kernel spec must be a mapping with a kind: {cfg!r}")
    kind = cfg["kind"]
    if kind == "explicit":
        table = {}
        for row in cfg.get("table", ()):
            parent = tuple(row["parent"])
            table[parent] = [(tuple(z), float(p)) for z, p in row["children"]]
        return ExplicitKernel(table)
    if kind == "offsets":
        return OffsetKernel(cfg["offsets"], rotate=cfg.get("rotate", False))
    if kind == "region":
        return RegionKernel(cfg["center_offset"], cfg["half_size"],
                            scale_map=cfg.get("scale_map"))
    raise GrammarError(f"unknown kernel kind {kind!r}; expected one of {_KERNEL_KINDS}")


def _pose_space_from_config(symbol: str, cfg: Mapping) -> PoseSpace:
    if not isinstance(cfg, Mapping):
        raise GrammarError(f"pose space for {symbol} must be a mapping")
    try:
        return PoseSpace(
            width=int(cfg["width"]),
            height=int(cfg["height"]),
            orientations=int(cfg.get("orientations", 1)),
            scales=tuple(cfg.get("scales", ())),
        )
    except KeyError as e:
        raise GrammarError(f"pose space for {symbol} missing {e}") from None


def grammar_from_description(desc: Mapping) -> Grammar:
    """Assemble a Grammar from a parsed description; no validation."""
    if not isinstance(desc, Mapping):
        raise GrammarError("grammar description must be a mapping")
    for section in ("symbols", "pose_spaces", "rules"):
        if section not in desc:
            raise GrammarError(f"grammar description missing section {section!r}")
    symbols = tuple(str(s) for s in desc["symbols"])
    pose_spaces = {
        str(a): _pose_space_from_config(a, cfg)
        for a, cfg in desc["pose_spaces"].items()
    }
    rules = []
    for raw in desc["rules"] or ():
        rhs, kernels = [], []
        for slot in raw.get("rhs", ()) or ():
            rhs.append(str(slot["symbol"]))
            kernels.append(kernel_from_config(slot["kernel"]))
        rules.append(Rule(
            lhs=str(raw["lhs"]),
            probability=float(raw["probability"]),
            rhs=tuple(rhs),
            kernels=tuple(kernels),
        ))
    params = desc.get("params", {}) or {}
    self_rooting = {str(a): float(v)
                    for a, v in (params.get("self_rooting", {}) or {}).items()}
    rho = float(params.get("rho", 1.0))
    return Grammar(symbols, pose_spaces, tuple(rules), self_rooting, rho)


def grammar_to_description(g: Grammar) -> dict:
    """Inverse of grammar_from_description, suitable for YAML dumping."""
    pose_spaces = {}
    for a in g.symbols:
        space = g.pose_spaces[a]
        cfg = {"width": space.width, "height": space.height}
        if space.orientations > 1:
            cfg["orientations"] = space.orientations
        if space.scales:
            cfg["scales"] = list(space.scales)
        pose_spaces[a] = cfg
    rules = []
    for r in g.rules:
        rules.append({
            "lhs": r.lhs,
            "probability": float(r.probability),
            "rhs": [{"symbol": b, "kernel": k.to_config()}
                    for b, k in zip(r.rhs, r.kernels)],
        })
    return {
        "symbols": list(g.symbols),
        "pose_spaces": pose_spaces,
        "params": {
            "rho": float(g.rho),
            "self_rooting": {a: float(g.epsilon(a)) for a in g.symbols},
        },
        "rules": rules,
    }


def load_grammar(path: str | os.PathLike) -> Grammar:
    """Parse and validate a .grammar file."""
    with open(path, "r", encoding="utf-8") as fh:
        desc = yaml.safe_load(fh)
    return check_grammar(grammar_from_description(desc))


def save_grammar(g: Grammar, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(grammar_to_description(g), fh, sort_keys=False)
