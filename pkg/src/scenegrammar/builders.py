"""Programmatic constructors for the grammars used in the experiments.

The shipped .grammar files are generated from these builders (see
scripts/regen_grammars.py), so file parsing and the builders stay in sync.
"""

from __future__ import annotations

from .grammar import (
    Grammar,
    OffsetKernel,
    PoseSpace,
    RegionKernel,
    Rule,
    check_grammar,
)

CURVE_RULE_PROBS = (0.05, 0.73, 0.11, 0.11)


def curve_grammar(width: int, height: int, *, rho: float = 0.99,
                  eps_curve: float = 3e-4, eps_pixel: float = 1e-6,
                  rule_probs=CURVE_RULE_PROBS) -> Grammar:
    """First-order Markov curve grammar on a pixel grid.

    Symbol C is an oriented curve element over width x height x 8; symbol
    J marks curve pixels.  A curve either terminates or continues into one
    of the three forward neighbors of its orientation.
    """
    p_end, p_straight, p_left, p_right = rule_probs
    spaces = {
        "C": PoseSpace(width, height, orientations=8),
        "J": PoseSpace(width, height),
    }
    mark = OffsetKernel([(0, 0)])
    rules = (
        Rule("C", p_end, ("J",), (mark,)),
        Rule("C", p_straight, ("J", "C"),
             (mark, OffsetKernel([(1, 0)], rotate=True))),
        Rule("C", p_left, ("J", "C"),
             (mark, OffsetKernel([(1, 1)], rotate=True))),
        Rule("C", p_right, ("J", "C"),
             (mark, OffsetKernel([(1, -1)], rotate=True))),
    )
    return check_grammar(Grammar(
        symbols=("C", "J"),
        pose_spaces=spaces,
        rules=rules,
        self_rooting={"C": eps_curve, "J": eps_pixel},
        rho=rho,
    ))


def simple_face_grammar(width: int, height: int, *, rho: float = 0.99,
                        eps_face: float = 2e-3, eps_part: float = 1e-3,
                        eye_dx: int = 5, eye_dy: int = -4, mouth_dy: int = 5,
                        half_size=(1, 1)) -> Grammar:
    """Face grammar without scales: one rule F -> {E, E, N, M}.

    Both eye slots share the symbol E; the first slot sits left of the
    face center, the second right.  Poses are plain pixel grids.
    """
    spaces = {a: PoseSpace(width, height) for a in ("F", "E", "N", "M")}
    rule = Rule("F", 1.0, ("E", "E", "N", "M"), (
        RegionKernel((-eye_dx, eye_dy), half_size),
        RegionKernel((+eye_dx, eye_dy), half_size),
        RegionKernel((0, 0), half_size),
        RegionKernel((0, mouth_dy), half_size),
    ))
    return check_grammar(Grammar(
        symbols=("F", "E", "N", "M"),
        pose_spaces=spaces,
        rules=(rule,),
        self_rooting={"F": eps_face, "E": eps_part, "N": eps_part, "M": eps_part},
        rho=rho,
    ))


def face_grammar(width: int, height: int, *, scales=(1.0, 1.5),
                 rho: float = 0.99, eps_face: float = 2e-3,
                 eps_part: float = 1e-3) -> Grammar:
    """Face grammar with distinct eye symbols and a scale ladder.

    Part offsets scale with the face's size; each part lands in a uniform
    uncertainty region and draws its own scale from a near-diagonal
    compatibility map.  The geometry values are representative, not fit
    to data.
    """
    scales = tuple(scales)
    n = len(scales)
    # mostly scale-preserving, some mass on adjacent ladder steps
    scale_map = []
    for i in range(n):
        row = [0.0] * n
        row[i] = 1.0
        if n > 1:
            row[i] = 0.8
            rest = 0.2 / (2 if 0 < i < n - 1 else 1)
            if i > 0:
                row[i - 1] = rest
            if i < n - 1:
                row[i + 1] = rest
        scale_map.append(row)

    spaces = {a: PoseSpace(width, height, scales=scales)
              for a in ("F", "L", "R", "N", "M")}
    rule = Rule("F", 1.0, ("L", "R", "N", "M"), (
        RegionKernel((-3.0, -3.0), (1, 1), scale_map=scale_map),
        RegionKernel((+3.0, -3.0), (1, 1), scale_map=scale_map),
        RegionKernel((0.0, 0.0), (1, 1), scale_map=scale_map),
        RegionKernel((0.0, 3.5), (1, 1), scale_map=scale_map),
    ))
    eps = {"F": eps_face}
    eps.update({a: eps_part for a in ("L", "R", "N", "M")})
    return check_grammar(Grammar(
        symbols=("F", "L", "R", "N", "M"),
        pose_spaces=spaces,
        rules=(rule,),
        self_rooting=eps,
        rho=rho,
    ))
