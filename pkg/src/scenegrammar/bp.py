"""Loopy belief propagation with linear-time structured-factor updates.

Two layers live here.  The reference message kernels
(noisyor_messages, categorical_messages, variable_messages) compute exact
unnormalized sum-product messages in O(degree) with an optional operation
counter; they are the unit under test against brute-force enumeration.
run_lbp is the batched engine: the same equations over flat arrays with
numba-compiled sweeps, normalized messages, damping, flooding or
factor-sweep schedules, evidence injection and clamping.

Per-output products over "all inputs but one" use prefix/suffix
accumulation (two passes, no division); the weighted sums in the
categorical updates use the matching prefix/suffix recurrence, so no
cancellation-prone subtraction appears anywhere in the kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
from numba import njit, prange, set_num_threads

from .factorgraph import FK_CATEGORICAL, FK_NOISYOR, VK_X, FactorGraph

SCHEDULES = ("synchronous-flood", "factor-sweep")


class OpCounter:
    """Counts elementary scalar operations (mul/add/div/exp)."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def add(self, n: int = 1):
        self.count += n


@dataclass
class BpConfig:
    """Engine knobs; defaults are package choices, not reported values."""

    schedule: str = "synchronous-flood"
    damping: float = 0.5
    max_iters: int = 200
    tol: float = 1e-6
    floor: float = 1e-12
    normalize: bool = True
    seed: int = 0
    init_jitter: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not (0.0 <= self.damping < 1.0):
            raise ValueError("damping must be in [0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0.0:
            raise ValueError("convergence threshold must be > 0")
        if not (0.0 < self.floor < 0.5):
            raise ValueError("message floor must be in (0, 0.5)")


# ---------------------------------------------------------------------------
# reference kernels (exact unnormalized sum-product, instrumented)
# ---------------------------------------------------------------------------

def noisyor_messages(leak: float, beta: float, msg_y: np.ndarray,
                     msg_z: np.ndarray, ops: OpCounter = None):
    """Messages out of a noisy-OR factor F(y_1..y_N, z).

    msg_y is (N, 2) with the input-variable messages, msg_z the output
    variable's message.  Returns (msg_to_z (2,), msg_to_y (N, 2)),
    exactly the sum-product sums over the factor table.  All incoming
    messages must be strictly positive.
    """
    if ops is None:
        ops = OpCounter()
    msg_y = np.asarray(msg_y, dtype=np.float64)
    msg_z = np.asarray(msg_z, dtype=np.float64)
    n = msg_y.shape[0]
    eb = math.exp(-beta)
    ops.add(1)

    t = np.empty(n)
    u = np.empty(n)
    for i in range(n):
        t[i] = msg_y[i, 0] + msg_y[i, 1] * eb
        u[i] = msg_y[i, 0] + msg_y[i, 1]
        ops.add(3)
    # prefix/suffix products of t and u
    pt = np.empty(n + 1)
    pu = np.empty(n + 1)
    pt[0] = pu[0] = 1.0
    for i in range(n):
        pt[i + 1] = pt[i] * t[i]
        pu[i + 1] = pu[i] * u[i]
        ops.add(2)
    st = np.empty(n + 1)
    su = np.empty(n + 1)
    st[n] = su[n] = 1.0
    for i in range(n - 1, -1, -1):
        st[i] = st[i + 1] * t[i]
        su[i] = su[i + 1] * u[i]
        ops.add(2)

    one_minus_leak = 1.0 - leak
    p0 = one_minus_leak * pt[n]
    ptot = pu[n]
    msg_to_z = np.array([p0, ptot - p0])
    ops.add(3)

    dz = msg_z[0] - msg_z[1]
    ops.add(1)
    msg_to_y = np.empty((n, 2))
    for i in range(n):
        r_i = one_minus_leak * pt[i] * st[i + 1]
        q_i = pu[i] * su[i + 1]
        base = msg_z[1] * q_i
        msg_to_y[i, 0] = r_i * dz + base
        msg_to_y[i, 1] = r_i * eb * dz + base
        ops.add(9)
    return msg_to_z, msg_to_y


def categorical_messages(theta: np.ndarray, msg_y: np.ndarray,
                         msg_z: np.ndarray, ops: OpCounter = None):
    """Messages out of a switched categorical factor F(y, z_1..z_N).

    With the switch on, the outcomes are one-hot with probabilities
    theta; with the switch off, all outcomes must be zero (value one).
    msg_y is the switch message (2,), msg_z the outcome messages (N, 2).
    Returns (msg_to_y (2,), msg_to_z (N, 2)); exact sum-product values.
    """
    if ops is None:
        ops = OpCounter()
    theta = np.asarray(theta, dtype=np.float64)
    msg_y = np.asarray(msg_y, dtype=np.float64)
    msg_z = np.asarray(msg_z, dtype=np.float64)
    n = theta.shape[0]

    w = np.empty(n)
    for i in range(n):
        w[i] = theta[i] * msg_z[i, 1]
        ops.add(1)

    # prefix/suffix products of the off-components and the matching
    # weighted sums:  sl[i] = sum_{j<i} w_j prod_{k<i, k!=j} c_k
    pl = np.empty(n + 1)
    sl = np.empty(n + 1)
    pl[0], sl[0] = 1.0, 0.0
    for i in range(n):
        c = msg_z[i, 0]
        sl[i + 1] = sl[i] * c + w[i] * pl[i]
        pl[i + 1] = pl[i] * c
        ops.add(4)
    pr = np.empty(n + 1)
    sr = np.empty(n + 1)
    pr[n], sr[n] = 1.0, 0.0
    for i in range(n - 1, -1, -1):
        c = msg_z[i, 0]
        sr[i] = sr[i + 1] * c + w[i] * pr[i + 1]
        pr[i] = pr[i + 1] * c
        ops.add(4)

    msg_to_y = np.array([pl[n], sl[n]])
    msg_to_z = np.empty((n, 2))
    for i in range(n):
        a_i = pl[i] * pr[i + 1]           # prod of off-components, j != i
        d_i = sl[i] * pr[i + 1] + pl[i] * sr[i + 1]
        msg_to_z[i, 0] = msg_y[0] * a_i + msg_y[1] * d_i
        msg_to_z[i, 1] = msg_y[1] * theta[i] * a_i
        ops.add(9)
    return msg_to_y, msg_to_z


def variable_messages(incoming: np.ndarray, evidence: np.ndarray = None,
                      normalize: bool = True) -> np.ndarray:
    """Standard variable update: product of all incoming but the target,
    times the evidence message."""
    incoming = np.asarray(incoming, dtype=np.float64)
    d = incoming.shape[0]
    ev = np.ones(2) if evidence is None else np.asarray(evidence, dtype=np.float64)
    out = np.empty((d, 2))
    acc = ev.copy()
    for k in range(d):
        out[k] = acc
        acc = acc * incoming[k]
    acc = np.ones(2)
    for k in range(d - 1, -1, -1):
        out[k] = out[k] * acc
        acc = acc * incoming[k]
    if normalize:
        s = out.sum(axis=1, keepdims=True)
        good = (s[:, 0] > 0.0)
        out[good] /= s[good]
        out[~good] = 0.5
    return out


# ---------------------------------------------------------------------------
# batched engine
# ---------------------------------------------------------------------------

@dataclass
class MessageStore:
    """Directed messages per (factor, variable) edge."""

    f2v: np.ndarray  # (E, 2) factor -> variable
    v2f: np.ndarray  # (E, 2) variable -> factor
    normalized: bool = True


@dataclass
class Marginals:
    """Beliefs and diagnostics from one run_lbp call."""

    fg: FactorGraph = field(repr=False)
    beliefs: np.ndarray          # (n_vars, 2)
    residuals: list
    converged: bool
    iterations: int
    leak_on: np.ndarray          # (n_bricks,) posterior that the brick's
                                 # presence is due to its self-rooting leak
    messages: MessageStore = field(repr=False, default=None)

    def x_beliefs(self) -> np.ndarray:
        """P(X=1) per brick id."""
        return self.beliefs[self.fg.x_var, 1].copy()

    def r_belief(self, brick: int, rule_idx: int) -> float:
        return float(self.beliefs[self.fg.r_var(brick, rule_idx), 1])

    def rule_posteriors(self, symbol: str) -> np.ndarray:
        """(n_poses, n_rules) matrix of R beliefs for one symbol."""
        g = self.fg.grammar
        k = len(g.rules_for(symbol))
        rng_ = self.fg.table.symbol_range(symbol)
        if k == 0:
            return np.zeros((len(rng_), 0))
        base = self.fg.x_var[rng_.start:rng_.stop]
        cols = [self.beliefs[base + 1 + r, 1] for r in range(k)]
        return np.stack(cols, axis=1)

    def symbol_grid(self, symbol: str, reduce: str = "max") -> np.ndarray:
        """(height, width) map of P(X=1), reduced over orientation/scale."""
        space = self.fg.grammar.pose_spaces[symbol]
        rng_ = self.fg.table.symbol_range(symbol)
        vals = self.beliefs[self.fg.x_var[rng_.start:rng_.stop], 1]
        grid = vals.reshape(space.height, space.width, space.n_extra)
        if reduce == "max":
            return grid.max(axis=2)
        if reduce == "sum":
            return grid.sum(axis=2)
        raise ValueError("reduce must be 'max' or 'sum'")

    def leak_grid(self, symbol: str, reduce: str = "max") -> np.ndarray:
        space = self.fg.grammar.pose_spaces[symbol]
        rng_ = self.fg.table.symbol_range(symbol)
        vals = self.leak_on[rng_.start:rng_.stop]
        grid = vals.reshape(space.height, space.width, space.n_extra)
        return grid.max(axis=2) if reduce == "max" else grid.sum(axis=2)


@njit(cache=True, nogil=True)
def _sweep_v2f(var_estart, var_edges, f2v, ev, v2f, floor, normalize):
    nv = var_estart.shape[0] - 1
    for v in prange(nv):
        lo, hi = var_estart[v], var_estart[v + 1]
        a0, a1 = ev[v, 0], ev[v, 1]
        for idx in range(lo, hi):
            e = var_edges[idx]
            v2f[e, 0] = a0
            v2f[e, 1] = a1
            a0 *= f2v[e, 0]
            a1 *= f2v[e, 1]
        b0 = 1.0
        b1 = 1.0
        for idx in range(hi - 1, lo - 1, -1):
            e = var_edges[idx]
            m0 = v2f[e, 0] * b0
            m1 = v2f[e, 1] * b1
            if normalize:
                s = m0 + m1
                if s > 0.0:
                    p1 = m1 / s
                else:
                    p1 = 0.5
                if p1 < floor:
                    p1 = floor
                elif p1 > 1.0 - floor:
                    p1 = 1.0 - floor
                v2f[e, 0] = 1.0 - p1
                v2f[e, 1] = p1
            else:
                v2f[e, 0] = m0 if m0 > floor else floor
                v2f[e, 1] = m1 if m1 > floor else floor
            b0 *= f2v[e, 0]
            b1 *= f2v[e, 1]


@njit(cache=True, nogil=True)
def _factor_out(f, scope_start, scope_var, fac_kind, fac_leak, fac_beta,
                scope_theta, v2f, out):
    """Fresh unnormalized-but-scale-free outgoing messages of factor f,
    written into out[scope edges].  Prefix values stage in out itself."""
    lo = scope_start[f]
    hi = scope_start[f + 1]
    n = hi - lo - 1
    if fac_kind[f] == 0:  # noisy-OR
        eb = math.exp(-fac_beta[f])
        one_minus_leak = 1.0 - fac_leak[f]
        acc_t = 1.0
        acc_u = 1.0
        for e in range(lo + 1, hi):
            out[e, 0] = acc_t
            out[e, 1] = acc_u
            t = v2f[e, 0] + v2f[e, 1] * eb
            u = v2f[e, 0] + v2f[e, 1]
            acc_t *= t
            acc_u *= u
        p0 = one_minus_leak * acc_t
        mz0 = v2f[lo, 0]
        mz1 = v2f[lo, 1]
        dz = mz0 - mz1
        suf_t = 1.0
        suf_u = 1.0
        for e in range(hi - 1, lo, -1):
            t = v2f[e, 0] + v2f[e, 1] * eb
            u = v2f[e, 0] + v2f[e, 1]
            r_i = one_minus_leak * out[e, 0] * suf_t
            base = mz1 * out[e, 1] * suf_u
            out[e, 0] = r_i * dz + base
            out[e, 1] = r_i * eb * dz + base
            suf_t *= t
            suf_u *= u
        out[lo, 0] = p0
        out[lo, 1] = acc_u - p0
    else:  # switched categorical
        pl = 1.0
        sl = 0.0
        for e in range(lo + 1, hi):
            out[e, 0] = pl
            out[e, 1] = sl
            c = v2f[e, 0]
            w = scope_theta[e] * v2f[e, 1]
            sl = sl * c + w * pl
            pl = pl * c
        my0 = v2f[lo, 0]
        my1 = v2f[lo, 1]
        pr = 1.0
        sr = 0.0
        for e in range(hi - 1, lo, -1):
            c = v2f[e, 0]
            w = scope_theta[e] * v2f[e, 1]
            a_i = out[e, 0] * pr
            d_i = out[e, 1] * pr + out[e, 0] * sr
            z1 = my1 * scope_theta[e] * a_i
            z0 = my0 * a_i + my1 * d_i
            out[e, 0] = z0
            out[e, 1] = z1
            sr = sr * c + w * pr
            pr = pr * c
        out[lo, 0] = pl
        out[lo, 1] = sl


@njit(cache=True, nogil=True, parallel=True)
def _sweep_f2v_parallel(scope_start, scope_var, fac_kind, fac_leak, fac_beta,
                        scope_theta, v2f, out):
    nf = scope_start.shape[0] - 1
    for f in prange(nf):
        _factor_out(f, scope_start, scope_var, fac_kind, fac_leak, fac_beta,
                    scope_theta, v2f, out)


@njit(cache=True, nogil=True)
def _sweep_f2v_serial(scope_start, scope_var, fac_kind, fac_leak, fac_beta,
                      scope_theta, v2f, out):
    nf = scope_start.shape[0] - 1
    for f in range(nf):
        _factor_out(f, scope_start, scope_var, fac_kind, fac_leak, fac_beta,
                    scope_theta, v2f, out)


@njit(cache=True, nogil=True)
def _damp_normalize(f2v, fresh, damping, floor, normalize):
    """Damped write of fresh messages into f2v; returns max entry change."""
    e_count = f2v.shape[0]
    lam = damping
    delta = 0.0
    for e in range(e_count):
        m0 = fresh[e, 0]
        m1 = fresh[e, 1]
        if normalize:
            s = m0 + m1
            if s > 0.0:
                p1 = m1 / s
            else:
                p1 = 0.5
            if p1 < floor:
                p1 = floor
            elif p1 > 1.0 - floor:
                p1 = 1.0 - floor
            m0 = 1.0 - p1
            m1 = p1
        else:
            m0 = m0 if m0 > floor else floor
            m1 = m1 if m1 > floor else floor
        n0 = (1.0 - lam) * m0 + lam * f2v[e, 0]
        n1 = (1.0 - lam) * m1 + lam * f2v[e, 1]
        d = abs(n1 - f2v[e, 1])
        if d > delta:
            delta = d
        d = abs(n0 - f2v[e, 0])
        if d > delta:
            delta = d
        f2v[e, 0] = n0
        f2v[e, 1] = n1
    return delta


@njit(cache=True, nogil=True)
def _compute_beliefs(var_estart, var_edges, f2v, ev, beliefs):
    nv = var_estart.shape[0] - 1
    for v in prange(nv):
        b0, b1 = ev[v, 0], ev[v, 1]
        for idx in range(var_estart[v], var_estart[v + 1]):
            e = var_edges[idx]
            b0 *= f2v[e, 0]
            b1 *= f2v[e, 1]
        s = b0 + b1
        if s > 0.0:
            beliefs[v, 0] = b0 / s
            beliefs[v, 1] = b1 / s
        else:
            beliefs[v, 0] = 0.5
            beliefs[v, 1] = 0.5


@njit(cache=True, nogil=True)
def _factor_sweep(scope_start, scope_var, fac_kind, fac_leak, fac_beta,
                  scope_theta, var_estart, var_edges, f2v, v2f, ev, scratch,
                  damping, floor, normalize):
    """One full Gauss-Seidel pass over factors in index order."""
    nf = scope_start.shape[0] - 1
    lam = damping
    delta = 0.0
    for f in range(nf):
        lo = scope_start[f]
        hi = scope_start[f + 1]
        # refresh the variable->factor messages feeding this factor
        for e in range(lo, hi):
            v = scope_var[e]
            a0, a1 = ev[v, 0], ev[v, 1]
            for idx in range(var_estart[v], var_estart[v + 1]):
                e2 = var_edges[idx]
                if e2 != e:
                    a0 *= f2v[e2, 0]
                    a1 *= f2v[e2, 1]
            if normalize:
                s = a0 + a1
                if s > 0.0:
                    p1 = a1 / s
                else:
                    p1 = 0.5
                if p1 < floor:
                    p1 = floor
                elif p1 > 1.0 - floor:
                    p1 = 1.0 - floor
                v2f[e, 0] = 1.0 - p1
                v2f[e, 1] = p1
            else:
                v2f[e, 0] = a0 if a0 > floor else floor
                v2f[e, 1] = a1 if a1 > floor else floor
        _factor_out(f, scope_start, scope_var, fac_kind, fac_leak, fac_beta,
                    scope_theta, v2f, scratch)
        for e in range(lo, hi):
            m0 = scratch[e, 0]
            m1 = scratch[e, 1]
            if normalize:
                s = m0 + m1
                if s > 0.0:
                    p1 = m1 / s
                else:
                    p1 = 0.5
                if p1 < floor:
                    p1 = floor
                elif p1 > 1.0 - floor:
                    p1 = 1.0 - floor
                m0 = 1.0 - p1
                m1 = p1
            else:
                m0 = m0 if m0 > floor else floor
                m1 = m1 if m1 > floor else floor
            n0 = (1.0 - lam) * m0 + lam * f2v[e, 0]
            n1 = (1.0 - lam) * m1 + lam * f2v[e, 1]
            d = abs(n1 - f2v[e, 1])
            if d > delta:
                delta = d
            d = abs(n0 - f2v[e, 0])
            if d > delta:
                delta = d
            f2v[e, 0] = n0
            f2v[e, 1] = n1
    return delta


@njit(cache=True, nogil=True)
def _leak_posterior(scope_start, fac_kind, fac_leak, fac_beta, fac_brick,
                    v2f, leak_on):
    """P(brick on via its leak) from each noisy-OR factor's local belief."""
    nf = scope_start.shape[0] - 1
    for f in range(nf):
        if fac_kind[f] != 0:
            continue
        lo = scope_start[f]
        hi = scope_start[f + 1]
        eb = math.exp(-fac_beta[f])
        acc_t = 1.0
        acc_u = 1.0
        for e in range(lo + 1, hi):
            acc_t *= v2f[e, 0] + v2f[e, 1] * eb
            acc_u *= v2f[e, 0] + v2f[e, 1]
        p0 = (1.0 - fac_leak[f]) * acc_t
        mz0 = v2f[lo, 0]
        mz1 = v2f[lo, 1]
        z = mz0 * p0 + mz1 * (acc_u - p0)
        if z > 0.0:
            leak_on[fac_brick[f]] = fac_leak[f] * mz1 * acc_u / z
        else:
            leak_on[fac_brick[f]] = 0.0


def uniform_evidence(fg: FactorGraph) -> np.ndarray:
    return np.full((fg.n_vars, 2), 0.5)


def brick_evidence(fg: FactorGraph, per_brick: np.ndarray) -> np.ndarray:
    """Lift (n_bricks, 2) X-evidence into a full per-variable array."""
    per_brick = np.asarray(per_brick, dtype=np.float64)
    if per_brick.shape != (fg.table.size, 2):
        from .errors import DimensionMismatch

        raise DimensionMismatch(
            f"expected ({fg.table.size}, 2) evidence, got {per_brick.shape}"
        )
    ev = uniform_evidence(fg)
    ev[fg.x_var] = per_brick
    return ev


def run_lbp(fg: FactorGraph, evidence=None, clamps: Iterable = (),
            cfg: BpConfig = None) -> Marginals:
    """Run LBP to convergence or cfg.max_iters; non-convergence is
    reported in the result, never raised.

    evidence: None, a (n_vars, 2) array, or {var_id: (w0, w1)}.
    clamps: iterable of (var_id, value) pairs, applied as delta-like
    evidence at the message floor.
    """
    cfg = cfg or BpConfig()
    if cfg.threads > 1:
        set_num_threads(cfg.threads)

    ev = uniform_evidence(fg)
    if evidence is not None:
        if isinstance(evidence, Mapping):
            for v, pair in evidence.items():
                ev[v] = pair
        else:
            evidence = np.asarray(evidence, dtype=np.float64)
            if evidence.shape != ev.shape:
                from .errors import DimensionMismatch

                raise DimensionMismatch(
                    f"evidence shape {evidence.shape} != {ev.shape}"
                )
            ev = evidence.copy()
    if np.any(ev < 0) or np.any(ev.sum(axis=1) <= 0):
        raise ValueError("evidence vectors must be nonnegative with positive sum")
    for v, value in clamps:
        ev[v] = (cfg.floor, 1.0 - cfg.floor) if value else (1.0 - cfg.floor, cfg.floor)

    e_count = fg.n_edges
    f2v = np.full((e_count, 2), 0.5)
    v2f = np.full((e_count, 2), 0.5)
    if cfg.init_jitter > 0.0:
        from . import rng as _rng

        p1 = 0.5 + cfg.init_jitter * (_rng.stream(cfg.seed, 0).random(e_count) - 0.5)
        np.clip(p1, cfg.floor, 1.0 - cfg.floor, out=p1)
        f2v[:, 1] = p1
        f2v[:, 0] = 1.0 - p1
    fresh = np.empty_like(f2v)
    beliefs = np.empty((fg.n_vars, 2))
    x_vars = fg.x_var

    _compute_beliefs(fg.var_estart, fg.var_edges, f2v, ev, beliefs)
    prev_x = beliefs[x_vars, 1].copy()

    residuals = []
    converged = False
    iterations = 0
    sweep_f2v = _sweep_f2v_parallel if cfg.threads > 1 else _sweep_f2v_serial
    for it in range(cfg.max_iters):
        iterations = it + 1
        if cfg.schedule == "synchronous-flood":
            _sweep_v2f(fg.var_estart, fg.var_edges, f2v, ev, v2f,
                       cfg.floor, cfg.normalize)
            sweep_f2v(fg.scope_start, fg.scope_var, fg.fac_kind, fg.fac_leak,
                      fg.fac_beta, fg.scope_theta, v2f, fresh)
            msg_delta = _damp_normalize(f2v, fresh, cfg.damping, cfg.floor,
                                        cfg.normalize)
        else:
            msg_delta = _factor_sweep(fg.scope_start, fg.scope_var, fg.fac_kind,
                                      fg.fac_leak, fg.fac_beta, fg.scope_theta,
                                      fg.var_estart, fg.var_edges, f2v, v2f, ev,
                                      fresh, cfg.damping, cfg.floor,
                                      cfg.normalize)
        _compute_beliefs(fg.var_estart, fg.var_edges, f2v, ev, beliefs)
        x_now = beliefs[x_vars, 1]
        residual = float(np.max(np.abs(x_now - prev_x))) if x_vars.size else 0.0
        residuals.append(residual)
        prev_x = x_now.copy()
        # stopping uses the message change: belief residuals can plateau at
        # zero for an iteration while a wavefront is still in flight
        # (X variables sit three factor-hops apart), but a message fixed
        # point pins every belief
        if msg_delta < cfg.tol:
            converged = True
            break

    # leave v2f consistent with the final factor->variable messages
    _sweep_v2f(fg.var_estart, fg.var_edges, f2v, ev, v2f, cfg.floor,
               cfg.normalize)
    leak_on = np.zeros(fg.table.size)
    _leak_posterior(fg.scope_start, fg.fac_kind, fg.fac_leak, fg.fac_beta,
                    fg.fac_brick, v2f, leak_on)

    return Marginals(
        fg=fg, beliefs=beliefs, residuals=residuals, converged=converged,
        iterations=iterations, leak_on=leak_on,
        messages=MessageStore(f2v=f2v, v2f=v2f, normalized=cfg.normalize),
    )
