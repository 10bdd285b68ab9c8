"""Finite-horizon integer MPC over the direction alphabet and its
receding-horizon rollout."""

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .lti import Trajectory, quantized_step, reference_step
from .quantization import DropoutMask, DropoutPolicy, build_alphabet

DIVERGENCE_NORM = 1e6


def _qform(E, W):
    """``e^T W e`` for a vector or each row of a matrix.

    Summed entry by entry with elementwise operations so that the scalar
    path and the batched path round identically.
    """
    E = np.asarray(E, dtype=float)
    acc = np.zeros(E.shape[:-1])
    k = E.shape[-1]
    for i in range(k):
        for j in range(k):
            if W[i, j] != 0.0:
                acc = acc + E[..., i] * W[i, j] * E[..., j]
    return acc


def _check_spd(W, name):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(W, W.T):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return W


@dataclass
class MpcConfig:
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    N: int = 2
    search: str = "branch_and_bound"
    node_budget: int = 10 ** 6
    terminal_input_penalty_only: bool = False
    # skip the definiteness check, e.g. to study R = 0
    allow_semidefinite: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.search not in ("exhaustive", "branch_and_bound"):
            raise ValueError(f"unknown search {self.search!r}")
        if self.allow_semidefinite:
            self.P, self.Q, self.R = (np.asarray(W, dtype=float) for W in (self.P, self.Q, self.R))
        else:
            self.P = _check_spd(self.P, "P")
            self.Q = _check_spd(self.Q, "Q")
            self.R = _check_spd(self.R, "R")

    def input_weight(self, stage):
        return not self.terminal_input_penalty_only or stage == 0


@dataclass
class MpcSolution:
    inputs: np.ndarray
    cost: float
    first_direction: np.ndarray
    direction_indices: list
    nodes: int = 0

    @property
    def first_index(self):
        return self.direction_indices[0]


def mpc_cost(inputs, x_qs0, x_ref0, disc, sys, cfg):
    """Weighted emulation cost of an input sequence.

    Input penalty on every stage (or only the first one with
    ``terminal_input_penalty_only``), tracking penalty ``Q`` on stages
    ``0..N-1`` and ``P`` on the terminal state.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or len(inputs) != cfg.N:
        raise ValueError(f"expected {cfg.N} input patterns, got shape {inputs.shape}")
    x = np.asarray(x_qs0, dtype=float)
    r = np.asarray(x_ref0, dtype=float)
    if x.shape != (disc.n,) or r.shape != (disc.n,):
        raise ValueError("state dimension mismatch")
    J = float(_qform(x - r, cfg.Q))
    for n, u in enumerate(inputs):
        if cfg.input_weight(n):
            J = J + float(_qform(u.astype(float), cfg.R))
        x = quantized_step(x, u, disc)
        r = reference_step(r, sys, disc.h)
        W = cfg.Q if n + 1 < cfg.N else cfg.P
        J = J + float(_qform(x - r, W))
    return J


class _Problem:
    def __init__(self, x_qs, x_ref, disc, sys, cfg, alphabet, mask):
        mask = mask if mask is not None else DropoutMask.none(disc.m)
        if alphabet is None:
            alphabet = build_alphabet(disc.B_d)
        canon, sub = alphabet.restrict(mask)
        if len(sub) == 0:
            raise ValueError("no directions available under the dropout mask")
        order = np.argsort(canon, kind="stable")
        self.canon = canon[order]
        self.D = sub.directions[order]
        self.U = sub.representatives[order]
        self.ru = _qform(self.U.astype(float), cfg.R)
        self.x0 = np.asarray(x_qs, dtype=float)
        refs = [np.asarray(x_ref, dtype=float)]
        for _ in range(cfg.N):
            refs.append(reference_step(refs[-1], sys, disc.h))
        self.refs = refs
        self.disc, self.cfg = disc, cfg
        self.J0 = float(_qform(self.x0 - refs[0], cfg.Q))

    def children(self, depth, x, J):
        cfg = self.cfg
        X = self.disc.A_d @ x + self.D
        Jc = np.full(len(self.D), J)
        if cfg.input_weight(depth):
            Jc = Jc + self.ru
        W = cfg.Q if depth + 1 < cfg.N else cfg.P
        return X, Jc + _qform(X - self.refs[depth + 1], W)

    def solution(self, seq, cost, nodes):
        seq = list(seq)
        return MpcSolution(
            inputs=self.U[seq].copy(),
            cost=float(cost),
            first_direction=self.D[seq[0]].copy(),
            direction_indices=[int(self.canon[k]) for k in seq],
            nodes=nodes,
        )


def _branch_and_bound(prob):
    N, budget = prob.cfg.N, prob.cfg.node_budget
    best = [np.inf, None]
    nodes = [0]

    def dfs(depth, x, J, prefix):
        nodes[0] += len(prob.D)
        if nodes[0] > budget:
            raise RuntimeError(f"MPC search exceeded node budget {budget}")
        X, Jc = prob.children(depth, x, J)
        if depth + 1 == N:
            k = int(np.argmin(Jc))
            if Jc[k] < best[0]:
                best[0], best[1] = Jc[k], prefix + [k]
            return
        for k in range(len(prob.D)):
            # remaining terms are nonnegative
            if Jc[k] >= best[0]:
                continue
            dfs(depth + 1, X[k], Jc[k], prefix + [k])

    dfs(0, prob.x0, prob.J0, [])
    return prob.solution(best[1], best[0], nodes[0])


def _exhaustive(prob):
    """Every one of the ``K^N`` sequences, no pruning; leaves are scored a
    layer at a time with the same arithmetic as :func:`mpc_cost`."""
    K, N = len(prob.D), prob.cfg.N
    if K ** N > prob.cfg.node_budget:
        raise RuntimeError(f"{K}^{N} sequences exceed node budget {prob.cfg.node_budget}")
    best, best_seq = np.inf, None
    for prefix in itertools.product(range(K), repeat=N - 1):
        x, J = prob.x0, prob.J0
        for depth, k in enumerate(prefix):
            X, Jc = prob.children(depth, x, J)
            x, J = X[k], Jc[k]
        _, Jc = prob.children(N - 1, x, J)
        k = int(np.argmin(Jc))
        if Jc[k] < best:
            best, best_seq = Jc[k], prefix + (k,)
    return prob.solution(best_seq, best, K ** N)


def solve_mpc(x_qs, x_ref, disc, sys, cfg, mask=None, alphabet=None):
    """Globally optimal ``N``-step direction sequence.

    Candidates are the distinct directions available under ``mask``, each
    carried by its minimal-support pattern. Equal-cost sequences resolve to
    the lexicographically smallest sequence of canonical indices.
    """
    prob = _Problem(x_qs, x_ref, disc, sys, cfg, alphabet, mask)
    if cfg.search == "exhaustive":
        return _exhaustive(prob)
    return _branch_and_bound(prob)


@dataclass
class Rollout:
    quantized: Trajectory
    reference: Trajectory
    inputs: np.ndarray
    dir_indices: list
    costs: list
    masks: list = field(default_factory=list)

    def tracking_errors(self):
        return np.linalg.norm(self.quantized.states - self.reference.states, axis=1)

    def terminal_error(self):
        """Distance of the final quantized state from the origin."""
        return float(np.linalg.norm(self.quantized.states[-1]))

    def to_csv(self, path=None):
        n = self.quantized.n
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["k", "t"]
            + [f"xqs_{i}" for i in range(n)]
            + [f"xref_{i}" for i in range(n)]
            + ["dir_index", "cost", "dropped_channels"]
        )
        h = self.quantized.h
        T = len(self.dir_indices)
        for k in range(T + 1):
            row = [k, repr(k * h)]
            row += [repr(float(v)) for v in self.quantized.states[k]]
            row += [repr(float(v)) for v in self.reference.states[k]]
            if k < T:
                cost = self.costs[k] if self.costs else ""
                mask = str(self.masks[k]) if self.masks else ""
                row += [self.dir_indices[k], repr(float(cost)) if cost != "" else "", mask]
            else:
                row += ["", "", ""]
            w.writerow(row)
        if path is None:
            return buf.getvalue()
        with open(path, "w") as fh:
            fh.write(buf.getvalue())


def check_divergence(x, k):
    if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
        raise RuntimeError(f"rollout diverged at step {k}: |x| = {np.linalg.norm(x):.3g}")


def mpc_rollout(x0, T, disc, sys, cfg, dropout_policy=None, alphabet=None):
    """Receding-horizon emulation: solve, apply the first input, advance."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if alphabet is None:
        alphabet = build_alphabet(disc.B_d)
    policy = dropout_policy or DropoutPolicy("none", m=disc.m)
    x_qs = np.asarray(x0, dtype=float)
    x_ref = x_qs.copy()
    qs, ref = [x_qs], [x_ref]
    inputs, idx, costs, masks = [], [], [], []
    for k in range(T):
        mask = policy.next_mask()
        sol = solve_mpc(x_qs, x_ref, disc, sys, cfg, mask, alphabet)
        u = sol.inputs[0]
        x_qs = quantized_step(x_qs, u, disc)
        x_ref = reference_step(x_ref, sys, disc.h)
        check_divergence(x_qs, k)
        qs.append(x_qs)
        ref.append(x_ref)
        inputs.append(u)
        idx.append(sol.first_index)
        costs.append(sol.cost)
        masks.append(mask)
    return Rollout(
        Trajectory(np.array(qs), disc.h, "quantized"),
        Trajectory(np.array(ref), disc.h, "reference"),
        np.array(inputs),
        idx,
        costs,
        masks,
    )
