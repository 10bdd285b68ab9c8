"""Mapping-based transfer of trained direction policies to a similar system.

If the new reference system is ``H_o = O H O^-1``, features of the new
problem are pulled back with ``blkdiag(O^-1, O^-1)``, the old policy is
evaluated, its direction is pushed forward with ``O`` and then snapped to
the nearest realizable direction.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .dqn import DqnAgent, greedy_rollout, pack_state, train
from .lti import ContinuousLti, Trajectory, flow_matrix
from .mpc import Rollout, check_divergence
from .nn import Layer, clone_weights, forward
from .quantization import DEDUP_TOL, DropoutPolicy, MappingRule
from .supervised import FeatureSpec, extract_features


class TransferMap:
    def __init__(self, O):
        O = np.asarray(O, dtype=float)
        if O.ndim != 2 or O.shape[0] != O.shape[1]:
            raise ValueError("O must be square")
        n = O.shape[0]
        scale = max(np.abs(O).max(), 1e-300) ** n
        if abs(np.linalg.det(O)) < 1e-12 * scale:
            raise ValueError("transform O is singular")
        self.O = O
        self.O_inv = np.linalg.inv(O)
        Z = np.zeros((n, n))
        self.lift = np.block([[self.O_inv, Z], [Z, self.O_inv]])
        self.lift_inv = np.block([[O, Z], [Z, O]])

    @property
    def n(self):
        return self.O.shape[0]


def conjugate_system(H, O):
    """``O H O^-1``."""
    tm = O if isinstance(O, TransferMap) else TransferMap(O)
    H = np.asarray(H.H if isinstance(H, ContinuousLti) else H, dtype=float)
    return tm.O @ H @ tm.O_inv


def direction_permutation(O, alphabet, tol=DEDUP_TOL):
    """``perm[j]`` is the index of ``O d_j`` in the alphabet, or -1.

    Matching is greedy in max-norm, each alphabet entry used at most once.
    """
    O = O.O if isinstance(O, TransferMap) else np.asarray(O, dtype=float)
    D = alphabet.directions
    mapped = D @ O.T
    used = np.zeros(len(D), dtype=bool)
    perm = np.full(len(D), -1)
    for j, v in enumerate(mapped):
        err = np.abs(D - v).max(axis=1)
        err[used] = np.inf
        k = int(np.argmin(err))
        if err[k] <= tol:
            perm[j] = k
            used[k] = True
    return perm


def is_alphabet_invariant(O, alphabet, tol=DEDUP_TOL):
    return bool(np.all(direction_permutation(O, alphabet, tol) >= 0))


def dqn_base_policy(agent):
    """Direction-valued policy ``s -> d_argmax`` of a trained agent."""
    D = agent.env.alphabet.directions

    def F(s):
        return D[int(np.argmax(agent.q_values(s)))]

    return F


def classifier_base_policy(model, alphabet):
    def F(f):
        return alphabet.directions[int(np.argmax(forward(model, f)[0]))]

    return F


class TransferredPolicy:
    """``F_o(f_o) = M(O F(blkdiag(O^-1, O^-1) f_o))``.

    The nearest-direction step is skipped when ``O F(...)`` already is a
    member of the target alphabet, which is always the case for invariant
    alphabets.
    """

    def __init__(self, base, tmap, alphabet, exclude_zero=True):
        self.base = base
        self.map = tmap
        self.alphabet = alphabet
        self.exclude_zero = exclude_zero
        self.invariant = is_alphabet_invariant(tmap, alphabet)
        self._rules = {}

    def rule(self, mask=None):
        key = frozenset(mask.dropped) if mask is not None else frozenset()
        r = self._rules.get(key)
        if r is None:
            r = MappingRule(self.alphabet, self.exclude_zero, self.alphabet.available(mask))
            self._rules[key] = r
        return r

    def step(self, f_o, mask=None):
        """Returns ``(d_star, d_o_raw, index)``."""
        f_o = np.asarray(f_o, dtype=float)
        if f_o.shape[-1] != 2 * self.map.n:
            raise ValueError("feature dimension must be 2n")
        d = self.base(self.map.lift @ f_o)
        d_o = self.map.O @ d
        idx = self.alphabet.index_of(d_o)
        if idx is not None and self.alphabet.available(mask)[idx]:
            return self.alphabet.directions[idx], d_o, idx
        d_star, idx = self.rule(mask)(d_o)
        return d_star, d_o, idx


def transfer_policy_step(tp, f_o, mask=None):
    return tp.step(f_o, mask)


def dqn_features(x_qs, x_ref, x_ref_next, x_qs_prev, h):
    return pack_state(x_ref - x_qs, x_ref)


def supervised_features(spec=FeatureSpec()):
    def f(x_qs, x_ref, x_ref_next, x_qs_prev, h):
        return extract_features(x_qs, x_ref, x_ref_next, x_qs_prev, spec, h)

    return f


def transfer_rollout(tp, x0, T, disc, new_sys, features=dqn_features, dropout_policy=None):
    """Emulate ``new_sys`` with a transferred policy; returns a Rollout whose
    ``costs`` hold the nearest-direction correction norms."""
    policy = dropout_policy or DropoutPolicy("none", m=disc.m)
    E = flow_matrix(new_sys, disc.h)
    x_qs = np.asarray(x0, dtype=float)
    x_ref = x_qs.copy()
    prev = x_qs
    qs, ref, idx, corr, masks = [x_qs], [x_ref], [], [], []
    for _ in range(T):
        mask = policy.next_mask()
        x_ref_next = E @ x_ref
        d_star, d_o, k = tp.step(features(x_qs, x_ref, x_ref_next, prev, disc.h), mask)
        prev = x_qs
        x_qs = disc.A_d @ x_qs + d_star
        check_divergence(x_qs, len(idx))
        x_ref = x_ref_next
        qs.append(x_qs)
        ref.append(x_ref)
        idx.append(k)
        corr.append(float(np.linalg.norm(d_star - d_o)))
        masks.append(mask)
    return Rollout(
        Trajectory(np.array(qs), disc.h, "quantized"),
        Trajectory(np.array(ref), disc.h, "reference"),
        tp.alphabet.representatives[idx],
        idx,
        corr,
        masks,
    )


def absorb_linear_map(q_net, L):
    """Network computing ``q_net(L s)``: the first affine layer takes ``W L``."""
    L = np.asarray(L, dtype=float)
    if q_net.n_in != L.shape[0]:
        raise ValueError("first layer is not an affine map of the transformed state")
    new = clone_weights(q_net)
    first = new.layers[0]
    new.layers[0] = Layer(first.W @ L, first.b.copy(), first.activation)
    return new


def transform_q_weights(q_net, tmap):
    return absorb_linear_map(q_net, tmap.lift)


def transferred_agent(agent, tmap, new_env):
    """Agent for the new problem built by weight absorption.

    Output ``j`` of the absorbed network scores direction ``O d_j``; the
    outputs are reordered so the agent indexes the target alphabet.
    """
    perm = direction_permutation(tmap, new_env.alphabet)
    if np.any(perm < 0):
        raise ValueError("weight absorption transfer needs an invariant alphabet")
    net = transform_q_weights(agent.q_net, tmap)
    inv = np.argsort(perm)
    last = net.layers[-1]
    net.layers[-1] = Layer(last.W[inv], last.b[inv], last.activation)
    return DqnAgent(new_env, agent.cfg, seed=agent.seed, q_net=net)


@dataclass
class Theorem1Report:
    rows: list

    @property
    def agreement(self):
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["state_id", "agree", "base_dir_index", "transferred_dir_index", "nn_correction_norm"]
            )
            for r in self.rows:
                w.writerow([r[0], int(r[1]), r[2], r[3], repr(float(r[4]))])


def verify_theorem1(agent, tmap, states, q_new=None):
    """Compare the absorbed network's greedy direction with ``O pi(L s_o)``.

    ``q_new`` defaults to :func:`transform_q_weights`; passing a different
    network gives a negative control.
    """
    alphabet = agent.env.alphabet
    perm = direction_permutation(tmap, alphabet)
    if np.any(perm < 0):
        raise ValueError("alphabet is not invariant under O")
    q_new = q_new if q_new is not None else transform_q_weights(agent.q_net, tmap)
    scale = agent.input_scale
    S = np.atleast_2d(np.asarray(states, dtype=float))
    j_new = np.argmax(forward(q_new, S * scale)[0], axis=1)
    base = np.argmax(forward(agent.q_net, (S @ tmap.lift.T) * scale)[0], axis=1)
    rows = []
    for i, (a, b) in enumerate(zip(j_new, base)):
        base_dir = int(perm[b])
        new_dir = int(perm[a])
        rows.append((i, base_dir == new_dir, base_dir, new_dir, 0.0))
    return Theorem1Report(rows)


@dataclass
class WarmStartResult:
    seed: int
    warm_error: float
    cold_error: float
    warm_mean_tracking: float
    cold_mean_tracking: float
    warm: DqnAgent = None
    cold: DqnAgent = None
    warm_log: object = None
    cold_log: object = None


def emulation_error(agent, starts, T):
    """Mean terminal error ``|x_qs(T) - x_ref(T)|`` and mean tracking error."""
    term, track = [], []
    for x0 in starts:
        ro = greedy_rollout(agent, x0, T)
        err = ro.tracking_errors()
        term.append(err[-1])
        track.append(err.mean())
    return float(np.mean(term)), float(np.mean(track))


def warm_start_train(base_agent, new_env, episodes, T, seeds, eval_starts, eval_T=None):
    """Train a copied and a fresh agent side by side on the new problem."""
    eval_T = eval_T or T
    results = []
    for seed in seeds:
        warm = DqnAgent(new_env, base_agent.cfg, seed=seed, q_net=clone_weights(base_agent.q_net))
        cold = DqnAgent(new_env, base_agent.cfg, seed=seed)
        if warm.q_net.sizes != cold.q_net.sizes:
            raise ValueError("architecture mismatch")
        _, wlog = train(warm, episodes, T, seed=seed)
        _, clog = train(cold, episodes, T, seed=seed)
        we, wt = emulation_error(warm, eval_starts, eval_T)
        ce, ct = emulation_error(cold, eval_starts, eval_T)
        results.append(WarmStartResult(seed, we, ce, wt, ct, warm, cold, wlog, clog))
    return results
