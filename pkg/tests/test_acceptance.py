"""Acceptance suite: one test per headline criterion, thresholds pinned below.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Heavy training runs are shared through module fixtures; their wall time is
charged to the criterion that owns them.
"""

import itertools
import time

import mpmath
import numpy as np
import pytest

from quantemu.dqn import (
    DqnAgent,
    DqnConfig,
    EmulationEnv,
    compute_loss,
    greedy_rollout,
    train,
    unit_circle_starts,
)
from quantemu.kdtree import KdTree
from quantemu.lti import ContinuousLti, discretize, flow_matrix
from quantemu.mpc import MpcConfig, mpc_rollout, solve_mpc
from quantemu.nn import Mlp, backward, forward, loss_cross_entropy, loss_squared
from quantemu.quantization import DropoutPolicy, build_alphabet, enumerate_patterns
from quantemu.supervised import FeatureSpec, evaluate, generate_dataset, supervised_rollout, train_classifier
from quantemu.transfer import (
    TransferMap,
    TransferredPolicy,
    dqn_base_policy,
    is_alphabet_invariant,
    transfer_rollout,
    transform_q_weights,
    verify_theorem1,
    warm_start_train,
)

from conftest import B_EX1, H_SEC5, H_STEP

# pinned thresholds
ALPHABET_SIZE, ALPHABET_PATTERNS, ALPHABET_SECONDS = 25, 81, 1.0
DISC_REL_TOL, DISC_SECONDS = 1e-10, 1.0
GRAD_REL_TOL, GRAD_SECONDS = 1e-5, 30.0
MPC_INSTANCES, MPC_MAX_N, MPC_SECONDS = 100, 3, 120.0
MPC_T, MPC_TERMINAL, MPC_SECONDS_ROLLOUT = 200, 0.1, 60.0
SUP_SAMPLES, SUP_TRAIN_ACC, SUP_TEST_ACC, SUP_TERMINAL, SUP_SECONDS = 10_000, 0.85, 0.80, 0.15, 600.0
SUP_TEST_STARTS, SUP_TEST_T, SUP_WIDTH = 12, 70, 64
DQN_SEEDS, DQN_MIN_PASS, DQN_TERMINAL, DQN_SECONDS = 5, 4, 0.15, 600.0
DQN_EPISODES, DQN_T = 100, 200
DROP_TERMINAL, DROP_SECONDS = 0.25, 60.0
THM1_REL_TOL, THM1_STATES, THM1_AGREEMENT, THM1_SECONDS = 1e-12, 1000, 1.0, 30.0
SHEAR_TERMINAL, SHEAR_SECONDS = 0.25, 60.0
WARM_EPISODES, WARM_SEEDS, WARM_SECONDS = 20, 5, 900.0
KD_SEQUENCES, KD_SECONDS = 1000, 10.0

ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])
SHEAR = np.array([[1.0, 0.5], [-0.5, 1.0]])
H_SHEAR_TARGET = np.array([[-0.5, 0.0], [-1.0, -2.5]])
COMPASS = unit_circle_starts(8)

RESULTS = []


def record(name, ok, detail):
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def test_alphabet_cardinality():
    t0 = time.perf_counter()
    disc = discretize(np.zeros((2, 2)), B_EX1, H_STEP)
    n_pat = sum(1 for _ in enumerate_patterns(4))
    alpha = build_alphabet(disc.B_d)
    dt = time.perf_counter() - t0
    has_zero = alpha.zero_index is not None
    ok = n_pat == ALPHABET_PATTERNS and len(alpha) == ALPHABET_SIZE and has_zero and dt < ALPHABET_SECONDS
    record("alphabet cardinality", ok, f"{n_pat} patterns -> {len(alpha)} directions, zero={has_zero}, {dt:.3f}s")


def _mp_expm_int(M, h, digits=40):
    """exp(M h) and int_0^h exp(M s) ds in extended precision (series and quadrature)."""
    with mpmath.workdps(digits):
        Mm = mpmath.matrix(M.tolist())
        E = mpmath.expm(Mm * h)
        n = M.shape[0]
        Phi = mpmath.matrix(n, n)
        for i in range(n):
            for j in range(n):
                Phi[i, j] = mpmath.quad(lambda s: mpmath.expm(Mm * s)[i, j], [0, h])
        return np.array(E.tolist(), dtype=float), np.array(Phi.tolist(), dtype=float)


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def test_discretization():
    t0 = time.perf_counter()
    d0 = discretize(np.zeros((2, 2)), B_EX1, H_STEP)
    exact = np.array_equal(d0.A_d, np.eye(2)) and np.array_equal(d0.B_d, H_STEP * B_EX1)
    # a nonzero drift exercises the general path; H doubles as the reference flow
    dH = discretize(H_SEC5, B_EX1, H_STEP)
    flow = flow_matrix(ContinuousLti(H_SEC5), H_STEP)
    dt = time.perf_counter() - t0
    E, Phi = _mp_expm_int(H_SEC5, H_STEP)
    Bd = Phi @ B_EX1
    nz = Bd != 0
    errs = [_rel(dH.A_d, E), _rel(flow, E), _rel(dH.B_d[nz], Bd[nz])]
    zeros_ok = np.all(np.abs(dH.B_d[~nz]) < 1e-15)
    ok = exact and max(errs) <= DISC_REL_TOL and zeros_ok and dt < DISC_SECONDS
    record("discretization", ok, f"A=0 exact={exact}, max rel err {max(errs):.2e}, {dt:.3f}s")


def _fd_worst(params, value, grads, eps=1e-5, floor=1e-6):
    worst = 0.0
    for P, G in zip(params, grads):
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + eps
            fp = value()
            P[idx] = old - eps
            fm = value()
            P[idx] = old
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(num - G[idx]) / max(abs(num), abs(G[idx]), floor))
    return worst


def _flat(grads):
    return [g for pair in grads for g in pair]


def test_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for trial, (sizes, acts) in enumerate([
        ([4, 9, 25], ["relu", "linear"]),
        ([3, 7, 6, 5], ["sigmoid", "relu", "linear"]),
        ([6, 8, 8, 4], ["relu", "sigmoid", "sigmoid"]),
        ([2, 5, 3], ["linear", "sigmoid"]),
    ]):
        net = Mlp.init(sizes, acts, seed=trial)
        for l in net.layers:
            l.b = rng.normal(scale=0.3, size=l.b.shape)
        X = rng.normal(size=(7, sizes[0]))
        y = rng.integers(0, sizes[-1], 7)
        Yt = rng.normal(size=(7, sizes[-1]))
        for name, loss in (("cross_entropy", lambda o: loss_cross_entropy(o, y)),
                           ("squared", lambda o: loss_squared(o, Yt))):
            out, cache = forward(net, X)
            g = backward(net, cache, loss(out)[1])
            w = _fd_worst(net.params(), lambda: loss(forward(net, X)[0])[0], _flat(g))
            worst[name] = max(worst.get(name, 0.0), w)
    # max-branch DQN loss with both branches active in the batch
    disc = discretize(np.zeros((2, 2)), B_EX1, H_STEP)
    env = EmulationEnv(disc, ContinuousLti(H_SEC5))
    for seed in range(3):
        agent = DqnAgent(env, DqnConfig(hidden=(12,)), seed=seed)
        for l in agent.target_net.layers:
            l.W = l.W + rng.normal(scale=0.3, size=l.W.shape)
        batch = (rng.normal(size=(16, 4)) * 0.1, rng.integers(0, 25, 16), -rng.random(16),
                 rng.normal(size=(16, 4)) * 0.1)
        info, g = compute_loss(agent, batch)
        both = 0 < np.sum(info.per_cue_msbe > info.per_cue_dqn) < 16
        w = _fd_worst(agent.q_net.params(), lambda: compute_loss(agent, batch)[0].value, _flat(g))
        worst["dqn_max"] = max(worst.get("dqn_max", 0.0), w if both else np.inf)
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= GRAD_REL_TOL and dt < GRAD_SECONDS
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("gradient fidelity", ok, f"max rel err {detail}, {dt:.1f}s")


def test_mpc_optimality():
    t0 = time.perf_counter()
    disc = discretize(np.zeros((2, 2)), B_EX1, H_STEP)
    sys = ContinuousLti(H_SEC5)
    alpha = build_alphabet(disc.B_d)
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(MPC_INSTANCES):
        N = 1 + i % MPC_MAX_N
        M = rng.normal(size=(2, 2))
        Q = M @ M.T + 0.1 * np.eye(2)
        P = Q * rng.uniform(1, 5)
        R = np.diag(rng.uniform(0.001, 0.1, 4))
        x, r = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        bnb = solve_mpc(x, r, disc, sys, MpcConfig(P, Q, R, N=N), alphabet=alpha)
        ex = solve_mpc(x, r, disc, sys, MpcConfig(P, Q, R, N=N, search="exhaustive"), alphabet=alpha)
        if bnb.cost != ex.cost or bnb.first_index != ex.first_index:
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and len(alpha) == 25 and dt < MPC_SECONDS
    record("MPC optimality", ok, f"{MPC_INSTANCES} instances, {mismatches} mismatches, {dt:.1f}s")


def _sec5_mpc():
    disc = discretize(np.zeros((2, 2)), B_EX1, H_STEP)
    cfg = MpcConfig(5 * np.eye(2), 5 * np.eye(2), 0.05 * np.eye(4), N=2)
    return disc, ContinuousLti(H_SEC5), cfg, build_alphabet(disc.B_d)


def test_mpc_emulation():
    t0 = time.perf_counter()
    disc, sys, cfg, alpha = _sec5_mpc()
    ro = mpc_rollout(np.array([1.0, 0.0]), MPC_T, disc, sys, cfg, alphabet=alpha)
    dt = time.perf_counter() - t0
    bound = 2 * np.linalg.norm(alpha.directions, axis=1).max()
    term, track = ro.terminal_error(), ro.tracking_errors().max()
    ok = term <= MPC_TERMINAL and track <= bound and dt < MPC_SECONDS_ROLLOUT
    record("MPC emulation", ok, f"terminal {term:.4f} (<= {MPC_TERMINAL}), max tracking {track:.4f} "
                                f"(<= {bound:.4f}), {dt:.2f}s")


def test_supervised_pipeline():
    t0 = time.perf_counter()
    disc, sys, cfg, alpha = _sec5_mpc()
    spec = FeatureSpec()
    starts = unit_circle_starts(SUP_SAMPLES // 200, np.random.default_rng(0))
    train_ds = generate_dataset(starts, 200, disc, sys, cfg, spec, seed=0, alphabet=alpha)
    k = SUP_TEST_STARTS
    test_ds = generate_dataset(unit_circle_starts(k, offset=np.pi / k), SUP_TEST_T, disc, sys, cfg, spec,
                               seed=0, alphabet=alpha)
    model, train_acc = train_classifier(train_ds, len(alpha), hidden=(SUP_WIDTH,) * 3, epochs=20, seed=0)
    test_acc = evaluate(model, test_ds)
    ro = supervised_rollout(np.array([1.0, 0.0]), 200, model, disc, sys, spec, alpha)
    dt = time.perf_counter() - t0
    ok = (train_acc >= SUP_TRAIN_ACC and test_acc >= SUP_TEST_ACC and ro.terminal_error() <= SUP_TERMINAL
          and dt < SUP_SECONDS and len(train_ds) == SUP_SAMPLES and len(test_ds) == k * SUP_TEST_T)
    record("supervised pipeline", ok, f"{len(train_ds)} samples, train acc {train_acc:.3f}, test acc "
                                      f"{test_acc:.3f} on {len(test_ds)}, terminal {ro.terminal_error():.4f}, {dt:.0f}s")


@pytest.fixture(scope="module")
def dqn_runs():
    disc = discretize(np.zeros((2, 2)), B_EX1, H_STEP)
    env = EmulationEnv(disc, ContinuousLti(H_SEC5))
    runs = []
    t0 = time.perf_counter()
    for seed in range(DQN_SEEDS):
        agent, log = train(DqnAgent(env, DqnConfig(), seed=seed), DQN_EPISODES, DQN_T, seed=seed)
        runs.append((agent, log))
    return runs, time.perf_counter() - t0


def test_dqn_training(dqn_runs):
    runs, dt = dqn_runs
    terms, sync_ok, n_sync = [], True, 0
    for agent, log in runs:
        assert agent.q_net.sizes == [4, 200, 25]
        terms.append(max(greedy_rollout(agent, x0, DQN_T).terminal_error() for x0 in COMPASS))
        n_sync += len(log.sync_checks)
        sync_ok &= bool(log.sync_checks) and all(c[1] == c[2] for c in log.sync_checks)
    passed = sum(t <= DQN_TERMINAL for t in terms)
    ok = passed >= DQN_MIN_PASS and sync_ok and dt < DQN_SECONDS
    record("DQN training", ok, f"{passed}/{DQN_SEEDS} seeds terminal <= {DQN_TERMINAL} (worst per seed "
                               f"{', '.join(f'{t:.3f}' for t in terms)}), {n_sync} sync checks exact={sync_ok}, {dt:.0f}s")


def test_dropout_resilience(dqn_runs):
    agent = dqn_runs[0][0][0]
    t0 = time.perf_counter()
    alpha = agent.env.alphabet
    terms, violations = [], 0
    for i, x0 in enumerate(COMPASS):
        ro = greedy_rollout(agent, x0, DQN_T, DropoutPolicy("random", m=4, k=1, seed=i))
        terms.append(ro.terminal_error())
        for d, mask in zip(ro.dir_indices, ro.masks):
            free = [c for c in range(4) if c not in mask.dropped]
            reach = {tuple(np.round(agent.env.disc.B_d[:, free] @ np.array(u, float), 12))
                     for u in itertools.product((-1, 0, 1), repeat=len(free))}
            violations += tuple(np.round(alpha.directions[d], 12)) not in reach
    dt = time.perf_counter() - t0
    ok = max(terms) <= DROP_TERMINAL and violations == 0 and dt < DROP_SECONDS
    record("dropout resilience", ok, f"worst terminal {max(terms):.4f} (<= {DROP_TERMINAL}), "
                                     f"{violations} unrealizable choices, {dt:.1f}s")


def test_theorem1_construction(dqn_runs):
    agent = dqn_runs[0][0][0]
    t0 = time.perf_counter()
    tm = TransferMap(ROT)
    S = np.random.default_rng(11).normal(size=(THM1_STATES, 4))
    q_new = transform_q_weights(agent.q_net, tm)
    lhs = forward(q_new, S)[0]
    rhs = forward(agent.q_net, S @ tm.lift.T)[0]
    rel = float(np.abs(lhs - rhs).max() / np.abs(rhs).max())
    rep = verify_theorem1(agent, tm, S)
    dt = time.perf_counter() - t0
    invariant = is_alphabet_invariant(ROT, agent.env.alphabet)
    ok = rel <= THM1_REL_TOL and rep.agreement == THM1_AGREEMENT and invariant and dt < THM1_SECONDS
    record("weight-absorption construction", ok, f"max rel err {rel:.1e}, agreement {rep.agreement:.4f} on "
                                         f"{THM1_STATES} states, {dt:.2f}s")


def test_shear_transfer(dqn_runs):
    agent = dqn_runs[0][0][0]
    t0 = time.perf_counter()
    alpha = agent.env.alphabet
    tm = TransferMap(SHEAR)
    tp = TransferredPolicy(dqn_base_policy(agent), tm, alpha)
    new_sys = ContinuousLti(H_SHEAR_TARGET)
    D = alpha.directions
    nonzero = [i for i in range(len(D)) if np.any(D[i])]
    terms, mism, corrected = [], 0, 0
    for x0 in COMPASS:
        ro = transfer_rollout(tp, x0, 200, agent.env.disc, new_sys)
        terms.append(ro.terminal_error())
        # replay the rollout's decisions against a brute-force scan
        Xq, Xr = ro.quantized.states, ro.reference.states
        for k, idx in enumerate(ro.dir_indices):
            s = np.concatenate([Xr[k] - Xq[k], Xr[k]])
            d_o = SHEAR @ dqn_base_policy(agent)(tm.lift @ s)
            if alpha.index_of(d_o) is not None:
                mism += idx != alpha.index_of(d_o)
                continue
            corrected += 1
            dist = [float(np.sum((D[i] - d_o) ** 2)) for i in nonzero]
            mism += idx != nonzero[int(np.argmin(dist))]
    dt = time.perf_counter() - t0
    ok = max(terms) <= SHEAR_TERMINAL and mism == 0 and corrected > 0 and dt < SHEAR_SECONDS
    record("shear transfer", ok, f"worst terminal {max(terms):.4f} (<= {SHEAR_TERMINAL}), {corrected} "
                                 f"corrections, {mism} brute-force mismatches, {dt:.1f}s")


def test_warm_start(dqn_runs):
    agent = dqn_runs[0][0][0]
    t0 = time.perf_counter()
    new_env = EmulationEnv(agent.env.disc, ContinuousLti(H_SHEAR_TARGET), agent.env.alphabet)
    res = warm_start_train(agent, new_env, WARM_EPISODES, 200, list(range(WARM_SEEDS)), COMPASS, 200)
    dt = time.perf_counter() - t0
    warm = float(np.mean([r.warm_error for r in res]))
    cold = float(np.mean([r.cold_error for r in res]))
    ok = warm <= cold and len(res) >= 5 and dt < WARM_SECONDS
    record("warm start", ok, f"mean terminal emulation error warm {warm:.4f} vs cold {cold:.4f} over "
                             f"{len(res)} seeds, {dt:.0f}s")


def test_kdtree():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(KD_SEQUENCES):
        n = int(rng.integers(1, 40))
        dim = int(rng.integers(1, 4))
        P = np.round(rng.normal(size=(n, dim)), int(rng.integers(0, 3)))
        tree, alive = KdTree(P), list(range(n))
        while alive:
            v = np.round(rng.normal(size=dim), 1)
            best = min(alive, key=lambda i: (sum((P[i, j] - v[j]) ** 2 for j in range(dim)), i))
            bad += tree.query(v)[1] != best
            gone = alive[int(rng.integers(len(alive)))]
            tree = tree.remove(gone)
            alive.remove(gone)
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < KD_SECONDS
    record("kd-tree", ok, f"{KD_SEQUENCES} sequences, {bad} disagreements, {dt:.2f}s")
