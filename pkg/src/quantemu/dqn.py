"""Deep Q-learning over the direction alphabet with the convergent
``max(l_DQN, l_MSBE)`` loss.

The Markov state is ``s = [e; x_ref]`` with ``e = x_ref - x_qs``. Actions
are canonical direction indices. Dropped channels only shrink the set of
admissible actions, so a trained agent keeps working under dropout by
taking the best Q value among the directions that remain.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .lti import Trajectory, flow_matrix
from .mpc import Rollout, check_divergence
from .nn import AdamState, Mlp, adam_step, add_grads, backward, clone_weights, copy_weights_into
from .nn import forward, model_from_dict, model_to_dict, sgd_step
from .quantization import DropoutPolicy, build_alphabet


def pack_state(e, x_ref):
    return np.concatenate([np.asarray(e, dtype=float), np.asarray(x_ref, dtype=float)])


def unpack_state(s, n):
    s = np.asarray(s, dtype=float)
    return s[..., :n], s[..., n:]


class EmulationEnv:
    """Deterministic emulation MDP for one reference system.

    ``reward_mode='literal'`` pays ``-scale*|e(t)|^2`` for the state the
    action is taken in; ``'next_error'`` pays ``-scale*|e(t+1)|^2`` so the
    reward depends on the chosen direction.
    """

    def __init__(self, disc, sys, alphabet=None, reward_mode="next_error", reward_scale=None):
        if reward_mode not in ("literal", "next_error"):
            raise ValueError(f"unknown reward mode {reward_mode!r}")
        self.disc = disc
        self.sys = sys
        self.alphabet = alphabet if alphabet is not None else build_alphabet(disc.B_d)
        self.reward_mode = reward_mode
        # 1/h keeps per-step rewards O(h) for errors of one direction length
        self.reward_scale = 1.0 / disc.h if reward_scale is None else reward_scale
        self.flow = flow_matrix(sys, disc.h)

    @property
    def n(self):
        return self.disc.n

    @property
    def n_actions(self):
        return len(self.alphabet)

    def advance(self, x_qs, x_ref, d_index):
        if not 0 <= d_index < self.n_actions:
            raise IndexError(f"direction index {d_index} out of range")
        return self.disc.A_d @ x_qs + self.alphabet.directions[d_index], self.flow @ x_ref

    def reward(self, e, e_next):
        e = e if self.reward_mode == "literal" else e_next
        return -self.reward_scale * float(e @ e)

    def transition(self, s, d_index):
        e, x_ref = unpack_state(s, self.n)
        x_qs = x_ref - e
        x_qs2, x_ref2 = self.advance(x_qs, x_ref, d_index)
        e2 = x_ref2 - x_qs2
        return pack_state(e2, x_ref2), self.reward(e, e2)


def env_transition(s, d_index, env):
    return env.transition(s, d_index)


class ReplayMemory:
    """Fixed-capacity ring buffer of ``(s, d, r, s')`` cues."""

    def __init__(self, capacity, state_dim, seed=0):
        self.capacity = int(capacity)
        self.S = np.zeros((self.capacity, state_dim))
        self.A = np.zeros(self.capacity, dtype=int)
        self.R = np.zeros(self.capacity)
        self.S2 = np.zeros((self.capacity, state_dim))
        self.size = 0
        self.pos = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def add(self, s, d, r, s2):
        i = self.pos
        self.S[i], self.A[i], self.R[i], self.S2[i] = s, d, r, s2
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size):
        idx = self.rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return self.S[idx], self.A[idx], self.R[idx], self.S2[idx]


@dataclass
class DqnConfig:
    hidden: tuple = (200,)
    activation: str = "relu"
    # a short horizon: with 0.9 the greedy policy drifted from the one-step optimum
    gamma: float = 0.5
    sync_every: int = 50
    capacity: int = 10_000
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    eps_start: float = 1.0
    eps_end: float = 0.05
    anneal_fraction: float = 0.5
    # fixed input scaling; a multiple of the identity on each state block
    error_scale: float = 20.0
    ref_scale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class DqnAgent:
    def __init__(self, env, cfg=None, seed=0, q_net=None):
        self.env = env
        self.cfg = cfg or DqnConfig()
        self.seed = seed
        n2 = 2 * env.n
        if q_net is None:
            sizes = [n2, *self.cfg.hidden, env.n_actions]
            acts = [self.cfg.activation] * len(self.cfg.hidden) + ["linear"]
            q_net = Mlp.init(sizes, acts, seed=seed)
        if q_net.n_in != n2 or q_net.n_out != env.n_actions:
            raise ValueError("Q-network shape does not match the environment")
        self.q_net = q_net
        self.target_net = clone_weights(q_net)
        self.epsilon = self.cfg.eps_start
        self.rng = np.random.default_rng(seed)
        self.opt_state = AdamState.zeros_like(q_net)
        self.steps = 0

    @property
    def input_scale(self):
        n = self.env.n
        return np.concatenate([np.full(n, self.cfg.error_scale), np.full(n, self.cfg.ref_scale)])

    def q_values(self, s, net=None):
        net = net or self.q_net
        return forward(net, np.asarray(s) * self.input_scale)[0]

    def sync_target(self):
        copy_weights_into(self.target_net, self.q_net)


def masked_argmax(q, available):
    """Index of the largest entry among ``available``; lowest index on ties."""
    q = np.where(available, q, -np.inf)
    return int(np.argmax(q))


def select_action(agent, s, mask=None, epsilon=None):
    """Epsilon-greedy choice restricted to the directions left by ``mask``."""
    eps = agent.epsilon if epsilon is None else epsilon
    avail = agent.env.alphabet.available(mask)
    if not avail.any():
        raise ValueError("no directions available under the dropout mask")
    if eps > 0 and agent.rng.random() < eps:
        return int(agent.rng.choice(np.flatnonzero(avail)))
    return masked_argmax(agent.q_values(s), avail)


@dataclass
class LossInfo:
    value: float
    l_dqn: float
    l_msbe: float
    per_cue_dqn: np.ndarray
    per_cue_msbe: np.ndarray


def compute_loss(agent, batch):
    """Batch mean of ``max(l_DQN, l_MSBE)`` and its gradient for ``q_net``.

    The MSBE branch also differentiates through ``max_d' Q(s', d')``; on a
    tie between branches the DQN branch (no gradient through ``s'``) wins.
    """
    S, A, R, S2 = batch
    S, S2 = np.atleast_2d(S), np.atleast_2d(S2)
    A = np.atleast_1d(A).astype(int)
    R = np.atleast_1d(R).astype(float)
    B = len(A)
    if B == 0:
        raise ValueError("empty batch")
    gamma = agent.cfg.gamma
    scale = agent.input_scale
    q_s, c1 = forward(agent.q_net, S * scale)
    q_s2, c2 = forward(agent.q_net, S2 * scale)
    qt_s2 = forward(agent.target_net, S2 * scale)[0]
    rows = np.arange(B)
    qsa = q_s[rows, A]
    a_star = np.argmax(q_s2, axis=1)
    y_dqn = R + gamma * qt_s2.max(axis=1)
    y_msbe = R + gamma * q_s2[rows, a_star]
    l_dqn = (y_dqn - qsa) ** 2
    l_msbe = (y_msbe - qsa) ** 2
    msbe = l_msbe > l_dqn
    loss = np.where(msbe, l_msbe, l_dqn)
    y = np.where(msbe, y_msbe, y_dqn)
    g1 = np.zeros_like(q_s)
    g1[rows, A] = -2.0 * (y - qsa) / B
    g2 = np.zeros_like(q_s2)
    g2[rows, a_star] = np.where(msbe, 2.0 * gamma * (y_msbe - qsa) / B, 0.0)
    grads = add_grads(backward(agent.q_net, c1, g1), backward(agent.q_net, c2, g2))
    info = LossInfo(float(loss.mean()), float(l_dqn.mean()), float(l_msbe.mean()), l_dqn, l_msbe)
    return info, grads


def unit_circle_starts(k, rng=None, offset=0.0):
    """``k`` points on the unit circle; random angles when ``rng`` is given."""
    if rng is not None:
        ang = rng.uniform(0, 2 * np.pi, size=k)
    else:
        ang = offset + 2 * np.pi * np.arange(k) / k
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    sync_checks: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "step", "loss", "l_dqn", "l_msbe", "epsilon", "return"])
            for row in self.rows:
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


def train(agent, episodes, T, starts=None, seed=0, dropout_policy=None, log_every=1):
    """Run the replay/target-network training loop.

    ``starts`` is an array of initial points cycled over episodes; when
    omitted each episode starts uniformly on the unit circle. After every
    target sync the last minibatch is re-evaluated and ``l_DQN == l_MSBE``
    is recorded in ``log.sync_checks``.
    """
    cfg, env = agent.cfg, agent.env
    rng = np.random.default_rng(seed)
    memory = ReplayMemory(cfg.capacity, 2 * env.n, seed=seed + 1)
    policy = dropout_policy or DropoutPolicy("none", m=env.disc.m)
    log = TrainLog()
    total = episodes * T
    anneal = max(1, int(cfg.anneal_fraction * total))
    for ep in range(episodes):
        if starts is None:
            x0 = unit_circle_starts(1, rng)[0]
        else:
            x0 = np.asarray(starts[ep % len(starts)], dtype=float)
        x_qs, x_ref = x0.copy(), x0.copy()
        ret = 0.0
        for t in range(T):
            frac = min(1.0, agent.steps / anneal)
            agent.epsilon = cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)
            mask = policy.next_mask()
            s = pack_state(x_ref - x_qs, x_ref)
            d = select_action(agent, s, mask)
            x_qs, x_ref = env.advance(x_qs, x_ref, d)
            e2 = x_ref - x_qs
            s2 = pack_state(e2, x_ref)
            r = env.reward(s[: env.n], e2)
            ret += r
            memory.add(s, d, r, s2)
            info = None
            if len(memory) >= cfg.batch_size:
                batch = memory.sample(cfg.batch_size)
                info, grads = compute_loss(agent, batch)
                if not np.isfinite(info.value):
                    raise FloatingPointError(f"non-finite loss at episode {ep}, step {t}")
                if cfg.optimizer == "adam":
                    adam_step(agent.q_net, grads, agent.opt_state, lr=cfg.lr)
                else:
                    sgd_step(agent.q_net, grads, cfg.lr)
            agent.steps += 1
            if agent.steps % cfg.sync_every == 0:
                agent.sync_target()
                if info is not None:
                    after, _ = compute_loss(agent, batch)
                    log.sync_checks.append(
                        (agent.steps, after.l_dqn, after.l_msbe, after.value, info.value)
                    )
            if info is not None and t % log_every == 0:
                log.rows.append((ep, t, info.value, info.l_dqn, info.l_msbe, agent.epsilon, ret))
        log.episode_returns.append(ret)
    return agent, log


def greedy_rollout(agent, x0, T, dropout_policy=None, env=None):
    """Epsilon-zero rollout; records the chosen direction index per step."""
    env = env or agent.env
    policy = dropout_policy or DropoutPolicy("none", m=env.disc.m)
    x_qs = np.asarray(x0, dtype=float)
    x_ref = x_qs.copy()
    qs, ref, idx, qv, masks = [x_qs], [x_ref], [], [], []
    for _ in range(T):
        mask = policy.next_mask()
        avail = env.alphabet.available(mask)
        q = agent.q_values(pack_state(x_ref - x_qs, x_ref))
        d = masked_argmax(q, avail)
        x_qs, x_ref = env.advance(x_qs, x_ref, d)
        check_divergence(x_qs, len(idx))
        qs.append(x_qs)
        ref.append(x_ref)
        idx.append(d)
        qv.append(float(q[d]))
        masks.append(mask)
    inputs = env.alphabet.representatives[idx] if idx else np.zeros((0, env.disc.m))
    return Rollout(
        Trajectory(np.array(qs), env.disc.h, "quantized"),
        Trajectory(np.array(ref), env.disc.h, "reference"),
        np.array(inputs),
        idx,
        qv,
        masks,
    )


def agent_to_dict(agent):
    cfg = asdict(agent.cfg)
    cfg["hidden"] = list(cfg["hidden"])
    return {"q_net": model_to_dict(agent.q_net), "config": cfg, "seed": agent.seed}


def save_agent(agent, path):
    with open(path, "w") as fh:
        json.dump(agent_to_dict(agent), fh)


def load_agent(path, env):
    with open(path) as fh:
        d = json.load(fh)
    cfg = DqnConfig(**d["config"])
    return DqnAgent(env, cfg, seed=d["seed"], q_net=model_from_dict(d["q_net"]))
