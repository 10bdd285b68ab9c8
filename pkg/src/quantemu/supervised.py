"""Supervised learning of direction choices from solved MPC instances."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .lti import Trajectory, reference_step
from .mpc import Rollout, check_divergence, mpc_rollout
from .nn import AdamState, Mlp, adam_step, backward, forward, loss_cross_entropy
from .quantization import DropoutPolicy, build_alphabet

FEATURE_MODES = ("error_and_ref_direction", "error_and_ref_location", "error_and_both_directions")


@dataclass(frozen=True)
class FeatureSpec:
    mode: str = "error_and_ref_direction"

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.mode!r}")

    def dim(self, n):
        return 3 * n if self.mode == "error_and_both_directions" else 2 * n


def extract_features(x_qs, x_ref, x_ref_next, x_qs_prev=None, spec=FeatureSpec(), h=1.0):
    """``[x_ref - x_qs; f2]`` where ``f2`` depends on ``spec.mode``.

    The both-directions mode appends the quantized system's previous step
    ``(x_qs - x_qs_prev) / h``, the latest motion known at decision time.
    """
    x_qs = np.asarray(x_qs, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    err = x_ref - x_qs
    if spec.mode == "error_and_ref_location":
        return np.concatenate([err, x_ref])
    if x_ref_next is None:
        raise ValueError(f"mode {spec.mode} needs the next reference state")
    ref_dir = (np.asarray(x_ref_next, dtype=float) - x_ref) / h
    if spec.mode == "error_and_ref_direction":
        return np.concatenate([err, ref_dir])
    if x_qs_prev is None:
        raise ValueError("mode error_and_both_directions needs the previous quantized state")
    qs_dir = (x_qs - np.asarray(x_qs_prev, dtype=float)) / h
    return np.concatenate([err, ref_dir, qs_dir])


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    # (x_qs, x_ref) per sample, kept for re-solving; not exported
    states: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)

    def to_csv(self, path):
        d = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"f_{i}" for i in range(d)] + ["label"])
            for f, y in zip(self.features, self.labels):
                w.writerow(["%.17g" % v for v in f] + [int(y)])

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        d = len(rows[0]) - 1
        feats = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
        labels = np.array([int(r[d]) for r in body], dtype=int)
        return cls(feats, labels)


def generate_dataset(starts, T, disc, sys, cfg, spec=FeatureSpec(), seed=0, alphabet=None):
    """MPC rollouts from each start; one sample per applied first direction."""
    if alphabet is None:
        alphabet = build_alphabet(disc.B_d)
    n = disc.n
    feats, labels, states = [], [], []
    if T > 0:
        for x0 in starts:
            ro = mpc_rollout(x0, T, disc, sys, cfg, alphabet=alphabet)
            Xq, Xr = ro.quantized.states, ro.reference.states
            for k in range(T):
                prev = Xq[k - 1] if k > 0 else Xq[k]
                feats.append(extract_features(Xq[k], Xr[k], Xr[k + 1], prev, spec, disc.h))
                labels.append(ro.dir_indices[k])
                states.append(np.concatenate([Xq[k], Xr[k]]))
    d = spec.dim(n)
    feats = np.array(feats).reshape(-1, d)
    labels = np.array(labels, dtype=int)
    states = np.array(states).reshape(-1, 2 * n)
    perm = np.random.default_rng(seed).permutation(len(labels))
    return Dataset(feats[perm], labels[perm], states[perm])


def fold_standardization(net, mean, std):
    """Absorb ``(f - mean) / std`` into the first affine layer."""
    first = net.layers[0]
    W = first.W / std
    first.b = first.b - W @ mean
    first.W = W
    net.version += 1
    return net


def train_classifier(
    dataset,
    n_classes,
    hidden=(1200, 1200, 1200),
    activations=None,
    epochs=20,
    batch_size=64,
    lr=1e-3,
    seed=0,
):
    """Minibatch cross-entropy training on standardized features.

    The standardization is folded into the first layer afterwards, so the
    returned network consumes raw features. Returns ``(model, train_acc)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    X = dataset.features
    y = dataset.labels
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Z = (X - mean) / std
    sizes = [X.shape[1], *hidden, n_classes]
    net = Mlp.init(sizes, activations, seed=seed)
    state = AdamState.zeros_like(net)
    rng = np.random.default_rng(seed + 1)
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward(net, Z[idx])
            value, g = loss_cross_entropy(logits, y[idx])
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}")
            adam_step(net, backward(net, cache, g), state, lr=lr)
    fold_standardization(net, mean, std)
    return net, evaluate(net, dataset)


def predict(model, features):
    return np.argmax(forward(model, features)[0], axis=-1)


def evaluate(model, dataset):
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(model, dataset.features) == dataset.labels))


def supervised_rollout(x0, T, model, disc, sys, spec=FeatureSpec(), alphabet=None, dropout_policy=None):
    """Classifier-driven emulation; the argmax is taken over available directions."""
    if alphabet is None:
        alphabet = build_alphabet(disc.B_d)
    if model.n_out != len(alphabet):
        raise ValueError("classifier output does not match the alphabet size")
    policy = dropout_policy or DropoutPolicy("none", m=disc.m)
    x_qs = np.asarray(x0, dtype=float)
    x_ref = x_qs.copy()
    prev = x_qs
    qs, ref, idx, masks = [x_qs], [x_ref], [], []
    for _ in range(T):
        mask = policy.next_mask()
        x_ref_next = reference_step(x_ref, sys, disc.h)
        f = extract_features(x_qs, x_ref, x_ref_next, prev, spec, disc.h)
        logits = forward(model, f)[0]
        avail = alphabet.available(mask)
        d = int(np.argmax(np.where(avail, logits, -np.inf)))
        prev = x_qs
        x_qs = disc.A_d @ x_qs + alphabet.directions[d]
        check_divergence(x_qs, len(idx))
        x_ref = x_ref_next
        qs.append(x_qs)
        ref.append(x_ref)
        idx.append(d)
        masks.append(mask)
    return Rollout(
        Trajectory(np.array(qs), disc.h, "quantized"),
        Trajectory(np.array(ref), disc.h, "reference"),
        alphabet.representatives[idx] if idx else np.zeros((0, disc.m)),
        idx,
        [],
        masks,
    )
