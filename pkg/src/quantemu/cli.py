"""Command-line experiment harness.

Each subcommand reads a YAML config, runs seeded experiments and writes CSV
artifacts plus a ``<subcommand>.manifest.json`` into the output directory.
``--recipe <id>`` runs one of the bundled experiment recipes.

Exit status: 0 ok, 1 configuration/usage error, 2 runtime failure.
"""

import argparse
import glob
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from importlib import resources

import numpy as np
import yaml

from . import __version__
from .config import Config, ConfigError
from .dqn import (
    DqnAgent,
    DqnConfig,
    EmulationEnv,
    greedy_rollout,
    load_agent,
    save_agent,
    train,
    unit_circle_starts,
)
from .lti import ContinuousLti, discretize
from .mpc import MpcConfig, mpc_rollout
from .nn import load_model, save_model
from .plot import plot_rollout_csv
from .quantization import DropoutPolicy, build_alphabet
from .supervised import Dataset, FeatureSpec, evaluate, generate_dataset, supervised_rollout, train_classifier
from .transfer import (
    TransferMap,
    TransferredPolicy,
    classifier_base_policy,
    conjugate_system,
    dqn_base_policy,
    dqn_features,
    is_alphabet_invariant,
    supervised_features,
    transfer_rollout,
    verify_theorem1,
    warm_start_train,
)

log = logging.getLogger("quantemu")

OUT_DIR_ENV = "QUANTEMU_OUT_DIR"

# figure id -> subcommands run in order
RECIPES = {
    "fig3a": ["mpc-run", "plot"],
    "fig3b": ["collect", "train-supervised", "supervised-rollout", "plot"],
    "fig5a": ["train-dqn", "dqn-rollout", "plot"],
    "fig5b": ["train-dqn", "dqn-rollout", "plot"],
    "fig6a": ["collect", "train-supervised", "transfer-rollout", "plot"],
    "fig6b": ["train-dqn", "transfer-rollout", "plot"],
    "fig7": ["train-dqn", "warmstart-compare", "plot"],
    "fig8": ["train-dqn", "transfer-rollout", "plot"],
}


class RunError(RuntimeError):
    pass


def recipe_text(fig):
    if fig not in RECIPES:
        raise ConfigError(f"unknown recipe {fig!r}; choose from {', '.join(sorted(RECIPES))}")
    return resources.files("quantemu").joinpath("recipes", f"{fig}.yaml").read_text()


def atomic_write(path, writer):
    """``writer(tmp_path)`` then rename onto ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_text(path, text):
    def w(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)

    atomic_write(path, w)


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class Context:
    """Everything a subcommand needs, built once from the parsed config."""

    def __init__(self, cfg, out_dir, seeds, dropout_k=None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.seeds = seeds
        self.dropout_k = dropout_k
        self.outputs = []
        s = cfg["system"]
        try:
            self.disc = discretize(s["A"], s["B"], s["h"])
            self.sys = ContinuousLti(s["H"])
        except ValueError as exc:
            raise cfg.error(str(exc), ("system",))
        self.alphabet = build_alphabet(self.disc.B_d)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def write(self, name, writer):
        p = self.path(name)
        atomic_write(p, writer)
        self.outputs.append(name)
        return p

    def write_text(self, name, text):
        p = self.path(name)
        atomic_text(p, text)
        self.outputs.append(name)
        return p

    def require(self, name, hint):
        p = self.path(name)
        if not os.path.exists(p):
            raise RunError(f"missing {p}; run {hint} first")
        return p

    def mpc_config(self):
        m = self.cfg["mpc"]
        for k in ("P", "Q", "R"):
            if m[k] is None:
                raise self.cfg.error(f"mpc.{k} is required", ("mpc",))
        try:
            return MpcConfig(
                m["P"], m["Q"], m["R"], N=m["N"], search=m["search"], node_budget=m["node_budget"],
                terminal_input_penalty_only=m["terminal_input_penalty_only"],
            )
        except ValueError as exc:
            raise self.cfg.error(str(exc), ("mpc",))

    def dqn_config(self):
        d = dict(self.cfg["dqn"])
        for k in ("episodes", "T", "reward_mode", "reward_scale"):
            d.pop(k)
        try:
            return DqnConfig(**d)
        except ValueError as exc:
            raise self.cfg.error(str(exc), ("dqn",))

    def env(self, sys=None):
        d = self.cfg["dqn"]
        try:
            return EmulationEnv(self.disc, sys or self.sys, self.alphabet, d["reward_mode"], d["reward_scale"])
        except ValueError as exc:
            raise self.cfg.error(str(exc), ("dqn",))

    def feature_spec(self):
        try:
            return FeatureSpec(self.cfg["supervised"]["feature_mode"])
        except ValueError as exc:
            raise self.cfg.error(str(exc), ("supervised", "feature_mode"))

    def dropout(self, seed_offset=0):
        d = self.cfg["dropout"]
        mode, k = d["mode"], d["k"]
        if self.dropout_k is not None:
            mode, k = ("random", self.dropout_k) if self.dropout_k > 0 else ("none", 0)
        try:
            return DropoutPolicy(mode, m=self.disc.m, k=k, channels=tuple(d["channels"]), seed=d["seed"] + seed_offset)
        except ValueError as exc:
            raise self.cfg.error(str(exc), ("dropout",))

    def transfer_map(self):
        O = self.cfg["transfer"]["O"]
        if O is None:
            raise self.cfg.error("transfer.O is required", ("transfer",))
        try:
            return TransferMap(O)
        except ValueError as exc:
            raise self.cfg.error(str(exc), ("transfer", "O"))

    def new_system(self, tmap):
        H_new = self.cfg["transfer"]["H_new"]
        H = conjugate_system(self.sys, tmap) if H_new is None else H_new
        new = ContinuousLti(H)
        if not new.is_stable():
            raise self.cfg.error("the new reference system is not Hurwitz", ("transfer",))
        return new


def cmd_mpc_run(ctx):
    cfg = ctx.mpc_config()
    T = ctx.cfg["run"]["T"]
    for i, x0 in enumerate(ctx.cfg["run"]["starts"]):
        ro = mpc_rollout(x0, T, ctx.disc, ctx.sys, cfg, ctx.dropout(i), ctx.alphabet)
        ctx.write_text(f"mpc_rollout_{i}.csv", ro.to_csv())
        log.info(f"mpc-run start {i}: terminal |x_qs| = {ro.terminal_error():.4g}, "
              f"max tracking error = {ro.tracking_errors().max():.4g}")


def _circle(k, seed=None, offset=0.0):
    return unit_circle_starts(k, np.random.default_rng(seed) if seed is not None else None, offset)


def cmd_collect(ctx):
    sv = ctx.cfg["supervised"]
    seed = ctx.seeds[0]
    spec = ctx.feature_spec()
    ds = generate_dataset(_circle(sv["n_starts"], seed), sv["T"], ctx.disc, ctx.sys, ctx.mpc_config(), spec,
                          seed=seed, alphabet=ctx.alphabet)
    ctx.write("dataset.csv", ds.to_csv)
    # held-out points on the unit circle, offset from any training grid
    k = sv["test_starts"]
    test = generate_dataset(_circle(k, offset=np.pi / max(k, 1)), sv["test_T"], ctx.disc, ctx.sys,
                            ctx.mpc_config(), spec, seed=seed, alphabet=ctx.alphabet)
    ctx.write("testset.csv", test.to_csv)
    log.info(f"collect: {len(ds)} training and {len(test)} test samples")


def cmd_train_supervised(ctx):
    sv = ctx.cfg["supervised"]
    ds = Dataset.from_csv(ctx.require("dataset.csv", "collect"))
    test = Dataset.from_csv(ctx.require("testset.csv", "collect"))
    model, train_acc = train_classifier(ds, len(ctx.alphabet), hidden=tuple(sv["hidden"]), epochs=sv["epochs"],
                                        batch_size=sv["batch_size"], lr=sv["lr"], seed=ctx.seeds[0])
    test_acc = evaluate(model, test)
    ctx.write("classifier.json", lambda p: save_model(model, p))
    ctx.write_text("supervised_metrics.csv",
                   f"train_accuracy,test_accuracy,n_train,n_test\n{train_acc!r},{test_acc!r},{len(ds)},{len(test)}\n")
    log.info(f"train-supervised: train accuracy {train_acc:.4f}, test accuracy {test_acc:.4f}")


def cmd_supervised_rollout(ctx):
    model = load_model(ctx.require("classifier.json", "train-supervised"))
    T = ctx.cfg["run"]["T"]
    for i, x0 in enumerate(ctx.cfg["run"]["starts"]):
        ro = supervised_rollout(x0, T, model, ctx.disc, ctx.sys, ctx.feature_spec(), ctx.alphabet, ctx.dropout(i))
        ctx.write_text(f"supervised_rollout_{i}.csv", ro.to_csv())
        log.info(f"supervised-rollout start {i}: terminal |x_qs| = {ro.terminal_error():.4g}")


def cmd_train_dqn(ctx):
    d = ctx.cfg["dqn"]
    cfg, env = ctx.dqn_config(), ctx.env()
    for seed in ctx.seeds:
        agent, tlog = train(DqnAgent(env, cfg, seed=seed), d["episodes"], d["T"], seed=seed)
        for _, l_dqn, l_msbe, _, _ in tlog.sync_checks:
            if l_dqn != l_msbe:
                raise RunError(f"seed {seed}: target sync check failed ({l_dqn!r} != {l_msbe!r})")
        ctx.write(f"agent_seed{seed}.json", lambda p: save_agent(agent, p))
        ctx.write(f"train_log_seed{seed}.csv", tlog.to_csv)
        log.info(f"train-dqn seed {seed}: {d['episodes']} episodes, {len(tlog.sync_checks)} sync checks passed")


def _agent(ctx, seed, env=None):
    return load_agent(ctx.require(f"agent_seed{seed}.json", "train-dqn"), env or ctx.env())


def cmd_dqn_rollout(ctx):
    T = ctx.cfg["run"]["T"]
    for seed in ctx.seeds:
        agent = _agent(ctx, seed)
        for i, x0 in enumerate(ctx.cfg["run"]["starts"]):
            ro = greedy_rollout(agent, x0, T, ctx.dropout(i))
            ctx.write_text(f"dqn_rollout_seed{seed}_{i}.csv", ro.to_csv())
            log.info(f"dqn-rollout seed {seed} start {i}: terminal |x_qs| = {ro.terminal_error():.4g}")


def cmd_transfer_rollout(ctx):
    tr = ctx.cfg["transfer"]
    tmap = ctx.transfer_map()
    new_sys = ctx.new_system(tmap)
    T = ctx.cfg["run"]["T"]
    seeds = ctx.seeds if tr["base"] == "dqn" else ctx.seeds[:1]
    for seed in seeds:
        if tr["base"] == "dqn":
            agent = _agent(ctx, seed)
            base, features = dqn_base_policy(agent), dqn_features
        else:
            spec = ctx.feature_spec()
            if spec.dim(ctx.disc.n) != 2 * ctx.disc.n:
                raise ctx.cfg.error("transfer needs a 2n-dimensional feature mode", ("supervised", "feature_mode"))
            model = load_model(ctx.require("classifier.json", "train-supervised"))
            base, features = classifier_base_policy(model, ctx.alphabet), supervised_features(spec)
        tp = TransferredPolicy(base, tmap, ctx.alphabet, exclude_zero=tr["exclude_zero"])
        for i, x0 in enumerate(ctx.cfg["run"]["starts"]):
            ro = transfer_rollout(tp, x0, T, ctx.disc, new_sys, features, ctx.dropout(i))
            ctx.write_text(f"transfer_rollout_seed{seed}_{i}.csv", ro.to_csv())
            log.info(f"transfer-rollout seed {seed} start {i}: terminal |x_qs| = {ro.terminal_error():.4g}, "
                  f"max correction = {max(ro.costs, default=0.0):.3g}")
        if tr["base"] == "dqn" and is_alphabet_invariant(tmap, ctx.alphabet):
            S = np.random.default_rng(seed).normal(size=(tr["theorem1_states"], 2 * ctx.disc.n))
            rep = verify_theorem1(agent, tmap, S)
            ctx.write(f"theorem1_seed{seed}.csv", rep.to_csv)
            log.info(f"transfer-rollout seed {seed}: weight-absorption agreement {rep.agreement:.4f}")


def cmd_warmstart_compare(ctx):
    tr = ctx.cfg["transfer"]
    tmap = ctx.transfer_map()
    new_env = ctx.env(ctx.new_system(tmap))
    base = _agent(ctx, ctx.seeds[0])
    T = ctx.cfg["dqn"]["T"]
    starts = ctx.cfg["run"]["starts"]
    res = warm_start_train(base, new_env, tr["warm_episodes"], T, tr["warm_seeds"], starts, ctx.cfg["run"]["T"])
    lines = ["seed,warm_error,cold_error,warm_mean_tracking,cold_mean_tracking"]
    for r in res:
        lines.append(f"{r.seed},{r.warm_error!r},{r.cold_error!r},{r.warm_mean_tracking!r},{r.cold_mean_tracking!r}")
        for tag, agent in (("warm", r.warm), ("cold", r.cold)):
            ro = greedy_rollout(agent, starts[0], ctx.cfg["run"]["T"])
            ctx.write_text(f"{tag}_rollout_seed{r.seed}.csv", ro.to_csv())
    ctx.write_text("warmstart.csv", "\n".join(lines) + "\n")
    w = np.mean([r.warm_error for r in res])
    c = np.mean([r.cold_error for r in res])
    log.info(f"warmstart-compare: mean terminal emulation error warm {w:.4g}, cold {c:.4g}")


def cmd_plot(ctx, inputs=None):
    paths = inputs or sorted(glob.glob(ctx.path("*rollout*.csv")))
    if not paths:
        raise RunError(f"no rollout CSVs to plot in {ctx.out_dir}")
    for p in paths:
        svg = os.path.splitext(os.path.basename(p))[0] + ".svg"
        dest = os.path.join(os.path.dirname(p) if inputs else ctx.out_dir, svg)
        atomic_write(dest, lambda tmp: plot_rollout_csv(p, tmp))
        ctx.outputs.append(os.path.relpath(dest, ctx.out_dir))
    log.info(f"plot: wrote {len(paths)} SVG file(s)")


COMMANDS = {
    "mpc-run": cmd_mpc_run,
    "collect": cmd_collect,
    "train-supervised": cmd_train_supervised,
    "supervised-rollout": cmd_supervised_rollout,
    "train-dqn": cmd_train_dqn,
    "dqn-rollout": cmd_dqn_rollout,
    "transfer-rollout": cmd_transfer_rollout,
    "warmstart-compare": cmd_warmstart_compare,
    "plot": cmd_plot,
}


def write_manifest(ctx, name, args):
    versions = {
        "quantemu": __version__,
        "numpy": np.__version__,
        "pyyaml": yaml.__version__,
        "python": platform.python_version(),
    }
    man = {
        "subcommand": name,
        "config_sha256": ctx.cfg.digest(),
        "config_source": os.path.basename(ctx.cfg.source),
        "recipe": args.recipe,
        "seeds": ctx.seeds,
        "dropout_override": ctx.dropout_k,
        "versions": versions,
        "outputs": {o: _sha256(ctx.path(o)) for o in ctx.outputs},
    }
    atomic_text(ctx.path(f"{name}.manifest.json"), json.dumps(man, indent=2, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="quantemu", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"quantemu {__version__}")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--recipe", help=f"bundled recipe: {', '.join(sorted(RECIPES))}")
    p.add_argument("--seed", type=int, help="run a single seed instead of run.seeds")
    p.add_argument("--out-dir", help=f"output directory (overrides ${OUT_DIR_ENV} and run.out_dir)")
    p.add_argument("--dropout", type=int, metavar="K", help="drop K random channels per step")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=name.replace("-", " "))
        if name == "plot":
            sp.add_argument("inputs", nargs="*", help="rollout CSVs (default: all in the output dir)")
    return p


def _run(args):
    if args.config and args.recipe:
        raise ConfigError("give either --config or --recipe, not both")
    if args.recipe:
        cfg = Config.from_text(recipe_text(args.recipe), f"{args.recipe}.yaml")
    elif args.config:
        try:
            cfg = Config.load(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source=args.config)
    else:
        raise ConfigError("need --config or --recipe")
    if args.command is None and not args.recipe:
        raise ConfigError("no subcommand given")
    commands = [args.command] if args.command else RECIPES[args.recipe]
    out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV) or cfg["run"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    seeds = [args.seed] if args.seed is not None else list(cfg["run"]["seeds"])
    if args.dropout is not None and not 0 <= args.dropout <= cfg["system"]["m"]:
        raise ConfigError(f"--dropout must lie in [0, {cfg['system']['m']}]")
    for name in commands:
        ctx = Context(cfg, out_dir, seeds, args.dropout)
        if name == "plot":
            cmd_plot(ctx, getattr(args, "inputs", None))
        else:
            COMMANDS[name](ctx)
        write_manifest(ctx, name, args)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stdout)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RunError, RuntimeError, FloatingPointError, ValueError, OSError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
