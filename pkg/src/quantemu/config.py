"""Experiment configuration files.

YAML with a fixed schema. Matrices are row-major nested lists. The system
block has no defaults; every other block falls back to the values listed in
``DEFAULTS``. Errors carry the line of the offending node.
"""

import copy
import hashlib
import json

import numpy as np
import yaml


class ConfigError(ValueError):
    def __init__(self, msg, line=None, source="<config>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {msg}")


DEFAULTS = {
    "mpc": {
        "N": 2,
        "P": None,
        "Q": None,
        "R": None,
        "search": "branch_and_bound",
        "node_budget": 1_000_000,
        "terminal_input_penalty_only": False,
    },
    "supervised": {
        "feature_mode": "error_and_ref_direction",
        "hidden": [1200, 1200, 1200],
        "epochs": 20,
        "batch_size": 64,
        "lr": 1e-3,
        "n_starts": 50,
        "T": 200,
        "test_starts": 12,
        "test_T": 70,
    },
    "dqn": {
        "hidden": [200],
        "gamma": 0.5,
        "sync_every": 50,
        "capacity": 10_000,
        "batch_size": 64,
        "lr": 1e-3,
        "optimizer": "adam",
        "eps_start": 1.0,
        "eps_end": 0.05,
        "anneal_fraction": 0.5,
        "error_scale": 20.0,
        "ref_scale": 1.0,
        "reward_mode": "next_error",
        "reward_scale": None,
        "episodes": 100,
        "T": 200,
    },
    "transfer": {
        "base": "dqn",
        "O": None,
        "H_new": None,
        "exclude_zero": True,
        "warm_episodes": 20,
        "warm_seeds": [0, 1, 2, 3, 4],
        "theorem1_states": 1000,
    },
    "dropout": {"mode": "none", "k": 1, "channels": [], "seed": 0},
    "run": {"T": 200, "starts": [[1.0, 0.0]], "seeds": [0], "out_dir": "out"},
}

SYSTEM_KEYS = {"A", "B", "H", "h", "n", "m"}
SYSTEM_REQUIRED = ("A", "B", "H", "h")


def _build(node, marks, path):
    """Python object for a composed YAML node, recording line numbers by path."""
    marks[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", k.start_mark.line + 1)
            out[key] = _build(v, marks, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_build(v, marks, path + (i,)) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


class Config:
    def __init__(self, data, marks=None, source="<config>", text=""):
        self.marks = marks or {}
        self.source = source
        self.text = text
        self.raw = data
        self.data = self._validate(data)

    @classmethod
    def from_text(cls, text, source="<config>"):
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(str(getattr(exc, "problem", exc)), mark.line + 1 if mark else None, source)
        if node is None:
            raise ConfigError("empty configuration", 1, source)
        marks = {}
        try:
            data = _build(node, marks, ())
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[1], exc.line, source)
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", 1, source)
        return cls(data, marks, source, text)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read(), str(path))

    def error(self, msg, path):
        p = tuple(path)
        while p not in self.marks and p:
            p = p[:-1]
        return ConfigError(msg, self.marks.get(p), self.source)

    def _matrix(self, value, path, shape=None, allow_none=False):
        if value is None and allow_none:
            return None
        try:
            M = np.array(value, dtype=float)
        except (TypeError, ValueError):
            raise self.error("expected a numeric matrix (nested lists)", path)
        if M.ndim != 2:
            raise self.error("expected a matrix given as a list of rows", path)
        if shape is not None and M.shape != shape:
            raise self.error(f"expected shape {shape}, got {M.shape}", path)
        if not np.all(np.isfinite(M)):
            raise self.error("matrix has non-finite entries", path)
        return M

    def _validate(self, data):
        unknown = set(data) - set(DEFAULTS) - {"system"}
        if unknown:
            k = sorted(unknown)[0]
            raise self.error(f"unknown block {k!r}", (k,))
        if "system" not in data:
            raise self.error("missing required block 'system'", ())
        sysb = data["system"]
        if not isinstance(sysb, dict):
            raise self.error("system block must be a mapping", ("system",))
        for k in sysb:
            if k not in SYSTEM_KEYS:
                raise self.error(f"unknown system key {k!r}", ("system", k))
        for k in SYSTEM_REQUIRED:
            if k not in sysb:
                raise self.error(f"system.{k} is required", ("system",))
        H = self._matrix(sysb["H"], ("system", "H"))
        n = H.shape[0]
        if H.shape != (n, n):
            raise self.error("H must be square", ("system", "H"))
        A = self._matrix(sysb["A"], ("system", "A"), (n, n))
        B = self._matrix(sysb["B"], ("system", "B"))
        if B.shape[0] != n:
            raise self.error(f"B must have {n} rows", ("system", "B"))
        h = sysb["h"]
        if isinstance(h, bool) or not isinstance(h, (int, float)) or not h > 0:
            raise self.error("h must be a positive number", ("system", "h"))
        for key, val in (("n", n), ("m", B.shape[1])):
            if key in sysb and sysb[key] != val:
                raise self.error(f"system.{key} = {sysb[key]} disagrees with the matrices ({val})", ("system", key))
        out = {"system": {"A": A, "B": B, "H": H, "h": float(h), "n": n, "m": B.shape[1]}}
        for block, defaults in DEFAULTS.items():
            given = data.get(block, {}) or {}
            if not isinstance(given, dict):
                raise self.error(f"{block} block must be a mapping", (block,))
            for k in given:
                if k not in defaults:
                    raise self.error(f"unknown key {block}.{k}", (block, k))
            merged = copy.deepcopy(defaults)
            merged.update(given)
            for k, v in merged.items():
                d = defaults[k]
                if d is not None and v is not None and not isinstance(d, (list, str)):
                    if isinstance(d, bool) != isinstance(v, bool) or not isinstance(v, (int, float)):
                        raise self.error(f"{block}.{k} has the wrong type", (block, k))
                    if isinstance(d, int) and not isinstance(d, bool) and not isinstance(v, int):
                        raise self.error(f"{block}.{k} must be an integer", (block, k))
            out[block] = merged
        mpc = out["mpc"]
        for k in ("P", "Q", "R"):
            size = B.shape[1] if k == "R" else n
            mpc[k] = self._matrix(mpc[k], ("mpc", k), (size, size), allow_none=True)
        tr = out["transfer"]
        tr["O"] = self._matrix(tr["O"], ("transfer", "O"), (n, n), allow_none=True)
        tr["H_new"] = self._matrix(tr["H_new"], ("transfer", "H_new"), (n, n), allow_none=True)
        run = out["run"]
        run["starts"] = self._starts(run["starts"], n)
        if not isinstance(run["seeds"], list) or not all(isinstance(s, int) for s in run["seeds"]):
            raise self.error("run.seeds must be a list of integers", ("run", "seeds"))
        if run["T"] < 0:
            raise self.error("run.T must be non-negative", ("run", "T"))
        if tr["base"] not in ("dqn", "supervised"):
            raise self.error("transfer.base must be 'dqn' or 'supervised'", ("transfer", "base"))
        dr = out["dropout"]
        if dr["mode"] not in ("none", "fixed", "random"):
            raise self.error(f"unknown dropout mode {dr['mode']!r}", ("dropout", "mode"))
        return out

    def _starts(self, value, n):
        path = ("run", "starts")
        if isinstance(value, dict):
            if set(value) != {"unit_circle"} or not isinstance(value["unit_circle"], int):
                raise self.error("starts must be a list of points or {unit_circle: k}", path)
            if n != 2:
                raise self.error("unit_circle starts need a 2-D system", path)
            k = value["unit_circle"]
            ang = 2 * np.pi * np.arange(k) / k
            return np.stack([np.cos(ang), np.sin(ang)], axis=1)
        S = self._matrix(value, path)
        if S.shape[1] != n:
            raise self.error(f"each start needs {n} coordinates", path)
        return S

    def __getitem__(self, key):
        return self.data[key]

    def digest(self):
        """sha256 of the normalized configuration."""
        def norm(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: norm(x) for k, x in v.items()}
            return v
        blob = json.dumps(norm(self.data), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
