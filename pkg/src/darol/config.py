"""Pipeline configuration: YAML document, schema validation with line-anchored
errors, and construction of the model objects it describes."""

import copy
import dataclasses
from dataclasses import dataclass

import numpy as np
import yaml

from .bayes import BayesModel, GaussianPotential, QuadraticPotential, ZeroPotential
from .dataset import BayesCmRegularizer, LassoRegularizer
from .fileformat import config_hash
from .forward_models import (
    LINEAR_KINDS,
    PRIOR_KINDS,
    EllipticModel,
    NoiseSpec,
    PriorSpec,
    make_linear_map,
)
from .nn import TrainConfig

__all__ = ["ConfigError", "PipelineConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Validation failure, with the offending key path and source line."""

    def __init__(self, message, path=(), line=None, source=None):
        self.path = tuple(path)
        self.line = line
        self.source = source
        prefix = ""
        if source is not None:
            prefix = source if line is None else f"{source}:{line}"
            prefix += ": " + (".".join(str(p) for p in self.path) or "<root>") + ": "
        super().__init__(prefix + message)


# -- YAML with source positions --------------------------------------------------


def _line_index(node, prefix=(), out=None):
    """Map each key path to the 1-based line where its value starts."""
    out = {} if out is None else out
    out.setdefault(prefix, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            _line_index(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, prefix + (i,), out)
    return out


class _Checker:
    def __init__(self, lines, source):
        self.lines = lines
        self.source = source

    def line(self, path):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def fail(self, path, message):
        raise ConfigError(message, path, self.line(path), self.source)

    def section(self, doc, key, required=True):
        if key not in doc:
            if required:
                self.fail((key,), "required section is missing")
            return None
        v = doc[key]
        if not isinstance(v, dict):
            self.fail((key,), "must be a mapping")
        return v

    def unknown(self, sec, name, allowed):
        for k in sec:
            if k not in allowed:
                self.fail((name, k), f"unknown key (allowed: {', '.join(sorted(allowed))})")

    def get(self, sec, name, key, kind, default=None, required=False, check=None, what=""):
        path = (name, key) if name else (key,)
        if key not in sec or sec[key] is None:
            if required:
                self.fail(path, "required key is missing")
            return default
        v = sec[key]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if kind is int and isinstance(v, bool):
            self.fail(path, "expected an integer")
        if kind is not None and not isinstance(v, kind):
            self.fail(path, f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
        if check is not None and not check(v):
            self.fail(path, f"invalid value {v!r}{': ' + what if what else ''}")
        return v


# -- schema ------------------------------------------------------------------------

_TOP = {"experiment", "seed", "output_dir", "forward", "prior", "noise", "regularizer",
        "data", "network", "training", "bounds"}
_FORWARD = {"kind", "d_m", "d_a", "seed", "diag", "kernel", "mode", "matrix",
            "grid_size", "source", "sensors", "n_cells"}
_PRIOR = {"kind", "radius", "center", "scale", "k", "amp_min", "amp_max", "signed"}
_NOISE = {"kind", "std"}
_REG = {"type", "lambda", "tol", "max_iter", "chain_length", "proposal_std",
        "noise_std", "m_lower", "m_upper", "R", "potential"}
_DATA = {"n_train", "n_test", "sweep"}
_NET = {"width", "depth", "clamp", "frobenius_cap"}
_TRAIN = {"optimizer", "step_size", "batch_size", "epochs"}
_BOUNDS = {"L_f", "p_tilde", "L_tilde", "c", "c_tilde", "lipschitz_pairs"}

_pos = lambda v: v > 0  # noqa: E731
_num = (int, float)


@dataclass
class PipelineConfig:
    experiment: str
    seed: int
    output_dir: str | None
    forward: dict
    prior: dict
    noise: dict
    regularizer: dict
    data: dict
    network: dict
    training: dict
    bounds: dict
    seed_override: int | None = None

    def as_dict(self):
        return dataclasses.asdict(self)

    @property
    def hash(self):
        d = self.as_dict()
        d.pop("output_dir")
        return config_hash(d)

    # builders

    def build_forward(self):
        f = self.forward
        if f["kind"] == "elliptic":
            src = np.asarray(f["source"], dtype=float)
            return EllipticModel.with_source(f["grid_size"], lambda x: src, f["sensors"], f["n_cells"])
        params = {k: f[k] for k in ("diag", "kernel", "mode", "matrix") if k in f}
        if "matrix" in params:
            params["matrix"] = np.asarray(params["matrix"], dtype=float)
        return make_linear_map(f["kind"], f["d_m"], f["d_a"], params, seed=f.get("seed", 0))

    def build_prior(self, d_a):
        return PriorSpec(dimension=d_a, **self.prior)

    def build_noise(self):
        return NoiseSpec(**self.noise)

    def build_regularizer(self, forward, prior):
        r = self.regularizer
        if r["type"] == "lasso":
            return LassoRegularizer(r["lambda"], r.get("tol", 1e-10), r.get("max_iter", 200_000))
        if r["type"] == "bayes_cm":
            pot = r.get("potential", "gaussian")
            if pot == "zero":
                potential = ZeroPotential()
            elif pot == "quadratic":
                potential = QuadraticPotential(r["noise_std"])
            else:
                gain = float(np.linalg.norm(forward.a, 2)) if hasattr(forward, "a") else None
                kw = {"forward_gain": gain} if gain is not None else {"forward_bound": _elliptic_bound(forward, prior)}
                potential = GaussianPotential(forward, r["noise_std"], **kw)
            d_m = forward.d_m
            lo = np.broadcast_to(np.asarray(r["m_lower"], dtype=float), (d_m,))
            hi = np.broadcast_to(np.asarray(r["m_upper"], dtype=float), (d_m,))
            model = BayesModel(prior, potential, lo.copy(), hi.copy(), r.get("R"))
            return BayesCmRegularizer(model, r.get("chain_length", 20_000), r.get("proposal_std"))
        return None

    def train_config(self, seed):
        t = self.training
        return TrainConfig(optimizer=t["optimizer"], step_size=t["step_size"],
                           batch_size=t["batch_size"], epochs=t["epochs"], seed=seed,
                           frobenius_cap=self.network.get("frobenius_cap"))


def _elliptic_bound(forward, prior):
    # |a u'| <= 2 ||g||_1 and u(0) = 0 give |u| <= 2 ||g||_1 / a_lo on (0, 1)
    a_lo = max(forward.a_min, float(np.min(prior.lower)))
    h = 1.0 / (forward.grid_size + 1)
    g1 = h * float(np.sum(np.abs(forward.source)))
    return 1.01 * np.sqrt(forward.d_m) * 2.0 * g1 / a_lo


def parse_config(text, source="<config>") -> PipelineConfig:
    try:
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"not valid YAML: {getattr(exc, 'problem', exc)}", (),
                          None if mark is None else mark.line + 1, source) from None
    if node is None or not isinstance(doc, dict):
        raise ConfigError("the document must be a mapping", (), 1, source)
    c = _Checker(_line_index(node), source)
    for k in doc:
        if k not in _TOP:
            c.fail((k,), "unknown top-level key")

    name = c.get(doc, None, "experiment", str, required=True)
    seed = c.get(doc, None, "seed", int, required=True, check=lambda v: v >= 0,
                 what="the master seed must be a non-negative integer")
    out_dir = c.get(doc, None, "output_dir", str)

    f = c.section(doc, "forward")
    c.unknown(f, "forward", _FORWARD)
    fkind = c.get(f, "forward", "kind", str, required=True,
                  check=lambda v: v in LINEAR_KINDS + ("elliptic",),
                  what=f"one of {', '.join(LINEAR_KINDS + ('elliptic',))}")
    fwd = {"kind": fkind}
    if fkind == "elliptic":
        fwd["grid_size"] = c.get(f, "forward", "grid_size", int, required=True, check=lambda v: v >= 3)
        fwd["n_cells"] = c.get(f, "forward", "n_cells", int, required=True, check=_pos)
        src = c.get(f, "forward", "source", (list, float, int), default=1.0)
        fwd["source"] = src
        sensors = c.get(f, "forward", "sensors", list, required=True)
        for i, s in enumerate(sensors):
            if not isinstance(s, _num) or not 0 < s < 1:
                c.fail(("forward", "sensors", i), "sensor positions must lie in (0, 1)")
        fwd["sensors"] = [float(s) for s in sensors]
        if not isinstance(src, list):
            fwd["source"] = [float(src)] * fwd["grid_size"]
        elif len(src) != fwd["grid_size"]:
            c.fail(("forward", "source"), f"needs grid_size = {fwd['grid_size']} interior values")
    else:
        fwd["d_m"] = c.get(f, "forward", "d_m", int, required=True, check=_pos)
        fwd["d_a"] = c.get(f, "forward", "d_a", int, required=True, check=_pos)
        fwd["seed"] = c.get(f, "forward", "seed", int, default=0)
        if fkind == "diagonal":
            diag = c.get(f, "forward", "diag", list, required=True)
            fwd["diag"] = [float(v) for v in diag]
        elif fkind == "convolution_toeplitz":
            fwd["kernel"] = [float(v) for v in c.get(f, "forward", "kernel", list, required=True)]
            fwd["mode"] = c.get(f, "forward", "mode", str, default="valid",
                                check=lambda v: v in ("valid", "same"))
        elif fkind == "custom":
            fwd["matrix"] = c.get(f, "forward", "matrix", list, required=True)

    p = c.section(doc, "prior")
    c.unknown(p, "prior", _PRIOR)
    prior = {"kind": c.get(p, "prior", "kind", str, required=True, check=lambda v: v in PRIOR_KINDS,
                           what=f"one of {', '.join(PRIOR_KINDS)}")}
    for key in ("radius", "center", "scale", "amp_min", "amp_max"):
        if key in p:
            prior[key] = c.get(p, "prior", key, float)
    if "k" in p:
        prior["k"] = c.get(p, "prior", "k", int, check=_pos)
    if "signed" in p:
        prior["signed"] = c.get(p, "prior", "signed", bool)

    n = c.section(doc, "noise", required=False) or {}
    c.unknown(n, "noise", _NOISE)
    noise = {"kind": c.get(n, "noise", "kind", str, default="none", check=lambda v: v in ("none", "gaussian")),
             "std": c.get(n, "noise", "std", float, default=0.0, check=lambda v: v >= 0)}

    r = c.section(doc, "regularizer")
    c.unknown(r, "regularizer", _REG)
    rtype = c.get(r, "regularizer", "type", str, required=True,
                  check=lambda v: v in ("lasso", "bayes_cm", "implicit", "explicit"),
                  what="one of lasso, bayes_cm, implicit, explicit")
    reg = {"type": rtype}
    if rtype == "lasso":
        if fkind == "elliptic":
            c.fail(("regularizer", "type"), "the LASSO regularizer needs a linear forward map")
        reg["lambda"] = c.get(r, "regularizer", "lambda", float, required=True, check=_pos)
        reg["tol"] = c.get(r, "regularizer", "tol", float, default=1e-10, check=_pos)
        reg["max_iter"] = c.get(r, "regularizer", "max_iter", int, default=200_000, check=_pos)
    elif rtype == "bayes_cm":
        reg["potential"] = c.get(r, "regularizer", "potential", str, default="gaussian",
                                 check=lambda v: v in ("gaussian", "quadratic", "zero"))
        if reg["potential"] != "zero":
            reg["noise_std"] = c.get(r, "regularizer", "noise_std", float, required=True, check=_pos)
        reg["m_lower"] = c.get(r, "regularizer", "m_lower", (float, int, list), required=True)
        reg["m_upper"] = c.get(r, "regularizer", "m_upper", (float, int, list), required=True)
        reg["chain_length"] = c.get(r, "regularizer", "chain_length", int, default=20_000,
                                    check=lambda v: v >= 1000, what="at least 1000")
        reg["proposal_std"] = c.get(r, "regularizer", "proposal_std", float, check=_pos)
        reg["R"] = c.get(r, "regularizer", "R", float, check=_pos)
        if prior["kind"] == "sparse_spike":
            c.fail(("prior", "kind"), "the Bayesian track needs a prior with a density")
    elif rtype == "explicit" and fkind == "elliptic":
        c.fail(("regularizer", "type"), "explicit data needs an invertible linear forward map")

    d = c.section(doc, "data")
    c.unknown(d, "data", _DATA)
    data = {"n_train": c.get(d, "data", "n_train", int, required=True, check=_pos),
            "n_test": c.get(d, "data", "n_test", int, required=True, check=_pos)}
    sweep = c.get(d, "data", "sweep", list, default=[])
    for i, v in enumerate(sweep):
        if not isinstance(v, int) or isinstance(v, bool) or not 1 <= v <= data["n_train"]:
            c.fail(("data", "sweep", i), f"sweep sizes must be integers in [1, n_train={data['n_train']}]")
    data["sweep"] = list(sweep)

    nw = c.section(doc, "network")
    c.unknown(nw, "network", _NET)
    net = {"width": c.get(nw, "network", "width", int, required=True, check=_pos),
           "depth": c.get(nw, "network", "depth", int, required=True, check=_pos),
           "clamp": c.get(nw, "network", "clamp", float, required=True, check=_pos),
           "frobenius_cap": c.get(nw, "network", "frobenius_cap", float, check=_pos)}

    t = c.section(doc, "training")
    c.unknown(t, "training", _TRAIN)
    tr = {"optimizer": c.get(t, "training", "optimizer", str, default="adam",
                             check=lambda v: v in ("adam", "sgd")),
          "step_size": c.get(t, "training", "step_size", float, default=1e-3, check=_pos),
          "batch_size": c.get(t, "training", "batch_size", int, default=32, check=_pos),
          "epochs": c.get(t, "training", "epochs", int, default=100, check=lambda v: v >= 0)}

    b = c.section(doc, "bounds", required=False) or {}
    c.unknown(b, "bounds", _BOUNDS)
    bounds = {"L_f": c.get(b, "bounds", "L_f", float, check=_pos),
              "p_tilde": c.get(b, "bounds", "p_tilde", int, default=1, check=_pos),
              "L_tilde": c.get(b, "bounds", "L_tilde", int, default=1, check=_pos),
              "c": c.get(b, "bounds", "c", float, default=1.0, check=_pos),
              "c_tilde": c.get(b, "bounds", "c_tilde", float, default=1.0, check=_pos),
              "lipschitz_pairs": c.get(b, "bounds", "lipschitz_pairs", int, default=20_000, check=_pos)}

    cfg = PipelineConfig(name, seed, out_dir, fwd, prior, noise, reg, data, net, tr, bounds)
    # constructor-level checks, reported against the section they came from
    for section, build in (("forward", cfg.build_forward), ("noise", cfg.build_noise)):
        try:
            obj = build()
        except (ValueError, TypeError) as exc:
            c.fail((section,), str(exc))
        if section == "forward":
            fmap = obj
    try:
        pspec = cfg.build_prior(fmap.d_a)
    except (ValueError, TypeError) as exc:
        c.fail(("prior",), str(exc))
    if rtype == "explicit" and not fmap.invertible:
        c.fail(("regularizer", "type"), "explicit data needs a forward map with an exact inverse")
    try:
        cfg.build_regularizer(fmap, pspec)
    except (ValueError, TypeError) as exc:
        c.fail(("regularizer",), str(exc))
    return cfg


def load_config(path, seed_override=None) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cfg = parse_config(text, source=str(path))
    if seed_override is not None:
        cfg = copy.deepcopy(cfg)
        cfg.seed_override = int(seed_override)
        cfg.seed = int(seed_override)
    return cfg
