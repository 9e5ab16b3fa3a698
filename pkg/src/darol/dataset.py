"""Training-set constructions (implicit, explicit, regularized) and their
on-disk format."""

import dataclasses
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fileformat
from .bayes import BayesModel, conditional_mean
from .forward_models import EllipticModel, LinearForwardMap, NoiseSpec, PriorSpec, add_noise
from .lasso import LassoProblem, certify, kkt_residual, solve_lasso
from .rng import substream

__all__ = [
    "RegularizedDataset",
    "DatasetBuildError",
    "LassoRegularizer",
    "BayesCmRegularizer",
    "PushforwardSampler",
    "describe_forward",
    "build_implicit",
    "build_explicit",
    "build_regularized",
    "save",
    "load",
    "MAX_FAILURE_FRACTION",
    "lasso_kkt_recheck",
]

MAX_FAILURE_FRACTION = 0.01
KINDS = ("implicit", "explicit", "regularized")


class DatasetBuildError(RuntimeError):
    pass


@dataclass
class RegularizedDataset:
    m: np.ndarray
    a_hat: np.ndarray
    kind: str
    forward_spec: dict
    prior_spec: dict | None = None
    noise_spec: dict | None = None
    regularizer_spec: dict | None = None
    seed: int = 0
    diagnostics: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.m = np.atleast_2d(np.asarray(self.m, dtype=float))
        self.a_hat = np.atleast_2d(np.asarray(self.a_hat, dtype=float))
        if self.m.shape[0] != self.a_hat.shape[0]:
            raise ValueError("m and a_hat must hold the same number of pairs")
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "regularized" and not self.regularizer_spec:
            raise ValueError("a regularized dataset needs its regularizer spec")

    def __len__(self):
        return self.m.shape[0]

    @property
    def d_m(self):
        return self.m.shape[1]

    @property
    def d_a(self):
        return self.a_hat.shape[1]

    @property
    def pairs(self):
        return list(zip(self.m, self.a_hat))

    def subset(self, n):
        return dataclasses.replace(self, m=self.m[:n], a_hat=self.a_hat[:n],
                                   diagnostics=self.diagnostics[:n])

    def header(self):
        return {
            "kind": self.kind,
            "n": len(self),
            "d_m": self.d_m,
            "d_a": self.d_a,
            "forward_spec": self.forward_spec,
            "prior_spec": self.prior_spec,
            "noise_spec": self.noise_spec,
            "regularizer_spec": self.regularizer_spec,
            "seed": int(self.seed),
            "diagnostics": self.diagnostics,
            "failed": [int(i) for i in self.failed],
            "metadata": self.metadata,
        }


# -- spec descriptions ---------------------------------------------------------


def _array_digest(a):
    return hashlib.blake2b(np.ascontiguousarray(a, dtype="<f8").tobytes(), digest_size=8).hexdigest()


def describe_forward(forward):
    if isinstance(forward, LinearForwardMap):
        return {"type": "linear", "kind": forward.kind, "d_m": forward.d_m, "d_a": forward.d_a,
                "seed": forward.seed, "matrix_digest": _array_digest(forward.a)}
    if isinstance(forward, EllipticModel):
        return {"type": "elliptic", "grid_size": forward.grid_size, "n_cells": forward.n_cells,
                "sensor_indices": list(forward.sensor_indices), "a_min": forward.a_min,
                "source_digest": _array_digest(forward.source)}
    return {"type": type(forward).__name__}


def _describe(spec):
    return None if spec is None else dataclasses.asdict(spec)


# -- builders ------------------------------------------------------------------


def _measure(forward, prior, noise, seed, i):
    a = prior.draw(substream(seed, "prior", i))
    m = add_noise(np.atleast_1d(forward(a)), noise, seed, stream=i)
    return a, m


def build_implicit(forward, prior: PriorSpec, noise: NoiseSpec, n, seed) -> RegularizedDataset:
    """Pairs ``(f(a_i) + eps_i, a_i)`` with ``a_i`` drawn from the prior."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if getattr(forward, "d_a", prior.dimension) != prior.dimension:
        raise ValueError(f"forward map expects d_a={forward.d_a}, prior has {prior.dimension}")
    a, m = zip(*(_measure(forward, prior, noise, seed, i) for i in range(n)))
    return RegularizedDataset(
        m=np.array(m), a_hat=np.array(a), kind="implicit",
        forward_spec=describe_forward(forward), prior_spec=_describe(prior),
        noise_spec=_describe(noise), seed=seed,
    )


@dataclass(frozen=True)
class PushforwardSampler:
    """Measurements ``f(a) + eps`` with ``a`` from the prior."""

    forward: object
    prior: PriorSpec
    noise: NoiseSpec

    def __call__(self, seed, i):
        return _measure(self.forward, self.prior, self.noise, seed, i)[1]


def build_explicit(forward, measurement_sampler, n, seed) -> RegularizedDataset:
    """Pairs ``(m_i, f^{-1}(m_i))``; only for maps with an exact inverse.

    ``measurement_sampler(seed, i)`` returns the ``i``-th measurement.
    """
    if not getattr(forward, "invertible", False):
        raise ValueError("explicit data needs a forward map with an exact inverse")
    m = np.array([np.atleast_1d(measurement_sampler(seed, i)) for i in range(n)])
    a = np.array([forward.inverse(mi) for mi in m])
    extra = {}
    if isinstance(measurement_sampler, PushforwardSampler):
        extra = {"prior_spec": _describe(measurement_sampler.prior),
                 "noise_spec": _describe(measurement_sampler.noise)}
    return RegularizedDataset(m=m, a_hat=a, kind="explicit",
                              forward_spec=describe_forward(forward), seed=seed,
                              metadata={"measurement_measure": type(measurement_sampler).__name__},
                              **extra)


@dataclass(frozen=True)
class LassoRegularizer:
    lam: float
    tol: float = 1e-10
    max_iter: int = 200_000

    def spec(self):
        return {"type": "lasso", "lambda": self.lam, "tol": self.tol, "max_iter": self.max_iter}

    def check(self, forward):
        if not isinstance(forward, LinearForwardMap):
            raise ValueError("the LASSO regularizer needs a linear forward map")

    def __call__(self, forward, m, seed, i):
        p = LassoProblem(forward.a, m, self.lam)
        sol = solve_lasso(p, tol=self.tol, max_iter=self.max_iter)
        if not sol.converged:
            return None, {"error": f"not converged after {sol.iterations} iterations",
                          "kkt": sol.kkt}
        diag = certify(p, sol).as_dict()
        diag["kkt"] = sol.kkt
        return sol.x_hat, diag


@dataclass(frozen=True)
class BayesCmRegularizer:
    model: BayesModel
    chain_length: int = 20_000
    proposal_std: float | None = None

    def spec(self):
        return {"type": "bayes_cm", "chain_length": self.chain_length,
                "proposal_std": self.proposal_std, "R": self.model.R,
                "prior": _describe(self.model.prior),
                "potential": type(self.model.potential).__name__,
                "m_lower": self.model.m_lower.tolist(), "m_upper": self.model.m_upper.tolist()}

    def check(self, forward):
        pass

    def __call__(self, forward, m, seed, i):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = conditional_mean(self.model, m, self.chain_length, seed=seed,
                                   proposal_std=self.proposal_std, stream=i)
        return res.a_hat, res.as_dict()


def _regularize_one(args):
    forward, prior, noise, reg, seed, i = args
    _, m = _measure(forward, prior, noise, seed, i)
    try:
        a_hat, diag = reg(forward, m, seed, i)
    except Exception as exc:  # recorded per pair; the build decides whether to fail
        a_hat, diag = None, {"error": f"{type(exc).__name__}: {exc}"}
    return m, a_hat, diag


def build_regularized(forward, prior: PriorSpec, noise: NoiseSpec, regularizer, n, seed,
                      jobs=1) -> RegularizedDataset:
    """Pairs ``(m_i, f_reg^{-1}(m_i))`` with ``m_i = f(a_i) + eps_i``.

    Pair ``i`` uses random streams keyed by ``(seed, i)`` only, so ``jobs``
    does not change the result.  Failed pairs are dropped and listed in
    ``failed``; more than 1% failures aborts the build.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    regularizer.check(forward)
    tasks = [(forward, prior, noise, regularizer, seed, i) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_regularize_one, tasks, chunksize=max(1, n // (4 * jobs))))
    else:
        results = [_regularize_one(t) for t in tasks]
    ms, ahs, diags, failed = [], [], [], []
    for i, (m, a_hat, diag) in enumerate(results):
        if a_hat is None:
            failed.append(i)
            continue
        ms.append(m)
        ahs.append(a_hat)
        diags.append(diag)
    if len(failed) > MAX_FAILURE_FRACTION * n:
        raise DatasetBuildError(f"{len(failed)} of {n} pairs failed to regularize "
                                f"(first: {results[failed[0]][2].get('error')})")
    if not ms:
        raise DatasetBuildError("no pair could be regularized")
    return RegularizedDataset(
        m=np.array(ms), a_hat=np.array(ahs), kind="regularized",
        forward_spec=describe_forward(forward), prior_spec=_describe(prior),
        noise_spec=_describe(noise), regularizer_spec=regularizer.spec(), seed=seed,
        diagnostics=diags, failed=failed,
        metadata={"measurement_measure": "prior pushforward plus noise"},
    )


def lasso_kkt_recheck(ds: RegularizedDataset, forward: LinearForwardMap):
    """Largest KKT residual of the stored solutions against their stored data."""
    lam = ds.regularizer_spec["lambda"]
    return max(kkt_residual(forward.a, m, lam, a) for m, a in zip(ds.m, ds.a_hat))


# -- persistence ---------------------------------------------------------------


def save(ds: RegularizedDataset, path):
    rows = np.hstack([ds.m, ds.a_hat])
    return fileformat.write(path, "dataset", ds.header(), rows)


def _from_parts(header, rows):
    d_m = header["d_m"]
    arr = np.array(rows).reshape(header["n"], d_m + header["d_a"])
    return RegularizedDataset(
        m=arr[:, :d_m], a_hat=arr[:, d_m:], kind=header["kind"],
        forward_spec=header["forward_spec"], prior_spec=header["prior_spec"],
        noise_spec=header["noise_spec"], regularizer_spec=header["regularizer_spec"],
        seed=header["seed"], diagnostics=header["diagnostics"], failed=header["failed"],
        metadata=header["metadata"],
    )


def load(path) -> RegularizedDataset:
    _, header, rows = fileformat.read(path, "dataset")
    return _from_parts(header, rows)
