"""Bayesian regularized inverse: the posterior conditional mean ``m -> E[a | m]``.

The posterior has density ``exp(-Phi(a; m)) / Z(m)`` against the prior.  The
conditional mean is estimated by random-walk Metropolis (first half of the
chain discarded, second half averaged) or, in dimension <= 3, by tensor-grid
quadrature of ``Y(m) / Z(m)``.
"""

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .forward_models import PriorSpec
from .rng import substream

__all__ = [
    "ZeroPotential",
    "GaussianPotential",
    "QuadraticPotential",
    "BayesModel",
    "CmResult",
    "BayesLipschitzBound",
    "conditional_mean",
    "tune_proposal",
    "quadrature_cm",
    "prior_expectation",
    "lipschitz_bound_bayes",
    "empirical_lipschitz_map",
]


# -- potentials --------------------------------------------------------------
# Potentials are plain classes (not closures) so models pickle across worker
# processes.  ``__call__`` accepts a single parameter vector or an (n, d_a)
# batch and returns a float or an (n,) array.


class ZeroPotential:
    """``Phi = 0``: the posterior equals the prior."""

    def __call__(self, a, m):
        a = np.asarray(a, dtype=float)
        return 0.0 if a.ndim == 1 else np.zeros(a.shape[0])

    def m1(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def m2(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def sup(self, prior, m_radius):
        return 0.0


class GaussianPotential:
    """``Phi(a; m) = ||f(a) - m||^2 / (2 noise_std^2)``.

    ``forward_gain`` bounds the forward map: ``||f(a)|| <= forward_gain * ||a||``
    for linear maps (``forward_gain = sigma_max(A)``), or ``forward_bound``
    bounds ``||f(a)||`` uniformly on the prior support.  The resulting bounds
    are ``M1 = 0``, ``M2(r) = (F(r) + r_M) / noise_std^2`` and
    ``R = (F_sup + r_M)^2 / (2 noise_std^2)``.
    """

    def __init__(self, forward, noise_std, forward_gain=None, forward_bound=None):
        if noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if (forward_gain is None) == (forward_bound is None):
            raise ValueError("give exactly one of forward_gain, forward_bound")
        self.forward = forward
        self.noise_std = float(noise_std)
        self.forward_gain = forward_gain
        self.forward_bound = forward_bound
        self.m_radius = None  # set by BayesModel

    def __call__(self, a, m):
        a = np.asarray(a, dtype=float)
        if a.ndim == 1:
            r = np.asarray(self.forward(a)) - m
            return float(r @ r) / (2.0 * self.noise_std**2)
        fa = self._forward_batch(a)
        r = fa - np.asarray(m, dtype=float)
        return np.sum(r * r, axis=1) / (2.0 * self.noise_std**2)

    def _forward_batch(self, a):
        try:
            out = np.asarray(self.forward(a))
            if out.ndim == 2 and out.shape[0] == a.shape[0]:
                return out
        except ValueError:
            pass
        return np.array([self.forward(x) for x in a])

    def _fbound(self, r):
        if self.forward_gain is not None:
            return self.forward_gain * np.asarray(r, dtype=float)
        return np.full_like(np.asarray(r, dtype=float), self.forward_bound)

    def m1(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def m2(self, r):
        return (self._fbound(r) + self.m_radius) / self.noise_std**2

    def sup(self, prior, m_radius):
        f_sup = float(self._fbound(prior.support_radius))
        return (f_sup + m_radius) ** 2 / (2.0 * self.noise_std**2)


class QuadraticPotential(GaussianPotential):
    """``Phi(a; m) = ||a - m||^2 / (2 s^2)`` (identity forward map)."""

    def __init__(self, s=1.0):
        super().__init__(_identity, s, forward_gain=1.0)


def _identity(a):
    return np.asarray(a, dtype=float)


@dataclass
class BayesModel:
    """Prior, potential and the bound functions entering the Lipschitz estimate.

    The measurement space is the box ``[m_lower, m_upper]``.  ``R`` defaults
    to the potential's own upper bound on ``sup Phi`` when not given.
    """

    prior: PriorSpec
    potential: object
    m_lower: np.ndarray
    m_upper: np.ndarray
    R: float | None = None

    def __post_init__(self):
        self.m_lower = np.atleast_1d(np.asarray(self.m_lower, dtype=float))
        self.m_upper = np.atleast_1d(np.asarray(self.m_upper, dtype=float))
        if self.m_lower.shape != self.m_upper.shape or np.any(self.m_lower > self.m_upper):
            raise ValueError("measurement box is malformed")
        if not self.prior.has_density:
            raise ValueError("the Bayesian track needs a prior with a density")
        if hasattr(self.potential, "m_radius"):
            self.potential.m_radius = self.m_radius
        if self.R is None:
            self.R = float(self.potential.sup(self.prior, self.m_radius))

    @property
    def d_a(self):
        return self.prior.dimension

    @property
    def d_m(self):
        return self.m_lower.size

    @property
    def m_radius(self):
        return float(np.linalg.norm(np.maximum(np.abs(self.m_lower), np.abs(self.m_upper))))

    @property
    def a_radius(self):
        return self.prior.support_radius

    def phi(self, a, m):
        return self.potential(a, np.asarray(m, dtype=float))

    def M1(self, r):
        return self.potential.m1(r)

    def M2(self, r):
        return self.potential.m2(r)

    def validate_bounds(self, n_samples=2000, seed=0, rtol=1e-12):
        """Largest sampled violation of the three bound assumptions.

        Returns a dict of violations (``<= 0`` means no violation was found).
        """
        rng = substream(seed, "bayes_validate")
        a = np.array([self.prior.draw(rng) for _ in range(n_samples)])
        m = rng.uniform(self.m_lower, self.m_upper, size=(n_samples, self.d_m))
        m2 = rng.uniform(self.m_lower, self.m_upper, size=(n_samples, self.d_m))
        r = np.linalg.norm(a, axis=1)
        phi1 = np.array([self.phi(a[i], m[i]) for i in range(n_samples)])
        phi2 = np.array([self.phi(a[i], m2[i]) for i in range(n_samples)])
        dm = np.linalg.norm(m - m2, axis=1)
        scale = 1.0 + np.abs(phi1) + np.abs(phi2)
        return {
            "M1": float(np.max(-phi1 - self.M1(r) - rtol * scale)),
            "M2": float(np.max(np.abs(phi1 - phi2) - self.M2(r) * dm - rtol * scale)),
            "R": float(np.max(np.maximum(phi1, phi2) - self.R - rtol * scale)),
        }


# -- MCMC --------------------------------------------------------------------


@dataclass
class CmResult:
    a_hat: np.ndarray
    chain_length: int
    burn_in: int
    acceptance_rate: float
    mc_std_error: np.ndarray
    proposal_std: float
    warnings: list = field(default_factory=list)
    chain: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self):
        return {
            "acceptance_rate": float(self.acceptance_rate),
            "chain_length": int(self.chain_length),
            "burn_in": int(self.burn_in),
            "proposal_std": float(self.proposal_std),
            "mc_std_error": [float(v) for v in self.mc_std_error],
        }


def _log_target(model, a, m):
    lp = model.prior.log_density(a)
    if lp == -np.inf:
        return -np.inf
    return lp - float(model.phi(a, m))


def _rwm(model, m, n_steps, std, rng, start):
    d = model.d_a
    steps = rng.standard_normal((n_steps, d)) * std
    logu = np.log(rng.uniform(size=n_steps))
    chain = np.empty((n_steps, d))
    x = np.array(start, dtype=float)
    lx = _log_target(model, x, m)
    accepted = 0
    for i in range(n_steps):
        y = x + steps[i]
        # out-of-support proposals have log prior -inf and are rejected
        ly = _log_target(model, y, m)
        if logu[i] < ly - lx:
            x, lx = y, ly
            accepted += 1
        chain[i] = x
    return chain, accepted


def tune_proposal(model, m, seed, stream=0, target=0.3, rounds=10, steps=400):
    """Pilot runs adjusting an isotropic proposal std towards ``target`` acceptance."""
    rng = substream(seed, "mcmc_pilot", stream)
    std = 0.5 * float(np.min(model.prior.upper - model.prior.lower))
    x = model.prior.mean
    for _ in range(rounds):
        chain, acc = _rwm(model, m, steps, std, rng, x)
        x = chain[-1]
        rate = acc / steps
        std *= float(np.clip(np.exp(2.0 * (rate - target)) if rate > 0 else 0.25, 0.25, 4.0))
    return std


def _batch_means_se(samples, n_batches=20):
    bs = samples.shape[0] // n_batches
    if bs < 1:
        raise ValueError("too few post-burn-in samples for batch means")
    means = samples[: bs * n_batches].reshape(n_batches, bs, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def conditional_mean(model: BayesModel, m, chain_length=20_000, seed=0, proposal_std=None,
                     stream=0, keep_chain=False, min_length=1000) -> CmResult:
    """Random-walk Metropolis estimate of ``E[a | m]``.

    The first ``chain_length // 2`` states are discarded and the rest
    averaged.  When ``proposal_std`` is ``None`` it is tuned by a pilot run on
    its own random stream; the pilot never enters the average.
    """
    if chain_length < min_length:
        raise ValueError(f"chain_length must be >= {min_length}")
    m = np.atleast_1d(np.asarray(m, dtype=float))
    if proposal_std is None:
        proposal_std = tune_proposal(model, m, seed, stream)
    if not proposal_std > 0:
        raise ValueError("proposal_std must be positive")
    rng = substream(seed, "mcmc", stream)
    chain, accepted = _rwm(model, m, chain_length, proposal_std, rng, model.prior.mean)
    if accepted == 0:
        raise RuntimeError("every Metropolis proposal was rejected")
    burn_in = chain_length // 2
    kept = chain[burn_in:]
    rate = accepted / chain_length
    notes = []
    if not 0.05 <= rate <= 0.7:
        notes.append(f"acceptance rate {rate:.3f} outside [0.05, 0.7]")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    return CmResult(
        a_hat=kept.mean(axis=0),
        chain_length=chain_length,
        burn_in=burn_in,
        acceptance_rate=rate,
        mc_std_error=_batch_means_se(kept),
        proposal_std=float(proposal_std),
        warnings=notes,
        chain=chain if keep_chain else None,
    )


# -- quadrature ----------------------------------------------------------------


def _trapezoid_grid(lower, upper, n_points):
    axes, weights = [], []
    for lo, hi in zip(lower, upper):
        x = np.linspace(lo, hi, n_points)
        w = np.full(n_points, (hi - lo) / (n_points - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        axes.append(x)
        weights.append(w)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    wmesh = np.meshgrid(*weights, indexing="ij")
    w = np.prod(np.stack([g.ravel() for g in wmesh], axis=1), axis=1)
    return pts, w


def _default_points(d):
    return {1: 100_001, 2: 1001, 3: 161}[d]


def quadrature_cm(model: BayesModel, m, n_points=None):
    """``Y(m) / Z(m)`` by the tensor trapezoid rule over the prior box (``d_a <= 3``)."""
    d = model.d_a
    if d > 3:
        raise ValueError(f"tensor quadrature needs d_a <= 3, got {d}")
    n_points = n_points or _default_points(d)
    pts, w = _trapezoid_grid(model.prior.lower, model.prior.upper, n_points)
    w = w * model.prior.density_on_grid(pts)
    phi = np.asarray(model.phi(pts, np.atleast_1d(np.asarray(m, dtype=float))), dtype=float)
    like = np.exp(-(phi - phi.min()))
    wz = w * like
    return (wz @ pts) / wz.sum()


def prior_expectation(prior: PriorSpec, fn, n_points=None, n_mc=200_000, seed=0):
    """``E_prior[fn(a)]`` for ``fn`` acting on an ``(n, d)`` batch.

    Tensor trapezoid quadrature for ``d <= 3``; seeded Monte Carlo otherwise.
    """
    d = prior.dimension
    if d <= 3:
        pts, w = _trapezoid_grid(prior.lower, prior.upper, n_points or _default_points(d))
        w = w * prior.density_on_grid(pts)
        return float((w @ fn(pts)) / w.sum()), "quadrature"
    rng = substream(seed, "prior_expectation")
    pts = np.array([prior.draw(rng) for _ in range(n_mc)])
    return float(np.mean(fn(pts))), "monte_carlo"


@dataclass
class BayesLipschitzBound:
    """Lipschitz bound of the conditional-mean map assembled from
    ``Z >= e^{-R}``, ``Z <= C1``, ``||Y|| <= C1 sup||a||``,
    ``|Z - Z'| <= C2 |m - m'|`` and ``||Y - Y'|| <= C2 sup||a|| |m - m'|``.
    """

    proof_bound: float  # 2 e^{2R} sup||a|| C1 C2
    stated_bound: float  # 2 e^{-2R} sup||a|| C1 C2
    C1: float
    C2: float
    R: float
    sup_a: float
    method: str


def lipschitz_bound_bayes(model: BayesModel, n_points=None, validate=True, seed=0) -> BayesLipschitzBound:
    if validate:
        viol = model.validate_bounds(seed=seed)
        bad = {k: v for k, v in viol.items() if v > 0}
        if bad:
            raise ValueError(f"bound functions violated on samples: {bad}")
    c1, method = prior_expectation(
        model.prior, lambda a: np.exp(model.M1(np.linalg.norm(a, axis=1))), n_points, seed=seed)
    c2, _ = prior_expectation(
        model.prior,
        lambda a: np.exp(model.M1(np.linalg.norm(a, axis=1))) * model.M2(np.linalg.norm(a, axis=1)),
        n_points, seed=seed)
    sup_a = model.a_radius
    core = 2.0 * sup_a * c1 * c2
    return BayesLipschitzBound(
        proof_bound=core * np.exp(2.0 * model.R),
        stated_bound=core * np.exp(-2.0 * model.R),
        C1=c1, C2=c2, R=float(model.R), sup_a=float(sup_a), method=method,
    )


# -- empirical Lipschitz -------------------------------------------------------


def empirical_lipschitz_map(fn, inputs, pair_count=None, seed=0, min_dist=1e-9):
    """Max of ``||fn(x) - fn(y)|| / ||x - y||`` over pairs of ``inputs``.

    All pairs when ``pair_count`` is ``None``, otherwise ``pair_count`` random
    pairs.  Pairs closer than ``min_dist`` are skipped.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two input samples")
    y = np.array([np.atleast_1d(fn(xi)) for xi in x], dtype=float)
    if pair_count is None:
        pairs = np.array(list(combinations(range(n), 2)))
    else:
        rng = substream(seed, "lipschitz_pairs")
        i = rng.integers(0, n, size=pair_count)
        j = rng.integers(0, n, size=pair_count)
        pairs = np.stack([i, j], axis=1)
    dx = np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1)
    keep = dx >= min_dist
    if not np.any(keep):
        raise ValueError("degenerate sample set: no pair is separated by min_dist")
    dy = np.linalg.norm(y[pairs[keep, 0]] - y[pairs[keep, 1]], axis=1)
    return float(np.max(dy / dx[keep]))
