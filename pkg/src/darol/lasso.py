"""LASSO regularized inverse ``b -> argmin 1/2 ||Ax - b||^2 + lam ||x||_1``
with non-degeneracy certification and Lipschitz constants."""

from dataclasses import dataclass, field

import numpy as np

from .numerics import svd
from .rng import substream

__all__ = [
    "SUPPORT_TOL",
    "RANK_TOL",
    "LassoProblem",
    "LassoSolution",
    "LipschitzCertificate",
    "SupportChanged",
    "soft_threshold",
    "lasso_objective",
    "kkt_residual",
    "solve_lasso",
    "certify",
    "global_lipschitz_constant",
    "empirical_local_lipschitz",
]

SUPPORT_TOL = 1e-8
RANK_TOL = 1e-10


class SupportChanged(ValueError):
    """A perturbation left the locally affine region of ``b -> x_hat``."""


@dataclass(frozen=True)
class LassoProblem:
    a: np.ndarray = field(repr=False)
    b: np.ndarray
    lam: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim != 2 or b.shape != (a.shape[0],):
            raise ValueError(f"inconsistent shapes A{a.shape}, b{b.shape}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def with_b(self, b):
        return LassoProblem(self.a, b, self.lam)


@dataclass
class LassoSolution:
    x_hat: np.ndarray
    support: np.ndarray
    residual: np.ndarray  # A x_hat - b
    objective: float
    iterations: int
    converged: bool
    kkt: float
    history: list = field(default_factory=list, repr=False)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_objective(a, b, lam, x):
    r = a @ x - b
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(x)))


def support_of(x, support_tol=SUPPORT_TOL):
    return np.flatnonzero(np.abs(x) > support_tol)


def kkt_residual(a, b, lam, x, support_tol=SUPPORT_TOL):
    """Largest violation of the LASSO optimality conditions at ``x``.

    On the support, ``A_i^T (b - Ax) = lam * sign(x_i)``; off it,
    ``|A_i^T (b - Ax)| <= lam``.
    """
    corr = a.T @ (b - a @ x)
    on = np.abs(x) > support_tol
    viol_on = np.abs(corr[on] - lam * np.sign(x[on]))
    viol_off = np.maximum(np.abs(corr[~on]) - lam, 0.0)
    return float(max(viol_on.max(initial=0.0), viol_off.max(initial=0.0)))


def _polish(a, b, lam, x, support_tol):
    """Exact solve on the current support and sign pattern, or ``None``."""
    idx = support_of(x, support_tol)
    if idx.size == 0:
        return np.zeros_like(x)
    a_i = a[:, idx]
    if idx.size > a.shape[0]:
        return None
    s = np.sign(x[idx])
    gram = a_i.T @ a_i
    try:
        x_i = np.linalg.solve(gram, a_i.T @ b - lam * s)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.sign(x_i) != s):
        return None
    out = np.zeros_like(x)
    out[idx] = x_i
    return out


def solve_lasso(p: LassoProblem, tol=1e-10, max_iter=200_000, x0=None,
                support_tol=SUPPORT_TOL, check_every=10, polish=True) -> LassoSolution:
    """Monotone FISTA with step ``1/sigma_max(A)^2``.

    Every ``check_every`` iterations the KKT residual is evaluated; if the
    current sign pattern pins down an exact solution (full-rank support) that
    solution is tried too.  Convergence means KKT residual ``<= tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a, b, lam = p.a, p.b, p.lam
    n = a.shape[1]
    lip = np.linalg.norm(a, 2) ** 2
    if lip == 0.0:
        x = np.zeros(n)
        return LassoSolution(x, support_of(x), -b, lasso_objective(a, b, lam, x), 0, True,
                             kkt_residual(a, b, lam, x))
    step = 1.0 / lip
    atb = a.T @ b

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = x.copy()
    t = 1.0
    f_x = lasso_objective(a, b, lam, x)
    history = [f_x]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = soft_threshold(y - step * (a.T @ (a @ y) - atb), step * lam)
        f_z = lasso_objective(a, b, lam, z)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        x_prev = x
        if f_z <= f_x:
            x, f_x = z, f_z
        y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        history.append(f_x)
        if it % check_every:
            continue
        if kkt_residual(a, b, lam, x, support_tol) <= tol:
            converged = True
            break
        if polish:
            xp = _polish(a, b, lam, x, support_tol)
            if xp is not None and kkt_residual(a, b, lam, xp, support_tol) <= tol:
                f_p = lasso_objective(a, b, lam, xp)
                if f_p <= f_x:
                    x, f_x = xp, f_p
                    history.append(f_x)
                    converged = True
                    break
    return LassoSolution(
        x_hat=x,
        support=support_of(x, support_tol),
        residual=a @ x - b,
        objective=f_x,
        iterations=it,
        converged=converged,
        kkt=kkt_residual(a, b, lam, x, support_tol),
        history=history,
    )


@dataclass
class LipschitzCertificate:
    support: np.ndarray
    nondegen_rank_ok: bool
    nondegen_strict_ok: bool
    strict_slack: float
    local_constant: float
    global_constant: float
    sigma_min_AI: float | None
    sigma_max_AI: float | None
    local_constant_unit: float  # (sigma_max + 1) / sigma_min^2
    local_constant_sqrt_support: float  # (sigma_max + sqrt|I|) / sigma_min^2

    @property
    def certified(self):
        return self.nondegen_rank_ok and self.nondegen_strict_ok

    def as_dict(self):
        return {
            "support": [int(i) for i in self.support],
            "certified": bool(self.certified),
            "rank_ok": bool(self.nondegen_rank_ok),
            "strict_ok": bool(self.nondegen_strict_ok),
            "strict_slack": float(self.strict_slack),
            "local_constant": float(self.local_constant),
            "global_constant": float(self.global_constant),
        }


def global_lipschitz_constant(a):
    """``Cond(A)/sigma_min(A) + 1/sigma_min(A)^2``.

    ``sigma_min`` is the smallest of the ``min(d_m, d_a)`` singular values,
    i.e. the row-Gram value for wide ``A`` and the column-Gram value for tall
    ``A``; it is ``inf`` for rank-deficient ``A``.
    """
    res = svd(a)
    smin = res.sigma_min
    if not np.isfinite(res.cond):
        return np.inf
    return res.cond / smin + 1.0 / smin**2


def certify(p: LassoProblem, s: LassoSolution, rank_tol=RANK_TOL) -> LipschitzCertificate:
    if not s.converged:
        raise ValueError("cannot certify an unconverged LASSO solution")
    a, lam = p.a, p.lam
    idx = np.asarray(s.support, dtype=int)
    comp = np.setdiff1d(np.arange(a.shape[1]), idx)
    r = s.residual
    off = np.abs(a[:, comp].T @ r).max(initial=0.0)
    strict_slack = lam - off
    glob = global_lipschitz_constant(a)
    if idx.size == 0:
        # b -> 0 is locally constant
        return LipschitzCertificate(idx, True, bool(strict_slack > 0), float(strict_slack),
                                    0.0, glob, None, None, 0.0, 0.0)
    res = svd(a[:, idx])
    smin, smax = res.sigma_min_colgram, res.sigma_max
    rank_ok = smin > rank_tol
    if rank_ok:
        dual = np.linalg.norm(a[:, idx].T @ r / lam)
        local = (smax + dual) / smin**2
        unit = (smax + 1.0) / smin**2
        sqrt_supp = (smax + np.sqrt(idx.size)) / smin**2
    else:
        local = unit = sqrt_supp = np.inf
    return LipschitzCertificate(
        support=idx,
        nondegen_rank_ok=bool(rank_ok),
        nondegen_strict_ok=bool(strict_slack > 0),
        strict_slack=float(strict_slack),
        local_constant=float(local),
        global_constant=float(glob),
        sigma_min_AI=float(smin),
        sigma_max_AI=float(smax),
        local_constant_unit=float(unit),
        local_constant_sqrt_support=float(sqrt_supp),
    )


def _probe_directions(p, support, n_random, rng):
    d_m = p.a.shape[0]
    dirs = [np.eye(d_m)]
    if support.size:
        u = svd(p.a[:, support]).u
        dirs.append(u.T)
    g = rng.standard_normal((n_random, d_m))
    dirs.append(g / np.linalg.norm(g, axis=1, keepdims=True))
    return np.vstack(dirs)


def empirical_local_lipschitz(p: LassoProblem, n_perturb=64, radius=1e-3, seed=0,
                              tol=1e-12, max_iter=200_000) -> float:
    """Max of ``||x(b + db) - x(b)|| / ||db||`` over ``||db|| = radius``.

    Directions are the coordinate axes, the left singular vectors of the
    active submatrix and ``n_perturb`` random unit vectors.  Raises
    :class:`SupportChanged` if any perturbed solution has a different sign
    pattern.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    base = solve_lasso(p, tol=tol, max_iter=max_iter)
    signs = np.sign(base.x_hat) * (np.abs(base.x_hat) > SUPPORT_TOL)
    rng = substream(seed, "lasso_perturb")
    best = 0.0
    for d in _probe_directions(p, base.support, n_perturb, rng):
        db = radius * d
        sol = solve_lasso(p.with_b(p.b + db), tol=tol, max_iter=max_iter, x0=base.x_hat)
        s2 = np.sign(sol.x_hat) * (np.abs(sol.x_hat) > SUPPORT_TOL)
        if np.any(s2 != signs):
            raise SupportChanged(
                f"support/sign pattern changed under a perturbation of size {radius:g}; "
                "use a smaller radius"
            )
        best = max(best, np.linalg.norm(sol.x_hat - base.x_hat) / np.linalg.norm(db))
    return float(best)
