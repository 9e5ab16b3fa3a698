"""Small dense linear algebra: one-sided Jacobi SVD and Gram-convention
singular value bookkeeping.

Two conventions for "the smallest singular value" are used in this package
and they are kept apart by name:

``sigma_min_rowgram``
    square root of the smallest eigenvalue of ``M @ M.T``.  Zero whenever
    ``M`` has more rows than columns.
``sigma_min_colgram``
    square root of the smallest eigenvalue of ``M.T @ M``.  Zero whenever
    ``M`` has more columns than rows.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SvdNotConverged",
    "SvdResult",
    "SubmatrixReport",
    "svd",
    "sigma_min",
    "submatrix_singular_report",
]


class SvdNotConverged(RuntimeError):
    def __init__(self, sweeps, residual):
        super().__init__(
            f"one-sided Jacobi did not converge in {sweeps} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    u: np.ndarray = field(repr=False)
    vt: np.ndarray = field(repr=False)
    shape: tuple
    sweeps: int = 0

    @property
    def sigma_max(self) -> float:
        return float(self.singular_values[0])

    @property
    def sigma_min_rowgram(self) -> float:
        rows, cols = self.shape
        return 0.0 if rows > cols else float(self.singular_values[-1])

    @property
    def sigma_min_colgram(self) -> float:
        rows, cols = self.shape
        return 0.0 if cols > rows else float(self.singular_values[-1])

    @property
    def sigma_min(self) -> float:
        """Smallest of the ``min(rows, cols)`` singular values."""
        return float(self.singular_values[-1])

    @property
    def cond_rowgram(self) -> float:
        return _cond(self.sigma_max, self.sigma_min_rowgram, self.shape)

    @property
    def cond_colgram(self) -> float:
        return _cond(self.sigma_max, self.sigma_min_colgram, self.shape)

    @property
    def cond(self) -> float:
        return _cond(self.sigma_max, self.sigma_min, self.shape)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def _cond(smax, smin, shape):
    # numerically rank-deficient blocks get an infinite condition number
    if smax == 0.0 or smin <= max(shape) * np.finfo(float).eps * smax:
        return np.inf
    return smax / smin


def _as_matrix(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a nonempty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def _jacobi_columns(g, tol, max_sweeps):
    """Orthogonalize the columns of ``g`` in place by plane rotations.

    Returns the accumulated right rotation ``v`` and the sweep count.
    """
    n = g.shape[1]
    v = np.eye(n)
    residual = 0.0
    for sweep in range(1, max_sweeps + 1):
        residual = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                gi, gj = g[:, i], g[:, j]
                alpha = gi @ gi
                beta = gj @ gj
                gamma = gi @ gj
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = abs(gamma) / np.sqrt(alpha * beta)
                residual = max(residual, off)
                if off <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * gi - s * gj
                new_j = s * gi + c * gj
                g[:, i], g[:, j] = new_i, new_j
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if residual <= tol:
            return v, sweep
    raise SvdNotConverged(max_sweeps, residual)


def svd(m, tol=1e-12, max_sweeps=60) -> SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` by one-sided Jacobi.

    The rotations act on the smaller Gram dimension: columns of ``m`` when
    it is tall, columns of ``m.T`` when it is wide.  Convergence is declared
    when every column pair has normalized inner product below ``tol``.
    """
    m = _as_matrix(m)
    rows, cols = m.shape
    wide = cols > rows
    g = (m.T if wide else m).copy()
    v, sweeps = _jacobi_columns(g, tol, max_sweeps)
    s = np.linalg.norm(g, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[:, order]
    v = v[:, order]
    u = np.zeros_like(g)
    nz = s > 0
    u[:, nz] = g[:, nz] / s[nz]
    if wide:
        # m.T = u s v^T  =>  m = v s u^T
        u, v = v, u
    return SvdResult(singular_values=s, u=u, vt=v.T, shape=(rows, cols), sweeps=sweeps)


def sigma_min(m, convention="colgram") -> float:
    res = svd(m)
    if convention == "colgram":
        return res.sigma_min_colgram
    if convention == "rowgram":
        return res.sigma_min_rowgram
    raise ValueError(f"unknown convention {convention!r}")


@dataclass
class SubmatrixReport:
    """Verdicts for ``X = [A B]`` against the three submatrix inequality chains.

    Each slack is ``rhs - lhs`` of one ``lhs <= rhs`` link, so a negative
    slack is a violation.  ``None`` marks a vacuous link (it involves an
    infinite condition number).
    """

    convention: str
    slacks: dict
    tol: float
    slacks_scale: dict = field(default_factory=dict)

    def _holds(self, *names):
        out = True
        for name in names:
            s = self.slacks[name]
            if s is None:
                continue
            out = out and s >= -self.tol * self.slacks_scale.get(name, 1.0)
        return out

    @property
    def sigma_max_ineq_holds(self) -> bool:
        return self._holds("smax_lower", "smax_upper")

    @property
    def sigma_min_ineq_holds(self) -> bool:
        return self._holds("smin_upper", "smin_lower")

    @property
    def cond_ineq_holds(self) -> bool:
        return self._holds("cond_lower", "cond_upper")

    def link_holds(self, name):
        return self._holds(name)

    @property
    def vacuous(self):
        return sorted(k for k, v in self.slacks.items() if v is None)


def submatrix_singular_report(x, left_cols, convention="rowgram", tol=1e-9) -> SubmatrixReport:
    """Evaluate, for ``A = x[:, left_cols]`` and ``B`` the remaining columns::

        smax(A)^2 <= smax(X)^2 <= smax(A)^2 + smax(B)^2
        smin(A)^2 >= smin(X)^2 >= smin(A)^2 + smin(B)^2
        cond(A) <= cond(X) <= cond(A) + cond(B)

    ``convention`` selects which Gram matrix defines ``smin`` (and hence
    ``cond``).  ``tol`` is relative to the magnitude of the compared terms.
    """
    x = _as_matrix(x)
    cols = x.shape[1]
    left = np.asarray(sorted(set(int(i) for i in left_cols)), dtype=int)
    if left.size == 0 or left.size >= cols:
        raise ValueError("left_cols must be a nonempty proper subset of the columns")
    if left.min() < 0 or left.max() >= cols:
        raise IndexError(f"left_cols out of range for {cols} columns")
    right = np.setdiff1d(np.arange(cols), left)

    sx, sa, sb = svd(x), svd(x[:, left]), svd(x[:, right])
    if convention == "rowgram":
        pick = lambda r: (r.sigma_min_rowgram, r.cond_rowgram)
    elif convention == "colgram":
        pick = lambda r: (r.sigma_min_colgram, r.cond_colgram)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    (mx, cx), (ma, ca), (mb, cb) = pick(sx), pick(sa), pick(sb)
    Mx, Ma, Mb = sx.sigma_max**2, sa.sigma_max**2, sb.sigma_max**2

    slacks = {
        "smax_lower": Mx - Ma,
        "smax_upper": Ma + Mb - Mx,
        "smin_upper": ma**2 - mx**2,
        "smin_lower": mx**2 - ma**2 - mb**2,
        "cond_lower": None if np.isinf(ca) else cx - ca,
        "cond_upper": None if (np.isinf(ca) or np.isinf(cb)) else ca + cb - cx,
    }
    scale = {
        "smax_lower": max(Mx, 1.0),
        "smax_upper": max(Mx, 1.0),
        "smin_upper": max(ma**2, mx**2, 1.0),
        "smin_lower": max(mx**2, 1.0),
        "cond_lower": max(ca, 1.0),
        "cond_upper": max(ca + cb, 1.0) if not (np.isinf(ca) or np.isinf(cb)) else 1.0,
    }
    return SubmatrixReport(convention=convention, slacks=slacks, tol=tol, slacks_scale=scale)
