"""Learning-error decomposition, closed-form error bounds and empirical
complexity/Lipschitz estimates for trained operator networks."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fileformat
from .bayes import empirical_lipschitz_map
from .nn import forward
from .rng import substream

__all__ = [
    "ErrorReport",
    "RademacherEstimate",
    "empirical_errors",
    "bound_approximation",
    "bound_generalization",
    "bound_learning",
    "rademacher_nn_bound",
    "learning_architecture",
    "empirical_rademacher",
    "network_class_values",
    "lipschitz_of_target",
    "save_report",
    "load_report",
]


@dataclass
class ErrorReport:
    approx_error_hat: float
    gen_gap_hat: float
    learning_error_hat: float
    train_risk: float
    test_risk: float
    test_risk_std_error: float
    n_train: int
    n_test: int
    bound_approx: float | None = None
    bound_gen: float | None = None
    bound_learning: float | None = None
    inputs: dict = field(default_factory=dict)

    @property
    def identity_residual(self):
        return self.learning_error_hat - (self.approx_error_hat + self.gen_gap_hat)

    def flat(self):
        out = {k: v for k, v in asdict(self).items() if k != "inputs"}
        out.update({f"input.{k}": v for k, v in sorted(self.inputs.items())})
        out["identity_residual"] = self.identity_residual
        return out


def _sq_errors(net, x, y):
    pred = forward(net, np.atleast_2d(x))
    return np.sum((pred - np.atleast_2d(y)) ** 2, axis=1)


def empirical_errors(net, train_x, train_y, test_x, test_y) -> ErrorReport:
    """Train-set risk, test-set risk and their gap.

    ``learning_error_hat`` is the test risk and ``gen_gap_hat`` is defined as
    ``test - train``, so ``learning = approx + gap`` up to one rounding.
    """
    train_x, test_x = np.atleast_2d(train_x), np.atleast_2d(test_x)
    if train_x.shape[0] == 0 or test_x.shape[0] == 0:
        raise ValueError("train and test sets must be nonempty")
    if train_x.shape[1] != net.d_in or test_x.shape[1] != net.d_in:
        raise ValueError("input dimension does not match the network")
    tr = _sq_errors(net, train_x, train_y)
    te = _sq_errors(net, test_x, test_y)
    train_risk, test_risk = float(tr.mean()), float(te.mean())
    se = float(te.std(ddof=1) / math.sqrt(te.size)) if te.size > 1 else float("nan")
    return ErrorReport(
        approx_error_hat=train_risk,
        gen_gap_hat=test_risk - train_risk,
        learning_error_hat=test_risk,
        train_risk=train_risk,
        test_risk=test_risk,
        test_risk_std_error=se,
        n_train=int(train_x.shape[0]),
        n_test=int(test_x.shape[0]),
    )


# -- closed-form bounds ------------------------------------------------------------


def bound_approximation(d_m, d_a, L_f, r_m, p, L):
    """``361 d_m d_a L_f^2 r_M^2 (p L)^{-4/d_m}``."""
    return 361.0 * d_m * d_a * L_f**2 * r_m**2 * (p * L) ** (-4.0 / d_m)


def rademacher_nn_bound(r_m, depth, m_f, n):
    """Frobenius-norm Rademacher bound for one subnetwork class:
    ``r_M sqrt(2 ln 2 * depth) M_F^depth / sqrt(n)``."""
    return r_m * math.sqrt(2.0 * math.log(2.0) * depth) * m_f**depth / math.sqrt(n)


def bound_generalization(d_a, r_a, r_f, r_m, L, m_f, n):
    """``8 d_a (r_A + r_F) r_M sqrt(2 ln 2 L) M_F^L / sqrt(n)``.

    ``L`` is the number of weight matrices per subnetwork in the
    Frobenius-norm Rademacher bound; for :class:`~darol.nn.MlpOperator` that
    is ``net.depth + 1``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return 8.0 * d_a * (r_a + r_f) * rademacher_nn_bound(r_m, L, m_f, n)


def bound_learning(d_m, d_a, L_f, r_m, m_f, p_tilde, L_tilde, n, c=1.0, c_tilde=1.0):
    """Combined learning-error bound with unspecified absolute constants ``c``, ``c_tilde``.

    Only meaningful for trends.  Needs ``d_m >= 2``: the exponent
    ``(d_m^2 - 9 d_m + 4) / (2 d_m (d_m - 1))`` is singular at ``d_m = 1``.
    """
    if d_m < 2:
        raise ValueError("bound_learning needs d_m >= 2 (exponent singular at d_m = 1)")
    expo = (d_m**2 - 9 * d_m + 4) / (2.0 * d_m * (d_m - 1))
    approx = L_f**2 * d_m**expo * (p_tilde * L_tilde) ** (-4.0 / d_m)
    gen = L_f * math.sqrt(L_tilde) * m_f ** (c_tilde * d_m) / math.sqrt(n)
    return c * d_a * math.sqrt(d_m) * r_m**2 * (approx + gen)


def learning_architecture(d_m, p_tilde, L_tilde):
    """Width and depth ``(p, L) = (ceil(d_m^{d_m/(d_m-1)}) p~, d_m L~)`` with unit constants."""
    if d_m < 2:
        raise ValueError("needs d_m >= 2")
    return math.ceil(d_m ** (d_m / (d_m - 1))) * p_tilde, d_m * L_tilde


# -- empirical estimates -----------------------------------------------------------


@dataclass
class RademacherEstimate:
    estimate: float
    std_error: float
    n_draws: int
    class_size: int


def empirical_rademacher(function_values, n_sign_draws=2000, seed=0) -> RademacherEstimate:
    """Monte-Carlo ``E_sigma[max_g (1/n) sum_i sigma_i g(z_i)]``.

    ``function_values`` is a ``(k, n)`` array: row ``j`` holds ``g_j`` on the
    ``n`` data points.  The sup runs over these ``k`` functions only, so the
    result estimates a lower bound on the complexity of any class containing
    them.
    """
    vals = np.atleast_2d(np.asarray(function_values, dtype=float))
    if vals.size == 0:
        raise ValueError("empty function class sample")
    if n_sign_draws < 1:
        raise ValueError("n_sign_draws must be >= 1")
    k, n = vals.shape
    rng = substream(seed, "rademacher")
    sigma = rng.choice(np.array([-1.0, 1.0]), size=(n_sign_draws, n))
    sups = np.max(sigma @ vals.T, axis=1) / n
    se = float(sups.std(ddof=1) / math.sqrt(n_sign_draws)) if n_sign_draws > 1 else float("nan")
    return RademacherEstimate(float(sups.mean()), se, n_sign_draws, k)


def network_class_values(nets, points, component=None):
    """Outputs of subnetworks on ``points`` as a ``(k, n)`` array.

    Every subnetwork of every net is one member of the scalar class unless
    ``component`` picks a single output.
    """
    rows = []
    for net in nets:
        out = forward(net, points)
        cols = range(out.shape[1]) if component is None else [component]
        rows.extend(out[:, j] for j in cols)
    return np.array(rows)


def lipschitz_of_target(regularized_map, sample_grid, pair_count=None, seed=0):
    """Pairwise max-ratio estimate of the Lipschitz constant of ``m -> a_hat``."""
    return empirical_lipschitz_map(regularized_map, sample_grid, pair_count, seed)


# -- persistence --------------------------------------------------------------------


def save_report(report: ErrorReport, path, metadata=None):
    header = {"report": report.flat(), "metadata": metadata or {}}
    return fileformat.write(path, "report", header, [])


def load_report(path):
    _, h, _ = fileformat.read(path, "report")
    return h["report"], h["metadata"]
