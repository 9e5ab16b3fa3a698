"""Fast invariant suites run by ``darol verify``.

Each check records a named invariant and whether it held.  ``inject`` turns
on a deliberate fault so the suite's own failure path can be exercised.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import analysis, bayes, fileformat, lasso, nn, numerics
from .forward_models import EllipticModel, PriorSpec, make_linear_map, solve_elliptic, thomas_solve
from .rng import substream

__all__ = ["CheckResult", "FAULTS", "run_suites", "SUITES"]

FAULTS = ("kkt-tolerance", "clamp", "checksum")


@dataclass
class CheckResult:
    suite: str
    invariant: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.suite}.{self.invariant}  {self.detail}".rstrip()


def _numerics(inject):
    rng = substream(0, "verify", "numerics")
    worst_sv, worst_rec = 0.0, 0.0
    for _ in range(40):
        m, n = rng.integers(1, 9, size=2)
        x = rng.standard_normal((m, n))
        s = numerics.svd(x)
        ref = np.sqrt(np.clip(np.linalg.eigvalsh(x @ x.T if m <= n else x.T @ x), 0, None))[::-1]
        worst_sv = max(worst_sv, float(np.max(np.abs(s.singular_values - ref))))
        worst_rec = max(worst_rec, float(np.max(np.abs(s.reconstruct() - x))))
    yield "singular_values_match_eigvalsh", worst_sv < 1e-10, f"max err {worst_sv:.2e}"
    yield "reconstruction", worst_rec < 1e-10, f"max err {worst_rec:.2e}"
    # links that hold for every split: the sigma_max chain and the row-Gram lower link
    ok = True
    for _ in range(100):
        x = rng.standard_normal((4, 7))
        rep = numerics.submatrix_singular_report(x, range(int(rng.integers(1, 7))))
        ok &= rep.sigma_max_ineq_holds and rep.link_holds("smin_lower")
    yield "submatrix_sigma_max_chain", ok, ""


def _lasso(inject):
    rng = substream(0, "verify", "lasso")
    solve_tol = 1e-2 if inject == "kkt-tolerance" else 1e-10
    worst_cf = 0.0
    for _ in range(20):
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        b = rng.standard_normal(6)
        sol = lasso.solve_lasso(lasso.LassoProblem(q, b, 0.3))
        worst_cf = max(worst_cf, float(np.max(np.abs(sol.x_hat - lasso.soft_threshold(q.T @ b, 0.3)))))
    yield "orthonormal_closed_form", worst_cf < 1e-8, f"max err {worst_cf:.2e}"
    worst_kkt, bad = 0.0, 0
    for _ in range(40):
        a = rng.standard_normal((8, 16)) / math.sqrt(8)
        p = lasso.LassoProblem(a, rng.standard_normal(8), 0.05)
        sol = lasso.solve_lasso(p, tol=solve_tol, polish=inject != "kkt-tolerance")
        r = lasso.kkt_residual(p.a, p.b, p.lam, sol.x_hat)
        worst_kkt = max(worst_kkt, r)
        bad += r > 1e-10
    yield "kkt_residual", bad == 0, f"{bad} of 40 above 1e-10 (max {worst_kkt:.2e})"
    viol = 0
    checked = 0
    for i in range(30):
        a = rng.standard_normal((8, 16)) / math.sqrt(8)
        p = lasso.LassoProblem(a, rng.standard_normal(8), 0.1)
        sol = lasso.solve_lasso(p)
        cert = lasso.certify(p, sol)
        if not cert.certified or not sol.support.size:
            continue
        try:
            emp = lasso.empirical_local_lipschitz(p, n_perturb=16, seed=i)
        except lasso.SupportChanged:
            continue
        checked += 1
        viol += emp > cert.local_constant * (1 + 1e-6)
    yield "local_lipschitz_bound", viol == 0 and checked > 0, f"{viol} violations on {checked} certified"


def _forward(inject):
    rng = substream(0, "verify", "forward")
    n = 12
    lo, up = rng.uniform(-1, 0, n - 1), rng.uniform(-1, 0, n - 1)
    d = rng.uniform(3, 4, n)
    rhs = rng.standard_normal(n)
    full = np.diag(d) + np.diag(lo, -1) + np.diag(up, 1)
    err = float(np.max(np.abs(thomas_solve(lo, d, up, rhs) - np.linalg.solve(full, rhs))))
    yield "thomas_matches_dense", err < 1e-12, f"max err {err:.2e}"
    errs = []
    for g in (15, 31, 63):
        m = EllipticModel.with_source(g, lambda x: np.pi**2 * np.sin(np.pi * x), [0.5], 1)
        u = solve_elliptic(m, np.ones(1), full=True)
        errs.append(float(np.max(np.abs(u - np.sin(np.pi * m.nodes(g))))))
    rates = [errs[i] / errs[i + 1] for i in range(2)]
    yield "elliptic_second_order", all(3.5 < r < 4.5 for r in rates), f"ratios {rates[0]:.2f}, {rates[1]:.2f}"
    f = make_linear_map("convolution_toeplitz", 6, 8, {"kernel": [1.0, -2.0, 0.5], "mode": "valid"})
    x = rng.standard_normal(8)
    err = float(np.max(np.abs(f(x) - np.convolve(x, [1.0, -2.0, 0.5], mode="valid"))))
    yield "convolution_matches_numpy", err < 1e-13, f"max err {err:.2e}"


def _bayes(inject):
    prior = PriorSpec("uniform_box", 1, radius=1.0)
    model = bayes.BayesModel(prior, bayes.QuadraticPotential(1.0), [-1.0], [1.0])
    b = bayes.lipschitz_bound_bayes(model)
    yield "reference_bound", abs(b.proof_bound - 2 * math.e**4 * 1.5) < 1e-6, f"{b.proof_bound:.4f}"
    m = np.array([0.4])
    q = bayes.quadrature_cm(model, m)
    res = bayes.conditional_mean(model, m, chain_length=20_000, seed=3)
    z = abs(res.a_hat[0] - q[0]) / res.mc_std_error[0]
    yield "mcmc_matches_quadrature", z < 4.0, f"z = {z:.2f}"
    viol = model.validate_bounds(n_samples=500)
    yield "potential_bounds", all(v <= 0 for v in viol.values()), ""


def _nn(inject):
    rng = substream(0, "verify", "nn")
    worst = 0.0
    for k in range(5):
        net = nn.init_network(3, 2, 4, 2, 50.0, seed=k)
        for b in net.biases:  # zero biases put pre-activations exactly on the ReLU kink
            b += 0.1 * rng.standard_normal(b.shape)
        x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        _, grads = nn.loss_and_grad(net, x, y)
        for pi, p in enumerate(net.params()):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-6
                lp = nn.loss_and_grad(net, x, y)[0]
                p[idx] = old - 1e-6
                lm = nn.loss_and_grad(net, x, y)[0]
                p[idx] = old
                fd = (lp - lm) / 2e-6
                worst = max(worst, abs(fd - grads[pi][idx]) / max(1e-6, abs(fd) + abs(grads[pi][idx])))
    yield "gradient_finite_difference", worst < 1e-5, f"worst rel err {worst:.2e}"
    net = nn.init_network(4, 3, 16, 2, 0.5, seed=1)
    for w in net.weights:
        w *= 10.0
    out = nn.forward(net, rng.standard_normal((10_000, 4)) * 10)
    bound = net.clamp + 1e-12 if inject != "clamp" else net.clamp * 0.5
    yield "output_clamp", float(np.max(np.abs(out))) <= bound, f"max |out| {np.max(np.abs(out)):.3f}"


def _analysis(inject):
    rng = substream(0, "verify", "analysis")
    net = nn.init_network(3, 2, 8, 2, 2.0, seed=0)
    x, y = rng.standard_normal((50, 3)), rng.standard_normal((50, 2))
    xt, yt = rng.standard_normal((40, 3)), rng.standard_normal((40, 2))
    r = analysis.empirical_errors(net, x, y, xt, yt)
    yield "error_identity", abs(r.identity_residual) <= 1e-12, f"residual {r.identity_residual:.1e}"
    ba = analysis.bound_approximation(2, 1, 1, 1, 10, 10)
    bg = analysis.bound_generalization(1, 1, 1, 1, 2, 1, 100)
    ok = abs(ba - 0.0722) <= 1e-15 and abs(bg - 8 * math.sqrt(2 * math.log(2)) * 2 * math.sqrt(2) / 10) <= 1e-12
    yield "bound_regression", ok, ""
    gs = [analysis.bound_generalization(2, 1, 1, 1, 2, 1.5, n) for n in (10, 100, 1000)]
    yield "bound_gen_monotone_in_n", gs[0] > gs[1] > gs[2], ""


def _fileformat(inject):
    rows = [np.array([0.1, 1 / 3, -2.5e-300]), np.array([np.pi])]
    data = fileformat.dumps("dataset", {"a": 1}, rows)
    _, h, back = fileformat.loads(data)
    again = fileformat.dumps("dataset", h, back)
    yield "byte_roundtrip", again == data, ""
    bad = data.replace(b"0.1", b"0.2", 1) if inject != "checksum" else data
    try:
        fileformat.loads(bad)
        caught = False
    except fileformat.ChecksumError:
        caught = True
    yield "checksum_detects_edit", caught, ""


SUITES = {
    "numerics": _numerics,
    "forward_models": _forward,
    "lasso": _lasso,
    "bayes": _bayes,
    "nn": _nn,
    "analysis": _analysis,
    "fileformat": _fileformat,
}


def run_suites(inject=None, only=None):
    if inject is not None and inject not in FAULTS:
        raise ValueError(f"unknown fault {inject!r}; choose from {', '.join(FAULTS)}")
    results = []
    for name, suite in SUITES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            for inv, ok, detail in suite(inject):
                results.append(CheckResult(name, inv, bool(ok), detail))
        except Exception as exc:  # a crashing suite is a failed suite
            results.append(CheckResult(name, "suite_raised", False, f"{type(exc).__name__}: {exc}"))
        elapsed = time.perf_counter() - t0
        for r in results:
            if r.suite == name:
                r.seconds = elapsed
    return results
