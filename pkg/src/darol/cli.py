"""Command-line pipeline: gen -> train -> eval -> report, plus verify.

Exit codes: 0 success, 1 validation error, 2 invariant or suite failure,
3 numerical failure.
"""

import argparse
import csv
import io
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, dataset, fileformat, lasso, nn, numerics
from .config import ConfigError, load_config
from .rng import derive_seed

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT, EXIT_NUMERICAL = 0, 1, 2, 3

TRAIN_FILE = "train.darol"
TEST_FILE = "test.darol"
CHECKPOINT_FILE = "checkpoint.darol"
HISTORY_FILE = "history.csv"
REPORT_FILE = "report.darol"
REPORT_CSV = "report.csv"
SWEEP_CSV = "sweep.csv"


class InvariantError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


def _out_dir(args, cfg):
    out = args.out or cfg.output_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return Path(out)


def _provenance(cfg, role):
    return {"config_hash": cfg.hash, "seed": cfg.seed, "seed_override": cfg.seed_override,
            "experiment": cfg.experiment, "role": role}


def _check_provenance(cfg, *items):
    """Every artifact must come from this config; ``items`` are ``(name, metadata)``."""
    for name, meta in items:
        meta = meta or {}
        got = meta.get("config_hash")
        if got != cfg.hash:
            raise ConfigError(f"{name} was produced by config {got}, not {cfg.hash} "
                              "(mixed provenance)")
        if meta.get("seed") != cfg.seed:
            raise ConfigError(f"{name} was produced with seed {meta.get('seed')}, not {cfg.seed}")


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    if v is None:
        return ""
    return str(v)


# -- gen ---------------------------------------------------------------------------


def _build(cfg, role, n, jobs):
    fwd = cfg.build_forward()
    prior = cfg.build_prior(fwd.d_a)
    noise = cfg.build_noise()
    seed = derive_seed(cfg.seed, "data", role)
    kind = cfg.regularizer["type"]
    if kind == "implicit":
        ds = dataset.build_implicit(fwd, prior, noise, n, seed)
    elif kind == "explicit":
        ds = dataset.build_explicit(fwd, dataset.PushforwardSampler(fwd, prior, noise), n, seed)
    else:
        reg = cfg.build_regularizer(fwd, prior)
        ds = dataset.build_regularized(fwd, prior, noise, reg, n, seed, jobs=jobs)
    ds.metadata = {**ds.metadata, **_provenance(cfg, role)}
    return ds


def cmd_gen(cfg, out, jobs=1):
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for role, n, fname in (("train", cfg.data["n_train"], TRAIN_FILE),
                           ("test", cfg.data["n_test"], TEST_FILE)):
        try:
            ds = _build(cfg, role, n, jobs)
        except dataset.DatasetBuildError as exc:
            raise NumericalError(str(exc)) from exc
        paths.append(dataset.save(ds, out / fname))
        if cfg.regularizer["type"] == "lasso":
            certified = sum(bool(d.get("certified")) for d in ds.diagnostics)
            print(f"{role}: {len(ds)} pairs, {certified} certified non-degenerate, "
                  f"{len(ds.failed)} failed")
        else:
            print(f"{role}: {len(ds)} pairs")
    return paths


# -- train -------------------------------------------------------------------------


def _load_dataset(path):
    try:
        return dataset.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing artifact {path}; run the previous stage first") from exc
    except fileformat.FormatError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _fit(cfg, ds, role):
    net = nn.init_network(ds.d_m, ds.d_a, cfg.network["width"], cfg.network["depth"],
                          cfg.network["clamp"], seed=derive_seed(cfg.seed, "init", role))
    try:
        return nn.train(net, ds.m, ds.a_hat, cfg.train_config(derive_seed(cfg.seed, "train", role)))
    except nn.TrainingDiverged as exc:
        raise NumericalError(f"training diverged: {exc}") from exc


def cmd_train(cfg, out, dataset_path=None):
    ds = _load_dataset(dataset_path or out / TRAIN_FILE)
    _check_provenance(cfg, ("dataset", ds.metadata))
    net, hist = _fit(cfg, ds, "main")
    meta = {**_provenance(cfg, "checkpoint"), "final_loss": hist.final_loss,
            "frobenius_max": float(hist.frobenius.max())}
    ck = nn.save_checkpoint(net, out / CHECKPOINT_FILE, meta)
    rows = [(i + 1, loss) for i, loss in enumerate(hist.epoch_loss)]
    (out / HISTORY_FILE).write_text(_csv_text(["epoch", "train_loss"], rows), encoding="utf-8")
    print(f"trained {len(rows)} epochs, final loss {hist.final_loss:.6g}")
    return ck


# -- eval --------------------------------------------------------------------------


def _pairwise_lipschitz(x, y, max_pairs, seed):
    n = x.shape[0]
    if n < 2:
        return float("nan")
    rng = np.random.default_rng(derive_seed(seed, "lipschitz_pairs"))
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, 1)
    else:
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n, size=max_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
    dx = np.linalg.norm(x[i] - x[j], axis=1)
    dy = np.linalg.norm(y[i] - y[j], axis=1)
    ok = dx > 1e-9
    return float(np.max(dy[ok] / dx[ok])) if ok.any() else float("nan")


def _certified_lipschitz(cfg):
    if cfg.regularizer["type"] == "lasso":
        return float(lasso.global_lipschitz_constant(cfg.build_forward().a))
    if cfg.regularizer["type"] == "explicit":
        f = cfg.build_forward()
        s = numerics.svd(f.a)
        return 1.0 / s.sigma_min
    return None


def _bounds(cfg, net, train, test, n, frob_max):
    d_m, d_a = train.d_m, train.d_a
    both_m = np.vstack([train.m, test.m])
    both_a = np.vstack([train.a_hat, test.a_hat])
    r_m = float(np.max(np.linalg.norm(both_m, axis=1)))
    r_a = float(np.max(np.linalg.norm(both_a, axis=1)))
    r_f = net.clamp * math.sqrt(d_a)
    b = cfg.bounds
    lf_emp = _pairwise_lipschitz(both_m, both_a, b["lipschitz_pairs"], cfg.seed)
    lf_cert = _certified_lipschitz(cfg)
    l_f = b["L_f"] if b["L_f"] is not None else lf_emp
    p, depth = net.width, net.depth
    inputs = {"d_m": d_m, "d_a": d_a, "L_f": l_f, "L_f_empirical": lf_emp, "L_f_certified": lf_cert,
              "r_M": r_m, "r_A": r_a, "r_F": r_f, "p": p, "L": depth,
              "weight_layers": net.n_weight_layers, "M_F": frob_max, "n": n,
              "p_tilde": b["p_tilde"], "L_tilde": b["L_tilde"], "c": b["c"], "c_tilde": b["c_tilde"]}
    approx = analysis.bound_approximation(d_m, d_a, l_f, r_m, p, depth)
    gen = analysis.bound_generalization(d_a, r_a, r_f, r_m, net.n_weight_layers, frob_max, n)
    learn = None
    if d_m >= 2:
        learn = analysis.bound_learning(d_m, d_a, l_f, r_m, frob_max, b["p_tilde"], b["L_tilde"],
                                        n, b["c"], b["c_tilde"])
    if lf_cert is not None:
        inputs["bound_approx_certified"] = analysis.bound_approximation(d_m, d_a, lf_cert, r_m, p, depth)
    return approx, gen, learn, inputs


def _evaluate(cfg, net, train, test):
    rep = analysis.empirical_errors(net, train.m, train.a_hat, test.m, test.a_hat)
    if abs(rep.identity_residual) > 1e-12:
        raise InvariantError(f"error decomposition identity violated by {rep.identity_residual:.3e}")
    _, frob_max = nn.frobenius_profile(net)
    rep.bound_approx, rep.bound_gen, rep.bound_learning, rep.inputs = _bounds(
        cfg, net, train, test, len(train), frob_max)
    return rep


def cmd_eval(cfg, out, checkpoint=None, train_path=None, test_path=None):
    ck = checkpoint or out / CHECKPOINT_FILE
    try:
        net, meta = nn.load_checkpoint(ck)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing artifact {ck}; run train first") from exc
    except fileformat.FormatError as exc:
        raise ConfigError(f"{ck}: {exc}") from exc
    train = _load_dataset(train_path or out / TRAIN_FILE)
    test = _load_dataset(test_path or out / TEST_FILE)
    _check_provenance(cfg, ("checkpoint", meta), ("train set", train.metadata), ("test set", test.metadata))
    if (train.d_m, train.d_a) != (test.d_m, test.d_a) or train.d_m != net.d_in or train.d_a != net.d_out:
        raise ConfigError("train set, test set and checkpoint dimensions disagree")

    rep = _evaluate(cfg, net, train, test)
    analysis.save_report(rep, out / REPORT_FILE, _provenance(cfg, "report"))
    flat = rep.flat()
    (out / REPORT_CSV).write_text(
        _csv_text(["key", "value"], [(k, flat[k]) for k in sorted(flat)]), encoding="utf-8")

    cols = ["n", "train_risk", "test_risk", "gen_gap_hat", "learning_error_hat",
            "identity_residual", "bound_approx", "bound_gen", "bound_learning", "M_F"]
    rows = []
    for n in cfg.data["sweep"]:
        sub = train.subset(n)
        snet, hist = _fit(cfg, sub, f"sweep-{n}")
        srep = _evaluate(cfg, snet, sub, test)
        rows.append([n, srep.train_risk, srep.test_risk, srep.gen_gap_hat, srep.learning_error_hat,
                     srep.identity_residual, srep.bound_approx, srep.bound_gen, srep.bound_learning,
                     srep.inputs["M_F"]])
    (out / SWEEP_CSV).write_text(_csv_text(cols, rows), encoding="utf-8")
    print(f"train risk {rep.train_risk:.6g}, test risk {rep.test_risk:.6g}, "
          f"gap {rep.gen_gap_hat:.6g}, sweep rows {len(rows)}")
    return out / REPORT_FILE


# -- report ------------------------------------------------------------------------


def cmd_report(out, report_path=None, stream=None):
    stream = stream or sys.stdout
    path = report_path or out / REPORT_FILE
    try:
        flat, meta = analysis.load_report(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing artifact {path}; run eval first") from exc
    except fileformat.FormatError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    width = max(len(k) for k in flat)
    for k in ("experiment", "config_hash", "seed"):
        print(f"# {k}: {meta.get(k)}", file=stream)
    for k in sorted(flat):
        v = flat[k]
        print(f"{k:<{width}}  {_fmt(v) if not isinstance(v, float) else format(v, '.6g')}", file=stream)
    return flat


# -- verify ------------------------------------------------------------------------


def cmd_verify(inject=None, only=None, stream=None):
    from .verify import run_suites

    stream = stream or sys.stdout
    results = run_suites(inject, only)
    for r in results:
        print(r.line(), file=stream)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)} passed, {len(failed)} failed", file=stream)
    return not failed


# -- entry point -------------------------------------------------------------------


def _parser():
    ap = argparse.ArgumentParser(prog="darol", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, type=Path, help="YAML pipeline config")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker cap; never changes results")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the master seed (recorded in every artifact)")

    common(sub.add_parser("gen", help="generate train and test datasets"))
    p = sub.add_parser("train", help="train the operator network")
    common(p)
    p.add_argument("--dataset", type=Path)
    p = sub.add_parser("eval", help="evaluate errors, bounds and the n-sweep")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--train-set", type=Path)
    p.add_argument("--test-set", type=Path)
    p = sub.add_parser("report", help="print a stored report")
    common(p, needs_config=False)
    p.add_argument("--report", type=Path)
    common(sub.add_parser("run", help="gen, train and eval in one go"))
    p = sub.add_parser("verify", help="run the invariant suites")
    from .verify import FAULTS, SUITES

    p.add_argument("--inject-fault", choices=FAULTS, help="corrupt one check on purpose")
    p.add_argument("--suite", action="append", choices=sorted(SUITES))
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify":
            return EXIT_OK if cmd_verify(args.inject_fault, args.suite) else EXIT_INVARIANT
        if args.command == "report":
            out = args.out
            if out is None and args.report is None:
                if args.config is None:
                    raise ConfigError("pass --out, --report or --config")
                out = _out_dir(args, load_config(args.config))
            cmd_report(out, args.report)
            return EXIT_OK
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.seed_override)
        out = _out_dir(args, cfg)
        if args.command in ("gen", "run"):
            cmd_gen(cfg, out, args.jobs)
        if args.command in ("train", "run"):
            cmd_train(cfg, out, getattr(args, "dataset", None))
        if args.command in ("eval", "run"):
            cmd_eval(cfg, out, getattr(args, "checkpoint", None),
                     getattr(args, "train_set", None), getattr(args, "test_set", None))
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (NumericalError, numerics.SvdNotConverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
