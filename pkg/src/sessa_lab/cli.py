"""Command-line entry point: ``sessa-lab {theory,compare,train,eval,jacobian}``.

Exit codes: 0 all checks passed, 1 a check failed (or training diverged),
2 usage, domain or input error.  Every run writes ``manifest.json`` into
``--out`` next to its tables.
"""
import argparse
import csv
import json
import math
import os
import platform
import sys

import numpy as np

from . import __version__
from .errors import (CheckFailure, CheckpointError, ConfigError, DomainError, InputError,
                     RegimeError, SessaLabError, TrainingError)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

THEORY_SUITES = ("impulse", "closed_form", "poly_decay", "two_sided", "convolution",
                 "transport", "path_sum", "positional_code")
COMPARE_KINDS = ("attention", "mamba", "lti")


class Run:
    """Output directory, table writer and manifest for one invocation."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.files = []
        self.summary = {}

    def table(self, name, header, rows):
        rows = [[_plain(v) for v in r] for r in rows]
        if self.args.format == "json":
            path = os.path.join(self.out, name + ".json")
            with open(path, "w") as fh:
                json.dump([dict(zip(header, r)) for r in rows], fh, indent=1)
        else:
            path = os.path.join(self.out, name + ".csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for r in rows:
                    w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self.files.append(os.path.basename(path))
        return path

    def manifest(self, status):
        from . import kernels
        import scipy

        cfg = {k: _plain(v) for k, v in vars(self.args).items() if k != "func"}
        man = {
            "command": ["sessa-lab"] + self.argv,
            "subcommand": self.args.command,
            "config": cfg,
            "seed": self.args.seed,
            "status": status,
            "summary": {k: _plain(v) for k, v in self.summary.items()},
            "files": self.files,
            "versions": {"sessa_lab": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version(),
                         "kernel_backend": kernels.BACKEND},
            "threads": os.environ.get("SESSA_LAB_THREADS"),
        }
        with open(os.path.join(self.out, "manifest.json"), "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)


def _plain(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _say(msg):
    print(msg, flush=True)


def _check(cond, msg):
    if not cond:
        raise CheckFailure(msg)


# --------------------------------------------------------------------------
# theory suites
# --------------------------------------------------------------------------

def cmd_theory(run):
    from . import theory as th

    a = run.args
    suite = a.suite
    if suite in ("impulse", "closed_form", "poly_decay", "two_sided", "positional_code") \
            and not 0 < a.gamma < 1:
        raise DomainError(f"--gamma must lie in (0, 1), got {a.gamma}")
    if suite == "impulse":
        spec = th.RoutingSpec.uniform(a.gamma)
        if a.random:
            spec = th.random_admissible_spec(np.random.default_rng(a.seed), a.T, a.c2, a.gamma)
        s = th.impulse_response(spec, a.tau, a.T)
        run.table("impulse", ["lag", "value"], zip(s.lags().astype(int), s.tail()))
        run.summary.update(beta_tail=spec.beta_tail, eta=spec.eta)
        _check(np.all(np.isfinite(s.tail())) and np.max(np.abs(s.tail())) <= 1 + 1e-12,
               "impulse response left [-1, 1]")
    elif suite == "closed_form":
        worst, rows = 0.0, []
        ell = np.arange(1, a.T + 1)
        for tau in range(a.tau_max + 1):
            y = th.impulse_response(th.RoutingSpec.uniform(a.gamma), tau, tau + a.T + 1).tail()[1:]
            cf = th.uniform_closed_form(a.gamma, tau, ell)
            err = np.abs(y - cf) / cf
            worst = max(worst, float(err.max()))
            rows += zip([tau] * len(ell), ell, y, cf, err)
        run.table("closed_form", ["tau", "lag", "recursion", "closed_form", "rel_err"], rows)
        run.summary.update(max_rel_err=worst)
        _say(f"closed_form: max relative error {worst:.3e}")
        _check(worst <= 1e-12, f"closed form mismatch {worst:.3e} > 1e-12")
    elif suite == "poly_decay":
        s = th.impulse_response(th.RoutingSpec.uniform(a.gamma), a.tau, a.T)
        rep = th.poly_decay_check(s, strict=False)
        worst = rep.max_violation
        for i in range(a.n_random):
            spec = th.random_admissible_spec(np.random.default_rng([a.seed, i]), a.T, a.c2,
                                             a.gamma_max)
            r = th.poly_decay_check(th.impulse_response(spec, 0, a.T), strict=False)
            worst = max(worst, r.max_violation)
            _check(r.ok, f"random spec {i}: bound violated at lag {r.first_violation}")
        run.table("poly_decay", ["lag", "value", "envelope", "violated"], rep.rows())
        run.summary.update(beta=rep.params["beta"], C=rep.C_used, max_ratio=worst)
        _say(f"poly_decay: beta={rep.params['beta']:.4f} C={rep.C_used:.4f} max |y| l^beta / C = {worst:.4f}")
        _check(rep.ok, f"bound violated at lag {rep.first_violation}")
    elif suite == "two_sided":
        rep = th.two_sided_tail_check(a.gamma, a.tau_max, a.T, strict=False)
        run.table("two_sided", ["tau", "fitted_exponent"], enumerate(rep.exponents))
        run.summary.update(c_minus=rep.c_minus, c_plus=rep.c_plus, min_ratio=rep.min_ratio,
                           max_ratio=rep.max_ratio)
        _say(f"two_sided: c-={rep.c_minus:.4f} <= y l^beta in [{rep.min_ratio:.4f}, "
             f"{rep.max_ratio:.4f}] <= c+={rep.c_plus:.4f}")
        _check(rep.ok, f"two-sided envelope violated at {rep.first_violation}")
    elif suite == "convolution":
        from .numerics import fit_power_law

        y = th.heavy_tail_convolution(a.beta, a.k, a.n_max)
        nu = th.convolution_exponent(a.beta, a.k)
        win = (a.fit_min, a.n_max) if a.fit_min else (64, a.n_max)
        fit = fit_power_law(y, win)
        n = np.arange(a.k, a.n_max + 1)
        run.table("convolution", ["n", "value", "asymptote"],
                  zip(n, y[a.k:], th.heavy_tail_asymptote(a.beta, a.k, n)))
        run.summary.update(target=nu, fitted=fit.exponent, window=list(win))
        _say(f"convolution: k={a.k} beta={a.beta} fitted {fit.exponent:.4f} target {nu:.4f}")
        _check(abs(fit.exponent - nu) <= a.tol,
               f"fitted exponent {fit.exponent:.4f} off target {nu:.4f} by more than {a.tol}")
    elif suite == "transport":
        rep = th.transport_exponent_check(a.k, a.beta, a.tau, a.H)
        lag = np.arange(1, a.H + 1)
        run.table("transport", ["lag", "target", "margin", "lower"],
                  zip(lag, rep.target, rep.margin, rep.c_minus * (1.0 + lag) ** rep.nu))
        run.summary.update(nu=rep.nu, fitted=rep.fitted_nu, profile=rep.profile,
                           c_minus=rep.c_minus)
        _say(f"transport: nu={rep.nu:+.3f} fitted {rep.fitted_nu:+.4f} profile {rep.profile}")
        _check(rep.margin_ok, f"selective margin fails at lag {rep.first_failing_lag}")
        _check(abs(rep.fitted_nu - rep.nu) <= a.tol, "fitted transport exponent off target")
    elif suite == "path_sum":
        d = [a.d] * a.depth
        lam = [a.lam] * a.depth
        ks = [th.KernelSpec("harmonic", 1.0)] * a.depth
        rows, ok = [], True
        grid = np.unique(np.geomspace(a.tau + 1, a.T - 1, 40).astype(int))
        for t in grid:
            b = th.deep_path_sum_bound(d, lam, ks, t, a.tau)
            rows.append((t, b.value, b.harmonic_bound))
            ok &= b.value <= b.harmonic_bound * (1 + 1e-12)
        run.table("path_sum", ["t", "value", "harmonic_bound"], rows)
        _check(ok, "path sum exceeds the nested-harmonic majorant")
    elif suite == "positional_code":
        rep = th.positional_code_check(a.T, a.gamma)
        t = np.arange(a.T)
        run.table("positional_code", ["t", "code", "partial_sum", "closed_form_S"],
                  zip(t, rep.code, np.cumsum(rep.code), th.partial_sum_closed_form(a.gamma, t)))
        run.summary.update(increasing=rep.increasing, impulse_err=rep.impulse_partial_sum_err,
                           code_err=rep.code_partial_sum_err)
        _check(rep.ok, "positional code check failed")
    return EXIT_OK


# --------------------------------------------------------------------------
# comparators
# --------------------------------------------------------------------------

def cmd_compare(run):
    from . import comparators as cp

    a = run.args
    if a.kind == "attention":
        keys = "quasi" if a.diffuse else "random"
        A = cp.diffuse_attention_weights(a.T, a.spread, np.random.default_rng(a.seed), keys)
        s = cp.old_source_series(A)
        win = (max(2, a.T // 32), a.T - 1)
        fit = cp.fit_power_law(s, win)
        run.table("attention", ["lag", "value", "fit"],
                  zip(s.lags()[1:].astype(int), s.tail()[1:], fit.predict(s.lags()[1:])))
        run.summary.update(exponent=fit.exponent, window=list(win))
        _say(f"attention: fitted exponent {fit.exponent:.4f} (target -1)")
        _check(abs(fit.exponent + 1) <= 0.02, "attention dilution exponent off -1 by > 0.02")
    elif a.kind == "mamba":
        fit = cp.freeze_rate_fit(a.T, a.lam, a.cdelta, a.seed)
        ch = cp.failed_freeze_channel(a.T, a.lam, a.cdelta, np.random.default_rng(a.seed))
        s = cp.mamba_jacobian_series(ch)
        target = -a.lam * a.cdelta
        run.table("mamba", ["lag", "value", "fit"],
                  zip(s.lags().astype(int), s.tail(), fit.predict(s.lags())))
        run.summary.update(rate=fit.exponent, target=target)
        _say(f"mamba: fitted rate {fit.exponent:.5f} (target {target:.5f})")
        _check(abs(fit.exponent - target) <= 0.05 * abs(target), "freeze rate off by > 5%")
    else:
        sys_ = cp.LtiSystem.random_stable(np.random.default_rng(a.seed), rho=a.rho)
        r = cp.lti_impulse_response(sys_, a.ell_max)
        lags = r.series.lags()
        run.table("lti", ["lag", "value", "fit"],
                  zip(lags.astype(int), r.series.tail(),
                      r.fit.predict(lags) if r.fit else [math.nan] * len(lags)))
        rate = r.fit.exponent if r.fit else math.nan
        run.summary.update(rate=rate, log_rho=r.log_rho)
        _say(f"lti: fitted rate {rate:.5f}, log rho {r.log_rho:.5f}")
        _check(r.fit is not None and abs(rate - r.log_rho) <= 0.1 * abs(r.log_rho),
               "LTI rate off log(rho) by > 10%")
    return EXIT_OK


# --------------------------------------------------------------------------
# training, evaluation, Jacobians
# --------------------------------------------------------------------------

def _train_config(a):
    from .training import TrainConfig

    base = {}
    if a.config:
        with open(a.config) as fh:
            base = json.load(fh)
    cfg = TrainConfig.from_json(base) if base else TrainConfig()
    overrides = {"task": a.task, "mixer_kind": a.mixer, "steps": a.steps, "depth": a.depth,
                 "D": a.D, "d_k": a.d_k, "lr": a.lr, "batch": a.batch, "seed": a.seed,
                 "eval_every": a.eval_every, "n_train": a.n_train}
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg.validate()


def cmd_train(run):
    from .training import budget_report, save_checkpoint, train, write_metrics_csv

    cfg = _train_config(run.args)
    rep = budget_report(cfg)
    _say(f"parameter counts {rep['counts']} (matched spread {rep['max_rel_diff']:.2%})")
    res = train(cfg, log=None if run.args.quiet else _say)
    if run.args.format == "json":
        run.table("metrics", ["step", "split", "loss", "accuracy"], res.history)
    else:
        path = os.path.join(run.out, "metrics.csv")
        write_metrics_csv(path, res.history)
        run.files.append("metrics.csv")
    ck = os.path.join(run.out, "checkpoint.bin")
    save_checkpoint(ck, res.model, cfg, cfg.steps, res.rng_state)
    run.files.append("checkpoint.bin")
    val = res.rows("val")[-1]
    run.summary.update(initial_loss=res.initial_loss, final_loss=res.final_loss,
                       val_loss=val[2], val_accuracy=val[3], seconds=res.seconds,
                       param_counts=rep["counts"], train_config=cfg.to_json())
    _say(f"train loss {res.initial_loss:.4f} -> {res.final_loss:.4f}; val acc {val[3]:.4f}")
    return EXIT_OK


def cmd_eval(run):
    from .training import evaluate, load_checkpoint, make_dataset

    a = run.args
    ck = load_checkpoint(a.ckpt)
    cfg = ck.config
    if a.task and a.task != cfg.task:
        raise ConfigError(f"checkpoint was trained on {cfg.task!r}, not {a.task!r}")
    ds = make_dataset(cfg, a.split, a.n)
    loss, acc = evaluate(ck.model, ds)
    run.table("eval", ["split", "n", "max_lag", "loss", "accuracy"],
              [(a.split, len(ds), ds.max_lag(), loss, acc)])
    run.summary.update(loss=loss, accuracy=acc)
    _say(f"{a.split}: loss {loss:.4f} accuracy {acc:.4f}")
    return EXIT_OK


def cmd_jacobian(run):
    from . import jacobian as jb
    from .mixer import BlockParams, MixerConfig

    a = run.args
    cfg = MixerConfig(D=a.D, d_k=a.d_k, T_max=a.T)
    rows, worst, viol, betas = [], 0.0, 0, []
    for s in range(a.seeds):
        rng = np.random.default_rng([a.seed, s])
        p = BlockParams.init(cfg, rng)
        if a.uniform_feedback:
            p = jb.uniform_feedback_params(p, a.gamma)
        x = rng.standard_normal((a.T, a.D))
        rep = jb.sessa_tail_check(p, cfg, [x], taus=tuple(a.tau),
                                  c2=1.0 if a.uniform_feedback else None, strict=False)
        for _, t, tau, lag, n, e, ok in rep.pairs:
            rows.append((s, t, tau, lag, n, e, int(ok)))
        worst = max(worst, rep.max_ratio())
        viol += len(rep.violations)
        betas.append(rep.beta)
    run.table("jacobian", ["sample", "t", "tau", "lag", "norm", "envelope", "ok"], rows)
    run.summary.update(max_ratio=worst, violations=viol, beta_min=min(betas))
    _say(f"jacobian: {len(rows)} pairs, max norm/envelope {worst:.4g}, violations {viol}")
    _check(viol == 0, f"{viol} Jacobian envelope violations")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="sessa_out", help="output directory (created if absent)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    p = argparse.ArgumentParser(prog="sessa-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("theory", parents=[common], help="run a theory suite")
    t.add_argument("suite", choices=THEORY_SUITES)
    t.add_argument("--gamma", type=float, default=0.5)
    t.add_argument("--T", type=int, default=1024)
    t.add_argument("--tau", type=int, default=0)
    t.add_argument("--tau-max", type=int, default=4)
    t.add_argument("--c2", type=float, default=1.0)
    t.add_argument("--gamma-max", type=float, default=0.5)
    t.add_argument("--n-random", type=int, default=0, help="extra random admissible specs")
    t.add_argument("--random", action="store_true", help="impulse: sample a random admissible spec")
    t.add_argument("--k", type=int, default=2)
    t.add_argument("--beta", type=float, default=0.5)
    t.add_argument("--H", type=int, default=512)
    t.add_argument("--n-max", type=int, default=4096)
    t.add_argument("--fit-min", type=int, default=0)
    t.add_argument("--tol", type=float, default=0.05)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--d", type=float, default=1.0)
    t.add_argument("--lam", type=float, default=1.0)
    t.set_defaults(func=cmd_theory)

    c = sub.add_parser("compare", parents=[common], help="comparator decay laws")
    c.add_argument("kind", choices=COMPARE_KINDS)
    c.add_argument("--T", type=int, default=1025)
    c.add_argument("--spread", type=float, default=1.0)
    c.add_argument("--diffuse", action="store_true", default=True)
    c.add_argument("--random-keys", dest="diffuse", action="store_false")
    c.add_argument("--cdelta", type=float, default=0.2)
    c.add_argument("--lambda", dest="lam", type=float, default=1.0)
    c.add_argument("--rho", type=float, default=0.9)
    c.add_argument("--ell-max", type=int, default=200)
    c.set_defaults(func=cmd_compare)

    tr = sub.add_parser("train", parents=[common], help="train a token model")
    tr.add_argument("--config", help="JSON TrainConfig; flags override it")
    tr.add_argument("--task", choices=("mqar", "symbolsoup"))
    tr.add_argument("--mixer", choices=("sessa", "attention", "zoh_ssm", "sessa_no_feedback"))
    tr.add_argument("--steps", type=int)
    tr.add_argument("--depth", type=int)
    tr.add_argument("--D", type=int)
    tr.add_argument("--d-k", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--eval-every", type=int)
    tr.add_argument("--n-train", type=int)
    tr.add_argument("--quiet", action="store_true")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=("mqar", "symbolsoup"))
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--n", type=int, default=256)
    e.set_defaults(func=cmd_eval)

    j = sub.add_parser("jacobian", parents=[common], help="block Jacobian tail check")
    j.add_argument("--T", type=int, default=128)
    j.add_argument("--D", type=int, default=4)
    j.add_argument("--d-k", type=int, default=4)
    j.add_argument("--seeds", type=int, default=4)
    j.add_argument("--gamma", type=float, default=0.5)
    j.add_argument("--tau", type=int, nargs="+", default=[0])
    j.add_argument("--learned-feedback", dest="uniform_feedback", action="store_false",
                   help="keep the random feedback projections instead of zero logits")
    j.set_defaults(func=cmd_jacobian)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        run = Run(args, argv)
    except OSError as err:
        print(f"error: cannot create output directory: {err}", file=sys.stderr)
        return EXIT_USAGE
    status, code = "ok", EXIT_OK
    try:
        code = args.func(run)
    except CheckFailure as err:
        status, code = f"fail: {err}", EXIT_FAIL
    except TrainingError as err:
        status, code = f"diverged: {err}", EXIT_FAIL
    except (DomainError, InputError, ConfigError, RegimeError, CheckpointError) as err:
        status, code = f"error: {err}", EXIT_USAGE
    except (OSError, SessaLabError) as err:
        status, code = f"error: {err}", EXIT_USAGE
    if code != EXIT_OK:
        print(status, file=sys.stderr)
    run.manifest(status)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
