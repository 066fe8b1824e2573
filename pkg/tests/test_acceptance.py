"""End-to-end acceptance criteria, each at its stated tolerance.

Every test prints one PASS/FAIL line (visible even under output capture).
"""
import itertools
import json
import math
import time

import numpy as np
import pytest

from bilevel_lb import cli, hyper
from bilevel_lb.bench import ALGORITHMS, AlgorithmSpec, fit_scaling, run_algorithm
from bilevel_lb.instance import FunctionClassParams, derive_params
from bilevel_lb.tridiag import C_HIGH, C_LOW, resolvent_last_column
from bilevel_lb.verifier import (
    chain_trace, check_activation_rate, check_cross_block, check_domain_containment,
    check_smooth_f, check_strong_convexity, check_third_differences, check_variance_and_bias,
    fd_hypergrad_error, frontier_states, projected_floor, projected_floor_probes,
)

GRID_KAPPA = (25.0, 100.0, 400.0)
GRID_EPS = (0.2, 0.1, 0.05)
GRID_SIGMA = (0.5, 1.0)
# Delta = 10 L_f keeps every cell of the grid non-empty (T >= 1)
GRID_DELTA = 10.0
ZERO_RESPECTING = [a for a in ALGORITHMS if AlgorithmSpec(a).zero_respecting]


def report(capsys, number, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s / {limit:.0f}s) {detail}")
    assert ok, detail


def det_grid():
    return [derive_params(FunctionClassParams(1.0, k, 1.0, GRID_DELTA, e), "det")
            for k in GRID_KAPPA for e in GRID_EPS]


def stoc_grid():
    return [derive_params(FunctionClassParams(1.0, k, 1.0, GRID_DELTA, e, s), "stoc")
            for k in GRID_KAPPA for e in GRID_EPS for s in GRID_SIGMA]


def stoc_with_p(Lg, Delta, eps, p):
    base = derive_params(FunctionClassParams(1.0, Lg, 1.0, Delta, eps, 1.0), "stoc")
    sigma = math.sqrt(base.c3 * Lg**2 * base.lam**2 / p)
    return derive_params(FunctionClassParams(1.0, Lg, 1.0, Delta, eps, sigma), "stoc")


def sub_unit_p_instances():
    """Stochastic instances with p < 1 (every grid cell has p = 1)."""
    return [stoc_with_p(40.0, 10.0, 0.18, 0.3), stoc_with_p(40.0, 10.0, 0.13, 0.2),
            stoc_with_p(100.0, 10.0, 0.1, 0.5)]


def test_criterion_01_resolvent_bounds(capsys):
    t0 = time.perf_counter()
    worst, worst_n = math.inf, None
    for n in range(1, 513):
        s = resolvent_last_column(n).values
        slack = [s[0] - C_LOW * n, C_HIGH * n - s[-1]]
        if n > 1:
            slack.append(float(np.diff(s).min()))
        if min(slack) < worst:
            worst, worst_n = min(slack), n
    ok = worst > 0 and C_LOW == 1 - math.pi**2 / 12 and C_HIGH == 1 + math.pi**2 / 12
    report(capsys, 1, ok, f"min slack {worst:.3e} at n={worst_n} over n=1..512",
           time.perf_counter() - t0, 5)


def test_criterion_02_function_class(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    failures = []
    grid = det_grid()
    for pr in grid:
        for fn, cid in ((check_strong_convexity, "strong_convexity"), (check_smooth_f, "smooth_f"),
                        (check_cross_block, "cross_block"), (check_third_differences, "rho")):
            r = fn(pr, rng, cid)
            if not r.passed:
                failures.append(f"kappa={pr.fc.kappa} eps={pr.fc.eps} {cid}: {r.details}")
        if pr.fc.L_g / (4 * pr.n**2 + 1) < pr.fc.mu:
            failures.append(f"kappa={pr.fc.kappa}: L_g/(4n^2+1) < mu")
    report(capsys, 2, not failures,
           failures[0] if failures else f"{len(grid)} instances: lambda_min exact, Gershgorin <= L_f, "
           f"||grad_xy g|| = L_g, third differences <= 1e-8", time.perf_counter() - t0, 60)


def test_criterion_03_hypergradient(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cells = []
    for k, e in itertools.product(GRID_KAPPA, GRID_EPS):
        try:
            cells.append(derive_params(FunctionClassParams(1.0, k, 1.0, 1.0, e), "det"))
        except ValueError:
            pass  # empty chain at Delta = L_f
        # sigma does not enter H, so one stochastic cell per (kappa, eps)
        cells.append(derive_params(FunctionClassParams(1.0, k, 1.0, GRID_DELTA, e, 1.0), "stoc"))
    worst = 0.0
    for pr in cells:
        for _ in range(100):
            if pr.stochastic:
                x = rng.uniform(-pr.x_radius, pr.x_radius, pr.T)
            else:
                x = rng.uniform(-3, 3, pr.T) * pr.x0
            worst = max(worst, fd_hypergrad_error(pr, x, hyper.hyper_grad(pr, x)[1]))
    report(capsys, 3, worst <= 1e-6,
           f"max relative error {worst:.2e} over {len(cells)} instances x 100 points",
           time.perf_counter() - t0, 30)


def test_criterion_04_deterministic_chain(capsys):
    t0 = time.perf_counter()
    fc = FunctionClassParams(1.0, 100.0, 1.0, 1.0, 0.2)
    pr = derive_params(fc, "det")
    lam = fc.eps * pr.L_const / (fc.L_f * pr.C_tilde * pr.n)
    T = math.floor(fc.Delta * pr.L_const / (12 * lam**2 * fc.L_f))
    failures = []
    if pr.lam != lam or pr.T != T:
        failures.append(f"closed form mismatch: T={pr.T} vs {T}, lam={pr.lam} vs {lam}")
    Tn = T * pr.n
    budget = 50 * Tn
    for name in ZERO_RESPECTING:
        tr = run_algorithm(AlgorithmSpec(name), fc, "det", 0, budget, params=pr)
        pre = [(t, v) for t, v in tr.stationarity_series if t < Tn]
        if tr.failure:
            failures.append(f"{name}: {tr.failure}")
        if tr.first_xT_nonzero is not None and tr.first_xT_nonzero < Tn:
            failures.append(f"{name}: x_T nonzero at t={tr.first_xT_nonzero} < Tn={Tn}")
        if [t for t, _ in pre] != list(range(Tn)):
            failures.append(f"{name}: stationarity not recorded at every t < Tn")
        bad = [(t, v) for t, v in pre if not v >= fc.eps]
        if bad:
            failures.append(f"{name}: ||grad H(x^t)|| = {bad[0][1]} < eps at t={bad[0][0]}")
    report(capsys, 4, not failures,
           failures[0] if failures else f"n={pr.n}, T={T}, Tn={Tn}; {len(ZERO_RESPECTING)} algorithms "
           f"keep x_T = 0 and ||grad H|| >= eps for t < Tn", time.perf_counter() - t0, 120)


def _greedy_calls(fc):
    pr = derive_params(fc, "det")
    tr = run_algorithm(AlgorithmSpec("greedy_prober"), fc, "det", 0, 10 * pr.chain_length + 100,
                       params=pr)
    assert tr.reached and tr.failure is None
    return tr


def test_criterion_05_scaling_exponents(capsys):
    t0 = time.perf_counter()
    # the kappa sweep runs at eps = 0.2 to cap T
    eps_fixed, kappa_fixed = 0.2, 100.0
    by_kappa = [_greedy_calls(FunctionClassParams(1.0, k, 1.0, GRID_DELTA, eps_fixed))
                for k in (16.0, 36.0, 64.0, 100.0, 144.0)]
    by_eps = [_greedy_calls(FunctionClassParams(1.0, kappa_fixed, 1.0, GRID_DELTA, e))
              for e in GRID_EPS]
    fk = fit_scaling(by_kappa, "kappa")
    # the criterion's epsilon grid has three values
    fe = fit_scaling(by_eps, "eps", min_points=3)
    ns = [derive_params(FunctionClassParams(1.0, k, 1.0, GRID_DELTA, eps_fixed), "det").n
          for k in (16.0, 36.0, 64.0, 100.0, 144.0)]
    eff = fit_scaling([(4 * n * n + 1, t.reached_eps_at) for n, t in zip(ns, by_kappa)], "kappa")
    ok_k = abs(fk.exponent - 1.5) <= 0.1
    ok_e = abs(fe.exponent + 2.0) <= 0.1
    report(capsys, 5, ok_k and ok_e,
           f"kappa slope {fk.exponent:.4f} (target 1.5 +- 0.1, {'ok' if ok_k else 'OUT'}; n={ns}, "
           f"slope vs 4n^2+1 = {eff.exponent:.4f}); eps slope {fe.exponent:.4f} "
           f"(target -2 +- 0.1, {'ok' if ok_e else 'OUT'})", time.perf_counter() - t0, 300)


def test_criterion_06_oracle_statistics(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    failures, notes = [], []
    instances = sub_unit_p_instances()[:2] + [
        derive_params(FunctionClassParams(1.0, 100.0, 1.0, GRID_DELTA, 0.1, 1.0), "stoc")]
    for pr in instances:
        states = frontier_states(pr)
        res = check_variance_and_bias(pr, rng, "var", "bias", draws=100_000, states=states)
        res.append(check_activation_rate(pr, rng, "rate", draws=10_000, states=states))
        for r in res:
            if not r.passed:
                failures.append(f"p={pr.p:.3g} {r.check_id}: {r.details}")
        notes.append(f"p={pr.p:.2g}")
    report(capsys, 6, not failures,
           failures[0] if failures else f"variance, unbiasedness and activation rate hold on "
           f"{', '.join(notes)}", time.perf_counter() - t0, 60)


def test_criterion_07_stochastic_delay(capsys):
    t0 = time.perf_counter()
    delta, runs = 0.5, 200
    lines, ok = [], True
    for p in (0.2, 0.05, 0.5):
        pr = stoc_with_p(40.0, 10.0, 0.13, p)
        assert (pr.n, pr.T) == (3, 8) and math.isclose(pr.p, p)
        t = math.floor(((pr.n - 1) * pr.T - 1 - math.log(2)) / (2 * pr.p))
        zero = 0
        for seed in range(runs):
            ct = chain_trace(pr.fc, "stoc", seed, t, params=pr)
            ok &= ct.ok
            zero += ct.xT_activation_query is None
        frac = zero / runs
        ok &= frac >= 1 - delta - 0.1
        lines.append(f"p={p}: t={t}, x_T=0 in {frac:.3f} of runs")
    report(capsys, 7, ok, "; ".join(lines) + f" (need >= {1 - delta - 0.1:.1f})",
           time.perf_counter() - t0, 180)


def test_criterion_08_stationarity_floor(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    failures, probes = [], 0
    for pr in stoc_grid() + sub_unit_p_instances():
        floor = projected_floor(pr)
        for x in projected_floor_probes(pr, rng):
            _, g = hyper.hyper_grad(pr, x)
            probes += 1
            if not hyper.projected_mapping(pr, x, g) >= floor:
                failures.append(f"kappa={pr.fc.kappa} eps={pr.fc.eps}: probe below floor {floor}")
        if pr.T * pr.n <= 200:
            for name in ZERO_RESPECTING:
                tr = run_algorithm(AlgorithmSpec(name), pr.fc, "stoc", 0, 4 * pr.chain_length,
                                   params=pr)
                pre = [v for t, v in tr.stationarity_series
                       if tr.first_xT_nonzero is None or t < tr.first_xT_nonzero]
                probes += len(pre)
                if pre and min(pre) < floor:
                    failures.append(f"{name} kappa={pr.fc.kappa} eps={pr.fc.eps}: iterate below floor")
    report(capsys, 8, not failures,
           failures[0] if failures else f"{probes} pre-chain-end iterates, zero below c2 L_f n lam/L",
           time.perf_counter() - t0, 60)


def test_criterion_09_domain_containment(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    failures = []
    for pr in stoc_grid() + sub_unit_p_instances():
        r = check_domain_containment(pr, rng, "containment", samples=1000)
        if not r.passed:
            failures.append(r.details)
        if pr.T <= 10:
            # explicit enumeration of every hypercube corner
            for signs in itertools.product((-1.0, 1.0), repeat=pr.T):
                y = hyper.lower_level_solution(pr, pr.x_radius * np.array(signs))
                if not np.abs(y).max() < pr.y_radius:
                    failures.append(f"corner {signs} leaves the box")
                    break
    report(capsys, 9, not failures,
           failures[0] if failures else "||y*(x)||_inf < r_y lam at all corners and 1e3 random x",
           time.perf_counter() - t0, 10)


REPRO_COMMANDS = [
    ["params", "--Lg", "100", "--eps", "0.1"],
    ["params", "--Lg", "40", "--eps", "0.18", "--Delta", "10", "--mode", "stoc", "--sigma", "1"],
    ["verify", "--Lg", "25", "--eps", "0.1", "--seed", "7"],
    ["verify", "--Lg", "25", "--eps", "0.2", "--Delta", "10", "--mode", "stoc", "--sigma", "0.05"],
    ["trace", "--Lg", "40", "--eps", "0.18", "--Delta", "10", "--mode", "stoc", "--sigma", "3",
     "--seed", "4"],
    ["bench", "--Lg", "40", "--eps", "0.18", "--Delta", "10", "--mode", "stoc", "--sigma", "3",
     "--alg", "f2sa_style", "--alg", "greedy_prober", "--budget", "300", "--runs", "2"],
    ["bench", "--Delta", "10", "--eps", "0.1", "--grid", "kappa=25,100", "--format", "csv"],
]


def test_criterion_10_reproducibility(capsys, tmp_path):
    t0 = time.perf_counter()
    failures = []
    for k, cmd in enumerate(REPRO_COMMANDS):
        blobs = []
        for rep in range(2):
            out = tmp_path / f"{k}_{rep}.out"
            code = cli.main(cmd + ["--out", str(out)])
            if code not in (0, 1):
                failures.append(f"{cmd[0]} exited {code}")
            blobs.append(out.read_bytes())
        if blobs[0] != blobs[1]:
            failures.append(f"{' '.join(cmd)}: reports differ")
        if cmd[-1] != "csv":
            json.loads(blobs[0])
    capsys.readouterr()
    report(capsys, 10, not failures,
           failures[0] if failures else f"{len(REPRO_COMMANDS)} invocations byte-identical on rerun",
           time.perf_counter() - t0, 120)
