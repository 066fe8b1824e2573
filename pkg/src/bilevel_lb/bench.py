"""
Reference first-order bilevel algorithms run against the hard instances.

Every protocol algorithm talks to an :class:`~bilevel_lb.oracles.Oracle` and
announces its iterates through ``_Run.update`` so the zero-respecting span is
enforced end to end. Stationarity is measured with the analytic hyper-gradient,
which never enters an algorithm's information set.

Iterate ``x^t`` is the upper variable held after ``t`` oracle calls.
"""
import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .hyper import hyper_grad, stationarity
from .instance import BilevelPoint, derive_params, normalize_mode, project_domain
from .oracles import Oracle, ZeroRespectingViolation, make_rng

log = logging.getLogger(__name__)

ALGORITHMS = ("greedy_prober", "penalty_gd", "f2sa_style", "alt_sgd", "exact_hypergrad_diag")
PROTOCOL_ALGORITHMS = ALGORITHMS[:-1]
DIVERGENCE_FACTOR = 1e6
# active x coordinates of the deterministic prober sit at this multiple of x0,
# deep in the flat tail of Psi so the hyper-gradient vanishes once x_T is set
PROBER_X_MULT = 50.0


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    hyper: dict = field(default_factory=dict)
    zero_respecting: bool = True

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.name!r}; choose from {', '.join(ALGORITHMS)}")
        if self.name == "exact_hypergrad_diag" and self.zero_respecting:
            object.__setattr__(self, "zero_respecting", False)
        for k, v in self.hyper.items():
            if isinstance(v, (int, float)) and (v < 0 or not math.isfinite(v)):
                raise ValueError(f"hyperparameter {k}={v} must be finite and nonnegative")

    def get(self, key, default):
        return self.hyper.get(key, default)


@dataclass
class RunTrace:
    algorithm: str
    mode: str
    fc: dict
    seed: int
    budget: int
    oracle_calls: int
    chain_length: int
    reached_eps_at: int | None
    stationarity_series: list
    first_xT_nonzero: int | None
    min_stationarity_before_chain: float
    zero_respecting: bool
    failure: str | None = None
    events: list = field(default_factory=list, repr=False)

    @property
    def reached(self):
        return self.reached_eps_at is not None

    def ratio_to_lower_bound(self):
        if self.reached_eps_at is None:
            return None
        return self.reached_eps_at / self.chain_length

    def to_dict(self):
        d = asdict(self)
        d["events"] = [asdict(e) for e in self.events]
        return d


@dataclass(frozen=True)
class ScalingFitResult:
    axis: str
    exponent: float
    intercept: float
    r_squared: float
    points: tuple

    def to_dict(self):
        return {"axis": self.axis, "exponent": self.exponent, "intercept": self.intercept,
                "r_squared": self.r_squared, "points": [list(p) for p in self.points]}


class _Stop(Exception):
    pass


class _Run:
    """Per-run bookkeeping: meters calls and samples the stationarity of x^t."""

    def __init__(self, params, seed, budget, enforce, stride):
        self.params = params
        self.eps = params.fc.eps
        self.oracle = Oracle(params, seed=seed, enforce=enforce)
        self.rng = make_rng([seed, 1])
        self.budget = budget
        self.stride = max(1, int(stride))
        self.x = np.zeros(params.T)
        self._version = 0
        self._seen = -1
        self._last_val = None
        self.series = []
        self.reached = None
        self.first_xT = None
        self.min_before = math.inf
        self.initial = None
        self.failure = None

    @property
    def calls(self):
        return self.oracle.calls

    def observe(self, t=None, force=False):
        t = self.calls if t is None else t
        if self.x[-1] != 0 and self.first_xT is None:
            self.first_xT = t
        if not force and t % self.stride:
            return
        if self._seen != self._version:
            self._last_val = stationarity(self.params, self.x)
            self._seen = self._version
        val = self._last_val
        if not self.series or self.series[-1][0] != t:
            self.series.append((t, val))
        if self.initial is None:
            self.initial = max(val, np.finfo(float).tiny)
        if t < self.params.chain_length:
            self.min_before = min(self.min_before, val)
        if val < self.eps:
            self.reached = t
            raise _Stop
        if not math.isfinite(val) or val > DIVERGENCE_FACTOR * self.initial:
            self.failure = f"divergence: stationarity {val:.3e} at t={t}"
            raise _Stop

    def query(self, pt):
        self.observe()
        if self.calls >= self.budget:
            raise _Stop
        if self.params.stochastic:
            pt = project_domain(self.params, pt)
        return self.oracle.query(pt)

    def update(self, x, *ys):
        x = np.asarray(x, dtype=float)
        ys = list(ys)
        if self.params.stochastic:
            r = self.params.x_radius
            x = np.clip(x, -r, r)
            ys = [np.clip(y, -self.params.y_radius, self.params.y_radius) for y in ys]
        for y in ys:
            self.oracle.admit(BilevelPoint(x, y))
        if not ys:
            self.oracle.admit(BilevelPoint(x, np.zeros((self.params.T + 1, self.params.n))))
        if not np.array_equal(x, self.x):
            self.x = x
            self._version += 1
        return (x, *ys)


# ---------------------------------------------------------------------------
# Algorithms. Each runs until _Run raises _Stop.
# ---------------------------------------------------------------------------

def greedy_point(pr, support, x_mult=PROBER_X_MULT):
    """Newest point in the span: every active coordinate set large.

    Active y coordinates take value lam/C_l (chain argument 1); active x
    coordinates sit at a multiple of x0 (deterministic) or at the hypercube
    corner r_x lam/n (stochastic).
    """
    x_val = pr.x_radius if pr.stochastic else x_mult * pr.x0
    x = np.where(support.x_active, x_val, 0.0)
    y = np.where(support.y_active, pr.lam / pr.C_l, 0.0).reshape(pr.T + 1, pr.n)
    return BilevelPoint(x, y)


def _greedy_prober(run, spec):
    """Always query the newest span point; only supports of replies are used."""
    x_mult = spec.get("x_mult", PROBER_X_MULT)
    while True:
        pt = greedy_point(run.params, run.oracle.support, x_mult)
        run.update(pt.x, pt.y)
        run.query(BilevelPoint(run.x, pt.y))


def _penalty_gd(run, spec):
    """Gradient descent on f + s (g(x, y) - g(x, z)), z tracking y*(x) by inner GD."""
    pr = run.params
    Lg, Lf = pr.fc.L_g, pr.fc.L_f
    s = spec.get("penalty", 10.0)
    inner = spec.get("inner", max(1, math.ceil(pr.fc.kappa * math.log(1.0 / min(pr.fc.eps, 0.5)))))
    eta_y = spec.get("step_y", 1.0 / (Lf + s * Lg))
    eta_z = spec.get("step_z", 1.0 / Lg)
    eta_x = spec.get("step_x", 1.0 / (s * Lg))
    shape = (pr.T + 1, pr.n)
    x = run.x.copy()
    y = np.zeros(shape)
    z = np.zeros(shape)
    while True:
        for _ in range(int(inner)):
            r = run.query(BilevelPoint(x, z))
            z = z - eta_z * r.gg_y.reshape(shape)
            x, z = run.update(x, z)
        rz = run.query(BilevelPoint(x, z))
        ry = run.query(BilevelPoint(x, y))
        y = y - eta_y * (ry.gf_y + s * ry.gg_y).reshape(shape)
        gx = ry.gf_x + s * (ry.gg_x - rz.gg_x)
        x, y, z = run.update(x - eta_x * gx, y, z)


def _f2sa_style(run, spec):
    """Single loop: z on g, y on f/lam_t + g, x on the penalty gradient; lam_t grows linearly."""
    pr = run.params
    Lg, Lf = pr.fc.L_g, pr.fc.L_f
    lam0 = spec.get("lam0", 1.0)
    lam_rate = spec.get("lam_rate", 0.1)
    alpha = spec.get("alpha", 1.0 / Lg)
    beta = spec.get("beta", 1.0 / Lg)
    gamma_c = spec.get("gamma", 1.0 / Lf)
    shape = (pr.T + 1, pr.n)
    x = run.x.copy()
    y = np.zeros(shape)
    z = np.zeros(shape)
    k = 0
    while True:
        lam_t = lam0 + lam_rate * k
        rz = run.query(BilevelPoint(x, z))
        ry = run.query(BilevelPoint(x, y))
        z = z - alpha * rz.gg_y.reshape(shape)
        y = y - beta * (ry.gf_y / lam_t + ry.gg_y).reshape(shape)
        # gamma = 1/(lam_t L_f) on the lam_t-scaled penalty gradient
        gx = ry.gf_x + lam_t * (ry.gg_x - rz.gg_x)
        x, y, z = run.update(x - (gamma_c / lam_t) * gx, y, z)
        k += 1


def _alt_sgd(run, spec):
    """Alternating stochastic descent on a fixed-penalty min-max reformulation."""
    pr = run.params
    Lg, Lf = pr.fc.L_g, pr.fc.L_f
    s = spec.get("penalty", 10.0)
    shape = (pr.T + 1, pr.n)
    x = run.x.copy()
    y = np.zeros(shape)
    z = np.zeros(shape)
    k = 1
    while True:
        rz = run.query(BilevelPoint(x, z))
        z = z - spec.get("step_z", 1.0 / (2 * Lg)) * rz.gg_y.reshape(shape)
        x, z = run.update(x, z)
        ry = run.query(BilevelPoint(x, y))
        y = y - spec.get("step_y", 1.0 / (2 * (Lf + s * Lg))) * (ry.gf_y + s * ry.gg_y).reshape(shape)
        gx = ry.gf_x + s * (ry.gg_x - rz.gg_x)
        step_x = spec.get("step_x", 1.0 / (2 * Lf * math.sqrt(k))) / s
        x, y, z = run.update(x - step_x * gx, y, z)
        k += 1


def _exact_hypergrad(run, spec):
    """Non-protocol diagnostic: (projected) gradient descent on H with step 1/L_h."""
    pr = run.params
    step = spec.get("step", 1.0 / pr.L_h)
    while True:
        run.observe()
        if run.calls >= run.budget:
            raise _Stop
        _, g = hyper_grad(pr, run.x)
        run.oracle.calls += 1
        x = run.x - step * g
        if pr.stochastic:
            x = np.clip(x, -pr.x_radius, pr.x_radius)
        if not np.array_equal(x, run.x):
            run.x = x
            run._version += 1


_IMPL = {
    "greedy_prober": _greedy_prober,
    "penalty_gd": _penalty_gd,
    "f2sa_style": _f2sa_style,
    "alt_sgd": _alt_sgd,
    "exact_hypergrad_diag": _exact_hypergrad,
}


def run_algorithm(spec, fc, mode, seed, budget, stride=1, params=None, check_floor=True):
    """Run ``spec`` on the instance derived from ``fc``; never raises for run failures."""
    if not (isinstance(budget, (int, np.integer)) and budget >= 0):
        raise ValueError("budget must be a finite nonnegative integer")
    mode = normalize_mode(mode)
    params = params if params is not None else derive_params(fc, mode)
    run = _Run(params, seed, int(budget), spec.zero_respecting, stride)
    try:
        _IMPL[spec.name](run, spec)
    except _Stop:
        pass
    except ZeroRespectingViolation as exc:
        run.failure = f"zero-respecting violation: {exc.variable}[{exc.flat_index}] at query {run.calls}"
    except FloatingPointError as exc:
        run.failure = f"numerical failure: {exc}"
    if run.reached is None and run.failure is None:
        # close the series at the budget
        try:
            run.observe(force=True)
        except _Stop:
            pass
    tr = RunTrace(
        algorithm=spec.name, mode=mode, fc=asdict(params.fc), seed=int(seed), budget=int(budget),
        oracle_calls=int(run.calls), chain_length=params.chain_length,
        reached_eps_at=run.reached, stationarity_series=[(int(t), float(v)) for t, v in run.series],
        first_xT_nonzero=run.first_xT, min_stationarity_before_chain=float(run.min_before),
        zero_respecting=spec.zero_respecting, failure=run.failure,
        events=list(run.oracle.support.events),
    )
    if (check_floor and mode == "deterministic" and spec.zero_respecting
            and tr.reached_eps_at is not None and tr.reached_eps_at < params.chain_length):
        tr.failure = (f"lower-bound floor broken: reached eps at {tr.reached_eps_at} "
                      f"< Tn = {params.chain_length}")
    return tr


def fit_scaling(points, axis, min_points=4):
    """Least-squares slope of log(oracle_calls) against log(axis value).

    ``points`` holds (value, oracle_calls) pairs, or RunTraces whose
    ``fc`` provides the axis value (unreached traces are dropped).
    """
    pairs = []
    for p in points:
        if isinstance(p, RunTrace):
            if not p.reached:
                log.warning("excluding unreached run (%s, seed %d) from fit", p.algorithm, p.seed)
                continue
            val = p.fc["L_g"] / p.fc["mu"] if axis == "kappa" else p.fc[axis]
            pairs.append((float(val), float(p.reached_eps_at)))
        else:
            pairs.append((float(p[0]), float(p[1])))
    if len(pairs) < min_points:
        raise ValueError(f"need at least {min_points} grid points for a fit, got {len(pairs)}")
    lx = np.log([a for a, _ in pairs])
    ly = np.log([b for _, b in pairs])
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    r2 = min(1.0, max(0.0, r2))
    return ScalingFitResult(axis, float(slope), float(icpt), r2, tuple(sorted(pairs)))


CSV_FIELDS = ("algorithm", "kappa", "eps", "sigma", "seed", "oracle_calls", "reached",
              "ratio_to_lower_bound")


def report(traces, fits):
    """Return (csv_text, json_summary_dict)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    failures = []
    for tr in traces:
        ratio = tr.ratio_to_lower_bound()
        w.writerow([tr.algorithm, repr(tr.fc["L_g"] / tr.fc["mu"]), repr(tr.fc["eps"]),
                    repr(tr.fc["sigma"]), tr.seed,
                    tr.reached_eps_at if tr.reached else tr.oracle_calls,
                    "true" if tr.reached else "false",
                    "" if ratio is None else repr(ratio)])
        if tr.failure:
            failures.append({"algorithm": tr.algorithm, "fc": tr.fc, "seed": tr.seed,
                             "failure": tr.failure})
    summary = {"fits": [f.to_dict() for f in fits], "cells": len(traces), "failures": failures}
    return buf.getvalue(), summary


def pool_size():
    env = os.environ.get("THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_grid(spec, fcs, mode, seeds, budget, stride=1):
    """Run every (fc, seed) cell; results come back in input order."""
    cells = [(fc, s) for fc in fcs for s in seeds]

    def one(cell):
        return run_algorithm(spec, cell[0], mode, cell[1], budget, stride)

    with ThreadPoolExecutor(max_workers=pool_size()) as ex:
        return list(ex.map(one, cells))


def summary_json(summary):
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"
