"""
Numerical certification suite for a derived instance.

Each check returns a :class:`CheckResult` whose ``margin`` is the signed
slack of the inequality it tests (positive iff it passes). Structural checks
with no natural slack use +1/-1. Checks never raise; an internal error turns
into a failed result.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import hyper
from .bench import greedy_point, pool_size
from .instance import (
    BilevelPoint, derive_params, eval_g, grad_f, grad_g, hess_f, normalize_mode, STOCHASTIC,
)
from .oracles import (
    Oracle, SupportState, deterministic_query, gradient_moments, make_rng, span_update,
    stochastic_query,
)
from .tridiag import C_HIGH, C_LOW, build_laplacian, resolvent_last_column, spectral_basis

SUITE_VERSION = "1.0"
PASS, FAIL, SKIPPED = "pass", "fail", "skipped"
REL = 1e-12

MC_DRAWS = 100_000
MC_FRONTIER_DRAWS = 10_000
MAX_FRONTIER_STATES = 8


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    instance: str
    status: str
    margin: float
    details: str

    @property
    def passed(self):
        return self.status == PASS

    def to_dict(self):
        return asdict(self)


def _ineq(check_id, digest, value, bound, details, upper=True):
    """Result for value <= bound (upper) or value >= bound; equality passes."""
    slack = (bound - value) if upper else (value - bound)
    margin = float(slack + REL * abs(bound))
    ok = math.isfinite(margin) and margin > 0
    if not math.isfinite(margin):
        margin = -1.0
    op = "<=" if upper else ">="
    return CheckResult(check_id, digest, PASS if ok else FAIL, margin,
                       f"{details}: {value:.12g} {op} {bound:.12g}")


def _flag(check_id, digest, ok, details):
    return CheckResult(check_id, digest, PASS if ok else FAIL, 1.0 if ok else -1.0, details)


def _random_chain_point(pr, rng, spread=4.0):
    """Point whose chain arguments are uniform in [-spread, spread]."""
    c = min(pr.C_l, pr.C_r)
    y = rng.uniform(-spread, spread, (pr.T + 1, pr.n)) * pr.lam / c
    x = rng.uniform(-spread, spread, pr.T) * pr.x0
    return BilevelPoint(x, y)


def _random_domain_point(pr, rng):
    x = rng.uniform(-pr.x_radius, pr.x_radius, pr.T)
    y = rng.uniform(-pr.y_radius, pr.y_radius, (pr.T + 1, pr.n))
    return BilevelPoint(x, y)


# ---------------------------------------------------------------------------
# Function-class membership
# ---------------------------------------------------------------------------

def check_strong_convexity(pr, rng, cid):
    n = pr.n
    sb = spectral_basis(n)
    lam_min = pr.g_coef * (1.0 / n**2 + float(sb.eigenvalues.min()))
    closed = pr.fc.L_g / (4 * n * n + 1)
    if not math.isclose(lam_min, closed, rel_tol=REL):
        return _flag(cid, pr.digest(), False, f"lambda_min {lam_min} != L_g/(4n^2+1) = {closed}")
    detail = f"n={n}, lambda_min(grad_yy g) = L_g/(4n^2+1) vs mu"
    if n <= 64:
        dense = pr.g_coef * (np.eye(n) / n**2 + build_laplacian(n).dense())
        lam_dense = float(np.linalg.eigvalsh(dense)[0])
        if not math.isclose(lam_dense, lam_min, rel_tol=1e-9, abs_tol=1e-12):
            return _flag(cid, pr.digest(), False, f"spectral formula {lam_min} != dense {lam_dense}")
    return _ineq(cid, pr.digest(), lam_min, pr.fc.mu, detail, upper=False)


def check_smooth_g(pr, rng, cid):
    n = pr.n
    lam_max = pr.g_coef * (1.0 / n**2 + float(spectral_basis(n).eigenvalues.max()))
    return _ineq(cid, pr.digest(), lam_max, pr.fc.L_g, "||grad_yy g||_2")


def check_cross_block(pr, rng, cid):
    T, n = pr.T, pr.n
    rows = np.arange(T)
    cols = np.arange(1, T + 1) * n + n - 1
    B = sp.csr_matrix((np.full(T, -pr.fc.L_g), (rows, cols)), shape=(T, n * (T + 1)))
    # B must reproduce the x-gradient of g, which is linear in y
    for _ in range(3):
        y = rng.standard_normal((T + 1, n))
        gx, _ = grad_g(pr, BilevelPoint(np.zeros(T), y))
        if not np.allclose(gx, B @ y.reshape(-1), rtol=1e-13, atol=0):
            return _flag(cid, pr.digest(), False, "cross block does not match grad_x g")
    gram = (B @ B.T).tocoo()
    off = gram.row != gram.col
    if np.any(gram.data[off] != 0):
        return _flag(cid, pr.digest(), False, "Gram of cross block is not diagonal")
    norm = math.sqrt(float(gram.diagonal().max()))
    err = abs(norm - pr.fc.L_g)
    tol = REL * pr.fc.L_g
    return CheckResult(cid, pr.digest(), PASS if err <= tol else FAIL, float(tol - err + 1e-300),
                       f"||grad_xy g||_2 = {norm:.15g}, L_g = {pr.fc.L_g:.15g}")


def check_smooth_f(pr, rng, cid, samples=200):
    worst = 0.0
    for k in range(samples):
        pt = _random_chain_point(pr, rng, spread=3.0 if k % 2 else 1.5)
        d, o = hess_f(pr, pt)
        rows = np.abs(d)
        rows[:-1] += np.abs(o)
        rows[1:] += np.abs(o)
        worst = max(worst, float(rows.max()))
    return _ineq(cid, pr.digest(), worst, pr.fc.L_f,
                 f"max Gershgorin row sum of grad_yy f over {samples} points")


def check_grad_f_bound(pr, rng, cid, samples=10_000):
    per_entry = pr.c1 * pr.lam * pr.fc.L_f / pr.L_const
    bound_t = math.sqrt(2 * pr.T) * per_entry
    bound_delta = math.sqrt(2.0) * pr.c1 * pr.fc.L_f * math.sqrt(
        pr.fc.Delta / (12 * pr.fc.L_f * pr.L_const))
    worst = 0.0
    for _ in range(samples):
        _, gy = grad_f(pr, _random_chain_point(pr, rng))
        worst = max(worst, float(np.linalg.norm(gy)))
    res = _ineq(cid, pr.digest(), worst, bound_t,
                f"max ||grad_y f||_2 over {samples} points vs sqrt(2T) c1 lam L_f/L "
                f"(gap-form bound {bound_delta:.6g})")
    if bound_t > bound_delta * (1 + REL):
        return _flag(cid, pr.digest(), False, "chain budget lam sqrt(T) exceeds its gap-derived cap")
    return res


def check_third_differences(pr, rng, cid, trials=20):
    worst = 0.0
    for _ in range(trials):
        p = _random_chain_point(pr, rng)
        d = _random_chain_point(pr, rng)
        pts = [BilevelPoint(p.x + k * d.x, p.y + k * d.y) for k in range(4)]
        vals = [eval_g(pr, q) for q in pts]
        scale = max(abs(v) for v in vals) + 1.0
        worst = max(worst, abs(vals[3] - 3 * vals[2] + 3 * vals[1] - vals[0]) / scale)
        grads = [np.concatenate(grad_g(pr, q)) for q in pts[:3]]
        gscale = max(float(np.abs(g).max()) for g in grads) + 1.0
        worst = max(worst, float(np.abs(grads[2] - 2 * grads[1] + grads[0]).max()) / gscale)
    return _ineq(cid, pr.digest(), worst, 1e-8, "relative third difference of g (rho = 0)")


# ---------------------------------------------------------------------------
# Resolvent and constants
# ---------------------------------------------------------------------------

def resolvent_margin(n):
    """Smallest slack among C_LOW n <= S_1n <= S_in (monotone) <= S_nn <= C_HIGH n."""
    v = resolvent_last_column(n).values
    slacks = [v[0] - C_LOW * n, C_HIGH * n - v[-1]]
    if n > 1:
        slacks.append(float(np.diff(v).min()))
    return float(min(slacks))


def check_resolvent(pr, rng, cid):
    m = resolvent_margin(pr.n)
    v = resolvent_last_column(pr.n)
    return CheckResult(cid, pr.digest(), PASS if m > 0 else FAIL, m,
                       f"n={pr.n}: {C_LOW * pr.n:.6g} <= S_1n={v.s_1n:.6g} <= ... <= "
                       f"S_nn={v.s_nn:.6g} <= {C_HIGH * pr.n:.6g}, column increasing")


def check_tilde_c(pr, rng, cid):
    n = pr.n
    errs = [abs(pr.C_l * pr.M_nn / n - pr.C_tilde) / pr.C_tilde,
            abs(pr.C_r * pr.M_1n / n - pr.C_tilde) / pr.C_tilde,
            abs(pr.x0 - pr.lam / (pr.C_tilde * n)) / pr.x0]
    err = max(errs)
    return CheckResult(cid, pr.digest(), PASS if err <= REL else FAIL, float(REL - err + 1e-300),
                       f"C_l M_nn/n = C_r M_1n/n = C_tilde = {pr.C_tilde}; max rel err {err:.3e}")


# ---------------------------------------------------------------------------
# Hyper-objective
# ---------------------------------------------------------------------------

def grad_floor_probes(pr, rng, count=10):
    T, x0 = pr.T, pr.x0
    probes = [np.zeros(T)]
    for k in sorted({1, T // 2, T - 1}):
        if 0 < k < T:
            x = np.zeros(T)
            x[:k] = 2 * x0
            probes.append(x)
    while len(probes) < count:
        if len(probes) % 2:
            x = rng.uniform(-0.99, 0.99, T) * x0
        else:
            x = rng.uniform(-3, 3, T) * x0
            x[rng.integers(T)] = rng.uniform(-0.99, 0.99) * x0
        probes.append(x)
    return probes


def check_grad_floor(pr, rng, cid):
    margins = []
    for x in grad_floor_probes(pr, rng):
        holds, j = hyper.lemma_grad_lower_bound(pr, x)
        small = np.flatnonzero(np.abs(x) < x0_threshold(pr))
        if j != int(small[0]) + 1:
            return _flag(cid, pr.digest(), False, f"witness {j} is not the first small coordinate")
        margins.append(float(np.linalg.norm(hyper.hyper_grad(pr, x)[1])) - pr.grad_scale)
    m = min(margins)
    return _ineq(cid, pr.digest(), m + pr.grad_scale, pr.grad_scale,
                 f"min ||grad H|| over {len(margins)} probes vs lam L_f C n / L", upper=False)


def x0_threshold(pr):
    return pr.lam / (pr.C_tilde * pr.n)


def check_gap(pr, rng, cid):
    gb = hyper.gap_bound(pr, starts=32, seed=int(rng.integers(2**31)))
    if gb.H0 > 0:
        return _flag(cid, pr.digest(), False, f"H(0) = {gb.H0} > 0")
    if gb.descent_inf < gb.analytic_floor * (1 + REL):
        return _flag(cid, pr.digest(), False, "descent went below the analytic floor")
    gap = gb.H0 - min(gb.descent_inf, gb.analytic_floor)
    return _ineq(cid, pr.digest(), gap, gb.bound,
                 f"H(0) - floor (H0={gb.H0:.6g}, descent inf={gb.descent_inf:.6g}, "
                 f"floor={gb.analytic_floor:.6g}) vs 12 lam^2 L_f T / L")


def check_hyper_consistency(pr, rng, cid, points=100, fd_points=20):
    worst_h = worst_g = worst_res = 0.0
    for k in range(points):
        x = rng.uniform(-3, 3, pr.T) * pr.x0
        if pr.stochastic:
            x = np.clip(x, -pr.x_radius, pr.x_radius)
        H = hyper.hyper_value(pr, x)
        Hc = hyper.composed_value(pr, x)
        worst_h = max(worst_h, abs(H - Hc) / max(abs(Hc), pr.scale))
        res = hyper.lower_level_residual(pr, x)
        worst_res = max(worst_res, res / (pr.fc.L_g * (np.abs(x).max() + pr.x0)))
        if k < fd_points:
            _, g = hyper.hyper_grad(pr, x)
            worst_g = max(worst_g, fd_hypergrad_error(pr, x, g))
    ok = worst_h <= 1e-10 and worst_g <= 1e-6 and worst_res <= 1e-9
    margin = min(1e-10 - worst_h, 1e-6 - worst_g, 1e-9 - worst_res)
    return CheckResult(cid, pr.digest(), PASS if ok else FAIL, float(margin),
                       f"H vs f(x, y*(x)) rel {worst_h:.2e}; grad H vs central differences "
                       f"rel {worst_g:.2e}; lower-level residual {worst_res:.2e}")


def fd_hypergrad_error(pr, x, g, h=None):
    """Relative error of g against central differences of f(., y*(.))."""
    h = 1e-6 * pr.x0 if h is None else h
    fd = np.empty(pr.T)
    for i in range(pr.T):
        e = np.zeros(pr.T)
        e[i] = h
        fd[i] = (hyper.composed_value(pr, x + e) - hyper.composed_value(pr, x - e)) / (2 * h)
    return float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), pr.grad_scale))


def lh_power_estimate(pr, x, rng, iters=50, h=1e-5):
    """Largest |eigenvalue| of grad^2 H at x by power iteration on difference quotients."""
    v = rng.standard_normal(pr.T)
    v /= np.linalg.norm(v)
    step = h * pr.x0
    est = 0.0
    for _ in range(iters):
        hv = (hyper.hyper_grad(pr, x + step * v)[1] - hyper.hyper_grad(pr, x - step * v)[1]) / (2 * step)
        nrm = float(np.linalg.norm(hv))
        if nrm == 0:
            return 0.0
        est = nrm
        v = hv / nrm
    return est


def check_lh(pr, rng, cid, points=100):
    worst = 0.0
    for _ in range(points):
        x = rng.uniform(-3, 3, pr.T) * pr.x0
        worst = max(worst, lh_power_estimate(pr, x, rng))
    return _ineq(cid, pr.digest(), worst, pr.L_h,
                 f"power-iteration ||grad^2 H||_2 over {points} points vs L_h = c0 n^2 L_f/L")


# ---------------------------------------------------------------------------
# Chain trace
# ---------------------------------------------------------------------------

@dataclass
class ChainTrace:
    mode: str
    seed: int
    n: int
    T: int
    queries: int
    xT_activation_query: int | None
    violations: list
    delays: dict
    events: list = field(default_factory=list, repr=False)
    jsonl: str = field(default="", repr=False)

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        d = asdict(self)
        d.pop("jsonl")
        d["events"] = [asdict(e) for e in self.events]
        d["delays"] = {str(k): v for k, v in self.delays.items()}
        return d


def subspace_violation(support, t):
    """First failing relation for the support held after t >= 1 queries, else None."""
    n, T = support.n, support.T
    K, k = divmod(t - 1, n)
    k += 1
    if K > T - 1:
        return None
    ya = support.y_active.reshape(T + 1, n)
    on = np.flatnonzero(ya[K + 1])
    if on.size and on.max() + 1 > k:
        return f"y^({K + 1})_{on.max() + 1} active with k={k}"
    later = np.argwhere(ya[K + 2:])
    if later.size:
        i, j = later[0]
        return f"y^({K + 2 + i})_{j + 1} active beyond block {K + 1}"
    xs = np.flatnonzero(support.x_active)
    if xs.size and xs.max() + 1 > K:
        return f"x_{xs.max() + 1} active with K={K}"
    return None


def chain_trace(fc, mode, seed, budget, params=None):
    """Run the canonical greedy prober and audit the support at every step."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    mode = normalize_mode(mode)
    pr = params if params is not None else derive_params(fc, mode)
    oracle = Oracle(pr, seed=seed)
    sup = oracle.support
    violations = []
    delays = {}
    frontier, since = sup.i_star, 0
    xT_query = None
    for q in range(int(budget)):
        before_y = sup.y_active[pr.n:].copy()
        before_x = sup.x_active.copy()
        oracle.query(greedy_point(pr, sup))
        t = q + 1
        new_y = int((sup.y_active[pr.n:] & ~before_y).sum())
        new_x = int((sup.x_active & ~before_x).sum())
        if xT_query is None and sup.x_active[-1]:
            xT_query = q
        if mode == STOCHASTIC and sup.i_star != frontier:
            if frontier is not None:
                delays[frontier] = t - since
            frontier, since = sup.i_star, t
        # randomness only slows the chain, so the relations bound both modes
        if new_y > 1 or new_x > 1:
            violations.append((t, f"query {q} activated {new_y} chain y and {new_x} x coordinates"))
        if t <= pr.chain_length:
            bad = subspace_violation(sup, t)
            if bad:
                violations.append((t, bad))
        if violations:
            break
        if xT_query is not None:
            break
    return ChainTrace(mode, int(seed), pr.n, pr.T, oracle.calls, xT_query, violations, delays,
                      list(sup.events), sup.events_jsonl())


def check_subspace_trace(pr, rng, cid, seed=0):
    budget = pr.chain_length + 4
    if pr.stochastic:
        budget += int(math.ceil(10 * pr.chain_length / pr.p))
    ct = chain_trace(pr.fc, pr.mode, seed, budget, params=pr)
    if pr.stochastic:
        if not ct.ok:
            step, what = ct.violations[0]
            return _flag(cid, pr.digest(), False, f"support relation broken at step {step}: {what}")
        q = ct.xT_activation_query
        ok = q is None or q >= pr.chain_length - 1
        return _flag(cid, pr.digest(), ok,
                     f"x_T activated at query index {q} (Tn = {pr.chain_length}, p = {pr.p:.4g}); "
                     f"{len(ct.delays)} frontier delays recorded")
    if not ct.ok:
        step, what = ct.violations[0]
        return _flag(cid, pr.digest(), False, f"support relation broken at step {step}: {what}")
    if ct.xT_activation_query is None or abs(ct.xT_activation_query - pr.chain_length) > 1:
        return _flag(cid, pr.digest(), False,
                     f"x_T activated at query {ct.xT_activation_query}, Tn = {pr.chain_length}")
    return _flag(cid, pr.digest(), True,
                 f"support relations hold for t = 1..{pr.chain_length}; x_T activated at "
                 f"query index {ct.xT_activation_query} (Tn = {pr.chain_length})")


# ---------------------------------------------------------------------------
# Stochastic instance
# ---------------------------------------------------------------------------

def check_domain_containment(pr, rng, cid, samples=1000):
    r = pr.x_radius
    T = pr.T
    # y*(x) is block-separable in x, so three sign patterns realise every corner's block values
    corners = [np.full(T, r), np.full(T, -r), r * (-1.0) ** np.arange(T)]
    xs = corners + [rng.uniform(-r, r, T) for _ in range(samples)]
    worst = max(float(np.abs(hyper.lower_level_solution(pr, x)).max()) for x in xs)
    cap = 5 * C_HIGH * pr.r_x * pr.lam
    res = _ineq(cid, pr.digest(), worst, pr.y_radius,
                f"max ||y*(x)||_inf over corners and {samples} random x (envelope {cap:.6g})")
    if res.passed and worst >= pr.y_radius:
        return _flag(cid, pr.digest(), False, "y*(x) touches the boundary")
    return res


def check_inf_norm_bounds(pr, rng, cid_base, samples=10_000):
    fmax = gymax = gxmax = 0.0
    for _ in range(samples):
        pt = _random_domain_point(pr, rng)
        _, gf = grad_f(pr, pt)
        gx, gy = grad_g(pr, pt)
        fmax = max(fmax, float(np.abs(gf).max()))
        gymax = max(gymax, float(np.abs(gy).max()))
        gxmax = max(gxmax, float(np.abs(gx).max()))
    d = pr.digest()
    lam = pr.lam
    return [
        _ineq(cid_base + "a_grad_y_f", d, fmax, pr.c1 * lam * pr.fc.L_f / pr.L_const,
              f"||grad_y f||_inf over {samples} domain points vs c1 lam L_f/L"),
        _ineq(cid_base + "b_grad_y_g", d, gymax, 2 * pr.fc.L_g * pr.r_y * lam,
              f"||grad_y g||_inf over {samples} domain points vs 2 L_g r_y lam"),
        _ineq(cid_base + "c_grad_x_g", d, gxmax, pr.fc.L_g * pr.r_y * lam,
              f"||grad_x g||_inf over {samples} domain points vs L_g r_y lam"),
    ]


def projected_floor_probes(pr, rng, random_count=100):
    T, r, thr = pr.T, pr.x_radius, x0_threshold(pr)
    probes = []
    for k in np.unique(np.linspace(0, T - 1, min(T, 50)).astype(int)):
        x = np.zeros(T)
        x[:k] = r
        probes.append(x)
    for _ in range(random_count):
        x = rng.uniform(-r, r, T)
        i = rng.integers(T)
        x[i] = rng.uniform(-0.999, 0.999) * thr
        probes.append(x)
    return probes


def projected_floor(pr):
    return pr.c2 * pr.fc.L_f * pr.n * pr.lam / pr.L_const


def check_projected_floor(pr, rng, cid):
    floor = projected_floor(pr)
    worst = math.inf
    probes = projected_floor_probes(pr, rng)
    for x in probes:
        _, g = hyper.hyper_grad(pr, x)
        worst = min(worst, hyper.projected_mapping(pr, x, g))
    return _ineq(cid, pr.digest(), worst, floor,
                 f"min projected mapping over {len(probes)} pre-chain-end probes vs c2 L_f n lam/L",
                 upper=False)


def frontier_states(pr):
    """(support, point) at each chain frontier, generated with exact replies."""
    sup = SupportState.initial(pr)
    states = []
    seen = set()
    for _ in range(pr.chain_length + 2):
        i = sup.i_star
        if i is None:
            break
        if i not in seen:
            seen.add(i)
            states.append((sup.copy(), greedy_point(pr, sup)))
        span_update(sup, deterministic_query(pr, greedy_point(pr, sup)))
    return states


def is_boundary(pr, i_star):
    """Frontier y_1^(j): reachable through the unperturbed gradient of f."""
    return (i_star - 1) % pr.n == 0


def _pick(items, k):
    if len(items) <= k:
        return items
    idx = np.unique(np.linspace(0, len(items) - 1, k).astype(int))
    return [items[i] for i in idx]


def activation_stats(pr, support, pt, draws, rng):
    """Empirical probability that one query activates a new coordinate, and whether
    every activation was exactly the frontier."""
    i_star = support.i_star
    hits = 0
    only_frontier = True
    for _ in range(draws):
        rep = stochastic_query(pr, pt, support, rng)
        ny = np.flatnonzero(((rep.gf_y != 0) | (rep.gg_y != 0)) & ~support.y_active)
        # block 0 is not part of the chain and fills in parallel
        ny = ny[ny >= pr.n]
        nx = np.flatnonzero(((rep.gf_x != 0) | (rep.gg_x != 0)) & ~support.x_active)
        if ny.size or nx.size:
            hits += 1
            if nx.size or ny.size != 1 or ny[0] + 1 != i_star:
                only_frontier = False
    return hits / draws, only_frontier


def check_activation_rate(pr, rng, cid, draws=MC_FRONTIER_DRAWS, states=None):
    states = frontier_states(pr) if states is None else states
    inner = [s for s in states if not is_boundary(pr, s[0].i_star)]
    boundary = [s for s in states if is_boundary(pr, s[0].i_star)]
    p = pr.p
    se = math.sqrt(p * (1 - p) / draws)
    margins = []
    for sup, pt in _pick(inner, MAX_FRONTIER_STATES):
        rate, only = activation_stats(pr, sup, pt, draws, rng)
        if not only:
            return _flag(cid, pr.digest(), False,
                         f"frontier {sup.i_star}: a query activated something other than the frontier")
        margins.append(p + 3 * se - rate + REL * (p + 3 * se))
    b_rates = []
    for sup, pt in _pick(boundary, 2):
        rate, _ = activation_stats(pr, sup, pt, max(draws // 10, 100), rng)
        b_rates.append((sup.i_star, rate))
    note = f"boundary frontier rates {b_rates}"
    if not margins:
        return _flag(cid, pr.digest(), True, f"no within-block frontier states (n={pr.n}); {note}")
    m = min(margins)
    return CheckResult(cid, pr.digest(), PASS if m > 0 else FAIL, float(m),
                       f"max activation rate over {len(margins)} within-block states vs "
                       f"p + 3 se = {p + 3 * se:.6g} ({draws} draws each); {note}")


def _variance_state(pr, states):
    inner = [s for s in states if not is_boundary(pr, s[0].i_star)] or states
    best, best_val = inner[0], -1.0
    for sup, pt in inner:
        rep = deterministic_query(pr, pt)
        i = sup.i_star
        if i % pr.n != 1:
            val = abs(rep.gg_y[i - 1])
        else:
            val = abs(rep.gg_x[(i - 1) // pr.n - 1])
        if val > best_val:
            best, best_val = (sup, pt), val
    return best


def check_variance_and_bias(pr, rng, cid_var, cid_bias, draws=MC_DRAWS, states=None):
    states = frontier_states(pr) if states is None else states
    sup, pt = _variance_state(pr, states)
    mom = gradient_moments(pr, pt, draws, rng, support=sup.copy())
    sigma2 = pr.fc.sigma**2
    var_res = _ineq(cid_var, pr.digest(), mom.total_var, 1.05 * sigma2 + 4 * mom.total_var_stderr,
                    f"stochastic gradient variance at frontier {sup.i_star} ({draws} draws) vs "
                    f"1.05 sigma^2 + 4 se")
    true = np.concatenate(
        [np.asarray(a) for a in (lambda r: (r.gf_x, r.gf_y, r.gg_x, r.gg_y))(deterministic_query(pr, pt))])
    se = mom.mean_stderr()
    tiny = 1e-15 * (1 + np.abs(true))
    ratio = float(np.max(np.abs(mom.mean - true) / (4 * se + tiny)))
    margin = 1.0 - ratio
    bias_res = CheckResult(cid_bias, pr.digest(), PASS if margin > 0 else FAIL, margin,
                           f"max |mean - grad| / (4 se) = {ratio:.4g} over {true.size} coordinates")
    return [var_res, bias_res]


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def _plan(pr, seed, mc_draws, frontier_draws):
    plan = [
        ("01_strong_convexity", check_strong_convexity),
        ("02_smooth_g", check_smooth_g),
        ("03_cross_block", check_cross_block),
        ("04_smooth_f", check_smooth_f),
        ("05_grad_f_bound", check_grad_f_bound),
        ("06_third_differences", check_third_differences),
        ("07_resolvent", check_resolvent),
        ("08_tilde_c", check_tilde_c),
        ("09_grad_floor_probes", check_grad_floor),
        ("10_gap_floor", check_gap),
        ("11_subspace_trace", lambda p, r, c: check_subspace_trace(p, r, c, seed)),
        ("12_hyper_consistency", check_hyper_consistency),
        ("13_lh_certificate", check_lh),
    ]
    if pr.stochastic:
        plan += [
            ("14_domain_containment", check_domain_containment),
            ("15_inf_norm_", check_inf_norm_bounds),
            ("16_projected_floor", check_projected_floor),
            ("17_", lambda p, r, c: check_variance_and_bias(
                p, r, c + "variance", c + "unbiasedness", draws=mc_draws)),
            ("18_activation_rate", lambda p, r, c: check_activation_rate(p, r, c, draws=frontier_draws)),
        ]
    return plan


def _safe(fn, pr, rng, cid):
    try:
        out = fn(pr, rng, cid)
    except Exception as exc:  # a failing check must not stop the suite
        return [CheckResult(cid, pr.digest(), FAIL, -1.0, f"error: {type(exc).__name__}: {exc}")]
    return out if isinstance(out, list) else [out]


def run_suite(fc, mode, seed=0, params=None, threads=None, mc_draws=MC_DRAWS,
              frontier_draws=MC_FRONTIER_DRAWS):
    """Run every check on the instance derived from ``fc``; ordered by check_id."""
    try:
        mode = normalize_mode(mode)
        pr = params if params is not None else derive_params(fc, mode)
    except Exception as exc:
        return [CheckResult("00_derive", "", FAIL, -1.0, f"error: {exc}")]
    plan = _plan(pr, seed, mc_draws, frontier_draws)
    seeds = np.random.SeedSequence(seed).spawn(len(plan))
    jobs = [(fn, np.random.Generator(np.random.Philox(s)), cid) for (cid, fn), s in zip(plan, seeds)]
    workers = threads if threads is not None else pool_size()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(lambda j: _safe(j[0], pr, j[1], j[2]), jobs))
    else:
        outs = [_safe(fn, pr, rng, cid) for fn, rng, cid in jobs]
    results = [r for out in outs for r in out]
    return sorted(results, key=lambda r: r.check_id)


def suite_report(fc, mode, results, params=None):
    try:
        derived = (params or derive_params(fc, mode)).to_dict()
    except Exception as exc:
        derived = {"error": str(exc)}
    return {"suite_version": SUITE_VERSION, "fc": asdict(fc), "mode": normalize_mode(mode),
            "derived": derived, "results": [r.to_dict() for r in results],
            "all_pass": all(r.passed for r in results)}


def report_json(report):
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


__all__ = ["CheckResult", "ChainTrace", "run_suite", "chain_trace", "suite_report",
           "resolvent_margin", "make_rng"]
