"""
First-order oracles for the hard instance and the zero-respecting protocol.

An oracle call is a joint query at one point (x, y) returning values and
gradients of both f and g. ``SupportState`` tracks which coordinates the
algorithm has legitimately seen; any iterate or query point outside that span
is a protocol violation.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .instance import BilevelPoint, eval_f, eval_g, grad_f, grad_g

G_ORACLE = "g_oracle"
F_ORACLE = "f_oracle"
ALGORITHM_SPAN = "algorithm_span"


class ZeroRespectingViolation(RuntimeError):
    def __init__(self, variable, flat_index):
        self.variable = variable
        self.flat_index = flat_index
        super().__init__(f"zero-respecting violation: {variable}[{flat_index}] is outside the revealed span")


class ProtocolError(RuntimeError):
    pass


def make_rng(seed):
    """Counter-based Philox stream; children come from ``spawn_rngs``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rngs(seed, count):
    return [np.random.Generator(np.random.Philox(s))
            for s in np.random.SeedSequence(seed).spawn(count)]


@dataclass(frozen=True)
class ActivationEvent:
    query_index: int
    variable: str
    flat_index: int  # 1-based
    trigger: str


@dataclass
class SupportState:
    n: int
    T: int
    x_active: np.ndarray
    y_active: np.ndarray
    queries: int = 0
    seed: int | None = None
    enforce: bool = True
    events: list = field(default_factory=list)

    @classmethod
    def initial(cls, params, seed=None, enforce=True):
        return cls(params.n, params.T, np.zeros(params.T, dtype=bool),
                   np.zeros(params.n * (params.T + 1), dtype=bool),
                   seed=seed, enforce=enforce)

    @property
    def i_star(self):
        """Smallest inactive 1-based flat y index above n, or None when done."""
        tail = self.y_active[self.n:]
        off = np.flatnonzero(~tail)
        if off.size == 0:
            return None
        return int(off[0]) + self.n + 1

    def chain_count(self):
        """Number of active y coordinates with flat index > n."""
        return int(self.y_active[self.n:].sum())

    def is_sequential(self):
        i = self.i_star
        if i is None:
            return True
        return not self.y_active[i - 1:].any()

    def contains(self, pt):
        return (not np.any((pt.x != 0) & ~self.x_active)
                and not np.any((pt.y.reshape(-1) != 0) & ~self.y_active))

    def first_outside(self, pt):
        bad = np.flatnonzero((pt.x != 0) & ~self.x_active)
        if bad.size:
            return "x", int(bad[0]) + 1
        bad = np.flatnonzero((pt.y.reshape(-1) != 0) & ~self.y_active)
        if bad.size:
            return "y", int(bad[0]) + 1
        return None

    def copy(self):
        return SupportState(self.n, self.T, self.x_active.copy(), self.y_active.copy(),
                            self.queries, self.seed, self.enforce, list(self.events))

    def events_jsonl(self):
        lines = []
        for e in self.events:
            lines.append(json.dumps({"query_index": e.query_index, "variable": e.variable,
                                     "flat_index": e.flat_index, "trigger": e.trigger,
                                     "seed": self.seed}, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class OracleReply:
    f_val: float
    g_val: float
    gf_x: np.ndarray
    gf_y: np.ndarray
    gg_x: np.ndarray
    gg_y: np.ndarray
    perturbed: tuple | None = None  # ("x" | "y", 1-based index)
    xi: int | None = None


def deterministic_query(params, pt):
    gf_x, gf_y = grad_f(params, pt)
    gg_x, gg_y = grad_g(params, pt)
    return OracleReply(eval_f(params, pt), eval_g(params, pt), gf_x, gf_y, gg_x, gg_y)


def stochastic_query(params, pt, support, rng):
    """Bernoulli-masked oracle: only the frontier coordinate of grad g is random.

    With i* the frontier, if i* mod n != 1 the g-gradient entry i* in y is
    replaced by (xi/p) times its value; otherwise entry j = (i*-1)/n of the
    x-gradient of g is. Gradients of f are never perturbed.
    """
    if not params.stochastic:
        raise ProtocolError("stochastic_query needs a stochastic instance")
    if not support.contains(pt):
        var, idx = support.first_outside(pt)
        raise ProtocolError(f"query point uses inactive coordinate {var}[{idx}]")
    reply = deterministic_query(params, pt)
    i_star = support.i_star
    if i_star is None:
        return reply
    p = params.p
    xi = int(rng.random() < p)
    factor = xi / p
    n = params.n
    if i_star % n != 1:
        reply.gg_y[i_star - 1] *= factor
        reply.perturbed = ("y", i_star)
    else:
        j = (i_star - 1) // n
        reply.gg_x[j - 1] *= factor
        reply.perturbed = ("x", j)
    reply.xi = xi
    return reply


def span_update(support, reply, proposed_pt=None):
    """Fold the reply's supports into ``support`` (in place) and vet ``proposed_pt``.

    Returns the same ``SupportState``. Raises ``ZeroRespectingViolation``
    when enforcement is on and the proposal leaves the span.
    """
    q = support.queries
    gx = reply.gg_x != 0
    fx = reply.gf_x != 0
    gy = reply.gg_y != 0
    fy = reply.gf_y != 0
    new_x = (gx | fx) & ~support.x_active
    new_y = (gy | fy) & ~support.y_active
    for i in np.flatnonzero(new_x):
        support.events.append(ActivationEvent(q, "x", int(i) + 1, G_ORACLE if gx[i] else F_ORACLE))
    for i in np.flatnonzero(new_y):
        support.events.append(ActivationEvent(q, "y", int(i) + 1, G_ORACLE if gy[i] else F_ORACLE))
    support.x_active |= new_x
    support.y_active |= new_y
    support.queries = q + 1
    if proposed_pt is not None:
        admit_point(support, proposed_pt)
    return support


def admit_point(support, pt):
    """Check an iterate against the span; log it when enforcement is off."""
    bad = support.first_outside(pt)
    if bad is None:
        return
    if support.enforce:
        raise ZeroRespectingViolation(*bad)
    q = support.queries - 1
    nx = (pt.x != 0) & ~support.x_active
    ny = (pt.y.reshape(-1) != 0) & ~support.y_active
    for i in np.flatnonzero(nx):
        support.events.append(ActivationEvent(q, "x", int(i) + 1, ALGORITHM_SPAN))
    for i in np.flatnonzero(ny):
        support.events.append(ActivationEvent(q, "y", int(i) + 1, ALGORITHM_SPAN))
    support.x_active |= nx
    support.y_active |= ny


def stacked(reply):
    return np.concatenate((reply.gf_x, reply.gf_y, reply.gg_x, reply.gg_y))


@dataclass(frozen=True)
class GradientMoments:
    """Monte-Carlo moments of the stacked stochastic gradient at a fixed point."""
    samples: int
    mean: np.ndarray
    coord_var: np.ndarray
    total_var: float
    total_var_stderr: float

    def mean_stderr(self):
        return np.sqrt(self.coord_var / self.samples)


def gradient_moments(params, pt, samples, rng, support=None, batches=20):
    """Streaming per-coordinate moments; the stderr of the total variance uses batch means."""
    if support is None:
        support = SupportState.initial(params)
        support.x_active[:] = pt.x != 0
        support.y_active[:] = pt.y.reshape(-1) != 0
    if samples < batches:
        raise ValueError("need at least one sample per batch")
    ref = stacked(deterministic_query(params, pt))
    edges = np.linspace(0, samples, batches + 1).astype(int)
    s1 = np.zeros_like(ref)
    s2 = np.zeros_like(ref)
    batch_vars = []
    for b in range(batches):
        b1 = np.zeros_like(ref)
        b2 = np.zeros_like(ref)
        m = edges[b + 1] - edges[b]
        for _ in range(m):
            d = stacked(stochastic_query(params, pt, support, rng)) - ref
            b1 += d
            b2 += d * d
        batch_vars.append(float(np.sum(b2 - b1 * b1 / m)) / max(m - 1, 1))
        s1 += b1
        s2 += b2
    mean_d = s1 / samples
    coord_var = np.maximum(s2 - s1 * mean_d, 0.0) / (samples - 1)
    return GradientMoments(samples, ref + mean_d, coord_var, float(coord_var.sum()),
                           float(np.std(batch_vars, ddof=1) / np.sqrt(batches)))


def variance_estimate(params, pt, samples, rng, support=None, return_stderr=False):
    """Unbiased sample variance E||G - EG||^2 of the stacked stochastic gradient."""
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples")
    mom = gradient_moments(params, pt, samples, rng, support)
    if return_stderr:
        return mom.total_var, mom.total_var_stderr
    return mom.total_var


class Oracle:
    """Protocol wrapper an algorithm talks to: meters calls, enforces the span."""

    def __init__(self, params, seed=0, enforce=True, rng=None):
        self.params = params
        self.support = SupportState.initial(params, seed=seed, enforce=enforce)
        self.rng = rng if rng is not None else make_rng(seed)
        self.calls = 0

    @property
    def enforce(self):
        return self.support.enforce

    def query(self, pt):
        if self.support.enforce and not self.support.contains(pt):
            raise ZeroRespectingViolation(*self.support.first_outside(pt))
        if self.params.stochastic:
            if not self.support.enforce and not self.support.contains(pt):
                admit_point(self.support, pt)
            reply = stochastic_query(self.params, pt, self.support, self.rng)
        else:
            reply = deterministic_query(self.params, pt)
        span_update(self.support, reply)
        self.calls += 1
        return reply

    def admit(self, pt):
        admit_point(self.support, pt)

    def zero_point(self):
        return BilevelPoint.zeros(self.params)
