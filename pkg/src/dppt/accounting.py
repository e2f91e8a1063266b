"""RDP accounting for the Poisson-subsampled Gaussian and a scale-up planner.

The per-step Renyi divergence of order ``alpha`` is ``log(A_alpha)/(alpha-1)``
with

    A_alpha = E_{x ~ N(0, z^2)} [((1 - q) + q * exp((2x - 1) / (2 z^2)))^alpha].

Integer orders use the exact binomial expansion; fractional orders use a
signed two-sided series summed in chunks. Everything is kept in
log space: at ``z ~ 0.5`` and ``alpha ~ 256`` the raw terms overflow doubles.

Composition over ``T`` steps is linear in RDP, and the conversion to
``(eps, delta)`` uses the improved bound

    eps = min_alpha  rdp(alpha) + log((alpha-1)/alpha) - log(delta*alpha)/(alpha-1).

The planner extrapolates a base run ``(n0, B0, z0, T)`` by a factor ``k``:

=========== ============ =========== ========
mode        dataset n    batch B     noise z
=========== ============ =========== ========
batch       n0           k*B0        k*z0
equal       k*n0         k*B0        k*z0
headstart   10*k*n0      k*B0        k*z0
=========== ============ =========== ========

with ``delta = n**-1.1`` evaluated at the scaled dataset size.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from dppt.errors import ConfigError, PlannerError

FRACTIONAL_ORDERS = (1.25, 1.5, 1.75, 2.5, 3.5)
DEFAULT_ORDERS = tuple(sorted(FRACTIONAL_ORDERS + tuple(float(a) for a in range(2, 257))))

# base run of the extrapolation
BASE_BATCH = 512
BASE_STEPS = 1_000_000
DELTA_EXPONENT = 1.1
# Not published. Recovered from the two (delta, factor) pairs quoted for the
# final models, see derive_base_dataset_size().
BASE_DATASET_SIZE = 2.85e6
ANCHORS = ((1e-9, 52), (7.9e-11, 530))

SCALE_MODES = ("batch", "equal", "headstart")
HEADSTART = 10
BATCH_ONLY_K_MAX = 1000
CURVE_HEADER = ("mode", "z0", "k", "batch", "n", "delta", "epsilon", "opt_order")

_MAX_FRAC_TERMS = 200_000
_FRAC_CHUNK = 1000


def _log_comb(n, k):
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_erfc(x):
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_erfc(x):
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q, z, alpha):
    i = np.arange(alpha + 1, dtype=np.float64)
    terms = (
        _log_comb(alpha, i)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * z * z)
    )
    return float(special.logsumexp(terms))


def _log_a_frac(q, z, alpha):
    # Split the integral at the point where the two Gaussian densities cross
    # and expand each half as a binomial series in q. For fractional alpha the
    # generalised binomial coefficients alternate in sign once i > alpha + 1,
    # and for large q the terms only decay polynomially, so the series is
    # summed in vectorised chunks with signed log-sum-exp.
    x0 = z * z * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    total = np.array([-np.inf, -np.inf])  # log A0, log A1
    for start in range(0, _MAX_FRAC_TERMS, _FRAC_CHUNK):
        i = np.arange(start, start + _FRAC_CHUNK, dtype=np.float64)
        j = alpha - i
        coef = special.binom(alpha, i)
        with np.errstate(divide="ignore"):  # integer alpha: coef hits 0
            log_coef = np.log(np.abs(coef))
        s0 = (log_coef + i * log_q + j * log_1mq + (i * i - i) / (2 * z * z)
              + math.log(0.5) + _log_erfc((i - x0) / (math.sqrt(2.0) * z)))
        s1 = (log_coef + j * log_q + i * log_1mq + (j * j - j) / (2 * z * z)
              + math.log(0.5) + _log_erfc((x0 - j) / (math.sqrt(2.0) * z)))
        sign = np.sign(coef)
        for k, terms in enumerate((s0, s1)):
            val, sgn = special.logsumexp(
                np.append(terms, total[k]), b=np.append(sign, 1.0), return_sign=True)
            if sgn < 0:
                return math.inf
            total[k] = val
        log_a = float(special.logsumexp(total))
        # the tail alternates in sign, so it is bounded by its first term
        if start + _FRAC_CHUNK > alpha + 1 and max(s0[-1], s1[-1]) < log_a - 30:
            return log_a
    return math.inf


def _rdp_one(q, z, alpha):
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * z * z)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, z, int(alpha))
    else:
        log_a = _log_a_frac(q, z, alpha)
    return log_a / (alpha - 1)


@functools.lru_cache(maxsize=4096)
def _rdp_cached(q, z, orders):
    return tuple(_rdp_one(q, z, a) for a in orders)


def rdp_subsampled_gaussian(q, z, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP of the Poisson-subsampled Gaussian at each order."""
    orders = tuple(float(a) for a in orders)
    if any(a <= 1 for a in orders):
        raise ConfigError("RDP orders must be > 1")
    if not 0 <= q <= 1:
        raise ConfigError(f"sampling probability must lie in [0, 1], got {q}")
    if not z > 0:
        raise ConfigError(f"noise multiplier must be > 0, got {z}")
    return np.array(_rdp_cached(float(q), float(z), orders))


def compose(rdp_step, steps) -> np.ndarray:
    if steps < 0:
        raise ConfigError("number of steps must be >= 0")
    return np.asarray(rdp_step, dtype=np.float64) * steps


@dataclass(frozen=True)
class AccountingResult:
    epsilon: float
    delta: float
    optimal_order: float


def eps_from_rdp(rdp, orders, delta) -> AccountingResult:
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if orders.size == 0:
        raise ConfigError("no RDP orders given")
    if orders.shape != rdp.shape:
        raise ConfigError("orders and rdp differ in length")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    with np.errstate(invalid="ignore"):
        eps = rdp + np.log1p(-1.0 / orders) - np.log(delta * orders) / (orders - 1.0)
    eps = np.where(np.isnan(eps), np.inf, eps)
    best = int(np.argmin(eps))
    return AccountingResult(max(0.0, float(eps[best])), float(delta), float(orders[best]))


def account(q, z, steps, delta, orders=DEFAULT_ORDERS) -> AccountingResult:
    """(eps, delta) after ``steps`` Poisson-subsampled Gaussian steps."""
    if steps == 0:
        return eps_from_rdp(np.zeros(len(orders)), orders, delta)
    return eps_from_rdp(compose(rdp_subsampled_gaussian(q, z, orders), steps), orders, delta)


def delta_rule(n) -> float:
    if n < 2:
        raise ConfigError("dataset size must be >= 2")
    return float(n) ** -DELTA_EXPONENT


def derive_base_dataset_size(anchors=ANCHORS):
    """Invert ``delta = (k * n0)**-1.1`` for each (delta, k) anchor."""
    return [d ** (-1.0 / DELTA_EXPONENT) / k for d, k in anchors]


@dataclass(frozen=True)
class ScalePlan:
    mode: str
    k: float
    z0: float
    n0: float = BASE_DATASET_SIZE
    b0: int = BASE_BATCH
    steps: int = BASE_STEPS

    def __post_init__(self):
        if self.mode not in SCALE_MODES:
            raise ConfigError(f"mode must be one of {SCALE_MODES}, got {self.mode!r}")
        if self.k < 1:
            raise ConfigError("scale factor must be >= 1")

    @property
    def n(self) -> float:
        if self.mode == "batch":
            return self.n0
        if self.mode == "equal":
            return self.k * self.n0
        return HEADSTART * self.k * self.n0

    @property
    def batch(self) -> float:
        return self.k * self.b0

    @property
    def z(self) -> float:
        return self.k * self.z0

    @property
    def q(self) -> float:
        if self.mode == "equal":
            return self.b0 / self.n0
        return min(1.0, self.batch / self.n)

    @property
    def delta(self) -> float:
        return delta_rule(self.n)

    def account(self, orders=DEFAULT_ORDERS) -> AccountingResult:
        return account(self.q, self.z, self.steps, self.delta, orders)


def plan_scale(z0, target_eps, mode="equal", n0=BASE_DATASET_SIZE, b0=BASE_BATCH,
               steps=BASE_STEPS, k_max=1_000_000, orders=DEFAULT_ORDERS) -> int:
    """Smallest integer ``k`` whose scaled run reaches ``eps <= target_eps``."""
    if not target_eps > 0:
        raise ConfigError("target epsilon must be positive")

    def eps(k):
        return ScalePlan(mode, k, z0, n0, b0, steps).account(orders).epsilon

    # Scan a coarse geometric grid up to the first crossing, requiring eps to
    # fall monotonically on the way. Far past the crossing eps creeps back up
    # (the delta-dependent conversion term grows with n), so only the
    # bracket is checked and searched.
    grid = np.unique(np.geomspace(1, k_max, 61).round().astype(int))
    prev = None
    lo = None
    for k in grid:
        e = eps(int(k))
        if prev is not None and e > prev[1] * (1 + 1e-9):
            raise PlannerError(f"epsilon not monotone in k between {prev[0]} and {k}")
        if e <= target_eps:
            if prev is None:
                return 1
            lo, hi = int(prev[0]), int(k)
            break
        prev = (int(k), e)
    if lo is None:
        raise PlannerError(f"target eps={target_eps} unreachable for k <= {k_max}")
    while hi - lo > 1:  # eps(lo) > target >= eps(hi)
        mid = (lo + hi) // 2
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


def default_k_grid(mode, k_max=10_000, points=33):
    if mode == "batch":
        k_max = min(k_max, BATCH_ONLY_K_MAX)
    return [int(k) for k in np.unique(np.geomspace(1, k_max, points).round().astype(int))]


def sweep_curves(z0_list, modes=SCALE_MODES, k_grid=None, n0=BASE_DATASET_SIZE,
                 b0=BASE_BATCH, steps=BASE_STEPS, orders=DEFAULT_ORDERS):
    """One row per (mode, z0, k), matching :data:`CURVE_HEADER`."""
    rows = []
    for mode in modes:
        grid = default_k_grid(mode) if k_grid is None else list(k_grid)
        if mode == "batch":
            grid = [k for k in grid if k <= BATCH_ONLY_K_MAX]
        for z0 in z0_list:
            for k in grid:
                plan = ScalePlan(mode, k, z0, n0, b0, steps)
                res = plan.account(orders)
                rows.append({
                    "mode": mode, "z0": z0, "k": k, "batch": plan.batch, "n": plan.n,
                    "delta": res.delta, "epsilon": res.epsilon, "opt_order": res.optimal_order,
                })
    return rows


def write_curves_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r["mode"], repr(r["z0"]), r["k"], repr(float(r["batch"])), repr(float(r["n"])),
                        repr(r["delta"]), repr(r["epsilon"]), repr(r["opt_order"])])


def read_curves_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in CURVE_HEADER[1:]:
            r[key] = float(r[key])
        r["k"] = int(r["k"])
    return rows
