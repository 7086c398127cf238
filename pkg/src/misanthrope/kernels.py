"""Jump-rate kernels c(k,l) and their stationary product-measure families.

A kernel assigns the rate at which one particle leaves a site holding k
particles for a site holding l.  All kernels here are sums of separable
terms c(k,l) = sum_t u_t(k) v_t(l), which is what lets the simulator keep
aggregate rates in O(1) per jump; arbitrary rates are supported through a
capped lookup table.

For kernels admitting stationary product measures, the single-site
marginals are geometric-like tilts of a weight sequence w(n).  We fix the
fugacity scale so that w(n) = prod_{k=1..n} c(1,k-1) / (c(1,0) * c(k,0)),
which reproduces the conventional zero-range weights prod 1/g(k) and gives
phi_c = 1 for the standard condensing families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "KernelError",
    "LevelOutOfRangeError",
    "DegenerateKernelError",
    "SupercriticalDensityError",
    "SeparableTerm",
    "RateKernel",
    "zrp",
    "inclusion",
    "ecp",
    "general_table",
    "from_terms",
    "parse_kernel",
    "CheckResult",
    "check_nondegenerate",
    "check_sublinear",
    "SublinearReport",
    "check_misanthrope_condition",
    "StationaryFamily",
    "stationary_weights",
    "PartitionValue",
    "partition_function",
    "density",
    "CriticalPoint",
    "critical_point",
    "invert_density",
    "marginal",
]


class KernelError(ValueError):
    """Invalid kernel construction or use."""


class LevelOutOfRangeError(KernelError):
    """Occupation level beyond a table kernel's declared cap."""


class DegenerateKernelError(KernelError):
    """Kernel violates the positivity needed by the requested operation."""


class SupercriticalDensityError(KernelError):
    """Requested density exceeds the maximal density rho_c of the family."""

    def __init__(self, rho: float, rho_c: float):
        super().__init__(
            f"density {rho} exceeds the maximal product-measure density rho_c={rho_c}"
        )
        self.rho = rho
        self.rho_c = rho_c


@dataclass(frozen=True)
class SeparableTerm:
    """One separable factor pair: u acts on the departure level, v on the target.

    Both callables must be vectorized over integer numpy arrays and must
    satisfy u(0) = 0 so that empty sites never emit particles.
    """

    u: Callable[[np.ndarray], np.ndarray]
    v: Callable[[np.ndarray], np.ndarray]


class RateKernel:
    """Jump rates c(k,l) as a lazy sum of separable terms or a lookup table.

    Instances are immutable after construction and cache the per-level
    value arrays they hand out, so they are safe to share across threads.
    """

    def __init__(
        self,
        kind: str,
        params: dict,
        terms: Sequence[SeparableTerm] = (),
        table: Optional[np.ndarray] = None,
    ):
        self.kind = kind
        self.params = dict(params)
        self.terms = tuple(terms)
        self.table = None
        self.level_cap: Optional[int] = None
        if table is not None:
            table = np.asarray(table, dtype=float)
            if table.ndim != 2 or table.shape[0] != table.shape[1]:
                raise KernelError("table kernel needs a square matrix")
            if np.any(~np.isfinite(table)) or np.any(table < 0):
                raise KernelError("table rates must be finite and non-negative")
            if np.any(table[0] != 0.0):
                raise KernelError("table violates c(0,l)=0")
            self.table = table
            self.level_cap = table.shape[0] - 1
        self._uv_cache: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}

    @property
    def is_table(self) -> bool:
        return self.table is not None

    def spec_string(self) -> str:
        if self.kind == "zrp":
            return f"zrp:b={self.params['b']},gamma={self.params['gamma']}"
        if self.kind == "inclusion":
            return f"inclusion:d={self.params['d']}"
        if self.kind == "ecp":
            return f"ecp:lambda={self.params['lam']},d={self.params['d']}"
        if self.kind == "table":
            return f"table:cap={self.level_cap}"
        return self.kind

    def __repr__(self) -> str:
        return f"RateKernel({self.spec_string()})"

    def _check_levels(self, *levels: int) -> None:
        for lev in levels:
            if lev < 0:
                raise LevelOutOfRangeError(f"negative occupation level {lev}")
            if self.level_cap is not None and lev > self.level_cap:
                raise LevelOutOfRangeError(
                    f"level {lev} beyond table cap {self.level_cap}"
                )

    def term_arrays(self, k_max: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Cached (u_t(0..k_max), v_t(0..k_max)) arrays for each term."""
        self._check_levels(k_max)
        cached = self._uv_cache.get(k_max)
        if cached is not None:
            return cached
        levels = np.arange(k_max + 1)
        out = []
        for term in self.terms:
            u = np.asarray(term.u(levels), dtype=float)
            v = np.asarray(term.v(levels), dtype=float)
            if u.shape != levels.shape or v.shape != levels.shape:
                raise KernelError("term callables must be vectorized over levels")
            if u[0] != 0.0:
                raise KernelError("term violates u(0)=0")
            if np.any(~np.isfinite(u)) or np.any(~np.isfinite(v)):
                raise KernelError("non-finite term values")
            if np.any(u < 0) or np.any(v < 0):
                raise KernelError("negative term values")
            u.setflags(write=False)
            v.setflags(write=False)
            out.append((u, v))
        self._uv_cache[k_max] = out
        return out

    def rate(self, k: int, l: int) -> float:
        """c(k,l); zero whenever the departure site is empty."""
        self._check_levels(k, l)
        if k == 0:
            return 0.0
        if self.table is not None:
            return float(self.table[k, l])
        kk = np.asarray([k])
        ll = np.asarray([l])
        total = 0.0
        for term in self.terms:
            total += float(term.u(kk)[0]) * float(term.v(ll)[0])
        return total

    def rate_matrix(self, k_max: int) -> np.ndarray:
        """Dense c(k,l) for 0 <= k,l <= k_max."""
        self._check_levels(k_max)
        if self.table is not None:
            return self.table[: k_max + 1, : k_max + 1].copy()
        out = np.zeros((k_max + 1, k_max + 1))
        for u, v in self.term_arrays(k_max):
            out += np.outer(u, v)
        return out


def zrp(b: float, gamma: float) -> RateKernel:
    """Zero-range rates g(k) = 1 + b/k^gamma for k >= 1, independent of the target."""
    if b <= 0:
        raise KernelError("zrp needs b > 0")
    if not (0 < gamma <= 1):
        raise KernelError("zrp needs gamma in (0, 1]")

    def g(k: np.ndarray) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        safe = np.maximum(k, 1.0)
        return np.where(k > 0, 1.0 + b / safe**gamma, 0.0)

    term = SeparableTerm(u=g, v=lambda l: np.ones_like(np.asarray(l, dtype=float)))
    return RateKernel("zrp", {"b": b, "gamma": gamma}, [term])


def ecp(lam: float, d: float) -> RateKernel:
    """Superlinear exchange rates c(k,l) = k^lam * (d + l^lam); d=0 is the degenerate case."""
    if lam <= 0:
        raise KernelError("ecp needs lambda > 0")
    if d < 0:
        raise KernelError("ecp needs d >= 0")

    def u_pow(k: np.ndarray) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        return np.where(k > 0, np.maximum(k, 1.0) ** lam, 0.0)

    def v_pow(l: np.ndarray) -> np.ndarray:
        l = np.asarray(l, dtype=float)
        return np.where(l > 0, np.maximum(l, 1.0) ** lam, 0.0)

    terms = [SeparableTerm(u=u_pow, v=v_pow)]
    if d > 0:
        terms.insert(
            0,
            SeparableTerm(
                u=u_pow, v=lambda l: np.full(np.asarray(l).shape, float(d))
            ),
        )
    kind = "inclusion" if lam == 1 else "ecp"
    return RateKernel(kind, {"lam": lam, "d": d}, terms)


def inclusion(d: float) -> RateKernel:
    """Inclusion-process rates c(k,l) = k(d + l), the lam=1 exchange kernel."""
    return ecp(1.0, d)


def general_table(table) -> RateKernel:
    """Arbitrary rates from a dense (cap+1) x (cap+1) matrix; row 0 must vanish."""
    return RateKernel("table", {}, table=table)


def from_terms(terms: Sequence[SeparableTerm], name: str = "custom") -> RateKernel:
    """Kernel from explicit separable terms; u(0)=0 is validated on first use."""
    if not terms:
        raise KernelError("need at least one separable term")
    return RateKernel(name, {}, terms)


def _parse_kv(body: str) -> dict:
    out = {}
    for chunk in body.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise KernelError(f"malformed kernel parameter {chunk!r}")
        key, val = chunk.split("=", 1)
        out[key.strip()] = float(val)
    return out


def parse_kernel(spec: str) -> RateKernel:
    """Build a kernel from its string form.

    Accepted forms: ``zrp:b=4,gamma=1``, ``inclusion:d=1``,
    ``ecp:lambda=2,d=0`` and ``table:@rates.csv`` where the CSV has header
    ``k,l,rate`` and one row per pair.
    """
    spec = spec.strip()
    if ":" not in spec:
        raise KernelError(f"kernel spec {spec!r} needs the form name:params")
    name, body = spec.split(":", 1)
    name = name.strip().lower()
    if name == "zrp":
        kv = _parse_kv(body)
        extra = set(kv) - {"b", "gamma"}
        if extra:
            raise KernelError(f"unknown zrp parameters {sorted(extra)}")
        return zrp(kv.get("b", 1.0), kv.get("gamma", 1.0))
    if name == "inclusion":
        kv = _parse_kv(body)
        extra = set(kv) - {"d"}
        if extra:
            raise KernelError(f"unknown inclusion parameters {sorted(extra)}")
        return inclusion(kv.get("d", 1.0))
    if name == "ecp":
        kv = _parse_kv(body)
        extra = set(kv) - {"lambda", "d"}
        if extra:
            raise KernelError(f"unknown ecp parameters {sorted(extra)}")
        if "lambda" not in kv:
            raise KernelError("ecp spec needs lambda=")
        return ecp(kv["lambda"], kv.get("d", 1.0))
    if name == "table":
        body = body.strip()
        if not body.startswith("@"):
            raise KernelError("table spec must reference a CSV as table:@path")
        return general_table(_load_table_csv(body[1:]))
    raise KernelError(f"unknown kernel family {name!r}")


def _load_table_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().lower().replace(" ", "")
        if header.lstrip("#").lstrip() not in ("k,l,rate",):
            raise KernelError(f"table CSV {path} must start with header 'k,l,rate'")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k_s, l_s, r_s = line.split(",")
            rows.append((int(k_s), int(l_s), float(r_s)))
    if not rows:
        raise KernelError(f"table CSV {path} holds no rates")
    cap = max(max(k for k, _, _ in rows), max(l for _, l, _ in rows))
    table = np.zeros((cap + 1, cap + 1))
    for k, l, r in rows:
        table[k, l] = r
    return table


# ---------------------------------------------------------------------------
# structural checks


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    first_violation: Optional[tuple[int, int]] = None
    message: str = ""
    degenerate: bool = False

    def __bool__(self) -> bool:
        return self.passed


def check_nondegenerate(kernel: RateKernel, k_max: int) -> CheckResult:
    """Verify c(0,l)=0 and c(k,l)>0 for 1 <= k <= k_max, 0 <= l <= k_max."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    c = kernel.rate_matrix(k_max)
    bad = np.argwhere(c[0] != 0.0)
    if bad.size:
        l = int(bad[0][0])
        return CheckResult(False, (0, l), f"c(0,{l}) = {c[0, l]} != 0")
    bad = np.argwhere(c[1:] <= 0.0)
    if bad.size:
        k, l = int(bad[0][0]) + 1, int(bad[0][1])
        return CheckResult(False, (k, l), f"c({k},{l}) = {c[k, l]} is not positive")
    return CheckResult(True)


@dataclass(frozen=True)
class SublinearReport:
    """Outcome of fitting the bilinear envelope c(k,l) <= C1*k*(l+C2)."""

    certified: bool
    c1: Optional[float] = None
    c2: Optional[float] = None
    violation: Optional[tuple[int, int]] = None
    growth_rate: float = 0.0
    message: str = ""

    @property
    def certificate(self) -> Optional[tuple[float, float]]:
        return (self.c1, self.c2) if self.certified else None


def check_sublinear(
    kernel: RateKernel, k_max: int, c2: float = 1.0, growth_tol: float = 1.25
) -> SublinearReport:
    """Fit the smallest C1 with c(k,l) <= C1*k*(l+c2) on [0,k_max]^2.

    Any finite grid admits some constant, so super-bilinear kernels are
    detected through growth of the normalized ratio: if the per-level
    maximum of c(k,l)/(k(l+c2)) keeps growing between k_max/2 and k_max the
    kernel is reported as violating, with the fastest-growing pair.
    """
    if k_max < 4:
        raise ValueError("k_max must be >= 4 for the growth test")
    c = kernel.rate_matrix(k_max)
    k = np.arange(1, k_max + 1, dtype=float)[:, None]
    l = np.arange(0, k_max + 1, dtype=float)[None, :]
    ratio = c[1:] / (k * (l + c2))
    # growth along departure and target directions of the normalized rates
    per_k = ratio.max(axis=1)
    per_l = ratio.max(axis=0)
    half = k_max // 2
    grow_k = per_k[k_max - 1] / max(per_k[half - 1], 1e-300)
    grow_l = per_l[k_max] / max(per_l[half], 1e-300)
    if grow_k > growth_tol or grow_l > growth_tol:
        if grow_k >= grow_l:
            kk = k_max
            ll = int(np.argmax(ratio[k_max - 1]))
            direction = "departure level k"
        else:
            ll = k_max
            kk = int(np.argmax(ratio[:, k_max])) + 1
            direction = "target level l"
        return SublinearReport(
            certified=False,
            violation=(kk, ll),
            growth_rate=float(max(grow_k, grow_l)),
            message=f"ratio c/(k(l+{c2})) still growing in the {direction}",
        )
    c1 = float(ratio.max())
    return SublinearReport(certified=True, c1=c1, c2=c2)


def check_misanthrope_condition(
    kernel: RateKernel, k_max: int, rtol: float = 1e-12
) -> CheckResult:
    """Test the ratio identity that characterizes stationary product measures.

    Checks c(k,l) * c(l+1,0) * c(1,k-1) == c(l+1,k-1) * c(k,0) * c(1,l)
    for 1 <= k <= k_max and 0 <= l <= k_max, which avoids dividing by rates
    that may vanish.  A vanishing c(k,0) or c(1,k) makes the family
    degenerate and is reported rather than raised.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    c = kernel.rate_matrix(k_max + 1)
    for k in range(1, k_max + 1):
        for l in range(0, k_max + 1):
            if c[l + 1, 0] == 0.0 or c[k, 0] == 0.0:
                return CheckResult(
                    False,
                    (k, l),
                    f"c({max(k, l + 1)},0)=0: no product family on this scale",
                    degenerate=True,
                )
            lhs = c[k, l] * c[l + 1, 0] * c[1, k - 1]
            rhs = c[l + 1, k - 1] * c[k, 0] * c[1, l]
            if abs(lhs - rhs) > rtol * max(abs(lhs), abs(rhs), 1e-300):
                return CheckResult(
                    False, (k, l), f"ratio identity fails at (k,l)=({k},{l})"
                )
    return CheckResult(True)


# ---------------------------------------------------------------------------
# stationary product-measure families

_OVERFLOW_LOG = 700.0


@dataclass
class StationaryFamily:
    """Weight sequence w(n) of the product-measure marginals of a kernel.

    log_w holds log w(n) for n = 0..n_max (w(0)=1); the linear weights are
    materialized on demand and overflow to +inf beyond the double range.
    ``degenerate`` marks families that collapse to the point mass at zero
    (rates with c(k,0)=0, e.g. the d=0 exchange kernel).
    """

    log_w: np.ndarray
    kernel_spec: str = ""
    degenerate: bool = False

    def __post_init__(self):
        self.log_w = np.asarray(self.log_w, dtype=float)
        if self.log_w[0] != 0.0:
            raise KernelError("w(0) must be 1")

    @property
    def n_max(self) -> int:
        return len(self.log_w) - 1

    @property
    def w(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(np.minimum(self.log_w, _OVERFLOW_LOG * 1.1))

    def export_rows(self):
        """(n, w, logw) rows for CSV export; overflowing w reported as inf."""
        w = np.where(self.log_w > _OVERFLOW_LOG, np.inf, np.exp(np.minimum(self.log_w, _OVERFLOW_LOG)))
        for n in range(self.n_max + 1):
            lw = self.log_w[n]
            yield n, w[n], lw


def stationary_weights(
    kernel: RateKernel, n_max: int, validate: bool = True
) -> StationaryFamily:
    """Weights w(n) = prod_{k<=n} c(1,k-1)/(c(1,0) c(k,0)), computed in log space.

    The 1/c(1,0) factor per step fixes the fugacity scale: zero-range
    kernels get the usual prod 1/g(k) weights and the standard condensing
    families get phi_c = 1.  A kernel with c(k,0) = 0 for all k >= 1 yields
    the degenerate point-mass family; c(k,0) = 0 at isolated k raises.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if validate and not kernel.is_table:
        res = check_misanthrope_condition(kernel, min(n_max, 32))
        if not res.passed and not res.degenerate:
            raise KernelError(f"kernel has no product family: {res.message}")
    if kernel.is_table and n_max > kernel.level_cap - 1:
        raise LevelOutOfRangeError(
            f"n_max {n_max} beyond table cap {kernel.level_cap}"
        )
    if kernel.is_table:
        c_out = kernel.table[1 : n_max + 1, 0]
        c_in = kernel.table[1, 0 : n_max]
    else:
        c_out = np.zeros(n_max)
        c_in = np.zeros(n_max)
        for u, v in kernel.term_arrays(n_max):
            c_out += u[1:] * v[0]
            c_in += u[1] * v[:-1]
    scale = c_in[0]
    if scale == 0.0 or np.all(c_out == 0.0):
        # no escape to empty sites: the only stationary marginal is delta_0
        log_w = np.full(n_max + 1, -np.inf)
        log_w[0] = 0.0
        return StationaryFamily(log_w, kernel.spec_string(), degenerate=True)
    if np.any(c_out == 0.0):
        k = int(np.argmax(c_out == 0.0)) + 1
        raise DegenerateKernelError(f"c({k},0) = 0: weight recursion breaks at n={k}")
    if np.any(c_in == 0.0):
        k = int(np.argmax(c_in == 0.0))
        raise DegenerateKernelError(f"c(1,{k}) = 0: weights vanish above n={k}")
    log_ratio = np.log(c_in) - np.log(c_out) - math.log(scale)
    log_w = np.concatenate([[0.0], np.cumsum(log_ratio)])
    return StationaryFamily(log_w, kernel.spec_string())


@dataclass(frozen=True)
class PartitionValue:
    value: float
    log_value: float
    tail_estimate: float
    converged: bool


def _log_terms(family: StationaryFamily, phi: float) -> np.ndarray:
    if phi < 0:
        raise ValueError("fugacity must be non-negative")
    n = np.arange(family.n_max + 1, dtype=float)
    if phi == 0.0:
        out = np.full(family.n_max + 1, -np.inf)
        out[0] = 0.0
        return out
    return family.log_w + n * math.log(phi)


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.sum(np.exp(a - m))))


def _tail_estimate(log_terms: np.ndarray) -> tuple[float, bool]:
    """Mass estimate past the truncation from the empirical decay of the terms.

    Returns (tail, converged).  Cleanly geometric decay is extrapolated by
    its ratio; slow decay (ratio near 1, where the ratio test is blind) is
    classified as power-law or stretched-exponential and integrated, with
    power exponents <= 1 reported as divergent.  converged=False means the
    partial sums demonstrably fail to converge.
    """
    n_max = len(log_terms) - 1
    window = max(8, n_max // 8)
    tail_terms = log_terms[-window:]
    finite = np.isfinite(tail_terms)
    if not np.isfinite(log_terms[-1]) or finite.sum() < 2:
        return 0.0, True
    diffs = np.diff(tail_terms[finite])
    log_r = float(np.mean(diffs))
    if log_r >= -1e-12:
        return math.inf, False
    if log_r > -1e-2:
        # ratio close to 1: geometric extrapolation unreliable
        cls = _fit_tail_class(log_terms)
        if cls.kind == "power" and cls.p <= 1.0:
            return math.inf, False
        return cls.integral_tail(n_max), True
    r = math.exp(log_r)
    last = math.exp(min(log_terms[-1], _OVERFLOW_LOG))
    return last * r / (1.0 - r), True


def partition_function(family: StationaryFamily, phi: float) -> PartitionValue:
    """z(phi) = sum_n w(n) phi^n over the truncated family, with a tail report."""
    log_terms = _log_terms(family, phi)
    log_z = _logsumexp(log_terms)
    tail, converged = _tail_estimate(log_terms)
    z = math.exp(min(log_z, _OVERFLOW_LOG))
    if not math.isfinite(log_z):
        z = math.inf if log_z > 0 else 1.0
    return PartitionValue(z, log_z, tail, converged)


def _first_moment_log_terms(family: StationaryFamily, phi: float) -> np.ndarray:
    log_terms = _log_terms(family, phi)
    n = np.arange(family.n_max + 1, dtype=float)
    with np.errstate(divide="ignore"):
        return log_terms + np.log(n)


def density(family: StationaryFamily, phi: float) -> float:
    """Mean occupation R(phi) of the marginal at fugacity phi; inf when it diverges."""
    if family.degenerate or phi == 0.0:
        return 0.0
    z = partition_function(family, phi)
    if not z.converged:
        return math.inf
    log_m = _first_moment_log_terms(family, phi)
    tail, converged = _tail_estimate(log_m[1:])
    if not converged or not math.isfinite(tail):
        return math.inf
    num = math.exp(_logsumexp(log_m)) + tail
    return num / (z.value + z.tail_estimate)


def marginal(family: StationaryFamily, phi: float, tail_tol: float = 1e-12) -> np.ndarray:
    """Normalized marginal f_n = w(n) phi^n / z(phi) on 0..n_max."""
    if family.degenerate:
        out = np.zeros(family.n_max + 1)
        out[0] = 1.0
        return out
    log_terms = _log_terms(family, phi)
    tail, converged = _tail_estimate(log_terms)
    log_z = _logsumexp(log_terms)
    if not converged or not math.isfinite(log_z):
        raise DegenerateKernelError(
            f"partition function diverges at phi={phi}; no normalizable marginal"
        )
    if tail > tail_tol * math.exp(min(log_z, _OVERFLOW_LOG)):
        raise KernelError(
            f"truncation tail {tail:.3g} above {tail_tol} of the mass; increase n_max"
        )
    return np.exp(log_terms - log_z)


# -- tail classes -----------------------------------------------------------


@dataclass(frozen=True)
class _TailFit:
    kind: str          # "power" or "stretched"
    p: float = 0.0     # power exponent (power class)
    c: float = 0.0     # decay constant (stretched class)
    sigma: float = 0.0 # stretch exponent (stretched class)
    amp_log: float = 0.0
    residual: float = math.inf

    def integral_tail(self, n_max: int, moment_order: int = 0) -> float:
        """Integral correction for sum_{n>n_max} n^moment_order * a_n."""
        q = moment_order
        if self.kind == "power":
            p_eff = self.p - q
            if p_eff <= 1.0:
                return math.inf
            log_val = self.amp_log + (1.0 - p_eff) * math.log(n_max) - math.log(p_eff - 1.0)
            return math.exp(min(log_val, _OVERFLOW_LOG))
        # stretched exponential: leading-order Laplace tail
        log_a = self.amp_log - self.c * n_max**self.sigma
        log_val = (
            log_a
            + (1.0 + q - self.sigma) * math.log(n_max)
            - math.log(self.c * self.sigma)
        )
        return math.exp(min(log_val, _OVERFLOW_LOG))


def _fit_tail_class(log_terms: np.ndarray) -> _TailFit:
    """Classify the decay of positive terms a_n as power-law or stretched-exponential."""
    n_max = len(log_terms) - 1
    lo = max(2, n_max // 2)
    n = np.arange(lo, n_max + 1, dtype=float)
    y = log_terms[lo:]
    good = np.isfinite(y)
    if good.sum() < 8:
        return _TailFit(kind="power", p=math.inf, amp_log=-math.inf, residual=0.0)
    n, y = n[good], y[good]
    # power law: y = A - p log n
    X = np.log(n)
    p, a = np.polyfit(X, y, 1)
    res_p = float(np.mean((y - (a + p * X)) ** 2))
    best = _TailFit(kind="power", p=-p, amp_log=a, residual=res_p)
    # stretched exponential: y = A - c n^sigma over a sigma grid
    for sigma in np.linspace(0.05, 1.0, 20):
        Xs = n**sigma
        slope, a_s = np.polyfit(Xs, y, 1)
        if slope >= 0:
            continue
        res_s = float(np.mean((y - (a_s + slope * Xs)) ** 2))
        if res_s < best.residual:
            best = _TailFit(
                kind="stretched", c=-slope, sigma=float(sigma), amp_log=a_s, residual=res_s
            )
    return best


@dataclass(frozen=True)
class CriticalPoint:
    phi_c: float
    rho_c: float
    stabilized: bool
    tail_class: str
    tail_bound: float = 0.0


def _window_slope(log_w: np.ndarray, m: int) -> float:
    lo = m // 2
    n = np.arange(lo, m + 1, dtype=float)
    y = log_w[lo : m + 1]
    return float(np.polyfit(n, y, 1)[0])


def _extrapolated_slope(log_w: np.ndarray, m: int) -> float:
    """limsup slope of log w from window slopes at m, m/2, m/4.

    The raw window slope converges like m^-1 for power-law weights and like
    m^-gamma for stretched-exponential ones; Aitken extrapolation across the
    two doublings removes the leading term for either decay class.
    """
    s1 = _window_slope(log_w, m)
    s2 = _window_slope(log_w, m // 2)
    s3 = _window_slope(log_w, m // 4)
    d1, d2 = s1 - s2, s2 - s3
    if d2 == 0.0 or not (0.05 < d1 / d2 < 0.95):
        return 2.0 * s1 - s2  # plain Richardson fallback
    q = d1 / d2
    return s1 + d1 * q / (1.0 - q)


def critical_point(family: StationaryFamily, stab_tol: float = 1e-6) -> CriticalPoint:
    """Radius of convergence phi_c of z and the maximal density rho_c = R(phi_c).

    phi_c comes from the decay slope of log w(n) over the last half of the
    range, extrapolated across window doublings because the raw slope of
    subexponential families converges only like a power of 1/n_max.  The
    estimate counts as stabilized when the last two doublings move it by
    less than ``stab_tol``.
    """
    if family.degenerate:
        return CriticalPoint(math.inf, 0.0, True, "degenerate")
    n_max = family.n_max
    if n_max < 64:
        raise ValueError("need n_max >= 64 to estimate phi_c")

    est = math.exp(-_extrapolated_slope(family.log_w, n_max))
    prev = math.exp(-_extrapolated_slope(family.log_w, n_max // 2))
    prev2 = math.exp(-_extrapolated_slope(family.log_w, n_max // 4)) if n_max >= 512 else math.nan
    stabilized = abs(est - prev) < stab_tol and (
        math.isnan(prev2) or abs(prev - prev2) < 10 * stab_tol
    )
    phi_c = est

    log_m = _first_moment_log_terms(family, phi_c)
    cls = _fit_tail_class(_log_terms(family, phi_c))
    if cls.kind == "power" and cls.p <= 1.0:
        # z itself diverges at phi_c: the family is defined on [0, phi_c) only
        return CriticalPoint(phi_c, math.inf, stabilized, "power", math.inf)
    tail1 = cls.integral_tail(n_max, moment_order=1)
    if not math.isfinite(tail1):
        return CriticalPoint(phi_c, math.inf, stabilized, cls.kind, math.inf)
    z = partition_function(family, phi_c)
    z_tail = cls.integral_tail(n_max, moment_order=0)
    num = math.exp(_logsumexp(log_m)) + tail1
    rho_c = num / (z.value + z_tail)
    return CriticalPoint(phi_c, rho_c, stabilized, cls.kind, tail1)


def invert_density(
    family: StationaryFamily,
    rho: float,
    tol: float = 1e-10,
    crit: Optional[CriticalPoint] = None,
) -> float:
    """Fugacity phi with R(phi) = rho, by bisection on the monotone density map."""
    if rho < 0:
        raise ValueError("density must be non-negative")
    if rho == 0.0:
        return 0.0
    if family.degenerate:
        raise SupercriticalDensityError(rho, 0.0)
    if crit is None:
        crit = critical_point(family)
    if rho > crit.rho_c:
        raise SupercriticalDensityError(rho, crit.rho_c)
    hi = crit.phi_c
    if not math.isfinite(density(family, hi)) or density(family, hi) < rho:
        # open-domain families: walk up toward phi_c until R exceeds rho
        hi = crit.phi_c * 0.5
        while density(family, hi) < rho:
            hi = 0.5 * (hi + crit.phi_c)
            if crit.phi_c - hi < 1e-15 * crit.phi_c:
                raise SupercriticalDensityError(rho, crit.rho_c)
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = density(family, mid)
        if abs(val - rho) <= tol * max(1.0, rho):
            return mid
        if val < rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
