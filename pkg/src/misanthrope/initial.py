"""Initial configurations for the simulator and initial laws for the mean-field ODE.

Samplers cover the admissible families: i.i.d. product measures, N particles
thrown uniformly at random (multinomial occupations), conditioned product
measures with an exact particle count and a second-moment cap, and
deterministic level profiles.  All samplers are pure functions of
(parameters, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .simulate import Configuration

__all__ = [
    "InitialSpec",
    "parse_initial",
    "poisson_pmf",
    "delta_pmf",
    "geometric_pmf",
    "product_sample",
    "multinomial_sample",
    "conditioned_product_sample",
    "deterministic_profile",
    "omega_membership",
    "default_alpha",
]


def poisson_pmf(rho: float, n_max: Optional[int] = None) -> np.ndarray:
    """Poisson(rho) probabilities down to float underflow, renormalized."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho == 0:
        return np.array([1.0])
    if n_max is None:
        n_max = max(20, int(rho + 12 * math.sqrt(rho) + 30))
    k = np.arange(n_max + 1)
    from scipy.stats import poisson as _poisson

    pmf = _poisson.pmf(k, rho)
    s = pmf.sum()
    if not 0.999 < s <= 1.0 + 1e-12:
        raise ValueError(f"poisson truncation at {n_max} loses mass {1-s:.2e}")
    return pmf / s


def delta_pmf(k: int) -> np.ndarray:
    out = np.zeros(int(k) + 1)
    out[int(k)] = 1.0
    return out


def geometric_pmf(phi: float, tol: float = 1e-16) -> np.ndarray:
    """(1-phi) phi^k occupation law, truncated at relative tail tol."""
    if not 0 <= phi < 1:
        raise ValueError("phi must lie in [0, 1)")
    if phi == 0:
        return np.array([1.0])
    n_max = max(1, int(math.log(tol) / math.log(phi)) + 1)
    pmf = (1 - phi) * phi ** np.arange(n_max + 1)
    return pmf / pmf.sum()


def _moments(pmf: np.ndarray) -> tuple[float, float]:
    k = np.arange(pmf.size, dtype=float)
    return float(k @ pmf), float((k * k) @ pmf)


def default_alpha(pmf: np.ndarray) -> tuple[float, float]:
    """Default uniform-bound constants: alpha1 = 2 m1(0), alpha2 = 4 m2(0)."""
    m1, m2 = _moments(pmf)
    return 2.0 * m1, 4.0 * m2


def omega_membership(config: Configuration, alpha1: float, alpha2: float) -> bool:
    """Whether the configuration obeys the empirical moment bounds."""
    occ = config.occupations.astype(float)
    return bool(occ.mean() <= alpha1 and (occ**2).mean() <= alpha2)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def product_sample(
    L: int,
    marginal: np.ndarray,
    seed,
    alpha: Optional[tuple[float, float]] = None,
) -> tuple[Configuration, Optional[bool]]:
    """i.i.d. occupations from the marginal; reports moment-bound membership.

    Membership in the bounded-moment set is reported rather than enforced:
    atypical samples are kept so the product law stays exact, and the flag
    lets experiments record how often they occurred.
    """
    if L < 1:
        raise ValueError("L must be positive")
    marginal = np.asarray(marginal, dtype=float)
    m1, m2 = _moments(marginal)
    if not (math.isfinite(m1) and math.isfinite(m2)):
        raise ValueError("marginal needs finite first and second moments")
    rng = _rng(seed)
    occ = rng.choice(marginal.size, size=L, p=marginal / marginal.sum())
    config = Configuration(occ)
    member = omega_membership(config, *alpha) if alpha is not None else None
    return config, member


def multinomial_sample(L: int, N: int, seed) -> Configuration:
    """N particles placed independently and uniformly over L sites."""
    if L < 1:
        raise ValueError("L must be positive")
    if N < 0:
        raise ValueError("N must be non-negative")
    rng = _rng(seed)
    occ = rng.multinomial(N, np.full(L, 1.0 / L))
    return Configuration(occ)


def conditioned_product_sample(
    L: int,
    N: int,
    marginal: np.ndarray,
    alpha2: float,
    seed,
    max_attempts: int = 1_000_000,
) -> Configuration:
    """Product sample conditioned on sum = N and mean square <= alpha2.

    Plain rejection, so the output follows the exact conditional law; the
    acceptance probability scales like 1/sqrt(L) for compatible targets.
    """
    marginal = np.asarray(marginal, dtype=float)
    p = marginal / marginal.sum()
    top = marginal.size - 1
    if N > top * L or N < 0:
        raise ValueError(f"target N={N} impossible for support 0..{top} on {L} sites")
    rng = _rng(seed)
    batch = max(8, int(4 * math.sqrt(L)))
    attempts = 0
    while attempts < max_attempts:
        m = min(batch, max_attempts - attempts)
        occ = rng.choice(marginal.size, size=(m, L), p=p)
        attempts += m
        sums = occ.sum(axis=1)
        sq = (occ.astype(np.int64) ** 2).sum(axis=1)
        hit = np.nonzero((sums == N) & (sq <= alpha2 * L))[0]
        if hit.size:
            return Configuration(occ[hit[0]])
    raise RuntimeError(
        f"conditioned sampler exhausted {max_attempts} attempts "
        f"(acceptance estimate < {1.0 / max_attempts:.1e})"
    )


def deterministic_profile(histogram, L: Optional[int] = None) -> Configuration:
    """Configuration with exactly N_k sites at level k, sites ordered by level."""
    if isinstance(histogram, dict):
        top = max(histogram) if histogram else 0
        counts = np.zeros(top + 1, dtype=np.int64)
        for k, n in histogram.items():
            counts[int(k)] = int(n)
    else:
        counts = np.asarray(histogram, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("level counts must be non-negative")
    total = int(counts.sum())
    if L is not None and total != L:
        raise ValueError(f"level counts sum to {total}, expected L={L}")
    occ = np.repeat(np.arange(counts.size), counts)
    return Configuration(occ)


@dataclass(frozen=True)
class InitialSpec:
    """Parsed initial-condition request; realized per (L, seed)."""

    mode: str                      # product | multinomial | conditioned | profile
    marginal: Optional[np.ndarray] = None
    N: Optional[int] = None
    rho: Optional[float] = None
    alpha2: Optional[float] = None
    profile: Optional[np.ndarray] = None

    def particle_target(self, L: int) -> Optional[int]:
        if self.N is not None:
            return self.N
        if self.rho is not None:
            return int(round(self.rho * L))
        return None

    def mean_field_f0(self) -> np.ndarray:
        """The initial law f(0) this spec converges to as L grows."""
        if self.mode == "product" or self.mode == "conditioned":
            return self.marginal
        if self.mode == "multinomial":
            rho = self.rho if self.rho is not None else None
            if rho is None:
                raise ValueError("multinomial:N=... has no L-free limit law; use rho=")
            return poisson_pmf(rho)
        if self.mode == "profile":
            return self.profile / self.profile.sum()
        raise ValueError(self.mode)

    def realize(self, L: int, seed) -> Configuration:
        if self.mode == "product":
            return product_sample(L, self.marginal, seed)[0]
        if self.mode == "multinomial":
            return multinomial_sample(L, self.particle_target(L), seed)
        if self.mode == "conditioned":
            alpha2 = self.alpha2
            if alpha2 is None:
                alpha2 = default_alpha(self.marginal)[1]
            return conditioned_product_sample(
                L, self.particle_target(L), self.marginal, alpha2, seed
            )
        if self.mode == "profile":
            return deterministic_profile(self.profile, L)
        raise ValueError(self.mode)


def _parse_marginal(text: str) -> np.ndarray:
    text = text.strip()
    if "(" not in text or not text.endswith(")"):
        raise ValueError(f"malformed marginal {text!r}")
    name, arg = text[:-1].split("(", 1)
    name = name.strip().lower()
    if name == "poisson":
        return poisson_pmf(float(arg))
    if name == "delta":
        return delta_pmf(int(arg))
    if name == "geometric":
        return geometric_pmf(float(arg))
    raise ValueError(f"unknown marginal family {name!r}")


def _load_profile_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().lower().replace(" ", "").lstrip("#").lstrip()
        if header not in ("k,count", "level,count"):
            raise ValueError(f"profile CSV {path} must start with header 'k,count'")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k_s, n_s = line.split(",")
            rows.append((int(k_s), int(n_s)))
    top = max(k for k, _ in rows)
    counts = np.zeros(top + 1, dtype=np.int64)
    for k, n in rows:
        counts[k] = n
    return counts


def parse_initial(spec: str) -> InitialSpec:
    """Parse strings like ``product:poisson(0.5)``, ``multinomial:N=120``,
    ``multinomial:rho=0.3``, ``conditioned:poisson(0.5),N=120,alpha2=3`` and
    ``profile:@hist.csv``."""
    spec = spec.strip()
    if ":" not in spec:
        raise ValueError(f"initial spec {spec!r} needs the form mode:params")
    mode, body = spec.split(":", 1)
    mode = mode.strip().lower()
    if mode == "product":
        return InitialSpec(mode="product", marginal=_parse_marginal(body))
    if mode == "multinomial":
        kv = dict(chunk.split("=", 1) for chunk in body.split(",") if chunk)
        extra = set(kv) - {"N", "rho"}
        if extra:
            raise ValueError(f"unknown multinomial parameters {sorted(extra)}")
        n = int(kv["N"]) if "N" in kv else None
        rho = float(kv["rho"]) if "rho" in kv else None
        if n is None and rho is None:
            raise ValueError("multinomial needs N= or rho=")
        return InitialSpec(mode="multinomial", N=n, rho=rho)
    if mode == "conditioned":
        parts = [p for p in body.split(",") if p]
        if not parts:
            raise ValueError("conditioned needs a marginal")
        marginal = _parse_marginal(parts[0])
        n = rho = alpha2 = None
        for chunk in parts[1:]:
            key, val = chunk.split("=", 1)
            key = key.strip()
            if key == "N":
                n = int(val)
            elif key == "rho":
                rho = float(val)
            elif key == "alpha2":
                alpha2 = float(val)
            else:
                raise ValueError(f"unknown conditioned parameter {key!r}")
        if n is None and rho is None:
            raise ValueError("conditioned needs N= or rho=")
        return InitialSpec(mode="conditioned", marginal=marginal, N=n, rho=rho, alpha2=alpha2)
    if mode == "profile":
        body = body.strip()
        if not body.startswith("@"):
            raise ValueError("profile spec must reference a CSV as profile:@path")
        return InitialSpec(mode="profile", profile=_load_profile_csv(body[1:]))
    raise ValueError(f"unknown initial mode {mode!r}")
