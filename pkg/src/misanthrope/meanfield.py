"""Mean-field master equation of the limiting non-linear birth-death chain.

The level occupancy fractions f_k(t) evolve under

    df_k/dt = mu_{k+1} f_{k+1} + beta_{k-1} f_{k-1} - (mu_k + beta_k) f_k,

with state-dependent birth rates beta_k = sum_l c(l,k) f_l and death rates
mu_k = sum_l c(k,l) f_l.  The system is truncated at an adaptive level K;
the boundary outflow beta_K f_K that would feed level K+1 is routed into an
explicit leak account (mass and first moment) so conservation violations
are observable instead of hidden, and K doubles whenever mass reaches the
boundary.

Integration uses an explicit Dormand-Prince 5(4) embedded pair with PI
step-size control.  Growth of the second moment past a configurable
threshold, or collapse of the step size, stops the run and reports the
time as a blow-up flag; the behaviour of that flag under K-refinement is
the operational notion of finite-time versus instantaneous blow-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernels import RateKernel

__all__ = [
    "SolverConfig",
    "MeanFieldState",
    "MeanFieldSolution",
    "birth_death_rates",
    "rhs",
    "moment",
    "gronwall_envelope",
    "stationarity_residual",
    "detailed_balance_residual",
    "integrate",
]


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    K_init: int = 64
    boundary_trigger: float = 1e-12
    max_K: int = 1 << 16
    blowup_m2_threshold: float = 1e8
    max_steps: int = 2_000_000
    h_floor_abs: float = 1e-14
    h_floor_rel: float = 1e-13

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not (0 < self.boundary_trigger < 1):
            raise ValueError("boundary_trigger must lie in (0,1)")


@dataclass
class MeanFieldState:
    f: np.ndarray
    K: int
    t: float
    leaked_mass: float = 0.0
    leaked_m1: float = 0.0
    blowup_flag: Optional[float] = None


def _beta_mu(f: np.ndarray, kernel: RateKernel, K: int) -> tuple[np.ndarray, np.ndarray]:
    if kernel.is_table:
        if K > kernel.level_cap:
            raise ValueError(f"K={K} beyond table cap {kernel.level_cap}")
        c = kernel.table[: K + 1, : K + 1]
        beta = c.T @ f
        mu = c @ f
        return beta, mu
    beta = np.zeros(K + 1)
    mu = np.zeros(K + 1)
    for u, v in kernel.term_arrays(K):
        beta += (u @ f) * v
        mu += (v @ f) * u
    return beta, mu


def birth_death_rates(f, kernel: RateKernel, K: Optional[int] = None):
    """Birth rates beta_k = sum_l c(l,k) f_l and death rates mu_k = sum_l c(k,l) f_l.

    mu_0 = 0 always since empty sites emit nothing; for separable kernels
    the computation is O(K) per term via inner products.
    """
    f = np.asarray(f, dtype=float)
    if K is None:
        K = f.size - 1
    if f.size != K + 1:
        raise ValueError("f must have length K+1")
    return _beta_mu(f, kernel, K)


def rhs(f, kernel: RateKernel, K: Optional[int] = None) -> np.ndarray:
    """Right-hand side of the truncated master equation on levels 0..K.

    Level K is closed by routing its upward flux out of the system (the
    leak), so sum_k rhs_k equals exactly minus that boundary flux.
    """
    f = np.asarray(f, dtype=float)
    if K is None:
        K = f.size - 1
    beta, mu = _beta_mu(f, kernel, K)
    bf = beta * f
    mf = mu * f
    out = -(bf + mf)
    out[:-1] += mf[1:]
    out[1:] += bf[:-1]
    return out


def moment(f, n: int) -> float:
    """n-th moment sum_k k^n f_k over the truncation window."""
    f = np.asarray(f, dtype=float)
    if n == 0:
        return float(f.sum())
    k = np.arange(f.size, dtype=float)
    return float((k**n) @ f)


def gronwall_envelope(m_n0: float, cbar: float, t: float) -> float:
    """Moment growth envelope (m_n(0) + C t) e^{C t} from the a-priori bound."""
    if cbar <= 0:
        raise ValueError("the envelope constant must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    return (m_n0 + cbar * t) * math.exp(cbar * t)


def stationarity_residual(f, kernel: RateKernel, K: Optional[int] = None) -> float:
    """L1 norm of the master-equation right-hand side at f."""
    return float(np.abs(rhs(f, kernel, K)).sum())


def detailed_balance_residual(f, kernel: RateKernel, K: Optional[int] = None) -> float:
    """max_k |f_k beta_k - f_{k+1} mu_{k+1}|: reversibility defect of f."""
    f = np.asarray(f, dtype=float)
    if K is None:
        K = f.size - 1
    beta, mu = _beta_mu(f, kernel, K)
    return float(np.max(np.abs(f[:-1] * beta[:-1] - f[1:] * mu[1:])))


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) with PI control, adaptive truncation and leak accounting

_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_E = (  # b5 - b4: error estimator weights
    35 / 384 - 5179 / 57600,
    0.0,
    500 / 1113 - 7571 / 16695,
    125 / 192 - 393 / 640,
    -2187 / 6784 + 92097 / 339200,
    11 / 84 - 187 / 2100,
    -1 / 40,
)


@dataclass
class MeanFieldSolution:
    """Recorded states and moment series from one integration."""

    states: list[MeanFieldState]
    kernel_spec: str
    blowup_time: Optional[float] = None
    flags: dict = field(default_factory=dict)
    n_steps: int = 0
    n_rejected: int = 0
    tau: Optional[np.ndarray] = None  # ECP rescaled clock int_0^t m_lambda dt'

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def moments(self, n: int) -> np.ndarray:
        return np.array([moment(s.f, n) for s in self.states])

    @property
    def leaked(self) -> np.ndarray:
        return np.array([s.leaked_mass for s in self.states])

    def state_at(self, t: float) -> MeanFieldState:
        for s in self.states:
            if abs(s.t - t) <= 1e-12 * max(1.0, abs(t)):
                return s
        raise KeyError(f"no state recorded at t={t}")


class _Rhs:
    """rhs of the extended vector [f_0..f_K, leaked_mass, leaked_m1]."""

    def __init__(self, kernel: RateKernel, K: int):
        self.kernel = kernel
        self.K = K

    def __call__(self, y: np.ndarray) -> np.ndarray:
        K = self.K
        f = y[: K + 1]
        beta, mu = _beta_mu(f, self.kernel, K)
        bf = beta * f
        mf = mu * f
        out = np.empty_like(y)
        core = out[: K + 1]
        np.negative(bf + mf, out=core)
        core[:-1] += mf[1:]
        core[1:] += bf[:-1]
        out[K + 1] = bf[K]
        out[K + 2] = (K + 1) * bf[K]
        return out


def _initial_step(y0, f0_dot, cfg: SolverConfig) -> float:
    sc = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = math.sqrt(float(np.mean((y0 / sc) ** 2)))
    d1 = math.sqrt(float(np.mean((f0_dot / sc) ** 2)))
    if d0 < 1e-5 or d1 < 1e-5:
        return 1e-6
    return 0.01 * d0 / d1


def integrate(
    f0,
    kernel: RateKernel,
    horizon: float,
    solver_config: Optional[SolverConfig] = None,
    record_times: Optional[Sequence[float]] = None,
) -> MeanFieldSolution:
    """Integrate the mean-field equation from f0 up to the horizon.

    Records the state at each requested time (default: just the horizon).
    Integration stops early with a blow-up flag when the second moment
    crosses the configured threshold or the step size underflows; running
    out of levels (max_K) or steps is reported in the flags instead.
    """
    cfg = solver_config or SolverConfig()
    f0 = np.asarray(f0, dtype=float)
    if f0.ndim != 1 or f0.size < 1:
        raise ValueError("f0 must be a non-empty vector")
    if np.any(f0 < 0):
        raise ValueError("f0 must be non-negative")
    if abs(f0.sum() - 1.0) > 1e-8:
        raise ValueError("f0 must be normalized")
    rec = sorted(float(t) for t in record_times) if record_times is not None else [horizon]
    if rec and (rec[0] < 0 or rec[-1] > horizon + 1e-12):
        raise ValueError("record times must lie within [0, horizon]")

    K = max(cfg.K_init, f0.size - 1)
    K = min(K, cfg.max_K)
    if kernel.is_table:
        K = min(K, kernel.level_cap)
    y = np.zeros(K + 3)
    y[: f0.size] = f0
    t = 0.0
    fn = _Rhs(kernel, K)
    lam = kernel.params.get("lam") if kernel.kind in ("ecp", "inclusion") else None
    tau_acc = 0.0
    m_lam_prev = moment(y[: K + 1], lam) if lam is not None else 0.0

    states: list[MeanFieldState] = []
    taus: list[float] = []
    flags: dict = {}
    blowup: Optional[float] = None

    def snapshot(at: float) -> None:
        states.append(
            MeanFieldState(
                f=y[: K + 1].copy(),
                K=K,
                t=at,
                leaked_mass=float(y[K + 1]),
                leaked_m1=float(y[K + 2]),
                blowup_flag=blowup,
            )
        )
        taus.append(tau_acc)

    # consume leading records at t=0
    next_i = 0
    while next_i < len(rec) and rec[next_i] <= 0.0:
        snapshot(rec[next_i])
        next_i += 1

    k1 = fn(y)
    h = _initial_step(y, k1, cfg)
    err_prev = 1.0
    n_steps = 0
    n_rejected = 0
    stages = [np.empty_like(y) for _ in range(7)]

    while t < horizon - 1e-15 * max(1.0, horizon):
        if n_steps + n_rejected >= cfg.max_steps:
            flags["max_steps_exceeded"] = True
            break
        target = rec[next_i] if next_i < len(rec) else horizon
        target = min(target, horizon)
        h = min(h, max(target - t, 0.0) or (horizon - t))
        if h < cfg.h_floor_abs + cfg.h_floor_rel * abs(t):
            blowup = t
            flags["step_underflow"] = True
            break

        # Dormand-Prince stages (k1 carried over, FSAL)
        stages[0] = k1
        ok = True
        for i in range(1, 7):
            yi = y.copy()
            a = _DP_A[i]
            for j in range(i):
                if a[j] != 0.0:
                    yi += (h * a[j]) * stages[j]
            stages[i] = fn(yi)
            if not np.all(np.isfinite(stages[i])):
                ok = False
                break
        if ok:
            y_new = y.copy()
            for j in range(6):
                if _DP_B5[j] != 0.0:
                    y_new += (h * _DP_B5[j]) * stages[j]
            err_vec = np.zeros_like(y)
            for j in range(7):
                if _DP_E[j] != 0.0:
                    err_vec += (h * _DP_E[j]) * stages[j]
            sc = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            err = math.sqrt(float(np.mean((err_vec / sc) ** 2)))
        else:
            err = math.inf

        neg_abort = False
        if ok:
            fpart = y_new[: K + 1]
            worst = float(fpart.min(initial=0.0))
            if worst < -cfg.abs_tol:
                neg_abort = True

        if not ok or err > 1.0 or neg_abort:
            n_rejected += 1
            if math.isfinite(err) and err > 0:
                h *= max(0.1, min(0.9, 0.9 * err ** -0.2))
            else:
                h *= 0.1
            continue

        # accept: clip roundoff negatives, renormalizing the deficit away
        fpart = y_new[: K + 1]
        neg = fpart < 0.0
        if neg.any():
            before = float(fpart.sum())
            fpart[neg] = 0.0
            after = float(fpart.sum())
            if after > 0:
                fpart *= before / after
        t_new = t + h
        if lam is not None:
            m_lam_new = moment(fpart, lam)
            tau_acc += 0.5 * (m_lam_prev + m_lam_new) * h
            m_lam_prev = m_lam_new
        y = y_new
        t = t_new
        n_steps += 1
        k1 = stages[6]  # FSAL

        # step-size controller (PI)
        err = max(err, 1e-10)
        fac = 0.9 * err**-0.14 * err_prev**0.08
        h *= min(5.0, max(0.2, fac))
        err_prev = err

        # blow-up detection
        m2 = moment(y[: K + 1], 2)
        if m2 > cfg.blowup_m2_threshold:
            blowup = t
            flags["m2_threshold"] = True

        # records, including stopping exactly at them
        while next_i < len(rec) and rec[next_i] <= t + 1e-15 * max(1.0, t):
            snapshot(rec[next_i])
            next_i += 1
        if blowup is not None:
            break

        # adaptive truncation growth
        if y[K] > cfg.boundary_trigger and K < cfg.max_K and not kernel.is_table:
            new_K = min(2 * K, cfg.max_K)
            grown = np.zeros(new_K + 3)
            grown[: K + 1] = y[: K + 1]
            grown[new_K + 1] = y[K + 1]
            grown[new_K + 2] = y[K + 2]
            y = grown
            K = new_K
            fn = _Rhs(kernel, K)
            k1 = fn(y)
            stages = [np.empty_like(y) for _ in range(7)]
        elif y[K] > cfg.boundary_trigger and K >= cfg.max_K:
            flags["max_K_saturated"] = True

    if blowup is not None:
        snapshot(t)
    elif not flags.get("max_steps_exceeded"):
        while next_i < len(rec):
            snapshot(rec[next_i])
            next_i += 1
    sol = MeanFieldSolution(
        states=states,
        kernel_spec=kernel.spec_string(),
        blowup_time=blowup,
        flags=flags,
        n_steps=n_steps,
        n_rejected=n_rejected,
        tau=np.array(taus) if lam is not None else None,
    )
    return sol
