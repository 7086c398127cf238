"""Exact continuous-time simulation of misanthrope dynamics on the complete graph.

Waiting times are drawn against the exact total jump rate, which the state
keeps in O(1) through per-term aggregates U_t = sum_x u_t(eta_x),
V_t = sum_x v_t(eta_x) and the diagonal correction D_t.  The jump pair is
then selected by thinning against the separable envelope: pick a term
proportional to U_t V_t, a departure level from a Fenwick tree weighted by
N_k u_t(k), a target level weighted by N_l v_t(l), uniform sites within the
levels, and reject the proposal only when both picks land on the same site.
That rejection is the entire envelope gap, so acceptance is 1 - O(M/L) with
M the number of occupied levels.

Table kernels cannot use the envelope and take a documented slow path that
maintains the exact double sum incrementally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .kernels import RateKernel, check_nondegenerate

__all__ = [
    "Configuration",
    "SimState",
    "JumpEvent",
    "EmpiricalTrajectory",
    "new_simulation",
    "total_jump_rate",
    "step",
    "run_until",
    "empirical_measure",
    "configuration_to_csv",
    "ensemble_marginal",
    "two_site_statistics",
    "TwoSiteStats",
    "replica_seed",
    "run_ensemble",
]

RESYNC_INTERVAL = 1 << 16
DEFAULT_JUMP_CAP = 10**9


class Configuration:
    """Per-site occupations together with the level histogram N_k."""

    def __init__(self, occupations: Sequence[int]):
        occ = np.asarray(occupations, dtype=np.int64)
        if occ.ndim != 1:
            raise ValueError("occupations must be one-dimensional")
        if occ.size and occ.min() < 0:
            raise ValueError("occupations must be non-negative")
        self.occupations = occ

    @property
    def L(self) -> int:
        return int(self.occupations.size)

    @property
    def N(self) -> int:
        return int(self.occupations.sum())

    def histogram(self) -> np.ndarray:
        """Counts N_k for k = 0..max occupation."""
        top = int(self.occupations.max()) if self.occupations.size else 0
        return np.bincount(self.occupations, minlength=top + 1)

    def __eq__(self, other) -> bool:
        return isinstance(other, Configuration) and np.array_equal(
            self.occupations, other.occupations
        )

    def __repr__(self) -> str:
        return f"Configuration(L={self.L}, N={self.N})"


def empirical_measure(config) -> np.ndarray:
    """Fractions F_k = N_k / L of sites at each occupation level."""
    if not isinstance(config, Configuration):
        config = Configuration(config)
    return config.histogram() / config.L


def configuration_to_csv(config: Configuration, path) -> None:
    """Snapshot export, one ``site,occupation`` row per lattice site."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# schema: site,occupation\n")
        fh.write("site,occupation\n")
        for x, k in enumerate(config.occupations):
            fh.write(f"{x},{int(k)}\n")


@dataclass(frozen=True)
class JumpEvent:
    dt: float
    source: int
    target: int


class _Uniforms:
    """Buffered uniforms from a counter-based Philox stream."""

    __slots__ = ("gen", "buf", "idx")

    def __init__(self, seed_seq: np.random.SeedSequence):
        self.gen = np.random.Generator(np.random.Philox(seed_seq))
        self.buf = self.gen.random(4096)
        self.idx = 0

    def __call__(self) -> float:
        i = self.idx
        if i == 4096:
            self.buf = self.gen.random(4096)
            i = 0
        self.idx = i + 1
        return self.buf[i]


class _Fenwick:
    """Fenwick tree over levels with exact leaf weights and drift guards."""

    __slots__ = ("cap", "tree", "leaf", "total")

    def __init__(self, cap: int):
        self.cap = cap  # power of two
        self.tree = [0.0] * (cap + 1)
        self.leaf = [0.0] * cap
        self.total = 0.0

    def set(self, i: int, value: float) -> None:
        delta = value - self.leaf[i]
        if delta == 0.0:
            return
        self.leaf[i] = value
        self.total += delta
        tree = self.tree
        j = i + 1
        cap = self.cap
        while j <= cap:
            tree[j] += delta
            j += j & (-j)

    def rebuild(self) -> None:
        leaf = self.leaf
        tree = self.tree
        cap = self.cap
        for j in range(cap + 1):
            tree[j] = 0.0
        total = 0.0
        for i, w in enumerate(leaf):
            total += w
            j = i + 1
            while j <= cap:
                tree[j] += w
                j += j & (-j)
        self.total = total

    def sample(self, r: float) -> int:
        """Largest-prefix descent: index i with cumulative weight crossing r."""
        idx = 0
        mask = self.cap >> 1
        tree = self.tree
        while mask:
            nxt = idx + mask
            w = tree[nxt]
            if r >= w:
                r -= w
                idx = nxt
            mask >>= 1
        return idx


class SimState:
    """Mutable simulation state: configuration, sampling structures, clock, RNG."""

    def __init__(self, config: Configuration, kernel: RateKernel, seed):
        if config.L < 2:
            raise ValueError("need at least two sites for jumps to have targets")
        self.kernel = kernel
        self.L = config.L
        self.N = config.N
        self.t = 0.0
        self.jumps = 0
        self.proposals = 0
        self.absorbed = False
        if isinstance(seed, np.random.SeedSequence):
            self.seed_key = tuple(seed.entropy) if isinstance(seed.entropy, (list, tuple)) else (seed.entropy,)
            seed_seq = seed
        else:
            self.seed_key = (int(seed),)
            seed_seq = np.random.SeedSequence(int(seed))
        self.rng = _Uniforms(seed_seq)

        occ = [int(v) for v in config.occupations]
        self.occ = occ
        top = max(occ) if occ else 0
        self.is_table = kernel.is_table
        if self.is_table:
            if top > kernel.level_cap:
                raise ValueError("initial occupations beyond the table cap")
            cap = kernel.level_cap + 1
        else:
            cap = 4
            while cap < top + 2:
                cap *= 2
        self.cap = cap
        self.bucket: list[list[int]] = [[] for _ in range(cap)]
        self.pos = [0] * self.L
        for x, k in enumerate(occ):
            b = self.bucket[k]
            self.pos[x] = len(b)
            b.append(x)

        if self.is_table:
            self._init_table()
        else:
            self._init_terms()

    # -- separable-term machinery -------------------------------------------

    def _init_terms(self) -> None:
        arrays = self.kernel.term_arrays(self.cap - 1)
        self.u = [u.tolist() for u, _ in arrays]
        self.v = [v.tolist() for _, v in arrays]
        self.tu = [_Fenwick(self.cap) for _ in arrays]
        self.tv = [_Fenwick(self.cap) for _ in arrays]
        self.D = [0.0] * len(arrays)
        self._resync()

    def _resync(self) -> None:
        """Recompute aggregates and tree leaves from the histogram."""
        for t in range(len(self.u)):
            u, v = self.u[t], self.v[t]
            tu, tv = self.tu[t], self.tv[t]
            d = 0.0
            for k in range(self.cap):
                n_k = len(self.bucket[k])
                tu.leaf[k] = n_k * u[k]
                tv.leaf[k] = n_k * v[k]
                d += n_k * u[k] * v[k]
            tu.rebuild()
            tv.rebuild()
            self.D[t] = d

    def _grow(self, needed: int) -> None:
        cap = self.cap
        while cap < needed + 2:
            cap *= 2
        self.cap = cap
        self.bucket.extend([] for _ in range(cap - len(self.bucket)))
        self._init_terms()

    def recomputed_aggregates(self):
        """Aggregates (U_t, V_t, D_t) recomputed from scratch, for consistency checks."""
        out = []
        for t in range(len(self.u)):
            u, v, d = 0.0, 0.0, 0.0
            for k in range(self.cap):
                n_k = len(self.bucket[k])
                if n_k:
                    u += n_k * self.u[t][k]
                    v += n_k * self.v[t][k]
                    d += n_k * self.u[t][k] * self.v[t][k]
            out.append((u, v, d))
        return out

    def aggregates(self):
        return [(self.tu[t].total, self.tv[t].total, self.D[t]) for t in range(len(self.u))]

    # -- table slow path ------------------------------------------------------

    def _init_table(self) -> None:
        c = self.kernel.table
        self.c_mat = c
        self.counts = np.array([len(b) for b in self.bucket], dtype=np.int64)
        # row sums S_k = sum_l N_l c(k,l); updated in O(cap) per touched level
        self.rowsum = c @ self.counts.astype(float)
        self.diag = float(np.sum(self.counts * np.diag(c)))

    def _table_total(self) -> float:
        return (float(self.counts @ self.rowsum) - self.diag) / (self.L - 1)

    def _table_touch(self, lev: int, delta: int) -> None:
        self.counts[lev] += delta
        self.rowsum += delta * self.c_mat[:, lev]
        self.diag += delta * self.c_mat[lev, lev]

    # -- dynamics -------------------------------------------------------------

    def total_rate(self) -> float:
        if self.is_table:
            return self._table_total()
        total = 0.0
        for t in range(len(self.u)):
            total += self.tu[t].total * self.tv[t].total - self.D[t]
        return total / (self.L - 1)

    def _move(self, x: int, y: int) -> None:
        """Relocate one particle from site x to site y, keeping structures in sync."""
        occ = self.occ
        bucket = self.bucket
        pos = self.pos
        k = occ[x]
        l = occ[y]
        if l + 2 > self.cap:
            if self.is_table:
                raise ValueError(
                    f"occupation would exceed the table cap {self.kernel.level_cap}"
                )
            self._grow(l + 2)
            bucket = self.bucket

        for site, frm, to in ((x, k, k - 1), (y, l, l + 1)):
            b = bucket[frm]
            i = pos[site]
            last = b[-1]
            b[i] = last
            pos[last] = i
            b.pop()
            nb = bucket[to]
            pos[site] = len(nb)
            nb.append(site)
            occ[site] = to

        touched = {k, k - 1, l, l + 1}
        if self.is_table:
            # counts already moved via buckets; rebuild the numpy mirrors
            for lev in touched:
                n_new = len(bucket[lev])
                delta = n_new - self.counts[lev]
                if delta:
                    self._table_touch(lev, int(delta))
            return
        for t in range(len(self.u)):
            u, v = self.u[t], self.v[t]
            tu, tv = self.tu[t], self.tv[t]
            d = self.D[t]
            for lev in touched:
                n_new = len(bucket[lev])
                uw = u[lev]
                vw = v[lev]
                old = tu.leaf[lev]
                tu.set(lev, n_new * uw)
                tv.set(lev, n_new * vw)
                if uw != 0.0 and vw != 0.0:
                    d += (n_new * uw - old) * vw
            self.D[t] = d

    def _select_pair(self):
        """Thinned pair selection: exact c(eta_x, eta_y) law on ordered pairs x != y."""
        rng = self.rng
        bucket = self.bucket
        if self.is_table:
            weights = self.counts * self.rowsum
            total = float(weights.sum())
            cum = np.cumsum(weights)
            while True:
                self.proposals += 1
                k = int(np.searchsorted(cum, rng() * total, side="right"))
                row = self.c_mat[k] * self.counts
                row_cum = np.cumsum(row)
                l = int(np.searchsorted(row_cum, rng() * row_cum[-1], side="right"))
                bx = bucket[k]
                by = bucket[l]
                x = bx[int(rng() * len(bx))]
                y = by[int(rng() * len(by))]
                if x != y:
                    return x, y
        n_terms = len(self.u)
        tus, tvs = self.tu, self.tv
        while True:
            self.proposals += 1
            if n_terms == 1:
                t = 0
            else:
                env = [tus[i].total * tvs[i].total for i in range(n_terms)]
                r = rng() * sum(env)
                t = 0
                while t < n_terms - 1:
                    if r < env[t]:
                        break
                    r -= env[t]
                    t += 1
            tu = tus[t]
            tv = tvs[t]
            k = tu.sample(rng() * tu.total)
            l = tv.sample(rng() * tv.total)
            bx = bucket[k]
            by = bucket[l]
            if not bx or not by:
                # float drift left a phantom leaf; resync and retry
                self._resync()
                continue
            x = bx[int(rng() * len(bx))]
            y = by[int(rng() * len(by))]
            if x != y:
                return x, y

    def acceptance_rate(self) -> float:
        return self.jumps / self.proposals if self.proposals else 1.0

    def configuration(self) -> Configuration:
        return Configuration(np.array(self.occ, dtype=np.int64))


def new_simulation(initial, kernel: RateKernel, seed, validate: bool = True) -> SimState:
    """Fresh simulation state at clock 0 with aggregates built from scratch."""
    if not isinstance(initial, Configuration):
        initial = Configuration(initial)
    if validate:
        top = int(initial.occupations.max()) if initial.L else 0
        res = check_nondegenerate(kernel, max(1, top))
        if not res.passed:
            raise ValueError(f"kernel degenerate within the initial range: {res.message}")
    return SimState(initial, kernel, seed)


def total_jump_rate(state: SimState) -> float:
    """Exact total rate sum_{x != y} c(eta_x, eta_y) / (L-1)."""
    return state.total_rate()


def step(state: SimState) -> Optional[JumpEvent]:
    """Advance by one jump; None when the state is absorbing (zero total rate)."""
    rate = state.total_rate()
    if rate <= 0.0:
        state.absorbed = True
        state.t = math.inf
        return None
    dt = -math.log1p(-state.rng()) / rate
    x, y = state._select_pair()
    state._move(x, y)
    state.t += dt
    state.jumps += 1
    if state.jumps % RESYNC_INTERVAL == 0 and not state.is_table:
        state._resync()
    return JumpEvent(dt, x, y)


@dataclass
class EmpiricalTrajectory:
    """Recorded empirical measures and moments along one simulation run."""

    times: np.ndarray
    counts: np.ndarray          # records x (top level + 1), integer N_k
    site_pair: np.ndarray       # records x 2: occupations of sites 0 and 1
    L: int
    N: int
    replica: int = 0
    seed_key: tuple = ()
    acceptance: float = 1.0
    truncated: bool = False

    @property
    def F(self) -> np.ndarray:
        return self.counts / self.L

    @property
    def m1(self) -> np.ndarray:
        k = np.arange(self.counts.shape[1], dtype=np.int64)
        return (self.counts @ k) / self.L

    @property
    def m2(self) -> np.ndarray:
        k = np.arange(self.counts.shape[1], dtype=np.int64)
        return (self.counts @ (k * k)) / self.L

    def index_of(self, t: float) -> int:
        idx = np.nonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12))[0]
        if idx.size == 0:
            raise KeyError(f"time {t} was not recorded")
        return int(idx[0])

    def F_at(self, t: float) -> np.ndarray:
        return self.F[self.index_of(t)]


def run_until(
    state: SimState,
    horizon: float,
    record_times: Iterable[float],
    jump_cap: int = DEFAULT_JUMP_CAP,
) -> EmpiricalTrajectory:
    """Run to the horizon, recording the empirical measure at the requested times.

    Each record takes the value immediately after the last jump at or
    before the record time (cadlag convention).  A run that exceeds the
    jump safety cap returns the records reached so far with the truncation
    flag set.
    """
    rec = sorted(float(t) for t in record_times)
    if rec and (rec[0] < 0 or rec[-1] > horizon):
        raise ValueError("record times must lie within [0, horizon]")
    times: list[float] = []
    counts: list[np.ndarray] = []
    pairs: list[tuple[int, int]] = []
    truncated = False

    def snapshot(at: float) -> None:
        hist = [len(b) for b in state.bucket]
        top = len(hist) - 1
        while top > 0 and hist[top] == 0:
            top -= 1
        times.append(at)
        counts.append(np.array(hist[: top + 1], dtype=np.int64))
        pairs.append((state.occ[0], state.occ[1]))

    next_i = 0
    jumps_start = state.jumps
    while True:
        rate = state.total_rate()
        if rate <= 0.0:
            state.absorbed = True
            break
        dt = -math.log1p(-state.rng()) / rate
        t_next = state.t + dt
        while next_i < len(rec) and rec[next_i] < t_next:
            snapshot(rec[next_i])
            next_i += 1
        if t_next > horizon:
            state.t = horizon
            break
        x, y = state._select_pair()
        state._move(x, y)
        state.t = t_next
        state.jumps += 1
        if state.jumps % RESYNC_INTERVAL == 0 and not state.is_table:
            state._resync()
        if state.jumps - jumps_start >= jump_cap:
            truncated = True
            break
    if not truncated:
        while next_i < len(rec):
            snapshot(rec[next_i])
            next_i += 1

    width = max((c.size for c in counts), default=1)
    mat = np.zeros((len(counts), width), dtype=np.int64)
    for i, c in enumerate(counts):
        mat[i, : c.size] = c
    return EmpiricalTrajectory(
        times=np.array(times),
        counts=mat,
        site_pair=np.array(pairs, dtype=np.int64).reshape(len(pairs), 2),
        L=state.L,
        N=state.N,
        seed_key=state.seed_key,
        acceptance=state.acceptance_rate(),
        truncated=truncated,
    )


def ensemble_marginal(trajectories: Sequence[EmpiricalTrajectory], t: float) -> np.ndarray:
    """Replica average of F^L(t): the Monte Carlo estimate of E[F^L_k(t)]."""
    if not trajectories:
        raise ValueError("no trajectories")
    rows = [traj.F_at(t) for traj in trajectories]
    width = max(r.size for r in rows)
    out = np.zeros(width)
    for r in rows:
        out[: r.size] += r
    return out / len(rows)


@dataclass(frozen=True)
class TwoSiteStats:
    joint: float
    product: float
    covariance: float
    stderr: float
    replicas: int


def two_site_statistics(
    trajectories: Sequence[EmpiricalTrajectory], t: float, k: int, l: int
) -> TwoSiteStats:
    """Joint law estimate P[eta_1 = k, eta_2 = l] vs the product of marginals.

    Assumes a permutation-invariant law (caller's responsibility), under
    which every ordered site pair is identically distributed, so each
    replica contributes the exact pair average N_k (N_l - delta_kl) /
    (L (L-1)) computed from its level histogram.  The standard error is
    the influence-function estimate for the covariance.
    """
    if not trajectories:
        raise ValueError("no trajectories")
    if trajectories[0].L < 2:
        raise ValueError("two-site statistics need at least two sites")
    J = []
    A = []
    B = []
    for traj in trajectories:
        row = traj.counts[traj.index_of(t)]
        L = traj.L
        n_k = float(row[k]) if k < row.size else 0.0
        n_l = float(row[l]) if l < row.size else 0.0
        J.append((n_k * n_l - (n_k if k == l else 0.0)) / (L * (L - 1)))
        A.append(n_k / L)
        B.append(n_l / L)
    J = np.array(J)
    A = np.array(A)
    B = np.array(B)
    r = len(J)
    p_joint = float(np.mean(J))
    p1 = float(np.mean(A))
    p2 = float(np.mean(B))
    cov = p_joint - p1 * p2
    infl = (J - p_joint) - p2 * (A - p1) - p1 * (B - p2)
    stderr = float(np.std(infl, ddof=1) / math.sqrt(r)) if r > 1 else math.inf
    return TwoSiteStats(p_joint, p1 * p2, cov, stderr, r)


def replica_seed(master_seed: int, replica: int) -> np.random.SeedSequence:
    """Deterministic per-replica stream: replica r hashes (master_seed, r)."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(replica,))


def run_ensemble(
    kernel: RateKernel,
    configs: Sequence[Configuration],
    horizon: float,
    record_times: Iterable[float],
    master_seed: int,
    jump_cap: int = DEFAULT_JUMP_CAP,
) -> list[EmpiricalTrajectory]:
    """Run one replica per initial configuration with derived seeds."""
    rec = list(record_times)
    out = []
    for r, config in enumerate(configs):
        state = new_simulation(config, kernel, replica_seed(master_seed, r))
        traj = run_until(state, horizon, rec, jump_cap=jump_cap)
        traj.replica = r
        out.append(traj)
    return out
