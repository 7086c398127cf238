"""Acceptance suite.

One test per acceptance criterion; each prints a single PASS/FAIL line with
the measured quantities (run pytest with -s to see them inline).  Exact
small-instance checks use independent oracles from tests/oracles.py; the
limit-law checks assert trends and exponent bands at fixed seeds, and every
run here is deterministic.
"""

import json
import math
import time

import numpy as np
import pytest

from misanthrope import cli
from misanthrope import diagnostics as D
from misanthrope import initial as I
from misanthrope import kernels as K
from misanthrope import meanfield as M
from misanthrope import simulate as S

import oracles


def report(num: int, name: str, ok: bool, detail: str) -> None:
    verdict = "PASS" if ok else "FAIL"
    print(f"[criterion {num:2d}] {name}: {verdict} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


WALKERS = K.from_terms(
    [
        K.SeparableTerm(
            u=lambda k: np.asarray(k, dtype=float),
            v=lambda l: np.ones_like(np.asarray(l, dtype=float)),
        )
    ],
    name="walkers",
)


def test_criterion_1_exact_simulator_oracle():
    t0 = time.time()
    kern = K.zrp(2, 1)
    times = (0.5, 1.0, 2.0)
    states, Q = oracles.master_generator(3, 2, oracles.zrp_rate(2, 1))
    from scipy.linalg import expm

    index = {s: i for i, s in enumerate(states)}
    p0 = np.zeros(len(states))
    p0[index[(1, 1, 0)]] = 1.0
    exact = {t: p0 @ expm(Q * t) for t in times}

    reps = 100_000
    counts = {t: np.zeros(len(states)) for t in times}
    for r in range(reps):
        st = S.new_simulation([1, 1, 0], kern, S.replica_seed(20240601, r), validate=False)
        traj = S.run_until(st, 2.0, times)
        for j, t in enumerate(times):
            a, b = traj.site_pair[j]
            counts[t][index[(a, b, 2 - a - b)]] += 1
    tvs = {t: 0.5 * np.abs(counts[t] / reps - exact[t]).sum() for t in times}
    elapsed = time.time() - t0
    ok = all(tv <= 0.01 for tv in tvs.values()) and elapsed < 60
    report(
        1,
        "exact simulator vs 6-state master equation",
        ok,
        "TV=" + ", ".join(f"{t}:{tv:.4f}" for t, tv in tvs.items()) + f"; {elapsed:.0f}s",
    )


def test_criterion_2_independent_walkers_fixed_point():
    t0 = time.time()
    f0 = I.poisson_pmf(1.0)
    sol = M.integrate(f0, WALKERS, 10.0, record_times=np.linspace(0, 10, 11).tolist())
    tv_ode = max(
        D.total_variation(s.f, f0) + s.leaked_mass for s in sol.states
    )

    reps, L = 50, 1000
    trajs = []
    for r in range(reps):
        seq_init, seq_dyn = np.random.SeedSequence(entropy=777, spawn_key=(r,)).spawn(2)
        config, _ = I.product_sample(L, f0, seq_init)
        st = S.new_simulation(config, WALKERS, seq_dyn)
        trajs.append(S.run_until(st, 5.0, [5.0]))
    est = S.ensemble_marginal(trajs, 5.0)
    tv_sim = D.total_variation(est, f0)
    elapsed = time.time() - t0
    ok = tv_ode <= 1e-6 and tv_sim <= 0.02 and elapsed < 120
    report(
        2,
        "independent-walkers Poisson fixed point",
        ok,
        f"ODE sup TV={tv_ode:.2e}, sim TV={tv_sim:.4f}; {elapsed:.0f}s",
    )


def test_criterion_3_conservation_suite():
    t0 = time.time()
    kernels = {
        "zrp(4,1)": K.zrp(4, 1),
        "inclusion(1)": K.inclusion(1),
        "ecp(1.5,1)": K.ecp(1.5, 1),
    }
    detail = []
    ok = True
    for name, kern in kernels.items():
        f0 = I.poisson_pmf(0.3)
        sol = M.integrate(f0, kern, 10.0, record_times=np.linspace(0, 10, 21).tolist())
        dm0 = max(abs(M.moment(s.f, 0) + s.leaked_mass - 1.0) for s in sol.states)
        dm1 = max(
            abs(M.moment(s.f, 1) + s.leaked_m1 - M.moment(f0, 1)) for s in sol.states
        )
        ok &= dm0 <= 1e-6 and dm1 <= 1e-6

        config = I.multinomial_sample(400, 120, np.random.SeedSequence(5, spawn_key=(1,)))
        st = S.new_simulation(config, kern, np.random.SeedSequence(5, spawn_key=(2,)))
        traj = S.run_until(st, 5.0, np.linspace(0, 5, 11))
        k = np.arange(traj.counts.shape[1])
        m1_exact = np.all(traj.counts @ k == traj.N)
        ok &= bool(m1_exact)

        cert = K.check_sublinear(kern, 128)
        if cert.certified:
            alpha1 = traj.m1[0]
            alpha2 = traj.m2[0]
            cbar = 2 * cert.c1 * alpha1 * (alpha1 + cert.c2)
            env_ok = all(
                m2 <= M.gronwall_envelope(alpha2, cbar, t) + 1e-9
                for t, m2 in zip(traj.times, traj.m2)
            )
            ok &= env_ok
            detail.append(f"{name}: dm0={dm0:.1e} dm1={dm1:.1e} envelope ok")
        else:
            detail.append(f"{name}: dm0={dm0:.1e} dm1={dm1:.1e} no certificate")
    elapsed = time.time() - t0
    ok = ok and elapsed < 120
    report(3, "conservation suite", ok, "; ".join(detail) + f"; {elapsed:.0f}s")


def test_criterion_4_stationarity_and_detailed_balance():
    t0 = time.time()
    presets = {
        "zrp(4,1)": (K.zrp(4, 1), 4000),
        "zrp(2.5,0.5)": (K.zrp(2.5, 0.5), 4000),
        "inclusion(1)": (K.inclusion(1), 4000),
        "ecp(2,1)": (K.ecp(2, 1), 4000),
        "ecp(3,1)": (K.ecp(3, 1), 4000),
    }
    worst_stat, worst_db = 0.0, 0.0
    for name, (kern, n_max) in presets.items():
        assert K.check_misanthrope_condition(kern, 24).passed
        fam = K.stationary_weights(kern, n_max)
        crit = K.critical_point(K.stationary_weights(kern, 1 << 15))
        phis = [0.2, 0.5, 0.8 * min(crit.phi_c, 1.0)]
        for phi in phis:
            f = K.marginal(fam, phi, tail_tol=1e-12)
            worst_stat = max(worst_stat, M.stationarity_residual(f, kern))
            worst_db = max(worst_db, M.detailed_balance_residual(f, kern))
    elapsed = time.time() - t0
    ok = worst_stat <= 1e-8 and worst_db <= 1e-10 and elapsed < 60
    report(
        4,
        "stationary marginals and detailed balance",
        ok,
        f"max |rhs|_1={worst_stat:.2e}, max DB residual={worst_db:.2e}; {elapsed:.0f}s",
    )


def _lln_sweep():
    """Shared runs for criteria 5, 6, 7: ZRP(4,1), rho=0.3, multinomial."""
    kern = K.zrp(4, 1)
    rec = np.linspace(0, 5, 11).tolist()
    ensembles = {}
    for L in (100, 400, 1600):
        trajs = []
        for r in range(20):
            seq_init, seq_dyn = np.random.SeedSequence(
                entropy=424242, spawn_key=(L, r)
            ).spawn(2)
            config = I.multinomial_sample(L, int(0.3 * L), seq_init)
            st = S.new_simulation(config, kern, seq_dyn)
            trajs.append(S.run_until(st, 5.0, rec))
        ensembles[L] = trajs
    f0 = I.poisson_pmf(0.3)
    sol = M.integrate(f0, kern, 5.0, record_times=rec)
    return ensembles, sol, rec


@pytest.fixture(scope="module")
def lln_sweep():
    return _lln_sweep()


def test_criterion_5_lln_trend(lln_sweep):
    t0 = time.time()
    ensembles, sol, rec = lln_sweep
    rep = D.lln_report(ensembles, sol, rec)
    elapsed = time.time() - t0
    ok = rep.strictly_decreasing and -0.8 <= rep.slope <= -0.2
    report(
        5,
        "law of large numbers trend",
        ok,
        f"sup TV={np.array2string(rep.sup_tv, precision=4)}, slope={rep.slope:.3f}; {elapsed:.0f}s",
    )


def test_criterion_6_variance_scaling(lln_sweep):
    ensembles, _, _ = lln_sweep
    h = np.array([0.0, 1.0])  # indicator of level 1
    rep = D.variance_scaling(ensembles, h, 1.0)
    ok = -1.4 <= rep.slope <= -0.6
    report(
        6,
        "empirical-measure variance scaling",
        ok,
        f"slope={rep.slope:.3f} +- {rep.slope_stderr:.3f}",
    )


def test_criterion_7_chaos_decay(lln_sweep):
    ensembles, _, _ = lln_sweep
    stats = {L: S.two_site_statistics(ensembles[L], 1.0, 0, 0) for L in ensembles}
    rep = D.chaos_decay(stats)
    detail = ", ".join(
        f"L={L}: {stats[L].covariance:+.2e}" for L in sorted(stats)
    )
    report(7, "two-site covariance decay", rep.decreasing, detail)


def test_criterion_8_critical_values():
    t0 = time.time()
    ok = True
    details = []
    for b in (3, 4, 5):
        fam = K.stationary_weights(K.zrp(b, 1), 1 << 17)
        crit = K.critical_point(fam)
        ok &= abs(crit.phi_c - 1.0) <= 1e-6 and crit.stabilized
        details.append(f"phi_c(b={b})={crit.phi_c:.8f}")
        if b == 4:
            ref = oracles.zrp_rho_c_oracle(4)
            ok &= abs(crit.rho_c - ref) <= 0.01
            details.append(f"rho_c(b=4)={crit.rho_c:.4f} vs oracle {ref:.4f}")
    fam = K.stationary_weights(K.zrp(1.5, 1), 1 << 16)
    crit = K.critical_point(fam)
    ok &= crit.rho_c == math.inf
    details.append("rho_c(b=1.5)=inf")
    elapsed = time.time() - t0
    ok = ok and elapsed < 60
    report(8, "critical fugacity and density", ok, "; ".join(details) + f"; {elapsed:.0f}s")


def test_criterion_9_zrp_coarsening_exponent():
    # the b=5, rho=1 transient is long: the raw m2 slope at t <= 1e3 still
    # reads ~0.66 and only settles near 1/2 past t ~ 3e3, so the run extends
    # well beyond the nominal horizon (it stays far inside the time budget)
    t0 = time.time()
    f0 = I.poisson_pmf(1.0)
    horizon = 30_000.0
    rec = np.geomspace(0.1, horizon, 80).tolist()
    sol = M.integrate(f0, K.zrp(5, 1), horizon, M.SolverConfig(max_K=8192), record_times=rec)
    assert sol.blowup_time is None
    m1_drift = max(
        abs(M.moment(s.f, 1) + s.leaked_m1 - 1.0) for s in sol.states
    )
    rep = D.coarsening_fit(sol.times, sol.moments(2), window=(3000.0, horizon))
    elapsed = time.time() - t0
    ok = (
        abs(rep.exponent - 0.5) <= 0.1
        and rep.regime == "power-law"
        and m1_drift <= 1e-6
        and elapsed < 600
    )
    report(
        9,
        "zero-range coarsening exponent",
        ok,
        f"exponent={rep.exponent:.3f} +- {rep.stderr:.3f}, regime={rep.regime}, "
        f"m1 drift={m1_drift:.1e}; {elapsed:.0f}s",
    )


def test_criterion_10_ecp_regimes():
    t0 = time.time()
    f0 = I.poisson_pmf(1.0)
    details = []

    # lambda=1: power law with exponent 1
    sol = M.integrate(
        f0,
        K.ecp(1.0, 0.0),
        30.0,
        M.SolverConfig(max_K=256),
        record_times=np.geomspace(0.25, 30, 24).tolist(),
    )
    rep1 = D.coarsening_fit(sol.times, sol.moments(2), window=(5.0, 30.0))
    ok = abs(rep1.exponent - 1.0) <= 0.15 and rep1.regime == "power-law"
    details.append(f"lam=1: exponent={rep1.exponent:.3f}")

    # lambda=1.5: exponential growth
    sol = M.integrate(
        f0,
        K.ecp(1.5, 0.0),
        6.0,
        M.SolverConfig(max_K=128, blowup_m2_threshold=15.0),
        record_times=np.linspace(0.05, 6, 120).tolist(),
    )
    ts, m2 = sol.times, sol.moments(2)
    keep = ts <= (sol.blowup_time or 6.0)
    rep15 = D.coarsening_fit(ts[keep], m2[keep], window=(0.15, float(ts[keep][-1])))
    ok &= rep15.regime == "exponential"
    details.append(f"lam=1.5: regime={rep15.regime}")

    # lambda=1.75: finite-time blow-up, flag stable under K-doubling
    flags = []
    for max_K in (128, 256, 512):
        sol = M.integrate(
            f0,
            K.ecp(1.75, 0.0),
            3.0,
            M.SolverConfig(max_K=max_K, blowup_m2_threshold=10.0),
            record_times=[3.0],
        )
        assert sol.blowup_time is not None
        flags.append(sol.blowup_time)
    rel = np.abs(np.diff(flags)) / np.array(flags[:-1])
    ok &= bool(np.all(rel < 0.10))
    details.append(
        "lam=1.75: t_c=" + "/".join(f"{v:.4f}" for v in flags)
        + f" changes {rel[0]*100:.1f}%,{rel[1]*100:.1f}%"
    )

    # lambda=2.5: instantaneous blow-up, flag time decreasing under K-doubling
    flags25 = []
    for max_K in (64, 128, 256):
        f00 = f0[: max_K + 1] / f0[: max_K + 1].sum()
        sol = M.integrate(
            f00,
            K.ecp(2.5, 0.0),
            1.0,
            M.SolverConfig(max_K=max_K, K_init=max_K, blowup_m2_threshold=4.0),
            record_times=[1.0],
        )
        assert sol.blowup_time is not None
        flags25.append(sol.blowup_time)
    ok &= bool(np.all(np.diff(flags25) < 0))
    details.append("lam=2.5: t=" + "/".join(f"{v:.4f}" for v in flags25))

    elapsed = time.time() - t0
    ok = ok and elapsed < 900
    report(10, "explosive-condensation regimes", ok, "; ".join(details) + f"; {elapsed:.0f}s")


def test_criterion_11_determinism_all_modes(tmp_path):
    t0 = time.time()
    configs = {
        "stationary": """
[experiment]
mode = "stationary"
kernel = "zrp:b=3,gamma=1"
seed = 9
[stationary]
n_max = 2048
""",
        "simulate": """
[experiment]
mode = "simulate"
kernel = "zrp:b=4,gamma=1"
initial = "multinomial:rho=0.3"
L = [50]
replicas = 3
horizon = 1.0
record_times = [0.0, 0.5, 1.0]
seed = 10
""",
        "meanfield": """
[experiment]
mode = "meanfield"
kernel = "inclusion:d=1"
initial = "product:poisson(0.5)"
horizon = 2.0
record_times = [0.0, 1.0, 2.0]
seed = 11
""",
        "compare": """
[experiment]
mode = "compare"
kernel = "zrp:b=4,gamma=1"
initial = "multinomial:rho=0.3"
L = [30, 60]
replicas = 3
horizon = 1.0
record_times = [0.0, 0.5, 1.0]
seed = 12
[compare]
time = 0.5
pair_level = [0, 0]
""",
        "coarsen": """
[experiment]
mode = "coarsen"
kernel = "ecp:lambda=1,d=0"
initial = "product:poisson(1.0)"
horizon = 10.0
seed = 13
[solver]
max_K = 128
[coarsen]
fit_window = [1.0, 10.0]
""",
    }
    ok = True
    diffs = []
    for mode, text in configs.items():
        cfgp = tmp_path / f"{mode}.toml"
        cfgp.write_text(text)
        out_a = tmp_path / f"{mode}_a"
        out_b = tmp_path / f"{mode}_b"
        assert cli.main([mode, "--config", str(cfgp), "--out", str(out_a)]) == 0
        assert cli.main([mode, "--config", str(cfgp), "--out", str(out_b)]) == 0
        for pa in sorted(out_a.iterdir()):
            pb = out_b / pa.name
            if pa.name == "manifest.json":
                ja = json.loads(pa.read_text())
                jb = json.loads(pb.read_text())
                ja.pop("wall_clock_seconds")
                jb.pop("wall_clock_seconds")
                same = ja == jb
            else:
                same = pa.read_bytes() == pb.read_bytes()
            if not same:
                ok = False
                diffs.append(f"{mode}/{pa.name}")
    elapsed = time.time() - t0
    report(
        11,
        "byte-identical reruns across all modes",
        ok,
        ("differs: " + ", ".join(diffs) if diffs else "all files identical") + f"; {elapsed:.0f}s",
    )
