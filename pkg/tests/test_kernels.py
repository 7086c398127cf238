import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from misanthrope import kernels as K

import oracles


ZRP21 = K.zrp(2, 1)
INC1 = K.inclusion(1)


class TestRate:
    def test_zrp_hand_value(self):
        # g(3) = 1 + 2/3
        assert ZRP21.rate(3, 7) == pytest.approx(5 / 3, rel=1e-14)

    def test_empty_site_never_jumps(self):
        for kern in (ZRP21, INC1, K.ecp(2, 1), K.ecp(2.5, 0)):
            assert kern.rate(0, 5) == 0.0

    def test_ecp_hand_value(self):
        assert K.ecp(2, 1).rate(2, 3) == pytest.approx(40.0, rel=1e-14)

    @pytest.mark.parametrize(
        "kern,ref",
        [
            (K.zrp(2, 1), oracles.zrp_rate(2, 1)),
            (K.zrp(5, 0.5), oracles.zrp_rate(5, 0.5)),
            (K.inclusion(1), oracles.ecp_rate(1, 1)),
            (K.ecp(2, 1), oracles.ecp_rate(2, 1)),
            (K.ecp(1.5, 0.5), oracles.ecp_rate(1.5, 0.5)),
            (K.ecp(2.5, 0), oracles.ecp_rate(2.5, 0)),
        ],
    )
    def test_separable_terms_match_closed_form(self, kern, ref):
        for k in range(0, 65, 8):
            for l in range(0, 65, 8):
                expect = ref(k, l)
                got = kern.rate(k, l)
                assert got == pytest.approx(expect, rel=1e-14, abs=1e-300)

    def test_table_roundtrip_and_cap(self):
        mat = K.inclusion(1).rate_matrix(6)
        tab = K.general_table(mat)
        assert tab.rate(2, 3) == K.inclusion(1).rate(2, 3)
        with pytest.raises(K.LevelOutOfRangeError):
            tab.rate(7, 0)

    def test_parse_kernel_specs(self):
        k = K.parse_kernel("zrp:b=4,gamma=1")
        assert k.rate(1, 0) == 5.0
        k = K.parse_kernel("ecp:lambda=2,d=0")
        assert k.rate(2, 2) == pytest.approx(16.0)
        k = K.parse_kernel("inclusion:d=1")
        assert k.rate(3, 2) == pytest.approx(9.0)
        with pytest.raises(K.KernelError):
            K.parse_kernel("zrp:b=4,whatever=2")
        with pytest.raises(K.KernelError):
            K.parse_kernel("unknown:a=1")

    def test_parse_table_csv(self, tmp_path):
        p = tmp_path / "rates.csv"
        lines = ["k,l,rate"]
        for k in range(1, 4):
            for l in range(4):
                lines.append(f"{k},{l},{k * (1 + l)}")
        p.write_text("\n".join(lines) + "\n")
        kern = K.parse_kernel(f"table:@{p}")
        assert kern.is_table
        assert kern.level_cap == 3
        assert kern.rate(2, 3) == 8.0
        assert kern.rate(0, 1) == 0.0


class TestChecks:
    def test_nondegenerate_pass(self):
        assert K.check_nondegenerate(ZRP21, 50).passed
        assert K.check_nondegenerate(K.ecp(1.5, 0.5), 50).passed

    def test_nondegenerate_fail_reports_first_violation(self):
        mat = INC1.rate_matrix(4)
        mat[1, 0] = 0.0
        res = K.check_nondegenerate(K.general_table(mat), 4)
        assert not res.passed
        assert res.first_violation == (1, 0)

    def test_ecp_d0_is_degenerate(self):
        res = K.check_nondegenerate(K.ecp(2, 0), 4)
        assert not res.passed
        assert res.first_violation == (1, 0)

    def test_sublinear_zrp_certificate(self):
        rep = K.check_sublinear(K.zrp(2, 1), 100)
        assert rep.certified
        assert rep.c1 == pytest.approx(3.0, rel=1e-12)
        assert rep.c2 >= 0

    def test_sublinear_inclusion_is_equality(self):
        rep = K.check_sublinear(K.inclusion(1), 64)
        assert rep.certified
        assert rep.c1 == pytest.approx(1.0, rel=1e-12)
        assert rep.c2 == pytest.approx(1.0)

    def test_sublinear_ecp_violation(self):
        rep = K.check_sublinear(K.ecp(2, 1), 100)
        assert not rep.certified
        assert rep.violation is not None
        k, l = rep.violation
        assert max(k, l) == 100

    def test_sublinear_ecp_superlinear_but_mild(self):
        assert not K.check_sublinear(K.ecp(1.5, 1), 128).certified

    def test_misanthrope_condition_presets(self):
        assert K.check_misanthrope_condition(K.zrp(5, 0.5), 30).passed
        assert K.check_misanthrope_condition(K.ecp(3, 2), 30).passed
        assert K.check_misanthrope_condition(INC1, 30).passed

    def test_misanthrope_condition_single_term_tables_pass(self):
        # any rank-one kernel u(k)v(l) satisfies the ratio identity exactly;
        # this includes c(k,l) = k * (1 + l mod 2)
        mat = np.zeros((6, 6))
        for k in range(1, 6):
            for l in range(6):
                mat[k, l] = k * (1 + l % 2)
        assert K.check_misanthrope_condition(K.general_table(mat), 4).passed

    def test_misanthrope_condition_rank_two_fails(self):
        # c(k,l) = k + k^2 l: at (2,2) the ratio c(2,2)/c(3,1) = 10/12
        # while the product side gives c(2,0)c(1,2)/(c(3,0)c(1,1)) = 1
        terms = [
            K.SeparableTerm(
                u=lambda k: np.asarray(k, dtype=float),
                v=lambda l: np.ones_like(np.asarray(l, dtype=float)),
            ),
            K.SeparableTerm(
                u=lambda k: np.asarray(k, dtype=float) ** 2,
                v=lambda l: np.asarray(l, dtype=float),
            ),
        ]
        res = K.check_misanthrope_condition(K.from_terms(terms), 5)
        assert not res.passed
        assert res.first_violation == (2, 2)

    def test_misanthrope_condition_degenerate_reported(self):
        res = K.check_misanthrope_condition(K.ecp(2, 0), 5)
        assert not res.passed
        assert res.degenerate


class TestStationaryFamily:
    def test_w0_is_one(self):
        fam = K.stationary_weights(ZRP21, 32)
        assert fam.w[0] == 1.0

    def test_zrp_weights_hand_product(self):
        fam = K.stationary_weights(K.zrp(3, 1), 16)
        assert fam.w[1] == pytest.approx(0.25, rel=1e-14)
        assert fam.w[2] == pytest.approx(0.1, rel=1e-14)

    def test_zrp_weights_match_direct_product(self):
        fam = K.stationary_weights(K.zrp(4, 1), 200)
        ref = oracles.zrp_weights_direct(4, 1, 200)
        np.testing.assert_allclose(fam.w, ref, rtol=1e-12)

    def test_inclusion_weights_are_geometric(self):
        fam = K.stationary_weights(INC1, 64)
        np.testing.assert_allclose(fam.w, np.ones(65), rtol=1e-13)

    def test_ecp_d0_degenerate_family(self):
        fam = K.stationary_weights(K.ecp(2.5, 0), 64)
        assert fam.degenerate
        assert fam.w[0] == 1.0
        assert np.all(fam.w[1:] == 0.0)
        crit = K.critical_point(fam)
        assert crit.rho_c == 0.0

    def test_partition_function_trivial_and_geometric(self):
        fam = K.stationary_weights(INC1, 256)
        assert K.partition_function(fam, 0.0).value == 1.0
        pv = K.partition_function(fam, 0.5)
        assert pv.value + pv.tail_estimate == pytest.approx(2.0, rel=1e-12)
        assert pv.converged

    def test_partition_function_zrp_converges_at_phi_c(self):
        fam = K.stationary_weights(K.zrp(5, 1), 1 << 15)
        pv = K.partition_function(fam, 1.0)
        assert pv.converged
        assert math.isfinite(pv.value)

    def test_partition_function_divergence_flag(self):
        fam = K.stationary_weights(INC1, 512)
        pv = K.partition_function(fam, 1.5)
        assert not pv.converged

    def test_density_examples(self):
        fam = K.stationary_weights(INC1, 2048)
        assert K.density(fam, 0.0) == 0.0
        assert K.density(fam, 0.5) == pytest.approx(1.0, rel=1e-10)

    def test_density_divergent_first_moment(self):
        fam = K.stationary_weights(K.zrp(1.5, 1), 1 << 15)
        assert K.density(fam, 1.0) == math.inf

    def test_density_monotone_on_grid(self):
        fam = K.stationary_weights(K.zrp(4, 1), 1 << 14)
        vals = [K.density(fam, phi) for phi in np.linspace(0, 0.95, 12)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_marginal_normalized_and_recursive(self):
        for kern in (K.zrp(4, 1), INC1, K.ecp(2, 1)):
            fam = K.stationary_weights(kern, 600)
            phi = 0.5
            f = K.marginal(fam, phi)
            assert abs(f.sum() - 1.0) <= 1e-12
            # balance recursion: c(k,0) f_k / c(1,k-1) = (phi / c(1,0)) f_{k-1}
            scale = kern.rate(1, 0)
            for k in range(1, 40):
                lhs = kern.rate(k, 0) / kern.rate(1, k - 1) * f[k]
                rhs = phi / scale * f[k - 1]
                assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-290)

    def test_marginal_hand_values(self):
        fam = K.stationary_weights(INC1, 256)
        f = K.marginal(fam, 0.5)
        np.testing.assert_allclose(f[:6], 0.5 * 0.5 ** np.arange(6), rtol=1e-12)
        famz = K.stationary_weights(K.zrp(3, 1), 256)
        fz = K.marginal(famz, 0.5)
        z = K.partition_function(famz, 0.5).value
        assert fz[2] == pytest.approx(0.1 * 0.25 / z, rel=1e-10)

    def test_marginal_at_zero_fugacity(self):
        fam = K.stationary_weights(ZRP21, 64)
        f = K.marginal(fam, 0.0)
        assert f[0] == 1.0
        assert np.all(f[1:] == 0.0)


class TestCriticalPoint:
    def test_zrp_gamma1_phi_c(self):
        for b in (3, 4, 5):
            fam = K.stationary_weights(K.zrp(b, 1), 1 << 17)
            crit = K.critical_point(fam)
            assert crit.stabilized
            assert crit.phi_c == pytest.approx(1.0, abs=1e-6)

    def test_zrp_b4_rho_c_against_summation_oracle(self):
        fam = K.stationary_weights(K.zrp(4, 1), 1 << 17)
        crit = K.critical_point(fam)
        ref = oracles.zrp_rho_c_oracle(4)
        assert ref == pytest.approx(0.5, abs=1e-6)
        assert crit.rho_c == pytest.approx(ref, abs=0.01)

    def test_zrp_small_b_infinite_rho_c(self):
        for b in (1.0, 1.5):
            fam = K.stationary_weights(K.zrp(b, 1), 1 << 16)
            assert K.critical_point(fam).rho_c == math.inf

    def test_ecp_finite_rho_c(self):
        fam = K.stationary_weights(K.ecp(3, 1), 1 << 16)
        crit = K.critical_point(fam)
        assert crit.phi_c == pytest.approx(1.0, abs=1e-6)
        assert math.isfinite(crit.rho_c)

    def test_inclusion_open_domain(self):
        fam = K.stationary_weights(INC1, 1 << 14)
        crit = K.critical_point(fam)
        assert crit.phi_c == pytest.approx(1.0, abs=1e-9)
        assert crit.rho_c == math.inf

    def test_stretched_exponential_class_detected(self):
        fam = K.stationary_weights(K.zrp(2.5, 0.5), 1 << 16)
        crit = K.critical_point(fam)
        assert crit.tail_class == "stretched"
        assert math.isfinite(crit.rho_c)


class TestInvertDensity:
    def test_zero_density(self):
        fam = K.stationary_weights(INC1, 512)
        assert K.invert_density(fam, 0.0) == 0.0

    def test_inclusion_analytic_inverse(self):
        fam = K.stationary_weights(INC1, 4096)
        phi = K.invert_density(fam, 1.0)
        assert phi == pytest.approx(0.5, abs=1e-9)

    def test_supercritical_raises_with_rho_c(self):
        fam = K.stationary_weights(K.zrp(4, 1), 1 << 16)
        with pytest.raises(K.SupercriticalDensityError) as err:
            K.invert_density(fam, 0.6)
        assert err.value.rho_c == pytest.approx(0.5, abs=0.01)

    @given(st.floats(min_value=0.01, max_value=0.99))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_identity(self, phi):
        fam = _ROUNDTRIP_FAMILY
        rho = K.density(fam, phi)
        back = K.invert_density(fam, rho, crit=_ROUNDTRIP_CRIT)
        assert abs(K.density(fam, back) - rho) <= 1e-9 * max(1.0, rho)


_ROUNDTRIP_FAMILY = K.stationary_weights(K.zrp(4, 1), 1 << 14)
_ROUNDTRIP_CRIT = K.critical_point(_ROUNDTRIP_FAMILY)


class TestFamilyExport:
    def test_export_rows_schema(self):
        fam = K.stationary_weights(K.zrp(3, 1), 8)
        rows = list(fam.export_rows())
        assert rows[0] == (0, 1.0, 0.0)
        n, w, logw = rows[2]
        assert n == 2 and w == pytest.approx(0.1)
        assert logw == pytest.approx(math.log(0.1))
