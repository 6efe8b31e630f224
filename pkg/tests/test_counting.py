from __future__ import annotations

import pytest

import bruteforce as bf
from polyboltz import counting as ct
from polyboltz import grammar as gr
from polyboltz.errors import InternalConsistencyError, UsageError

ROOTED_TEXT = "R = X * SET(R)\nroot R"

FREE_TREE_TEXT = """
R = X * Fp
Fp = SET(R)
Fo = point(X) star Fp + Fsym
Fsym = sympoint(SET[2]) osub R + (sympoint(SET) osub R) star X
Ro = point(X) star Fp + (point(SET) osub R) star X
pair Ro R
root Fo
"""

PLANE_TEXT = """
A = X * SEQ(A)
Ep = CYC(A)
Eo = point(X) star Ep + Esym
Esym = sympoint(SET[2]) osub A + (sympoint(CYC) osub A) star X
Ao = point(X) star SA + (point(SEQ) osub A) star X
SA = SEQ(A)
pair Ao A
root Eo
"""

TRIVALENT_TEXT = """
R = X * D1
D1 = SET[0](R) + SET[2](R)
DF = SET[1](R) + SET[3](R)
Fo = point(X) star DF + Fsym
Fsym = sympoint(SET[2]) osub R + (sympoint(SET[1]) osub R + sympoint(SET[3]) osub R) star X
Ro = point(X) star D1 + (point(SET[0]) osub R + point(SET[2]) osub R) star X
pair Ro R
root Fo
"""

SIZED_MIX_TEXT = """
A = X + X * (SEQ[2](A) + SET[3](A) + CYC[4](A))
P = point(SET[2]) osub A + point(CYC[4]) osub A + sympoint(CYC[4]) osub A + point(SEQ[3]) osub A
root A
"""

FREE_TREES_8 = 23
FREE_TREES_9 = 47


def d_regular_text(d: int) -> str:
    return f"""
A = X + SEQ[{d - 1}](A)
Eo = point(X) star A + sympoint(SET[2]) osub A + sympoint(CYC[{d}]) osub A
Ao = point(X) + point(SEQ[{d - 1}]) osub A
pair Ao A
root Eo
"""


def solved(text: str, N: int, cis_trunc: int | None = None) -> ct.SolvedSystem:
    return ct.solve(gr.validate(gr.parse(text)), N, cis_trunc)


class TestSolve:
    def test_rooted_trees_match_brute_force(self):
        sysm = solved(ROOTED_TEXT, 12, cis_trunc=10)
        for n in range(13):
            assert ct.count(sysm, "R", n) == bf.rooted_tree_count(n)

    def test_rooted_trees_spec_prefix(self):
        sysm = solved(ROOTED_TEXT, 7)
        assert [ct.count(sysm, "R", n) for n in range(1, 8)] == [1, 1, 2, 4, 9, 20, 48]

    def test_free_trees_unpointed(self):
        vg = gr.validate(gr.parse(FREE_TREE_TEXT))
        sysm = ct.solve(vg, 9, cis_trunc=8)
        q = gr.unpoint(vg, "Fo")
        assert [ct.count(sysm, q, n) for n in range(1, 8)] == [
            bf.free_tree_count_prufer(n) for n in range(1, 8)
        ]
        assert ct.count(sysm, q, 8) == FREE_TREES_8
        assert ct.count(sysm, q, 9) == FREE_TREES_9

    def test_trivalent_by_internal_nodes(self):
        vg = gr.validate(gr.parse(TRIVALENT_TEXT))
        sysm = ct.solve(vg, 32)
        q = gr.unpoint(vg, "Fo")
        by_internal = [ct.count(sysm, q, 2 * i + 2) for i in range(16)]
        assert by_internal == [1, 1, 1, 1, 2, 2, 4, 6, 11, 18, 37, 66, 135, 265, 552, 1132]

    def test_trivalent_against_tree_filter(self):
        vg = gr.validate(gr.parse(TRIVALENT_TEXT))
        sysm = ct.solve(vg, 12)
        q = gr.unpoint(vg, "Fo")
        for n in range(2, 13):
            assert ct.count(sysm, q, n) == bf.degree_constrained_tree_count(
                n, frozenset({1, 3})
            )

    def test_engine_agrees_with_validation_probe(self):
        for text in (ROOTED_TEXT, FREE_TREE_TEXT, PLANE_TEXT, TRIVALENT_TEXT, SIZED_MIX_TEXT):
            vg = gr.validate(gr.parse(text))
            sysm = ct.solve(vg, vg.probe_degree)
            for v, coeffs in vg.probe_ogs.items():
                assert tuple(sysm.ogs[v].coeffs) == coeffs, v

    def test_cycle_index_solver_materializes(self):
        sysm = solved(SIZED_MIX_TEXT, 12, cis_trunc=9)
        assert not sysm.ogs_only
        assert sysm.cis_trunc == 9
        assert set(sysm.cis) == {"A", "P"}

    def test_ogs_only_default(self):
        sysm = solved(ROOTED_TEXT, 6)
        assert sysm.ogs_only
        assert sysm.cis is None

    def test_unbiased_pointing_enforced(self):
        biased = "R = X * SR\nSR = SET(R)\nPo = point(X) star SR\npair Po R\nroot R"
        with pytest.raises(InternalConsistencyError):
            solved(biased, 6)

    def test_requires_validated_grammar(self):
        with pytest.raises(UsageError):
            ct.solve(gr.parse(ROOTED_TEXT), 5)

    def test_rejects_negative_trunc_and_large_cis(self):
        vg = gr.validate(gr.parse(ROOTED_TEXT))
        with pytest.raises(UsageError):
            ct.solve(vg, -1)
        with pytest.raises(UsageError):
            ct.solve(vg, 5, cis_trunc=6)


class TestCount:
    def test_constant_term(self):
        sysm = solved("A = SET(B)\nB = X * A\nroot A", 6)
        assert ct.count(sysm, "A", 0) == 1
        assert ct.count(sysm, "B", 0) == 0

    def test_out_of_range(self):
        sysm = solved(ROOTED_TEXT, 5)
        with pytest.raises(UsageError):
            ct.count(sysm, "R", 6)
        with pytest.raises(UsageError):
            ct.count(sysm, "R", -1)

    def test_unknown_variable(self):
        sysm = solved(ROOTED_TEXT, 5)
        with pytest.raises(UsageError):
            ct.count(sysm, "Z", 3)

    def test_unpoint_passthrough_at_zero(self):
        vg = gr.validate(gr.parse(FREE_TREE_TEXT))
        sysm = ct.solve(vg, 5)
        assert ct.count(sysm, gr.unpoint(vg, "Fo"), 0) == 0

    def test_unpoint_indivisible_coefficient(self):
        text = "SX = X * ONE\nP = point(X) star SX\nroot P"
        vg = gr.validate(gr.parse(text))
        sysm = ct.solve(vg, 4)
        with pytest.raises(InternalConsistencyError):
            ct.count(sysm, gr.UnpointQuery("P"), 2)


class TestPlaneTreeFormula:
    def test_small_values(self):
        assert ct.plane_tree_count(1) == 1
        assert ct.plane_tree_count(3) == 2

    def test_rejects_nonpositive(self):
        with pytest.raises(UsageError):
            ct.plane_tree_count(0)
        with pytest.raises(UsageError):
            ct.plane_tree_count(-2)

    def test_matches_grammar(self):
        vg = gr.validate(gr.parse(PLANE_TEXT))
        sysm = ct.solve(vg, 13)
        q = gr.unpoint(vg, "Eo")
        for n in range(1, 13):
            assert ct.plane_tree_count(n) == ct.count(sysm, q, n + 1)

    def test_matches_exhaustive_generation(self):
        for n in range(1, 9):
            assert ct.plane_tree_count(n) == bf.plane_tree_count(n + 1)


class TestDRegularFormula:
    def test_small_values(self):
        assert ct.d_regular_plane_tree_count(2, 3) == 1
        assert ct.d_regular_plane_tree_count(0, 3) == 1
        assert ct.d_regular_plane_tree_count(0, 7) == 1
        assert ct.d_regular_plane_tree_count(1, 5) == 1

    def test_rejects_bad_arguments(self):
        with pytest.raises(UsageError):
            ct.d_regular_plane_tree_count(2, 2)
        with pytest.raises(UsageError):
            ct.d_regular_plane_tree_count(-1, 3)

    @pytest.mark.parametrize("d", [3, 4])
    def test_matches_grammar(self, d):
        vg = gr.validate(gr.parse(d_regular_text(d)))
        leaves = lambda n: n * (d - 2) + 2
        sysm = ct.solve(vg, leaves(8))
        q = gr.unpoint(vg, "Eo")
        for n in range(9):
            assert ct.d_regular_plane_tree_count(n, d) == ct.count(sysm, q, leaves(n))

    def test_matches_exhaustive_generation(self):
        # total vertices of a 3-regular plane tree with n internal nodes: 2n+2
        for n in range(7):
            assert ct.d_regular_plane_tree_count(n, 3) == bf.plane_tree_count_degrees(
                2 * n + 2, frozenset({1, 3})
            )


class TestMapCounts:
    def test_rooted_counts_by_direct_factorial_evaluation(self):
        import math

        for n in range(1, 9):
            expected = (
                2 * math.factorial(3 * n - 3)
                // (math.factorial(n) * math.factorial(2 * n - 1))
            )
            assert ct.map_2conn_counts(n)[0] == expected
        assert [ct.map_2conn_counts(n)[0] for n in range(1, 5)] == [2, 1, 2, 6]

    def test_one_edge_maps(self):
        s1, u1, t1 = ct.map_2conn_counts(1)
        assert (s1, u1) == (2, 2)
        assert t1 == 2  # the link map and the loop map

    def test_agrees_with_series_extraction(self):
        assert ct._map_counts_from_series(20) == [ct.map_2conn_counts(n) for n in range(1, 21)]

    def test_integral_up_to_thirty(self):
        for n in range(1, 31):
            s_n, u_n, t_n = ct.map_2conn_counts(n)
            total = s_n + u_n
            for k in (k for k in range(1, n) if n % k == 0):
                phi = sum(1 for j in range(1, n // k + 1) if __import__("math").gcd(j, n // k) == 1)
                total += phi * (3 * k - 1) * (3 * k - 2) * ct.map_2conn_counts(k)[0] // 2
            assert 2 * n * t_n == total

    def test_rejects_nonpositive(self):
        with pytest.raises(UsageError):
            ct.map_2conn_counts(0)


class TestLargeTruncation:
    def test_free_trees_to_n_120(self):
        vg = gr.validate(gr.parse(FREE_TREE_TEXT))
        sysm = ct.solve(vg, 120)
        q = gr.unpoint(vg, "Fo")
        # growth settles near the inverse tree radius ~ 2.9557
        ratio = ct.count(sysm, q, 120) / ct.count(sysm, q, 119)
        assert 2.8 < ratio < 3.0
