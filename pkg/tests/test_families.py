"""Tests for the ready-made structure families."""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import networkx as nx
import pytest

import bruteforce as bf
from polyboltz import counting as ct
from polyboltz import families as fam
from polyboltz import grammar as gr
from polyboltz import oracle as orc
from polyboltz import sampler as sm
from polyboltz import zindex as zx
from polyboltz.errors import UsageError
from polyboltz.sampler import (
    Rng,
    atoms_of,
    resolve_substitutions,
    sample_boltzmann,
    sample_targeted,
)


@lru_cache(maxsize=None)
def solved(name: str, n_max: int, omega: tuple | None = None, d: int | None = None):
    kwargs = {}
    if omega is not None:
        kwargs["omega"] = omega
    if d is not None:
        kwargs["d"] = d
    spec = fam.family(name, **kwargs)
    return spec, ct.solve(spec.vg, n_max)


def family_counts(name: str, n_max: int, **kwargs) -> list:
    spec, sys_ = solved(name, n_max, **kwargs)
    return [ct.count(sys_, spec.count_query, n) for n in range(1, n_max + 1)]


@lru_cache(maxsize=None)
def sampling_table(name: str):
    spec = fam.family(name)
    target = spec.pointed_var or spec.sample_query
    return sm._default_table(spec.vg, target, None)


# ------------------------------------------------------------------- registry


def test_registry_lists_all_families():
    assert set(fam.FAMILY_NAMES) == {
        "rooted_trees",
        "free_trees",
        "plane_trees",
        "omega_trees",
        "omega_plane_trees",
        "d_regular_plane_trees",
        "cacti",
        "outerplanar",
    }
    assert set(fam.FAMILY_PARAMS) == {
        "omega_trees",
        "omega_plane_trees",
        "d_regular_plane_trees",
    }


def test_family_specs_are_cached():
    assert fam.family("rooted_trees") is fam.family("rooted_trees")
    assert fam.family("omega_trees", omega=(1, 3)) is fam.family(
        "omega_trees", omega=[3, 1]
    )


def test_parameter_validation():
    with pytest.raises(UsageError):
        fam.family("no_such_family")
    with pytest.raises(UsageError):
        fam.family("omega_trees")
    with pytest.raises(UsageError):
        fam.family("omega_trees", omega=())
    with pytest.raises(UsageError):
        fam.family("omega_trees", omega=(0, 1))
    with pytest.raises(UsageError):
        fam.family("omega_trees", omega=(2, 3))
    with pytest.raises(UsageError):
        fam.family("d_regular_plane_trees")
    with pytest.raises(UsageError):
        fam.family("d_regular_plane_trees", d=2)
    with pytest.raises(UsageError):
        fam.family("rooted_trees", omega=(1, 3))


def test_outerplanar_is_counting_only():
    spec = fam.family("outerplanar")
    assert not spec.samplable
    assert spec.sample_query is None
    msg = fam.NOT_SAMPLABLE_MSG.format(name=spec.name)
    assert "outerplanar" in msg and "counting" in msg
    assert fam.family("cacti").samplable


# --------------------------------------------------------------------- counts


def test_rooted_counts_match_reference():
    got = family_counts("rooted_trees", 10)
    assert got == [bf.rooted_tree_count(n) for n in range(1, 11)]


def test_free_counts_match_reference():
    got = family_counts("free_trees", 9)
    assert got == [bf.free_tree_count_prufer(n) for n in range(1, 10)]


def test_counts_at_size_zero_are_zero():
    for name in ("rooted_trees", "free_trees", "plane_trees", "cacti", "outerplanar"):
        spec, sys_ = solved(name, 4)
        assert ct.count(sys_, spec.count_query, 0) == 0


def test_plane_counts_match_closed_form():
    got = family_counts("plane_trees", 12)
    assert got[0] == 1
    assert got[1:] == [ct.plane_tree_count(n - 1) for n in range(2, 13)]
    assert got[:9] == [bf.plane_tree_count(n) for n in range(1, 10)]


@pytest.mark.parametrize("omega", [(1, 3), (1, 2, 3), (1, 4)])
def test_omega_counts_match_reference(omega):
    got = family_counts("omega_trees", 9, omega=omega)
    want = [bf.degree_constrained_tree_count(n, frozenset(omega)) for n in range(1, 10)]
    assert got == want


@pytest.mark.parametrize("omega", [(1, 3), (1, 2, 3)])
def test_omega_plane_counts_match_reference(omega):
    got = family_counts("omega_plane_trees", 9, omega=omega)
    want = [bf.plane_tree_count_degrees(n, frozenset(omega)) for n in range(1, 10)]
    assert got == want


def test_internal_size_maps():
    spec = fam.family("omega_trees", omega=(1, 3))
    assert [spec.internal_to_size(i) for i in range(4)] == [2, 4, 6, 8]
    assert fam.family("omega_trees", omega=(1, 2, 3)).internal_to_size is None
    spec3 = fam.family("d_regular_plane_trees", d=3)
    assert [spec3.internal_to_size(i) for i in range(4)] == [2, 3, 4, 5]
    spec4 = fam.family("d_regular_plane_trees", d=4)
    assert [spec4.internal_to_size(i) for i in range(4)] == [2, 4, 6, 8]


@pytest.mark.parametrize("d", [3, 4])
def test_d_regular_counts_match_closed_form(d):
    spec, sys_ = solved("d_regular_plane_trees", 20, d=d)
    for i in range(9):
        leaves = spec.internal_to_size(i)
        if leaves > 20:
            break
        got = ct.count(sys_, spec.count_query, leaves)
        assert got == ct.d_regular_plane_tree_count(i, d)


def test_cacti_counts():
    got = family_counts("cacti", 7)
    assert got == [1, 1, 2, 4, 9, 23, 63]
    assert got == [bf.cacti_count(n) for n in range(1, 8)]
    assert got[:5] == [bf.cacti_count_subsets(n) for n in range(1, 6)]


def test_outerplanar_counts():
    got = family_counts("outerplanar", 7)
    assert got == [1, 1, 2, 5, 13, 46, 172]
    assert got == [bf.outerplanar_count(n) for n in range(1, 8)]
    assert got[:5] == [bf.outerplanar_count_subsets(n) for n in range(1, 6)]


def test_block_systems_pass_exact_series_crosscheck():
    for name in ("cacti", "outerplanar"):
        spec = fam.family(name)
        sys_ = ct.solve(spec.vg, 8, cis_trunc=8)
        assert ct.count(sys_, spec.count_query, 6) in (23, 46)


# --------------------------------------------------------------- block series


def test_dissection_tree_series_matches_enumeration():
    coeffs = fam._dissection_tree_coeffs(7)
    assert coeffs[1:] == [1, 1, 3, 11, 45, 197, 903]
    assert coeffs[1:] == [len(bf.dissection_trees(n)) for n in range(1, 8)]


def test_block_series_smallest_coefficients():
    for maker in (fam.cacti_b_series, fam.outerplanar_b_series):
        bd, bsym, bdo = maker(6)
        # one block on two vertices: the edge
        assert bd.coefficient(((1, 1),)) == 1
        assert bsym.coefficient((), 2) == 1
        assert bdo.coefficient((), 1) == 1
    bd_c, _, _ = fam.cacti_b_series(6)
    bd_o, _, _ = fam.outerplanar_b_series(6)
    # the derived triangle is (s1^2 + s2)/2 for both families
    assert bd_c.coefficient(((1, 2),)) == Fraction(1, 2)
    assert bd_o.coefficient(((1, 2),)) == Fraction(1, 2)
    assert bd_c.coefficient(((2, 1),)) == Fraction(1, 2)
    assert bd_o.coefficient(((2, 1),)) == Fraction(1, 2)
    # identity part on three atoms: one shape for cacti, three for dissections
    assert bd_c.coefficient(((1, 3),)) == Fraction(1, 2)
    assert bd_o.coefficient(((1, 3),)) == Fraction(3, 2)
    # substituting s_i <- x^i turns both into ordinary counting series
    def ogs(cs, n):
        total = Fraction(0)
        for (skey, _), c in cs.terms.items():
            if sum(i * e for i, e in skey) == n:
                total += c
        return total

    assert [ogs(bd_c, n) for n in (1, 2, 3)] == [1, 1, 1]
    assert [ogs(bd_o, n) for n in (1, 2, 3)] == [1, 1, 3]


def test_float_hooks_match_truncated_series():
    x, y = 0.08, 0.1

    def s_at(i):
        return x**i

    def t_at(r):
        return y**r

    def series_value(cs, pointed):
        total = 0.0
        for (skey, t), c in cs.terms.items():
            v = float(c) * (y**t if pointed else 1.0)
            for i, e in skey:
                v *= (x**i) ** e
            total += v
        return total

    for maker, hooks in (
        (fam.cacti_b_series, (fam._cacti_bd_value, fam._cacti_bsym_value, fam._cacti_bdo_value)),
        (fam.outerplanar_b_series, (fam._op_bd_value, fam._op_bsym_value, fam._op_bdo_value)),
    ):
        bd, bsym, bdo = maker(42)
        assert hooks[0](s_at) == pytest.approx(series_value(bd, False), abs=1e-12)
        assert hooks[1](s_at, t_at) == pytest.approx(series_value(bsym, True), abs=1e-12)
        assert hooks[2](s_at, t_at) == pytest.approx(series_value(bdo, True), abs=1e-12)


def test_dissection_values_at_the_edges():
    assert fam._op_univals(0.0) == (0.0, 1.0, 1.0, 1.0, 3.0)
    tiny = fam._op_univals(1e-30)
    assert tiny[0] == pytest.approx(1e-30, rel=1e-12)
    assert tiny[3] == pytest.approx(1.0, rel=1e-12)
    assert fam._op_univals(-0.1) is None
    assert fam._op_univals(fam._OP_RADIUS) is None
    assert fam._op_univals(0.5) is None
    # hooks signal divergence with a huge value instead of raising
    assert fam._op_bd_value(lambda i: 0.2**i) > 1e12
    assert fam._cacti_bd_value(lambda i: 1.0 if i == 1 else 0.0) > 1e12


def test_link_blocks_reproduce_free_trees():
    class LinkBlock:
        name = "Bd"
        pointed = False

        def cis(self, trunc):
            return zx.CycleIndexSeries(trunc, {(((1, 1),), None): 1})

    class LinkSym:
        name = "Bsym"
        pointed = True

        def cis(self, trunc):
            return zx.PointedCycleIndexSeries(trunc, {((), 2): 1})

    class LinkPointed:
        name = "Bdo"
        pointed = True

        def cis(self, trunc):
            return zx.PointedCycleIndexSeries(trunc, {((), 1): 1})

    g = gr.parse(fam.BLOCK_GRAPH_TEXT)
    g = g.attach_terminals([LinkBlock(), LinkSym(), LinkPointed()])
    vg = gr.validate(g, probe_degree=9)
    sys_ = ct.solve(vg, 9)
    query = gr.unpoint(vg, "Go")
    got = [ct.count(sys_, query, n) for n in range(1, 10)]
    assert got == [bf.free_tree_count_prufer(n) for n in range(1, 10)]


def test_free_tree_pointing_identity_at_floats():
    spec = fam.family("free_trees")
    for k in range(1, 21):
        x = 0.015 * k
        tab = orc.eval_system(spec.vg, x)
        lhs = tab.value("Fo", 1)
        rhs = tab.value("Ro", 1) * (1.0 - tab.value("R", 1)) + tab.value("Ro", 2)
        assert lhs == pytest.approx(rhs, rel=1e-10)


# ------------------------------------------------------------------- sampling


def draw_classes(name: str, n: int, draws: int, seed: int) -> dict:
    spec = fam.family(name)
    table = sampling_table(name)
    rng = Rng(seed)
    seen: dict = {}
    for _ in range(draws):
        s = sample_targeted(spec.vg, spec.sample_query, n, rng, table=table)
        key = fam.canonical_form(s, spec)
        seen[key] = seen.get(key, 0) + 1
    return seen


def test_cacti_sampling_covers_all_classes():
    seen = draw_classes("cacti", 6, 2500, seed=1601)
    assert len(seen) == 23
    assert min(seen.values()) > 0


def test_free_sampling_covers_all_classes():
    seen = draw_classes("free_trees", 8, 2500, seed=1602)
    assert len(seen) == 23


def test_plane_sampling_covers_all_classes():
    seen = draw_classes("plane_trees", 7, 2000, seed=1603)
    assert len(seen) == 14


def test_rooted_sampling_covers_all_classes():
    seen = draw_classes("rooted_trees", 6, 1200, seed=1604)
    assert len(seen) == bf.rooted_tree_count(6) == 20


def test_cacti_symmetries_act_on_the_graph():
    spec = fam.family("cacti")
    table = sampling_table("cacti")
    rng = Rng(77)
    for _ in range(350):
        n = 1 + rng.randrange(10)
        rcs = sample_targeted(
            spec.vg, spec.pointed_var, n, rng, table=table, keep_symmetry=True
        )
        sym = rcs.symmetry
        st = resolve_substitutions(sym.structure)
        atoms = sorted(atoms_of(st))
        assert len(atoms) == n
        assert sorted(a for c in sym.cycles for a in c) == atoms
        assert rcs.root in sym.cycles[rcs.marked_cycle]
        perm = {}
        for c in sym.cycles:
            for j, a in enumerate(c):
                perm[a] = c[(j + 1) % len(c)]
        verts, edges = fam._graph_edges(st)
        assert verts == set(atoms)
        assert {frozenset(perm[a] for a in e) for e in edges} == edges


def test_parameterized_families_sample_their_classes():
    spec, sys_ = solved("omega_trees", 10, omega=(1, 3))
    want = ct.count(sys_, spec.count_query, 10)
    table = sm._default_table(spec.vg, spec.pointed_var, None)
    rng = Rng(5150)
    seen = set()
    for _ in range(400):
        s = sample_targeted(spec.vg, spec.sample_query, 10, rng, table=table)
        seen.add(fam.canonical_form(s, spec))
    assert len(seen) == want > 1

    spec3, sys3 = solved("d_regular_plane_trees", 8, d=3)
    leaves = spec3.internal_to_size(4)
    want3 = ct.count(sys3, spec3.count_query, leaves)
    table3 = sm._default_table(spec3.vg, spec3.pointed_var, None)
    seen3 = set()
    for _ in range(400):
        s = sample_targeted(spec3.vg, spec3.sample_query, leaves, rng, table=table3)
        seen3.add(fam.canonical_form(s, spec3))
    assert len(seen3) == want3 == ct.d_regular_plane_tree_count(4, 3) > 1


def tree_path(adj: dict, a: int, b: int) -> list:
    prev = {a: None}
    queue = [a]
    for v in queue:
        if v == b:
            break
        for w in adj[v]:
            if w not in prev:
                prev[w] = v
                queue.append(w)
    path = [b]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def test_symmetric_pointings_share_a_middle():
    spec = fam.family("free_trees")
    rng = Rng(424242)
    middle_edges = 0
    for _ in range(200):
        rcs = sample_boltzmann(
            spec.vg, "Fsym", x=0.25, rng=rng, keep_symmetry=True
        )
        sym = rcs.symmetry
        st = resolve_substitutions(sym.structure)
        marked = sym.cycles[rcs.marked_cycle]
        assert len(marked) >= 2
        perm = {}
        for c in sym.cycles:
            for j, a in enumerate(c):
                perm[a] = c[(j + 1) % len(c)]
        adj = fam._tree_adjacency(st)
        edges = {frozenset((v, w)) for v in adj for w in adj[v]}
        assert {frozenset((perm[v], perm[w])) for e in edges for v, w in [tuple(e)]} == edges
        paths = [
            tree_path(adj, marked[i], marked[(i + 1) % len(marked)])
            for i in range(len(marked))
        ]
        length = len(paths[0]) - 1
        assert all(len(p) - 1 == length for p in paths)
        if length % 2 == 0:
            middles = {p[length // 2] for p in paths}
            assert len(middles) == 1
            (mid,) = middles
            assert perm[mid] == mid
        else:
            middles = {frozenset(p[length // 2 : length // 2 + 2]) for p in paths}
            assert len(middles) == 1
            (mid,) = middles
            assert {perm[v] for v in mid} == set(mid)
            middle_edges += 1
    assert middle_edges > 0


# ------------------------------------------------------------ canonical forms


def test_canonical_forms_separate_atlas_classes():
    py = __import__("random").Random(31337)
    for pred, name, counter in (
        (bf.is_cactus, "cacti", bf.cacti_count),
        (bf.is_outerplanar, "outerplanar", bf.outerplanar_count),
    ):
        for n in range(1, 7):
            keys = set()
            for g in bf._atlas():
                if g.number_of_nodes() != n or not nx.is_connected(g) or not pred(g):
                    continue
                edges = [tuple(e) for e in g.edges()]
                iso = [v for v in g.nodes() if g.degree(v) == 0]
                gs = fam.graph_structure(edges, isolated=iso)
                key = fam.canonical_form(gs, name)
                names = list(g.nodes())
                remap = dict(zip(names, py.sample(range(50, 50 + len(names)), len(names))))
                gs2 = fam.graph_structure(
                    [(remap[a], remap[b]) for a, b in edges],
                    isolated=[remap[v] for v in iso],
                )
                assert fam.canonical_form(gs2, name) == key
                keys.add(key)
            assert len(keys) == counter(n)


def test_canonical_form_of_a_single_vertex():
    one = fam.graph_structure([], isolated=[9])
    assert fam.canonical_form(one, "cacti") == fam.canonical_form(
        fam.graph_structure([], isolated=[3]), "outerplanar"
    )


def test_canonical_form_rejects_non_dissection_blocks():
    k4 = fam.graph_structure(
        [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    )
    with pytest.raises(UsageError):
        fam.canonical_form(k4, "outerplanar")


def test_free_tree_canonical_separates_path_from_star():
    import itertools

    keys = set()
    for seq in itertools.product(range(4), repeat=2):
        edges = bf.prufer_to_edges(seq, 4)
        keys.add(fam.canonical_form(fam.graph_structure(edges), "cacti"))
    assert len(keys) == 2
