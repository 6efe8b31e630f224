from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bruteforce as bf
from polyboltz import grammar as gr
from polyboltz import zindex as zx
from polyboltz.errors import AdmissibilityError, UsageError

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

# free unlabeled trees for n = 8, 9 from the Prufer-code enumerator in
# bruteforce.py (hours-scale beyond n = 9); n <= 7 is recomputed live below
FREE_TREES_8 = 23
FREE_TREES_9 = 47


def validated(text: str, degree: int = gr.PROBE_DEGREE) -> gr.ValidatedGrammar:
    return gr.validate(gr.parse(text), degree)


class TestParse:
    def test_single_equation(self):
        g = gr.parse(ROOTED_TEXT)
        assert list(g.equations) == ["R"]
        assert g.root == "R"
        rhs = g.equations["R"]
        assert rhs == gr.Prod(gr.Basic("X"), gr.Subst(gr.Basic("Set"), gr.Ref("R")))

    def test_subst_sugar_equals_explicit_o(self):
        assert gr.parse("A = SET(B)").equations["A"] == gr.parse("A = SET o B").equations["A"]

    def test_precedence_sum_prod(self):
        rhs = gr.parse("T = X + T * T").equations["T"]
        assert rhs == gr.Sum(gr.Basic("X"), gr.Prod(gr.Ref("T"), gr.Ref("T")))

    def test_precedence_subst_tighter_than_star(self):
        rhs = gr.parse("F = point(SET) osub R star X").equations["F"]
        core = gr.Basic("Set", None, "circle")
        assert rhs == gr.PProd(gr.PSubst(core, gr.Ref("R")), gr.Basic("X"))

    def test_left_associative_sum(self):
        rhs = gr.parse("A = X + B + C").equations["A"]
        assert rhs == gr.Sum(gr.Sum(gr.Basic("X"), gr.Ref("B")), gr.Ref("C"))

    def test_parentheses_override(self):
        rhs = gr.parse("A = X * (B + C)").equations["A"]
        assert rhs == gr.Prod(gr.Basic("X"), gr.Sum(gr.Ref("B"), gr.Ref("C")))

    def test_sized_basics(self):
        rhs = gr.parse("A = SET[3](B) + CYC[4](B) + SEQ[2](B)").equations["A"]
        expected = gr.Sum(
            gr.Sum(
                gr.Subst(gr.Basic("Set", 3), gr.Ref("B")),
                gr.Subst(gr.Basic("Cyc", 4), gr.Ref("B")),
            ),
            gr.Subst(gr.Basic("Seq", 2), gr.Ref("B")),
        )
        assert rhs == expected

    def test_pointed_basics(self):
        rhs = gr.parse("A = point(SET[2]) osub B + sympoint(CYC) osub B").equations["A"]
        assert rhs == gr.Sum(
            gr.PSubst(gr.Basic("Set", 2, "circle"), gr.Ref("B")),
            gr.PSubst(gr.Basic("Cyc", None, "symm"), gr.Ref("B")),
        )

    def test_atoms(self):
        rhs = gr.parse("A = X + ONE + ZERO").equations["A"]
        assert rhs == gr.Sum(gr.Sum(gr.Basic("X"), gr.Basic("One")), gr.Basic("Zero"))

    def test_comments_and_semicolons(self):
        g = gr.parse("# intro\nA = X * B; B = SET(A)  # trailing\nroot A")
        assert list(g.equations) == ["A", "B"]
        assert g.root == "A"

    def test_directives(self):
        g = gr.parse("terminal Bp\nterminal Bq pointed\nA = Bp o H\nH = X * SET(H)\npair Z H\nroot A")
        assert g.terminals == {"Bp": False, "Bq": True}
        assert g.pairs == {"Z": "H"}
        assert isinstance(g.equations["A"].core, gr.Terminal)

    def test_default_root_is_first_variable(self):
        assert gr.parse("A = X + B * B\nB = X * SET(B)").root == "A"

    @pytest.mark.parametrize(
        "text",
        [
            "A = ",
            "A = X +",
            "A = (X",
            "A = SET[",
            "A = SET[x](B)",
            "A = 2",
            "root",
            "A = X ) X",
            "A = X X",
            "point = X",
            "A = point(B)",
            "A = root * X",
            "terminal point",
            "pair A",
        ],
    )
    def test_syntax_errors(self, text):
        with pytest.raises(UsageError) as err:
            gr.parse(text)
        assert err.value.diagnostics[0].category == "syntax"

    def test_duplicate_equation_rejected(self):
        with pytest.raises(UsageError):
            gr.parse("A = X * B\nA = X + B")

    def test_error_carries_location(self):
        with pytest.raises(UsageError) as err:
            gr.parse("A = X * B\nB = X +\n")
        diag = err.value.diagnostics[0].as_dict()
        assert diag["line"] == 2


class TestPrint:
    @pytest.mark.parametrize("text", [ROOTED_TEXT, FREE_TREE_TEXT, PLANE_TEXT])
    def test_round_trip_named_grammars(self, text):
        g = gr.parse(text)
        assert gr.parse(gr.to_text(g)) == g

    def test_round_trip_with_terminals(self):
        g = gr.parse("terminal Bp\nterminal Bo pointed\nK = Bp o H\nKo = Bo osub H\nH = X * SET(K)\nroot H")
        again = gr.parse(gr.to_text(g))
        assert again == g
        assert isinstance(again.equations["K"].core, gr.Terminal)

    def test_print_keeps_grouping(self):
        g = gr.parse("A = X * (B + C)\nB = X * SET(B)\nC = X * SET(C)")
        assert gr.parse(gr.to_text(g)) == g
        assert "(" in gr.to_text(g).splitlines()[0]


def _expr_strategy() -> st.SearchStrategy[gr.Expr]:
    refs = st.sampled_from(["A", "B", "C"]).map(gr.Ref)
    atoms = st.sampled_from(["X", "One", "Zero"]).map(gr.Basic)
    sizes = st.one_of(st.none(), st.integers(min_value=0, max_value=4))
    plain = st.builds(gr.Basic, st.sampled_from(["Seq", "Set", "Cyc"]), sizes, st.just("none"))
    pointed = st.builds(
        gr.Basic,
        st.sampled_from(["Seq", "Set", "Cyc"]),
        sizes,
        st.sampled_from(["circle", "symm"]),
    )
    leaves = st.one_of(refs, atoms, plain, pointed)

    def extend(children):
        return st.one_of(
            st.builds(gr.Sum, children, children),
            st.builds(gr.Prod, children, children),
            st.builds(gr.PProd, children, children),
            st.builds(gr.Subst, st.one_of(plain, children), refs),
            st.builds(gr.PSubst, pointed, refs),
        )

    return st.recursive(leaves, extend, max_leaves=12)


class TestRoundTripProperty:
    @settings(max_examples=120, deadline=None)
    @given(exprs=st.lists(_expr_strategy(), min_size=1, max_size=3))
    def test_parse_inverts_print(self, exprs):
        g = gr.SpeciesGrammar({f"V{i}": e for i, e in enumerate(exprs)})
        assert gr.parse(gr.to_text(g)) == g


class TestValidate:
    def test_sorts_inferred(self):
        vg = validated(FREE_TREE_TEXT)
        assert vg.sorts == {
            "R": "unpointed",
            "Fp": "unpointed",
            "Fo": "pointed",
            "Fsym": "pointed",
            "Ro": "pointed",
        }

    def test_pointed_side_resolved(self):
        vg = validated(FREE_TREE_TEXT)
        rhs = vg.grammar.equations["Fo"]
        assert vg.pointed_sides[rhs.a] == "left"

    def test_star_accepts_pointed_on_either_side(self):
        vg = validated("A = X star point(SET) osub B\nB = X * SET(B)")
        rhs = vg.grammar.equations["A"]
        assert vg.pointed_sides[rhs] == "right"

    def test_plain_product_rejects_pointed_operand(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = X * (point(SET) osub B)\nB = X * SET(B)")
        assert any(d.category == "sort" for d in err.value.diagnostics)

    def test_star_rejects_two_unpointed(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = X star X")
        assert any(d.category == "sort" for d in err.value.diagnostics)

    def test_mixed_sort_sum_rejected(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = X + point(X) star B\nB = X * SET(B)")
        assert any(d.category == "sort" for d in err.value.diagnostics)

    def test_variable_core_rejected(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = B o C\nB = X * SET(B)\nC = X * SET(C)")
        assert any(d.category == "core" for d in err.value.diagnostics)

    def test_expression_argument_rejected(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = SET(X * A)")
        assert any(d.category == "argument" for d in err.value.diagnostics)

    def test_unknown_reference(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = X * B")
        assert any(d.category == "reference" for d in err.value.diagnostics)

    def test_unknown_root(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = X * SET(A)\nroot Z")
        assert any(d.category == "reference" for d in err.value.diagnostics)

    def test_bare_alias_rejected(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = B\nB = X * SET(B)")
        assert any(d.category == "degenerate" for d in err.value.diagnostics)

    def test_pair_sort_checked(self):
        text = "R = X * SET(R)\nRo = point(X) star SR + (point(SET) osub R) star X\nSR = SET(R)\npair R Ro"
        with pytest.raises(AdmissibilityError) as err:
            validated(text)
        assert any(d.category == "sort" for d in err.value.diagnostics)

    def test_terminal_outside_core_rejected(self):
        with pytest.raises(AdmissibilityError) as err:
            gr.validate(
                gr.parse("terminal Bp\nA = X * Bp").attach_terminals([_seriesterm("Bp")])
            )
        assert any(d.category == "terminal" for d in err.value.diagnostics)

    def test_missing_terminal_series(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("terminal Bp\nA = Bp o H\nH = X * SET(H)")
        assert any(d.category == "terminal" for d in err.value.diagnostics)

    def test_empty_grammar_rejected(self):
        with pytest.raises(AdmissibilityError):
            gr.validate(gr.SpeciesGrammar({}))

    def test_set_of_self_inadmissible(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = SET(A)")
        assert any(d.category == "admissibility" for d in err.value.diagnostics)

    def test_guarded_self_reference_admissible(self):
        vg = validated("A = X * SET(A)", degree=8)
        assert vg.const_terms["A"] == 0

    def test_sequence_with_empty_argument_inadmissible(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = SEQ(B)\nB = ONE + X * A")
        assert any(d.category == "admissibility" for d in err.value.diagnostics)

    def test_non_well_founded_detected(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = A * ONE + X")
        assert any(d.category == "well-foundedness" for d in err.value.diagnostics)

    def test_constant_terms_recorded(self):
        vg = validated("A = X * Fp\nFp = SET(A)", degree=6)
        assert vg.const_terms == {"A": Fraction(0), "Fp": Fraction(1)}

    def test_diagnostics_are_json_ready(self):
        with pytest.raises(AdmissibilityError) as err:
            validated("A = SET(A)")
        payload = err.value.diagnostics[0].as_dict()
        assert set(payload) == {"category", "message", "line", "col"}


def _seriesterm(name: str, pointed: bool = False, t_index: int = 2):
    class _T:
        def __init__(self):
            self.name = name
            self.pointed = pointed

        def cis(self, trunc: int):
            if pointed:
                return zx.PointedCycleIndexSeries(trunc, {((), t_index): Fraction(1)})
            return zx.basic_series("Set", 2, trunc)

    return _T()


class TestProbe:
    def test_rooted_trees(self):
        vg = validated(ROOTED_TEXT, degree=12)
        expected = tuple(bf.rooted_tree_count(n) for n in range(13))
        assert vg.probe_ogs["R"] == expected

    def test_binary_trees_catalan(self):
        vg = validated("T = X + T * T", degree=10)
        assert vg.probe_ogs["T"] == (0, 1, 1, 2, 5, 14, 42, 132, 429, 1430, 4862)

    def test_free_trees_match_enumerator(self):
        vg = validated(FREE_TREE_TEXT, degree=9)
        fo = vg.probe_ogs["Fo"]
        assert all(fo[n] % n == 0 for n in range(1, 10))
        live = [bf.free_tree_count_prufer(n) for n in range(1, 8)]
        assert [fo[n] // n for n in range(1, 8)] == live
        assert fo[8] // 8 == FREE_TREES_8
        assert fo[9] // 9 == FREE_TREES_9

    def test_pair_of_pointed_and_plain_rooted_trees(self):
        vg = validated(FREE_TREE_TEXT, degree=12)
        r, ro = vg.probe_ogs["R"], vg.probe_ogs["Ro"]
        assert all(ro[n] == n * r[n] for n in range(13))

    def test_plane_trees_match_enumerator(self):
        vg = validated(PLANE_TEXT, degree=9)
        eo = vg.probe_ogs["Eo"]
        assert [eo[n] // n for n in range(1, 10)] == [bf.plane_tree_count(n) for n in range(1, 10)]

    def test_terminal_core_matches_inline_basic(self):
        text = "terminal Bp\nK = Bp o H\nH = X * SET(K)\nroot H"
        g = gr.parse(text).attach_terminals([_seriesterm("Bp")])
        vg = gr.validate(g, probe_degree=10)
        inline = validated("K = SET[2](H)\nH = X * SET(K)\nroot H", degree=10)
        assert vg.probe_ogs["H"] == inline.probe_ogs["H"]

    def test_pointed_terminal_core_matches_inline_basic(self):
        text = "terminal Bo pointed\nKo = Bo osub H\nH = X * SET(H)\nroot Ko"
        g = gr.parse(text).attach_terminals([_seriesterm("Bo", pointed=True)])
        vg = gr.validate(g, probe_degree=10)
        inline = validated("Ko = sympoint(SET[2]) osub H\nH = X * SET(H)\nroot Ko", degree=10)
        assert vg.probe_ogs["Ko"] == inline.probe_ogs["Ko"]

    def test_attach_rejects_undeclared_or_mismatched(self):
        g = gr.parse("terminal Bp\nK = Bp o H\nH = X * SET(H)")
        with pytest.raises(UsageError):
            g.attach_terminals([_seriesterm("Nope")])
        with pytest.raises(UsageError):
            g.attach_terminals([_seriesterm("Bp", pointed=True)])


class TestUnpoint:
    def test_returns_query(self):
        vg = validated(FREE_TREE_TEXT, degree=6)
        assert gr.unpoint(vg, "Fo") == gr.UnpointQuery("Fo")

    def test_rejects_unpointed_variable(self):
        vg = validated(FREE_TREE_TEXT, degree=6)
        with pytest.raises(UsageError):
            gr.unpoint(vg, "R")

    def test_rejects_unknown_variable(self):
        vg = validated(ROOTED_TEXT, degree=6)
        with pytest.raises(UsageError):
            gr.unpoint(vg, "Nope")
