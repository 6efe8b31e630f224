"""Fixed-point solver producing exact coefficient tables for a grammar.

Two solvers share the same semantics: a fast per-degree engine working on
ordinary generating series (enough for counting, since substitution cores are
never grammar variables), and an eager cycle-index-level iteration used to
materialize symmetry information and to verify residuals.  Closed-form
counters for plane trees, d-regular plane trees, and 2-connected maps live
here as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import Union

from . import grammar as gr
from . import zindex as zx
from .errors import AdmissibilityError, InternalConsistencyError, UsageError

Number = Union[int, Fraction]


def _norm(v: Number) -> Number:
    if isinstance(v, Fraction) and v.denominator == 1:
        return int(v)
    return v


def _exact_div(total: Number, n: int) -> Number:
    if isinstance(total, int):
        q, r = divmod(total, n)
        return q if r == 0 else Fraction(total, n)
    return _norm(total / n)


# ------------------------------------------------------------- series engine


class _State:
    __slots__ = ("finals", "boundary", "n", "divisors", "phi")

    def __init__(self, names, N: int):
        self.finals: dict[str, list] = {v: [] for v in names}
        self.boundary: dict[str, Number] = {v: 0 for v in names}
        self.n = 0
        self.divisors = [zx.divisors(k) if k else [] for k in range(N + 1)]
        self.phi = [zx.phi(k) if k else 0 for k in range(N + 1)]


class _Node:
    def __init__(self):
        self.final: list = []

    def at(self, u: int, st: _State) -> Number:
        if u < len(self.final):
            return self.final[u]
        return self.value(u, st)

    def value(self, n: int, st: _State) -> Number:
        raise NotImplementedError

    def finalize(self, n: int, st: _State) -> None:
        self.final.append(_norm(self.value(n, st)))


class _Zero(_Node):
    def at(self, u, st):
        return 0

    def value(self, n, st):
        return 0

    def finalize(self, n, st):
        pass


class _Array(_Node):
    """Fixed coefficient array (atoms, standalone sized basics)."""

    def __init__(self, coeffs: list):
        super().__init__()
        self.coeffs = coeffs

    def at(self, u, st):
        return self.coeffs[u] if u < len(self.coeffs) else 0

    value = at

    def finalize(self, n, st):
        pass


class _Ref(_Node):
    def __init__(self, name: str):
        super().__init__()
        self.name = name

    def at(self, u, st):
        finals = st.finals[self.name]
        if u < len(finals):
            return finals[u]
        return st.boundary[self.name] if u == st.n else 0

    value = at

    def finalize(self, n, st):
        pass


class _Sum(_Node):
    def __init__(self, a: _Node, b: _Node):
        super().__init__()
        self.a = a
        self.b = b

    def value(self, n, st):
        return self.a.at(n, st) + self.b.at(n, st)


class _Prod(_Node):
    def __init__(self, a: _Node, b: _Node):
        super().__init__()
        self.a = a
        self.b = b
        self.shift_of = None
        for left, right in ((a, b), (b, a)):
            if isinstance(left, _Array) and left.coeffs == [0, 1]:
                self.shift_of = right
                break

    def value(self, n, st):
        if self.shift_of is not None:
            return self.shift_of.at(n - 1, st) if n >= 1 else 0
        total = 0
        a, b = self.a, self.b
        for k in range(n + 1):
            av = a.at(k, st)
            if av:
                bv = b.at(n - k, st)
                if bv:
                    total += av * bv
        return total


class _SeqSubst(_Node):
    """1/(1 - g): own final array is the quasi-inverse."""

    def __init__(self, arg: _Node):
        super().__init__()
        self.arg = arg

    def value(self, n, st):
        if n == 0:
            return 1
        total = 0
        for k in range(1, n + 1):
            av = self.arg.at(k, st)
            if av:
                total += av * self.final[n - k]
        return total


class _SetSubst(_Node):
    """exp(sum_r g(x^r)/r) via the weighted divisor-sum recurrence."""

    def __init__(self, arg: _Node):
        super().__init__()
        self.arg = arg
        self.gsum: list = []

    def gsum_at(self, k, st):
        if k < len(self.gsum):
            return self.gsum[k]
        return sum(d * self.arg.at(d, st) for d in st.divisors[k])

    def value(self, n, st):
        if n == 0:
            return 1
        total = 0
        for k in range(1, n + 1):
            gk = self.gsum_at(k, st)
            if gk:
                total += gk * self.final[n - k]
        return _exact_div(total, n)

    def finalize(self, n, st):
        self.gsum.append(self.gsum_at(n, st))
        self.final.append(_norm(self.value(n, st)))


class _CycSubst(_Node):
    """1 + sum_r (phi(r)/r) log(1/(1-g(x^r))) via power sums of 1/(1-g)."""

    def __init__(self, arg: _Node):
        super().__init__()
        self.arg = arg
        self.psum: list = [0]

    def psum_at(self, m, st):
        if m < len(self.psum):
            return self.psum[m]
        total = m * self.arg.at(m, st)
        for k in range(1, m):
            av = self.arg.at(m - k, st)
            if av:
                total += self.psum[k] * av
        return total

    def value(self, n, st):
        if n == 0:
            return 1
        total = 0
        for r in st.divisors[n]:
            total += st.phi[r] * self.psum_at(n // r, st)
        return _exact_div(total, n)

    def finalize(self, n, st):
        if n >= 1:
            self.psum.append(self.psum_at(n, st))
        self.final.append(_norm(self.value(n, st)))


class _SizedSeq(_Node):
    def __init__(self, arg: _Node, k: int):
        super().__init__()
        self.arg = arg
        self.k = k
        self.powers: list[list] = [[] for _ in range(k + 1)]

    def pow_at(self, j, u, st):
        if j == 0:
            return 1 if u == 0 else 0
        if j == 1:
            return self.arg.at(u, st)
        if u < len(self.powers[j]):
            return self.powers[j][u]
        total = 0
        for t in range(1, u + 1):
            av = self.arg.at(t, st)
            if av:
                lv = self.pow_at(j - 1, u - t, st)
                if lv:
                    total += av * lv
        return total

    def value(self, n, st):
        return self.pow_at(self.k, n, st)

    def finalize(self, n, st):
        for j in range(2, self.k + 1):
            self.powers[j].append(_norm(self.pow_at(j, n, st)))
        self.final.append(_norm(self.value(n, st)))


class _SizedSet(_Node):
    """Z_Set^[k] composed with g, by the 1/k averaged recurrence."""

    def __init__(self, arg: _Node, k: int):
        super().__init__()
        self.arg = arg
        self.k = k
        self.levels: list[list] = [[] for _ in range(k + 1)]

    def level_at(self, j, u, st):
        if j == 0:
            return 1 if u == 0 else 0
        if u < len(self.levels[j]):
            return self.levels[j][u]
        if u == 0:
            return 0
        total = 0
        for i in range(1, j + 1):
            for t in range(i, u + 1, i):
                av = self.arg.at(t // i, st)
                if av:
                    lv = self.level_at(j - i, u - t, st)
                    if lv:
                        total += av * lv
        return _exact_div(total, j)

    def value(self, n, st):
        return self.level_at(self.k, n, st)

    def finalize(self, n, st):
        for j in range(1, self.k + 1):
            self.levels[j].append(_norm(self.level_at(j, n, st)))
        self.final.append(_norm(self.value(n, st)))


class _SizedCyc(_Node):
    def __init__(self, arg: _Node, k: int):
        super().__init__()
        self.arg = arg
        self.k = k
        # per divisor r of k: cumulative power arrays of g(x^r)^j, j=2..k/r
        self.powers: dict[int, list[list]] = {
            r: [[] for _ in range(k // r + 1)] for r in zx.divisors(k)
        }

    def scaled_at(self, r, u, st):
        if u % r:
            return 0
        return self.arg.at(u // r, st)

    def pow_at(self, r, j, u, st):
        if j == 0:
            return 1 if u == 0 else 0
        if j == 1:
            return self.scaled_at(r, u, st)
        arrs = self.powers[r][j]
        if u < len(arrs):
            return arrs[u]
        total = 0
        for t in range(r, u + 1, r):
            av = self.arg.at(t // r, st)
            if av:
                lv = self.pow_at(r, j - 1, u - t, st)
                if lv:
                    total += av * lv
        return total

    def value(self, n, st):
        total = 0
        for r in zx.divisors(self.k):
            pv = self.pow_at(r, self.k // r, n, st)
            if pv:
                total += st.phi[r] * pv
        return _exact_div(total, self.k)

    def finalize(self, n, st):
        for r in zx.divisors(self.k):
            for j in range(2, self.k // r + 1):
                self.powers[r][j].append(_norm(self.pow_at(r, j, n, st)))
        self.final.append(_norm(self.value(n, st)))


class _SeqCircle(_Node):
    """Pointed sequence core: (Delta g)(x) / (1 - g)^2."""

    def __init__(self, arg: _Node):
        super().__init__()
        self.arg = arg
        self.q: list = []
        self.q2: list = []

    def q_at(self, u, st):
        if u < len(self.q):
            return self.q[u]
        if u == 0:
            return 1
        total = 0
        for k in range(1, u + 1):
            av = self.arg.at(k, st)
            if av:
                total += av * self.q[u - k]
        return total

    def value(self, n, st):
        total = 0
        for t in range(1, n + 1):
            av = self.arg.at(t, st)
            if av:
                total += t * av * self.q2[n - t]
        return total

    def finalize(self, n, st):
        qn = _norm(self.q_at(n, st))
        self.q.append(qn)
        q2n = 0
        for t in range(n + 1):
            if self.q[t] and self.q[n - t]:
                q2n += self.q[t] * self.q[n - t]
        self.q2.append(_norm(q2n))
        self.final.append(_norm(self.value(n, st)))


class _SetPoint(_Node):
    """Pointed set core: (sum of marked-cycle lengths >= min_len) times exp."""

    def __init__(self, arg: _Node, min_len: int):
        super().__init__()
        self.arg = arg
        self.min_len = min_len
        self.exp: list = []
        self.gsum: list = []

    def gsum_at(self, k, st):
        if k < len(self.gsum):
            return self.gsum[k]
        return sum(d * self.arg.at(d, st) for d in st.divisors[k])

    def exp_at(self, u, st):
        if u < len(self.exp):
            return self.exp[u]
        if u == 0:
            return 1
        total = 0
        for k in range(1, u + 1):
            gk = self.gsum_at(k, st)
            if gk:
                total += gk * self.exp[u - k]
        return _exact_div(total, u)

    def value(self, n, st):
        total = 0
        for t in range(1, n + 1):
            marked = self.gsum_at(t, st)
            if self.min_len == 2:
                marked = marked - t * self.arg.at(t, st)
            if marked:
                total += marked * self.exp[n - t]
        return total

    def finalize(self, n, st):
        self.gsum.append(self.gsum_at(n, st))
        self.exp.append(_norm(self.exp_at(n, st)))
        self.final.append(_norm(self.value(n, st)))


class _CycPoint(_Node):
    """Pointed cycle core: sum_l phi(l) (Delta g)(x^l) / (1 - g(x^l))."""

    def __init__(self, arg: _Node, min_len: int):
        super().__init__()
        self.arg = arg
        self.min_len = min_len
        self.geoms: dict[int, list] = {}

    def value(self, n, st):
        if n == 0:
            return 0
        total = 0
        for ell in st.divisors[n]:
            if ell < self.min_len:
                continue
            geom = self.geoms.get(ell)
            if geom is None:
                geom = [1]
                self.geoms[ell] = geom
            top = n // ell
            inner = 0
            for m in range(1, top + 1):
                av = self.arg.at(m, st)
                if av:
                    inner += m * av * geom[top - m]
            if inner:
                total += st.phi[ell] * inner
        return total

    def finalize(self, n, st):
        for ell in st.divisors[n]:
            if n >= ell:
                geom = self.geoms.setdefault(ell, [1])
                j = n // ell
                if j == len(geom):
                    val = 0
                    for m in range(1, j + 1):
                        av = self.arg.at(m, st)
                        if av:
                            val += av * geom[j - m]
                    geom.append(_norm(val))
        self.final.append(_norm(self.value(n, st)))


class _MonomialSubst(_Node):
    """Substitution into a materialized cycle index sum (sized pointed basics
    and terminal cores); factors are powers of the argument at scaled indices
    plus one marked factor for pointed cores."""

    def __init__(self, series, arg: _Node):
        super().__init__()
        self.arg = arg
        self.mono: list = []
        for key, coeff in series.terms.items():
            skey, t_index = key
            factors: list[tuple[int, bool]] = []
            if t_index is not None:
                factors.append((t_index, True))
            for i, exp in skey:
                factors.extend([(i, False)] * exp)
            cums = [[] for _ in range(len(factors))]
            self.mono.append((coeff, tuple(factors), cums))

    def factor_at(self, factor, u, st):
        scale, is_delta = factor
        if u % scale:
            return 0
        m = u // scale
        av = self.arg.at(m, st)
        return m * av if is_delta else av

    def level_candidates(self, factors, cums, n, st):
        cands = []
        prev = self.factor_at(factors[0], n, st)
        cands.append(prev)
        for i in range(1, len(factors)):
            arr = cums[i - 1]
            total = 0
            for t in range(n + 1):
                left = arr[t] if t < n else prev
                if left:
                    fv = self.factor_at(factors[i], n - t, st)
                    if fv:
                        total += left * fv
            prev = total
            cands.append(prev)
        return cands

    def value(self, n, st):
        total = 0
        for coeff, factors, cums in self.mono:
            if not factors:
                if n == 0:
                    total += coeff
                continue
            total += coeff * self.level_candidates(factors, cums, n, st)[-1]
        return _norm(total)

    def finalize(self, n, st):
        total = 0
        for coeff, factors, cums in self.mono:
            if not factors:
                if n == 0:
                    total += coeff
                continue
            cands = self.level_candidates(factors, cums, n, st)
            for arr, cand in zip(cums, cands):
                arr.append(_norm(cand))
            total += coeff * cands[-1]
        self.final.append(_norm(total))


def _standalone_basic_node(e: gr.Basic, N: int) -> _Node:
    if e.pointing == "none":
        if e.kind == "X":
            return _Array([0, 1])
        if e.kind == "One":
            return _Array([1])
        if e.kind == "Zero":
            return _Zero()
        if e.size is not None:
            return _Array([0] * e.size + [1]) if e.size <= N else _Zero()
        return None  # unsized Seq/Set/Cyc handled by subst-on-atom
    if e.kind in ("X", "One", "Zero"):
        if e.kind == "X" and e.pointing == "circle":
            return _Array([0, 1])
        return _Zero()
    if e.size is not None:
        series = zx.basic_pointed_series(e.kind, e.pointing, e.size, min(e.size, N))
        coeffs = [0] * (min(e.size, N) + 1)
        for key, c in series.terms.items():
            coeffs[zx._key_weight(key)] += c
        return _Array([_norm(c) for c in coeffs])
    return None


def _subst_node(core, arg_node: _Node, N: int, terminal_series) -> _Node:
    if isinstance(core, gr.Terminal):
        return _MonomialSubst(terminal_series[core.name].cis(N), arg_node)
    if core.size is None:
        table = {
            ("Seq", "none"): lambda: _SeqSubst(arg_node),
            ("Set", "none"): lambda: _SetSubst(arg_node),
            ("Cyc", "none"): lambda: _CycSubst(arg_node),
            ("Seq", "circle"): lambda: _SeqCircle(arg_node),
            ("Seq", "symm"): lambda: _Zero(),
            ("Set", "circle"): lambda: _SetPoint(arg_node, 1),
            ("Set", "symm"): lambda: _SetPoint(arg_node, 2),
            ("Cyc", "circle"): lambda: _CycPoint(arg_node, 1),
            ("Cyc", "symm"): lambda: _CycPoint(arg_node, 2),
        }
        return table[(core.kind, core.pointing)]()
    if core.pointing == "none":
        table = {"Seq": _SizedSeq, "Set": _SizedSet, "Cyc": _SizedCyc}
        return table[core.kind](arg_node, core.size)
    series = zx.basic_pointed_series(core.kind, core.pointing, core.size, N)
    return _MonomialSubst(series, arg_node)


def _build_node(e: gr.Expr, N: int, terminal_series, nodes: list) -> _Node:
    def reg(node: _Node) -> _Node:
        nodes.append(node)
        return node

    if isinstance(e, gr.Ref):
        return reg(_Ref(e.name))
    if isinstance(e, gr.Basic):
        node = _standalone_basic_node(e, N)
        if node is None:
            node = _subst_node(e, reg(_Array([0, 1])), N, terminal_series)
        return reg(node)
    if isinstance(e, gr.Sum):
        return reg(_Sum(_build_node(e.a, N, terminal_series, nodes),
                        _build_node(e.b, N, terminal_series, nodes)))
    if isinstance(e, (gr.Prod, gr.PProd)):
        return reg(_Prod(_build_node(e.a, N, terminal_series, nodes),
                         _build_node(e.b, N, terminal_series, nodes)))
    if isinstance(e, (gr.Subst, gr.PSubst)):
        arg_node = _build_node(e.arg, N, terminal_series, nodes)
        return reg(_subst_node(e.core, arg_node, N, terminal_series))
    raise InternalConsistencyError(f"unknown expression node {e!r}")


def _solve_ogs(vg: gr.ValidatedGrammar, N: int) -> dict[str, list[int]]:
    g = vg.grammar
    names = list(g.equations)
    st = _State(names, N)
    nodes: list[_Node] = []
    roots = {
        v: _build_node(rhs, N, g.terminal_series, nodes) for v, rhs in g.equations.items()
    }
    m = max(len(names), 1)
    for n in range(N + 1):
        st.n = n
        st.boundary = {v: 0 for v in names}
        bound = 2 * m * max(n, 1) + 2
        for _ in range(bound):
            changed = False
            for v in names:
                val = _norm(roots[v].value(n, st))
                if val != st.boundary[v]:
                    st.boundary[v] = val
                    changed = True
            if not changed:
                break
        else:
            raise InternalConsistencyError(
                f"series iteration did not stabilize at size {n} within {bound} rounds"
            )
        for node in nodes:
            node.finalize(n, st)
        for v in names:
            st.finals[v].append(st.boundary[v])
    out: dict[str, list[int]] = {}
    for v in names:
        coeffs = []
        for n, c in enumerate(st.finals[v]):
            if isinstance(c, Fraction):
                raise InternalConsistencyError(
                    f"non-integral count {c} for {v!r} at size {n}"
                )
            coeffs.append(c)
        out[v] = coeffs
    return out


# -------------------------------------------------------- cycle index solver


def _expr_cis(e: gr.Expr, table, g: gr.SpeciesGrammar, N: int, cache: dict):
    if isinstance(e, gr.Ref):
        return table[e.name]
    if isinstance(e, gr.Basic):
        key = ("basic", e.kind, e.size, e.pointing)
        if key not in cache:
            if e.pointing == "none":
                cache[key] = zx.basic_series(e.kind, e.size, N)
            else:
                cache[key] = zx.basic_pointed_series(e.kind, e.pointing, e.size, N)
        return cache[key]
    if isinstance(e, gr.Sum):
        return zx.series_add(
            _expr_cis(e.a, table, g, N, cache), _expr_cis(e.b, table, g, N, cache)
        )
    if isinstance(e, (gr.Prod, gr.PProd)):
        return zx.series_mul(
            _expr_cis(e.a, table, g, N, cache), _expr_cis(e.b, table, g, N, cache)
        )
    if isinstance(e, (gr.Subst, gr.PSubst)):
        if isinstance(e.core, gr.Terminal):
            key = ("terminal", e.core.name)
            if key not in cache:
                cache[key] = g.terminal_series[e.core.name].cis(N)
            core = cache[key]
        else:
            core = _expr_cis(e.core, table, g, N, cache)
        arg = _expr_cis(e.arg, table, g, N, cache)
        if isinstance(e, gr.Subst):
            return zx.plethysm(core, arg)
        return zx.pointed_plethysm(core, arg)
    raise InternalConsistencyError(f"unknown expression node {e!r}")


def _solve_cis(vg: gr.ValidatedGrammar, N: int) -> dict:
    g = vg.grammar
    table = {}
    for v in g.equations:
        if vg.sorts[v] == "pointed":
            table[v] = zx.PointedCycleIndexSeries(N, {})
        else:
            table[v] = zx.CycleIndexSeries(N, {})
    cache: dict = {}
    m = max(len(g.equations), 1)
    bound = 2 * m * max(N, 1) + 2
    for _ in range(bound):
        new_table = {v: _expr_cis(rhs, table, g, N, cache) for v, rhs in g.equations.items()}
        if all(new_table[v] == table[v] for v in table):
            break
        table = new_table
    else:
        raise InternalConsistencyError(
            f"cycle index iteration did not stabilize within {bound} rounds"
        )
    # residual: one more substitution pass must reproduce the table exactly
    for v, rhs in g.equations.items():
        if _expr_cis(rhs, table, g, N, cache) != table[v]:
            raise InternalConsistencyError(f"residual of equation {v!r} is not zero")
    return table


# -------------------------------------------------------------- solve + count


@dataclass
class SolvedSystem:
    """Solved coefficient tables; cycle index series when materialized."""

    grammar: gr.ValidatedGrammar
    trunc: int
    ogs: dict[str, zx.Ogs]
    cis: dict | None = None
    cis_trunc: int | None = None

    @property
    def ogs_only(self) -> bool:
        return self.cis is None


def solve(vg: gr.ValidatedGrammar, N: int, cis_trunc: int | None = None) -> SolvedSystem:
    """Solve a validated grammar to degree N.

    Coefficients are always computed at generating-series level (valid because
    substitution cores are never grammar variables).  With cis_trunc set, the
    cycle index series of every variable is additionally materialized to that
    degree, the residual of every equation is checked, and both solvers are
    compared term by term.
    """
    if not isinstance(vg, gr.ValidatedGrammar):
        raise UsageError("solve expects a validated grammar")
    if N < 0:
        raise UsageError("truncation degree must be nonnegative")
    tables = _solve_ogs(vg, N)
    ogs = {v: zx.Ogs(N, tuple(coeffs)) for v, coeffs in tables.items()}
    for po, plain in vg.grammar.pairs.items():
        for n in range(N + 1):
            if ogs[po].coefficient(n) != n * ogs[plain].coefficient(n):
                raise InternalConsistencyError(
                    f"pointed variable {po!r} is biased against {plain!r} at size {n}"
                )
    cis = None
    if cis_trunc is not None:
        if cis_trunc > N:
            raise UsageError("cis_trunc cannot exceed the truncation degree")
        cis = _solve_cis(vg, cis_trunc)
        for v, series in cis.items():
            prefix = zx.to_ogs(series)
            for n in range(cis_trunc + 1):
                if prefix.coefficient(n) != ogs[v].coefficient(n):
                    raise InternalConsistencyError(
                        f"series solvers disagree on {v!r} at size {n}"
                    )
        for po, plain in vg.grammar.pairs.items():
            if zx.delta_point(cis[plain], 1) != cis[po]:
                raise InternalConsistencyError(
                    f"cycle index of {po!r} is not the pointing of {plain!r}"
                )
    return SolvedSystem(vg, N, ogs, cis, cis_trunc)


def count(sys: SolvedSystem, var: Union[str, gr.UnpointQuery], n: int) -> int:
    """Exact number of structures of size n for a variable or unpoint query."""
    if n < 0:
        raise UsageError("size must be nonnegative")
    if n > sys.trunc:
        raise UsageError(f"size {n} exceeds the solved truncation {sys.trunc}")
    if isinstance(var, gr.UnpointQuery):
        c = sys.ogs[var.var].coefficient(n)
        if n == 0:
            return c
        q, r = divmod(c, n)
        if r:
            raise InternalConsistencyError(
                f"coefficient {c} of {var.var!r} at size {n} is not divisible by {n}"
            )
        return q
    if var not in sys.ogs:
        raise UsageError(f"unknown variable {var!r}")
    return sys.ogs[var].coefficient(n)


# ------------------------------------------------------------- closed forms


def plane_tree_count(n: int) -> int:
    """Unrooted plane trees with n+1 vertices."""
    if n <= 0:
        raise UsageError("plane_tree_count needs n >= 1")
    total = Fraction(comb(2 * n, n), 2 * n)
    total += Fraction(n + 1, 2 * n) * sum(
        zx.phi(n // k) * comb(2 * k, k) for k in zx.divisors(n) if k != n
    )
    if n % 2 == 1:
        total += comb(n - 1, (n - 1) // 2)
    total /= n + 1
    if total.denominator != 1:
        raise InternalConsistencyError(f"plane tree formula gave {total} at n={n}")
    return int(total)


def d_regular_plane_tree_count(n: int, d: int) -> int:
    """Plane trees whose internal nodes all have degree d, with n internal nodes."""
    if d < 3:
        raise UsageError("d_regular_plane_tree_count needs d >= 3")
    if n < 0:
        raise UsageError("d_regular_plane_tree_count needs n >= 0")
    m = n * (d - 2) + 2
    total = Fraction(comb(n + m - 2, n), m - 1)
    if m % 2 == 0 and ((m - 2) // 2) % (d - 2) == 0:
        total += comb(n // 2 + m // 2 - 1, n // 2)
    for r in zx.divisors(d):
        if r > 1 and m % r == 0 and ((m - d) // r) % (d - 2) == 0:
            n_r = (n - 1) // r
            m_r = m // r
            total += zx.phi(r) * comb(n_r + m_r - 1, n_r)
    total /= m
    if total.denominator != 1:
        raise InternalConsistencyError(
            f"regular plane tree formula gave {total} at n={n}, d={d}"
        )
    return int(total)


def _map_s(n: int) -> int:
    # 2(3n-3)! / (n! (2n-1)!)
    num = 2 * _factorial(3 * n - 3)
    den = _factorial(n) * _factorial(2 * n - 1)
    q, r = divmod(num, den)
    if r:
        raise InternalConsistencyError(f"rooted map count is not integral at n={n}")
    return q


def _factorial(k: int) -> int:
    out = 1
    for i in range(2, k + 1):
        out *= i
    return out


def _map_u(n: int) -> Fraction:
    if n % 2 == 1:
        return Fraction(n * (n + 1), 2) * _map_s((n + 1) // 2)
    return Fraction((3 * n - 4) * n, 8) * _map_s(n // 2)


def map_2conn_counts(n: int) -> tuple[int, int, int]:
    """Rooted (s_n), reflectively symmetric (u_n), and unrooted (t_n) counts
    of 2-connected maps with n edges."""
    if n < 1:
        raise UsageError("map_2conn_counts needs n >= 1")
    s_n = _map_s(n)
    u_n = _map_u(n)
    if u_n.denominator != 1:
        raise InternalConsistencyError(f"symmetric map count is not integral at n={n}")
    total = Fraction(s_n) + u_n
    for k in zx.divisors(n):
        if k != n:
            total += Fraction(zx.phi(n // k) * (3 * k - 1) * (3 * k - 2) * _map_s(k), 2)
    t_n = total / (2 * n)
    if t_n.denominator != 1:
        raise InternalConsistencyError(f"unrooted map count {t_n} is not integral at n={n}")
    return s_n, int(u_n), int(t_n)


def _map_counts_from_series(n_max: int) -> list[tuple[int, int, int]]:
    """Independent extraction of (s_n, u_n, t_n) from the algebraic series
    eta = y/(1-eta)^2 (no factorial formulas involved)."""
    N = n_max + 1
    eta = [Fraction(0)] * (N + 1)
    for _ in range(2 * N + 2):
        sq = _poly_mul(_poly_sub_one(eta), _poly_sub_one(eta), N)
        new = [Fraction(0)] * (N + 1)
        for i in range(N):
            new[i + 1] = sq[i]
        if new == eta:
            break
        eta = new
    # 1/(1-3eta)
    inv = [Fraction(0)] * (N + 1)
    inv[0] = Fraction(1)
    for u in range(1, N + 1):
        acc = Fraction(0)
        for k in range(1, u + 1):
            if eta[k]:
                acc += 3 * eta[k] * inv[u - k]
        inv[u] = acc
    eta2 = _poly_mul(eta, eta, N)
    sbar = [2 * eta[u] - 3 * eta2[u] for u in range(N + 1)]
    gser = _poly_mul([2 * e for e in eta], inv, N)
    pser = _poly_mul([3 * eta[u] - eta2[u] for u in range(N + 1)], inv, N)
    qser = [2 * c for c in inv]
    out = []
    for n in range(1, n_max + 1):
        s_n = sbar[n]
        if n % 2 == 1:
            u_n = qser[(n - 1) // 2]
        else:
            u_n = pser[n // 2] - gser[n // 2]
        total = s_n + u_n
        for k in zx.divisors(n):
            if k != n:
                total += zx.phi(n // k) * gser[k]
        t_n = Fraction(total, 2 * n)
        if s_n.denominator != 1 or u_n.denominator != 1 or t_n.denominator != 1:
            raise InternalConsistencyError(f"series map counts not integral at n={n}")
        out.append((int(s_n), int(u_n), int(t_n)))
    return out


def _poly_mul(a: list, b: list, N: int) -> list:
    out = [Fraction(0)] * (N + 1)
    for i, av in enumerate(a):
        if av:
            for j in range(N + 1 - i):
                if b[j]:
                    out[i + j] += av * b[j]
    return out


def _poly_sub_one(eta: list) -> list:
    # series 1/(1-eta) from eta with eta[0] = 0
    N = len(eta) - 1
    out = [Fraction(0)] * (N + 1)
    out[0] = Fraction(1)
    for u in range(1, N + 1):
        acc = Fraction(0)
        for k in range(1, u + 1):
            if eta[k]:
                acc += eta[k] * out[u - k]
        out[u] = acc
    return out
