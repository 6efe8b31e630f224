"""Ready-made structure families built on the cycle-pointing grammar engine.

Each family couples a validated grammar with counting conventions, sampler
wiring and a canonical-form routine, so callers can count, sample and
classify structures without assembling the pieces by hand.  The graph
families (cacti, outerplanar) feed their rooted block series in as terminal
cycle index sums with closed-form float evaluators; the cacti blocks also
carry exact Boltzmann samplers.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Optional, Union

from . import grammar as gr
from . import zindex as zx
from .errors import AdmissibilityError, UsageError
from .sampler import (
    Atom,
    Collection,
    Pair,
    RootedCSymmetry,
    Structure,
    Symmetry,
    Tagged,
    _draw_geom,
    resolve_substitutions,
)

# value returned by float evaluators in place of a diverged closed form; it
# exceeds the oracle's cap, so the evaluation round is abandoned cleanly
_BIG = 1e30

_ZERO = Fraction(0)
_HALF = Fraction(1, 2)


# ---- grammar texts ----------------------------------------------------------

ROOTED_TREE_TEXT = """
R = X * SET(R)
root R
"""

FREE_TREE_TEXT = """
R = X * Fp
Fp = SET(R)
Fo = point(X) star Fp + Fsym
Fsym = sympoint(SET[2]) osub R + (sympoint(SET) osub R) star X
Ro = point(X) star Fp + (point(SET) osub R) star X
pair Ro R
root Fo
"""

PLANE_TREE_TEXT = """
A = X * SA
SA = SEQ(A)
Ep = CYC(A)
Eo = point(X) star Ep + Esym
Esym = sympoint(SET[2]) osub A + (sympoint(CYC) osub A) star X
Ao = point(X) star SA + (point(SEQ) osub A) star X
pair Ao A
root Eo
"""

# block-decomposed connected graphs: vertices carry a set of blocks, each
# block is substituted over the rooted-at-a-vertex variable H; the pointed
# root Go splits into a pointed vertex and a symmetric part whose marked
# cycle sits either inside a block (Bsym) or around a vertex (SET of blocks)
BLOCK_GRAPH_TEXT = """
H = X * Gd
Gd = SET(K)
K = Bd o H
Go = point(X) star Gd + Gsym
Gsym = Bsym osub H + (sympoint(SET) osub K) star X
Ho = point(X) star Gd + (point(SET) osub K) star X
Ko = Bdo osub H
pair Ho H
pair Ko K
root Go
terminal Bd
terminal Bsym pointed
terminal Bdo pointed
"""


def omega_tree_text(omega: tuple) -> str:
    d1 = " + ".join(f"SET[{w - 1}](R)" for w in omega)
    df = " + ".join(f"SET[{w}](R)" for w in omega)
    fsym = " + ".join(f"sympoint(SET[{w}]) osub R" for w in omega)
    ro = " + ".join(f"point(SET[{w - 1}]) osub R" for w in omega)
    return (
        f"R = X * D1\n"
        f"D1 = {d1}\n"
        f"DF = {df}\n"
        f"Fo = point(X) star DF + Fsym\n"
        f"Fsym = sympoint(SET[2]) osub R + ({fsym}) star X\n"
        f"Ro = point(X) star D1 + ({ro}) star X\n"
        f"pair Ro R\n"
        f"root Fo\n"
    )


def omega_plane_tree_text(omega: tuple) -> str:
    c1 = " + ".join(f"SEQ[{w - 1}](A)" for w in omega)
    cc = " + ".join(f"CYC[{w}](A)" for w in omega)
    esym = " + ".join(f"sympoint(CYC[{w}]) osub A" for w in omega)
    ao = " + ".join(f"point(SEQ[{w - 1}]) osub A" for w in omega)
    return (
        f"A = X * C1\n"
        f"C1 = {c1}\n"
        f"CC = {cc}\n"
        f"Eo = point(X) star CC + Esym\n"
        f"Esym = sympoint(SET[2]) osub A + ({esym}) star X\n"
        f"Ao = point(X) star C1 + ({ao}) star X\n"
        f"pair Ao A\n"
        f"root Eo\n"
    )


def d_regular_plane_tree_text(d: int) -> str:
    return (
        f"A = X + SEQ[{d - 1}](A)\n"
        f"Eo = point(X) star A + sympoint(SET[2]) osub A + sympoint(CYC[{d}]) osub A\n"
        f"Ao = point(X) + point(SEQ[{d - 1}]) osub A\n"
        f"pair Ao A\n"
        f"root Eo\n"
    )


# ---- cacti block series -----------------------------------------------------
#
# Cactus blocks are single edges and simple cycles, so a block rooted at one
# deleted vertex is an open path of m >= 1 remaining vertices.  Its symmetries
# split into the identity (s1^m, once per path, with a global 1/2 from the
# dihedral normalization) and the end-to-end reflection (s1 s2^j for odd,
# s2^k for even paths).  The symmetric pointed series aggregates, over closed
# polygons, every rotation cycle of each order r >= 2 and every reflection
# with its marked 2-cycle.


def _bump(terms: dict, skey, t, coeff) -> None:
    key = (tuple(skey), t)
    c = terms.get(key, _ZERO) + Fraction(coeff)
    if c:
        terms[key] = c
    elif key in terms:
        del terms[key]


@lru_cache(maxsize=None)
def cacti_b_series(trunc: int):
    """Block series of cacti: (derived, symmetric pointed, derived pointed)."""
    N = trunc
    terms: dict = {}
    for m in range(1, N + 1):  # identity paths: (1/2) s1^m
        _bump(terms, ((1, m),), None, _HALF)
    for j in range(0, N // 2 + 1):  # reflected odd paths: (1/2) s1 s2^j
        if 1 + 2 * j <= N:
            _bump(terms, ((1, 1), (2, j)) if j else ((1, 1),), None, _HALF)
    for k in range(1, N // 2 + 1):  # reflected even paths: (1/2) s2^k
        _bump(terms, ((2, k),), None, _HALF)
    bd = zx.CycleIndexSeries(N, terms)

    terms = {}
    for r in range(2, N + 1):  # marked rotation cycles: (phi(r)/2) t_r s_r^m
        w = Fraction(zx.phi(r), 2)
        m = 0
        while r + r * m <= N:
            _bump(terms, ((r, m),) if m else (), r, w)
            m += 1
    # marked reflection 2-cycles: (t2/2)(1 + s1)^2 / (1 - s2)^2
    for j in range(0, N // 2 + 1):
        c = Fraction(j + 1, 2)
        for a, mult in ((0, 1), (1, 2), (2, 1)):
            if 2 + a + 2 * j > N:
                continue
            skey = []
            if a:
                skey.append((1, a))
            if j:
                skey.append((2, j))
            _bump(terms, skey, 2, c * mult)
    bsym = zx.PointedCycleIndexSeries(N, terms)

    bdo = zx.delta_point(bd, 1)
    return bd, bsym, bdo


def _cacti_bd_value(s_at) -> float:
    s1, s2 = s_at(1), s_at(2)
    if s1 >= 1.0 or s2 >= 1.0:
        return _BIG
    return 0.5 * s1 / (1.0 - s1) + 0.5 * (s1 + s2) / (1.0 - s2)


_ROT_CAP = 4096  # rotation orders to scan before declaring the tail zero


def _rotation_weights(s_at, t_at, g_of) -> Optional[list]:
    """Weights of marked rotation branches, one per order r >= 2.

    Stops once the pointed weight underflows to zero; g_of maps the plain
    value at order r to the per-cycle factor (geometric for polygons,
    dissection counts for outerplanar blocks).  Returns None on divergence.
    """
    out = []
    r = 2
    while r <= _ROT_CAP:
        tv = t_at(r)
        if tv == 0.0:
            break
        gv = g_of(s_at(r))
        if gv is None:
            return None
        out.append((r, 0.5 * zx.phi(r) * tv * gv))
        r += 1
    return out


def _cacti_bsym_value(s_at, t_at) -> float:
    rots = _rotation_weights(s_at, t_at, lambda v: None if v >= 1.0 else 1.0 / (1.0 - v))
    if rots is None:
        return _BIG
    s1, s2 = s_at(1), s_at(2)
    if s1 >= 1.0 or s2 >= 1.0:
        return _BIG
    d = 1.0 - s2
    return sum(w for _, w in rots) + 0.5 * t_at(2) * (1.0 + s1) ** 2 / (d * d)


def _cacti_bdo_value(s_at, t_at) -> float:
    s1, s2 = s_at(1), s_at(2)
    if s1 >= 1.0 or s2 >= 1.0:
        return _BIG
    d1, d2 = 1.0 - s1, 1.0 - s2
    t1, t2 = t_at(1), t_at(2)
    return 0.5 * t1 * (1.0 / (d1 * d1) + 1.0 / d2) + t2 * (1.0 + s1) / (d2 * d2)


def _geom_pair(p: float, rng) -> int:
    # k >= 0 with law proportional to (k+1) p^k
    return _draw_geom(p, rng) + _draw_geom(p, rng)


def _path_symmetry(ids: list, reflected: bool) -> Symmetry:
    m = len(ids)
    if reflected:
        cycles = [(ids[i], ids[m - 1 - i]) for i in range(m // 2)]
        if m % 2:
            cycles.append((ids[m // 2],))
    else:
        cycles = [(a,) for a in ids]
    path = Collection("seq", tuple(Atom(a) for a in ids))
    return Symmetry(path, tuple(cycles))


def _pick_branch(weights: list, rng) -> int:
    total = sum(weights)
    if not total > 0.0 or not math.isfinite(total):
        raise AdmissibilityError("block sampler called with no admissible branch")
    u = rng.random() * total
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            return i
    return len(weights) - 1


class CactiBlocks:
    """Derived cactus blocks: a polygon or edge with one vertex deleted."""

    name = "Bd"
    pointed = False

    def cis(self, trunc: int) -> zx.CycleIndexSeries:
        return cacti_b_series(trunc)[0]

    def float_value(self, s_at) -> float:
        return _cacti_bd_value(s_at)

    def boltzmann_sampler(self, s_at, rng, new_atom) -> Symmetry:
        s1, s2 = s_at(1), s_at(2)
        if s1 >= 1.0 or s2 >= 1.0:
            raise AdmissibilityError("cactus block sampler outside its disc")
        w_id = 0.5 * s1 / (1.0 - s1)
        w_ref = 0.5 * (s1 + s2) / (1.0 - s2)
        if _pick_branch([w_id, w_ref], rng) == 0:
            m = 1 + _draw_geom(s1, rng)
            reflected = False
        else:
            if rng.random() * (s1 + s2) < s1:
                m = 2 * _draw_geom(s2, rng) + 1
            else:
                m = 2 * (1 + _draw_geom(s2, rng))
            reflected = True
        ids = [new_atom() for _ in range(m)]
        return _path_symmetry(ids, reflected)


class CactiSymmetricBlocks:
    """Cycle-pointed cactus blocks whose marked cycle is symmetric."""

    name = "Bsym"
    pointed = True

    def cis(self, trunc: int) -> zx.PointedCycleIndexSeries:
        return cacti_b_series(trunc)[1]

    def float_pointed_value(self, s_at, t_at) -> float:
        return _cacti_bsym_value(s_at, t_at)

    def pointed_boltzmann_sampler(self, s_at, t_at, rng, new_atom) -> RootedCSymmetry:
        s1, s2, t2 = s_at(1), s_at(2), t_at(2)
        if s1 >= 1.0 or s2 >= 1.0:
            raise AdmissibilityError("cactus block sampler outside its disc")
        rots = _rotation_weights(
            s_at, t_at, lambda v: None if v >= 1.0 else 1.0 / (1.0 - v)
        )
        if rots is None:
            raise AdmissibilityError("cactus block sampler outside its disc")
        d2 = (1.0 - s2) ** 2
        branches = [w for _, w in rots]
        branches += [t2 * s1 / d2, 0.5 * t2 * s1 * s1 / d2, 0.5 * t2 / d2]
        pick = _pick_branch(branches, rng)
        if pick < len(rots):
            return self._rotated_polygon(rots[pick][0], s_at, rng, new_atom)
        kind = ("odd", "even_vertex", "even_edge")[pick - len(rots)]
        return self._reflected_polygon(kind, s2, rng, new_atom)

    def _rotated_polygon(self, r, s_at, rng, new_atom) -> RootedCSymmetry:
        m = 1 + _draw_geom(s_at(r), rng)
        n = r * m
        ids = [new_atom() for _ in range(n)]
        units = [u for u in range(1, r) if math.gcd(u, r) == 1]
        step = units[rng.randrange(len(units))] * m
        cycles = tuple(
            tuple(ids[(j + t * step) % n] for t in range(r)) for j in range(m)
        )
        poly = Collection("cyc", tuple(Atom(a) for a in ids))
        return RootedCSymmetry(Symmetry(poly, cycles), 0, ids[0])

    def _reflected_polygon(self, kind, s2, rng, new_atom) -> RootedCSymmetry:
        if kind == "odd":
            pairs = 1 + _geom_pair(s2, rng)
            n = 2 * pairs + 1
            fixed = [0]
        elif kind == "even_vertex":
            pairs = 1 + _geom_pair(s2, rng)
            n = 2 * pairs + 2
            fixed = [0, n // 2]
        else:
            pairs = 1 + _geom_pair(s2, rng)
            n = 2 * pairs
            fixed = []
        ids = [new_atom() for _ in range(n)]
        cycles = [(ids[p],) for p in fixed]
        first_pair = len(cycles)
        if fixed:  # axis through vertex 0: i <-> n - i
            cycles += [(ids[i], ids[n - i]) for i in range(1, n // 2 + (n % 2))]
        else:  # axis through edge midpoints: i <-> n - 1 - i
            cycles += [(ids[i], ids[n - 1 - i]) for i in range(n // 2)]
        marked = first_pair + rng.randrange(len(cycles) - first_pair)
        poly = Collection("cyc", tuple(Atom(a) for a in ids))
        return RootedCSymmetry(Symmetry(poly, tuple(cycles)), marked, cycles[marked][0])


class CactiPointedBlocks:
    """Derived cactus blocks carrying a marked automorphism cycle."""

    name = "Bdo"
    pointed = True

    def cis(self, trunc: int) -> zx.PointedCycleIndexSeries:
        return cacti_b_series(trunc)[2]

    def float_pointed_value(self, s_at, t_at) -> float:
        return _cacti_bdo_value(s_at, t_at)

    def pointed_boltzmann_sampler(self, s_at, t_at, rng, new_atom) -> RootedCSymmetry:
        s1, s2 = s_at(1), s_at(2)
        if s1 >= 1.0 or s2 >= 1.0:
            raise AdmissibilityError("cactus block sampler outside its disc")
        t1, t2 = t_at(1), t_at(2)
        d1sq, d2 = (1.0 - s1) ** 2, 1.0 - s2
        branches = [
            0.5 * t1 / d1sq,  # identity path, marked vertex
            0.5 * t1 / d2,  # reflected odd path, marked middle
            t2 * s1 / (d2 * d2),  # reflected odd path, marked pair
            t2 / (d2 * d2),  # reflected even path, marked pair
        ]
        pick = _pick_branch(branches, rng)
        if pick == 0:
            m = 1 + _geom_pair(s1, rng)
            ids = [new_atom() for _ in range(m)]
            sym = _path_symmetry(ids, False)
            marked = rng.randrange(m)
        elif pick == 1:
            m = 2 * _draw_geom(s2, rng) + 1
            ids = [new_atom() for _ in range(m)]
            sym = _path_symmetry(ids, True)
            marked = len(sym.cycles) - 1  # the fixed middle vertex
        else:
            pairs = 1 + _geom_pair(s2, rng)
            m = 2 * pairs + 1 if pick == 2 else 2 * pairs
            ids = [new_atom() for _ in range(m)]
            sym = _path_symmetry(ids, True)
            marked = rng.randrange(pairs)
        return RootedCSymmetry(sym, marked, sym.cycles[marked][0])


# ---- outerplanar block series -----------------------------------------------
#
# Blocks of connected outerplanar graphs are edges and polygon dissections.
# All closed forms below derive from the series F of planted plane trees with
# no inner vertex of degree two, counted by leaves (the dual trees of edge-
# rooted dissections): F = x + F^2/(1 - F).


def _dissection_tree_coeffs(n_max: int) -> list:
    # F = x - xF + 2F^2 after clearing the denominator
    f = [0] * (n_max + 1)
    if n_max >= 1:
        f[1] = 1
    for n in range(2, n_max + 1):
        f[n] = -f[n - 1] + 2 * sum(f[k] * f[n - k] for k in range(1, n))
    return f


def _series_inverse_of(one_minus: list, n_max: int) -> list:
    # coefficients of 1 / (1 - sum_k one_minus[k] x^k), one_minus[0] == 0
    out = [Fraction(1)] + [_ZERO] * n_max
    for n in range(1, n_max + 1):
        out[n] = sum(one_minus[k] * out[n - k] for k in range(1, n + 1))
    return out


@lru_cache(maxsize=None)
def _outerplanar_univariates(n_max: int):
    f = [Fraction(v) for v in _dissection_tree_coeffs(n_max + 2)]
    fp = [Fraction(n + 1) * f[n + 1] for n in range(n_max + 1)]
    inv1 = _series_inverse_of(f, n_max)  # 1/(1-F)
    g = [
        sum(fp[k] * inv1[n - k] for k in range(n + 1)) for n in range(n_max + 1)
    ]  # G = F'/(1-F)
    inv2 = _series_inverse_of([2 * c for c in f], n_max + 1)  # 1/(1-2F)
    t = [
        sum(f[k] * inv2[n - k] for k in range(n + 1)) for n in range(n_max + 2)
    ]  # F/(1-2F)
    p = [t[n + 1] for n in range(n_max + 1)]
    q = [Fraction(n + 1) * p[n + 1] for n in range(n_max)] + [_ZERO]
    return tuple(f[: n_max + 1]), tuple(g), tuple(p), tuple(q)


@lru_cache(maxsize=None)
def outerplanar_b_series(trunc: int):
    """Block series of outerplanar graphs: (derived, symmetric pointed, derived pointed)."""
    N = trunc
    f, g, p, q = _outerplanar_univariates(N + 2)
    # derived blocks: (1/2)(F(s1) + (s1 + s2) P(s2))
    terms: dict = {}
    for n in range(1, N + 1):
        _bump(terms, ((1, n),), None, f[n] / 2)
    for n in range(0, N // 2 + 1):
        if 1 + 2 * n <= N:
            _bump(terms, ((1, 1), (2, n)) if n else ((1, 1),), None, p[n] / 2)
        if 2 * n + 2 <= N:
            _bump(terms, ((2, n + 1),), None, p[n] / 2)
    bd = zx.CycleIndexSeries(N, terms)

    # symmetric pointed blocks:
    #   (1/2) sum_{r>=2} phi(r) t_r G(s_r)
    # + (t2/2)(1 + s1^2 Q(s2) + 2 s1 R(s2) + S(s2))
    # with Q = P', R = (x P)', S = (x^2 P)'
    terms = {}
    for r in range(2, N + 1):
        w = Fraction(zx.phi(r), 2)
        m = 0
        while r + r * m <= N:
            _bump(terms, ((r, m),) if m else (), r, w * g[m])
            m += 1
    if N >= 2:
        _bump(terms, (), 2, _HALF)
    for n in range(0, N // 2 + 1):
        if 4 + 2 * n <= N:
            _bump(terms, ((1, 2), (2, n)) if n else ((1, 2),), 2, q[n] / 2)
        rn = Fraction(n + 1) * p[n]  # R = sum (n+1) p_n x^n
        if 3 + 2 * n <= N and rn:
            _bump(terms, ((1, 1), (2, n)) if n else ((1, 1),), 2, rn)
        if n >= 1 and 2 + 2 * n <= N:
            sn = Fraction(n + 1) * p[n - 1]  # S = sum (n+1) p_{n-1} x^n
            _bump(terms, ((2, n),), 2, sn / 2)
    bsym = zx.PointedCycleIndexSeries(N, terms)

    bdo = zx.delta_point(bd, 1)
    return bd, bsym, bdo


_OP_RADIUS = 3.0 - 2.0 * math.sqrt(2.0)


def _op_univals(y: float) -> Optional[tuple]:
    """Float values (F, F', G, P, P') of the dissection series at y."""
    if y == 0.0:
        return 0.0, 1.0, 1.0, 1.0, 3.0
    disc = y * y - 6.0 * y + 1.0
    if y < 0.0 or y >= _OP_RADIUS or disc <= 0.0:
        return None
    # conjugate forms: every denominator stays away from 0 on [0, radius)
    root = math.sqrt(disc)
    fv = 2.0 * y / (1.0 + y + root)
    fpv = (root - y + 3.0) / (4.0 * root)
    gv = fpv * (1.0 + y + root) / (1.0 - y + root)
    den = 1.0 - 3.0 * y + root
    pv = 2.0 / den
    ppv = 2.0 * (3.0 * root - y + 3.0) / (root * den * den)
    return fv, fpv, gv, pv, ppv


def _op_bd_value(s_at) -> float:
    v1 = _op_univals(s_at(1))
    v2 = _op_univals(s_at(2))
    if v1 is None or v2 is None:
        return _BIG
    return 0.5 * (v1[0] + (s_at(1) + s_at(2)) * v2[3])


def _op_bsym_value(s_at, t_at) -> float:
    rots = _rotation_weights(
        s_at, t_at, lambda v: None if _op_univals(v) is None else _op_univals(v)[2]
    )
    if rots is None:
        return _BIG
    s1, s2 = s_at(1), s_at(2)
    v2 = _op_univals(s2)
    if v2 is None or s1 >= 1.0:
        return _BIG
    pv, ppv = v2[3], v2[4]
    qv = ppv
    rv = pv + s2 * ppv
    sv = 2.0 * s2 * pv + s2 * s2 * ppv
    refl = 0.5 * t_at(2) * (1.0 + s1 * s1 * qv + 2.0 * s1 * rv + sv)
    return sum(w for _, w in rots) + refl


def _op_bdo_value(s_at, t_at) -> float:
    v1 = _op_univals(s_at(1))
    v2 = _op_univals(s_at(2))
    if v1 is None or v2 is None:
        return _BIG
    s1, s2 = s_at(1), s_at(2)
    pv, ppv = v2[3], v2[4]
    return 0.5 * t_at(1) * (v1[1] + pv) + t_at(2) * (pv + (s1 + s2) * ppv)


class OuterplanarBlocks:
    """Derived outerplanar blocks: a dissection with one vertex deleted."""

    name = "Bd"
    pointed = False

    def cis(self, trunc: int) -> zx.CycleIndexSeries:
        return outerplanar_b_series(trunc)[0]

    def float_value(self, s_at) -> float:
        return _op_bd_value(s_at)


class OuterplanarSymmetricBlocks:
    """Cycle-pointed outerplanar blocks whose marked cycle is symmetric."""

    name = "Bsym"
    pointed = True

    def cis(self, trunc: int) -> zx.PointedCycleIndexSeries:
        return outerplanar_b_series(trunc)[1]

    def float_pointed_value(self, s_at, t_at) -> float:
        return _op_bsym_value(s_at, t_at)


class OuterplanarPointedBlocks:
    """Derived outerplanar blocks carrying a marked automorphism cycle."""

    name = "Bdo"
    pointed = True

    def cis(self, trunc: int) -> zx.PointedCycleIndexSeries:
        return outerplanar_b_series(trunc)[2]

    def float_pointed_value(self, s_at, t_at) -> float:
        return _op_bdo_value(s_at, t_at)


# ---- canonical forms --------------------------------------------------------


def _strip(s: Structure) -> Structure:
    while isinstance(s, Tagged):
        s = s.child
    return s


def _pair_sides(s: Pair):
    """Split a vertex shape into (atom id, branch collection)."""
    left, right = _strip(s.left), _strip(s.right)
    if isinstance(left, Atom):
        return left.id, right
    if isinstance(right, Atom):
        return right.id, left
    raise UsageError("malformed structure: pair without a vertex atom")


def _tree_adjacency(s: Structure) -> dict:
    """Adjacency map of a tree encoded as nested vertex/branch shapes."""
    adj: dict = {}

    def walk(node, parent):
        node = _strip(node)
        if isinstance(node, Atom):
            adj.setdefault(node.id, [])
            if parent is not None:
                adj[parent].append(node.id)
                adj[node.id].append(parent)
            return node.id
        if isinstance(node, Pair):
            v, branches = _pair_sides(node)
            adj.setdefault(v, [])
            if parent is not None:
                adj[parent].append(v)
                adj[v].append(parent)
            if not isinstance(branches, Collection):
                raise UsageError("malformed structure: branches are not a collection")
            for c in branches.children:
                walk(c, v)
            return v
        if isinstance(node, Collection):
            roots = [walk(c, parent) for c in node.children]
            return roots[0] if roots else None
        raise UsageError(f"malformed structure node {node!r}")

    top = _strip(s)
    if isinstance(top, Collection) and len(top.children) == 2:
        a = walk(top.children[0], None)
        b = walk(top.children[1], None)
        adj[a].append(b)
        adj[b].append(a)
    else:
        walk(top, None)
    return adj


def _tree_centers(adj: dict) -> list:
    if len(adj) == 1:
        return list(adj)
    degree = {v: len(ns) for v, ns in adj.items()}
    layer = [v for v, d in degree.items() if d <= 1]
    remaining = len(adj)
    while remaining > 2:
        remaining -= len(layer)
        nxt = []
        for v in layer:
            degree[v] = 0
            for w in adj[v]:
                if degree[w] > 1:
                    degree[w] -= 1
                    if degree[w] == 1:
                        nxt.append(w)
        layer = nxt
    return layer


def _ahu_code(adj: dict, root, parent) -> str:
    """Sorted-subtree code of the tree hanging from root, away from parent."""
    order = [(root, parent)]
    children: dict = {}
    i = 0
    while i < len(order):
        v, par = order[i]
        i += 1
        kids = [w for w in adj[v] if w != par]
        children[v] = kids
        order.extend((w, v) for w in kids)
    code: dict = {}
    for v, _par in reversed(order):
        code[v] = "(" + "".join(sorted(code[w] for w in children[v])) + ")"
    return code[root]


def _canon_rooted_tree(s: Structure) -> str:
    top = _strip(s)
    if not isinstance(top, Pair):
        raise UsageError("malformed structure: rooted tree must be a vertex shape")
    root, _ = _pair_sides(top)
    adj = _tree_adjacency(top)
    return "R" + _ahu_code(adj, root, None)


def _canon_free_tree(s: Structure) -> str:
    adj = _tree_adjacency(s)
    centers = _tree_centers(adj)
    if len(centers) == 1:
        return "C" + _ahu_code(adj, centers[0], None)
    a, b = centers
    ca = _ahu_code(adj, a, b)
    cb = _ahu_code(adj, b, a)
    return "E" + min(ca + cb, cb + ca)


def _plane_embedding(s: Structure, leaves: bool):
    """Cyclic neighbor lists of a plane tree.

    With leaves=False every tree node is a vertex shape (an atom paired with
    its ordered branches).  With leaves=True atoms sit at leaves only; inner
    nodes are bare ordered collections and get synthesized vertex keys.
    """
    emb: dict = {}
    counter = iter(range(1 << 60))

    def walk(node, parent):
        node = _strip(node)
        if isinstance(node, Atom):
            key = ("a", node.id)
            emb[key] = [parent] if parent is not None else []
            return key
        if isinstance(node, Pair) and not leaves:
            v, branches = _pair_sides(node)
            key = ("a", v)
            if not isinstance(branches, Collection):
                raise UsageError("malformed structure: branches are not a collection")
            kids = branches.children
        elif isinstance(node, Collection):
            key = ("i", next(counter))
            kids = node.children
        else:
            raise UsageError(f"malformed structure node {node!r}")
        lst = [parent] if parent is not None else []
        emb[key] = lst
        for c in kids:
            lst.append(walk(c, key))
        return key

    def join(sa, sb):
        a = walk(sa, None)
        b = walk(sb, None)
        emb[a].insert(0, b)
        emb[b].insert(0, a)

    top = _strip(s)
    if isinstance(top, Collection) and top.kind == "set":
        if len(top.children) != 2:
            raise UsageError("malformed structure: edge shape needs two sides")
        join(top.children[0], top.children[1])
    elif leaves and isinstance(top, Pair):
        join(top.left, top.right)
    else:
        walk(top, None)
    return emb


def _canon_plane_tree(s: Structure, leaves: bool = False) -> str:
    emb = _plane_embedding(s, leaves)
    adj = {v: list(ns) for v, ns in emb.items()}

    def planted(v, parent) -> str:
        ns = emb[v]
        i = ns.index(parent)
        around = ns[i + 1 :] + ns[:i]
        return "(" + "".join(planted(w, v) for w in around) + ")"

    centers = _tree_centers(adj)
    if len(centers) == 1:
        c = centers[0]
        ns = emb[c]
        if not ns:
            return "C()"
        rots = [
            "".join(planted(w, c) for w in ns[i:] + ns[:i]) for i in range(len(ns))
        ]
        return "C(" + min(rots) + ")"
    a, b = centers
    ca = planted(a, b)
    cb = planted(b, a)
    return "E" + min(ca + cb, cb + ca)


# -- graph families: edge extraction, blocks, block-vertex tree codes


def _graph_edges(s: Structure):
    """Vertex and undirected edge sets of a block-decomposed graph shape."""
    verts: set = set()
    edges: set = set()

    def add_ring(ring):
        for i, a in enumerate(ring):
            b = ring[(i + 1) % len(ring)]
            if a == b:
                raise UsageError("malformed structure: self-loop in a block")
            edges.add(frozenset((a, b)))

    def walk_vertex(node) -> int:
        node = _strip(node)
        if not isinstance(node, Pair):
            raise UsageError("malformed structure: expected a vertex shape")
        v, blocks = _pair_sides(node)
        verts.add(v)
        if not (isinstance(blocks, Collection) and blocks.kind == "set"):
            raise UsageError("malformed structure: blocks are not a set")
        for blk in blocks.children:
            blk = _strip(blk)
            if not (isinstance(blk, Collection) and blk.kind == "seq"):
                raise UsageError("malformed structure: block is not an open polygon")
            ring = [v] + [walk_vertex(c) for c in blk.children]
            add_ring(ring)
        return v

    top = _strip(s)
    if isinstance(top, Pair):
        walk_vertex(top)
    elif isinstance(top, Collection) and top.kind == "cyc":
        add_ring([walk_vertex(c) for c in top.children])
    elif isinstance(top, Collection) and top.kind == "set":
        # explicit edge list: children are two-atom sequences or lone atoms
        for child in top.children:
            child = _strip(child)
            if isinstance(child, Atom):
                verts.add(child.id)
                continue
            if (
                isinstance(child, Collection)
                and child.kind == "seq"
                and len(child.children) == 2
            ):
                a, b = (_strip(c) for c in child.children)
                if isinstance(a, Atom) and isinstance(b, Atom) and a.id != b.id:
                    verts.update((a.id, b.id))
                    edges.add(frozenset((a.id, b.id)))
                    continue
            raise UsageError("malformed structure: bad edge-list entry")
    else:
        raise UsageError("malformed structure: not a graph shape")
    return verts, edges


def graph_structure(edges: Iterable, isolated: Iterable = ()) -> Structure:
    """Encode an explicit undirected graph as a structure for canonical_form."""
    children = [Collection("seq", (Atom(a), Atom(b))) for a, b in edges]
    children += [Atom(v) for v in isolated]
    return Collection("set", tuple(children))


def _check_connected(verts: set, adj: dict) -> None:
    if not verts:
        raise UsageError("empty structure has no canonical form")
    seen = set()
    stack = [next(iter(verts))]
    while stack:
        v = stack.pop()
        if v in seen:
            continue
        seen.add(v)
        stack.extend(adj.get(v, ()))
    if seen != verts:
        raise UsageError("structure is not connected")


def _biconnected_blocks(verts: set, edges: set) -> list:
    """Blocks as lists of edges, via depth-first search with an edge stack."""
    adj: dict = {v: [] for v in verts}
    for e in edges:
        a, b = tuple(e)
        adj[a].append(b)
        adj[b].append(a)
    _check_connected(verts, adj)
    disc: dict = {}
    low: dict = {}
    blocks: list = []
    estack: list = []
    clock = iter(range(1, len(verts) + 1))
    root = min(verts)
    stack = [(root, None, iter(adj[root]))]
    disc[root] = low[root] = next(clock)
    while stack:
        v, parent, it = stack[-1]
        w = next(it, None)
        if w is None:
            stack.pop()
            if stack:
                u = stack[-1][0]
                low[u] = min(low[u], low[v])
                if low[v] >= disc[u]:
                    block = []
                    tree_edge = frozenset((u, v))
                    while True:
                        e = estack.pop()
                        block.append(e)
                        if e == tree_edge:
                            break
                    blocks.append(block)
            continue
        if w == parent:
            continue
        if w in disc:
            if disc[w] < disc[v]:  # back edge, recorded once from below
                estack.append(frozenset((v, w)))
                low[v] = min(low[v], disc[w])
            continue
        estack.append(frozenset((v, w)))
        disc[w] = low[w] = next(clock)
        stack.append((w, v, iter(adj[w])))
    return blocks


def _outer_ring(bverts: list, bedges: set) -> list:
    """The unique closing cycle of a polygon dissection block, by ear peeling."""
    adj = {v: set() for v in bverts}
    for e in bedges:
        a, b = tuple(e)
        adj[a].add(b)
        adj[b].add(a)
    peeled = []
    alive = set(bverts)
    while len(alive) > 3:
        ear = next((v for v in alive if len(adj[v]) == 2), None)
        if ear is None:
            raise UsageError("malformed structure: block is not a dissection")
        u, w = tuple(adj[ear])
        for x in (u, w):
            adj[x].discard(ear)
        adj[u].add(w)
        adj[w].add(u)
        del adj[ear]
        alive.discard(ear)
        peeled.append((ear, u, w))
    if any(len(adj[v]) != 2 for v in alive):
        raise UsageError("malformed structure: block is not a dissection")
    a = next(iter(alive))
    ring = [a]
    prev = None
    while True:
        nxt = next(x for x in adj[ring[-1]] if x != prev)
        if nxt == a:
            break
        prev = ring[-1]
        ring.append(nxt)
    for ear, u, w in reversed(peeled):
        i = ring.index(u)
        if ring[(i + 1) % len(ring)] == w:
            ring.insert(i + 1, ear)
        elif ring[i - 1] == w:
            ring.insert(i, ear)
        else:
            raise UsageError("malformed structure: block is not a dissection")
    return ring


def _ring_candidates(k: int, anchor_pos: Optional[int]):
    """Position maps of the dihedral symmetries, fixing the anchor if any."""
    if anchor_pos is None:
        starts = range(k)
    else:
        starts = (anchor_pos,)
    for a in starts:
        yield lambda i, a=a: (i - a) % k
        yield lambda i, a=a: (a - i) % k


def _block_code(bedges: list, anchor, vcode) -> str:
    bverts = sorted({v for e in bedges for v in e})
    if len(bedges) == 1:
        (e,) = bedges
        others = [v for v in e if v != anchor]
        if anchor is not None and len(others) == 1:
            return "e(" + vcode(others[0]) + ")"
        ca, cb = (vcode(v) for v in e)
        return "e(" + min(ca + cb, cb + ca) + ")"
    ring = _outer_ring(bverts, set(bedges))
    k = len(ring)
    pos = {v: i for i, v in enumerate(ring)}
    ring_edges = {frozenset((ring[i], ring[(i + 1) % k])) for i in range(k)}
    chords = [e for e in bedges if e not in ring_edges]
    if len(ring_edges) + len(chords) != len(bedges):
        raise UsageError("malformed structure: block is not a dissection")
    codes = {v: vcode(v) if v != anchor else "@" for v in ring}
    best = None
    anchor_pos = pos[anchor] if anchor is not None else None
    for remap in _ring_candidates(k, anchor_pos):
        slots = [None] * k
        for v, i in pos.items():
            slots[remap(i)] = codes[v]
        cpairs = sorted(
            tuple(sorted((remap(pos[a]), remap(pos[b])))) for a, b in map(tuple, chords)
        )
        cand = "|".join(slots) + ";" + ",".join(f"{a}-{b}" for a, b in cpairs)
        if best is None or cand < best:
            best = cand
    return "p(" + best + ")"


def _canon_block_graph(s: Structure) -> str:
    verts, edges = _graph_edges(s)
    if len(verts) == 1:
        return "G:v()"
    blocks = _biconnected_blocks(verts, edges)
    blocks_at: dict = {v: [] for v in verts}
    for i, blk in enumerate(blocks):
        for v in {x for e in blk for x in e}:
            blocks_at[v].append(i)
    # block-vertex incidence tree
    tadj: dict = {}
    for v in verts:
        tadj[("v", v)] = [("b", i) for i in blocks_at[v]]
    for i, blk in enumerate(blocks):
        tadj[("b", i)] = [("v", x) for x in {x for e in blk for x in e}]

    def vertex_code(v, parent_block) -> str:
        parts = sorted(
            block_code(i, v) for i in blocks_at[v] if i != parent_block
        )
        return "v(" + "".join(parts) + ")"

    def block_code(i, parent_vertex) -> str:
        return _block_code(
            blocks[i], parent_vertex, lambda u: vertex_code(u, i)
        )

    centers = _tree_centers(tadj)
    if len(centers) == 2:  # mixed pair; root deterministically at the block
        centers = [c for c in centers if c[0] == "b"]
    kind, which = centers[0]
    if kind == "v":
        return "G:" + vertex_code(which, None)
    return "G:" + _block_code(blocks[which], None, lambda u: vertex_code(u, which))


_CANONICALIZERS = {
    "rooted": _canon_rooted_tree,
    "tree": _canon_free_tree,
    "plane": lambda s: _canon_plane_tree(s, False),
    "plane_leaf": lambda s: _canon_plane_tree(s, True),
    "graph": _canon_block_graph,
}

_CANON_KIND_BY_FAMILY = {
    "rooted_trees": "rooted",
    "free_trees": "tree",
    "omega_trees": "tree",
    "plane_trees": "plane",
    "omega_plane_trees": "plane",
    "d_regular_plane_trees": "plane_leaf",
    "cacti": "graph",
    "outerplanar": "graph",
}


def canonical_form(s, family) -> str:
    """Label-independent code of a sampled structure of the given family."""
    if isinstance(family, FamilySpec):
        kind = family.canon_kind
    elif isinstance(family, str):
        if family not in _CANON_KIND_BY_FAMILY:
            raise UsageError(f"unknown family {family!r}")
        kind = _CANON_KIND_BY_FAMILY[family]
    else:
        raise UsageError("family must be a FamilySpec or a family name")
    if isinstance(s, RootedCSymmetry):
        s = s.symmetry.structure
    elif isinstance(s, Symmetry):
        s = s.structure
    limit = sys.getrecursionlimit()
    try:
        sys.setrecursionlimit(max(limit, 20000))
        resolved = resolve_substitutions(s)
        return _CANONICALIZERS[kind](resolved)
    finally:
        sys.setrecursionlimit(limit)


# ---- family registry --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FamilySpec:
    """A grammar bundled with counting, sampling and canonization conventions."""

    name: str
    summary: str
    vg: gr.ValidatedGrammar
    count_query: Union[str, gr.UnpointQuery]
    sample_query: Union[str, gr.UnpointQuery, None]
    pointed_var: Optional[str]
    samplable: bool
    size_unit: str
    singularity_kind: str
    canon_kind: str
    internal_to_size: Optional[Callable[[int], int]] = None


NOT_SAMPLABLE_MSG = (
    "family {name!r} supports counting only: its block samplers are not wired"
)

_SQRT_POINTED = "square-root branch point; counts grow like c * n^(-5/2) * rho^(-n)"
_SQRT_ROOTED = "square-root branch point; counts grow like c * n^(-3/2) * rho^(-n)"


def _two_degree_rule(omega: tuple) -> Optional[Callable[[int], int]]:
    if len(omega) == 2 and omega[0] == 1:
        d = omega[1]
        return lambda i: i * (d - 1) + 2
    return None


def _validated(
    text: str, terminals: Iterable = (), probe_degree: Optional[int] = None
) -> gr.ValidatedGrammar:
    g = gr.parse(text)
    terminals = list(terminals)
    if terminals:
        g = g.attach_terminals(terminals)
    if probe_degree is None:
        return gr.validate(g)
    return gr.validate(g, probe_degree=probe_degree)


def _normalize_omega(omega) -> tuple:
    if omega is None:
        raise UsageError("this family needs a set of allowed degrees (omega)")
    try:
        vals = sorted({int(w) for w in omega})
    except TypeError:
        raise UsageError("omega must be an iterable of positive integers") from None
    if not vals:
        raise UsageError("omega must not be empty")
    if any(w < 1 for w in vals):
        raise UsageError("omega must contain positive degrees only")
    if 1 not in vals:
        raise UsageError(f"1 ∉ Ω: leaves are required, got {vals}")
    return tuple(vals)


_FAMILY_CACHE: dict = {}


def family(name: str, *, omega=None, d=None) -> FamilySpec:
    """Look up a family by name, building and validating its grammar once."""
    if name in ("omega_trees", "omega_plane_trees"):
        omega_t = _normalize_omega(omega)
        if d is not None:
            raise UsageError(f"family {name!r} does not take a branching degree d")
        key = (name, omega_t, None)
    elif name == "d_regular_plane_trees":
        if omega is not None:
            raise UsageError(f"family {name!r} does not take a degree set")
        if d is None:
            raise UsageError("d_regular_plane_trees needs a branching degree d")
        d = int(d)
        if d < 3:
            raise UsageError(f"branching degree must be at least 3, got {d}")
        key = (name, None, d)
    elif name in _SIMPLE_BUILDERS:
        if omega is not None or d is not None:
            raise UsageError(f"family {name!r} takes no parameters")
        key = (name, None, None)
    else:
        raise UsageError(f"unknown family {name!r}")
    if key not in _FAMILY_CACHE:
        if name == "omega_trees":
            _FAMILY_CACHE[key] = _build_omega_trees(omega_t)
        elif name == "omega_plane_trees":
            _FAMILY_CACHE[key] = _build_omega_plane_trees(omega_t)
        elif name == "d_regular_plane_trees":
            _FAMILY_CACHE[key] = _build_d_regular(d)
        else:
            _FAMILY_CACHE[key] = _SIMPLE_BUILDERS[name]()
    return _FAMILY_CACHE[key]


def _build_rooted() -> FamilySpec:
    return FamilySpec(
        name="rooted_trees",
        summary="rooted trees, counted by vertices",
        vg=_validated(ROOTED_TREE_TEXT),
        count_query="R",
        sample_query="R",
        pointed_var=None,
        samplable=True,
        size_unit="vertices",
        singularity_kind=_SQRT_ROOTED,
        canon_kind="rooted",
    )


def _build_free() -> FamilySpec:
    vg = _validated(FREE_TREE_TEXT)
    return FamilySpec(
        name="free_trees",
        summary="free (unrooted) trees, counted by vertices",
        vg=vg,
        count_query=gr.unpoint(vg, "Fo"),
        sample_query=gr.unpoint(vg, "Fo"),
        pointed_var="Fo",
        samplable=True,
        size_unit="vertices",
        singularity_kind=_SQRT_POINTED,
        canon_kind="tree",
    )


def _build_plane() -> FamilySpec:
    vg = _validated(PLANE_TREE_TEXT)
    return FamilySpec(
        name="plane_trees",
        summary="plane (embedded, unrooted) trees, counted by vertices",
        vg=vg,
        count_query=gr.unpoint(vg, "Eo"),
        sample_query=gr.unpoint(vg, "Eo"),
        pointed_var="Eo",
        samplable=True,
        size_unit="vertices",
        singularity_kind=_SQRT_POINTED,
        canon_kind="plane",
    )


def _build_omega_trees(omega: tuple) -> FamilySpec:
    vg = _validated(omega_tree_text(omega))
    label = "{" + ",".join(map(str, omega)) + "}"
    return FamilySpec(
        name="omega_trees",
        summary=f"free trees with all degrees in {label}, counted by vertices",
        vg=vg,
        count_query=gr.unpoint(vg, "Fo"),
        sample_query=gr.unpoint(vg, "Fo"),
        pointed_var="Fo",
        samplable=True,
        size_unit="vertices",
        singularity_kind=_SQRT_POINTED,
        canon_kind="tree",
        internal_to_size=_two_degree_rule(omega),
    )


def _build_omega_plane_trees(omega: tuple) -> FamilySpec:
    vg = _validated(omega_plane_tree_text(omega))
    label = "{" + ",".join(map(str, omega)) + "}"
    return FamilySpec(
        name="omega_plane_trees",
        summary=f"plane trees with all degrees in {label}, counted by vertices",
        vg=vg,
        count_query=gr.unpoint(vg, "Eo"),
        sample_query=gr.unpoint(vg, "Eo"),
        pointed_var="Eo",
        samplable=True,
        size_unit="vertices",
        singularity_kind=_SQRT_POINTED,
        canon_kind="plane",
        internal_to_size=_two_degree_rule(omega),
    )


def _build_d_regular(d: int) -> FamilySpec:
    vg = _validated(d_regular_plane_tree_text(d))
    return FamilySpec(
        name="d_regular_plane_trees",
        summary=f"plane trees whose inner vertices all have degree {d}, counted by leaves",
        vg=vg,
        count_query=gr.unpoint(vg, "Eo"),
        sample_query=gr.unpoint(vg, "Eo"),
        pointed_var="Eo",
        samplable=True,
        size_unit="leaves",
        singularity_kind=_SQRT_POINTED,
        canon_kind="plane_leaf",
        internal_to_size=lambda i, d=d: i * (d - 2) + 2,
    )


def _build_cacti() -> FamilySpec:
    vg = _validated(
        BLOCK_GRAPH_TEXT,
        [CactiBlocks(), CactiSymmetricBlocks(), CactiPointedBlocks()],
        probe_degree=12,
    )
    return FamilySpec(
        name="cacti",
        summary="connected cacti (every edge on at most one cycle), counted by vertices",
        vg=vg,
        count_query=gr.unpoint(vg, "Go"),
        sample_query=gr.unpoint(vg, "Go"),
        pointed_var="Go",
        samplable=True,
        size_unit="vertices",
        singularity_kind=_SQRT_POINTED,
        canon_kind="graph",
    )


def _build_outerplanar() -> FamilySpec:
    vg = _validated(
        BLOCK_GRAPH_TEXT,
        [OuterplanarBlocks(), OuterplanarSymmetricBlocks(), OuterplanarPointedBlocks()],
        probe_degree=12,
    )
    return FamilySpec(
        name="outerplanar",
        summary="connected outerplanar graphs, counted by vertices",
        vg=vg,
        count_query=gr.unpoint(vg, "Go"),
        sample_query=None,
        pointed_var="Go",
        samplable=False,
        size_unit="vertices",
        singularity_kind=_SQRT_POINTED,
        canon_kind="graph",
    )


_SIMPLE_BUILDERS = {
    "rooted_trees": _build_rooted,
    "free_trees": _build_free,
    "plane_trees": _build_plane,
    "cacti": _build_cacti,
    "outerplanar": _build_outerplanar,
}

FAMILY_NAMES = (
    "rooted_trees",
    "free_trees",
    "omega_trees",
    "plane_trees",
    "omega_plane_trees",
    "d_regular_plane_trees",
    "cacti",
    "outerplanar",
)

FAMILY_PARAMS = {
    "omega_trees": "omega",
    "omega_plane_trees": "omega",
    "d_regular_plane_trees": "d",
}
