"""Exact truncated algebra for cycle index sums and their pointed variants.

A series is a finite sum of monomials ``coeff * prod_i s_i^{e_i}`` with an
optional pointing factor ``t_l``, graded by the weighted degree
``sum_i i*e_i (+ l)`` and truncated at a fixed weight.  All coefficients are
exact rationals.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Mapping, Union

from .errors import AdmissibilityError, InternalConsistencyError, UsageError

SKey = tuple[tuple[int, int], ...]
TermKey = tuple[SKey, Union[int, None]]
TermMap = dict[TermKey, Fraction]

_ZERO = Fraction(0)
_ONE = Fraction(1)
_EMPTY_KEY: TermKey = ((), None)


def phi(n: int) -> int:
    """Euler totient."""
    if n <= 0:
        raise UsageError(f"phi requires n >= 1, got {n}")
    result = n
    m = n
    p = 2
    while p * p <= m:
        if m % p == 0:
            while m % p == 0:
                m //= p
            result -= result // p
        p += 1 if p == 2 else 2
    if m > 1:
        result -= result // m
    return result


def divisors(n: int) -> list[int]:
    """Divisors of n in increasing order."""
    if n <= 0:
        raise UsageError(f"divisors requires n >= 1, got {n}")
    small: list[int] = []
    large: list[int] = []
    d = 1
    while d * d <= n:
        if n % d == 0:
            small.append(d)
            if d * d != n:
                large.append(n // d)
        d += 1
    large.reverse()
    return small + large


def _skey_weight(skey: SKey) -> int:
    return sum(i * e for i, e in skey)


def _key_weight(key: TermKey) -> int:
    skey, t = key
    return _skey_weight(skey) + (t or 0)


def _merge_skeys(a: SKey, b: SKey) -> SKey:
    if not a:
        return b
    if not b:
        return a
    acc = dict(a)
    for i, e in b:
        acc[i] = acc.get(i, 0) + e
    return tuple(sorted(acc.items()))


@dataclass(frozen=True)
class Monomial:
    """One term coeff * prod s_i^{e_i} * [t_l], with exponents stored sparsely."""

    s_exps: SKey
    t_index: int | None
    coeff: Fraction

    @property
    def weight(self) -> int:
        return _skey_weight(self.s_exps) + (self.t_index or 0)


def _normalize_skey(raw) -> SKey:
    if isinstance(raw, Mapping):
        items = raw.items()
    else:
        items = tuple(raw)
    out = {}
    for i, e in items:
        if i < 1:
            raise UsageError(f"s-variable index must be >= 1, got s{i}")
        if e == 0:
            continue
        if e < 0:
            raise UsageError(f"negative exponent on s{i}")
        out[i] = out.get(i, 0) + e
    return tuple(sorted(out.items()))


class _SeriesBase:
    __slots__ = ("trunc", "terms")

    pointed = False

    def __init__(self, trunc: int, terms=None):
        if trunc < 0:
            raise UsageError(f"truncation must be >= 0, got {trunc}")
        clean: TermMap = {}
        if terms:
            if isinstance(terms, Mapping):
                items = [(k, v) for k, v in terms.items()]
            else:
                items = [((m.s_exps, m.t_index), m.coeff) for m in terms]
            for (raw_skey, t), c in items:
                c = Fraction(c)
                if c == 0:
                    continue
                if self.pointed:
                    if t is None or t < 1:
                        raise UsageError("pointed series needs one t factor per monomial")
                elif t is not None:
                    raise UsageError("unpointed series cannot carry t factors")
                key = (_normalize_skey(raw_skey), t)
                if _key_weight(key) > trunc:
                    continue
                nc = clean.get(key, _ZERO) + c
                if nc:
                    clean[key] = nc
                elif key in clean:
                    del clean[key]
        self.trunc = trunc
        self.terms = clean

    @classmethod
    def _raw(cls, trunc: int, terms: TermMap):
        obj = cls.__new__(cls)
        obj.trunc = trunc
        obj.terms = terms
        return obj

    def __eq__(self, other) -> bool:
        return (
            type(self) is type(other)
            and self.trunc == other.trunc
            and self.terms == other.terms
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"{type(self).__name__}(trunc={self.trunc}, n_terms={len(self.terms)})"

    def is_zero(self) -> bool:
        return not self.terms

    def constant_term(self) -> Fraction:
        return self.terms.get(_EMPTY_KEY, _ZERO)

    def coefficient(self, s_exps=(), t_index: int | None = None) -> Fraction:
        key = (_normalize_skey(s_exps), t_index)
        return self.terms.get(key, _ZERO)

    def monomials(self) -> Iterator[Monomial]:
        for key in sorted(self.terms, key=lambda k: (_key_weight(k), k[0], k[1] or 0)):
            yield Monomial(key[0], key[1], self.terms[key])

    def __add__(self, other):
        return series_add(self, other)

    def __mul__(self, other):
        if isinstance(other, _SeriesBase):
            return series_mul(self, other)
        return series_scale(self, other)

    def __rmul__(self, other):
        return series_scale(self, other)


class CycleIndexSeries(_SeriesBase):
    """Truncated cycle index sum in the variables s_1, s_2, ..."""

    pointed = False


class PointedCycleIndexSeries(_SeriesBase):
    """Truncated pointed cycle index sum; each monomial carries exactly one t_l."""

    pointed = True


@dataclass(frozen=True)
class Ogs:
    """Ordinary generating series as exact coefficients for x^0 .. x^trunc."""

    trunc: int
    coeffs: tuple[int, ...]

    def __post_init__(self):
        if len(self.coeffs) != self.trunc + 1:
            raise UsageError("Ogs needs exactly trunc+1 coefficients")

    def coefficient(self, n: int) -> int:
        if n < 0 or n > self.trunc:
            raise UsageError(f"coefficient index {n} outside 0..{self.trunc}")
        return self.coeffs[n]


Series = Union[CycleIndexSeries, PointedCycleIndexSeries]


def series_add(f: Series, g: Series) -> Series:
    if type(f) is not type(g):
        raise UsageError("series_add requires two series of the same kind")
    if f.trunc != g.trunc:
        raise UsageError(f"truncation mismatch: {f.trunc} vs {g.trunc}")
    out = dict(f.terms)
    for key, c in g.terms.items():
        nc = out.get(key, _ZERO) + c
        if nc:
            out[key] = nc
        elif key in out:
            del out[key]
    return type(f)._raw(f.trunc, out)


def series_scale(f: Series, c) -> Series:
    c = Fraction(c)
    if c == 0:
        return type(f)._raw(f.trunc, {})
    return type(f)._raw(f.trunc, {k: v * c for k, v in f.terms.items()})


def _sorted_items(terms: TermMap) -> list[tuple[TermKey, int, Fraction]]:
    items = [(k, _key_weight(k), c) for k, c in terms.items()]
    items.sort(key=lambda it: it[1])
    return items


def _mul_terms(a: TermMap, b: TermMap, trunc: int) -> TermMap:
    out: TermMap = {}
    if not a or not b:
        return out
    bitems = _sorted_items(b)
    for (ska, ta), c_a in a.items():
        wa = _skey_weight(ska) + (ta or 0)
        for (skb, tb), wb, c_b in bitems:
            if wa + wb > trunc:
                break
            key = (_merge_skeys(ska, skb), ta if tb is None else tb)
            nc = out.get(key, _ZERO) + c_a * c_b
            if nc:
                out[key] = nc
            elif key in out:
                del out[key]
    return out


def series_mul(f: Series, g: Series) -> Series:
    if f.pointed and g.pointed:
        raise UsageError("cannot multiply two pointed series (two t factors)")
    if f.trunc != g.trunc:
        raise UsageError(f"truncation mismatch: {f.trunc} vs {g.trunc}")
    cls = PointedCycleIndexSeries if (f.pointed or g.pointed) else CycleIndexSeries
    return cls._raw(f.trunc, _mul_terms(f.terms, g.terms, f.trunc))


def delta_point(f: CycleIndexSeries, min_len: int) -> PointedCycleIndexSeries:
    """Pointing operator: sum over l >= min_len of l * t_l * d/ds_l."""
    if f.pointed:
        raise UsageError("delta_point applies to unpointed series")
    if min_len not in (1, 2):
        raise UsageError(f"min_len must be 1 or 2, got {min_len}")
    out: TermMap = {}
    for (skey, _), c in f.terms.items():
        for pos, (i, e) in enumerate(skey):
            if i < min_len:
                continue
            if e == 1:
                new_skey = skey[:pos] + skey[pos + 1 :]
            else:
                new_skey = skey[:pos] + ((i, e - 1),) + skey[pos + 1 :]
            key = (new_skey, i)
            nc = out.get(key, _ZERO) + c * e * i
            if nc:
                out[key] = nc
            elif key in out:
                del out[key]
    return PointedCycleIndexSeries._raw(f.trunc, out)


def t_to_s(f: PointedCycleIndexSeries) -> CycleIndexSeries:
    """Specialize t_l := s_l, turning a pointed series into an unpointed one."""
    if not f.pointed:
        raise UsageError("t_to_s applies to pointed series")
    out: TermMap = {}
    for (skey, t), c in f.terms.items():
        key = (_merge_skeys(skey, ((t, 1),)), None)
        nc = out.get(key, _ZERO) + c
        if nc:
            out[key] = nc
        elif key in out:
            del out[key]
    return CycleIndexSeries._raw(f.trunc, out)


def scale_indices(f: Series, k: int) -> Series:
    """Substitute s_i <- s_{k*i} (and t_l <- t_{k*l}); weights scale by k."""
    if k < 1:
        raise UsageError(f"index scale must be >= 1, got {k}")
    if k == 1:
        return f
    out: TermMap = {}
    for (skey, t), c in f.terms.items():
        w = (_skey_weight(skey) + (t or 0)) * k
        if w > f.trunc:
            continue
        key = (tuple((i * k, e) for i, e in skey), None if t is None else t * k)
        out[key] = out.get(key, _ZERO) + c
    return type(f)._raw(f.trunc, out)


def to_ogs(f: Series) -> Ogs:
    """Substitute s_i <- x^i and t_l <- x^l; coefficients must come out integral."""
    coeffs = [_ZERO] * (f.trunc + 1)
    for key, c in f.terms.items():
        coeffs[_key_weight(key)] += c
    out = []
    for n, c in enumerate(coeffs):
        if c.denominator != 1:
            raise InternalConsistencyError(
                f"non-integral OGS coefficient {c} at degree {n}"
            )
        out.append(int(c))
    return Ogs(f.trunc, tuple(out))


def _require_inner(g: CycleIndexSeries) -> None:
    if g.pointed:
        raise UsageError("inner series of a composition must be unpointed")
    if g.constant_term() != 0:
        raise AdmissibilityError("inner series must have zero constant term")


class _PowerCache:
    """Powers of g(s_k, s_2k, ...) shared across the monomials of the outer series."""

    def __init__(self, g: CycleIndexSeries):
        self.g = g
        self.trunc = g.trunc
        self._scaled: dict[int, TermMap] = {}
        self._pows: dict[tuple[int, int], TermMap] = {}

    def scaled(self, k: int) -> TermMap:
        t = self._scaled.get(k)
        if t is None:
            t = scale_indices(self.g, k).terms
            self._scaled[k] = t
        return t

    def power(self, k: int, e: int) -> TermMap:
        if e == 0:
            return {_EMPTY_KEY: _ONE}
        key = (k, e)
        t = self._pows.get(key)
        if t is None:
            if e == 1:
                t = self.scaled(k)
            else:
                t = _mul_terms(self.power(k, e - 1), self.scaled(k), self.trunc)
            self._pows[key] = t
        return t


def plethysm(f: CycleIndexSeries, g: CycleIndexSeries) -> CycleIndexSeries:
    """Composition: substitute s_k <- g(s_k, s_2k, s_3k, ...)."""
    if f.pointed:
        raise UsageError("plethysm outer series must be unpointed")
    if f.trunc != g.trunc:
        raise UsageError(f"truncation mismatch: {f.trunc} vs {g.trunc}")
    _require_inner(g)
    cache = _PowerCache(g)
    trunc = f.trunc
    out: TermMap = {}
    for (skey, _), c in f.terms.items():
        prod: TermMap = {_EMPTY_KEY: _ONE}
        for i, e in skey:
            if i * e > trunc:
                prod = {}
                break
            prod = _mul_terms(prod, cache.power(i, e), trunc)
            if not prod:
                break
        for key, pc in prod.items():
            nc = out.get(key, _ZERO) + c * pc
            if nc:
                out[key] = nc
            elif key in out:
                del out[key]
    return CycleIndexSeries._raw(trunc, out)


def pointed_plethysm(
    fbar: PointedCycleIndexSeries, g: CycleIndexSeries
) -> PointedCycleIndexSeries:
    """Pointed composition: s_k <- g_k and t_k <- h_k with h = delta_point(g, 1)."""
    if not fbar.pointed:
        raise UsageError("pointed_plethysm outer series must be pointed")
    if fbar.trunc != g.trunc:
        raise UsageError(f"truncation mismatch: {fbar.trunc} vs {g.trunc}")
    _require_inner(g)
    hbar = delta_point(g, 1)
    cache = _PowerCache(g)
    hbar_scaled: dict[int, TermMap] = {}
    trunc = fbar.trunc
    out: TermMap = {}
    for (skey, t), c in fbar.terms.items():
        prod = hbar_scaled.get(t)
        if prod is None:
            prod = scale_indices(hbar, t).terms
            hbar_scaled[t] = prod
        for i, e in skey:
            if not prod:
                break
            prod = _mul_terms(prod, cache.power(i, e), trunc)
        for key, pc in prod.items():
            nc = out.get(key, _ZERO) + c * pc
            if nc:
                out[key] = nc
            elif key in out:
                del out[key]
    return PointedCycleIndexSeries._raw(trunc, out)


def _parts_by_weight(f: Series) -> dict[int, TermMap]:
    parts: dict[int, TermMap] = {}
    for key, c in f.terms.items():
        parts.setdefault(_key_weight(key), {})[key] = c
    return parts


def _add_into(acc: TermMap, terms: TermMap, factor: Fraction = _ONE) -> None:
    for key, c in terms.items():
        nc = acc.get(key, _ZERO) + c * factor
        if nc:
            acc[key] = nc
        elif key in acc:
            del acc[key]


def series_exp(f: CycleIndexSeries) -> CycleIndexSeries:
    """exp(f) for f with zero constant term, by the weighted-degree recurrence."""
    _require_inner(f)
    n_max = f.trunc
    fparts = _parts_by_weight(f)
    eparts: list[TermMap] = [{_EMPTY_KEY: _ONE}]
    for n in range(1, n_max + 1):
        acc: TermMap = {}
        for k in range(1, n + 1):
            fk = fparts.get(k)
            if fk:
                _add_into(acc, _mul_terms(fk, eparts[n - k], n_max), Fraction(k, n))
        eparts.append(acc)
    out: TermMap = {}
    for part in eparts:
        _add_into(out, part)
    return CycleIndexSeries._raw(n_max, out)


def series_geometric(f: CycleIndexSeries) -> CycleIndexSeries:
    """1/(1-f) for f with zero constant term."""
    _require_inner(f)
    n_max = f.trunc
    fparts = _parts_by_weight(f)
    qparts: list[TermMap] = [{_EMPTY_KEY: _ONE}]
    for n in range(1, n_max + 1):
        acc: TermMap = {}
        for k in range(1, n + 1):
            fk = fparts.get(k)
            if fk:
                _add_into(acc, _mul_terms(fk, qparts[n - k], n_max))
        qparts.append(acc)
    out: TermMap = {}
    for part in qparts:
        _add_into(out, part)
    return CycleIndexSeries._raw(n_max, out)


def series_log_inv(f: CycleIndexSeries) -> CycleIndexSeries:
    """log(1/(1-f)) for f with zero constant term."""
    _require_inner(f)
    n_max = f.trunc
    fparts = _parts_by_weight(f)
    lparts: list[TermMap] = [{}]
    for n in range(1, n_max + 1):
        acc: TermMap = {}
        fk = fparts.get(n)
        if fk:
            _add_into(acc, fk)
        for k in range(1, n):
            fnk = fparts.get(n - k)
            if fnk and lparts[k]:
                _add_into(acc, _mul_terms(lparts[k], fnk, n_max), Fraction(k, n))
        lparts.append(acc)
    out: TermMap = {}
    for part in lparts:
        _add_into(out, part)
    return CycleIndexSeries._raw(n_max, out)


def evaluate(
    f: Series,
    s_at: Callable[[int], float],
    t_at: Callable[[int], float] | None = None,
) -> float:
    """Numeric evaluation with s_i = s_at(i) and t_l = t_at(l)."""
    total = 0.0
    for (skey, t), c in f.terms.items():
        v = float(c)
        for i, e in skey:
            v *= s_at(i) ** e
        if t is not None:
            if t_at is None:
                raise UsageError("pointed monomial needs t values")
            v *= t_at(t)
        total += v
    return total


_SIZED_KINDS = ("Seq", "Set", "Cyc")
_BASIC_KINDS = ("Zero", "One", "X") + _SIZED_KINDS


def _zset_parts(n_max: int) -> list[TermMap]:
    """Homogeneous parts of Z_Set: parts[n] sums s_lambda / z_lambda over |lambda| = n."""
    parts: list[TermMap] = [{_EMPTY_KEY: _ONE}]
    for n in range(1, n_max + 1):
        acc: TermMap = {}
        for j in range(1, n + 1):
            for (skey, _), c in parts[n - j].items():
                key = (_merge_skeys(skey, ((j, 1),)), None)
                acc[key] = acc.get(key, _ZERO) + Fraction(c, n)
        parts.append(acc)
    return parts


def basic_series(
    kind: str, size_constraint: int | None, trunc: int
) -> CycleIndexSeries:
    """Closed-form cycle index sum of a basic species, truncated at trunc."""
    if kind not in _BASIC_KINDS:
        raise UsageError(f"unknown basic kind {kind!r}")
    if trunc < 0:
        raise UsageError(f"truncation must be >= 0, got {trunc}")
    k = size_constraint
    if k is not None:
        if kind not in _SIZED_KINDS:
            raise UsageError(f"{kind} does not take a size constraint")
        if k < 0:
            raise UsageError(f"size constraint must be >= 0, got {k}")
    terms: TermMap = {}
    if kind == "Zero":
        pass
    elif kind == "One":
        terms[_EMPTY_KEY] = _ONE
    elif kind == "X":
        if trunc >= 1:
            terms[(((1, 1),), None)] = _ONE
    elif kind == "Seq":
        if k is None:
            for m in range(trunc + 1):
                terms[((((1, m),) if m else ()), None)] = _ONE
        elif k <= trunc:
            terms[((((1, k),) if k else ()), None)] = _ONE
    elif kind == "Set":
        parts = _zset_parts(min(trunc, k if k is not None else trunc))
        if k is None:
            for part in parts:
                _add_into(terms, part)
        elif k <= trunc:
            _add_into(terms, parts[k])
    elif kind == "Cyc":
        if k is None:
            terms[_EMPTY_KEY] = _ONE
            for r in range(1, trunc + 1):
                fr = Fraction(phi(r), r)
                for m in range(1, trunc // r + 1):
                    terms[(((r, m),), None)] = fr / m
        elif k == 0:
            terms[_EMPTY_KEY] = _ONE
        elif k <= trunc:
            for r in divisors(k):
                key = (((r, k // r),), None)
                terms[key] = terms.get(key, _ZERO) + Fraction(phi(r), k)
    return CycleIndexSeries._raw(trunc, terms)


def basic_pointed_series(
    kind: str, mode: str, size_constraint: int | None, trunc: int
) -> PointedCycleIndexSeries:
    """Pointed cycle index sum of a basic species: delta_point of the plain one."""
    if mode not in ("circle", "symm"):
        raise UsageError(f"pointing mode must be 'circle' or 'symm', got {mode!r}")
    plain = basic_series(kind, size_constraint, trunc)
    return delta_point(plain, 1 if mode == "circle" else 2)


def dump(f: Series) -> str:
    """Sorted text lines 'coeff * s1^a s2^b [t_l]' for golden-file comparison."""
    lines = []
    for m in f.monomials():
        factors = [f"s{i}^{e}" for i, e in m.s_exps]
        if m.t_index is not None:
            factors.append(f"t{m.t_index}")
        body = " ".join(factors) if factors else "1"
        lines.append(f"{m.coeff} * {body}")
    return "\n".join(lines)
