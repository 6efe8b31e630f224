"""Random generation of unlabeled structures from validated grammars.

Structures are drawn together with an automorphism (a "symmetry"): the
output of every internal step is a structure plus a permutation of its
atoms, stored as a tuple of cycles.  Pointed variables additionally carry
a marked cycle and a root atom on that cycle.  Sampling a variable at
parameter x returns a structure of size n with probability proportional
to x**n; rejection on top of that gives exact- and approximate-size
sampling that is uniform within each size.
"""

from __future__ import annotations

import math
import sys
import threading
from dataclasses import dataclass
from functools import lru_cache
from itertools import count as _counter
from typing import Callable, Iterator, Sequence, Union

from . import counting, oracle
from . import zindex as zx
from .errors import AdmissibilityError, InternalConsistencyError, UsageError
from .grammar import (
    Basic,
    PProd,
    Prod,
    PSubst,
    Ref,
    Subst,
    Sum,
    Terminal,
    UnpointQuery,
    ValidatedGrammar,
)

_TAIL_MASS = 2.0 ** -53


class Rng:
    """Deterministic source of randomness; same seed gives same stream."""

    def __init__(self, seed: int = 0):
        import random

        self._r = random.Random(seed)

    def random(self) -> float:
        return self._r.random()

    def randrange(self, n: int) -> int:
        return self._r.randrange(n)

    def choice(self, xs: Sequence):
        return xs[self._r.randrange(len(xs))]

    def shuffle(self, xs: list) -> None:
        self._r.shuffle(xs)


# ---- structures ------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    id: int


@dataclass(frozen=True)
class Unit:
    pass


@dataclass(frozen=True)
class Tagged:
    side: str
    child: "Structure"


@dataclass(frozen=True)
class Pair:
    left: "Structure"
    right: "Structure"


@dataclass(frozen=True)
class Collection:
    kind: str  # "seq", "set" or "cyc"
    children: tuple


@dataclass(frozen=True)
class Substituted:
    """A core shape whose placeholder atoms carry substituted components.

    Core atoms are placeholders and do not count toward the size; the
    components tuple maps each placeholder id to the structure that
    replaced it.
    """

    core: "Structure"
    components: tuple


Structure = Union[Atom, Unit, Tagged, Pair, Collection, Substituted]


@dataclass(frozen=True)
class Symmetry:
    structure: Structure
    cycles: tuple  # tuples of atom ids, each rotated so its minimum is first


@dataclass(frozen=True)
class RootedCSymmetry:
    symmetry: Symmetry
    marked_cycle: int  # index into symmetry.cycles
    root: int  # atom id on the marked cycle


def atoms_of(s: Structure) -> Iterator[int]:
    # iterative depth-first walk; structures can nest deeper than the stack
    stack = [s]
    while stack:
        cur = stack.pop()
        if isinstance(cur, Atom):
            yield cur.id
        elif isinstance(cur, Unit):
            continue
        elif isinstance(cur, Tagged):
            stack.append(cur.child)
        elif isinstance(cur, Pair):
            stack.append(cur.right)
            stack.append(cur.left)
        elif isinstance(cur, Collection):
            stack.extend(reversed(cur.children))
        elif isinstance(cur, Substituted):
            stack.extend(comp for _, comp in reversed(cur.components))
        else:
            raise InternalConsistencyError(f"unknown structure node {cur!r}")


def structure_size(s: Structure) -> int:
    return sum(1 for _ in atoms_of(s))


def resolve_substitutions(s: Structure) -> Structure:
    """Expand every substitution node by splicing components into the core."""
    if isinstance(s, (Atom, Unit)):
        return s
    if isinstance(s, Tagged):
        return Tagged(s.side, resolve_substitutions(s.child))
    if isinstance(s, Pair):
        return Pair(resolve_substitutions(s.left), resolve_substitutions(s.right))
    if isinstance(s, Collection):
        return Collection(s.kind, tuple(resolve_substitutions(c) for c in s.children))
    if isinstance(s, Substituted):
        repl = {u: resolve_substitutions(comp) for u, comp in s.components}
        return _splice(resolve_substitutions(s.core), repl)
    raise InternalConsistencyError(f"unknown structure node {s!r}")


def _splice(core: Structure, repl: dict) -> Structure:
    if isinstance(core, Atom):
        got = repl.get(core.id)
        if got is None:
            raise InternalConsistencyError("substitution core atom has no component")
        return got
    if isinstance(core, Unit):
        return core
    if isinstance(core, Tagged):
        return Tagged(core.side, _splice(core.child, repl))
    if isinstance(core, Pair):
        return Pair(_splice(core.left, repl), _splice(core.right, repl))
    if isinstance(core, Collection):
        return Collection(core.kind, tuple(_splice(c, repl) for c in core.children))
    if isinstance(core, Substituted):
        raise InternalConsistencyError("nested substitution core was not resolved")
    raise InternalConsistencyError(f"unknown structure node {core!r}")


def _canon_cycle(c: tuple) -> tuple:
    if not c:
        raise InternalConsistencyError("empty automorphism cycle")
    i = c.index(min(c))
    return c[i:] + c[:i]


def _min_atom(s: Structure) -> int:
    return min(atoms_of(s))


def _relabel(s: Structure, m: dict) -> Structure:
    if isinstance(s, Atom):
        return Atom(m.get(s.id, s.id))
    if isinstance(s, Unit):
        return s
    if isinstance(s, Tagged):
        return Tagged(s.side, _relabel(s.child, m))
    if isinstance(s, Pair):
        return Pair(_relabel(s.left, m), _relabel(s.right, m))
    if isinstance(s, Collection):
        children = tuple(_relabel(c, m) for c in s.children)
        if s.kind == "cyc" and len(children) > 1:
            mins = [_min_atom(c) for c in children]
            i = mins.index(min(mins))
            children = children[i:] + children[:i]
        return Collection(s.kind, children)
    if isinstance(s, Substituted):
        # core atoms are placeholders and keep their internal ids
        return Substituted(s.core, tuple((u, _relabel(c, m)) for u, c in s.components))
    raise InternalConsistencyError(f"unknown structure node {s!r}")


def _apply_labels(obj, m: dict):
    if isinstance(obj, RootedCSymmetry):
        return RootedCSymmetry(
            _apply_labels(obj.symmetry, m), obj.marked_cycle, m.get(obj.root, obj.root)
        )
    if isinstance(obj, Symmetry):
        cycles = tuple(
            _canon_cycle(tuple(m.get(a, a) for a in c)) for c in obj.cycles
        )
        return Symmetry(_relabel(obj.structure, m), cycles)
    return _relabel(obj, m)


def _structure_of(obj) -> Structure:
    if isinstance(obj, RootedCSymmetry):
        return obj.symmetry.structure
    if isinstance(obj, Symmetry):
        return obj.structure
    return obj


def distribute_labels(obj, rng: Rng):
    """Relabel atoms by a uniform bijection onto 0..n-1."""
    order = list(atoms_of(_structure_of(obj)))
    targets = list(range(len(order)))
    rng.shuffle(targets)
    return _apply_labels(obj, dict(zip(order, targets)))


def _dense_renumber(obj):
    order = list(atoms_of(_structure_of(obj)))
    return _apply_labels(obj, {a: i for i, a in enumerate(order)})


def symmetry_profile(obj) -> tuple:
    sym = obj.symmetry if isinstance(obj, RootedCSymmetry) else obj
    return tuple(sorted(len(c) for c in sym.cycles))


def compose_cycles(copies: Sequence[Sequence[int]]) -> tuple:
    """Interleave aligned images of one cycle across k copies into one cycle.

    copies[i][j] is the j-th element of the cycle inside copy i; the result
    advances through the copies at fixed j and steps j forward after the
    last copy, so its k-th power restricted to one copy is the original.
    """
    k = len(copies)
    if k == 0:
        raise UsageError("compose_cycles needs at least one copy")
    l = len(copies[0])
    if l == 0 or any(len(c) != l for c in copies):
        raise UsageError("compose_cycles needs aligned nonempty copies")
    return tuple(copies[i][j] for j in range(l) for i in range(k))


class _CycleChain:
    """Lazy concatenation of cycle lists, flattened once per finished draw.

    Substitution assembles the automorphism of a composed structure from the
    component automorphisms; keeping the concatenation lazy makes each level
    O(1) in the component sizes instead of copying every cycle list on the
    way up, which would cost size times depth per draw.
    """

    __slots__ = ("parts", "length")

    def __init__(self, parts: tuple, length: int):
        self.parts = parts
        self.length = length

    def __len__(self) -> int:
        return self.length

    def __iter__(self):
        stack = [iter(self.parts)]
        while stack:
            try:
                item = next(stack[-1])
            except StopIteration:
                stack.pop()
                continue
            if isinstance(item, _CycleChain):
                stack.append(iter(item.parts))
            else:
                yield from item


_FLATTEN_BELOW = 33


def _cat_cycles(a, b):
    la, lb = len(a), len(b)
    if la == 0:
        return b
    if lb == 0:
        return a
    if la + lb < _FLATTEN_BELOW and isinstance(a, tuple) and isinstance(b, tuple):
        return a + b
    return _CycleChain((a, b), la + lb)


# ---- integer distributions -------------------------------------------------


def _draw_geom(p: float, rng: Rng) -> int:
    if not 0.0 <= p:
        raise UsageError(f"geometric parameter {p} is negative")
    if p >= 1.0:
        raise AdmissibilityError(f"geometric parameter {p} is not below 1")
    if p == 0.0:
        rng.random()
        return 0
    u = rng.random()
    if p > 0.999:
        # the CDF walk would take ~1/(1-p) steps; invert analytically
        return int(math.log1p(-u) / math.log(p))
    cum = 0.0
    pk = 1.0 - p
    k = 0
    while True:
        cum += pk
        if u < cum or 1.0 - cum < _TAIL_MASS:
            return k
        pk *= p
        k += 1


def _draw_pois(lam: float, rng: Rng, at_least_one: bool = False) -> int:
    if lam < 0.0 or not math.isfinite(lam):
        raise AdmissibilityError(f"poisson rate {lam} is not admissible")
    if lam == 0.0:
        if at_least_one:
            raise AdmissibilityError("poisson conditioned on >=1 needs positive rate")
        rng.random()
        return 0
    u = rng.random()
    if at_least_one:
        norm = -math.expm1(-lam)
        pk = lam * math.exp(-lam) / norm
        k = 1
    else:
        pk = math.exp(-lam)
        k = 0
    cum = 0.0
    while True:
        cum += pk
        if u < cum or 1.0 - cum < _TAIL_MASS:
            return k
        k += 1
        pk *= lam / k


def _draw_loga(lam: float, rng: Rng) -> int:
    if lam < 0.0:
        raise UsageError(f"logarithmic parameter {lam} is negative")
    if lam >= 1.0:
        raise AdmissibilityError(f"logarithmic parameter {lam} is not below 1")
    if lam == 0.0:
        rng.random()
        return 1
    u = rng.random()
    norm = -math.log1p(-lam)
    pk = lam / norm
    k = 1
    cum = 0.0
    while True:
        cum += pk
        if u < cum or 1.0 - cum < _TAIL_MASS:
            return k
        pk *= lam * k / (k + 1)
        k += 1


@lru_cache(maxsize=4096)
def _max_index_cdf(s: tuple) -> tuple:
    tail = [0.0] * (len(s) + 1)
    for i in range(len(s), 0, -1):
        if s[i - 1] < 0.0:
            raise UsageError("series values must be nonnegative")
        tail[i - 1] = tail[i] + s[i - 1] / i
    if not math.isfinite(tail[0]):
        raise AdmissibilityError("diverging series in max-index draw")
    return tuple(math.exp(-t) for t in tail)


def _draw_max_index(s: Sequence[float], rng: Rng) -> int:
    # P(J <= j) = exp(-sum_{i>j} s_i/i); values beyond the list are zero
    cdf = _max_index_cdf(tuple(s))
    u = rng.random()
    for j, bound in enumerate(cdf):
        if u < bound:
            return j
    return len(s)


def _walk_weights(weights: Sequence[tuple], rng: Rng, total: float | None = None):
    if total is None:
        total = math.fsum(w for _, w in weights)
    if not math.isfinite(total):
        raise AdmissibilityError("diverging weights in discrete draw")
    if total <= 0.0:
        raise AdmissibilityError("no admissible outcome in discrete draw")
    u = rng.random() * total
    cum = 0.0
    for item, w in weights:
        cum += w
        if u < cum:
            return item
    return weights[-1][0]


@lru_cache(maxsize=4096)
def _plain_replic_weights(s: tuple) -> tuple:
    # outcome 0 stands for the empty cycle, weight 1 in the normalizer
    weights = [(0, 1.0)]
    for r in range(1, len(s) + 1):
        sr = s[r - 1]
        if sr >= 1.0:
            raise AdmissibilityError(f"series value {sr} at index {r} is not below 1")
        if sr > 0.0:
            weights.append((r, zx.phi(r) / r * -math.log1p(-sr)))
    return tuple(weights)


@lru_cache(maxsize=4096)
def _pointed_replic_weights(s: tuple, t: tuple, min_r: int) -> tuple:
    weights = []
    for r in range(min_r, len(t) + 1):
        sr = s[r - 1] if r <= len(s) else 0.0
        if sr >= 1.0:
            raise AdmissibilityError(f"series value {sr} at index {r} is not below 1")
        tr = t[r - 1]
        if tr > 0.0:
            weights.append((r, zx.phi(r) * tr / (1.0 - sr)))
    return tuple(weights)


def _draw_replic_order(params: tuple, rng: Rng) -> int:
    if len(params) == 1:
        weights = _plain_replic_weights(tuple(params[0]))
    else:
        s, t, min_r = params
        weights = _pointed_replic_weights(tuple(s), tuple(t), min_r)
    return _walk_weights(weights, rng)


@lru_cache(maxsize=4096)
def _root_cycle_weights(t: tuple, min_len: int) -> tuple:
    return tuple(
        (l, t[l - 1]) for l in range(min_len, len(t) + 1) if t[l - 1] > 0.0
    )


def _draw_root_cycle_size(params: tuple, rng: Rng) -> int:
    t, min_len = params
    return _walk_weights(_root_cycle_weights(tuple(t), min_len), rng)


_DIST = {
    "geom": lambda p, rng: _draw_geom(p[0], rng),
    "pois": lambda p, rng: _draw_pois(p[0], rng),
    "pois_ge1": lambda p, rng: _draw_pois(p[0], rng, at_least_one=True),
    "loga": lambda p, rng: _draw_loga(p[0], rng),
    "max_index": lambda p, rng: _draw_max_index(p[0], rng),
    "replic_order": _draw_replic_order,
    "root_cycle_size": _draw_root_cycle_size,
}


def draw_int(dist_kind: str, params: tuple, rng: Rng) -> int:
    """Draw one integer by CDF inversion; tails below 2**-53 are truncated."""
    fn = _DIST.get(dist_kind)
    if fn is None:
        raise UsageError(f"unknown distribution kind {dist_kind!r}")
    return fn(params, rng)


# ---- basic samplers --------------------------------------------------------


def _coprime_unit(r: int, rng: Rng) -> int:
    if r == 1:
        return 1
    units = [b for b in range(1, r) if math.gcd(b, r) == 1]
    return rng.choice(units)


def _seq_of_atoms(n: int, new_atom) -> tuple:
    return tuple(new_atom() for _ in range(n))


def _rotation_symmetry(kind_atoms: tuple, step: int):
    """Cycles of the rotation i -> i+step on positions 0..m-1."""
    m = len(kind_atoms)
    if m == 0:
        return ()
    g = math.gcd(step % m, m) if step % m else m
    orbit_len = m // g
    cycles = []
    for start in range(g):
        cyc = tuple(kind_atoms[(start + q * step) % m] for q in range(orbit_len))
        cycles.append(cyc)
    return tuple(cycles)


def _identity_cycles(atoms: Sequence[int]) -> tuple:
    return tuple((a,) for a in atoms)


def _set_from_cycle_lengths(lengths: Sequence[int], new_atom):
    cycles = []
    atoms: list[int] = []
    for l in lengths:
        cyc = _seq_of_atoms(l, new_atom)
        cycles.append(cyc)
        atoms.extend(cyc)
    structure = Collection("set", tuple(Atom(a) for a in atoms))
    return structure, tuple(cycles)


def _plain_set(s: Sequence[float], rng: Rng, new_atom) -> Symmetry:
    j_max = _draw_max_index(s, rng)
    lengths: list[int] = []
    for j in range(1, j_max + 1):
        kj = _draw_pois(s[j - 1] / j, rng, at_least_one=(j == j_max))
        lengths.extend([j] * kj)
    structure, cycles = _set_from_cycle_lengths(lengths, new_atom)
    return Symmetry(structure, cycles)


def _plain_cycle(length: int, step: int, new_atom) -> tuple:
    atoms = _seq_of_atoms(length, new_atom)
    structure = Collection("cyc", tuple(Atom(a) for a in atoms))
    return atoms, structure, _rotation_symmetry(atoms, step)


@lru_cache(maxsize=None)
def _sized_monomials(kind: str, mode: str, size: int):
    if mode == "plain":
        series = zx.basic_series(kind, size, size)
    else:
        series = zx.basic_pointed_series(kind, mode, size, size)
    entries = [
        (skey, t, float(c)) for (skey, t), c in series.terms.items() if c > 0
    ]
    entries.sort(key=lambda e: (e[1] or 0, e[0]))
    return entries


def _monomial_weight(skey, t, c, s, tvals) -> float:
    w = c
    for i, e in skey:
        base = s[i - 1] if i <= len(s) else 0.0
        w *= base ** e
    if t is not None:
        w *= tvals[t - 1] if t <= len(tvals) else 0.0
    return w


def _gamma_sized(kind: str, mode: str, size: int, s, tvals, rng: Rng, new_atom):
    if size == 0:
        if mode != "plain":
            raise AdmissibilityError("a marked cycle needs at least one atom")
        kind_name = {"Seq": "seq", "Set": "set", "Cyc": "cyc"}[kind]
        return Symmetry(Collection(kind_name, ()), ())
    entries = _sized_monomials(kind, mode, size)
    weighted = [
        ((skey, t), _monomial_weight(skey, t, c, s, tvals)) for skey, t, c in entries
    ]
    weighted = [(item, w) for item, w in weighted if w > 0.0]
    skey, t = _walk_weights(weighted, rng)
    if kind == "Seq":
        atoms = _seq_of_atoms(size, new_atom)
        sym = Symmetry(
            Collection("seq", tuple(Atom(a) for a in atoms)), _identity_cycles(atoms)
        )
        if mode == "plain":
            return sym
        marked = rng.randrange(size)
        return RootedCSymmetry(sym, marked, atoms[marked])
    if kind == "Set":
        lengths: list[int] = []
        for i, e in skey:
            lengths.extend([i] * e)
        if mode == "plain":
            structure, cycles = _set_from_cycle_lengths(lengths, new_atom)
            return Symmetry(structure, cycles)
        structure, cycles = _set_from_cycle_lengths(lengths + [t], new_atom)
        marked = len(cycles) - 1
        root = cycles[marked][rng.randrange(t)]
        return RootedCSymmetry(Symmetry(structure, cycles), marked, root)
    # Cyc
    r = skey[0][0] if mode == "plain" else t
    b = _coprime_unit(r, rng)
    step = (size // r) * b
    atoms, structure, cycles = _plain_cycle(size, step, new_atom)
    if mode == "plain":
        return Symmetry(structure, cycles)
    pos = rng.randrange(size)
    marked = pos % (size // r)
    return RootedCSymmetry(Symmetry(structure, cycles), marked, atoms[pos])


def gamma_basic(
    kind: str,
    mode: str,
    size_constraint: int | None,
    params: tuple,
    rng: Rng,
    new_atom: Callable[[], int] | None = None,
):
    """Draw one basic structure with its automorphism.

    kind is "Seq", "Set" or "Cyc"; mode is "plain", "circle" or "symm";
    params is (s, t) with s and t sequences of series values indexed from 1
    (t may be None in plain mode).  Returns a Symmetry in plain mode and a
    RootedCSymmetry otherwise.
    """
    if kind not in ("Seq", "Set", "Cyc"):
        raise UsageError(f"unknown basic kind {kind!r}")
    if mode not in ("plain", "circle", "symm"):
        raise UsageError(f"unknown mode {mode!r}")
    if new_atom is None:
        new_atom = _counter().__next__
    s, tvals = params
    if mode != "plain" and tvals is None:
        raise UsageError("pointed basic samplers need pointed series values")
    if size_constraint is not None:
        return _gamma_sized(kind, mode, size_constraint, s, tvals or (), rng, new_atom)
    min_len = 2 if mode == "symm" else 1
    if kind == "Seq":
        if mode == "symm":
            raise AdmissibilityError("a sequence has no replicated cycles to mark")
        s1 = s[0] if s else 0.0
        if s1 >= 1.0:
            raise AdmissibilityError(f"series value {s1} is not below 1")
        k1 = _draw_geom(s1, rng)
        if mode == "plain":
            atoms = _seq_of_atoms(k1, new_atom)
            return Symmetry(
                Collection("seq", tuple(Atom(a) for a in atoms)),
                _identity_cycles(atoms),
            )
        k2 = _draw_geom(s1, rng)
        atoms = _seq_of_atoms(k1 + k2 + 1, new_atom)
        sym = Symmetry(
            Collection("seq", tuple(Atom(a) for a in atoms)), _identity_cycles(atoms)
        )
        return RootedCSymmetry(sym, k1, atoms[k1])
    if kind == "Set":
        if mode == "plain":
            return _plain_set(s, rng, new_atom)
        big = draw_int("root_cycle_size", (tvals, min_len), rng)
        plain = _plain_set(s, rng, new_atom)
        marked_cycle = _seq_of_atoms(big, new_atom)
        structure = Collection(
            "set",
            plain.structure.children + tuple(Atom(a) for a in marked_cycle),
        )
        cycles = plain.cycles + (marked_cycle,)
        root = marked_cycle[rng.randrange(big)]
        return RootedCSymmetry(Symmetry(structure, cycles), len(cycles) - 1, root)
    # Cyc
    if mode == "plain":
        r = _draw_replic_order((s,), rng)
        if r == 0:
            return Symmetry(Collection("cyc", ()), ())
        j = _draw_loga(s[r - 1], rng)
        b = _coprime_unit(r, rng)
        _, structure, cycles = _plain_cycle(j * r, j * b, new_atom)
        return Symmetry(structure, cycles)
    r = _draw_replic_order((s, tvals, min_len), rng)
    sr = s[r - 1] if r <= len(s) else 0.0
    j = 1 + _draw_geom(sr, rng)
    b = _coprime_unit(r, rng)
    atoms, structure, cycles = _plain_cycle(j * r, j * b, new_atom)
    pos = rng.randrange(j * r)
    marked = pos % j
    return RootedCSymmetry(Symmetry(structure, cycles), marked, atoms[pos])


# ---- construction rules ----------------------------------------------------


def _tag(side: str, drawn):
    if isinstance(drawn, RootedCSymmetry):
        inner = drawn.symmetry
        return RootedCSymmetry(
            Symmetry(Tagged(side, inner.structure), inner.cycles),
            drawn.marked_cycle,
            drawn.root,
        )
    return Symmetry(Tagged(side, drawn.structure), drawn.cycles)


def _is_unit(sym: Symmetry) -> bool:
    return isinstance(sym.structure, Unit)


def _copy_maps(sym: Symmetry, copies: int, new_atom) -> list[dict]:
    """Identity map for copy 0 plus fresh-id maps for the other copies."""
    order = list(atoms_of(sym.structure))
    maps = [{a: a for a in order}]
    for _ in range(copies - 1):
        maps.append({a: new_atom() for a in order})
    return maps


def _substitute(core_cycles, core_structure, draw_arg_at, pointed, new_atom):
    comps: list[tuple[int, Structure]] = []
    parts: list = []
    flat: list = []
    total = 0
    marked_out = None
    root_out = None
    marked_idx = pointed[0] if pointed else None

    def flush():
        nonlocal flat
        if flat:
            parts.append(tuple(flat))
            flat = []

    def add_component(cyc, drawn_sym):
        # returns the copy maps, or None on the single-copy fast path
        nonlocal total
        k = len(cyc)
        if k == 1:
            comps.append((cyc[0], drawn_sym.structure))
            if len(drawn_sym.cycles):
                flush()
                parts.append(drawn_sym.cycles)
                total += len(drawn_sym.cycles)
            return None
        maps = _copy_maps(drawn_sym, k, new_atom)
        for i, u in enumerate(cyc):
            comps.append((u, _relabel(drawn_sym.structure, maps[i])))
        for d in drawn_sym.cycles:
            aligned = [tuple(m[a] for a in d) for m in maps]
            flat.append(_canon_cycle(compose_cycles(aligned)))
        total += len(drawn_sym.cycles)
        return maps

    for idx, cyc in enumerate(core_cycles):
        if idx == marked_idx:
            continue
        add_component(cyc, draw_arg_at(len(cyc)))
    if pointed:
        _, core_root, draw_arg_pointed_at = pointed
        marked_core_cycle = core_cycles[marked_idx]
        drawn = draw_arg_pointed_at(len(marked_core_cycle))
        offset = total
        maps = add_component(marked_core_cycle, drawn.symmetry)
        marked_out = offset + drawn.marked_cycle
        if maps is None:
            root_out = drawn.root
        else:
            pos = marked_core_cycle.index(core_root)
            root_out = maps[pos][drawn.root]
    flush()
    if len(parts) == 1:
        cycles_out = parts[0]
    elif total < _FLATTEN_BELOW:
        cycles_out = tuple(c for p in parts for c in p)
    else:
        cycles_out = _CycleChain(tuple(parts), total)
    comps.sort(key=lambda uc: uc[0])
    sym = Symmetry(Substituted(core_structure, tuple(comps)), cycles_out)
    if pointed:
        return RootedCSymmetry(sym, marked_out, root_out)
    return sym


def gamma_construct(op: str, children: tuple, eval, rng: Rng, new_atom=None):
    """Combine child samplers: op is "sum", "prod" or "subst".

    sum: children = (draw_a, draw_b), eval = (mass_a, mass_b).
    prod: children = (draw_a, draw_b).
    subst: children = (draw_core, draw_arg_at) with draw_arg_at(k) giving an
    independent argument draw at the k-fold power of the parameter.
    """
    if op == "sum":
        draw_a, draw_b = children
        za, zb = eval
        total = za + zb
        if not total > 0.0:
            raise InternalConsistencyError("sum alternative has no mass")
        if rng.random() * total < za:
            return _tag("left", draw_a())
        return _tag("right", draw_b())
    if op == "prod":
        a = children[0]()
        b = children[1]()
        if _is_unit(a):
            return b
        if _is_unit(b):
            return a
        return Symmetry(Pair(a.structure, b.structure), _cat_cycles(a.cycles, b.cycles))
    if op == "subst":
        if new_atom is None:
            new_atom = _counter().__next__
        draw_core, draw_arg_at = children
        core = draw_core()
        return _substitute(core.cycles, core.structure, draw_arg_at, None, new_atom)
    raise UsageError(f"unknown construction {op!r}")


def gamma_pointed_construct(op: str, children: tuple, eval, rng: Rng, new_atom=None):
    """Pointed construction rules: op is "psum", "pprod" or "psubst".

    psum: children = (draw_a, draw_b), eval = (mass_a, mass_b).
    pprod: children = (draw_a, draw_b), eval = side of the pointed factor.
    psubst: children = (draw_core, draw_arg_at, draw_arg_pointed_at).
    """
    if op == "psum":
        return gamma_construct("sum", children, eval, rng)
    if op == "pprod":
        draw_a, draw_b = children
        side = eval
        a = draw_a()
        b = draw_b()
        pointed, plain = (a, b) if side == "left" else (b, a)
        if _is_unit(plain):
            return pointed
        inner = pointed.symmetry
        if side == "left":
            structure = Pair(inner.structure, plain.structure)
            cycles = _cat_cycles(inner.cycles, plain.cycles)
            marked = pointed.marked_cycle
        else:
            structure = Pair(plain.structure, inner.structure)
            cycles = _cat_cycles(plain.cycles, inner.cycles)
            marked = len(plain.cycles) + pointed.marked_cycle
        return RootedCSymmetry(Symmetry(structure, cycles), marked, pointed.root)
    if op == "psubst":
        if new_atom is None:
            new_atom = _counter().__next__
        draw_core, draw_arg_at, draw_arg_pointed_at = children
        core = draw_core()
        inner = core.symmetry
        return _substitute(
            inner.cycles,
            inner.structure,
            draw_arg_at,
            (core.marked_cycle, core.root, draw_arg_pointed_at),
            new_atom,
        )
    raise UsageError(f"unknown pointed construction {op!r}")


# ---- grammar-driven sampling -----------------------------------------------


class _AbortSize(Exception):
    pass


class _Session:
    def __init__(self, vg: ValidatedGrammar, table, rng: Rng, max_size=None):
        self.vg = vg
        self.g = vg.grammar
        self.table = table
        self.rng = rng
        self.max_size = max_size
        self.atoms_made = 0
        self._ids = _counter()
        self.partner_of = {plain: po for po, plain in self.g.pairs.items()}
        self._value_of = oracle.table_evaluator(vg, table)
        self._mass_cache: dict = {}
        self._series_cache: dict = {}

    def reset_budget(self) -> None:
        self.atoms_made = 0

    # placeholder atoms (substitution cores) do not count toward the size
    def _placeholder(self) -> int:
        return next(self._ids)

    def _real_atom(self) -> int:
        self.atoms_made += 1
        if self.max_size is not None and self.atoms_made > self.max_size:
            raise _AbortSize
        return next(self._ids)

    def sval(self, arg: str | None, u: int) -> float:
        if arg is None:
            return self.table.x ** u
        if u > self.table.k_max:
            return 0.0
        return self.table.value(arg, u)

    def tval(self, arg: str | None, u: int) -> float:
        if arg is None:
            return self.table.x ** u
        if u > self.table.k_max:
            return 0.0
        return self.table.deriv(arg, u)

    def mass(self, e, scale: int) -> float:
        key = (id(e), scale)
        got = self._mass_cache.get(key)
        if got is None:
            got = self._value_of(e, scale)
            self._mass_cache[key] = got
        return got

    def sample(self, var: str, scale: int):
        if scale > self.table.k_max:
            raise InternalConsistencyError(
                f"sampling {var} at power {scale} beyond the value table"
            )
        return self._sample(self.g.equations[var], scale)

    def _sample(self, e, scale: int):
        if isinstance(e, Ref):
            return self.sample(e.name, scale)
        if isinstance(e, Sum):
            return gamma_construct(
                "sum",
                (lambda: self._sample(e.a, scale), lambda: self._sample(e.b, scale)),
                (self.mass(e.a, scale), self.mass(e.b, scale)),
                self.rng,
            )
        if isinstance(e, Prod):
            return gamma_construct(
                "prod",
                (lambda: self._sample(e.a, scale), lambda: self._sample(e.b, scale)),
                None,
                self.rng,
            )
        if isinstance(e, PProd):
            return gamma_pointed_construct(
                "pprod",
                (lambda: self._sample(e.a, scale), lambda: self._sample(e.b, scale)),
                self.vg.pointed_sides[e],
                self.rng,
            )
        if isinstance(e, Subst):
            return self._subst(e.core, self._argname(e.arg), scale)
        if isinstance(e, PSubst):
            return self._psubst(e.core, self._argname(e.arg), scale)
        if isinstance(e, Basic):
            return self._basic(e, scale)
        raise InternalConsistencyError(f"cannot sample expression {e!r}")

    def _argname(self, arg) -> str:
        if isinstance(arg, Ref):
            return arg.name
        raise InternalConsistencyError("substitution argument is not a variable")

    def _basic(self, e: Basic, scale: int):
        if e.kind == "X":
            if e.pointing == "none":
                a = self._real_atom()
                return Symmetry(Atom(a), ((a,),))
            if e.pointing == "circle":
                return self._pointed_atom()
            raise InternalConsistencyError("a single atom has no replicated cycles")
        if e.kind == "One":
            if e.pointing != "none":
                raise InternalConsistencyError("an empty structure cannot be marked")
            return Symmetry(Unit(), ())
        if e.kind == "Zero":
            raise InternalConsistencyError("the empty species cannot be sampled")
        if e.pointing == "none":
            return self._subst(e, None, scale)
        return self._psubst(e, None, scale)

    def _limit(self, scale: int) -> int:
        return max(1, self.table.k_max // scale)

    def _series_at(self, arg: str | None, scale: int, pointed: bool):
        key = (arg, scale, pointed)
        got = self._series_cache.get(key)
        if got is None:
            l = self._limit(scale)
            val = self.tval if pointed else self.sval
            got = tuple(val(arg, scale * i) for i in range(1, l + 1))
            self._series_cache[key] = got
        return got

    def _core_plain(self, core, arg: str | None, scale: int) -> Symmetry:
        if isinstance(core, Terminal):
            ts = self.g.terminal_series[core.name]
            hook = getattr(ts, "boltzmann_sampler", None)
            if hook is None:
                raise UsageError(
                    f"terminal {core.name!r} does not provide a sampler"
                )
            return hook(
                lambda r: self.sval(arg, scale * r), self.rng, self._placeholder
            )
        s = self._series_at(arg, scale, pointed=False)
        return gamma_basic(
            core.kind, "plain", core.size, (s, None), self.rng, self._placeholder
        )

    def _core_pointed(self, core, arg: str | None, scale: int) -> RootedCSymmetry:
        if isinstance(core, Terminal):
            ts = self.g.terminal_series[core.name]
            hook = getattr(ts, "pointed_boltzmann_sampler", None)
            if hook is None:
                raise UsageError(
                    f"terminal {core.name!r} does not provide a pointed sampler"
                )
            return hook(
                lambda r: self.sval(arg, scale * r),
                lambda l: self.tval(arg, scale * l),
                self.rng,
                self._placeholder,
            )
        s = self._series_at(arg, scale, pointed=False)
        t = self._series_at(arg, scale, pointed=True)
        return gamma_basic(
            core.kind, core.pointing, core.size, (s, t), self.rng, self._placeholder
        )

    def _arg_plain(self, arg: str | None, scale: int) -> Symmetry:
        if arg is None:
            a = self._real_atom()
            return Symmetry(Atom(a), ((a,),))
        got = self.sample(arg, scale)
        if not isinstance(got, Symmetry):
            raise InternalConsistencyError(f"{arg} did not yield a plain draw")
        return got

    def _pointed_atom(self) -> RootedCSymmetry:
        a = self._real_atom()
        return RootedCSymmetry(Symmetry(Atom(a), ((a,),)), 0, a)

    def _arg_pointed(self, arg: str | None, scale: int) -> RootedCSymmetry:
        if arg is None:
            return self._pointed_atom()
        partner = self.partner_of.get(arg)
        if partner is None:
            raise UsageError(
                f"pointed substitution over {arg!r} needs a declared pair partner"
            )
        got = self.sample(partner, scale)
        if not isinstance(got, RootedCSymmetry):
            raise InternalConsistencyError(f"{partner} did not yield a pointed draw")
        return got

    def _subst(self, core, arg: str | None, scale: int) -> Symmetry:
        return gamma_construct(
            "subst",
            (
                lambda: self._core_plain(core, arg, scale),
                lambda k: self._arg_plain(arg, scale * k),
            ),
            None,
            self.rng,
            new_atom=self._real_atom,
        )

    def _psubst(self, core, arg: str | None, scale: int) -> RootedCSymmetry:
        return gamma_pointed_construct(
            "psubst",
            (
                lambda: self._core_pointed(core, arg, scale),
                lambda k: self._arg_plain(arg, scale * k),
                lambda l: self._arg_pointed(arg, scale * l),
            ),
            None,
            self.rng,
            new_atom=self._real_atom,
        )


def _finalize(sym, unpoint: bool, keep_symmetry: bool, profile_only: bool, rng: Rng):
    if unpoint:
        if not isinstance(sym, RootedCSymmetry):
            raise InternalConsistencyError("unpointing needs a pointed draw")
        sym = sym.symmetry
    if keep_symmetry:
        return distribute_labels(sym, rng)
    renum = _dense_renumber(sym)
    structure = _structure_of(renum)
    if profile_only:
        return structure, symmetry_profile(renum)
    return structure


def _target_name(var) -> str:
    if isinstance(var, UnpointQuery):
        return var.var
    return var


def sample_boltzmann(
    vg: ValidatedGrammar,
    var,
    x: float | None = None,
    rng: Rng | None = None,
    *,
    table=None,
    keep_symmetry: bool = False,
    profile_only: bool = False,
):
    """Draw one structure; sizes follow the Boltzmann law at parameter x.

    var may name a grammar variable or be an unpoint query, in which case
    the marked cycle is discarded after sampling.  Pass either x or a
    precomputed value table.
    """
    if not isinstance(vg, ValidatedGrammar):
        raise UsageError("sampling needs a validated grammar")
    if rng is None:
        raise UsageError("sampling needs an explicit Rng")
    target = _target_name(var)
    if target not in vg.grammar.equations:
        raise UsageError(f"unknown variable {target!r}")
    if table is None:
        if x is None:
            raise UsageError("pass a parameter x or a precomputed table")
        table = oracle.eval_system(vg, x)
    session = _Session(vg, table, rng)

    def run():
        sym = session.sample(target, 1)
        return _finalize(
            sym, isinstance(var, UnpointQuery), keep_symmetry, profile_only, rng
        )

    return _run_deep(run, deep=False)


def _size_window(n: int, mode: str, eps: float) -> tuple[int, int]:
    if mode == "exact":
        return n, n
    if mode != "approx":
        raise UsageError(f"unknown targeting mode {mode!r}")
    if not eps > 0.0:
        raise UsageError("approximate targeting needs a positive tolerance")
    lo = max(0, math.ceil((1.0 - eps) * n))
    hi = math.floor((1.0 + eps) * n)
    return lo, max(lo, hi)


_DIRECT_COUNT_LIMIT = 128
_PERIOD_WINDOW = 128


def _window_reachable(vg, var, lo: int, hi: int) -> bool | None:
    """True/False when decidable by counting, None when left to rejection."""
    cache = vg.__dict__.setdefault("_reach_cache", {})
    key = (var, lo, hi)
    if key in cache:
        return cache[key]
    systems = vg.__dict__.setdefault("_reach_systems", {})

    def solved(limit: int):
        best = min((m for m in systems if m >= limit), default=None)
        if best is None:
            systems[limit] = counting.solve(vg, limit)
            best = limit
        return systems[best]

    if hi <= _DIRECT_COUNT_LIMIT:
        sys_ = solved(hi)
        got = any(counting.count(sys_, var, m) > 0 for m in range(lo, hi + 1))
    else:
        sys_ = solved(_PERIOD_WINDOW)
        nonzero = [
            counting.count(sys_, var, m) > 0 for m in range(_PERIOD_WINDOW + 1)
        ]
        half = _PERIOD_WINDOW // 2
        got = None
        for p in range(1, half // 2 + 1):
            if all(
                nonzero[i] == nonzero[i + p]
                for i in range(half, _PERIOD_WINDOW + 1 - p)
            ):
                got = any(
                    nonzero[half + (m - half) % p] for m in range(lo, hi + 1)
                )
                break
    cache[key] = got
    return got


def _default_table(vg, target: str, x: float | None):
    if x is not None:
        return oracle.eval_system(vg, x)
    sing = oracle.find_singularity(vg, target)
    x = 1.0 - 1e-9 if sing.entire else sing.rho
    for _ in range(4):
        try:
            return oracle.eval_system(vg, x)
        except AdmissibilityError:
            x *= 1.0 - 2.0 ** -20
    raise AdmissibilityError(
        f"could not evaluate the system near its singularity (last tried x={x})"
    )


def _run_deep(fn, deep: bool):
    if not deep:
        # moderate draws still recurse past the default interpreter limit
        old_limit = sys.getrecursionlimit()
        if old_limit < 5000:
            sys.setrecursionlimit(5000)
        try:
            return fn()
        finally:
            sys.setrecursionlimit(old_limit)
    box: dict = {}

    def runner():
        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(1_000_000)
        try:
            box["value"] = fn()
        except BaseException as exc:  # noqa: BLE001 - re-raised in caller
            box["error"] = exc
        finally:
            sys.setrecursionlimit(old_limit)

    old_stack = threading.stack_size(512 * 1024 * 1024)
    try:
        t = threading.Thread(target=runner)
        t.start()
        t.join()
    finally:
        threading.stack_size(old_stack)
    if "error" in box:
        raise box["error"]
    return box["value"]


def sample_targeted(
    vg: ValidatedGrammar,
    var,
    n: int,
    rng: Rng | None = None,
    *,
    mode: str = "exact",
    eps: float = 0.1,
    x: float | None = None,
    table=None,
    max_attempts: int | None = None,
    keep_symmetry: bool = False,
    return_attempts: bool = False,
):
    """Uniform sampling at a target size by rejection.

    mode "exact" keeps only size n; mode "approx" keeps sizes within a
    relative tolerance eps of n.  The parameter defaults to the dominant
    singularity, and attempts abort early once they exceed the window.
    """
    if not isinstance(vg, ValidatedGrammar):
        raise UsageError("sampling needs a validated grammar")
    if rng is None:
        raise UsageError("sampling needs an explicit Rng")
    if not isinstance(n, int) or n < 0:
        raise UsageError("the target size must be a nonnegative integer")
    target = _target_name(var)
    if target not in vg.grammar.equations:
        raise UsageError(f"unknown variable {target!r}")
    lo, hi = _size_window(n, mode, eps)
    reachable = _window_reachable(vg, var, lo, hi)
    if reachable is False:
        raise AdmissibilityError(
            f"no structure of {target} has size in [{lo}, {hi}]"
        )
    if table is None:
        table = _default_table(vg, target, x)

    def attempts_loop():
        session = _Session(vg, table, rng, max_size=hi)
        attempts = 0
        while max_attempts is None or attempts < max_attempts:
            attempts += 1
            session.reset_budget()
            try:
                sym = session.sample(target, 1)
            except _AbortSize:
                continue
            if lo <= session.atoms_made <= hi:
                return sym, attempts
        raise UsageError(
            f"gave up after {max_attempts} attempts targeting size {n}"
        )

    def run():
        sym, attempts = attempts_loop()
        got = _finalize(sym, isinstance(var, UnpointQuery), keep_symmetry, False, rng)
        return got, attempts

    got, attempts = _run_deep(run, deep=hi > 400)
    if return_attempts:
        return got, attempts
    return got
