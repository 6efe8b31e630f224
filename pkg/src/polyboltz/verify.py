"""End-to-end verification: counts, constants, sampler behavior, scaling.

Each check solves real systems or draws real samples and returns a
CheckResult; run_checks drives any subset.  The sampler checks draw tens of
thousands of structures, so a full run takes minutes.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

from . import counting as ct
from . import families as fam
from . import oracle as orc
from . import sampler as sm
from . import zindex as zx
from .errors import InternalConsistencyError, UsageError
from .sampler import (
    Rng,
    atoms_of,
    resolve_substitutions,
    sample_boltzmann,
    sample_targeted,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _done(name: str, passed: bool, detail: str, t0: float) -> CheckResult:
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


@lru_cache(maxsize=None)
def _solved(name: str, n_max: int, omega: tuple | None = None):
    kwargs = {"omega": omega} if omega is not None else {}
    spec = fam.family(name, **kwargs)
    return spec, ct.solve(spec.vg, n_max)


@lru_cache(maxsize=None)
def _table(name: str):
    spec = fam.family(name)
    return sm._default_table(spec.vg, spec.pointed_var or spec.sample_query, None)


# ------------------------------------------------- independent tree references


def rooted_tree_series(n_max: int) -> list[int]:
    """Rooted tree counts from the divisor-sum recurrence, no cycle indices."""
    r = [0] * (n_max + 1)
    if n_max >= 1:
        r[1] = 1
    dsum = [0] * (n_max + 1)
    for n in range(1, n_max):
        for d in zx.divisors(n):
            dsum[n] += d * r[d]
        acc = 0
        for k in range(1, n + 1):
            acc += dsum[k] * r[n - k + 1]
        r[n + 1] = acc // n
    if n_max >= 1:
        for d in zx.divisors(n_max):
            dsum[n_max] += d * r[d]
    return r


def free_tree_series(n_max: int) -> list[int]:
    """Free tree counts via the rooted series: F = R - (R^2 - R(x^2))/2."""
    r = rooted_tree_series(n_max)
    f = [0] * (n_max + 1)
    for n in range(1, n_max + 1):
        conv = sum(r[i] * r[n - i] for i in range(1, n))
        even = r[n // 2] if n % 2 == 0 else 0
        if (conv - even) % 2:
            raise InternalConsistencyError(f"tree pairing parity broke at n={n}")
        f[n] = r[n] - (conv - even) // 2
    return f


def prufer_orbit_count(n: int) -> int:
    """Count free trees on n vertices by decoding every Pruefer sequence."""
    if n <= 2:
        return 1
    seen = set()
    for seq in itertools.product(range(n), repeat=n - 2):
        deg = [1] * n
        for v in seq:
            deg[v] += 1
        adj = [[] for _ in range(n)]
        # linear-time decode with a moving pointer over the smallest leaf
        ptr = 0
        leaf = -1
        for v in seq:
            if leaf < 0:
                while deg[ptr] != 1:
                    ptr += 1
                leaf = ptr
                ptr += 1
            adj[leaf].append(v)
            adj[v].append(leaf)
            deg[leaf] -= 1
            deg[v] -= 1
            leaf = v if deg[v] == 1 and v < ptr else -1
        a, b = (v for v in range(n) if deg[v] == 1)
        adj[a].append(b)
        adj[b].append(a)
        seen.add(_center_certificate(n, adj))
    return len(seen)


def _center_certificate(n: int, adj: list) -> str:
    if n == 1:
        return "()"
    deg = [len(a) for a in adj]
    alive = n
    layer = [v for v in range(n) if deg[v] == 1]
    while alive > 2:
        nxt = []
        for v in layer:
            alive -= 1
            for w in adj[v]:
                deg[w] -= 1
                if deg[w] == 1:
                    nxt.append(w)
        layer = nxt
    centers = sorted(layer)

    def code(v: int, parent: int) -> str:
        kids = sorted(code(w, v) for w in adj[v] if w != parent)
        return "(" + "".join(kids) + ")"

    if len(centers) == 1:
        return code(centers[0], -1)
    a, b = centers
    return min(code(a, b) + code(b, a), code(b, a) + code(a, b))


# ---------------------------------------------------------------- the checks


CACTI_COUNTS = [1, 1, 2, 4, 9, 23, 63]
OUTERPLANAR_COUNTS = [1, 1, 2, 5, 13, 46, 172]
TRIVALENT_COUNTS = [1, 1, 1, 1, 2, 2, 4, 6, 11, 18, 37, 66, 135, 265, 552, 1132]
RHO_REF = 0.33832
C_REF = 0.43922


def check_cacti_counts() -> CheckResult:
    """Cacti counts for n = 1..7 at truncation 30, in under one second."""
    spec = fam.family("cacti")
    t0 = time.perf_counter()
    sys_ = ct.solve(spec.vg, 30)
    got = [ct.count(sys_, spec.count_query, n) for n in range(1, 31)]
    dt = time.perf_counter() - t0
    ok = got[:7] == CACTI_COUNTS and dt < 1.0
    return _done(
        "cacti-counts",
        ok,
        f"counts(1..7)={got[:7]} want {CACTI_COUNTS}; solve+count {dt:.2f}s (< 1s)",
        t0,
    )


def check_outerplanar_counts() -> CheckResult:
    """Outerplanar counts for n = 1..7 at truncation 30, in under five seconds."""
    spec = fam.family("outerplanar")
    t0 = time.perf_counter()
    sys_ = ct.solve(spec.vg, 30)
    got = [ct.count(sys_, spec.count_query, n) for n in range(1, 31)]
    dt = time.perf_counter() - t0
    ok = got[:7] == OUTERPLANAR_COUNTS and dt < 5.0
    return _done(
        "outerplanar-counts",
        ok,
        f"counts(1..7)={got[:7]} want {OUTERPLANAR_COUNTS}; solve+count {dt:.2f}s (< 5s)",
        t0,
    )


def check_trivalent_counts() -> CheckResult:
    """Trees with degrees in {1,3}, by internal vertices: sixteen exact values."""
    t0 = time.perf_counter()
    spec, sys_ = _solved("omega_trees", 32, omega=(1, 3))
    got = [
        ct.count(sys_, spec.count_query, spec.internal_to_size(i)) for i in range(16)
    ]
    ok = got == TRIVALENT_COUNTS
    return _done(
        "trivalent-counts", ok, f"by internal vertices 0..15: {got}", t0
    )


def check_free_tree_counts() -> CheckResult:
    """Free trees: orbit brute force for n <= 9, unbiased pointing to n = 50."""
    t0 = time.perf_counter()
    spec, sys_ = _solved("free_trees", 50)
    got = [ct.count(sys_, spec.count_query, n) for n in range(1, 51)]
    brute = [prufer_orbit_count(n) for n in range(1, 10)]
    otter = free_tree_series(50)
    pointed_ok = all(
        ct.count(sys_, spec.pointed_var, n) == n * otter[n] for n in range(1, 51)
    )
    ok = got[:9] == brute and got == otter[1:] and pointed_ok
    return _done(
        "free-tree-counts",
        ok,
        f"grammar(1..9)={got[:9]} brute={brute}; "
        f"pointed coefficient = n * count up to n=50: {pointed_ok}",
        t0,
    )


def check_plane_tree_counts() -> CheckResult:
    """Plane trees against the edge formula; d-regular against its formula."""
    t0 = time.perf_counter()
    spec, sys_ = _solved("plane_trees", 13)
    plane_ok = all(
        ct.count(sys_, spec.count_query, e + 1) == ct.plane_tree_count(e)
        for e in range(1, 13)
    )
    reg_ok = True
    for d in (3, 4):
        specd = fam.family("d_regular_plane_trees", d=d)
        top = specd.internal_to_size(8)
        sysd = ct.solve(specd.vg, top)
        for i in range(1, 9):
            got = ct.count(sysd, specd.count_query, specd.internal_to_size(i))
            if got != ct.d_regular_plane_tree_count(i, d):
                reg_ok = False
    ok = plane_ok and reg_ok
    return _done(
        "plane-tree-counts",
        ok,
        f"edge formula to 12 edges: {plane_ok}; "
        f"d in {{3,4}} to 8 internal vertices: {reg_ok}",
        t0,
    )


def check_map_counts() -> CheckResult:
    """Two-connected maps: integrality, closed form vs series path, t_1 = 2."""
    t0 = time.perf_counter()
    closed = [ct.map_2conn_counts(n) for n in range(1, 31)]
    series = ct._map_counts_from_series(20)
    agree = [closed[n - 1] == series[n - 1] for n in range(1, 21)]
    ok = all(agree) and closed[0][2] == 2
    return _done(
        "map-counts",
        ok,
        f"t_n integral to n=30; closed = series to n=20: {all(agree)}; "
        f"t_1 = {closed[0][2]}",
        t0,
    )


def check_singularity_constants() -> CheckResult:
    """Radius and amplitude of rooted trees; free-tree asymptotic ratio."""
    t0 = time.perf_counter()
    spec = fam.family("rooted_trees")
    fit = orc.fit_singular_constants(spec.vg, "R")
    rho_ok = abs(fit.rho - RHO_REF) <= 1e-4
    c_ok = abs(fit.c - C_REF) <= 0.01 * C_REF
    n = 500
    f_n = free_tree_series(n)[n]
    log_pred = (
        math.log(2 * math.pi) + 3 * math.log(fit.c)
        - 2.5 * math.log(n) - n * math.log(fit.rho)
    )
    ratio = math.exp(math.log(f_n) - log_pred)
    ratio_ok = 0.95 <= ratio <= 1.05
    dt = time.perf_counter() - t0
    ok = rho_ok and c_ok and ratio_ok and dt < 30.0
    return _done(
        "singularity-constants",
        ok,
        f"rho={fit.rho:.6f} (ref {RHO_REF}); c={fit.c:.5f} (ref {C_REF}); "
        f"F_500 ratio={ratio:.4f} in [0.95,1.05]; {dt:.1f}s (< 30s)",
        t0,
    )


def _cycles_perm(cycles) -> dict:
    perm = {}
    for c in cycles:
        for j, a in enumerate(c):
            perm[a] = c[(j + 1) % len(c)]
    return perm


def _is_rotation(a: tuple, b: tuple) -> bool:
    if len(a) != len(b):
        return False
    if not a:
        return True
    return any(b[k:] + b[:k] == a for k in range(len(b)))


def _automorphism_ok(name: str, st, perm: dict) -> bool:
    if name in ("rooted_trees", "free_trees"):
        adj = fam._tree_adjacency(st)
        edges = {frozenset((v, w)) for v in adj for w in adj[v]}
        if {frozenset((perm[v], perm[w])) for e in edges for v, w in [tuple(e)]} != edges:
            return False
        if name == "rooted_trees":
            root, _ = fam._pair_sides(st)
            return perm[root] == root
        return True
    if name == "plane_trees":
        emb = fam._plane_embedding(st, False)
        for key, nbrs in emb.items():
            mapped = tuple(("a", perm[k[1]]) for k in nbrs)
            target = tuple(emb[("a", perm[key[1]])])
            if not _is_rotation(mapped, target):
                return False
        return True
    # cacti: the permutation must fix the edge set of the underlying graph
    verts, edges = fam._graph_edges(st)
    return {frozenset(perm[a] for a in e) for e in edges} == edges


def check_sampler_soundness(draws: int = 10000) -> CheckResult:
    """Ten thousand draws per family keep valid symmetries and labels."""
    t0 = time.perf_counter()
    fails = []
    for name, seed in (
        ("rooted_trees", 101),
        ("free_trees", 102),
        ("plane_trees", 103),
        ("cacti", 104),
    ):
        spec = fam.family(name)
        table = _table(name)
        pointed = spec.pointed_var is not None
        var = spec.pointed_var if pointed else spec.sample_query
        rng = Rng(seed)
        bad = 0
        for i in range(draws):
            n = 1 + (i % 12)
            drawn = sample_targeted(
                spec.vg, var, n, rng, table=table, keep_symmetry=True
            )
            if pointed:
                sym = drawn.symmetry
                if drawn.root not in sym.cycles[drawn.marked_cycle]:
                    bad += 1
                    continue
            else:
                sym = drawn
            st = resolve_substitutions(sym.structure)
            atoms = sorted(atoms_of(st))
            support = sorted(a for c in sym.cycles for a in c)
            if len(atoms) != n or len(set(atoms)) != n or atoms != support:
                bad += 1
                continue
            if not _automorphism_ok(name, st, _cycles_perm(sym.cycles)):
                bad += 1
        if bad:
            fails.append(f"{name}: {bad}/{draws}")
    ok = not fails
    return _done(
        "sampler-soundness",
        ok,
        f"{draws} draws x 4 families, failures: " + (", ".join(fails) or "none"),
        t0,
    )


def _chi_square_p(observed: list, expected: list) -> float:
    from scipy.stats import chisquare

    return float(chisquare(observed, f_exp=expected).pvalue)


def check_sample_uniformity(draws: int = 50000, size_draws: int = 30000) -> CheckResult:
    """Exact-size draws are uniform over classes; sizes follow the weights."""
    t0 = time.perf_counter()
    parts = []
    ok = True
    for name, n, seed in (
        ("free_trees", 8, 211),
        ("cacti", 6, 212),
        ("plane_trees", 7, 213),
    ):
        spec, sys_ = _solved(name, n)
        classes = ct.count(sys_, spec.count_query, n)
        table = _table(name)
        rng = Rng(seed)
        seen: dict = {}
        for _ in range(draws):
            s = sample_targeted(spec.vg, spec.sample_query, n, rng, table=table)
            key = fam.canonical_form(s, spec)
            seen[key] = seen.get(key, 0) + 1
        if len(seen) != classes:
            ok = False
            parts.append(f"{name} n={n}: {len(seen)} classes, want {classes}")
            continue
        p = _chi_square_p(list(seen.values()), [draws / classes] * classes)
        if p <= 0.001:
            ok = False
        parts.append(f"{name} n={n}: {classes} classes, p={p:.4f}")

    # size distribution in free mode against the weights a_n x^n
    x = 0.3
    spec, sys_ = _solved("rooted_trees", 10)
    weights = [ct.count(sys_, "R", k) * x**k for k in range(1, 11)]
    total = sum(weights)
    rng = Rng(214)
    observed = [0] * 10
    kept = 0
    for _ in range(size_draws):
        s = sample_boltzmann(spec.vg, "R", x=x, rng=rng)
        size = sum(1 for _ in atoms_of(s))
        if 1 <= size <= 10:
            observed[size - 1] += 1
            kept += 1
    expected = [kept * w / total for w in weights]
    p_size = _chi_square_p(observed, expected)
    if p_size <= 0.001:
        ok = False
    parts.append(f"sizes<=10 at x={x}: p={p_size:.4f} ({kept} kept)")
    return _done("sample-uniformity", ok, "; ".join(parts), t0)


def _random_series(rng, trunc: int, inner: bool) -> zx.CycleIndexSeries:
    terms = {}
    for _ in range(rng.randint(1, 6)):
        budget = rng.randint(1 if inner else 0, trunc)
        skey = []
        while budget > 0 and len(skey) < 3:
            i = rng.randint(1, 4)
            if i > budget:
                continue
            e = rng.randint(1, budget // i)
            skey.append((i, e))
            budget -= i * e
        if inner and not skey:
            skey = [(1, 1)]
        coeff = Fraction(rng.choice([-3, -2, -1, 1, 2, 3]), rng.randint(1, 3))
        key = (tuple(skey), None)
        terms[key] = terms.get(key, Fraction(0)) + coeff
    return zx.CycleIndexSeries(trunc, terms)


def check_pointing_identities(cases: int = 50) -> CheckResult:
    """Pointing distributes over composition, products, and sums, exactly."""
    import random as pyrandom

    t0 = time.perf_counter()
    rng = pyrandom.Random(20260825)
    bad = []
    for case in range(cases):
        trunc = rng.randint(6, 12)
        f = _random_series(rng, trunc, inner=False)
        g = _random_series(rng, trunc, inner=True)
        h = _random_series(rng, trunc, inner=False)

        lhs = zx.delta_point(zx.plethysm(f, g), 1)
        rhs = zx.pointed_plethysm(zx.delta_point(f, 1), g)
        if zx.dump(lhs) != zx.dump(rhs):
            bad.append(f"case {case}: composition")

        lhs = zx.delta_point(zx.series_mul(f, h), 1)
        rhs = zx.series_add(
            zx.series_mul(zx.delta_point(f, 1), h),
            zx.series_mul(f, zx.delta_point(h, 1)),
        )
        if zx.dump(lhs) != zx.dump(rhs):
            bad.append(f"case {case}: product rule")

        lhs = zx.delta_point(zx.series_add(f, h), 1)
        rhs = zx.series_add(zx.delta_point(f, 1), zx.delta_point(h, 1))
        if zx.dump(lhs) != zx.dump(rhs):
            bad.append(f"case {case}: additivity")
    ok = not bad
    return _done(
        "pointing-identities",
        ok,
        f"{cases} random series triples: " + ("; ".join(bad) or "all identities hold"),
        t0,
    )


def check_sampling_speed() -> CheckResult:
    """Approximate-size draws scale about linearly up to one hundred thousand."""
    t0 = time.perf_counter()
    spec = fam.family("free_trees")
    table = _table("free_trees")
    rng = Rng(31415)
    means = {}
    worst_big = 0.0
    for n, reps in ((1000, 6), (10000, 4), (100000, 2)):
        times = []
        for _ in range(reps):
            t1 = time.perf_counter()
            sample_targeted(
                spec.vg, spec.sample_query, n, rng, mode="approx", eps=0.1, table=table
            )
            times.append(time.perf_counter() - t1)
        means[n] = sum(times) / len(times)
        if n == 100000:
            worst_big = max(times)
    rates = [means[n] / n for n in means]
    spread = max(rates) / min(rates)
    ok = spread <= 4.0 and worst_big < 60.0
    detail = ", ".join(f"n={n}: {means[n]:.2f}s" for n in means)
    return _done(
        "sampling-speed",
        ok,
        f"{detail}; time/size spread {spread:.2f} (<= 4); "
        f"slowest n=100000 draw {worst_big:.1f}s (< 60s)",
        t0,
    )


CHECKS = {
    "cacti-counts": check_cacti_counts,
    "outerplanar-counts": check_outerplanar_counts,
    "trivalent-counts": check_trivalent_counts,
    "free-tree-counts": check_free_tree_counts,
    "plane-tree-counts": check_plane_tree_counts,
    "map-counts": check_map_counts,
    "singularity-constants": check_singularity_constants,
    "sampler-soundness": check_sampler_soundness,
    "sample-uniformity": check_sample_uniformity,
    "pointing-identities": check_pointing_identities,
    "sampling-speed": check_sampling_speed,
}


def run_checks(names=None) -> list[CheckResult]:
    if names is None:
        names = list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown verify suite(s): {', '.join(unknown)}")
    return [CHECKS[n]() for n in names]
