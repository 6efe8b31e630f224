"""Floating-point evaluation of grammar series, singularity location, and
square-root constant fitting.

Evaluates every variable's ordinary generating series at x, x^2, ..., x^k_max
by fixed-point iteration of the equation system with s_i replaced by the value
at x^i.  Pointed variables evaluate to x^i * d/dx of their unpointed partner,
so derivative values come for free when the grammar declares pairs; otherwise
central finite differences fill the gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import zindex as zx
from .errors import AdmissibilityError, InternalConsistencyError, UsageError
from .grammar import (
    Basic,
    PProd,
    PSubst,
    Prod,
    Ref,
    Subst,
    Sum,
    Terminal,
    ValidatedGrammar,
)

VALUE_CAP = 1e12
MAX_ROUNDS = 10_000
_TOL_BITS_CAP = 48
_PROBE_POWER_CAP = 2048
_POWER_HARD_CAP = 1 << 20
_ENTIRE_PROBE = 1.0 - 2.0**-20


class _Diverged(Exception):
    pass


@dataclass(frozen=True)
class EvalTable:
    """Immutable table of series values at the powers x^1 .. x^k_max."""

    x: float
    k_max: int
    precision_bits: int
    rounds: int
    residual: float
    _values: dict[str, tuple[float, ...]]
    _derivs: dict[str, dict[int, float]]
    _partners: dict[str, str]

    def variables(self) -> list[str]:
        return list(self._values)

    def _check(self, var: str, i: int) -> None:
        if var not in self._values:
            raise UsageError(f"unknown variable {var!r}")
        if not 1 <= i <= self.k_max:
            raise UsageError(f"power index {i} outside 1..{self.k_max}")

    def value(self, var: str, i: int = 1) -> float:
        self._check(var, i)
        return self._values[var][i]

    def deriv(self, var: str, i: int = 1) -> float:
        """x^i * d/dx of var's series at x^i."""
        self._check(var, i)
        partner = self._partners.get(var)
        if partner is not None:
            return self._values[partner][i]
        got = self._derivs.get(var, {}).get(i)
        if got is None:
            raise UsageError(
                f"no derivative data for {var!r} at power {i}; declare a pair "
                "partner or request finite-difference derivatives"
            )
        return got

    def as_dict(self) -> dict:
        return {
            "x": self.x,
            "k_max": self.k_max,
            "precision_bits": self.precision_bits,
            "rounds": self.rounds,
            "residual": self.residual,
            "values": {v: list(vals[1:]) for v, vals in self._values.items()},
            "pointed_partner_of": dict(self._partners),
        }


@dataclass(frozen=True)
class SingularityResult:
    rho: float
    entire: bool


@dataclass(frozen=True)
class SingularFit:
    rho: float
    a: float
    c: float
    amplitude: float
    residual: float
    warning: str | None


def _require_validated(vg) -> ValidatedGrammar:
    if not isinstance(vg, ValidatedGrammar):
        raise UsageError("a validated grammar is required")
    return vg


def _k_max_for(x: float, precision_bits: int) -> int:
    if x == 0.0:
        return 1
    k = max(1, math.ceil(precision_bits / math.log2(1.0 / x)))
    if k > _POWER_HARD_CAP:
        raise UsageError(
            f"x = {x} is too close to 1 for {precision_bits} bits of precision"
        )
    return k


class _Evaluator:
    """One fixpoint run of the numeric system at a single base point."""

    def __init__(
        self,
        vg: ValidatedGrammar,
        x: float,
        k_max: int,
        precision_bits: int,
        plain_only: bool = False,
    ):
        g = vg.grammar
        self.vg = vg
        self.x = x
        self.k = k_max
        self.bits = precision_bits
        self.plain_only = plain_only
        if plain_only:
            self.names = [v for v in g.equations if vg.sorts[v] == "unpointed"]
        else:
            self.names = list(g.equations)
        self.eqs = g.equations
        # plain var -> its declared pointed companion
        self.partner = {plain: po for po, plain in g.pairs.items()}
        self.vals: dict[str, list[float]] = {
            v: [0.0] * (k_max + 1) for v in self.names
        }
        self.xpow = [x**i for i in range(k_max + 1)]
        self.fd_cache: dict[tuple[str, int], float] = {}
        self._plain_point_cache: dict[float, dict[str, float]] = {}
        self._mono_cache: dict = {}
        self._phi_cache: dict[int, int] = {}
        self.rounds = 0
        self.residual = 0.0

    # ---- parameter access ------------------------------------------------

    def _phi(self, n: int) -> int:
        got = self._phi_cache.get(n)
        if got is None:
            got = zx.phi(n)
            self._phi_cache[n] = got
        return got

    def _argval(self, arg: str | None, u: int) -> float:
        if u > self.k:
            return 0.0
        if arg is None:
            return self.xpow[u]
        return self.vals[arg][u]

    def _deriv(self, arg: str | None, u: int) -> float:
        if u > self.k:
            return 0.0
        if arg is None:
            return self.xpow[u]
        partner = self.partner.get(arg)
        if partner is not None and partner in self.vals:
            return self.vals[partner][u]
        return self._fd(arg, u)

    def _plain_value_at(self, base: float, var: str) -> float:
        got = self._plain_point_cache.get(base)
        if got is None:
            k = _k_max_for(base, self.bits)
            sub = _Evaluator(self.vg, base, k, self.bits, plain_only=True)
            sub.run(MAX_ROUNDS)
            got = {v: sub.vals[v][1] for v in sub.names}
            self._plain_point_cache[base] = got
        return got[var]

    def _fd(self, var: str, u: int) -> float:
        """Central finite difference for x^u * d/dx at x^u."""
        got = self.fd_cache.get((var, u))
        if got is not None:
            return got
        y = self.x**u
        h = 2.0 ** (-self.bits / 3.0)
        h = min(h, y / 2.0, (1.0 - y) / 2.0)
        if h <= 0.0:
            raise UsageError(
                f"cannot take finite differences for {var!r} at x^{u} = {y}"
            )
        hi = self._plain_value_at(y + h, var)
        lo = self._plain_value_at(y - h, var)
        val = y * (hi - lo) / (2.0 * h)
        self.fd_cache[(var, u)] = val
        return val

    # ---- expression evaluation at one power --------------------------------

    def _eval(self, e, i: int) -> float:
        if isinstance(e, Ref):
            return self.vals[e.name][i]
        if isinstance(e, Sum):
            return self._eval(e.a, i) + self._eval(e.b, i)
        if isinstance(e, (Prod, PProd)):
            return self._eval(e.a, i) * self._eval(e.b, i)
        if isinstance(e, Subst):
            return self._subst(e.core, _argname(e.arg), i)
        if isinstance(e, PSubst):
            return self._psubst(e.core, _argname(e.arg), i)
        if isinstance(e, Basic):
            return self._basic(e, i)
        raise InternalConsistencyError(f"unexpected expression node {e!r}")

    def _basic(self, e: Basic, i: int) -> float:
        if e.pointing == "none":
            if e.kind == "X":
                return self.xpow[i]
            if e.kind == "One":
                return 1.0
            if e.kind == "Zero":
                return 0.0
            if e.size is not None:
                return self.x ** (i * e.size)
            return self._subst(e, None, i)
        if e.kind == "X":
            return self.xpow[i]
        if e.kind in ("One", "Zero"):
            return 0.0
        return self._psubst(e, None, i)

    def _mono_value(self, monos, arg: str | None, i: int) -> float:
        total = 0.0
        for c, skey, t in monos:
            v = c
            for j, exp in skey:
                v *= self._argval(arg, i * j) ** exp
            if t is not None:
                v *= self._deriv(arg, i * t)
            total += v
        return total

    def _terminal_monos(self, name: str):
        got = self._mono_cache.get(name)
        if got is None:
            cis = self.vg.grammar.terminal_series[name].cis(self.k)
            got = [(float(c), skey, t) for (skey, t), c in cis.terms.items()]
            self._mono_cache[name] = got
        return got

    def _sized_pointed_monos(self, kind: str, mode: str, size: int):
        key = (kind, mode, size)
        got = self._mono_cache.get(key)
        if got is None:
            pcs = zx.basic_pointed_series(kind, mode, size, min(size, self.k))
            got = [(float(c), skey, t) for (skey, t), c in pcs.terms.items()]
            self._mono_cache[key] = got
        return got

    def _subst(self, core, arg: str | None, i: int) -> float:
        if isinstance(core, Terminal):
            ts = self.vg.grammar.terminal_series[core.name]
            hook = getattr(ts, "float_value", None)
            if hook is not None:
                return hook(lambda r: self._argval(arg, i * r))
            return self._mono_value(self._terminal_monos(core.name), arg, i)
        kind, size = core.kind, core.size
        if size is None:
            if kind == "Seq":
                g1 = self._argval(arg, i)
                if g1 >= 1.0:
                    raise _Diverged
                return 1.0 / (1.0 - g1)
            if kind == "Set":
                acc = 0.0
                for r in range(1, self.k // i + 1):
                    acc += self._argval(arg, i * r) / r
                return math.exp(acc)
            # Cyc
            acc = 1.0
            for r in range(1, self.k // i + 1):
                gr = self._argval(arg, i * r)
                if gr >= 1.0:
                    raise _Diverged
                acc += self._phi(r) / r * (-math.log1p(-gr))
            return acc
        if kind == "Seq":
            return self._argval(arg, i) ** size
        if kind == "Set":
            h = [1.0] + [0.0] * size
            for j in range(1, size + 1):
                h[j] = sum(self._argval(arg, i * r) * h[j - r] for r in range(1, j + 1)) / j
            return h[size]
        # Cyc
        if size == 0:
            return 1.0
        acc = 0.0
        for r in zx.divisors(size):
            acc += self._phi(r) * self._argval(arg, i * r) ** (size // r)
        return acc / size

    def _psubst(self, core, arg: str | None, i: int) -> float:
        if isinstance(core, Terminal):
            ts = self.vg.grammar.terminal_series[core.name]
            hook = getattr(ts, "float_pointed_value", None)
            if hook is not None:
                return hook(
                    lambda r: self._argval(arg, i * r),
                    lambda l: self._deriv(arg, i * l),
                )
            return self._mono_value(self._terminal_monos(core.name), arg, i)
        kind, size = core.kind, core.size
        min_len = 2 if core.pointing == "symm" else 1
        if size is not None:
            return self._mono_value(
                self._sized_pointed_monos(kind, core.pointing, size), arg, i
            )
        if kind == "Seq":
            if min_len > 1:
                return 0.0
            g1 = self._argval(arg, i)
            if g1 >= 1.0:
                raise _Diverged
            return self._deriv(arg, i) / (1.0 - g1) ** 2
        if kind == "Set":
            marked = 0.0
            for l in range(min_len, self.k // i + 1):
                marked += self._deriv(arg, i * l)
            acc = 0.0
            for r in range(1, self.k // i + 1):
                acc += self._argval(arg, i * r) / r
            return marked * math.exp(acc)
        # Cyc
        acc = 0.0
        for l in range(min_len, self.k // i + 1):
            gl = self._argval(arg, i * l)
            if gl >= 1.0:
                raise _Diverged
            acc += self._phi(l) * self._deriv(arg, i * l) / (1.0 - gl)
        return acc

    # ---- fixpoint schedule -------------------------------------------------

    def _update_power(self, i: int) -> float:
        resid = 0.0
        for v in self.names:
            new = self._eval(self.eqs[v], i)
            if not math.isfinite(new):
                raise OverflowError(
                    f"non-finite value for {v!r} at power {i} during evaluation"
                )
            if new > VALUE_CAP:
                raise _Diverged
            rel = abs(new - self.vals[v][i]) / max(1.0, abs(new))
            if rel > resid:
                resid = rel
            self.vals[v][i] = new
        return resid

    def _tail_correct(self, i: int, rounds: int) -> None:
        """Extrapolate the remaining tail after an iteration-limit stop.

        Geometric tails use the observed contraction ratio; near-critical
        tails (ratio close to 1) use the algebraic-decay estimate.
        """
        before = {v: self.vals[v][i] for v in self.names}
        self._update_power(i)
        mid = {v: self.vals[v][i] for v in self.names}
        self._update_power(i)
        for v in self.names:
            d1 = mid[v] - before[v]
            d2 = self.vals[v][i] - mid[v]
            if d1 <= 0.0 or d2 <= 0.0 or d2 >= d1:
                continue
            r = d2 / d1
            if r > 0.995:
                p = max(-rounds * math.log(r) - 1.0, 0.05)
                tail = d2 * rounds / p
            else:
                tail = d2 * r / (1.0 - r)
            if math.isfinite(tail) and 0.0 < tail <= 0.1 * max(1.0, self.vals[v][i]):
                self.vals[v][i] += tail

    def run(self, max_rounds: int, tail_correct: bool = True) -> None:
        """Solve powers from k down to 1; each power is a small inner fixpoint.

        Values at power i only depend on powers i*r (r >= 1), so higher powers
        are final when power i starts and the inner loop couples variables at
        one power only.
        """
        tol = 2.0 ** -min(self.bits, _TOL_BITS_CAP)
        total = 0
        worst = 0.0
        for i in range(self.k, 0, -1):
            hist: list[float] = []
            done = False
            for _ in range(max_rounds):
                resid = self._update_power(i)
                hist.append(resid)
                total += 1
                if resid <= tol:
                    done = True
                    break
            if not done:
                # iteration limit: contracting runs are slow convergence,
                # everything else is divergence
                half = hist[len(hist) // 2]
                if not (hist[-1] < 0.5 * half and hist[-1] < 1e-2):
                    raise _Diverged
                if tail_correct:
                    self._tail_correct(i, max_rounds)
            worst = max(worst, hist[-1])
        self.rounds = total
        self.residual = worst


def _argname(arg) -> str:
    if not isinstance(arg, Ref):
        raise InternalConsistencyError("substitution argument must be a variable")
    return arg.name


def eval_system(
    vg: ValidatedGrammar,
    x: float,
    precision_bits: int = 64,
    max_rounds: int = MAX_ROUNDS,
    fd_derivs: tuple[str, ...] = (),
) -> EvalTable:
    """Evaluate every variable's series at x, x^2, ..., x^k_max.

    fd_derivs lists unpointed variables whose derivative values should be
    filled by finite differences at every power even when no pointed partner
    is declared.
    """
    _require_validated(vg)
    x = float(x)
    if not 0.0 <= x < 1.0:
        raise UsageError("evaluation point must satisfy 0 <= x < 1")
    if precision_bits < 1:
        raise UsageError("precision_bits must be positive")
    k_max = _k_max_for(x, precision_bits)
    ev = _Evaluator(vg, x, k_max, precision_bits)
    try:
        ev.run(max_rounds)
    except _Diverged:
        raise AdmissibilityError(
            f"series evaluation diverges at x = {x}; the point lies at or "
            "beyond the dominant singularity"
        ) from None
    for var in fd_derivs:
        if vg.sorts.get(var) != "unpointed":
            raise UsageError(f"finite differences need an unpointed variable, not {var!r}")
        for i in range(1, k_max + 1):
            ev._fd(var, i)
    derivs: dict[str, dict[int, float]] = {}
    for (var, u), val in ev.fd_cache.items():
        derivs.setdefault(var, {})[u] = val
    partners = {plain: po for po, plain in vg.grammar.pairs.items()}
    return EvalTable(
        x=x,
        k_max=k_max,
        precision_bits=precision_bits,
        rounds=ev.rounds,
        residual=ev.residual,
        _values={v: tuple(vals) for v, vals in ev.vals.items()},
        _derivs=derivs,
        _partners=partners,
    )


def table_evaluator(vg: ValidatedGrammar, table: EvalTable):
    """Closure evaluating expressions at x**power from a finished table."""
    _require_validated(vg)
    ev = _Evaluator(vg, table.x, table.k_max, table.precision_bits)
    for v in ev.names:
        ev.vals[v] = list(table._values[v])
    for var, per_power in table._derivs.items():
        for u, val in per_power.items():
            ev.fd_cache[(var, u)] = val

    def value(expr, power: int = 1) -> float:
        if not 1 <= power <= table.k_max:
            raise UsageError(f"power index {power} outside 1..{table.k_max}")
        return ev._eval(expr, power)

    return value


def _converges(vg: ValidatedGrammar, x: float, rounds: int) -> bool:
    if x <= 0.0:
        return True
    # clamped power cutoff: probing near 1 only needs divergence detection
    k_max = min(
        max(1, math.ceil(64 / math.log2(1.0 / x))) if x < 1.0 else _PROBE_POWER_CAP,
        _PROBE_POWER_CAP,
    )
    ev = _Evaluator(vg, x, k_max, 64, plain_only=True)
    try:
        ev.run(rounds, tail_correct=False)
        return True
    except (_Diverged, OverflowError):
        return False


def find_singularity(
    vg: ValidatedGrammar,
    var: str | None = None,
    tol: float = 1e-12,
    probe_rounds: int = MAX_ROUNDS,
) -> SingularityResult:
    """Bisect for the dominant singularity of the system's series.

    All variables of an interconnected admissible system share the radius, so
    var only selects the grammar (and is checked for existence).
    """
    _require_validated(vg)
    if var is None:
        var = vg.root
    if var not in vg.grammar.equations:
        raise UsageError(f"unknown variable {var!r}")
    if _converges(vg, _ENTIRE_PROBE, probe_rounds):
        return SingularityResult(1.0, True)
    lo, hi = 0.0, _ENTIRE_PROBE
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if _converges(vg, mid, probe_rounds):
            lo = mid
        else:
            hi = mid
    return SingularityResult((lo + hi) / 2.0, False)


def fit_singular_constants(
    vg: ValidatedGrammar,
    var: str | None = None,
    rho: float | None = None,
    ladder: tuple[int, int] = (8, 18),
) -> SingularFit:
    """Fit A - a*sqrt(1 - x/rho) to var's series on a geometric ladder.

    The ladder points are x_j = rho*(1 - 2^-j); a quadratic nuisance term in
    sqrt(1 - x/rho) absorbs the next-order correction so the fitted a is not
    biased by it.  Returns c = a / (2*sqrt(pi)).
    """
    _require_validated(vg)
    if var is None:
        var = vg.root
    if var not in vg.grammar.equations:
        raise UsageError(f"unknown variable {var!r}")
    if rho is None:
        found = find_singularity(vg)
        if found.entire:
            raise UsageError(
                "no singularity below 1 was found; a square-root fit does not apply"
            )
        rho = found.rho
    if not 0.0 < rho < 1.0:
        raise UsageError("rho must lie in (0, 1)")
    plain_only = vg.sorts[var] == "unpointed"
    lo_j, hi_j = ladder
    if not 1 <= lo_j < hi_j:
        raise UsageError("ladder must be an increasing pair of positive exponents")
    us = []
    values = []
    for j in range(lo_j, hi_j + 1):
        xj = rho * (1.0 - 2.0**-j)
        ev = _Evaluator(vg, xj, _k_max_for(xj, 64), 64, plain_only=plain_only)
        try:
            ev.run(MAX_ROUNDS)
        except _Diverged:
            raise AdmissibilityError(
                f"series evaluation diverges at ladder point x = {xj}; "
                "rho is likely overestimated"
            ) from None
        us.append(2.0 ** (-j / 2.0))
        values.append(ev.vals[var][1])
    u = np.asarray(us)
    v = np.asarray(values)
    design = np.column_stack([np.ones_like(u), -u, u * u])
    coeffs, *_ = np.linalg.lstsq(design, v, rcond=None)
    amplitude, a = float(coeffs[0]), float(coeffs[1])
    pred = design @ coeffs
    scale = float(np.sqrt(np.mean(v * v))) or 1.0
    residual = float(np.sqrt(np.mean((pred - v) ** 2))) / scale
    warning = None
    if residual > 1e-3:
        warning = (
            f"relative fit residual {residual:.3g} is too large for a "
            "square-root singularity; the fitted constants are unreliable"
        )
    c = a / (2.0 * math.sqrt(math.pi))
    return SingularFit(
        rho=rho, a=a, c=c, amplitude=amplitude, residual=residual, warning=warning
    )
