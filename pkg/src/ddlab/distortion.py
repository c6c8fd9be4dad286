"""Distortion functions ``phi >= 0`` with ``int phi^2 dmu = 1`` and their toolkit.

A distortion turns the Ornstein-Uhlenbeck drift ``-x`` into
``-x + 2 grad(phi)/phi``; where ``phi`` vanishes that extra term blows up,
which is the singular regime the built-in ``tanh`` and ``bump`` limits live in.

All point arguments are arrays whose last axis has length ``d``; values come
back with that axis removed, gradients keep it.

Family strings (CLI grammar)::

    unit()  tilt(a=0.5)  tilt(a=[0.5,0.2])  tanh(kappa=1.0)
    bump(n=8)  bump(n=inf,radius=1.5)  trunc(base=tanh(kappa=1.0),n=4)

Sequence strings::

    tilt_seq(a=1)  tanh_seq(kappa=1)  bump_seq()  trunc_seq(base=tanh(kappa=1))
    const(base=tilt(a=0.3))
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import integrate, optimize, stats

from ddlab.gaussian_space import SpaceConfig, expect_mu, hermite_rule


class FamilySpecError(ValueError):
    """A family or sequence string could not be parsed or instantiated."""


def _points(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != d:
        raise ValueError(f"expected points with last axis of length {d}, got shape {x.shape}")
    return x


def _fmt(v) -> str:
    if isinstance(v, Distortion):
        return v.spec
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt(float(u)) for u in v) + "]"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, float) and v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


class Distortion:
    """Base class: a nonnegative function with gradient on ``R^d``.

    Subclasses implement ``_value`` and ``_grad`` (and may override
    ``_log_grad`` with a form that stays accurate near zeros of ``phi``).
    """

    family = "abstract"
    zero_set: str | None = None
    notes = ""

    def __init__(self, d: int, params: dict):
        self.d = int(d)
        self.params = dict(params)

    # -- evaluation -------------------------------------------------------
    def value(self, x) -> np.ndarray:
        return self._value(_points(x, self.d))

    def grad(self, x) -> np.ndarray:
        return self._grad(_points(x, self.d))

    def log_grad(self, x) -> np.ndarray:
        """``grad(phi)/phi``; non-finite where ``phi == 0``."""
        return self._log_grad(_points(x, self.d))

    def _log_grad(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._grad(x) / self._value(x)[..., None]

    def __call__(self, x):
        return self.value(x)

    # -- metadata ---------------------------------------------------------
    @property
    def spec(self) -> str:
        inner = ",".join(f"{k}={_fmt(v)}" for k, v in self.params.items())
        return f"{self.family}({inner})"

    @property
    def sup(self) -> float:
        """Supremum of ``phi`` (``inf`` when unbounded)."""
        return math.inf

    @property
    def kinks(self) -> tuple[float, ...]:
        """Breakpoints for 1-d adaptive quadrature (non-smooth points)."""
        return ()

    def exact_from_normal(self, z: np.ndarray) -> np.ndarray | None:
        """Map standard normal draws to exact ``phi^2 mu`` draws, if the family can."""
        return None

    @property
    def is_unit(self) -> bool:
        return False

    def __repr__(self):
        return f"<Distortion {self.spec} d={self.d}>"


class Tilt(Distortion):
    """``phi(x) = exp(a.x/2 - |a|^2/4)``, so ``phi^2 mu = N(a, I)``.

    ``2 grad(phi)/phi == a`` everywhere; every moment is in closed form.
    """

    family = "tilt"
    notes = "Smooth, strictly positive; |grad phi|^p is integrable for every p."

    def __init__(self, a, d: int = 1):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        if a.size == 1 and d > 1:
            a = np.concatenate([a, np.zeros(d - 1)])
        if a.size != d:
            raise FamilySpecError(f"tilt direction has {a.size} components but d={d}")
        self.a = a
        self._half = a / 2.0
        self._c = float(a @ a) / 4.0
        param = float(a[0]) if d == 1 else [float(u) for u in a]
        super().__init__(d, {"a": param})

    def _value(self, x):
        return np.exp(x @ self._half - self._c)

    def _grad(self, x):
        return self._value(x)[..., None] * self._half

    def _log_grad(self, x):
        return np.broadcast_to(self._half, x.shape).copy()

    def exact_from_normal(self, z):
        return z + self.a

    @property
    def is_unit(self):
        return not np.any(self.a)

    @property
    def spec(self):
        if self.is_unit:
            return "unit()"
        return super().spec


def unit(d: int = 1) -> Tilt:
    """The constant distortion ``phi == 1`` (plain Ornstein-Uhlenbeck)."""
    return Tilt(np.zeros(d), d)


def _sech2(u):
    t = np.exp(-2.0 * np.abs(u))
    return 4.0 * t / (1.0 + t) ** 2


class Tanh(Distortion):
    """``phi(x) = c |tanh(kappa x)|`` on ``R``; vanishes at the origin.

    Near 0 the drift term is ``2/x``: a Bessel-like repulsion that keeps the
    continuous process off the zero set.
    """

    family = "tanh"
    zero_set = "{0}"
    notes = "grad phi is bounded (|grad phi| <= c*kappa), so phi is in D^1_p for every p."

    def __init__(self, kappa: float = 1.0, d: int = 1):
        if d != 1:
            raise FamilySpecError("tanh family is defined for d=1 only")
        if not kappa > 0:
            raise FamilySpecError("tanh needs kappa > 0")
        self.kappa = float(kappa)
        self.c = _tanh_norm(self.kappa)
        super().__init__(1, {"kappa": self.kappa})

    def _value(self, x):
        return self.c * np.abs(np.tanh(self.kappa * x[..., 0]))

    def _grad(self, x):
        u = self.kappa * x
        return self.c * self.kappa * np.sign(u) * _sech2(u)

    def _log_grad(self, x):
        with np.errstate(divide="ignore", over="ignore"):
            return 2.0 * self.kappa / np.sinh(2.0 * self.kappa * x)

    @property
    def sup(self):
        return self.c

    @property
    def kinks(self):
        return (0.0,)


@functools.lru_cache(maxsize=256)
def _tanh_norm(kappa: float) -> float:
    nodes, weights = hermite_rule(200, 1)
    return 1.0 / math.sqrt(float(weights @ np.tanh(kappa * nodes[:, 0]) ** 2))


class Bump(Distortion):
    """``phi_n^2 = (1 - (1 - 1/n) bump(x)) / Z_n^2`` for a radial bump of height 1.

    ``bump(x) = exp(-s/(1-s))`` with ``s = |x|^2/r^2`` inside the ball of radius
    ``r`` and 0 outside.  ``n = inf`` gives the limit, which vanishes at the
    origin like ``|x|``.
    """

    family = "bump"
    notes = "phi_n >= 1/sqrt(n) for finite n; the limit has bounded gradient, so every D^1_p norm is finite."

    def __init__(self, n: float = math.inf, radius: float = 1.0, d: int = 1):
        n = float(n)
        if not n >= 1:
            raise FamilySpecError("bump needs n >= 1")
        if not radius > 0:
            raise FamilySpecError("bump needs radius > 0")
        self.n = n
        self.radius = float(radius)
        self.q = 1.0 if math.isinf(n) else 1.0 - 1.0 / n
        self.Z = math.sqrt(1.0 - self.q * _bump_mass(self.radius, d))
        self.zero_set = "{0}" if self.q == 1.0 else None
        params = {"n": n} if radius == 1.0 else {"n": n, "radius": self.radius}
        super().__init__(d, params)

    def _parts(self, x):
        s = np.sum(x * x, axis=-1) / self.radius**2
        inside = s < 1.0
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            e = np.where(inside, s / (1.0 - s), np.inf)
            bump = np.exp(-e)
            if self.q == 1.0:
                g = -np.expm1(-e)
            else:
                g = 1.0 - self.q * bump
            scale = np.where(inside, self.q * bump * 2.0 / (self.radius**2 * (1.0 - s) ** 2), 0.0)
        grad_g = scale[..., None] * x
        return g, grad_g

    def _value(self, x):
        g, _ = self._parts(x)
        return np.sqrt(g) / self.Z

    def _grad(self, x):
        g, grad_g = self._parts(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = grad_g / (2.0 * np.sqrt(g)[..., None] * self.Z)
        return np.where(g[..., None] > 0, out, 0.0)

    def _log_grad(self, x):
        g, grad_g = self._parts(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            return grad_g / (2.0 * g[..., None])

    @property
    def sup(self):
        return 1.0 / self.Z

    @property
    def kinks(self):
        if self.d != 1:
            return ()
        return (-self.radius, 0.0, self.radius)


@functools.lru_cache(maxsize=64)
def _bump_mass(radius: float, d: int) -> float:
    """``int bump dmu`` via the radial (chi) law of ``|X|``."""
    chi = stats.chi(d)

    def f(r):
        s = r * r / radius**2
        return math.exp(-s / (1.0 - s)) * chi.pdf(r)

    val, _ = integrate.quad(f, 0.0, radius, epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


class Truncation(Distortion):
    """``psi^m = (1/m) v phi ^ m``; gradient ``grad phi`` strictly between the levels, 0 elsewhere.

    The result is not normalized.  On the level sets themselves the gradient
    is taken to be 0 (those sets are null for every built-in family).
    """

    family = "truncate"

    def __init__(self, base: Distortion, m: float):
        if not m >= 1:
            raise FamilySpecError(f"truncation level must be >= 1, got {m}")
        self.base = base
        self.m = float(m)
        self.lo = 1.0 / self.m
        self.hi = self.m
        super().__init__(base.d, {"base": base, "m": m})

    def _inside(self, v):
        return (v > self.lo) & (v < self.hi)

    def _value(self, x):
        return np.clip(self.base._value(x), self.lo, self.hi)

    def _grad(self, x):
        v = self.base._value(x)
        return np.where(self._inside(v)[..., None], self.base._grad(x), 0.0)

    def _log_grad(self, x):
        v = self.base._value(x)
        return np.where(self._inside(v)[..., None], self.base._log_grad(x), 0.0)

    @property
    def sup(self):
        return min(self.hi, self.base.sup)

    @property
    def kinks(self):
        if self.d != 1:
            return ()
        pts = set(self.base.kinks)
        pts.update(level_points(self.base, self.lo))
        pts.update(level_points(self.base, self.hi))
        return tuple(sorted(pts))


class Normalized(Distortion):
    """``phi / ||phi||_{L^2(mu)}``, normalizing constant computed once by quadrature."""

    def __init__(self, base: Distortion, space: SpaceConfig | None = None, spec: str | None = None):
        self.base = base
        if space is None:
            space = _normalization_space(base.d)
        self.Z = math.sqrt(expect_mu(space, lambda x: base.value(x) ** 2, base.kinks).value)
        if not self.Z > 0:
            raise FamilySpecError(f"cannot normalize {base.spec}: zero L2 norm")
        self._spec = spec or f"normalize(base={base.spec})"
        self.family = self._spec.split("(", 1)[0]
        self.zero_set = base.zero_set
        super().__init__(base.d, {})

    @property
    def spec(self):
        return self._spec

    def _value(self, x):
        return self.base._value(x) / self.Z

    def _grad(self, x):
        return self.base._grad(x) / self.Z

    def _log_grad(self, x):
        return self.base._log_grad(x)

    @property
    def sup(self):
        return self.base.sup / self.Z

    @property
    def kinks(self):
        return self.base.kinks


def _normalization_space(d):
    if d == 1:
        return SpaceConfig(d=1, method="adaptive", tol=1e-11)
    if d <= 3:
        return SpaceConfig(d=d, order=64 if d == 2 else 24)
    return SpaceConfig(d=d, method="monte_carlo", samples=200_000, seed=0)


def truncate(phi: Distortion, m: float) -> Truncation:
    """``(1/m) v phi ^ m`` with the matching gradient; unnormalized."""
    return Truncation(phi, m)


def normalize(phi: Distortion, space: SpaceConfig | None = None) -> Normalized:
    return Normalized(phi, space)


def trunc(base: Distortion, n: float) -> Normalized:
    """Family (d): ``normalize(truncate(base, n))``."""
    return Normalized(Truncation(base, n), spec=f"trunc(base={base.spec},n={_fmt(n)})")


def level_points(phi: Distortion, level: float, lo: float = -12.0, hi: float = 12.0, num: int = 24001) -> list[float]:
    """Points ``x`` in ``[lo, hi]`` (d = 1) where ``phi(x)`` crosses ``level``."""
    if phi.d != 1:
        return []
    xs = np.linspace(lo, hi, num)
    f = phi.value(xs[:, None]) - level
    out = []
    sgn = np.sign(f)
    for k in np.flatnonzero(sgn[:-1] * sgn[1:] < 0):
        r = optimize.brentq(lambda t: float(phi.value(np.array([[t]]))[0]) - level, xs[k], xs[k + 1], xtol=1e-14)
        out.append(r)
    out.extend(float(xs[k]) for k in np.flatnonzero(f == 0.0))
    return out


# ---------------------------------------------------------------------------
# drift


def distortion_term(phi: Distortion | None, x: np.ndarray, b_max: float) -> tuple[np.ndarray, np.ndarray]:
    """The clipped term ``2 grad(phi)/phi`` at points ``x``.

    Returns ``(term, clipped)``: ``|term| <= b_max`` everywhere, and
    ``clipped`` flags points where clipping happened or ``phi == 0`` (where
    the term is defined as 0).
    """
    if phi is None or phi.is_unit:
        return np.zeros_like(x), np.zeros(x.shape[:-1], dtype=bool)
    v = phi._value(x)
    zero = ~(v > 0)
    term = 2.0 * phi._log_grad(x)
    if x.shape[-1] == 1:
        a = np.abs(term[..., 0])
        over = ~(a <= b_max)
        if over.any():
            term = np.where(over[..., None], np.sign(term) * b_max, term)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            norm = np.sqrt(np.sum(term * term, axis=-1))
        over = ~(norm <= b_max)
        if over.any():
            with np.errstate(over="ignore", invalid="ignore"):
                scaled = term * (b_max / norm)[..., None]
                # infinite components: keep direction only
                inf = ~np.isfinite(norm)
                if inf.any():
                    s = np.where(np.isinf(term), np.sign(term), 0.0)
                    s = s / np.maximum(np.sqrt(np.sum(s * s, axis=-1, keepdims=True)), 1.0)
                    scaled = np.where(inf[..., None], s * b_max, scaled)
            term = np.where(over[..., None], scaled, term)
    term = np.where(zero[..., None] | np.isnan(term), 0.0, term)
    return term, zero | over


def drift(phi: Distortion | None, b_max: float = 1e4) -> Callable[[np.ndarray], np.ndarray]:
    """Vector field ``b(x) = -x + 2 grad(phi)/phi`` with the distortion term clipped to ``b_max``."""
    if not b_max > 0:
        raise ValueError("b_max must be positive")

    def b(x):
        x = np.asarray(x, dtype=float)
        term, _ = distortion_term(phi, x, b_max)
        return -x + term

    return b


# ---------------------------------------------------------------------------
# distances


def _both_kinks(*phis):
    pts = set()
    for p in phis:
        pts.update(p.kinks)
    return tuple(sorted(pts))


def d12_parts(phi1: Distortion, phi2: Distortion, space: SpaceConfig) -> tuple[float, float, float]:
    """``(int (phi1-phi2)^2, int |grad phi1 - grad phi2|^2, combined error)``."""
    pts = _both_kinks(phi1, phi2)
    a = expect_mu(space, lambda x: (phi1.value(x) - phi2.value(x)) ** 2, pts)
    b = expect_mu(space, lambda x: np.sum((phi1.grad(x) - phi2.grad(x)) ** 2, axis=-1), pts)
    return max(a.value, 0.0), max(b.value, 0.0), a.error + b.error


def d12_distance(phi1: Distortion, phi2: Distortion, space: SpaceConfig) -> float:
    """Sobolev distance ``||phi1 - phi2||_{D^1_2}``."""
    if phi1 is phi2:
        return 0.0
    l2, g2, _ = d12_parts(phi1, phi2, space)
    return math.sqrt(l2 + g2)


# ---------------------------------------------------------------------------
# sequences


@dataclass
class DistortionSequence:
    """``n -> phi_n`` with its limit; terms are built lazily and cached."""

    term_factory: Callable[[int], Distortion]
    limit: Distortion
    spec: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def term(self, n: int) -> Distortion:
        if n < 1:
            raise ValueError("sequence indices start at 1")
        if n not in self._cache:
            self._cache[n] = self.term_factory(n)
        return self._cache[n]

    __getitem__ = term

    def terms(self, ns: Iterable[int]) -> list[Distortion]:
        return [self.term(n) for n in ns]


def tilt_seq(a: float = 1.0, d: int = 1) -> DistortionSequence:
    """``tilt(a/n) -> unit``."""
    return DistortionSequence(lambda n: Tilt(np.asarray(a, dtype=float) / n, d), unit(d), f"tilt_seq(a={_fmt(a)})")


def tanh_seq(kappa: float = 1.0, d: int = 1) -> DistortionSequence:
    """``tanh(kappa + 2^-n) -> tanh(kappa)``."""
    return DistortionSequence(lambda n: Tanh(kappa + 2.0**-n, d), Tanh(kappa, d), f"tanh_seq(kappa={_fmt(kappa)})")


def bump_seq(radius: float = 1.0, d: int = 1) -> DistortionSequence:
    return DistortionSequence(lambda n: Bump(n, radius, d), Bump(math.inf, radius, d), f"bump_seq(radius={_fmt(radius)})")


def trunc_seq(base: Distortion) -> DistortionSequence:
    return DistortionSequence(lambda n: trunc(base, n), base, f"trunc_seq(base={base.spec})")


def const_seq(base: Distortion) -> DistortionSequence:
    return DistortionSequence(lambda n: base, base, f"const(base={base.spec})")


# ---------------------------------------------------------------------------
# good sets


@dataclass(frozen=True)
class GoodSetFamily:
    """Decreasing open sets ``G_1 ⊇ G_2 ⊇ ...``; ``member(m, x)`` tests ``x in G_m``."""

    member_fn: Callable[[int, np.ndarray], np.ndarray]
    describe: Callable[[int], str]
    d: int = 1

    def member(self, m: int, x) -> np.ndarray:
        x = _points(x, self.d)
        return np.asarray(self.member_fn(int(m), x), dtype=bool)

    @classmethod
    def empty(cls, d: int = 1) -> "GoodSetFamily":
        return cls(lambda m, x: np.zeros(x.shape[:-1], dtype=bool), lambda m: "empty", d)

    @classmethod
    def everything(cls, d: int = 1) -> "GoodSetFamily":
        return cls(lambda m, x: np.ones(x.shape[:-1], dtype=bool), lambda m: f"R^{d}", d)


def default_uniform_tol(j: int) -> float:
    """``1/(j(j+2))``: small enough that ``psi^{k,m+2} = phi_k`` off ``G_m``."""
    return 1.0 / (j * (j + 2))


def good_sets(
    phi: Distortion,
    seq: DistortionSequence | None = None,
    uniform_tol: Callable[[int], float] | None = None,
    indices: Sequence[int] | None = None,
) -> GoodSetFamily:
    """Explicit good sets for ``phi`` (and optionally a sequence converging to it).

    ``G_m = {phi < 1/m} ∪ {phi > m} ∪ D_m`` where, with a sequence,
    ``D_m = ∪_{j >= m} {|phi_{k_j} - phi| > delta_j}`` over the designated
    subsequence ``k_1 < k_2 < ...`` (a finite window, ``indices``; default
    ``1..16``).  ``D_m`` shrinks as ``m`` grows, and off ``G_m`` every
    ``phi_{k_j}`` with ``j >= m`` is within ``delta_m`` of ``phi``.
    """
    if seq is not None:
        tol = uniform_tol or default_uniform_tol
        idx = list(indices) if indices is not None else list(range(1, 17))
        if sorted(set(idx)) != idx:
            raise ValueError("subsequence indices must be strictly increasing")
        deltas = [tol(j) for j in range(1, len(idx) + 1)]
        if any(b >= a for a, b in zip(deltas, deltas[1:])) or any(not t > 0 for t in deltas):
            raise ValueError("uniform tolerances must be positive and strictly decreasing")
        terms = [seq.term(k) for k in idx]
    else:
        idx, deltas, terms = [], [], []

    def member(m, x):
        v = phi._value(x)
        out = (v < 1.0 / m) | (v > m)
        for j in range(m, len(terms) + 1):
            out |= np.abs(terms[j - 1]._value(x) - v) > deltas[j - 1]
        return out

    def describe(m):
        text = f"{{phi < {1.0 / m:g}}} ∪ {{phi > {m}}}"
        if m <= len(terms):
            text += f" ∪ deviation set over subsequence indices {idx[m - 1:]}"
        return text

    return GoodSetFamily(member, describe, phi.d)


# ---------------------------------------------------------------------------
# grammar


_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<sym>[(),=\[\]]))")


def _tokenize(text):
    pos = 0
    out = []
    text = text.strip()
    while pos < len(text):
        mt = _TOKEN.match(text, pos)
        if not mt or mt.end() == pos:
            raise FamilySpecError(f"unexpected character {text[pos]!r} at offset {pos} in {text!r}")
        kind = mt.lastgroup
        out.append((kind, mt.group(kind)))
        pos = mt.end()
    return out


class _Parser:
    def __init__(self, text, d):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0
        self.d = d

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, sym=None):
        tok = self.peek()
        if tok[0] is None or (sym is not None and tok[1] != sym):
            raise FamilySpecError(f"expected {sym or 'token'!r} in {self.text!r}")
        self.i += 1
        return tok

    def call(self):
        kind, name = self.take()
        if kind != "name":
            raise FamilySpecError(f"expected a family name in {self.text!r}")
        self.take("(")
        kwargs = {}
        while self.peek()[1] != ")":
            k, key = self.take()
            if k != "name":
                raise FamilySpecError(f"expected a parameter name in {self.text!r}")
            self.take("=")
            kwargs[key] = self.value()
            if self.peek()[1] == ",":
                self.take(",")
        self.take(")")
        return name, kwargs

    def value(self):
        kind, tok = self.peek()
        if kind == "num":
            self.take()
            return float(tok)
        if tok == "[":
            self.take("[")
            vals = []
            while self.peek()[1] != "]":
                vals.append(self.value())
                if self.peek()[1] == ",":
                    self.take(",")
            self.take("]")
            return vals
        if kind == "name" and tok in ("inf", "infinity"):
            self.take()
            return math.inf
        if kind == "name":
            name, kwargs = self.call()
            return _build_family(name, kwargs, self.d, self.text)
        raise FamilySpecError(f"cannot parse value at token {tok!r} in {self.text!r}")

    def done(self):
        if self.i != len(self.toks):
            raise FamilySpecError(f"trailing input after position {self.i} in {self.text!r}")


FAMILIES = {
    "unit": ("unit()", "phi == 1; the plain Ornstein-Uhlenbeck process (Q_mu)."),
    "tilt": ("tilt(a=0.5)", "phi_a^2 mu = N(a, I); constant drift term a. Closed-form oracle family."),
    "tanh": ("tanh(kappa=1.0)", "d=1, phi = c|tanh(kappa x)|; vanishes at 0, drift ~ 2/x there."),
    "bump": ("bump(n=8)", "phi_n^2 ∝ 1 - (1-1/n) bump(x); n=inf is the limit vanishing at 0."),
    "trunc": ("trunc(base=tanh(kappa=1.0),n=4)", "normalize((1/n) v base ^ n)."),
}

SEQUENCES = {
    "tilt_seq": ("tilt_seq(a=1)", "tilt(a/n) -> unit()."),
    "tanh_seq": ("tanh_seq(kappa=1)", "tanh(kappa + 2^-n) -> tanh(kappa)."),
    "bump_seq": ("bump_seq()", "bump(n) -> bump(n=inf)."),
    "trunc_seq": ("trunc_seq(base=tanh(kappa=1))", "trunc(base, n) -> base."),
    "const": ("const(base=tilt(a=0.3))", "phi_n = base for every n."),
}


def _take(kwargs, allowed, text):
    extra = set(kwargs) - set(allowed)
    if extra:
        raise FamilySpecError(f"unknown parameter(s) {sorted(extra)} in {text!r}; allowed: {list(allowed)}")
    return {k: kwargs[k] for k in allowed if k in kwargs}


def _need_family(v, key, text):
    if not isinstance(v, Distortion):
        raise FamilySpecError(f"parameter {key!r} must be a family in {text!r}")
    return v


@functools.lru_cache(maxsize=512)
def _cached_build(name, frozen, d, text):
    kwargs = {k: (list(v) if isinstance(v, tuple) else v) for k, v in frozen}
    return _build_uncached(name, kwargs, d, text)


def _build_family(name, kwargs, d, text):
    frozen = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in kwargs.items()))
    try:
        return _cached_build(name, frozen, d, text)
    except TypeError:  # unhashable nested values
        return _build_uncached(name, kwargs, d, text)


def _build_uncached(name, kwargs, d, text):
    if name == "unit":
        _take(kwargs, (), text)
        return unit(d)
    if name == "tilt":
        kw = _take(kwargs, ("a",), text)
        return Tilt(kw.get("a", 0.0), d)
    if name == "tanh":
        kw = _take(kwargs, ("kappa",), text)
        return Tanh(kw.get("kappa", 1.0), d)
    if name == "bump":
        kw = _take(kwargs, ("n", "radius"), text)
        return Bump(kw.get("n", math.inf), kw.get("radius", 1.0), d)
    if name == "trunc":
        kw = _take(kwargs, ("base", "n"), text)
        if "base" not in kw or "n" not in kw:
            raise FamilySpecError(f"trunc needs base= and n= in {text!r}")
        return trunc(_need_family(kw["base"], "base", text), kw["n"])
    raise FamilySpecError(f"unknown family {name!r} in {text!r}; known: {sorted(FAMILIES)}")


def parse_family(text: str, d: int = 1) -> Distortion:
    """Build a distortion from a family string such as ``tanh(kappa=1.0)``."""
    p = _Parser(text, d)
    name, kwargs = p.call()
    p.done()
    return _build_family(name, kwargs, d, text)


def parse_sequence(text: str, d: int = 1) -> DistortionSequence:
    """Build a sequence from a string such as ``tanh_seq(kappa=1)``."""
    p = _Parser(text, d)
    name, kwargs = p.call()
    p.done()
    if name == "tilt_seq":
        kw = _take(kwargs, ("a",), text)
        return tilt_seq(kw.get("a", 1.0), d)
    if name == "tanh_seq":
        kw = _take(kwargs, ("kappa",), text)
        return tanh_seq(kw.get("kappa", 1.0), d)
    if name == "bump_seq":
        kw = _take(kwargs, ("radius",), text)
        return bump_seq(kw.get("radius", 1.0), d)
    if name == "trunc_seq":
        kw = _take(kwargs, ("base",), text)
        return trunc_seq(_need_family(kw.get("base"), "base", text))
    if name == "const":
        kw = _take(kwargs, ("base",), text)
        return const_seq(_need_family(kw.get("base"), "base", text))
    raise FamilySpecError(f"unknown sequence {name!r} in {text!r}; known: {sorted(SEQUENCES)}")
