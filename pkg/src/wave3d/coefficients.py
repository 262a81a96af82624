"""Registry of globally Lipschitz nonlinearities and coefficient presets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

KINDS = ("zero", "constant", "identity", "affine", "sine", "tanh")


@dataclass(frozen=True)
class Nonlinearity:
    """A pointwise map u -> factor * f(u) drawn from the registry.

    Parameters by kind: constant(c), affine(a, c) for a u + c,
    sine(scale, offset) for sin(scale u + offset) and tanh likewise.
    """

    kind: str = "zero"
    a: float = 1.0
    c: float = 0.0
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown nonlinearity {self.kind!r}")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        k = self.kind
        if k == "zero":
            out = np.zeros_like(u)
        elif k == "constant":
            out = np.full_like(u, self.c)
        elif k == "identity":
            out = u.copy()
        elif k == "affine":
            out = self.a * u + self.c
        elif k == "sine":
            out = np.sin(self.a * u + self.c)
        else:
            out = np.tanh(self.a * u + self.c)
        return self.factor * out if self.factor != 1.0 else out

    @property
    def lipschitz(self) -> float:
        if self.kind in ("zero", "constant"):
            return 0.0
        if self.kind == "identity":
            return abs(self.factor)
        return abs(self.factor * self.a)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or self.factor == 0.0 or (self.kind == "constant" and self.c == 0.0)

    @property
    def constant_value(self):
        """The constant value when the map ignores u, otherwise None."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.factor * self.c
        if self.kind == "affine" and self.a == 0.0:
            return self.factor * self.c
        return None

    def scaled(self, factor) -> "Nonlinearity":
        return Nonlinearity(self.kind, self.a, self.c, self.factor * factor)

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "c": self.c, "factor": self.factor}

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, Nonlinearity):
            return d
        d = dict(d)
        kind = d.pop("kind", "zero")
        # friendly aliases used in configuration files
        if "scale" in d:
            d["a"] = d.pop("scale")
        if "offset" in d:
            d["c"] = d.pop("offset")
        if "value" in d:
            d["c"] = d.pop("value")
        unknown = set(d) - {"a", "c", "factor"}
        if unknown:
            raise ConfigurationError(f"unknown nonlinearity keys {sorted(unknown)}")
        return cls(kind, **{k: float(v) for k, v in d.items()})


ZERO = Nonlinearity("zero")


def constant(c):
    return Nonlinearity("constant", c=c)


def identity():
    return Nonlinearity("identity")


def affine(a, c):
    return Nonlinearity("affine", a=a, c=c)


def sine(scale=1.0, offset=0.0):
    return Nonlinearity("sine", a=scale, c=offset)


def tanh(scale=1.0, offset=0.0):
    return Nonlinearity("tanh", a=scale, c=offset)


@dataclass(frozen=True)
class Coefficients:
    """The maps A, B, D and b of the general equation.

    A multiplies the stochastic noise, B the regularised driver w^n, D the
    deterministic control h, and b is the drift.
    """

    A: Nonlinearity = field(default=ZERO)
    B: Nonlinearity = field(default=ZERO)
    D: Nonlinearity = field(default=ZERO)
    b: Nonlinearity = field(default=ZERO)

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name in "ABDb"}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: Nonlinearity.from_dict(v) for k, v in d.items()})

    @property
    def is_zero(self) -> bool:
        return all(getattr(self, n).is_zero for n in "ABDb")


def wong_zakai_preset(sigma: Nonlinearity, drift: Nonlinearity = ZERO) -> Coefficients:
    """Split for comparing u with the solution driven by w^n: A=0, B=sigma, D=0."""
    return Coefficients(A=ZERO, B=sigma, D=ZERO, b=drift)


def girsanov_preset(sigma: Nonlinearity, drift: Nonlinearity = ZERO) -> Coefficients:
    """Split for the shifted equation: A=sigma, B=-sigma, D=sigma."""
    return Coefficients(A=sigma, B=sigma.scaled(-1.0), D=sigma, b=drift)


def stochastic_coefficients(sigma: Nonlinearity, drift: Nonlinearity = ZERO) -> Coefficients:
    """The basic equation: noise through sigma and drift b."""
    return Coefficients(A=sigma, b=drift)


def skeleton_coefficients(sigma: Nonlinearity, drift: Nonlinearity = ZERO) -> Coefficients:
    """Deterministic control equation with sigma in the D slot."""
    return Coefficients(D=sigma, b=drift)


PRESETS = {"wong_zakai": wong_zakai_preset, "girsanov": girsanov_preset}


@dataclass(frozen=True)
class SumNonlinearity:
    """Pointwise sum of registry maps, used for the combined noise coefficient A + B."""

    terms: tuple

    def __call__(self, u):
        out = self.terms[0](u)
        for t in self.terms[1:]:
            out = out + t(u)
        return out

    @property
    def lipschitz(self) -> float:
        return sum(t.lipschitz for t in self.terms)

    @property
    def is_zero(self) -> bool:
        return all(t.is_zero for t in self.terms)

    @property
    def constant_value(self):
        vals = [t.constant_value for t in self.terms]
        return None if any(v is None for v in vals) else float(sum(vals))

    def to_dict(self):
        return {"kind": "sum", "terms": [t.to_dict() for t in self.terms]}


def add_nonlinearities(f, g):
    """f + g, merged into a single registry map when they differ only by a factor."""
    if f.is_zero:
        return g
    if g.is_zero:
        return f
    if isinstance(f, Nonlinearity) and isinstance(g, Nonlinearity):
        if (f.kind, f.a, f.c) == (g.kind, g.a, g.c):
            return Nonlinearity(f.kind, f.a, f.c, f.factor + g.factor)
        cf, cg = f.constant_value, g.constant_value
        if cf is not None and cg is not None:
            return constant(cf + cg)
    return SumNonlinearity((f, g))


def limit_coefficients(coeffs: Coefficients) -> Coefficients:
    """Coefficients of the limit equation: noise through A + B, B itself dropped."""
    return Coefficients(A=add_nonlinearities(coeffs.A, coeffs.B), B=ZERO, D=coeffs.D, b=coeffs.b)
