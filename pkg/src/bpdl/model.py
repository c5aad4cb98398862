"""Trait space, rate functions and dispersal kernels of the population model.

Every rate function is a :class:`ScalarField` drawn from a closed set of
smooth families so that positivity and supremum bounds can be certified by
evaluation on a dense lattice.  The competition kernel is always separable,
``alpha(x, y) = sum_k f_k(x) g_k(y)``; a smooth non-separable kernel has to
be approximated by such a sum (in supremum norm) before it can be used here.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError, SamplingError

FIELD_KINDS = {
    "constant": 0,
    "affine": 1,
    "gaussian_bump": 2,
    "grid_interpolant": 3,
    "monomial": 4,
}
DISPERSAL_KINDS = {"point_mass": 0, "truncated_gaussian": 1, "uniform_ball": 2}

DEFAULT_LATTICE = 512


def as_points(x, dim: int) -> np.ndarray:
    """Coerce ``x`` to a float array of shape ``(N, dim)``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    if arr.shape[-1] != dim:
        raise DomainError(f"expected points of dimension {dim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class TraitSpace:
    """Compact box ``prod_i [lower_i, upper_i]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or not lo:
            raise ConfigError("lower and upper must be nonempty and of equal length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ConfigError(f"degenerate trait box: lower={lo} upper={hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def contains(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def check(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        inside = self.contains(pts)
        if not inside.all():
            bad = pts[np.argmin(inside)]
            raise DomainError(f"trait {bad.tolist()} outside {self.lower}..{self.upper}")
        return pts

    def lattice(self, per_dim: int = DEFAULT_LATTICE) -> np.ndarray:
        """Regular lattice including the box corners, shape ``(per_dim**dim, dim)``."""
        axes = [np.linspace(a, b, per_dim) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A smooth real function on the trait space.

    Use the classmethod constructors; ``params`` holds family parameters as
    float arrays.
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FIELD_KINDS:
            raise ConfigError(f"unknown field family {self.family!r}")

    # constructors -------------------------------------------------------
    @classmethod
    def constant(cls, value: float) -> "ScalarField":
        return cls("constant", {"value": float(value)})

    @classmethod
    def affine(cls, slope, intercept: float) -> "ScalarField":
        return cls("affine", {"slope": np.atleast_1d(np.asarray(slope, float)),
                              "intercept": float(intercept)})

    @classmethod
    def gaussian_bump(cls, center, width: float, height: float, floor: float = 0.0) -> "ScalarField":
        if width <= 0:
            raise ConfigError("gaussian_bump width must be positive")
        return cls("gaussian_bump", {"center": np.atleast_1d(np.asarray(center, float)),
                                     "width": float(width), "height": float(height),
                                     "floor": float(floor)})

    @classmethod
    def grid_interpolant(cls, values, lower, upper) -> "ScalarField":
        vals = np.asarray(values, float)
        lo = np.atleast_1d(np.asarray(lower, float))
        hi = np.atleast_1d(np.asarray(upper, float))
        if vals.ndim != lo.size or any(s < 2 for s in vals.shape):
            raise ConfigError("grid_interpolant needs >= 2 nodes per dimension")
        return cls("grid_interpolant", {"values": vals, "lower": lo, "upper": hi})

    @classmethod
    def monomial(cls, powers, coef: float = 1.0) -> "ScalarField":
        pw = np.atleast_1d(np.asarray(powers, float))
        if np.any(pw < 0) or np.any(pw != np.round(pw)):
            raise ConfigError("monomial powers must be nonnegative integers")
        return cls("monomial", {"powers": pw, "coef": float(coef)})

    @classmethod
    def from_dict(cls, d: dict) -> "ScalarField":
        d = dict(d)
        fam = d.pop("family", None)
        try:
            if fam == "constant":
                return cls.constant(d["value"])
            if fam == "affine":
                return cls.affine(d["slope"], d.get("intercept", 0.0))
            if fam == "gaussian_bump":
                return cls.gaussian_bump(d["center"], d["width"], d["height"], d.get("floor", 0.0))
            if fam == "grid_interpolant":
                return cls.grid_interpolant(d["values"], d["lower"], d["upper"])
            if fam == "monomial":
                return cls.monomial(d["powers"], d.get("coef", 1.0))
        except KeyError as exc:
            raise ConfigError(f"field {fam!r} missing parameter {exc}") from None
        raise ConfigError(f"unknown field family {fam!r}")

    def to_dict(self) -> dict:
        out = {"family": self.family}
        for k, v in self.params.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    # evaluation ---------------------------------------------------------
    @property
    def kind(self) -> int:
        return FIELD_KINDS[self.family]

    def __call__(self, x, dim: int | None = None) -> np.ndarray:
        if dim is None:
            dim = self.native_dim or (np.asarray(x).shape[-1] if np.ndim(x) == 2 else 1)
        pts = as_points(x, dim)
        p = self.params
        fam = self.family
        if fam == "constant":
            return np.full(len(pts), p["value"])
        if fam == "affine":
            return p["intercept"] + pts @ np.broadcast_to(p["slope"], (dim,))
        if fam == "gaussian_bump":
            r2 = np.sum((pts - p["center"]) ** 2, axis=1)
            return p["floor"] + p["height"] * np.exp(-r2 / (2 * p["width"] * p["width"]))
        if fam == "monomial":
            return p["coef"] * np.prod(pts ** np.broadcast_to(p["powers"], (dim,)), axis=1)
        return self._interp(pts)

    def _interp(self, pts: np.ndarray) -> np.ndarray:
        vals = self.params["values"]
        lo, hi = self.params["lower"], self.params["upper"]
        dim = vals.ndim
        shape = np.array(vals.shape)
        pos = (pts - lo) / (hi - lo) * (shape - 1)
        i0 = np.clip(np.floor(pos).astype(int), 0, shape - 2)
        t = pos - i0
        out = np.zeros(len(pts))
        for corner in range(1 << dim):
            w = np.ones(len(pts))
            idx = []
            for j in range(dim):
                bit = (corner >> j) & 1
                w = w * (t[:, j] if bit else 1.0 - t[:, j])
                idx.append(i0[:, j] + bit)
            out += w * vals[tuple(idx)]
        return out

    def extremal_points(self, space: "TraitSpace") -> np.ndarray:
        """Points off the regular lattice where the sup or inf over the box may sit.

        Box corners are always on the lattice; bumps peak at the center
        projected onto the box and interpolants at their own nodes.
        """
        dim = space.dim
        lo, hi = np.array(space.lower), np.array(space.upper)
        if self.family == "gaussian_bump":
            return np.clip(np.broadcast_to(self.params["center"], (dim,)), lo, hi)[None, :]
        if self.family == "grid_interpolant":
            p = self.params
            axes = [np.clip(np.linspace(a, b, k), l, h)
                    for a, b, k, l, h in zip(p["lower"], p["upper"], p["values"].shape, lo, hi)]
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.stack([m.ravel() for m in mesh], axis=1)
        return np.zeros((0, dim))

    @property
    def native_dim(self) -> int | None:
        """Dimension fixed by the parameters, or None for constants."""
        p = self.params
        if self.family == "affine":
            return p["slope"].size
        if self.family == "gaussian_bump":
            return p["center"].size
        if self.family == "grid_interpolant":
            return p["values"].ndim
        if self.family == "monomial":
            return p["powers"].size
        return None

    def pack(self, dim: int) -> np.ndarray:
        """Flat parameter vector consumed by the event engines."""
        nd = self.native_dim
        if nd is not None and nd != dim and not (nd == 1 and self.family in ("affine", "monomial")):
            raise ConfigError(f"{self.family} field has dimension {nd}, space has {dim}")
        p = self.params
        if self.family == "constant":
            return np.array([p["value"]])
        if self.family == "affine":
            return np.concatenate([[p["intercept"]], np.broadcast_to(p["slope"], (dim,))])
        if self.family == "gaussian_bump":
            return np.concatenate([[p["height"], p["floor"], p["width"]], p["center"]])
        if self.family == "monomial":
            return np.concatenate([[p["coef"]], np.broadcast_to(p["powers"], (dim,))])
        vals = p["values"]
        return np.concatenate([p["lower"], p["upper"], np.array(vals.shape, float), vals.ravel()])


@dataclass(frozen=True, eq=False)
class SeparableKernel:
    """``alpha(x, y) = sum_k f_k(x) g_k(y)`` with nonnegative factors."""

    terms: tuple[tuple[ScalarField, ScalarField], ...]

    def __post_init__(self):
        terms = tuple((f, g) for f, g in self.terms)
        if not terms:
            raise ConfigError("competition kernel needs at least one term")
        for f, g in terms:
            if not (isinstance(f, ScalarField) and isinstance(g, ScalarField)):
                raise ConfigError("competition kernel must be separable: (f, g) ScalarField pairs")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def constant(cls, value: float) -> "SeparableKernel":
        return cls(((ScalarField.constant(value), ScalarField.constant(1.0)),))

    @property
    def m(self) -> int:
        return len(self.terms)

    def factors(self, x, dim: int) -> tuple[np.ndarray, np.ndarray]:
        """Factor values ``F[i, k] = f_k(x_i)`` and ``G[i, k] = g_k(x_i)``."""
        pts = as_points(x, dim)
        F = np.stack([f(pts, dim) for f, _ in self.terms], axis=1)
        G = np.stack([g(pts, dim) for _, g in self.terms], axis=1)
        return F, G

    def __call__(self, x, y, dim: int) -> np.ndarray:
        """Pairwise matrix ``alpha(x_i, y_j)``, computed term by term."""
        px, py = as_points(x, dim), as_points(y, dim)
        out = np.zeros((len(px), len(py)))
        for f, g in self.terms:
            out += np.outer(f(px, dim), g(py, dim))
        return out


@dataclass(frozen=True, eq=False)
class DispersalKernel:
    """Offspring displacement law restricted to ``{z : x + z in space}``.

    ``scale`` is the standard deviation for ``truncated_gaussian`` and the
    radius for ``uniform_ball``.  Sampling rejects draws from the
    untruncated base law, which yields the renormalized law exactly.
    """

    family: str = "point_mass"
    scale: float = 0.0
    max_tries: int = 1_000_000

    def __post_init__(self):
        if self.family not in DISPERSAL_KINDS:
            raise ConfigError(f"unknown dispersal family {self.family!r}")
        if self.family != "point_mass" and not self.scale > 0:
            raise ConfigError(f"{self.family} dispersal needs a positive scale")

    @property
    def kind(self) -> int:
        return DISPERSAL_KINDS[self.family]

    @classmethod
    def from_dict(cls, d: dict) -> "DispersalKernel":
        d = dict(d)
        fam = d.pop("family", "point_mass")
        scale = d.pop("sigma", d.pop("radius", d.pop("scale", 0.0)))
        return cls(fam, float(scale), int(d.pop("max_tries", 1_000_000)))

    def to_dict(self) -> dict:
        out = {"family": self.family}
        if self.family == "truncated_gaussian":
            out["sigma"] = self.scale
        elif self.family == "uniform_ball":
            out["radius"] = self.scale
        return out

    def sample(self, x: Sequence[float], space: TraitSpace, rng: np.random.Generator) -> np.ndarray:
        """Displacement ``z`` with ``x + z`` inside ``space``.

        Draw order matches the compiled engine: one standard normal (or one
        uniform) per coordinate per attempt.
        """
        dim = space.dim
        x = [float(v) for v in x]
        if self.family == "point_mass":
            return np.zeros(dim)
        lo, hi, s = space.lower, space.upper, self.scale
        for _ in range(self.max_tries):
            if self.family == "truncated_gaussian":
                z = [s * rng.standard_normal() for _ in range(dim)]
                ok = True
            else:
                z = [s * (2.0 * rng.random() - 1.0) for _ in range(dim)]
                r2 = 0.0
                for v in z:
                    r2 += v * v
                ok = r2 <= s * s
            if ok and all(lo[j] <= x[j] + z[j] <= hi[j] for j in range(dim)):
                return np.array(z)
        raise SamplingError(
            f"{self.family} dispersal from {x} rejected {self.max_tries} proposals "
            f"(scale={s}, box={lo}..{hi})")

    def base_density(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        dim = z.shape[1]
        if self.family == "truncated_gaussian":
            s = self.scale
            return np.exp(-np.sum(z * z, axis=1) / (2 * s * s)) / (2 * np.pi * s * s) ** (dim / 2)
        if self.family == "uniform_ball":
            vol = math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * self.scale ** dim
            return (np.sum(z * z, axis=1) <= self.scale ** 2) / vol
        raise ConfigError("point_mass has no density")

    def normalizer(self, x, space: TraitSpace) -> np.ndarray:
        """Base-law probability of the admissible set, ``Z(x)``."""
        pts = as_points(x, space.dim)
        lo, hi = np.array(space.lower), np.array(space.upper)
        if self.family == "point_mass":
            return np.ones(len(pts))
        if self.family == "truncated_gaussian":
            s = self.scale * math.sqrt(2.0)
            per = 0.5 * (special.erf((hi - pts) / s) - special.erf((lo - pts) / s))
            return np.prod(per, axis=1)
        r = self.scale
        if space.dim == 1:
            a = np.maximum(lo - pts[:, 0], -r)
            b = np.minimum(hi - pts[:, 0], r)
            return np.clip(b - a, 0, None) / (2 * r)
        # midpoint rule on the ball's bounding box
        k = 400
        g = (np.arange(k) + 0.5) / k * 2 * r - r
        mesh = np.stack(np.meshgrid(*([g] * space.dim), indexing="ij"), -1).reshape(-1, space.dim)
        mesh = mesh[np.sum(mesh ** 2, axis=1) <= r * r]
        out = np.empty(len(pts))
        for i, p in enumerate(pts):
            y = p + mesh
            out[i] = np.mean(np.all((y >= lo) & (y <= hi), axis=1)) * len(mesh) * (2 * r / k) ** space.dim
        vol = math.pi ** (space.dim / 2) / math.gamma(space.dim / 2 + 1) * r ** space.dim
        return out / vol

    def density(self, x, z, space: TraitSpace) -> np.ndarray:
        """Renormalized density ``m(x, z)``; zero where ``x + z`` leaves the box."""
        pts = as_points(x, space.dim)
        zz = as_points(z, space.dim)
        inside = space.contains(pts + zz)
        return np.where(inside, self.base_density(zz) / self.normalizer(pts, space), 0.0)

    def expectation(self, phi, x, space: TraitSpace, nodes: int = 48) -> np.ndarray:
        """``int phi(x + z) m(x, z) dz`` for each row of ``x``.

        Tensor Gauss-Legendre over the admissible box intersected with the
        effective support, normalized by the same rule.
        """
        pts = as_points(x, space.dim)
        if self.family == "point_mass":
            return np.asarray(phi(pts), float)
        dim = space.dim
        if self.family == "uniform_ball" and dim > 1:
            raise NotImplementedError("uniform_ball expectation implemented for d = 1 only")
        gx, gw = np.polynomial.legendre.leggauss(nodes)
        reach = 9.0 * self.scale if self.family == "truncated_gaussian" else self.scale
        lo = np.maximum(np.array(space.lower) - pts, -reach)
        hi = np.minimum(np.array(space.upper) - pts, reach)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        # (N, nodes, dim) per-axis nodes; tensor product over axes
        axis_nodes = mid[:, None, :] + half[:, None, :] * gx[None, :, None]
        axis_w = half[:, None, :] * gw[None, :, None]
        if self.family == "truncated_gaussian":
            s = self.scale
            axis_w = axis_w * np.exp(-axis_nodes ** 2 / (2 * s * s))
        grids = np.meshgrid(*([np.arange(nodes)] * dim), indexing="ij")
        idx = [g.ravel() for g in grids]
        z = np.stack([axis_nodes[:, idx[j], j] for j in range(dim)], axis=-1)
        w = np.ones(z.shape[:2])
        for j in range(dim):
            w = w * axis_w[:, idx[j], j]
        vals = np.asarray(phi((pts[:, None, :] + z).reshape(-1, dim)), float).reshape(w.shape)
        return np.sum(w * vals, axis=1) / np.sum(w, axis=1)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Complete parameter set of the rescaled population process."""

    space: TraitSpace
    birth: ScalarField
    death: ScalarField
    competition: SeparableKernel
    dispersal: DispersalKernel = field(default_factory=DispersalKernel)
    scale: int = 1
    lattice_points: int = DEFAULT_LATTICE

    def __post_init__(self):
        if not isinstance(self.competition, SeparableKernel):
            raise ConfigError("only separable competition kernels are supported")
        if int(self.scale) < 1:
            raise ConfigError("scale n must be a positive integer")
        object.__setattr__(self, "scale", int(self.scale))
        for fld in self.fields:
            fld.pack(self.space.dim)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def fields(self) -> list[ScalarField]:
        """Engine field order: b, d, f_1..f_m, g_1..g_m."""
        fs = [f for f, _ in self.competition.terms]
        gs = [g for _, g in self.competition.terms]
        return [self.birth, self.death, *fs, *gs]

    def with_scale(self, n: int) -> "ModelSpec":
        new = dataclasses.replace(self, scale=n)
        if "_lattice_stats" in self.__dict__:
            new.__dict__["_lattice_stats"] = self.__dict__["_lattice_stats"]
        return new

    @cached_property
    def _lattice_stats(self) -> dict:
        lat = self.space.lattice(self.lattice_points if self.dim == 1 else min(self.lattice_points, 512))
        lat = np.concatenate([lat, *(f.extremal_points(self.space) for f in self.fields)])
        vals = [np.asarray(f(lat, self.dim), float) for f in self.fields]
        return {"lattice": lat, "values": vals}

    @property
    def field_sup(self) -> np.ndarray:
        return np.array([v.max() for v in self._lattice_stats["values"]])

    @property
    def b_bar(self) -> float:
        return float(self.field_sup[0])

    @property
    def d_bar(self) -> float:
        return float(self.field_sup[1])

    @property
    def alpha_bar(self) -> float:
        m = self.competition.m
        sup = self.field_sup
        return float(np.sum(sup[2:2 + m] * sup[2 + m:2 + 2 * m]))

    @property
    def alpha_min(self) -> float:
        """Lower bound on alpha over the lattice (product of factor minima)."""
        m = self.competition.m
        vals = self._lattice_stats["values"]
        return float(sum(vals[2 + k].min() * vals[2 + m + k].min() for k in range(m)))

    def to_dict(self) -> dict:
        return {
            "lower": list(self.space.lower),
            "upper": list(self.space.upper),
            "birth": self.birth.to_dict(),
            "death": self.death.to_dict(),
            "competition": [{"f": f.to_dict(), "g": g.to_dict()} for f, g in self.competition.terms],
            "dispersal": self.dispersal.to_dict(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            space = TraitSpace(tuple(d["lower"]), tuple(d["upper"]))
            comp = d["competition"]
            if isinstance(comp, dict) and "f" not in comp:
                raise ConfigError("competition kernel must be given as separable (f, g) terms")
            if isinstance(comp, dict):
                comp = [comp]
            kernel = SeparableKernel(tuple(
                (ScalarField.from_dict(t["f"]), ScalarField.from_dict(t["g"])) for t in comp))
            return cls(
                space=space,
                birth=ScalarField.from_dict(d["birth"]),
                death=ScalarField.from_dict(d["death"]),
                competition=kernel,
                dispersal=DispersalKernel.from_dict(d.get("dispersal", {"family": "point_mass"})),
                scale=int(d.get("scale", 1)),
            )
        except KeyError as exc:
            raise ConfigError(f"model block missing key {exc}") from None


# ---------------------------------------------------------------------------
# point operations


def eval_birth(spec: ModelSpec, x) -> float:
    pts = spec.space.check(x)
    return float(spec.birth(pts, spec.dim)[0])


def eval_death(spec: ModelSpec, x) -> float:
    pts = spec.space.check(x)
    return float(spec.death(pts, spec.dim)[0])


def eval_alpha(spec: ModelSpec, x, y) -> float:
    px = spec.space.check(x)
    py = spec.space.check(y)
    return float(spec.competition(px, py, spec.dim)[0, 0])


def sample_dispersal(spec: ModelSpec, x, rng: np.random.Generator) -> np.ndarray:
    pt = spec.space.check(x)[0]
    return spec.dispersal.sample(pt, spec.space, rng)


# ---------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    witness: list | None = None
    value: float | None = None


@dataclass
class ValidationReport:
    checks: list[Check]
    b_bar: float
    d_bar: float
    alpha_bar: float

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]


def validate(spec: ModelSpec) -> ValidationReport:
    """Lattice checks of positivity, (b - d) > 0, factor signs and normalization.

    Failures are reported with a witness lattice point, never raised.
    """
    stats = spec._lattice_stats
    lat, vals = stats["lattice"], stats["values"]
    m = spec.competition.m
    checks: list[Check] = []

    def positive(name, v):
        i = int(np.argmin(v))
        checks.append(Check(name, bool(v[i] > 0), f"min={v[i]:.6g}",
                            None if v[i] > 0 else lat[i].tolist(), float(v[i])))

    positive("birth_positive", vals[0])
    positive("death_positive", vals[1])
    margin = vals[0] - vals[1]
    i = int(np.argmin(margin))
    checks.append(Check("birth_exceeds_death", bool(margin[i] > 0), f"margin={margin[i]:.6g}",
                        None if margin[i] > 0 else lat[i].tolist(), float(margin[i])))
    for k in range(m):
        for label, v in ((f"f{k}_nonnegative", vals[2 + k]), (f"g{k}_nonnegative", vals[2 + m + k])):
            j = int(np.argmin(v))
            checks.append(Check(label, bool(v[j] >= 0), f"min={v[j]:.6g}",
                                None if v[j] >= 0 else lat[j].tolist(), float(v[j])))

    # alpha <= alpha_bar on a sub-lattice of pairs
    sub = spec.space.lattice(64 if spec.dim == 1 else 16)
    amat = spec.competition(sub, sub, spec.dim)
    abar = spec.alpha_bar
    checks.append(Check("alpha_bounded", bool(amat.max() <= abar * (1 + 1e-12) and amat.min() >= 0),
                        f"max={amat.max():.6g} bound={abar:.6g}", None, float(amat.max())))

    disp = spec.dispersal
    if disp.family == "point_mass" or (disp.family == "uniform_ball" and spec.dim > 1):
        checks.append(Check("dispersal_normalized", True, "exact"))
    else:
        probe = spec.space.lattice(17 if spec.dim == 1 else 5)
        # density integrates to one over the admissible set (closed-form Z)
        worst, wit = 0.0, None
        gx, gw = np.polynomial.legendre.leggauss(64)
        for p in probe:
            lo = np.array(spec.space.lower) - p
            hi = np.array(spec.space.upper) - p
            reach = 9 * disp.scale if disp.family == "truncated_gaussian" else disp.scale
            lo, hi = np.maximum(lo, -reach), np.minimum(hi, reach)
            axes = [0.5 * (h + l) + 0.5 * (h - l) * gx for l, h in zip(lo, hi)]
            wts = [0.5 * (h - l) * gw for l, h in zip(lo, hi)]
            mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, spec.dim)
            wm = np.prod(np.stack(np.meshgrid(*wts, indexing="ij"), -1).reshape(-1, spec.dim), axis=1)
            total = float(np.sum(wm * disp.density(np.broadcast_to(p, mesh.shape), mesh, spec.space)))
            if abs(total - 1) > worst:
                worst, wit = abs(total - 1), p.tolist()
        checks.append(Check("dispersal_normalized", worst < 1e-6, f"max |int m - 1|={worst:.3g}",
                            None if worst < 1e-6 else wit, worst))

    return ValidationReport(checks, spec.b_bar, spec.d_bar, spec.alpha_bar)
