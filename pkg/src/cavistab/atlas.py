"""Atlas-described domains.

A domain is covered by rotated cuboid charts; charts that touch the boundary
carry a profile function g so that, in the chart's local frame, the domain is
the subgraph x3 < g(x1, x2). Perturbation families share one atlas and differ
only through their profiles.

Conventions
-----------
* Chart rotations map global to local coordinates: ``local = R @ p``.
* Chart bounds are intervals in the local frame (so they encode position;
  rotations are linear, no separate translation).
* Profile functions are defined on all of R^2; catalog kinds extend naturally,
  tabulated profiles by constant continuation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    AtlasValidationError,
    DerivativeUnavailableError,
    GeometryError,
    HessianUndefinedError,
    PointOutsideChartError,
)

__all__ = [
    "AtlasChart",
    "Atlas",
    "ProfileFunction",
    "AtlasDomain",
    "PerturbationFamily",
    "chart_local_coords",
    "profile_eval",
    "domain_contains",
    "check_atlas_class",
    "check_convergence_conditions",
    "rotation_about_axis",
    "oscillating_box_family",
    "load_domain_spec",
]

_ORTHO_TOL = 1e-12


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis and angle in radians."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n == 0:
        raise GeometryError("rotation axis must be nonzero")
    a = a / n
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


# ---------------------------------------------------------------------------
# profile functions
# ---------------------------------------------------------------------------

def _bump1d(t):
    """C-infinity bump on (-1, 1), value 1 at t = 0, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - ti * ti))
    return out


def _bump1d_d1(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    s = 1.0 - ti * ti
    out[inside] = np.exp(1.0 - 1.0 / s) * (-2.0 * ti / (s * s))
    return out


def _bump1d_d2(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    s = 1.0 - ti * ti
    # d/dt [exp(1-1/s) * (-2t/s^2)]
    out[inside] = np.exp(1.0 - 1.0 / s) * (
        (4.0 * ti * ti / s**4) - 2.0 / (s * s) - 8.0 * ti * ti / s**3
    )
    return out


def _as_xy(xbar):
    xb = np.asarray(xbar, dtype=float)
    if xb.shape[-1] != 2:
        raise GeometryError("profile points must have 2 components")
    return xb[..., 0], xb[..., 1]


class ProfileFunction:
    """Catalog of boundary profile functions g(x1, x2).

    Kinds: constant | oscillatory | hoelder_power | log_counterexample | tabulated.
    Each kind supplies exact value/gradient formulas; hessians where they exist.
    """

    def __init__(self, kind: str, **params):
        self.kind = kind
        self.params = dict(params)
        if kind == "constant":
            self.params.setdefault("value", 0.0)
        elif kind == "oscillatory":
            for key in ("alpha", "eps"):
                if key not in self.params:
                    raise GeometryError(f"oscillatory profile needs '{key}'")
            self.params.setdefault("b_amp", 1.0)
            self.params.setdefault("b_kind", "cos2pi")  # or 'cos2_nonneg'
            self.params.setdefault("psi_kind", "one")  # or 'bump'
            self.params.setdefault("psi_center", (0.0, 0.0))
            self.params.setdefault("psi_halfwidth", (1.0, 1.0))
        elif kind == "hoelder_power":
            self.params.setdefault("beta", 0.75)
            self.params.setdefault("amplitude", 1.0)
            self.params.setdefault("center", (0.0, 0.0))
        elif kind == "log_counterexample":
            # |x1|/log|x1| near 0, linear continuation beyond t_cap
            self.params.setdefault("t_cap", math.exp(-1.5))
        elif kind == "tabulated":
            for key in ("x0", "y0", "dx", "dy", "values"):
                if key not in self.params:
                    raise GeometryError(f"tabulated profile needs '{key}'")
            self.params["values"] = np.asarray(self.params["values"], dtype=float)
        else:
            raise GeometryError(f"unknown profile kind '{kind}'")

    # -- catalog constructors ------------------------------------------------
    @classmethod
    def constant(cls, value: float = 0.0):
        return cls("constant", value=value)

    @classmethod
    def oscillatory(cls, alpha, eps, b_amp=1.0, b_kind="cos2pi", psi_kind="one",
                    psi_center=(0.0, 0.0), psi_halfwidth=(1.0, 1.0)):
        return cls("oscillatory", alpha=alpha, eps=eps, b_amp=b_amp, b_kind=b_kind,
                   psi_kind=psi_kind, psi_center=psi_center,
                   psi_halfwidth=psi_halfwidth)

    @classmethod
    def hoelder_power(cls, beta, amplitude=1.0, center=(0.0, 0.0)):
        return cls("hoelder_power", beta=beta, amplitude=amplitude, center=center)

    @classmethod
    def log_counterexample(cls):
        return cls("log_counterexample")

    @classmethod
    def tabulated(cls, x0, y0, dx, dy, values):
        return cls("tabulated", x0=x0, y0=y0, dx=dx, dy=dy, values=values)

    # -- metadata -------------------------------------------------------------
    @property
    def resolution_hint(self) -> Optional[float]:
        """Horizontal length scale to resolve (oscillation period), if any."""
        if self.kind == "oscillatory":
            return float(self.params["eps"])
        return None

    # -- psi / b internals for the oscillatory kind ---------------------------
    def _psi(self, x, y, order):
        kind = self.params["psi_kind"]
        if kind == "one":
            z = np.zeros_like(x)
            if order == 0:
                return np.ones_like(x)
            if order == 1:
                return z, z
            return z, z, z
        cx, cy = self.params["psi_center"]
        hx, hy = self.params["psi_halfwidth"]
        tx, ty = (x - cx) / hx, (y - cy) / hy
        bx, by = _bump1d(tx), _bump1d(ty)
        if order == 0:
            return bx * by
        dbx, dby = _bump1d_d1(tx) / hx, _bump1d_d1(ty) / hy
        if order == 1:
            return dbx * by, bx * dby
        d2bx, d2by = _bump1d_d2(tx) / hx**2, _bump1d_d2(ty) / hy**2
        return d2bx * by, dbx * dby, bx * d2by  # (xx, xy, yy)

    def _b(self, u, v, order):
        amp = self.params["b_amp"]
        kind = self.params["b_kind"]
        w = 2.0 * math.pi
        if kind == "cos2pi":
            cu, su = np.cos(w * u), np.sin(w * u)
            cv, sv = np.cos(w * v), np.sin(w * v)
            if order == 0:
                return amp * cu * cv
            if order == 1:
                return -amp * w * su * cv, -amp * w * cu * sv
            return (-amp * w * w * cu * cv, amp * w * w * su * sv,
                    -amp * w * w * cu * cv)
        if kind == "cos2_nonneg":
            p = math.pi
            cu, su = np.cos(p * u), np.sin(p * u)
            cv, sv = np.cos(p * v), np.sin(p * v)
            if order == 0:
                return amp * cu**2 * cv**2
            if order == 1:
                return (-amp * 2 * p * cu * su * cv**2,
                        -amp * 2 * p * cu**2 * cv * sv)
            return (-amp * 2 * p * p * (cu**2 - su**2) * cv**2,
                    amp * 4 * p * p * cu * su * cv * sv,
                    -amp * 2 * p * p * cu**2 * (cv**2 - sv**2))
        raise GeometryError(f"unknown b kind '{kind}'")

    # -- evaluation contracts --------------------------------------------------
    def value(self, xbar) -> np.ndarray:
        x, y = _as_xy(xbar)
        k = self.kind
        if k == "constant":
            return np.full_like(x, self.params["value"])
        if k == "oscillatory":
            a, e = self.params["alpha"], self.params["eps"]
            return e**a * self._b(x / e, y / e, 0) * self._psi(x, y, 0)
        if k == "hoelder_power":
            beta, A = self.params["beta"], self.params["amplitude"]
            cx, cy = self.params["center"]
            r = np.hypot(x - cx, y - cy)
            return A * r ** (1.0 + beta)
        if k == "log_counterexample":
            return self._log_value(x)
        if k == "tabulated":
            return self._tab_eval(x, y, 0)
        raise GeometryError(k)

    def gradient(self, xbar) -> np.ndarray:
        x, y = _as_xy(xbar)
        k = self.kind
        if k == "constant":
            return np.zeros(np.shape(x) + (2,))
        if k == "oscillatory":
            a, e = self.params["alpha"], self.params["eps"]
            b = self._b(x / e, y / e, 0)
            bx, by = self._b(x / e, y / e, 1)
            psi = self._psi(x, y, 0)
            px, py = self._psi(x, y, 1)
            gx = e ** (a - 1) * bx * psi + e**a * b * px
            gy = e ** (a - 1) * by * psi + e**a * b * py
            return np.stack([gx, gy], axis=-1)
        if k == "hoelder_power":
            beta, A = self.params["beta"], self.params["amplitude"]
            cx, cy = self.params["center"]
            dx, dy = x - cx, y - cy
            r = np.hypot(dx, dy)
            with np.errstate(divide="ignore", invalid="ignore"):
                f = np.where(r > 0, A * (1.0 + beta) * r ** (beta - 1.0), 0.0)
            return np.stack([f * dx, f * dy], axis=-1)
        if k == "log_counterexample":
            gx = self._log_d1(x)
            return np.stack([gx, np.zeros_like(gx)], axis=-1)
        if k == "tabulated":
            return self._tab_eval(x, y, 1)
        raise GeometryError(k)

    def hessian(self, xbar) -> np.ndarray:
        """Hessian (..., 2, 2). Raises HessianUndefinedError at singular points
        and DerivativeUnavailableError for kinds without second derivatives."""
        x, y = _as_xy(xbar)
        k = self.kind
        if k == "constant":
            return np.zeros(np.shape(x) + (2, 2))
        if k == "oscillatory":
            a, e = self.params["alpha"], self.params["eps"]
            b = self._b(x / e, y / e, 0)
            bx, by = self._b(x / e, y / e, 1)
            bxx, bxy, byy = self._b(x / e, y / e, 2)
            psi = self._psi(x, y, 0)
            px, py = self._psi(x, y, 1)
            pxx, pxy, pyy = self._psi(x, y, 2)
            hxx = (e ** (a - 2) * bxx * psi + 2 * e ** (a - 1) * bx * px
                   + e**a * b * pxx)
            hyy = (e ** (a - 2) * byy * psi + 2 * e ** (a - 1) * by * py
                   + e**a * b * pyy)
            hxy = (e ** (a - 2) * bxy * psi + e ** (a - 1) * (bx * py + by * px)
                   + e**a * b * pxy)
            H = np.empty(np.shape(x) + (2, 2))
            H[..., 0, 0], H[..., 1, 1] = hxx, hyy
            H[..., 0, 1] = H[..., 1, 0] = hxy
            return H
        if k == "hoelder_power":
            beta, A = self.params["beta"], self.params["amplitude"]
            cx, cy = self.params["center"]
            dx, dy = x - cx, y - cy
            r = np.hypot(dx, dy)
            if np.any(r == 0) and beta < 1.0:
                raise HessianUndefinedError("hoelder_power hessian at center")
            c1 = A * (1.0 + beta)
            rb1 = r ** (beta - 1.0)
            rb3 = r ** (beta - 3.0)
            H = np.empty(np.shape(x) + (2, 2))
            H[..., 0, 0] = c1 * (rb1 + (beta - 1.0) * rb3 * dx * dx)
            H[..., 1, 1] = c1 * (rb1 + (beta - 1.0) * rb3 * dy * dy)
            H[..., 0, 1] = H[..., 1, 0] = c1 * (beta - 1.0) * rb3 * dx * dy
            return H
        if k == "log_counterexample":
            if np.any(x == 0):
                raise HessianUndefinedError("log profile hessian at x1 = 0")
            H = np.zeros(np.shape(x) + (2, 2))
            H[..., 0, 0] = self._log_d2(x)
            return H
        raise DerivativeUnavailableError(f"hessian unavailable for kind '{k}'")

    # -- log counterexample internals ------------------------------------------
    def _log_value(self, x):
        t_cap = self.params["t_cap"]
        t = np.abs(np.asarray(x, dtype=float))
        out = np.zeros_like(t)
        near = (t > 0) & (t <= t_cap)
        out[near] = t[near] / np.log(t[near])
        far = t > t_cap
        if np.any(far):
            v0 = t_cap / math.log(t_cap)
            s0 = 1.0 / math.log(t_cap) - 1.0 / math.log(t_cap) ** 2
            out[far] = v0 + s0 * (t[far] - t_cap)
        return out

    def _log_d1(self, x):
        t_cap = self.params["t_cap"]
        x = np.asarray(x, dtype=float)
        t = np.abs(x)
        out = np.zeros_like(t)
        near = (t > 0) & (t <= t_cap)
        lt = np.log(t[near])
        out[near] = (1.0 / lt - 1.0 / lt**2) * np.sign(x[near])
        far = t > t_cap
        if np.any(far):
            s0 = 1.0 / math.log(t_cap) - 1.0 / math.log(t_cap) ** 2
            out[far] = s0 * np.sign(x[far])
        return out

    def _log_d2(self, x):
        t_cap = self.params["t_cap"]
        x = np.asarray(x, dtype=float)
        t = np.abs(x)
        out = np.zeros_like(t)
        near = (t > 0) & (t <= t_cap)
        lt = np.log(t[near])
        out[near] = (-1.0 / lt**2 + 2.0 / lt**3) / t[near]
        return out

    # -- tabulated internals -----------------------------------------------------
    def _tab_eval(self, x, y, order):
        x0, y0 = self.params["x0"], self.params["y0"]
        dx, dy = self.params["dx"], self.params["dy"]
        V = self.params["values"]
        nx, ny = V.shape
        u = np.clip((x - x0) / dx, 0.0, nx - 1.0 - 1e-12)
        v = np.clip((y - y0) / dy, 0.0, ny - 1.0 - 1e-12)
        i, j = u.astype(int), v.astype(int)
        fu, fv = u - i, v - j
        v00, v10 = V[i, j], V[i + 1, j]
        v01, v11 = V[i, j + 1], V[i + 1, j + 1]
        if order == 0:
            return (v00 * (1 - fu) * (1 - fv) + v10 * fu * (1 - fv)
                    + v01 * (1 - fu) * fv + v11 * fu * fv)
        gx = ((v10 - v00) * (1 - fv) + (v11 - v01) * fv) / dx
        gy = ((v01 - v00) * (1 - fu) + (v11 - v10) * fu) / dy
        return np.stack([gx, gy], axis=-1)

    # -- gradient modulus of continuity (catalog kinds) ---------------------------
    def gradient_modulus(self):
        """ModulusOfContinuity bound for the gradient, for catalog kinds."""
        from .gaffney import ModulusOfContinuity

        k = self.kind
        if k == "constant":
            return ModulusOfContinuity.power(K=0.0, beta=1.0)
        if k == "hoelder_power":
            beta, A = self.params["beta"], self.params["amplitude"]
            K = A * (1.0 + beta) * 2.0 ** (1.0 - beta)
            return ModulusOfContinuity.power(K=K, beta=beta)
        if k == "log_counterexample":
            return ModulusOfContinuity.log_reciprocal()
        if k == "oscillatory":
            amp = self.params["b_amp"]
            w = 2.0 * math.pi
            lip = amp * 2.0 * w * w      # bound on |D^2 b| spectral norm
            cap = 2.0 * amp * w          # bound on 2 sup|grad b|
            base = ModulusOfContinuity.lipschitz_capped(c=lip, cap=cap)
            return ModulusOfContinuity.scaled(
                base, eps=self.params["eps"], alpha=self.params["alpha"])
        raise DerivativeUnavailableError(f"no modulus catalog for kind '{k}'")


def profile_eval(g: ProfileFunction, xbar):
    """(value, gradient, hessian-or-None). None signals an undefined hessian."""
    value = g.value(xbar)
    grad = g.gradient(xbar)
    try:
        hess = g.hessian(xbar)
    except DerivativeUnavailableError:
        hess = None
    return value, grad, hess


class _ProfileDifference:
    """Difference g_target - g_source with delegated exact derivatives."""

    def __init__(self, target: ProfileFunction, source: ProfileFunction):
        self.target, self.source = target, source
        self.is_zero = target is source

    def value(self, xbar):
        if self.is_zero:
            x, _ = _as_xy(xbar)
            return np.zeros_like(x)
        return self.target.value(xbar) - self.source.value(xbar)

    def gradient(self, xbar):
        if self.is_zero:
            x, _ = _as_xy(xbar)
            return np.zeros(np.shape(x) + (2,))
        return self.target.gradient(xbar) - self.source.gradient(xbar)

    def hessian(self, xbar):
        if self.is_zero:
            x, _ = _as_xy(xbar)
            return np.zeros(np.shape(x) + (2, 2))
        return self.target.hessian(xbar) - self.source.hessian(xbar)


# ---------------------------------------------------------------------------
# charts and atlases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AtlasChart:
    """Rotated cuboid chart. `bounds[i] = (a_i, b_i)` in the local frame.

    `covering[i]` marks local axes along which the chart spans the whole
    domain; partition-of-unity bumps are constant along those axes.
    """

    rotation: np.ndarray
    bounds: np.ndarray
    touches_boundary: bool
    covering: tuple = (False, False, False)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        B = np.asarray(self.bounds, dtype=float).reshape(3, 2)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "bounds", B)
        if np.max(np.abs(R.T @ R - np.eye(3))) >= _ORTHO_TOL:
            raise AtlasValidationError("chart rotation is not orthogonal")
        if abs(np.linalg.det(R) - 1.0) >= 1e-10:
            raise AtlasValidationError("chart rotation must have determinant 1")
        if np.any(B[:, 0] >= B[:, 1]):
            raise AtlasValidationError("chart bounds need a_i < b_i")

    @property
    def base_rect(self) -> np.ndarray:
        """The 2D rectangle W (first two local axes)."""
        return self.bounds[:2]

    def local(self, p):
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T

    def to_global(self, q):
        q = np.asarray(q, dtype=float)
        return q @ self.rotation

    def contains_cuboid(self, p, tol: float = 0.0):
        q = self.local(p)
        lo = self.bounds[:, 0] - tol
        hi = self.bounds[:, 1] + tol
        return np.all((q > lo) & (q < hi), axis=-1)

    def widths(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]


def chart_local_coords(chart: AtlasChart, p):
    """Split r_j(p) into (xbar, x3). Raises if p is outside the chart cuboid."""
    p = np.asarray(p, dtype=float)
    if not np.all(chart.contains_cuboid(p, tol=1e-12)):
        raise PointOutsideChartError("point outside chart cuboid")
    q = chart.local(p)
    return q[..., :2], q[..., 2]


@dataclass(frozen=True)
class Atlas:
    rho: float
    charts: tuple

    def __post_init__(self):
        if self.rho <= 0:
            raise AtlasValidationError("atlas rho must be positive")
        charts = tuple(self.charts)
        object.__setattr__(self, "charts", charts)
        sp = self.s_prime
        for j, ch in enumerate(charts):
            if ch.touches_boundary != (j < sp):
                raise AtlasValidationError(
                    "boundary charts must come first in the chart list")

    @property
    def s(self) -> int:
        return len(self.charts)

    @property
    def s_prime(self) -> int:
        return sum(1 for ch in self.charts if ch.touches_boundary)


@dataclass(frozen=True)
class AtlasDomain:
    """A domain described by an atlas plus one profile per boundary chart."""

    atlas: Atlas
    profiles: tuple
    regularity_class: tuple = (1, 1.0, None)  # (k, gamma, M); M may be None

    def __post_init__(self):
        profiles = tuple(self.profiles)
        object.__setattr__(self, "profiles", profiles)
        if len(profiles) != self.atlas.s_prime:
            raise AtlasValidationError(
                "need exactly one profile per boundary chart")

    def boundary_charts(self):
        sp = self.atlas.s_prime
        return list(zip(range(sp), self.atlas.charts[:sp], self.profiles))

    def validate(self, grid_n: int = 32):
        """Sampled Def-style invariants: rho margins of each profile."""
        rho = self.atlas.rho
        for j, chart, g in self.boundary_charts():
            xb = _chart_grid(chart, grid_n)
            vals = g.value(xb)
            a3, b3 = chart.bounds[2]
            if np.any(vals < a3 + rho - 1e-12) or np.any(vals > b3 - rho + 1e-12):
                raise AtlasValidationError(
                    f"profile of chart {j} leaves [a3+rho, b3-rho]")
        k, gamma, M = self.regularity_class
        if M is not None:
            est = check_atlas_class(self, k, gamma, grid_n=grid_n)
            if est > M * (1 + 1e-9):
                raise AtlasValidationError(
                    f"declared M={M} below sampled class norm {est:.6g}")
        return self


def _chart_grid(chart: AtlasChart, grid_n: int, margin: float = 1e-9):
    (ax, bx), (ay, by) = chart.base_rect
    gx = np.linspace(ax + margin * (bx - ax), bx - margin * (bx - ax), grid_n)
    gy = np.linspace(ay + margin * (by - ay), by - margin * (by - ay), grid_n)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    return np.stack([X, Y], axis=-1)


def domain_contains(dom: AtlasDomain, p):
    """True where p lies in some chart's subgraph region or interior chart."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    sp = dom.atlas.s_prime
    for j, chart in enumerate(dom.atlas.charts):
        q = pts @ chart.rotation.T
        lo, hi = chart.bounds[:, 0], chart.bounds[:, 1]
        in_cub = np.all((q > lo) & (q < hi), axis=-1)
        if j < sp:
            g = dom.profiles[j].value(q[:, :2])
            inside |= in_cub & (q[:, 2] < g)
        else:
            inside |= in_cub
    return bool(inside[0]) if single else inside.reshape(p.shape[:-1])


def _profile_derivs(g: ProfileFunction, xb, order: int):
    if order == 0:
        return [g.value(xb)]
    if order == 1:
        grad = g.gradient(xb)
        return [grad[..., 0], grad[..., 1]]
    if order == 2:
        H = g.hessian(xb)
        return [H[..., 0, 0], H[..., 0, 1], H[..., 1, 1]]
    raise DerivativeUnavailableError(f"derivatives of order {order} unavailable")


def check_atlas_class(dom: AtlasDomain, k: int, gamma: float, grid_n: int = 256):
    """Sampled estimate of the C^{k,gamma} class norm (a lower bound on M).

    Sups of |D^a g| for |a| <= k over a grid_n x grid_n grid per chart, plus the
    sampled Hoelder seminorm of the order-k derivatives over point pairs (all
    pairs of a coarse subgrid, plus adjacent fine-grid pairs to catch the local
    Lipschitz scale).
    """
    best = 0.0
    for j, chart, g in dom.boundary_charts():
        xb = _chart_grid(chart, grid_n)
        sup_term = 0.0
        for order in range(k + 1):
            for comp in _profile_derivs(g, xb, order):
                sup_term = max(sup_term, float(np.max(np.abs(comp))))
        semi = _hoelder_seminorm(g, xb, k, gamma)
        best = max(best, sup_term + semi)
    return best


def _hoelder_seminorm(g, xb, k, gamma, coarse_n: int = 40):
    comps = _profile_derivs(g, xb, k)
    n = xb.shape[0]
    stride = max(1, n // coarse_n)
    sl = (slice(None, None, stride), slice(None, None, stride))
    pts_c = xb[sl].reshape(-1, 2)
    semi = 0.0
    for comp in comps:
        cc = comp[sl].ravel()
        diff = np.abs(cc[:, None] - cc[None, :])
        dist = np.linalg.norm(pts_c[:, None, :] - pts_c[None, :, :], axis=-1)
        mask = dist > 0
        semi = max(semi, float(np.max(diff[mask] / dist[mask] ** gamma)))
        # adjacent pairs at full resolution
        for axis in (0, 1):
            d_val = np.abs(np.diff(comp, axis=axis))
            d_pts = np.linalg.norm(np.diff(xb, axis=axis), axis=-1)
            semi = max(semi, float(np.max(d_val / d_pts**gamma)))
    return semi


# ---------------------------------------------------------------------------
# perturbation families
# ---------------------------------------------------------------------------

@dataclass
class PerturbationFamily:
    """eps-indexed family of atlas domains sharing a fixed atlas.

    kappa(eps) is the user-chosen convergence scale; the conditions report
    verifies the resulting ratios but never chooses kappa itself.
    """

    base: AtlasDomain
    perturbed: Callable[[float], AtlasDomain]
    kappa: Callable[[float], float]

    def domain(self, eps: float) -> AtlasDomain:
        if eps == 0:
            return self.base
        dom = self.perturbed(eps)
        if dom.atlas is not self.base.atlas:
            raise AtlasValidationError("family members must share one atlas")
        return dom


@dataclass
class ConditionRow:
    eps: float
    kappa: float
    sup_diff: float
    ratios: tuple          # max ratio per derivative order 0, 1, 2
    kappa_dominates: bool  # condition (i)


@dataclass
class ConditionsReport:
    rows: list
    decreasing: tuple      # per derivative order, monotone decrease along eps_list

    @property
    def all_decreasing(self) -> bool:
        return all(self.decreasing)


def check_convergence_conditions(fam: PerturbationFamily, eps_list: Sequence[float],
                                 grid_n: int = 128) -> ConditionsReport:
    """Per-eps report of sup|D^beta(g_eps - g)| / kappa^{3/2 - |beta|}, |beta| <= 2."""
    rows = []
    for eps in eps_list:
        dom = fam.domain(eps)
        kap = float(fam.kappa(eps))
        if kap <= 0:
            raise AtlasValidationError("kappa must be positive")
        sups = [0.0, 0.0, 0.0]
        for (j, chart, g_eps), g0 in zip(dom.boundary_charts(), fam.base.profiles):
            diff = _ProfileDifference(g_eps, g0)
            if diff.is_zero:
                continue
            xb = _chart_grid(chart, grid_n)
            sups[0] = max(sups[0], float(np.max(np.abs(diff.value(xb)))))
            sups[1] = max(sups[1], float(np.max(np.abs(diff.gradient(xb)))))
            sups[2] = max(sups[2], float(np.max(np.abs(diff.hessian(xb)))))
        ratios = tuple(s / kap ** (1.5 - o) for o, s in enumerate(sups))
        rows.append(ConditionRow(eps=eps, kappa=kap, sup_diff=sups[0],
                                 ratios=ratios, kappa_dominates=kap > sups[0]))
    dec = tuple(
        all(rows[i + 1].ratios[o] < rows[i].ratios[o] + 1e-15
            for i in range(len(rows) - 1))
        for o in range(3)
    )
    return ConditionsReport(rows=rows, decreasing=dec)


# ---------------------------------------------------------------------------
# the model geometry: box with one oscillating chart
# ---------------------------------------------------------------------------

def _wall_chart(axis: int, side: int, lengths, depth, rho):
    """Boundary chart for a flat side wall, det-1 rotation, constant profile.

    Local frame: third axis points along the outward wall normal, so the
    domain is the subgraph of a constant.
    """
    Lx, Ly = lengths
    e = np.eye(3)
    if axis == 0:
        R = np.stack([e[1], e[2], e[0]]) if side > 0 else np.stack([e[2], e[1], -e[0]])
        wall = Lx if side > 0 else 0.0
    else:
        R = np.stack([e[2], e[0], e[1]]) if side > 0 else np.stack([e[0], e[2], -e[1]])
        wall = Ly if side > 0 else 0.0
    # local tangential extents, inset from adjacent faces
    w_t = 0.12
    ins = [(-depth * (1 - w_t), -depth * w_t), None]
    other = Ly if axis == 0 else Lx
    ins[1] = (other * w_t, other * (1 - w_t))
    g_loc = wall if side > 0 else -wall
    slab = 0.1 * min(Lx, Ly)
    if axis == 0:
        # local axes: side>0 -> (y, z, x); side<0 -> (z, y, -x)
        b0 = ins[1] if side > 0 else ins[0]
        b1 = ins[0] if side > 0 else ins[1]
    else:
        # side>0 -> (z, x, y); side<0 -> (x, z, -y)
        b0 = ins[0] if side > 0 else ins[1]
        b1 = ins[1] if side > 0 else ins[0]
    bounds = np.array([b0, b1, (g_loc - slab, g_loc + slab)])
    chart = AtlasChart(rotation=R, bounds=bounds, touches_boundary=True)
    return chart, ProfileFunction.constant(g_loc)


def oscillating_box_family(lengths=(0.6, 0.45), depth=0.5, alpha=2.0,
                           b_amp=1.0, b_kind="cos2pi", psi_margin=0.18,
                           kappa_exponent=None,
                           kappa_scale=0.35) -> PerturbationFamily:
    """Model family: box (0,Lx)x(0,Ly)x(-depth,0) whose top oscillates as
    eps^alpha b(x/eps) psi(x), all other boundary pieces fixed.

    kappa(eps) defaults to kappa_scale * eps^{2*at/3} with
    at = min(1.75, (1.5 + alpha)/2) for alpha > 1.5, at = alpha otherwise
    (exploratory regime). The scale keeps the Piola offset k = 6 kappa inside
    the chart at desk-scale eps; it does not change any exponent.
    """
    Lx, Ly = lengths
    rho = 0.05 * min(Lx, Ly, depth)
    headroom = 0.2 * depth

    psi_center = (Lx / 2.0, Ly / 2.0)
    psi_halfwidth = ((0.5 - psi_margin / 2) * Lx, (0.5 - psi_margin / 2) * Ly)

    top = AtlasChart(
        rotation=np.eye(3),
        bounds=np.array([(0.0, Lx), (0.0, Ly), (-0.85 * depth, headroom)]),
        touches_boundary=True,
        covering=(True, True, False),
    )
    # floor chart: pi-rotation about x, local z = -z_global
    R_floor = np.diag([1.0, -1.0, -1.0])
    floor = AtlasChart(
        rotation=R_floor,
        bounds=np.array([(0.0, Lx), (-Ly, 0.0), (0.2 * depth, depth + 2 * rho)]),
        touches_boundary=True,
        covering=(True, True, False),
    )
    charts = [top, floor]
    profiles = [None, ProfileFunction.constant(depth)]
    for axis in (0, 1):
        for side in (-1, 1):
            ch, pr = _wall_chart(axis, side, lengths, depth, rho)
            charts.append(ch)
            profiles.append(pr)
    interior = AtlasChart(
        rotation=np.eye(3),
        bounds=np.array([(0.12 * Lx, 0.88 * Lx), (0.12 * Ly, 0.88 * Ly),
                         (-0.88 * depth, -0.12 * depth)]),
        touches_boundary=False,
    )
    charts.append(interior)

    base_top = ProfileFunction.constant(0.0)
    profiles[0] = base_top
    atlas = Atlas(rho=rho, charts=tuple(charts))
    base = AtlasDomain(atlas=atlas, profiles=tuple(profiles))

    fixed_tail = tuple(profiles[1:])

    def perturbed(eps: float) -> AtlasDomain:
        g_eps = ProfileFunction.oscillatory(
            alpha=alpha, eps=eps, b_amp=b_amp, b_kind=b_kind, psi_kind="bump",
            psi_center=psi_center, psi_halfwidth=psi_halfwidth)
        return AtlasDomain(atlas=atlas, profiles=(g_eps,) + fixed_tail)

    if kappa_exponent is None:
        at = min(1.75, (1.5 + alpha) / 2.0) if alpha > 1.5 else alpha
        kappa_exponent = 2.0 * at / 3.0

    def kappa(eps: float) -> float:
        return kappa_scale * float(eps) ** kappa_exponent

    fam = PerturbationFamily(base=base, perturbed=perturbed, kappa=kappa)
    fam.lengths = (Lx, Ly)
    fam.depth = depth
    fam.alpha = alpha
    return fam


# ---------------------------------------------------------------------------
# domain specification files
# ---------------------------------------------------------------------------

def _profile_from_table(tbl: dict) -> ProfileFunction:
    tbl = dict(tbl)
    kind = tbl.pop("kind", None)
    if kind is None:
        raise AtlasValidationError("chart profile needs a 'kind' key")
    for key in ("psi_center", "psi_halfwidth", "center"):
        if key in tbl:
            tbl[key] = tuple(tbl[key])
    return ProfileFunction(kind, **tbl)


def load_domain_spec(path) -> AtlasDomain:
    """Load an AtlasDomain from a TOML domain-specification file.

    Schema (see docs/formats.md): [atlas] rho plus an [[atlas.charts]] array
    with bounds, rotation as axis-angle, touches_boundary, optional covering,
    and a profile sub-table on boundary charts. TOML syntax errors carry the
    file line; semantic errors name the chart index and key.
    """
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib

    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise AtlasValidationError(f"{path}: {e}") from e
    try:
        atl = raw["atlas"]
        rho = float(atl["rho"])
        chart_tables = atl["charts"]
    except KeyError as e:
        raise AtlasValidationError(f"{path}: missing key {e}") from e
    charts, profiles = [], []
    for i, tbl in enumerate(chart_tables):
        try:
            R = rotation_about_axis(tbl.get("rotation_axis", (0.0, 0.0, 1.0)),
                                    float(tbl.get("rotation_angle", 0.0)))
            chart = AtlasChart(
                rotation=R,
                bounds=np.asarray(tbl["bounds"], dtype=float),
                touches_boundary=bool(tbl.get("touches_boundary", False)),
                covering=tuple(tbl.get("covering", (False, False, False))))
        except (KeyError, ValueError) as e:
            raise AtlasValidationError(f"{path}: chart {i}: {e}") from e
        charts.append(chart)
        if chart.touches_boundary:
            if "profile" not in tbl:
                raise AtlasValidationError(
                    f"{path}: chart {i} touches the boundary but has no profile")
            profiles.append(_profile_from_table(tbl["profile"]))
    atlas = Atlas(rho=rho, charts=tuple(charts))
    return AtlasDomain(atlas=atlas, profiles=tuple(profiles))
