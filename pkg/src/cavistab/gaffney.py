"""Sufficient-condition analytics for uniform regularity of the boundary:
square-Dini integrals of gradient moduli of continuity, the localized
fractional seminorm of the profile gradient, the two-term smallness criterion
it feeds, and a discrete probe of the embedding constant on FEM eigenspaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError, QuadratureNonConvergentError
from .quadrature import gauss_legendre, gl_panels, log_panel_edges

__all__ = ["ModulusOfContinuity", "DiniResult", "dini_integral",
           "scaling_law_check", "d32_seminorm", "mazya_criterion",
           "MazyaCriterionReport", "discrete_gaffney_constant"]


class ModulusOfContinuity:
    """Non-decreasing modulus bound omega(t) for a gradient.

    Kinds: power (min(K t^beta, cap)), lipschitz_capped (min(c t, cap)),
    log_reciprocal (1/|log t| near zero, frozen beyond t0), and scaled
    (eps^{alpha-1} base(t/eps)).
    """

    def __init__(self, kind: str, **params):
        self.kind = kind
        self.params = params

    @classmethod
    def power(cls, K: float = 1.0, beta: float = 0.75, cap: float = 1.0):
        return cls("power", K=K, beta=beta, cap=cap)

    @classmethod
    def lipschitz_capped(cls, c: float = 1.0, cap: float = 1.0):
        return cls("lipschitz", c=c, cap=cap)

    @classmethod
    def log_reciprocal(cls, t0: float = math.exp(-2.0)):
        return cls("log_reciprocal", t0=t0)

    @classmethod
    def scaled(cls, base: "ModulusOfContinuity", eps: float, alpha: float):
        return cls("scaled", base=base, eps=eps, alpha=alpha)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = self.kind
        if k == "power":
            K, beta, cap = (self.params[x] for x in ("K", "beta", "cap"))
            return np.minimum(K * t**beta, cap)
        if k == "lipschitz":
            return np.minimum(self.params["c"] * t, self.params["cap"])
        if k == "log_reciprocal":
            t0 = self.params["t0"]
            tt = np.minimum(t, t0)
            out = np.zeros_like(tt)
            pos = tt > 0
            out[pos] = 1.0 / np.abs(np.log(tt[pos]))
            return out
        if k == "scaled":
            base, eps, alpha = (self.params[x] for x in ("base", "eps", "alpha"))
            return eps ** (alpha - 1.0) * base(t / eps)
        raise GeometryError(f"unknown modulus kind '{k}'")

    def breakpoints(self):
        """Kinks of the formula, used to split quadrature panels."""
        k = self.kind
        if k == "power":
            K, beta, cap = (self.params[x] for x in ("K", "beta", "cap"))
            if K > 0 and np.isfinite(cap):
                return [(cap / K) ** (1.0 / beta)]
            return []
        if k == "lipschitz":
            c, cap = self.params["c"], self.params["cap"]
            return [cap / c] if c > 0 else []
        if k == "log_reciprocal":
            return [self.params["t0"]]
        if k == "scaled":
            eps = self.params["eps"]
            return [eps * b for b in self.params["base"].breakpoints()]
        return []


@dataclass
class DiniResult:
    value: float               # accumulated integral (meaningless if divergent)
    tail_estimate: float
    divergent: bool
    panels_used: int

    def __float__(self):
        return self.value


def _integrand_panels(omega, edges, nq):
    t, w = gl_panels(edges, nq)
    f = (omega(t) / t) ** 2
    return float(np.sum(w * f))


def dini_integral(omega: ModulusOfContinuity, t_min: float = 1e-3,
                  t_max: float = 1e8, quad_n: int = 12,
                  max_halvings: int = 200) -> DiniResult:
    """Quadrature of int (omega(t)/t)^2 dt down to zero.

    The [t_min, t_max] part uses octave-spaced Gauss panels split at formula
    kinks. Below t_min, panels [t_min 2^{-k-1}, t_min 2^{-k}] are accumulated;
    the integral is declared divergent when consecutive panel masses fail to
    decay (ratio >= 0.95 twice in a row) or the running value grows by more
    than 1.5x twice in a row. Convergent tails are closed by geometric
    extrapolation of the panel masses.
    """
    if t_min <= 0 or t_max <= t_min:
        raise GeometryError("need 0 < t_min < t_max")
    bp = omega.breakpoints()
    edges = log_panel_edges(t_min, t_max, per_octave=1, breakpoints=bp)
    value = _integrand_panels(omega, edges, quad_n)

    panels = []
    total = value
    grow_strikes = ratio_strikes = 0
    divergent = False
    k = 0
    while k < max_halvings:
        hi = t_min * 2.0 ** (-k)
        lo = hi / 2.0
        sub = [lo, hi]
        for b in bp:
            if lo < b < hi:
                sub = [lo, b, hi]
        p = _integrand_panels(omega, np.asarray(sub), quad_n)
        if panels:
            ratio_strikes = ratio_strikes + 1 if p >= 0.95 * panels[-1] else 0
            grow_strikes = grow_strikes + 1 if total + p >= 1.5 * total else 0
            if ratio_strikes >= 2 or grow_strikes >= 2:
                divergent = True
                panels.append(p)
                total += p
                break
        panels.append(p)
        total += p
        if p < 1e-16 * max(total, 1e-300):
            break
        k += 1

    tail = 0.0
    if not divergent and len(panels) >= 2 and panels[-1] > 0:
        r = panels[-1] / panels[-2]
        if r < 0.95:
            tail = panels[-1] * r / (1.0 - r)
    return DiniResult(value=total + tail, tail_estimate=tail,
                      divergent=divergent, panels_used=len(panels))


@dataclass
class ScalingLawResult:
    eps_list: list
    values: list
    slope: float
    predicted_slope: float

    @property
    def slope_error(self) -> float:
        return abs(self.slope - self.predicted_slope)


def scaling_law_check(alpha: float, omega_b: ModulusOfContinuity,
                      eps_list: Sequence[float], t_max: float = 1e6,
                      quad_n: int = 12) -> ScalingLawResult:
    """Dini values of the scaled modulus eps^{alpha-1} omega_b(./eps) per eps,
    with the fitted log-log slope against the prediction 2 alpha - 3."""
    values = []
    for eps in eps_list:
        om = ModulusOfContinuity.scaled(omega_b, eps=eps, alpha=alpha)
        t_min = 1e-7 * eps
        res = dini_integral(om, t_min=t_min, t_max=t_max, quad_n=quad_n)
        if res.divergent:
            raise QuadratureNonConvergentError(
                "scaled Dini integral diverged; scaling law undefined")
        values.append(res.value)
    slope = float(np.polyfit(np.log(np.asarray(eps_list, dtype=float)),
                             np.log(np.asarray(values)), 1)[0])
    return ScalingLawResult(eps_list=list(eps_list), values=values,
                            slope=slope, predicted_slope=2.0 * alpha - 3.0)


# ---------------------------------------------------------------------------
# localized fractional seminorm and the smallness criterion
# ---------------------------------------------------------------------------

def _grad_on_line(g, x):
    """1D profile trace: derivative of g along the first axis at (x, 0)."""
    pts = np.stack([x, np.zeros_like(x)], axis=-1)
    return g.gradient(pts)[..., 0]


def _d32_squared_at(g, centers, rho, quad_n, N):
    """D_{3/2}(g, B_rho)^2 at each center (vectorized inner quadrature).

    The radial variable is graded (r = rho u^2) which absorbs the
    |x - y|^{-N} singularity for Hoelder-regular gradients.
    """
    u, wu = gauss_legendre(quad_n)
    u = 0.5 * (u + 1.0)
    wu = 0.5 * wu
    r = rho * u**2
    dr = 2.0 * rho * u * wu
    if N == 3:
        nth = max(8, 2 * quad_n)
        th = np.linspace(0.0, 2.0 * math.pi, nth, endpoint=False)
        wth = 2.0 * math.pi / nth
        offs = np.stack([np.outer(r, np.cos(th)), np.outer(r, np.sin(th))],
                        axis=-1)                      # (nr, nth, 2)
        gc = g.gradient(centers)                      # (nc, 2)
        pts = centers[:, None, None, :] + offs[None]  # (nc, nr, nth, 2)
        gv = g.gradient(pts.reshape(-1, 2)).reshape(pts.shape)
        diff2 = np.sum((gv - gc[:, None, None, :]) ** 2, axis=-1)
        # r^{-N} * (r dr dtheta) = r^{-2} dr dtheta
        kern = (dr / r**2)[None, :, None] * wth
        return np.sum(diff2 * kern, axis=(1, 2))
    # N = 2: centers are scalars on the line, integrand |.|^{-2} over [-rho,rho]
    gc = _grad_on_line(g, centers)
    vals = np.zeros(len(centers))
    for sign in (-1.0, 1.0):
        y = centers[:, None] + sign * r[None, :]
        gy = _grad_on_line(g, y.reshape(-1)).reshape(y.shape)
        diff2 = (gy - gc[:, None]) ** 2
        vals += np.sum(diff2 * (dr / r**2)[None, :], axis=1)
    return vals


def d32_seminorm(g, xbar, rho: float, E_spec=("disk", None), quad_n: int = 12,
                 N: int = 3, check_refinement: bool = True) -> float:
    """L2(E) norm of the localized fractional gradient seminorm D_{3/2}(g,B_rho).

    E_spec: ('disk', radius) or ('annulus', r0, r1), centered at xbar;
    radius defaults to rho. Raises QuadratureNonConvergentError when a 1.5x
    quadrature refinement moves the result by more than 5%.
    """
    xbar = np.asarray(xbar, dtype=float)

    def compute(nq):
        u, wu = gauss_legendre(nq)
        u = 0.5 * (u + 1.0)
        wu = 0.5 * wu
        if E_spec[0] == "disk":
            r0, r1 = 0.0, E_spec[1] if E_spec[1] is not None else rho
        elif E_spec[0] == "annulus":
            r0, r1 = E_spec[1], E_spec[2]
        else:
            raise GeometryError("E_spec must be ('disk', r) or ('annulus', r0, r1)")
        rr = r0 + (r1 - r0) * u
        wr = (r1 - r0) * wu
        if N == 3:
            nth = max(8, 2 * nq)
            th = np.linspace(0.0, 2.0 * math.pi, nth, endpoint=False)
            wth = 2.0 * math.pi / nth
            P = xbar[None, None, :] + np.stack(
                [np.outer(rr, np.cos(th)), np.outer(rr, np.sin(th))], axis=-1)
            centers = P.reshape(-1, 2)
            d2 = _d32_squared_at(g, centers, rho, nq, N).reshape(len(rr), nth)
            mass = np.sum(d2 * (rr * wr)[:, None] * wth)
        else:
            centers = np.concatenate([xbar[0] - rr[::-1], xbar[0] + rr])
            w_line = np.concatenate([wr[::-1], wr])
            d2 = _d32_squared_at(g, centers, rho, nq, N)
            mass = np.sum(d2 * w_line)
        return math.sqrt(max(0.0, mass))

    val = compute(quad_n)
    if check_refinement:
        ref = compute(int(quad_n * 1.5) + 1)
        if abs(ref - val) > 0.05 * max(abs(ref), 1e-300):
            raise QuadratureNonConvergentError(
                f"D_3/2 quadrature unstable: {val:.6g} vs refined {ref:.6g}")
        val = ref
    return val


def _measure_E(spec, rho, N):
    if spec[0] == "disk":
        r = spec[1] if spec[1] is not None else rho
        return math.pi * r * r if N == 3 else 2.0 * r
    r0, r1 = spec[1], spec[2]
    return math.pi * (r1**2 - r0**2) if N == 3 else 2.0 * (r1 - r0)


@dataclass
class MazyaCriterionReport:
    profile_kind: str
    rho: float
    d32_term: float
    grad_sup: float
    delta: float
    dini_value: Optional[float]
    dini_divergent: Optional[bool]
    flagged: bool = False          # quadrature did not stabilize

    @property
    def total(self) -> float:
        return self.d32_term + self.grad_sup

    def csv_row(self):
        dini = ("divergent" if self.dini_divergent
                else ("" if self.dini_value is None else self.dini_value))
        return [self.profile_kind, self.rho,
                self.d32_term if not self.flagged else "unstable",
                self.grad_sup, self.delta, dini]


def mazya_criterion(g, delta: float, rho_list: Sequence[float], N: int = 3,
                    center=(0.0, 0.0), quad_n: int = 12):
    """Per-rho report of the two smallness components: the measure-normalized
    D_{3/2} term (sup over a nested disk family E) and the local gradient sup.
    Display-only comparison against delta: the dimensional constants of the
    criterion are not quantified, so no membership verdict is returned.
    """
    if N not in (2, 3):
        raise GeometryError("N must be 2 or 3")
    center = np.asarray(center, dtype=float)
    dini_val = dini_div = None
    try:
        mod = g.gradient_modulus()
        res = dini_integral(mod, t_min=1e-6 * min(rho_list), t_max=1e3)
        dini_val, dini_div = (None if res.divergent else res.value), res.divergent
    except GeometryError:
        pass
    out = []
    for rho in rho_list:
        best = 0.0
        flagged = False
        for frac in (0.25, 0.5, 1.0):
            E = ("disk", frac * rho)
            try:
                nrm = d32_seminorm(g, center, rho, E_spec=E, quad_n=quad_n, N=N)
            except QuadratureNonConvergentError:
                flagged = True
                continue
            mE = _measure_E(E, rho, N)
            if N == 3:
                term = nrm / mE ** 0.25
            else:
                term = nrm * abs(math.log(mE)) ** 0.5
            best = max(best, term)
        # sampled gradient sup over B_rho
        if N == 3:
            tt = np.linspace(0, 2 * math.pi, 64, endpoint=False)
            rr = np.linspace(1e-6, rho, 48)
            P = center[None, None, :] + np.stack(
                [np.outer(rr, np.cos(tt)), np.outer(rr, np.sin(tt))], axis=-1)
            gs = float(np.max(np.linalg.norm(g.gradient(P.reshape(-1, 2)),
                                             axis=-1)))
        else:
            xs = center[0] + np.linspace(-rho, rho, 257)
            gs = float(np.max(np.abs(_grad_on_line(g, xs))))
        out.append(MazyaCriterionReport(
            profile_kind=getattr(g, "kind", "custom"), rho=rho, d32_term=best,
            grad_sup=gs, delta=delta, dini_value=dini_val,
            dini_divergent=dini_div, flagged=flagged))
    return out


# ---------------------------------------------------------------------------
# discrete embedding-constant probe
# ---------------------------------------------------------------------------

def discrete_gaffney_constant(space, spectrum, h1_matrix) -> float:
    """max over computed eigenvectors u of sqrt(u^T H1 u / u^T (M + A_1) u),
    a lower bound on the discrete embedding constant of the graph norm;
    tracked across eps for uniformity trends."""
    from .fem import SparseSymOp

    H = h1_matrix.csr if isinstance(h1_matrix, SparseSymOp) else h1_matrix
    M = space._reduced("mass")
    A1 = space._reduced("curl") + space._reduced("div")
    best = 0.0
    for i in range(spectrum.m):
        u = spectrum.eigenvectors[:, i]
        num = float(u @ (H @ u))
        den = float(u @ (M @ u) + u @ (A1 @ u))
        if den > 0:
            best = max(best, math.sqrt(num / den))
    return best
