"""Domains, Morse functions and gradientlike vector fields.

A domain is either a closed implicit surface {g = 0} in R^3 (with the induced
metric) or an axis-aligned box in R^n (Euclidean).  On surfaces all first and
second derivatives are intrinsic: the gradient is the tangential projection of
the ambient gradient and the Hessian is the Riemannian Hessian of the
restriction, computed from the ambient Hessians of f and g.

A gradientlike field equals the intrinsic gradient away from critical points
but is replaced, inside each critical chart ball, by the pullback of the
model field (-x, y) in chart coordinates, with a smooth blend in a shell
around the ball.  This makes the flow in chart coordinates *exactly* the
model flow (e^-t x, e^t y), which the chart-shortcut integrator and the tube
extensions rely on; see the ledger for why plain grad f cannot satisfy the
chart-model accuracy contract.
"""

from __future__ import annotations

import numpy as np

from .expr import ScalarExpression

_PROJ_TOL = 1e-13
_PROJ_MAXIT = 60


class DomainError(ValueError):
    pass


class PointOffDomainError(DomainError):
    """Projection onto the surface failed to converge."""


def smoothstep(t):
    """C^1 cutoff: 0 for t<=0, 1 for t>=1, cubic in between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


class Domain:
    """Compact domain: implicit surface in R^3 or box in R^n.

    kind = "implicit": constraint is a ScalarExpression g with {g=0} the
    surface; `box` bounds the region scanned for seeds.
    kind = "box": Euclidean box; `sublevel` optionally caps the domain at
    {f <= sublevel} so the boundary is a regular level set of f.
    """

    def __init__(self, kind, ambient_dim, constraint=None, box=None, sublevel=None,
                 param_grid=None):
        if kind not in ("implicit", "box"):
            raise DomainError(f"unknown domain kind {kind!r}")
        if kind == "implicit" and constraint is None:
            raise DomainError("implicit domain needs a constraint expression")
        self.kind = kind
        self.ambient_dim = int(ambient_dim)
        self.constraint = constraint
        self.box = None if box is None else np.asarray(box, dtype=float)
        self.sublevel = sublevel
        self._param_grid = param_grid

    # -- surface geometry ---------------------------------------------------

    def constraint_value(self, p):
        return self.constraint.value(p)

    def normal(self, p):
        """Unit normal of the surface at p (implicit case)."""
        gg = self.constraint.gradient(p)
        n = np.linalg.norm(gg)
        if n == 0.0:
            raise DomainError("constraint gradient vanishes: not a regular level set")
        return gg / n

    def tangent_basis(self, p):
        """Deterministic orthonormal basis of the tangent space at p."""
        if self.kind == "box":
            return np.eye(self.ambient_dim)
        n = self.normal(p)
        # pick the fixed axis least aligned with n, for reproducibility
        k = int(np.argmin(np.abs(n)))
        e = np.zeros(3)
        e[k] = 1.0
        b1 = np.cross(n, e)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(n, b1)
        return np.column_stack([b1, b2])

    def project(self, p):
        """Project p onto the surface by Newton steps along the constraint gradient."""
        if self.kind == "box":
            return np.asarray(p, dtype=float)
        z = np.asarray(p, dtype=float).copy()
        for _ in range(_PROJ_MAXIT):
            g = self.constraint.value(z)
            if abs(g) < _PROJ_TOL:
                return z
            gg = self.constraint.gradient(z)
            denom = float(gg @ gg)
            if denom == 0.0:
                break
            z = z - (g / denom) * gg
        if abs(self.constraint.value(z)) < 1e-9:
            return z
        raise PointOffDomainError(f"projection did not converge near {p}")

    def project_along(self, p, direction):
        """Solve g(p + t*direction) = 0 for the root nearest t = 0."""
        if self.kind == "box":
            return np.asarray(p, dtype=float)
        p = np.asarray(p, dtype=float)
        d = np.asarray(direction, dtype=float)
        t = 0.0
        for _ in range(_PROJ_MAXIT):
            z = p + t * d
            g = self.constraint.value(z)
            if abs(g) < _PROJ_TOL:
                return z
            dg = float(self.constraint.gradient(z) @ d)
            if dg == 0.0:
                break
            t -= g / dg
        z = p + t * d
        if abs(self.constraint.value(z)) < 1e-9:
            return z
        raise PointOffDomainError(f"line projection did not converge near {p}")

    def contains(self, p, tol=1e-9):
        p = np.asarray(p, dtype=float)
        if self.kind == "implicit":
            return abs(self.constraint.value(p)) < tol
        if self.box is not None:
            lo, hi = self.box[0], self.box[1]
            if np.any(p < lo - tol) or np.any(p > hi + tol):
                return False
        return True

    def diameter(self):
        if self.kind == "box":
            lo, hi = self.box[0], self.box[1]
            return float(np.linalg.norm(hi - lo))
        lo, hi = self.box[0], self.box[1]
        return float(np.linalg.norm(hi - lo))

    def parameter_grid(self, density):
        """Seed points covering the domain: builtin parametrization if the
        surface has one, otherwise a box grid projected onto the surface."""
        if self._param_grid is not None:
            return self._param_grid(density)
        if self.kind == "box":
            axes = [np.linspace(self.box[0][i], self.box[1][i], density)
                    for i in range(self.ambient_dim)]
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.column_stack([m.ravel() for m in mesh])
        pts = []
        axes = [np.linspace(self.box[0][i], self.box[1][i], density) for i in range(3)]
        mesh = np.meshgrid(*axes, indexing="ij")
        raw = np.column_stack([m.ravel() for m in mesh])
        for p in raw:
            try:
                q = self.project(p)
            except PointOffDomainError:
                continue
            pts.append(q)
        return np.array(pts)


def sphere_domain(radius=1.0):
    g = ScalarExpression(f"x**2 + y**2 + z**2 - {radius}**2", 3)
    r = float(radius)

    def grid(density):
        th = np.linspace(0.0, np.pi, density + 2)[1:-1]
        ph = np.linspace(0.0, 2 * np.pi, density, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        pts = np.column_stack([
            (r * np.sin(T) * np.cos(P)).ravel(),
            (r * np.sin(T) * np.sin(P)).ravel(),
            (r * np.cos(T)).ravel(),
        ])
        return np.vstack([pts, [0.0, 0.0, r], [0.0, 0.0, -r]])

    box = [[-1.2 * r] * 3, [1.2 * r] * 3]
    return Domain("implicit", 3, constraint=g, box=box, param_grid=grid)


def torus_domain(R=2.0, r=1.0):
    """Torus of revolution about the y-axis (quartic implicit form)."""
    R, r = float(R), float(r)
    g = ScalarExpression(
        f"(x**2 + y**2 + z**2 + {R}**2 - {r}**2)**2 - 4*{R}**2*(x**2 + z**2)", 3)

    def grid(density):
        # poloidal angle a (tube), toroidal angle b (about the y-axis)
        a = np.linspace(0.0, 2 * np.pi, density, endpoint=False)
        b = np.linspace(0.0, 2 * np.pi, 2 * density, endpoint=False)
        A, B = np.meshgrid(a, b, indexing="ij")
        rho = R + r * np.cos(A)
        return np.column_stack([
            (rho * np.cos(B)).ravel(),
            (r * np.sin(A)).ravel(),
            (rho * np.sin(B)).ravel(),
        ])

    m = R + r + 0.2
    box = [[-m] * 3, [m] * 3]
    return Domain("implicit", 3, constraint=g, box=box, param_grid=grid)


def box_domain(bounds, sublevel=None):
    bounds = np.asarray(bounds, dtype=float)
    return Domain("box", bounds.shape[1], box=bounds, sublevel=sublevel)


class ScalarField:
    """A Morse function on a domain, with exact intrinsic derivative evaluators."""

    def __init__(self, expression: ScalarExpression, domain: Domain):
        if expression.ambient_dim != domain.ambient_dim:
            raise DomainError("expression and domain dimensions differ")
        self.expr = expression
        self.domain = domain

    def value(self, p):
        return self.expr.value(p)

    def ambient_gradient(self, p):
        return self.expr.gradient(p)

    def gradient(self, p):
        """Intrinsic gradient: tangential part of the ambient gradient."""
        g = self.expr.gradient(p)
        if self.domain.kind == "box":
            return g
        n = self.domain.normal(p)
        return g - (g @ n) * n

    def hessian(self, p):
        """Intrinsic (Riemannian) Hessian, as an ambient matrix annihilating
        the normal.  On {g=0}: P (Hf - (grad f . n / |grad g|) Hg) P."""
        H = self.expr.hessian(p)
        if self.domain.kind == "box":
            return H
        gg = self.domain.constraint.gradient(p)
        ng = np.linalg.norm(gg)
        n = gg / ng
        gf = self.expr.gradient(p)
        Hg = self.domain.constraint.hessian(p)
        P = np.eye(3) - np.outer(n, n)
        M = H - ((gf @ n) / ng) * Hg
        return P @ M @ P

    def evaluate(self, p, tol=1e-9):
        """(value, intrinsic gradient, intrinsic Hessian) at a domain point.

        Off-surface points within reach are projected first; projection
        failure raises PointOffDomainError.
        """
        p = np.asarray(p, dtype=float)
        if self.domain.kind == "implicit" and abs(self.domain.constraint.value(p)) >= tol:
            p = self.domain.project(p)
        return self.value(p), self.gradient(p), self.hessian(p)


class GradientlikeField:
    """Gradientlike vector field: v(f) >= 0, vanishing only at critical points.

    v = intrinsic gradient, blended inside each critical chart ball to the
    pullback of the model field (-x, y), plus an optional eta-scaled smooth
    random tangent perturbation that vanishes on the balls and their blend
    shells.  Charts are attached after the critical-point search
    (attach_charts); before that v is the bare intrinsic gradient.
    """

    SHELL = 1.6  # blend shell outer radius, in units of the chart radius

    def __init__(self, base: ScalarField, eta=0.0, seed=0):
        self.base = base
        self.eta = float(eta)
        self.seed = int(seed)
        self.charts = []
        self.perturbation_coeffs = _perturbation_coefficients(
            base.domain.ambient_dim, seed)

    def attach_charts(self, charts):
        """Install Morse charts; inside their balls v follows the local model."""
        self.charts = list(charts)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        v = self.base.gradient(z)
        if self.eta > 0.0:
            v = v + self.eta * self._perturbation(z, np.linalg.norm(v))
        for chart in self.charts:
            if np.linalg.norm(z - chart.center_point) > chart.reach:
                continue
            w = chart.coords(z)
            rho = np.linalg.norm(w) / chart.radius
            if rho >= self.SHELL:
                continue
            vm = chart.model_field(z, w)
            mu = 1.0 - smoothstep((rho - 1.0) / (self.SHELL - 1.0))
            v = (1.0 - mu) * v + mu * vm
        return v

    def _perturbation(self, z, scale):
        coeffs = self.perturbation_coeffs
        w = _evaluate_perturbation(coeffs, z)
        if self.base.domain.kind == "implicit":
            n = self.base.domain.normal(z)
            w = w - (w @ n) * n
        nw = np.linalg.norm(w)
        if nw > 1.0:
            w = w / nw
        cut = 1.0
        for chart in self.charts:
            if np.linalg.norm(z - chart.center_point) > chart.reach:
                continue
            rho = np.linalg.norm(chart.coords(z)) / chart.radius
            cut = min(cut, smoothstep((rho - self.SHELL) / self.SHELL))
        return 0.5 * scale * cut * w

    def vf(self, z):
        """Derivative of f along v at z (nonnegative off critical points)."""
        return float(self(z) @ self.base.gradient(z))


def _perturbation_coefficients(dim, seed):
    rng = np.random.default_rng(seed)
    # low-order trigonometric tangent field; coefficients frozen at build time
    return rng.standard_normal((dim, dim, 2)) * 0.5


def _evaluate_perturbation(coeffs, z):
    dim = coeffs.shape[0]
    out = np.zeros(dim)
    for i in range(dim):
        for j in range(dim):
            out[i] += coeffs[i, j, 0] * np.sin(z[j % len(z)]) \
                + coeffs[i, j, 1] * np.cos(z[j % len(z)])
    return out


def make_gradientlike(field: ScalarField, eta=0.0, seed=0) -> GradientlikeField:
    """Build a gradientlike field for f, deterministic in (field, eta, seed)."""
    if eta < 0.0:
        raise ValueError("eta must be nonnegative")
    return GradientlikeField(field, eta=eta, seed=seed)


class PerturbationTooLargeError(ValueError):
    pass


def check_gradientlike(v: GradientlikeField, grid_density=24, tol=None):
    """Scan v(f) on a covering grid.

    Passes iff every sample with v(f) below tolerance lies inside a critical
    chart ball.  Returns a report dict (never raises); the certification is
    only as fine as the grid, whose density is recorded.
    """
    pts = v.base.domain.parameter_grid(grid_density)
    charts = v.charts
    if tol is None:
        if charts:
            tol = 0.1 * min((0.25 * c.radius) ** 2 * min(abs(l) for l in c.eigenvalues)
                            for c in charts)
        else:
            tol = 1e-10
    worst = np.inf
    violations = []
    for p in pts:
        val = v.vf(p)
        worst = min(worst, val)
        if val < tol:
            d, inside = _nearest_chart(charts, p)
            violations.append({
                "point": [float(c) for c in p],
                "vf": float(val),
                "dist_to_critical": float(d),
                "inside_chart_ball": bool(inside),
            })
    ok = all(item["inside_chart_ball"] for item in violations) and worst > -1e-12
    return {
        "pass": bool(ok),
        "worst_vf": float(worst),
        "tolerance": float(tol),
        "grid_density": int(grid_density),
        "n_samples": int(len(pts)),
        "violations": violations,
    }


def _nearest_chart(charts, p):
    if not charts:
        return np.inf, False
    best, inside = np.inf, False
    for c in charts:
        d = np.linalg.norm(np.asarray(p) - c.center_point)
        if d < best:
            best = d
            inside = c.contains(p)
    return best, inside
