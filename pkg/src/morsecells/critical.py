"""Critical point search, classification, and second-order Morse charts.

Ascending-flow convention throughout: the gradientlike field increases f, so
the stable manifold of an index-k critical point is k-dimensional and the
chart splits as (x, y) with x the k stable coordinates (negative Hessian
eigenvalues) and y the n-k unstable ones.  In chart coordinates the model is

    f(x, y) = f(p) + |y|^2 - |x|^2,      flow (x, y) -> (e^-t x, e^t y).

Charts are second order: an eigenbasis rotation followed by axiswise scaling
by sqrt(|lambda_i| / 2).  The chart inverse solves back to the surface along
the fixed normal at p, so the round trip is exact to root-finding precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

DEGENERACY_TOL = 1e-6
DEDUP_FACTOR = 10.0


class DegenerateCriticalPointError(ValueError):
    pass


class BoundaryCriticalPointError(ValueError):
    pass


class ChartRadiusUnderflowError(ValueError):
    pass


@dataclass
class CriticalPoint:
    id: int
    location: np.ndarray
    value: float
    index: int
    eigenvalues: np.ndarray          # ascending; negatives first
    eigenvectors: np.ndarray         # ambient columns, matching order
    chart_radius: float = 0.0
    chart: "MorseChart | None" = dc_field(default=None, repr=False)

    def __repr__(self):
        loc = np.array2string(self.location, precision=6)
        return f"CriticalPoint(id={self.id}, f={self.value:.6g}, index={self.index}, at {loc})"


def classify(cp: CriticalPoint) -> int:
    """Morse index: number of negative Hessian eigenvalues."""
    if np.any(np.abs(cp.eigenvalues) <= DEGENERACY_TOL):
        raise DegenerateCriticalPointError(f"critical point {cp.id} is degenerate")
    return int(np.sum(cp.eigenvalues < 0.0))


class MorseChart:
    """Second-order normal-form chart around a critical point."""

    def __init__(self, cp: CriticalPoint, field, radius):
        self.center = cp
        self.field = field
        self.k = cp.index
        self.f0 = cp.value
        self.center_point = np.asarray(cp.location, dtype=float)
        self.eigenvalues = np.asarray(cp.eigenvalues, dtype=float)
        self.E = np.asarray(cp.eigenvectors, dtype=float)
        self.sigma = np.sqrt(np.abs(self.eigenvalues) / 2.0)
        self.radius = float(radius)
        dom = field.domain
        self.normal = dom.normal(self.center_point) if dom.kind == "implicit" else None
        # rows of DEt give chart coordinates of tangent displacements
        self.DEt = self.sigma[:, None] * self.E.T
        # chart coordinates only see tangential displacement, so ball
        # membership needs an ambient proximity guard as well
        self.reach = 2.5 * self.radius / float(np.min(self.sigma))

    @property
    def intrinsic_dim(self):
        return self.E.shape[1]

    def coords(self, z):
        """Chart coordinates w = (x, y) of an ambient point."""
        return self.DEt @ (np.asarray(z, dtype=float) - self.center_point)

    def point(self, w):
        """Ambient point with chart coordinates w (inverse chart)."""
        w = np.asarray(w, dtype=float)
        base = self.center_point + self.E @ (w / self.sigma)
        if self.normal is None:
            return base
        return self.field.domain.project_along(base, self.normal)

    def split(self, w):
        return w[:self.k], w[self.k:]

    def model_value(self, w):
        x, y = self.split(np.asarray(w, dtype=float))
        return self.f0 + float(y @ y) - float(x @ x)

    def model_rhs(self, w):
        """Model field (-x, y) in chart coordinates."""
        out = np.array(w, dtype=float)
        out[:self.k] *= -1.0
        return out

    def model_flow(self, w, t):
        w = np.array(w, dtype=float)
        w[:self.k] *= np.exp(-t)
        w[self.k:] *= np.exp(t)
        return w

    def model_field(self, z, w=None):
        """Tangent vector at z whose chart image is exactly the model field."""
        if w is None:
            w = self.coords(z)
        m = self.model_rhs(w)
        dom = self.field.domain
        if dom.kind == "box":
            return np.linalg.solve(self.DEt, m)
        B = dom.tangent_basis(z)
        return B @ np.linalg.solve(self.DEt @ B, m)

    def contains(self, z, factor=1.0):
        z = np.asarray(z, dtype=float)
        if np.linalg.norm(z - self.center_point) > self.reach:
            return False
        return np.linalg.norm(self.coords(z)) <= factor * self.radius

    def ball_coords(self, z, factor=1.0):
        """Chart coordinates if z is in the factor-scaled ball, else None."""
        z = np.asarray(z, dtype=float)
        if np.linalg.norm(z - self.center_point) > self.reach:
            return None
        w = self.coords(z)
        if np.linalg.norm(w) <= factor * self.radius:
            return w
        return None

    def normal_form_residual(self, n_dirs=24, radial=(0.5, 1.0)):
        """Worst relative f-residual against the model on the chart ball.

        Relative to max(model magnitude, |w|^2): a second-order chart is
        within tolerance when cubic remainders are small against whichever
        of the model value and the quadratic variation dominates.
        """
        dim = self.intrinsic_dim
        worst = 0.0
        for frac in radial:
            r = frac * self.radius
            for i in range(n_dirs):
                ang = 2.0 * np.pi * i / n_dirs
                if dim == 2:
                    d = np.array([np.cos(ang), np.sin(ang)])
                else:
                    d = np.array([1.0 if i % 2 else -1.0])
                w = r * d
                z = self.point(w)
                fv = self.field.value(z)
                model = self.model_value(w)
                denom = max(abs(model), float(w @ w), 1e-9)
                worst = max(worst, abs(fv - model) / denom)
        return worst


def build_morse_chart(cp: CriticalPoint, field, eps_max=None, residual_tol=1e-4):
    """Largest chart with normal-form residual below tolerance.

    eps_max is in chart units; shrink by 0.85 until the residual passes.
    Raises ChartRadiusUnderflowError below 1e-4.
    """
    if eps_max is None:
        eps_max = 0.2 * float(np.min(np.sqrt(np.abs(cp.eigenvalues) / 2.0)))
    radius = float(eps_max)
    while radius >= 1e-4:
        chart = MorseChart(cp, field, radius)
        if chart.normal_form_residual() < residual_tol:
            cp.chart_radius = radius
            cp.chart = chart
            return chart
        radius *= 0.85
    raise ChartRadiusUnderflowError(
        f"no valid chart radius >= 1e-4 at critical point {cp.id}")


def _tangent_newton(field, z0, newton_tol, max_iter=80):
    dom = field.domain
    z = np.asarray(z0, dtype=float).copy()
    if dom.kind == "implicit":
        z = dom.project(z)
    step_cap = 0.15 * dom.diameter()
    for _ in range(max_iter):
        B = dom.tangent_basis(z)
        r = B.T @ field.gradient(z)
        if np.linalg.norm(r) < newton_tol:
            return z
        M = B.T @ field.hessian(z) @ B
        try:
            delta = np.linalg.solve(M, -r)
        except np.linalg.LinAlgError:
            return None
        nd = np.linalg.norm(delta)
        if nd > step_cap:
            delta *= step_cap / nd
        z = z + B @ delta
        if dom.kind == "implicit":
            try:
                z = dom.project(z)
            except Exception:
                return None
        else:
            lo, hi = dom.box[0], dom.box[1]
            if np.any(z < lo) or np.any(z > hi):
                return None
    return None


def _eigendata(field, z):
    dom = field.domain
    B = dom.tangent_basis(z)
    M = B.T @ field.hessian(z) @ B
    lam, U = np.linalg.eigh(M)
    E = B @ U
    # deterministic sign convention
    for j in range(E.shape[1]):
        i = int(np.argmax(np.abs(E[:, j])))
        if E[i, j] < 0:
            E[:, j] *= -1.0
    return lam, E


def find_critical_points(v, grid_density=12, newton_tol=1e-10,
                         degeneracy_tol=DEGENERACY_TOL):
    """Newton from every grid seed; dedupe, verify, sort, and assign ids.

    Sorting is by f-value then lexicographic location; each survivor must
    have |grad f| < newton_tol and all |eigenvalue| > degeneracy_tol.
    """
    field = v.base
    dom = field.domain
    if grid_density < 8:
        raise ValueError("grid_density must be at least 8 per axis")
    if newton_tol > 1e-8:
        raise ValueError("newton_tol must be at most 1e-8")
    seeds = dom.parameter_grid(grid_density)
    found = []
    for seed in seeds:
        z = _tangent_newton(field, seed, newton_tol)
        if z is None:
            continue
        if not any(np.linalg.norm(z - w) < DEDUP_FACTOR * newton_tol for w in found):
            found.append(z)
    if dom.kind == "box":
        lo, hi = dom.box[0], dom.box[1]
        for z in found:
            if np.any(z - lo < 1e-6) or np.any(hi - z < 1e-6):
                raise BoundaryCriticalPointError(f"critical point on domain boundary: {z}")
            if dom.sublevel is not None and abs(field.value(z) - dom.sublevel) < 1e-6:
                raise BoundaryCriticalPointError(f"critical point on sublevel boundary: {z}")
    records = []
    for z in found:
        lam, E = _eigendata(field, z)
        if np.min(np.abs(lam)) <= degeneracy_tol:
            raise DegenerateCriticalPointError(
                f"degenerate critical point at {z}: eigenvalues {lam}")
        records.append((field.value(z), tuple(z), z, lam, E))
    records.sort(key=lambda r: (r[0], r[1]))
    cps = []
    for i, (fv, _, z, lam, E) in enumerate(records):
        cp = CriticalPoint(id=i, location=z, value=float(fv), index=int(np.sum(lam < 0)),
                           eigenvalues=lam, eigenvectors=E)
        cps.append(cp)
    return cps


def attach_charts(v, cps, residual_tol=1e-4):
    """Build Morse charts for every critical point and install them on v.

    Ball shells are capped so that no two (shell-inflated) balls overlap,
    which keeps limit assignment unambiguous.
    """
    field = v.base
    charts = []
    for cp in cps:
        sig = np.sqrt(np.abs(cp.eigenvalues) / 2.0)
        amb_cap = _ambient_cap(cp, cps, field)
        eps_max = amb_cap * float(np.min(sig))
        charts.append(build_morse_chart(cp, field, eps_max=eps_max,
                                        residual_tol=residual_tol))
    v.attach_charts(charts)
    return charts


def _ambient_cap(cp, cps, field):
    from .field import GradientlikeField
    shell = GradientlikeField.SHELL
    d = np.inf
    for other in cps:
        if other.id != cp.id:
            d = min(d, np.linalg.norm(cp.location - other.location))
    if not np.isfinite(d):
        d = 0.5 * field.domain.diameter()
    return 0.3 * d / shell
