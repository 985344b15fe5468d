"""Sampled Whitney condition A/B checks, plus the classical cusp fixture.

Sequences x_i in S converging to x in T are produced by contracting a start
point toward x in ambient coordinates and projecting back onto S; companion
points x_i' in T are the T-projections (with randomized relative rates).
Condition A compares the limit tangent plane L of S against T_xT; condition B
compares the limit secant direction against L.  Both are falsification tests
at the configured tolerance, scaled by the observed convergence residual.
"""

from __future__ import annotations

import numpy as np


class InsufficientSampleError(RuntimeError):
    pass


def _projector(rows):
    """Orthogonal projector onto the row span."""
    rows = np.asarray(rows, dtype=float)
    if rows.size == 0:
        return np.zeros((rows.shape[1] if rows.ndim == 2 else 3,) * 2)
    q, _ = np.linalg.qr(rows.T)
    q = q[:, :np.linalg.matrix_rank(rows, tol=1e-10)]
    return q @ q.T


def _mean_plane(projectors, dim):
    avg = sum(projectors) / len(projectors)
    w, vecs = np.linalg.eigh(avg)
    cols = vecs[:, ::-1][:, :dim]
    return cols @ cols.T


def check_whitney(T, S, sequences=200, seed=0, tol=1e-2, depth=12,
                  start_radius=None, diameter=1.0):
    """Report on Whitney conditions A and B for the pair (T, S) at sampled
    convergent sequences.  Raises InsufficientSampleError when no sequence
    can be started (no S-points near T)."""
    rng = np.random.default_rng(seed)
    r0 = start_radius if start_radius is not None else 0.15 * diameter
    t_pts = T.points()
    n_amb = t_pts.shape[1]
    started = 0
    worst = {"A": 0.0, "B": 0.0}
    violations = []
    for trial in range(sequences):
        x = np.asarray(t_pts[rng.integers(0, len(t_pts))], dtype=float)
        pool = S.sample_near(x, r0, 4, rng)
        if len(pool) == 0:
            continue
        w = np.asarray(pool[rng.integers(0, len(pool))], dtype=float)
        q = rng.uniform(0.35, 0.7)
        qT = q ** rng.uniform(0.5, 2.0)
        # companion points in T: either the T-projection of the sequence
        # itself or an independently contracted T-sequence
        companion_proj = bool(rng.random() < 0.5) and T.dim > 0
        z = w
        zs, frames, secants = [], [], []
        ok = True
        for j in range(depth):
            z = S.project(x + q * (z - x))
            if z is None or not np.all(np.isfinite(z)):
                ok = False
                break
            if T.dim == 0:
                xT = x
            elif companion_proj:
                xT = T.project(z)
            else:
                xT = T.project(x + qT ** (j + 1) * (w - x))
            sec = z - xT
            ns = np.linalg.norm(sec)
            if ns < 1e-14:
                ok = False
                break
            zs.append(z)
            frames.append(_projector(S.frame(z)))
            secants.append(sec / ns)
        if not ok or len(zs) < 4:
            continue
        started += 1
        P_L = _mean_plane(frames[-3:], S.dim)
        frame_res = max(np.linalg.norm(P - P_L, 2) for P in frames[-3:])
        sec_dir = secants[-1]
        sec_res = max(np.linalg.norm(np.outer(s, s) - np.outer(sec_dir, sec_dir), 2)
                      for s in secants[-3:])
        tol_eff = tol + 3.0 * (frame_res + sec_res)
        P_T = _projector(T.frame(x)) if T.dim > 0 else np.zeros((n_amb, n_amb))
        dist_A = float(np.linalg.norm((np.eye(n_amb) - P_L) @ P_T, 2))
        dist_B = float(np.linalg.norm((np.eye(n_amb) - P_L) @ sec_dir))
        worst["A"] = max(worst["A"], dist_A)
        worst["B"] = max(worst["B"], dist_B)
        if dist_A > tol_eff or dist_B > tol_eff:
            violations.append({
                "x": x.tolist(), "trial": trial,
                "dist_A": dist_A, "dist_B": dist_B,
                "tolerance": float(tol_eff),
                "condition": "A" if dist_A > tol_eff else "B",
            })
    if started == 0:
        raise InsufficientSampleError(
            f"no S-points within radius {r0} of stratum {getattr(T, 'id', '?')}")
    return {
        "pass": not violations,
        "sequences": started,
        "worst_A": worst["A"],
        "worst_B": worst["B"],
        "tolerance": float(tol),
        "violations": violations[:16],
        "n_violations": len(violations),
    }


# -- classical counterexample fixture ---------------------------------------

class _CuspSheet:
    """The cusp surface {y^2 = t^2 x^2 + x^3} minus the t-axis, in R^3 with
    coordinates (x, y, t).  Condition B fails against the t-axis at 0 along
    the fold curve x = -t^2, y = 0."""

    dim = 2
    id = "cusp-sheet"

    def __init__(self, extent=0.6, n=3600, seed=0):
        rng = np.random.default_rng(seed)
        xs = rng.uniform(-extent, extent, n)
        ts = rng.uniform(-extent, extent, n)
        pts = []
        for x0, t0 in zip(xs, ts):
            x1 = max(x0, -t0 * t0)
            y2 = x1 * x1 * t0 * t0 + x1 ** 3
            if y2 < 0:
                continue
            y = np.sqrt(y2) * (1 if rng.random() < 0.5 else -1)
            pts.append([x1, y, t0])
        ts_fold = np.linspace(-extent, extent, 80)
        for t0 in ts_fold:
            if abs(t0) > 1e-3:
                pts.append([-t0 * t0, 0.0, t0])
        self._points = np.array(pts)

    def points(self):
        return self._points

    def project(self, z):
        x, _, t = z
        xs = max(float(x), -float(t) ** 2)
        y2 = xs * xs * t * t + xs ** 3
        y = np.sign(z[1]) * np.sqrt(max(y2, 0.0)) if z[1] != 0 else np.sqrt(max(y2, 0.0))
        return np.array([xs, y, float(t)])

    def frame(self, z):
        x, y, t = z
        grad = np.array([-2 * t * t * x - 3 * x * x, 2 * y, -2 * t * x * x])
        ng = np.linalg.norm(grad)
        if ng < 1e-14:
            return np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        nrm = grad / ng
        a = np.array([1.0, 0.0, 0.0])
        if abs(nrm @ a) > 0.9:
            a = np.array([0.0, 1.0, 0.0])
        b1 = np.cross(nrm, a)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(nrm, b1)
        return np.vstack([b1, b2])

    def sample_near(self, center, radius, n, rng):
        pts = self._points
        d = np.linalg.norm(pts - center, axis=1)
        sel = np.where((d <= radius) & (d > 1e-12))[0]
        if len(sel) == 0:
            return np.zeros((0, 3))
        take = rng.choice(sel, size=min(n, len(sel)), replace=False)
        return pts[take]


class _CuspAxis:
    dim = 1
    id = "cusp-axis"

    def __init__(self, extent=0.6):
        t = np.linspace(-extent, extent, 401)
        self._points = np.column_stack([np.zeros_like(t), np.zeros_like(t), t])

    def points(self):
        return self._points

    def project(self, z):
        return np.array([0.0, 0.0, float(z[2])])

    def frame(self, z):
        return np.array([[0.0, 0.0, 1.0]])

    def sample_near(self, center, radius, n, rng):
        t = center[2] + radius * rng.uniform(-1, 1, n)
        return np.column_stack([np.zeros(n), np.zeros(n), t])


def whitney_cusp_pair(extent=0.6, n=3600, seed=0):
    """(T, S) for the cusp counterexample; check_whitney must fail it."""
    return _CuspAxis(extent), _CuspSheet(extent, n, seed)
