"""Corner calculus on model charts: depth and strong submersions.

A manifold with convex corners is locally [0,inf)^k x R^(m-k); the depth of a
point is the number of active corner constraints, equivalently m minus the
largest dimension of a linear subspace inside the tangent cone.  A smooth map
is a strong submersion when it locally looks like a coordinate projection
compatible with the corners; a depth-preserving submersion is one, and that
sufficient criterion is what the sampled check implements.
"""

from __future__ import annotations

import numpy as np

ACTIVE_TOL = 1e-9


class CornerChart:
    """Model chart [0,inf)^k x R^(m-k)."""

    def __init__(self, k, m):
        if not 0 <= k <= m:
            raise ValueError("need 0 <= k <= m")
        self.k = int(k)
        self.dim = int(m)

    def contains(self, x, tol=ACTIVE_TOL):
        x = np.asarray(x, dtype=float)
        return len(x) == self.dim and bool(np.all(x[:self.k] >= -tol))

    def depth(self, x, tol=ACTIVE_TOL):
        x = np.asarray(x, dtype=float)
        if not self.contains(x, tol):
            raise ValueError(f"{x} is outside the model chart")
        return int(np.sum(np.abs(x[:self.k]) <= tol))

    def tangent_cone_depth(self, x, n_rays=4096, seed=0, tol=ACTIVE_TOL):
        """Depth via the tangent-cone criterion, by ray sampling.

        dim minus the depth is the largest dimension of a linear subspace
        contained in the cone of admissible velocities; for the model chart
        the cone is {v : v_i >= 0 whenever x_i = 0, i < k}, so the subspace
        is the span of the inactive directions.  Sampled rather than derived:
        a random ray lies in the cone together with its negative iff it has
        no component along any active constraint.
        """
        x = np.asarray(x, dtype=float)
        active = [i for i in range(self.k) if abs(x[i]) <= tol]
        rng = np.random.default_rng(seed)
        rays = rng.standard_normal((n_rays, self.dim))
        best = 0
        span = []
        for v in rays:
            u = v.copy()
            for i in active:
                u[i] = 0.0
            if np.linalg.norm(u) < 1e-12:
                continue
            cand = span + [u]
            if np.linalg.matrix_rank(np.array(cand), tol=1e-8) == len(cand):
                span = cand
                best = len(span)
            if best == self.dim - len(active):
                break
        return self.dim - best


def depth_of(chart: CornerChart, x) -> int:
    """Depth of a point in a model corner chart."""
    return chart.depth(x)


def _fd_jacobian(fn, x, chart, h=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    J = np.zeros((len(f0), chart.dim))
    for j in range(chart.dim):
        e = np.zeros(chart.dim)
        e[j] = h
        if j < chart.k and x[j] <= h:
            # one-sided difference into the corner
            J[:, j] = (np.asarray(fn(x + e)) - f0) / h
        else:
            J[:, j] = (np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h)
    return J


def check_strong_submersion(fn, src: CornerChart, dst: CornerChart,
                            samples, tol=1e-6):
    """Sampled strong-submersion test.

    True iff at every sample (a) the finite-difference differential has rank
    dim(dst) with smallest singular value > tol, and (b) the depth of the
    image equals the depth of the sample.  A depth-preserving submersion is a
    strong submersion, which is what licenses the sampled test.
    """
    failures = []
    worst_sv = np.inf
    for x in samples:
        x = np.asarray(x, dtype=float)
        y = np.asarray(fn(x), dtype=float)
        J = _fd_jacobian(fn, x, src)
        sv = np.linalg.svd(J, compute_uv=False)
        smin = float(sv[dst.dim - 1]) if len(sv) >= dst.dim else 0.0
        worst_sv = min(worst_sv, smin)
        ok_rank = smin > tol
        d_src = src.depth(x)
        try:
            d_dst = dst.depth(y, tol=1e-7)
        except ValueError:
            failures.append({"point": x.tolist(), "reason": "image-outside-chart"})
            continue
        ok_depth = d_src == d_dst
        if not (ok_rank and ok_depth):
            failures.append({
                "point": x.tolist(),
                "min_singular_value": smin,
                "depth_src": d_src,
                "depth_dst": d_dst,
                "reason": "rank" if not ok_rank else "depth",
            })
    return {
        "pass": not failures,
        "worst_min_singular_value": None if worst_sv is np.inf else float(worst_sv),
        "failures": failures,
        "n_samples": len(list(samples)),
    }


def model_chart_samples(chart: CornerChart, n=40, seed=0, include_faces=True):
    """Deterministic sample cloud in a model chart, corners included."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.0, 1.0, size=(n, chart.dim))
    pts[:, :chart.k] = np.abs(pts[:, :chart.k])
    out = [p for p in pts]
    if include_faces and chart.k:
        for p in pts[:n // 2]:
            q = p.copy()
            q[rng.integers(0, chart.k)] = 0.0
            out.append(q)
        corner = np.zeros(chart.dim)
        corner[chart.k:] = rng.uniform(-1, 1, chart.dim - chart.k)
        out.append(corner)
    return out
