"""Gradient-flow trajectories, invariant manifolds, and transversality.

Ascending convention: the flow increases f, the stable manifold S_p of an
index-k point (forward limit p) is k-dimensional, the unstable manifold U_p
(backward limit p) has dimension n-k.  Level-set traces of U_p and S_q on an
intermediate regular level drive both the Morse-Smale transversality check
and the connecting-orbit counts used by the homology stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .integrators import run_flow, StepControls, CONV_REL


class AmbiguousLimitError(ValueError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray                    # ascending flow times
    points: np.ndarray
    omega_limit: int | None
    alpha_limit: int | None
    termination: str                     # converged | left-domain | step-limit

    def f_values(self, field):
        return np.array([field.value(p) for p in self.points])

    def check_monotone(self, field, slack=1e-9):
        fv = self.f_values(field)
        return bool(np.all(np.diff(fv) >= -slack))


def _limit_of(chart, endpoint, direction):
    """Critical-point id if the model flow contracts to the center from here."""
    if chart is None:
        return None
    w = chart.coords(endpoint)
    k = chart.center.index
    grow = w[k:] if direction == "forward" else w[:k]
    if float(grow @ grow) <= (10 * CONV_REL * chart.radius) ** 2:
        return chart.center.id
    return None


def integrate(v, x0, direction="forward", controls=None):
    """Trajectory of the gradientlike flow from x0.

    Terminates on chart-ball convergence, domain exit, or the step budget;
    samples are returned in ascending flow time, so f is nondecreasing.
    """
    controls = controls or StepControls()
    x0 = np.asarray(x0, dtype=float)
    if np.linalg.norm(v(x0)) < 1e-12:
        cp = _containing_chart(v.charts, x0)
        cid = cp.center.id if cp is not None else None
        return Trajectory(np.zeros(1), x0[None, :].copy(), cid, cid, "converged")

    res = run_flow(v, x0, direction=direction, controls=controls, record=True)
    status = {"converged": "converged", "left-domain": "left-domain"}.get(
        res.status, "step-limit")
    omega = alpha = None
    if status == "converged":
        cid = res.hit_chart.center.id
        if direction == "forward":
            omega = cid
        else:
            alpha = cid
    times, points = res.times, res.points
    if direction == "backward":
        times, points = times[::-1].copy(), points[::-1].copy()
    return Trajectory(times, points, omega, alpha, status)


def _containing_chart(charts, z, factor=1.0):
    hits = [c for c in charts if c.contains(z, factor=factor)]
    if len(hits) > 1:
        raise AmbiguousLimitError(
            f"point {z} lies in {len(hits)} chart balls; shrink the balls")
    return hits[0] if hits else None


def assign_limits(traj: Trajectory, charts):
    """(omega, alpha) ids: assigned iff the matching endpoint sits inside a
    chart ball with the model flow contracting toward the center."""
    omega = _limit_of(_containing_chart(charts, traj.points[-1]),
                      traj.points[-1], "forward")
    alpha = _limit_of(_containing_chart(charts, traj.points[0]),
                      traj.points[0], "backward")
    return omega, alpha


@dataclass
class ManifoldSample:
    owner: int
    kind: str                            # stable | unstable
    dim: int
    points: np.ndarray
    frames: list = dc_field(default_factory=list)   # per-point (dim x 3) rows

    def tree(self):
        return cKDTree(self.points)


def _factor_dirs(dim, resolution):
    if dim == 1:
        return [np.array([1.0]), np.array([-1.0])]
    ang = 2 * np.pi * np.arange(resolution) / resolution
    return [np.array([np.cos(a), np.sin(a)]) for a in ang]


def sample_invariant_manifold(v, cp, kind="stable", resolution=32,
                              controls=None):
    """Sample S_p (flow the stable factor backward) or U_p (unstable, forward).

    Seeds sit on the radius-0.9*eps sphere of the matching chart factor; the
    chart-ball cap itself is included.  Frames: the flow direction for curves,
    the surface tangent plane for open 2-dimensional manifolds.
    """
    controls = controls or StepControls(rtol=1e-9, atol=1e-11)
    chart = cp.chart
    k = cp.index
    n_int = chart.intrinsic_dim
    dim = k if kind == "stable" else n_int - k
    if dim == 0:
        return ManifoldSample(cp.id, kind, 0, np.asarray([cp.location]), [np.zeros((0, 3))])
    direction = "backward" if kind == "stable" else "forward"
    dirs = _factor_dirs(dim, resolution)
    pts = [np.asarray(cp.location, dtype=float)]
    # chart-ball cap
    for d in dirs:
        for frac in (0.3, 0.6, 0.9):
            w = np.zeros(n_int)
            if kind == "stable":
                w[:k] = frac * 0.9 * chart.radius * d
            else:
                w[k:] = frac * 0.9 * chart.radius * d
            pts.append(chart.point(w))
    # flow the sphere seeds outward
    for d in dirs:
        w = np.zeros(n_int)
        if kind == "stable":
            w[:k] = 0.9 * chart.radius * d
        else:
            w[k:] = 0.9 * chart.radius * d
        res = run_flow(v, chart.point(w), direction=direction,
                       controls=controls, record=True)
        step = max(1, len(res.points) // 200)
        pts.extend(p for p in res.points[::step])
        if len(res.points) % step:
            pts.append(res.points[-1])
        # inside the terminal ball the orbit continues along a straight
        # chart ray (the contraction there is isotropic); extend to the limit
        if res.status == "converged" and res.hit_chart is not None:
            tc = res.hit_chart
            sink = (tc.k == tc.intrinsic_dim) if direction == "forward" else (tc.k == 0)
            w_e = tc.coords(res.points[-1])
            if sink and np.linalg.norm(w_e) > 1e-12:
                for frac in (0.75, 0.5, 0.3, 0.15, 0.06, 0.015):
                    pts.append(tc.point(frac * w_e))
                pts.append(np.asarray(tc.center_point, dtype=float).copy())
    points = np.array(pts)
    frames = []
    dom = v.base.domain
    for p in points:
        if dim == 1:
            vv = v(p)
            nv = np.linalg.norm(vv)
            frames.append((vv / nv)[None, :] if nv > 1e-12 else np.zeros((1, 3)))
        else:
            frames.append(dom.tangent_basis(p).T)
    return ManifoldSample(cp.id, kind, dim, points, frames)


def _level_seeds(chart, kind, resolution):
    k = chart.center.index
    n_int = chart.intrinsic_dim
    dim = (n_int - k) if kind == "unstable" else k
    out = []
    for d in _factor_dirs(dim, resolution):
        w = np.zeros(n_int)
        if kind == "unstable":
            w[k:] = 0.9 * chart.radius * d
        else:
            w[:k] = 0.9 * chart.radius * d
        out.append(w)
    return out


def level_trace(v, cp, kind, level, resolution=48, controls=None):
    """Intersection trace of U_p (kind 'unstable') or S_p ('stable') with
    {f = level}: points plus tangent frames.

    A 1-dimensional manifold meets the level in isolated points where its
    tangent is the flow direction.  A full-dimensional manifold is open in
    the surface, so its frame is the whole tangent plane (the limit of the
    finite-difference variational frames, without their collapse when
    trajectories bunch at separatrices).
    """
    controls = controls or StepControls(rtol=1e-10, atol=1e-12)
    chart = cp.chart
    n_int = chart.intrinsic_dim
    dim = (n_int - cp.index) if kind == "unstable" else cp.index
    direction = "forward" if kind == "unstable" else "backward"
    seeds = _level_seeds(chart, kind, resolution)
    dom = v.base.domain
    pts, frames = [], []
    for w in seeds:
        res = run_flow(v, chart.point(w), direction=direction,
                       controls=controls, stop_f=level, record=False)
        if res.status != "f_reached":
            continue
        z = res.points[-1]
        if dim >= n_int:
            rows = dom.tangent_basis(z).T
        else:
            vv = v(z)
            nv = np.linalg.norm(vv)
            rows = (vv / nv)[None, :] if nv > 0 else np.zeros((0, 3))
        pts.append(z)
        frames.append(np.array(rows))
    return np.array(pts), frames


def _match_radius(trace_a, trace_b, diam):
    def spacing(tr):
        if len(tr) < 3:
            return 0.0
        t = cKDTree(tr)
        d, _ = t.query(tr, k=2)
        return float(np.median(d[:, 1]))
    s = max(spacing(trace_a), spacing(trace_b))
    return max(1.5 * s, 0.02 * diam) if s > 0 else 0.02 * diam


def check_morse_smale(v, cps, tol=1e-3, resolution=48, controls=None):
    """Transversality of every (U_p, S_q) pair on an intermediate level.

    Traces are matched by nearest neighbor; at matched points the stacked
    tangent frames must span the surface tangent plane (smallest singular
    value > tol).  Flow-invariant intersections of expected dimension < 1
    are reported as connecting orbits (the saddle-saddle failure mode).
    """
    dom = v.base.domain
    n = 2 if dom.kind == "implicit" else dom.ambient_dim
    diam = dom.diameter()
    crit_values = sorted(cp.value for cp in cps)
    pairs = []
    for p in cps:
        for q in cps:
            if p.value < q.value:
                pairs.append((p, q))
    pairs.sort(key=lambda pq: (pq[0].id, pq[1].id))
    results = []
    all_pass = True
    for p, q in pairs:
        mid = 0.5 * (p.value + q.value)
        if any(abs(mid - c) < 1e-9 for c in crit_values):
            mid += 1e-3 * (q.value - p.value)
        dim_u = cps[0].chart.intrinsic_dim - p.index
        dim_s = q.index
        tr_u, fr_u = level_trace(v, p, "unstable", mid, resolution, controls)
        tr_s, fr_s = level_trace(v, q, "stable", mid, resolution, controls)
        entry = {"p": p.id, "q": q.id, "level": float(mid),
                 "dim_U": int(dim_u), "dim_S": int(dim_s),
                 "expected_dim": int(dim_u + dim_s - n)}
        if len(tr_u) == 0 or len(tr_s) == 0:
            entry.update(matches=0, min_singular_value=None,
                         transverse=True, connecting_orbit=False)
            results.append(entry)
            continue
        r = _match_radius(tr_u, tr_s, diam)
        tree = cKDTree(tr_s)
        dists, idx = tree.query(tr_u)
        matched = [(i, j) for i, (d, j) in enumerate(zip(dists, idx)) if d <= r]
        min_sv = None
        witnesses = []
        for i, j in matched:
            z = tr_u[i]
            B = dom.tangent_basis(z)
            rows = []
            for fr in (fr_u[i], fr_s[j]):
                for row in fr:
                    c = B.T @ row
                    nc = np.linalg.norm(c)
                    if nc > 1e-12:
                        rows.append(c / nc)
            sv = np.linalg.svd(np.array(rows), compute_uv=False)
            s_min = float(sv[min(len(sv), B.shape[1]) - 1]) if len(rows) >= B.shape[1] else 0.0
            if min_sv is None or s_min < min_sv:
                min_sv = s_min
                witnesses = [[float(c) for c in z]]
        transverse = (min_sv is None) or (min_sv > tol)
        connecting = bool(matched) and entry["expected_dim"] < 1
        if connecting:
            transverse = False
        entry.update(matches=len(matched),
                     min_singular_value=min_sv,
                     transverse=bool(transverse),
                     connecting_orbit=bool(connecting),
                     witness=witnesses)
        all_pass = all_pass and transverse
        results.append(entry)
    connecting = [(e["p"], e["q"]) for e in results if e["connecting_orbit"]]
    return {
        "pass": bool(all_pass),
        "tolerance": float(tol),
        "pairs": results,
        "connecting_orbits": connecting,
    }


def shoot_saddle_connections(v, cps, controls=None):
    """Shooting oracle: follow each saddle's unstable branches and report any
    that converge into another saddle's chart ball."""
    n_int = cps[0].chart.intrinsic_dim
    saddles = [cp for cp in cps if 0 < cp.index < n_int]
    found = []
    for p in saddles:
        for d in _factor_dirs(n_int - p.index, 8):
            w = np.zeros(n_int)
            w[p.index:] = 0.9 * p.chart.radius * d
            res = run_flow(v, p.chart.point(w), direction="forward",
                           controls=controls, record=False)
            if res.status == "converged" and res.hit_chart is not None:
                target = res.hit_chart.center
                if 0 < target.index < n_int and target.id != p.id:
                    found.append({"from": p.id, "to": target.id,
                                  "branch": [float(c) for c in d]})
    return found


def omega_partition(v, cps, n_points=400, seed=0, controls=None):
    """Fraction of quasi-random points whose forward flow gets a limit, and
    the (unique) stable-manifold membership counts."""
    from scipy.stats import qmc
    dom = v.base.domain
    rng = qmc.Halton(d=3 if dom.kind == "implicit" else dom.ambient_dim,
                     scramble=True, seed=seed)
    lo, hi = dom.box[0], dom.box[1]
    raw = qmc.scale(rng.random(n_points), lo, hi)
    counts = {cp.id: 0 for cp in cps}
    assigned = 0
    for x in raw:
        try:
            z = dom.project(x)
        except Exception:
            continue
        res = run_flow(v, z, direction="forward", controls=controls, record=False)
        if res.status == "converged" and res.hit_chart is not None:
            assigned += 1
            counts[res.hit_chart.center.id] += 1
    return {"fraction_assigned": assigned / n_points, "membership": counts,
            "n_points": n_points}
