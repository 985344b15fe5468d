"""Strata of the decomposition by stable manifolds, and the frontier order.

Each stratum is the stable manifold of one critical point (ascending flow:
dimension = Morse index).  A Stratum bundles the sampled point cloud with the
geometric callables the Whitney and Thom checks need: nearest-point
projection, tangent frames, and local resampling.  The partial order comes
from the sampled frontier test: T < S when the sample of S accumulates on T.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .flow import ManifoldSample, sample_invariant_manifold
from .integrators import run_flow, StepControls


def pca_frames(points, dim, k=None):
    """Per-point tangent frames from local principal-component fits.

    k-nearest neighborhoods (k = 2*dim + 4 by default) are fit by their top
    principal directions; deterministic for a fixed point order.
    """
    points = np.asarray(points, dtype=float)
    if k is None:
        k = 2 * dim + 4
    k = min(k, len(points))
    tree = cKDTree(points)
    frames = []
    for p in points:
        _, idx = tree.query(p, k=k)
        nb = points[np.atleast_1d(idx)]
        centered = nb - nb.mean(axis=0)
        cov = centered.T @ centered
        w, vecs = np.linalg.eigh(cov)
        fr = vecs[:, ::-1][:, :dim].T.copy()
        for r in range(fr.shape[0]):
            j = int(np.argmax(np.abs(fr[r])))
            if fr[r, j] < 0:
                fr[r] *= -1
        frames.append(fr)
    return frames


@dataclass
class Stratum:
    id: int
    dim: int
    owner: int                       # critical point id
    sample: ManifoldSample
    order: set = dc_field(default_factory=set)   # ids T with T < self
    project_fn: object = None
    frame_fn: object = None
    sample_near_fn: object = None

    def points(self):
        return self.sample.points

    def project(self, z):
        if self.project_fn is not None:
            return self.project_fn(np.asarray(z, dtype=float))
        pts = self.sample.points
        tree = cKDTree(pts)
        _, i = tree.query(np.asarray(z, dtype=float))
        return pts[int(i)]

    def frame(self, z):
        """Tangent frame (dim x ambient rows) at a stratum point."""
        if self.frame_fn is not None:
            return self.frame_fn(np.asarray(z, dtype=float))
        pts = self.sample.points
        tree = cKDTree(pts)
        _, i = tree.query(np.asarray(z, dtype=float))
        return pca_frames(pts, self.dim)[int(i)]

    def sample_near(self, center, radius, n, rng):
        if self.sample_near_fn is not None:
            return self.sample_near_fn(np.asarray(center, dtype=float), radius, n, rng)
        pts = self.sample.points
        d = np.linalg.norm(pts - np.asarray(center), axis=1)
        sel = np.where((d <= radius) & (d > 1e-12))[0]
        if len(sel) == 0:
            return np.zeros((0, pts.shape[1]))
        take = rng.choice(sel, size=min(n, len(sel)), replace=False)
        return pts[take]


class ArcGeometry:
    """Dense polyline support for a 1-dimensional stratum."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        self.tree = cKDTree(self.points)

    def project(self, z):
        z = np.asarray(z, dtype=float)
        _, i = self.tree.query(z)
        i = int(i)
        best = self.points[i]
        best_d = np.linalg.norm(z - best)
        for j in (i - 1, i + 1):
            if 0 <= j < len(self.points):
                q = _segment_closest(self.points[i], self.points[j], z)
                d = np.linalg.norm(z - q)
                if d < best_d:
                    best, best_d = q, d
        return best


def _segment_closest(a, b, z):
    ab = b - a
    t = float(np.clip((z - a) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0))
    return a + t * ab


def build_strata(v, cps, resolution=32, controls=None):
    """One stratum per critical point, sampled from its stable manifold."""
    dom = v.base.domain
    strata = []
    for cp in cps:
        ms = sample_invariant_manifold(v, cp, "stable", resolution=resolution,
                                       controls=controls)
        st = Stratum(id=cp.id, dim=ms.dim, owner=cp.id, sample=ms)
        if ms.dim == 0:
            loc = np.asarray(cp.location, dtype=float)
            st.project_fn = lambda z, loc=loc: loc
            st.frame_fn = lambda z: np.zeros((0, loc.shape[0]))
        elif ms.dim == 1:
            geom = ArcGeometry(ms.points)
            st.project_fn = geom.project
            st.frame_fn = lambda z, v=v: _flow_direction(v, z)
        else:
            st.project_fn = lambda z, dom=dom: dom.project(z)
            st.frame_fn = lambda z, dom=dom: dom.tangent_basis(dom.project(z)).T
            st.sample_near_fn = _surface_sampler(v, cp, dom)
        strata.append(st)
    return strata


def _flow_direction(v, z):
    vv = v(np.asarray(z, dtype=float))
    nv = np.linalg.norm(vv)
    return (vv / nv)[None, :] if nv > 1e-13 else np.zeros((1, len(vv)))


def _surface_sampler(v, cp, dom):
    """Local sampler for a full-dimensional stratum: random tangent offsets
    projected back to the surface (membership is generic for the top cell)."""
    def sampler(center, radius, n, rng):
        B = dom.tangent_basis(center)
        out = []
        for _ in range(n):
            c = rng.standard_normal(B.shape[1])
            c *= radius * rng.uniform(0.3, 1.0) / np.linalg.norm(c)
            try:
                out.append(dom.project(center + B @ c))
            except Exception:
                continue
        return np.array(out) if out else np.zeros((0, center.shape[0]))
    return sampler


def refine_sample_near(v, stratum, targets, radius, per_target=6,
                       controls=None, seed=0):
    """Extra backward-flow seeding of a stratum's sample near target points.

    Points near a target are perturbed, kept when their forward limit is the
    stratum's owner, and their backward orbits (which stay in the stratum)
    are appended to the sample.
    """
    controls = controls or StepControls(rtol=1e-9, atol=1e-11)
    dom = v.base.domain
    rng = np.random.default_rng(seed)
    extra = []
    for tgt in targets:
        B = dom.tangent_basis(tgt)
        for _ in range(per_target):
            c = rng.standard_normal(B.shape[1])
            c *= radius * rng.uniform(0.2, 1.0) / np.linalg.norm(c)
            try:
                z = dom.project(np.asarray(tgt) + B @ c)
            except Exception:
                continue
            fw = run_flow(v, z, direction="forward", controls=controls, record=False)
            if fw.status != "converged" or fw.hit_chart.center.id != stratum.owner:
                continue
            bw = run_flow(v, z, direction="backward", controls=controls, record=True)
            step = max(1, len(bw.points) // 60)
            extra.extend(bw.points[::step])
            extra.append(z)
    if extra:
        stratum.sample.points = np.vstack([stratum.sample.points, np.array(extra)])
    return len(extra)


def prepare_frontier_samples(v, strata, radius, targets_per_stratum=10, seed=0):
    """Refine every higher-dimensional stratum's sample near each lower
    stratum, so the sampled frontier test sees the accumulation at its
    resolution radius.

    Backward orbits of verified members hug the lower strata on the way
    down, which densifies exactly where the closure test looks.
    """
    added = 0
    for S in strata:
        if S.dim == 0:
            continue
        for T in strata:
            if T.dim >= S.dim:
                continue
            pts = T.sample.points
            idx = np.linspace(0, len(pts) - 1, min(targets_per_stratum, len(pts)))
            targets = pts[idx.astype(int)]
            added += refine_sample_near(v, S, targets, 0.3 * radius,
                                        per_target=4, seed=seed + S.id)
    return added


def check_frontier_order(strata, radius):
    """Sampled frontier test at the given resolution radius.

    T < S is recorded when the sample of S accumulates on T; the test then
    asserts the dimension order and the frontier condition (every sampled
    T-point is an accumulation point).  T-points within a trim distance of a
    lower stratum are excluded from the test: sample clouds extend to their
    closures, and closure points must not masquerade as interior witnesses.
    """
    report = {"relations": [], "violations": [], "pass": True, "radius": float(radius)}
    trim = 3.0 * radius
    trimmed = {}
    for T in strata:
        pts = T.sample.points
        keep = np.ones(len(pts), dtype=bool)
        for L in strata:
            if L.dim < T.dim:
                d, _ = cKDTree(L.sample.points).query(pts)
                keep &= d > trim
        trimmed[T.id] = pts[keep] if np.any(keep) else pts
    for T in strata:
        for S in strata:
            if T.id == S.id:
                continue
            pts_T = trimmed[T.id]
            tree = cKDTree(S.sample.points)
            d, _ = tree.query(pts_T)
            if not bool(np.min(d) < radius):
                continue
            frontier_ok = bool(np.max(d) < radius)
            dim_ok = T.dim < S.dim
            if not (frontier_ok and dim_ok):
                report["violations"].append({
                    "T": T.id, "S": S.id,
                    "frontier": frontier_ok, "dim_order": dim_ok,
                    "max_gap": float(np.max(d)),
                })
                report["pass"] = False
                continue
            S.order.add(T.id)
            report["relations"].append([T.id, S.id])
    rel = set(map(tuple, report["relations"]))
    for (a, b) in rel:
        if (b, a) in rel:
            report["violations"].append({"T": a, "S": b, "reason": "antisymmetry"})
            report["pass"] = False
    return report


def assert_frontier_f_graded(strata, cps, report):
    """The recorded order must be graded by critical value."""
    vals = {cp.id: cp.value for cp in cps}
    for (t, s) in report["relations"]:
        if not vals[t] < vals[s]:
            report["violations"].append({"T": t, "S": s, "reason": "f-grading"})
            report["pass"] = False
    return report
