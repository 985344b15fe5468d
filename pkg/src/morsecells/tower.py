"""Untico resolution towers: construction, validation, realization.

The tower of the stratification removes from each stratum the open delta-tube
of every lower stratum:

    V_S  = S minus the union of {rho_T < delta_T},  T < S
    V_TS = {rho_T = delta_T} in V_S,   p_TS = pi_T restricted.

Pieces are meshed as follows.  A minimum is a point.  A saddle stratum is an
interval sampled at exact f-parameters (signed extended-x values u_j).  A top
stratum is a disc fanned by the flow: its boundary cycle alternates arcs of
minimum level circles with the sides {y = +-sqrt(delta)} of saddle tubes,
band-side vertices are placed so that p_TS maps them exactly onto the
interval's vertices, and interior rings follow each boundary vertex's forward
flow line at interpolated f-levels into the chart ball of the maximum.
Corner depth is the number of active tube constraints, so untico interiors
have depth 1 and tube-tube corners depth 2.

Validation of the six tower conditions runs on the serialized form
(vertex-index sets and maps, positions only for equational residuals), so
externally produced towers can be ingested and checked the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .integrators import run_flow, StepControls
from .meshes import (PieceMesh, disc_certificate, quotient_cells,
                     untico_components)
from .thom import MinTube, SaddleTube, TopTube, ExtensionFailure

_RAY_CONTROLS = StepControls(rtol=1e-9, atol=1e-11)


class TowerRefusedError(RuntimeError):
    """Construction refused (failed Morse-Smale hypothesis)."""


@dataclass
class UnticoTower:
    pieces: dict
    poset: list
    meta: dict = dc_field(default_factory=dict)

    def piece(self, sid):
        return self.pieces[sid]


@dataclass
class Realization:
    cells_by_dim: dict
    cells: list
    attachments: dict
    disc_certificates: list
    quotient_chi: int
    quotient_cell_counts: list
    flagged: bool


# ---------------------------------------------------------------------------
# construction

def _delta(tube, factor):
    return factor * tube.gamma


def build_tower(v, cps, strata, tubes, ms_report=None, mesh_edge=0.02,
                delta_factor=0.5):
    """Mesh the tower pieces at the given edge fraction of the diameter.

    Refuses when the Morse-Smale report failed: the construction is only
    claimed under transversality.
    """
    if ms_report is not None and not ms_report.get("pass", False):
        raise TowerRefusedError(
            "Morse-Smale transversality failed; tower construction refused "
            f"(connecting orbits: {ms_report.get('connecting_orbits')})")
    dom = v.base.domain
    edge_len = mesh_edge * dom.diameter()
    by_id = {st.id: st for st in strata}
    cp_by_id = {cp.id: cp for cp in cps}
    pieces = {}
    poset = sorted((t, s.id) for s in strata for t in s.order)

    for st in strata:
        if st.dim == 0:
            cp = cp_by_id[st.owner]
            pieces[st.id] = PieceMesh(
                stratum=st.id, dim=0,
                vertices=np.asarray([cp.location], dtype=float),
                edges=[], faces=[], depth=np.array([0]))
    saddle_params = {}
    for st in strata:
        if st.dim == 1:
            pieces[st.id], saddle_params[st.id] = _build_interval_piece(
                v, tubes, st, edge_len, delta_factor)
    for st in strata:
        if st.dim == 2:
            pieces[st.id] = _build_disc_piece(
                v, cps, tubes, strata, st, saddle_params, edge_len, delta_factor)

    meta = {"mesh_edge": mesh_edge, "delta_factor": delta_factor,
            "edge_length": edge_len}
    tower = UnticoTower(pieces=pieces, poset=[list(p) for p in poset], meta=meta)
    tower.meta["membership"] = _membership_check(v, tubes, tower, delta_factor)
    return tower


def _build_interval_piece(v, tubes, st, edge_len, delta_factor):
    tube = tubes[st.id]
    if not isinstance(tube, SaddleTube):
        raise ExtensionFailure(f"stratum {st.id} of dim 1 has no saddle tube")
    ends = {}
    for s in (-1.0, 1.0):
        br = tube.branches[s]
        mt = tubes[br.min_id]
        ends[s] = np.sqrt(tube.fq - (mt.f0 + _delta(mt, delta_factor)))
    length = 0.0
    for s in (-1.0, 1.0):
        pl = tube.branches[s].points
        length += float(np.sum(np.linalg.norm(np.diff(pl, axis=0), axis=1)))
    n = int(np.clip(round(length / edge_len), 8, 64))
    u_vals = np.linspace(-ends[-1.0], ends[1.0], n + 1)
    verts = []
    for u in u_vals:
        sgn = 1.0 if u >= 0 else -1.0
        verts.append(tube.arc_point(sgn, tube.fq - u * u))
    depth = np.zeros(n + 1, dtype=int)
    depth[0] = depth[n] = 1
    unticos, maps = {}, {}
    for idx, s in ((0, -1.0), (n, 1.0)):
        mid = tube.branches[s].min_id
        unticos.setdefault(mid, []).append(idx)
        maps.setdefault(mid, {})[idx] = 0
    piece = PieceMesh(stratum=st.id, dim=1, vertices=np.asarray(verts),
                      edges=[(i, i + 1) for i in range(n)], faces=[],
                      depth=depth, unticos={k: sorted(vs) for k, vs in unticos.items()},
                      maps=maps)
    return piece, {"u_vals": u_vals, "ends": ends}


class _Corner:
    __slots__ = ("point", "saddle", "branch", "side", "min_id", "angle", "index")

    def __init__(self, point, saddle, branch, side, min_id):
        self.point = point
        self.saddle = saddle
        self.branch = branch
        self.side = side
        self.min_id = min_id
        self.angle = None
        self.index = None


def _seed_angle(v, min_chart, z):
    """Chart angle of the flow line through z, read at the minimum's ball."""
    res = run_flow(v, z, direction="backward", controls=_RAY_CONTROLS,
                   stop_balls=[min_chart], record=False)
    if res.status != "ball":
        raise ExtensionFailure("backward flow from corner missed the minimum ball")
    w = min_chart.coords(res.points[-1])
    return float(np.arctan2(w[1], w[0]))


def _circular_linspace(a, b, n):
    """n interior angles strictly between a and b going counterclockwise."""
    span = (b - a) % (2 * np.pi)
    return [(a + span * (i + 1) / (n + 1)) % (2 * np.pi) for i in range(n)]


def _build_disc_piece(v, cps, tubes, strata, st, saddle_params, edge_len,
                      delta_factor):
    dom = v.base.domain
    cp_max = {c.id: c for c in cps}[st.owner]
    chart_max = cp_max.chart
    lower = sorted(st.order)
    minima = [t for t in lower if isinstance(tubes[t], MinTube)]
    saddles = [t for t in lower if isinstance(tubes[t], SaddleTube)]

    # -- corners -------------------------------------------------------------
    corners = []
    band_specs = []        # (saddle id, side, corner_minus, corner_plus)
    for sid in saddles:
        tube = tubes[sid]
        d_s = _delta(tube, delta_factor)
        for side in (1.0, -1.0):
            # the side curve belongs to this top stratum iff it flows to its max
            probe = tube.ext_inverse(0.0, side * np.sqrt(d_s))
            res = run_flow(v, probe, direction="forward", controls=_RAY_CONTROLS,
                           record=False)
            if res.status != "converged" or res.hit_chart.center.id != st.owner:
                continue
            pair = {}
            for s in (-1.0, 1.0):
                br = tube.branches[s]
                mt = tubes[br.min_id]
                d_m = _delta(mt, delta_factor)
                xc = s * np.sqrt(tube.fq + d_s - (mt.f0 + d_m))
                z = tube.ext_inverse(xc, side * np.sqrt(d_s))
                c = _Corner(z, sid, s, side, br.min_id)
                c.angle = _seed_angle(v, mt.cp.chart, z)
                corners.append(c)
                pair[s] = c
            band_specs.append((sid, side, pair[-1.0], pair[1.0]))

    # -- boundary arcs --------------------------------------------------------
    arcs = []
    for (sid, side, c_m, c_p) in band_specs:
        tube = tubes[sid]
        d_s = _delta(tube, delta_factor)
        u_vals = saddle_params[sid]["u_vals"]
        inner = []
        for j in range(1, len(u_vals) - 1):
            u = u_vals[j]
            sgn = 1.0 if u > 0 else (-1.0 if u < 0 else 1.0)
            xpj = _band_coordinate(tube, d_s, u)
            inner.append((tube.ext_inverse(sgn * xpj, side * np.sqrt(d_s)), j))
        arcs.append({"kind": "band", "T": sid, "ends": (c_m, c_p),
                     "inner": inner, "n_last": len(u_vals) - 1})

    per_min_corners = {}
    for c in corners:
        per_min_corners.setdefault(c.min_id, []).append(c)
    for mid in minima:
        mt = tubes[mid]
        d_m = _delta(mt, delta_factor)
        cs = per_min_corners.get(mid, [])
        if not cs:
            # full circle, no saddle tubes crossing it (sphere-like)
            n = max(12, int(round(2 * np.pi * np.sqrt(2 * d_m) / edge_len)))
            angles = [2 * np.pi * i / n for i in range(n)]
            ring = [(mt.level_point(a, d_m), 0) for a in angles]
            arcs.append({"kind": "min-circle", "T": mid, "ring": ring})
            continue
        # remove, per saddle branch, the interval between its two side
        # corners that contains the branch direction
        removed = []
        groups = {}
        for c in cs:
            groups.setdefault((c.saddle, c.branch), []).append(c)
        for (sid, s), pair in groups.items():
            if len(pair) != 2:
                raise ExtensionFailure(
                    "saddle-tube sides near one minimum flow to different "
                    "maxima; this stratification shape is not meshed")
            br = tubes[sid].branches[s]
            alpha = float(np.arctan2(br.ray_dir[1], br.ray_dir[0]))
            a1, a2 = pair[0].angle, pair[1].angle
            if (alpha - a1) % (2 * np.pi) <= (a2 - a1) % (2 * np.pi):
                removed.append((a1, a2, pair[0], pair[1]))
            else:
                removed.append((a2, a1, pair[1], pair[0]))
        removed.sort(key=lambda r: r[0])
        m = len(removed)
        for i in range(m):
            a_start = removed[i][1]          # end of this removed interval
            c_start = removed[i][3]
            a_end = removed[(i + 1) % m][0]  # start of the next
            c_end = removed[(i + 1) % m][2]
            span = (a_end - a_start) % (2 * np.pi)
            arc_len = span * np.sqrt(2 * d_m)      # crude circumference scale
            n_in = max(2, int(round(arc_len / edge_len)))
            inner = [(mt.level_point(a, d_m), 0)
                     for a in _circular_linspace(a_start, a_end, n_in)]
            arcs.append({"kind": "min", "T": mid, "ends": (c_start, c_end),
                         "inner": inner})

    # -- assemble the boundary cycle ------------------------------------------
    boundary, bd_untico, bd_image, bd_depth = _assemble_cycle(arcs)

    # -- rays, rings, cap ------------------------------------------------------
    f_ball = cp_max.value - (0.9 * chart_max.radius) ** 2
    ladders = []
    entries = []
    for z in boundary:
        samples = _ray_samples(v, z, f_ball)
        ladders.append(samples)
        entries.append(chart_max.coords(samples[-1][1]))
    ray_len = np.median([_poly_length(s) for s in ladders])
    n_rings = int(np.clip(round(ray_len / edge_len), 3, 40))
    m = len(boundary)

    verts = [np.asarray(p, dtype=float) for p in boundary]
    depth = list(bd_depth)
    rings = [list(range(m))]
    for j in range(1, n_rings + 1):
        ring = []
        for i in range(m):
            fz = v.base.value(boundary[i])
            f_target = fz + (f_ball - fz) * j / n_rings
            p = _ladder_point(v, chart_max, ladders[i], f_target)
            ring.append(len(verts))
            verts.append(p)
            depth.append(0)
        rings.append(ring)
    n_cap = max(2, int(round(0.9 * chart_max.radius
                             / float(np.min(chart_max.sigma)) / edge_len)))
    for l in range(1, n_cap):
        frac = 1.0 - l / n_cap
        ring = []
        for i in range(m):
            ring.append(len(verts))
            verts.append(chart_max.point(frac * entries[i]))
            depth.append(0)
        rings.append(ring)
    center = len(verts)
    verts.append(np.asarray(cp_max.location, dtype=float))
    depth.append(0)

    edges, faces = [], []
    for j in range(len(rings) - 1):
        r0, r1 = rings[j], rings[j + 1]
        for i in range(m):
            a, b = r0[i], r0[(i + 1) % m]
            c, d = r1[i], r1[(i + 1) % m]
            edges.append((a, b))
            edges.append((a, c))
            edges.append((a, d))
            faces.append((a, b, d))
            faces.append((a, d, c))
    last = rings[-1]
    for i in range(m):
        a, b = last[i], last[(i + 1) % m]
        edges.append((a, b))
        edges.append((a, center))
        faces.append((a, b, center))

    unticos = {t: sorted(ix) for t, ix in bd_untico.items()}
    maps = {t: {i: bd_image[t][i] for i in ix} for t, ix in unticos.items()}
    return PieceMesh(stratum=st.id, dim=2, vertices=np.asarray(verts),
                     edges=edges, faces=faces, depth=np.asarray(depth, dtype=int),
                     unticos=unticos, maps=maps)


def _band_coordinate(tube, d_s, u):
    """Side-curve coordinate |x'| whose retraction parameter equals u."""
    lo, hi = abs(u), np.sqrt(u * u + d_s) + 1e-12
    for _ in range(70):
        mid = 0.5 * (lo + hi)
        lam = tube.blend(tube.fq + d_s - mid * mid)
        g = mid * mid - lam * d_s - u * u
        if g < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _assemble_cycle(arcs):
    """Order the boundary arcs into one cycle of vertices.

    Returns (points, untico membership per T, image tables per T, depths).
    """
    closed = [a for a in arcs if a["kind"] == "min-circle"]
    open_arcs = [a for a in arcs if a["kind"] != "min-circle"]
    points, depths = [], []
    untico, image = {}, {}

    def put(point, tags, depth):
        idx = len(points)
        points.append(np.asarray(point, dtype=float))
        depths.append(depth)
        for (t, img) in tags:
            untico.setdefault(t, []).append(idx)
            image.setdefault(t, {})[idx] = img
        return idx

    if closed and not open_arcs:
        ring = closed[0]["ring"]
        t = closed[0]["T"]
        for (p, img) in ring:
            put(p, [(t, img)], 1)
        return points, untico, image, depths
    if closed or not open_arcs:
        raise ExtensionFailure("boundary mixes closed circles with corner arcs")

    # walk the corner graph: each corner joins exactly one band and one min arc
    incident = {}
    for a in open_arcs:
        for c in a["ends"]:
            incident.setdefault(id(c), []).append(a)
    if any(len(lst) != 2 for lst in incident.values()):
        raise ExtensionFailure("boundary corner is not on exactly two arcs")

    emitted = set()
    visited = set()
    cur = open_arcs[0]
    enter = cur["ends"][0]
    first = enter
    while True:
        visited.add(id(cur))
        flip = enter is cur["ends"][1]
        exit_c = cur["ends"][0] if flip else cur["ends"][1]
        if id(enter) not in emitted:
            emitted.add(id(enter))
            put(enter.point, _corner_tags(enter, open_arcs), 2)
        inner = cur["inner"][::-1] if flip else cur["inner"]
        for (p, img) in inner:
            put(p, [(cur["T"], img)], 1)
        nxt = [a for a in incident[id(exit_c)] if a is not cur][0]
        if id(nxt) in visited:
            if exit_c is not first:
                raise ExtensionFailure("top-piece boundary did not close up")
            break
        enter = exit_c
        cur = nxt
    if len(visited) != len(open_arcs):
        raise ExtensionFailure("top-piece boundary is not a single cycle")
    return points, untico, image, depths


def _corner_tags(corner, open_arcs):
    """A corner lies in both incident unticos: the saddle band (image = the
    interval endpoint) and the minimum circle (image = the point)."""
    tags = [(corner.min_id, 0)]
    for a in open_arcs:
        if a["kind"] == "band" and (corner is a["ends"][0] or corner is a["ends"][1]):
            tags.append((a["T"], 0 if corner is a["ends"][0] else a["n_last"]))
    return tags


def _ray_samples(v, z, f_stop):
    res = run_flow(v, z, direction="forward", controls=_RAY_CONTROLS,
                   stop_f=f_stop, record=True)
    if res.status != "f_reached":
        raise ExtensionFailure(
            f"mesh ray from {z} terminated with status {res.status}")
    fv = [v.base.value(p) for p in res.points]
    return list(zip(fv, res.points))


def _poly_length(samples):
    pts = np.array([p for (_, p) in samples])
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def _ladder_point(v, chart_max, samples, f_target):
    """Point on the recorded flow line at the given f-level.

    Brackets in the recorded samples; spans that were jumped across a chart
    ball are filled with the exact model trajectory instead of a chord.
    """
    fs = [s[0] for s in samples]
    i = int(np.searchsorted(fs, f_target))
    i = min(max(i, 1), len(fs) - 1)
    (f0, p0), (f1, p1) = samples[i - 1], samples[i]
    for chart in v.charts:
        w0 = chart.ball_coords(p0, factor=1.05)
        w1 = chart.ball_coords(p1, factor=1.05)
        if w0 is not None and w1 is not None and f1 - f0 > 1e-3 * chart.radius ** 2:
            x2 = float(w0[:chart.k] @ w0[:chart.k])
            y2 = float(w0[chart.k:] @ w0[chart.k:])
            c = f_target - chart.f0
            if y2 < 1e-30:
                return chart.point(w0 * np.sqrt(max((chart.f0 - f_target), 0.0) / max(x2, 1e-300)))
            u = (c + np.sqrt(c * c + 4 * x2 * y2)) / (2 * y2)
            t = 0.5 * np.log(max(u, 1e-300))
            return chart.point(chart.model_flow(w0, t))
    t = 0.0 if f1 == f0 else (f_target - f0) / (f1 - f0)
    z = p0 + t * (p1 - p0)
    return v.base.domain.project(z)


def _membership_check(v, tubes, tower, delta_factor, max_exact=40):
    """Spot check: mesh vertices satisfy rho_T >= delta_T wherever rho_T is
    defined (cheap prefilter by distance to the arc polylines)."""
    report = {"pass": True, "checked": 0, "worst_margin": np.inf}
    arcs = {}
    for sid, tube in tubes.items():
        if isinstance(tube, SaddleTube):
            arcs[sid] = np.vstack([tube.branches[s].points for s in (-1.0, 1.0)])
    for sid, piece in tower.pieces.items():
        if piece.dim != 2:
            continue
        for t_id, tube in tubes.items():
            if t_id == sid:
                continue
            d_t = _delta(tube, delta_factor)
            if isinstance(tube, MinTube):
                vals = np.array([v.base.value(p) - tube.f0 for p in piece.vertices])
                margin = vals - d_t
                on_untico = np.zeros(len(vals), dtype=bool)
                if t_id in piece.unticos:
                    on_untico[list(piece.unticos[t_id])] = True
                report["checked"] += len(vals)
                if np.any((margin < -1e-9) & ~on_untico):
                    report["pass"] = False
                if np.any(~on_untico):
                    report["worst_margin"] = min(report["worst_margin"],
                                                 float(np.min(margin[~on_untico])))
            elif isinstance(tube, SaddleTube) and t_id in arcs:
                from scipy.spatial import cKDTree
                tree = cKDTree(arcs[t_id])
                d, _ = tree.query(piece.vertices)
                near = np.argsort(d)[:max_exact]
                on_untico = set(piece.unticos.get(t_id, []))
                for i in near:
                    if int(i) in on_untico:
                        continue
                    r = tube.rho(piece.vertices[i], lenient=np.inf)
                    if r is None:
                        continue
                    report["checked"] += 1
                    margin = r - d_t
                    report["worst_margin"] = min(report["worst_margin"], float(margin))
                    if margin < -1e-9:
                        report["pass"] = False
    if report["worst_margin"] is np.inf:
        report["worst_margin"] = None
    return report


# ---------------------------------------------------------------------------
# serialization (the ingestion contract for validate_tower)

def tower_to_dict(tower: UnticoTower):
    pieces = {}
    unticos = {}
    maps = {}
    for sid, piece in tower.pieces.items():
        pieces[str(sid)] = {
            "dim": int(piece.dim),
            "vertices": [[float(c) for c in p] for p in piece.vertices],
            "edges": [[int(a), int(b)] for (a, b) in piece.edges],
            "faces": [[int(a), int(b), int(c)] for (a, b, c) in piece.faces],
            "depth": [int(d) for d in piece.depth],
        }
        for t_id, members in piece.unticos.items():
            key = f"{t_id},{sid}"
            unticos[key] = [int(i) for i in members]
            mp = piece.maps[t_id]
            maps[key] = {"src": [int(i) for i in members],
                         "dst": [int(mp[i]) for i in members]}
    return {
        "schema_version": 1,
        "pieces": pieces,
        "unticos": unticos,
        "maps": maps,
        "poset": [[int(a), int(b)] for (a, b) in tower.poset],
    }


def tower_from_dict(data):
    pieces = {}
    for sid_s, pd in data["pieces"].items():
        sid = int(sid_s)
        pieces[sid] = PieceMesh(
            stratum=sid, dim=int(pd["dim"]),
            vertices=np.asarray(pd["vertices"], dtype=float),
            edges=[tuple(e) for e in pd["edges"]],
            faces=[tuple(f) for f in pd["faces"]],
            depth=np.asarray(pd["depth"], dtype=int),
            unticos={}, maps={})
    for key, members in data.get("unticos", {}).items():
        t_s, s_s = key.split(",")
        t_id, s_id = int(t_s), int(s_s)
        pieces[s_id].unticos[t_id] = sorted(int(i) for i in members)
        mp = data["maps"][key]
        pieces[s_id].maps[t_id] = {int(a): int(b)
                                   for a, b in zip(mp["src"], mp["dst"])}
    return UnticoTower(pieces=pieces,
                       poset=[list(map(int, p)) for p in data.get("poset", [])],
                       meta={"ingested": True})


def save_tower(tower, path):
    with open(path, "w") as fh:
        json.dump(tower_to_dict(tower), fh, sort_keys=True)


def load_tower(path):
    with open(path) as fh:
        return tower_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# validation: the six tower conditions, vertexwise

def _transitive_closure(pairs):
    rel = set(map(tuple, pairs))
    changed = True
    while changed:
        changed = False
        for (a, b) in list(rel):
            for (c, d) in list(rel):
                if b == c and (a, d) not in rel:
                    rel.add((a, d))
                    changed = True
    return rel

def validate_tower(tower, tol=1e-6):
    """Check conditions 1-6 on all mesh vertices.

    Accepts an UnticoTower or its serialized dict.  Returns a list of
    violations tagged by condition number (empty = valid); set conditions are
    tested by vertex-index membership, equational ones by position residual.
    """
    if isinstance(tower, dict):
        tower = tower_from_dict(tower)
    pieces = tower.pieces
    rel = _transitive_closure(tower.poset)
    below = {}
    for (a, b) in rel:
        below.setdefault(b, set()).add(a)
    violations = []

    def comparable(a, b):
        return a == b or (a, b) in rel or (b, a) in rel

    # condition 6 first: poset sanity and finite fan-out
    for (a, b) in rel:
        if a == b or (b, a) in rel:
            violations.append({"condition": 6, "T": a, "S": b,
                               "reason": "poset is not a strict partial order"})
    for key_sid, piece in pieces.items():
        for t_id in piece.unticos:
            if (t_id, key_sid) not in rel:
                violations.append({"condition": 6, "T": t_id, "S": key_sid,
                                   "reason": "untico pair missing from the order"})
    fanout = {}
    for (a, b) in rel:
        fanout[a] = fanout.get(a, 0) + 1
    # finite by construction for serialized towers; recorded for the report

    for sid, piece in sorted(pieces.items()):
        u_sets = {t: set(ix) for t, ix in piece.unticos.items()}
        tags = sorted(u_sets)

        # condition 1: overlapping unticos are comparable; corner images land
        # in the lower untico
        for i, t in enumerate(tags):
            for p in tags[i + 1:]:
                shared = u_sets[t] & u_sets[p]
                if shared and not comparable(t, p):
                    violations.append({"condition": 1, "T": t, "P": p, "S": sid,
                                       "witness": sorted(shared)[:4],
                                       "reason": "incomparable unticos overlap"})
        for t in tags:
            for p in tags:
                if t == p or (p, t) not in rel:
                    continue
                # p < t < sid
                u_pt = set(pieces[t].unticos.get(p, []))
                for x in sorted(u_sets[t] & u_sets[p]):
                    if piece.maps[t][x] not in u_pt:
                        violations.append({
                            "condition": 1, "T": t, "P": p, "S": sid,
                            "witness": [x],
                            "reason": "p_TS image outside V_PT"})

        # condition 2: p_PT p_TS = p_PS on the overlap
        for t in tags:
            for p in tags:
                if t == p or (p, t) not in rel:
                    continue
                u_pt = pieces[t].maps.get(p, {})
                for x in sorted(u_sets[t] & u_sets[p]):
                    y = piece.maps[t][x]
                    if y not in u_pt:
                        continue   # already a condition-1 violation
                    lhs = u_pt[y]
                    rhs = piece.maps[p][x]
                    if lhs != rhs:
                        pos = pieces[p].vertices
                        if np.linalg.norm(pos[lhs] - pos[rhs]) > tol:
                            violations.append({
                                "condition": 2, "T": t, "P": p, "S": sid,
                                "witness": [x],
                                "residual": float(np.linalg.norm(pos[lhs] - pos[rhs]))})

        # condition 3: p_TS^{-1}(union_{Q<P} V_QT) = union_{Q<P} V_QS on V_TS
        for t in tags:
            for p in set(tags) | {t}:
                if not (p == t or (p, t) in rel):
                    continue
                q_below = below.get(p, set())
                tgt = set()
                for q in q_below:
                    tgt |= set(pieces[t].unticos.get(q, []))
                lhs = {x for x in u_sets[t] if piece.maps[t][x] in tgt}
                rhs = set()
                for q in q_below:
                    rhs |= (u_sets.get(q, set()) & u_sets[t])
                if lhs != rhs:
                    violations.append({
                        "condition": 3, "T": t, "P": p, "S": sid,
                        "witness": sorted(lhs ^ rhs)[:6],
                        "reason": "preimage of lower unticos mismatch"})

        # condition 4: a depth-1 vertex lies in at most one untico
        depth1 = piece.depth_set(1)
        for x in sorted(depth1):
            hits = [t for t in tags if x in u_sets[t]]
            if len(hits) > 1:
                violations.append({"condition": 4, "S": sid, "witness": [x],
                                   "unticos": hits})

        # condition 5: closures of free corner faces match through p_TS
        all_unticos = set()
        for t in tags:
            all_unticos |= u_sets[t]
        for t in tags:
            t_piece = pieces[t]
            t_unticos = set()
            for q in t_piece.unticos.values():
                t_unticos |= set(q)
            for k in (0, 1, 2):
                tgt = t_piece.depth_set(k) - t_unticos
                pre = {x for x in u_sets[t] if piece.maps[t][x] in tgt}
                lhs = piece.mesh_closure(pre) & u_sets[t]
                free = piece.depth_set(k) - all_unticos
                rhs = piece.mesh_closure(free) & u_sets[t]
                if lhs != rhs:
                    violations.append({
                        "condition": 5, "T": t, "S": sid, "k": k,
                        "witness": sorted(lhs ^ rhs)[:6]})
    return violations


# ---------------------------------------------------------------------------
# realization

def realize(tower: UnticoTower):
    """Quotient CW realization: one cell per piece, identifications generated
    by x ~ p_TS(x).  Requires a clean validation; disc-certificate failures
    flag the result but do not block it."""
    problems = validate_tower(tower)
    if problems:
        raise ValueError(f"tower fails validation with {len(problems)} violations")
    chi, counts, _ = quotient_cells(tower.pieces, tower.poset)
    certs = [disc_certificate(p) for p in tower.pieces.values()]
    flagged = any(c["is_disc"] is False for c in certs)
    cells_by_dim = {}
    cells = []
    for sid, piece in sorted(tower.pieces.items()):
        cells_by_dim[piece.dim] = cells_by_dim.get(piece.dim, 0) + 1
        cells.append({"id": sid, "dim": piece.dim})
    attachments = {}
    for sid, piece in tower.pieces.items():
        for t_id, mp in piece.maps.items():
            attachments[f"{t_id},{sid}"] = {int(k): int(vv) for k, vv in mp.items()}
    return Realization(cells_by_dim=cells_by_dim, cells=cells,
                       attachments=attachments, disc_certificates=certs,
                       quotient_chi=int(chi), quotient_cell_counts=list(counts),
                       flagged=bool(flagged))


# ---------------------------------------------------------------------------
# flow transversality and delta independence

def check_flow_transversality(tower, v, tubes, delta_factor=None):
    """d(rho_T)(v) > 0 at every untico vertex: the flow crosses each untico
    inward.  The derivative is the analytic one carried by the tubes."""
    if delta_factor is None:
        delta_factor = tower.meta.get("delta_factor", 0.5)
    report = {"pass": True, "unticos": [], "min_derivative": None}
    worst = np.inf
    for sid, piece in sorted(tower.pieces.items()):
        for t_id in sorted(piece.unticos):
            tube = tubes[t_id]
            vals = []
            for x in piece.unticos[t_id]:
                z = piece.vertices[x]
                if isinstance(tube, MinTube):
                    d = tube.rho_flow_derivative(z)
                else:
                    c = v.base.value(z) - tube.fq
                    rho = _delta(tube, delta_factor)
                    m2 = rho * (rho - c)
                    d = v.vf(z) * 0.5 * (1.0 + c / np.sqrt(c * c + 4.0 * m2))
                vals.append(d)
            if not vals:
                continue
            lo = float(np.min(vals))
            worst = min(worst, lo)
            report["unticos"].append({"T": t_id, "S": sid,
                                      "min_directional_derivative": lo,
                                      "n_vertices": len(vals)})
            if lo <= 0.0:
                report["pass"] = False
    report["min_derivative"] = None if worst is np.inf else float(worst)
    return report


def tower_invariants(tower: UnticoTower):
    """Isomorphism invariants used by the delta-independence comparison."""
    inv = {
        "poset": sorted(map(tuple, tower.poset)),
        "dims": {sid: p.dim for sid, p in tower.pieces.items()},
        "euler": {sid: p.euler_characteristic() for sid, p in tower.pieces.items()},
        "untico_counts": {
            sid: {t: untico_components(p, t) for t in sorted(p.unticos)}
            for sid, p in tower.pieces.items()},
    }
    real = realize(tower)
    inv["cells_by_dim"] = dict(sorted(real.cells_by_dim.items()))
    inv["quotient_chi"] = real.quotient_chi
    return inv


def check_delta_independence(v, cps, strata, tubes, factors=(0.5, 0.25),
                             mesh_edge=0.02, ms_report=None):
    """Build towers at two delta-factors and compare isomorphism invariants:
    poset, piece dimensions, piece Euler characteristics, untico component
    counts, realization cell counts, and the quotient Euler characteristic."""
    a, b = factors
    if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
        raise ValueError("delta factors must lie in (0, 1)")
    tower_a = build_tower(v, cps, strata, tubes, ms_report=ms_report,
                          mesh_edge=mesh_edge, delta_factor=a)
    tower_b = build_tower(v, cps, strata, tubes, ms_report=ms_report,
                          mesh_edge=mesh_edge, delta_factor=b)
    inv_a, inv_b = tower_invariants(tower_a), tower_invariants(tower_b)
    keys = ["poset", "dims", "untico_counts", "cells_by_dim", "quotient_chi"]
    agree = {k: inv_a[k] == inv_b[k] for k in keys}
    # piece Euler characteristics must agree as piece-type invariants
    agree["euler"] = inv_a["euler"] == inv_b["euler"]
    same = all(agree.values())
    return same, {"factors": list(factors), "agree": agree,
                  "invariants_a": _jsonable(inv_a), "invariants_b": _jsonable(inv_b),
                  "towers": (tower_a, tower_b)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(vv) for k, vv in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
