"""Mod-2 boundary maps, Betti numbers, and Morse-inequality checks.

The boundary matrix entry for a pair of cells of consecutive index is the
mod-2 count of connecting-orbit components of U_p and S_q, read off the same
intermediate-level intersection traces the transversality check uses.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .flow import level_trace, _match_radius


class OrbitCountUnstableError(RuntimeError):
    pass


class BoundarySquareError(ValueError):
    pass


def gf2_rank(M):
    """Rank over GF(2) by elimination."""
    A = (np.asarray(M, dtype=np.uint8) % 2).copy()
    if A.size == 0:
        return 0
    rows, cols = A.shape
    rank = 0
    for c in range(cols):
        pivot = None
        for r in range(rank, rows):
            if A[r, c]:
                pivot = r
                break
        if pivot is None:
            continue
        A[[rank, pivot]] = A[[pivot, rank]]
        for r in range(rows):
            if r != rank and A[r, c]:
                A[r] ^= A[rank]
        rank += 1
        if rank == rows:
            break
    return rank


class CWComplex:
    """Finite CW complex with GF(2) boundary matrices.

    boundary[k] maps k-chains to (k-1)-chains; shape (c_{k-1}, c_k).
    """

    def __init__(self, cells_by_dim, boundary):
        self.cells_by_dim = list(cells_by_dim)
        self.boundary = [np.asarray(B, dtype=np.uint8) % 2 for B in boundary]
        self._check_shapes()

    def _check_shapes(self):
        c = self.cells_by_dim
        for k, B in enumerate(self.boundary, start=1):
            if B.shape != (c[k - 1], c[k]):
                raise ValueError(f"boundary {k} has shape {B.shape}, expected "
                                 f"({c[k - 1]}, {c[k]})")

    def check_boundary_square(self):
        for k in range(1, len(self.boundary)):
            prod = (self.boundary[k - 1] @ self.boundary[k]) % 2
            if np.any(prod):
                raise BoundarySquareError(
                    f"d_{k} o d_{k + 1} is nonzero over GF(2)")
        return True

    def betti_numbers(self):
        self.check_boundary_square()
        c = self.cells_by_dim
        ranks = [gf2_rank(B) for B in self.boundary]
        out = []
        for k in range(len(c)):
            r_k = ranks[k - 1] if k >= 1 else 0
            r_k1 = ranks[k] if k < len(ranks) else 0
            out.append(c[k] - r_k - r_k1)
        return out

    def euler_characteristic(self):
        return int(sum((-1) ** k * c for k, c in enumerate(self.cells_by_dim)))


def count_connecting_orbits(v, cps, resolution=48, controls=None):
    """Connecting-orbit component counts for index-adjacent pairs.

    Components are clusters of matched points of the two level traces on the
    intermediate regular level; counts that change under a 2x trace
    refinement raise OrbitCountUnstableError.
    """
    def counts_at(res):
        out = {}
        diam = v.base.domain.diameter()
        crit_values = sorted(cp.value for cp in cps)
        for p in cps:
            for q in cps:
                if q.index != p.index + 1 or not p.value < q.value:
                    continue
                mid = 0.5 * (p.value + q.value)
                if any(abs(mid - cval) < 1e-9 for cval in crit_values):
                    mid += 1e-3 * (q.value - p.value)
                tr_u, _ = level_trace(v, p, "unstable", mid, res, controls)
                tr_s, _ = level_trace(v, q, "stable", mid, res, controls)
                if len(tr_u) == 0 or len(tr_s) == 0:
                    out[(p.id, q.id)] = 0
                    continue
                r = _match_radius(tr_u, tr_s, diam)
                tree = cKDTree(tr_u)
                d, _ = tree.query(tr_s)
                hits = tr_s[d <= r]
                out[(p.id, q.id)] = _cluster_count(hits, 2.0 * r)
        return out

    base = counts_at(resolution)
    refined = counts_at(2 * resolution)
    if base != refined:
        raise OrbitCountUnstableError(
            f"orbit counts changed under refinement: {base} vs {refined}")
    return base


def _cluster_count(points, radius):
    if len(points) == 0:
        return 0
    tree = cKDTree(points)
    seen = set()
    clusters = 0
    for i in range(len(points)):
        if i in seen:
            continue
        clusters += 1
        stack = [i]
        seen.add(i)
        while stack:
            j = stack.pop()
            for k in tree.query_ball_point(points[j], radius):
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
    return clusters


def boundary_maps(realization, cps, orbit_counts):
    """CW complex of the realization with mod-2 boundary matrices from the
    connecting-orbit counts."""
    max_dim = max((c["dim"] for c in realization.cells), default=0)
    ids_by_dim = [[] for _ in range(max_dim + 1)]
    for c in sorted(realization.cells, key=lambda x: x["id"]):
        ids_by_dim[c["dim"]].append(c["id"])
    counts = [len(ids) for ids in ids_by_dim]
    boundary = []
    for k in range(1, max_dim + 1):
        B = np.zeros((counts[k - 1], counts[k]), dtype=np.uint8)
        for j, q_id in enumerate(ids_by_dim[k]):
            for i, p_id in enumerate(ids_by_dim[k - 1]):
                B[i, j] = orbit_counts.get((p_id, q_id), 0) % 2
        boundary.append(B)
    cw = CWComplex(counts, boundary)
    cw.cell_ids_by_dim = ids_by_dim
    return cw


def homology_report(cw: CWComplex, critical_counts):
    """Betti numbers, Euler characteristic, and Morse inequalities.

    critical_counts[k] = number of index-k critical points; all three Euler
    computations (cells, criticals, alternating Betti sum) must agree.
    """
    cw.check_boundary_square()
    betti = cw.betti_numbers()
    chi_cells = cw.euler_characteristic()
    chi_crit = int(sum((-1) ** k * c for k, c in enumerate(critical_counts)))
    chi_betti = int(sum((-1) ** k * b for k, b in enumerate(betti)))
    morse_ok = all(c >= b for c, b in zip(cw.cells_by_dim, betti))
    width = max(len(cw.cells_by_dim), len(critical_counts))
    pad = lambda xs: [int(x) for x in xs] + [0] * (width - len(xs))
    cells_match = pad(cw.cells_by_dim) == pad(critical_counts)
    report = {
        "betti": [int(b) for b in betti],
        "cells_by_dim": [int(c) for c in cw.cells_by_dim],
        "critical_counts": [int(c) for c in critical_counts],
        "euler_from_cells": chi_cells,
        "euler_from_criticals": chi_crit,
        "euler_from_betti": chi_betti,
        "euler_consistent": chi_cells == chi_crit == chi_betti,
        "morse_inequalities": bool(morse_ok),
        "cells_match_criticals": bool(cells_match),
    }
    report["pass"] = bool(report["euler_consistent"] and morse_ok)
    return report
