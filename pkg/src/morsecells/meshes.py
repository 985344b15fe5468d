"""Mesh containers for tower pieces, disc certificates, quotient counting.

Pieces are vertex/edge/face complexes with per-vertex corner depth.  The
quotient Euler characteristic is computed by cell-level union-find over the
untico gluing maps: a collapsed cell (an edge whose image degenerates to a
vertex) merges into its image's class, so each class counts once with the
dimension of its lowest member.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np


@dataclass
class PieceMesh:
    stratum: int
    dim: int
    vertices: np.ndarray
    edges: list = dc_field(default_factory=list)
    faces: list = dc_field(default_factory=list)
    depth: np.ndarray = None
    unticos: dict = dc_field(default_factory=dict)    # T id -> sorted vertex ids
    maps: dict = dc_field(default_factory=dict)       # T id -> {vertex id -> image id}

    def n_vertices(self):
        return len(self.vertices)

    def euler_characteristic(self):
        return self.n_vertices() - len(self.edges) + len(self.faces)

    def adjacency(self):
        adj = {i: set() for i in range(self.n_vertices())}
        for (a, b) in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def mesh_closure(self, vertex_set):
        """Vertex set plus its edge neighbors (discrete closure operator)."""
        adj = self.adjacency()
        out = set(vertex_set)
        for v in vertex_set:
            out |= adj[v]
        return out

    def depth_set(self, k):
        return {i for i in range(self.n_vertices()) if int(self.depth[i]) == k}

    def boundary_edges(self):
        """Edges on exactly one face (dim-2 pieces)."""
        count = {}
        for f in self.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (min(a, b), max(a, b))
                count[key] = count.get(key, 0) + 1
        return [e for e, c in count.items() if c == 1]

    def connected(self):
        if self.n_vertices() == 0:
            return False
        if self.n_vertices() == 1:
            return True
        adj = self.adjacency()
        seen = {0}
        stack = [0]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.n_vertices()


def disc_certificate(piece: PieceMesh):
    """Combinatorial disc check for dims <= 2: connected, Euler
    characteristic 1, boundary a single sphere of one dimension lower."""
    out = {"stratum": piece.stratum, "dim": piece.dim, "is_disc": False,
           "connected": piece.connected(), "euler": piece.euler_characteristic()}
    if piece.dim == 0:
        out["is_disc"] = piece.n_vertices() == 1
        return out
    if piece.dim == 1:
        deg = {i: 0 for i in range(piece.n_vertices())}
        for a, b in piece.edges:
            deg[a] += 1
            deg[b] += 1
        ends = [i for i, d in deg.items() if d == 1]
        ok = out["connected"] and out["euler"] == 1 and len(ends) == 2 \
            and all(d <= 2 for d in deg.values())
        out["boundary_points"] = len(ends)
        out["is_disc"] = bool(ok)
        return out
    if piece.dim == 2:
        bd = piece.boundary_edges()
        cycles = _cycle_count(bd)
        out["boundary_cycles"] = cycles
        out["is_disc"] = bool(out["connected"] and out["euler"] == 1 and cycles == 1)
        return out
    out["is_disc"] = None   # not certified beyond dimension 2
    return out


def _cycle_count(edges):
    if not edges:
        return 0
    adj = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(nb) != 2 for nb in adj.values()):
        return -1   # not a disjoint union of cycles
    seen = set()
    cycles = 0
    for start in adj:
        if start in seen:
            continue
        cycles += 1
        prev, cur = None, start
        while True:
            seen.add(cur)
            nxt = [w for w in adj[cur] if w != prev]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            if cur == start:
                break
    return cycles


class UnionFind:
    def __init__(self):
        self.parent = {}

    def add(self, k):
        if k not in self.parent:
            self.parent[k] = k
        return k

    def find(self, k):
        self.add(k)
        root = k
        while root != self.parent[root]:
            root = self.parent[root]
        while k != self.parent[k]:
            self.parent[k], k = root, self.parent[k]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        self.parent[rb] = ra
        return ra


def _edge_lookup(piece):
    return {(min(a, b), max(a, b)): i for i, (a, b) in enumerate(piece.edges)}


def quotient_cells(pieces, poset):
    """Cell classes of the realization under x ~ p_TS(x), with degenerate
    images collapsing into their targets.

    Returns (chi, counts_by_dim, class map); fails loudly if an untico edge
    has no matching edge in the target piece (non-cellular gluing).
    """
    uf = UnionFind()
    dims = {}
    for sid, piece in pieces.items():
        for i in range(piece.n_vertices()):
            dims[("v", sid, i)] = 0
            uf.add(("v", sid, i))
        for j in range(len(piece.edges)):
            dims[("e", sid, j)] = 1
            uf.add(("e", sid, j))
        for k in range(len(piece.faces)):
            dims[("f", sid, k)] = 2
            uf.add(("f", sid, k))
    for sid, piece in pieces.items():
        for t_id, members in piece.unticos.items():
            mp = piece.maps[t_id]
            target = pieces[t_id]
            tgt_edges = _edge_lookup(target)
            mset = set(members)
            for x in members:
                uf.union(("v", sid, x), ("v", t_id, mp[x]))
            for j, (a, b) in enumerate(piece.edges):
                if a in mset and b in mset:
                    ia, ib = mp[a], mp[b]
                    if ia == ib:
                        uf.union(("e", sid, j), ("v", t_id, ia))
                    else:
                        key = (min(ia, ib), max(ia, ib))
                        if key not in tgt_edges:
                            raise ValueError(
                                f"untico edge {(a, b)} of piece {sid} maps to "
                                f"non-edge {key} of piece {t_id}")
                        uf.union(("e", sid, j), ("e", t_id, tgt_edges[key]))
    class_dim = {}
    for cell, d in dims.items():
        root = uf.find(cell)
        class_dim[root] = min(class_dim.get(root, 99), d)
    counts = [0, 0, 0]
    for d in class_dim.values():
        counts[d] += 1
    chi = counts[0] - counts[1] + counts[2]
    return chi, counts, uf


def untico_components(piece, t_id):
    """Connected components of one untico inside a piece's edge graph."""
    members = set(piece.unticos[t_id])
    adj = {v: set() for v in members}
    for a, b in piece.edges:
        if a in members and b in members:
            adj[a].add(b)
            adj[b].add(a)
    seen = set()
    comps = 0
    for start in sorted(members):
        if start in seen:
            continue
        comps += 1
        stack = [start]
        seen.add(start)
        while stack:
            vv = stack.pop()
            for w in adj[vv]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
    return comps


def write_obj(path, piece: PieceMesh):
    with open(path, "w") as fh:
        fh.write(f"# stratum {piece.stratum} dim {piece.dim}\n")
        for p in piece.vertices:
            fh.write("v " + " ".join(f"{c:.12g}" for c in p) + "\n")
        for (a, b) in piece.edges if not piece.faces else []:
            fh.write(f"l {a + 1} {b + 1}\n")
        for f in piece.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_point_cloud_csv(path, rows):
    """rows: iterable of (x, y, z, stratum_id, depth, kind)."""
    with open(path, "w") as fh:
        fh.write("x,y,z,stratum_id,depth,kind\n")
        for (x, y, z, sid, depth, kind) in rows:
            fh.write(f"{x:.12g},{y:.12g},{z:.12g},{sid},{depth},{kind}\n")
