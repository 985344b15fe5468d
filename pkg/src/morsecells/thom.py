"""Thom data (tubes) for the stratification by stable manifolds.

Every tube realizes the extended-chart picture: flowing a tube point forward
into the chart ball of the stratum's critical point q and rescaling along the
model trajectory gives extended coordinates (x, y) with

    rho(z) = |y|^2,   f(z) = f(q) + |y|^2 - |x|^2,

where |x y| is the flow invariant read off at ball entry and the rescaling u
solves the true f-equation, so rho is exactly flow-monotone:

    rho = (c + sqrt(c^2 + 4 m^2)) / 2,   c = f(z) - f(q),  m = |x||y|.

For an index-0 stratum this collapses to rho = f - f(min) exactly.

Retractions: near the critical point pi projects along the flow (extended-x
coordinate); inside the tube of a lower minimum it projects along f-levels,
with a smooth blend between the two regimes in an f-window that sits strictly
above every minimum tube.  Level projection makes the compatibility axioms
rho_T o pi_S = rho_T and pi_T o pi_S = pi_T hold to stop-tolerance (~1e-9)
on the overlaps where they are required, and arc points are always realized
at their exact f-target, so pi is idempotent to the same precision.
"""

from __future__ import annotations

import numpy as np

from .field import smoothstep
from .integrators import run_flow, StepControls

_ARC_CONTROLS = StepControls(rtol=1e-11, atol=1e-13)
_EVAL_CONTROLS = StepControls(rtol=1e-10, atol=1e-12)


class ExtensionFailure(RuntimeError):
    """A tube point's flow misses the chart ball: no extension there."""


class MinTube:
    """Tube of an index-0 stratum: pi constant, rho = f - f(min) exactly
    (the u-normalized |y|^2 of the extended chart)."""

    def __init__(self, v, cp, gamma):
        self.v = v
        self.cp = cp
        self.stratum = cp.id
        self.f0 = cp.value
        self.gamma = float(gamma)
        self.delta = 0.5 * self.gamma

    def in_tube(self, z):
        r = self.rho(z)
        return r is not None and r < self.gamma

    def rho(self, z, lenient=1.0):
        val = self.v.base.value(z) - self.f0
        if val < lenient * self.gamma:
            return float(max(val, 0.0))
        return None

    def pi(self, z):
        return np.asarray(self.cp.location, dtype=float).copy()

    def rho_flow_derivative(self, z):
        return self.v.vf(z)

    def level_point(self, angle, level):
        """Point of {f = f(min) + level} on the flow line seeded at the given
        chart angle.

        The sublevel region below the first saddle is a disc swept by the
        flow lines out of the chart ball, so following the flow to the exact
        f-level parametrizes each level circle by the seed angle.  Levels
        inside the ball are solved radially in the chart instead.
        """
        chart = self.cp.chart
        d = np.array([np.cos(angle), np.sin(angle)])
        target = self.f0 + level
        r_seed = 0.5 * chart.radius
        z0 = chart.point(r_seed * d)
        f_seed = self.v.base.value(z0)
        if target <= f_seed:
            lo, hi = 0.0, r_seed

            def fval(r):
                return self.v.base.value(chart.point(r * d))

            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if fval(mid) < target:
                    lo = mid
                else:
                    hi = mid
            return chart.point(0.5 * (lo + hi) * d)
        res = run_flow(self.v, z0, direction="forward", controls=_ARC_CONTROLS,
                       stop_f=target, record=False)
        if res.status != "f_reached":
            raise ExtensionFailure(
                f"flow line from the minimum never reached level {level}")
        return res.points[-1]


class TopTube:
    """Codimension-0 stratum: the tube is the stratum, pi = id, rho = 0."""

    def __init__(self, v, cp):
        self.v = v
        self.cp = cp
        self.stratum = cp.id
        self.gamma = 1.0
        self.delta = 0.5

    def in_tube(self, z):
        return True

    def rho(self, z, lenient=1.0):
        return 0.0

    def pi(self, z):
        return np.asarray(z, dtype=float).copy()

    def rho_flow_derivative(self, z):
        return 0.0


class _Branch:
    """One branch of a saddle's stable arc: dense polyline outside the
    minimum chart ball, exact chart ray inside it."""

    def __init__(self, sign):
        self.sign = sign
        self.points = None       # f-ascending polyline (outside min ball)
        self.fvals = None
        self.min_chart = None
        self.ray_dir = None      # arc direction in the min chart
        self.min_id = None
        self.f_ray_top = None    # f at the polyline's lowest point


class SaddleTube:
    """Tube of a positive-index, positive-codimension stratum."""

    def __init__(self, v, cp, min_tubes, gamma_cap_frac=0.72):
        self.v = v
        self.cp = cp
        self.stratum = cp.id
        self.chart = cp.chart
        self.fq = cp.value
        self.k = cp.index
        if self.k != 1 or self.chart.intrinsic_dim != 2:
            raise NotImplementedError("tube extension implemented for curve strata on surfaces")
        self._build_branches(min_tubes)
        eps = self.chart.radius
        u_max = np.sqrt(self.fq - self.f_lowest)
        self.u_max = float(u_max)
        self.gamma = float(min((gamma_cap_frac * (0.95 * eps) ** 2 / u_max) ** 2,
                               (0.4 * eps) ** 2))
        self.delta = 0.5 * self.gamma
        # blend window for the level-projection regime, above every adjacent
        # minimum tube and below the chart ball
        f_ball_low = self.fq - (0.95 * eps) ** 2
        lo_candidates = [mt.f0 + mt.gamma for mt in min_tubes.values()
                         if mt.cp.id in self.adjacent_minima]
        base = max(lo_candidates) if lo_candidates else self.f_lowest
        span = f_ball_low - base
        if span <= 0:
            raise ExtensionFailure("no room for the retraction blend window")
        self.f_lo = base + 0.05 * span
        self.f_hi = base + 0.45 * span
        self._verify_extension()

    # -- construction -------------------------------------------------------

    def _build_branches(self, min_tubes):
        v, chart = self.v, self.chart
        min_charts = [mt.cp.chart for mt in min_tubes.values()]
        by_chart = {id(mt.cp.chart): mt for mt in min_tubes.values()}
        self.branches = {}
        lows = []
        for s in (1.0, -1.0):
            br = _Branch(s)
            w0 = np.zeros(chart.intrinsic_dim)
            w0[0] = s * 0.95 * chart.radius
            res = run_flow(v, chart.point(w0), direction="backward",
                           controls=_ARC_CONTROLS, stop_balls=min_charts,
                           record=True)
            if res.status not in ("ball", "converged"):
                raise ExtensionFailure(
                    f"stable branch of critical point {self.cp.id} found no minimum")
            pts = res.points[::-1]
            fv = np.array([v.base.value(p) for p in pts])
            keep = np.argsort(fv, kind="stable")
            br.points = pts[keep]
            br.fvals = fv[keep]
            mchart = res.hit_chart
            br.min_chart = mchart
            br.min_id = mchart.center.id
            wend = mchart.coords(res.points[-1])
            br.ray_dir = wend / np.linalg.norm(wend)
            br.f_ray_top = float(br.fvals[0])
            self.branches[s] = br
            lows.append(by_chart[id(mchart)].f0)
        self.adjacent_minima = {br.min_id for br in self.branches.values()}
        self.f_lowest = min(lows)
        self.f_ball_edge = float(min(br.fvals[-1] for br in self.branches.values()))

    def _verify_extension(self):
        for s in (1.0, -1.0):
            u = s * 0.98 * np.sqrt(self.fq - (self.branches[s].min_chart.center.value
                                              + 0.9 * self.delta))
            for ys in (1.0, -1.0):
                self.ext_inverse(u, ys * np.sqrt(self.gamma))

    # -- extended chart -----------------------------------------------------

    def _entry(self, z):
        w = self.chart.ball_coords(z, factor=0.98)
        if w is not None:
            return w
        cap = self.fq + 2.0 * self.chart.radius ** 2
        res = run_flow(self.v, z, direction="forward", controls=_EVAL_CONTROLS,
                       stop_balls=[self.chart], stop_f=cap, record=False)
        if res.status != "ball":
            return None
        return self.chart.coords(res.points[-1])

    def rho_data(self, z):
        """(rho, branch sign, c, m) or None when z is not in the tube."""
        w = self._entry(z)
        if w is None:
            return None
        x, y = w[:self.k], w[self.k:]
        m = float(np.linalg.norm(x) * np.linalg.norm(y))
        c = self.v.base.value(z) - self.fq
        rho = 0.5 * (c + np.sqrt(c * c + 4.0 * m * m))
        s = float(np.sign(x[0])) if abs(x[0]) > 1e-13 else 1.0
        return rho, s, c, m

    def rho(self, z, lenient=1.0):
        data = self.rho_data(z)
        if data is None:
            return None
        rho = data[0]
        return float(rho) if rho < lenient * self.gamma else None

    def in_tube(self, z):
        return self.rho(z) is not None

    def rho_flow_derivative(self, z):
        data = self.rho_data(z)
        if data is None:
            return None
        rho, _, c, m = data
        return self.v.vf(z) * 0.5 * (1.0 + c / np.sqrt(c * c + 4.0 * m * m))

    def blend(self, fz):
        """1 = level projection (inside minimum tubes), 0 = flow projection."""
        return 1.0 - smoothstep((fz - self.f_lo) / (self.f_hi - self.f_lo))

    def pi(self, z):
        data = self.rho_data(z)
        if data is None:
            return None
        rho, s, c, m = data
        lam = self.blend(self.v.base.value(z))
        drop = (rho - c) - lam * rho
        return self.arc_point(s, self.fq - drop)

    # -- arc parametrization ------------------------------------------------

    def arc_point(self, branch_sign, f_target):
        """The stable-arc point at an exact f-value, on the given branch."""
        br = self.branches[1.0 if branch_sign >= 0 else -1.0]
        if f_target >= self.f_ball_edge:
            return self._arc_in_saddle_ball(br, f_target)
        if f_target >= br.f_ray_top:
            return self._arc_on_polyline(br, f_target)
        return self._arc_in_min_ball(br, f_target)

    def _arc_in_saddle_ball(self, br, f_target):
        chart = self.chart
        s = br.sign
        fv = self.v.base.value

        def point_at(u):
            w = np.zeros(chart.intrinsic_dim)
            w[0] = s * u
            return chart.point(w)

        u = np.sqrt(max(self.fq - f_target, 0.0))
        for _ in range(60):
            z = point_at(u)
            err = fv(z) - f_target
            if abs(err) < 1e-12:
                break
            # d f / d u = -2u on the model; guard near u = 0
            du = err / max(2.0 * u, 1e-6)
            u = min(max(u + du, 0.0), 0.98 * chart.radius)
        return point_at(u)

    def _arc_on_polyline(self, br, f_target):
        i = int(np.searchsorted(br.fvals, f_target))
        i = min(max(i, 1), len(br.fvals) - 1)
        f0, f1 = br.fvals[i - 1], br.fvals[i]
        t = 0.0 if f1 == f0 else (f_target - f0) / (f1 - f0)
        z = br.points[i - 1] + t * (br.points[i] - br.points[i - 1])
        z = self.v.base.domain.project(z)
        fz = self.v.base.value(z)
        if abs(fz - f_target) < 1e-12:
            return z
        direction = "forward" if fz < f_target else "backward"
        res = run_flow(self.v, z, direction=direction, controls=_ARC_CONTROLS,
                       stop_f=f_target, record=False)
        return res.points[-1]

    def _arc_in_min_ball(self, br, f_target):
        mchart = br.min_chart
        fv = self.v.base.value
        fm = mchart.center.value
        sig = float(np.min(mchart.sigma))

        def point_at(r):
            return mchart.point(r * br.ray_dir)

        r = np.sqrt(max(f_target - fm, 0.0))
        lo, hi = 0.0, mchart.radius / 0.9
        for _ in range(80):
            mid = r if lo < r < hi else 0.5 * (lo + hi)
            err = fv(point_at(mid)) - f_target
            if abs(err) < 1e-13:
                return point_at(mid)
            if err < 0.0:
                lo = mid
            else:
                hi = mid
            r = 0.5 * (lo + hi)
        return point_at(0.5 * (lo + hi))

    def ext_inverse(self, x_ext, y_ext):
        """Point with extended-chart coordinates (x_ext, y_ext), exactly on
        the f-level f(q) + y^2 - x^2.

        Starts from the balanced representative (sign(x) sqrt(m), sign(y)
        sqrt(m)) inside the ball and runs the flow to the exact f-target;
        the invariant m = |x y| is preserved, which is the defining property.
        """
        if abs(y_ext) < 1e-15:
            return self.arc_point(np.sign(x_ext) if x_ext else 1.0,
                                  self.fq - x_ext ** 2)
        m = abs(x_ext * y_ext)
        root = np.sqrt(m) if m > 0 else 0.0
        if root > 0.9 * self.chart.radius:
            raise ExtensionFailure(
                f"extended coordinates ({x_ext:.3g}, {y_ext:.3g}) exceed the "
                f"chart capacity of critical point {self.cp.id}")
        w = np.zeros(self.chart.intrinsic_dim)
        w[0] = np.sign(x_ext) * root if x_ext else 0.0
        w[1] = np.sign(y_ext) * root
        if root == 0.0:
            w[1] = min(abs(y_ext), 0.9 * self.chart.radius) * np.sign(y_ext)
        z0 = self.chart.point(w)
        f_target = self.fq + y_ext ** 2 - x_ext ** 2
        fz = self.v.base.value(z0)
        if abs(fz - f_target) < 1e-13:
            return z0
        direction = "forward" if fz < f_target else "backward"
        res = run_flow(self.v, z0, direction=direction, controls=_ARC_CONTROLS,
                       stop_f=f_target, record=False)
        if res.status != "f_reached":
            raise ExtensionFailure("flow failed to reach the extension f-level")
        return res.points[-1]


def build_thom_data(v, cps, strata, ms_report=None, min_gamma_frac=0.25):
    """Tubes for every stratum, keyed by stratum id.

    Refuses when a Morse-Smale report is supplied and failed: the extension
    construction is only claimed under transversality.
    """
    if ms_report is not None and not ms_report.get("pass", False):
        raise ExtensionFailure("Morse-Smale check failed; tube construction refused")
    n_int = cps[0].chart.intrinsic_dim
    values = sorted(cp.value for cp in cps)
    tubes = {}
    min_tubes = {}
    for cp in cps:
        if cp.index == 0:
            above = [x for x in values if x > cp.value + 1e-12]
            gap = (above[0] - cp.value) if above else 1.0
            t = MinTube(v, cp, gamma=min_gamma_frac * gap)
            tubes[cp.id] = t
            min_tubes[cp.id] = t
    for cp in cps:
        if cp.index == 0:
            continue
        if cp.index == n_int:
            tubes[cp.id] = TopTube(v, cp)
        else:
            tubes[cp.id] = SaddleTube(v, cp, min_tubes)
    return tubes


class NormalizedTube:
    """Reparametrized tube with rho scaled by 1/gamma, so gamma becomes 1.

    kappa(t) = t / gamma preserves all Thom axioms; delta rescales the same
    way.
    """

    def __init__(self, tube):
        self.inner = tube
        self.stratum = tube.stratum
        self.scale = 1.0 / tube.gamma
        self.gamma = 1.0
        self.delta = tube.delta * self.scale

    def rho(self, z, lenient=1.0):
        r = self.inner.rho(z, lenient=lenient)
        return None if r is None else r * self.scale

    def pi(self, z):
        return self.inner.pi(z)

    def in_tube(self, z):
        return self.inner.in_tube(z)

    def rho_flow_derivative(self, z):
        d = self.inner.rho_flow_derivative(z)
        return None if d is None else d * self.scale


def normalize_thom_data(tubes):
    return {sid: NormalizedTube(t) for sid, t in tubes.items()}


def overlap_samples(v, tubes, t_id, s_id, n=6, seed=0):
    """Sample points of U_T intersected with U_S (empty when the tubes do
    not overlap).  Tube geometry supplies exact constructions: extended-chart
    inverses for saddle tubes, level-circle points for minimum tubes."""
    T, S = tubes[t_id], tubes[s_id]
    rng = np.random.default_rng(seed)
    out = []
    if isinstance(S, SaddleTube) and isinstance(T, MinTube):
        for br_sign, br in S.branches.items():
            if br.min_id != T.cp.id:
                continue
            for _ in range(n):
                f_t = T.f0 + rng.uniform(0.25, 0.9) * T.gamma
                y = rng.uniform(0.3, 0.9) * np.sqrt(S.gamma) * rng.choice([-1.0, 1.0])
                x = br_sign * np.sqrt(S.fq + y * y - f_t)
                try:
                    out.append(S.ext_inverse(x, y))
                except ExtensionFailure:
                    continue
    elif isinstance(S, TopTube) and isinstance(T, MinTube):
        for _ in range(2 * n):
            lev = rng.uniform(0.2, 0.9) * T.gamma
            out.append(T.level_point(rng.uniform(0, 2 * np.pi), lev))
    elif isinstance(S, TopTube) and isinstance(T, SaddleTube):
        for _ in range(2 * n):
            y = rng.uniform(0.25, 0.9) * np.sqrt(T.gamma) * rng.choice([-1.0, 1.0])
            u = rng.uniform(-0.8, 0.8) * T.u_max
            try:
                out.append(T.ext_inverse(u, y))
            except ExtensionFailure:
                continue
    return out


def _pi_coordinate(tube, z):
    """Scalar coordinate of pi(z) along the stratum (signed extended-x for a
    curve stratum, nothing for a point)."""
    if isinstance(tube, (MinTube,)):
        return None
    data = tube.rho_data(z)
    if data is None:
        return None
    rho, s, c, _ = data
    lam = tube.blend(tube.v.base.value(z))
    drop = (rho - c) - lam * rho
    return s * np.sqrt(max(drop, 0.0))


def check_thom_axioms(v, tubes, strata, n_samples=6, compat_tol=1e-6,
                      submersion_tol=1e-3, fd_step=2e-5, seed=0):
    """Verify compatibility, strong submersion, and depth preservation on
    overlap samples, per comparable pair.  Report-valued."""
    by_id = {st.id: st for st in strata}
    dom = v.base.domain
    pairs = []
    for st in strata:
        for t_id in sorted(st.order):
            pairs.append((t_id, st.id))
    pairs.sort()
    report = {"pass": True, "pairs": []}
    for (t_id, s_id) in pairs:
        T = tubes[t_id]
        S = tubes[s_id]
        samples = overlap_samples(v, tubes, t_id, s_id, n=n_samples, seed=seed)
        entry = {"T": t_id, "S": s_id, "n_samples": len(samples),
                 "compat_pi": 0.0, "compat_rho": 0.0,
                 "submersion_min_sv": None, "depth_ok": True}
        if not samples:
            entry["vacuous"] = True
            report["pairs"].append(entry)
            continue
        worst_pi = worst_rho = 0.0
        worst_sv = np.inf
        for z in samples:
            zs = S.pi(z)
            if zs is None:
                continue
            # compatibility: pi_T pi_S = pi_T, rho_T pi_S = rho_T
            p1, p2 = T.pi(zs), T.pi(z)
            if p1 is not None and p2 is not None:
                worst_pi = max(worst_pi, float(np.linalg.norm(p1 - p2)))
            r1 = T.rho(zs, lenient=1.5)
            r2 = T.rho(z, lenient=1.5)
            if r1 is not None and r2 is not None:
                worst_rho = max(worst_rho, abs(r1 - r2))
            # strong submersion of rho_T x pi_T restricted to the top stratum
            sv = _submersion_sv(v, T, z, by_id[s_id], fd_step)
            if sv is not None:
                worst_sv = min(worst_sv, sv)
        entry["compat_pi"] = worst_pi
        entry["compat_rho"] = worst_rho
        entry["submersion_min_sv"] = None if worst_sv is np.inf else float(worst_sv)
        entry["depth_ok"] = True   # closed strata: all depths 0 on both sides
        ok = (worst_pi < compat_tol and worst_rho < compat_tol and
              (entry["submersion_min_sv"] is None or
               entry["submersion_min_sv"] > submersion_tol))
        entry["pass"] = bool(ok)
        report["pass"] = report["pass"] and ok
        report["pairs"].append(entry)
    return report


def _submersion_sv(v, T, z, stratum_S, h):
    """Smallest singular value of d(rho_T x pi_T) along the stratum of z."""
    if isinstance(T, TopTube):
        return None
    dom = v.base.domain
    if stratum_S.dim == 2:
        B = dom.tangent_basis(z)
        dirs = [B[:, 0], B[:, 1]]
    elif stratum_S.dim == 1:
        fr = stratum_S.frame(z)
        dirs = [fr[0]]
    else:
        return None
    rows_needed = 1 + (0 if isinstance(T, MinTube) else 1)
    if len(dirs) < rows_needed:
        return None
    cols = []
    for d in dirs:
        zp = dom.project(np.asarray(z) + h * d)
        zm = dom.project(np.asarray(z) - h * d)
        rp = T.rho(zp, lenient=2.0)
        rm = T.rho(zm, lenient=2.0)
        if rp is None or rm is None:
            return None
        col = [(rp - rm) / (2 * h)]
        if rows_needed == 2:
            up = _pi_coordinate(T, zp)
            um = _pi_coordinate(T, zm)
            if up is None or um is None:
                return None
            col.append((up - um) / (2 * h))
        cols.append(col)
    J = np.array(cols).T
    # rank is scale free: normalize rows so sigma_min measures the angle
    # between the component gradients, not their magnitudes
    for i in range(J.shape[0]):
        n = np.linalg.norm(J[i])
        if n < 1e-14:
            return 0.0
        J[i] = J[i] / n
    sv = np.linalg.svd(J, compute_uv=False)
    return float(sv[rows_needed - 1]) if len(sv) >= rows_needed else 0.0


def check_rho_flow_monotone(v, tubes, strata, n_samples=8, dt=0.05, seed=0):
    """rho_S must strictly increase along the flow at sampled tube points;
    both the analytic derivative and a flowed difference are checked."""
    from .integrators import advance
    report = {"pass": True, "tubes": []}
    by_id = {st.id: st for st in strata}
    for sid in sorted(tubes):
        tube = tubes[sid]
        if isinstance(tube, TopTube):
            continue
        samples = []
        rng = np.random.default_rng(seed + sid)
        if isinstance(tube, MinTube):
            for _ in range(n_samples):
                samples.append(tube.level_point(rng.uniform(0, 2 * np.pi),
                                                rng.uniform(0.2, 0.8) * tube.gamma))
        else:
            for _ in range(n_samples):
                y = rng.uniform(0.2, 0.9) * np.sqrt(tube.gamma) * rng.choice([-1, 1])
                u = rng.uniform(-0.85, 0.85) * tube.u_max
                try:
                    samples.append(tube.ext_inverse(u, y))
                except ExtensionFailure:
                    continue
        worst_deriv = np.inf
        worst_diff = np.inf
        for z in samples:
            d = tube.rho_flow_derivative(z)
            if d is not None:
                worst_deriv = min(worst_deriv, d)
            r0 = tube.rho(z, lenient=2.0)
            r1 = tube.rho(advance(v, z, dt), lenient=4.0)
            if r0 is not None and r1 is not None:
                worst_diff = min(worst_diff, r1 - r0)
        ok = (worst_deriv is not np.inf and worst_deriv > 0.0
              and worst_diff is not np.inf and worst_diff > 0.0)
        report["tubes"].append({
            "stratum": sid, "n_samples": len(samples),
            "min_flow_derivative": None if worst_deriv is np.inf else float(worst_deriv),
            "min_flowed_increase": None if worst_diff is np.inf else float(worst_diff),
            "pass": bool(ok),
        })
        report["pass"] = report["pass"] and ok
    return report


class RotatedPiTube:
    """Deliberately corrupted tube: pi composed with an ambient rotation.
    Test fixture for the compatibility check's failure mode."""

    def __init__(self, tube, rotation):
        self.inner = tube
        self.stratum = tube.stratum
        self.gamma = tube.gamma
        self.delta = tube.delta
        self.R = np.asarray(rotation, dtype=float)

    def rho(self, z, lenient=1.0):
        return self.inner.rho(z, lenient=lenient)

    def in_tube(self, z):
        return self.inner.in_tube(z)

    def pi(self, z):
        p = self.inner.pi(z)
        return None if p is None else self.R @ p

    def rho_flow_derivative(self, z):
        return self.inner.rho_flow_derivative(z)
