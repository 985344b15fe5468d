"""Adaptive gradient-flow integration with chart shortcuts.

Embedded Cash-Karp 5(4) stepping with per-step surface re-projection.  Inside
a Morse chart ball the gradientlike field *is* the model field, so the solver
may replace stepping by the exact linear flow (e^-t x, e^t y): it jumps from
the entry point straight to the ball exit, or declares convergence when the
expanding part of the state is negligible.  Jumps are suppressed whenever a
requested f-stop could trigger inside the ball; plain numerical stepping then
resolves the stop precisely (the field is exactly the model there, so nothing
is lost).

Stops: exact f-level crossings (bisected to ~1e-12 in step length), entry
into designated chart balls, box-domain exit, custom predicates, exact time,
and a step budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Cash-Karp tableau
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([3 / 10, -9 / 10, 6 / 5]),
    np.array([-11 / 54, 5 / 2, -70 / 27, 35 / 27]),
    np.array([1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096]),
]
_B5 = np.array([37 / 378, 0.0, 250 / 621, 125 / 594, 0.0, 512 / 1771])
_B4 = np.array([2825 / 27648, 0.0, 18575 / 48384, 13525 / 55296, 277 / 14336, 1 / 4])

CONV_REL = 1e-6   # contracting-entry threshold relative to ball radius


@dataclass
class StepControls:
    rtol: float = 1e-10
    atol: float = 1e-12
    max_steps: int = 1_000_000
    h_init: float = 1e-3
    h_max: float = 0.25


@dataclass
class FlowResult:
    times: np.ndarray           # flow times, monotone in the run direction
    points: np.ndarray
    status: str                 # converged | f_reached | ball | left-domain | pred | time | step-limit
    hit_chart: object = None    # chart at a converged/ball stop
    flow_time: float = 0.0


def _rk_step(rhs, z, h):
    k = [rhs(z)]
    for i in range(1, 6):
        k.append(rhs(z + h * sum(a * kk for a, kk in zip(_A[i], k))))
    k = np.array(k)
    z5 = z + h * (_B5 @ k)
    err = h * ((_B5 - _B4) @ k)
    return z5, float(np.linalg.norm(err))


def run_flow(v, z0, direction="forward", controls=None, stop_f=None,
             stop_balls=(), stop_pred=None, shortcut=True, max_time=None,
             record=True):
    """Integrate the gradientlike flow from z0 until a stop fires.

    direction "backward" integrates -v; recorded times are signed flow times
    starting at 0 (negative and descending for backward runs).
    """
    controls = controls or StepControls()
    dom = v.base.domain
    sign = 1.0 if direction == "forward" else -1.0
    f_of = v.base.value

    def rhs(q):
        return sign * v(q)

    z = dom.project(np.asarray(z0, dtype=float)) if dom.kind == "implicit" \
        else np.asarray(z0, dtype=float).copy()
    t = 0.0
    times = [0.0]
    points = [z.copy()]

    def emit(status, hit=None):
        if times[-1] != t:
            times.append(t)
            points.append(z.copy())
        return FlowResult(np.array(times), np.array(points), status, hit, t)

    if stop_f is not None and _f_passed(f_of(z), stop_f, sign):
        return emit("f_reached")
    hit0 = _ball_hit(stop_balls, z)
    if hit0 is not None:
        return emit("ball", hit0)

    h = controls.h_init
    nsteps = 0
    while nsteps < controls.max_steps:
        remaining = None if max_time is None else max_time - abs(t)
        if remaining is not None and remaining <= 1e-14:
            return emit("time")

        if shortcut:
            outcome = _try_jump(v, z, sign, stop_f, stop_balls, remaining)
            if outcome is not None:
                kind = outcome[0]
                if kind == "converged":
                    return emit("converged", outcome[1])
                dt, z_new = outcome[1], outcome[2]
                t += sign * dt
                z = z_new
                if record:
                    times.append(t)
                    points.append(z.copy())
                nsteps += 1
                hit = _ball_hit(stop_balls, z)
                if hit is not None:
                    return emit("ball", hit)
                continue

        h_try = h if remaining is None else min(h, remaining)
        z_new, err = _rk_step(rhs, z, h_try)
        tol = controls.atol + controls.rtol * max(np.linalg.norm(z), np.linalg.norm(z_new))
        if err > tol and h_try > 1e-14:
            h = max(1e-14, 0.9 * h_try * (tol / max(err, 1e-300)) ** 0.2)
            continue
        nsteps += 1

        if dom.kind == "implicit":
            z_new = dom.project(z_new)
        elif not _in_box(dom, z_new):
            frac = _box_cross(dom, z, z_new)
            z = z + frac * (z_new - z)
            t += sign * h_try * frac
            return emit("left-domain")

        if stop_f is not None and _f_passed(f_of(z_new), stop_f, sign):
            tau = _locate(rhs, dom, z, h_try, lambda q: 1.0 if _f_passed(f_of(q), stop_f, sign) else -1.0)
            z = _substep(rhs, dom, z, tau)
            t += sign * tau
            return emit("f_reached")

        if stop_pred is not None and stop_pred(z_new):
            tau = _locate(rhs, dom, z, h_try, lambda q: 1.0 if stop_pred(q) else -1.0)
            z = _substep(rhs, dom, z, tau)
            t += sign * tau
            return emit("pred")

        z = z_new
        t += sign * h_try
        if record:
            times.append(t)
            points.append(z.copy())

        hit = _ball_hit(stop_balls, z)
        if hit is not None:
            return emit("ball", hit)

        if err > 0.0:
            h = min(controls.h_max, 0.9 * h_try * (tol / max(err, 1e-300)) ** 0.2)

    return emit("step-limit")


def _try_jump(v, z, sign, stop_f, stop_balls, remaining):
    """Attempt an exact-model transit of whichever ball contains z."""
    for chart in v.charts:
        if chart in stop_balls:
            continue
        w = chart.ball_coords(z, factor=0.98)
        if w is None:
            continue
        k = chart.k
        grow = w[k:] if sign > 0 else w[:k]
        shrink = w[:k] if sign > 0 else w[k:]
        g2 = float(grow @ grow)
        s2 = float(shrink @ shrink)
        eps = chart.radius
        if g2 <= (CONV_REL * eps) ** 2:
            if stop_f is not None:
                # an f-stop on the way into the center must win over the
                # convergence shortcut; resolve it numerically
                f_here = chart.model_value(w)
                f_center = chart.f0
                pad = 1e-3 * (1.0 + abs(f_center))
                lo, hi = min(f_here, f_center), max(f_here, f_center)
                if lo - pad <= stop_f <= hi + pad:
                    return None
            return ("converged", chart)
        disc = eps ** 4 - 4.0 * s2 * g2
        root = np.sqrt(disc) if disc > 0.0 else 0.0
        u = (eps ** 2 + root) / (2.0 * g2)        # u = e^{2 dt}
        dt = 0.5 * np.log(max(u, 1.0 + 1e-14))
        if remaining is not None and dt > remaining:
            dt = remaining
        w_exit = chart.model_flow(w, sign * dt)
        if stop_f is not None:
            f_here = chart.model_value(w)
            f_exit = chart.model_value(w_exit)
            lo, hi = min(f_here, f_exit), max(f_here, f_exit)
            # model-f vs true f can differ by the chart residual; pad generously
            pad = 0.5 * (hi - lo) + 1e-3 * (1.0 + abs(f_here))
            if lo - pad <= stop_f <= hi + pad:
                return None                        # resolve numerically
        return ("jump", dt, chart.point(w_exit))
    return None


def _f_passed(fv, target, sign):
    return fv >= target if sign > 0 else fv <= target


def _ball_hit(stop_balls, z):
    for chart in stop_balls:
        if chart.contains(z, factor=0.95):
            return chart
    return None


def _in_box(dom, z):
    return bool(np.all(z >= dom.box[0]) and np.all(z <= dom.box[1]))


def _box_cross(dom, z, z_new):
    a, b = 0.0, 1.0
    for _ in range(60):
        m = 0.5 * (a + b)
        if _in_box(dom, z + m * (z_new - z)):
            a = m
        else:
            b = m
    return a


def _substep(rhs, dom, z, tau):
    if tau <= 0.0:
        return z.copy()
    zt, _ = _rk_step(rhs, z, tau)
    return dom.project(zt) if dom.kind == "implicit" else zt


def _locate(rhs, dom, z, h, indicator):
    """Smallest step length in (0, h] where the indicator turns positive."""
    a, b = 0.0, h
    for _ in range(60):
        m = 0.5 * (a + b)
        if indicator(_substep(rhs, dom, z, m)) > 0.0:
            b = m
        else:
            a = m
        if b - a < 1e-15:
            break
    return b


def advance(v, z, dt, controls=None):
    """Flow z for signed time dt exactly (no other stops)."""
    if dt == 0.0:
        return np.asarray(z, dtype=float).copy()
    direction = "forward" if dt > 0 else "backward"
    res = run_flow(v, z, direction=direction, controls=controls,
                   shortcut=True, max_time=abs(dt), record=False)
    return res.points[-1]
