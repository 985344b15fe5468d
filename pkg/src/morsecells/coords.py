"""Nonlinear changes of special coordinates around a critical point.

Special coordinates mean f(x, y) = |y|^2 - |x|^2 with model field (-x, y).
A coordinate change h preserving them satisfies

    (1)  v o h = dh o v          (2)  f o h = f

which forces h(x,0) = x and h(0,y) = y, and splits (2) into

    (5)  |x|^2 = sum_{i<=k} h_i^2     (6)  |y|^2 = sum_{i>k} h_i^2,

with the flow equivariance

    (3)  e^t h_i(x,y) = h_i(e^t x, e^-t y),  i <= k
    (4)  e^-t h_i(x,y) = h_i(e^t x, e^-t y), i > k.

For k in {0, n} or n = 2 only linear (orthogonal) changes exist; otherwise
there are nonlinear examples: rotate one factor by an angle depending on the
flow invariant s = |x||y|/eps through the flat function e^(-1/s), extended by
the identity at s = 0.
"""

from __future__ import annotations

import numpy as np

from .expr import ScalarExpression


class InvalidSignatureError(ValueError):
    pass


def model_f(w, k):
    w = np.asarray(w, dtype=float)
    return float(w[k:] @ w[k:]) - float(w[:k] @ w[:k])


def model_field(w, k):
    out = np.array(w, dtype=float)
    out[:k] *= -1.0
    return out


def model_flow(w, k, t):
    out = np.array(w, dtype=float)
    out[:k] *= np.exp(-t)
    out[k:] *= np.exp(t)
    return out


class SpecialChange:
    """h(x, y) = (tau(e^(-1/s)) x, y), s = |x||y|/eps, tau a rotation curve.

    The rotation acts in the first two coordinates of the rotating factor
    (the x-factor when k >= 2, else the y-factor); tau(0) = identity, so h
    extends by the identity across s = 0 and is smooth.
    """

    def __init__(self, n, k, eps, angle="u"):
        if not (0 < k < n) or n == 2:
            raise InvalidSignatureError(
                "nontrivial special changes need 0 < k < n and n > 2")
        self.n, self.k = int(n), int(k)
        self.eps = float(eps)
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        self.rotate_x = k >= 2
        if not self.rotate_x and n - k < 2:
            raise InvalidSignatureError("neither factor has dimension >= 2")
        if isinstance(angle, str):
            self._angle_expr = ScalarExpression(angle, 1, var_names=("u",))
            self.angle = lambda u: self._angle_expr.value([u])
            self.angle_text = angle
        else:
            self.angle = angle
            self.angle_text = getattr(angle, "__name__", "callable")
        if abs(self.angle(0.0)) > 0.0:
            raise ValueError("angle(0) must vanish so that tau(0) = identity")

    def split(self, w):
        w = np.asarray(w, dtype=float)
        return w[:self.k], w[self.k:]

    def s_value(self, w):
        x, y = self.split(w)
        return float(np.linalg.norm(x) * np.linalg.norm(y) / self.eps)

    def theta(self, w):
        s = self.s_value(w)
        if s <= 0.0:
            return 0.0
        return float(self.angle(np.exp(-1.0 / s)))

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        th = self.theta(w)
        out = w.copy()
        if th != 0.0:
            base = 0 if self.rotate_x else self.k
            c, s = np.cos(th), np.sin(th)
            a, b = out[base], out[base + 1]
            out[base] = c * a - s * b
            out[base + 1] = s * a + c * b
        return out

    def jacobian(self, w):
        """Analytic derivative of h (the oracle for the finite-difference
        check of the field equation)."""
        w = np.asarray(w, dtype=float)
        n, k = self.n, self.k
        x, y = self.split(w)
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        th = self.theta(w)
        base = 0 if self.rotate_x else k
        R = np.eye(n)
        c, s = np.cos(th), np.sin(th)
        R[base, base], R[base, base + 1] = c, -s
        R[base + 1, base], R[base + 1, base + 1] = s, c
        J = R.copy()
        if nx > 0 and ny > 0:
            svar = nx * ny / self.eps
            u = np.exp(-1.0 / svar)
            h = 1e-7
            dang = (self.angle(u + h) - self.angle(u - h)) / (2 * h)
            dth_ds = dang * u / (svar * svar)
            grad_s = np.zeros(n)
            grad_s[:k] = (ny / self.eps) * x / nx
            grad_s[k:] = (nx / self.eps) * y / ny
            dR = np.zeros((n, n))
            dR[base, base], dR[base, base + 1] = -s, -c
            dR[base + 1, base], dR[base + 1, base + 1] = c, -s
            J = J + np.outer(dR @ w, dth_ds * grad_s)
        return J


def build_special_change(n, k, eps, angle="u"):
    """Construct the rotation-by-flat-function example for signature (n, k)."""
    return SpecialChange(n, k, eps, angle)


def _halton(n_points, dim, seed=0):
    from scipy.stats import qmc
    return qmc.Halton(d=dim, scramble=True, seed=seed).random(n_points)


def verify_special_change(h: SpecialChange, samples=1000, tol_exact=1e-12,
                          tol_fd=1e-7, seed=0):
    """Residual report for the defining equations on quasi-random samples in
    the ball of radius eps/2.

    f o h = f and the split equations are exact (rotations preserve norms);
    the field equation uses central finite differences for dh, so its
    residual is FD-limited; flow equivariance is checked for |t| <= 0.5; a
    smoothness probe bounds difference quotients down to s -> 0.
    """
    n, k = h.n, h.k
    pts = (_halton(samples, n, seed) - 0.5) * h.eps
    worst = {"f_invariance": 0.0, "split_x": 0.0, "split_y": 0.0,
             "field_fd": 0.0, "field_analytic": 0.0, "equivariance": 0.0}
    fd = 1e-6 * h.eps
    rng = np.random.default_rng(seed)
    for w in pts:
        hw = h(w)
        worst["f_invariance"] = max(worst["f_invariance"],
                                    abs(model_f(hw, k) - model_f(w, k)))
        x, y = h.split(w)
        worst["split_x"] = max(worst["split_x"],
                               abs(float(x @ x) - float(hw[:k] @ hw[:k])))
        worst["split_y"] = max(worst["split_y"],
                               abs(float(y @ y) - float(hw[k:] @ hw[k:])))
        # field equation with dh by central differences
        J_fd = np.zeros((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = fd
            J_fd[:, j] = (h(w + e) - h(w - e)) / (2 * fd)
        lhs = model_field(hw, k)
        worst["field_fd"] = max(worst["field_fd"],
                                float(np.max(np.abs(lhs - J_fd @ model_field(w, k)))))
        J = h.jacobian(w)
        worst["field_analytic"] = max(worst["field_analytic"],
                                      float(np.max(np.abs(lhs - J @ model_field(w, k)))))
        t = rng.uniform(-0.5, 0.5)
        lhs_eq = h(model_flow(w, k, t))
        rhs_eq = model_flow(hw, k, t)
        worst["equivariance"] = max(worst["equivariance"],
                                    float(np.max(np.abs(lhs_eq - rhs_eq))))
    # axis identities, exact
    axis = 0.0
    axis_pts = (_halton(1000, n, seed + 1) - 0.5) * h.eps
    for w in axis_pts:
        wx = w.copy()
        wx[k:] = 0.0
        wy = w.copy()
        wy[:k] = 0.0
        axis = max(axis, float(np.max(np.abs(h(wx) - wx))),
                   float(np.max(np.abs(h(wy) - wy))))
    # smoothness probe: difference quotients stay bounded as s -> 0
    probe = []
    for sval in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
        r = np.sqrt(sval * h.eps)
        w = np.zeros(n)
        w[0] = r
        w[k] = r
        e = np.zeros(n)
        e[0] = 1e-8
        quot = np.max(np.abs(h(w + e) - h(w - e))) / 2e-8
        probe.append(float(quot))
    report = {
        "n": n, "k": k, "eps": h.eps, "samples": int(samples),
        "residuals": {kk: float(vv) for kk, vv in worst.items()},
        "axis_identity": float(axis),
        "smoothness_quotients": probe,
        "smoothness_bounded": bool(max(probe) < 10.0),
    }
    report["pass"] = bool(
        worst["f_invariance"] < tol_exact and worst["split_x"] < tol_exact
        and worst["split_y"] < tol_exact and axis == 0.0
        and worst["field_fd"] < tol_fd and worst["equivariance"] < 1e-9
        and report["smoothness_bounded"])
    return report


class CorruptedChange:
    """Negative control: compose with a non-orthogonal linear map, which
    breaks f-invariance."""

    def __init__(self, inner, scale=2.0):
        self.inner = inner
        self.n, self.k, self.eps = inner.n, inner.k, inner.eps
        self.scale = scale
        self.split = inner.split

    def __call__(self, w):
        out = self.inner(w)
        out[0] *= self.scale
        return out
