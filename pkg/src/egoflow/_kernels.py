"""Numba kernels for the depth-positivity solver.

All hot loops are sequential per translation candidate and parallelized over
candidates, so results are bit-identical for any thread count.  The inner
rotation solver descends a C1 smoothed version of the hinge objective (the
exact hinge is piecewise linear and stalls plain gradient descent at kinks);
within the +/- eps band the smoothed hinge is quadratic, its slope passing
through -1/2 at zero exactly like the coarse three-piece gradient rule, and
outside the band both objectives and gradients coincide.
"""

import math

import numpy as np
from numba import njit, prange

MAX_HALVINGS = 30


@njit(cache=True, inline="always")
def _true_objective(s, b0, b1, b2, un, w0, w1, w2):
    obj = 0.0
    for i in range(s.shape[0]):
        fr = (un[i] - (b0[i] * w0 + b1[i] * w1 + b2[i] * w2)) * s[i]
        if fr < 0.0:
            obj -= fr
    return obj


@njit(cache=True, inline="always")
def _smooth_objective(s, b0, b1, b2, un, w0, w1, w2, eps):
    # one-sided smoothing: quadratic on (-eps, 0), linear below, zero at
    # nonnegative margins, so the smoothed and exact minimizer sets agree
    obj = 0.0
    for i in range(s.shape[0]):
        fr = (un[i] - (b0[i] * w0 + b1[i] * w1 + b2[i] * w2)) * s[i]
        if fr <= -eps:
            obj += -fr - 0.5 * eps
        elif fr < 0.0:
            obj += fr * fr / (2.0 * eps)
    return obj


@njit(cache=True, inline="always")
def _smooth_grad_hess(s, b0, b1, b2, un, w0, w1, w2, eps):
    obj = 0.0
    g0 = 0.0
    g1 = 0.0
    g2 = 0.0
    h00 = 0.0
    h01 = 0.0
    h02 = 0.0
    h11 = 0.0
    h12 = 0.0
    h22 = 0.0
    nband = 0
    for i in range(s.shape[0]):
        si = s[i]
        fr = (un[i] - (b0[i] * w0 + b1[i] * w1 + b2[i] * w2)) * si
        if fr <= -eps:
            obj += -fr - 0.5 * eps
            hp = -1.0
        elif fr < 0.0:
            obj += fr * fr / (2.0 * eps)
            hp = fr / eps
            q = si * si / eps
            h00 += q * b0[i] * b0[i]
            h01 += q * b0[i] * b1[i]
            h02 += q * b0[i] * b2[i]
            h11 += q * b1[i] * b1[i]
            h12 += q * b1[i] * b2[i]
            h22 += q * b2[i] * b2[i]
            nband += 1
        else:
            hp = 0.0
        c = hp * si
        g0 += c * b0[i]
        g1 += c * b1[i]
        g2 += c * b2[i]
    # d f / d w = -s * Bn, so the objective gradient flips the accumulated sign
    return obj, -g0, -g1, -g2, h00, h01, h02, h11, h12, h22, nband


@njit(cache=True, inline="always")
def _chol_solve3(h00, h01, h02, h11, h12, h22, g0, g1, g2):
    lam = 1e-8 * (h00 + h11 + h22) / 3.0
    a00 = h00 + lam
    a11 = h11 + lam
    a22 = h22 + lam
    if a00 <= 0.0:
        return False, 0.0, 0.0, 0.0
    l00 = math.sqrt(a00)
    l10 = h01 / l00
    l20 = h02 / l00
    t11 = a11 - l10 * l10
    if t11 <= 0.0:
        return False, 0.0, 0.0, 0.0
    l11 = math.sqrt(t11)
    l21 = (h12 - l20 * l10) / l11
    t22 = a22 - l20 * l20 - l21 * l21
    if t22 <= 0.0:
        return False, 0.0, 0.0, 0.0
    l22 = math.sqrt(t22)
    y0 = g0 / l00
    y1 = (g1 - l10 * y0) / l11
    y2 = (g2 - l20 * y0 - l21 * y1) / l22
    x2 = y2 / l22
    x1 = (y1 - l21 * x2) / l11
    x0 = (y0 - l20 * x2 - l10 * x1) / l00
    return True, x0, x1, x2


@njit(cache=True)
def _descend(s, b0, b1, b2, un, iw0, iw1, iw2, eps, wmax, max_iters,
             step_tol, armijo, hist):
    """Damped-Newton/gradient descent with Armijo halving line search.

    Trial points are projected onto the ball |w| <= wmax: unbounded rotations
    can zero the hinge objective at any axis by mimicking translational flow
    of a constant-depth scene, so the solve is restricted to physical rates.
    Returns (w0, w1, w2, smoothed objective, true hinge objective, iters).
    ``hist`` (may be empty) records the smoothed objective per iterate.
    """
    w0 = iw0
    w1 = iw1
    w2 = iw2
    (obj, g0, g1, g2, h00, h01, h02, h11, h12, h22,
     nband) = _smooth_grad_hess(s, b0, b1, b2, un, w0, w1, w2, eps)
    iters = 0
    if hist.shape[0] > 0:
        hist[0] = obj
    for it in range(max_iters):
        if obj == 0.0:
            break
        gn2 = g0 * g0 + g1 * g1 + g2 * g2
        if gn2 <= 0.0:
            break
        accepted = False
        c0 = w0
        c1 = w1
        c2 = w2
        onew = obj
        moved = 0.0
        for attempt in range(2):
            if attempt == 0:
                if nband < 3:
                    continue
                ok, d0, d1, d2 = _chol_solve3(h00, h01, h02, h11, h12, h22,
                                              g0, g1, g2)
                if not ok:
                    continue
                dg = d0 * g0 + d1 * g1 + d2 * g2
                if dg <= 0.0:
                    continue
                step = 1.0
            else:
                d0 = g0
                d1 = g1
                d2 = g2
                dg = gn2
                step = obj / gn2
            dn = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            for _ in range(MAX_HALVINGS):
                t0 = w0 - step * d0
                t1 = w1 - step * d1
                t2 = w2 - step * d2
                tn = math.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
                if tn > wmax:
                    f = wmax / tn
                    t0 *= f
                    t1 *= f
                    t2 *= f
                o = _smooth_objective(s, b0, b1, b2, un, t0, t1, t2, eps)
                if o <= obj - armijo * step * dg:
                    accepted = True
                    c0 = t0
                    c1 = t1
                    c2 = t2
                    onew = o
                    dx0 = t0 - w0
                    dx1 = t1 - w1
                    dx2 = t2 - w2
                    moved = math.sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
                    break
                step *= 0.5
                if step * dn < step_tol:
                    break
            if accepted:
                break
        if not accepted:
            break
        w0 = c0
        w1 = c1
        w2 = c2
        (obj, g0, g1, g2, h00, h01, h02, h11, h12, h22,
         nband) = _smooth_grad_hess(s, b0, b1, b2, un, w0, w1, w2, eps)
        iters = it + 1
        if hist.shape[0] > iters:
            hist[iters] = obj
        if moved < step_tol:
            break
    tobj = _true_objective(s, b0, b1, b2, un, w0, w1, w2)
    return w0, w1, w2, obj, tobj, iters


@njit(cache=True, parallel=True)
def rotation_scan(a0, a1, a2, b0, b1, b2, un, cands, w_inits, eps, wmax,
                  max_iters, step_tol, armijo, sign_normalized, out_w,
                  out_sobj, out_tobj, out_iters):
    """Rotation solve for every candidate axis; parallel over candidates.

    With ``sign_normalized`` the descent runs on the sign-normalized hinge
    (each violation costs its derotated speed), which is robust against
    rotations that fake positive depth through large near-cancelling terms;
    ``out_tobj`` always reports the plain hinge objective.
    """
    n = a0.shape[0]
    jn = cands.shape[0]
    for j in prange(jn):
        t0 = cands[j, 0]
        t1 = cands[j, 1]
        t2 = cands[j, 2]
        s = np.empty(n)
        for i in range(n):
            s[i] = a0[i] * t0 + a1[i] * t1 + a2[i] * t2
        if sign_normalized:
            sd = np.empty(n)
            for i in range(n):
                if s[i] > 0.0:
                    sd[i] = 1.0
                elif s[i] < 0.0:
                    sd[i] = -1.0
                else:
                    sd[i] = 0.0
        else:
            sd = s
        no_hist = np.empty(0)
        w0, w1, w2, sobj, tobj, iters = _descend(
            sd, b0, b1, b2, un, w_inits[j, 0], w_inits[j, 1], w_inits[j, 2],
            eps, wmax, max_iters, step_tol, armijo, no_hist)
        if sign_normalized:
            tobj = _true_objective(s, b0, b1, b2, un, w0, w1, w2)
        out_w[j, 0] = w0
        out_w[j, 1] = w1
        out_w[j, 2] = w2
        out_sobj[j] = sobj
        out_tobj[j] = tobj
        out_iters[j] = iters


@njit(cache=True)
def rotation_descent_single(a0, a1, a2, b0, b1, b2, un, cand, w_init, eps,
                            wmax, max_iters, step_tol, armijo, hist):
    """Single-candidate rotation solve sharing the batch code path."""
    n = a0.shape[0]
    s = np.empty(n)
    for i in range(n):
        s[i] = a0[i] * cand[0] + a1[i] * cand[1] + a2[i] * cand[2]
    return _descend(s, b0, b1, b2, un, w_init[0], w_init[1], w_init[2], eps,
                    wmax, max_iters, step_tol, armijo, hist)


@njit(cache=True, parallel=True)
def objective_scan(a0, a1, a2, b0, b1, b2, un, cands, w0, w1, w2, out):
    """True hinge objective across candidates at a fixed rotation."""
    n = a0.shape[0]
    jn = cands.shape[0]
    for j in prange(jn):
        t0 = cands[j, 0]
        t1 = cands[j, 1]
        t2 = cands[j, 2]
        obj = 0.0
        for i in range(n):
            s = a0[i] * t0 + a1[i] * t1 + a2[i] * t2
            fr = (un[i] - (b0[i] * w0 + b1[i] * w1 + b2[i] * w2)) * s
            if fr < 0.0:
                obj -= fr
        out[j] = obj


@njit(cache=True, inline="always")
def _tangent_basis(t0, t1, t2):
    if abs(t0) < 0.9:
        # e1 = normalize(cross(t, x_hat))
        c0 = 0.0
        c1 = t2
        c2 = -t1
    else:
        c0 = -t2
        c1 = 0.0
        c2 = t0
    n = math.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
    e10 = c0 / n
    e11 = c1 / n
    e12 = c2 / n
    e20 = t1 * e12 - t2 * e11
    e21 = t2 * e10 - t0 * e12
    e22 = t0 * e11 - t1 * e10
    return e10, e11, e12, e20, e21, e22


@njit(cache=True)
def _joint_objective(a0, a1, a2, b0, b1, b2, un, t0, t1, t2, w0, w1, w2, eps):
    obj = 0.0
    for i in range(a0.shape[0]):
        s = a0[i] * t0 + a1[i] * t1 + a2[i] * t2
        fr = (un[i] - (b0[i] * w0 + b1[i] * w1 + b2[i] * w2)) * s
        if fr <= -eps:
            obj += -fr - 0.5 * eps
        elif fr < 0.0:
            obj += fr * fr / (2.0 * eps)
    return obj


@njit(cache=True)
def joint_refine(a0, a1, a2, b0, b1, b2, un, t_init, w_init, eps, wmax,
                 max_iters, step_tol, armijo):
    """Joint Gauss-Newton descent of the smoothed hinge over (axis, rotation).

    The axis moves in its 2-D tangent plane and is renormalized after every
    accepted step; the rotation is kept inside the |w| <= wmax ball.
    Returns (t, w, smoothed objective, true objective, iterations).
    """
    n = a0.shape[0]
    t0, t1, t2 = t_init[0], t_init[1], t_init[2]
    tn = math.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
    t0 /= tn
    t1 /= tn
    t2 /= tn
    w0, w1, w2 = w_init[0], w_init[1], w_init[2]
    g = np.zeros(5)
    h = np.zeros((5, 5))
    jac = np.zeros(5)
    sol = np.zeros(5)
    iters = 0
    obj = _joint_objective(a0, a1, a2, b0, b1, b2, un, t0, t1, t2,
                           w0, w1, w2, eps)
    for it in range(max_iters):
        if obj == 0.0:
            break
        e10, e11, e12, e20, e21, e22 = _tangent_basis(t0, t1, t2)
        for k in range(5):
            g[k] = 0.0
            for l in range(5):
                h[k, l] = 0.0
        for i in range(n):
            s = a0[i] * t0 + a1[i] * t1 + a2[i] * t2
            derot = un[i] - (b0[i] * w0 + b1[i] * w1 + b2[i] * w2)
            fr = derot * s
            if fr >= 0.0:
                continue
            if fr <= -eps:
                hp = -1.0
                hpp = 0.0
            else:
                hp = fr / eps
                hpp = 1.0 / eps
            jac[0] = derot * (a0[i] * e10 + a1[i] * e11 + a2[i] * e12)
            jac[1] = derot * (a0[i] * e20 + a1[i] * e21 + a2[i] * e22)
            jac[2] = -s * b0[i]
            jac[3] = -s * b1[i]
            jac[4] = -s * b2[i]
            for k in range(5):
                g[k] += hp * jac[k]
                if hpp > 0.0:
                    for l in range(k, 5):
                        h[k, l] += hpp * jac[k] * jac[l]
        gn2 = 0.0
        for k in range(5):
            gn2 += g[k] * g[k]
        if gn2 <= 0.0:
            break
        # damping keeps the system positive definite off the quadratic band
        tr = h[0, 0] + h[1, 1] + h[2, 2] + h[3, 3] + h[4, 4]
        lam = 1e-7 * tr / 5.0 + 1e-12 * math.sqrt(gn2)
        for k in range(5):
            h[k, k] += lam
            for l in range(k):
                h[k, l] = h[l, k]
        ok = True
        for k in range(5):
            sol[k] = g[k]
        # cholesky in place
        for k in range(5):
            piv = h[k, k]
            for l in range(k):
                piv -= h[k, l] * h[k, l]
            if piv <= 0.0:
                ok = False
                break
            h[k, k] = math.sqrt(piv)
            for m in range(k + 1, 5):
                v = h[m, k]
                for l in range(k):
                    v -= h[m, l] * h[k, l]
                h[m, k] = v / h[k, k]
        use_newton = ok
        if ok:
            for k in range(5):
                v = sol[k]
                for l in range(k):
                    v -= h[k, l] * sol[l]
                sol[k] = v / h[k, k]
            for k in range(4, -1, -1):
                v = sol[k]
                for l in range(k + 1, 5):
                    v -= h[l, k] * sol[l]
                sol[k] = v / h[k, k]
            dg = 0.0
            for k in range(5):
                dg += sol[k] * g[k]
            if dg <= 0.0:
                use_newton = False
        accepted = False
        nt0 = t0
        nt1 = t1
        nt2 = t2
        nw0 = w0
        nw1 = w1
        nw2 = w2
        nobj = obj
        for attempt in range(2):
            if attempt == 0:
                if not use_newton:
                    continue
                d0, d1, d2, d3, d4 = sol[0], sol[1], sol[2], sol[3], sol[4]
                dg_dir = dg
                step = 1.0
            else:
                d0, d1, d2, d3, d4 = g[0], g[1], g[2], g[3], g[4]
                dg_dir = gn2
                step = obj / gn2
            dn = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3 + d4 * d4)
            for _ in range(MAX_HALVINGS):
                ct0 = t0 - step * (d0 * e10 + d1 * e20)
                ct1 = t1 - step * (d0 * e11 + d1 * e21)
                ct2 = t2 - step * (d0 * e12 + d1 * e22)
                cn = math.sqrt(ct0 * ct0 + ct1 * ct1 + ct2 * ct2)
                ct0 /= cn
                ct1 /= cn
                ct2 /= cn
                cw0 = w0 - step * d2
                cw1 = w1 - step * d3
                cw2 = w2 - step * d4
                wn = math.sqrt(cw0 * cw0 + cw1 * cw1 + cw2 * cw2)
                if wn > wmax:
                    f = wmax / wn
                    cw0 *= f
                    cw1 *= f
                    cw2 *= f
                o = _joint_objective(a0, a1, a2, b0, b1, b2, un,
                                     ct0, ct1, ct2, cw0, cw1, cw2, eps)
                if o <= obj - armijo * step * dg_dir:
                    accepted = True
                    nt0 = ct0
                    nt1 = ct1
                    nt2 = ct2
                    nw0 = cw0
                    nw1 = cw1
                    nw2 = cw2
                    nobj = o
                    break
                step *= 0.5
                if step * dn < step_tol:
                    break
            if accepted:
                break
        if not accepted:
            break
        moved = math.sqrt((nt0 - t0) ** 2 + (nt1 - t1) ** 2 + (nt2 - t2) ** 2
                          + (nw0 - w0) ** 2 + (nw1 - w1) ** 2
                          + (nw2 - w2) ** 2)
        t0 = nt0
        t1 = nt1
        t2 = nt2
        w0 = nw0
        w1 = nw1
        w2 = nw2
        obj = nobj
        iters = it + 1
        if moved < step_tol:
            break
    s = np.empty(n)
    for i in range(n):
        s[i] = a0[i] * t0 + a1[i] * t1 + a2[i] * t2
    tobj = _true_objective(s, b0, b1, b2, un, w0, w1, w2)
    out_t = np.array([t0, t1, t2])
    out_w = np.array([w0, w1, w2])
    return out_t, out_w, obj, tobj, iters


@njit(cache=True, parallel=True)
def objective_scan_per_w(a0, a1, a2, b0, b1, b2, un, cands, ws, out):
    """True hinge objective per candidate, each with its own rotation."""
    n = a0.shape[0]
    jn = cands.shape[0]
    for j in prange(jn):
        t0 = cands[j, 0]
        t1 = cands[j, 1]
        t2 = cands[j, 2]
        w0 = ws[j, 0]
        w1 = ws[j, 1]
        w2 = ws[j, 2]
        obj = 0.0
        for i in range(n):
            s = a0[i] * t0 + a1[i] * t1 + a2[i] * t2
            fr = (un[i] - (b0[i] * w0 + b1[i] * w1 + b2[i] * w2)) * s
            if fr < 0.0:
                obj -= fr
        out[j] = obj
