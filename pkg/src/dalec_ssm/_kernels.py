"""Compiled inner loops for factor assembly and the single-site Gibbs sweep.

Every likelihood term is a linear-Gaussian factor over at most ten latent
values: the five stocks at the start and at the end of one grid window
(slots 0-4 and 5-9).  Its residual is ``g . x[idx] + h``.
"""
import numpy as np
from numba import njit

NSLOT = 10
CONST = 10


@njit(cache=True)
def _bridge_window(t0, L, m_all, off_all, exact, S, Vb, m, V, P, g, h, u, row0):
    """Bridge interpolation of all five stocks through one window.

    ``S[j, s, :]`` holds the conditional mean of stock ``s`` on day ``t0 + j``
    given the ten window anchors, as coefficients over the slots plus a constant.
    ``Vb[j, s]`` is the matching conditional variance in daily-variance units.
    """
    for s in range(5):
        for q in range(11):
            m[0, q] = 0.0
        m[0, s] = 1.0
        V[0] = 0.0
        for j in range(1, L + 1):
            k = t0 + j - 1
            a = m_all[k, s, s]
            for q in range(11):
                m[j, q] = a * m[j - 1, q]
            m[j, CONST] += off_all[k, s]
            for l in range(5):
                if l != s:
                    c = m_all[k, s, l]
                    if c != 0.0:
                        for q in range(11):
                            m[j, q] += c * S[j - 1, l, q]
            V[j] = a * a * V[j - 1] + 1.0
        P[L] = 1.0
        for j in range(L, 0, -1):
            P[j - 1] = m_all[t0 + j - 1, s, s] * P[j]
        VL = V[L]
        for j in range(L + 1):
            kj = P[j] * V[j] / VL
            for q in range(11):
                S[j, s, q] = m[j, q] - kj * m[L, q]
            S[j, s, 5 + s] += kj
            vb = V[j] - (P[j] * V[j]) ** 2 / VL
            Vb[j, s] = vb if vb > 0.0 else 0.0
        r = row0 + s
        for q in range(NSLOT):
            g[r, q] = m[L, q]
        g[r, 5 + s] -= 1.0
        h[r] = m[L, CONST]
        u[r] = 1.0 / VL if exact else 1.0


@njit(cache=True)
def _one_day_window(k, m_all, off_all, alpha, gamma, n0, n1, d_kind, d_series, d_y, d0, row0, g, h, u, vb):
    """Direct fill of a one-day window: no interpolation is needed."""
    for s in range(5):
        r = row0 + s
        for q in range(NSLOT):
            g[r, q] = 0.0
        for l in range(5):
            g[r, l] = m_all[k, s, l]
        g[r, 5 + s] = -1.0
        h[r] = off_all[k, s]
        u[r] = 1.0
    for n in range(n0, n1):
        f = d0 + n
        for q in range(NSLOT):
            g[f, q] = 0.0
        for l in range(5):
            vb[f, l] = 0.0
        jf = d_series[n]
        for l in range(5):
            g[f, l] = alpha[k, jf, l]
        h[f] = gamma[k, jf] - d_y[n]


@njit(cache=True)
def assemble(anchors, m_all, off_all, alpha, gamma, exact,
             win_ptr, d_kind, d_series, d_j, d_y, tr_row, d0, use_vb, g, h, u, vb):
    """Fill transition rows (five per window from ``tr_row[i]``; windows with
    ``tr_row[i] < 0`` are skipped) and data rows (from ``d0``) in place.

    ``d_kind`` 0 = stock observation strictly inside a window, 1 = flux
    observation; ``d_j`` is the local day of the observation (for fluxes the
    day whose flux is observed, which uses the stocks of the previous day).
    """
    n_w = anchors.shape[0] - 1
    max_len = 1
    for i in range(n_w):
        if anchors[i + 1] - anchors[i] > max_len:
            max_len = anchors[i + 1] - anchors[i]
    S = np.zeros((max_len + 1, 5, 11))
    Vb = np.zeros((max_len + 1, 5))
    m = np.zeros((max_len + 1, 11))
    V = np.zeros(max_len + 1)
    P = np.ones(max_len + 1)
    for i in range(n_w):
        if tr_row[i] < 0:
            continue
        t0 = anchors[i]
        L = anchors[i + 1] - t0
        if L == 1:
            _one_day_window(t0, m_all, off_all, alpha, gamma, win_ptr[i], win_ptr[i + 1], d_kind,
                            d_series, d_y, d0, tr_row[i], g, h, u, vb)
            continue
        _bridge_window(t0, L, m_all, off_all, exact, S, Vb, m, V, P, g, h, u, tr_row[i])
        for n in range(win_ptr[i], win_ptr[i + 1]):
            f = d0 + n
            j = d_j[n]
            for q in range(NSLOT):
                g[f, q] = 0.0
            for l in range(5):
                vb[f, l] = 0.0
            if d_kind[n] == 0:
                s = d_series[n]
                for q in range(NSLOT):
                    g[f, q] = S[j, s, q]
                h[f] = S[j, s, CONST] - d_y[n]
                if use_vb:
                    vb[f, s] = Vb[j, s]
            else:
                jf = d_series[n]
                k = t0 + j - 1
                hh = gamma[k, jf] - d_y[n]
                for l in range(5):
                    c = alpha[k, jf, l]
                    if c != 0.0:
                        if use_vb:
                            vb[f, l] = c * c * Vb[j - 1, l]
                        for q in range(NSLOT):
                            g[f, q] += c * S[j - 1, l, q]
                        hh += c * S[j - 1, l, CONST]
                h[f] = hh


@njit(cache=True)
def precisions(kind, stock, base, u, vb, phi, out):
    inv = 1.0 / phi
    for f in range(kind.shape[0]):
        k = kind[f]
        if k == 0:
            out[f] = base[f]
        elif k == 1:
            out[f] = phi[stock[f]] * u[f]
        elif k == 4:
            out[f] = 1.0
        else:
            v = 1.0 / base[f]
            for l in range(5):
                v += vb[f, l] * inv[l]
            out[f] = 1.0 / v


@njit(cache=True)
def evaluate(g, h, idx, x, kind, stock, base, weight, u, vb, phi, e, prec):
    """Residuals, precisions and the (prior, process, data) log-density sums."""
    residuals(g, h, idx, x, e)
    precisions(kind, stock, base, u, vb, phi, prec)
    c = 0.5 * np.log(2.0 * np.pi)
    out = np.zeros(3)
    for f in range(kind.shape[0]):
        k = kind[f]
        ld = weight[f] * (0.5 * np.log(prec[f]) - c - 0.5 * prec[f] * e[f] * e[f])
        if k == 0:
            out[0] += ld
        elif k == 1 or k == 4:
            out[1] += ld
        else:
            out[2] += ld
    return out


@njit(cache=True)
def residuals(g, h, idx, x, out):
    for f in range(g.shape[0]):
        r = h[f]
        for q in range(NSLOT):
            i = idx[f, q]
            if i >= 0:
                r += g[f, q] * x[i]
        out[f] = r


@njit(cache=True)
def gibbs_sweep(x, g, idx, e, wprec, order, site_ptr, site_fac, site_slot, z):
    """One sequential pass of exact single-site Gaussian full conditionals.

    ``e`` holds current residuals and is kept in sync with ``x``.
    Returns -1 on success or the offending site index if a conditional
    precision is not positive.
    """
    for n in range(order.shape[0]):
        j = order[n]
        A = 0.0
        B = 0.0
        xj = x[j]
        for p in range(site_ptr[j], site_ptr[j + 1]):
            f = site_fac[p]
            gj = g[f, site_slot[p]]
            if gj != 0.0:
                pw = wprec[f]
                A += pw * gj * gj
                B += pw * gj * (gj * xj - e[f])
        if not A > 0.0:
            return j
        new = B / A + z[n] / np.sqrt(A)
        d = new - xj
        for p in range(site_ptr[j], site_ptr[j + 1]):
            f = site_fac[p]
            e[f] += g[f, site_slot[p]] * d
        x[j] = new
    return -1


@njit(cache=True)
def conditional_moments(j, x, g, e, wprec, site_ptr, site_fac, site_slot):
    """Full-conditional (mean, precision) of latent value ``j``."""
    A = 0.0
    B = 0.0
    for p in range(site_ptr[j], site_ptr[j + 1]):
        f = site_fac[p]
        gj = g[f, site_slot[p]]
        if gj != 0.0:
            pw = wprec[f]
            A += pw * gj * gj
            B += pw * gj * (gj * x[j] - e[f])
    return B / A, A


# ----------------------------------------------------------------------
# Banded joint precision of all latent values (lower storage: B[i, d] = Q[i, i - d])


@njit(cache=True)
def band_precision(g, h, idx, wprec, n_x, bw, Q, b):
    """Precision ``Q`` and linear term ``b`` of the latent Gaussian:
    ``sum_f wprec_f (g_f . x + h_f)^2 = x'Qx + 2 b'x + const``."""
    Q[:, :] = 0.0
    b[:] = 0.0
    for f in range(g.shape[0]):
        w = wprec[f]
        for p in range(NSLOT):
            i = idx[f, p]
            if i < 0 or g[f, p] == 0.0:
                continue
            gi = w * g[f, p]
            b[i] += gi * h[f]
            for q in range(NSLOT):
                j = idx[f, q]
                if j < 0 or j > i:
                    continue
                Q[i, i - j] += gi * g[f, q]


@njit(cache=True)
def band_cholesky(Q, L):
    """Lower Cholesky factor in band storage; returns False if not positive definite."""
    n, w = Q.shape
    bw = w - 1
    for i in range(n):
        j0 = i - bw if i - bw > 0 else 0
        for j in range(j0, i + 1):
            s = Q[i, i - j]
            for k in range(j0, j):
                s -= L[i, i - k] * L[j, j - k]
            if i == j:
                if not s > 0.0:
                    return False
                L[i, 0] = np.sqrt(s)
            else:
                L[i, i - j] = s / L[j, 0]
    return True


@njit(cache=True)
def band_solve_lower(L, v, out):
    n, w = L.shape
    for i in range(n):
        s = v[i]
        for k in range(max(0, i - w + 1), i):
            s -= L[i, i - k] * out[k]
        out[i] = s / L[i, 0]


@njit(cache=True)
def band_solve_upper(L, v, out):
    """Solve ``L' out = v``."""
    n, w = L.shape
    for i in range(n - 1, -1, -1):
        s = v[i]
        for k in range(i + 1, min(n, i + w)):
            s -= L[k, k - i] * out[k]
        out[i] = s / L[i, 0]


@njit(cache=True)
def band_mul_upper(L, v, out):
    """``out = L' v``."""
    n, w = L.shape
    for i in range(n):
        s = 0.0
        for k in range(i, min(n, i + w)):
            s += L[k, k - i] * v[k]
        out[i] = s


# ----------------------------------------------------------------------
# Exact marginalization of the daily states inside a window


@njit(cache=True)
def collapse_windows(anchors, m_all, off_all, alpha, gamma, phi, cw, crow, c_ptr, c_kind, c_series,
                     c_j, c_y, c_prec, c_w, g, h, const):
    """Integrate the interior days of each window in ``cw`` out of the daily model.

    The transitions and in-window observations give a Gaussian in the ten
    window anchors (start ``A`` and end, five stocks each).  It is written as
    ten rank-one rows ``(g . x + h)^2`` starting at ``crow[w]``, and the
    remaining log-normaliser goes to ``const[w]``.  ``c_j`` is the local day
    of the stocks an observation depends on; observations are sorted by it.

    The running form is ``v'Jv + 2 eta'v + c`` over ``(A, P)`` where ``P`` is
    the latest day; each step adds the transition to the next day and
    integrates ``P`` out.
    """
    log2pi = np.log(2.0 * np.pi)
    JAA = np.zeros((5, 5))
    JAP = np.zeros((5, 5))
    JPP = np.zeros((5, 5))
    eA = np.zeros(5)
    eP = np.zeros(5)
    R = np.zeros((5, 5))
    B = np.zeros((5, 11))
    a5 = np.zeros(5)
    FM = np.zeros((5, 5))
    Fo = np.zeros(5)
    J = np.zeros((10, 10))
    eta = np.zeros(10)
    half_log_phi = 0.0
    for s in range(5):
        half_log_phi += 0.5 * (np.log(phi[s]) - log2pi)
    for w in range(cw.shape[0]):
        i = cw[w]
        t0 = anchors[i]
        L = anchors[i + 1] - t0
        JAA[:, :] = 0.0
        JAP[:, :] = 0.0
        JPP[:, :] = 0.0
        eA[:] = 0.0
        eP[:] = 0.0
        cst = 0.0
        ln = 0.0
        p = c_ptr[w]
        for j in range(L):
            k = t0 + j
            # observations of day j act on A (j = 0) or on P
            while p < c_ptr[w + 1] and c_j[p] == j:
                if c_kind[p] == 0:
                    a5[:] = 0.0
                    a5[c_series[p]] = 1.0
                    kappa = -c_y[p]
                else:
                    jf = c_series[p]
                    for l in range(5):
                        a5[l] = alpha[k, jf, l]
                    kappa = gamma[k, jf] - c_y[p]
                pr = c_w[p] * c_prec[p]
                for l in range(5):
                    if a5[l] == 0.0:
                        continue
                    for q in range(5):
                        if j == 0:
                            JAA[l, q] += pr * a5[l] * a5[q]
                        else:
                            JPP[l, q] += pr * a5[l] * a5[q]
                    if j == 0:
                        eA[l] += pr * a5[l] * kappa
                    else:
                        eP[l] += pr * a5[l] * kappa
                cst += pr * kappa * kappa
                ln += c_w[p] * 0.5 * (np.log(c_prec[p]) - log2pi)
                p += 1
            # transition N = M P + o + noise, noise precision diag(phi)
            for s in range(5):
                Fo[s] = phi[s] * off_all[k, s]
                cst += Fo[s] * off_all[k, s]
                for l in range(5):
                    FM[s, l] = phi[s] * m_all[k, s, l]
            ln += half_log_phi
            if j == 0:
                for l in range(5):
                    for q in range(5):
                        acc = 0.0
                        for s in range(5):
                            acc += m_all[k, s, l] * FM[s, q]
                        JAA[l, q] += acc
                        JAP[l, q] = -FM[q, l]
                        JPP[l, q] = 0.0
                    JPP[l, l] = phi[l]
                    acc = 0.0
                    for s in range(5):
                        acc += m_all[k, s, l] * Fo[s]
                    eA[l] += acc
                    eP[l] = -Fo[l]
                continue
            # S = JPP + M' F M, with right-hand sides [JPA | M'F | eP + M'F o]
            for l in range(5):
                for q in range(5):
                    acc = JPP[l, q]
                    for s in range(5):
                        acc += m_all[k, s, l] * FM[s, q]
                    JPP[l, q] = acc
                    B[l, q] = JAP[q, l]
                    B[l, 5 + q] = FM[q, l]
                acc = eP[l]
                for s in range(5):
                    acc += m_all[k, s, l] * Fo[s]
                B[l, 10] = acc
            # Cholesky S = R R' and forward solve R W = B in place
            for r in range(5):
                for q in range(r + 1):
                    acc = JPP[r, q]
                    for m in range(q):
                        acc -= R[r, m] * R[q, m]
                    if r == q:
                        if not acc > 0.0:
                            const[w] = -np.inf
                            return
                        R[r, r] = np.sqrt(acc)
                    else:
                        R[r, q] = acc / R[q, q]
                ln += 0.5 * log2pi - np.log(R[r, r])
                for q in range(11):
                    acc = B[r, q]
                    for m in range(r):
                        acc -= R[r, m] * B[m, q]
                    B[r, q] = acc / R[r, r]
            # Schur complement onto (A, N); N becomes the new P
            for l in range(5):
                for q in range(5):
                    aa = 0.0
                    an = 0.0
                    nn = 0.0
                    for m in range(5):
                        aa += B[m, l] * B[m, q]
                        an += B[m, l] * B[m, 5 + q]
                        nn += B[m, 5 + l] * B[m, 5 + q]
                    JAA[l, q] -= aa
                    JAP[l, q] = an
                    JPP[l, q] = -nn
                JPP[l, l] += phi[l]
                ea = 0.0
                en = 0.0
                for m in range(5):
                    ea += B[m, l] * B[m, 10]
                    en += B[m, 5 + l] * B[m, 10]
                eA[l] -= ea
                eP[l] = en - Fo[l]
            for m in range(5):
                cst -= B[m, 10] * B[m, 10]
        for r in range(5):
            eta[r] = eA[r]
            eta[5 + r] = eP[r]
            for q in range(5):
                J[r, q] = JAA[r, q]
                J[r, 5 + q] = JAP[r, q]
                J[5 + r, q] = JAP[q, r]
                J[5 + r, 5 + q] = JPP[r, q]
        # decompose the anchor form into rank-one rows
        sc = np.empty(10)
        for r in range(10):
            sc[r] = np.sqrt(J[r, r]) if J[r, r] > 0.0 else 1.0
        Jt = np.empty((10, 10))
        for r in range(10):
            for q in range(10):
                Jt[r, q] = J[r, q] / (sc[r] * sc[q])
        lam, V = np.linalg.eigh(Jt)
        top = lam[9]
        row = crow[w]
        rest = cst
        for kk in range(10):
            f = row + kk
            if lam[kk] > 1e-13 * top:
                sl = np.sqrt(lam[kk])
                proj = 0.0
                for r in range(10):
                    g[f, r] = sl * sc[r] * V[r, kk]
                    proj += V[r, kk] * eta[r] / sc[r]
                h[f] = proj / sl
                rest -= h[f] * h[f]
            else:
                for r in range(10):
                    g[f, r] = 0.0
                h[f] = 0.0
        const[w] = ln - 0.5 * rest + 5.0 * log2pi
