"""Compiled inner loops that cannot be vectorised over time."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def bh_paths(g, b, gross, beta, sigma, z, fractions):
    """Brock-Hommes recursion for every row of ``z``.

    Returns an array of shape (n_series, n_steps + 3) whose first three columns
    are the zero lag states.  ``fractions`` is either empty or an
    (n_steps, H) buffer filled with the strategy fractions of the first series.
    """
    n_series, n_steps = z.shape
    H = g.shape[0]
    x = np.zeros((n_series, n_steps + 3))
    a = np.empty(H)
    record = fractions.shape[0] == n_steps
    for i in range(n_series):
        for t in range(2, n_steps + 2):
            xt = x[i, t]
            xt1 = x[i, t - 1]
            xt2 = x[i, t - 2]
            excess = xt - gross * xt1
            amax = -np.inf
            for h in range(H):
                a[h] = beta * excess * (g[h] * xt2 + b[h] - gross * xt1)
                if a[h] > amax:
                    amax = a[h]
            total = 0.0
            for h in range(H):
                a[h] = math.exp(a[h] - amax)
                total += a[h]
            acc = 0.0
            for h in range(H):
                nh = a[h] / total
                acc += nh * (g[h] * xt + b[h])
                if record and i == 0:
                    fractions[t - 2, h] = nh
            x[i, t + 1] = acc / gross + sigma * z[i, t - 2]
    return x


@njit(cache=True, nogil=True)
def gauss_transform_log(queries, pool, h, radius, order, floor):
    """Log Gaussian KDE at ``queries`` using boxed Taylor expansions.

    Pool points are binned into boxes of width ``h``.  For each box the
    Gaussian kernel is expanded about the box centre to ``order`` terms; a
    query only receives contributions from boxes whose centre lies within
    ``radius * h`` (plus half a box).  Returns (log densities, floored count).
    """
    n = pool.shape[0]
    hs = h * math.sqrt(2.0)
    lo = pool.min()
    hi = pool.max()
    nbox = int(math.floor((hi - lo) / h)) + 1
    coef = np.zeros((nbox, order))
    for j in range(n):
        k = int(math.floor((pool[j] - lo) / h))
        if k >= nbox:
            k = nbox - 1
        c = lo + (k + 0.5) * h
        v = (pool[j] - c) / hs
        term = math.exp(-v * v)
        for p in range(order):
            coef[k, p] += term
            term *= v
    # fold 2^p / p! into the coefficients
    scale = np.empty(order)
    s = 1.0
    for p in range(order):
        scale[p] = s
        s *= 2.0 / (p + 1)
    for k in range(nbox):
        for p in range(order):
            coef[k, p] *= scale[p]

    norm = 1.0 / (n * h * math.sqrt(2.0 * math.pi))
    reach = int(math.ceil(radius)) + 1
    m = queries.shape[0]
    out = np.empty(m)
    floored = 0
    for i in range(m):
        x = queries[i]
        kq = int(math.floor((x - lo) / h))
        total = 0.0
        for k in range(max(kq - reach, 0), min(kq + reach + 1, nbox)):
            c = lo + (k + 0.5) * h
            if abs(x - c) > (radius + 0.5) * h:
                continue
            u = (x - c) / hs
            acc = 0.0
            up = 1.0
            for p in range(order):
                acc += coef[k, p] * up
                up *= u
            total += math.exp(-u * u) * acc
        dens = total * norm
        if dens > floor:
            out[i] = math.log(dens)
        else:
            out[i] = math.log(floor)
            floored += 1
    return out, floored


# --------------------------------------------------------------------------
# Gauss transform with box-sorted pool (faster coefficient accumulation)

_FAST = {"reassoc", "contract", "nsz", "arcp"}


@njit(cache=True, nogil=True, fastmath=_FAST)
def _power_sums(v, term, scale, out):
    for p in range(out.shape[0]):
        s = 0.0
        for j in range(v.shape[0]):
            s += term[j]
            term[j] *= v[j]
        out[p] = s * scale[p]


@njit(cache=True, nogil=True)
def gauss_transform_log_sorted(queries, pool, h, radius, order, floor):
    """Same contract as :func:`gauss_transform_log`, with pool points grouped by box."""
    n = pool.shape[0]
    hs = h * math.sqrt(2.0)
    lo = pool.min()
    hi = pool.max()
    nbox = int(math.floor((hi - lo) / h)) + 1
    box = np.empty(n, dtype=np.int64)
    counts = np.zeros(nbox + 1, dtype=np.int64)
    inv_h = 1.0 / h
    for j in range(n):
        k = int((pool[j] - lo) * inv_h)
        if k >= nbox:
            k = nbox - 1
        box[j] = k
        counts[k + 1] += 1
    for k in range(nbox):
        counts[k + 1] += counts[k]
    fill = counts[:-1].copy()
    v = np.empty(n)
    term = np.empty(n)
    for j in range(n):
        k = box[j]
        c = lo + (k + 0.5) * h
        vj = (pool[j] - c) / hs
        pos = fill[k]
        fill[k] += 1
        v[pos] = vj
        term[pos] = math.exp(-vj * vj)
    scale = np.empty(order)
    s = 1.0
    for p in range(order):
        scale[p] = s
        s *= 2.0 / (p + 1)
    coef = np.zeros((nbox, order))
    for k in range(nbox):
        if counts[k + 1] > counts[k]:
            a, b = counts[k], counts[k + 1]
            _power_sums(v[a:b], term[a:b], scale, coef[k])

    norm = 1.0 / (n * h * math.sqrt(2.0 * math.pi))
    reach = int(math.ceil(radius)) + 1
    m = queries.shape[0]
    out = np.empty(m)
    floored = 0
    for i in range(m):
        x = queries[i]
        kq = int(math.floor((x - lo) / h))
        total = 0.0
        for k in range(max(kq - reach, 0), min(kq + reach + 1, nbox)):
            if counts[k + 1] == counts[k]:
                continue
            c = lo + (k + 0.5) * h
            if abs(x - c) > (radius + 0.5) * h:
                continue
            u = (x - c) / hs
            acc = 0.0
            for p in range(order - 1, -1, -1):
                acc = acc * u + coef[k, p]
            total += math.exp(-u * u) * acc
        dens = total * norm
        if dens > floor:
            out[i] = math.log(dens)
        else:
            out[i] = math.log(floor)
            floored += 1
    return out, floored


# --------------------------------------------------------------------------
# order statistics


@njit(cache=True, nogil=True)
def order_statistics(x, ranks):
    """Values of rank ``ranks[i]`` (0-based) in sorted ``x`` without sorting all of ``x``."""
    n = x.shape[0]
    lo = x.min()
    hi = x.max()
    out = np.empty(ranks.shape[0])
    if hi == lo:
        out[:] = lo
        return out
    nb = 4096
    scale = nb / (hi - lo)
    counts = np.zeros(nb + 1, dtype=np.int64)
    for j in range(n):
        b = int((x[j] - lo) * scale)
        if b >= nb:
            b = nb - 1
        counts[b + 1] += 1
    for b in range(nb):
        counts[b + 1] += counts[b]
    for i in range(ranks.shape[0]):
        r = ranks[i]
        b = np.searchsorted(counts, r, side="right") - 1
        members = np.empty(counts[b + 1] - counts[b])
        m = 0
        for j in range(n):
            bj = int((x[j] - lo) * scale)
            if bj >= nb:
                bj = nb - 1
            if bj == b:
                members[m] = x[j]
                m += 1
        members.sort()
        out[i] = members[r - counts[b]]
    return out


# --------------------------------------------------------------------------
# moments


@njit(cache=True, nogil=True)
def _acf_row(y, mean, lag):
    n = y.shape[0]
    den = 0.0
    for t in range(n):
        d = y[t] - mean
        den += d * d
    if den <= 0.0:
        return 0.0
    num = 0.0
    for t in range(lag, n):
        num += (y[t] - mean) * (y[t - lag] - mean)
    return num / den


@njit(cache=True, nogil=True)
def moment_rows(X):
    """Rows of [m2, m4 / m2^2, acf(x,1), acf(|x|,1), acf(x^2,1), acf(|x|,5), acf(x^2,5)].

    Rows with zero variance get m2 = 0 and NaN elsewhere; the caller rejects them.
    """
    R, n = X.shape
    out = np.empty((R, 7))
    a = np.empty(n)
    s = np.empty(n)
    for i in range(R):
        x = X[i]
        mean = 0.0
        ma = 0.0
        ms = 0.0
        for t in range(n):
            a[t] = abs(x[t])
            s[t] = x[t] * x[t]
            mean += x[t]
            ma += a[t]
            ms += s[t]
        mean /= n
        ma /= n
        ms /= n
        m2 = 0.0
        m4 = 0.0
        for t in range(n):
            d = x[t] - mean
            d2 = d * d
            m2 += d2
            m4 += d2 * d2
        m2 /= n
        m4 /= n
        out[i, 0] = m2
        if m2 > 0.0:
            out[i, 1] = m4 / (m2 * m2)
        else:
            out[i, 1] = np.nan
        out[i, 2] = _acf_row(x, mean, 1)
        out[i, 3] = _acf_row(a, ma, 1)
        out[i, 4] = _acf_row(s, ms, 1)
        out[i, 5] = _acf_row(a, ma, 5)
        out[i, 6] = _acf_row(s, ms, 5)
    return out


# --------------------------------------------------------------------------
# GSL-div word counting


@njit(cache=True, nogil=True)
def gsl_contributions(S, b, L, real_flat, real_off, real_sup, sup_off, work, touched):
    """2 S(m_l) - S(f_l) in bits for l = 1..L.

    ``S`` holds symbols row-wise.  The real word distribution of length l is
    ``real_flat[real_off[l-1]:real_off[l]]`` (dense over b**l codes) and its
    nonzero codes are ``real_sup[sup_off[l-1]:sup_off[l]]``.  ``work`` is a
    zeroed scratch vector of length >= b**L and is an int32 count buffer left zeroed; ``touched``
    is an int buffer of length >= S.size.
    """
    R, n = S.shape
    out = np.empty(L)
    inv_log2 = 1.0 / math.log(2.0)
    for l in range(1, L + 1):
        size = 1
        for _ in range(l):
            size *= b
        lead = size // b
        w = 1.0 / (R * (n - l + 1))
        nt = 0
        for i in range(R):
            code = 0
            for t in range(n):
                if t >= l:
                    code -= S[i, t - l] * lead
                code = code * b + S[i, t]
                if t >= l - 1:
                    if work[code] == 0:
                        touched[nt] = code
                        nt += 1
                    work[code] += 1
        base = real_off[l - 1]
        hf = 0.0
        hm = 0.0
        for j in range(nt):
            c = touched[j]
            f = work[c] * w
            hf -= f * math.log(f)
            m = 0.5 * (f + real_flat[base + c])
            hm -= m * math.log(m)
        for j in range(sup_off[l - 1], sup_off[l]):
            c = real_sup[j]
            if work[c] == 0:
                m = 0.5 * real_flat[base + c]
                hm -= m * math.log(m)
        for j in range(nt):
            work[touched[j]] = 0
        out[l - 1] = (2.0 * hm - hf) * inv_log2
    return out


# --------------------------------------------------------------------------
# context tree weighting (heap layout: node (d, i) lives at 2**d - 1 + i)


@njit(cache=True, nogil=True)
def ctw_leaf_counts_from_bins(B, r, L):
    R, n = B.shape
    D = L * r
    mask = (1 << D) - 1
    leaf = np.zeros((1 << D, 2), dtype=np.int64)
    for i in range(R):
        for t in range(L, n):
            W = 0
            for j in range(L + 1):
                W |= B[i, t - j] << (r * j)
            for k in range(r):
                ctx = (W >> (r - k)) & mask
                bit = (W >> (r - 1 - k)) & 1
                leaf[ctx, bit] += 1
    return leaf


@njit(cache=True, nogil=True)
def ctw_leaf_counts_from_series(X, lower, upper, r, L):
    """Leaf counts straight from real-valued rows; also returns the clamped count."""
    R, n = X.shape
    nbins = 1 << r
    span = upper - lower
    B = np.empty((R, n), dtype=np.int64)
    clamped = 0
    for i in range(R):
        for t in range(n):
            x = X[i, t]
            if x < lower:
                clamped += 1
                k = 0
            elif x > upper:
                clamped += 1
                k = nbins - 1
            else:
                k = int(math.floor((x - lower) / span * nbins))
                if k >= nbins:
                    k = nbins - 1
            B[i, t] = k
    return ctw_leaf_counts_from_bins(B, r, L), clamped


@njit(cache=True, nogil=True)
def ctw_predict(c0, c1, mix, depth, ctx, bits):
    """log2 P(bit | ctx) under a frozen tree.

    ``mix[node]`` is Pe / (Pe + Pw(child0) Pw(child1)) for internal nodes, so
    the ratio of updated to current weighted probability at a node is
    ``mix * kt_ratio + (1 - mix) * child_ratio``.
    """
    m = ctx.shape[0]
    out = np.empty(m)
    for q in range(m):
        c = ctx[q]
        y = bits[q]
        ratio = 1.0
        for d in range(depth, -1, -1):
            off = (1 << d) - 1 + (c & ((1 << d) - 1))
            a = c0[off]
            bb = c1[off]
            hit = bb if y == 1 else a
            kt = (hit + 0.5) / (a + bb + 1.0)
            if d == depth:
                ratio = kt
            else:
                w = mix[off]
                ratio = w * kt + (1.0 - w) * ratio
        out[q] = math.log2(ratio)
    return out


@njit(cache=True, nogil=True)
def ctw_weights(c0, c1, depth, lg_half, lg_one):
    """log2 Pe, log2 Pw and mixing weights for a heap-laid tree of counts.

    ``lg_half[k]`` is log2(Gamma(k + 1/2) / sqrt(pi)) and ``lg_one[k]`` is
    log2(Gamma(k + 1)).
    """
    size = c0.shape[0]
    log_pe = np.empty(size)
    log_pw = np.empty(size)
    mix = np.ones(size)
    for j in range(size):
        a = c0[j]
        b = c1[j]
        log_pe[j] = lg_half[a] + lg_half[b] - lg_one[a + b]
    first_leaf = (1 << depth) - 1
    for j in range(first_leaf, size):
        log_pw[j] = log_pe[j]
    for d in range(depth - 1, -1, -1):
        base = (1 << d) - 1
        child = (1 << (d + 1)) - 1
        half = 1 << d
        for i in range(half):
            j = base + i
            kids = log_pw[child + i] + log_pw[child + half + i]
            diff = kids - log_pe[j]
            if diff > 0.0:
                e = 2.0 ** (-diff)
                log_pw[j] = kids - 1.0 + math.log2(1.0 + e)
                mix[j] = e / (1.0 + e)
            else:
                e = 2.0 ** diff
                log_pw[j] = log_pe[j] - 1.0 + math.log2(1.0 + e)
                mix[j] = 1.0 / (1.0 + e)
    return log_pe, log_pw, mix
