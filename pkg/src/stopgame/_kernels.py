"""Compiled episode loop.

Strategies arrive as flat array encodings (see ``simulator._encode_*``).
Defender kinds: 0 threshold mixture, 1 grid, 2 alert threshold, 3 intrusion oracle.
Threshold mixtures are passed per coordinate: each column of thetas sorted,
with the matching weights and their cumulative sums (a behavioural mixture
only depends on these per-coordinate marginals).
Attacker / belief-model kinds: 0 threshold mixture bound to a defender
(kind 0 or 1), 1 grid. Each step consumes four uniforms in the order
defender action, attacker action, transition, observation.
"""
import math

import numpy as np
from numba import config, njit, prange

# the bundled TBB is too old for numba; use the portable pool
config.THREADING_LAYER = "workqueue"

SHARPNESS = 20.0

REASON_FINAL_STOP = 0
REASON_CHANCE = 1
REASON_ABORT = 2
REASON_TRUNCATED = 3
REASON_DEGENERATE = 4

FALLBACK_LIKELIHOOD = 0
FALLBACK_CARRY = 1
FALLBACK_RAISE = 2

# trace columns
TR_S, TR_B, TR_L, TR_AD, TR_AA, TR_O, TR_R = range(7)
TRACE_COLS = 7


@njit(cache=True)
def interp(row, b):
    K = row.shape[0]
    x = min(max(b, 0.0), 1.0) * (K - 1)
    i = min(int(math.floor(x)), K - 2)
    w = x - i
    return row[i] * (1.0 - w) + row[i + 1] * w


# |z| beyond this saturates the sigmoid to within exp(-40) of 0 or 1
SAT = 40.0


@njit(cache=True)
def logit(b):
    if b <= 0.0:
        return -np.inf
    if b >= 1.0:
        return np.inf
    return math.log(b) - math.log1p(-b)


@njit(cache=True)
def sig(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@njit(cache=True)
def mix_coord(ths, ws, cw, j, x):
    """sum_i w_i * sigmoid(20 (x - theta_ij)) for x = logit(b); column j of ``ths`` is sorted.

    Atoms far below x contribute their full weight, atoms far above nothing;
    only the band in between is evaluated.
    """
    n = ths.shape[0]
    if x == np.inf:
        return cw[n, j]
    if x == -np.inf:
        return 0.0
    lo = np.searchsorted(ths[:, j], x - SAT / SHARPNESS)
    hi = np.searchsorted(ths[:, j], x + SAT / SHARPNESS)
    p = cw[lo, j]
    for i in range(lo, hi):
        p += ws[i, j] * sig(SHARPNESS * (x - ths[i, j]))
    return p


@njit(cache=True)
def def_stop(kind, ths, ws, cw, table, l, b):
    if kind == 0:
        return mix_coord(ths, ws, cw, l - 1, logit(b))
    return interp(table[l - 1], b)


@njit(cache=True)
def att_stop_both(kind, ths, ws, cw, table, dfloor, d, l, b):
    """Stop probabilities (state 0, state 1) at (l, b); ``d`` is the bound defender's stop probability."""
    if kind == 0:
        x = logit(max(d, dfloor))
        L = ths.shape[1] // 2
        total = cw[ths.shape[0], l - 1]
        p0 = total - mix_coord(ths, ws, cw, l - 1, x)
        p1 = mix_coord(ths, ws, cw, L + l - 1, x)
        return p0, p1
    return interp(table[0, l - 1], b), interp(table[1, l - 1], b)


@njit(cache=True)
def draw3(r0, r1, r2, u):
    # same arithmetic as game.draw_index on a length-3 row
    c0 = r0
    c1 = c0 + r1
    c2 = c1 + r2
    x = u * c2
    if x < c0:
        return 0
    if x < c1:
        return 1
    return 2


@njit(cache=True)
def draw_cdf(cdf, u):
    x = u * cdf[cdf.shape[0] - 1]
    lo = 0
    hi = cdf.shape[0]
    while lo < hi:  # first index with cdf > x
        mid = (lo + hi) // 2
        if cdf[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return min(lo, cdf.shape[0] - 1)


@njit(cache=True)
def episode(u, rewards, phi, pmf, cdf,
            dk, dth, dw, dcw, dtab, dparam,
            ak, ath, aw, acw, atab, afloor, abk, abth, abw, abcw, abtab,
            mk, mth, mw, mcw, mtab, mfloor, mbk, mbth, mbw, mbcw, mbtab,
            share, fallback, trace):
    """One episode. Returns (return, steps, reason, intrusion_start, intrusion_len, degenerate).

    ``share`` flags reuse within a step: [attacker bound to the defender itself,
    model bound to the defender itself, model bound like the attacker, model
    identical to the attacker].
    """
    r_st, r_cost, r_int, gamma = rewards[0], rewards[1], rewards[2], rewards[3]
    L = phi.shape[0]
    t_max = u.shape[0]
    record = trace.shape[0] == t_max
    s = 0
    b = 0.0
    l = L
    ret = 0.0
    disc = 1.0
    istart = -1
    ilen = 0
    ndeg = 0
    last_obs = -1
    for t in range(t_max):
        if dk == 0 or dk == 1:
            pd = def_stop(dk, dth, dw, dcw, dtab, l, b)
        elif dk == 2:
            pd = 1.0 if last_obs >= dparam else 0.0
        else:
            pd = 1.0 if s == 1 else 0.0
        ad = 1 if u[t, 0] < pd else 0
        da = 0.0
        if ak == 0:
            da = pd if share[0] else def_stop(abk, abth, abw, abcw, abtab, l, b)
        q0, q1 = att_stop_both(ak, ath, aw, acw, atab, afloor, da, l, b)
        pa = q1 if s == 1 else q0
        aa = 1 if u[t, 1] < pa else 0

        if s == 0:
            r = r_cost / l if ad == 1 else 0.0
        elif aa == 1:
            r = 0.0
        else:
            r = r_st / l if ad == 1 else r_int
        if s == 1:
            ilen += 1
        ret += disc * r
        disc *= gamma
        if record:
            trace[t, TR_S] = s
            trace[t, TR_B] = b
            trace[t, TR_L] = l
            trace[t, TR_AD] = ad
            trace[t, TR_AA] = aa
            trace[t, TR_O] = -1
            trace[t, TR_R] = r

        ph = phi[l - 1]
        if l - ad == 0:
            sn = 2
        elif s == 0:
            sn = 1 if aa == 1 else 0
        elif aa == 1:
            sn = 2
        else:
            sn = draw3(0.0, 1.0 - ph, ph, u[t, 2])
        if sn == 2:
            if l - ad == 0:
                reason = REASON_FINAL_STOP
            elif s == 1 and aa == 1:
                reason = REASON_ABORT
            else:
                reason = REASON_CHANCE
            return ret, t + 1, reason, istart, ilen, ndeg
        if s == 0 and sn == 1:
            istart = t + 2
        o = draw_cdf(cdf[sn], u[t, 3])
        if record:
            trace[t, TR_O] = o

        if share[3]:
            p0, p1 = q0, q1
        else:
            dm = 0.0
            if mk == 0:
                if share[1]:
                    dm = pd
                elif share[2]:
                    dm = da
                else:
                    dm = def_stop(mbk, mbth, mbw, mbcw, mbtab, l, b)
            p0, p1 = att_stop_both(mk, mth, mw, mcw, mtab, mfloor, dm, l, b)
        m0 = (1.0 - b) * (1.0 - p0)
        m1 = (1.0 - b) * p0 + b * (1.0 - p1) * (1.0 - ph)
        num1 = m1 * pmf[1, o]
        norm = m0 * pmf[0, o] + num1
        if norm <= 0.0:
            ndeg += 1
            if fallback == FALLBACK_RAISE:
                return ret, t + 1, REASON_DEGENERATE, istart, ilen, ndeg
            if fallback == FALLBACK_LIKELIHOOD:
                f = pmf[0, o] + pmf[1, o]
                if f > 0.0:
                    b = pmf[1, o] / f
        else:
            b = min(1.0, num1 / norm)
        l -= ad
        s = sn
        last_obs = o
    return ret, t_max, REASON_TRUNCATED, istart, ilen, ndeg


@njit(cache=True, parallel=True)
def batch(u, rewards, phi, pmf, cdf,
          dk, dth, dw, dcw, dtab, dparam,
          ak, ath, aw, acw, atab, afloor, abk, abth, abw, abcw, abtab,
          mk, mth, mw, mcw, mtab, mfloor, mbk, mbth, mbw, mbcw, mbtab,
          share, fallback, traces):
    n = u.shape[0]
    ret = np.empty(n)
    steps = np.empty(n, dtype=np.int64)
    reason = np.empty(n, dtype=np.int64)
    istart = np.empty(n, dtype=np.int64)
    ilen = np.empty(n, dtype=np.int64)
    ndeg = np.empty(n, dtype=np.int64)
    record = traces.shape[0] == n
    for i in prange(n):
        tr = traces[i] if record else traces[0, :1]
        r, st, rs, s0, il, nd = episode(
            u[i], rewards, phi, pmf, cdf,
            dk, dth, dw, dcw, dtab, dparam,
            ak, ath, aw, acw, atab, afloor, abk, abth, abw, abcw, abtab,
            mk, mth, mw, mcw, mtab, mfloor, mbk, mbth, mbw, mbcw, mbtab,
            share, fallback, tr)
        ret[i] = r
        steps[i] = st
        reason[i] = rs
        istart[i] = s0
        ilen[i] = il
        ndeg[i] = nd
    return ret, steps, reason, istart, ilen, ndeg
