"""Jitted slot arithmetic shared by `dynamics.step` and the fast simulation loop.

Uniform layout per slot (one row per slot for each named stream):
  request arrivals  sum_r draws_r       (u < p counts an arrival)
  link arrivals     sum_l draws_l
  successes         R x M, M = max batch (first n_r entries used, u < gamma_r)
  decoherence       L x B               (first Y_l entries used, u >= d_l survives)
  policy            1                   (static randomized policies only)
"""

import numpy as np
from numba import njit

DETERMINISTIC = 2

MODE_PYTHON = -1
MODE_NEVER = 0
MODE_MAXWEIGHT = 1
MODE_TABLE = 2
MODE_PRIORITY = 3
MODE_PRIORITY_RESERVE = 4
MODE_STATIC = 5


@njit(cache=True)
def stream_increments(u, kind, count, prob, period, offset, start, t, out):
    for i in range(kind.shape[0]):
        if t % period[i] != offset[i]:
            out[i] = 0
        elif kind[i] == DETERMINISTIC:
            out[i] = count[i]
        else:
            c = 0
            for j in range(count[i]):
                if u[start[i] + j] < prob[i]:
                    c += 1
            out[i] = c


@njit(cache=True)
def capped_add(z, a, B, w):
    for l in range(z.shape[0]):
        v = z[l] + a[l]
        w[l] = v if v < B else B


@njit(cache=True)
def lle_index(w, B):
    idx = 0
    for l in range(w.shape[0]):
        idx = idx * (B + 1) + w[l]
    return idx


@njit(cache=True)
def finish_slot(q, w, n, psi, gamma, decoh, succ_u, dec_u, req_a, nhat, sigma, y, q_next, z_next):
    """Consume LLEs, draw successes, update queues, apply decoherence (in this order)."""
    R, L = psi.shape
    for l in range(L):
        s = 0
        for r in range(R):
            s += n[r] * psi[r, l]
        sigma[l] = s
        y[l] = w[l] - s
    for r in range(R):
        c = 0
        for j in range(n[r]):
            if succ_u[r, j] < gamma[r]:
                c += 1
        nhat[r] = c
        v = q[r] - c
        q_next[r] = (v if v > 0 else 0) + req_a[r]
    for l in range(L):
        c = 0
        for j in range(y[l]):
            if dec_u[l, j] >= decoh[l]:
                c += 1
        z_next[l] = c


@njit(cache=True)
def _maxweight(q, w, box_n, box_sigma, out):
    # box is lexicographically ascending; scanning downwards with strict '>' keeps the largest n on ties
    best = -1
    best_weight = -1
    K, R = box_n.shape
    L = box_sigma.shape[1]
    for k in range(K - 1, -1, -1):
        ok = True
        for l in range(L):
            if box_sigma[k, l] > w[l]:
                ok = False
                break
        if not ok:
            continue
        weight = 0
        for r in range(R):
            if box_n[k, r] > q[r]:
                ok = False
                break
            weight += q[r] * box_n[k, r]
        if ok and weight > best_weight:
            best_weight = weight
            best = k
    for r in range(R):
        out[r] = box_n[best, r]


@njit(cache=True)
def _priority(q, w, psi, max_batch, order, reserve, out):
    R, L = psi.shape
    avail = w.copy()
    blocked = np.zeros(L, dtype=np.bool_)
    for r in range(R):
        out[r] = 0
    for i in range(order.shape[0]):
        r = order[i]
        k = min(q[r], max_batch[r])
        for l in range(L):
            if psi[r, l]:
                if blocked[l]:
                    k = 0
                elif avail[l] < k:
                    k = avail[l]
        out[r] = k
        for l in range(L):
            if psi[r, l]:
                avail[l] -= k
        if reserve and q[r] > k:
            # an unmet higher-priority queue holds on to its links
            for l in range(L):
                if psi[r, l]:
                    blocked[l] = True


@njit(cache=True)
def choose(mode, q, w, t, pol_u, table, cum, act, order, box_n, box_sigma, psi, max_batch, nphase, B, out):
    if mode == MODE_NEVER:
        for r in range(out.shape[0]):
            out[r] = 0
    elif mode == MODE_MAXWEIGHT:
        _maxweight(q, w, box_n, box_sigma, out)
    elif mode == MODE_TABLE:
        s = (t % nphase) * (B + 1) ** w.shape[0] + lle_index(w, B)
        for r in range(out.shape[0]):
            out[r] = table[s, r]
    elif mode == MODE_PRIORITY:
        _priority(q, w, psi, max_batch, order, False, out)
    elif mode == MODE_PRIORITY_RESERVE:
        _priority(q, w, psi, max_batch, order, True, out)
    elif mode == MODE_STATIC:
        s = (t % nphase) * (B + 1) ** w.shape[0] + lle_index(w, B)
        k = act[s, 0]
        for j in range(cum.shape[1]):
            if act[s, j] < 0:
                break
            k = act[s, j]
            if pol_u < cum[s, j]:
                break
        for r in range(out.shape[0]):
            out[r] = box_n[k, r]


@njit(cache=True, nogil=True)
def run_slots(
    t0, nslots, q, z, dep_r, dep_l, arr_r, arr_l,
    psi, gamma, decoh, B, max_batch,
    rk, rc, rp, rper, roff, rst,
    lk, lc, lp, lper, loff, lst,
    req_u, link_u, succ_u, dec_u, pol_u,
    mode, table, cum, act, order, box_n, box_sigma, nphase,
    stride, rec_q, rec_z, rec_dr, rec_dl,
    full, f_n, f_nhat, f_ar, f_al, f_y,
):
    """Advance `nslots` slots starting at absolute slot t0; state arrays are updated in place.

    Uniform rows are indexed from 0 for slot t0. Records are written at t+1 whenever
    (t+1) % stride == 0; per-slot arrays are filled when `full` is set.
    """
    R, L = psi.shape
    a_l = np.zeros(L, dtype=np.int64)
    a_r = np.zeros(R, dtype=np.int64)
    w = np.zeros(L, dtype=np.int64)
    n = np.zeros(R, dtype=np.int64)
    nhat = np.zeros(R, dtype=np.int64)
    sigma = np.zeros(L, dtype=np.int64)
    y = np.zeros(L, dtype=np.int64)
    q_next = np.zeros(R, dtype=np.int64)
    z_next = np.zeros(L, dtype=np.int64)
    for i in range(nslots):
        t = t0 + i
        stream_increments(link_u[i], lk, lc, lp, lper, loff, lst, t, a_l)
        capped_add(z, a_l, B, w)
        choose(mode, q, w, t, pol_u[i, 0], table, cum, act, order, box_n, box_sigma, psi, max_batch, nphase, B, n)
        stream_increments(req_u[i], rk, rc, rp, rper, roff, rst, t, a_r)
        finish_slot(q, w, n, psi, gamma, decoh, succ_u[i], dec_u[i], a_r, nhat, sigma, y, q_next, z_next)
        for r in range(R):
            q[r] = q_next[r]
            dep_r[r] += nhat[r]
            arr_r[r] += a_r[r]
        for l in range(L):
            z[l] = z_next[l]
            dep_l[l] += sigma[l]
            arr_l[l] += a_l[l]
        if full:
            for r in range(R):
                f_n[t, r] = n[r]
                f_nhat[t, r] = nhat[r]
                f_ar[t, r] = a_r[r]
            for l in range(L):
                f_al[t, l] = a_l[l]
                f_y[t, l] = y[l]
        if (t + 1) % stride == 0:
            k = (t + 1) // stride
            for r in range(R):
                rec_q[k, r] = q[r]
                rec_dr[k, r] = dep_r[r]
            for l in range(L):
                rec_z[k, l] = z[l]
                rec_dl[k, l] = dep_l[l]
