"""Compiled inner loop of the branch simulator.

State is an int8 table S[branch, column] of symbol codes. Address qutrits use
0=W, 1=L, 2=R; qubits (data, bus, and qubit-scheme addresses) use 0, 1,
2=+, 3=-. Column types: -1 bus, 0 qutrit address, 1 tree qubit.

W[col, s] is the total proposal weight (omega) of branches holding symbol s
in tree column col; damping jumps are proposed from it.
"""

from __future__ import annotations

import numpy as np
from numba import njit

OP_ADDR_IN, OP_BUS, OP_EXCH, OP_ROUTE, OP_ISWAP, OP_COPY = 0, 1, 2, 3, 4, 5

DONE, NEED_SPLIT, NEED_ROOM = 0, 1, 2

# H on qubit symbols: 0->+, 1->-, +->0, -->1
_H = np.array([2, 3, 0, 1], dtype=np.int8)


@njit(cache=True)
def seed(value):
    np.random.seed(value)


@njit(cache=True)
def _set(S, rate, W, omega, coltype, delta, b, col, new):
    old = S[b, col]
    if old == new:
        return
    t = coltype[col]
    if t >= 0:
        rate[b] += delta[t, new] - delta[t, old]
        W[col, old] -= omega[b]
        W[col, new] += omega[b]
    S[b, col] = new


@njit(cache=True)
def _swap(S, rate, W, omega, coltype, delta, b, c1, c2):
    s1 = S[b, c1]
    s2 = S[b, c2]
    if s1 != s2:
        _set(S, rate, W, omega, coltype, delta, b, c1, s2)
        _set(S, rate, W, omega, coltype, delta, b, c2, s1)


@njit(cache=True)
def _x_data(S, amp, rate, W, omega, coltype, delta, b, col):
    s = S[b, col]
    if s == 0:
        _set(S, rate, W, omega, coltype, delta, b, col, 1)
    elif s == 1:
        _set(S, rate, W, omega, coltype, delta, b, col, 0)
    elif s == 3:
        amp[b] = -amp[b]


@njit(cache=True)
def _bus_move(S, rate, W, omega, coltype, delta, b, digit, direction, c, dbus0, tree0, qutrit):
    for bank in range(c):
        bcol = dbus0 + digit + bank
        tcol = tree0 + 1 + bank
        if not qutrit and direction == 0:
            S[b, bcol] = _H[S[b, bcol]]
        _swap(S, rate, W, omega, coltype, delta, b, bcol, tcol)
        if not qutrit and direction == 1:
            S[b, bcol] = _H[S[b, bcol]]


@njit(cache=True)
def _needs_split(S, nb, code, layer, n, c, tree0, qutrit, out):
    """Find a qubit-scheme control holding +/- for a routing or data copy."""
    if qutrit or (code != OP_ROUTE and code != OP_COPY):
        return False
    l = layer if code == OP_ROUTE else n - 1
    base = (1 << l) - 1
    for b in range(nb):
        for p in range(1 << l):
            col = tree0 + (base + p) * (1 + c)
            if S[b, col] >= 2:
                out[0] = b
                out[1] = col
                return True
    return False


@njit(cache=True)
def _apply_op(S, amp, rate, W, omega, high, nb, code, a1, a2, a3, a4, coltype, delta, memory,
              n, c, m, k, qutrit):
    abus0 = m
    dbus0 = m + n
    tree0 = m + n + k
    stride = 1 + c
    if code == OP_ADDR_IN:
        bcol = abus0 + a1
        for b in range(nb):
            if S[b, bcol] == 1:
                _x_data(S, amp, rate, W, omega, coltype, delta, b, tree0 + 1)
    elif code == OP_BUS:
        for b in range(nb):
            if a2 < 0 or high[b] == a2:
                _bus_move(S, rate, W, omega, coltype, delta, b, a1, a3, c, dbus0, tree0, qutrit)
    elif code == OP_EXCH:
        for b in range(nb):
            if a2 < 0 or high[b] == a2:
                _bus_move(S, rate, W, omega, coltype, delta, b, a1, 1, c, dbus0, tree0, qutrit)
            if a4 < 0 or high[b] == a4:
                _bus_move(S, rate, W, omega, coltype, delta, b, a3, 0, c, dbus0, tree0, qutrit)
    elif code == OP_ROUTE:
        base = (1 << a1) - 1
        cbase = (1 << (a1 + 1)) - 1
        left_sym = 1 if qutrit else 0
        right_sym = 2 if qutrit else 1
        for b in range(nb):
            for p in range(1 << a1):
                v = base + p
                a = S[b, tree0 + v * stride]
                if a == left_sym:
                    child = cbase + 2 * p
                elif a == right_sym:
                    child = cbase + 2 * p + 1
                else:
                    continue
                for bank in range(c):
                    _swap(S, rate, W, omega, coltype, delta, b,
                          tree0 + v * stride + 1 + bank, tree0 + child * stride + 1 + bank)
    elif code == OP_ISWAP:
        base = (1 << a1) - 1
        pbase = (1 << (a1 - 1)) - 1 if a1 > 0 else 0
        for b in range(nb):
            for p in range(1 << a1):
                acol = tree0 + (base + p) * stride
                dcol = acol + 1
                if not qutrit:
                    _swap(S, rate, W, omega, coltype, delta, b, acol, dcol)
                    continue
                if a1 > 0:
                    need = 1 if p % 2 == 0 else 2
                    if S[b, tree0 + (pbase + p // 2) * stride] != need:
                        continue
                a = S[b, acol]
                d = S[b, dcol]
                if a == 0 and d == 0:
                    _set(S, rate, W, omega, coltype, delta, b, acol, 1)
                elif a == 1 and d == 0:
                    _set(S, rate, W, omega, coltype, delta, b, acol, 0)
                elif a == 0 and d == 1:
                    _set(S, rate, W, omega, coltype, delta, b, acol, 2)
                    _set(S, rate, W, omega, coltype, delta, b, dcol, 0)
                elif a == 2 and d == 0:
                    _set(S, rate, W, omega, coltype, delta, b, acol, 0)
                    _set(S, rate, W, omega, coltype, delta, b, dcol, 1)
    elif code == OP_COPY:
        base = (1 << (n - 1)) - 1
        offset = (a2 if a2 >= 0 else 0) << n
        for b in range(nb):
            if a2 >= 0 and high[b] != a2:
                continue
            for p in range(1 << (n - 1)):
                v = base + p
                a = S[b, tree0 + v * stride]
                if qutrit:
                    if a == 0:
                        continue
                    side = a - 1
                else:
                    side = a
                cell = offset + 2 * p + side
                for bank in range(c):
                    if memory[cell, a1 + bank] == 0:
                        continue
                    dcol = tree0 + v * stride + 1 + bank
                    if qutrit:
                        _x_data(S, amp, rate, W, omega, coltype, delta, b, dcol)
                    else:
                        s = S[b, dcol]
                        if s == 1:
                            amp[b] = -amp[b]
                        elif s == 2:
                            _set(S, rate, W, omega, coltype, delta, b, dcol, 3)
                        elif s == 3:
                            _set(S, rate, W, omega, coltype, delta, b, dcol, 2)


@njit(cache=True)
def _apply_jump(S, amp, logw, rate, W, omega, coltype, delta, jump_new, jump_amp, nb, col, j):
    typ = coltype[col]
    for b in range(nb):
        s = S[b, col]
        logw[b] -= delta[typ, s]
        amp[b] *= jump_amp[typ, j, s]
        _set(S, rate, W, omega, coltype, delta, b, col, jump_new[typ, j, s])


@njit(cache=True)
def reweigh(S, amp, logw, omega, W, coltype, nb):
    """Reset omega to the normalized branch weights and rebuild W. Returns the total."""
    total = 0.0
    for b in range(nb):
        omega[b] = (amp[b].real ** 2 + amp[b].imag ** 2) * np.exp(2.0 * logw[b])
        total += omega[b]
    W[:, :] = 0.0
    if total <= 0.0:
        return total
    for b in range(nb):
        omega[b] /= total
        for col in range(coltype.shape[0]):
            if coltype[col] >= 0:
                W[col, S[b, col]] += omega[b]
    return total


@njit(cache=True)
def _site_probs(W, coltype, sites, gamma, q):
    """Per-site jump proposal probability; returns sum of log(1 - q) over live sites."""
    logsum = 0.0
    for i in range(sites.shape[0]):
        col = sites[i]
        if coltype[col] == 0:
            x = W[col, 1] + W[col, 2]
        else:
            x = W[col, 1] + 0.5 * (W[col, 2] + W[col, 3])
        x = gamma * x
        if x < 1e-15:
            x = 0.0
        q[i] = x
        if x > 0.0:
            logsum += np.log1p(-x)
    return logsum


@njit(cache=True)
def _jump_level(W, col, typ, u):
    """Pick the lowered level for a jump at col given a uniform u."""
    if typ != 0:
        return 1
    w1 = W[col, 1]
    w2 = W[col, 2]
    return 1 if u * (w1 + w2) < w1 else 2


@njit(cache=True)
def run_kernel(S, amp, logw, rate, high, omega, W, glog, nb,
               ops, tick_ptr, memory, n, c, m, k, qutrit,
               coltype, delta, weyl_new, weyl_ph, jump_new, jump_amp,
               ev_tick, ev_chan, ev_col, ev_idx, sites,
               ctl, gamma, dynamic, jrec, jn, qbuf, hazard,
               state_out, split_out):
    """Advance the trajectory; see ``ctl`` layout below.

    ctl = (t_start, op_start, ev_start, phase_start, t_stop, jump_from, force_pos).
    Phase 0 runs ops, phase 1 applies Weyl events, phase 2 the damping layer.
    With ``dynamic`` jumps are proposed from W at ticks >= jump_from (a jump is
    forced at site index force_pos of tick jump_from when force_pos >= 0);
    otherwise jumps come from the event list. Realized jumps are appended to
    jrec as (tick, site index, level). hazard[t] receives sum log(1 - q).
    """
    t_start, op_start, e, phase0, t_stop, jump_from, force_pos = (
        ctl[0], ctl[1], ctl[2], ctl[3], ctl[4], ctl[5], ctl[6])
    n_ev = ev_tick.shape[0]
    damping = gamma > 0.0
    for t in range(t_start, t_stop):
        phase = phase0 if t == t_start else 0
        if phase == 0:
            first = op_start if t == t_start else tick_ptr[t]
            for oi in range(first, tick_ptr[t + 1]):
                code = ops[oi, 0]
                if _needs_split(S, nb, code, ops[oi, 1], n, c, m + n + k, qutrit, split_out):
                    state_out[0] = t
                    state_out[1] = oi
                    state_out[2] = e
                    state_out[3] = 0
                    return NEED_SPLIT
                _apply_op(S, amp, rate, W, omega, high, nb, code, ops[oi, 1], ops[oi, 2],
                          ops[oi, 3], ops[oi, 4], coltype, delta, memory, n, c, m, k, qutrit)
            phase = 1
        if phase == 1:
            while e < n_ev and ev_tick[e] == t and ev_chan[e] == 0:
                col = ev_col[e]
                typ = coltype[col]
                idx = ev_idx[e]
                for b in range(nb):
                    s = S[b, col]
                    amp[b] *= weyl_ph[typ, idx, s]
                    _set(S, rate, W, omega, coltype, delta, b, col, weyl_new[typ, idx, s])
                e += 1
            phase = 2
        if not damping:
            continue
        if dynamic and jn[0] + sites.shape[0] > jrec.shape[0]:
            state_out[0] = t
            state_out[1] = tick_ptr[t + 1]
            state_out[2] = e
            state_out[3] = 2
            return NEED_ROOM
        for b in range(nb):
            logw[b] += rate[b]
        if not dynamic:
            while e < n_ev and ev_tick[e] == t:
                _apply_jump(S, amp, logw, rate, W, omega, coltype, delta, jump_new, jump_amp,
                            nb, ev_col[e], ev_idx[e])
                e += 1
            continue
        logsum = _site_probs(W, coltype, sites, gamma, qbuf)
        hazard[t] = logsum
        glog[0] -= 0.5 * logsum
        if t < jump_from:
            continue
        start = 0
        jumped = False
        if t == jump_from and force_pos >= 0:
            start = force_pos
        else:
            # one draw decides whether any site jumps this tick
            if np.random.random() >= -np.expm1(logsum):
                continue
            # first jumping site, conditioned on at least one
            u = np.random.random() * -np.expm1(logsum)
            surv = 1.0
            start = -1
            for i in range(sites.shape[0]):
                if qbuf[i] == 0.0:
                    continue
                start = i
                mass = surv * qbuf[i]
                if u < mass:
                    break
                u -= mass
                surv *= 1.0 - qbuf[i]
            if start < 0:
                continue
        for i in range(start, sites.shape[0]):
            q = qbuf[i]
            if q == 0.0:
                continue
            if i != start and np.random.random() >= q:
                continue
            col = sites[i]
            typ = coltype[col]
            j = _jump_level(W, col, typ, np.random.random())
            if typ == 0:
                qj = gamma * W[col, j]
            else:
                qj = q
            # undo the site's no-jump normalization, apply sqrt(gamma / q_j)
            glog[0] += 0.5 * np.log1p(-q) + 0.5 * np.log(gamma / qj)
            _apply_jump(S, amp, logw, rate, W, omega, coltype, delta, jump_new, jump_amp,
                        nb, col, j)
            jrec[jn[0], 0] = t
            jrec[jn[0], 1] = i
            jrec[jn[0], 2] = j
            jn[0] += 1
            jumped = True
        if jumped:
            if reweigh(S, amp, logw, omega, W, coltype, nb) <= 0.0:
                state_out[0] = t_stop
                state_out[2] = e
                return DONE
    state_out[0] = t_stop
    state_out[2] = e
    return DONE
