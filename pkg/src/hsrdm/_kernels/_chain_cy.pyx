# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels.

Mirrors the numpy module `_chain_np`; see that module for the shared
conventions (linear-space transition potentials, log emissions, nan log
normalizer signalling a dead chain).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, INFINITY, isfinite

cnp.import_array()

BACKEND = "cython"

cdef double PRED_FLOOR = 1e-300
cdef double QS_FLOOR = 1e-12


def filter_pass(double[::1] init, double[:, :, ::1] trans, double[:, ::1] log_emit):
    cdef Py_ssize_t T = log_emit.shape[0]
    cdef Py_ssize_t n = log_emit.shape[1]
    filt_arr = np.empty((T, n))
    pred_arr = np.empty((T, n))
    cdef double[:, ::1] filt = filt_arr
    cdef double[:, ::1] pred = pred_arr
    cdef double log_norm = 0.0
    cdef double m, s, u, acc
    cdef Py_ssize_t t, k, i
    for k in range(n):
        pred[0, k] = init[k]
    for t in range(T):
        m = -INFINITY
        for k in range(n):
            if log_emit[t, k] > m:
                m = log_emit[t, k]
        if not isfinite(m):
            return filt_arr, pred_arr, float("nan"), t
        s = 0.0
        for k in range(n):
            u = pred[t, k] * exp(log_emit[t, k] - m)
            filt[t, k] = u
            s += u
        if s <= 0.0 or not isfinite(s):
            return filt_arr, pred_arr, float("nan"), t
        for k in range(n):
            filt[t, k] /= s
        log_norm += log(s) + m
        if t < T - 1:
            for k in range(n):
                acc = 0.0
                for i in range(n):
                    acc += trans[t, i, k] * filt[t, i]
                pred[t + 1, k] = acc
    return filt_arr, pred_arr, log_norm, -1


def smooth_pass(double[:, ::1] filt, double[:, ::1] pred, double[:, :, ::1] trans):
    cdef Py_ssize_t T = filt.shape[0]
    cdef Py_ssize_t n = filt.shape[1]
    smoothed_arr = np.empty((T, n))
    pairwise_arr = np.empty((T - 1, n, n))
    cdef double[:, ::1] smoothed = smoothed_arr
    cdef double[:, :, ::1] pairwise = pairwise_arr
    cdef double[::1] ratio = np.empty(n)
    cdef Py_ssize_t t, k, i
    cdef double s, v, rs
    cdef long zero_divs = 0
    for k in range(n):
        smoothed[T - 1, k] = filt[T - 1, k]
    for t in range(T - 2, -1, -1):
        for k in range(n):
            if pred[t + 1, k] > PRED_FLOOR:
                ratio[k] = smoothed[t + 1, k] / pred[t + 1, k]
            else:
                if smoothed[t + 1, k] > 0.0:
                    zero_divs += 1
                ratio[k] = 0.0
        s = 0.0
        for i in range(n):
            for k in range(n):
                v = filt[t, i] * trans[t, i, k] * ratio[k]
                pairwise[t, i, k] = v
                s += v
        if s > 0.0:
            for i in range(n):
                for k in range(n):
                    pairwise[t, i, k] /= s
        rs = 0.0
        for i in range(n):
            v = 0.0
            for k in range(n):
                v += pairwise[t, i, k]
            smoothed[t, i] = v
            rs += v
        if rs > 0.0:
            for i in range(n):
                smoothed[t, i] /= rs
        else:
            for i in range(n):
                smoothed[t, i] = filt[t, i]
    return smoothed_arr, pairwise_arr, zero_divs


def viterbi_path(double[::1] log_init, double[:, :, ::1] log_trans, double[:, ::1] log_emit):
    cdef Py_ssize_t T = log_emit.shape[0]
    cdef Py_ssize_t n = log_emit.shape[1]
    cdef double[::1] delta = np.empty(n)
    cdef double[::1] new_delta = np.empty(n)
    back_arr = np.empty((T - 1, n), dtype=np.int64)
    cdef long[:, ::1] back = back_arr
    path_arr = np.empty(T, dtype=np.int64)
    cdef long[::1] path = path_arr
    cdef Py_ssize_t t, k, i, best_i
    cdef double best, v
    for k in range(n):
        delta[k] = log_init[k] + log_emit[0, k]
    for t in range(1, T):
        for k in range(n):
            best = -INFINITY
            best_i = 0
            for i in range(n):
                v = delta[i] + log_trans[t - 1, i, k]
                if v > best:
                    best = v
                    best_i = i
            back[t - 1, k] = best_i
            new_delta[k] = best + log_emit[t, k]
        for k in range(n):
            delta[k] = new_delta[k]
    best = -INFINITY
    best_i = 0
    for k in range(n):
        if delta[k] > best:
            best = delta[k]
            best_i = k
    path[T - 1] = best_i
    for t in range(T - 2, -1, -1):
        path[t] = back[t, path[t + 1]]
    return path_arr


def catglm_obj_grad(double[:, ::1] base, double[:, ::1] bias, double[:, :, ::1] weights, bint want_grad):
    cdef Py_ssize_t T = bias.shape[0]
    cdef Py_ssize_t R = base.shape[0]
    cdef Py_ssize_t C = base.shape[1]
    cdef double obj = 0.0
    grad_base_arr = np.zeros((R, C)) if want_grad else None
    grad_bias_arr = np.zeros((T, C)) if want_grad else None
    cdef double[:, ::1] grad_base
    cdef double[:, ::1] grad_bias
    if want_grad:
        grad_base = grad_base_arr
        grad_bias = grad_bias_arr
    cdef double[::1] util = np.empty(C)
    cdef Py_ssize_t t, r, c
    cdef double m, s, lse, wsum, resid
    for t in range(T):
        for r in range(R):
            m = -INFINITY
            for c in range(C):
                util[c] = base[r, c] + bias[t, c]
                if util[c] > m:
                    m = util[c]
            s = 0.0
            for c in range(C):
                s += exp(util[c] - m)
            lse = log(s) + m
            wsum = 0.0
            for c in range(C):
                wsum += weights[t, r, c]
                obj += weights[t, r, c] * (util[c] - lse)
            if want_grad:
                for c in range(C):
                    resid = weights[t, r, c] - wsum * exp(util[c] - lse)
                    grad_base[r, c] += resid
                    grad_bias[t, c] += resid
    return obj, grad_base_arr, grad_bias_arr


def entity_catglm_obj_grad(double[:, :, :, ::1] bases, double[:, :, :, ::1] Ws,
                           double[:, :, ::1] feats, double[:, :, :, ::1] qz_pairs,
                           double[:, ::1] qs, cnp.uint8_t[::1] skip, long[::1] lengths,
                           bint want_grad):
    cdef Py_ssize_t J = bases.shape[0]
    cdef Py_ssize_t L = bases.shape[1]
    cdef Py_ssize_t K = bases.shape[2]
    cdef Py_ssize_t F = Ws.shape[3]
    cdef Py_ssize_t Tm1 = feats.shape[0]
    cdef double obj = 0.0
    grad_bases_arr = np.zeros((J, L, K, K)) if want_grad else None
    grad_Ws_arr = np.zeros((J, L, K, F)) if want_grad else None
    cdef double[:, :, :, ::1] grad_bases
    cdef double[:, :, :, ::1] grad_Ws
    if want_grad:
        grad_bases = grad_bases_arr
        grad_Ws = grad_Ws_arr
    cdef double[::1] bias = np.empty(K)
    cdef double[::1] util = np.empty(K)
    cdef double[::1] p = np.empty(K)
    cdef double[::1] rg = np.empty(K)
    cdef double[::1] wrow = np.empty(K)
    cdef double[::1] wsum_k = np.empty(K)
    cdef Py_ssize_t j, t, l, k, c, f, n_t
    cdef double m, s, lse, wsum, resid, sl, dot
    for j in range(J):
        n_t = lengths[j] - 1
        if n_t > Tm1:
            n_t = Tm1
        for t in range(n_t):
            if skip[t]:
                continue
            for k in range(K):
                s = 0.0
                for c in range(K):
                    s += qz_pairs[j, t, k, c]
                wsum_k[k] = s
            for l in range(L):
                sl = qs[t + 1, l]
                if sl <= QS_FLOOR:
                    continue
                for c in range(K):
                    dot = 0.0
                    for f in range(F):
                        dot += Ws[j, l, c, f] * feats[t, j, f]
                    bias[c] = dot
                    rg[c] = 0.0
                for k in range(K):
                    wsum = wsum_k[k] * sl
                    if wsum <= QS_FLOOR:
                        continue
                    m = -INFINITY
                    for c in range(K):
                        util[c] = bases[j, l, k, c] + bias[c]
                        if util[c] > m:
                            m = util[c]
                    s = 0.0
                    for c in range(K):
                        p[c] = exp(util[c] - m)
                        s += p[c]
                    lse = log(s) + m
                    dot = 0.0
                    for c in range(K):
                        wrow[c] = qz_pairs[j, t, k, c] * sl
                        dot += wrow[c] * (util[c] - lse)
                    obj += dot
                    if want_grad:
                        for c in range(K):
                            resid = wrow[c] - wsum * (p[c] / s)
                            grad_bases[j, l, k, c] += resid
                            rg[c] += resid
                if want_grad:
                    for c in range(K):
                        if rg[c] != 0.0:
                            for f in range(F):
                                grad_Ws[j, l, c, f] += rg[c] * feats[t, j, f]
    return obj, grad_bases_arr, grad_Ws_arr


def entity_log_trans_tensor(double[:, :, ::1] base, double[:, :, ::1] W,
                            double[:, ::1] feats, double[:, :, :, ::1] out):
    cdef Py_ssize_t Tm1 = feats.shape[0]
    cdef Py_ssize_t L = base.shape[0]
    cdef Py_ssize_t K = base.shape[1]
    cdef Py_ssize_t F = W.shape[2]
    cdef double[::1] bias = np.empty(K)
    cdef Py_ssize_t t, l, k, c, f
    cdef double m, s, lse
    for t in range(Tm1):
        for l in range(L):
            for c in range(K):
                bias[c] = 0.0
                for f in range(F):
                    bias[c] += W[l, c, f] * feats[t, f]
            for k in range(K):
                m = -INFINITY
                for c in range(K):
                    out[t, l, k, c] = base[l, k, c] + bias[c]
                    if out[t, l, k, c] > m:
                        m = out[t, l, k, c]
                s = 0.0
                for c in range(K):
                    s += exp(out[t, l, k, c] - m)
                lse = log(s) + m
                for c in range(K):
                    out[t, l, k, c] -= lse
    return np.asarray(out)
