"""Numpy implementations of the hot kernels.

Same call signatures as the compiled extension; selected automatically
when the extension is unavailable (or when HSRDM_PURE_PYTHON=1).

Conventions shared with the compiled kernels:

* transition potentials are passed in linear space as ``trans[t, i, j]``
  (from-state ``i`` at time ``t`` to to-state ``j`` at ``t+1``) after a
  per-timestep scalar shift handled by the caller; rows need not be
  normalized,
* emissions are passed as log potentials ``log_emit[t, k]``,
* a dead chain (zero posterior mass at some step) is signalled by
  returning ``nan`` as the log normalizer.
"""

import numpy as np

BACKEND = "numpy"

_PRED_FLOOR = 1e-300


def filter_pass(init, trans, log_emit):
    """Forward pass: per-step measurement and time updates.

    Returns (filtered [T,n], predicted [T,n], log_norm, n_dead) where
    probabilities are normalized per step and ``log_norm`` accumulates
    the per-step normalizers (nan if the chain dies).
    """
    T, n = log_emit.shape
    filt = np.empty((T, n))
    pred = np.empty((T, n))
    pred[0] = init
    log_norm = 0.0
    for t in range(T):
        m = log_emit[t].max()
        if not np.isfinite(m):
            return filt, pred, np.nan, t
        u = pred[t] * np.exp(log_emit[t] - m)
        s = u.sum()
        if s <= 0.0 or not np.isfinite(s):
            return filt, pred, np.nan, t
        filt[t] = u / s
        log_norm += np.log(s) + m
        if t < T - 1:
            pred[t + 1] = trans[t].T @ filt[t]
    return filt, pred, log_norm, -1


def smooth_pass(filt, pred, trans):
    """Backward pass producing smoothed unary and adjacent-pairwise marginals.

    Uses the ratio recursion; predicted probabilities below the floor are
    treated as exact zeros and the corresponding quotient terms dropped,
    with the affected rows renormalized.  Returns
    (smoothed [T,n], pairwise [T-1,n,n], n_zero_divisions).
    """
    T, n = filt.shape
    smoothed = np.empty((T, n))
    pairwise = np.empty((T - 1, n, n))
    smoothed[T - 1] = filt[T - 1]
    zero_divs = 0
    for t in range(T - 2, -1, -1):
        p = pred[t + 1]
        ratio = np.zeros(n)
        alive = p > _PRED_FLOOR
        dropped = np.count_nonzero(~alive & (smoothed[t + 1] > 0.0))
        zero_divs += int(dropped)
        ratio[alive] = smoothed[t + 1][alive] / p[alive]
        pair = (filt[t][:, None] * trans[t]) * ratio[None, :]
        s = pair.sum()
        if s > 0.0:
            pair /= s
        pairwise[t] = pair
        row = pair.sum(axis=1)
        rs = row.sum()
        smoothed[t] = row / rs if rs > 0.0 else filt[t]
    return smoothed, pairwise, zero_divs


def viterbi_path(log_init, log_trans, log_emit):
    """Max-product decoding; ties break toward the lower state index."""
    T, n = log_emit.shape
    delta = log_init + log_emit[0]
    back = np.empty((T - 1, n), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + log_trans[t - 1]
        back[t - 1] = scores.argmax(axis=0)
        delta = scores[back[t - 1], np.arange(n)] + log_emit[t]
    path = np.empty(T, dtype=np.int64)
    path[T - 1] = int(delta.argmax())
    for t in range(T - 2, -1, -1):
        path[t] = back[t, path[t + 1]]
    return path


def catglm_obj_grad(base, bias, weights, want_grad):
    """Weighted softmax cross-entropy for one categorical GLM block.

    Utilities are ``base[r, c] + bias[t, c]``; ``weights[t, r, c]`` are
    the posterior weights attached to each (previous row, next column)
    event at time t.  Returns (obj, grad_base, grad_bias).
    """
    T = bias.shape[0]
    util = base[None, :, :] + bias[:, None, :]
    m = util.max(axis=2, keepdims=True)
    expu = np.exp(util - m)
    lse = np.log(expu.sum(axis=2, keepdims=True)) + m
    logp = util - lse
    obj = float((weights * logp).sum())
    if not want_grad:
        return obj, None, None
    probs = expu / expu.sum(axis=2, keepdims=True)
    resid = weights - weights.sum(axis=2, keepdims=True) * probs
    grad_base = resid.sum(axis=0)
    grad_bias = resid.sum(axis=1)
    return obj, grad_base, grad_bias


def entity_catglm_obj_grad(bases, Ws, feats, qz_pairs, qs, skip, lengths, want_grad):
    """Fused objective/gradient over every (entity, system-state) block.

    bases:    [J, L, K, K] transition utility matrices
    Ws:       [J, L, K, F] recurrence weights (next-state rows)
    feats:    [T-1, J, F]  per-entity features for the transition into t+1
    qz_pairs: [J, T-1, K, K] pairwise entity posteriors
    qs:       [T, L]       system unary posteriors
    skip:     [T-1] bool   transitions to skip (example boundaries)
    lengths:  [J] int      entity chain lengths (transition t used iff t+1 < length)

    Returns (obj, grad_bases, grad_Ws).
    """
    J, L, K, F = Ws.shape
    Tm1 = feats.shape[0]
    obj = 0.0
    grad_bases = np.zeros_like(bases) if want_grad else None
    grad_Ws = np.zeros_like(Ws) if want_grad else None
    for j in range(J):
        n_t = min(Tm1, lengths[j] - 1)
        if n_t <= 0:
            continue
        use = ~skip[:n_t]
        if not use.any():
            continue
        f = feats[:n_t, j][use]
        w = qz_pairs[j, :n_t][use]
        scale = qs[1 : n_t + 1][use]
        for l in range(L):
            sl = scale[:, l]
            live = sl > 1e-12
            if not live.any():
                continue
            bias = f[live] @ Ws[j, l].T
            o, gb, gbias = catglm_obj_grad(bases[j, l], bias, w[live] * sl[live, None, None], want_grad)
            obj += o
            if want_grad:
                grad_bases[j, l] += gb
                grad_Ws[j, l] += gbias.T @ f[live]
    return obj, grad_bases, grad_Ws


def entity_log_trans_tensor(base, W, feats, out):
    """Fill ``out[t, l, k, k']`` with normalized log transition
    probabilities for one entity: softmax over k' of
    base[l, k, k'] + (W[l] @ feats[t])[k']."""
    Tm1 = feats.shape[0]
    bias = np.einsum("tf,lkf->tlk", feats, W)
    util = base[None, :, :, :] + bias[:, :, None, :]
    m = util.max(axis=3, keepdims=True)
    expu = np.exp(util - m)
    out[:] = util - (np.log(expu.sum(axis=3, keepdims=True)) + m)
    return out
