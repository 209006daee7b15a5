"""Hot inner loops, each in a numba flavour and a vectorised numpy flavour.

The public functions at the bottom dispatch on :func:`sliver._accel.get_backend`.
Both flavours must agree exactly; ``tests/test_kernels.py`` holds them to that.

Label codes used throughout: 1 positive, 0 negative, -1 absent.
Missing timestamps are encoded as -1.
"""

from __future__ import annotations

import numpy as np

from ._accel import get_backend, njit

POS, NEG, ABSENT = 1, 0, -1


# ---------------------------------------------------------------------------
# fixed-window labelling


def _fixed_numpy(start, emit, click, follow, like, window):
    n = start.shape[0]
    mu = start + window

    def inside(y):
        return (y >= 0) & (y > start) & (y < mu)

    c_in, f_in, l_in = inside(click), inside(follow), inside(like)
    labels = np.empty((n, 3), dtype=np.int8)
    labels[:, 0] = np.where(c_in, POS, NEG)
    labels[:, 1] = np.where(f_in, POS, NEG)
    labels[:, 2] = np.where(l_in, POS, np.where(c_in, NEG, ABSENT))
    labels[~emit] = ABSENT
    return labels, mu


@njit(cache=True)
def _fixed_numba(start, emit, click, follow, like, window):
    n = start.shape[0]
    labels = np.full((n, 3), -1, dtype=np.int8)
    mu = start + window
    for i in range(n):
        if not emit[i]:
            continue
        s = start[i]
        m = mu[i]
        c_in = click[i] >= 0 and s < click[i] < m
        labels[i, 0] = 1 if c_in else 0
        labels[i, 1] = 1 if (follow[i] >= 0 and s < follow[i] < m) else 0
        if like[i] >= 0 and s < like[i] < m:
            labels[i, 2] = 1
        elif c_in:
            labels[i, 2] = 0
    return labels, mu


# ---------------------------------------------------------------------------
# sliding-window labelling


def _window_k(ts, t_uni, window):
    return np.where(ts >= 0, (ts - t_uni) // window + 1, -1)


def _sliver_numpy(click, follow, like, exit_, censored, window, t_uni):
    n = click.shape[0]
    kc = _window_k(click, t_uni, window)
    kf = _window_k(follow, t_uni, window)
    kl = _window_k(like, t_uni, window)
    ke = np.where(censored | (exit_ < 0), -1, _window_k(exit_, t_uni, window))

    sess = np.repeat(np.arange(n, dtype=np.int64), 4)
    k = np.stack([kc, kf, kl, ke], axis=1).ravel()
    keep = k >= 0
    sess, k = sess[keep], k[keep]
    order = np.lexsort((k, sess))
    sess, k = sess[order], k[order]
    if sess.size:
        first = np.ones(sess.size, dtype=bool)
        first[1:] = (sess[1:] != sess[:-1]) | (k[1:] != k[:-1])
        sess, k = sess[first], k[first]

    mu = t_uni + k * window
    exit_here = ke[sess] == k
    labels = np.empty((sess.size, 3), dtype=np.int8)
    labels[:, 0] = np.where(kc[sess] == k, POS, np.where((click[sess] < 0) & exit_here, NEG, ABSENT))
    labels[:, 1] = np.where(kf[sess] == k, POS, np.where((follow[sess] < 0) & exit_here, NEG, ABSENT))
    c = click[sess]
    like_neg = (like[sess] < 0) & (c >= 0) & (c < mu) & exit_here
    labels[:, 2] = np.where(kl[sess] == k, POS, np.where(like_neg, NEG, ABSENT))

    live = (labels != ABSENT).any(axis=1)
    return sess[live], k[live], mu[live], labels[live]


@njit(cache=True)
def _sliver_numba(click, follow, like, exit_, censored, window, t_uni):
    n = click.shape[0]
    cap = 4 * n
    out_sess = np.empty(cap, dtype=np.int64)
    out_k = np.empty(cap, dtype=np.int64)
    out_labels = np.empty((cap, 3), dtype=np.int8)
    cand = np.empty(4, dtype=np.int64)
    m = 0
    for i in range(n):
        kc = (click[i] - t_uni) // window + 1 if click[i] >= 0 else -1
        kf = (follow[i] - t_uni) // window + 1 if follow[i] >= 0 else -1
        kl = (like[i] - t_uni) // window + 1 if like[i] >= 0 else -1
        ke = -1
        if exit_[i] >= 0 and not censored[i]:
            ke = (exit_[i] - t_uni) // window + 1
        cand[0] = kc
        cand[1] = kf
        cand[2] = kl
        cand[3] = ke
        # insertion sort; ndarray.sort is slow on four elements
        for a in range(1, 4):
            x = cand[a]
            b = a - 1
            while b >= 0 and cand[b] > x:
                cand[b + 1] = cand[b]
                b -= 1
            cand[b + 1] = x
        prev = -1
        for j in range(4):
            k = cand[j]
            if k < 0 or k == prev:
                continue
            prev = k
            mu = t_uni + k * window
            lc = -1
            if kc == k:
                lc = 1
            elif click[i] < 0 and ke == k:
                lc = 0
            lf = -1
            if kf == k:
                lf = 1
            elif follow[i] < 0 and ke == k:
                lf = 0
            ll = -1
            if kl == k:
                ll = 1
            elif like[i] < 0 and click[i] >= 0 and click[i] < mu and ke == k:
                ll = 0
            if lc == -1 and lf == -1 and ll == -1:
                continue
            out_sess[m] = i
            out_k[m] = k
            out_labels[m, 0] = lc
            out_labels[m, 1] = lf
            out_labels[m, 2] = ll
            m += 1
    k_out = out_k[:m].copy()
    return out_sess[:m].copy(), k_out, t_uni + k_out * window, out_labels[:m].copy()


# ---------------------------------------------------------------------------
# AUC (Mann-Whitney with half credit for ties)


def _auc_numpy(scores, labels):
    keep = (labels == 0) | (labels == 1)
    scores, labels = scores[keep], labels[keep]
    if scores.size == 0:
        return 0, 0, 0
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(np.int64)
    n = s.size
    starts = np.concatenate(([0], np.flatnonzero(np.diff(s)) + 1))
    pos = np.add.reduceat(y, starts)
    cnt = np.diff(np.append(starts, n))
    neg = cnt - pos
    neg_below = np.cumsum(neg) - neg
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    twice_wins = 2 * int((pos * neg_below).sum()) + int((pos * neg).sum())
    return twice_wins, n_pos, n_neg


@njit(cache=True)
def _auc_numba(scores, labels, order):
    n = scores.shape[0]
    twice_wins = 0
    neg_below = 0
    n_pos = 0
    i = 0
    while i < n:
        j = i
        p = 0
        q = 0
        v = scores[order[i]]
        while j < n and scores[order[j]] == v:
            lab = labels[order[j]]
            if lab == 1:
                p += 1
            elif lab == 0:
                q += 1
            j += 1
        twice_wins += 2 * p * neg_below + p * q
        neg_below += q
        n_pos += p
        i = j
    return twice_wins, n_pos, neg_below


# ---------------------------------------------------------------------------
# embedding-gradient scatter


def _scatter_numpy(out, idx, vals):
    np.add.at(out, idx, vals)


@njit(cache=True)
def _scatter_numba(out, idx, vals):
    d = out.shape[1]
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(d):
            out[r, j] += vals[i, j]


# ---------------------------------------------------------------------------
# fused Adam update


def _adam_numpy(param, grad, m, v, lr, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * (grad * grad)
    param -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


@njit(cache=True)
def _adam_numba(param, grad, m, v, lr, b1, b2, eps, bc1, bc2):
    step = lr / bc1
    for i in range(param.shape[0]):
        g = grad[i]
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * (g * g)
        m[i] = mi
        v[i] = vi
        param[i] -= step * mi / (np.sqrt(vi / bc2) + eps)


# ---------------------------------------------------------------------------
# click-history gather


def _history_numpy(click_key, click_anchor, user_start, session_key, cap):
    end = np.searchsorted(click_key, session_key, side="left")
    start = np.maximum(user_start, end - cap)
    idx = start[:, None] + np.arange(cap)[None, :]
    valid = idx < end[:, None]
    if click_anchor.size == 0:
        return np.full((session_key.size, cap), -1, dtype=np.int64)
    picked = click_anchor[np.minimum(idx, click_anchor.size - 1)]
    return np.where(valid, picked, -1).astype(np.int64)


@njit(cache=True)
def _history_numba(click_key, click_anchor, user_start, session_key, cap):
    n = session_key.shape[0]
    out = np.full((n, cap), -1, dtype=np.int64)
    for i in range(n):
        end = np.searchsorted(click_key, session_key[i])
        start = max(user_start[i], end - cap)
        for j in range(start, end):
            out[i, j - start] = click_anchor[j]
    return out


# ---------------------------------------------------------------------------
# dispatch


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def label_fixed(start, emit, click, follow, like, window):
    """Labels for one sample per session closing at ``start + window``.

    Returns ``(labels[n, 3] int8, mu[n] int64)``; rows with ``emit`` false are
    all-absent.
    """
    args = (_i64(start), np.ascontiguousarray(emit, dtype=np.bool_), _i64(click),
            _i64(follow), _i64(like), np.int64(window))
    if get_backend() == "numba":
        return _fixed_numba(*args)
    return _fixed_numpy(*args)


def label_sliver(click, follow, like, exit_, censored, window, t_uni):
    """Sliding-window samples grouped per (session, window).

    Returns ``(session_idx, k, mu, labels)`` sorted by session then window.
    """
    args = (_i64(click), _i64(follow), _i64(like), _i64(exit_),
            np.ascontiguousarray(censored, dtype=np.bool_), np.int64(window), np.int64(t_uni))
    if get_backend() == "numba":
        return _sliver_numba(*args)
    return _sliver_numpy(*args)


def auc_counts(scores, labels):
    """``(2 * wins, n_pos, n_neg)`` where ties earn half a win; exact integers.

    Labels other than 0 and 1 are ignored.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int8)
    if get_backend() == "numba":
        tw, p, q = _auc_numba(scores, labels, np.argsort(scores, kind="mergesort"))
        return int(tw), int(p), int(q)
    return _auc_numpy(scores, labels)


def scatter_add_rows(out, idx, vals):
    """In-place ``out[idx[i]] += vals[i]`` with repeated indices accumulated."""
    idx = _i64(idx)
    vals = np.ascontiguousarray(vals, dtype=out.dtype)
    if get_backend() == "numba":
        _scatter_numba(out, idx, vals)
    else:
        _scatter_numpy(out, idx, vals)


def adam_update(param, grad, m, v, lr, b1, b2, eps, t):
    """One in-place bias-corrected Adam step at step number ``t`` (1-based)."""
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    args = (param.reshape(-1), np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
            m.reshape(-1), v.reshape(-1), float(lr), float(b1), float(b2), float(eps), bc1, bc2)
    if get_backend() == "numba":
        _adam_numba(*args)
    else:
        _adam_numpy(*args)


def gather_history(click_user, click_ts, click_anchor, session_user, session_ts, cap):
    """Per session, the anchors of that user's clicks strictly before ``session_ts``.

    Keeps the ``cap`` most recent in chronological order, right-padded with -1.
    """
    click_user, click_ts, click_anchor = _i64(click_user), _i64(click_ts), _i64(click_anchor)
    session_user, session_ts = _i64(session_user), _i64(session_ts)
    users, inv = np.unique(np.concatenate([click_user, session_user]), return_inverse=True)
    cu, su = inv[: click_user.size], inv[click_user.size:]
    scale = int(max(click_ts.max(initial=0), session_ts.max(initial=0))) + 2
    if scale * (users.size + 1) >= 2**62:
        raise OverflowError("timestamps too large for packed history keys")
    order = np.lexsort((click_ts, cu))
    click_key = cu[order] * scale + click_ts[order]
    anchors = click_anchor[order]
    user_start = np.searchsorted(click_key, su * scale, side="left")
    session_key = su * scale + session_ts
    if get_backend() == "numba":
        return _history_numba(click_key, anchors, _i64(user_start), session_key, int(cap))
    return _history_numpy(click_key, anchors, user_start, session_key, int(cap))
