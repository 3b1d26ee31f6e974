"""Numeric inner loops used by the learners.

Every kernel has two implementations with identical signatures: a numba
``@njit`` version and a pure-numpy version. ``FAUNO_DISABLE_NUMBA=1`` in the
environment (or a missing numba install) selects the numpy path for the
module-level names. Both sets stay importable as ``NUMBA`` and ``NUMPY`` so
the benchmark and the tests can compare them directly.
"""
import os
from types import SimpleNamespace

import numpy as np

_DISABLE = os.environ.get("FAUNO_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    from numba import njit
    _NUMBA_IMPORTABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _NUMBA_IMPORTABLE = False


# ---------------------------------------------------------------- numpy path


def _gae_np(rewards, values, dones, value_last, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_value = value_last if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv


def _masked_log_softmax_np(logits, mask):
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return np.where(mask, shifted - lse, -np.inf)


def _ppo_head_np(logp, mask, actions, logp_old, adv, clip_eps, c2):
    """Per-sample clipped-surrogate and entropy terms and their logit gradients.

    Returns (dlogits, surrogate, entropy, clipped) where dlogits is the
    gradient of ``-surrogate - c2 * entropy`` for each sample (not averaged).
    """
    n = logp.shape[0]
    rows = np.arange(n)
    p = np.where(mask, np.exp(logp), 0.0)
    safe_logp = np.where(mask, logp, 0.0)
    entropy = -(p * safe_logp).sum(axis=1)
    ratio = np.exp(logp[rows, actions] - logp_old)
    unclipped = ratio * adv
    clipped_ratio = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    clipped = clipped_ratio * adv
    surrogate = np.minimum(unclipped, clipped)
    # d surrogate / d log pi(a): ratio*adv on the unclipped branch, 0 once clipped
    active = unclipped <= clipped
    g = np.where(active, unclipped, 0.0)
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    dlogits = -g[:, None] * (onehot - p) + c2 * p * (safe_logp + entropy[:, None])
    dlogits = np.where(mask, dlogits, 0.0)
    return dlogits, surrogate, entropy, ~active


def _dueling_combine_np(value, adv, mask):
    counts = mask.sum(axis=1)
    mean_adv = np.where(mask, adv, 0.0).sum(axis=1) / counts
    q = value[:, None] + adv - mean_adv[:, None]
    return np.where(mask, q, -np.inf)


def _dueling_backward_np(dq, mask):
    """Map dL/dQ (zero on masked slots) to (dL/dV, dL/dA)."""
    dq = np.where(mask, dq, 0.0)
    counts = mask.sum(axis=1)
    dvalue = dq.sum(axis=1)
    dadv = dq - (dvalue / counts)[:, None]
    dadv = np.where(mask, dadv, 0.0)
    return dvalue, dadv


NUMPY = SimpleNamespace(
    name="numpy",
    gae=_gae_np,
    masked_log_softmax=_masked_log_softmax_np,
    ppo_head=_ppo_head_np,
    dueling_combine=_dueling_combine_np,
    dueling_backward=_dueling_backward_np,
)


# ---------------------------------------------------------------- numba path

if _NUMBA_IMPORTABLE:

    _gae_nb = njit(cache=True)(_gae_np)

    @njit(cache=True)
    def _masked_log_softmax_nb(logits, mask):
        n, a = logits.shape
        out = np.empty((n, a))
        for i in range(n):
            zmax = -np.inf
            for j in range(a):
                if mask[i, j] and logits[i, j] > zmax:
                    zmax = logits[i, j]
            s = 0.0
            for j in range(a):
                if mask[i, j]:
                    s += np.exp(logits[i, j] - zmax)
            lse = np.log(s)
            for j in range(a):
                if mask[i, j]:
                    out[i, j] = logits[i, j] - zmax - lse
                else:
                    out[i, j] = -np.inf
        return out

    @njit(cache=True)
    def _ppo_head_nb(logp, mask, actions, logp_old, adv, clip_eps, c2):
        n, a = logp.shape
        dlogits = np.zeros((n, a))
        surrogate = np.empty(n)
        entropy = np.empty(n)
        clipped_flags = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            h = 0.0
            for j in range(a):
                if mask[i, j]:
                    h -= np.exp(logp[i, j]) * logp[i, j]
            entropy[i] = h
            act = actions[i]
            ratio = np.exp(logp[i, act] - logp_old[i])
            unclipped = ratio * adv[i]
            cr = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
            clipped = cr * adv[i]
            if unclipped <= clipped:
                surrogate[i] = unclipped
                g = unclipped
            else:
                surrogate[i] = clipped
                g = 0.0
                clipped_flags[i] = True
            for j in range(a):
                if mask[i, j]:
                    pj = np.exp(logp[i, j])
                    onehot = 1.0 if j == act else 0.0
                    dlogits[i, j] = -g * (onehot - pj) + c2 * pj * (logp[i, j] + h)
        return dlogits, surrogate, entropy, clipped_flags

    @njit(cache=True)
    def _dueling_combine_nb(value, adv, mask):
        n, a = adv.shape
        q = np.empty((n, a))
        for i in range(n):
            s = 0.0
            c = 0
            for j in range(a):
                if mask[i, j]:
                    s += adv[i, j]
                    c += 1
            m = s / c
            for j in range(a):
                q[i, j] = value[i] + adv[i, j] - m if mask[i, j] else -np.inf
        return q

    @njit(cache=True)
    def _dueling_backward_nb(dq, mask):
        n, a = dq.shape
        dvalue = np.zeros(n)
        dadv = np.zeros((n, a))
        for i in range(n):
            s = 0.0
            c = 0
            for j in range(a):
                if mask[i, j]:
                    s += dq[i, j]
                    c += 1
            dvalue[i] = s
            for j in range(a):
                if mask[i, j]:
                    dadv[i, j] = dq[i, j] - s / c
        return dvalue, dadv

    NUMBA = SimpleNamespace(
        name="numba",
        gae=_gae_nb,
        masked_log_softmax=_masked_log_softmax_nb,
        ppo_head=_ppo_head_nb,
        dueling_combine=_dueling_combine_nb,
        dueling_backward=_dueling_backward_nb,
    )
else:  # pragma: no cover
    NUMBA = None

HAVE_NUMBA = NUMBA is not None
BACKEND = NUMPY if (_DISABLE or not HAVE_NUMBA) else NUMBA

gae = BACKEND.gae
masked_log_softmax = BACKEND.masked_log_softmax
ppo_head = BACKEND.ppo_head
dueling_combine = BACKEND.dueling_combine
dueling_backward = BACKEND.dueling_backward
