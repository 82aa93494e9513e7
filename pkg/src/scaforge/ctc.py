"""CTC loss, greedy decoding, and the layer error rate metric.

The loss is the negative log of the total probability of every
blank-augmented alignment of the label, computed by the forward algorithm
in log space. The analytic gradient w.r.t. the per-timestep log
probabilities comes from the forward-backward posteriors and plugs into
the autodiff tape, so input gradients (needed by the crafting module) flow
through for free.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _make

NEG_INF = -1e30


def _logsumexp2(a, b):
    m = np.maximum(a, b)
    m_safe = np.where(m <= NEG_INF, 0.0, m)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(np.exp(a - m_safe) + np.exp(b - m_safe))
    return np.where(m <= NEG_INF, NEG_INF, out)


def _extended_label(label: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def _forward_backward(logp: np.ndarray, ext: np.ndarray):
    t_len, _ = logp.shape
    s_len = len(ext)
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = ext[2:] != ext[:-2]
    skip[::2] = False  # cannot skip into a blank state

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        jump = np.where(skip, jump, NEG_INF)
        alpha[t] = _logsumexp2(_logsumexp2(stay, step), jump) + logp[t, ext]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        jump = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        skip_fwd = np.concatenate((skip[2:], [False, False]))
        jump = np.where(skip_fwd, jump, NEG_INF)
        beta[t] = _logsumexp2(_logsumexp2(stay, step), jump)

    log_z = _logsumexp2(alpha[t_len - 1, s_len - 1],
                        alpha[t_len - 1, s_len - 2] if s_len > 1 else NEG_INF)
    return alpha, beta, float(log_z)


def ctc_loss(logp: Tensor, label: np.ndarray, blank: int | None = None) -> Tensor:
    """Negative log-likelihood of `label` under per-timestep log-probs.

    logp: (T, K) rows of log probabilities; label: ints in [0, K-2] by
    default, with the blank as the last symbol unless given explicitly.
    """
    label = np.asarray(label, dtype=np.int64)
    t_len, k = logp.shape
    if blank is None:
        blank = k - 1
    if label.ndim != 1 or len(label) == 0:
        raise ValueError("label must be a nonempty 1-D sequence")
    if np.any(label < 0) or np.any(label >= k) or np.any(label == blank):
        raise ValueError("label symbols outside alphabet")
    if t_len < len(label):
        raise ValueError(f"label length {len(label)} exceeds {t_len} timesteps")
    # Repeated symbols need a separating blank.
    min_t = len(label) + int(np.sum(label[1:] == label[:-1]))
    if t_len < min_t:
        raise ValueError(f"label with repeats needs >= {min_t} timesteps, got {t_len}")

    ext = _extended_label(label, blank)
    alpha, beta, log_z = _forward_backward(logp.data, ext)

    def vjp(g):
        # dL/dlogp[t, k] = -sum_{s: ext[s]=k} exp(alpha+beta-logZ)
        post = np.exp(np.clip(alpha + beta - log_z, -700, 0))
        grad = np.zeros_like(logp.data)
        for s, sym in enumerate(ext):
            grad[:, sym] -= post[:, s]
        return (grad * g,)

    return _make(np.array(-log_z), "ctc_loss", (logp,), vjp)


def ctc_greedy_decode(logp: np.ndarray, blank: int | None = None) -> np.ndarray:
    """Per-timestep argmax, collapse repeats, drop blanks."""
    logp = np.asarray(logp)
    if blank is None:
        blank = logp.shape[1] - 1
    path = logp.argmax(axis=1)
    out = []
    prev = -1
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return np.array(out, dtype=np.int64)


def levenshtein(a, b) -> int:
    """Unit-cost edit distance."""
    a = list(a)
    b = list(b)
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, bj in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != bj))
        prev = cur
    return prev[-1]


def ler(pred, truth) -> float:
    """Levenshtein distance normalized by the truth length; may exceed 1."""
    truth = list(truth)
    if not truth:
        raise ValueError("truth sequence is empty")
    return levenshtein(pred, truth) / len(truth)
