"""Alignment-free sequence loss over blank-augmented monotonic alignments.

Loss of one utterance is -log of the total probability that any
alignment of length T collapses (merge repeats, drop blanks) to the
target. Computed with the log-domain forward recursion over the
blank-interleaved target; the gradient uses the forward/backward
occupancies analytically, so the whole loss is a single fused tape op
taking raw logits. The blank id is V, one past the vocabulary.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError

NEG_INF = -np.inf


def interleave_blanks(target: np.ndarray, blank: int) -> np.ndarray:
    """[a, b] -> [blank, a, blank, b, blank]."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target) -> int:
    """Shortest T that admits the target: |y| plus one per adjacent repeat."""
    target = np.asarray(target)
    repeats = int(np.sum(target[1:] == target[:-1])) if len(target) > 1 else 0
    return len(target) + repeats


def _forward_backward(lp: np.ndarray, ext: np.ndarray, blank: int):
    """Alpha/beta lattices [T, S] in log domain for one utterance."""
    t_len, _ = lp.shape
    s_len = len(ext)
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        step = np.concatenate(([NEG_INF], alpha[t - 1, :-1]))[:s_len]
        skip = np.concatenate(([NEG_INF, NEG_INF], alpha[t - 1, :-2]))[:s_len]
        skip = np.where(can_skip, skip, NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, ext]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    skip_fwd = np.concatenate((can_skip[2:], [False, False]))[:s_len]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))[:s_len]
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:s_len]
        skip = np.where(skip_fwd, skip, NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)
    return alpha, beta


def ctc_neg_log_prob(log_probs: np.ndarray, target) -> float:
    """-log P(target | log_probs) for one utterance; plain numpy, no tape."""
    lp = np.asarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    blank = lp.shape[1] - 1
    if len(target) and target.max() >= blank:
        raise DimensionError(f"target id {target.max()} collides with blank {blank}")
    if min_frames(target) > lp.shape[0]:
        raise NumericError(
            f"target of {len(target)} tokens needs >= {min_frames(target)} frames, "
            f"got {lp.shape[0]}"
        )
    ext = interleave_blanks(target, blank)
    alpha, _ = _forward_backward(lp, ext, blank)
    tail = alpha[-1, -1] if len(ext) == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return float(-tail)


def ctc_loss(
    logits: T.Tensor,
    targets: np.ndarray,
    input_lens: np.ndarray,
    target_lens: np.ndarray,
) -> T.Tensor:
    """Mean per-utterance CTC loss; fused log-softmax + lattice as one tape op.

    logits: [B, Tmax, V+1]; targets: [B, Umax] padded arbitrarily beyond
    each target_lens; blank = V.
    """
    if logits.ndim != 3:
        raise DimensionError(f"ctc_loss expects [B, T, V+1] logits, got {logits.shape}")
    b, t_max, v1 = logits.shape
    blank = v1 - 1
    targets = np.asarray(targets, dtype=np.int64)
    input_lens = np.asarray(input_lens, dtype=np.int64)
    target_lens = np.asarray(target_lens, dtype=np.int64)
    if not (len(targets) == len(input_lens) == len(target_lens) == b):
        raise DimensionError("ctc_loss batch size disagreement")

    x64 = logits.data.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    lp = x64 - (m + np.log(np.exp(x64 - m).sum(axis=-1, keepdims=True)))

    grad = np.zeros_like(x64)
    total = 0.0
    for i in range(b):
        t_len, u_len = int(input_lens[i]), int(target_lens[i])
        if t_len < 1 or t_len > t_max:
            raise DimensionError(f"utterance {i}: input length {t_len} outside [1, {t_max}]")
        target = targets[i, :u_len]
        if u_len and target.max() >= blank:
            raise DimensionError(f"utterance {i}: target id {target.max()} >= blank {blank}")
        if min_frames(target) > t_len:
            raise NumericError(
                f"utterance {i}: target of {u_len} tokens needs >= {min_frames(target)} "
                f"frames, got {t_len}"
            )
        ext = interleave_blanks(target, blank)
        lpi = lp[i, :t_len]
        alpha, beta = _forward_backward(lpi, ext, blank)
        s_len = len(ext)
        tail = (
            alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
        )
        if not np.isfinite(tail):
            raise NumericError(f"utterance {i}: no admissible alignment (infinite loss)")
        total += -tail
        # symbol occupancies -> d(-logP)/d(logits) = softmax - gamma
        ab = alpha + beta - tail
        gamma = np.zeros((t_len, v1))
        np.add.at(gamma.T, ext, np.exp(ab).T)
        grad[i, :t_len] = np.exp(lp[i, :t_len]) - gamma

    loss = np.asarray(total / b, dtype=logits.data.dtype)
    scale = 1.0 / b

    def back(g):
        return ((grad * (scale * float(g))).astype(logits.data.dtype),)

    return T._record((logits,), loss, back)
