"""Connectionist Temporal Classification: loss, gradient, oracle, decoding.

The loss sums path probabilities over all blank-augmented alignments that
collapse to the label sequence, computed with a log-space forward recursion.
Gradients come from the forward-backward recursions rather than the tape,
so memory stays O(T * |labels|). Blank id is 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BLANK = 0

BRUTE_FORCE_GUARD = 10 ** 6


@dataclass
class CtcResult:
    loss: float
    grad: np.ndarray
    feasible: bool


def validate_labels(labels, vocab_size: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() >= vocab_size):
        raise ValueError("labels must lie in [1, vocab_size - 1]; 0 is the blank")
    return labels


def min_frames(labels) -> int:
    """Minimum number of frames that can realize the label sequence."""
    labels = np.asarray(labels, dtype=np.int64)
    repeats = int(np.sum(labels[1:] == labels[:-1])) if labels.size > 1 else 0
    return int(labels.size) + repeats


def ctc_feasible(n_frames: int, labels) -> bool:
    return n_frames >= min_frames(labels)


def _extended(labels) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_loss(lattice: np.ndarray, labels) -> CtcResult:
    """Negative log-likelihood and its gradient w.r.t. the lattice values.

    ``lattice`` is a (T, V) matrix of per-frame log-probabilities. An
    infeasible label sequence (too few frames) yields loss +inf with a zero
    gradient and ``feasible=False`` so callers can skip it.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    t_len, vocab = lattice.shape
    if t_len < 1 or vocab < 2:
        raise ValueError("lattice must be at least 1 x 2")
    labels = validate_labels(labels, vocab)
    if not ctc_feasible(t_len, labels):
        return CtcResult(np.inf, np.zeros_like(lattice), False)

    ext = _extended(labels)
    s_len = ext.size
    neg = -np.inf

    # skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2]
    can_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = lattice[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lattice[0, ext[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        prev = np.full(s_len, neg)
        prev[1:] = alpha[t - 1, :-1]
        skip = np.full(s_len, neg)
        skip[2:] = alpha[t - 1, :-2]
        skip[~can_skip] = neg
        alpha[t] = np.logaddexp(np.logaddexp(stay, prev), skip) + lattice[t, ext]

    if s_len > 1:
        log_p = np.logaddexp(alpha[t_len - 1, s_len - 1], alpha[t_len - 1, s_len - 2])
    else:
        log_p = alpha[t_len - 1, 0]

    beta = np.full((t_len, s_len), neg)
    beta[t_len - 1, s_len - 1] = lattice[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = lattice[t_len - 1, ext[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        stay = beta[t + 1]
        nxt = np.full(s_len, neg)
        nxt[:-1] = beta[t + 1, 1:]
        skip = np.full(s_len, neg)
        skip[:-2] = np.where(can_skip[2:], beta[t + 1, 2:], neg)
        beta[t] = np.logaddexp(np.logaddexp(stay, nxt), skip) + lattice[t, ext]

    # dL/d lattice[t,k] = -exp(logsumexp_{s: ext[s]=k}(alpha+beta) - logP - lattice[t,k])
    grad = np.zeros_like(lattice)
    gamma = alpha + beta
    for k in np.unique(ext):
        cols = np.flatnonzero(ext == k)
        occ = gamma[:, cols]
        m = occ.max(axis=1)
        with np.errstate(invalid="ignore"):
            lse = m + np.log(np.exp(occ - m[:, None]).sum(axis=1))
        lse = np.where(np.isfinite(m), lse, neg)
        grad[:, k] = -np.exp(lse - log_p - lattice[:, k])
    return CtcResult(float(-log_p), grad, True)


def ctc_loss_op(lattice: Tensor, labels) -> Tensor:
    """Tape wrapper around :func:`ctc_loss` for end-to-end training."""
    result = ctc_loss(lattice.data, labels)
    grad = result.grad.astype(lattice.dtype)

    def backward(g):
        lattice._accum(g * grad)

    out = np.asarray(result.loss, dtype=lattice.dtype)
    if ad.grad_enabled():
        return Tensor(out, parents=(lattice,), backward=backward)
    return Tensor(out)


def collapse(path) -> list[int]:
    """Remove consecutive repeats, then blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev:
            out.append(int(s))
        prev = s
    return [s for s in out if s != BLANK]


def ctc_brute_force(lattice: np.ndarray, labels) -> float:
    """Exhaustive-path oracle: -log sum of probabilities of matching paths."""
    lattice = np.asarray(lattice, dtype=np.float64)
    t_len, vocab = lattice.shape
    if vocab ** t_len > BRUTE_FORCE_GUARD:
        raise ValueError(f"brute-force guard exceeded: {vocab}^{t_len} paths")
    target = [int(s) for s in labels]
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse(path) == target:
            total += float(np.exp(sum(lattice[t, s] for t, s in enumerate(path))))
    with np.errstate(divide="ignore"):
        return float(-np.log(total))


def ctc_greedy_decode(lattice: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, strip blanks."""
    lattice = np.asarray(lattice)
    return collapse(lattice.argmax(axis=1))


def is_normalized_lattice(lattice: np.ndarray, tol: float = 1e-5) -> bool:
    lattice = np.asarray(lattice, dtype=np.float64)
    row_lse = np.log(np.exp(lattice - lattice.max(axis=1, keepdims=True)).sum(axis=1))
    row_lse += lattice.max(axis=1)
    return bool(np.all(np.abs(row_lse) < tol))
