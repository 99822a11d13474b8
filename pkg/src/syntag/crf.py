"""Linear-chain CRF scoring, partition function, decoding and oracles.

The transition matrix is (L+2) x (L+2) over the L real labels plus virtual
START (id L) and STOP (id L+1). A sequence y of length n is scored as

    T[START, y_0] + sum_t T[y_t, y_{t+1}] + T[y_{n-1}, STOP] + sum_t E[t, y_t]

The learnable matrix is finite everywhere; structural impossibilities
(entering START, leaving STOP, optional scheme constraints) live in a
constant additive mask of 0 / -inf entries, so SGD and L2 never touch an
infinity. All lattice math runs in log space on float64.

The dynamic programs only ever slice the finite inner block and the START
row / STOP column, so -inf arithmetic cannot reach training unless scheme
constraints are enabled, and logsumexp treats -inf as an absent term.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, constant, logsumexp, matmul, reshape, rows, take
from .errors import ContractError, DimensionError
from .initializers import glorot, zeros


@dataclass
class TagLattice:
    n: int
    emissions: Tensor

    def __post_init__(self):
        if self.emissions.data.ndim != 2 or self.emissions.data.shape[0] != self.n:
            raise DimensionError(
                f"lattice emissions shape {self.emissions.data.shape} "
                f"does not match n={self.n}"
            )


class CrfParams:
    """Transitions plus the emission projection from the encoder output."""

    def __init__(self, num_labels, hidden_dim, rng, label_names=None,
                 constrain_scheme=None):
        if num_labels < 1:
            raise ContractError("need at least one label")
        self.num_labels = num_labels
        self.start = num_labels
        self.stop = num_labels + 1
        full = num_labels + 2
        self.transitions = glorot(rng, full, full)
        self.emit_w = glorot(rng, hidden_dim, num_labels)
        self.emit_b = zeros(num_labels)
        mask = np.zeros((full, full))
        mask[:, self.start] = -np.inf
        mask[self.stop, :] = -np.inf
        if constrain_scheme is not None:
            if label_names is None:
                raise ContractError("scheme constraints need label names")
            mask = np.minimum(
                mask, scheme_constraint_mask(label_names, constrain_scheme))
        self.structural_mask = mask

    def effective_transitions(self):
        """Learnable transitions plus the structural -inf mask."""
        return self.transitions + constant(self.structural_mask)

    def parameters(self):
        return {
            "transitions": self.transitions,
            "emit_w": self.emit_w,
            "emit_b": self.emit_b,
        }


def scheme_constraint_mask(label_names, scheme="bioes"):
    """-inf mask for label bigrams that can never occur under a scheme."""
    L = len(label_names)
    full = L + 2
    mask = np.zeros((full, full))

    def pair_ok(prev, nxt):
        try:
            _check_bigram(prev, nxt, scheme)
        except ValueError:
            return False
        return True

    for i, a in enumerate(label_names):
        for j, b in enumerate(label_names):
            if not pair_ok(a, b):
                mask[i, j] = -np.inf
        if not pair_ok(None, a):
            mask[L, i] = -np.inf  # START -> a
        if not pair_ok(a, None):
            mask[i, L + 1] = -np.inf  # a -> STOP
    return mask


def _check_bigram(prev, nxt, scheme):
    def kind(tag):
        if tag is None or tag == "O":
            return "O", None
        return tag[0], tag[2:]

    pk, pt = kind(prev)
    nk, nt = kind(nxt)
    if scheme == "bio":
        if nk == "I" and not (pk in ("B", "I") and pt == nt):
            raise ValueError
        if nk in ("E", "S"):
            raise ValueError
        return
    open_after_prev = pk in ("B", "I")
    if open_after_prev:
        if nk not in ("I", "E") or nt != pt:
            raise ValueError
    else:
        if nk in ("I", "E"):
            raise ValueError


def emissions_from_hidden(h, crf):
    """Project encoder output rows to per-label scores: (N, 2H) -> (N, L)."""
    return matmul(h, crf.emit_w) + crf.emit_b


def _index_sets(num_labels):
    L = num_labels
    full = L + 2
    inner = (np.arange(L)[:, None] * full + np.arange(L)[None, :]).ravel()
    start_row = L * full + np.arange(L)
    stop_col = np.arange(L) * full + (L + 1)
    return inner, start_row, stop_col


def log_partition_batch(emissions_flat, lengths, trans):
    """Forward algorithm over a padded batch; returns a (B,) tensor of logZ.

    emissions_flat is (B * n_max, L) with sentence-major rows; positions at
    or beyond a sentence's length are ignored via masked alpha updates.
    """
    lengths = np.asarray(lengths)
    batch = len(lengths)
    L = emissions_flat.data.shape[1]
    n_max = emissions_flat.data.shape[0] // batch
    inner_idx, start_idx, stop_idx = _index_sets(L)
    inner = reshape(take(trans, inner_idx), (1, L, L))
    start_row = reshape(take(trans, start_idx), (1, L))
    stop_col = reshape(take(trans, stop_idx), (1, L))
    base = np.arange(batch) * n_max

    alpha = rows(emissions_flat, base) + start_row
    mask = (np.arange(n_max)[None, :] < lengths[:, None]).astype(np.float64)
    for t in range(1, n_max):
        e_t = rows(emissions_flat, base + t)
        scores = reshape(alpha, (batch, L, 1)) + inner
        new = logsumexp(scores, axis=1) + e_t
        col = mask[:, t: t + 1]
        if col.all():
            alpha = new
        else:
            alpha = constant(col) * new + constant(1.0 - col) * alpha
    return logsumexp(alpha + stop_col, axis=1)


def score_batch(emissions_flat, lengths, trans, gold_ids):
    """Summed gold-path scores over a batch; returns a scalar tensor.

    gold_ids is an integer (B, n_max) array; entries beyond each length are
    ignored. Label ids must be valid.
    """
    lengths = np.asarray(lengths)
    batch = len(lengths)
    L = emissions_flat.data.shape[1]
    full = L + 2
    n_max = emissions_flat.data.shape[0] // batch
    gold_ids = np.asarray(gold_ids)
    if gold_ids.shape != (batch, n_max):
        raise DimensionError(
            f"gold ids shape {gold_ids.shape}, expected {(batch, n_max)}"
        )
    em_idx = []
    tr_idx = []
    for b, n in enumerate(lengths):
        y = gold_ids[b, :n]
        if y.size and (y.min() < 0 or y.max() >= L):
            raise ContractError(f"label id out of range in sentence {b}")
        em_idx.extend((b * n_max + np.arange(n)) * L + y)
        tr_idx.append(L * full + y[0])
        tr_idx.extend(y[:-1] * full + y[1:])
        tr_idx.append(y[-1] * full + (L + 1))
    total = take(emissions_flat, np.array(em_idx, dtype=np.intp)).sum()
    return total + take(trans, np.array(tr_idx, dtype=np.intp)).sum()


def nll_batch(emissions_flat, lengths, trans, gold_ids):
    """Mean negative log likelihood per sentence over the batch."""
    log_z = log_partition_batch(emissions_flat, lengths, trans).sum()
    gold = score_batch(emissions_flat, lengths, trans, gold_ids)
    return (log_z - gold) * (1.0 / len(lengths))


def score_sequence(lattice, trans, y):
    """Score one sequence on a single-sentence lattice (tape-friendly)."""
    y = np.asarray(y, dtype=np.intp)
    if y.shape != (lattice.n,):
        raise ContractError(f"label sequence length {y.shape} vs n={lattice.n}")
    return reshape(
        score_batch(lattice.emissions, [lattice.n], trans, y[None, :]), ())


def log_partition(lattice, trans):
    return reshape(
        log_partition_batch(lattice.emissions, [lattice.n], trans), ())


def nll(lattice, trans, gold):
    """Negative log likelihood of the gold sequence; non-negative."""
    return log_partition(lattice, trans) - score_sequence(lattice, trans, gold)


def _as_arrays(lattice, trans):
    em = lattice.emissions.data if isinstance(lattice.emissions, Tensor) \
        else np.asarray(lattice.emissions)
    t = trans.data if isinstance(trans, Tensor) else np.asarray(trans)
    return em, t


def viterbi(lattice, trans):
    """Max-score sequence and its score.

    Ties are broken toward the lexicographically smallest label-id sequence:
    suffix-best scores are computed right to left, then labels are chosen
    greedily left to right taking the smallest id that attains the stepwise
    maximum.
    """
    em, t = _as_arrays(lattice, trans)
    n, L = em.shape
    inner = t[:L, :L]
    start_row = t[L, :L]
    stop_col = t[:L, L + 1]
    beta = np.empty((n, L))
    beta[n - 1] = stop_col
    for s in range(n - 2, -1, -1):
        beta[s] = np.max(inner + em[s + 1] + beta[s + 1], axis=1)
    ys = []
    prefix = 0.0
    prev = None
    for s in range(n):
        arrival = start_row if s == 0 else inner[prev]
        v = prefix + arrival + em[s] + beta[s]
        j = int(np.argmax(v == v.max()))
        ys.append(j)
        prefix = prefix + arrival[j] + em[s, j]
        prev = j
    return ys, float(prefix + stop_col[prev])


def brute_force(lattice, trans, size_guard=10 ** 6):
    """Exhaustive enumeration oracle: (logZ, lexicographically-first argmax)."""
    em, t = _as_arrays(lattice, trans)
    n, L = em.shape
    if L ** n > size_guard:
        raise ContractError(f"brute force refuses {L}^{n} sequences")
    scores, seqs = _enumerate_scores(em, t)
    m = scores.max()
    log_z = float(np.log(np.exp(scores - m).sum()) + m)
    best = seqs[int(np.argmax(scores))]
    return log_z, list(int(v) for v in best)


def brute_force_marginals(lattice, trans, size_guard=10 ** 6):
    """Per-position label marginals P(y_t = j) by full enumeration."""
    em, t = _as_arrays(lattice, trans)
    n, L = em.shape
    if L ** n > size_guard:
        raise ContractError(f"brute force refuses {L}^{n} sequences")
    scores, seqs = _enumerate_scores(em, t)
    m = scores.max()
    w = np.exp(scores - m)
    probs = w / w.sum()
    marg = np.zeros((n, L))
    for t_i in range(n):
        for j in range(L):
            marg[t_i, j] = probs[seqs[:, t_i] == j].sum()
    return marg


def _enumerate_scores(em, t):
    n, L = em.shape
    inner = t[:L, :L]
    seqs = np.array(list(itertools.product(range(L), repeat=n)), dtype=np.intp)
    scores = t[L, seqs[:, 0]] + em[0, seqs[:, 0]]
    for s in range(1, n):
        scores = scores + inner[seqs[:, s - 1], seqs[:, s]] + em[s, seqs[:, s]]
    scores = scores + t[seqs[:, -1], L + 1]
    return scores, seqs


__all__ = [
    "TagLattice",
    "CrfParams",
    "scheme_constraint_mask",
    "emissions_from_hidden",
    "log_partition_batch",
    "score_batch",
    "nll_batch",
    "score_sequence",
    "log_partition",
    "nll",
    "viterbi",
    "brute_force",
    "brute_force_marginals",
]
