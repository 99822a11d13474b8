"""Recurrent cells: a graph-gated LSTM and a plain LSTM.

The graph-gated cell consumes two streams per position: the token input x_t
and a graph-encoded vector g_t. Four sigmoid gates control the state update:

* forget (f) and output (o) see x_t, the previous hidden state, and g_t;
* the sequence input gate (i) sees x_t and the previous hidden state;
* the graph input gate (m) sees g_t and the previous hidden state.

Two tanh candidates are formed, one from the token stream and one from the
graph stream, and the cell state accumulates both:

    c_t = f * c_{t-1} + i * cand_c_t + m * cand_s_t
    h_t = o * tanh(c_t)

The plain LSTM drops everything graph-related and is used for the character
encoder and the sequence-only baseline.

All step functions operate on batches of row vectors: x is (B, D), states
are (B, H). Initial states are zero. The closed-form expansion of the cell
state (a weighted sum over all candidate vectors seen so far, with weights
built from gate products) is implemented alongside the recurrence as an
independent oracle; the two must agree to float64 accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, concat, constant, matmul, rows, sigmoid, tanh
from .errors import ContractError, DimensionError
from .initializers import glorot, zeros

GATE_NAMES = ("f", "i", "m", "o")


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def zero_state(batch, hidden):
    return LstmState(constant(np.zeros((batch, hidden))),
                     constant(np.zeros((batch, hidden))))


class GraphGatedParams:
    """Weights for the graph-gated cell.

    Naming: first letter is the input stream (x token input, h previous
    hidden, g graph vector), suffix is the target block (f/o/i gates,
    m graph gate, c sequence candidate, s graph candidate). Matrices are
    (input_dim, hidden) so batched rows multiply on the left.
    """

    BLOCKS = [
        ("x_f", "x"), ("h_f", "h"), ("g_f", "g"), ("b_f", None),
        ("x_o", "x"), ("h_o", "h"), ("g_o", "g"), ("b_o", None),
        ("x_i", "x"), ("h_i", "h"), ("b_i", None),
        ("x_c", "x"), ("h_c", "h"), ("b_c", None),
        ("g_m", "g"), ("h_m", "h"), ("b_m", None),
        ("g_s", "g"), ("h_s", "h"), ("b_s", None),
    ]

    def __init__(self, input_dim, graph_dim, hidden, rng):
        self.input_dim = input_dim
        self.graph_dim = graph_dim
        self.hidden = hidden
        dims = {"x": input_dim, "h": hidden, "g": graph_dim}
        for name, kind in self.BLOCKS:
            if kind is None:
                setattr(self, name, zeros(hidden))
            else:
                setattr(self, name, glorot(rng, dims[kind], hidden))

    def parameters(self):
        return {name: getattr(self, name) for name, _ in self.BLOCKS}


class PlainLstmParams:
    """Weights for a standard LSTM (gates f, i, o and one candidate)."""

    BLOCKS = [
        ("x_f", "x"), ("h_f", "h"), ("b_f", None),
        ("x_i", "x"), ("h_i", "h"), ("b_i", None),
        ("x_o", "x"), ("h_o", "h"), ("b_o", None),
        ("x_c", "x"), ("h_c", "h"), ("b_c", None),
    ]

    def __init__(self, input_dim, hidden, rng):
        self.input_dim = input_dim
        self.hidden = hidden
        dims = {"x": input_dim, "h": hidden}
        for name, kind in self.BLOCKS:
            if kind is None:
                setattr(self, name, zeros(hidden))
            else:
                setattr(self, name, glorot(rng, dims[kind], hidden))

    def parameters(self):
        return {name: getattr(self, name) for name, _ in self.BLOCKS}


def graph_step(x, g, state, p, trace=None):
    """One step of the graph-gated cell over a batch of rows.

    When ``trace`` is a dict, the four gate activations are stored into it
    as plain arrays under keys f/i/m/o.
    """
    _check_step_dims(x, p.input_dim, "token input")
    _check_step_dims(g, p.graph_dim, "graph input")
    f = sigmoid(matmul(x, p.x_f) + matmul(state.h, p.h_f) + matmul(g, p.g_f) + p.b_f)
    o = sigmoid(matmul(x, p.x_o) + matmul(state.h, p.h_o) + matmul(g, p.g_o) + p.b_o)
    i = sigmoid(matmul(x, p.x_i) + matmul(state.h, p.h_i) + p.b_i)
    m = sigmoid(matmul(g, p.g_m) + matmul(state.h, p.h_m) + p.b_m)
    cand_c = tanh(matmul(x, p.x_c) + matmul(state.h, p.h_c) + p.b_c)
    cand_s = tanh(matmul(g, p.g_s) + matmul(state.h, p.h_s) + p.b_s)
    c = f * state.c + i * cand_c + m * cand_s
    h = o * tanh(c)
    if trace is not None:
        trace["f"] = f.data.copy()
        trace["i"] = i.data.copy()
        trace["m"] = m.data.copy()
        trace["o"] = o.data.copy()
    return LstmState(h, c)


def plain_step(x, state, p, trace=None):
    """One standard LSTM step over a batch of rows."""
    _check_step_dims(x, p.input_dim, "token input")
    f = sigmoid(matmul(x, p.x_f) + matmul(state.h, p.h_f) + p.b_f)
    i = sigmoid(matmul(x, p.x_i) + matmul(state.h, p.h_i) + p.b_i)
    o = sigmoid(matmul(x, p.x_o) + matmul(state.h, p.h_o) + p.b_o)
    cand = tanh(matmul(x, p.x_c) + matmul(state.h, p.h_c) + p.b_c)
    c = f * state.c + i * cand
    h = o * tanh(c)
    if trace is not None:
        trace["f"] = f.data.copy()
        trace["i"] = i.data.copy()
        trace["o"] = o.data.copy()
    return LstmState(h, c)


def _check_step_dims(x, expect, what):
    if x.data.ndim != 2 or x.data.shape[1] != expect:
        raise DimensionError(
            f"{what} has shape {x.data.shape}, expected (batch, {expect})"
        )


def _run_direction(step_fn, hidden, batch, n_max, lengths, reverse, trace_out=None):
    """Drive one direction over a padded batch with masked state updates.

    step_fn(t, state, trace_dict_or_None) -> LstmState computes the raw
    update at position t for the whole batch; positions at or beyond a
    sentence's length keep their previous state, so shorter sentences are
    unaffected by padding. Returns per-position h of shape (B, H) plus the
    final state.
    """
    lengths = np.asarray(lengths)
    mask = (np.arange(n_max)[None, :] < lengths[:, None]).astype(np.float64)
    state = zero_state(batch, hidden)
    outputs = [None] * n_max
    order = range(n_max - 1, -1, -1) if reverse else range(n_max)
    for t in order:
        trace = {} if trace_out is not None else None
        new_state = step_fn(t, state, trace)
        col = mask[:, t: t + 1]
        if col.all():
            state = new_state
        else:
            keep = constant(1.0 - col)
            take_new = constant(col)
            state = LstmState(take_new * new_state.h + keep * state.h,
                              take_new * new_state.c + keep * state.c)
        outputs[t] = state.h
        if trace_out is not None:
            trace_out[t] = trace
    return outputs, state


def run_graph_bidirectional_batch(x_flat, g_flat, lengths, fwd, bwd,
                                  trace_sink=None):
    """Bidirectional graph-gated pass over a padded batch.

    x_flat is (B * n_max, Dx) with row b * n_max + t holding sentence b,
    position t; g_flat likewise. Returns (B * n_max, 2H) where each row
    concatenates the forward and backward hidden states at that position.
    When trace_sink is a dict, per-direction gate activations are stored
    under keys "fwd" and "bwd" as lists (over t) of gate dicts of (B, H).
    """
    batch = len(lengths)
    n_max = x_flat.data.shape[0] // batch
    base = np.arange(batch) * n_max

    def make_step(params):
        def step_fn(t, state, trace):
            idx = base + t
            return graph_step(rows(x_flat, idx), rows(g_flat, idx), state, params, trace)
        return step_fn

    return _run_bidi(make_step, fwd, bwd, batch, n_max, lengths, trace_sink)


def run_plain_bidirectional_batch(x_flat, lengths, fwd, bwd, trace_sink=None):
    """Bidirectional plain-LSTM pass over a padded batch (see above)."""
    batch = len(lengths)
    n_max = x_flat.data.shape[0] // batch
    base = np.arange(batch) * n_max

    def make_step(params):
        def step_fn(t, state, trace):
            return plain_step(rows(x_flat, base + t), state, params, trace)
        return step_fn

    return _run_bidi(make_step, fwd, bwd, batch, n_max, lengths, trace_sink)


def _run_bidi(make_step, fwd, bwd, batch, n_max, lengths, trace_sink):
    fwd_traces = [None] * n_max if trace_sink is not None else None
    bwd_traces = [None] * n_max if trace_sink is not None else None
    fwd_out, _ = _run_direction(make_step(fwd), fwd.hidden, batch, n_max,
                                lengths, reverse=False, trace_out=fwd_traces)
    bwd_out, _ = _run_direction(make_step(bwd), bwd.hidden, batch, n_max,
                                lengths, reverse=True, trace_out=bwd_traces)
    if trace_sink is not None:
        trace_sink["fwd"] = fwd_traces
        trace_sink["bwd"] = bwd_traces
    # Stack timesteps (t-major), then permute rows back to sentence-major
    # order so row b * n_max + t lines up with the input layout.
    both = concat([concat(fwd_out, axis=0), concat(bwd_out, axis=0)], axis=1)
    perm = (np.arange(n_max)[None, :] * batch + np.arange(batch)[:, None]).ravel()
    return rows(both, perm)


def run_bidirectional(x, g, fwd, bwd, trace_sink=None):
    """Single-sentence bidirectional graph-gated pass: (n, Dx) -> (n, 2H)."""
    n = x.data.shape[0]
    if n < 1:
        raise ContractError("run_bidirectional needs at least one position")
    return run_graph_bidirectional_batch(x, g, [n], fwd, bwd, trace_sink)


class GateTrace:
    """Recorded gate activations for one sentence.

    arrays maps gate name -> (n, directions, H); direction 0 is forward.
    """

    def __init__(self, arrays):
        self.arrays = arrays

    @property
    def length(self):
        return next(iter(self.arrays.values())).shape[0]

    def values(self, gate):
        if gate not in self.arrays:
            raise ContractError(f"gate {gate!r} not traced; have {sorted(self.arrays)}")
        return self.arrays[gate]

    def mean(self, gate):
        return float(self.values(gate).mean())

    def rows(self):
        """Export rows (position, gate, mean_value) for CSV output."""
        out = []
        for t in range(self.length):
            for gate in sorted(self.arrays):
                out.append((t, gate, float(self.arrays[gate][t].mean())))
        return out


def extract_traces(trace_sink, lengths, gate_names=GATE_NAMES):
    """Slice a batched trace sink into per-sentence GateTrace objects."""
    fwd, bwd = trace_sink["fwd"], trace_sink["bwd"]
    traces = []
    for b, n in enumerate(lengths):
        arrays = {}
        for gate in gate_names:
            if gate not in fwd[0]:
                continue
            hidden = fwd[0][gate].shape[1]
            arr = np.empty((n, 2, hidden))
            for t in range(n):
                arr[t, 0] = fwd[t][gate][b]
                arr[t, 1] = bwd[t][gate][b]
            arrays[gate] = arr
        traces.append(GateTrace(arrays))
    return traces


def expand_cell_state(x_seq, g_seq, params, t, return_weights=False):
    """Cell state c_t via the closed-form weighted-sum expansion.

    Instead of iterating c_t = f*c + i*cand_c + m*cand_s, every c_j is
    rebuilt from scratch as

        c_j = sum_k a_k_j * cand_c_k  +  sum_k q_k_j * cand_s_k

    where a_k_j = i_k * prod(f_{k+1} .. f_j) and q_k_j likewise from m_k.
    Hidden states between positions still come from h_j = o_j * tanh(c_j),
    with c_j taken from the expansion, so the recurrence for c is never
    used. This is the independent oracle for the step function.

    x_seq and g_seq are single-sentence (n, D) tensors; returns c_t with
    shape (H,). With return_weights=True, also returns the lists of weight
    tensors (each (1, H)) for boundedness checks.
    """
    n = x_seq.data.shape[0]
    if not 0 <= t < n:
        raise ContractError(f"position {t} outside sequence of length {n}")
    h = constant(np.zeros((1, params.hidden)))
    a_weights, q_weights = [], []
    c_cands, s_cands = [], []
    c_j = None
    for j in range(t + 1):
        x_j = rows(x_seq, np.array([j]))
        g_j = rows(g_seq, np.array([j]))
        f = sigmoid(matmul(x_j, params.x_f) + matmul(h, params.h_f)
                    + matmul(g_j, params.g_f) + params.b_f)
        o = sigmoid(matmul(x_j, params.x_o) + matmul(h, params.h_o)
                    + matmul(g_j, params.g_o) + params.b_o)
        i = sigmoid(matmul(x_j, params.x_i) + matmul(h, params.h_i) + params.b_i)
        m = sigmoid(matmul(g_j, params.g_m) + matmul(h, params.h_m) + params.b_m)
        c_cands.append(tanh(matmul(x_j, params.x_c) + matmul(h, params.h_c) + params.b_c))
        s_cands.append(tanh(matmul(g_j, params.g_s) + matmul(h, params.h_s) + params.b_s))
        a_weights = [w * f for w in a_weights] + [i]
        q_weights = [w * f for w in q_weights] + [m]
        c_j = a_weights[0] * c_cands[0]
        for k in range(1, len(a_weights)):
            c_j = c_j + a_weights[k] * c_cands[k]
        for k in range(len(q_weights)):
            c_j = c_j + q_weights[k] * s_cands[k]
        h = o * tanh(c_j)
    c_t = ad.reshape(c_j, (params.hidden,))
    if return_weights:
        return c_t, a_weights, q_weights
    return c_t
