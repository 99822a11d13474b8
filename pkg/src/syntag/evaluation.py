"""Span-level scoring, gate statistics, and paired significance testing.

Scoring is exact-match on (start, end, type) spans. Gold label sequences
must be valid; predicted sequences are decoded leniently, dropping
malformed fragments, so a model that emits a stray continuation tag loses
that span instead of crashing the evaluation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import decode_label_spans
from .errors import ContractError, DataIntegrityError

SENTENCE_BUCKETS = (("<=14", 1, 14), ("15-29", 15, 29), ("30-44", 30, 44),
                    ("45-59", 45, 59), (">=60", 60, None))
ENTITY_BUCKETS = ("1", "2", "3", "4", "5", ">=6")

GATE_BUCKET_EDGES = (0.0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def decode_spans(labels, scheme="bioes"):
    """Lenient span decode for model output: malformed pieces are dropped."""
    return decode_label_spans(labels, scheme, drop_malformed=True)


def sentence_bucket(n):
    for name, lo, hi in SENTENCE_BUCKETS:
        if n >= lo and (hi is None or n <= hi):
            return name
    raise ContractError(f"no sentence bucket for length {n}")


def entity_bucket(length):
    if length < 1:
        raise ContractError(f"no entity bucket for length {length}")
    return str(length) if length <= 5 else ">=6"


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall > 0.0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return precision, recall, f1


class _Counter:
    __slots__ = ("tp", "fp", "fn")

    def __init__(self):
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def prf(self):
        return _prf(self.tp, self.fp, self.fn)


@dataclass
class EvalReport:
    """Exact-match span scores, overall and broken down."""

    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_type: dict = field(default_factory=dict)
    sentence_length: dict = field(default_factory=dict)
    entity_length: dict = field(default_factory=dict)
    per_sentence: list = field(default_factory=list)

    def to_text(self):
        lines = [
            f"precision {self.precision:.4f}  recall {self.recall:.4f}  "
            f"f1 {self.f1:.4f}  (tp {self.tp}  fp {self.fp}  fn {self.fn})",
            "",
            "by entity type:",
        ]
        for name in sorted(self.per_type):
            row = self.per_type[name]
            lines.append(
                f"  {name:12s} p {row['precision']:.4f}  r {row['recall']:.4f}"
                f"  f1 {row['f1']:.4f}  gold {row['gold']}"
            )
        lines.append("")
        lines.append("f1 by sentence length:")
        for name, _, _ in SENTENCE_BUCKETS:
            row = self.sentence_length[name]
            lines.append(f"  {name:6s} f1 {row['f1']:.4f}  gold {row['gold']}")
        lines.append("")
        lines.append("f1 by entity length:")
        for name in ENTITY_BUCKETS:
            row = self.entity_length[name]
            lines.append(f"  {name:4s} f1 {row['f1']:.4f}  gold {row['gold']}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = ["metric,bucket,value"]
        rows.append(f"precision,overall,{self.precision:.6f}")
        rows.append(f"recall,overall,{self.recall:.6f}")
        rows.append(f"f1,overall,{self.f1:.6f}")
        for name in sorted(self.per_type):
            row = self.per_type[name]
            rows.append(f"precision,type:{name},{row['precision']:.6f}")
            rows.append(f"recall,type:{name},{row['recall']:.6f}")
            rows.append(f"f1,type:{name},{row['f1']:.6f}")
        for name, _, _ in SENTENCE_BUCKETS:
            rows.append(
                f"f1,sentence_length:{name},"
                f"{self.sentence_length[name]['f1']:.6f}")
        for name in ENTITY_BUCKETS:
            rows.append(
                f"f1,entity_length:{name},"
                f"{self.entity_length[name]['f1']:.6f}")
        return "\n".join(rows) + "\n"


def entity_f1(gold_corpus, pred_corpus, scheme="bioes"):
    """Score predicted label sequences against gold, span by span.

    Both arguments are lists of per-sentence label lists of equal shape.
    Returns an EvalReport; its per_sentence field carries the (tp, fp, fn)
    triples that the bootstrap test consumes.
    """
    if len(gold_corpus) != len(pred_corpus):
        raise ContractError(
            f"gold has {len(gold_corpus)} sentences, "
            f"predictions have {len(pred_corpus)}"
        )
    overall = _Counter()
    per_type = {}
    by_sentence = {name: _Counter() for name, _, _ in SENTENCE_BUCKETS}
    by_entity = {name: _Counter() for name in ENTITY_BUCKETS}
    per_sentence = []
    for i, (gold_labels, pred_labels) in enumerate(
            zip(gold_corpus, pred_corpus)):
        if len(gold_labels) != len(pred_labels):
            raise ContractError(
                f"sentence {i}: gold has {len(gold_labels)} labels, "
                f"prediction has {len(pred_labels)}"
            )
        gold = set(decode_label_spans(gold_labels, scheme))
        pred = set(decode_spans(pred_labels, scheme))
        s_bucket = by_sentence[sentence_bucket(len(gold_labels))]
        tp_here = 0
        for span in gold | pred:
            start, end, etype = span
            counter = per_type.setdefault(etype, _Counter())
            e_bucket = by_entity[entity_bucket(end - start + 1)]
            if span in gold and span in pred:
                tp_here += 1
                for c in (overall, counter, s_bucket, e_bucket):
                    c.tp += 1
            elif span in pred:
                for c in (overall, counter, s_bucket, e_bucket):
                    c.fp += 1
            else:
                for c in (overall, counter, s_bucket, e_bucket):
                    c.fn += 1
        per_sentence.append((tp_here, len(pred) - tp_here,
                             len(gold) - tp_here))
    precision, recall, f1 = overall.prf()

    def row(counter, gold_count):
        p, r, f = counter.prf()
        return {"precision": p, "recall": r, "f1": f,
                "gold": gold_count, "predicted": counter.tp + counter.fp}

    return EvalReport(
        precision, recall, f1, overall.tp, overall.fp, overall.fn,
        per_type={k: row(c, c.tp + c.fn) for k, c in per_type.items()},
        sentence_length={k: row(c, c.tp + c.fn)
                         for k, c in by_sentence.items()},
        entity_length={k: row(c, c.tp + c.fn) for k, c in by_entity.items()},
        per_sentence=per_sentence,
    )


# ----- gate statistics ------------------------------------------------------

def gate_histogram(traces, gate="m"):
    """Count gate activations per bucket across a corpus.

    Buckets are [0, 0.4), [0.4, 0.5), ..., [0.9, 1.0]; every dimension of
    every token in every direction contributes one count. Returns a (7,)
    int64 array.
    """
    inner = np.asarray(GATE_BUCKET_EDGES[1:-1])
    counts = np.zeros(len(GATE_BUCKET_EDGES) - 1, dtype=np.int64)
    for trace in traces:
        if gate not in trace.arrays:
            raise ContractError(f"trace has no gate {gate!r}")
        values = trace.arrays[gate].ravel()
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise DataIntegrityError(
                f"gate {gate!r} has activations outside [0, 1]"
            )
        counts += np.bincount(np.digitize(values, inner),
                              minlength=counts.size)
    return counts


def histogram_csv(counts):
    rows = ["bucket_low,bucket_high,count"]
    for i, c in enumerate(counts):
        lo = GATE_BUCKET_EDGES[i]
        hi = GATE_BUCKET_EDGES[i + 1]
        rows.append(f"{lo},{hi},{int(c)}")
    return "\n".join(rows) + "\n"


# ----- significance ---------------------------------------------------------

def bootstrap_test(gold_corpus, pred_a, pred_b, resamples=1000, seed=0,
                   scheme="bioes"):
    """Paired bootstrap over sentences; returns the reversal fraction.

    The observed F1 difference between systems a and b is computed once;
    then sentences are resampled with replacement and the p value is the
    fraction of resamples whose difference strictly reverses sign. Two
    identical prediction sets, or a zero observed difference, give 1.0.
    Per-sentence statistics are sorted before resampling so the result does
    not depend on corpus order.
    """
    if pred_a == pred_b:
        return 1.0
    report_a = entity_f1(gold_corpus, pred_a, scheme)
    report_b = entity_f1(gold_corpus, pred_b, scheme)
    observed = report_a.f1 - report_b.f1
    if observed == 0.0:
        return 1.0
    stats = np.array(
        sorted((sa + sb) for sa, sb
               in zip(report_a.per_sentence, report_b.per_sentence)),
        dtype=np.float64,
    )
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, stats.shape[0], size=(resamples, stats.shape[0]))
    sums = stats[idx].sum(axis=1)

    def f1_of(tp, fp, fn):
        denom = 2.0 * tp + fp + fn
        out = np.zeros_like(tp)
        np.divide(2.0 * tp, denom, out=out, where=denom > 0)
        return out

    delta = (f1_of(sums[:, 0], sums[:, 1], sums[:, 2])
             - f1_of(sums[:, 3], sums[:, 4], sums[:, 5]))
    if observed > 0:
        reversals = int((delta < 0).sum())
    else:
        reversals = int((delta > 0).sum())
    return reversals / resamples


# ----- experiment drivers ---------------------------------------------------

@dataclass
class TreeComparisonReport:
    sources: list
    f1: dict
    mean_gate: dict
    deltas: dict
    best_epochs: dict

    def to_text(self):
        lines = []
        for s in self.sources:
            gate = self.mean_gate[s]
            gate_text = f"{gate:.4f}" if gate is not None else "n/a"
            lines.append(
                f"{s:12s} f1 {self.f1[s]:.4f}  mean graph gate {gate_text}"
                f"  best epoch {self.best_epochs[s]}"
            )
        for pair, d in self.deltas.items():
            lines.append(f"delta {pair}: {d:+.4f}")
        return "\n".join(lines) + "\n"


def compare_tree_sources(config, train_corpus, dev_corpus, test_corpus,
                         sources=("given", "random")):
    """Train once per tree source and score each on the test split.

    A source is "given", "random", or "predicted=PATH" where PATH is a
    corpus file whose heads and relations override the gold trees.
    Evaluation data passes through the same tree transformation as
    training data, so a model trained on random trees is also decoded
    with random trees.
    """
    from .training import build_model, prepare_corpus, train

    f1 = {}
    mean_gate = {}
    best_epochs = {}
    for source in sources:
        name, _, path = source.partition("=")
        if path:
            cfg = dataclasses.replace(config, tree_source=name,
                                      tree_file=path)
        else:
            cfg = dataclasses.replace(config, tree_source=name)
        cfg.validate()
        result = train(cfg, train_corpus, dev_corpus)
        model = build_model(result.checkpoint)
        test_t = prepare_corpus(test_corpus, cfg)
        pred = model.predict(test_t)
        f1[source] = entity_f1([s.labels for s in test_t], pred).f1
        if cfg.variant == "syn-lstm-crf":
            mean_gate[source] = model.mean_gate(test_t)
        else:
            mean_gate[source] = None
        best_epochs[source] = result.checkpoint.best_epoch
    deltas = {}
    names = list(sources)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            deltas[f"{a} vs {b}"] = f1[a] - f1[b]
    return TreeComparisonReport(names, f1, mean_gate, deltas, best_epochs)


@dataclass
class AblationResult:
    drop: str | None
    report: EvalReport
    best_epoch: int


def ablation_run(config, train_corpus, dev_corpus, test_corpus, drop):
    """Train with one component removed and score the test split."""
    from .training import build_model, prepare_corpus, train

    cfg = dataclasses.replace(config, drop=drop)
    cfg.validate()
    result = train(cfg, train_corpus, dev_corpus)
    model = build_model(result.checkpoint)
    test_t = prepare_corpus(test_corpus, cfg)
    pred = model.predict(test_t)
    report = entity_f1([s.labels for s in test_t], pred)
    return AblationResult(drop, report, result.checkpoint.best_epoch)
