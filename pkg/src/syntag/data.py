"""Corpus ingestion, vocabularies, label schemes and embedding files.

The corpus format is a CoNLL-like TSV: one token per line with columns
``index  form  pos  head  deprel  ner`` (tab-separated), a blank line between
sentences, and ``#``-prefixed comment lines. Heads are 1-based with 0 marking
the syntactic root.

Label sequences are segment encodings in either BIO or BIOES. Spans are the
common currency: both schemes decode to (start, end, type) triples and encode
back, which is how scheme conversion and evaluation are implemented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    DataIntegrityError,
    FormatError,
    ParseError,
    SchemeError,
    TreeValidationError,
)

PAD = "<pad>"
UNK = "<unk>"
SCHEMES = ("bio", "bioes")


@dataclass
class Sentence:
    """One annotated sentence: surface forms plus POS, dependency tree, labels.

    heads[i] is the 1-based index of token i's head, 0 for the root.
    """

    tokens: list
    pos_tags: list
    heads: list
    deprels: list
    labels: list

    def __len__(self):
        return len(self.tokens)

    def copy(self):
        return Sentence(
            list(self.tokens),
            list(self.pos_tags),
            list(self.heads),
            list(self.deprels),
            list(self.labels),
        )


def validate_tree(heads, sentence_index=None):
    """Check that a head list encodes a single rooted tree.

    Raises TreeValidationError otherwise. The walk-to-root check below is
    enough: with exactly one zero head, n nodes have n-1 parent edges, and
    the structure is a tree iff no walk revisits a node.
    """
    n = len(heads)
    where = f" in sentence {sentence_index}" if sentence_index is not None else ""
    roots = [i for i, h in enumerate(heads) if h == 0]
    for i, h in enumerate(heads):
        if not 0 <= h <= n:
            raise TreeValidationError(
                f"head {h} of token {i + 1} out of range 0..{n}{where}"
            )
        if h == i + 1:
            raise TreeValidationError(f"token {i + 1} is its own head{where}")
    if len(roots) != 1:
        raise TreeValidationError(
            f"expected exactly one root, found {len(roots)}{where}"
        )
    for start in range(n):
        seen = set()
        node = start
        while heads[node] != 0:
            if node in seen:
                raise TreeValidationError(
                    f"cycle through token {start + 1}{where}"
                )
            seen.add(node)
            node = heads[node] - 1


def validate_labels(labels, scheme="bioes"):
    """Raise SchemeError if ``labels`` is not valid under ``scheme``."""
    if scheme not in SCHEMES:
        raise ContractError(f"unknown label scheme {scheme!r}")
    open_type = None  # entity type whose segment is awaiting continuation
    for i, tag in enumerate(labels):
        kind, etype = _split_tag(tag, i)
        if scheme == "bio" and kind in ("E", "S"):
            raise SchemeError(f"tag {tag!r} at position {i} not valid under bio")
        if kind == "O":
            if open_type is not None:
                raise SchemeError(f"unterminated segment before position {i}")
            continue
        if kind == "B":
            if open_type is not None:
                raise SchemeError(f"unterminated segment before position {i}")
            if scheme == "bioes":
                open_type = etype
            # bio: a B can be followed by anything, nothing to track
        elif kind == "S":
            if open_type is not None:
                raise SchemeError(f"unterminated segment before position {i}")
        elif kind == "I":
            if scheme == "bio":
                if i == 0 or not _continues(labels[i - 1], etype):
                    raise SchemeError(f"dangling {tag!r} at position {i}")
            else:
                if open_type != etype:
                    raise SchemeError(f"dangling {tag!r} at position {i}")
        elif kind == "E":
            if open_type != etype:
                raise SchemeError(f"dangling {tag!r} at position {i}")
            open_type = None
    if open_type is not None:
        raise SchemeError(f"segment open at end of sequence (type {open_type})")


def _split_tag(tag, position):
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BIES":
        return tag[0], tag[2:]
    raise SchemeError(f"malformed tag {tag!r} at position {position}")


def _continues(prev_tag, etype):
    return prev_tag in (f"B-{etype}", f"I-{etype}")


def decode_label_spans(labels, scheme="bioes", drop_malformed=False):
    """Decode a tag sequence into (start, end, type) triples, end inclusive.

    With drop_malformed=True the input may be arbitrary (model output):
    segments that do not form a complete well-formed chunk are silently
    skipped. With drop_malformed=False the sequence is validated first.
    """
    if not drop_malformed:
        validate_labels(labels, scheme)
    spans = []
    n = len(labels)
    i = 0
    while i < n:
        try:
            kind, etype = _split_tag(labels[i], i)
        except SchemeError:
            i += 1  # unparseable tag; only reachable in drop mode
            continue
        if scheme == "bio":
            if kind == "B":
                j = i + 1
                while j < n and labels[j] == f"I-{etype}":
                    j += 1
                spans.append((i, j - 1, etype))
                i = j
            else:
                i += 1  # O, orphan I, or a tag outside the scheme
        else:
            if kind == "S":
                spans.append((i, i, etype))
                i += 1
            elif kind == "B":
                j = i + 1
                while j < n and labels[j] == f"I-{etype}":
                    j += 1
                if j < n and labels[j] == f"E-{etype}":
                    spans.append((i, j, etype))
                    i = j + 1
                else:
                    i += 1  # incomplete segment: drop its B, rescan after it
            else:
                i += 1  # O or orphan I/E
    return spans


def encode_label_spans(spans, n, scheme="bioes"):
    """Inverse of decode_label_spans for non-overlapping sorted spans."""
    labels = ["O"] * n
    last_end = -1
    for start, end, etype in sorted(spans):
        if start <= last_end:
            raise ContractError(f"overlapping spans at token {start}")
        if not 0 <= start <= end < n:
            raise ContractError(f"span ({start}, {end}) outside sentence of length {n}")
        last_end = end
        if scheme == "bio":
            labels[start] = f"B-{etype}"
            for k in range(start + 1, end + 1):
                labels[k] = f"I-{etype}"
        elif start == end:
            labels[start] = f"S-{etype}"
        else:
            labels[start] = f"B-{etype}"
            for k in range(start + 1, end):
                labels[k] = f"I-{etype}"
            labels[end] = f"E-{etype}"
    return labels


def convert_label_scheme(labels, from_scheme, to_scheme):
    """Re-encode a valid tag sequence from one scheme into another."""
    if from_scheme not in SCHEMES or to_scheme not in SCHEMES:
        raise ContractError(f"unknown scheme in {from_scheme!r} -> {to_scheme!r}")
    spans = decode_label_spans(labels, from_scheme)
    if from_scheme == to_scheme:
        return list(labels)
    return encode_label_spans(spans, len(labels), to_scheme)


def parse_corpus(path, label_scheme="bioes"):
    """Read a TSV corpus file into a list of Sentences.

    Every sentence is validated: column arity and integer fields (ParseError
    with the line number), tree structure (TreeValidationError with the
    sentence index), and label-scheme validity (SchemeError).
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    return _parse_lines(lines, label_scheme)


def _parse_lines(lines, label_scheme):
    sentences = []
    block = []
    for line_no, line in enumerate(lines, start=1):
        if line.startswith("#"):
            continue
        if line.strip() == "":
            if block:
                sentences.append(_build_sentence(block, len(sentences), label_scheme))
                block = []
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise ParseError(
                f"line {line_no}: expected 6 tab-separated columns, got {len(cols)}"
            )
        idx_s, form, pos, head_s, deprel, ner = cols
        try:
            idx = int(idx_s)
        except ValueError:
            raise ParseError(f"line {line_no}: token index {idx_s!r} is not an integer") from None
        if idx != len(block) + 1:
            raise ParseError(
                f"line {line_no}: token index {idx}, expected {len(block) + 1}"
            )
        try:
            head = int(head_s)
        except ValueError:
            raise ParseError(f"line {line_no}: head {head_s!r} is not an integer") from None
        if form == "":
            raise ParseError(f"line {line_no}: empty token form")
        block.append((form, pos, head, deprel, ner))
    if block:
        sentences.append(_build_sentence(block, len(sentences), label_scheme))
    return sentences


def _build_sentence(rows, sent_index, label_scheme):
    tokens = [r[0] for r in rows]
    pos_tags = [r[1] for r in rows]
    heads = [r[2] for r in rows]
    deprels = [r[3] for r in rows]
    labels = [r[4] for r in rows]
    validate_tree(heads, sentence_index=sent_index)
    try:
        validate_labels(labels, label_scheme)
    except SchemeError as exc:
        raise SchemeError(f"sentence {sent_index}: {exc}") from None
    return Sentence(tokens, pos_tags, heads, deprels, labels)


def serialize_corpus(sentences):
    """Render sentences back into the TSV format parse_corpus reads."""
    blocks = []
    for s in sentences:
        rows = []
        for i in range(len(s)):
            rows.append(
                f"{i + 1}\t{s.tokens[i]}\t{s.pos_tags[i]}\t{s.heads[i]}"
                f"\t{s.deprels[i]}\t{s.labels[i]}"
            )
        blocks.append("\n".join(rows))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def write_corpus(sentences, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_corpus(sentences))


class Vocabulary:
    """Dense 0-based id maps for words, characters, POS, deprels and labels.

    Words and characters reserve PAD=0 and UNK=1. POS and deprel maps do the
    same so padded positions can share id 0 everywhere. The label set is
    closed: looking up an unknown label is a contract violation, not UNK.

    Word lookup is case-sensitive with a lowercase fallback before UNK.
    """

    def __init__(self, words, chars, pos_tags, deprels, labels):
        self.words = dict(words)
        self.chars = dict(chars)
        self.pos_tags = dict(pos_tags)
        self.deprels = dict(deprels)
        self.labels = dict(labels)
        self.label_names = [None] * len(self.labels)
        for name, i in self.labels.items():
            self.label_names[i] = name

    @property
    def num_labels(self):
        return len(self.labels)

    def word_id(self, token):
        wid = self.words.get(token)
        if wid is None:
            wid = self.words.get(token.lower(), 1)
        return wid

    def char_id(self, ch):
        return self.chars.get(ch, 1)

    def pos_id(self, tag):
        return self.pos_tags.get(tag, 1)

    def deprel_id(self, rel):
        return self.deprels.get(rel, 1)

    def label_id(self, name):
        try:
            return self.labels[name]
        except KeyError:
            raise ContractError(f"label {name!r} not in the training label set") from None

    def label_name(self, i):
        if not 0 <= i < len(self.label_names):
            raise ContractError(f"label id {i} out of range")
        return self.label_names[i]

    def deprel_names(self):
        out = [None] * len(self.deprels)
        for name, i in self.deprels.items():
            out[i] = name
        return [n for n in out if n not in (PAD, UNK)]

    def to_dict(self):
        return {
            "words": self.words,
            "chars": self.chars,
            "pos_tags": self.pos_tags,
            "deprels": self.deprels,
            "labels": self.labels,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["words"], d["chars"], d["pos_tags"], d["deprels"], d["labels"])
        except KeyError as exc:
            raise FormatError(f"vocabulary block missing key {exc}") from None

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()


def build_vocab(corpus, min_count=1):
    """Collect vocabularies from a training corpus.

    Words below min_count map to UNK at lookup time. Everything is ordered
    by first appearance so ids are reproducible.
    """
    if not corpus:
        raise ContractError("build_vocab needs a non-empty corpus")
    counts = {}
    word_order = []
    chars = {PAD: 0, UNK: 1}
    pos_tags = {PAD: 0, UNK: 1}
    deprels = {PAD: 0, UNK: 1}
    labels = {}
    for s in corpus:
        for tok in s.tokens:
            if tok not in counts:
                counts[tok] = 0
                word_order.append(tok)
            counts[tok] += 1
            for ch in tok:
                chars.setdefault(ch, len(chars))
        for tag in s.pos_tags:
            pos_tags.setdefault(tag, len(pos_tags))
        for rel in s.deprels:
            deprels.setdefault(rel, len(deprels))
        for lab in s.labels:
            labels.setdefault(lab, len(labels))
    words = {PAD: 0, UNK: 1}
    for tok in word_order:
        if counts[tok] >= min_count:
            words.setdefault(tok, len(words))
    return Vocabulary(words, chars, pos_tags, deprels, labels)


def embedding_init(rng, shape, dim=None):
    """Random rows for embedding tables: uniform with 1/sqrt(D) scale."""
    d = shape[-1] if dim is None else dim
    bound = np.sqrt(3.0 / d)
    return rng.uniform(-bound, bound, size=shape)


def load_embeddings(path, vocab, rng):
    """Load pretrained word vectors for every word in ``vocab``.

    The file has one ``token v1 ... vD`` line per word; an optional first
    line ``count D`` (two integers) is detected and skipped. Vocabulary
    words absent from the file keep their random initialization, drawn
    first so the result is reproducible for a given rng. The PAD row is
    zero. Returns a (num_words, D) float64 matrix.
    """
    vectors = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if line_no == 1 and len(parts) == 2 and _both_ints(parts):
                continue  # header line
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise FormatError(f"line {line_no}: no vector values")
            elif len(values) != dim:
                raise FormatError(
                    f"line {line_no}: expected {dim} values, got {len(values)}"
                )
            try:
                vectors[token] = np.array([float(v) for v in values])
            except ValueError:
                raise FormatError(f"line {line_no}: non-numeric vector value") from None
    if dim is None:
        raise FormatError("embedding file contains no vectors")
    matrix = embedding_init(rng, (len(vocab.words), dim))
    matrix[0] = 0.0  # PAD
    for token, wid in vocab.words.items():
        if token in (PAD, UNK):
            continue
        vec = vectors.get(token)
        if vec is None:
            vec = vectors.get(token.lower())
        if vec is not None:
            matrix[wid] = vec
    return matrix


def _both_ints(parts):
    try:
        int(parts[0]), int(parts[1])
    except ValueError:
        return False
    return True


def corpus_alignment_check(a, b):
    """Verify two corpora have the same shape (for tree overrides)."""
    if len(a) != len(b):
        raise DataIntegrityError(
            f"corpora differ in sentence count: {len(a)} vs {len(b)}"
        )
    for i, (sa, sb) in enumerate(zip(a, b)):
        if len(sa) != len(sb):
            raise DataIntegrityError(
                f"sentence {i} differs in length: {len(sa)} vs {len(sb)}"
            )
