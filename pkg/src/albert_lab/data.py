"""Corpus to training instances: vocabulary, sentence pairs, n-gram masking, batching.

Corpus format: UTF-8 text, one segment per line, blank lines between documents.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .tensor import IGNORE_INDEX

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)


class DataError(ValueError):
    """Corpus or instance contract violated."""


# -- tokenizer / vocabulary -------------------------------------------

class WhitespaceTokenizer:
    """Lowercased whitespace splitting; swap in a subword tokenizer with the same method."""

    def tokenize(self, text: str) -> list[str]:
        return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(list(tokens))


def build_vocabulary(lines: Iterable[str], max_size: int, tokenizer=None) -> Vocabulary:
    """Specials first, then tokens by descending count (ties by first occurrence)."""
    if max_size < NUM_SPECIAL + 1:
        raise DataError(f"max_size {max_size} cannot hold the {NUM_SPECIAL} specials plus one token")
    tok = tokenizer or WhitespaceTokenizer()
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    for line in lines:
        for w in tok.tokenize(line):
            if w in SPECIAL_TOKENS:
                continue
            counts[w] += 1
            first.setdefault(w, len(first))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], first[w]))
    return Vocabulary(list(SPECIAL_TOKENS) + ranked[: max_size - NUM_SPECIAL])


# -- documents ----------------------------------------------------------

@dataclass
class Document:
    segments: list[list[int]]
    doc_id: int = 0


def read_raw_documents(path, tokenizer=None) -> Iterator[list[list[str]]]:
    """Yield documents as lists of tokenized segments."""
    tok = tokenizer or WhitespaceTokenizer()
    current: list[list[str]] = []
    emitted = False
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = tok.tokenize(line)
            if words:
                current.append(words)
            elif current:
                yield current
                emitted = True
                current = []
    if current:
        yield current
        emitted = True
    if not emitted:
        log.warning("corpus %s contains no documents", path)


def read_documents(path, vocab: Vocabulary, tokenizer=None) -> Iterator[Document]:
    for i, raw in enumerate(read_raw_documents(path, tokenizer)):
        yield Document([vocab.encode(seg) for seg in raw], doc_id=i)


def corpus_lines(path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        yield from fh


# -- instances ----------------------------------------------------------

@dataclass
class MaskingConfig:
    max_ngram: int = 3
    mask_budget_fraction: float = 0.15
    replace_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.replace_probs = tuple(float(p) for p in self.replace_probs)
        if self.max_ngram < 1:
            raise DataError(f"max_ngram must be >= 1, got {self.max_ngram}")
        if not 0.0 < self.mask_budget_fraction < 1.0:
            raise DataError(f"mask_budget_fraction must be in (0, 1), got {self.mask_budget_fraction}")
        if len(self.replace_probs) != 3 or min(self.replace_probs) < 0 or abs(sum(self.replace_probs) - 1.0) > 1e-9:
            raise DataError(f"replace_probs must be three nonnegative values summing to 1, got {self.replace_probs}")

    def span_length_probs(self) -> np.ndarray:
        """p(n) proportional to 1/n for n = 1..max_ngram."""
        inv = 1.0 / np.arange(1, self.max_ngram + 1)
        return inv / inv.sum()


@dataclass
class TrainingInstance:
    token_ids: list[int]
    segment_ids: list[int]
    masked_positions: list[int] = field(default_factory=list)
    masked_targets: list[int] = field(default_factory=list)
    sp_label: int | None = None
    objective: str = "mlm_sop"
    padding_mask: list[bool] | None = None
    # provenance: ((doc, segment) of the first side, (doc, segment) of the second side)
    source: tuple | None = None
    short_target: int | None = None
    # n-gram lengths as drawn, before boundary/budget truncation
    span_lengths: list[int] = field(default_factory=list)
    unmaskable: bool = False

    def __post_init__(self):
        if self.padding_mask is None:
            self.padding_mask = [t != PAD for t in self.token_ids]

    def __len__(self) -> int:
        return len(self.token_ids)

    def to_json(self) -> dict:
        return {
            "token_ids": list(self.token_ids),
            "segment_ids": list(self.segment_ids),
            "masked_positions": list(self.masked_positions),
            "masked_targets": list(self.masked_targets),
            "sp_label": self.sp_label,
        }

    @classmethod
    def from_json(cls, d: dict, objective: str | None = None) -> "TrainingInstance":
        obj = objective or ("mlm_only" if d.get("sp_label") is None else "mlm_sop")
        return cls(
            token_ids=list(d["token_ids"]),
            segment_ids=list(d["segment_ids"]),
            masked_positions=list(d.get("masked_positions", [])),
            masked_targets=list(d.get("masked_targets", [])),
            sp_label=d.get("sp_label"),
            objective=obj,
        )


def sample_span_length(mc: MaskingConfig, rng: np.random.Generator) -> int:
    if mc.max_ngram == 1:
        return 1
    return int(rng.choice(mc.max_ngram, p=mc.span_length_probs())) + 1


def apply_masking(
    inst: TrainingInstance, mc: MaskingConfig, vocab_size: int, rng: np.random.Generator
) -> TrainingInstance:
    """Cover ceil(budget * usable) positions with n-gram spans and corrupt them.

    Spans never cross a special token or padding, never overlap an earlier
    span and are cut at the remaining budget, so the masked count is exact.
    Each span is corrupted as a unit: [MASK], a random word, or unchanged.
    """
    if inst.masked_positions:
        raise DataError("instance is already masked")
    ids = list(inst.token_ids)
    n = len(ids)
    usable = np.array([t >= NUM_SPECIAL for t in ids], dtype=bool)
    if inst.padding_mask is not None:
        usable &= np.asarray(inst.padding_mask, dtype=bool)
    total = int(usable.sum())
    if total == 0:
        return _replace(inst, unmaskable=True)
    budget = math.ceil(mc.mask_budget_fraction * total)
    free = usable.copy()
    covered: list[int] = []
    spans: list[int] = []
    while len(covered) < budget:
        sampled = sample_span_length(mc, rng)
        length = min(sampled, budget - len(covered))
        candidates = np.flatnonzero(free)
        start = int(candidates[rng.integers(len(candidates))])
        span = []
        pos = start
        while pos < n and free[pos] and len(span) < length:
            span.append(pos)
            pos += 1
        free[span] = False
        covered.extend(span)
        spans.append(sampled)

        action = rng.choice(3, p=mc.replace_probs)
        for pos in span:
            if action == 0:
                ids[pos] = MASK
            elif action == 1:
                ids[pos] = int(rng.integers(NUM_SPECIAL, vocab_size))
    order = sorted(covered)
    return _replace(
        inst,
        token_ids=ids,
        masked_positions=order,
        masked_targets=[inst.token_ids[p] for p in order],
        span_lengths=spans,
    )


def _replace(inst: TrainingInstance, **changes) -> TrainingInstance:
    d = dict(inst.__dict__)
    d.update(changes)
    return TrainingInstance(**d)


def _truncate_pair(a: list[int], b: list[int], budget: int) -> tuple[list[int], list[int]]:
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return a, b


class InstanceSampler:
    """Draws sentence-pair (or single-segment) instances from a fixed document list."""

    def __init__(self, docs: Sequence[Document], objective: str, max_len: int = 512, short_prob: float = 0.1):
        if objective not in ("mlm_only", "mlm_nsp", "mlm_sop"):
            raise DataError(f"unknown objective {objective!r}")
        if max_len < 8:
            raise DataError(f"max_len must be at least 8, got {max_len}")
        if not 0.0 <= short_prob <= 1.0:
            raise DataError(f"short_prob must be in [0, 1], got {short_prob}")
        self.docs = [d for d in docs if d.segments]
        self.objective = objective
        self.max_len = max_len
        self.short_prob = short_prob
        if objective == "mlm_only":
            self.eligible = list(range(len(self.docs)))
            if not self.eligible:
                raise DataError("corpus has no documents")
        else:
            self.eligible = [i for i, d in enumerate(self.docs) if len(d.segments) >= 2]
            if not self.eligible:
                raise DataError(f"{objective} needs at least one document with two or more segments")
            if objective == "mlm_nsp" and len(self.docs) < 2:
                raise DataError("mlm_nsp needs at least two documents for negative pairs")

    def _target_length(self, rng) -> tuple[int, int | None]:
        if rng.random() < self.short_prob:
            lo = min(16, self.max_len - 1)
            target = int(rng.integers(lo, self.max_len))
            return target, target
        return self.max_len, None

    def sample(self, rng: np.random.Generator) -> TrainingInstance:
        target, short = self._target_length(rng)
        di = self.eligible[int(rng.integers(len(self.eligible)))]
        doc = self.docs[di]
        if self.objective == "mlm_only":
            si = int(rng.integers(len(doc.segments)))
            words: list[int] = []
            for seg in doc.segments[si:]:
                words.extend(seg)
                if len(words) >= target - 2:
                    break
            words = words[: target - 2]
            return TrainingInstance(
                token_ids=[CLS] + words + [SEP],
                segment_ids=[0] * (len(words) + 2),
                objective="mlm_only",
                source=((di, si),),
                short_target=short,
            )

        si = int(rng.integers(len(doc.segments) - 1))
        first, second = (di, si), (di, si + 1)
        label = int(rng.random() >= 0.5)
        if label == 1 and self.objective == "mlm_nsp":
            others = len(self.docs) - 1
            dj = int(rng.integers(others))
            dj = dj + 1 if dj >= di else dj
            second = (dj, int(rng.integers(len(self.docs[dj].segments))))
        a = self.docs[first[0]].segments[first[1]]
        b = self.docs[second[0]].segments[second[1]]
        a, b = _truncate_pair(a, b, target - 3)
        if label == 1 and self.objective == "mlm_sop":
            a, b = b, a
            first, second = second, first
        return TrainingInstance(
            token_ids=[CLS] + a + [SEP] + b + [SEP],
            segment_ids=[0] * (len(a) + 2) + [1] * (len(b) + 1),
            sp_label=label,
            objective=self.objective,
            source=(first, second),
            short_target=short,
        )


def make_sentence_pair_instance(
    docs: Sequence[Document], objective: str, max_len: int, short_prob: float, rng: np.random.Generator
) -> TrainingInstance:
    return InstanceSampler(docs, objective, max_len, short_prob).sample(rng)


def generate_instances(
    docs: Sequence[Document],
    objective: str,
    count: int,
    max_len: int,
    masking: MaskingConfig | None,
    vocab_size: int,
    seed: int,
    short_prob: float = 0.1,
) -> list[TrainingInstance]:
    """Deterministic instance stream: same (docs, config, seed) gives the same list."""
    sampler = InstanceSampler(docs, objective, max_len, short_prob)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        inst = sampler.sample(rng)
        if masking is not None:
            inst = apply_masking(inst, masking, vocab_size, rng)
        out.append(inst)
    return out


def validate_instance(
    inst: TrainingInstance, max_len: int, docs: Sequence[Document] | None = None
) -> list[str]:
    """Return the list of violated instance invariants (empty when well formed)."""
    problems = []
    ids = inst.token_ids
    n = len(ids)
    if n > max_len:
        problems.append(f"length {n} > max_len {max_len}")
    if len(inst.segment_ids) != n:
        problems.append("segment_ids length differs from token_ids")
    if not ids or ids[0] != CLS:
        problems.append("first token is not [CLS]")
    seps = sum(1 for t in ids if t == SEP)
    want = 1 if inst.objective == "mlm_only" else 2
    if seps != want:
        problems.append(f"{seps} [SEP] tokens, expected {want}")
    pad = inst.padding_mask or [True] * n
    specials = {CLS, SEP, PAD}
    originals = dict(zip(inst.masked_positions, inst.masked_targets))
    for p in inst.masked_positions:
        if not 0 <= p < n:
            problems.append(f"masked position {p} out of range")
        elif not pad[p]:
            problems.append(f"masked position {p} is padding")
        elif originals[p] in specials or originals[p] < NUM_SPECIAL:
            problems.append(f"masked position {p} covers a special token")
    if len(inst.masked_positions) != len(inst.masked_targets):
        problems.append("masked_positions and masked_targets differ in length")
    if inst.objective != "mlm_only":
        if inst.sp_label not in (0, 1):
            problems.append(f"sp_label {inst.sp_label!r} not in (0, 1)")
        if seps == 2:
            sep1 = ids.index(SEP)
            if any(s != 0 for s in inst.segment_ids[: sep1 + 1]) or any(s != 1 for s in inst.segment_ids[sep1 + 1:]):
                problems.append("segment ids do not match [SEP] layout")
            if docs is not None and inst.source is not None:
                problems.extend(_check_pair_source(inst, docs, sep1))
    return problems


def _unmasked_tokens(inst: TrainingInstance) -> list[int]:
    ids = list(inst.token_ids)
    for p, t in zip(inst.masked_positions, inst.masked_targets):
        ids[p] = t
    return ids


def _check_pair_source(inst: TrainingInstance, docs: Sequence[Document], sep1: int) -> list[str]:
    problems = []
    (da, sa), (db, sb) = inst.source
    ids = _unmasked_tokens(inst)
    a, b = ids[1:sep1], ids[sep1 + 1:-1]
    seg_a, seg_b = docs[da].segments[sa], docs[db].segments[sb]
    if seg_a[: len(a)] != a or seg_b[: len(b)] != b:
        problems.append("packed segments are not prefixes of their recorded sources")
    if inst.sp_label == 0:
        if da != db or sb != sa + 1:
            problems.append("positive pair is not two consecutive in-order segments")
    elif inst.objective == "mlm_sop":
        if da != db or sa != sb + 1:
            problems.append("SOP negative is not an order swap of consecutive segments")
        else:
            pa, pb = _truncate_pair(seg_b, seg_a, len(a) + len(b))
            if sorted(pa + pb) != sorted(a + b):
                problems.append("SOP negative token multiset differs from its positive")
    elif inst.objective == "mlm_nsp" and da == db:
        problems.append("NSP negative second segment comes from the same document")
    return problems


# -- batching -----------------------------------------------------------

@dataclass
class Batch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    padding_mask: np.ndarray
    mlm_targets: np.ndarray
    masked_positions: list[list[int]]
    sp_labels: np.ndarray | None

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def pack_batch(instances: Sequence[TrainingInstance], max_len: int = 512, pad_id: int = PAD) -> Batch:
    """Right-pad to the longest instance; MLM targets are IGNORE_INDEX off the masked positions."""
    if not instances:
        raise DataError("cannot pack an empty batch")
    longest = max(len(i) for i in instances)
    if longest > max_len:
        raise DataError(f"instance of length {longest} exceeds max_len {max_len}")
    b = len(instances)
    ids = np.full((b, longest), pad_id, dtype=np.int64)
    seg = np.zeros((b, longest), dtype=np.int64)
    mask = np.zeros((b, longest), dtype=bool)
    targets = np.full((b, longest), IGNORE_INDEX, dtype=np.int64)
    for r, inst in enumerate(instances):
        n = len(inst)
        ids[r, :n] = inst.token_ids
        seg[r, :n] = inst.segment_ids
        mask[r, :n] = True
        if inst.masked_positions:
            targets[r, inst.masked_positions] = inst.masked_targets
    labels = None
    if all(i.sp_label is not None for i in instances):
        labels = np.array([i.sp_label for i in instances], dtype=np.int64)
    return Batch(ids, seg, mask, targets, [list(i.masked_positions) for i in instances], labels)


def iter_batches(instances: Sequence[TrainingInstance], batch_size: int, max_len: int = 512) -> Iterator[Batch]:
    if batch_size < 1:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    for i in range(0, len(instances), batch_size):
        yield pack_batch(instances[i:i + batch_size], max_len)


# -- dumps --------------------------------------------------------------

def write_instances(path, instances: Iterable[TrainingInstance]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json()) + "\n")
            n += 1
    return n


def read_instances(path, objective: str | None = None) -> list[TrainingInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(TrainingInstance.from_json(json.loads(line), objective))
    return out


def instance_stats(instances: Sequence[TrainingInstance], mc: MaskingConfig, max_len: int) -> dict:
    """Span-length histogram vs p(n), label balance and length distribution."""
    spans = Counter(n for inst in instances for n in inst.span_lengths)
    nspans = sum(spans.values()) or 1
    probs = mc.span_length_probs()
    labels = [i.sp_label for i in instances if i.sp_label is not None]
    lengths = np.array([len(i) for i in instances])
    return {
        "instances": len(instances),
        "span_length": {
            str(n): {"observed": spans.get(n, 0) / nspans, "expected": float(probs[n - 1])}
            for n in range(1, mc.max_ngram + 1)
        },
        "positive_fraction": (labels.count(0) / len(labels)) if labels else None,
        "short_rule_fraction": sum(i.short_target is not None for i in instances) / max(len(instances), 1),
        "length": {
            "min": int(lengths.min()) if len(lengths) else 0,
            "mean": float(lengths.mean()) if len(lengths) else 0.0,
            "max": int(lengths.max()) if len(lengths) else 0,
            "max_len": max_len,
        },
    }
