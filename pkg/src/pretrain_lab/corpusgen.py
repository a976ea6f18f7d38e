"""Synthetic pre-training corpora.

Two unstructured baselines (i.i.d. draws from a token distribution) and the
stack-grammar corpus whose sequences carry a nesting structure: each push
emits a fresh token, each pop re-emits the token of its matching push.
Generation is deterministic per (config, seed) and parallelizable because
every record owns an RNG stream keyed by (master seed, record index).
"""

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptCorpusError, InvalidArgument
from .seeding import record_rng
from .vocab import N_SPECIAL, TokenDistribution, VocabSpec, sample_tokens

PUSH = "P"
POP = "O"


@dataclass
class SequenceRecord:
    """One training sequence: content-token ids plus optional push/pop labels.

    `labels`, when present, is a string of 'P'/'O' marks of the same length
    whose prefix pop-counts never exceed push-counts.
    """

    tokens: list[int]
    labels: str | None = None

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class GrammarConfig:
    """Stack-grammar parameters.

    At each step a Bernoulli draw with success probability `push_probability`
    chooses push (sample a token, emit it, stack it) versus pop (emit the top
    token). A pop drawn on an empty stack is resolved by `empty_stack_rule`;
    the only rule is "forced_push", which treats the step as a push. When
    `flush_at_end` is set, the stack is drained after the per-sequence target
    length is reached, so the sequence may exceed the target by its final
    stack depth.
    """

    push_probability: float
    dist: TokenDistribution
    length_min: int = 90
    length_max: int = 120
    flush_at_end: bool = True
    empty_stack_rule: str = "forced_push"

    def validate(self) -> None:
        if not (0 < self.push_probability <= 1):
            raise InvalidArgument(
                f"push_probability must be in (0, 1], got {self.push_probability}"
            )
        if not (1 <= self.length_min <= self.length_max):
            raise InvalidArgument(
                f"need 1 <= length_min <= length_max, got [{self.length_min}, {self.length_max}]"
            )
        if self.empty_stack_rule != "forced_push":
            raise InvalidArgument(f"unknown empty_stack_rule {self.empty_stack_rule!r}")

    def digest(self) -> str:
        parts = (
            "artificial",
            self.push_probability,
            self.dist.kind,
            self.dist.zipf_exponent,
            self.dist.bin_size,
            self.dist.vocab.content_size,
            self.length_min,
            self.length_max,
            self.flush_at_end,
            self.empty_stack_rule,
        )
        return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


@dataclass
class AnnotatedCorpus:
    """Generated records plus the vocabulary and generation provenance.

    Provenance is a flat string map written into the corpus file header;
    generator counters (forced pushes, flush pops, Bernoulli steps) live here
    because they cannot be reconstructed from labels alone.
    """

    records: list[SequenceRecord]
    vocab: VocabSpec
    provenance: dict[str, str] = field(default_factory=dict)

    @property
    def labeled(self) -> bool:
        return bool(self.records) and self.records[0].labels is not None

    @property
    def token_count(self) -> int:
        return sum(len(r) for r in self.records)

    def all_tokens(self) -> np.ndarray:
        if not self.records:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(r.tokens, dtype=np.int64) for r in self.records])


def _baseline_digest(dist: TokenDistribution, length_min: int, length_max: int) -> str:
    parts = (
        "baseline",
        dist.kind,
        dist.zipf_exponent,
        dist.bin_size,
        dist.vocab.content_size,
        length_min,
        length_max,
    )
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


def generate_baseline(
    dist: TokenDistribution,
    length_min: int,
    length_max: int,
    target_tokens: int,
    seed: int,
) -> AnnotatedCorpus:
    """I.i.d. token sequences with lengths uniform on [length_min, length_max].

    Generation stops at the first sequence boundary where the cumulative
    token count reaches `target_tokens`. Records carry no labels.
    """
    if not (1 <= length_min <= length_max):
        raise InvalidArgument(
            f"need 1 <= length_min <= length_max, got [{length_min}, {length_max}]"
        )
    if target_tokens < length_min:
        raise InvalidArgument(
            f"target_tokens {target_tokens} < length_min {length_min}"
        )
    records: list[SequenceRecord] = []
    total = 0
    idx = 0
    while total < target_tokens:
        rng = record_rng(seed, idx)
        length = int(rng.integers(length_min, length_max + 1))
        tokens = sample_tokens(dist, length, rng)
        records.append(SequenceRecord(tokens=tokens.tolist()))
        total += length
        idx += 1
    provenance = {
        "generator": "baseline",
        "seed": str(seed),
        "config_digest": _baseline_digest(dist, length_min, length_max),
        "target_tokens": str(target_tokens),
        "dist_kind": dist.kind,
    }
    return AnnotatedCorpus(records=records, vocab=dist.vocab, provenance=provenance)


def _generate_artificial_record(
    gc: GrammarConfig, rng: np.random.Generator
) -> tuple[SequenceRecord, int, int, int]:
    """One stack-grammar sequence.

    Returns (record, forced_pushes, flush_pops, bernoulli_steps). Structure
    decisions are drawn first, then the push tokens in push order, so the
    stream consumption is a fixed two-phase scheme.
    """
    target = int(rng.integers(gc.length_min, gc.length_max + 1))
    draws = rng.random(target)

    # Phase 1: structure. stack holds push-order indices.
    labels: list[str] = []
    emit_push_index: list[int] = []  # per position: index of the push it re-emits
    stack: list[int] = []
    n_push = 0
    forced = 0
    for t in range(target):
        push = draws[t] < gc.push_probability
        if not push and not stack:
            push = True  # forced_push rule: empty-stack pop becomes a push
            forced += 1
        if push:
            labels.append(PUSH)
            emit_push_index.append(n_push)
            stack.append(n_push)
            n_push += 1
        else:
            labels.append(POP)
            emit_push_index.append(stack.pop())

    flush_pops = 0
    if gc.flush_at_end:
        while stack:
            labels.append(POP)
            emit_push_index.append(stack.pop())
            flush_pops += 1

    # Phase 2: tokens, one draw per push.
    push_tokens = sample_tokens(gc.dist, n_push, rng)
    tokens = push_tokens[emit_push_index]
    record = SequenceRecord(tokens=tokens.tolist(), labels="".join(labels))
    return record, forced, flush_pops, target


def generate_artificial(
    gc: GrammarConfig, target_tokens: int, seed: int
) -> AnnotatedCorpus:
    """Stack-grammar corpus with per-position push/pop labels.

    Every record is well nested by construction; provenance records the
    counter totals needed to correct push-probability estimates.
    """
    gc.validate()
    if target_tokens < gc.length_min:
        raise InvalidArgument(
            f"target_tokens {target_tokens} < length_min {gc.length_min}"
        )
    records: list[SequenceRecord] = []
    total = 0
    idx = 0
    forced_total = 0
    flush_total = 0
    bernoulli_total = 0
    max_flush = 0
    while total < target_tokens:
        rng = record_rng(seed, idx)
        record, forced, flush_pops, steps = _generate_artificial_record(gc, rng)
        records.append(record)
        total += len(record)
        forced_total += forced
        flush_total += flush_pops
        bernoulli_total += steps
        max_flush = max(max_flush, flush_pops)
        idx += 1
    provenance = {
        "generator": "artificial",
        "seed": str(seed),
        "config_digest": gc.digest(),
        "target_tokens": str(target_tokens),
        "push_probability": repr(gc.push_probability),
        "flush_at_end": "true" if gc.flush_at_end else "false",
        "forced_pushes": str(forced_total),
        "flush_pops": str(flush_total),
        "bernoulli_steps": str(bernoulli_total),
        "max_flush_depth": str(max_flush),
    }
    return AnnotatedCorpus(records=records, vocab=gc.dist.vocab, provenance=provenance)


def ingest_text(path, vocab: VocabSpec) -> AnnotatedCorpus:
    """Plain-text ingestion: one record per non-empty line, whitespace tokens.

    Words outside the vocabulary are dropped (pre-training records must not
    contain special ids, so there is no unk fallback here); the drop count is
    recorded in provenance.
    """
    records: list[SequenceRecord] = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = line.split()
            if not words:
                continue
            ids = []
            for w in words:
                tid = vocab.token_to_id(w)
                if tid is None or tid < N_SPECIAL:
                    dropped += 1
                else:
                    ids.append(tid)
            if ids:
                records.append(SequenceRecord(tokens=ids))
    provenance = {
        "generator": "ingest",
        "seed": "0",
        "config_digest": "-",
        "target_tokens": str(sum(len(r) for r in records)),
        "source": os.path.basename(str(path)),
        "dropped_tokens": str(dropped),
    }
    return AnnotatedCorpus(records=records, vocab=vocab, provenance=provenance)


def _write_atomic(path, text: str) -> None:
    partial = f"{path}.partial"
    with open(partial, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(partial, path)


def serialize_corpus(corpus: AnnotatedCorpus, path) -> None:
    """Write the corpus text format.

    Header lines are `#!key=value` (generator, seed, vocab size, labeled
    flag, then the remaining provenance keys). Each record is a line of
    space-separated decimal token ids; labeled corpora follow each record
    line with a line of P/O marks of equal length. The file is written to
    `<path>.partial` and atomically renamed.
    """
    lines: list[str] = []
    labeled = corpus.labeled
    header = {
        "generator": corpus.provenance.get("generator", "unknown"),
        "seed": corpus.provenance.get("seed", "0"),
        "vocab_size": str(corpus.vocab.total_size),
        "labeled": "true" if labeled else "false",
    }
    for key, value in corpus.provenance.items():
        if key not in header:
            header[key] = str(value)
    for key, value in header.items():
        lines.append(f"#!{key}={value}")
    for rec in corpus.records:
        if (rec.labels is not None) != labeled:
            raise InvalidArgument("mixed labeled/unlabeled records in one corpus")
        lines.append(" ".join(str(t) for t in rec.tokens))
        if labeled:
            if len(rec.labels) != len(rec.tokens):
                raise InvalidArgument("label length != token length")
            lines.append(rec.labels)
    _write_atomic(path, "\n".join(lines) + "\n")


def read_corpus(path, vocab: VocabSpec) -> AnnotatedCorpus:
    """Read a corpus file back; inverse of serialize_corpus.

    Raises CorruptCorpusError on ids outside the vocabulary, special ids in
    record lines, label/token length mismatches, or a missing label line.
    """
    provenance: dict[str, str] = {}
    records: list[SequenceRecord] = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#!"):
            body_start = i + 1
            key, sep, value = line[2:].partition("=")
            if not sep:
                raise CorruptCorpusError(f"{path}: bad header line {i + 1}: {line!r}")
            provenance[key] = value
        else:
            break
    labeled = provenance.get("labeled", "false") == "true"
    declared_vocab = provenance.get("vocab_size")
    if declared_vocab is not None and int(declared_vocab) != vocab.total_size:
        raise CorruptCorpusError(
            f"{path}: header vocab_size {declared_vocab} != vocab total {vocab.total_size}"
        )
    body = [l for l in lines[body_start:] if l.strip()]
    step = 2 if labeled else 1
    if labeled and len(body) % 2 != 0:
        raise CorruptCorpusError(f"{path}: labeled corpus with odd line count")
    for j in range(0, len(body), step):
        try:
            tokens = [int(t) for t in body[j].split()]
        except ValueError:
            raise CorruptCorpusError(
                f"{path}: non-integer token in record {j // step}"
            ) from None
        for t in tokens:
            if t < 0 or t >= vocab.total_size:
                raise CorruptCorpusError(
                    f"{path}: token id {t} outside vocab of size {vocab.total_size}"
                )
            if t < N_SPECIAL:
                raise CorruptCorpusError(
                    f"{path}: special token id {t} in record {j // step}"
                )
        labels = None
        if labeled:
            labels = body[j + 1].strip()
            if set(labels) - {PUSH, POP}:
                raise CorruptCorpusError(
                    f"{path}: bad label characters in record {j // step}"
                )
            if len(labels) != len(tokens):
                raise CorruptCorpusError(
                    f"{path}: label length {len(labels)} != token count {len(tokens)}"
                )
        records.append(SequenceRecord(tokens=tokens, labels=labels))
    # drop the keys serialize_corpus synthesizes so round-trips compare equal
    provenance.pop("vocab_size", None)
    provenance.pop("labeled", None)
    return AnnotatedCorpus(records=records, vocab=vocab, provenance=provenance)


def split_records(
    corpus: AnnotatedCorpus, eval_fraction: float, seed: int
) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    """Deterministic train/eval split by shuffled record index."""
    if not (0 <= eval_fraction < 1):
        raise InvalidArgument(f"eval_fraction must be in [0, 1), got {eval_fraction}")
    n = len(corpus.records)
    n_eval = int(round(n * eval_fraction))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = rng.permutation(n)
    eval_idx = set(order[:n_eval].tolist())
    train = [corpus.records[i] for i in range(n) if i not in eval_idx]
    held = [corpus.records[i] for i in range(n) if i in eval_idx]
    return train, held
