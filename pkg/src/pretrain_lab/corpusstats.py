"""Statistical validation of generated corpora.

These are the measurable signatures the ablations rely on: nesting
soundness, push-probability recovery, rank-frequency exponent, and
distributional distance.
"""

from dataclasses import dataclass

import numpy as np

from .corpusgen import POP, PUSH, AnnotatedCorpus, SequenceRecord
from .errors import InvalidArgument, MissingLabelsError
from .vocab import N_SPECIAL, TokenDistribution

ZIPF_FIT_MIN_COUNT = 5


@dataclass(frozen=True)
class NestingResult:
    ok: bool
    position: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_nesting(record: SequenceRecord, require_flushed: bool = False) -> NestingResult:
    """Replay the stack per labels and check the matching discipline.

    ok iff no pop happens on an empty stack, every pop emits the token of its
    matching push, and (when `require_flushed`) the stack ends empty. On
    violation, `position` is the first offending index.
    """
    if record.labels is None:
        raise MissingLabelsError("verify_nesting needs a labeled record")
    if len(record.labels) != len(record.tokens):
        return NestingResult(False, 0, "label/token length mismatch")
    stack: list[int] = []
    for k, (tok, lab) in enumerate(zip(record.tokens, record.labels)):
        if lab == PUSH:
            stack.append(tok)
        elif lab == POP:
            if not stack:
                return NestingResult(False, k, "pop on empty stack")
            expected = stack.pop()
            if expected != tok:
                return NestingResult(
                    False, k, f"pop expected token {expected}, found {tok} (mismatch)"
                )
        else:
            return NestingResult(False, k, f"bad label {lab!r}")
    if require_flushed and stack:
        return NestingResult(False, len(record.tokens), "stack not empty at end")
    return NestingResult(True)


def is_well_nested(tokens) -> bool:
    """Label-free check: can `tokens` be produced by the grammar and flushed?

    Equivalent to reducibility to the empty word by repeatedly deleting
    adjacent equal pairs; that rewriting system is confluent, so the greedy
    stack cancellation below decides membership exactly.
    """
    stack: list[int] = []
    for t in tokens:
        if stack and stack[-1] == t:
            stack.pop()
        else:
            stack.append(t)
    return not stack


@dataclass(frozen=True)
class PushEstimate:
    p_hat: float
    raw_push_fraction: float
    forced_pushes: int
    flush_pops: int
    bernoulli_steps: int


def estimate_push_probability(corpus: AnnotatedCorpus) -> PushEstimate:
    """Recover the Bernoulli push probability from a labeled corpus.

    Forced pushes and flush pops are not Bernoulli outcomes, so they are
    removed using the generator's provenance counters: p_hat counts the
    drawn pushes over all drawn steps. Without counters (hand-built corpora)
    the correction degenerates to the raw push fraction.
    """
    if not corpus.records:
        raise InvalidArgument("empty corpus")
    pushes = 0
    steps = 0
    for rec in corpus.records:
        if rec.labels is None:
            raise MissingLabelsError("estimate_push_probability needs labels")
        pushes += rec.labels.count(PUSH)
        steps += len(rec.labels)
    forced = int(corpus.provenance.get("forced_pushes", 0))
    flush = int(corpus.provenance.get("flush_pops", 0))
    bernoulli = steps - flush
    if bernoulli <= 0:
        raise InvalidArgument("no Bernoulli steps to estimate from")
    return PushEstimate(
        p_hat=(pushes - forced) / bernoulli,
        raw_push_fraction=pushes / steps,
        forced_pushes=forced,
        flush_pops=flush,
        bernoulli_steps=bernoulli,
    )


def fit_zipf_from_counts(counts, min_count: float = ZIPF_FIT_MIN_COUNT) -> float:
    """Least-squares slope of log(frequency) on log(rank), negated.

    Counts below `min_count` are excluded to avoid the heavy-tail plateau;
    if fewer than two survive, the filter is dropped. Fitting frequencies
    rather than raw counts makes the estimate exactly invariant to scaling
    all counts by a common factor (when the filter keeps the same set).
    """
    c = np.asarray(counts, dtype=np.float64)
    c = c[c > 0]
    if c.size < 2:
        raise InvalidArgument("need at least 2 distinct observed tokens")
    c = np.sort(c)[::-1]
    kept = c[c >= min_count]
    if kept.size < 2:
        kept = c
    freqs = kept / kept.sum()
    x = np.log(np.arange(1, kept.size + 1, dtype=np.float64))
    y = np.log(freqs)
    xbar = x.mean()
    slope = float(((x - xbar) * y).sum() / ((x - xbar) ** 2).sum())
    return -slope


def fit_zipf_exponent(corpus: AnnotatedCorpus) -> float:
    """Rank-frequency exponent of the corpus unigram counts."""
    counts = np.bincount(corpus.all_tokens(), minlength=corpus.vocab.total_size)
    return fit_zipf_from_counts(counts[N_SPECIAL:])


def distribution_distance(corpus: AnnotatedCorpus, dist: TokenDistribution) -> float:
    """Total-variation distance between the corpus unigram law and `dist`."""
    if corpus.vocab != dist.vocab:
        raise InvalidArgument("corpus and distribution use different vocabularies")
    tokens = corpus.all_tokens()
    if tokens.size == 0:
        raise InvalidArgument("empty corpus has no empirical distribution")
    counts = np.bincount(tokens, minlength=corpus.vocab.total_size).astype(np.float64)
    if counts[:N_SPECIAL].any():
        raise InvalidArgument("corpus contains special-token ids")
    empirical = counts[N_SPECIAL:] / tokens.size
    return 0.5 * float(np.abs(empirical - dist.weights).sum())


@dataclass
class CorpusReport:
    """Summary statistics: token/record counts, length histogram, unigrams."""

    token_count: int
    record_count: int
    length_min: int
    length_max: int
    length_mean: float
    length_deciles: list[float]
    unigram_counts: np.ndarray

    def to_text(self) -> str:
        lines = [
            f"token_count={self.token_count}",
            f"record_count={self.record_count}",
            f"length_min={self.length_min}",
            f"length_max={self.length_max}",
            f"length_mean={self.length_mean:.4f}",
        ]
        for i, d in enumerate(self.length_deciles, start=1):
            lines.append(f"length_p{i * 10}={d:.1f}")
        lines.append(f"distinct_tokens={int((self.unigram_counts > 0).sum())}")
        return "\n".join(lines) + "\n"

    CSV_HEADER = (
        "token_count,record_count,length_min,length_max,length_mean,"
        "p10,p20,p30,p40,p50,p60,p70,p80,p90,distinct_tokens"
    )

    def to_csv_row(self) -> str:
        cells = [
            str(self.token_count),
            str(self.record_count),
            str(self.length_min),
            str(self.length_max),
            f"{self.length_mean:.4f}",
        ]
        cells += [f"{d:.1f}" for d in self.length_deciles]
        cells.append(str(int((self.unigram_counts > 0).sum())))
        return ",".join(cells)


def length_stats(corpus: AnnotatedCorpus) -> CorpusReport:
    """Length histogram and unigram counts; empty corpora yield zero rows."""
    lengths = np.array([len(r) for r in corpus.records], dtype=np.int64)
    vocab_total = corpus.vocab.total_size
    if lengths.size == 0:
        return CorpusReport(0, 0, 0, 0, 0.0, [0.0] * 9, np.zeros(vocab_total, dtype=np.int64))
    counts = np.bincount(corpus.all_tokens(), minlength=vocab_total)
    deciles = np.percentile(lengths, np.arange(10, 100, 10)).tolist()
    return CorpusReport(
        token_count=int(lengths.sum()),
        record_count=int(lengths.size),
        length_min=int(lengths.min()),
        length_max=int(lengths.max()),
        length_mean=float(lengths.mean()),
        length_deciles=deciles,
        unigram_counts=counts,
    )
