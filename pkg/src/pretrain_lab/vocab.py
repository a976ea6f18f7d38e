"""Vocabularies and the token-sampling distributions the generators draw from.

A vocabulary is 5 reserved special tokens at ids 0..4 followed by content
tokens. Distributions assign probability only to content tokens; specials
are never sampled (pre-training text never contains them, masking inserts
them later).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>", "<bos>", "<eos>")
PAD_ID, UNK_ID, MASK_ID, BOS_ID, EOS_ID = range(5)
N_SPECIAL = len(SPECIAL_TOKENS)

DISTRIBUTION_KINDS = ("uniform", "zipf", "empirical", "binned")


@dataclass(eq=False)
class VocabSpec:
    """Token inventory: 5 special tokens then `content_size` content tokens.

    Immutable after construction; safe to share across threads.
    """

    content_size: int
    content_tokens: tuple[str, ...]
    _token_to_id: dict[str, int] = field(default=None, repr=False)  # lazy cache

    @property
    def total_size(self) -> int:
        return self.content_size + N_SPECIAL

    @property
    def content_ids(self) -> range:
        return range(N_SPECIAL, self.total_size)

    def id_to_token(self, token_id: int) -> str:
        if token_id < N_SPECIAL:
            return SPECIAL_TOKENS[token_id]
        return self.content_tokens[token_id - N_SPECIAL]

    def token_to_id(self, token: str) -> int | None:
        if self._token_to_id is None:
            mapping = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
            for i, t in enumerate(self.content_tokens):
                mapping[t] = N_SPECIAL + i
            self._token_to_id = mapping
        return self._token_to_id.get(token)

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < N_SPECIAL

    def __eq__(self, other) -> bool:
        if not isinstance(other, VocabSpec):
            return NotImplemented
        return (
            self.content_size == other.content_size
            and self.content_tokens == other.content_tokens
        )


def build_vocab(content_size: int, tokens: list[str] | None = None) -> VocabSpec:
    """Build a vocabulary with the reserved specials and `content_size` content tokens.

    Content token strings default to "w0", "w1", ... unless `tokens` supplies
    them (e.g. words from an empirical frequency table, most frequent first).
    """
    if content_size < 1:
        raise InvalidArgument(f"content_size must be >= 1, got {content_size}")
    if tokens is not None:
        if len(tokens) != content_size:
            raise InvalidArgument(
                f"got {len(tokens)} token strings for content_size {content_size}"
            )
        content = tuple(tokens)
        if len(set(content)) != len(content) or set(content) & set(SPECIAL_TOKENS):
            raise InvalidArgument("content token strings must be unique and non-special")
    else:
        content = tuple(f"w{i}" for i in range(content_size))
    return VocabSpec(content_size=content_size, content_tokens=content)


@dataclass(eq=False)
class TokenDistribution:
    """Sampling law over content tokens.

    `weights[i]` is the probability of content token id `N_SPECIAL + i`.
    Special tokens have probability exactly zero by construction. Immutable;
    each worker should own its RNG stream.
    """

    kind: str
    weights: np.ndarray
    vocab: VocabSpec
    zipf_exponent: float | None = None
    bin_size: int | None = None
    base_kind: str | None = None
    _cumulative: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.vocab.content_size,):
            raise InvalidArgument(
                f"weights shape {w.shape} != content_size {self.vocab.content_size}"
            )
        if np.any(w < 0) or not np.isfinite(w).all():
            raise InvalidArgument("weights must be finite and non-negative")
        total = w.sum()
        if not np.isclose(total, 1.0, atol=1e-9, rtol=0):
            raise InvalidArgument(f"weights must sum to 1 within 1e-9, got {total!r}")
        self.weights = w
        self._cumulative = np.cumsum(w)

    @property
    def content_size(self) -> int:
        return self.vocab.content_size


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-float(exponent))
    return w / w.sum()


def make_distribution(
    kind: str,
    vocab: VocabSpec,
    *,
    zipf_exponent: float | None = None,
    frequency_table: dict[str, float] | None = None,
    counts: np.ndarray | None = None,
    bin_size: int | None = None,
    base_kind: str = "zipf",
) -> TokenDistribution:
    """Build a normalized token distribution of the given kind.

    kinds:
      uniform   -- equal weight on every content token.
      zipf      -- weight proportional to rank^(-zipf_exponent); rank 1 is the
                   first content id.
      empirical -- weights from `frequency_table` (token string -> count) or
                   `counts` (array aligned with content ids).
      binned    -- a base distribution (`base_kind`, uniform or zipf)
                   restricted to the first `bin_size` content tokens and
                   renormalized there.
    """
    n = vocab.content_size
    if kind == "uniform":
        w = np.full(n, 1.0 / n)
    elif kind == "zipf":
        if zipf_exponent is None or not (zipf_exponent > 0):
            raise InvalidArgument(f"zipf needs exponent > 0, got {zipf_exponent}")
        w = _zipf_weights(n, zipf_exponent)
    elif kind == "empirical":
        if counts is not None:
            c = np.asarray(counts, dtype=np.float64)
            if c.shape != (n,):
                raise InvalidArgument(f"counts shape {c.shape} != content_size {n}")
        elif frequency_table is not None:
            c = np.zeros(n)
            matched = 0
            for tok, cnt in frequency_table.items():
                tid = vocab.token_to_id(tok)
                if tid is not None and tid >= N_SPECIAL:
                    c[tid - N_SPECIAL] = float(cnt)
                    matched += 1
            if matched == 0:
                raise InvalidArgument("frequency table covers no content token")
        else:
            raise InvalidArgument("empirical kind needs frequency_table or counts")
        if np.any(c < 0):
            raise InvalidArgument("frequencies must be non-negative")
        total = c.sum()
        if total <= 0:
            raise InvalidArgument("frequency table is unnormalizable (all zeros)")
        w = c / total
    elif kind == "binned":
        if bin_size is None or not (1 <= bin_size <= n):
            raise InvalidArgument(f"bin_size must be in [1, {n}], got {bin_size}")
        if base_kind == "uniform":
            base = np.full(n, 1.0 / n)
        elif base_kind == "zipf":
            exponent = 1.0 if zipf_exponent is None else zipf_exponent
            if not exponent > 0:
                raise InvalidArgument(f"zipf needs exponent > 0, got {exponent}")
            base = _zipf_weights(n, exponent)
        else:
            raise InvalidArgument(f"unsupported base_kind {base_kind!r}")
        w = np.zeros(n)
        w[:bin_size] = base[:bin_size] / base[:bin_size].sum()
        return TokenDistribution(
            kind="binned",
            weights=w,
            vocab=vocab,
            zipf_exponent=zipf_exponent if base_kind == "zipf" else None,
            bin_size=bin_size,
            base_kind=base_kind,
        )
    else:
        raise InvalidArgument(f"unknown distribution kind {kind!r}")
    return TokenDistribution(kind=kind, weights=w, vocab=vocab, zipf_exponent=zipf_exponent)


def sample_tokens(dist: TokenDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `n` content-token ids by inverse CDF over the cumulative weights.

    Zero-weight tokens are never emitted (their CDF interval is empty); the
    same seeded stream reproduces the same draws.
    """
    u = rng.random(n)
    idx = np.searchsorted(dist._cumulative, u, side="right")
    np.clip(idx, 0, dist.content_size - 1, out=idx)
    return (idx + N_SPECIAL).astype(np.int64)


def sample_token(dist: TokenDistribution, rng: np.random.Generator) -> int:
    """Draw a single content-token id."""
    return int(sample_tokens(dist, 1, rng)[0])


def load_frequency_table(path) -> dict[str, float]:
    """Read a `token<TAB>count` table; `#` starts a comment line."""
    table: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InvalidArgument(
                    f"{path}:{lineno}: expected 'token<TAB>count', got {line!r}"
                )
            tok, cnt = parts
            try:
                table[tok] = float(cnt)
            except ValueError:
                raise InvalidArgument(f"{path}:{lineno}: bad count {cnt!r}") from None
    return table
