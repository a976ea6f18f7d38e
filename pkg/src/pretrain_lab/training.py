"""Masking policy, optimizer, the three training regimes, and embedding surgery.

Regimes: `pretrain` updates the whole model with the MLM objective;
`align_embeddings` is the same loop with everything but the token embeddings
and LM head frozen; `finetune` attaches a classification or regression head
on the first-position representation and trains all parameters.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpusgen import AnnotatedCorpus, SequenceRecord
from .errors import DataError, InvalidArgument, NumericalAbort, SkipRecord
from .seeding import derive_seed, make_rng
from .vocab import BOS_ID, EOS_ID, MASK_ID, N_SPECIAL, PAD_ID, VocabSpec
from .model import (
    IGNORE_INDEX,
    MlmEncoder,
    ModelCheckpoint,
    forward_mlm,
    mlm_loss,
)

TRAINABLE_ALL = "all"
TRAINABLE_EMBEDDINGS = "embeddings+lm_head"
_EMBED_PARAM_NAMES = ("tok_emb.weight", "head_bias")


@dataclass(frozen=True)
class MaskPolicy:
    """Standard MLM corruption: select round(mask_fraction * len) positions
    (at least one), then 80% become the mask token, 10% a random content
    token, 10% stay unchanged."""

    mask_fraction: float = 0.15
    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1

    def validate(self) -> None:
        if not (0 < self.mask_fraction <= 1):
            raise InvalidArgument(f"mask_fraction must be in (0, 1], got {self.mask_fraction}")
        parts = (self.p_mask, self.p_random, self.p_keep)
        if any(p < 0 for p in parts):
            raise InvalidArgument("action split fractions must be non-negative")
        if not math.isclose(sum(parts), 1.0, abs_tol=1e-9):
            raise InvalidArgument(f"action split must sum to 1, got {sum(parts)}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    learning_rate: float
    total_steps: int
    warmup_steps: int
    max_seq_len: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "linear_warmup_decay"
    seed: int = 0
    trainable: str = TRAINABLE_ALL
    log_every: int = 50
    eval_every: int = 0  # 0: evaluate only at step 0 and at the end

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise InvalidArgument(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.warmup_steps > self.total_steps:
            raise InvalidArgument(
                f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}"
            )
        if self.batch_size < 1 or self.total_steps < 0 or self.warmup_steps < 0:
            raise InvalidArgument("batch_size must be >= 1 and step counts >= 0")
        if self.max_seq_len < 3:
            raise InvalidArgument("max_seq_len must fit bos + 1 token + eos")
        if self.schedule != "linear_warmup_decay":
            raise InvalidArgument(f"unknown schedule {self.schedule!r}")
        if self.trainable not in (TRAINABLE_ALL, TRAINABLE_EMBEDDINGS):
            raise InvalidArgument(f"unknown trainable filter {self.trainable!r}")


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak at step == warmup_steps, then linear decay
    to 0 at step == total_steps. Steps are 1-based."""
    peak = config.learning_rate
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return peak * step / config.warmup_steps
    remaining = max(config.total_steps - step, 0)
    span = max(config.total_steps - config.warmup_steps, 1)
    return peak * remaining / span


def is_trainable(name: str, filter_mode: str) -> bool:
    if filter_mode == TRAINABLE_ALL:
        return True
    return name in _EMBED_PARAM_NAMES


def _decay_applies(name: str) -> bool:
    # biases and layer-norm parameters are excluded from weight decay
    if name.endswith(".bias") or name == "head_bias":
        return False
    owner = name.rsplit(".", 1)[0].split(".")[-1] if "." in name else name
    return not owner.startswith("ln")


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]

    @classmethod
    def initial(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    step: int,
    config: TrainConfig,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam step with decoupled weight decay.

        m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
        p <- p - lr_t (m_hat / (sqrt(v_hat) + eps) + wd * p)

    with m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t) and lr_t from the
    warmup/decay schedule. Parameters outside the trainable filter are left
    bit-identical (their moments are not advanced either). Updates happen in
    place; the inputs are returned for convenience.
    """
    lr = lr_at_step(step, config)
    b1, b2 = config.beta1, config.beta2
    bc1 = 1 - b1 ** step
    bc2 = 1 - b2 ** step
    with torch.no_grad():
        for name, p in params.items():
            if not is_trainable(name, config.trainable):
                continue
            g = grads.get(name)
            if g is None:
                raise InvalidArgument(f"missing gradient for parameter {name}")
            if g.shape != p.shape:
                raise InvalidArgument(
                    f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {name}"
                )
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            update = (m / bc1) / ((v / bc2).sqrt() + config.adam_eps)
            if config.weight_decay and _decay_applies(name):
                update = update + config.weight_decay * p
            p.add_(update, alpha=-lr)
    return params, state


@dataclass
class MaskedExample:
    input_ids: np.ndarray   # [len+2] with bos/eos
    target_ids: np.ndarray  # IGNORE_INDEX everywhere except selected positions
    loss_mask: np.ndarray   # bool, marks exactly the selected positions


def mask_tokens(
    record,
    policy: MaskPolicy,
    vocab: VocabSpec,
    rng: np.random.Generator,
) -> MaskedExample:
    """Corrupt one record for MLM and wrap it in bos/eos.

    Exactly max(1, round(mask_fraction * len)) positions are selected; the
    same seeded stream reproduces the same corruption.
    """
    tokens = record.tokens if isinstance(record, SequenceRecord) else list(record)
    n = len(tokens)
    if n < 1:
        raise SkipRecord("empty record")
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.min() < N_SPECIAL or arr.max() >= vocab.total_size:
        raise InvalidArgument("record contains special or out-of-vocab ids")
    n_mask = min(n, max(1, round(policy.mask_fraction * n)))
    positions = np.sort(rng.choice(n, size=n_mask, replace=False))
    actions = rng.random(n_mask)

    input_ids = np.empty(n + 2, dtype=np.int64)
    input_ids[0] = BOS_ID
    input_ids[1:-1] = arr
    input_ids[-1] = EOS_ID
    target_ids = np.full(n + 2, IGNORE_INDEX, dtype=np.int64)
    loss_mask = np.zeros(n + 2, dtype=bool)

    for pos, u in zip(positions, actions):
        target_ids[pos + 1] = arr[pos]
        loss_mask[pos + 1] = True
        if u < policy.p_mask:
            input_ids[pos + 1] = MASK_ID
        elif u < policy.p_mask + policy.p_random:
            input_ids[pos + 1] = N_SPECIAL + int(rng.integers(vocab.content_size))
        # else: keep the original token
    return MaskedExample(input_ids=input_ids, target_ids=target_ids, loss_mask=loss_mask)


def _collate(examples: list[MaskedExample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    width = max(len(ex.input_ids) for ex in examples)
    n = len(examples)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    targets = np.full((n, width), IGNORE_INDEX, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    attn = np.zeros((n, width), dtype=bool)
    for i, ex in enumerate(examples):
        k = len(ex.input_ids)
        ids[i, :k] = ex.input_ids
        targets[i, :k] = ex.target_ids
        mask[i, :k] = ex.loss_mask
        attn[i, :k] = True
    return (
        torch.from_numpy(ids),
        torch.from_numpy(targets),
        torch.from_numpy(mask),
        torch.from_numpy(attn),
    )


def _truncate(record: SequenceRecord, max_seq_len: int) -> SequenceRecord:
    limit = max_seq_len - 2  # room for bos/eos
    if len(record.tokens) <= limit:
        return record
    labels = record.labels[:limit] if record.labels is not None else None
    return SequenceRecord(tokens=record.tokens[:limit], labels=labels)


@dataclass
class LossPoint:
    step: int
    lr: float
    train_loss: float | None
    eval_loss: float | None = None


def loss_curve_csv(curve: list[LossPoint]) -> str:
    lines = ["step,lr,train_loss,eval_loss"]
    for pt in curve:
        train = "" if pt.train_loss is None else f"{pt.train_loss:.6f}"
        ev = "" if pt.eval_loss is None else f"{pt.eval_loss:.6f}"
        lines.append(f"{pt.step},{pt.lr:.8g},{train},{ev}")
    return "\n".join(lines) + "\n"


class _EpochSampler:
    """Yields record indices, reshuffling at each epoch boundary."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def take(self, k: int) -> list[int]:
        out: list[int] = []
        while len(out) < k:
            if self.cursor >= self.n:
                self.order = self.rng.permutation(self.n)
                self.cursor = 0
            out.append(int(self.order[self.cursor]))
            self.cursor += 1
        return out


def _mask_batch(
    records: list[SequenceRecord],
    indices: list[int],
    policy: MaskPolicy,
    vocab: VocabSpec,
    rng: np.random.Generator,
    max_seq_len: int,
) -> list[MaskedExample]:
    out = []
    for i in indices:
        try:
            out.append(mask_tokens(_truncate(records[i], max_seq_len), policy, vocab, rng))
        except SkipRecord:
            continue
    return out


def evaluate_mlm(
    ckpt: ModelCheckpoint,
    records: list[SequenceRecord],
    vocab: VocabSpec,
    policy: MaskPolicy,
    config: TrainConfig,
    mask_seed: int,
) -> float:
    """Mean masked-LM loss over `records` with a fixed corruption stream,
    so successive evaluations are comparable."""
    rng = make_rng(mask_seed)
    was_training = ckpt.model.training
    ckpt.model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for lo in range(0, len(records), config.batch_size):
            chunk = records[lo : lo + config.batch_size]
            examples = _mask_batch(chunk, list(range(len(chunk))), policy, vocab, rng, config.max_seq_len)
            if not examples:
                continue
            ids, targets, mask, attn = _collate(examples)
            logits = forward_mlm(ckpt, ids, attn)
            n_pos = int(mask.sum())
            total += float(mlm_loss(logits, targets, mask)) * n_pos
            count += n_pos
    if was_training:
        ckpt.model.train()
    if count == 0:
        raise InvalidArgument("evaluation records produced no masked positions")
    return total / count


def _freeze_snapshot(ckpt: ModelCheckpoint, mode: str) -> dict[str, torch.Tensor]:
    if mode == TRAINABLE_ALL:
        return {}
    return {
        name: p.detach().clone()
        for name, p in ckpt.model.named_parameters()
        if not is_trainable(name, mode)
    }


def _check_frozen(ckpt: ModelCheckpoint, snapshot: dict[str, torch.Tensor]) -> None:
    for name, p in ckpt.model.named_parameters():
        if name in snapshot and not torch.equal(p, snapshot[name]):
            raise NumericalAbort(f"frozen parameter {name} changed during training")


def _check_finite(ckpt: ModelCheckpoint, step: int) -> None:
    for name, p in ckpt.model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalAbort(f"non-finite parameter {name} at step {step}")


def pretrain(
    corpus: AnnotatedCorpus,
    ckpt: ModelCheckpoint,
    config: TrainConfig,
    policy: MaskPolicy = MaskPolicy(),
    eval_records: list[SequenceRecord] | None = None,
) -> tuple[ModelCheckpoint, list[LossPoint]]:
    """Masked-LM training over shuffled batches; mutates `ckpt` in place.

    Returns the checkpoint and the logged loss curve (train loss every
    `log_every` steps; eval loss at step 0, every `eval_every` steps when
    set, and at the last step). Aborts on a non-finite loss.
    """
    config.validate()
    policy.validate()
    if corpus.vocab.total_size > ckpt.config.vocab_total:
        raise InvalidArgument(
            f"corpus vocab {corpus.vocab.total_size} exceeds model vocab {ckpt.config.vocab_total}"
        )
    if config.max_seq_len > ckpt.config.max_positions:
        raise InvalidArgument(
            f"max_seq_len {config.max_seq_len} exceeds model max_positions {ckpt.config.max_positions}"
        )
    records = corpus.records
    if not records:
        raise InvalidArgument("cannot train on an empty corpus")

    # dropout (when enabled) draws from torch's global stream; pin it so a
    # (config, seed) pair fixes the loss curve bit-for-bit
    torch.manual_seed(derive_seed(config.seed, "torch-global") & ((1 << 63) - 1))
    shuffle_rng = make_rng(config.seed, "shuffle")
    mask_rng = make_rng(config.seed, "mask")
    eval_seed = derive_seed(config.seed, "evalmask")
    sampler = _EpochSampler(len(records), shuffle_rng)
    params = ckpt.named_parameters()
    param_list = list(params.values())
    name_list = list(params.keys())
    state = AdamState.initial(params)
    frozen = _freeze_snapshot(ckpt, config.trainable)
    curve: list[LossPoint] = []

    def log_eval(step: int, train_loss: float | None) -> None:
        ev = evaluate_mlm(ckpt, eval_records, corpus.vocab, policy, config, eval_seed)
        curve.append(LossPoint(step=step, lr=lr_at_step(step, config) if step else 0.0,
                               train_loss=train_loss, eval_loss=ev))

    ckpt.model.train()
    if eval_records:
        log_eval(0, None)
    last_train_loss: float | None = None
    for step in range(1, config.total_steps + 1):
        indices = sampler.take(config.batch_size)
        examples = _mask_batch(records, indices, policy, corpus.vocab, mask_rng, config.max_seq_len)
        if not examples:
            continue
        ids, targets, mask, attn = _collate(examples)
        logits = forward_mlm(ckpt, ids, attn)
        loss = mlm_loss(logits, targets, mask)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise NumericalAbort(
                f"non-finite training loss {loss_val} at step {step} "
                f"(lr={lr_at_step(step, config):.3g}, batch={len(examples)})"
            )
        grads_t = torch.autograd.grad(loss, param_list, allow_unused=True)
        grads = {
            name: (torch.zeros_like(p) if g is None else g)
            for name, p, g in zip(name_list, param_list, grads_t)
        }
        adam_update(params, grads, state, step, config)
        last_train_loss = loss_val
        if config.log_every and (step % config.log_every == 0 or step == config.total_steps):
            _check_finite(ckpt, step)
            _check_frozen(ckpt, frozen)
            if step == config.total_steps and eval_records:
                pass  # the final point with eval loss is appended after the loop
            elif eval_records and config.eval_every and step % config.eval_every == 0:
                log_eval(step, loss_val)
            else:
                curve.append(LossPoint(step=step, lr=lr_at_step(step, config), train_loss=loss_val))
    if config.total_steps > 0:
        _check_finite(ckpt, config.total_steps)
        _check_frozen(ckpt, frozen)
        if eval_records:
            log_eval(config.total_steps, last_train_loss)
    return ckpt, curve


def align_embeddings(
    ckpt: ModelCheckpoint,
    target_corpus: AnnotatedCorpus,
    config: TrainConfig,
    policy: MaskPolicy = MaskPolicy(),
    eval_records: list[SequenceRecord] | None = None,
) -> tuple[ModelCheckpoint, list[LossPoint]]:
    """MLM on the target corpus with only token embeddings and LM head
    trainable; every transformer-layer tensor is bit-identical afterwards."""
    if config.trainable != TRAINABLE_EMBEDDINGS:
        config = replace(config, trainable=TRAINABLE_EMBEDDINGS)
    return pretrain(target_corpus, ckpt, config, policy, eval_records)


@dataclass(frozen=True)
class SurgerySpec:
    """Which content-token embeddings were used in pre-training, and the
    rule mapping unused rows onto used ones (only `cyclic` is defined)."""

    used_ids: frozenset[int]
    rule: str = "cyclic"


def used_content_ids(corpus: AnnotatedCorpus) -> frozenset[int]:
    """Content ids that actually occur in the corpus."""
    counts = np.bincount(corpus.all_tokens(), minlength=corpus.vocab.total_size)
    return frozenset(int(i) for i in np.nonzero(counts[N_SPECIAL:])[0] + N_SPECIAL)


def substitute_unused_embeddings(ckpt: ModelCheckpoint, spec: SurgerySpec) -> ModelCheckpoint:
    """Replace every unused content-token embedding row with a copy of a used
    row, cyclically by sorted order; all other parameters untouched.

    With the tied LM head the head projection changes identically; the
    per-token head bias is left as trained. Idempotent and local.
    """
    if spec.rule != "cyclic":
        raise InvalidArgument(f"unknown surgery rule {spec.rule!r}")
    if not spec.used_ids:
        raise InvalidArgument("used id set is empty")
    vocab_total = ckpt.config.vocab_total
    for i in spec.used_ids:
        if not (N_SPECIAL <= i < vocab_total):
            raise InvalidArgument(f"used id {i} is not a content id")
    used = sorted(spec.used_ids)
    unused = [i for i in range(N_SPECIAL, vocab_total) if i not in spec.used_ids]
    if unused:
        sources = [used[j % len(used)] for j in range(len(unused))]
        with torch.no_grad():
            emb = ckpt.model.tok_emb.weight
            emb[torch.tensor(unused)] = emb[torch.tensor(sources)]
    return ckpt


@dataclass(frozen=True)
class HeadSpec:
    """Task head: k-way classification or scalar regression on the
    first-position representation, dropout 0.1 then linear."""

    kind: str  # "classification" | "regression"
    n_classes: int = 2
    dropout: float = 0.1

    def validate(self) -> None:
        if self.kind not in ("classification", "regression"):
            raise InvalidArgument(f"unknown head kind {self.kind!r}")
        if self.kind == "classification" and self.n_classes < 2:
            raise InvalidArgument("classification head needs >= 2 classes")


class TaskModel(nn.Module):
    """Encoder plus task head reading the bos position."""

    def __init__(self, encoder: MlmEncoder, head_spec: HeadSpec, seed: int):
        super().__init__()
        head_spec.validate()
        self.encoder = encoder
        self.head_spec = head_spec
        out_dim = head_spec.n_classes if head_spec.kind == "classification" else 1
        self.head_dropout = nn.Dropout(head_spec.dropout)
        self.head = nn.Linear(encoder.config.hidden_dim, out_dim)
        gen = torch.Generator().manual_seed(derive_seed(seed, "head") & ((1 << 63) - 1))
        with torch.no_grad():
            self.head.weight.normal_(0.0, 0.02, generator=gen)
            self.head.bias.zero_()

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        b, s = input_ids.shape
        positions = torch.arange(s, device=input_ids.device)
        x = self.encoder.tok_emb(input_ids) + self.encoder.pos_emb(positions)[None, :, :]
        x = self.encoder.dropout(x)
        for layer in self.encoder.layers:
            x, _ = layer(x, attention_mask.bool())
        x = self.encoder.ln_f(x)
        first = x[:, 0, :]
        return self.head(self.head_dropout(first))


def _encode_task_example(example, max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = [BOS_ID] + list(example.tokens_a) + [EOS_ID]
    if example.tokens_b is not None:
        ids += list(example.tokens_b) + [EOS_ID]
    ids = ids[:max_seq_len]  # truncate from the tail
    arr = np.asarray(ids, dtype=np.int64)
    return arr, np.ones(len(ids), dtype=bool)


def _collate_task(examples, max_seq_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    encoded = [_encode_task_example(ex, max_seq_len) for ex in examples]
    width = max(len(ids) for ids, _ in encoded)
    n = len(encoded)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    attn = np.zeros((n, width), dtype=bool)
    for i, (row, mask) in enumerate(encoded):
        ids[i, : len(row)] = row
        attn[i, : len(row)] = True
    return torch.from_numpy(ids), torch.from_numpy(attn)


def predict_task(model: TaskModel, examples, max_seq_len: int, batch_size: int = 32) -> np.ndarray:
    """Dev-time predictions: argmax class index, or raw scalar for regression."""
    was_training = model.training
    model.eval()
    outputs = []
    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            ids, attn = _collate_task(examples[lo : lo + batch_size], max_seq_len)
            out = model(ids, attn)
            if model.head_spec.kind == "classification":
                outputs.append(out.argmax(dim=-1).numpy())
            else:
                outputs.append(out.squeeze(-1).numpy())
    if was_training:
        model.train()
    return np.concatenate(outputs) if outputs else np.zeros(0)


def finetune(
    ckpt: ModelCheckpoint,
    task,
    head_spec: HeadSpec,
    config: TrainConfig,
    metrics: tuple[str, ...] = ("accuracy",),
) -> tuple[TaskModel, dict[str, float]]:
    """Fine-tune all parameters on a task and score the dev split.

    `ckpt` may be pre-trained or fresh-init (the no-pre-train arm uses a
    fresh checkpoint with the same seed discipline). Returns the task model
    and one score per requested metric kind.
    """
    from .evaluation import compute_metric  # local import to avoid a cycle

    config.validate()
    head_spec.validate()
    if head_spec.kind == "classification":
        labels = {ex.label for ex in task.train + task.dev}
        bad = {l for l in labels if not (0 <= int(l) < head_spec.n_classes)}
        if bad:
            raise DataError(f"labels outside declared space: {sorted(bad)}")
    model = TaskModel(ckpt.model, head_spec, config.seed)
    if not task.train:
        raise DataError(f"task {task.name} has an empty train split")
    if not task.dev:
        raise DataError(f"task {task.name} has an empty dev split")

    params = dict(model.named_parameters())
    name_list = list(params.keys())
    param_list = list(params.values())
    state = AdamState.initial(params)
    torch.manual_seed(derive_seed(config.seed, "torch-global") & ((1 << 63) - 1))
    shuffle_rng = make_rng(config.seed, "finetune-shuffle")
    sampler = _EpochSampler(len(task.train), shuffle_rng)
    train_cfg = replace(config, trainable=TRAINABLE_ALL)

    model.train()
    for step in range(1, config.total_steps + 1):
        batch = [task.train[i] for i in sampler.take(config.batch_size)]
        ids, attn = _collate_task(batch, config.max_seq_len)
        out = model(ids, attn)
        if head_spec.kind == "classification":
            gold = torch.tensor([int(ex.label) for ex in batch], dtype=torch.long)
            loss = F.cross_entropy(out, gold)
        else:
            gold = torch.tensor([float(ex.label) for ex in batch], dtype=out.dtype)
            loss = F.mse_loss(out.squeeze(-1), gold)
        if not math.isfinite(float(loss.detach())):
            raise NumericalAbort(f"non-finite fine-tune loss at step {step}")
        grads_t = torch.autograd.grad(loss, param_list, allow_unused=True)
        grads = {
            name: (torch.zeros_like(p) if g is None else g)
            for name, p, g in zip(name_list, param_list, grads_t)
        }
        adam_update(params, grads, state, step, train_cfg)

    preds = predict_task(model, task.dev, config.max_seq_len, config.batch_size)
    if head_spec.kind == "classification":
        golds = np.array([int(ex.label) for ex in task.dev])
        preds = preds.astype(np.int64)
    else:
        golds = np.array([float(ex.label) for ex in task.dev])
    scores = {kind: compute_metric(kind, preds, golds) for kind in metrics}
    return model, scores
