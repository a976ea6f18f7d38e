"""Small transformer masked-LM encoder.

Pre-norm residual blocks (stable at desk scale without warmup sensitivity),
GELU feed-forward, learned position embeddings, and an LM head tied to the
token embedding table. Forward/backward run through torch autograd; the
finite-difference check below is the independent oracle for the gradients.
"""

import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CorruptCorpusError, InvalidArgument

IGNORE_INDEX = -100  # target sentinel outside every masked position

_CKPT_MAGIC = b"PTLABCKP"
_CKPT_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
_TAG_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden_dim: int
    n_heads: int
    ff_dim: int
    vocab_total: int
    max_positions: int
    dropout_rate: float = 0.0

    def validate(self) -> None:
        if self.hidden_dim % self.n_heads != 0:
            raise InvalidArgument(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        for name in ("n_layers", "hidden_dim", "n_heads", "ff_dim", "vocab_total", "max_positions"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if not (0 <= self.dropout_rate < 1):
            raise InvalidArgument(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable-parameter count (LM head tied to embeddings)."""
    h, f = config.hidden_dim, config.ff_dim
    per_layer = (
        4 * (h * h + h)      # q, k, v, o projections with biases
        + 2 * 2 * h          # two layer norms
        + h * f + f          # ffn in
        + f * h + h          # ffn out
    )
    return (
        config.vocab_total * h       # token embeddings (tied head weight)
        + config.max_positions * h   # position embeddings
        + config.n_layers * per_layer
        + 2 * h                      # final layer norm
        + config.vocab_total         # lm head bias
    )


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        h = config.hidden_dim
        self.n_heads = config.n_heads
        self.head_dim = h // config.n_heads
        self.ln1 = nn.LayerNorm(h)
        self.q = nn.Linear(h, h)
        self.k = nn.Linear(h, h)
        self.v = nn.Linear(h, h)
        self.o = nn.Linear(h, h)
        self.ln2 = nn.LayerNorm(h)
        self.fc1 = nn.Linear(h, config.ff_dim)
        self.fc2 = nn.Linear(config.ff_dim, h)
        self.dropout = nn.Dropout(config.dropout_rate)

    def _attention(self, x: torch.Tensor, key_mask: torch.Tensor):
        b, s, h = x.shape
        shape = (b, s, self.n_heads, self.head_dim)
        q = self.q(x).view(shape).transpose(1, 2)
        k = self.k(x).view(shape).transpose(1, 2)
        v = self.v(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        # mask out padding keys for every query
        neg = torch.finfo(scores.dtype).min
        scores = scores.masked_fill(~key_mask[:, None, None, :], neg)
        probs = torch.softmax(scores, dim=-1)
        probs = self.dropout(probs)
        out = (probs @ v).transpose(1, 2).reshape(b, s, h)
        return self.o(out), probs

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor):
        attn_out, probs = self._attention(self.ln1(x), key_mask)
        x = x + self.dropout(attn_out)
        ff = self.fc2(F.gelu(self.fc1(self.ln2(x))))
        x = x + self.dropout(ff)
        return x, probs


class MlmEncoder(nn.Module):
    """Token+position embeddings, pre-norm encoder stack, tied LM head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        h = config.hidden_dim
        self.tok_emb = nn.Embedding(config.vocab_total, h)
        self.pos_emb = nn.Embedding(config.max_positions, h)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(h)
        self.head_bias = nn.Parameter(torch.zeros(config.vocab_total))
        self.dropout = nn.Dropout(config.dropout_rate)

    def forward(
        self,
        input_ids: torch.Tensor,
        attention_mask: torch.Tensor | None = None,
        collect_attention: bool = False,
    ):
        b, s = input_ids.shape
        if s > self.config.max_positions:
            raise InvalidArgument(
                f"sequence length {s} exceeds max_positions {self.config.max_positions}"
            )
        if attention_mask is None:
            attention_mask = torch.ones(b, s, dtype=torch.bool, device=input_ids.device)
        attention_mask = attention_mask.bool()
        positions = torch.arange(s, device=input_ids.device)
        x = self.tok_emb(input_ids) + self.pos_emb(positions)[None, :, :]
        x = self.dropout(x)
        attn_maps = []
        for layer in self.layers:
            x, probs = layer(x, attention_mask)
            if collect_attention:
                attn_maps.append(probs)
        x = self.ln_f(x)
        logits = x @ self.tok_emb.weight.t() + self.head_bias
        if collect_attention:
            return logits, attn_maps
        return logits


@dataclass
class ModelCheckpoint:
    """The trainable object: config, parameter tensors, RNG provenance."""

    config: ModelConfig
    model: MlmEncoder
    rng_provenance: dict[str, str] = field(default_factory=dict)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    def clone(self) -> "ModelCheckpoint":
        copy = MlmEncoder(self.config)
        src_dtype = next(self.model.parameters()).dtype
        if src_dtype != torch.float32:
            copy = copy.to(src_dtype)
        copy.load_state_dict(self.model.state_dict())
        return ModelCheckpoint(self.config, copy, dict(self.rng_provenance))

    def all_finite(self) -> bool:
        return all(torch.isfinite(p).all() for p in self.model.parameters())


def _trunc_normal_(t: torch.Tensor, std: float, gen: torch.Generator) -> None:
    """Truncated normal on [-2*std, 2*std] via inverse CDF; deterministic per gen."""
    a, b = -2.0, 2.0  # in units of std
    lo = math.erf(a / math.sqrt(2))
    hi = math.erf(b / math.sqrt(2))
    t.uniform_(lo, hi, generator=gen)
    t.erfinv_()
    t.mul_(std * math.sqrt(2))
    t.clamp_(a * std, b * std)


def init_model(config: ModelConfig, seed: int) -> ModelCheckpoint:
    """Fresh checkpoint: truncated-normal weights (std 0.02), LN gain 1 /
    bias 0, all projection and LM-head biases 0. Deterministic per seed."""
    config.validate()
    model = MlmEncoder(config)
    gen = torch.Generator().manual_seed(int(seed) & ((1 << 63) - 1))
    with torch.no_grad():
        for name, p in model.named_parameters():
            owner = name.rsplit(".", 1)[0].split(".")[-1] if "." in name else name
            if name.endswith(".bias") or name == "head_bias":
                p.zero_()
            elif owner.startswith("ln"):
                p.fill_(1.0)
            else:
                _trunc_normal_(p, 0.02, gen)
    provenance = {"init_seed": str(seed), "init_scheme": "trunc_normal_std0.02_pm2std"}
    return ModelCheckpoint(config=config, model=model, rng_provenance=provenance)


def _as_long_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.long()
    return torch.as_tensor(np.asarray(x), dtype=torch.long)


def forward_mlm(
    ckpt: ModelCheckpoint,
    input_ids,
    attention_mask=None,
    collect_attention: bool = False,
):
    """Logits [batch, seq, vocab_total] for padded id batches.

    Padding positions still produce logits; exclude them via the loss mask.
    """
    ids = _as_long_tensor(input_ids)
    if ids.dim() != 2:
        raise InvalidArgument(f"input_ids must be [batch, seq], got {tuple(ids.shape)}")
    if ids.numel() and (ids.min() < 0 or ids.max() >= ckpt.config.vocab_total):
        raise InvalidArgument("token id outside vocab_total")
    mask = None
    if attention_mask is not None:
        mask = torch.as_tensor(np.asarray(attention_mask)).bool() \
            if not isinstance(attention_mask, torch.Tensor) else attention_mask.bool()
    return ckpt.model(ids, mask, collect_attention=collect_attention)


def mlm_loss(logits: torch.Tensor, targets, loss_mask) -> torch.Tensor:
    """Mean cross-entropy of −log softmax(logits)[target] over masked positions."""
    tgt = _as_long_tensor(targets)
    mask = loss_mask if isinstance(loss_mask, torch.Tensor) else torch.as_tensor(np.asarray(loss_mask))
    mask = mask.bool()
    if int(mask.sum()) == 0:
        raise InvalidArgument("loss mask selects no position")
    picked_logits = logits[mask]
    picked_targets = tgt[mask]
    if (picked_targets < 0).any() or (picked_targets >= logits.shape[-1]).any():
        raise InvalidArgument("target id outside vocab at a masked position")
    return F.cross_entropy(picked_logits, picked_targets)


def gradient(
    ckpt: ModelCheckpoint, input_ids, targets, loss_mask, attention_mask=None
) -> dict[str, torch.Tensor]:
    """Exact loss gradient for every parameter, keyed by parameter name."""
    logits = forward_mlm(ckpt, input_ids, attention_mask)
    loss = mlm_loss(logits, targets, loss_mask)
    names, params = zip(*ckpt.model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        out[name] = torch.zeros_like(p) if g is None else g
    return out


def finite_difference_check(
    ckpt: ModelCheckpoint,
    input_ids,
    targets,
    loss_mask,
    attention_mask=None,
    eps: float = 1e-5,
    n_sample: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic grads and central differences.

    Runs a float64 clone of the model, samples `n_sample` parameter
    coordinates, and compares (L(+eps) − L(−eps)) / 2eps against autograd.
    Relative error uses max(|fd|, |analytic|, 1e-6) in the denominator so
    zero-gradient coordinates do not blow up.
    """
    if not (1e-5 <= eps <= 1e-3):
        raise InvalidArgument(f"eps must be in [1e-5, 1e-3], got {eps}")
    n_sample = max(1, int(n_sample))
    work = ckpt.clone()
    work.model.double()
    work.model.eval()

    grads = gradient(work, input_ids, targets, loss_mask, attention_mask)

    def loss_value() -> float:
        with torch.no_grad():
            logits = forward_mlm(work, input_ids, attention_mask)
            return float(mlm_loss(logits, targets, loss_mask))

    params = dict(work.model.named_parameters())
    sizes = {name: p.numel() for name, p in params.items()}
    total = sum(sizes.values())
    rng = np.random.Generator(np.random.PCG64(seed))
    flat_idx = rng.choice(total, size=min(n_sample, total), replace=False)

    bounds = []
    offset = 0
    for name, size in sizes.items():
        bounds.append((offset, offset + size, name))
        offset += size

    max_rel = 0.0
    with torch.no_grad():
        for fi in np.sort(flat_idx):
            for lo, hi, name in bounds:
                if lo <= fi < hi:
                    break
            p = params[name]
            local = int(fi - lo)
            flat = p.view(-1)
            orig = float(flat[local])
            flat[local] = orig + eps
            plus = loss_value()
            flat[local] = orig - eps
            minus = loss_value()
            flat[local] = orig
            fd = (plus - minus) / (2 * eps)
            an = float(grads[name].view(-1)[local])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            max_rel = max(max_rel, rel)
    return max_rel


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Versioned binary container: magic, header, then named raw tensors.

    Little-endian tensor bytes in state-dict order; byte-exact round-trip.
    Written atomically via a .partial file.
    """
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", _CKPT_VERSION))
    header_lines = [
        f"n_layers={ckpt.config.n_layers}",
        f"hidden_dim={ckpt.config.hidden_dim}",
        f"n_heads={ckpt.config.n_heads}",
        f"ff_dim={ckpt.config.ff_dim}",
        f"vocab_total={ckpt.config.vocab_total}",
        f"max_positions={ckpt.config.max_positions}",
        f"dropout_rate={ckpt.config.dropout_rate!r}",
    ]
    for key, value in sorted(ckpt.rng_provenance.items()):
        header_lines.append(f"rng.{key}={value}")
    header = ("\n".join(header_lines) + "\n").encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    state = ckpt.model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        data = tensor.detach().cpu().contiguous()
        if data.dtype not in _DTYPE_TAGS:
            raise InvalidArgument(f"unsupported tensor dtype {data.dtype}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[data.dtype], data.dim()))
        for d in data.shape:
            buf.write(struct.pack("<I", d))
        raw = data.numpy().astype(data.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    partial = f"{path}.partial"
    with open(partial, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(partial, path)


def load_checkpoint(path) -> ModelCheckpoint:
    """Read a checkpoint container written by save_checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = io.BytesIO(blob)
    if view.read(8) != _CKPT_MAGIC:
        raise CorruptCorpusError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", view.read(4))
    if version != _CKPT_VERSION:
        raise CorruptCorpusError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", view.read(4))
    header = view.read(header_len).decode("utf-8")
    fields: dict[str, str] = {}
    provenance: dict[str, str] = {}
    for line in header.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptCorpusError(f"{path}: bad header line {line!r}")
        if key.startswith("rng."):
            provenance[key[4:]] = value
        else:
            fields[key] = value
    try:
        config = ModelConfig(
            n_layers=int(fields["n_layers"]),
            hidden_dim=int(fields["hidden_dim"]),
            n_heads=int(fields["n_heads"]),
            ff_dim=int(fields["ff_dim"]),
            vocab_total=int(fields["vocab_total"]),
            max_positions=int(fields["max_positions"]),
            dropout_rate=float(fields["dropout_rate"]),
        )
    except KeyError as exc:
        raise CorruptCorpusError(f"{path}: missing header field {exc}") from None
    (n_tensors,) = struct.unpack("<I", view.read(4))
    state: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", view.read(2))
        name = view.read(name_len).decode("utf-8")
        tag, ndim = struct.unpack("<BB", view.read(2))
        if tag not in _TAG_DTYPES:
            raise CorruptCorpusError(f"{path}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", view.read(4 * ndim)) if ndim else ()
        (nbytes,) = struct.unpack("<Q", view.read(8))
        raw = view.read(nbytes)
        torch_dtype, np_dtype = _TAG_DTYPES[tag]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np_dtype.lstrip("<"), copy=True)).to(torch_dtype)
    model = MlmEncoder(config)
    if any(p.dtype == torch.float64 for p in state.values()):
        model.double()
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CorruptCorpusError(f"{path}: tensor set does not match model: {exc}") from None
    return ModelCheckpoint(config=config, model=model, rng_provenance=provenance)
