"""Shipped configuration presets.

`pretrain.table3` carries the full-scale pre-training hyperparameters; the
desk presets are small enough to run on one CPU core in minutes and are the
defaults everywhere. Fine-tune presets per task come from the packaged
table (see data/finetune_presets.txt).
"""

from dataclasses import dataclass
from importlib import resources

from .errors import InvalidArgument
from .model import ModelConfig
from .training import TrainConfig

# Vocabulary presets: content token counts (specials excluded). The two
# artificial presets reflect the two reported sizes (29001 vs 29991 total);
# content_size stays a free config value.
VOCAB_PRESETS = {
    "desk": 507,             # desk-scale: total 512
    "baseline30k": 29995,    # the 30000-total baselines
    "artificial29k": 28996,  # stack-grammar corpus, 29001 total
    "artificial-alt": 29986, # alternate reported size, 29991 total
}

DESK_VOCAB_CONTENT = VOCAB_PRESETS["desk"]

DESK_MODEL = ModelConfig(
    n_layers=4,
    hidden_dim=128,
    n_heads=4,
    ff_dim=512,
    vocab_total=512,
    max_positions=128,
    dropout_rate=0.0,
)

PAPER_MODEL = ModelConfig(
    n_layers=12,
    hidden_dim=768,
    n_heads=12,
    ff_dim=3072,
    vocab_total=30000,
    max_positions=128,
    dropout_rate=0.0,
)

# Full-scale pre-training hyperparameters.
PRETRAIN_TABLE3 = TrainConfig(
    batch_size=150,
    learning_rate=5e-5,
    total_steps=200_000,
    warmup_steps=10_000,
    max_seq_len=128,
    log_every=500,
)

# Desk-scale pre-training: sized for a 2000-step run on one CPU core.
# Calibrated with short sequences (12-28 tokens) and 10^5-token corpora.
PRETRAIN_DESK = TrainConfig(
    batch_size=16,
    learning_rate=5e-5,
    total_steps=2000,
    warmup_steps=100,
    max_seq_len=128,
    log_every=100,
)

# Desk-scale embedding alignment (embeddings + LM head only).
ALIGN_DESK = TrainConfig(
    batch_size=8,
    learning_rate=3e-4,
    total_steps=200,
    warmup_steps=20,
    max_seq_len=128,
    log_every=50,
    trainable="embeddings+lm_head",
)

# Desk-scale fine-tuning on the probe task.
FINETUNE_DESK = TrainConfig(
    batch_size=16,
    learning_rate=3e-5,
    total_steps=300,
    warmup_steps=30,
    max_seq_len=128,
    log_every=50,
)

PRETRAIN_PRESETS = {"table3": PRETRAIN_TABLE3, "desk": PRETRAIN_DESK}

# Metric used per GLUE task in the report.
METRIC_BY_TASK = {
    "STS-B": "spearman",
    "QNLI": "accuracy",
    "QQP": "f1_binary",
    "CoLA": "accuracy",  # matthews is also computed; the config picks the label
    "SST-2": "accuracy",
    "MNLI": "accuracy",
    "MRPC": "f1_binary",
    "RTE": "accuracy",
}

# train / dev / test example counts of the GLUE tasks, for documentation
# and dataset-statistics checks when users supply subsampled TSVs.
GLUE_STATS = {
    "MRPC": ("3.6K", "0.4K", "1.7K"),
    "RTE": ("2.4K", "0.2K", "3K"),
    "STS-B": ("5.7K", "1.5K", "1.3K"),
    "QNLI": ("104K", "5.4K", "5.4K"),
    "QQP": ("363K", "40.4K", "391.0K"),
    "CoLA": ("8.5K", "1.0K", "1.1K"),
    "MNLI": ("392.7K", "9.8K + 9.8K", "9.8K + 9.8K"),
    "SST-2": ("67.4K", "0.9K", "1.8K"),
}


@dataclass(frozen=True)
class FinetunePreset:
    task: str
    learning_rate: float
    batch_size: int
    encoder_dropout: float
    classifier_dropout: float
    total_steps: int
    warmup_steps: int
    max_seq_len: int

    def to_train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            total_steps=self.total_steps,
            warmup_steps=self.warmup_steps,
            max_seq_len=self.max_seq_len,
            seed=seed,
        )


def finetune_presets() -> dict[str, FinetunePreset]:
    """Parse the shipped per-task fine-tuning preset table."""
    text = resources.files("pretrain_lab").joinpath("data/finetune_presets.txt").read_text()
    presets: dict[str, FinetunePreset] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise InvalidArgument(f"bad preset line: {line!r}")
        task, lr, bsz, dr, cls_dr, ts, ws, msl = parts
        presets[task] = FinetunePreset(
            task=task,
            learning_rate=float(lr),
            batch_size=int(bsz),
            encoder_dropout=float(dr),
            classifier_dropout=float(cls_dr),
            total_steps=int(ts),
            warmup_steps=int(ws),
            max_seq_len=int(msl),
        )
    return presets
