"""Task datasets, the four report metrics, and the report table.

Downstream evaluation at desk scale uses either user-supplied TSV tasks or
the self-contained nesting probe task: classify well-nested grammar output
against minimally corrupted sequences that break the matching.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .corpusgen import GrammarConfig, POP, _generate_artificial_record
from .corpusstats import is_well_nested
from .errors import (
    DataError,
    GenerationError,
    InvalidArgument,
    SchemaError,
)
from .seeding import make_rng, record_rng
from .vocab import N_SPECIAL, UNK_ID, VocabSpec

TASK_KINDS = ("single-sequence", "sequence-pair", "regression")
METRIC_KINDS = ("accuracy", "f1_binary", "spearman", "matthews")
CORRUPTIONS = ("swap_adjacent", "relabel_pop")

# Table column order used for the report layout.
GLUE_TASK_ORDER = ("STS-B", "QNLI", "QQP", "CoLA", "SST-2", "MNLI", "MRPC", "RTE")


@dataclass
class TaskExample:
    tokens_a: list[int]
    tokens_b: list[int] | None
    label: float


@dataclass
class TaskDataset:
    name: str
    kind: str
    train: list[TaskExample]
    dev: list[TaskExample]
    label_space: list[str] | None  # None for regression
    stats: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidArgument(f"unknown task kind {self.kind!r}")
        if not self.stats:
            self.stats = {"train": len(self.train), "dev": len(self.dev)}


def _check_lengths(predictions, golds) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions)
    g = np.asarray(golds)
    if p.shape != g.shape or p.ndim != 1 or p.size < 1:
        raise InvalidArgument(
            f"predictions and golds must be equal-length 1-d with >= 1 entry, "
            f"got {p.shape} vs {g.shape}"
        )
    return p, g


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    return ranks


def compute_metric(kind: str, predictions, golds) -> float:
    """Textbook metric definitions.

    Spearman uses average ranks for ties; Matthews returns 0 when a
    confusion-matrix marginal is degenerate; f1_binary treats label 1 as
    the positive class.
    """
    p, g = _check_lengths(predictions, golds)
    if kind == "accuracy":
        return float(np.mean(p == g))
    if kind == "f1_binary":
        pi = p.astype(np.int64)
        gi = g.astype(np.int64)
        tp = int(np.sum((pi == 1) & (gi == 1)))
        fp = int(np.sum((pi == 1) & (gi == 0)))
        fn = int(np.sum((pi == 0) & (gi == 1)))
        denom = 2 * tp + fp + fn
        return 0.0 if denom == 0 else 2 * tp / denom
    if kind == "spearman":
        rp = _average_ranks(p.astype(np.float64))
        rg = _average_ranks(g.astype(np.float64))
        dp = rp - rp.mean()
        dg = rg - rg.mean()
        denom = np.sqrt((dp * dp).sum() * (dg * dg).sum())
        if denom == 0:
            return 0.0
        return float((dp * dg).sum() / denom)
    if kind == "matthews":
        pi = p.astype(np.int64)
        gi = g.astype(np.int64)
        if not set(np.unique(pi)).issubset({0, 1}) or not set(np.unique(gi)).issubset({0, 1}):
            raise InvalidArgument("matthews expects binary 0/1 labels")
        tp = int(np.sum((pi == 1) & (gi == 1)))
        tn = int(np.sum((pi == 0) & (gi == 0)))
        fp = int(np.sum((pi == 1) & (gi == 0)))
        fn = int(np.sum((pi == 0) & (gi == 1)))
        denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if denom == 0:
            return 0.0
        return float((tp * tn - fp * fn) / np.sqrt(denom))
    raise InvalidArgument(f"unknown metric kind {kind!r}")


@dataclass(frozen=True)
class TaskSchema:
    """Declares how to read a TSV task: its kind and label space."""

    name: str
    kind: str  # single-sequence | sequence-pair | regression
    label_space: tuple[str, ...] | None = None  # None for regression

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise InvalidArgument(f"unknown task kind {self.kind!r}")
        if self.kind == "regression":
            if self.label_space is not None:
                raise InvalidArgument("regression tasks have no label space")
        elif not self.label_space or len(self.label_space) < 2:
            raise InvalidArgument("classification tasks need >= 2 labels")


def _tokenize(text: str, vocab: VocabSpec) -> list[int]:
    ids = []
    for w in text.split():
        tid = vocab.token_to_id(w)
        ids.append(UNK_ID if tid is None else tid)
    return ids


def _read_split(path, schema: TaskSchema, vocab: VocabSpec) -> list[TaskExample]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        cols = set(reader.fieldnames)
        needed = {"text_a", "label"}
        if schema.kind == "sequence-pair":
            needed.add("text_b")
        missing = needed - cols
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        examples = []
        for row in reader:
            text_b = row.get("text_b")
            tokens_b = _tokenize(text_b, vocab) if text_b not in (None, "") else None
            if schema.kind == "regression":
                try:
                    label = float(row["label"])
                except ValueError:
                    raise DataError(f"{path}: non-numeric regression label {row['label']!r}") from None
                if not np.isfinite(label):
                    raise DataError(f"{path}: non-finite regression label")
            else:
                if row["label"] not in schema.label_space:
                    raise DataError(
                        f"{path}: label {row['label']!r} outside space {list(schema.label_space)}"
                    )
                label = float(schema.label_space.index(row["label"]))
            examples.append(TaskExample(_tokenize(row["text_a"], vocab), tokens_b, label))
    if not examples:
        raise DataError(f"{path}: empty split")
    return examples


def load_task(path, schema: TaskSchema, vocab: VocabSpec) -> TaskDataset:
    """Read `train.tsv` and `dev.tsv` from a task directory.

    TSV columns: `text_a`, optional `text_b`, `label`; whitespace
    tokenization against `vocab` with unk fallback.
    """
    schema.validate()
    train = _read_split(os.path.join(path, "train.tsv"), schema, vocab)
    dev = _read_split(os.path.join(path, "dev.tsv"), schema, vocab)
    label_space = None if schema.kind == "regression" else list(schema.label_space)
    return TaskDataset(name=schema.name, kind=schema.kind, train=train, dev=dev,
                       label_space=label_space)


def _corrupt(tokens: list[int], labels: str, corruption: str,
             vocab: VocabSpec, rng: np.random.Generator) -> list[int] | None:
    """One corruption attempt; returns None when the pick cannot break nesting."""
    if corruption == "swap_adjacent":
        eligible = [i for i in range(len(tokens) - 1) if tokens[i] != tokens[i + 1]]
        if not eligible:
            return None
        i = int(eligible[rng.integers(len(eligible))])
        out = list(tokens)
        out[i], out[i + 1] = out[i + 1], out[i]
    elif corruption == "relabel_pop":
        pops = [i for i, lab in enumerate(labels) if lab == POP]
        if not pops:
            return None
        i = int(pops[rng.integers(len(pops))])
        out = list(tokens)
        replacement = N_SPECIAL + int(rng.integers(vocab.content_size))
        if replacement == out[i]:
            replacement = N_SPECIAL + (replacement - N_SPECIAL + 1) % vocab.content_size
        out[i] = replacement
    else:
        raise InvalidArgument(f"unknown corruption {corruption!r}")
    return out if not is_well_nested(out) else None


def make_probe_task(
    gc: GrammarConfig,
    n_per_class: int,
    corruption: str = "swap_adjacent",
    seed: int = 0,
    name: str = "probe",
    dev_fraction: float = 0.5,
) -> TaskDataset:
    """Binary probe task: well-nested grammar sequences (class 1) versus the
    same sequences with one nesting-breaking corruption (class 0).

    Classes are exactly balanced; each corrupted example is verified broken
    by the matching check. A pair stays within one split so no sequence
    leaks between train and dev.
    """
    gc.validate()
    if n_per_class < 1:
        raise InvalidArgument(f"n_per_class must be >= 1, got {n_per_class}")
    if corruption not in CORRUPTIONS:
        raise InvalidArgument(f"unknown corruption {corruption!r}")
    vocab = gc.dist.vocab
    pairs: list[tuple[TaskExample, TaskExample]] = []
    for idx in range(n_per_class):
        rng = record_rng(seed, idx)
        record, _, _, _ = _generate_artificial_record(gc, rng)
        negative = None
        for _attempt in range(100):
            negative = _corrupt(record.tokens, record.labels, corruption, vocab, rng)
            if negative is not None:
                break
        if negative is None:
            raise GenerationError(
                f"could not break nesting of record {idx} in 100 attempts"
            )
        pairs.append(
            (
                TaskExample(list(record.tokens), None, 1.0),
                TaskExample(negative, None, 0.0),
            )
        )
    order = make_rng(seed, "probe-split").permutation(n_per_class)
    n_dev_pairs = int(round(n_per_class * dev_fraction))
    dev_set = set(order[:n_dev_pairs].tolist())
    train: list[TaskExample] = []
    dev: list[TaskExample] = []
    for i, (pos, neg) in enumerate(pairs):
        (dev if i in dev_set else train).extend((pos, neg))
    return TaskDataset(
        name=name,
        kind="single-sequence",
        train=train,
        dev=dev,
        label_space=["corrupted", "nested"],
    )


@dataclass
class ReportTable:
    """Rows are pre-training arms, columns are tasks plus the per-row average."""

    arms: list[str]
    tasks: list[str]
    cells: dict[tuple[str, str], tuple[float, str]]  # (arm, task) -> (score, metric)
    averages: dict[str, float]

    def to_csv(self) -> str:
        lines = ["arm," + ",".join(self.tasks) + ",Avg"]
        for arm in self.arms:
            row = [arm]
            for task in self.tasks:
                cell = self.cells.get((arm, task))
                row.append("" if cell is None else f"{cell[0]:.6f}")
            row.append(f"{self.averages[arm]:.6f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        headers = ["L1"] + list(self.tasks) + ["Avg"]
        rows = []
        for arm in self.arms:
            row = [arm]
            for task in self.tasks:
                cell = self.cells.get((arm, task))
                row.append("-" if cell is None else f"{cell[0]:.2f}")
            row.append(f"{self.averages[arm]:.2f}")
            rows.append(row)
        widths = [max(len(headers[c]), *(len(r[c]) for r in rows)) if rows else len(headers[c])
                  for c in range(len(headers))]
        def fmt(row):
            return "  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip()
        return "\n".join([fmt(headers)] + [fmt(r) for r in rows]) + "\n"


def build_report(runs: list[tuple[str, str, str, float]]) -> ReportTable:
    """Assemble the per-arm x per-task score matrix.

    `runs` entries are (arm, task, metric kind, score). Each (arm, task)
    may appear once, except MNLI which may appear exactly twice (matched and
    mismatched) and is averaged. Known tasks keep the table column order;
    unknown tasks follow in first-seen order.
    """
    arms: list[str] = []
    tasks_seen: list[str] = []
    scores: dict[tuple[str, str], list[tuple[float, str]]] = {}
    for arm, task, kind, score in runs:
        if kind not in METRIC_KINDS:
            raise InvalidArgument(f"unknown metric kind {kind!r}")
        if arm not in arms:
            arms.append(arm)
        if task not in tasks_seen:
            tasks_seen.append(task)
        scores.setdefault((arm, task), []).append((float(score), kind))
    cells: dict[tuple[str, str], tuple[float, str]] = {}
    for (arm, task), entries in scores.items():
        if len(entries) == 1:
            cells[(arm, task)] = entries[0]
        elif task == "MNLI" and len(entries) == 2:
            if entries[0][1] != entries[1][1]:
                raise InvalidArgument("MNLI matched/mismatched use different metrics")
            cells[(arm, task)] = ((entries[0][0] + entries[1][0]) / 2, entries[0][1])
        else:
            raise InvalidArgument(f"duplicate cell for arm {arm!r}, task {task!r}")
    known = [t for t in GLUE_TASK_ORDER if t in tasks_seen]
    unknown = [t for t in tasks_seen if t not in GLUE_TASK_ORDER]
    tasks = known + unknown
    averages = {}
    for arm in arms:
        vals = [cells[(arm, t)][0] for t in tasks if (arm, t) in cells]
        if not vals:
            raise InvalidArgument(f"arm {arm!r} has no task scores")
        averages[arm] = float(np.mean(vals))
    return ReportTable(arms=arms, tasks=tasks, cells=cells, averages=averages)
