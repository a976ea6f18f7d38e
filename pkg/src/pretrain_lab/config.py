"""Experiment configuration: a sectioned key=value format and its parser.

The format is INI-style but parsed by hand so every diagnostic carries a
file line number and unknown keys are rejected. Section order must follow
the pipeline stage order: experiment, vocab, model, corpus (or arm.*),
pretrain, align, surgery, task.*, report.
"""

import os
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .model import ModelConfig
from .presets import (
    ALIGN_DESK,
    DESK_MODEL,
    DESK_VOCAB_CONTENT,
    FINETUNE_DESK,
    PAPER_MODEL,
    PRETRAIN_PRESETS,
    VOCAB_PRESETS,
    finetune_presets,
)
from .training import TrainConfig
from .vocab import N_SPECIAL

CORPUS_KINDS = ("uniform", "zipf", "empirical", "binned", "artificial", "ingest", "none")


@dataclass(frozen=True)
class CorpusSpec:
    """Declarative description of one pre-training corpus."""

    kind: str
    zipf_exponent: float = 1.0
    bin_size: int | None = None
    base_kind: str = "zipf"
    push_probability: float = 0.4
    length_min: int = 90
    length_max: int = 120
    target_tokens: int = 100_000
    flush_at_end: bool = True
    ingest_path: str | None = None
    freq_table: str | None = None


@dataclass(frozen=True)
class ArmConfig:
    """One experimental condition: corpus plus optional align/surgery stages.

    kind "none" is the no-pre-train arm; fine-tuning then starts from a
    fresh initialization under the same seed discipline.
    """

    name: str
    corpus: CorpusSpec
    align: bool = False
    surgery: bool = False


@dataclass(frozen=True)
class AlignSpec:
    corpus: CorpusSpec
    train: TrainConfig


@dataclass(frozen=True)
class SurgeryConfig:
    used_from: str = "corpus"  # corpus: ids observed in pre-training; first_n: ids 5..5+n-1
    n: int = 50


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # probe | tsv
    metric: str = "accuracy"
    seeds: tuple[int, ...] = (1, 2, 3)
    train: TrainConfig = FINETUNE_DESK
    # probe parameters
    n_per_class: int = 500
    corruption: str = "swap_adjacent"
    push_probability: float = 0.4
    length_min: int = 16
    length_max: int = 48
    dev_fraction: float = 0.5
    # tsv parameters
    path: str | None = None
    task_kind: str = "single-sequence"
    labels: tuple[str, ...] | None = None


@dataclass
class ExperimentConfig:
    """Fully resolved experiment: arms share the vocabulary, model shape,
    pre-training recipe, fine-tune tasks, output directory, and master seed."""

    name: str
    seed: int
    out_dir: str
    vocab_content: int
    vocab_tokens_file: str | None
    model: ModelConfig
    pretrain: TrainConfig
    eval_fraction: float
    arms: list[ArmConfig]
    align: AlignSpec | None
    surgery: SurgeryConfig | None
    tasks: list[TaskSpec]
    source_path: str | None = None
    source_text: str = ""


_STAGE_ORDER = ["experiment", "vocab", "model", "corpus", "pretrain", "align",
                "surgery", "task", "report"]


def _stage_of(section: str) -> str:
    if section.startswith("arm."):
        return "corpus"
    if section.startswith("task."):
        return "task"
    return section


@dataclass
class _Section:
    name: str
    line: int
    items: dict[str, tuple[str, int]] = field(default_factory=dict)


def _read_sections(path: str, text: str) -> list[_Section]:
    sections: list[_Section] = []
    current: _Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError("empty section name", path, lineno)
            if any(s.name == name for s in sections):
                raise ConfigError(f"duplicate section [{name}]", path, lineno)
            current = _Section(name=name, line=lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", path, lineno)
        if current is None:
            raise ConfigError("key outside any section", path, lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in current.items:
            raise ConfigError(f"duplicate key {key!r} in [{current.name}]", path, lineno)
        current.items[key] = (value, lineno)
    return sections


_KNOWN_KEYS = {
    "experiment": {"name", "seed", "out"},
    "vocab": {"content_size", "preset", "tokens_file"},
    "model": {"preset", "n_layers", "hidden_dim", "n_heads", "ff_dim",
              "max_positions", "dropout_rate", "vocab_total"},
    "corpus": {"kind", "zipf_exponent", "bin_size", "base_kind", "push_probability",
               "length_min", "length_max", "target_tokens", "flush_at_end",
               "ingest_path", "freq_table", "align", "surgery"},
    "pretrain": {"preset", "batch_size", "learning_rate", "total_steps", "warmup_steps",
                 "max_seq_len", "weight_decay", "log_every", "eval_every", "eval_fraction"},
    "align": {"kind", "zipf_exponent", "bin_size", "base_kind", "push_probability",
              "length_min", "length_max", "target_tokens", "flush_at_end", "ingest_path",
              "freq_table", "batch_size", "learning_rate", "total_steps", "warmup_steps",
              "max_seq_len", "log_every"},
    "surgery": {"used_from", "n"},
    "task": {"kind", "metric", "seeds", "preset", "batch_size", "learning_rate",
             "total_steps", "warmup_steps", "max_seq_len", "n_per_class", "corruption",
             "push_probability", "length_min", "length_max", "dev_fraction",
             "path", "task_kind", "labels"},
    "report": set(),
}


class _SectionView:
    """Typed access to one section's keys with positioned errors."""

    def __init__(self, path: str, section: _Section):
        self.path = path
        self.section = section

    def has(self, key: str) -> bool:
        return key in self.section.items

    def _raw(self, key: str) -> tuple[str, int]:
        return self.section.items[key]

    def error(self, key: str, message: str) -> ConfigError:
        _, line = self._raw(key)
        return ConfigError(message, self.path, line)

    def get_str(self, key: str, default: str | None = None) -> str | None:
        if not self.has(key):
            return default
        return self._raw(key)[0]

    def get_int(self, key: str, default: int | None = None) -> int | None:
        if not self.has(key):
            return default
        value, line = self._raw(key)
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {value!r}", self.path, line) from None

    def get_float(self, key: str, default: float | None = None) -> float | None:
        if not self.has(key):
            return default
        value, line = self._raw(key)
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {value!r}", self.path, line) from None

    def get_bool(self, key: str, default: bool | None = None) -> bool | None:
        if not self.has(key):
            return default
        value, line = self._raw(key)
        if value.lower() in ("true", "yes", "1"):
            return True
        if value.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {value!r}", self.path, line)

    def get_choice(self, key: str, choices, default: str | None = None) -> str | None:
        value = self.get_str(key, default)
        if value is not None and value not in choices:
            raise self.error(key, f"{key}: expected one of {sorted(choices)}, got {value!r}")
        return value

    def get_int_list(self, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        if not self.has(key):
            return default
        value, line = self._raw(key)
        try:
            return tuple(int(part.strip()) for part in value.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {value!r}",
                              self.path, line) from None


def _check_keys(path: str, section: _Section) -> None:
    stage = _stage_of(section.name)
    known = _KNOWN_KEYS.get(stage)
    if known is None:
        raise ConfigError(f"unknown section [{section.name}]", path, section.line)
    for key, (_, line) in section.items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]", path, line)


def _check_stage_order(path: str, sections: list[_Section]) -> None:
    last_rank = -1
    last_name = None
    for s in sections:
        rank = _STAGE_ORDER.index(_stage_of(s.name))
        if rank < last_rank:
            raise ConfigError(
                f"section [{s.name}] violates the stage order "
                f"(it must come before [{last_name}])",
                path, s.line,
            )
        if rank > last_rank:
            last_rank = rank
            last_name = s.name


def _require_path(view: _SectionView, key: str, base_dir: str) -> str:
    value = view.get_str(key)
    resolved = value if os.path.isabs(value) else os.path.join(base_dir, value)
    if not os.path.exists(resolved):
        raise view.error(key, f"{key}: path does not exist: {resolved}")
    return resolved


def _parse_corpus_spec(view: _SectionView, base_dir: str, allow_none: bool) -> CorpusSpec:
    kinds = CORPUS_KINDS if allow_none else tuple(k for k in CORPUS_KINDS if k != "none")
    kind = view.get_choice("kind", kinds)
    if kind is None:
        raise ConfigError(f"[{view.section.name}] needs a 'kind' key",
                          view.path, view.section.line)
    ingest_path = None
    freq_table = None
    if kind == "ingest":
        if not view.has("ingest_path"):
            raise ConfigError(f"[{view.section.name}] kind=ingest needs ingest_path",
                              view.path, view.section.line)
        ingest_path = _require_path(view, "ingest_path", base_dir)
    if view.has("freq_table"):
        freq_table = _require_path(view, "freq_table", base_dir)
    if kind == "empirical" and freq_table is None:
        raise ConfigError(f"[{view.section.name}] kind=empirical needs freq_table",
                          view.path, view.section.line)
    return CorpusSpec(
        kind=kind,
        zipf_exponent=view.get_float("zipf_exponent", 1.0),
        bin_size=view.get_int("bin_size", None),
        base_kind=view.get_choice("base_kind", ("zipf", "uniform"), "zipf"),
        push_probability=view.get_float("push_probability", 0.4),
        length_min=view.get_int("length_min", 90),
        length_max=view.get_int("length_max", 120),
        target_tokens=view.get_int("target_tokens", 100_000),
        flush_at_end=view.get_bool("flush_at_end", True),
        ingest_path=ingest_path,
        freq_table=freq_table,
    )


def _apply_train_overrides(view: _SectionView, base: TrainConfig) -> TrainConfig:
    updates = {}
    if view.has("batch_size"):
        updates["batch_size"] = view.get_int("batch_size")
    if view.has("learning_rate"):
        updates["learning_rate"] = view.get_float("learning_rate")
    if view.has("total_steps"):
        updates["total_steps"] = view.get_int("total_steps")
    if view.has("warmup_steps"):
        updates["warmup_steps"] = view.get_int("warmup_steps")
    if view.has("max_seq_len"):
        updates["max_seq_len"] = view.get_int("max_seq_len")
    if view.has("weight_decay"):
        updates["weight_decay"] = view.get_float("weight_decay")
    if view.has("log_every"):
        updates["log_every"] = view.get_int("log_every")
    if view.has("eval_every"):
        updates["eval_every"] = view.get_int("eval_every")
    return replace(base, **updates) if updates else base


def _parse_task(view: _SectionView, name: str, base_dir: str) -> TaskSpec:
    kind = view.get_choice("kind", ("probe", "tsv"), "probe")
    base = FINETUNE_DESK
    if view.has("preset"):
        preset_name = view.get_str("preset")
        if preset_name == "desk":
            base = FINETUNE_DESK
        else:
            table = finetune_presets()
            if preset_name not in table:
                raise view.error("preset", f"preset: unknown preset {preset_name!r}")
            base = table[preset_name].to_train_config()
    train = _apply_train_overrides(view, base)
    path = None
    labels = None
    if kind == "tsv":
        if not view.has("path"):
            raise ConfigError(f"[task.{name}] kind=tsv needs path", view.path, view.section.line)
        path = _require_path(view, "path", base_dir)
        if view.has("labels"):
            labels = tuple(p.strip() for p in view.get_str("labels").split(",") if p.strip())
    return TaskSpec(
        name=name,
        kind=kind,
        metric=view.get_choice("metric", ("accuracy", "f1_binary", "spearman", "matthews"),
                               "accuracy"),
        seeds=view.get_int_list("seeds", (1, 2, 3)),
        train=train,
        n_per_class=view.get_int("n_per_class", 500),
        corruption=view.get_choice("corruption", ("swap_adjacent", "relabel_pop"),
                                   "swap_adjacent"),
        push_probability=view.get_float("push_probability", 0.4),
        length_min=view.get_int("length_min", 16),
        length_max=view.get_int("length_max", 48),
        dev_fraction=view.get_float("dev_fraction", 0.5),
        path=path,
        task_kind=view.get_choice("task_kind",
                                  ("single-sequence", "sequence-pair", "regression"),
                                  "single-sequence"),
        labels=labels,
    )


def parse_config(path) -> ExperimentConfig:
    """Parse and fully validate an experiment file.

    Unknown sections and keys are rejected with their line numbers; presets
    fill every omitted value; referenced paths must exist.
    """
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path) from None
    base_dir = os.path.dirname(os.path.abspath(path))
    sections = _read_sections(path, text)
    for section in sections:
        _check_keys(path, section)
    _check_stage_order(path, sections)
    by_name = {s.name: s for s in sections}

    def view(name: str) -> _SectionView | None:
        return _SectionView(path, by_name[name]) if name in by_name else None

    exp = view("experiment")
    name = exp.get_str("name", "experiment") if exp else "experiment"
    seed = exp.get_int("seed", 0) if exp else 0
    out_dir = exp.get_str("out", None) if exp else None
    if out_dir is None:
        out_dir = os.path.join("runs", name)
    elif not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)

    vocab_content = DESK_VOCAB_CONTENT
    vocab_tokens_file = None
    vv = view("vocab")
    if vv:
        if vv.has("preset"):
            preset = vv.get_choice("preset", tuple(VOCAB_PRESETS))
            vocab_content = VOCAB_PRESETS[preset]
        if vv.has("content_size"):
            vocab_content = vv.get_int("content_size")
            if vocab_content < 1:
                raise vv.error("content_size", "content_size must be >= 1")
        if vv.has("tokens_file"):
            vocab_tokens_file = _require_path(vv, "tokens_file", base_dir)

    mv = view("model")
    model_cfg = DESK_MODEL
    if mv and mv.has("preset"):
        preset = mv.get_choice("preset", ("desk", "paper"))
        model_cfg = DESK_MODEL if preset == "desk" else PAPER_MODEL
    model_cfg = replace(model_cfg, vocab_total=vocab_content + N_SPECIAL)
    if mv:
        updates = {}
        for key in ("n_layers", "hidden_dim", "n_heads", "ff_dim", "max_positions",
                    "vocab_total"):
            if mv.has(key):
                updates[key] = mv.get_int(key)
        if mv.has("dropout_rate"):
            updates["dropout_rate"] = mv.get_float("dropout_rate")
        if updates:
            model_cfg = replace(model_cfg, **updates)
    if model_cfg.vocab_total < vocab_content + N_SPECIAL:
        raise ConfigError(
            f"model vocab_total {model_cfg.vocab_total} smaller than vocabulary "
            f"{vocab_content + N_SPECIAL}",
            path, by_name["model"].line if "model" in by_name else 1,
        )

    pv = view("pretrain")
    pretrain_cfg = PRETRAIN_PRESETS["desk"]
    eval_fraction = 0.05
    if pv:
        if pv.has("preset"):
            preset = pv.get_choice("preset", tuple(PRETRAIN_PRESETS))
            pretrain_cfg = PRETRAIN_PRESETS[preset]
        pretrain_cfg = _apply_train_overrides(pv, pretrain_cfg)
        if pv.has("eval_fraction"):
            eval_fraction = pv.get_float("eval_fraction")
            if not (0 <= eval_fraction < 1):
                raise pv.error("eval_fraction", "eval_fraction must be in [0, 1)")

    arm_sections = [s for s in sections if s.name.startswith("arm.")]
    arms: list[ArmConfig] = []
    if arm_sections and "corpus" in by_name:
        raise ConfigError("use either [corpus] or [arm.*] sections, not both",
                          path, arm_sections[0].line)
    if arm_sections:
        for s in arm_sections:
            arm_name = s.name[len("arm."):]
            if not arm_name:
                raise ConfigError("empty arm name", path, s.line)
            v = _SectionView(path, s)
            spec = _parse_corpus_spec(v, base_dir, allow_none=True)
            align_flag = v.get_bool("align", False)
            surgery_flag = v.get_bool("surgery", False)
            if spec.kind == "none" and (align_flag or surgery_flag):
                raise ConfigError(
                    f"arm {arm_name!r} has no pre-training; align/surgery need a checkpoint",
                    path, s.line,
                )
            arms.append(ArmConfig(name=arm_name, corpus=spec, align=align_flag,
                                  surgery=surgery_flag))
    elif "corpus" in by_name:
        v = _SectionView(path, by_name["corpus"])
        spec = _parse_corpus_spec(v, base_dir, allow_none=True)
        align_flag = v.get_bool("align", False)
        surgery_flag = v.get_bool("surgery", False)
        arms.append(ArmConfig(name=name, corpus=spec, align=align_flag,
                              surgery=surgery_flag))
    else:
        raise ConfigError("config needs a [corpus] section or [arm.*] sections", path)

    align_spec = None
    av = view("align")
    if av:
        corpus = _parse_corpus_spec(av, base_dir, allow_none=False)
        train = _apply_train_overrides(av, ALIGN_DESK)
        align_spec = AlignSpec(corpus=corpus, train=train)
    if any(a.align for a in arms) and align_spec is None:
        raise ConfigError("an arm requests align but there is no [align] section", path)

    surgery_cfg = None
    sv = view("surgery")
    if sv:
        surgery_cfg = SurgeryConfig(
            used_from=sv.get_choice("used_from", ("corpus", "first_n"), "corpus"),
            n=sv.get_int("n", 50),
        )
        if surgery_cfg.n < 1:
            raise sv.error("n", "n must be >= 1")
    if any(a.surgery for a in arms) and surgery_cfg is None:
        surgery_cfg = SurgeryConfig()

    tasks: list[TaskSpec] = []
    for s in sections:
        if s.name.startswith("task."):
            task_name = s.name[len("task."):]
            if not task_name:
                raise ConfigError("empty task name", path, s.line)
            tasks.append(_parse_task(_SectionView(path, s), task_name, base_dir))

    return ExperimentConfig(
        name=name,
        seed=seed,
        out_dir=out_dir,
        vocab_content=vocab_content,
        vocab_tokens_file=vocab_tokens_file,
        model=model_cfg,
        pretrain=pretrain_cfg,
        eval_fraction=eval_fraction,
        arms=arms,
        align=align_spec,
        surgery=surgery_cfg,
        tasks=tasks,
        source_path=path,
        source_text=text,
    )
