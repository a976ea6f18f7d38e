"""Config-driven orchestration: generate, pretrain, align, surgery,
finetune, report.

Every stage reads its inputs from disk and writes its outputs plus a
manifest (inputs' digests, seeds, versions), so stages compose as CLI
subcommands and any corpus artifact can be regenerated from its manifest
alone. Writers go through .partial files and atomic renames; a failed
stage never corrupts an earlier stage's artifacts.
"""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import __version__
from .config import ArmConfig, CorpusSpec, ExperimentConfig, TaskSpec
from .corpusgen import (
    AnnotatedCorpus,
    GrammarConfig,
    generate_artificial,
    generate_baseline,
    ingest_text,
    read_corpus,
    serialize_corpus,
    split_records,
)
from .corpusstats import length_stats
from .errors import ConfigError, DataError, InvalidArgument, StageError
from .evaluation import TaskDataset, TaskSchema, build_report, load_task, make_probe_task
from .model import ModelCheckpoint, init_model, load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .training import (
    HeadSpec,
    MaskPolicy,
    SurgerySpec,
    align_embeddings,
    finetune,
    loss_curve_csv,
    pretrain,
    substitute_unused_embeddings,
    used_content_ids,
)
from .vocab import (
    VocabSpec,
    build_vocab,
    load_frequency_table,
    make_distribution,
)

STAGES = ("corpus", "pretrain", "align", "surgery", "finetune", "report")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text_atomic(path, text: str) -> None:
    partial = f"{path}.partial"
    with open(partial, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(partial, path)


def write_manifest(path, entries: dict[str, str]) -> None:
    base = {
        "package_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
    }
    base.update(entries)
    write_text_atomic(path, "".join(f"{k}={v}\n" for k, v in base.items()))


def read_manifest(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, value = line.partition("=")
            if sep:
                out[key] = value
    return out


@dataclass
class ArmPaths:
    root: str

    def __post_init__(self):
        self.corpus = os.path.join(self.root, "corpus.txt")
        self.stats_txt = os.path.join(self.root, "corpus.stats.txt")
        self.stats_csv = os.path.join(self.root, "corpus.stats.csv")
        self.pretrain_ckpt = os.path.join(self.root, "pretrain.ckpt")
        self.pretrain_curve = os.path.join(self.root, "pretrain.loss.csv")
        self.align_corpus = os.path.join(self.root, "align_corpus.txt")
        self.align_ckpt = os.path.join(self.root, "align.ckpt")
        self.align_curve = os.path.join(self.root, "align.loss.csv")
        self.surgery_ckpt = os.path.join(self.root, "surgery.ckpt")

    def manifest(self, stage: str, task: str | None = None) -> str:
        name = f"{stage}.{task}.manifest.txt" if task else f"{stage}.manifest.txt"
        return os.path.join(self.root, name)

    def metrics_csv(self, task: str) -> str:
        return os.path.join(self.root, f"finetune.{task}.metrics.csv")


def arm_paths(config: ExperimentConfig, arm: ArmConfig) -> ArmPaths:
    return ArmPaths(os.path.join(config.out_dir, "arms", arm.name))


def experiment_vocab(config: ExperimentConfig) -> VocabSpec:
    tokens = None
    if config.vocab_tokens_file:
        table = load_frequency_table(config.vocab_tokens_file)
        ranked = sorted(table, key=table.get, reverse=True)[: config.vocab_content]
        if len(ranked) == config.vocab_content:
            tokens = ranked
        else:
            raise ConfigError(
                f"tokens_file provides {len(ranked)} tokens, need {config.vocab_content}"
            )
    return build_vocab(config.vocab_content, tokens)


def build_distribution(spec: CorpusSpec, vocab: VocabSpec):
    kind = spec.kind
    if kind in ("zipf", "artificial"):
        if spec.bin_size is not None:
            return make_distribution("binned", vocab, base_kind="zipf",
                                     zipf_exponent=spec.zipf_exponent, bin_size=spec.bin_size)
        return make_distribution("zipf", vocab, zipf_exponent=spec.zipf_exponent)
    if kind == "uniform":
        if spec.bin_size is not None:
            return make_distribution("binned", vocab, base_kind="uniform",
                                     bin_size=spec.bin_size)
        return make_distribution("uniform", vocab)
    if kind == "binned":
        return make_distribution("binned", vocab, base_kind=spec.base_kind,
                                 zipf_exponent=spec.zipf_exponent, bin_size=spec.bin_size)
    if kind == "empirical":
        table = load_frequency_table(spec.freq_table)
        return make_distribution("empirical", vocab, frequency_table=table)
    raise InvalidArgument(f"no distribution for corpus kind {kind!r}")


def build_corpus(spec: CorpusSpec, vocab: VocabSpec, seed: int) -> AnnotatedCorpus:
    """Generate (or ingest) the corpus a CorpusSpec describes."""
    if spec.kind == "none":
        raise InvalidArgument("the no-pre-train arm has no corpus")
    if spec.kind == "ingest":
        return ingest_text(spec.ingest_path, vocab)
    if spec.kind == "artificial":
        gc = GrammarConfig(
            push_probability=spec.push_probability,
            dist=build_distribution(spec, vocab),
            length_min=spec.length_min,
            length_max=spec.length_max,
            flush_at_end=spec.flush_at_end,
        )
        return generate_artificial(gc, spec.target_tokens, seed)
    dist = build_distribution(spec, vocab)
    return generate_baseline(dist, spec.length_min, spec.length_max, spec.target_tokens, seed)


def _corpus_spec_entries(spec: CorpusSpec, prefix: str = "corpus.") -> dict[str, str]:
    entries = {f"{prefix}kind": spec.kind}
    if spec.kind in ("zipf", "artificial", "binned"):
        entries[f"{prefix}zipf_exponent"] = repr(spec.zipf_exponent)
    if spec.bin_size is not None:
        entries[f"{prefix}bin_size"] = str(spec.bin_size)
    if spec.kind == "binned":
        entries[f"{prefix}base_kind"] = spec.base_kind
    if spec.kind == "artificial":
        entries[f"{prefix}push_probability"] = repr(spec.push_probability)
        entries[f"{prefix}flush_at_end"] = "true" if spec.flush_at_end else "false"
    if spec.kind != "ingest":
        entries[f"{prefix}length_min"] = str(spec.length_min)
        entries[f"{prefix}length_max"] = str(spec.length_max)
        entries[f"{prefix}target_tokens"] = str(spec.target_tokens)
    else:
        entries[f"{prefix}ingest_path"] = spec.ingest_path
    if spec.freq_table:
        entries[f"{prefix}freq_table"] = spec.freq_table
    return entries


def corpus_spec_from_manifest(entries: dict[str, str], prefix: str = "corpus.") -> CorpusSpec:
    def get(key, default=None):
        return entries.get(prefix + key, default)

    kind = get("kind")
    if kind is None:
        raise DataError("manifest has no corpus description")
    return CorpusSpec(
        kind=kind,
        zipf_exponent=float(get("zipf_exponent", "1.0")),
        bin_size=int(get("bin_size")) if get("bin_size") else None,
        base_kind=get("base_kind", "zipf"),
        push_probability=float(get("push_probability", "0.4")),
        length_min=int(get("length_min", "90")),
        length_max=int(get("length_max", "120")),
        target_tokens=int(get("target_tokens", "100000")),
        flush_at_end=get("flush_at_end", "true") == "true",
        ingest_path=get("ingest_path"),
        freq_table=get("freq_table"),
    )


def regenerate_corpus_from_manifest(manifest_path, out_path) -> str:
    """Rebuild a corpus artifact purely from its manifest; returns the digest.

    The manifest carries the generator parameters, vocabulary size, and
    seed, which determine the corpus bytes exactly.
    """
    entries = read_manifest(manifest_path)
    spec = corpus_spec_from_manifest(entries)
    content_size = int(entries["vocab.content_size"])
    tokens = None
    tokens_file = entries.get("vocab.tokens_file")
    if tokens_file:
        table = load_frequency_table(tokens_file)
        tokens = sorted(table, key=table.get, reverse=True)[:content_size]
    vocab = build_vocab(content_size, tokens)
    corpus = build_corpus(spec, vocab, int(entries["seed"]))
    serialize_corpus(corpus, out_path)
    return file_digest(out_path)


# ---------------------------------------------------------------------------
# stages


def stage_corpus(config: ExperimentConfig, arm: ArmConfig, vocab: VocabSpec) -> None:
    """Generate/ingest the arm's corpus; write stats and the manifest."""
    if arm.corpus.kind == "none":
        return
    paths = arm_paths(config, arm)
    os.makedirs(paths.root, exist_ok=True)
    seed = derive_seed(config.seed, "arm", arm.name, "corpus")
    corpus = build_corpus(arm.corpus, vocab, seed)
    serialize_corpus(corpus, paths.corpus)
    report = length_stats(corpus)
    write_text_atomic(paths.stats_txt, report.to_text())
    write_text_atomic(paths.stats_csv, report.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
    entries = {
        "stage": "corpus",
        "arm": arm.name,
        "seed": str(seed),
        "vocab.content_size": str(vocab.content_size),
    }
    if config.vocab_tokens_file:
        entries["vocab.tokens_file"] = config.vocab_tokens_file
    entries.update(_corpus_spec_entries(arm.corpus))
    entries[f"output.{os.path.basename(paths.corpus)}"] = file_digest(paths.corpus)
    entries[f"output.{os.path.basename(paths.stats_txt)}"] = file_digest(paths.stats_txt)
    write_manifest(paths.manifest("corpus"), entries)


def _load_arm_corpus(config: ExperimentConfig, arm: ArmConfig, vocab: VocabSpec) -> AnnotatedCorpus:
    paths = arm_paths(config, arm)
    if not os.path.exists(paths.corpus):
        raise DataError(f"arm {arm.name!r}: corpus artifact missing; run the gen stage first")
    return read_corpus(paths.corpus, vocab)


def stage_pretrain(config: ExperimentConfig, arm: ArmConfig, vocab: VocabSpec) -> None:
    """Init the model and run masked-LM pre-training on the arm corpus."""
    if arm.corpus.kind == "none":
        return
    paths = arm_paths(config, arm)
    corpus = _load_arm_corpus(config, arm, vocab)
    init_seed = derive_seed(config.seed, "arm", arm.name, "init")
    train_seed = derive_seed(config.seed, "arm", arm.name, "pretrain")
    split_seed = derive_seed(config.seed, "arm", arm.name, "evalsplit")
    train_records, eval_records = split_records(corpus, config.eval_fraction, split_seed)
    train_corpus = AnnotatedCorpus(train_records, corpus.vocab, corpus.provenance)
    ckpt = init_model(config.model, init_seed)
    cfg = replace(config.pretrain, seed=train_seed)
    ckpt, curve = pretrain(train_corpus, ckpt, cfg, MaskPolicy(), eval_records or None)
    save_checkpoint(ckpt, paths.pretrain_ckpt)
    write_text_atomic(paths.pretrain_curve, loss_curve_csv(curve))
    final_eval = next((p.eval_loss for p in reversed(curve) if p.eval_loss is not None), None)
    final_train = next((p.train_loss for p in reversed(curve) if p.train_loss is not None), None)
    entries = {
        "stage": "pretrain",
        "arm": arm.name,
        "init_seed": str(init_seed),
        "train_seed": str(train_seed),
        "eval_split_seed": str(split_seed),
        "eval_fraction": repr(config.eval_fraction),
        "total_steps": str(cfg.total_steps),
        "batch_size": str(cfg.batch_size),
        "learning_rate": repr(cfg.learning_rate),
        "warmup_steps": str(cfg.warmup_steps),
        "final_train_loss": "" if final_train is None else f"{final_train:.6f}",
        "final_eval_loss": "" if final_eval is None else f"{final_eval:.6f}",
        f"input.{os.path.basename(paths.corpus)}": file_digest(paths.corpus),
        f"output.{os.path.basename(paths.pretrain_ckpt)}": file_digest(paths.pretrain_ckpt),
    }
    write_manifest(paths.manifest("pretrain"), entries)


def stage_align(config: ExperimentConfig, arm: ArmConfig, vocab: VocabSpec) -> None:
    """MLM-tune embeddings and LM head on the shared target corpus."""
    if not arm.align:
        return
    if config.align is None:
        raise ConfigError(f"arm {arm.name!r} requests align but no [align] section exists")
    paths = arm_paths(config, arm)
    if not os.path.exists(paths.pretrain_ckpt):
        raise DataError(f"arm {arm.name!r}: pretrain checkpoint missing; run pretrain first")
    corpus_seed = derive_seed(config.seed, "align-corpus")
    target = build_corpus(config.align.corpus, vocab, corpus_seed)
    serialize_corpus(target, paths.align_corpus)
    ckpt = load_checkpoint(paths.pretrain_ckpt)
    train_seed = derive_seed(config.seed, "arm", arm.name, "align")
    split_seed = derive_seed(config.seed, "arm", arm.name, "align-evalsplit")
    train_records, eval_records = split_records(target, config.eval_fraction, split_seed)
    train_corpus = AnnotatedCorpus(train_records, target.vocab, target.provenance)
    cfg = replace(config.align.train, seed=train_seed)
    ckpt, curve = align_embeddings(ckpt, train_corpus, cfg, MaskPolicy(), eval_records or None)
    save_checkpoint(ckpt, paths.align_ckpt)
    write_text_atomic(paths.align_curve, loss_curve_csv(curve))
    entries = {
        "stage": "align",
        "arm": arm.name,
        "corpus_seed": str(corpus_seed),
        "train_seed": str(train_seed),
        "total_steps": str(cfg.total_steps),
        f"input.{os.path.basename(paths.pretrain_ckpt)}": file_digest(paths.pretrain_ckpt),
        f"output.{os.path.basename(paths.align_ckpt)}": file_digest(paths.align_ckpt),
    }
    entries.update(_corpus_spec_entries(config.align.corpus, "target."))
    write_manifest(paths.manifest("align"), entries)


def stage_surgery(config: ExperimentConfig, arm: ArmConfig, vocab: VocabSpec) -> None:
    """Substitute unused token embeddings in the latest checkpoint."""
    if not arm.surgery:
        return
    paths = arm_paths(config, arm)
    source = paths.align_ckpt if arm.align else paths.pretrain_ckpt
    if not os.path.exists(source):
        raise DataError(f"arm {arm.name!r}: checkpoint missing; run earlier stages first")
    surgery_cfg = config.surgery
    if surgery_cfg is None:
        raise ConfigError(f"arm {arm.name!r} requests surgery but no [surgery] config exists")
    if surgery_cfg.used_from == "first_n":
        used = frozenset(range(5, 5 + surgery_cfg.n))
    else:
        corpus = _load_arm_corpus(config, arm, vocab)
        used = used_content_ids(corpus)
    ckpt = load_checkpoint(source)
    spec = SurgerySpec(used_ids=used)
    substitute_unused_embeddings(ckpt, spec)
    save_checkpoint(ckpt, paths.surgery_ckpt)
    entries = {
        "stage": "surgery",
        "arm": arm.name,
        "rule": spec.rule,
        "used_from": surgery_cfg.used_from,
        "n_used": str(len(used)),
        f"input.{os.path.basename(source)}": file_digest(source),
        f"output.{os.path.basename(paths.surgery_ckpt)}": file_digest(paths.surgery_ckpt),
    }
    write_manifest(paths.manifest("surgery"), entries)


def build_task_dataset(config: ExperimentConfig, spec: TaskSpec, vocab: VocabSpec) -> TaskDataset:
    """Task data is shared across arms: seeded from the master seed only."""
    if spec.kind == "probe":
        dist = make_distribution("zipf", vocab, zipf_exponent=1.0)
        gc = GrammarConfig(
            push_probability=spec.push_probability,
            dist=dist,
            length_min=spec.length_min,
            length_max=spec.length_max,
            flush_at_end=True,
        )
        return make_probe_task(
            gc,
            spec.n_per_class,
            corruption=spec.corruption,
            seed=derive_seed(config.seed, "task", spec.name),
            name=spec.name,
            dev_fraction=spec.dev_fraction,
        )
    labels = spec.labels
    if spec.task_kind != "regression" and labels is None:
        labels = ("0", "1")
    schema = TaskSchema(name=spec.name, kind=spec.task_kind, label_space=labels)
    return load_task(spec.path, schema, vocab)


def _task_head(task: TaskDataset) -> HeadSpec:
    if task.label_space is None:
        return HeadSpec(kind="regression")
    return HeadSpec(kind="classification", n_classes=len(task.label_space))


def _metrics_for(task: TaskDataset, spec: TaskSpec) -> tuple[str, ...]:
    kinds = [spec.metric]
    if task.label_space is not None:
        if "accuracy" not in kinds:
            kinds.append("accuracy")
        if len(task.label_space) == 2 and "matthews" not in kinds:
            kinds.append("matthews")
    return tuple(kinds)


def _arm_start_checkpoint(config: ExperimentConfig, arm: ArmConfig) -> ModelCheckpoint:
    paths = arm_paths(config, arm)
    if arm.corpus.kind == "none":
        init_seed = derive_seed(config.seed, "arm", arm.name, "init")
        return init_model(config.model, init_seed)
    for candidate in (paths.surgery_ckpt if arm.surgery else None,
                      paths.align_ckpt if arm.align else None,
                      paths.pretrain_ckpt):
        if candidate and os.path.exists(candidate):
            return load_checkpoint(candidate)
    raise DataError(f"arm {arm.name!r}: no checkpoint found; run earlier stages first")


def stage_finetune(config: ExperimentConfig, arm: ArmConfig, vocab: VocabSpec,
                   datasets: dict[str, TaskDataset] | None = None) -> None:
    """Fine-tune per task and per seed; one metrics CSV per task."""
    if not config.tasks:
        return
    paths = arm_paths(config, arm)
    os.makedirs(paths.root, exist_ok=True)
    base_ckpt = _arm_start_checkpoint(config, arm)
    for spec in config.tasks:
        task = (datasets or {}).get(spec.name) or build_task_dataset(config, spec, vocab)
        head = _task_head(task)
        kinds = _metrics_for(task, spec)
        rows = ["arm,task,seed,metric,score"]
        for k in spec.seeds:
            seed = derive_seed(config.seed, "arm", arm.name, "finetune", spec.name, k)
            cfg = replace(spec.train, seed=seed)
            ckpt = base_ckpt.clone()
            _, scores = finetune(ckpt, task, head, cfg, metrics=kinds)
            for kind in kinds:
                rows.append(f"{arm.name},{spec.name},{k},{kind},{scores[kind]:.6f}")
        write_text_atomic(paths.metrics_csv(spec.name), "\n".join(rows) + "\n")
        source = "fresh-init" if arm.corpus.kind == "none" else (
            paths.surgery_ckpt if arm.surgery else paths.align_ckpt if arm.align
            else paths.pretrain_ckpt)
        entries = {
            "stage": "finetune",
            "arm": arm.name,
            "task": spec.name,
            "seeds": ",".join(str(s) for s in spec.seeds),
            "metric": spec.metric,
            "start_checkpoint": os.path.basename(source) if source != "fresh-init" else source,
            f"output.{os.path.basename(paths.metrics_csv(spec.name))}":
                file_digest(paths.metrics_csv(spec.name)),
        }
        if source != "fresh-init":
            entries[f"input.{os.path.basename(source)}"] = file_digest(source)
        write_manifest(paths.manifest("finetune", spec.name), entries)


def stage_report(config: ExperimentConfig) -> None:
    """Aggregate per-seed metrics into the final arm x task table."""
    if not config.tasks:
        return
    runs = []
    for arm in config.arms:
        paths = arm_paths(config, arm)
        for spec in config.tasks:
            csv_path = paths.metrics_csv(spec.name)
            if not os.path.exists(csv_path):
                raise DataError(
                    f"arm {arm.name!r}, task {spec.name!r}: metrics missing; run finetune first"
                )
            scores = []
            with open(csv_path, encoding="utf-8") as fh:
                header = fh.readline()
                for line in fh:
                    arm_name, task_name, seed, metric, score = line.rstrip("\n").split(",")
                    if metric == spec.metric:
                        scores.append(float(score))
            if not scores:
                raise DataError(f"no {spec.metric} scores for task {spec.name!r}")
            runs.append((arm.name, spec.name, spec.metric, float(np.mean(scores))))
    table = build_report(runs)
    report_csv = os.path.join(config.out_dir, "report.csv")
    report_txt = os.path.join(config.out_dir, "report.txt")
    write_text_atomic(report_csv, table.to_csv())
    write_text_atomic(report_txt, table.to_text())
    entries = {"stage": "report", "arms": ",".join(a.name for a in config.arms)}
    for arm in config.arms:
        paths = arm_paths(config, arm)
        for spec in config.tasks:
            name = os.path.basename(paths.metrics_csv(spec.name))
            entries[f"input.{arm.name}.{name}"] = file_digest(paths.metrics_csv(spec.name))
    entries["output.report.csv"] = file_digest(report_csv)
    entries["output.report.txt"] = file_digest(report_txt)
    write_manifest(os.path.join(config.out_dir, "report.manifest.txt"), entries)


def _run_arm(config: ExperimentConfig, arm: ArmConfig, vocab: VocabSpec,
             datasets: dict[str, TaskDataset]) -> None:
    for stage_name, fn in (
        ("corpus", stage_corpus),
        ("pretrain", stage_pretrain),
        ("align", stage_align),
        ("surgery", stage_surgery),
    ):
        try:
            fn(config, arm, vocab)
        except Exception as exc:
            raise StageError(stage_name, arm.name, exc) from exc
    try:
        stage_finetune(config, arm, vocab, datasets)
    except Exception as exc:
        raise StageError("finetune", arm.name, exc) from exc


def run_pipeline(config: ExperimentConfig, parallel_arms: int = 1) -> int:
    """Execute every stage for every arm, then the report. Returns 0.

    Stage failures raise StageError (the CLI maps it to an exit code); a
    rerun with the same config and seed reproduces byte-identical corpora
    and, in single-threaded mode, byte-identical checkpoints.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    vocab = experiment_vocab(config)
    try:
        datasets = {spec.name: build_task_dataset(config, spec, vocab)
                    for spec in config.tasks}
    except Exception as exc:
        raise StageError("finetune", None, exc) from exc
    if parallel_arms > 1 and len(config.arms) > 1:
        with ThreadPoolExecutor(max_workers=parallel_arms) as pool:
            futures = [pool.submit(_run_arm, config, arm, vocab, datasets)
                       for arm in config.arms]
            for fut in futures:
                fut.result()
    else:
        for arm in config.arms:
            _run_arm(config, arm, vocab, datasets)
    try:
        stage_report(config)
    except Exception as exc:
        raise StageError("report", None, exc) from exc
    return 0
