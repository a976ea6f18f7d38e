import os

import pytest
import torch

from pretrain_lab.config import parse_config
from pretrain_lab.errors import StageError
from pretrain_lab.pipeline import (
    arm_paths,
    experiment_vocab,
    file_digest,
    read_manifest,
    regenerate_corpus_from_manifest,
    run_pipeline,
    stage_corpus,
    stage_pretrain,
)

TINY = """
[experiment]
name = tiny
seed = 77
out = {out}

[vocab]
content_size = 59

[model]
n_layers = 1
hidden_dim = 16
n_heads = 2
ff_dim = 32
max_positions = 32

[arm.artzipf]
kind = artificial
length_min = 8
length_max = 16
target_tokens = 1200

[arm.scratch]
kind = none

[pretrain]
total_steps = 8
batch_size = 4
learning_rate = 1e-3
warmup_steps = 2
max_seq_len = 32
log_every = 4
eval_fraction = 0.1

[task.probe]
kind = probe
n_per_class = 8
length_min = 6
length_max = 12
total_steps = 6
batch_size = 4
warmup_steps = 0
max_seq_len = 32
seeds = 1,2
"""


def tiny_config(tmp_path, name="exp.ini", extra=""):
    out = tmp_path / "out"
    p = tmp_path / name
    p.write_text(TINY.format(out=out) + extra)
    return parse_config(p)


@pytest.fixture(scope="module")
def ran_pipeline(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipe")
    config = tiny_config(tmp_path)
    torch.set_num_threads(1)
    status = run_pipeline(config)
    torch.set_num_threads(2)
    return config, status


class TestRunPipeline:
    def test_exit_status_zero(self, ran_pipeline):
        _, status = ran_pipeline
        assert status == 0

    def test_report_has_two_arm_rows(self, ran_pipeline):
        config, _ = ran_pipeline
        report = open(os.path.join(config.out_dir, "report.csv")).read().splitlines()
        assert report[0] == "arm,probe,Avg"
        assert len(report) == 3
        assert report[1].startswith("artzipf,")
        assert report[2].startswith("scratch,")

    def test_expected_artifacts_exist(self, ran_pipeline):
        config, _ = ran_pipeline
        arm = config.arms[0]
        paths = arm_paths(config, arm)
        for p in (paths.corpus, paths.stats_txt, paths.stats_csv, paths.pretrain_ckpt,
                  paths.pretrain_curve, paths.manifest("corpus"),
                  paths.manifest("pretrain"), paths.metrics_csv("probe"),
                  paths.manifest("finetune", "probe")):
            assert os.path.exists(p), p
        assert os.path.exists(os.path.join(config.out_dir, "report.txt"))
        assert os.path.exists(os.path.join(config.out_dir, "report.manifest.txt"))

    def test_scratch_arm_has_no_checkpoint(self, ran_pipeline):
        config, _ = ran_pipeline
        paths = arm_paths(config, config.arms[1])
        assert not os.path.exists(paths.pretrain_ckpt)
        assert os.path.exists(paths.metrics_csv("probe"))

    def test_no_partial_files_left(self, ran_pipeline):
        config, _ = ran_pipeline
        leftovers = []
        for root, _, files in os.walk(config.out_dir):
            leftovers += [f for f in files if f.endswith(".partial")]
        assert leftovers == []

    def test_metrics_csv_per_seed_rows(self, ran_pipeline):
        config, _ = ran_pipeline
        paths = arm_paths(config, config.arms[0])
        lines = open(paths.metrics_csv("probe")).read().splitlines()
        assert lines[0] == "arm,task,seed,metric,score"
        seeds = {line.split(",")[2] for line in lines[1:]}
        assert seeds == {"1", "2"}

    def test_loss_curve_csv_shape(self, ran_pipeline):
        config, _ = ran_pipeline
        paths = arm_paths(config, config.arms[0])
        lines = open(paths.pretrain_curve).read().splitlines()
        assert lines[0] == "step,lr,train_loss,eval_loss"
        assert lines[1].startswith("0,")  # eval of the initial checkpoint
        assert any(line.startswith("8,") for line in lines[1:])


class TestReproducibility:
    def test_rerun_identical_corpus_and_checkpoints(self, tmp_path):
        torch.set_num_threads(1)  # single-threaded mode: bitwise checkpoints
        try:
            os.makedirs(tmp_path / "a", exist_ok=True)
            os.makedirs(tmp_path / "b", exist_ok=True)
            c1 = tiny_config(tmp_path / "a", name="a.ini")
            c2 = tiny_config(tmp_path / "b", name="b.ini")
            run_pipeline(c1)
            run_pipeline(c2)
            p1 = arm_paths(c1, c1.arms[0])
            p2 = arm_paths(c2, c2.arms[0])
            assert file_digest(p1.corpus) == file_digest(p2.corpus)
            assert file_digest(p1.pretrain_ckpt) == file_digest(p2.pretrain_ckpt)
            r1 = open(os.path.join(c1.out_dir, "report.csv")).read()
            r2 = open(os.path.join(c2.out_dir, "report.csv")).read()
            assert r1 == r2
        finally:
            torch.set_num_threads(2)

    def test_different_seed_changes_corpus(self, tmp_path):
        os.makedirs(tmp_path / "a", exist_ok=True)
        os.makedirs(tmp_path / "b", exist_ok=True)
        c1 = tiny_config(tmp_path / "a", name="a.ini")
        c2 = tiny_config(tmp_path / "b", name="b.ini")
        c2.seed = 78
        vocab = experiment_vocab(c1)
        stage_corpus(c1, c1.arms[0], vocab)
        stage_corpus(c2, c2.arms[0], vocab)
        assert (file_digest(arm_paths(c1, c1.arms[0]).corpus)
                != file_digest(arm_paths(c2, c2.arms[0]).corpus))


class TestManifests:
    def test_corpus_regenerable_from_manifest_alone(self, tmp_path):
        config = tiny_config(tmp_path)
        vocab = experiment_vocab(config)
        arm = config.arms[0]
        stage_corpus(config, arm, vocab)
        paths = arm_paths(config, arm)
        manifest = read_manifest(paths.manifest("corpus"))
        recorded = manifest["output.corpus.txt"]
        assert file_digest(paths.corpus) == recorded
        os.remove(paths.corpus)  # delete everything except config + manifest
        regen = tmp_path / "regen.txt"
        digest = regenerate_corpus_from_manifest(paths.manifest("corpus"), regen)
        assert digest == recorded

    def test_empirical_arm_with_named_tokens_regenerates(self, tmp_path):
        freq = tmp_path / "counts.txt"
        freq.write_text("alpha\t30\nbeta\t20\ngamma\t10\n")
        cfg_text = """
[experiment]
name = emp
seed = 4
out = {out}

[vocab]
content_size = 3
tokens_file = counts.txt

[corpus]
kind = empirical
freq_table = counts.txt
length_min = 4
length_max = 8
target_tokens = 200
"""
        p = tmp_path / "exp.ini"
        p.write_text(cfg_text.format(out=tmp_path / "out"))
        config = parse_config(p)
        vocab = experiment_vocab(config)
        assert vocab.token_to_id("alpha") == 5
        arm = config.arms[0]
        stage_corpus(config, arm, vocab)
        paths = arm_paths(config, arm)
        manifest = read_manifest(paths.manifest("corpus"))
        recorded = manifest["output.corpus.txt"]
        regen = tmp_path / "regen.txt"
        assert regenerate_corpus_from_manifest(paths.manifest("corpus"), regen) == recorded

    def test_pretrain_manifest_records_input_digest(self, tmp_path):
        config = tiny_config(tmp_path)
        vocab = experiment_vocab(config)
        arm = config.arms[0]
        stage_corpus(config, arm, vocab)
        stage_pretrain(config, arm, vocab)
        paths = arm_paths(config, arm)
        manifest = read_manifest(paths.manifest("pretrain"))
        assert manifest["input.corpus.txt"] == file_digest(paths.corpus)
        assert manifest["output.pretrain.ckpt"] == file_digest(paths.pretrain_ckpt)
        assert manifest["package_version"]


class TestStageIsolation:
    def test_finetune_failure_preserves_pretrain_checkpoint(self, tmp_path):
        from pretrain_lab.training import TrainConfig
        config = tiny_config(tmp_path)
        # poison the fine-tune recipe so the stage fails after pre-training
        bad = TrainConfig(batch_size=4, learning_rate=1e-3, total_steps=1, warmup_steps=5)
        object.__setattr__(config.tasks[0], "train", bad)
        with pytest.raises(StageError) as err:
            run_pipeline(config)
        assert err.value.stage == "finetune"
        paths = arm_paths(config, config.arms[0])
        assert os.path.exists(paths.pretrain_ckpt)
        manifest = read_manifest(paths.manifest("pretrain"))
        assert file_digest(paths.pretrain_ckpt) == manifest["output.pretrain.ckpt"]

    def test_stage_error_carries_stage_tag(self, tmp_path):
        config = tiny_config(tmp_path)
        config.arms = [config.arms[1]]  # scratch arm only: no corpus, no pretrain
        object.__setattr__(config.tasks[0], "length_min", 0)  # invalid grammar
        with pytest.raises(Exception) as err:
            run_pipeline(config)
        assert "length_min" in str(err.value) or "stage" in str(err.value)
