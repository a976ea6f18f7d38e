import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from pretrain_lab.corpusgen import (
    AnnotatedCorpus,
    GrammarConfig,
    SequenceRecord,
    generate_artificial,
    split_records,
)
from pretrain_lab.errors import InvalidArgument, NumericalAbort, SkipRecord
from pretrain_lab.model import IGNORE_INDEX, init_model
from pretrain_lab.presets import finetune_presets
from pretrain_lab.training import (
    AdamState,
    HeadSpec,
    MaskPolicy,
    SurgerySpec,
    TrainConfig,
    adam_update,
    align_embeddings,
    finetune,
    lr_at_step,
    mask_tokens,
    pretrain,
    substitute_unused_embeddings,
    used_content_ids,
)
from pretrain_lab.vocab import BOS_ID, EOS_ID, MASK_ID
from pretrain_lab.evaluation import TaskDataset, TaskExample


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def quick_cfg(**kw):
    base = dict(batch_size=4, learning_rate=1e-3, total_steps=5, warmup_steps=1,
                max_seq_len=64, seed=0, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


class TestMaskTokens:
    def test_length_one_gets_one_mask(self, vocab100):
        ex = mask_tokens(SequenceRecord([7]), MaskPolicy(), vocab100, rng(0))
        assert ex.loss_mask.sum() == 1
        assert ex.input_ids[0] == BOS_ID and ex.input_ids[-1] == EOS_ID
        assert ex.target_ids[1] == 7

    def test_exact_count_and_bounds(self, vocab100):
        tokens = list(rng(1).integers(5, 105, size=40))
        ex = mask_tokens(SequenceRecord(tokens), MaskPolicy(), vocab100, rng(2))
        assert ex.loss_mask.sum() == round(0.15 * 40)
        assert len(ex.input_ids) == 42
        # unselected positions keep their tokens and sentinel targets
        for i in range(40):
            if not ex.loss_mask[i + 1]:
                assert ex.input_ids[i + 1] == tokens[i]
                assert ex.target_ids[i + 1] == IGNORE_INDEX

    def test_statistics_match_policy(self, vocab100):
        policy = MaskPolicy()
        total = masked = to_mask_tok = to_random = kept = 0
        shared = rng(3)
        for i in range(2500):
            tokens = list(rng(1000 + i).integers(5, 105, size=40))
            ex = mask_tokens(SequenceRecord(tokens), policy, vocab100, shared)
            total += 40
            sel = np.nonzero(ex.loss_mask)[0]
            masked += len(sel)
            for pos in sel:
                orig = ex.target_ids[pos]
                got = ex.input_ids[pos]
                if got == MASK_ID:
                    to_mask_tok += 1
                elif got == orig:
                    kept += 1
                else:
                    to_random += 1
        assert abs(masked / total - 0.15) < 0.002
        assert abs(to_mask_tok / masked - 0.8) < 0.01
        assert abs(to_random / masked - 0.1) < 0.01
        assert abs(kept / masked - 0.1) < 0.01

    def test_determinism(self, vocab100):
        tokens = list(rng(5).integers(5, 105, size=30))
        a = mask_tokens(SequenceRecord(tokens), MaskPolicy(), vocab100, rng(9))
        b = mask_tokens(SequenceRecord(tokens), MaskPolicy(), vocab100, rng(9))
        assert np.array_equal(a.input_ids, b.input_ids)
        assert np.array_equal(a.target_ids, b.target_ids)

    def test_empty_record_skips(self, vocab100):
        with pytest.raises(SkipRecord):
            mask_tokens(SequenceRecord([]), MaskPolicy(), vocab100, rng(0))

    def test_special_tokens_rejected(self, vocab100):
        with pytest.raises(InvalidArgument):
            mask_tokens(SequenceRecord([BOS_ID, 7]), MaskPolicy(), vocab100, rng(0))

    def test_bad_policy_rejected(self):
        with pytest.raises(InvalidArgument):
            MaskPolicy(p_mask=0.9, p_random=0.2, p_keep=0.1).validate()
        with pytest.raises(InvalidArgument):
            MaskPolicy(mask_fraction=0.0).validate()


class TestSchedule:
    def test_peak_at_warmup_end(self):
        cfg = quick_cfg(learning_rate=5e-5, total_steps=100, warmup_steps=10)
        assert lr_at_step(10, cfg) == 5e-5
        assert lr_at_step(5, cfg) == pytest.approx(2.5e-5)

    def test_decays_to_zero(self):
        cfg = quick_cfg(learning_rate=1e-3, total_steps=100, warmup_steps=10)
        assert lr_at_step(100, cfg) == 0.0
        assert lr_at_step(55, cfg) == pytest.approx(1e-3 * 45 / 90)

    def test_invalid_configs_rejected(self):
        with pytest.raises(InvalidArgument):
            quick_cfg(warmup_steps=10, total_steps=5).validate()
        with pytest.raises(InvalidArgument):
            quick_cfg(learning_rate=0.0).validate()


class TestAdam:
    def test_zero_gradient_with_decay_zero_is_identity(self):
        p = {"w": torch.tensor([1.0, -2.0])}
        g = {"w": torch.zeros(2)}
        cfg = quick_cfg(weight_decay=0.0, total_steps=10, warmup_steps=0)
        state = AdamState.initial(p)
        before = p["w"].clone()
        adam_update(p, g, state, 1, cfg)
        assert torch.equal(p["w"], before)

    def test_zero_gradient_with_decay_shrinks_weights_only(self):
        p = {"w": torch.tensor([[1.0]]), "b.bias": torch.tensor([1.0])}
        g = {"w": torch.zeros(1, 1), "b.bias": torch.zeros(1)}
        cfg = quick_cfg(weight_decay=0.01, learning_rate=0.1, total_steps=10, warmup_steps=0)
        state = AdamState.initial(p)
        adam_update(p, g, state, 5, cfg)
        assert p["w"][0, 0] < 1.0            # decayed
        assert p["b.bias"][0] == 1.0         # biases excluded from decay

    def test_two_hand_steps_match_recurrence(self):
        # pencil-and-paper Adam on one float64 scalar, decay 0
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        cfg = TrainConfig(batch_size=1, learning_rate=lr, total_steps=10,
                          warmup_steps=0, weight_decay=0.0)
        p = {"w": torch.tensor([0.5], dtype=torch.float64)}
        state = AdamState.initial(p)
        grads = [0.3, -0.2]
        x, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            adam_update(p, {"w": torch.tensor([g], dtype=torch.float64)}, state, t, cfg)
            lr_t = lr * (cfg.total_steps - t) / cfg.total_steps
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            x = x - lr_t * mhat / (math.sqrt(vhat) + eps)
            assert abs(float(p["w"][0]) - x) < 1e-12

    def test_shape_mismatch_rejected(self):
        p = {"w": torch.zeros(2)}
        g = {"w": torch.zeros(3)}
        with pytest.raises(InvalidArgument):
            adam_update(p, g, AdamState.initial(p), 1, quick_cfg())

    def test_frozen_filter_keeps_bits(self):
        p = {"tok_emb.weight": torch.randn(4, 2), "layers.0.q.weight": torch.randn(2, 2)}
        g = {k: torch.ones_like(v) for k, v in p.items()}
        frozen_before = p["layers.0.q.weight"].clone()
        emb_before = p["tok_emb.weight"].clone()
        cfg = quick_cfg(trainable="embeddings+lm_head")
        adam_update(p, g, AdamState.initial(p), 1, cfg)
        assert torch.equal(p["layers.0.q.weight"], frozen_before)
        assert not torch.equal(p["tok_emb.weight"], emb_before)


@pytest.fixture(scope="module")
def small_setup(zipf100):
    gc = GrammarConfig(push_probability=0.4, dist=zipf100, length_min=10, length_max=20)
    return generate_artificial(gc, 3_000, seed=41)


@pytest.fixture()
def desk32():
    from pretrain_lab.model import ModelConfig
    return ModelConfig(n_layers=2, hidden_dim=32, n_heads=4, ff_dim=64,
                       vocab_total=105, max_positions=32)


class TestPretrain:
    def test_zero_steps_identity(self, small_setup, desk32):
        ckpt = init_model(desk32, seed=1)
        before = {k: v.clone() for k, v in ckpt.model.state_dict().items()}
        ckpt, curve = pretrain(small_setup, ckpt,
                               quick_cfg(total_steps=0, warmup_steps=0, max_seq_len=32))
        for k, v in ckpt.model.state_dict().items():
            assert torch.equal(v, before[k])
        assert curve == []

    def test_loss_decreases_on_structured_corpus(self, small_setup, desk32):
        ckpt = init_model(desk32, seed=1)
        train, evrec = split_records(small_setup, 0.2, seed=3)
        tc = AnnotatedCorpus(train, small_setup.vocab, small_setup.provenance)
        cfg = quick_cfg(total_steps=60, warmup_steps=5, learning_rate=3e-4,
                        batch_size=8, max_seq_len=32, log_every=20)
        ckpt, curve = pretrain(tc, ckpt, cfg, eval_records=evrec)
        evals = [p.eval_loss for p in curve if p.eval_loss is not None]
        assert len(evals) >= 2
        assert evals[-1] < evals[0]

    def test_determinism_bitwise(self, small_setup, desk32):
        curves = []
        finals = []
        for _ in range(2):
            ckpt = init_model(desk32, seed=2)
            cfg = quick_cfg(total_steps=12, warmup_steps=2, batch_size=4, max_seq_len=32)
            ckpt, curve = pretrain(small_setup, ckpt, cfg)
            curves.append([(p.step, p.train_loss) for p in curve])
            finals.append({k: v.clone() for k, v in ckpt.model.state_dict().items()})
        assert curves[0] == curves[1]
        for k in finals[0]:
            assert torch.equal(finals[0][k], finals[1][k])

    def test_nonfinite_aborts(self, small_setup, desk32):
        ckpt = init_model(desk32, seed=1)
        with torch.no_grad():
            ckpt.model.tok_emb.weight[5, 0] = float("inf")
        with pytest.raises(NumericalAbort):
            pretrain(small_setup, ckpt, quick_cfg(total_steps=3, max_seq_len=32))

    def test_vocab_larger_than_model_rejected(self, small_setup, desk32):
        cfg = replace(desk32, vocab_total=50)
        ckpt = init_model(cfg, seed=0)
        with pytest.raises(InvalidArgument):
            pretrain(small_setup, ckpt, quick_cfg(max_seq_len=32))

    def test_thousand_steps_stay_finite(self, small_setup, desk32):
        # log_every=1 turns on the per-step full parameter finiteness check
        ckpt = init_model(desk32, seed=9)
        cfg = quick_cfg(total_steps=1000, warmup_steps=50, learning_rate=1e-3,
                        batch_size=4, max_seq_len=32, log_every=1)
        ckpt, curve = pretrain(small_setup, ckpt, cfg)
        assert len(curve) == 1000
        assert ckpt.all_finite()


class TestAlign:
    def test_transformer_layers_bit_identical(self, small_setup, desk32):
        ckpt = init_model(desk32, seed=4)
        before = {k: v.clone() for k, v in ckpt.model.state_dict().items()}
        cfg = quick_cfg(total_steps=15, warmup_steps=2, batch_size=4, max_seq_len=32,
                        trainable="embeddings+lm_head")
        ckpt, _ = align_embeddings(ckpt, small_setup, cfg)
        for name, tensor in ckpt.model.state_dict().items():
            if name in ("tok_emb.weight", "head_bias"):
                assert not torch.equal(tensor, before[name]), name
            else:
                assert torch.equal(tensor, before[name]), name

    def test_zero_steps_full_identity(self, small_setup, desk32):
        ckpt = init_model(desk32, seed=4)
        before = {k: v.clone() for k, v in ckpt.model.state_dict().items()}
        ckpt, _ = align_embeddings(
            ckpt, small_setup, quick_cfg(total_steps=0, warmup_steps=0, max_seq_len=32))
        for k, v in ckpt.model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_target_loss_decreases(self, zipf100, desk32):
        # a second synthetic "target language": different grammar parameters
        gc = GrammarConfig(push_probability=0.6, dist=zipf100, length_min=10, length_max=20)
        target = generate_artificial(gc, 2_000, seed=77)
        train, evrec = split_records(target, 0.25, seed=1)
        tc = AnnotatedCorpus(train, target.vocab, target.provenance)
        ckpt = init_model(desk32, seed=4)
        cfg = quick_cfg(total_steps=80, warmup_steps=5, learning_rate=1e-3,
                        batch_size=8, max_seq_len=32, log_every=20,
                        trainable="embeddings+lm_head")
        ckpt, curve = align_embeddings(ckpt, tc, cfg, eval_records=evrec)
        evals = [p.eval_loss for p in curve if p.eval_loss is not None]
        assert evals[-1] < evals[0]


class TestSurgery:
    def test_tiny_cyclic_mapping(self):
        from pretrain_lab.model import ModelConfig
        cfg = ModelConfig(n_layers=1, hidden_dim=8, n_heads=2, ff_dim=8,
                          vocab_total=13, max_positions=8)  # 8 content ids: 5..12
        ckpt = init_model(cfg, seed=0)
        emb = ckpt.model.tok_emb.weight.detach().clone()
        substitute_unused_embeddings(ckpt, SurgerySpec(used_ids=frozenset({5, 6})))
        new = ckpt.model.tok_emb.weight
        for row in (7, 9, 11):
            assert torch.equal(new[row], emb[5])
        for row in (8, 10, 12):
            assert torch.equal(new[row], emb[6])
        for row in (0, 1, 2, 3, 4, 5, 6):
            assert torch.equal(new[row], emb[row])

    def test_all_used_identity(self, desk32):
        ckpt = init_model(desk32, seed=1)
        before = ckpt.model.tok_emb.weight.detach().clone()
        substitute_unused_embeddings(
            ckpt, SurgerySpec(used_ids=frozenset(range(5, desk32.vocab_total))))
        assert torch.equal(ckpt.model.tok_emb.weight, before)

    def test_idempotent_and_local(self, desk32):
        ckpt = init_model(desk32, seed=2)
        others_before = {k: v.clone() for k, v in ckpt.model.state_dict().items()
                         if k != "tok_emb.weight"}
        spec = SurgerySpec(used_ids=frozenset(range(5, 25)))
        substitute_unused_embeddings(ckpt, spec)
        once = ckpt.model.tok_emb.weight.detach().clone()
        substitute_unused_embeddings(ckpt, spec)
        assert torch.equal(ckpt.model.tok_emb.weight, once)
        for k, v in ckpt.model.state_dict().items():
            if k != "tok_emb.weight":
                assert torch.equal(v, others_before[k])

    def test_distinct_rows_bounded_by_used_count(self, desk32):
        ckpt = init_model(desk32, seed=3)
        substitute_unused_embeddings(ckpt, SurgerySpec(used_ids=frozenset(range(5, 15))))
        content = ckpt.model.tok_emb.weight[5:].detach().numpy()
        assert len({row.tobytes() for row in content}) <= 10

    def test_empty_used_rejected(self, desk32):
        ckpt = init_model(desk32, seed=0)
        with pytest.raises(InvalidArgument):
            substitute_unused_embeddings(ckpt, SurgerySpec(used_ids=frozenset()))

    def test_used_ids_from_corpus(self, zipf100):
        corpus = AnnotatedCorpus([SequenceRecord([5, 9, 9, 5])], zipf100.vocab, {})
        assert used_content_ids(corpus) == frozenset({5, 9})


def toy_task(vocab_total=105, n=40):
    """Linearly separable by bag of embeddings: class = which marker token
    appears; verified separable by an independent bag-of-token count probe."""
    examples = []
    r = rng(12)
    for i in range(n):
        label = i % 2
        marker = 10 if label else 20
        filler = list(r.integers(30, 60, size=6))
        tokens = filler[:3] + [marker] + filler[3:]
        examples.append(TaskExample(tokens, None, float(label)))
    # independent linear probe: counts of the two markers separate the classes
    for ex in examples:
        score = ex.tokens_a.count(10) - ex.tokens_a.count(20)
        assert (score > 0) == (ex.label == 1.0)
    return TaskDataset(name="toy", kind="single-sequence", train=examples,
                       dev=examples, label_space=["a", "b"])


class TestFinetune:
    def test_presets_match_shipped_table(self):
        table = finetune_presets()
        rte = table["RTE"]
        assert (rte.learning_rate, rte.batch_size, rte.total_steps,
                rte.warmup_steps, rte.max_seq_len) == (3e-5, 32, 800, 200, 128)
        assert rte.encoder_dropout == 0.0 and rte.classifier_dropout == 0.1
        assert set(table) == {"CoLA", "STS-B", "SST-2", "MNLI", "QNLI", "QQP",
                              "RTE", "MRPC", "SQuAD2.0"}

    def test_separable_task_reaches_perfect_accuracy(self, desk32):
        ckpt = init_model(desk32, seed=5)
        task = toy_task()
        cfg = quick_cfg(total_steps=150, warmup_steps=10, learning_rate=1e-3,
                        batch_size=8, max_seq_len=16)
        _, scores = finetune(ckpt, task, HeadSpec("classification", 2), cfg,
                             metrics=("accuracy",))
        assert scores["accuracy"] == 1.0

    def test_zero_steps_chance_level(self, desk32):
        ckpt = init_model(desk32, seed=6)
        task = toy_task(n=200)
        cfg = quick_cfg(total_steps=0, warmup_steps=0, max_seq_len=16)
        _, scores = finetune(ckpt, task, HeadSpec("classification", 2), cfg,
                             metrics=("accuracy",))
        assert abs(scores["accuracy"] - 0.5) <= 0.05

    def test_label_outside_space_rejected(self, desk32):
        from pretrain_lab.errors import DataError
        ckpt = init_model(desk32, seed=0)
        task = toy_task()
        task.train[0].label = 7.0
        with pytest.raises(DataError):
            finetune(ckpt, task, HeadSpec("classification", 2), quick_cfg(max_seq_len=16))

    def test_regression_head_runs(self, desk32):
        ckpt = init_model(desk32, seed=7)
        examples = [TaskExample([10 + i], None, float(i % 5)) for i in range(20)]
        task = TaskDataset(name="reg", kind="regression", train=examples,
                           dev=examples, label_space=None)
        cfg = quick_cfg(total_steps=5, warmup_steps=0, max_seq_len=8)
        _, scores = finetune(ckpt, task, HeadSpec("regression"), cfg,
                             metrics=("spearman",))
        assert -1.0 <= scores["spearman"] <= 1.0

    def test_finetune_determinism(self, desk32):
        task = toy_task()
        cfg = quick_cfg(total_steps=10, warmup_steps=0, max_seq_len=16, seed=3)
        outs = []
        for _ in range(2):
            ckpt = init_model(desk32, seed=8)
            model, scores = finetune(ckpt, task, HeadSpec("classification", 2), cfg)
            outs.append((scores["accuracy"],
                         model.head.weight.detach().clone()))
        assert outs[0][0] == outs[1][0]
        assert torch.equal(outs[0][1], outs[1][1])
