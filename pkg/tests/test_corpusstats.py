import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pretrain_lab.corpusgen import (
    AnnotatedCorpus,
    GrammarConfig,
    SequenceRecord,
    generate_artificial,
    generate_baseline,
)
from pretrain_lab.corpusstats import (
    distribution_distance,
    estimate_push_probability,
    fit_zipf_exponent,
    fit_zipf_from_counts,
    is_well_nested,
    length_stats,
    verify_nesting,
)
from pretrain_lab.errors import InvalidArgument, MissingLabelsError
from pretrain_lab.vocab import build_vocab, make_distribution, sample_tokens


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


A, B, C = 5, 6, 7  # first three content ids


class TestVerifyNesting:
    def test_textbook_nest_ok(self):
        assert verify_nesting(SequenceRecord([A, B, B, A], "PPOO")).ok

    def test_crossed_dependency_rejected_at_position_2(self):
        result = verify_nesting(SequenceRecord([A, B, A, B], "PPOO"))
        assert not result.ok
        assert result.position == 2
        assert "expected token 6, found 5" in result.reason

    def test_pop_on_empty_stack(self):
        result = verify_nesting(SequenceRecord([A], "O"))
        assert not result.ok and result.position == 0
        assert "empty" in result.reason

    def test_flush_requirement(self):
        rec = SequenceRecord([A, B], "PP")
        assert verify_nesting(rec).ok
        result = verify_nesting(rec, require_flushed=True)
        assert not result.ok and result.position == 2

    def test_unlabeled_rejected(self):
        with pytest.raises(MissingLabelsError):
            verify_nesting(SequenceRecord([A, B]))

    def test_generator_output_all_ok(self, artificial_corpus_small):
        results = [verify_nesting(r, require_flushed=True)
                   for r in artificial_corpus_small.records]
        assert all(r.ok for r in results)

    def test_thousand_record_corpus_all_ok(self, zipf100):
        gc = GrammarConfig(push_probability=0.4, dist=zipf100, length_min=20, length_max=40)
        corpus = generate_artificial(gc, 35_000, seed=17)
        assert len(corpus.records) >= 1000
        assert all(verify_nesting(r, require_flushed=True).ok for r in corpus.records)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_adjacent_distinct_swap_always_rejected(self, zipf100, seed):
        gc = GrammarConfig(push_probability=0.4, dist=zipf100, length_min=10, length_max=30)
        corpus = generate_artificial(gc, 10, seed=seed)
        rec = corpus.records[0]
        r = rng(seed)
        eligible = [i for i in range(len(rec.tokens) - 1)
                    if rec.tokens[i] != rec.tokens[i + 1]]
        if not eligible:
            return
        i = int(eligible[r.integers(len(eligible))])
        mutated = list(rec.tokens)
        mutated[i], mutated[i + 1] = mutated[i + 1], mutated[i]
        assert not verify_nesting(SequenceRecord(mutated, rec.labels)).ok


class TestIsWellNested:
    def test_examples(self):
        assert is_well_nested([A, B, B, A])
        assert is_well_nested([])
        assert is_well_nested([A, A])
        assert not is_well_nested([A, B, A, B])
        assert not is_well_nested([A])
        assert not is_well_nested([A, B, A])

    def test_matches_generator(self, artificial_corpus_small):
        assert all(is_well_nested(r.tokens) for r in artificial_corpus_small.records)


class TestEstimatePushProbability:
    def test_all_push_raw_fraction(self):
        corpus = AnnotatedCorpus([SequenceRecord([A, B, C], "PPP")], build_vocab(100),
                                 {"generator": "artificial", "seed": "0"})
        est = estimate_push_probability(corpus)
        assert est.raw_push_fraction == 1.0

    def test_tiny_direct_count(self):
        corpus = AnnotatedCorpus([SequenceRecord([A, B, B, A], "PPOO")], build_vocab(100),
                                 {"generator": "artificial", "seed": "0"})
        est = estimate_push_probability(corpus)
        assert est.raw_push_fraction == 0.5
        assert est.p_hat == 0.5

    def test_million_step_recovery(self, zipf100):
        gc = GrammarConfig(push_probability=0.4, dist=zipf100, length_min=90, length_max=120)
        corpus = generate_artificial(gc, 1_000_000, seed=3)
        est = estimate_push_probability(corpus)
        assert abs(est.p_hat - 0.4) < 0.005
        # raw fraction is inflated by forced pushes, so it must exceed p
        assert est.raw_push_fraction > 0.4

    def test_consistency_error_shrinks(self, zipf100):
        gc = GrammarConfig(push_probability=0.4, dist=zipf100, length_min=90, length_max=120)
        errors = []
        for target in (10**3, 10**4, 10**5):
            corpus = generate_artificial(gc, target, seed=55)
            errors.append(abs(estimate_push_probability(corpus).p_hat - 0.4))
        assert errors[2] <= errors[0]
        assert errors[2] < 0.02

    def test_unlabeled_rejected(self, vocab100):
        corpus = AnnotatedCorpus([SequenceRecord([A, B])], vocab100, {})
        with pytest.raises(MissingLabelsError):
            estimate_push_probability(corpus)


class TestFitZipf:
    def test_exact_inverse_rank_counts(self):
        ranks = np.arange(1, 101, dtype=np.float64)
        s = fit_zipf_from_counts(1000.0 / ranks)
        assert abs(s - 1.0) < 0.01

    def test_uniform_corpus_flat(self, uniform100, vocab100):
        draws = sample_tokens(uniform100, 10**6, rng(5))
        records = [SequenceRecord(draws[i:i + 100].tolist()) for i in range(0, 10**6, 100)]
        corpus = AnnotatedCorpus(records, vocab100, {})
        assert abs(fit_zipf_exponent(corpus)) < 0.05

    def test_two_tokens_8_4(self):
        assert np.isclose(fit_zipf_from_counts([8, 4]), 1.0, atol=1e-12)

    def test_scale_invariance_exact(self):
        counts = np.array([640.0, 320.0, 160.0, 80.0, 40.0, 20.0, 10.0, 5.0])
        base = fit_zipf_from_counts(counts)
        for c in (2, 3, 7, 1000):
            assert fit_zipf_from_counts(counts * c) == base

    def test_degenerate_rejected(self):
        with pytest.raises(InvalidArgument):
            fit_zipf_from_counts([42])

    def test_generated_zipf_corpus(self, zipf100, vocab100):
        corpus = generate_baseline(zipf100, 90, 120, 200_000, seed=8)
        assert abs(fit_zipf_exponent(corpus) - 1.0) < 0.05


class TestDistributionDistance:
    def test_sampled_corpus_close(self, zipf100):
        corpus = generate_baseline(zipf100, 90, 120, 100_000, seed=2)
        assert distribution_distance(corpus, zipf100) < 0.02

    def test_single_token_vs_uniform2(self):
        v = build_vocab(2)
        d = make_distribution("uniform", v)
        corpus = AnnotatedCorpus([SequenceRecord([5, 5])], v, {})
        assert distribution_distance(corpus, d) == 0.5

    def test_empty_corpus_rejected(self, vocab100, uniform100):
        corpus = AnnotatedCorpus([], vocab100, {})
        with pytest.raises(InvalidArgument):
            distribution_distance(corpus, uniform100)

    def test_vocab_mismatch_rejected(self, uniform100):
        other = build_vocab(7)
        corpus = AnnotatedCorpus([SequenceRecord([5])], other, {})
        with pytest.raises(InvalidArgument):
            distribution_distance(corpus, uniform100)


class TestLengthStats:
    def test_single_record(self, vocab100):
        corpus = AnnotatedCorpus([SequenceRecord([A] * 7)], vocab100, {})
        report = length_stats(corpus)
        assert (report.length_min, report.length_max, report.length_mean) == (7, 7, 7.0)
        assert report.token_count == 7
        assert report.record_count == 1

    def test_counts_consistent(self, artificial_corpus_small):
        report = length_stats(artificial_corpus_small)
        assert report.token_count == sum(len(r) for r in artificial_corpus_small.records)
        assert report.token_count == int(report.unigram_counts.sum())

    def test_baseline_defaults_in_range(self, zipf100):
        corpus = generate_baseline(zipf100, 90, 120, 20_000, seed=1)
        report = length_stats(corpus)
        assert report.length_min >= 90 and report.length_max <= 120

    def test_flushed_max_between_target_and_flush_bound(self, zipf100):
        gc = GrammarConfig(push_probability=0.45, dist=zipf100, length_min=90, length_max=120)
        corpus = generate_artificial(gc, 50_000, seed=6)
        report = length_stats(corpus)
        max_flush = int(corpus.provenance["max_flush_depth"])
        assert report.length_max <= 120 + max_flush
        assert report.length_min >= 90

    def test_text_and_csv_agree(self, artificial_corpus_small):
        report = length_stats(artificial_corpus_small)
        text = report.to_text()
        row = report.to_csv_row()
        assert f"token_count={report.token_count}" in text
        assert row.startswith(f"{report.token_count},{report.record_count},")
        assert len(row.split(",")) == len(report.CSV_HEADER.split(","))
