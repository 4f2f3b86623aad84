import numpy as np
import pytest

from authorlm.corpus import Document
from authorlm.evaluate import (
    EvalError,
    EvalReport,
    evaluate_split,
    gain_series,
    load_report,
    macro_perplexity,
    micro_perplexity,
    save_gain_series,
    save_report,
    state_for_eval,
)
from authorlm.model import ConditionedLM, ModelConfig, force_uniform
from authorlm.splits import make_split
from authorlm.synth import generate_corpus, make_drift_spec


def tiny_model(variant="ours", A=3, T=6, V=10, seed=0):
    cfg = ModelConfig(variant=variant, d_embed=8, d_hidden=6, d_static=3,
                      d_dynamic=4, mlp_hidden=5, dropout_input=0, dropout_output=0,
                      dropout_weight=0, lambda_consec=0, lambda_author=0, lambda_dyn=0)
    return ConditionedLM(cfg, V, A, T, seed=seed, dtype=np.float64)


class TestStateForEval:
    def test_lstm_none(self):
        assert state_for_eval(tiny_model("lstm"), 0, 3) is None

    def test_static_variant(self):
        model = tiny_model("lstm-a")
        assert np.array_equal(state_for_eval(model, 1, 4), model.h_static.value[1])

    def test_table_present_passthrough(self):
        model = tiny_model("lstm-at")
        presence = np.zeros((3, 6), dtype=bool)
        presence[0, [1, 4]] = True
        presence[1:, 0] = True
        model.set_presence(presence)
        expected = model.h_free.value[0 * 6 + 1]  # (author 0, t=2)
        assert np.array_equal(state_for_eval(model, 0, 2), expected)

    def test_table_fallback_most_recent(self):
        model = tiny_model("lstm-at")
        presence = np.zeros((3, 6), dtype=bool)
        presence[0, [1, 4]] = True  # t = 2, 5
        presence[1:, 0] = True
        model.set_presence(presence)
        expected = model.h_free.value[0 * 6 + 4]
        assert np.array_equal(state_for_eval(model, 0, 6), expected)  # t=6 -> 5

    def test_table_fallback_earliest(self):
        model = tiny_model("lstm-iat")
        presence = np.zeros((3, 6), dtype=bool)
        presence[0, [2, 4]] = True  # t = 3, 5
        presence[1:, 0] = True
        model.set_presence(presence)
        expected = model.h_free.value[0 * 6 + 2]
        assert np.array_equal(state_for_eval(model, 0, 1), expected)

    def test_dynamics_equals_rollout(self):
        model = tiny_model("ours", seed=2)
        rng = np.random.default_rng(0)
        model.params["dyn.W1"].value[...] = rng.normal(size=(5, 4)) * 0.3
        model.invalidate_rollout_cache()
        for t in (1, 3, 6):
            assert np.allclose(state_for_eval(model, 2, t),
                               model.rollout_trajectory(2, t)[t - 1])

    def test_unknown_author(self):
        with pytest.raises(EvalError, match="author"):
            state_for_eval(tiny_model(), 17, 1)


class TestPerplexities:
    def test_perfect_model_micro_one(self):
        assert micro_perplexity([(0.0, 5), (0.0, 3)]) == 1.0

    def test_uniform_six(self):
        pairs = [(np.log(6) * 4, 4), (np.log(6) * 2, 2)]
        assert np.isclose(micro_perplexity(pairs), 6.0)

    def test_two_token_arithmetic(self):
        pairs = [(np.log(2), 1), (np.log(8), 1)]
        assert np.isclose(micro_perplexity(pairs), 4.0)

    def test_zero_tokens_rejected(self):
        with pytest.raises(EvalError, match="tokens"):
            micro_perplexity([])

    def test_macro_mean_of_timesteps(self):
        per_t = [(1, np.log(2) * 10, 10, 2.0), (2, np.log(8) * 10, 10, 8.0)]
        assert macro_perplexity(per_t) == 5.0

    def test_single_timestep_macro_equals_micro(self):
        per_t = [(3, np.log(4) * 7, 7, 4.0)]
        assert macro_perplexity(per_t) == 4.0

    def test_micro_macro_hand_report(self):
        # two timesteps, equal counts, ppl {2, 8}: macro 5, micro 4
        per_t = [(1, np.log(2) * 10, 10, 2.0), (2, np.log(8) * 10, 10, 8.0)]
        macro = macro_perplexity(per_t)
        micro = micro_perplexity([(n, c) for _, n, c, _ in per_t])
        assert macro == 5.0
        assert np.isclose(micro, 4.0, atol=1e-12)


def drift_corpus_and_split(seed=0):
    spec = make_drift_spec(num_authors=4, num_timesteps=5, vocab_size=20,
                           docs_per_cell=5, doc_length=6, num_topics=2, seed=seed)
    corpus = generate_corpus(spec)
    return corpus, make_split(corpus, "modeling", seed)


class TestEvaluateSplit:
    def test_uniform_micro_is_vocab_size(self):
        corpus, split = drift_corpus_and_split()
        model = force_uniform(tiny_model("lstm", A=4, T=5, V=len(corpus.vocab)))
        report = evaluate_split(model, corpus, split, subset="test")
        assert np.isclose(report.micro_ppl, len(corpus.vocab), rtol=1e-6)
        assert np.isclose(report.macro_ppl, report.micro_ppl, rtol=1e-9)

    def test_grouping_invariance(self):
        # doc-level and batch-level aggregation agree
        corpus, split = drift_corpus_and_split(1)
        model = tiny_model("ours", A=4, T=5, V=len(corpus.vocab), seed=1)
        model.set_presence(np.ones((4, 5), dtype=bool))
        r1 = evaluate_split(model, corpus, split, subset="test", batch_size=3)
        r2 = evaluate_split(model, corpus, split, subset="test", batch_size=512)
        assert np.isclose(r1.micro_ppl, r2.micro_ppl, rtol=1e-9)
        assert np.isclose(r1.macro_ppl, r2.macro_ppl, rtol=1e-9)

    def test_identical_distributions_macro_equals_micro(self):
        corpus, split = drift_corpus_and_split()
        model = force_uniform(tiny_model("lstm", A=4, T=5, V=len(corpus.vocab)))
        report = evaluate_split(model, corpus, split, subset="val")
        assert abs(report.macro_ppl - report.micro_ppl) < 1e-9

    def test_empty_subset_rejected(self):
        corpus, split = drift_corpus_and_split()
        split.doc_split = ["train"] * len(corpus.documents)
        model = tiny_model("lstm", A=4, T=5, V=len(corpus.vocab))
        with pytest.raises(EvalError, match="test"):
            evaluate_split(model, corpus, split, subset="test")


class TestGain:
    def make_report(self, ppls, **meta):
        per_t = [(t, np.log(p) * 10, 10, p) for t, p in ppls]
        args = dict(variant="x", task="modeling", seed=0, subset="test")
        args.update(meta)
        return EvalReport(micro_ppl=1.0, macro_ppl=1.0, per_timestep=per_t, **args)

    def test_self_gain_zero(self):
        r = self.make_report([(1, 3.0), (2, 5.0)])
        assert gain_series(r, r) == [(1, 0.0), (2, 0.0)]

    def test_simple_subtraction(self):
        model = self.make_report([(1, 7.0)])
        baseline = self.make_report([(1, 10.0)])
        assert gain_series(model, baseline) == [(1, 3.0)]

    def test_mismatched_splits_rejected(self):
        r1 = self.make_report([(1, 3.0)], seed=0)
        r2 = self.make_report([(1, 3.0)], seed=1)
        with pytest.raises(EvalError, match="mismatch"):
            gain_series(r1, r2)

    def test_mismatched_timesteps_rejected(self):
        r1 = self.make_report([(1, 3.0)])
        r2 = self.make_report([(1, 3.0), (2, 4.0)])
        with pytest.raises(EvalError, match="timesteps"):
            gain_series(r1, r2)


class TestReportIO:
    def test_roundtrip_exact(self, tmp_path):
        corpus, split = drift_corpus_and_split()
        model = tiny_model("ours", A=4, T=5, V=len(corpus.vocab), seed=3)
        report = evaluate_split(model, corpus, split, subset="test")
        path = tmp_path / "report.tsv"
        save_report(report, path, header_lines=["extra provenance"])
        loaded = load_report(path)
        assert loaded.micro_ppl == report.micro_ppl
        assert loaded.macro_ppl == report.macro_ppl
        assert loaded.per_timestep == report.per_timestep
        assert (loaded.variant, loaded.task, loaded.seed, loaded.subset) == \
            (report.variant, report.task, report.seed, report.subset)

    def test_gain_file(self, tmp_path):
        path = tmp_path / "gain.tsv"
        save_gain_series([(1, 0.5), (2, -0.25)], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "1\t0.5"
        assert lines[1] == "2\t-0.25"

    def test_not_a_report_rejected(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("nothing here\tat all\n")
        with pytest.raises((EvalError, ValueError)):
            load_report(path)
