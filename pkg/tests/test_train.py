import numpy as np
import pytest

from authorlm.corpus import Document
from authorlm.model import ConditionedLM, ModelConfig, force_uniform
from authorlm.numeric import Tape
from authorlm.splits import make_split
from authorlm.synth import generate_corpus, make_drift_spec
from authorlm.train import (
    Checkpoint,
    TrainConfig,
    TrainError,
    fit,
    load_checkpoint,
    lr_at,
    minibatch_loss,
    save_checkpoint,
    save_train_log,
    split_hash,
    vocab_hash,
)
from authorlm.optim import AdamState


def small_corpus(seed=0):
    spec = make_drift_spec(num_authors=4, num_timesteps=5, vocab_size=30,
                           docs_per_cell=6, doc_length=6, num_topics=2, seed=seed)
    return generate_corpus(spec)


def small_model_config(variant="ours", **overrides):
    args = dict(variant=variant, d_embed=12, d_hidden=10, d_static=4, d_dynamic=4,
                mlp_hidden=6, dropout_input=0.0, dropout_output=0.0,
                dropout_weight=0.0, lambda_consec=0.01, lambda_author=1e-4,
                lambda_dyn=1e-4)
    args.update(overrides)
    return ModelConfig(**args)


def quick_train_config(**overrides):
    args = dict(batch_size=16, lr=0.003, const_iters=30, decay_iters=10,
                max_iters=40, eval_every=20, seed=0, precision="f64",
                weight_decay=1e-5)
    args.update(overrides)
    return TrainConfig(**args)


class TestSchedule:
    def test_constant_phase_endpoint(self):
        cfg = TrainConfig(const_iters=50000, decay_iters=20000, max_iters=70000)
        assert lr_at(50000, cfg) == 0.003

    def test_linear_midpoint(self):
        cfg = TrainConfig(const_iters=50000, decay_iters=20000, max_iters=70000)
        assert np.isclose(lr_at(60000, cfg), 0.0015)

    def test_after_decay_zero(self):
        cfg = TrainConfig(const_iters=50000, decay_iters=20000, max_iters=70000)
        assert lr_at(70000, cfg) == 0.0
        assert lr_at(90000, cfg) == 0.0

    def test_schedule_invariant_enforced(self):
        with pytest.raises(TrainError, match="max_iters"):
            TrainConfig(const_iters=10, decay_iters=10, max_iters=30)


class TestMinibatchLoss:
    def test_identical_docs_equal_single(self):
        model = ConditionedLM(small_model_config("lstm"), 30, 4, 5, seed=0,
                              dtype=np.float64)
        doc = Document(0, 1, [6, 7, 8])
        single, _ = minibatch_loss(model, [doc], train=False)
        batch, _ = minibatch_loss(model, [doc] * 5, train=False)
        assert np.isclose(float(single.value), float(batch.value), rtol=1e-12)

    def test_uniform_forced_is_log_v(self):
        model = force_uniform(ConditionedLM(small_model_config("lstm"), 30, 4, 5,
                                            seed=0, dtype=np.float64))
        docs = [Document(0, 1, [5, 6]), Document(1, 2, [7, 8, 9])]
        loss, count = minibatch_loss(model, docs, train=False)
        assert count == 3 + 4
        assert np.isclose(float(loss.value), np.log(30), rtol=1e-9)

    def test_weighted_mean_over_lengths(self):
        model = ConditionedLM(small_model_config("lstm"), 30, 4, 5, seed=3,
                              dtype=np.float64)
        d1 = Document(0, 1, [5])
        d2 = Document(0, 1, [6, 7, 8])
        t1, c1 = model.sequence_nll(d1)
        t2, c2 = model.sequence_nll(d2)
        loss, count = minibatch_loss(model, [d1, d2], train=False)
        reg = float(model.regularization_loss().value)
        assert count == c1 + c2
        assert np.isclose(float(loss.value), (t1 + t2) / (c1 + c2) + reg, rtol=1e-9)

    def test_empty_batch_rejected(self):
        model = ConditionedLM(small_model_config("lstm"), 30, 4, 5)
        with pytest.raises(TrainError, match="empty"):
            minibatch_loss(model, [])

    def test_batch_composition_invariance(self):
        # frozen model, no dropout: corpus-mean NLL independent of batching
        corpus = small_corpus()
        model = ConditionedLM(small_model_config("ours"), len(corpus.vocab),
                              4, 5, seed=1, dtype=np.float64)
        docs = corpus.documents[:40]

        def corpus_mean(batches):
            nats = count = 0.0
            for b in batches:
                loss, c = minibatch_loss(model, b, train=False)
                reg = float(model.regularization_loss().value)
                nats += (float(loss.value) - reg) * c
                count += c
            return nats / count

        one = corpus_mean([docs])
        rng = np.random.default_rng(0)
        order = rng.permutation(len(docs))
        chunks = [[docs[i] for i in order[k:k + 7]] for k in range(0, len(docs), 7)]
        assert np.isclose(one, corpus_mean(chunks), atol=1e-6)


class TestFit:
    def test_zero_iters_returns_init(self):
        corpus = small_corpus()
        split = make_split(corpus, "modeling", 0)
        tcfg = quick_train_config(max_iters=0, const_iters=0, decay_iters=0)
        ckpt, log = fit(corpus, split, small_model_config("lstm"), tcfg)
        assert ckpt.iteration == 0
        assert log == []
        fresh = ConditionedLM(small_model_config("lstm"), len(corpus.vocab),
                              4, 5, seed=0, dtype=np.float64)
        for p in fresh.params:
            assert np.array_equal(p.value, ckpt.model.params[p.name].value)

    def test_training_beats_uniform(self):
        corpus = small_corpus()
        split = make_split(corpus, "modeling", 0)
        tcfg = quick_train_config(max_iters=300, const_iters=250, decay_iters=50,
                                  eval_every=100, precision="f32")
        ckpt, log = fit(corpus, split, small_model_config("lstm"), tcfg)
        assert log[-1][2] < len(corpus.vocab)  # any learning model beats uniform

    def test_deterministic_across_runs(self):
        corpus = small_corpus()
        split = make_split(corpus, "imputation", 1)
        results = []
        for _ in range(2):
            tcfg = quick_train_config(max_iters=30, const_iters=25, decay_iters=5)
            ckpt, log = fit(corpus, split, small_model_config("ours"), tcfg)
            results.append((log[-1][1], ckpt.model.params["embed"].value.copy()))
        assert results[0][0] == results[1][0]
        assert np.array_equal(results[0][1], results[1][1])

    def test_lr_zero_keeps_parameters(self):
        corpus = small_corpus()
        split = make_split(corpus, "modeling", 0)
        tcfg = quick_train_config(lr=0.0, max_iters=10, const_iters=8, decay_iters=2,
                                  weight_decay=0.0, eval_every=5)
        ckpt, _ = fit(corpus, split, small_model_config("lstm", lambda_author=0.0), tcfg)
        fresh = ConditionedLM(small_model_config("lstm"), len(corpus.vocab), 4, 5,
                              seed=0, dtype=np.float64)
        for p in fresh.params:
            assert np.array_equal(p.value, ckpt.model.params[p.name].value)

    def test_best_val_selection(self):
        corpus = small_corpus()
        split = make_split(corpus, "modeling", 0)
        tcfg = quick_train_config(max_iters=120, const_iters=100, decay_iters=20,
                                  eval_every=30, precision="f32")
        logged = []
        ckpt, log = fit(corpus, split, small_model_config("lstm"), tcfg,
                        log_fn=lambda row: logged.append(row))
        assert logged == log
        best_logged = min(row[2] for row in log)
        assert any(row[0] == ckpt.iteration and row[2] == best_logged for row in log)

    def test_divergence_aborts_with_iteration(self):
        corpus = small_corpus()
        split = make_split(corpus, "modeling", 0)
        tcfg = quick_train_config(lr=1e6, max_iters=50, const_iters=40,
                                  decay_iters=10, clip_norm=1e9, precision="f32")
        with np.errstate(all="ignore"):
            with pytest.raises(TrainError, match="iteration"):
                fit(corpus, split, small_model_config("lstm"), tcfg)

    def test_rejects_broken_split(self):
        corpus = small_corpus()
        split = make_split(corpus, "imputation", 0)
        split.doc_split[0] = "test" if split.doc_split[0] == "train" else "train"
        with pytest.raises(TrainError, match="verification"):
            fit(corpus, split, small_model_config("lstm"), quick_train_config())


class TestCheckpoint:
    def make_checkpoint(self, variant="ours"):
        corpus = small_corpus()
        split = make_split(corpus, "modeling", 0)
        tcfg = quick_train_config(max_iters=10, const_iters=8, decay_iters=2,
                                  eval_every=5)
        ckpt, _ = fit(corpus, split, small_model_config(variant), tcfg)
        return corpus, split, ckpt

    def test_roundtrip_bit_exact(self, tmp_path):
        corpus, split, ckpt = self.make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        for p in ckpt.model.params:
            assert np.array_equal(p.value, loaded.model.params[p.name].value)
            assert np.array_equal(ckpt.adam.m[p.name], loaded.adam.m[p.name])
            assert np.array_equal(ckpt.adam.v[p.name], loaded.adam.v[p.name])
        assert loaded.iteration == ckpt.iteration
        assert np.array_equal(loaded.model.presence, ckpt.model.presence)

    def test_save_load_save_byte_identical(self, tmp_path):
        _, _, ckpt = self.make_checkpoint()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    @pytest.mark.parametrize("variant", ["lstm", "lstm-a", "lstm-iat", "lstm-at"])
    def test_roundtrip_all_variants(self, tmp_path, variant):
        _, _, ckpt = self.make_checkpoint(variant)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.model.config.variant == variant
        for p in ckpt.model.params:
            assert np.array_equal(p.value, loaded.model.params[p.name].value)
        assert np.array_equal(loaded.model.presence, ckpt.model.presence)

    def test_eval_nll_identical_after_reload(self, tmp_path):
        corpus, split, ckpt = self.make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        from authorlm.model import make_batch
        docs = corpus.documents[:50]
        tokens, lengths, authors, times = make_batch(docs)
        n1, c1 = ckpt.model.batch_doc_nll(tokens, lengths, authors, times)
        n2, c2 = loaded.model.batch_doc_nll(tokens, lengths, authors, times)
        assert np.array_equal(n1, n2) and np.array_equal(c1, c2)

    def test_wrong_vocab_hash_rejected(self, tmp_path):
        _, _, ckpt = self.make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(ckpt, path)
        with pytest.raises(TrainError, match="hash"):
            load_checkpoint(path, expect_vocab_hash="0" * 64)

    def test_wrong_split_hash_rejected(self, tmp_path):
        _, _, ckpt = self.make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(ckpt, path)
        with pytest.raises(TrainError, match="hash"):
            load_checkpoint(path, expect_split_hash="f" * 64)

    def test_truncated_file_rejected(self, tmp_path):
        _, _, ckpt = self.make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(ckpt, path)
        data = path.read_bytes()
        (tmp_path / "cut.bin").write_bytes(data[:len(data) // 2])
        with pytest.raises(TrainError, match="truncated"):
            load_checkpoint(tmp_path / "cut.bin")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(TrainError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_hashes_change_with_content(self):
        corpus = small_corpus()
        s1 = make_split(corpus, "modeling", 0)
        s2 = make_split(corpus, "modeling", 1)
        assert split_hash(s1) != split_hash(s2)
        assert vocab_hash(corpus.vocab) == vocab_hash(corpus.vocab)

    def test_log_file_format(self, tmp_path):
        log = [(10, 2.5, 11.0, 0.003), (20, 2.2, 10.5, 0.003)]
        path = tmp_path / "log.tsv"
        save_train_log(log, path, header_lines=["provenance x"])
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# iter")
        assert lines[2].split("\t")[0] == "10"
