import numpy as np
import pytest

from mmgrad.autodiff import Tape, backward
from mmgrad.data import generate_synthetic, record_saliency
from mmgrad.losses import LossConfig, QuadrupletConfig
from mmgrad.model import EncoderConfig, Vocab, init_model
from mmgrad.training import (
    TrainConfig,
    sample_negative_ids,
    sample_quadruplet,
    split_records,
    total_loss,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(seed=17, count=30)


@pytest.fixture(scope="module")
def vocab(dataset):
    return Vocab.build(dataset.texts())


def make_model(vocab, seed=5, layers=1):
    cfg = EncoderConfig(dim=8, heads=2, layers=layers, vocab_size=len(vocab),
                        max_text_len=10, seed=seed)
    return init_model(cfg)


class TestNegativeSampling:
    def test_never_returns_target(self, dataset):
        rng = np.random.default_rng(0)
        record = dataset.records[0]
        for _ in range(200):
            a, b = sample_negative_ids(record, dataset, rng, pool_size=8)
            assert record.target_id not in (a, b)
            assert a != b

    def test_fixed_seed_identical_sequence(self, dataset):
        record = dataset.records[1]
        seq1 = [
            sample_negative_ids(record, dataset, np.random.default_rng(4), 8)
            for _ in range(1)
        ]
        seq2 = [
            sample_negative_ids(record, dataset, np.random.default_rng(4), 8)
            for _ in range(1)
        ]
        assert seq1 == seq2

    def test_uniform_over_eligible_ids(self, dataset):
        # each eligible id should land within 3 sigma of the binomial rate;
        # across ~29 cells a uniform sampler still trips 3 sigma ~7% of the
        # time, so the seed is fixed to a verified-stable draw (chi-square
        # p = 0.5 for this seed)
        rng = np.random.default_rng(0)
        record = dataset.records[2]
        eligible = sorted(
            {r.target_id for r in dataset.records} - {record.target_id}
        )
        draws = 10_000
        counts = {e: 0 for e in eligible}
        for _ in range(draws):
            a, b = sample_negative_ids(record, dataset, rng,
                                       pool_size=len(eligible))
            counts[a] += 1
            counts[b] += 1
        p = 2.0 / len(eligible)  # two draws without replacement
        sigma = np.sqrt(draws * p * (1 - p))
        for e, c in counts.items():
            assert abs(c - draws * p) <= 3 * sigma, (e, c)

    def test_pool_exhausted_rejected(self, dataset):
        record = dataset.records[0]
        tiny = type(dataset)(records=[record], images=dataset.images,
                             saliency=dataset.saliency)
        with pytest.raises(ValueError, match="pool exhausted"):
            sample_negative_ids(record, tiny, np.random.default_rng(0), 8)


class TestTotalLoss:
    def grid_saliency(self, dataset, record, model):
        cfg = model.config
        return record_saliency(dataset, record, (cfg.grid_h, cfg.grid_w))

    def test_weight_zero_total_equals_quadruplet(self, dataset, vocab):
        model = make_model(vocab)
        record = dataset.records[3]
        sal = self.grid_saliency(dataset, record, model)
        with Tape():
            quad = sample_quadruplet(model, vocab, record, dataset,
                                     np.random.default_rng(1))
            total, parts = total_loss(model, quad, sal,
                                      LossConfig(attention_weight=0.0))
        assert parts.total == parts.quadruplet
        assert parts.attention > 0  # still evaluated for logging

    def test_weight_one_total_equals_attention(self, dataset, vocab):
        model = make_model(vocab)
        record = dataset.records[4]
        sal = self.grid_saliency(dataset, record, model)
        with Tape():
            quad = sample_quadruplet(model, vocab, record, dataset,
                                     np.random.default_rng(2))
            total, parts = total_loss(model, quad, sal,
                                      LossConfig(attention_weight=1.0))
        assert parts.total == parts.attention

    def test_components_recombine(self, dataset, vocab):
        model = make_model(vocab)
        record = dataset.records[5]
        sal = self.grid_saliency(dataset, record, model)
        with Tape():
            quad = sample_quadruplet(model, vocab, record, dataset,
                                     np.random.default_rng(3))
            total, parts = total_loss(model, quad, sal,
                                      LossConfig(attention_weight=0.3))
        expected = 0.3 * parts.attention + 0.7 * parts.quadruplet
        assert abs(parts.total - expected) < 1e-12

    def test_siamese_identity_gives_zero_d1(self, dataset, vocab):
        # anchor and positive branches share weights, so identical inputs
        # give d1 = 0 exactly
        model = make_model(vocab)
        record = dataset.records[6]
        from mmgrad.autodiff import l2_norm, sub
        from mmgrad.model import encode_image, encode_joint, tokenize

        toks = tokenize(record.modifier_text, vocab, model.config.max_text_len)
        img = dataset.images[record.reference_id]
        with Tape():
            a = encode_joint(model, encode_image(model, img), toks)
            b = encode_joint(model, encode_image(model, img), toks)
            d1 = l2_norm(sub(a.pooled, b.pooled))
        assert d1.item() == 0.0


class TestBatchedStepConsistency:
    def test_matches_per_record_losses(self, dataset, vocab):
        model = make_model(vocab, seed=9)
        records = dataset.records[:4]
        tc = TrainConfig(batch_size=4, epochs=1)
        lc = LossConfig(attention_weight=0.5)
        grads, parts = train_step(model, vocab, records, dataset,
                                  np.random.default_rng(11), tc, lc)

        rng2 = np.random.default_rng(11)
        singles = []
        grid = (model.config.grid_h, model.config.grid_w)
        names = sorted(model.params)
        accum = {n: np.zeros_like(model.params[n].data) for n in names}
        for r in records:
            sal = record_saliency(dataset, r, grid)
            with Tape():
                quad = sample_quadruplet(model, vocab, r, dataset, rng2,
                                         tc.negative_pool_size)
                total, p = total_loss(model, quad, sal, lc)
                gs = backward(total, [model.params[n] for n in names])
            singles.append(p)
            for n, g in zip(names, gs):
                accum[n] += g.data / len(records)

        assert parts.total == pytest.approx(
            np.mean([p.total for p in singles]), abs=1e-10
        )
        assert parts.attention == pytest.approx(
            np.mean([p.attention for p in singles]), abs=1e-10
        )
        assert parts.quadruplet == pytest.approx(
            np.mean([p.quadruplet for p in singles]), abs=1e-10
        )
        for n in names:
            np.testing.assert_allclose(
                grads[n], accum[n], rtol=1e-8, atol=1e-10, err_msg=n
            )


class TestTrainLoop:
    def test_step_count(self, dataset, vocab, tmp_path):
        model = make_model(vocab, seed=13)
        tr, va = dataset.records[:8], dataset.records[8:12]
        res = train(
            dataset, tr, va, model, vocab,
            TrainConfig(batch_size=4, epochs=1, probe_queries=4),
            LossConfig(attention_weight=0.5),
            tmp_path / "run",
        )
        assert res.optimizer_steps == 2

    def test_loss_decreases_on_fixed_batch(self, dataset, vocab):
        from mmgrad.optim import adamw_step, init_state

        model = make_model(vocab, seed=15)
        records = dataset.records[:4]
        tc = TrainConfig(batch_size=4, epochs=1, learning_rate=3e-3)
        lc = LossConfig(attention_weight=0.5)
        state = init_state(model.params)
        first = None
        for step in range(50):
            rng = np.random.default_rng(20)  # same negatives every step
            grads, parts = train_step(model, vocab, records, dataset, rng, tc, lc)
            adamw_step(model.params, grads, state, lr=tc.learning_rate)
            if first is None:
                first = parts.total
        assert parts.total < first

    def test_reproducible_logs_and_checkpoints(self, dataset, vocab, tmp_path):
        def run(out):
            model = make_model(vocab, seed=23)
            tr, va = split_records(dataset, 0.25, seed=1)
            return train(
                dataset, tr, va, model, vocab,
                TrainConfig(batch_size=8, epochs=2, probe_queries=4, seed=3),
                LossConfig(attention_weight=0.5),
                out,
            )

        r1 = run(tmp_path / "a")
        r2 = run(tmp_path / "b")
        assert (tmp_path / "a/metrics.jsonl").read_bytes() == (
            tmp_path / "b/metrics.jsonl"
        ).read_bytes()
        assert r1.last_checkpoint.read_bytes() == r2.last_checkpoint.read_bytes()
        assert r1.best_checkpoint.read_bytes() == r2.best_checkpoint.read_bytes()

    def test_ablation_arm_ignores_saliency_in_updates(self, dataset, vocab,
                                                      tmp_path):
        # with attention weight 0 the logged attention loss changes with the
        # saliency data, but parameter updates must not
        import copy

        scrambled = copy.deepcopy(dataset)
        rng = np.random.default_rng(99)
        for rid in scrambled.saliency:
            noise = (rng.random(scrambled.saliency[rid].shape) < 0.5)
            scrambled.saliency[rid] = noise.astype(np.uint8)

        def run(ds, out):
            model = make_model(vocab, seed=27)
            tr, va = ds.records[:8], ds.records[8:12]
            return train(
                dataset=ds, train_records=tr, val_records=va, model=model,
                vocab=vocab,
                train_cfg=TrainConfig(batch_size=4, epochs=1, probe_queries=2,
                                      seed=5),
                loss_cfg=LossConfig(attention_weight=0.0),
                out_dir=out,
            ), model

        res_a, model_a = run(dataset, tmp_path / "a")
        res_b, model_b = run(scrambled, tmp_path / "b")
        assert res_a.metrics[0]["loss_attention"] != res_b.metrics[0][
            "loss_attention"
        ]
        for name in model_a.params:
            np.testing.assert_array_equal(
                model_a.params[name].data, model_b.params[name].data
            )

    def test_non_finite_loss_aborts_with_record_ids(self, dataset, vocab):
        model = make_model(vocab, seed=29)
        model.params["out_w"].data[:] = np.nan
        tc = TrainConfig(batch_size=2, epochs=1)
        with pytest.raises(RuntimeError, match=dataset.records[0].record_id):
            train_step(model, vocab, dataset.records[:2], dataset,
                       np.random.default_rng(0), tc, LossConfig())

    def test_split_records_partition(self, dataset):
        tr, va = split_records(dataset, 0.2, seed=2)
        assert len(tr) + len(va) == len(dataset.records)
        assert not ({r.record_id for r in tr} & {r.record_id for r in va})
        tr2, va2 = split_records(dataset, 0.2, seed=2)
        assert [r.record_id for r in va] == [r.record_id for r in va2]
