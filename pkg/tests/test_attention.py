import numpy as np
import pytest

from mmgrad import autodiff as ad
from mmgrad.autodiff import Tape, Tensor, backward
from mmgrad.attention import (
    attention_loss,
    attention_map,
    batch_attention_loss,
    batch_attention_maps,
    batch_channel_weights,
    batch_similarity,
    channel_weights,
    similarity_score,
)
from mmgrad.model import (
    EncoderConfig,
    JointEmbedding,
    Vocab,
    encode_image,
    encode_joint,
    init_model,
    tokenize,
)

from gradcheck import rel_err


def make_embedding(pooled=None, grid=None, acts=None):
    """JointEmbedding stub for the algebra-only operations."""
    return JointEmbedding(
        pooled=Tensor(np.asarray(pooled)) if pooled is not None else None,
        grid=Tensor(np.asarray(grid, dtype=np.float64)) if grid is not None else None,
        last_layer_activations=acts,
    )


def cosine_oracle(a, b, eps=1e-12):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(np.dot(a, b) / max(na * nb, eps))


@pytest.fixture(scope="module")
def setup():
    cfg = EncoderConfig(dim=8, heads=2, layers=1, vocab_size=16,
                        max_text_len=6, seed=21)
    model = init_model(cfg)
    vocab = Vocab.build(["change red square to blue circle"])
    rng = np.random.default_rng(77)
    ref_img = rng.uniform(0, 1, (32, 32, 3))
    tgt_img = rng.uniform(0, 1, (32, 32, 3))
    toks = tokenize("change red square to blue circle", vocab, 6)
    return model, ref_img, tgt_img, toks


def build_score(model, ref_img, tgt_img, toks):
    ref = encode_joint(model, encode_image(model, ref_img), toks)
    tgt = encode_joint(model, encode_image(model, tgt_img), toks)
    return similarity_score(ref, tgt), ref, tgt


class TestSimilarityScore:
    def test_identical_embeddings_give_one(self, setup):
        model, ref_img, _, toks = setup
        with Tape():
            s, _, _ = build_score(model, ref_img, ref_img, toks)
        assert s.item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_cosine_oracle(self, setup):
        model, ref_img, tgt_img, toks = setup
        with Tape():
            s, ref, tgt = build_score(model, ref_img, tgt_img, toks)
        expected = cosine_oracle(ref.pooled.data, tgt.pooled.data)
        assert s.item() == pytest.approx(expected, abs=1e-12)

    def test_orthogonal_pooled_gives_zero(self):
        a = make_embedding(pooled=[1.0, 0.0], grid=np.zeros((2, 2, 2)))
        b = make_embedding(pooled=[0.0, 1.0], grid=np.zeros((2, 2, 2)))
        assert similarity_score(a, b).item() == pytest.approx(0.0, abs=1e-15)

    def test_dim_mismatch_rejected(self):
        a = make_embedding(pooled=[1.0, 0.0], grid=np.zeros((2, 2, 2)))
        b = make_embedding(pooled=[1.0, 0.0, 0.0], grid=np.zeros((3, 2, 2)))
        with pytest.raises(ValueError, match="pooled dims"):
            similarity_score(a, b)


def synthetic_target(acts_data):
    """Target embedding whose grid/pooled are derived from leaf activations."""
    acts = Tensor(acts_data, requires_grad=True)
    mn = 16
    grid = ad.reshape(ad.permute(ad.narrow(acts, 0, 0, mn), (1, 0)), (8, 4, 4))
    pooled = ad.mean(acts, axes=0)
    return JointEmbedding(pooled=pooled, grid=grid, last_layer_activations=acts), acts


class TestChannelWeights:
    def test_score_on_single_channel(self):
        # score = mean over grid cells of channel 0; summing the per-cell
        # gradients of 1/(m*n) over the 16 cells gives exactly 1
        rng = np.random.default_rng(5)
        with Tape():
            tgt, acts = synthetic_target(rng.normal(size=(20, 8)))
            chan0 = ad.narrow(tgt.grid, 0, 0, 1)
            s = ad.mean(chan0)
            g = channel_weights(s, tgt)
        np.testing.assert_allclose(g.data, [1, 0, 0, 0, 0, 0, 0, 0], atol=1e-12)

    def test_masked_channel_gets_zero_weight(self):
        rng = np.random.default_rng(6)
        with Tape():
            tgt, acts = synthetic_target(rng.normal(size=(20, 8)))
            kept = ad.narrow(tgt.grid, 0, 2, 3)  # channels 2..4 only
            s = ad.tensor_sum(ad.mul(kept, kept))
            g = channel_weights(s, tgt)
        assert g.data[0] == 0 and g.data[1] == 0
        assert np.all(g.data[5:] == 0)
        assert np.any(g.data[2:5] != 0)

    def test_unreachable_score_rejected(self):
        rng = np.random.default_rng(7)
        with Tape():
            tgt, _ = synthetic_target(rng.normal(size=(20, 8)))
            other = Tensor(rng.normal(size=(4,)), requires_grad=True)
            s = ad.tensor_sum(ad.mul(other, other))
            with pytest.raises(ValueError, match="not reachable"):
                channel_weights(s, tgt)

    def test_matches_uniform_perturbation_oracle(self, setup):
        """g_c equals the derivative of the score when every grid cell of
        channel c is shifted together (central differences, pure numpy)."""
        model, ref_img, tgt_img, toks = setup
        with Tape():
            s, ref, tgt = build_score(model, ref_img, tgt_img, toks)
            g = channel_weights(s, tgt)

        ref_pooled = ref.pooled.data
        acts = tgt.last_layer_activations.data
        n_tokens = 16 + toks.length

        def score_of(acts_arr):
            pooled = acts_arr[:n_tokens].mean(axis=0)
            return cosine_oracle(ref_pooled, pooled)

        h = 1e-5
        fd = np.zeros(8)
        for c in range(8):
            up, down = acts.copy(), acts.copy()
            up[:16, c] += h
            down[:16, c] -= h
            fd[c] = (score_of(up) - score_of(down)) / (2 * h)
        assert rel_err(g.data, fd) < 1e-4


def brute_force_map(weights, grid):
    """Loop over channels and cells: the oracle for the attention map."""
    d, m, n = grid.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for c in range(d):
                acc += weights[c] * grid[c, i, j]
            out[i, j] = max(acc, 0.0)
    return out


class TestAttentionMap:
    def test_hand_example(self):
        tgt = make_embedding(
            pooled=[0.0, 0.0],
            grid=[[[1.0, 0.0], [0.0, 0.0]], [[0.0, 2.0], [0.0, 0.0]]],
        )
        out = attention_map(Tensor([1.0, -1.0]), tgt)
        np.testing.assert_array_equal(out.data, [[1.0, 0.0], [0.0, 0.0]])

    def test_zero_weights_zero_map(self):
        rng = np.random.default_rng(8)
        tgt = make_embedding(pooled=None, grid=rng.normal(size=(4, 3, 3)))
        out = attention_map(Tensor(np.zeros(4)), tgt)
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))

    def test_relu_clamps_negative(self):
        tgt = make_embedding(pooled=None, grid=-np.ones((1, 2, 2)))
        out = attention_map(Tensor([1.0]), tgt)
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_shape_mismatch_rejected(self):
        tgt = make_embedding(pooled=None, grid=np.ones((3, 2, 2)))
        with pytest.raises(ValueError, match="attention_map"):
            attention_map(Tensor([1.0, 2.0]), tgt)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            g = rng.normal(size=6)
            grid = rng.normal(size=(6, 4, 4))
            tgt = make_embedding(pooled=None, grid=grid)
            out = attention_map(Tensor(g), tgt)
            np.testing.assert_allclose(out.data, brute_force_map(g, grid),
                                       atol=1e-12)
            assert np.all(out.data >= 0)


class TestAttentionLoss:
    def test_perfect_alignment_zero(self):
        s = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert attention_loss(Tensor(s), s).item() == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_support_one(self):
        m = Tensor([[1.0, 0.0], [0.0, 0.0]])
        s = np.array([[0.0, 0.0], [0.0, 1.0]])
        assert attention_loss(m, s).item() == pytest.approx(1.0, abs=1e-12)

    def test_hand_value(self):
        # 1 - <M,S>/(|M||S|) = 1 - 1/sqrt(2)
        m = Tensor([[1.0, 1.0], [0.0, 0.0]])
        s = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert attention_loss(m, s).item() == pytest.approx(
            1.0 - 1.0 / np.sqrt(2.0), abs=1e-10
        )

    def test_degenerate_map_is_one_with_zero_grad(self):
        x = Tensor(np.full((2, 2), -1.0), requires_grad=True)
        s = np.array([[1.0, 0.0], [0.0, 0.0]])
        with Tape():
            m = ad.relu(x)  # all zeros
            loss = attention_loss(m, s)
            assert loss.item() == 1.0
            (g,) = backward(loss, [x])
        np.testing.assert_array_equal(g.data, np.zeros((2, 2)))

    def test_degenerate_saliency_is_one(self):
        m = Tensor([[1.0, 0.0], [0.0, 0.0]])
        assert attention_loss(m, np.zeros((2, 2))).item() == 1.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        m = np.abs(rng.normal(size=(4, 4)))
        s = (rng.random((4, 4)) < 0.4).astype(float)
        s[0, 0] = 1.0
        base = attention_loss(Tensor(m), s).item()
        for c in (1e-6, 0.3, 7.0, 1e6):
            scaled = attention_loss(Tensor(c * m), s).item()
            assert abs(scaled - base) < 1e-10

    def test_range_on_nonnegative_inputs(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            m = np.maximum(rng.normal(size=(4, 4)), 0)
            s = (rng.random((4, 4)) < 0.5).astype(float)
            val = attention_loss(Tensor(m), s).item()
            assert 0.0 - 1e-12 <= val <= 1.0 + 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="attention_loss"):
            attention_loss(Tensor(np.ones((2, 2))), np.ones((3, 3)))


class TestEndToEndDifferentiability:
    """d(attention loss)/d(parameter) via double backward against central
    finite differences of the loss itself, on the toy configuration."""

    def loss_of(self, model, ref_img, tgt_img, toks, saliency):
        with Tape():
            s, ref, tgt = build_score(model, ref_img, tgt_img, toks)
            g = channel_weights(s, tgt, retain_graph=True)
            m = attention_map(g, tgt)
            return attention_loss(m, saliency)

    def test_parameter_gradients_match_fd(self, setup):
        model, ref_img, tgt_img, toks = setup
        rng = np.random.default_rng(13)
        saliency = np.zeros((4, 4))
        saliency[1:3, 1:3] = 1.0

        with Tape():
            s, ref, tgt = build_score(model, ref_img, tgt_img, toks)
            g = channel_weights(s, tgt, retain_graph=True)
            m = attention_map(g, tgt)
            loss = attention_loss(m, saliency)
            names = sorted(model.params)
            grads = backward(loss, [model.params[n] for n in names])
        analytic = dict(zip(names, grads))

        h = 1e-5
        checked = 0
        for _ in range(8):
            name = names[rng.integers(len(names))]
            flat = model.params[name].data.reshape(-1)
            idx = int(rng.integers(flat.size))
            keep = flat[idx]
            flat[idx] = keep + h
            up = self.loss_of(model, ref_img, tgt_img, toks, saliency).item()
            flat[idx] = keep - h
            down = self.loss_of(model, ref_img, tgt_img, toks, saliency).item()
            flat[idx] = keep
            fd = (up - down) / (2 * h)
            got = analytic[name].data.reshape(-1)[idx]
            assert rel_err(np.array(got), np.array(fd)) < 1e-3, name
            checked += 1
        assert checked == 8

    def test_detached_weights_cut_second_order_path(self, setup):
        model, ref_img, tgt_img, toks = setup
        saliency = np.zeros((4, 4))
        saliency[0, 0] = 1.0

        def grads_with(retain):
            with Tape():
                s, ref, tgt = build_score(model, ref_img, tgt_img, toks)
                g = channel_weights(s, tgt, retain_graph=retain)
                loss = attention_loss(attention_map(g, tgt), saliency)
                names = sorted(model.params)
                out = backward(loss, [model.params[n] for n in names])
            return np.concatenate([t.data.reshape(-1) for t in out])

        retained = grads_with(True)
        detached = grads_with(False)
        assert np.any(retained != 0)
        assert np.any(detached != 0)
        assert not np.allclose(retained, detached)


class TestBatchedVariants:
    def test_batch_matches_single(self, setup):
        model, ref_img, tgt_img, toks = setup
        from mmgrad.model import encode_images, encode_joint_batch

        rng = np.random.default_rng(14)
        refs = np.stack([rng.uniform(0, 1, (32, 32, 3)) for _ in range(2)])
        tgts = np.stack([rng.uniform(0, 1, (32, 32, 3)) for _ in range(2)])
        ids = np.stack([toks.ids] * 2)
        mask = np.stack([toks.mask] * 2)
        sal = np.stack([np.eye(4), np.ones((4, 4))])

        with Tape():
            all_feats = encode_images(model, np.concatenate([refs, tgts]))
            batch = encode_joint_batch(
                model, all_feats, np.concatenate([ids, ids]),
                np.concatenate([mask, mask]),
            )
            ref_pooled = ad.narrow(batch.pooled, 0, 0, 2)
            tgt_pooled = ad.narrow(batch.pooled, 0, 2, 2)
            scores = batch_similarity(ref_pooled, tgt_pooled)
            g_all = batch_channel_weights(
                ad.tensor_sum(scores), batch.activations, 16, retain_graph=True
            )
            g = ad.narrow(g_all, 0, 2, 2)  # target-branch rows
            tgt_grid = ad.narrow(batch.grid, 0, 2, 2)
            maps = batch_attention_maps(g, tgt_grid)
            losses = batch_attention_loss(maps, sal)

        for i in range(2):
            with Tape():
                s_i, _, tgt_i = build_score(model, refs[i], tgts[i], toks)
                g_i = channel_weights(s_i, tgt_i, retain_graph=True)
                m_i = attention_map(g_i, tgt_i)
                l_i = attention_loss(m_i, sal[i])
            assert scores.data[i] == pytest.approx(s_i.item(), abs=1e-10)
            np.testing.assert_allclose(g.data[i], g_i.data, atol=1e-10)
            np.testing.assert_allclose(maps.data[i], m_i.data, atol=1e-10)
            assert losses.data[i] == pytest.approx(l_i.item(), abs=1e-10)
