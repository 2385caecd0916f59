import math

import numpy as np
import pytest

from obftriage import autograd as ag
from obftriage.bytecode import TokenBatch, segment
from obftriage.errors import EmptyContract, NumericError, ShapeError, VocabError
from obftriage.model import (
    PRESETS, FeatureStats, ModelConfig, Trace, forward, global_encode, init_params, local_encode, loss,
    masked_mean_pool, param_shapes, preset, zscore,
)

from gradcheck import check_gradients, make_problem

DESK = preset("desk")


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    stats = FeatureStats(rng.normal(size=DESK.K), rng.uniform(0.5, 2, DESK.K))
    return init_params(DESK, 0), stats


def random_batch(rng, cfg, B, lens=None):
    lens = lens if lens is not None else rng.integers(1, cfg.L * cfg.N + 200, B)
    seqs = [segment(rng.integers(0, 256, int(n), dtype=np.uint8).tobytes(), cfg.L, cfg.N) for n in lens]
    return TokenBatch.stack(seqs)


class TestConfig:
    def test_presets(self):
        p = PRESETS["paper"]
        assert (p.L, p.N, p.d_model, p.n_layers_local, p.n_layers_global, p.n_heads) == (512, 32, 256, 2, 2, 4)
        assert (p.lr, p.weight_decay, p.batch, p.epochs, p.clip_norm, p.dropout) == (5e-4, 1e-4, 24, 20, 0.5, 0.1)
        assert (p.lambda_s, p.lambda_aux, p.lambda_feature) == (1.0, 0.1, 0.01)
        d = PRESETS["desk"]
        assert (d.L, d.N, d.d_model, d.n_layers_local, d.n_layers_global, d.n_heads, d.K) == (64, 8, 32, 1, 1, 2, 7)
        assert d.vocab == 257 and d.ffn_dim == 128

    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            ModelConfig(d_model=30, n_heads=4)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            ModelConfig(lambda_aux=-1)

    def test_override(self):
        assert preset("desk", epochs=3).epochs == 3


class TestZscore:
    def test_centered(self):
        s = FeatureStats(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        assert zscore([1.0, 2.0], s) == 0.0

    def test_hand_value(self):
        s = FeatureStats(np.array([1.0, 1.0]), np.array([2.0, 2.0]))
        assert zscore([3.0, 5.0], s) == 3.0

    def test_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            K = int(rng.integers(1, 10))
            f, mu, sig = rng.normal(size=K), rng.normal(size=K), rng.uniform(0.1, 3, K)
            expect = 0.0
            for k in range(K):
                expect += (f[k] - mu[k]) / sig[k]
            assert zscore(f, FeatureStats(mu, sig)) == pytest.approx(expect, rel=1e-12, abs=1e-12)

    def test_fit_floors_sigma(self):
        s = FeatureStats.fit(np.ones((5, 3)))
        assert (s.sigma > 0).all()

    def test_wrong_k(self):
        with pytest.raises(ShapeError):
            zscore([1.0], FeatureStats(np.zeros(2), np.ones(2)))


class TestInit:
    def test_shapes_and_bounds(self):
        params = init_params(DESK, 3)
        assert set(params) == set(param_shapes(DESK))
        for name, p in params.items():
            assert p.shape == param_shapes(DESK)[name]
            if name.endswith(".g"):
                assert (p.data == 1).all()
            elif len(p.shape) == 2 and name not in ("embed", "pos_local", "pos_chunk"):
                assert np.abs(p.data).max() <= 1 / math.sqrt(p.shape[0])

    def test_seeded(self):
        a, b = init_params(DESK, 5), init_params(DESK, 5)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


class TestEncoders:
    def test_all_padding_segment_finite(self, setup):
        params, _ = setup
        out = local_encode(np.zeros((1, DESK.L), dtype=int), params, DESK)
        assert np.isfinite(out.data).all()

    def test_positional_sensitivity(self, setup):
        params, _ = setup
        seg = np.zeros((1, DESK.L), dtype=int)
        seg[0, 0] = 7
        shifted = np.roll(seg, 1, axis=1)
        a = local_encode(seg, params, DESK).data.mean(axis=1)
        b = local_encode(shifted, params, DESK).data.mean(axis=1)
        assert not np.allclose(a, b)

    def test_attention_rows_normalized(self, setup):
        params, stats = setup
        trace = Trace()
        batch = random_batch(np.random.default_rng(2), DESK, 3)
        forward(batch, params, stats, DESK, trace=trace)
        for name, probs in trace.attention.items():
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        g = trace.attention["global.0"]
        # masked segments receive no attention weight
        assert (g[~np.broadcast_to(batch.mask[:, None, None, :], g.shape)] == 0).all()

    def test_attention_matches_softmax_of_logits(self, setup):
        params, _ = setup
        x = np.random.default_rng(3).normal(size=(1, 5, DESK.d_model))
        trace = Trace()
        mask = np.array([[True] * 5 + [False] * 3])
        summaries = ag.Tensor(np.concatenate([x, np.zeros((1, 3, DESK.d_model))], axis=1))
        global_encode(summaries, mask, params, DESK, trace=trace)
        h = summaries.data + params["pos_chunk"].data
        mu = h.mean(-1, keepdims=True)
        h = (h - mu) / np.sqrt(h.var(-1, keepdims=True) + 1e-5) * params["global.0.ln1.g"].data + params["global.0.ln1.b"].data
        q = h @ params["global.0.wq"].data + params["global.0.bq"].data
        k = h @ params["global.0.wk"].data + params["global.0.bk"].data
        dh = DESK.d_model // DESK.n_heads
        q0, k0 = q[0, :, :dh], k[0, :, :dh]
        logits = q0 @ k0.T / math.sqrt(dh)
        logits[:, 5:] = -np.inf
        expect = np.exp(logits - logits.max(-1, keepdims=True))
        expect /= expect.sum(-1, keepdims=True)
        np.testing.assert_allclose(trace.attention["global.0"][0, 0], expect, atol=1e-12)

    def test_single_chunk_deterministic(self, setup):
        params, _ = setup
        cfg = DESK.with_(N=1)
        p = init_params(cfg, 0)
        s = ag.Tensor(np.random.default_rng(4).normal(size=(1, 1, cfg.d_model)))
        a = global_encode(s, np.array([[True]]), p, cfg).data
        b = global_encode(s, np.array([[True]]), p, cfg).data
        assert np.array_equal(a, b)

    def test_chunk_order_matters(self, setup):
        params, _ = setup
        x = np.random.default_rng(5).normal(size=(1, DESK.N, DESK.d_model))
        mask = np.ones((1, DESK.N), dtype=bool)
        a = global_encode(ag.Tensor(x), mask, params, DESK).data
        b = global_encode(ag.Tensor(x[:, [1, 0] + list(range(2, DESK.N))]), mask, params, DESK).data
        assert not np.allclose(a[:, [1, 0] + list(range(2, DESK.N))], b)

    def test_errors(self, setup):
        params, _ = setup
        with pytest.raises(VocabError):
            local_encode(np.full((1, DESK.L), 257), params, DESK)
        with pytest.raises(ShapeError):
            local_encode(np.zeros((1, 3), dtype=int), params, DESK)


class TestPool:
    def test_single_valid(self):
        h = ag.Tensor(np.random.default_rng(0).normal(size=(1, 4, 3)))
        out = masked_mean_pool(h, np.array([[False, True, False, False]])).data
        np.testing.assert_allclose(out[0], h.data[0, 1], rtol=1e-7)

    def test_equal_vectors(self):
        v = np.array([1.0, -2.0, 3.0])
        h = ag.Tensor(np.stack([v, v, np.full(3, 99.0)])[None])
        np.testing.assert_allclose(masked_mean_pool(h, np.array([[1, 1, 0]])).data[0], v, rtol=1e-7)

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(6, 5, 4))
        mask = rng.random((6, 5)) < 0.6
        mask[:, 0] = True
        out = masked_mean_pool(ag.Tensor(h), mask).data
        for b in range(6):
            acc, n = np.zeros(4), 0
            for i in range(5):
                if mask[b, i]:
                    acc += h[b, i]
                    n += 1
            np.testing.assert_allclose(out[b], acc / (n + 1e-8), rtol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyContract):
            masked_mean_pool(ag.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=bool))


class TestForward:
    def test_one_real_byte(self, setup):
        params, stats = setup
        out = forward(TokenBatch.stack([segment(b"\x60", DESK.L, DESK.N)]), params, stats, DESK)
        assert np.isfinite(out.s_hat.data).all()
        assert out.f_hat.shape == (1, DESK.K)

    def test_padding_invariance(self, setup):
        params, stats = setup
        rng = np.random.default_rng(6)
        for _ in range(10):
            batch = random_batch(rng, DESK, 4)
            a = forward(batch, params, stats, DESK)
            tokens = batch.tokens.copy()
            tokens[~batch.mask] = rng.integers(0, 257, tokens[~batch.mask].shape)
            b = forward(TokenBatch(tokens, batch.mask), params, stats, DESK)
            for x, y in ((a.s_hat, b.s_hat), (a.s_tool_hat, b.s_tool_hat), (a.f_hat, b.f_hat)):
                assert np.array_equal(x.data, y.data)

    def test_aux_consistency(self, setup):
        params, stats = setup
        out = forward(random_batch(np.random.default_rng(7), DESK, 16), params, stats, DESK)
        np.testing.assert_allclose(out.s_tool_hat.data, zscore(out.f_hat.data, stats), atol=1e-6)

    def test_batch_independent(self, setup):
        params, stats = setup
        batch = random_batch(np.random.default_rng(8), DESK, 5)
        full = forward(batch, params, stats, DESK).s_hat.data
        for i in range(5):
            one = forward(TokenBatch(batch.tokens[i:i + 1], batch.mask[i:i + 1]), params, stats, DESK).s_hat.data
            assert one[0] == pytest.approx(full[i], abs=1e-10)

    def test_no_valid_segment(self, setup):
        params, stats = setup
        with pytest.raises(EmptyContract):
            forward(TokenBatch(np.zeros((1, DESK.N, DESK.L), dtype=int), np.zeros((1, DESK.N), bool)),
                    params, stats, DESK)

    def test_geometry_mismatch(self, setup):
        params, stats = setup
        with pytest.raises(ShapeError):
            forward(TokenBatch(np.zeros((1, 2, DESK.L), dtype=int), np.ones((1, 2), bool)), params, stats, DESK)


class TestLoss:
    def test_perfect(self, setup):
        params, stats = setup
        out = forward(random_batch(np.random.default_rng(9), DESK, 3), params, stats, DESK)
        s = out.s_hat.data.copy()
        cfg = DESK.with_(lambda_aux=0.0)
        terms = loss(out, s, out.f_hat.data.copy(), cfg)
        assert terms.total.data == 0.0

    def test_breakdown_and_loop(self, setup):
        params, stats = setup
        rng = np.random.default_rng(10)
        out = forward(random_batch(rng, DESK, 4), params, stats, DESK)
        s, F = rng.normal(size=4), rng.normal(size=(4, DESK.K))
        terms = loss(out, s, F, DESK)
        sh, st, fh = out.s_hat.data, out.s_tool_hat.data, out.f_hat.data
        ls = sum((sh[i] - s[i]) ** 2 for i in range(4)) / 4
        la = sum((st[i] - s[i]) ** 2 for i in range(4)) / 4
        lf = sum(sum((fh[i, k] - F[i, k]) ** 2 for i in range(4)) / 4 for k in range(DESK.K))
        assert terms.score == pytest.approx(ls, rel=1e-12)
        assert terms.aux == pytest.approx(0.1 * la, rel=1e-12)
        assert terms.feature == pytest.approx(0.01 * lf, rel=1e-12)
        assert float(terms.total.data) == pytest.approx(terms.score + terms.aux + terms.feature, rel=1e-12)

    def test_ablation_is_plain_mse(self, setup):
        params, stats = setup
        rng = np.random.default_rng(11)
        out = forward(random_batch(rng, DESK, 4), params, stats, DESK)
        s = rng.normal(size=4)
        terms = loss(out, s, rng.normal(size=(4, DESK.K)), DESK.with_(lambda_aux=0.0, lambda_feature=0.0))
        assert float(terms.total.data) == pytest.approx(np.mean((out.s_hat.data - s) ** 2), rel=1e-12)

    def test_nan_rejected(self, setup):
        params, stats = setup
        out = forward(random_batch(np.random.default_rng(12), DESK, 2), params, stats, DESK)
        with pytest.raises(NumericError):
            loss(out, np.array([np.nan, 0.0]), np.zeros((2, DESK.K)), DESK)


class TestBackward:
    def test_finite_differences(self):
        errors = check_gradients(DESK.with_(dropout=0.0), n_coords=4, seed=11)
        assert len(errors) == len(param_shapes(DESK))
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-3, worst

    def test_unused_chunk_positions_get_zero_grad(self):
        cfg = DESK.with_(dropout=0.0)
        batch, params, stats, s, F = make_problem(cfg, valid=(2, 3))
        loss(forward(batch, params, stats, cfg), s, F, cfg).total.backward()
        g = params["pos_chunk"].grad
        assert (g[3:] == 0).all()
        assert np.abs(g[:3]).sum() > 0

    def test_score_output_gradient(self):
        cfg = DESK.with_(dropout=0.0)
        batch, params, stats, s, F = make_problem(cfg, valid=(2, 5))
        out = forward(batch, params, stats, cfg)
        terms = loss(out, s, F, cfg)
        terms.total.backward()
        expect = 2 * cfg.lambda_s * (out.s_hat.data - s) / len(s)
        # the head output bias receives exactly the summed gradient of the score output
        assert params["head.b2"].grad[0] == pytest.approx(expect.sum(), rel=1e-10)
