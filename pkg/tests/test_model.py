"""Architecture checks: masking, causality, init identities, gradients."""

import numpy as np
import pytest

from enar import diffcore as dc
from enar.errors import ConfigError, InputError, ShapeError
from enar.model import (
    ModelConfig,
    backbone_forward,
    draw_noise,
    embed_sequence,
    generator_forward,
    init_params,
    predict_pair,
)
from enar.scoring import energy_loss

TINY = ModelConfig(d_token=2, d_model=16, n_layers=2, n_heads=2, d_mlp=12,
                   n_gen_blocks=2, d_noise=4, n_class_tokens=2, n_classes=3)


def tiny_params(seed=0, dtype=np.float64, seq_len=5, config=TINY):
    return init_params(config, seq_len, np.random.default_rng(seed), dtype=dtype)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3)

    def test_noise_kind_validated(self):
        with pytest.raises(ConfigError):
            ModelConfig(noise_kind="laplace")

    def test_dummy_class_is_last_row(self):
        assert ModelConfig(n_classes=8).dummy_class == 8


class TestParams:
    def test_groups_partition(self):
        p = tiny_params()
        total = p.count()
        assert p.count("backbone") + p.count("generator") == total
        for name in p.names():
            assert p.groups[name] in ("backbone", "generator")

    def test_default_config_generator_fraction(self):
        p = init_params(ModelConfig(), seq_len=16, rng=np.random.default_rng(0))
        assert 0.10 <= p.generator_fraction() <= 0.20

    def test_modulation_zero_init(self):
        p = tiny_params()
        for name in p.names("generator"):
            if any(k in name for k in (".shift.", ".scale.", ".gate.")):
                assert not p.tensors[name].data.any()


class TestEmbedSequence:
    def test_all_masked_ignores_tokens(self):
        p = tiny_params()
        rng = np.random.default_rng(1)
        mask = np.ones((2, 5), dtype=bool)
        labels = np.array([0, 2])
        a = embed_sequence(rng.normal(size=(2, 5, 2)), mask, labels, p, TINY)
        b = embed_sequence(rng.normal(size=(2, 5, 2)), mask, labels, p, TINY)
        np.testing.assert_array_equal(a.data, b.data)

    def test_zero_tokens_reduce_to_positional(self):
        p = tiny_params()
        # zero projection bias and mask token make the body purely positional
        out = embed_sequence(np.zeros((1, 5, 2)), np.zeros((1, 5), bool),
                             np.array([1]), p, TINY)
        body = out.data[0, TINY.n_class_tokens:, :]
        np.testing.assert_allclose(body, p.tensors["pos_embed"].data[TINY.n_class_tokens:],
                                   atol=1e-12)

    def test_labels_change_only_class_rows(self):
        p = tiny_params()
        tokens = np.random.default_rng(2).normal(size=(1, 5, 2))
        mask = np.zeros((1, 5), bool)
        a = embed_sequence(tokens, mask, np.array([0]), p, TINY)
        b = embed_sequence(tokens, mask, np.array([2]), p, TINY)
        nct = TINY.n_class_tokens
        assert not np.array_equal(a.data[:, :nct], b.data[:, :nct])
        np.testing.assert_array_equal(a.data[:, nct:], b.data[:, nct:])

    def test_dummy_label_allowed_beyond_rejected(self):
        p = tiny_params()
        tokens = np.zeros((1, 5, 2))
        mask = np.zeros((1, 5), bool)
        embed_sequence(tokens, mask, np.array([TINY.n_classes]), p, TINY)
        with pytest.raises(InputError):
            embed_sequence(tokens, mask, np.array([TINY.n_classes + 1]), p, TINY)
        with pytest.raises(InputError):
            embed_sequence(tokens, mask, np.array([-1]), p, TINY)

    def test_class_table_gradient_counts_replicas(self):
        p = tiny_params()
        out = embed_sequence(np.zeros((1, 5, 2)), np.zeros((1, 5), bool),
                             np.array([1]), p, TINY)
        dc.backward(dc.sum_(out))
        g = p.tensors["class_table"].grad
        # the label-1 row feeds n_class_tokens positions
        np.testing.assert_allclose(g[1], TINY.n_class_tokens * np.ones(TINY.d_model))
        np.testing.assert_allclose(g[0], np.zeros(TINY.d_model))


class TestBackbone:
    def test_eval_mode_deterministic(self):
        p = tiny_params()
        emb = embed_sequence(np.random.default_rng(3).normal(size=(2, 5, 2)),
                             np.zeros((2, 5), bool), np.array([0, 1]), p, TINY)
        a = backbone_forward(emb, p, TINY).values.data
        b = backbone_forward(emb, p, TINY).values.data
        assert np.array_equal(a, b)

    def test_causal_no_leakage(self):
        cfg = ModelConfig(d_token=2, d_model=16, n_layers=2, n_heads=2, d_mlp=12,
                          n_gen_blocks=2, d_noise=4, n_class_tokens=2, n_classes=3,
                          attention_mode="causal")
        p = tiny_params(config=cfg)
        rng = np.random.default_rng(4)
        tokens = rng.normal(size=(1, 5, 2))
        mask = np.zeros((1, 5), bool)
        labels = np.array([1])
        base = backbone_forward(embed_sequence(tokens, mask, labels, p, cfg), p, cfg).values.data
        cut = 2                                       # body position index
        tokens2 = tokens.copy()
        tokens2[0, cut + 1:] += 5.0
        per = backbone_forward(embed_sequence(tokens2, mask, labels, p, cfg), p, cfg).values.data
        upto = cfg.n_class_tokens + cut + 1           # class rows + body <= cut
        np.testing.assert_array_equal(base[0, :upto], per[0, :upto])
        assert not np.array_equal(base[0, upto:], per[0, upto:])

    def test_bidirectional_does_leak(self):
        p = tiny_params()
        rng = np.random.default_rng(5)
        tokens = rng.normal(size=(1, 5, 2))
        tokens2 = tokens.copy()
        tokens2[0, -1] += 5.0
        mask = np.zeros((1, 5), bool)
        a = backbone_forward(embed_sequence(tokens, mask, np.array([0]), p, TINY), p, TINY)
        b = backbone_forward(embed_sequence(tokens2, mask, np.array([0]), p, TINY), p, TINY)
        assert not np.array_equal(a.values.data[0, 0], b.values.data[0, 0])

    def test_single_layer_matches_hand_composition(self):
        cfg = ModelConfig(d_token=2, d_model=4, n_layers=1, n_heads=1, d_mlp=4,
                          n_gen_blocks=1, d_noise=2, n_class_tokens=1, n_classes=2)
        p = tiny_params(seed=7, config=cfg, seq_len=3)
        t = {k: v.data for k, v in p.tensors.items()}
        emb = embed_sequence(np.random.default_rng(8).normal(size=(1, 3, 2)),
                             np.zeros((1, 3), bool), np.array([0]), p, cfg)
        got = backbone_forward(emb, p, cfg).values.data[0]

        def ln(x, g, b, eps=1e-6):
            mu = x.mean(-1, keepdims=True)
            var = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(var + eps) * g + b

        x = emb.data[0].astype(np.float64)
        h = ln(x, t["layers.0.ln1.g"], t["layers.0.ln1.b"])
        q = h @ t["layers.0.attn.wq"] + t["layers.0.attn.bq"]
        k = h @ t["layers.0.attn.wk"] + t["layers.0.attn.bk"]
        v = h @ t["layers.0.attn.wv"] + t["layers.0.attn.bv"]
        logits = q @ k.T / np.sqrt(4)
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        x = x + (w @ v) @ t["layers.0.attn.wo"] + t["layers.0.attn.bo"]
        h = ln(x, t["layers.0.ln2.g"], t["layers.0.ln2.b"])
        a1 = h @ t["layers.0.ffn.w1"] + t["layers.0.ffn.b1"]
        x = x + (a1 / (1 + np.exp(-a1))) @ t["layers.0.ffn.w2"] + t["layers.0.ffn.b2"]
        want = ln(x, t["final_ln.g"], t["final_ln.b"])
        assert np.max(np.abs(got - want)) < 1e-5

    def test_dropout_needs_rng(self):
        cfg = ModelConfig(d_token=2, d_model=16, n_layers=1, n_heads=2, d_mlp=12,
                          n_gen_blocks=1, d_noise=4, n_class_tokens=1, n_classes=2,
                          dropout=0.5)
        p = tiny_params(config=cfg)
        emb = embed_sequence(np.zeros((1, 5, 2)), np.zeros((1, 5), bool),
                             np.array([0]), p, cfg)
        with pytest.raises(ConfigError):
            backbone_forward(emb, p, cfg, train_mode=True, rng=None)


class TestNoise:
    def test_uniform_support(self):
        eps = draw_noise(1000, TINY, np.random.default_rng(9))
        assert eps.data.min() >= -0.5 and eps.data.max() <= 0.5

    def test_mean_near_zero(self):
        cfg = ModelConfig(d_noise=16)
        eps = draw_noise(62_500, cfg, np.random.default_rng(10))   # 1e6 entries
        assert abs(eps.data.mean()) < 0.005

    def test_gaussian_kind(self):
        cfg = ModelConfig(d_token=2, d_model=16, n_layers=1, n_heads=2, d_mlp=12,
                          n_gen_blocks=1, d_noise=64, n_class_tokens=1, n_classes=2,
                          noise_kind="gaussian")
        eps = draw_noise(4000, cfg, np.random.default_rng(11))
        assert abs(eps.data.std() - 1.0) < 0.01

    def test_fixed_seed_reproducible(self):
        a = draw_noise(8, TINY, np.random.default_rng(12)).data
        b = draw_noise(8, TINY, np.random.default_rng(12)).data
        assert np.array_equal(a, b)


class TestGenerator:
    def test_init_output_ignores_noise(self):
        p = tiny_params()
        h = np.random.default_rng(13).normal(size=(6, 16))
        rng = np.random.default_rng(14)
        outs = [generator_forward(dc.Tensor(h), draw_noise(6, TINY, rng, np.float64),
                                  p, TINY).data for _ in range(4)]
        for o in outs[1:]:
            np.testing.assert_array_equal(outs[0], o)

    def test_init_variance_is_exactly_zero(self):
        p = tiny_params()
        h = dc.Tensor(np.random.default_rng(15).normal(size=(3, 16)))
        rng = np.random.default_rng(16)
        draws = np.stack([
            generator_forward(h, draw_noise(3, TINY, rng, np.float64), p, TINY).data
            for _ in range(50)
        ])
        # identical draws: deviation from the first draw is exactly zero,
        # so the empirical variance is too
        assert np.array_equal(draws, np.broadcast_to(draws[0], draws.shape))
        assert ((draws - draws[0]) ** 2).mean() == 0.0

    def test_tau_one_is_noop_scaling(self):
        p = tiny_params(seed=17)
        # perturb modulation weights so tau actually touches something
        for name in p.names("generator"):
            if ".shift." in name or ".scale." in name or ".gate." in name:
                p.tensors[name].data += 0.05
        h = dc.Tensor(np.random.default_rng(18).normal(size=(4, 16)))
        eps = draw_noise(4, TINY, np.random.default_rng(19), np.float64)
        a = generator_forward(h, eps, p, TINY, tau_infer=1.0).data
        b = generator_forward(h, eps, p, TINY, tau_infer=1.0).data
        c = generator_forward(h, eps, p, TINY, tau_infer=0.5).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_forced_gate_matches_hand_composition(self):
        cfg = ModelConfig(d_token=2, d_model=4, n_layers=1, n_heads=1, d_mlp=4,
                          n_gen_blocks=1, d_noise=2, n_class_tokens=1, n_classes=2)
        p = tiny_params(seed=20, config=cfg, seq_len=3)
        p.tensors["gen.blocks.0.gate.b"].data[:] = 1.0     # gate(e) = 1
        h = np.random.default_rng(21).normal(size=(3, 4))
        eps = np.zeros((3, 2))
        got = generator_forward(dc.Tensor(h), dc.Tensor(eps), p, cfg).data

        t = {k: v.data for k, v in p.tensors.items()}
        h0 = h @ t["gen.hidden_proj.w"] + t["gen.hidden_proj.b"]
        mu = h0.mean(-1, keepdims=True)
        var = ((h0 - mu) ** 2).mean(-1, keepdims=True)
        lnh = (h0 - mu) / np.sqrt(var + 1e-6)
        a1 = lnh @ t["gen.blocks.0.ffn.w1"] + t["gen.blocks.0.ffn.b1"]
        ffn = (a1 / (1 + np.exp(-a1))) @ t["gen.blocks.0.ffn.w2"] + t["gen.blocks.0.ffn.b2"]
        want = (h0 + ffn) @ t["gen.head.w"] + t["gen.head.b"]
        assert np.max(np.abs(got - want)) < 1e-5

    def test_tau_must_be_positive(self):
        p = tiny_params()
        with pytest.raises(ConfigError):
            generator_forward(dc.Tensor(np.zeros((1, 16))),
                              dc.Tensor(np.zeros((1, 4))), p, TINY, tau_infer=0.0)


class TestPredictPair:
    def perturbed(self, seed=22):
        p = tiny_params(seed=seed)
        rng = np.random.default_rng(seed + 1)
        for name in p.names("generator"):
            if any(k in name for k in (".shift.", ".scale.", ".gate.")):
                p.tensors[name].data += 0.1 * rng.standard_normal(p.tensors[name].shape)
        return p

    def test_pairs_differ_once_modulated(self):
        p = self.perturbed()
        h = dc.Tensor(np.random.default_rng(23).normal(size=(32, 16)))
        x1, x2 = predict_pair(h, p, TINY, np.random.default_rng(24))
        gaps = np.linalg.norm(x1.data - x2.data, axis=1)
        assert (gaps > 0).all()
        assert gaps.mean() > 0

    def test_same_seed_same_pair(self):
        p = self.perturbed()
        h = dc.Tensor(np.random.default_rng(25).normal(size=(4, 16)))
        a1, a2 = predict_pair(h, p, TINY, np.random.default_rng(26))
        b1, b2 = predict_pair(h, p, TINY, np.random.default_rng(26))
        assert np.array_equal(a1.data, b1.data) and np.array_equal(a2.data, b2.data)


class TestEndToEndGradient:
    def test_full_forward_loss_gradient_matches_fd(self):
        cfg = ModelConfig(d_token=2, d_model=16, n_layers=2, n_heads=2, d_mlp=8,
                          n_gen_blocks=2, d_noise=4, n_class_tokens=2, n_classes=3)
        seq_len = 4
        params = tiny_params(seed=30, config=cfg, seq_len=seq_len)
        # nonzero modulation so generator gradients are alive
        prng = np.random.default_rng(31)
        for name in params.names("generator"):
            if any(k in name for k in (".shift.", ".scale.", ".gate.")):
                params.tensors[name].data += 0.05 * prng.standard_normal(
                    params.tensors[name].shape)

        rng = np.random.default_rng(32)
        tokens = rng.normal(size=(2, seq_len, 2))
        mask = np.array([[True, False, True, False], [False, True, True, False]])
        labels = np.array([0, 2])
        eps1 = rng.random((int(mask.sum()), cfg.d_noise)) - 0.5
        eps2 = rng.random((int(mask.sum()), cfg.d_noise)) - 0.5
        targets = tokens[mask]

        def loss_value(ps):
            emb = embed_sequence(tokens, mask, labels, ps, cfg)
            hidden = backbone_forward(emb, ps, cfg).values
            body = hidden[:, cfg.n_class_tokens:, :]
            rows = dc.gather_rows(body, mask)
            x1 = generator_forward(rows, dc.Tensor(eps1), ps, cfg)
            x2 = generator_forward(rows, dc.Tensor(eps2), ps, cfg)
            return dc.mean(energy_loss(x1, x2, dc.Tensor(targets), 1.0, 1.0))

        loss = loss_value(params)
        dc.backward(loss)

        checked = 0
        fd_rng = np.random.default_rng(33)
        for name in ("token_proj.w", "layers.0.attn.wq", "layers.1.ffn.w1",
                     "mask_token", "class_table", "gen.hidden_proj.w",
                     "gen.blocks.0.shift.w", "gen.blocks.1.ffn.w2", "gen.head.w"):
            tensor = params.tensors[name]
            flat = tensor.data.reshape(-1)
            gflat = tensor.grad.reshape(-1)
            idx = fd_rng.choice(flat.size, size=min(4, flat.size), replace=False)
            got = gflat[idx]
            want = np.zeros(len(idx))
            h = 1e-4
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_value(params).item()
                flat[i] = orig - h
                fm = loss_value(params).item()
                flat[i] = orig
                want[j] = (fp - fm) / (2 * h)
            err = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-8)
            assert err < 1e-4, f"{name}: rel err {err:.2e}"
            checked += len(idx)
        assert checked >= 30
