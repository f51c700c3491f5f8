import math

import numpy as np
import pytest

from gazerep.attnmodel import (
    BadMagicError,
    ConfigError,
    NetworkConfig,
    StageConfig,
    StemConfig,
    TruncatedCheckpointError,
    VersionMismatchError,
    attention_forward,
    build_network,
    classification_forward,
    dilate_for_attention,
    forward_features,
    load_checkpoint,
    loss_gaze,
    loss_saliency,
    loss_saliency_logits,
    mini_config,
    probe_extents,
    receptive_field,
    save_checkpoint,
    soft_argmax,
    resnext_half_config,
    undilate_for_classification,
)
from gazerep.attnmodel.config import attention_plan, plan
from gazerep.numcore import Tensor, backprop, functional as F, no_grad
from gazerep.numcore.gradcheck import numerical_grad


# -- oracles ---------------------------------------------------------------------

def extent_oracle(n, layers):
    """Output size after a list of (k, stride, dilation, padding) layers."""
    for k, s, l, p in layers:
        n = (n + 2 * p - l * (k - 1) - 1) // s + 1
    return n


def geometry_oracle(ops):
    """Receptive field size, jump and first-input offset along the main path."""
    r, j, start = 1, 1, 0.0
    for op in ops:
        start -= op.padding * j
        r += (op.k - 1) * op.dilation * j
        j *= op.stride
    return r, j, start


def random_config(rng, se=False):
    while True:
        n_stages = int(rng.integers(2, 5))
        stages = []
        for i in range(n_stages):
            block = "plain" if rng.random() < 0.4 else "bottleneck"
            groups = int(rng.choice([1, 2]))
            ch = int(rng.choice([4, 6, 8]))
            pool = (3, 2) if (i > 0 and rng.random() < 0.2) else None
            stride = 1 if pool else int(rng.choice([1, 2]))
            stages.append(StageConfig(f"s{i}", block, int(rng.integers(1, 3)), ch, int(rng.choice([1, 3, 3, 5])),
                                      stride, groups, 2 if se else None, pool))
        stem = StemConfig(3, 4, int(rng.choice([1, 2]))) if rng.random() < 0.5 else None
        d = sum(s.stride > 1 or (s.pool is not None) for s in stages) + (stem is not None and stem.stride > 1)
        size = 2 ** d * int(rng.integers(5, 9))
        cfg = NetworkConfig("rand", stages, (size, size + 2 ** d), 1, stem, 0, 8)
        try:
            cfg.validate()
            cfg = cfg.with_(n_dilate=int(rng.integers(0, d + 1)))
            cfg.validate()
            attention_plan(cfg)
        except ConfigError:
            continue
        return cfg


def randomize_bn(net, rng):
    for name, buf in net.buffers().items():
        if name.endswith("running_mean"):
            buf[...] = rng.normal(0, 0.2, buf.shape)
        else:
            buf[...] = rng.uniform(0.5, 2.0, buf.shape)
    for p in net.params():
        if p.name.endswith(("gamma", "beta", "bias")):
            p.data[...] = rng.normal(0.5 if p.name.endswith("gamma") else 0.0, 0.2, p.shape)


# -- configuration & geometry ------------------------------------------------------

class TestGeometry:
    def test_resnext_half_scales(self):
        cfg = resnext_half_config()
        cls = probe_extents(cfg, "classification")
        att = probe_extents(cfg, "attention")
        assert list(cls.values()) == [(112, 144), (56, 72), (28, 36), (14, 18), (7, 9)]
        assert att["layer4"] == (28, 36) and att["layer5"] == (28, 36)
        assert att["layer3"] == cls["layer3"]

    def test_mini_extents(self):
        cfg = mini_config()
        H = extent_oracle(64, [(3, 1, 1, 1)])
        s1 = extent_oracle(H, [(3, 1, 1, 1)] * 2)
        s2 = extent_oracle(s1, [(3, 2, 1, 1), (3, 1, 1, 1)])
        s3 = extent_oracle(s2, [(3, 2, 1, 1), (3, 1, 1, 1)])
        assert (s1, s2, s3) == (64, 32, 16)
        assert list(probe_extents(cfg).values()) == [(64, 80), (32, 40), (16, 20)]
        assert probe_extents(cfg, "attention")["stage3"] == (32, 40)

    def test_stem_and_pool_receptive_field(self):
        cfg = NetworkConfig("rf", [StageConfig("a", "plain", 1, 4, 7, 2), StageConfig("b", "plain", 1, 4, 1, 1, pool=(3, 2))],
                            (32, 32))
        rf = receptive_field(cfg)
        assert (rf["b"].size, rf["b"].stride) == (11, 4)
        single = NetworkConfig("one", [StageConfig("a", "plain", 1, 4, 3, 1)], (8, 8))
        assert (receptive_field(single)["a"].size, receptive_field(single)["a"].stride) == (3, 1)

    @pytest.mark.parametrize("seed", range(20))
    def test_receptive_field_invariant(self, seed):
        cfg = random_config(np.random.default_rng(seed))
        cls = receptive_field(cfg, "classification")
        att = receptive_field(cfg, "attention")
        assert [v.size for v in cls.values()] == [v.size for v in att.values()]
        main_c = [op for op in plan(cfg) if op.main]
        main_a = [op for op in attention_plan(cfg) if op.main]
        assert geometry_oracle(main_c)[0] == geometry_oracle(main_a)[0] == list(cls.values())[-1].size
        assert geometry_oracle(main_c)[2] == geometry_oracle(main_a)[2]

    def test_resnext_half_dilations(self):
        ops = {op.name: op for op in attention_plan(resnext_half_config())}
        # the removed strided conv keeps the dilation accumulated before it
        assert (ops["layer4.0.conv2"].stride, ops["layer4.0.conv2"].dilation) == (1, 1)
        assert all(ops[f"layer4.{b}.conv2"].dilation == 2 for b in range(1, 6))
        assert (ops["layer5.0.conv2"].stride, ops["layer5.0.conv2"].dilation) == (1, 2)
        assert all(ops[f"layer5.{b}.conv2"].dilation == 4 for b in range(1, 3))
        assert ops["layer5.0.shortcut"].stride == 1 and ops["layer5.0.shortcut"].dilation == 1
        assert all(op.padding == (op.k - 1) * op.dilation // 2 for op in ops.values())
        assert ops["layer3.0.conv2"].stride == 2

    @pytest.mark.parametrize("mutate, field", [
        (dict(n_dilate=5), "n_dilate"),
        (dict(stages=[StageConfig("a", "bottleneck", 1, 8, 3, 1, groups=3)]), "groups"),
        (dict(stages=[StageConfig("a", "resnet", 1, 8)]), "block"),
        (dict(stages=[StageConfig("a", "plain", 1, 8, 4)]), "kernel"),
        (dict(stages=[StageConfig("a", "plain", 1, 8, 3, 2, pool=(3, 2))]), "down-sampling"),
    ])
    def test_invalid_configs(self, mutate, field):
        with pytest.raises(ConfigError, match=field):
            mini_config().with_(**mutate).validate()

    def test_pool_after_removed_op_rejected(self):
        cfg = NetworkConfig("p", [StageConfig("a", "plain", 1, 4, 3, 2), StageConfig("b", "plain", 1, 4, 3, 1, pool=(3, 2))],
                            (16, 16), n_dilate=2)
        with pytest.raises(ConfigError, match="max pool"):
            attention_plan(cfg)

    def test_config_json_round_trip(self):
        cfg = resnext_half_config()
        assert NetworkConfig.from_json(cfg.to_json()) == cfg


# -- the dilation transform ----------------------------------------------------------

class TestTransform:
    def test_zero_dilation_is_identity(self):
        net = build_network(mini_config(n_dilate=0), seed=1)
        att = dilate_for_attention(net)
        assert att.spatial_spec() == net.spatial_spec()

    @pytest.mark.parametrize("seed", range(20))
    def test_round_trip_bit_identical(self, seed):
        rng = np.random.default_rng(seed)
        cfg = random_config(rng, se=bool(seed % 2))
        net = build_network(cfg, seed=seed, n_classes=3)
        randomize_bn(net, rng)
        back = undilate_for_classification(dilate_for_attention(net))
        assert back.spatial_spec() == net.spatial_spec()
        for (k1, a), (k2, b) in zip(net.state().items(), back.state().items()):
            assert k1 == k2 and a.tobytes() == b.tobytes()
        x = rng.standard_normal((2, 1) + tuple(cfg.input_size)).astype(np.float32)
        with no_grad():
            p1 = classification_forward(net, x).data
            p2 = classification_forward(back, x).data
        assert p1.tobytes() == p2.tobytes()

    def test_transform_does_not_alias(self):
        net = build_network(mini_config(), seed=0)
        att = dilate_for_attention(net)
        att.params()[0].data[...] = 0
        assert np.abs(net.params()[0].data).sum() > 0
        with pytest.raises(ValueError):
            dilate_for_attention(att)
        with pytest.raises(ValueError):
            undilate_for_classification(net)

    @pytest.mark.parametrize("seed", range(10))
    def test_a_trous_equivalence(self, seed):
        rng = np.random.default_rng(100 + seed)
        cfg = random_config(rng)
        net = build_network(cfg, seed=seed, dtype=np.float64)
        randomize_bn(net, rng)
        att = dilate_for_attention(net)
        x = rng.standard_normal((1, 1) + tuple(cfg.input_size))
        with no_grad():
            fc = forward_features(net, x)
            fa = forward_features(att, x)
        rc, ra = receptive_field(cfg, "classification"), receptive_field(cfg, "attention")
        H, W = cfg.input_size
        checked = 0
        for stage, stage_ops in _main_ops_by_stage(cfg).items():
            step = rc[stage].stride // ra[stage].stride
            r, j, start = geometry_oracle(stage_ops)
            a = fa[stage].data[0][:, ::step, ::step]
            c = fc[stage].data[0]
            assert a.shape == c.shape
            qi = np.arange(c.shape[1])
            qj = np.arange(c.shape[2])
            ok_i = (start + qi * j >= 0) & (start + qi * j + r - 1 <= H - 1)
            ok_j = (start + qj * j >= 0) & (start + qj * j + r - 1 <= W - 1)
            if ok_i.any() and ok_j.any():
                diff = np.abs(a - c)[:, ok_i][:, :, ok_j].max()
                assert diff < 1e-5, (stage, diff)
                checked += 1
        assert checked >= 1


def _main_ops_by_stage(cfg):
    """Cumulative classification-mode main-path ops up to each stage end."""
    ops = [op for op in plan(cfg) if op.main]
    out, acc = {}, []
    for i, op in enumerate(ops):
        acc.append(op)
        if op.stage != "stem" and (i + 1 == len(ops) or ops[i + 1].stage != op.stage):
            out[op.stage] = list(acc)
    return out


# -- forward passes ------------------------------------------------------------------

class TestForward:
    def test_zero_input_zero_features(self):
        net = build_network(mini_config(), seed=0)
        with no_grad():
            feats = forward_features(net, np.zeros((1, 64, 80), np.float32))
        assert all(not f.data.any() for f in feats.values())
        assert [f.shape[-2:] for f in feats.values()] == list(probe_extents(mini_config()).values())

    def test_eval_deterministic_and_stats_untouched(self):
        net = build_network(mini_config(), seed=0, n_classes=4)
        x = np.random.default_rng(0).standard_normal((2, 1, 64, 80)).astype(np.float32)
        before = {k: v.copy() for k, v in net.state().items()}
        with no_grad():
            a = classification_forward(net, x).data
            b = classification_forward(net, x).data
        assert a.tobytes() == b.tobytes()
        assert all(np.array_equal(before[k], v) for k, v in net.state().items())
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_final_layer_uniform(self):
        net = build_network(mini_config(), seed=0, n_classes=5)
        net.classification_head.out.weight.data[...] = 0
        with no_grad():
            p = classification_forward(net, np.ones((1, 64, 80), np.float32)).data
        np.testing.assert_allclose(p, 0.2, atol=1e-7)

    def test_attention_output(self):
        net = dilate_for_attention(build_network(mini_config(), seed=3))
        x = np.random.default_rng(1).standard_normal((2, 1, 64, 80)).astype(np.float32)
        with no_grad():
            A, S = attention_forward(net, x)
            net.attention_head.out.bias.data += 3.7
            _, S2 = attention_forward(net, x)
        assert A.shape == (2, 32, 40)  # 64 / 2^(2 - 1)
        np.testing.assert_allclose(S.data.sum(axis=(1, 2)), 1.0, atol=1e-6)
        assert S.data.min() > 0
        assert np.abs(S.data - S2.data).max() < 1e-6

    def test_shape_mismatch(self):
        net = build_network(mini_config(), seed=0)
        with pytest.raises(ValueError, match="does not match"):
            forward_features(net, np.zeros((1, 32, 40), np.float32))

    def test_missing_head(self):
        net = build_network(mini_config(), seed=0)
        with pytest.raises(ValueError, match="head"):
            classification_forward(net, np.zeros((1, 64, 80), np.float32))


# -- soft-argmax and losses ---------------------------------------------------------

class TestSoftArgmax:
    def test_one_hot_corner(self):
        S = np.zeros((4, 4))
        S[0, 0] = 1
        np.testing.assert_allclose(soft_argmax(Tensor(S), 32, 32).data, [4, 4])

    def test_uniform_center(self):
        np.testing.assert_allclose(soft_argmax(Tensor(np.full((7, 9), 1 / 63)), 56, 72).data, [36, 28], atol=1e-12)

    def test_two_cells(self):
        S = np.zeros((4, 4))
        S[0, 0] = S[3, 3] = 0.5
        np.testing.assert_allclose(soft_argmax(Tensor(S), 32, 32).data, [16, 16])

    def test_strictly_inside(self):
        rng = np.random.default_rng(0)
        A = Tensor(rng.normal(0, 30, (3, 5, 6)))
        p = soft_argmax(F.softmax_spatial(A), 40, 48).data
        assert ((p > 0) & (p < [48, 40])).all()

    def test_head_gradient_matches_finite_differences(self):
        cfg = NetworkConfig("tiny", [StageConfig("a", "plain", 1, 4, 3, 2)], (8, 10), 1, None, 1, 4)
        net = dilate_for_attention(build_network(cfg, seed=0, dtype=np.float64))
        x = np.random.default_rng(0).standard_normal((1, 1, 8, 10))
        target = np.array([[3.0, 6.5]])

        def loss():
            A, S = attention_forward(net, x)
            return loss_gaze(target, soft_argmax(S, 8, 10))

        params = net.head_params("attention")
        rng = np.random.default_rng(1)
        for p in params:  # move pre-activations off the ReLU kink at exactly zero
            if p.name.endswith("bias"):
                p.data[...] = rng.normal(0, 0.3, p.shape)
        L = loss()
        backprop(L, params)
        for p in params:
            num = numerical_grad(lambda: loss().item(), p.data, 1e-6)
            err = np.linalg.norm(p.grad - num) / max(np.linalg.norm(num), np.linalg.norm(p.grad), 1e-12)
            assert err < 1e-4, p.name


class TestLosses:
    def test_kld_examples(self):
        assert loss_saliency(np.array([[0.5, 0.5]]), Tensor(np.array([[0.5, 0.5]]))).item() == 0
        v = loss_saliency(np.array([[0.5, 0.5]]), Tensor(np.array([[0.25, 0.75]]))).item()
        assert abs(v - 0.5 * math.log(4 / 3)) < 1e-12
        assert abs(v - 0.14384) < 1e-5

    def test_kld_zero_target_entries(self):
        v = loss_saliency(np.array([[1.0, 0.0]]), Tensor(np.array([[0.5, 0.5]]))).item()
        assert abs(v - math.log(2)) < 1e-12

    def test_gibbs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            t = rng.dirichlet(np.ones(12)).reshape(3, 4)
            A = Tensor(rng.normal(0, 2, (3, 4)))
            v = loss_saliency(t, F.softmax_spatial(A)).item()
            w = loss_saliency_logits(t, A).item()
            assert v >= 0 and w >= 0 and abs(v - w) < 1e-9

    def test_batch_mean(self):
        t = np.stack([np.full((2, 2), 0.25), np.array([[0.7, 0.1], [0.1, 0.1]])])
        A = Tensor(np.zeros((2, 2, 2)))
        both = loss_saliency_logits(t, A).item()
        one = loss_saliency_logits(t[1], Tensor(np.zeros((2, 2)))).item()
        assert abs(both - one / 2) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_saliency(np.ones((2, 2)) / 4, Tensor(np.ones((2, 3)) / 6))

    def test_gaze(self):
        assert loss_gaze([0.0, 0.0], Tensor(np.array([0.0, 0.0]))).item() == 0
        assert loss_gaze([0.0, 0.0], Tensor(np.array([3.0, 4.0]))).item() == 5
        p = Tensor(np.array([[3.0, 4.0], [1.0, 1.0]]), requires_grad=True)
        L = loss_gaze(np.array([[0.0, 0.0], [1.0, 1.0]]), p)
        assert L.item() == 2.5
        L.backward()
        np.testing.assert_allclose(p.grad[0], [0.3, 0.4])  # unit vector / batch of 2
        np.testing.assert_array_equal(p.grad[1], [0, 0])

    def test_gaze_unit_gradient(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(0, 10, 2)
            t = rng.normal(0, 10, 2)
            p = Tensor(a.copy(), requires_grad=True)
            loss_gaze(t, p).backward()
            num = numerical_grad(lambda: loss_gaze(t, Tensor(p.data)).item(), p.data, 1e-6)
            assert abs(np.linalg.norm(num) - 1) < 1e-6
            np.testing.assert_allclose(p.grad, num, atol=1e-6)


# -- checkpoints ------------------------------------------------------------------------

class TestCheckpoint:
    def make(self):
        net = build_network(mini_config(), seed=5, n_classes=3)
        randomize_bn(net, np.random.default_rng(0))
        return dilate_for_attention(net)

    def test_round_trip(self, tmp_path):
        net = self.make()
        save_checkpoint(net, tmp_path / "a.gazm", {"epoch": 3})
        back, meta = load_checkpoint(tmp_path / "a.gazm")
        save_checkpoint(back, tmp_path / "b.gazm", {"epoch": 3})
        assert (tmp_path / "a.gazm").read_bytes() == (tmp_path / "b.gazm").read_bytes()
        assert meta == {"epoch": 3} and back.mode == "attention" and back.config == net.config
        x = np.random.default_rng(0).standard_normal((1, 1, 64, 80)).astype(np.float32)
        with no_grad():
            assert attention_forward(net, x)[1].data.tobytes() == attention_forward(back, x)[1].data.tobytes()

    def test_errors_are_distinct(self, tmp_path):
        save_checkpoint(self.make(), tmp_path / "a.gazm")
        raw = bytearray((tmp_path / "a.gazm").read_bytes())
        bad = tmp_path / "bad.gazm"
        bad.write_bytes(b"GAZX" + raw[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(bad)
        bad.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
        with pytest.raises(VersionMismatchError):
            load_checkpoint(bad)
        bad.write_bytes(raw[:8] + (len(raw) * 2).to_bytes(4, "little") + raw[12:])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(bad)
        bad.write_bytes(raw[:-10])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(bad)
