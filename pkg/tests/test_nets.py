"""Network building blocks: ops, layers, AM-softmax, SGD, checkpoints."""

import numpy as np
import pytest

from balign import nets
from balign.autodiff import Tensor
from balign.errors import DegenerateInputError, OptimizerStateError
from balign.geometry import pixel_centers
from balign.nets import (AmSoftmaxConfig, BatchNorm1d, BatchNorm2d,
                         SGD, SpatialAvgPool, am_softmax_loss, batch_norm,
                         build_locnet, build_recnet, conv2d, global_avg_pool,
                         l2_normalize_rows, linear, load_checkpoint,
                         lr_at_epoch, margin_cross_entropy, save_checkpoint)
from balign.stn import TpsWarper


def fd_grad(fn, arr, h=1e-6):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = fn()
        flat[i] = keep - h
        lo = fn()
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_against_fd(out, leaves, fns, rtol=1e-5, atol=1e-7):
    out.backward()
    for leaf, fn in zip(leaves, fns):
        np.testing.assert_allclose(leaf.grad, fd_grad(fn, leaf.data),
                                   rtol=rtol, atol=atol)


class TestConv2d:
    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.empty((2, 4, 5, 5))
        for n in range(2):
            for co in range(4):
                for i in range(5):
                    for j in range(5):
                        want[n, co, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[co]).sum() + b[co]
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_stride_two_halves_resolution(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(np.zeros(3))
        assert conv2d(x, w, b, stride=2).data.shape == (1, 3, 4, 4)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        probe = rng.normal(size=(2, 3, 2, 2))

        def loss():
            return float((conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data),
                                 stride=2).data * probe).sum())

        out = (conv2d(x, w, b, stride=2) * Tensor(probe)).sum()
        check_against_fd(out, [x, w, b], [loss, loss, loss])


class TestBatchNorm:
    def test_standardizes_per_channel(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)))
        out, mu, var = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                                  axes=(0, 2, 3))
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
        np.testing.assert_allclose(mu, x.data.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(var, x.data.var(axis=(0, 2, 3)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        gamma = Tensor(rng.normal(1.0, 0.2, size=2), requires_grad=True)
        beta = Tensor(rng.normal(size=2), requires_grad=True)
        probe = rng.normal(size=(3, 2, 3, 3))

        def loss():
            y, _, _ = batch_norm(Tensor(x.data), Tensor(gamma.data),
                                 Tensor(beta.data), axes=(0, 2, 3))
            return float((y.data * probe).sum())

        y, _, _ = batch_norm(x, gamma, beta, axes=(0, 2, 3))
        check_against_fd((y * Tensor(probe)).sum(), [x, gamma, beta],
                         [loss, loss, loss], rtol=1e-4, atol=1e-6)

    def test_running_stats_track_batches(self):
        bn = BatchNorm2d(2)
        rng = np.random.default_rng(5)
        x = rng.normal(1.5, 2.0, size=(8, 2, 4, 4))
        bn.forward(Tensor(x))
        want_mean = 0.1 * x.mean(axis=(0, 2, 3))
        want_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(bn.running_mean, want_mean)
        np.testing.assert_allclose(bn.running_var, want_var)

    def test_eval_mode_uses_running_stats(self):
        bn = BatchNorm1d(3)
        bn.running_mean = np.array([1.0, -1.0, 0.5])
        bn.running_var = np.array([4.0, 1.0, 0.25])
        bn.set_training(False)
        x = np.array([[1.0, -1.0, 0.5], [3.0, 0.0, 1.0]])
        out = bn.forward(Tensor(x)).data
        want = (x - bn.running_mean) / np.sqrt(bn.running_var + nets.BN_EPS)
        np.testing.assert_allclose(out, want)


class TestPooling:
    def test_global_pool_is_spatial_mean(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 4, 5))
        out = global_avg_pool(Tensor(x)).data
        np.testing.assert_allclose(out, x.mean(axis=(2, 3)))

    def test_global_pool_gradient(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
        global_avg_pool(x).sum().backward()
        np.testing.assert_allclose(x.grad, np.full((1, 2, 2, 2), 0.25))

    def test_spatial_pool_on_divisible_map(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 8))
        out = SpatialAvgPool(4).forward(Tensor(x)).data
        assert out.shape == (2, 48)
        cells = x.reshape(2, 3, 4, 2, 4, 2).mean(axis=(3, 5))
        np.testing.assert_allclose(out, cells.reshape(2, 48))

    def test_spatial_pool_small_map_keeps_width(self):
        x = np.arange(2.0 * 2 * 2 * 2).reshape(2, 2, 2, 2)
        out = SpatialAvgPool(4).forward(Tensor(x)).data
        assert out.shape == (2, 2 * 16)
        cells = out.reshape(2, 2, 4, 4)
        # Cells beyond the map clamp to the last row/column of real cells.
        for i in (2, 3):
            np.testing.assert_allclose(cells[:, :, i, :], cells[:, :, 1, :])
            np.testing.assert_allclose(cells[:, :, :, i], cells[:, :, :, 1])
        np.testing.assert_allclose(cells[:, :, 0, 0], x[:, :, 0, 0])

    def test_spatial_pool_gradient(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        probe = rng.normal(size=(1, 32))

        def loss():
            return float((SpatialAvgPool(4).forward(Tensor(x.data)).data * probe).sum())

        out = (SpatialAvgPool(4).forward(x) * Tensor(probe)).sum()
        check_against_fd(out, [x], [loss])


class TestLinearAndNormalize:
    def test_linear_matches_matmul(self):
        rng = np.random.default_rng(9)
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
        out = linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, x @ w.T + b)

    def test_row_normalization_and_gradient(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        probe = rng.normal(size=(3, 4))
        y = l2_normalize_rows(x)
        np.testing.assert_allclose((y.data ** 2).sum(axis=1), 1.0, atol=1e-12)

        def loss():
            return float((l2_normalize_rows(Tensor(x.data)).data * probe).sum())

        check_against_fd((y * Tensor(probe)).sum(), [x], [loss])

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize_rows(Tensor(np.array([[0.0, 0.0], [1.0, 0.0]])))


def am_softmax_oracle(emb, weights, labels, margin, scale):
    """Loop transcription of additive-margin softmax cross-entropy."""
    total = 0.0
    for row, label in zip(emb, labels):
        e = row / np.linalg.norm(row)
        cos = np.array([e @ (w / np.linalg.norm(w)) for w in weights])
        z = scale * cos
        z[label] = scale * (cos[label] - margin)
        total += np.log(np.exp(z - z.max()).sum()) + z.max() - z[label]
    return total / len(labels)


class TestAmSoftmax:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        emb = rng.normal(size=(8, 6))
        weights = rng.normal(size=(5, 6))
        labels = rng.integers(0, 5, size=8)
        loss = am_softmax_loss(Tensor(emb), Tensor(weights), labels,
                               AmSoftmaxConfig(margin=0.35, scale=64.0, class_count=5))
        want = am_softmax_oracle(emb, weights, labels, 0.35, 64.0)
        assert abs(float(loss.data) - want) <= 1e-12

    def test_margin_raises_loss_on_true_class(self):
        rng = np.random.default_rng(12)
        emb = rng.normal(size=(4, 5))
        weights = rng.normal(size=(3, 5))
        labels = np.array([0, 1, 2, 0])
        base = am_softmax_loss(Tensor(emb), Tensor(weights), labels,
                               AmSoftmaxConfig(margin=0.0, scale=10.0, class_count=3))
        pushed = am_softmax_loss(Tensor(emb), Tensor(weights), labels,
                                 AmSoftmaxConfig(margin=0.4, scale=10.0, class_count=3))
        assert float(pushed.data) > float(base.data)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        emb = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        weights = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        labels = rng.integers(0, 3, size=5)
        cfg = AmSoftmaxConfig(margin=0.35, scale=8.0, class_count=3)

        def loss():
            return float(am_softmax_loss(Tensor(emb.data), Tensor(weights.data),
                                         labels, cfg).data)

        out = am_softmax_loss(emb, weights, labels, cfg)
        check_against_fd(out, [emb, weights], [loss, loss], rtol=1e-4, atol=1e-8)

    def test_label_validation(self):
        emb = Tensor(np.ones((2, 3)))
        weights = Tensor(np.eye(3))
        cfg = AmSoftmaxConfig(class_count=3)
        with pytest.raises(ValueError):
            am_softmax_loss(emb, weights, [0], cfg)
        with pytest.raises(ValueError):
            am_softmax_loss(emb, weights, [0, 7], cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AmSoftmaxConfig(margin=1.0)
        with pytest.raises(ValueError):
            AmSoftmaxConfig(scale=0.0)

    def test_plain_cross_entropy_value(self):
        cos = Tensor(np.array([[0.9, 0.1]]))
        loss = margin_cross_entropy(cos, np.array([0]), margin=0.0, scale=1.0)
        want = np.log(np.exp(0.9) + np.exp(0.1)) - 0.9
        assert abs(float(loss.data) - want) <= 1e-12


class TestLocNet:
    def test_zero_init_head_outputs_zeros(self):
        net = build_locnet(grid_size=4, seed=3)
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(2, 1, 32, 32)))
        out = net.forward(x)
        assert np.array_equal(out.data, np.zeros((2, 32)))

    def test_zero_init_head_gives_identity_grid(self):
        net = build_locnet(grid_size=4, seed=5)
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(3, 1, 32, 32)))
        offsets = net.forward(x).reshape((3, 16, 2))
        grid = TpsWarper(4, 32, 32).grid(offsets)
        identity = pixel_centers(32, 32).reshape(32, 32, 2)
        for sample in grid.data:
            assert np.array_equal(sample, identity)

    def test_head_dim_defaults_to_lattice_size(self):
        assert build_locnet(grid_size=3).config["head_dim"] == 18
        assert build_locnet(grid_size=4, head_dim=9).config["head_dim"] == 9

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            build_locnet(grid_size=1)
        with pytest.raises(ValueError):
            build_locnet(grid_size=4, pool="avg")

    def test_spatial_pool_variant_output_shape(self):
        net = build_locnet(grid_size=2, seed=0, pool="spatial")
        x = Tensor(np.random.default_rng(16).normal(size=(2, 1, 32, 32)))
        assert net.forward(x).data.shape == (2, 8)

    def test_output_gain_scales_head(self):
        cfg = dict(grid_size=4, seed=9)
        a = build_locnet(output_gain=0.1, **cfg)
        b = build_locnet(output_gain=0.2, **cfg)
        for (_, pa), (_, pb) in zip(a.named_params(), b.named_params()):
            pa.data[...] = np.random.default_rng(17).normal(size=pa.data.shape)
            pb.data[...] = pa.data
        x = Tensor(np.random.default_rng(18).normal(size=(1, 1, 16, 16)))
        np.testing.assert_allclose(b.forward(x).data, 2.0 * a.forward(x).data)

    def test_output_bound_caps_offsets(self):
        net = build_locnet(grid_size=2, head_dim=8, seed=3, output_bound=0.45)
        x = Tensor(np.random.default_rng(21).normal(size=(2, 1, 16, 16)))
        # Zero-init head still starts exactly at zero offsets.
        assert np.array_equal(net.forward(x).data, np.zeros((2, 8)))
        net.head.weight.data[:] = 50.0
        out = net.forward(x).data
        assert np.abs(out).max() <= 0.45
        assert np.abs(out).max() > 0.4

    def test_output_bound_near_linear_when_small(self):
        cfg = dict(grid_size=2, head_dim=8, seed=4)
        a = build_locnet(**cfg)
        b = build_locnet(output_bound=0.45, **cfg)
        for (_, pa), (_, pb) in zip(a.named_params(), b.named_params()):
            pa.data[...] = np.random.default_rng(22).normal(size=pa.data.shape) * 0.01
            pb.data[...] = pa.data
        x = Tensor(np.random.default_rng(23).normal(size=(1, 1, 16, 16)))
        np.testing.assert_allclose(b.forward(x).data, a.forward(x).data, atol=1e-6)

    def test_output_bound_must_be_positive(self):
        with pytest.raises(ValueError):
            build_locnet(grid_size=2, output_bound=0.0)


class TestRecNet:
    def test_embedding_shape(self):
        net = build_recnet(embedding_dim=16, channels=(4, 8), seed=0)
        x = Tensor(np.random.default_rng(19).normal(size=(3, 1, 32, 32)))
        assert net.forward(x).data.shape == (3, 16)

    def test_stage0_keeps_resolution(self):
        net = build_recnet(embedding_dim=8, channels=(4, 8), seed=0)
        x = Tensor(np.random.default_rng(20).normal(size=(2, 1, 24, 24)))
        fmap = net.stage0_tap(x)
        assert fmap.data.shape == (2, 4, 24, 24)
        full = net.forward(Tensor(x.data))
        via_tap = net.forward_from_stage0(net.stage0_tap(Tensor(x.data)))
        assert via_tap.data.shape == full.data.shape

    def test_same_seed_same_parameters(self):
        a = build_recnet(embedding_dim=8, channels=(4, 8), seed=7)
        b = build_recnet(embedding_dim=8, channels=(4, 8), seed=7)
        c = build_recnet(embedding_dim=8, channels=(4, 8), seed=8)
        for (na, pa), (_, pb), (_, pc) in zip(a.named_params(), b.named_params(),
                                              c.named_params()):
            assert np.array_equal(pa.data, pb.data), na
            if "conv" in na and na.endswith("weight"):
                assert not np.array_equal(pa.data, pc.data), na

    def test_embedding_dim_validated(self):
        with pytest.raises(ValueError):
            build_recnet(embedding_dim=1)

    def test_residual_variant_runs(self):
        net = build_recnet(embedding_dim=4, channels=(2, 4), seed=1, residual=True)
        x = Tensor(np.random.default_rng(21).normal(size=(2, 1, 16, 16)))
        assert net.forward(x).data.shape == (2, 4)
        names = [n for n, _ in net.named_params()]
        assert any("res" in n for n in names)


class TestSGD:
    def test_two_steps_match_hand_update(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)

        p.grad = np.array([0.5, -0.5])
        v = np.array([0.5, -0.5]) + 0.01 * np.array([1.0, 2.0])
        want = np.array([1.0, 2.0]) - 0.1 * v
        opt.step()
        np.testing.assert_allclose(p.data, want)

        p.grad = np.array([0.1, 0.1])
        v = 0.9 * v + np.array([0.1, 0.1]) + 0.01 * want
        want = want - 0.1 * v
        opt.step()
        np.testing.assert_allclose(p.data, want)

    def test_step_requires_gradients(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = SGD([p], lr=0.1)
        with pytest.raises(OptimizerStateError):
            opt.step()

    def test_gradients_cleared_after_step(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = SGD([p], lr=0.1)
        p.grad = np.ones(2)
        opt.step()
        assert p.grad is None

    def test_negative_hyperparameters_rejected(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        with pytest.raises(ValueError):
            SGD([p], lr=-0.1)


class TestLrSchedule:
    def test_drop_boundaries_for_twenty_epochs(self):
        base = 0.05
        assert lr_at_epoch(base, 0, 20) == base
        assert lr_at_epoch(base, 10, 20) == base
        assert lr_at_epoch(base, 11, 20) == pytest.approx(base * 0.1)
        assert lr_at_epoch(base, 14, 20) == pytest.approx(base * 0.1)
        assert lr_at_epoch(base, 15, 20) == pytest.approx(base * 0.01)
        assert lr_at_epoch(base, 18, 20) == pytest.approx(base * 0.01)
        assert lr_at_epoch(base, 19, 20) == pytest.approx(base * 0.001)

    def test_floor_rule_on_odd_totals(self):
        assert lr_at_epoch(1.0, 5, 10) == pytest.approx(0.1)
        assert lr_at_epoch(1.0, 4, 10) == 1.0


class TestCheckpoints:
    def test_round_trip_restores_arrays(self, tmp_path):
        rng = np.random.default_rng(22)
        tensors = {"a.weight": Tensor(rng.normal(size=(3, 2))),
                   "b.running_mean": rng.normal(size=4)}
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, {"kind": "test", "n": 3}, tensors)
        config, loaded = load_checkpoint(path)
        assert config == {"kind": "test", "n": 3}
        assert set(loaded) == {"a.weight", "b.running_mean"}
        for name in loaded:
            src = tensors[name]
            arr = src.data if isinstance(src, Tensor) else src
            np.testing.assert_allclose(loaded[name], arr, atol=1e-6)
            assert loaded[name].shape == arr.shape

    def test_restored_network_reproduces_eval_outputs(self, tmp_path):
        net = build_recnet(embedding_dim=8, channels=(4, 8), seed=2)
        x = Tensor(np.random.default_rng(23).normal(size=(2, 1, 16, 16)))
        net.forward(x)  # move running stats off their init
        net.set_training(False)
        want = net.forward(x).data

        path = tmp_path / "rec.bin"
        save_checkpoint(path, net.config,
                        dict(net.named_params()) | dict(net.named_buffers()))
        config, tensors = load_checkpoint(path)
        fresh = build_recnet(embedding_dim=config["embedding_dim"],
                             channels=config["channels"], seed=99)
        for name, param in fresh.named_params():
            param.data[...] = tensors[name]
        for name, buf in fresh.named_buffers():
            buf[...] = tensors[name]
        fresh.set_training(False)
        np.testing.assert_allclose(fresh.forward(x).data, want, atol=1e-5)
