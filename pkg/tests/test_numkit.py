import numpy as np
import pytest

from fairdiff.numkit import (Adam, CheckpointError, DimensionError, Mlp,
                             RngStream, StaleCacheError, backward_layers,
                             bottleneck_activation, derive_seed, forward_layers,
                             gaussian_sample, init_mlp, load_mlp, matmul,
                             mlp_backward, mlp_forward, save_mlp)


def small_net(seed=0, sizes=(5, 7, 4, 3), k=2):
    return init_mlp(list(sizes), k, RngStream(seed))


class TestMatmul:
    def test_identity(self):
        m = np.arange(9, dtype=float).reshape(3, 3)
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_hand_product(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert np.array_equal(out, np.array([[3.0], [7.0]]))

    def test_zero_annihilates(self):
        m = np.ones((2, 4))
        assert np.array_equal(matmul(np.zeros((3, 2)), m), np.zeros((3, 4)))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(DimensionError):
            matmul(np.ones(3), np.ones((3, 1)))


class TestForward:
    def test_zero_parameters_give_zero_output(self):
        net = small_net()
        for w in net.weights:
            w[:] = 0.0
        for b in net.biases:
            b[:] = 0.0
        net.bump()
        out, _ = mlp_forward(net, np.ones(3), np.ones(2))
        assert np.array_equal(out, np.zeros(3))

    def test_output_layer_is_affine(self):
        # the final layer carries no activation: a lone segment is exactly Wx+b
        net = small_net()
        h = RngStream(1).standard_normal((6, net.layer_sizes[-2]))
        out, _ = forward_layers(net, h, net.n_layers - 1, net.n_layers)
        assert np.allclose(out, h @ net.weights[-1] + net.biases[-1], atol=0, rtol=0)

    def test_matches_independent_reevaluation(self):
        net = small_net(seed=9)
        x = RngStream(2).standard_normal(5)
        out, _ = mlp_forward(net, x[:3], x[3:])
        a = x.copy()
        for l in range(net.n_layers):
            z = net.weights[l].T @ a + net.biases[l]
            a = np.tanh(z) if l < net.n_layers - 1 else z
        assert np.allclose(out, a, atol=1e-12)

    def test_pure_function_of_inputs(self):
        net = small_net(seed=5)
        x = np.linspace(-1, 1, 5)
        out1, _ = mlp_forward(net, x[:3], x[3:])
        out2, _ = mlp_forward(net, x[:3], x[3:])
        assert np.array_equal(out1, out2)

    def test_width_mismatch(self):
        net = small_net()
        with pytest.raises(DimensionError):
            mlp_forward(net, np.ones(4), np.ones(4))

    def test_bottleneck_read(self):
        net = small_net()
        x = RngStream(3).standard_normal(5)
        out, cache = mlp_forward(net, x)
        h = bottleneck_activation(net, cache)
        assert h.shape == (1, net.layer_sizes[net.bottleneck_index])
        # splitting at the bottleneck reproduces the full forward
        out2, _ = forward_layers(net, h, net.bottleneck_index, net.n_layers)
        assert np.allclose(out, out2[0], atol=1e-12)


class TestBackward:
    def test_linear_squared_loss_closed_form(self):
        net = small_net()
        rng = RngStream(7)
        h = rng.standard_normal((1, net.layer_sizes[-2]))
        y = rng.standard_normal(net.layer_sizes[-1])
        out, cache = forward_layers(net, h, net.n_layers - 1, net.n_layers)
        resid = out[0] - y
        g, wg, bg = backward_layers(net, cache, 2.0 * resid[None, :])
        assert np.allclose(wg[0], 2.0 * np.outer(h[0], resid), atol=1e-12)
        assert np.allclose(bg[0], 2.0 * resid, atol=1e-12)
        assert np.allclose(g[0], net.weights[-1] @ (2.0 * resid), atol=1e-12)

    def test_zero_out_grad_gives_zero_grads(self):
        net = small_net()
        out, cache = mlp_forward(net, np.ones(3), np.ones(2))
        (wg, bg), g = mlp_backward(net, cache, np.zeros_like(out))
        assert all(np.all(w == 0) for w in wg)
        assert all(np.all(b == 0) for b in bg)
        assert np.all(g == 0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference_agreement(self, seed):
        net = small_net(seed=seed)
        rng = RngStream(100 + seed)
        x = rng.standard_normal(5)
        v = rng.standard_normal(net.output_width)  # loss = v . output
        out, cache = mlp_forward(net, x[:3], x[3:])
        (wg, bg), g = mlp_backward(net, cache, v)
        step = 1e-6

        def loss():
            o, _ = mlp_forward(net, x[:3], x[3:])
            return float(v @ o)

        worst = 0.0
        for arr, grad in list(zip(net.weights, wg)) + list(zip(net.biases, bg)):
            flat, gflat = arr.ravel(), grad.ravel()
            idx = rng.permutation(flat.shape[0])[:6]
            for i in idx:
                keep = flat[i]
                flat[i] = keep + step
                net.bump()
                up = loss()
                flat[i] = keep - step
                net.bump()
                dn = loss()
                flat[i] = keep
                net.bump()
                fd = (up - dn) / (2 * step)
                worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), 1e-10))
        assert worst < 1e-5
        # input gradient, same oracle
        out0, cache = mlp_forward(net, x[:3], x[3:])
        (_, _), g = mlp_backward(net, cache, v)
        for i in range(5):
            xp, xm = x.copy(), x.copy()
            xp[i] += step
            xm[i] -= step
            op, _ = mlp_forward(net, xp[:3], xp[3:])
            om, _ = mlp_forward(net, xm[:3], xm[3:])
            fd = float(v @ op - v @ om) / (2 * step)
            assert abs(fd - g[i]) / max(abs(fd), 1e-10) < 1e-5

    def test_stale_cache_rejected(self):
        net = small_net()
        out, cache = mlp_forward(net, np.ones(3), np.ones(2))
        net.weights[0][0, 0] += 0.5
        net.bump()
        with pytest.raises(StaleCacheError):
            mlp_backward(net, cache, np.ones_like(out))


class TestRng:
    def test_same_seed_same_draws(self):
        a = gaussian_sample(RngStream(42), 5, 3)
        b = gaussian_sample(RngStream(42), 5, 3)
        assert np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        draws = gaussian_sample(RngStream(7), 10000, 2)
        assert np.all(np.abs(draws.mean(axis=0)) < 0.05)
        assert np.all(np.abs(draws.var(axis=0) - 1.0) < 0.1)

    def test_single_row_shape(self):
        assert gaussian_sample(RngStream(0), 1, 4).shape == (1, 4)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            gaussian_sample(RngStream(0), 0, 2)

    def test_child_streams_differ(self):
        base = RngStream(1)
        a = base.child("x").standard_normal(4)
        b = base.child("y").standard_normal(4)
        assert not np.array_equal(a, b)
        assert derive_seed(1, "x") == derive_seed(1, "x")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_net(seed=11)
        path = tmp_path / "net.json"
        save_mlp(net, path)
        loaded = load_mlp(path)
        assert loaded.layer_sizes == net.layer_sizes
        assert loaded.bottleneck_index == net.bottleneck_index
        for a, b in zip(loaded.parameters(), net.parameters()):
            assert np.array_equal(a, b)

    def test_corrupted_file_names_path(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(CheckpointError, match="broken.json"):
            load_mlp(path)
        path.write_text('{"format": "other/v9"}')
        with pytest.raises(CheckpointError, match="other/v9"):
            load_mlp(path)


def test_adam_minimizes_quadratic():
    p = np.array([5.0, -3.0])
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.step([2.0 * p])
    assert np.all(np.abs(p) < 1e-3)


def test_mlp_validation():
    with pytest.raises(ValueError):
        Mlp([3, 4], [np.zeros((3, 4))], [np.zeros(4)], "tanh", bottleneck_index=1)
    with pytest.raises(DimensionError):
        init_net = init_mlp([3, 4, 2], 1, RngStream(0))
        Mlp([3, 4, 2], [np.zeros((3, 5)), init_net.weights[1]],
            [np.zeros(4), np.zeros(2)], "tanh", 1)
