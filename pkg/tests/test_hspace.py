import numpy as np
import pytest

from fairdiff.hspace import (HBankTrainConfig, HClassifierBank, HDataset,
                             SingleClassError, adp_estimate, adp_gradient,
                             adp_loss, bank_logits, build_hdataset,
                             chi_square_distance, classify_h, export_accuracy_table,
                             joint_bank, load_bank, save_bank, train_hbank)
from fairdiff.numkit import RngStream
from fairdiff.synthdata import ReferenceDistribution, sample_dataset


def toy_bank(seed=0, T=6, C=2, w=5, scale=1.0):
    rng = RngStream(seed)
    return HClassifierBank("a", scale * rng.standard_normal((T, C, w)),
                           scale * rng.standard_normal((T, C)))


def toy_hdataset(n=40, T=4, w=3, gap=4.0, seed=0):
    """Linearly separable synthetic h's: class c offset by gap along axis 0."""
    rng = RngStream(seed)
    steps = np.repeat(np.arange(T), n)
    ids = np.tile(np.arange(n), T)
    labels = np.tile(np.arange(n) % 2, T)
    h = rng.standard_normal((T * n, w)) * 0.3
    h[:, 0] += gap * (labels - 0.5)
    return HDataset(steps, h, {"a": labels}, ids)


class TestBuildDataset:
    def test_single_sample_gives_T_entries(self, tiny_denoiser, sched, world):
        data = sample_dataset(world, 1, RngStream(0))
        hd = build_hdataset(data, sched, tiny_denoiser)
        assert hd.steps.shape[0] == sched.T
        assert hd.h.shape == (sched.T, tiny_denoiser.bottleneck_width)

    def test_entry_count_is_n_times_T(self, tiny_denoiser, sched, world):
        data = sample_dataset(world, 7, RngStream(1))
        hd = build_hdataset(data, sched, tiny_denoiser)
        assert hd.h.shape[0] == 7 * sched.T
        for t in range(sched.T):
            assert hd.rows_at(t).shape[0] == 7
        for sid in range(7):
            assert (hd.sample_ids == sid).sum() == sched.T


class TestTrainBank:
    def test_default_hyperparameters(self):
        cfg = HBankTrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.epochs) == (64, 1e-3, 5)

    def test_separable_data_reaches_full_accuracy(self):
        hd = toy_hdataset()
        bank, acc = train_hbank(hd, "a", HBankTrainConfig(seed=1))
        assert np.all(acc[:, 1] == 1.0)
        assert bank.T == 4 and bank.n_classes == 2

    def test_single_class_rejected(self):
        hd = toy_hdataset()
        hd.labels["a"][:] = 1
        with pytest.raises(SingleClassError):
            train_hbank(hd, "a")

    def test_unknown_attribute(self):
        with pytest.raises(KeyError):
            train_hbank(toy_hdataset(), "missing")


class TestClassify:
    def test_zero_weights_give_uniform(self):
        bank = HClassifierBank("a", np.zeros((3, 2, 4)), np.zeros((3, 2)))
        assert np.allclose(classify_h(bank, np.ones(4), 1), [0.5, 0.5])

    def test_saturated_logits(self):
        bank = HClassifierBank("a", np.zeros((3, 2, 4)), np.zeros((3, 2)))
        bank.biases[0] = np.array([30.0, -30.0])
        probs = classify_h(bank, np.zeros(4), 0)
        assert probs[0] > 1.0 - 1e-12

    def test_matches_independent_softmax(self):
        bank = toy_bank(seed=3)
        h = RngStream(4).standard_normal(5)
        z = bank.weights[2] @ h + bank.biases[2]
        manual = np.exp(z) / np.exp(z).sum()
        assert np.allclose(classify_h(bank, h, 2), manual, atol=1e-12)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            classify_h(toy_bank(), np.zeros(5), 99)


class TestAdpEstimate:
    def test_copies_reduce_to_single_softmax(self):
        bank = toy_bank(seed=5)
        h = RngStream(6).standard_normal(5)
        batch = np.tile(h, (12, 1))
        est = adp_estimate(bank, batch, 1)
        assert np.allclose(est.probs, classify_h(bank, h, 1), atol=1e-12)
        assert est.batch_size == 12

    def test_two_saturated_rows_average_to_half(self):
        bank = HClassifierBank("a", np.zeros((2, 2, 1)), np.zeros((2, 2)))
        bank.weights[0] = np.array([[50.0], [-50.0]])
        batch = np.array([[1.0], [-1.0]])  # softmaxes ~(1,0) and ~(0,1)
        est = adp_estimate(bank, batch, 0)
        assert np.allclose(est.probs, [0.5, 0.5], atol=1e-12)

    def test_matches_bruteforce_mean(self):
        bank = toy_bank(seed=7)
        H = RngStream(8).standard_normal((100, 5))
        est = adp_estimate(bank, H, 3)
        brute = np.mean([classify_h(bank, h, 3) for h in H], axis=0)
        assert np.allclose(est.probs, brute, atol=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            adp_estimate(toy_bank(), np.empty((0, 5)), 0)

    def test_permutation_invariance(self):
        bank = toy_bank(seed=9)
        H = RngStream(10).standard_normal((30, 5))
        perm = RngStream(11).permutation(30)
        assert np.allclose(adp_estimate(bank, H, 0).probs,
                           adp_estimate(bank, H[perm], 0).probs, atol=1e-14)


class TestChiSquare:
    def test_zero_at_match(self):
        p = np.array([0.3, 0.7])
        value, grad = chi_square_distance(p, p)
        assert value == 0.0
        assert np.allclose(grad, 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = RngStream(12)
        for _ in range(20):
            p = rng.uniform(size=3) + 0.05
            p /= p.sum()
            q = rng.uniform(size=3) + 0.05
            q /= q.sum()
            _, grad = chi_square_distance(p, q)
            for i in range(3):
                dp = np.zeros(3)
                dp[i] = 1e-7
                fd = (chi_square_distance(p + dp, q)[0] - chi_square_distance(p - dp, q)[0]) / 2e-7
                assert abs(fd - grad[i]) / max(abs(fd), 1e-10) < 1e-5


class TestAdpGradient:
    def test_zero_gradient_at_reference(self):
        bank = toy_bank(seed=13)
        H = RngStream(14).standard_normal((20, 5))
        ref = adp_estimate(bank, H, 2).probs  # reference equals the estimate
        grads = adp_gradient(bank, H, 2, ref)
        assert np.all(np.abs(grads) < 1e-12)

    def test_matches_finite_differences(self):
        bank = toy_bank(seed=15)
        rng = RngStream(16)
        H = rng.standard_normal((8, 5))
        ref = np.array([0.35, 0.65])
        grads = adp_gradient(bank, H, 1, ref)
        step = 1e-6
        for i in range(H.shape[0]):
            for j in range(H.shape[1]):
                hp, hm = H.copy(), H.copy()
                hp[i, j] += step
                hm[i, j] -= step
                lp, _ = adp_loss(bank, hp, 1, ref)
                lm, _ = adp_loss(bank, hm, 1, ref)
                fd = (lp - lm) / (2 * step)
                assert abs(fd - grads[i, j]) / max(abs(fd), 1e-10) < 1e-5

    def test_saturation_kills_gradient(self):
        bank = toy_bank(seed=17)
        H = RngStream(18).standard_normal((10, 5))
        ref = np.array([0.5, 0.5])
        mild = np.linalg.norm(adp_gradient(bank, H, 0, ref))
        hot = HClassifierBank("a", bank.weights * 200.0, bank.biases * 200.0)
        saturated = np.linalg.norm(adp_gradient(hot, H, 0, ref))
        assert saturated < 1e-6 * max(mild, 1e-30)

    def test_logit_shift_invariance(self):
        bank = toy_bank(seed=19)
        H = RngStream(20).standard_normal((15, 5))
        ref = np.array([0.4, 0.6])
        shift_w = RngStream(21).standard_normal(5)
        shifted = HClassifierBank("a", bank.weights + shift_w, bank.biases + 2.5)
        assert np.allclose(classify_h(bank, H, 2), classify_h(shifted, H, 2), atol=1e-9)
        assert np.allclose(adp_estimate(bank, H, 2).probs,
                           adp_estimate(shifted, H, 2).probs, atol=1e-9)
        assert np.allclose(adp_gradient(bank, H, 2, ref),
                           adp_gradient(shifted, H, 2, ref), atol=1e-9)

    def test_reference_size_mismatch(self):
        with pytest.raises(Exception):
            adp_gradient(toy_bank(), np.ones((3, 5)), 0, np.array([0.2, 0.3, 0.5]))


class TestJointBank:
    def test_product_of_softmaxes(self):
        b1, b2 = toy_bank(seed=22), toy_bank(seed=23)
        jb = joint_bank(b1, b2)
        h = RngStream(24).standard_normal(5)
        s1 = classify_h(b1, h, 1)
        s2 = classify_h(b2, h, 1)
        expect = np.array([s1[a] * s2[b] for a in (0, 1) for b in (0, 1)])
        assert np.allclose(classify_h(jb, h, 1), expect, atol=1e-12)

    def test_requires_binary_banks(self):
        b1 = toy_bank(seed=25)
        four = HClassifierBank("j", np.zeros((6, 4, 5)), np.zeros((6, 4)))
        with pytest.raises(ValueError):
            joint_bank(b1, four)


class TestPersistence:
    def test_bank_round_trip(self, tmp_path):
        bank, acc = train_hbank(toy_hdataset(), "a", HBankTrainConfig(seed=2))
        path = tmp_path / "bank.json"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert loaded.attribute == bank.attribute
        assert np.allclose(loaded.weights, bank.weights)
        assert np.allclose(loaded.biases, bank.biases)

    def test_accuracy_table_export(self, tmp_path):
        _, acc = train_hbank(toy_hdataset(), "a", HBankTrainConfig(seed=2))
        path = tmp_path / "acc.csv"
        export_accuracy_table(acc, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,accuracy"
        assert len(lines) == acc.shape[0] + 1
