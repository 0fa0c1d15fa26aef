"""Learning task: gradients, objectives, partitioning, update rule."""

import math

import numpy as np
import pytest

from otafl import learner, rng


@pytest.fixture(scope="module")
def task():
    spec = learner.ObjectiveSpec(input_dim=12, hidden=(16,), n_classes=4, reg=0.01)
    x, y = learner.make_gaussian_mixture(4, 12, 40, 2.0, seed=17)
    w = learner.init_params(spec, seed=5)
    return spec, x, y, w


def single_dataset(x, y, owner=0):
    return learner.LocalDataset(x=x, y=y, owner=owner, indices=np.arange(len(y)))


class TestGradients:
    def test_finite_differences(self, task):
        spec, x, y, w = task
        _, grad = learner.loss_and_grad(spec, w, x, y)
        gen = np.random.default_rng(0)
        eps = 1e-6
        for i in gen.choice(spec.dim, 10, replace=False):
            wp, wm = w.copy(), w.copy()
            wp[i] += eps
            wm[i] -= eps
            fd = (learner.loss_value(spec, wp, x, y) - learner.loss_value(spec, wm, x, y)) / (2 * eps)
            assert abs(fd - grad[i]) <= 1e-5 * max(abs(fd), 1e-8)

    def test_linear_softmax_hand_oracle(self):
        # zero hidden layers: gradient has the textbook softmax regression form
        spec = learner.ObjectiveSpec(input_dim=4, hidden=(), n_classes=3, reg=0.05)
        w = learner.init_params(spec, seed=9)
        gen = np.random.default_rng(1)
        x = gen.standard_normal((1, 4))
        y = np.array([2])
        _, grad = learner.loss_and_grad(spec, w, x, y)
        weight = w[:12].reshape(4, 3)
        bias = w[12:]
        logits = x @ weight + bias
        p = np.exp(logits - logits.max())
        p /= p.sum()
        delta = p.copy()
        delta[0, 2] -= 1.0
        hand = np.concatenate([(x.T @ delta + 0.05 * weight).ravel(), delta[0] + 0.05 * bias])
        assert np.max(np.abs(hand - grad)) <= 1e-10

    def test_full_batch_is_deterministic(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        g1 = learner.local_gradient(spec, w, ds, len(ds), g_max=10.0)
        g2 = learner.local_gradient(spec, w, ds, len(ds), g_max=10.0)
        assert np.array_equal(g1, g2)

    def test_clipping_contract(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        g = learner.local_gradient(spec, w, ds, len(ds), g_max=0.01)
        assert np.linalg.norm(g) <= 0.01 * (1 + 1e-12)
        # and the clip actually bites for such a tiny bound
        assert np.linalg.norm(g) == pytest.approx(0.01, rel=1e-9)

    def test_minibatch_is_unbiased(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        full = learner.local_gradient(spec, w, ds, len(ds), g_max=100.0)
        gen = rng.stream(3, purpose=rng.MINIBATCH)
        draws = np.stack([
            learner.local_gradient(spec, w, ds, 16, g_max=100.0, generator=gen)
            for _ in range(10 ** 4)])
        deviation = draws.mean(axis=0) - full
        # aggregate norm against its standard error, plus a fixed projection
        se_sq = np.sum(draws.var(axis=0, ddof=1)) / draws.shape[0]
        assert float(deviation @ deviation) <= 9 * se_sq
        direction = np.random.default_rng(5).standard_normal(spec.dim)
        direction /= np.linalg.norm(direction)
        proj = draws @ direction
        proj_se = proj.std(ddof=1) / math.sqrt(draws.shape[0])
        assert abs(proj.mean() - full @ direction) <= 3 * proj_se

    def test_batch_size_validated(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        with pytest.raises(ValueError):
            learner.local_gradient(spec, w, ds, 0, g_max=1.0)
        with pytest.raises(ValueError):
            learner.local_gradient(spec, w, ds, len(ds) + 1, g_max=1.0)


class TestGlobalGradient:
    def test_single_device(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        assert np.array_equal(learner.global_gradient(spec, w, [ds], 10.0),
                              learner.local_gradient(spec, w, ds, len(ds), 10.0))

    def test_identical_datasets(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        stacked = learner.global_gradient(spec, w, [ds, ds, ds], 10.0)
        assert stacked == pytest.approx(learner.local_gradient(spec, w, ds, len(ds), 10.0),
                                        rel=1e-14)

    def test_three_device_mean(self, task):
        spec, x, y, w = task
        parts = [single_dataset(x[i::3], y[i::3], owner=i) for i in range(3)]
        manual = np.mean([learner.local_gradient(spec, w, ds, len(ds), 10.0) for ds in parts],
                         axis=0)
        assert np.array_equal(learner.global_gradient(spec, w, parts, 10.0), manual)


class TestSgdStep:
    def test_zero_estimate_fixed_point(self):
        w = np.array([1.0, -2.0])
        assert np.array_equal(learner.sgd_step(w, np.zeros(2), 0.5), w)

    def test_unit_step(self):
        w = np.zeros(3)
        e1 = np.array([1.0, 0.0, 0.0])
        assert np.array_equal(learner.sgd_step(w, e1, 1.0), -e1)

    def test_requires_positive_eta(self):
        with pytest.raises(ValueError):
            learner.sgd_step(np.zeros(2), np.zeros(2), 0.0)

    def test_composition_with_noiseless_single_device_round(self, task):
        # one device, always active, no noise: the update is plain gradient
        # descent scaled by gamma/alpha
        from otafl import channel, link
        spec, x, y, w = task
        ds = single_dataset(x, y)
        net = channel.NetworkConfig(lam=np.array([1.0]), e_s=1.0, n0=0.0,
                                    d=spec.dim, g_max=10.0)
        design = link.make_design(np.array([0.2]), net)
        g = learner.local_gradient(spec, w, ds, len(ds), 10.0)
        fading = channel.FadingDraw(h=np.array([50.0 + 0j]), round_index=0)
        est = link.ota_round(g[None, :], design, fading, np.zeros(spec.dim), net)
        stepped = learner.sgd_step(w, est.g_hat, 0.3)
        scale = design.gamma[0] / design.alpha
        assert stepped == pytest.approx(w - 0.3 * scale * g, rel=1e-12)


class TestObjectiveValue:
    def test_uniform_weights_identical_data(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        f1 = learner.loss_value(spec, w, x, y)
        assert learner.objective_value(spec, w, [ds, ds]) == pytest.approx(f1, rel=1e-14)

    def test_point_mass_selects_one_device(self, task):
        spec, x, y, w = task
        a = single_dataset(x[:60], y[:60])
        b = single_dataset(x[60:], y[60:], owner=1)
        fa = learner.loss_value(spec, w, a.x, a.y)
        assert learner.objective_value(spec, w, [a, b], weights=[1.0, 0.0]) == \
            pytest.approx(fa, rel=1e-14)

    def test_weighted_sum_oracle(self, task):
        spec, x, y, w = task
        parts = [single_dataset(x[i::4], y[i::4], owner=i) for i in range(4)]
        gen = np.random.default_rng(7)
        raw = gen.uniform(0.1, 1.0, size=4)
        weights = raw / raw.sum()
        manual = sum(p * learner.loss_value(spec, w, ds.x, ds.y)
                     for p, ds in zip(weights, parts))
        assert learner.objective_value(spec, w, parts, weights) == pytest.approx(manual, rel=1e-14)

    def test_off_simplex_rejected(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        with pytest.raises(ValueError):
            learner.objective_value(spec, w, [ds, ds], weights=[0.6, 0.6])

    def test_uniform_weighted_equals_unweighted(self, task):
        spec, x, y, w = task
        parts = [single_dataset(x[i::2], y[i::2], owner=i) for i in range(2)]
        assert learner.objective_value(spec, w, parts) == \
            learner.objective_value(spec, w, parts, weights=[0.5, 0.5])


class TestKappa:
    def test_identical_datasets_zero(self, task):
        spec, x, y, w = task
        ds = single_dataset(x, y)
        assert learner.estimate_kappa(spec, w, [ds, ds, ds], 10.0) == pytest.approx(0.0, abs=1e-13)

    def test_worst_case_bound(self, task):
        spec, x, y, w = task
        parts = [single_dataset(x[y == c], y[y == c], owner=c) for c in range(4)]
        g_max = 0.5
        assert learner.estimate_kappa(spec, w, parts, g_max) <= 2 * g_max + 1e-12

    def test_opposite_gradients_formula(self):
        g = np.array([3.0, 4.0, 0.0])
        assert learner.kappa_from_gradients(np.stack([g, -g])) == pytest.approx(5.0, rel=1e-14)


class TestPartition:
    def test_balanced_double_coverage(self):
        y = np.repeat(np.arange(10), 50)
        assignments, label_map = learner.partition_noniid(y, 10, 2, seed=0)
        counts = {c: 0 for c in range(10)}
        for labels in label_map:
            assert len(set(labels)) == 2
            for lab in labels:
                counts[lab] += 1
        assert all(v == 2 for v in counts.values())
        sizes = {len(a) for a in assignments}
        assert sizes == {50}
        all_idx = np.concatenate(assignments)
        assert len(np.unique(all_idx)) == len(all_idx)

    def test_single_coverage(self):
        y = np.repeat(np.arange(10), 30)
        assignments, label_map = learner.partition_noniid(y, 5, 2, seed=1)
        counts = {}
        for labels in label_map:
            for lab in labels:
                counts[lab] = counts.get(lab, 0) + 1
        assert all(v == 1 for v in counts.values())
        assert {len(a) for a in assignments} == {60}

    def test_infeasible_single_device(self):
        y = np.repeat(np.arange(10), 5)
        with pytest.raises(ValueError):
            learner.partition_noniid(y, 1, 2, seed=0)

    def test_too_many_devices_rejected(self):
        y = np.repeat(np.arange(4), 5)
        with pytest.raises(ValueError):
            learner.partition_noniid(y, 5, 2, seed=0)

    def test_deterministic_given_seed(self):
        y = np.repeat(np.arange(10), 20)
        a1, _ = learner.partition_noniid(y, 10, 2, seed=3)
        a2, _ = learner.partition_noniid(y, 10, 2, seed=3)
        for u, v in zip(a1, a2):
            assert np.array_equal(u, v)

    def test_labels_match_assignment(self):
        y = np.repeat(np.arange(6), 10)
        assignments, label_map = learner.partition_noniid(y, 6, 2, seed=2)
        for idx, labels in zip(assignments, label_map):
            assert set(y[idx]) == set(labels)


class TestNonConvexity:
    def test_relu_objective_violates_convexity_somewhere(self, task):
        spec, x, y, _ = task
        ds = single_dataset(x, y)
        gen = np.random.default_rng(12)
        found = False
        for _ in range(300):
            w1 = gen.standard_normal(spec.dim)
            w2 = gen.standard_normal(spec.dim)
            lam = gen.uniform(0.2, 0.8)
            mid = learner.objective_value(spec, lam * w1 + (1 - lam) * w2, [ds])
            chord = lam * learner.objective_value(spec, w1, [ds]) \
                + (1 - lam) * learner.objective_value(spec, w2, [ds])
            if mid > chord + 1e-9:
                found = True
                break
        assert found, "no convexity violation found; task may be convex"


class TestDataPlumbing:
    def test_split_is_stratified_and_disjoint(self):
        x, y = learner.make_gaussian_mixture(5, 8, 40, 2.0, seed=4)
        (tx, ty), (sx, sy) = learner.split_train_test(x, y, 0.2, seed=4)
        assert len(ty) + len(sy) == len(y)
        for c in range(5):
            assert np.sum(sy == c) == 8
        assert len(np.intersect1d(tx[:, 0], sx[:, 0])) == 0

    def test_file_roundtrip(self, tmp_path):
        x, y = learner.make_gaussian_mixture(3, 4, 10, 1.0, seed=6)
        npz = tmp_path / "data.npz"
        np.savez(npz, x=x, y=y)
        lx, ly = learner.load_feature_label_file(str(npz))
        assert np.array_equal(lx, x) and np.array_equal(ly, y)
        csv = tmp_path / "data.csv"
        np.savetxt(csv, np.column_stack([x, y]), delimiter=",")
        cx, cy = learner.load_feature_label_file(str(csv))
        assert cx == pytest.approx(x) and np.array_equal(cy, y)

    def test_init_is_seeded_and_scaled(self):
        spec = learner.ObjectiveSpec(input_dim=100, hidden=(50,), n_classes=10)
        w1 = learner.init_params(spec, seed=8)
        w2 = learner.init_params(spec, seed=8)
        w3 = learner.init_params(spec, seed=9)
        assert np.array_equal(w1, w2)
        assert not np.array_equal(w1, w3)
        first_layer = w1[:5000].reshape(100, 50)
        assert np.std(first_layer) == pytest.approx(1 / math.sqrt(100), rel=0.05)
