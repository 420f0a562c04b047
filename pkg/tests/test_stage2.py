import numpy as np
import pytest

from gvalign import data, nn, stage1, stage2


def identity_extractor(dim):
    return nn.MlpFeatureExtractor([np.eye(dim)], [np.zeros(dim)])


def task_of(dataset, class_ids, train_by_class, task_id=0):
    return data.TaskDataset(
        task_id=task_id,
        class_ids=class_ids,
        train_by_class={c: np.asarray(v) for c, v in train_by_class.items()},
        test_by_class={c: np.asarray(v) for c, v in train_by_class.items()},
    )


def make_gv(sigma, source_class=0):
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    trace = float(np.trace(sigma))
    jitter = 1e-6 * trace / d if trace > 0 else 1e-12
    factor = np.linalg.cholesky(sigma + jitter * np.eye(d))
    return stage2.GlobalVariance(sigma, factor, jitter, source_class, 2, np.zeros(d))


def covariance_oracle(rows):
    """Two-pass unbiased covariance, one outer product at a time."""
    rows = np.asarray(rows, dtype=float)
    mean = rows.mean(axis=0)
    acc = np.zeros((rows.shape[1], rows.shape[1]))
    for r in rows:
        dev = r - mean
        acc += np.outer(dev, dev)
    return acc / (len(rows) - 1)


class TestPrototypes:
    def test_singleton_class_prototype_is_its_feature(self):
        ds = data.Dataset(samples=np.array([[2.0, -1.0]]), labels=np.array([0]))
        bank = stage2.compute_prototypes(identity_extractor(2), ds, {0: np.array([0])})
        assert np.array_equal(bank.prototypes[0], [2.0, -1.0])
        assert bank.counts[0] == 1

    def test_hand_mean(self):
        ds = data.Dataset(samples=np.array([[1.0, 3.0], [3.0, 5.0]]), labels=np.array([0, 0]))
        bank = stage2.compute_prototypes(identity_extractor(2), ds, {0: np.array([0, 1])})
        assert np.array_equal(bank.prototypes[0], [2.0, 4.0])

    def test_degenerate_clusters_give_exact_means(self):
        ds = data.make_synthetic_clusters(3, 2, separation=2.0, within_std=0.0,
                                          n_per_class=4, seed=1)
        pool = {c: ds.indices_of(c) for c in range(3)}
        bank = stage2.compute_prototypes(identity_extractor(2), ds, pool)
        for c in range(3):
            assert np.array_equal(bank.prototypes[c], ds.samples[ds.indices_of(c)][0])

    def test_empty_class_named_in_error(self):
        ds = data.Dataset(samples=np.ones((2, 2)), labels=np.array([0, 0]))
        with pytest.raises(ValueError, match="class 3"):
            stage2.compute_prototypes(identity_extractor(2), ds, {0: np.array([0, 1]), 3: np.array([])})


class TestGlobalVariance:
    def test_one_dimensional_hand_case(self):
        ds = data.Dataset(samples=np.array([[1.0], [2.0], [3.0]]), labels=np.zeros(3, dtype=int))
        ext = nn.MlpFeatureExtractor([np.eye(1)], [np.zeros(1)])
        task = task_of(ds, [0], {0: [0, 1, 2]})
        gv = stage2.estimate_global_variance(ext, ds, task)
        assert np.array_equal(gv.sigma, [[1.0]])
        assert np.array_equal(gv.source_mean, [2.0])
        assert gv.source_count == 3

    def test_two_dimensional_square_hand_case(self):
        ds = data.Dataset(
            samples=np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]),
            labels=np.zeros(4, dtype=int),
        )
        task = task_of(ds, [0], {0: [0, 1, 2, 3]})
        gv = stage2.estimate_global_variance(identity_extractor(2), ds, task)
        assert np.array_equal(gv.sigma, np.diag([4.0 / 3.0, 4.0 / 3.0]))

    def test_largest_class_wins_and_ties_take_lowest_id(self):
        rng = np.random.default_rng(2)
        ds = data.Dataset(samples=rng.normal(size=(12, 2)), labels=np.repeat([0, 1, 2], 4))
        task = task_of(ds, [0, 1, 2], {0: [0, 1, 2], 1: [4, 5, 6, 7], 2: [8, 9]})
        assert stage2.estimate_global_variance(identity_extractor(2), ds, task).source_class == 1
        tied = task_of(ds, [0, 1], {0: [0, 1, 2, 3], 1: [4, 5, 6, 7]})
        assert stage2.estimate_global_variance(identity_extractor(2), ds, tied).source_class == 0

    def test_too_few_samples_rejected(self):
        ds = data.Dataset(samples=np.ones((1, 2)), labels=np.array([0]))
        task = task_of(ds, [0], {0: [0]})
        with pytest.raises(ValueError, match="fewer than 2"):
            stage2.estimate_global_variance(identity_extractor(2), ds, task)

    def test_non_base_task_rejected(self):
        ds = data.Dataset(samples=np.ones((2, 2)), labels=np.zeros(2, dtype=int))
        task = task_of(ds, [0], {0: [0, 1]}, task_id=1)
        with pytest.raises(ValueError, match="base task"):
            stage2.estimate_global_variance(identity_extractor(2), ds, task)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            n = int(rng.integers(2, 51))
            d = int(rng.integers(1, 9))
            rows = rng.normal(scale=rng.uniform(0.1, 10.0), size=(n, d))
            ds = data.Dataset(samples=rows, labels=np.zeros(n, dtype=int))
            ext = nn.MlpFeatureExtractor([np.eye(d)], [np.zeros(d)])
            task = task_of(ds, [0], {0: np.arange(n)})
            gv = stage2.estimate_global_variance(ext, ds, task)
            oracle = covariance_oracle(rows)
            scale = max(1.0, float(np.abs(oracle).max()))
            assert np.max(np.abs(gv.sigma - oracle)) / scale < 1e-12

    def test_symmetry_psd_and_cholesky_reconstruction(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n, d = int(rng.integers(3, 30)), int(rng.integers(2, 7))
            rows = rng.normal(size=(n, d)) @ rng.normal(size=(d, d))
            ds = data.Dataset(samples=rows, labels=np.zeros(n, dtype=int))
            ext = nn.MlpFeatureExtractor([np.eye(d)], [np.zeros(d)])
            gv = stage2.estimate_global_variance(ext, ds, task_of(ds, [0], {0: np.arange(n)}))
            assert np.max(np.abs(gv.sigma - gv.sigma.T)) < 1e-9
            assert np.linalg.eigvalsh(gv.sigma).min() >= -1e-9
            target = gv.sigma + gv.jitter * np.eye(d)
            err = np.linalg.norm(gv.cholesky @ gv.cholesky.T - target, "fro")
            assert err / np.linalg.norm(target, "fro") < 1e-10

    def test_zero_variance_case(self):
        ds = data.Dataset(samples=np.tile([1.5, -2.0], (5, 1)), labels=np.zeros(5, dtype=int))
        gv = stage2.estimate_global_variance(
            identity_extractor(2), ds, task_of(ds, [0], {0: np.arange(5)})
        )
        assert np.array_equal(gv.sigma, np.zeros((2, 2)))


class TestPseudoSampling:
    def test_zero_covariance_returns_prototype_exactly(self):
        gv = make_gv(np.zeros((2, 2)))
        out = stage2.sample_pseudo_features(np.array([3.0, -1.0]), gv, 7, np.random.default_rng(0))
        assert np.array_equal(out, np.tile([3.0, -1.0], (7, 1)))

    def test_empty_draw(self):
        gv = make_gv(np.eye(2))
        out = stage2.sample_pseudo_features(np.zeros(2), gv, 0, np.random.default_rng(0))
        assert out.shape == (0, 2)

    def test_dimension_mismatch_rejected(self):
        gv = make_gv(np.eye(2))
        with pytest.raises(ValueError, match="dim"):
            stage2.sample_pseudo_features(np.zeros(3), gv, 1, np.random.default_rng(0))

    def test_deterministic_given_seed(self):
        gv = make_gv([[2.0, 0.3], [0.3, 1.0]])
        a = stage2.sample_pseudo_features(np.ones(2), gv, 50, np.random.default_rng(5))
        b = stage2.sample_pseudo_features(np.ones(2), gv, 50, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_monte_carlo_statistics(self):
        gv = make_gv(np.diag([4.0, 9.0]))
        draws = stage2.sample_pseudo_features(
            np.array([1.0, 2.0]), gv, 100_000, np.random.default_rng(6)
        )
        assert np.all(np.abs(draws.mean(axis=0) - [1.0, 2.0]) < 0.05)
        emp = covariance_oracle(draws)
        rel = np.linalg.norm(emp - gv.sigma, "fro") / np.linalg.norm(gv.sigma, "fro")
        assert rel < 0.05

    def test_scale_equivariance(self):
        rng = np.random.default_rng(7)
        rows = rng.normal(size=(20, 3))
        proto = rows.mean(axis=0)
        for scale in (2.0, 0.5):  # powers of two scale exactly through cholesky
            ds1 = data.Dataset(samples=rows, labels=np.zeros(20, dtype=int))
            ds2 = data.Dataset(samples=rows * scale, labels=np.zeros(20, dtype=int))
            ext = nn.MlpFeatureExtractor([np.eye(3)], [np.zeros(3)])
            gv1 = stage2.estimate_global_variance(ext, ds1, task_of(ds1, [0], {0: np.arange(20)}))
            gv2 = stage2.estimate_global_variance(ext, ds2, task_of(ds2, [0], {0: np.arange(20)}))
            a = stage2.sample_pseudo_features(proto, gv1, 40, np.random.default_rng(8))
            b = stage2.sample_pseudo_features(proto * scale, gv2, 40, np.random.default_rng(8))
            assert np.allclose(b, a * scale, rtol=1e-12, atol=0)


class TestAlignClassifiers:
    def align_cfg(self, **kw):
        return stage2.AlignConfig(
            learning_rate=kw.get("lr", 0.1),
            epochs=kw.get("epochs", 100),
            samples_per_class=kw.get("s", 64),
            batch_size=kw.get("bs", 128),
        )

    def proto_bank(self, protos):
        bank = stage2.ProtoBank()
        for c, p in protos.items():
            bank.prototypes[c] = np.asarray(p, dtype=float)
            bank.counts[c] = 10
        return bank

    def test_single_class_is_always_right(self):
        head = nn.ClassifierBank()
        head.append_block([0], 2, np.random.default_rng(0))
        protos = self.proto_bank({0: [1.0, -2.0]})
        gv = make_gv(np.eye(2))
        stage2.align_classifiers(head, protos, gv, self.align_cfg(epochs=5), np.random.default_rng(1))
        fresh = stage2.sample_pseudo_features(protos.prototypes[0], gv, 200, np.random.default_rng(2))
        assert np.all(np.argmax(nn.logits(head, fresh), axis=1) == 0)

    def test_well_separated_prototypes_align_to_high_accuracy(self):
        head = nn.ClassifierBank()
        head.append_block([0, 1], 2, np.random.default_rng(3))
        protos = self.proto_bank({0: [5.0, 0.0], 1: [-5.0, 0.0]})
        gv = make_gv(np.eye(2))
        stage2.align_classifiers(head, protos, gv, self.align_cfg(), np.random.default_rng(4))
        rng = np.random.default_rng(5)
        correct = total = 0
        for c in (0, 1):
            fresh = stage2.sample_pseudo_features(protos.prototypes[c], gv, 2000, rng)
            correct += int((np.argmax(nn.logits(head, fresh), axis=1) == c).sum())
            total += 2000
        assert correct / total >= 0.99

    def test_zero_initialized_class_recovers_its_prototype(self):
        from sklearn.linear_model import LogisticRegression

        rng = np.random.default_rng(6)
        head = nn.ClassifierBank()
        head.append_block([0], 2, rng)    # trained class A
        head.append_block([1], 2, None)   # zero-initialized class B
        head.weights[0][0] = [4.0, 0.0]
        protos = self.proto_bank({0: [4.0, 0.0], 1: [-4.0, 0.0]})
        gv = make_gv(np.eye(2))

        stream_rng = np.random.default_rng(7)
        xs, ys = [], []
        for _ in range(100):
            for c in (0, 1):
                draw = stage2.sample_pseudo_features(protos.prototypes[c], gv, 64, stream_rng)
                xs.append(draw)
                ys.append(np.full(64, c))
        oracle = LogisticRegression(C=1e4, max_iter=2000).fit(np.concatenate(xs), np.concatenate(ys))
        assert oracle.predict([protos.prototypes[1]])[0] == 1

        stage2.align_classifiers(head, protos, gv, self.align_cfg(), np.random.default_rng(8))
        pred = np.argmax(nn.logits(head, protos.prototypes[1][None, :]), axis=1)[0]
        assert pred == 1

    def test_class_mismatch_rejected(self):
        head = nn.ClassifierBank()
        head.append_block([0, 1], 2, np.random.default_rng(0))
        protos = self.proto_bank({0: [1.0, 0.0]})
        with pytest.raises(ValueError, match="do not match"):
            stage2.align_classifiers(head, protos, make_gv(np.eye(2)),
                                     self.align_cfg(epochs=1), np.random.default_rng(1))

    def test_row_layout_unchanged(self):
        head = nn.ClassifierBank()
        head.append_block([0, 1], 2, np.random.default_rng(0))
        head.append_block([2], 2, np.random.default_rng(1))
        offsets = dict(head.class_offsets)
        protos = self.proto_bank({0: [1.0, 0.0], 1: [0.0, 1.0], 2: [-1.0, 0.0]})
        stage2.align_classifiers(head, protos, make_gv(np.eye(2)),
                                 self.align_cfg(epochs=3), np.random.default_rng(2))
        assert head.class_offsets == offsets
        assert [w.shape for w in head.weights] == [(2, 2), (1, 2)]


class TestRunTask:
    def small_configs(self):
        s1 = stage1.Stage1Config(
            sgd=nn.SgdConfig(learning_rate=0.01, epochs=15, batch_size=16),
            mixup=stage1.MixupConfig(enabled=True),
        )
        s2 = stage2.AlignConfig(learning_rate=0.1, epochs=20, samples_per_class=16, batch_size=64)
        return s1, s2

    def scenario(self, num_tasks, seed=0):
        ds = data.make_synthetic_clusters(4, 3, separation=4.0, within_std=1.0,
                                          n_per_class=40, seed=seed)
        spec = data.ScenarioSpec(
            kind="conventional", base_classes=4 - num_tasks, new_classes_per_task=1,
            num_tasks=num_tasks, max_per_class=25, test_per_class=10, seed=seed,
        )
        tasks = data.build_scenario(ds, spec)
        rng = np.random.default_rng(seed)
        ext = nn.MlpFeatureExtractor.create([3, 16, 8], rng)
        model = nn.Model(ext, nn.ClassifierBank())
        state = stage2.IncrementalState(data.ExemplarBank(capacity=5))
        return ds, tasks, model, state

    def test_base_task_only_runs_the_full_sequence(self):
        ds, tasks, model, state = self.scenario(num_tasks=0)
        s1, s2 = self.small_configs()
        result = stage2.run_task(model, ds, tasks[:1], state, s1, s2, seed=0)
        assert result.task_id == 0
        assert len(result.prefix_accuracy) == 1
        assert state.global_variance is not None
        assert result.stage2_losses is not None
        assert state.next_task == 1

    def test_out_of_order_task_rejected(self):
        ds, tasks, model, state = self.scenario(num_tasks=2)
        s1, s2 = self.small_configs()
        with pytest.raises(RuntimeError, match="order"):
            stage2.run_task(model, ds, tasks[:2], state, s1, s2, seed=0)

    def test_three_task_run_populates_every_cell(self):
        ds, tasks, model, state = self.scenario(num_tasks=2)
        s1, s2 = self.small_configs()
        results = []
        for t in range(3):
            results.append(stage2.run_task(model, ds, tasks[: t + 1], state, s1, s2, seed=0))
        for t, res in enumerate(results):
            assert len(res.prefix_accuracy) == t + 1
            assert all(0.0 <= a <= 1.0 for a in res.prefix_accuracy)
            covered = {c for task in tasks[: t + 1] for c in task.class_ids}
            assert set(res.per_class_accuracy) == covered

    def test_evaluation_covers_exactly_seen_classes(self):
        ds, tasks, model, state = self.scenario(num_tasks=1)
        s1, s2 = self.small_configs()
        res0 = stage2.run_task(model, ds, tasks[:1], state, s1, s2, seed=0)
        assert set(res0.per_class_accuracy) == set(tasks[0].class_ids)
        assert model.num_classes == len(tasks[0].class_ids)

    def test_alignment_leaves_extractor_bitwise_unchanged(self):
        ds, tasks, model, state = self.scenario(num_tasks=0)
        s1, s2 = self.small_configs()
        stage2.run_task(model, ds, tasks[:1], state, s1, s2, seed=0)
        snapshot = [w.copy() for w in model.extractor.weights] + [
            b.copy() for b in model.extractor.biases
        ]
        stage2.align_classifiers(
            model.head, state.prototypes, state.global_variance, s2, np.random.default_rng(1)
        )
        current = list(model.extractor.weights) + list(model.extractor.biases)
        for before, after in zip(snapshot, current):
            assert np.array_equal(before, after)

    def test_skip_alignment_leaves_no_stage2_log(self):
        ds, tasks, model, state = self.scenario(num_tasks=0)
        s1, s2 = self.small_configs()
        result = stage2.run_task(model, ds, tasks[:1], state, s1, s2, seed=0, align=False)
        assert result.stage2_losses is None
        assert state.global_variance is None
