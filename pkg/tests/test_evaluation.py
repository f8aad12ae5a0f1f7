import numpy as np
import pytest
from conftest import small_cnn
from scipy import stats

from prunegrad.curves import EvalCurve, RoarTable
from prunegrad.data import channel_means, generate_shapes
from prunegrad.evaluation import (_retrain_cell, cascading_randomization, pixel_perturbation_curve, roar,
                                  roar_masks, spearman)
from prunegrad.models import build_model, init_weights, resnet8_spec
from prunegrad.trainer import TrainConfig


def rank_difference_rho(a, b):
    """Textbook formula, valid for tie-free data."""
    ra = np.argsort(np.argsort(a)) + 1
    rb = np.argsort(np.argsort(b)) + 1
    d = ra - rb
    n = len(a)
    return 1 - 6 * np.sum(d * d) / (n * (n * n - 1))


class TestSpearman:
    def test_examples(self):
        assert spearman([1, 2, 3], [1, 2, 3]).rho == pytest.approx(1.0, abs=1e-12)
        assert spearman([1, 2, 3], [3, 2, 1]).rho == pytest.approx(-1.0, abs=1e-12)
        assert spearman([3, 1, 2], [1, 2, 3]).rho == pytest.approx(-0.5, abs=1e-12)
        assert rank_difference_rho(np.array([3, 1, 2]), np.array([1, 2, 3])) == -0.5

    def test_against_independent_routes(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.normal(size=30), rng.normal(size=30)
            rho = spearman(a, b).rho
            assert rho == pytest.approx(rank_difference_rho(a, b), abs=1e-12)
            assert rho == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-12)

    def test_ties_match_scipy(self):
        a = np.array([1, 1, 2, 3, 3, 3, 4.0])
        b = np.array([2, 1, 1, 5, 4, 4, 0.0])
        assert spearman(a, b).rho == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-12)

    def test_absolute_variant(self):
        a = np.array([-3.0, 1.0, 2.0])
        b = np.array([3.0, 1.0, 2.0])
        assert spearman(a, b).rho == pytest.approx(-0.5)
        assert spearman(a, b, absolute=True).rho == pytest.approx(1.0)

    def test_degenerate(self):
        assert spearman([0, 0, 0], [1, 2, 3]) == (0.0, True)
        assert spearman([1, 2, 3], [1, 2, 3]).degenerate is False

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            spearman([1], [1])


@pytest.fixture(scope="module")
def small_setup():
    model = small_cnn(seed=2, size=16, classes=10)
    images = generate_shapes(5, 12, 16).images
    return model, images


class TestCascading:
    def test_depth_zero_is_one(self, small_setup):
        model, images = small_setup
        for method in ("vanilla", "guided_backprop", "prunegrad", "gradcam", "random"):
            kw = {"sparsity": 0.5} if method == "prunegrad" else {}
            rows = cascading_randomization(model, images[:4], method, [0], method_kwargs=kw)
            assert rows[0]["spearman"] == pytest.approx(1.0, abs=1e-12), method
            assert rows[0]["abs_spearman"] == pytest.approx(1.0, abs=1e-12), method

    def test_random_control_independent(self):
        model = small_cnn(seed=0, size=16, classes=10)
        images = generate_shapes(3, 50, 16).images
        full = len(model.param_layers)
        r = cascading_randomization(model, images, "random", [full])[0]
        assert abs(r["spearman"]) < 0.2
        assert r["abs_spearman"] < 0.2

    def test_rows_and_statistics(self, small_setup):
        model, images = small_setup
        rows = cascading_randomization(model, images[:3], "vanilla", [0, 1, 4])
        assert [r["depth"] for r in rows] == [0, 1, 4]
        for r in rows:
            assert set(r) == {"method", "depth", "spearman", "abs_spearman", "spearman_signed"}
            assert r["abs_spearman"] >= abs(r["spearman"]) - 1e-12

    def test_model_not_modified(self, small_setup):
        model, images = small_setup
        before = {k: v.copy() for k, v in model.params.items()}
        cascading_randomization(model, images[:2], "vanilla", [3])
        assert all(np.array_equal(before[k], model.params[k]) for k in before)


class TestPixelPerturbation:
    def test_anchors(self, small_setup):
        model, images = small_setup
        fill = np.array([0.5, 0.4, 0.3])
        fr = np.linspace(0, 1, 11)
        curves = {m: pixel_perturbation_curve(model, images, m, fr, fill,
                                              {"sparsity": 0.5} if m == "prunegrad" else {})
                  for m in ("vanilla", "prunegrad", "random")}
        base = model.forward(images)
        t = base.argmax(axis=1)
        f0 = base[np.arange(len(images)), t]
        filled = model.forward(np.broadcast_to(fill[None, :, None, None], images.shape))
        expected = np.abs(filled[np.arange(len(images)), t] - f0) / np.abs(f0)
        for c in curves.values():
            assert c.y[0] == 0.0
            np.testing.assert_allclose(c.traces[:, -1], expected, rtol=1e-12)
        ends = [c.y[-1] for c in curves.values()]
        assert max(ends) - min(ends) <= 1e-9

    def test_uses_supplied_maps(self, small_setup):
        model, images = small_setup
        maps = np.random.default_rng(0).random((len(images), 16, 16))
        a = pixel_perturbation_curve(model, images, "custom", [0, 0.5], 0.5, maps=maps)
        b = pixel_perturbation_curve(model, images, "custom", [0, 0.5], 0.5, maps=maps)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.meta["order"] == "ascending"

    def test_unsorted_fractions_rejected(self, small_setup):
        model, images = small_setup
        with pytest.raises(ValueError):
            pixel_perturbation_curve(model, images, "vanilla", [0.5, 0.1], 0.5)


class TestRoar:
    def setup_method(self):
        self.train = generate_shapes(0, 48, 8)
        self.test = generate_shapes(1, 24, 8, split="test")
        self.spec = resnet8_spec((3, 8, 8), 10, widths=(4, 4, 4))
        self.base = init_weights(build_model(self.spec), 0)
        self.cfg = TrainConfig(epochs=1, batch_size=16)

    def test_table_and_random_control(self):
        seen = []
        table = roar(self.train, self.test, self.spec, ["vanilla"], [0.5], 2, self.cfg,
                     self.base, on_cell=lambda *a: seen.append(a))
        assert {k[0] for k in table.entries} == {"vanilla", "random"}
        assert len(table.entries) == 4 and len(seen) == 4
        assert all(0 <= v <= 1 for v in table.entries.values())

    def test_perturbed_sets_have_expected_mask_counts(self):
        fill = channel_means(self.train)
        captured = {}

        def grab(m, p, tr, te):
            captured[(m, p)] = (tr, te)

        roar(self.train, self.test, self.spec, ["vanilla"], [0.3], 1, self.cfg, self.base,
             on_perturbed=grab, include_random=False)
        tr, te = captured[("vanilla", 0.3)]
        k = int(np.floor(0.3 * 64 + 0.5))
        for orig, pert in ((self.train, tr), (self.test, te)):
            filled = np.all(pert.images == fill[None, :, None, None], axis=1)
            changed = np.any(pert.images != orig.images, axis=1)
            assert np.all(filled.sum(axis=(1, 2)) >= k)
            assert np.all(changed.sum(axis=(1, 2)) <= k)
            np.testing.assert_array_equal(pert.labels, orig.labels)

    def test_percentile_zero_equals_plain_retraining(self):
        table = roar(self.train, self.test, self.spec, ["vanilla"], [0.0], 1, self.cfg,
                     self.base, include_random=False)
        plain = _retrain_cell((self.spec, self.train, self.test, self.cfg, self.cfg.seed))
        assert table.entries[("vanilla", 0.0, 0)] == plain

    def test_resume_skips_done_cells(self):
        done = {("vanilla", 0.5, 0): 0.123, ("random", 0.5, 0): 0.456}
        calls = []
        table = roar(self.train, self.test, self.spec, ["vanilla"], [0.5], 1, self.cfg,
                     self.base, done=done, on_cell=lambda *a: calls.append(a),
                     on_perturbed=lambda *a: calls.append(a))
        assert calls == []
        assert table.entries == done

    def test_missing_base_model(self):
        with pytest.raises(ValueError, match="base model"):
            roar(self.train, self.test, self.spec, ["vanilla"], [0.5], 1, self.cfg)

    def test_parallel_matches_serial(self):
        a = roar(self.train, self.test, self.spec, ["vanilla"], [0.5], 2, self.cfg, self.base,
                 include_random=False, workers=1)
        b = roar(self.train, self.test, self.spec, ["vanilla"], [0.5], 2, self.cfg, self.base,
                 include_random=False, workers=2)
        assert a.entries == b.entries

    def test_masks_count_and_nesting(self):
        maps = np.random.default_rng(0).random((3, 32, 32))
        prev = None
        for p in (0.1, 0.3, 0.5, 0.7, 0.9):
            m = roar_masks(maps, p)
            assert np.all(m.sum(axis=(1, 2)) == int(np.floor(p * 1024 + 0.5)))
            if prev is not None:
                assert np.all(m | ~prev)  # prev is a subset of m
            prev = m


class TestContainers:
    def test_curve_validation(self):
        with pytest.raises(ValueError):
            EvalCurve([0, 0], [1, 2])
        with pytest.raises(ValueError):
            EvalCurve([0, 1], [1])

    def test_auc(self):
        assert EvalCurve([0, 0.5, 1], [0, 1, 1]).auc() == pytest.approx(0.75)

    def test_table_validation(self):
        t = RoarTable((0.1, 0.5), 2)
        t.add("a", 0.1, 1, 0.5)
        with pytest.raises(ValueError):
            t.add("a", 0.2, 0, 0.5)
        with pytest.raises(ValueError):
            t.add("a", 0.1, 2, 0.5)
        with pytest.raises(ValueError):
            t.add("a", 0.1, 0, 1.5)
        assert t.mean("a", 0.1) == 0.5
        assert t.rows() == [("a", 0.1, 1, 0.5)]
