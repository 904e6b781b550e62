import numpy as np
import pytest

from balign.alignment import (FIVE_POINT_INDICES, METHOD_NAMES, AlignmentMethod,
                              AlignWeights, LossReport, MethodContext, Template,
                              anme, compute_fixed_template, lmk_loss, load_template,
                              method_warp, reg_loss, save_template, total_loss,
                              warp_template)
from balign.autodiff import Tensor
from balign.errors import DegenerateInputError
from balign.geometry import AffineTransform, LandmarkSet
from balign.sampler import Image


def anme_oracle(stacks, eye_indices):
    """Direct transcription: per-landmark spread over corpus mean, normalized
    by mean inter-pupil distance."""
    n, s, _ = stacks.shape
    mean = stacks.mean(axis=0)
    total = 0.0
    for i in range(n):
        for k in range(s):
            total += np.sqrt(((stacks[i, k] - mean[k]) ** 2).sum())
    d = 0.0
    a, b = eye_indices
    for i in range(n):
        d += np.sqrt(((stacks[i, a] - stacks[i, b]) ** 2).sum())
    d /= n
    return total / (n * s) / d


class TestAnme:
    def test_matches_oracle_on_random_corpora(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            s = int(rng.integers(3, 20))
            pts = rng.uniform(-0.9, 0.9, (n, s, 2))
            eyes = tuple(rng.choice(s, size=2, replace=False).tolist())
            assert anme(pts, eyes) == pytest.approx(
                anme_oracle(pts, eyes), abs=1e-12)

    def test_two_sample_hand_value(self):
        # Two samples, landmark 2 split by 1.0 around its mean, eyes 1.0 apart:
        # spread = 0.5 for that landmark in both samples, so
        # anme = (0.5 + 0.5) / (2 samples * 3 landmarks) / 1.0 = 1/6.
        a = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
        b = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
        assert anme(np.stack([a, b]), (0, 1)) == pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_identical_sets_give_zero(self):
        pts = np.random.default_rng(1).uniform(-0.5, 0.5, (1, 7, 2))
        corpus = np.repeat(pts, 5, axis=0)
        assert anme(corpus, (0, 1)) == 0.0

    def test_landmark_set_input(self):
        rng = np.random.default_rng(2)
        sets = [LandmarkSet(rng.uniform(-0.5, 0.5, (6, 2))) for _ in range(4)]
        stacked = np.stack([s.points for s in sets])
        assert anme(sets) == pytest.approx(anme_oracle(stacked, (0, 1)), abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.4, 0.4, (6, 8, 2))
        assert anme(pts, (0, 1)) == pytest.approx(anme(pts * 2.0, (0, 1)), abs=1e-12)

    def test_degenerate_interpupil_raises(self):
        pts = np.zeros((3, 4, 2))
        pts[:, 2:, 0] = 1.0   # eyes 0 and 1 coincide everywhere
        with pytest.raises(DegenerateInputError):
            anme(pts, (0, 1))

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            anme(np.zeros((1, 5, 2)), (0, 1))

    def test_mismatched_sets_rejected(self):
        a = LandmarkSet(np.zeros((4, 2)) + [[0, 0], [1, 0], [0, 1], [1, 1]])
        b = LandmarkSet(np.array([[0.0, 0], [1, 0], [0, 1]]))
        with pytest.raises(ValueError):
            anme([a, b])


class TestTemplate:
    def test_round_trip(self, tmp_path):
        t = Template(np.array([[0.1, -0.2], [0.3, 0.4]]), learnable=True)
        save_template(tmp_path / "t.json", t)
        back = load_template(tmp_path / "t.json")
        assert back.learnable
        np.testing.assert_allclose(back.points, t.points, atol=1e-9)

    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            Template(np.array([[1.2, 0.0]]))

    def test_subset(self):
        t = Template(np.arange(10, dtype=float).reshape(5, 2) / 10.0)
        sub = t.subset([0, 2])
        np.testing.assert_array_equal(sub.points, t.points[[0, 2]])

    def test_fixed_template_is_frontal_mean(self):
        class Rec:
            def __init__(self, yaw, pts):
                self.yaw_proxy = yaw
                self.landmarks = LandmarkSet(pts)

        rng = np.random.default_rng(4)
        base = rng.uniform(-0.5, 0.5, (6, 2))
        recs = [Rec(5.0, base + 0.01), Rec(-10.0, base - 0.01), Rec(40.0, base + 5e5 * 1e-6)]
        t = compute_fixed_template(recs, "dense")
        np.testing.assert_allclose(t.points, base, atol=1e-12)
        five = compute_fixed_template(recs, "five-point")
        assert len(five) == 5


class TestWeightsAndLosses:
    def test_alpha_starts_at_half(self):
        w = AlignWeights(8)
        np.testing.assert_allclose(w.values(), 0.5)
        assert w.learnable

    def test_from_alpha_round_trip(self):
        w = AlignWeights.from_alpha(0.73, 5)
        np.testing.assert_allclose(w.values(), 0.73, atol=1e-12)
        with pytest.raises(ValueError):
            AlignWeights.from_alpha(1.0, 3)

    def test_reg_loss_value_and_grad(self):
        w = AlignWeights.from_alpha(0.25, 4, learnable=True)
        loss = reg_loss(w)
        assert float(loss.data) == pytest.approx(4 * 0.75 ** 2, abs=1e-12)
        loss.backward()
        # d/draw (1-sig)^2 = -2(1-sig)*sig*(1-sig)
        sig = 0.25
        expected = -2.0 * (1 - sig) * sig * (1 - sig)
        np.testing.assert_allclose(w.raw.grad, expected, atol=1e-12)

    def test_lmk_loss_hand_value(self):
        # Two landmarks, one sample: distances 1.0 and 0.5, alphas 0.5 each,
        # plus a nose landmark to satisfy the set; loss = mean(alpha*d).
        warped = np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]]])
        gt = np.array([[[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]])
        w = AlignWeights(3, learnable=False)
        val = float(lmk_loss(Tensor(warped), gt, w).data)
        assert val == pytest.approx(0.5 * (1.0 + 0.0 + 0.5) / 3.0, abs=1e-6)

    def test_lmk_loss_weights_scale_per_landmark(self):
        rng = np.random.default_rng(5)
        warped = rng.uniform(-0.5, 0.5, (4, 6, 2))
        gt = rng.uniform(-0.5, 0.5, (4, 6, 2))
        alphas = rng.uniform(0.2, 0.8, 6)
        w = AlignWeights.from_alpha(alphas, 6)
        d = np.sqrt(((warped - gt) ** 2).sum(axis=2) + 1e-16)
        expected = (d * alphas).sum() / (4 * 6)
        assert float(lmk_loss(Tensor(warped), gt, w).data) == pytest.approx(expected, rel=1e-9)

    def test_lmk_loss_gradient_flows_to_weights(self):
        rng = np.random.default_rng(6)
        warped = Tensor(rng.uniform(-0.5, 0.5, (2, 4, 2)), requires_grad=True)
        gt = rng.uniform(-0.5, 0.5, (2, 4, 2))
        w = AlignWeights(4)
        lmk_loss(warped, gt, w).backward()
        assert w.raw.grad is not None and np.all(np.isfinite(w.raw.grad))
        assert warped.grad is not None and warped.grad.shape == (2, 4, 2)

    def test_total_loss_identities(self):
        rep = total_loss(1.0, 0.2, 0.1, 3.0)
        assert rep.l_align == pytest.approx(0.3)
        assert rep.total == pytest.approx(1.9)
        rep0 = total_loss(1.7, 0.4, 0.2, 0.0)
        assert rep0.total == pytest.approx(1.7)
        with pytest.raises(ValueError):
            total_loss(1.0, 0.1, 0.1, -1.0)

    def test_loss_report_validation(self):
        with pytest.raises(ValueError):
            LossReport(1.0, -0.1, 0.0, -0.1, 0.9, 1.0)
        with pytest.raises(ValueError):
            LossReport(np.nan, 0.0, 0.0, 0.0, 0.0, 0.0)


def five_point_template():
    return Template(np.array([[-0.3, -0.3], [0.3, -0.3], [0.0, 0.0],
                              [-0.2, 0.3], [0.2, 0.3]]))


class TestMethods:
    def test_method_names_catalogue(self):
        assert METHOD_NAMES == ("none", "affine2d", "stn-proj", "stn-tps-2",
                                "stn-tps-8", "full-align")
        for name in METHOD_NAMES:
            m = AlignmentMethod.parse(name)
            assert m.cli_name == name

    def test_parse_grid_size(self):
        m = AlignmentMethod.parse("stn-tps-6")
        assert m.kind == "stn-tps" and m.grid_size == 6
        with pytest.raises(ValueError):
            AlignmentMethod.parse("affine3d")
        with pytest.raises(ValueError):
            AlignmentMethod("affine2d", grid_size=4)

    def test_none_returns_input_landmarks(self):
        rng = np.random.default_rng(7)
        gt = LandmarkSet(rng.uniform(-0.5, 0.5, (7, 2)))
        img = Image(rng.uniform(-1, 1, (8, 8)))
        grid, deformed = method_warp(AlignmentMethod.parse("none"), img, gt,
                                     MethodContext())
        assert grid is None
        np.testing.assert_array_equal(deformed.points, gt.points)

    def test_full_align_lands_exactly_on_template(self):
        rng = np.random.default_rng(8)
        template = Template(rng.uniform(-0.5, 0.5, (9, 2)))
        ctx = MethodContext(template_dense=template)
        img = Image(rng.uniform(-1, 1, (8, 8)))
        corpora = []
        for _ in range(4):
            gt = LandmarkSet(template.points + rng.normal(0, 0.1, (9, 2)))
            grid, deformed = method_warp(AlignmentMethod.parse("full-align"),
                                         img, gt, ctx)
            assert grid.coords.shape == (8, 8, 2)
            corpora.append(deformed)
        assert anme(corpora) < 1e-6

    def test_full_align_grid_maps_template_to_gt(self):
        # The dense grid discretizes the exact TPS; at 64x64 the bilinear
        # interpolation error of a mild warp stays in the percent range.
        rng = np.random.default_rng(9)
        template = Template(rng.uniform(-0.4, 0.4, (8, 2)) * 0.9)
        gt = LandmarkSet(template.points + rng.normal(0, 0.05, (8, 2)))
        ctx = MethodContext(template_dense=template)
        img = Image(rng.uniform(-1, 1, (64, 64)))
        grid, _ = method_warp(AlignmentMethod.parse("full-align"), img, gt, ctx)
        np.testing.assert_allclose(grid.evaluate(template.points), gt.points,
                                   atol=2e-2)

    def test_affine2d_uses_five_points_and_reduces_anme(self):
        rng = np.random.default_rng(10)
        base = five_point_template()
        extra = rng.uniform(-0.5, 0.5, (4, 2))
        tpl_pts = np.concatenate([base.points, extra])
        ctx = MethodContext(template_five=base)
        img = Image(rng.uniform(-1, 1, (8, 8)))
        method = AlignmentMethod.parse("affine2d")
        raw, aligned = [], []
        for _ in range(6):
            rot = rng.uniform(-0.5, 0.5)
            c, s = np.cos(rot), np.sin(rot)
            m = AffineTransform(np.array([[c, -s, rng.uniform(-0.1, 0.1)],
                                          [s, c, rng.uniform(-0.1, 0.1)]]))
            gt = LandmarkSet(m.apply(tpl_pts))
            _, deformed = method_warp(method, img, gt, ctx)
            raw.append(gt)
            aligned.append(deformed)
        assert anme(aligned) < anme(raw)
        # pure similarity poses of the template land the five points exactly
        np.testing.assert_allclose(aligned[0].points[list(FIVE_POINT_INDICES)],
                                   base.points, atol=1e-9)
