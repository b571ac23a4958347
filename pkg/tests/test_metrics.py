import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import mini_config
from drc.errors import NumericalFailure, UsageError
from drc.metrics import ScoreReport, best_permutation_score, binarize, dice, evaluate_run, iou, score_masks
from drc.synth_data import ImageFolderDataset
from drc.trainer import DRC


def masks_dataset(n=6, size=8, seed=0):
    rng = np.random.default_rng(seed)
    masks = rng.uniform(size=(n, size, size)) < 0.3
    # channel 0 encodes the mask so stubs can read it back from the images
    images = np.repeat(np.where(masks, 1.0, -1.0)[:, None], 3, axis=1).astype(np.float32)
    return ImageFolderDataset(images, masks, [f"{i:05d}" for i in range(n)])


class PerfectStub:
    def infer_pi_f(self, images, steps, seed=0):
        return (np.asarray(images)[:, 0] > 0).astype(np.float64)


class InvertedStub:
    def infer_pi_f(self, images, steps, seed=0):
        return (np.asarray(images)[:, 0] < 0).astype(np.float64)


class FailingStub:
    def infer_pi_f(self, images, steps, seed=0):
        if seed >= 4:
            raise NumericalFailure("chain blew up", step=3)
        return np.zeros((len(images), 8, 8))


class Steps:
    test_steps = 3


class TestBinarize:
    def test_cases(self):
        assert binarize(np.ones((3, 3))).all()
        assert not binarize(np.full((3, 3), 0.5), 0.5).any()
        assert binarize(np.full((2, 2), 1e-9), 0.0).all()
        assert binarize(np.array([0.2, 0.7])).tolist() == [False, True]


class TestOverlap:
    def test_identical(self):
        a = np.zeros((4, 4), bool)
        a[1:3, 1:3] = True
        assert iou(a, a) == 1.0 and dice(a, a) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
        a[0], b[3] = True, True
        assert iou(a, b) == 0.0 and dice(a, b) == 0.0

    def test_hand_counts(self):
        a, b = np.zeros((1, 6), bool), np.zeros((1, 6), bool)
        a[0, :4] = True
        b[0, 2:] = True
        assert iou(a, b) == pytest.approx(2 / 6, abs=1e-15)
        assert dice(a, b) == 0.5

    def test_empty_pair(self):
        e = np.zeros((3, 3), bool)
        assert iou(e, e) == 1.0 and dice(e, e) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            iou(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(UsageError):
            dice(np.zeros((2, 2)), np.zeros((3, 2)))
        with pytest.raises(UsageError):
            best_permutation_score((np.zeros((2, 2)), np.zeros((2, 2))), np.zeros((3, 3)))

    def test_dice_iou_identity_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = rng.uniform(0.05, 0.95)
            a, b = rng.uniform(size=(2, 12, 12)) < p
            j = iou(a, b)
            assert abs(dice(a, b) - 2 * j / (1 + j)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
    def test_properties(self, seed, pa, pb):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(9, 9)) < pa, rng.uniform(size=(9, 9)) < pb
        j, d = iou(a, b), dice(a, b)
        assert 0 <= j <= d <= 1
        assert j == iou(b, a) and d == dice(b, a)


class TestPermutation:
    def test_cases(self):
        gt = np.zeros((4, 4), bool)
        gt[:2] = True
        assert best_permutation_score((gt, ~gt), gt) == (1.0, 0)
        assert best_permutation_score((~gt, gt), gt) == (1.0, 1)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_swap_flips_index(self, seed):
        rng = np.random.default_rng(seed)
        gt, p = rng.uniform(size=(2, 6, 6)) < 0.4
        q = rng.uniform(size=(6, 6)) < 0.7
        s1, k1 = best_permutation_score((p, q), gt)
        s2, k2 = best_permutation_score((q, p), gt)
        assert s1 == s2
        if iou(p, gt) != iou(q, gt):
            assert k1 == 1 - k2


class TestReports:
    def test_means_are_arithmetic(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(size=(20, 8, 8)) < 0.3
        pred = rng.uniform(size=(20, 8, 8))
        r = score_masks(pred, gt)
        assert abs(r.mean_iou - sum(r.iou) / 20) < 1e-9 and abs(r.mean_dice - sum(r.dice) / 20) < 1e-9

    def test_write(self, tmp_path):
        r = ScoreReport(["a", "b"], [0.5, 1.0], [2 / 3, 1.0], config={"seed": 0})
        r.write(tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["n"] == 2 and data["mean_iou"] == 0.75 and data["config"] == {"seed": 0}
        rows = list(csv.reader(open(tmp_path / "report.csv")))
        assert rows[0] == ["id", "iou", "dice"] and rows[1][0] == "a" and len(rows) == 3


class TestEvaluateRun:
    def test_perfect_stub(self):
        r = evaluate_run(PerfectStub(), masks_dataset(), Steps(), batch_size=4)
        assert r.mean_iou == 1.0 and r.mean_dice == 1.0 and r.n == 6

    def test_inverted_stub(self):
        ds = masks_dataset()
        assert evaluate_run(InvertedStub(), ds, Steps()).mean_iou == 0.0
        r = evaluate_run(InvertedStub(), ds, Steps(), permute=True)
        assert r.mean_iou == 1.0 and r.config["mode"] == "best_permutation"

    def test_needs_masks(self):
        ds = masks_dataset()
        with pytest.raises(UsageError):
            evaluate_run(PerfectStub(), ImageFolderDataset(ds.images, None, ds.names), Steps())

    def test_error_names_sample(self):
        with pytest.raises(NumericalFailure) as info:
            evaluate_run(FailingStub(), masks_dataset(), Steps(), batch_size=4)
        assert info.value.sample == 4 and "sample 4" in str(info.value)

    def test_trained_model_is_deterministic_and_untouched(self):
        cfg = mini_config()
        torch.manual_seed(0)
        model = DRC(cfg).double()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        ds = masks_dataset()
        a = evaluate_run(model, ds, cfg.langevin, seed=3, batch_size=4)
        b = evaluate_run(model, ds, cfg.langevin, seed=3, batch_size=4)
        assert a.to_dict() == b.to_dict()
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
