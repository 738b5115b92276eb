"""Loss semantics, optimizer behavior, and the training loop contract."""

import math

import numpy as np
import pytest

from la2 import data as D
from la2 import training as TR
from la2.model import ModelConfig, init_model, load_checkpoint
from la2.tensor import GradTape, Tensor, TensorError, backward


@pytest.fixture(scope="module")
def tiny_darcy():
    return D.generate_darcy(n=12, g=8, seed=21)


def tiny_model(ds, **kw):
    base = dict(in_channels=1, coord_channels=2, out_channels=1, k=4,
                layers=2, hidden=8, seed=3)
    base.update(kw)
    return init_model(ModelConfig(**base))


class TestRelativeL2Loss:
    def test_identical_fields(self, rng):
        t = Tensor(rng.standard_normal((6, 2)))
        for variant in TR.LOSS_VARIANTS:
            assert TR.relative_l2_loss(t, t, variant).item() == 0.0

    def test_zero_prediction_is_one(self, rng):
        t = Tensor(rng.standard_normal((6, 2)))
        z = Tensor(np.zeros((6, 2)))
        for variant in TR.LOSS_VARIANTS:
            assert TR.relative_l2_loss(z, t, variant).item() == pytest.approx(1.0)

    def test_hand_example(self):
        pred = Tensor([[3.0], [4.0]])
        target = Tensor([[3.0], [0.0]])
        root = TR.relative_l2_loss(pred, target, "root-ratio").item()
        squared = TR.relative_l2_loss(pred, target, "squared-ratio").item()
        assert root == pytest.approx(4.0 / 3.0, abs=1e-12)
        assert squared == pytest.approx(16.0 / 9.0, abs=1e-12)

    def test_zero_norm_target_rejected(self):
        with pytest.raises(TensorError):
            TR.relative_l2_loss(Tensor([[1.0]]), Tensor([[0.0]]))

    def test_scale_robustness(self, rng):
        pred = Tensor(rng.standard_normal((5, 1)))
        target = Tensor(rng.standard_normal((5, 1)))
        base = TR.relative_l2_loss(pred, target, "root-ratio").item()
        for c in (3.0, -0.25, 1e4):
            scaled = TR.relative_l2_loss(Tensor(c * pred.data),
                                         Tensor(c * target.data),
                                         "root-ratio").item()
            assert scaled == pytest.approx(base, abs=1e-12)

    def test_gradient_flows(self, rng):
        pred = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
        target = Tensor(rng.standard_normal((4, 1)))
        for variant in TR.LOSS_VARIANTS:
            with GradTape() as tape:
                loss = TR.relative_l2_loss(pred, target, variant)
                gmap = backward(loss, tape)
            assert np.isfinite(gmap[pred]).all()
            assert np.abs(gmap[pred]).max() > 0


class TestAdam:
    def cfg(self, **kw):
        base = dict(epochs=1, lr=0.1, weight_decay=0.0)
        base.update(kw)
        return TR.TrainConfig(**base)

    def test_zero_gradient_fixed_point(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        state = TR.AdamState([p])
        before = p.data.copy()
        TR.adam_step([p], [np.zeros(2)], state, self.cfg())
        assert np.array_equal(p.data, before)

    def test_first_step_magnitude(self):
        p = Tensor([0.0], requires_grad=True)
        state = TR.AdamState([p])
        TR.adam_step([p], [np.ones(1)], state, self.cfg())
        # Bias-corrected m/sqrt(v) is 1, so the step is -lr/(1+eps).
        assert p.data[0] == pytest.approx(-0.1, abs=1e-8)

    def test_decoupled_weight_decay(self):
        p = Tensor([2.0], requires_grad=True)
        state = TR.AdamState([p])
        TR.adam_step([p], [np.zeros(1)], state, self.cfg(weight_decay=0.5))
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_determinism(self, rng):
        g = rng.standard_normal(5)
        results = []
        for _ in range(2):
            p = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
            state = TR.AdamState([p])
            for _ in range(7):
                TR.adam_step([p], [g], state, self.cfg())
            results.append(p.data.copy())
        assert np.array_equal(results[0], results[1])

    def test_shape_mismatch(self):
        p = Tensor([1.0], requires_grad=True)
        state = TR.AdamState([p])
        with pytest.raises(TR.TrainingError):
            TR.adam_step([p], [np.zeros(3)], state, self.cfg())


class TestClipAndSchedule:
    def test_clip_invariant(self, rng):
        for _ in range(5):
            grads = [rng.standard_normal(s) * 10 for s in ((3, 4), (7,), (2, 2))]
            TR.clip_gradients(grads, 1.0)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            assert norm <= 1.0 + 1e-12

    def test_clip_noop_when_small(self, rng):
        g = rng.standard_normal(4) * 1e-3
        before = g.copy()
        TR.clip_gradients([g], 1.0)
        assert np.array_equal(g, before)

    def test_cosine_endpoints(self):
        assert TR.cosine_lr(0, 10, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert TR.cosine_lr(9, 10, 1e-3, 1e-5) == pytest.approx(1e-5)
        mid = TR.cosine_lr(5, 11, 1e-3, 1e-5)
        assert 1e-5 < mid < 1e-3

    def test_single_epoch_uses_peak(self):
        assert TR.cosine_lr(0, 1, 1e-3, 1e-5) == 1e-3


class TestTrainConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(TR.TrainingError):
            TR.TrainConfig(epochs=0)

    def test_bad_variant(self):
        with pytest.raises(TR.TrainingError):
            TR.TrainConfig(epochs=1, loss_variant="l1")


class TestEvaluate:
    def test_mean_equals_per_sample_average(self, tiny_darcy):
        m = tiny_model(tiny_darcy)
        res = TR.evaluate(m, tiny_darcy, "test")
        assert res["rel_l2"] == pytest.approx(np.mean(res["per_sample"]), abs=1e-12)

    def test_forced_equal_prediction_is_zero(self, tiny_darcy, monkeypatch):
        m = tiny_model(tiny_darcy)
        stats = tiny_darcy.stats
        order = iter(tiny_darcy.test_indices)

        def fake_forward(model, f_in, pts, knn, layer_hook=None):
            i = next(order)
            y = D.normalize(tiny_darcy.outputs.data[i],
                            stats["output_mean"], stats["output_std"])
            return Tensor(y)

        monkeypatch.setattr(TR, "forward", fake_forward)
        res = TR.evaluate(m, tiny_darcy, "test")
        assert res["rel_l2"] < 1e-12

    def test_zero_prediction_normalized_metric_is_one(self, tiny_darcy):
        # A model that predicts exactly 0 in normalized space scores exactly
        # 1.0 there: |0 - y|/|y|. (A *random* fresh model does not sit near
        # 1.0: the global branch's interaction-mass division can amplify
        # fresh outputs by orders of magnitude, see the finiteness test.)
        m = tiny_model(tiny_darcy)
        m.proj_w.data[:] = 0.0
        m.proj_b.data[:] = 0.0
        res = TR.evaluate(m, tiny_darcy, "test")
        assert res["rel_l2_normalized"] == pytest.approx(1.0, abs=1e-12)

    def test_fresh_model_metric_finite(self, tiny_darcy):
        for seed in (0, 1, 2):
            m = tiny_model(tiny_darcy, seed=seed)
            res = TR.evaluate(m, tiny_darcy, "test")
            assert math.isfinite(res["rel_l2"]) and res["rel_l2"] > 0
            assert math.isfinite(res["rel_l2_normalized"])

    def test_channel_mismatch_rejected(self, tiny_darcy):
        m = tiny_model(tiny_darcy, in_channels=3)
        with pytest.raises(TR.TrainingError):
            TR.evaluate(m, tiny_darcy, "test")


class TestTrainLoop:
    def test_report_structure_and_learning(self, tiny_darcy, tmp_path):
        m = tiny_model(tiny_darcy)
        cfg = TR.TrainConfig(epochs=3, batch_size=4, seed=2)
        ckpt = tmp_path / "best.la2c"
        report = TR.train(m, tiny_darcy, cfg, checkpoint_path=ckpt)
        assert report.epochs == 3
        assert len(report.mask_sigma[0]) == 2
        assert all(len(row) == 2 for row in report.mask_sigma)
        assert all(s > 0 for s in report.epoch_seconds)
        assert report.best_epoch >= 1
        assert ckpt.exists()
        best = load_checkpoint(ckpt)
        assert best.config == m.config

    def test_seeded_determinism(self, tiny_darcy):
        runs = []
        for _ in range(2):
            m = tiny_model(tiny_darcy)
            report = TR.train(m, tiny_darcy, TR.TrainConfig(epochs=2, seed=5))
            runs.append(report.numeric_rows())
        assert runs[0] == runs[1]

    def test_patch_size_exceeds_points(self, tiny_darcy):
        m = tiny_model(tiny_darcy, k=100)
        with pytest.raises(TR.TrainingError):
            TR.train(m, tiny_darcy, TR.TrainConfig(epochs=1))

    def test_csv_columns(self, tiny_darcy, tmp_path):
        m = tiny_model(tiny_darcy)
        report = TR.train(m, tiny_darcy, TR.TrainConfig(epochs=2, seed=1))
        path = tmp_path / "report.csv"
        report.write_csv(path)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header == ["epoch", "train_loss", "test_rel_l2",
                          "sigma_s_1", "sigma_s_2", "epoch_seconds"]
        assert len(lines) == 3
