import math

import numpy as np
import pytest

from terracover import trainer
from terracover.errors import TrainError
from terracover.nn import EncoderSpec, build_network, save_checkpoint
from terracover.nn.gradcheck import numeric_grad
from terracover.raster import NODATA
from terracover.nn.layers import Parameter
from terracover.trainer import SGD, ArrayData, TrainConfig, parse_config_text

SMALL = (2, 3, 3, 4)


def toy_data(rng, n, k, size=16, task="classify"):
    """Images whose colour encodes a random class; labels follow the masks."""
    images = np.zeros((n, 3, size, size), np.float32)
    masks = np.zeros((n, size, size), np.uint8)
    targets = np.zeros((n, k), np.float32)
    truths = []
    for i in range(n):
        a, b = rng.choice(k, 2, replace=False)
        masks[i, :, size // 2:] = b
        masks[i, :, :size // 2] = a
        images[i, 0] = masks[i] / k
        images[i] += rng.normal(0, 0.05, images[i].shape)
        targets[i, [a, b]] = 1
        truths.append(frozenset({int(a), int(b)}))
    return ArrayData([f"r0_c{i}" for i in range(n)], images, masks, targets, truths)


class TestBCE:
    def test_ln2_at_zero_logits(self):
        t = np.array([[0, 1, 1, 0]], np.float32)
        loss, _ = trainer.bce_multilabel_loss(np.zeros((1, 4)), t)
        assert loss == pytest.approx(math.log(2), rel=1e-12)

    def test_limit(self):
        loss, _ = trainer.bce_multilabel_loss(np.array([[60.0, -60.0]]), np.array([[1.0, 0.0]]))
        assert loss < 1e-20

    def test_stable_for_huge_logits(self):
        loss, grad = trainer.bce_multilabel_loss(np.array([[1e4, -1e4]]), np.array([[0.0, 1.0]]))
        assert loss == pytest.approx(1e4)
        assert np.isfinite(grad).all()

    def test_gradient_formula(self, rng):
        z = rng.standard_normal((3, 5))
        t = (rng.random((3, 5)) > 0.5).astype(float)
        _, grad = trainer.bce_multilabel_loss(z, t)
        np.testing.assert_allclose(grad, (1 / (1 + np.exp(-z)) - t) / 15, rtol=1e-12)

    def test_finite_differences(self, rng):
        z = rng.standard_normal((4, 6))
        t = (rng.random((4, 6)) > 0.5).astype(float)
        _, grad = trainer.bce_multilabel_loss(z, t)
        num = numeric_grad(lambda: trainer.bce_multilabel_loss(z, t)[0], z)
        assert np.abs(grad - num).max() / np.abs(num).max() < 1e-6

    def test_rejects_soft_targets(self):
        with pytest.raises(TrainError, match="0 or 1"):
            trainer.bce_multilabel_loss(np.zeros((1, 2)), np.array([[0.5, 1.0]]))

    def test_per_sample_mean_matches(self, rng):
        z = rng.standard_normal((4, 3))
        t = (rng.random((4, 3)) > 0.5).astype(float)
        assert trainer.bce_per_sample(z, t).mean() == pytest.approx(
            trainer.bce_multilabel_loss(z, t)[0], rel=1e-12)


class TestPixelCE:
    def test_uniform_logits(self, rng):
        masks = rng.integers(0, 5, (2, 4, 4))
        loss, _ = trainer.pixel_crossentropy_loss(np.zeros((2, 5, 4, 4)), masks)
        assert loss == pytest.approx(math.log(5), rel=1e-12)

    def test_confident_limit(self, rng):
        masks = rng.integers(0, 3, (1, 4, 4))
        onehot = np.moveaxis(np.eye(3)[masks], -1, 1) * 50
        assert trainer.pixel_crossentropy_loss(onehot, masks)[0] < 1e-20

    def test_nodata_ignored(self, rng):
        z = rng.standard_normal((2, 4, 5, 5))
        masks = rng.integers(0, 4, (2, 5, 5)).astype(np.uint8)
        masks[0, :2] = NODATA
        z2 = z.copy()
        z2[0, :, :2] = rng.standard_normal((4, 2, 5)) * 100
        a, ga = trainer.pixel_crossentropy_loss(z, masks)
        b, gb = trainer.pixel_crossentropy_loss(z2, masks)
        assert a == b
        assert not ga[0, :, :2].any()
        np.testing.assert_array_equal(ga, gb)

    def test_finite_differences(self, rng):
        z = rng.standard_normal((2, 3, 4, 4))
        masks = rng.integers(0, 3, (2, 4, 4)).astype(np.uint8)
        masks[1, 0] = NODATA
        _, grad = trainer.pixel_crossentropy_loss(z, masks)
        num = numeric_grad(lambda: trainer.pixel_crossentropy_loss(z, masks)[0], z)
        assert np.abs(grad - num).max() / np.abs(num).max() < 1e-6

    def test_all_nodata(self):
        with pytest.raises(TrainError, match="nodata"):
            trainer.pixel_crossentropy_loss(np.zeros((1, 2, 2, 2)),
                                            np.full((1, 2, 2), NODATA, np.uint8))

    def test_class_out_of_range(self):
        with pytest.raises(TrainError):
            trainer.pixel_crossentropy_loss(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 3))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig("classify")
        assert (c.stage1_epochs, c.stage2_epochs) == (10, 10)
        s = TrainConfig("segment")
        assert 5 <= s.stage1_epochs <= 10 and 5 <= s.stage2_epochs <= 10
        assert 0 < c.stage2_lr_factor < 1 and c.momentum == 0.9 and c.threshold == 0.5
        assert (c.learning_rate, s.learning_rate) == (0.3, 0.05) and c.clip_norm == 1.0
        assert TrainConfig("segment", learning_rate=0.2).learning_rate == 0.2

    @pytest.mark.parametrize("kwargs", [dict(stage1_epochs=-1), dict(level=4), dict(batch_size=0),
                                        dict(learning_rate=0), dict(momentum=1.0), dict(clip_norm=-1),
                                        dict(task="detect")])
    def test_invalid(self, kwargs):
        with pytest.raises(TrainError):
            TrainConfig(**{"task": "classify", **kwargs})

    def test_parse_text(self):
        text = "# comment\nstage1_epochs = 2\naugment=off\nchannels=4,4,8,8\nlearning-rate=0.1\n"
        values = trainer.parse_config_text(text)
        assert values == {"stage1_epochs": 2, "augment": False, "channels": (4, 4, 8, 8),
                          "learning_rate": 0.1}

    def test_parse_unknown_key(self):
        with pytest.raises(TrainError, match="unknown"):
            trainer.parse_config_text("warmup=3")


def _config(**kw):
    base = dict(task="classify", stage1_epochs=1, stage2_epochs=1, batch_size=4,
                channels=SMALL, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestTraining:
    def test_zero_epochs(self, rng, taxonomy):
        data = toy_data(rng, 4, 43)
        net, log = trainer.train_classifier(_config(stage1_epochs=0, stage2_epochs=0), None,
                                            taxonomy, data=(data, data))
        assert log.rows == []
        fresh = build_network("classify", 43, EncoderSpec(SMALL, seed=5))
        assert all(np.array_equal(v, net.state()[k]) for k, v in fresh.state().items())

    @pytest.mark.parametrize("task", ["classify", "segment"])
    def test_stage1_freeze_contract(self, rng, taxonomy, task):
        data = toy_data(rng, 6, 43)
        cfg = _config(task=task, stage2_epochs=0)
        fresh = build_network(task, 43, EncoderSpec(SMALL, seed=5))
        frozen_part = "all_but_head" if task == "classify" else "encoder"
        before = {p.name: p.value.tobytes() for p in fresh.part(frozen_part)}
        fn = trainer.train_classifier if task == "classify" else trainer.train_segmenter
        net, log = fn(cfg, None, taxonomy, data=(data, data))
        after = net.named_parameters()
        assert all(after[k].value.tobytes() == v for k, v in before.items())
        others = [p for p in net.parameters() if p.name not in before]
        assert any(not np.array_equal(p.value, fresh.named_parameters()[p.name].value)
                   for p in others)
        assert len(log.rows) == 1 and log.rows[0].stage == 1

    def test_stage2_updates_everything(self, rng, taxonomy):
        data = toy_data(rng, 6, 43)
        net, _ = trainer.train_classifier(_config(stage1_epochs=0, stage2_epochs=1), None,
                                          taxonomy, data=(data, data))
        fresh = build_network("classify", 43, EncoderSpec(SMALL, seed=5)).named_parameters()
        assert not np.array_equal(net.encoder.stem.weight.value,
                                  fresh["encoder.stem.weight"].value)

    def test_deterministic(self, rng, taxonomy, tmp_path):
        data = toy_data(rng, 6, 43)
        runs = []
        for i in range(2):
            cfg = _config(checkpoint=str(tmp_path / f"m{i}.lcun"))
            net, log = trainer.train_classifier(cfg, None, taxonomy, data=(data, data))
            runs.append(([(r.train_loss, r.val_loss, r.metric) for r in log.rows],
                         (tmp_path / f"m{i}.lcun").read_bytes()))
        assert runs[0] == runs[1]

    def test_log_rows_and_best(self, rng, taxonomy, tmp_path):
        data = toy_data(rng, 6, 43)
        net, log = trainer.train_segmenter(_config(task="segment"), None, taxonomy,
                                           data=(data, data))
        assert [r.epoch for r in log.rows] == [1, 2]
        assert [r.stage for r in log.rows] == [1, 2]
        assert log.best_metric == max(r.metric for r in log.rows)
        assert len(log.rows[0].class_iou) == 43
        path = log.write_csv(tmp_path / "log.csv")
        header = path.read_text().splitlines()[0]
        assert header == "epoch,stage,train_loss,val_loss,metric,wall_time,class_iou"

    def test_wrong_task(self, taxonomy):
        with pytest.raises(TrainError):
            trainer.train_classifier(_config(task="segment"), None, taxonomy)

    def test_empty_split(self, taxonomy):
        with pytest.raises(TrainError, match="empty"):
            trainer.load_arrays([], taxonomy, 3)

    def test_encoder_transfer(self, rng, taxonomy, tmp_path):
        data = toy_data(rng, 4, 43)
        cls = build_network("classify", 43, EncoderSpec(SMALL, seed=8))
        ckpt = save_checkpoint(tmp_path / "cls.lcun", cls.state())
        cfg = _config(task="segment", stage1_epochs=0, stage2_epochs=0)
        seg, _ = trainer.train_segmenter(cfg, None, taxonomy, encoder_checkpoint=ckpt,
                                         data=(data, data))
        x = data.images[:2]
        for a, b in zip(cls.encoder.forward(x), seg.encoder.forward(x)):
            np.testing.assert_array_equal(a, b)

    def test_transfer_mismatch(self, tmp_path):
        other = build_network("classify", 3, EncoderSpec((4, 4, 4, 4)))
        ckpt = save_checkpoint(tmp_path / "o.lcun", other.state())
        with pytest.raises(TrainError, match="encoder"):
            trainer.transfer_encoder(build_network("segment", 3, EncoderSpec(SMALL)), ckpt)


class _CopyStub:
    """Predictor that reads truth straight out of its input."""

    def __init__(self, task):
        self.task = task

    def forward(self, x):
        if self.task == "classify":
            return (x[:, 0, 0, :] * 2 - 1) * 40
        return np.moveaxis(np.eye(4)[x[:, 0].astype(int)], -1, 1) * 40


class TestEvaluate:
    def _classify_data(self, rng, k=6):
        n = 7
        targets = (rng.random((n, k)) > 0.5).astype(np.float32)
        images = np.zeros((n, 3, 2, k), np.float32)
        images[:, 0, 0, :] = targets
        truths = [frozenset(np.flatnonzero(t).tolist()) for t in targets]
        return ArrayData([str(i) for i in range(n)], images, np.zeros((n, 2, k)), targets, truths)

    def test_truth_copying_stub(self, rng, taxonomy):
        data = self._classify_data(rng, 5)
        ev = trainer.evaluate(_CopyStub("classify"), None, 1, taxonomy, data=data)
        assert ev.report.exact == 1
        assert all(v == 1 for v in ev.report.f1_modes.values())

    def test_threshold_one_predicts_nothing(self, rng, taxonomy):
        data = self._classify_data(rng, 5)
        data.targets[:, 0] = 1
        data.truths = [t | {0} for t in data.truths]
        ev = trainer.evaluate(_CopyStub("classify"), None, 1, taxonomy, threshold=1.0, data=data)
        assert all(len(p) == 0 for p in ev.batch.preds)
        assert ev.report.incorrect == 1

    def test_segmentation_stub(self, rng, taxonomy):
        masks = rng.integers(0, 4, (3, 8, 8)).astype(np.uint8)
        images = np.zeros((3, 3, 8, 8), np.float32)
        images[:, 0] = masks
        data = ArrayData(["a", "b", "c"], images, masks, np.zeros((3, 5)), [])
        ev = trainer.evaluate(_CopyStub("segment"), None, 1, taxonomy, data=data)
        assert ev.report.accuracy == 1
        assert ev.report.mean_iou == 1

    def test_argmax_tie_lowest(self):
        z = np.zeros((1, 3, 2, 2))
        z[0, 1] = z[0, 2] = 1.0
        assert (trainer.argmax_masks(z) == 1).all()

    def test_strict_threshold(self):
        assert trainer.predicted_sets(np.zeros((1, 3)), 0.5) == [frozenset()]
        assert trainer.predicted_sets(np.array([[0.1, -1, 3]]), 0.5) == [frozenset({0, 2})]


def test_write_run(tmp_path, rng, taxonomy):
    import json
    data = toy_data(rng, 4, 43)
    cfg = _config(stage2_epochs=0)
    _, log = trainer.train_classifier(cfg, None, taxonomy, data=(data, data))
    path = trainer.write_run(tmp_path / "run", cfg, log)
    meta = json.loads(path.read_text())
    assert meta["seed"] == 5 and meta["config"]["channels"] == list(SMALL)
    assert (tmp_path / "run" / "log.csv").exists()


class TestClipping:
    def _param(self, grad):
        p = Parameter("w", np.zeros(len(grad)))
        p.grad = np.asarray(grad, float)
        return p

    def test_rescales_to_clip_norm(self):
        p = self._param([3.0, 4.0])           # norm 5
        SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0).step()
        np.testing.assert_allclose(p.value, [-0.6, -0.8], rtol=1e-12)

    def test_small_gradients_untouched(self):
        p = self._param([0.3, 0.4])
        SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0).step()
        np.testing.assert_allclose(p.value, [-0.3, -0.4], rtol=1e-12)

    def test_norm_spans_parameters_and_skips_frozen(self):
        a, b, frozen = self._param([3.0]), self._param([4.0]), self._param([100.0])
        frozen.frozen = True
        opt = SGD([a, b, frozen], lr=1.0, momentum=0.0, clip_norm=1.0)
        assert opt.grad_norm() == 5.0
        opt.step()
        assert (a.value[0], b.value[0], frozen.value[0]) == pytest.approx((-0.6, -0.8, 0.0))

    def test_zero_disables(self):
        p = self._param([30.0, 40.0])
        SGD([p], lr=1.0, momentum=0.0, clip_norm=0.0).step()
        np.testing.assert_array_equal(p.value, [-30.0, -40.0])

    def test_config_key(self):
        assert parse_config_text("clip_norm=0.5")["clip_norm"] == 0.5
