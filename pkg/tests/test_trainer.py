import math

import numpy as np
import pytest

from glee.data import Corpus, Splits
from glee.errors import ConfigurationError, FormatError, ShapeError, TrainingDivergedError
from glee.heads import HeadSpec, build_head
from glee.model import Classifier
from glee.objectives import LossSpec
from glee.trainer import (
    TrainConfig,
    Trainer,
    load_backbone,
    load_checkpoint,
    load_head,
    load_model,
    save_backbone,
    save_checkpoint,
    save_head,
    save_model,
    train,
)

from conftest import model_for, random_ids


def _toy_splits(rng, n=60, with_mask=False):
    ids = random_ids(rng, n, 7, 16, with_mask=with_mask)
    # label = whether token 4..9 dominates, learnable from the pooled embedding
    labels = (np.isin(ids, [4, 5, 6, 7, 8, 9]).sum(1) > np.isin(ids, range(10, 16)).sum(1)).astype(int)
    labels[::7] = 2
    c = lambda a, b, s: Corpus(ids[a:b], labels[a:b], 3, s)  # noqa: E731
    return Splits(c(0, 40, "train"), c(40, 50, "dev"), c(50, n, "test"))


def test_protocol_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.weight_decay, c.grad_clip_norm) == (32, 1e-5, 0.0, 1.0)
    assert (c.max_epochs, c.patience, c.warmup_epochs) == (10, 2, 1)
    assert c.loss == LossSpec("cross_entropy")


@pytest.mark.parametrize(
    "kwargs,key",
    [(dict(batch_size=0), "train.batch_size"), (dict(patience=11), "train.patience"),
     (dict(grad_clip_norm=0.0), "train.grad_clip_norm")],
)
def test_config_validation(kwargs, key):
    with pytest.raises(ConfigurationError) as info:
        TrainConfig(**kwargs)
    assert info.value.key == key


def test_zero_learning_rate_leaves_parameters(tiny_backbone, rng):
    data = _toy_splits(rng)
    head = build_head(HeadSpec("cls", "relu", "fresh"), tiny_backbone, 3, seed=1)
    res = train(tiny_backbone, head, data, TrainConfig(learning_rate=0.0, max_epochs=3, patience=3))
    for k, v in res.model.head.arrays().items():
        np.testing.assert_array_equal(v, head.arrays()[k])
    for k, v in res.model.backbone.arrays().items():
        np.testing.assert_array_equal(v, tiny_backbone.arrays()[k])


def test_warmup_schedule(tiny_backbone, rng):
    data = _toy_splits(rng)
    model = Classifier(build_head(HeadSpec("cls"), tiny_backbone, 3), tiny_backbone)
    t = Trainer(model, TrainConfig(batch_size=8, learning_rate=0.5, warmup_epochs=2), data.train)
    assert t.steps_per_epoch == 5 and t.warmup_steps == 10
    lrs = [t.lr_at(s) for s in range(14)]
    np.testing.assert_allclose(lrs[:10], 0.5 * np.arange(1, 11) / 10)
    assert lrs[9] == 0.5 and all(lr == 0.5 for lr in lrs[10:])


def test_clipping_applied_in_training(tiny_backbone, rng, monkeypatch):
    import glee.trainer as tr

    seen = []
    real = tr.clip_gradients

    def spy(grads, max_norm):
        out = real(grads, max_norm)
        seen.append((tr.global_norm(grads), tr.global_norm(out)))
        return out

    monkeypatch.setattr(tr, "clip_gradients", spy)
    data = _toy_splits(rng)
    head = build_head(HeadSpec("cls"), tiny_backbone, 3)
    head.pred_w *= 500.0  # force large gradients
    train(tiny_backbone, head, data, TrainConfig(learning_rate=1e-3, max_epochs=1, patience=1, grad_clip_norm=0.5))
    big = [(raw, out) for raw, out in seen if raw > 0.5]
    assert big
    for _, out in big:
        assert abs(out - 0.5) < 1e-9


def test_training_reduces_loss_and_early_stops(tiny_backbone, rng):
    data = _toy_splits(rng)
    head = build_head(HeadSpec("cls", "relu", "fresh"), tiny_backbone, 3, seed=2)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-2, max_epochs=10, patience=2)
    res = train(tiny_backbone, head, data, cfg)
    assert res.log[-1]["loss"] < res.log[0]["loss"]
    assert len(res.log) - 1 - res.best_epoch <= cfg.patience
    assert res.best_metric == max(e["dev_macro_f1"] for e in res.log)
    assert all(len(e["norms"]) == 3 for e in res.log)


def test_training_is_deterministic(tiny_backbone, tiny_verbalizer, rng):
    data = _toy_splits(rng, with_mask=True)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-2, max_epochs=3, patience=3, seed=4)
    runs = []
    for _ in range(2):
        _, model = model_for("mlm", tiny_backbone, tiny_verbalizer)
        runs.append(Trainer(model, cfg, data.train, data.dev).fit())
    assert runs[0].log == runs[1].log
    np.testing.assert_array_equal(runs[0].model.backbone.embedding, runs[1].model.backbone.embedding)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(tiny_backbone, rng):
    data = _toy_splits(rng)
    head = build_head(HeadSpec("cls"), tiny_backbone, 3)
    head.pred_w[:] = np.inf
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_backbone, head, data, TrainConfig(max_epochs=1, patience=1))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_class_count_mismatch(tiny_backbone, rng):
    data = _toy_splits(rng)
    head = build_head(HeadSpec("cls"), tiny_backbone, 4)
    with pytest.raises(ShapeError):
        train(tiny_backbone, head, data, TrainConfig())


@pytest.mark.parametrize("variant", ["cls_r+ptln", "mlm", "mlm+ed"])
def test_checkpoint_resume_is_bitwise(variant, tiny_backbone, tiny_verbalizer, rng, tmp_path):
    data = _toy_splits(rng, with_mask=True)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-2, max_epochs=4, patience=4, seed=1)
    _, model = model_for(variant, tiny_backbone, tiny_verbalizer)

    ref = Trainer(model.copy(), cfg, data.train, data.dev)
    ref.run_epoch()
    for _ in range(2):
        idx = ref.batch_order(ref.epoch)[:8]
        ref.train_step(data.train.inputs[idx], data.train.labels[idx])

    t = Trainer(model.copy(), cfg, data.train, data.dev)
    t.run_epoch()
    save_checkpoint(tmp_path / "ck.glee", t)
    restored = Trainer.restore(tmp_path / "ck.glee", cfg, data.train, data.dev)
    assert restored.model.tied == t.model.tied
    for trainer in (t, restored):
        for _ in range(2):
            idx = trainer.batch_order(trainer.epoch)[:8]
            trainer.train_step(data.train.inputs[idx], data.train.labels[idx])
    for k, p in t.model.parameters().items():
        assert p.tobytes() == restored.model.parameters()[k].tobytes(), k
        assert p.tobytes() == ref.model.parameters()[k].tobytes(), k


def test_checkpoint_full_fit_continuation(tiny_backbone, rng, tmp_path):
    data = _toy_splits(rng)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-2, max_epochs=5, patience=5, seed=2)
    head = build_head(HeadSpec("cls", "relu", "fresh"), tiny_backbone, 3, seed=0)
    full = Trainer(Classifier(head, tiny_backbone).copy(), cfg, data.train, data.dev).fit()

    t = Trainer(Classifier(head, tiny_backbone).copy(), cfg, data.train, data.dev)
    t.run_epoch()
    t.run_epoch()
    save_checkpoint(tmp_path / "ck.glee", t)
    resumed = Trainer.restore(tmp_path / "ck.glee", cfg, data.train, data.dev).fit()
    assert resumed.log == full.log
    assert resumed.best_epoch == full.best_epoch
    for k, p in full.model.parameters().items():
        assert p.tobytes() == resumed.model.parameters()[k].tobytes()


def test_checkpoint_corruption(tiny_backbone, rng, tmp_path):
    data = _toy_splits(rng)
    t = Trainer(Classifier(build_head(HeadSpec("cls"), tiny_backbone, 3), tiny_backbone), TrainConfig(), data.train)
    p = tmp_path / "ck.glee"
    save_checkpoint(p, t)
    p.write_bytes(p.read_bytes() + b"junk")
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_head_checkpoint_class_mismatch(tiny_backbone, tmp_path):
    head = build_head(HeadSpec("cls", "relu", "fresh"), tiny_backbone, 3, seed=5)
    save_head(tmp_path / "h.glee", head)
    back = load_head(tmp_path / "h.glee", num_classes=3)
    np.testing.assert_array_equal(back.pred_w, head.pred_w)
    np.testing.assert_array_equal(back.ln_gamma, head.ln_gamma)
    with pytest.raises(ShapeError):
        load_head(tmp_path / "h.glee", num_classes=4)


def test_tied_head_checkpoint_needs_backbone(tiny_backbone, tiny_verbalizer, tmp_path):
    _, model = model_for("mlm", tiny_backbone, tiny_verbalizer)
    save_head(tmp_path / "h.glee", model.head)
    with pytest.raises(ShapeError):
        load_head(tmp_path / "h.glee")
    back = load_head(tmp_path / "h.glee", backbone=model.backbone)
    assert back.pred_w is model.backbone.embedding


def test_model_and_backbone_round_trip(tiny_backbone, tiny_verbalizer, rng, tmp_path):
    _, model = model_for("mlm", tiny_backbone, tiny_verbalizer)
    save_model(tmp_path / "m.glee", model)
    back = load_model(tmp_path / "m.glee")
    assert back.tied
    ids = random_ids(rng, 5, 7, 16, with_mask=True)
    assert back.forward(ids).tobytes() == model.forward(ids).tobytes()
    save_backbone(tmp_path / "b.glee", tiny_backbone)
    bb = load_backbone(tmp_path / "b.glee")
    assert bb.provenance == "pretrained"
    for k, v in tiny_backbone.arrays().items():
        assert bb.arrays()[k].tobytes() == v.tobytes()
        assert bb.arrays()[k].shape == v.shape


def test_no_dev_set_keeps_final_model(tiny_backbone, rng):
    data = _toy_splits(rng)
    head = build_head(HeadSpec("cls"), tiny_backbone, 3)
    model = Classifier(head, tiny_backbone).copy()
    res = Trainer(model, TrainConfig(max_epochs=2, patience=1, learning_rate=1e-3), data.train).fit()
    assert len(res.log) == 2 and math.isnan(res.best_metric)
