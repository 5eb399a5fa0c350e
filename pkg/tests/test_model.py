import numpy as np
import pytest

from glee.backbone import PAD
from glee.errors import ConfigurationError, StateError
from glee.heads import HeadSpec, build_head
from glee.model import Classifier
from glee.objectives import loss_forward_backward
from glee.optim import AdamW

from conftest import model_for, random_ids


def _one_step(model, rng):
    ids = random_ids(rng, 6, 7, 16, with_mask=True)
    _, d = loss_forward_backward(model.forward(ids), rng.integers(0, 3, 6))
    params = model.parameters()
    grads = model.backward(d)
    AdamW(params).step(grads, 1e-2)


def test_tied_step_moves_embedding_and_predictor_together(tiny_backbone, tiny_verbalizer, rng):
    _, model = model_for("mlm", tiny_backbone, tiny_verbalizer)
    assert model.tied
    assert "head.pred_w" not in model.parameters()
    before = model.backbone.embedding.copy()
    _one_step(model, rng)
    assert model.head.pred_w is model.backbone.embedding
    assert not np.array_equal(model.backbone.embedding, before)
    np.testing.assert_array_equal(model.backbone.embedding[PAD], 0.0)


def test_untied_predictor_diverges_after_one_step(tiny_backbone, tiny_verbalizer, rng):
    _, model = model_for("mlm+ed", tiny_backbone, tiny_verbalizer)
    assert not model.tied
    np.testing.assert_array_equal(model.head.pred_w, model.backbone.embedding)
    _one_step(model, rng)
    assert model.head.pred_w is not model.backbone.embedding
    assert not np.array_equal(model.head.pred_w, model.backbone.embedding)


def test_copy_preserves_tying(tiny_backbone, tiny_verbalizer):
    _, model = model_for("mlm", tiny_backbone, tiny_verbalizer)
    clone = model.copy()
    assert clone.tied
    assert clone.backbone.embedding is not model.backbone.embedding


def test_backward_before_forward(tiny_backbone):
    model = Classifier(build_head(HeadSpec("cls"), tiny_backbone, 3), tiny_backbone)
    with pytest.raises(StateError):
        model.backward(np.zeros((1, 3)))


def test_frozen_backbone_has_no_backbone_grads(tiny_backbone, rng):
    model = Classifier(build_head(HeadSpec("cls"), tiny_backbone, 3), tiny_backbone, freeze_backbone=True)
    assert all(k.startswith("head.") for k in model.parameters())
    ids = random_ids(rng, 3, 6, 16)
    _, d = loss_forward_backward(model.forward(ids), np.array([0, 1, 2]))
    assert all(k.startswith("head.") for k in model.backward(d))


def test_feature_mode_model(rng):
    head = build_head(HeadSpec("cls", "relu", "fresh"), type("B", (), {"dim": 5, "provenance": "random"})(), 3)
    model = Classifier(head)
    x = rng.normal(size=(4, 5))
    assert model.predict(x).shape == (4,)
    _, d = loss_forward_backward(model.forward(x), np.array([0, 1, 2, 0]))
    assert set(model.backward(d)) == set(model.parameters())


def test_mlm_head_needs_backbone(tiny_backbone, tiny_verbalizer):
    head = build_head(HeadSpec("mlm"), tiny_backbone, 3, verbalizer=tiny_verbalizer)
    with pytest.raises(ConfigurationError):
        Classifier(head)


def test_predict_batches_agree(tiny_backbone, rng):
    model = Classifier(build_head(HeadSpec("cls"), tiny_backbone, 3, seed=1), tiny_backbone)
    ids = random_ids(rng, 11, 6, 16)
    np.testing.assert_array_equal(model.predict(ids, batch_size=3), model.forward(ids).argmax(1))
