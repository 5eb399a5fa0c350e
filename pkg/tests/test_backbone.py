import numpy as np
import pytest

from glee.backbone import (
    CLS,
    MASK,
    PAD,
    UNK,
    PretrainConfig,
    Vocabulary,
    encode,
    encode_backward,
    init_backbone,
    mask_one_token,
    masked_token_accuracy,
    mlm_loss_and_grads,
    mlm_pretrain,
    split_words,
    tokenize,
)
from glee.data import Corpus
from glee.errors import EmptyInputError, InputStructureError

from conftest import directional_check, random_ids


def test_vocabulary_specials_and_unknowns():
    v = Vocabulary(["a", "b"])
    assert v.id_to_token[:4] == ["[PAD]", "[UNK]", "[CLS]", "[MASK]"]
    assert v.id("a") == 4 and v.id("zzz") == UNK
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])
    with pytest.raises(ValueError):
        Vocabulary(["[MASK]"])


def test_vocabulary_round_trip(tmp_path):
    v = Vocabulary(["x", "y", ".", "z9"])
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_split_words_keeps_specials_and_punctuation():
    assert split_words("good movie. it was [MASK] !") == ["good", "movie", ".", "it", "was", "[MASK]", "!"]


def test_tokenize_pads_and_truncates():
    v = Vocabulary(["a", "b"])
    assert tokenize("a b", v, 5) == [CLS, 4, 5, PAD, PAD]
    assert tokenize("a b a b a", v, 4) == [CLS, 4, 5, 4]
    assert tokenize("a q [MASK]", v, 5) == [CLS, 4, UNK, MASK, PAD]


def test_decode_skips_pad_and_cls():
    v = Vocabulary(["a", "b"])
    assert v.decode(tokenize("b a", v, 6)) == "b a"


def test_init_backbone_pad_row_zero():
    bb = init_backbone(20, dim=8, seed=0)
    assert np.all(bb.embedding[PAD] == 0)
    assert bb.provenance == "random"
    np.testing.assert_array_equal(init_backbone(20, 8, seed=0).embedding, bb.embedding)


def test_identity_encoder_passes_pooled_mean_through():
    bb = init_backbone(12, dim=6, seed=1, identity_encoder=True)
    ids = np.array([[CLS, 4, 5, PAD], [CLS, 7, PAD, PAD]])
    out = encode(ids, bb).cls_repr
    expected = np.stack([bb.embedding[[CLS, 4, 5]].mean(0), bb.embedding[[CLS, 7]].mean(0)])
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_padding_does_not_change_representation():
    bb = init_backbone(12, dim=6, seed=2)
    short = encode(np.array([[CLS, 4, 5]]), bb).cls_repr
    padded = encode(np.array([[CLS, 4, 5, PAD, PAD]]), bb).cls_repr
    np.testing.assert_allclose(short, padded, atol=1e-15)


def test_mask_representation_only_with_mask():
    bb = init_backbone(12, dim=6, seed=2)
    assert encode(np.array([[CLS, 4, 5]]), bb).mask_repr is None
    enc = encode(np.array([[CLS, 4, MASK]]), bb)
    assert enc.mask_repr.shape == (1, 6)
    assert not np.allclose(enc.mask_repr, enc.cls_repr)


def test_encode_input_errors():
    bb = init_backbone(12, dim=6, seed=2)
    with pytest.raises(IndexError):
        encode(np.array([[CLS, 12]]), bb)
    with pytest.raises(EmptyInputError):
        encode(np.array([[PAD, PAD]]), bb)
    with pytest.raises(InputStructureError):
        encode(np.array([[CLS, MASK, MASK]]), bb)
    with pytest.raises(InputStructureError):
        encode(np.array([[CLS, MASK, 4], [CLS, 4, 5]]), bb)


@pytest.mark.parametrize("with_mask", [False, True])
def test_encode_backward_directional(with_mask, rng):
    bb = init_backbone(16, dim=8, seed=4)
    ids = random_ids(rng, 5, 7, 16, with_mask=with_mask)
    up_c = rng.normal(size=(5, 8))
    up_m = rng.normal(size=(5, 8))

    def f():
        enc = encode(ids, bb)
        out = float(np.sum(enc.cls_repr * up_c))
        if with_mask:
            out += float(np.sum(enc.mask_repr * up_m))
        return out

    enc = encode(ids, bb)
    grads = encode_backward(up_c, up_m if with_mask else None, enc, bb)
    assert np.all(grads["embedding"][PAD] == 0)
    params = {k: getattr(bb, k) for k in grads}
    for _ in range(5):
        assert directional_check(f, params, grads, rng) < 1e-6


def test_mlm_loss_gradients_directional(rng):
    bb = init_backbone(16, dim=8, seed=5)
    ids = random_ids(rng, 6, 8, 16)
    masked, targets = mask_one_token(ids, rng)
    _, grads, _ = mlm_loss_and_grads(bb, masked, targets)
    # freshly initialised dense -> LN is sharply curved, hence the small step
    params = bb.arrays()
    grads = {k: grads[k] for k in params}
    for _ in range(5):
        err = directional_check(lambda: mlm_loss_and_grads(bb, masked, targets)[0], params, grads, rng, h=1e-5,
                                frozen_rows={"embedding": [PAD]})
        assert err < 1e-6


def test_mask_one_token_masks_exactly_one_real_token(rng):
    ids = random_ids(rng, 10, 8, 16)
    masked, targets = mask_one_token(ids, rng)
    assert np.all((masked == MASK).sum(axis=1) == 1)
    assert np.all(targets >= 4)
    restored = masked.copy()
    restored[masked == MASK] = targets
    np.testing.assert_array_equal(restored, ids)


def test_pretraining_learns_and_is_deterministic(rng):
    vocab = 24
    # every row repeats one token, so the masked token is predictable from context
    rows = []
    for i in range(200):
        t = 4 + i % 20
        rows.append([CLS, t, t, t, t, PAD])
    corpus = Corpus(np.array(rows), np.zeros(200, dtype=np.int64), 1)
    cfg = PretrainConfig(vocab_size=vocab, dim=8, steps=300, batch_size=32, learning_rate=1e-2)
    a = mlm_pretrain(corpus, cfg, seed=0)
    b = mlm_pretrain(corpus, cfg, seed=0)
    assert a.provenance == "pretrained"
    for k, arr in a.arrays().items():
        np.testing.assert_array_equal(arr, b.arrays()[k])
    assert masked_token_accuracy(a, corpus.ids) > 0.9
