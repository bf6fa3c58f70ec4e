import numpy as np
import pytest

from dycelab import model, oracle
from dycelab.dlg import DlgParams
from dycelab.numkern import ContractError, Rng, matmul, softmax


@pytest.fixture
def params():
    return model.init_params(Rng(0), raw_channels=3, channels=4, n_classes=3)


def test_encode_identity_and_zero():
    p = model.init_params(Rng(1), 4, 4, 3)
    p.enc_W = np.eye(4)
    img = Rng(2).normal((2, 2, 4))
    np.testing.assert_array_equal(model.encode_vision(img, p), img)
    assert (model.encode_vision(np.zeros((2, 2, 4)), p) == 0).all()


def test_encode_one_pixel_matmul(params):
    px = Rng(3).normal((1, 1, 3))
    np.testing.assert_allclose(
        model.encode_vision(px, params)[0, 0], matmul(px[0], params.enc_W)[0] + params.enc_b, atol=1e-15
    )
    with pytest.raises(ContractError):
        model.encode_vision(np.zeros((1, 1, 5)), params)


def test_embed_lookup(params):
    out = model.embed_caption([2, 0], params)
    np.testing.assert_array_equal(out, params.embed[[2, 0]])
    rep = model.embed_caption([1, 1], params)
    np.testing.assert_array_equal(rep[0], rep[1])
    assert model.embed_caption([3], params).shape == (1, 4)
    with pytest.raises(ContractError):
        model.embed_caption([params.vocab], params)


def test_decode_cases(params):
    params.dec_b[:] = 0
    uniform = model.decode(np.zeros((3, 2, 2)), params)
    np.testing.assert_allclose(uniform, 1 / 3, atol=1e-15)
    fm = Rng(4).normal((3, 2, 2))
    probs = model.decode(fm, params)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
    one = model.decode(fm[:, :1, :1], params)[0, 0]
    np.testing.assert_allclose(one, softmax(fm[:, 0, 0] @ params.dec_W + params.dec_b), atol=1e-15)
    with pytest.raises(ContractError):
        model.decode(np.zeros((2, 2, 2)), params)


def test_caption_slots():
    np.testing.assert_array_equal(model.caption_slots([0, 3], 5), [0, 5, 5, 3, 5])
    np.testing.assert_array_equal(model.caption_slots([], 3), [3, 3, 3])
    with pytest.raises(ContractError):
        model.caption_slots([5], 5)


def test_forward_shape_and_determinism(params):
    rng = Rng(5)
    img = rng.normal((3, 2, 3))
    tok = model.caption_slots([0, 2], 3)
    a, _ = model.forward(img, tok, params)
    b, _ = model.forward(img, tok, params)
    assert a.shape == (3, 2, 3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_forward_batch_matches_single(params):
    rng = Rng(6)
    imgs = rng.normal((3, 2, 2, 3))
    toks = rng.integers(0, params.vocab, (3, 3))
    batch, _ = model.forward_batch(imgs, toks, params)
    for i in range(3):
        single, _ = model.forward(imgs[i], toks[i], params)
        np.testing.assert_allclose(batch[i], single, atol=1e-14)


@pytest.mark.parametrize("fusion", ["dense", "generic"])
def test_backward_finite_differences(fusion):
    rng = Rng(7)
    for _ in range(5):
        ana, num = oracle._check_model(rng, fusion)
        assert oracle.rel_error(ana, num) <= 1e-5


def test_checkpoint_round_trip(tmp_path, params):
    model.save_checkpoint(tmp_path / "ck", params, {"seed": 3, "step": 10})
    loaded, meta = model.load_checkpoint(tmp_path / "ck")
    assert meta["seed"] == 3 and meta["step"] == 10
    for k, v in params.tensors().items():
        np.testing.assert_array_equal(loaded.tensors()[k], v)
    assert (tmp_path / "ck" / "dlg.vk_W.dyct").read_bytes()[:4] == b"DYCT"


def test_validate_catches_bad_shapes(params):
    params.validate()
    bad = params.copy()
    bad.dlg = DlgParams.identity(5)
    with pytest.raises(ContractError):
        bad.validate()
