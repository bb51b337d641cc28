import numpy as np
import pytest

from darsd.autodiff import ShapeError, Tape, Tensor, backward, gradient_check
from darsd.networks import (
    CheckpointError,
    Classifier,
    Discriminator,
    Encoder,
    classify,
    grad_reverse,
    load_checkpoint,
    predict,
    save_checkpoint,
)


def _zero(module):
    for name, p in list(module.named_parameters()):
        module.set(name, np.zeros_like(p.data))


# --- encoder -----------------------------------------------------------------

def test_encoder_zero_input_gives_identical_rows():
    enc = Encoder(3, hidden=8, out_dim=6, rng=np.random.default_rng(0))
    out = enc(Tensor(np.zeros((4, 32, 3)))).data
    assert np.all(out == out[0])
    # zero biases everywhere: only the head bias (also zero) survives
    np.testing.assert_array_equal(out, 0.0)


def test_encoder_identical_samples_identical_rows():
    x = np.random.default_rng(1).standard_normal((1, 32, 3))
    enc = Encoder(3, hidden=8, out_dim=6, rng=np.random.default_rng(0))
    out = enc(Tensor(np.concatenate([x, x]))).data
    np.testing.assert_array_equal(out[0], out[1])


def test_encoder_shape_and_gradient():
    rng = np.random.default_rng(2)
    enc = Encoder(3, hidden=4, out_dim=16, kernel_size=3, dilations=(1, 2), rng=rng)
    x = rng.standard_normal((4, 32, 3))
    assert enc(Tensor(x)).shape == (4, 16)

    keys = list(enc.params)
    wts = Tensor(np.linspace(-1, 1, 64).reshape(4, 16))

    def f(*ws):
        enc.params.update(zip(keys, ws))
        return (enc(Tensor(x)) * wts).sum()

    tensors = list(enc.params.values())
    assert gradient_check(f, tensors) < 1e-4


@pytest.mark.parametrize("shape", [(2, 32, 2), (2, 32), (2, 3, 3)])
def test_encoder_rejects_bad_shapes(shape):
    enc = Encoder(3, hidden=4, out_dim=4, kernel_size=3, dilations=(1, 2), rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros(shape)))


def test_encoder_is_causal():
    rng = np.random.default_rng(3)
    enc = Encoder(2, hidden=4, out_dim=4, kernel_size=3, dilations=(1,), rng=rng)
    x = rng.standard_normal((1, 12, 2))
    # pre-pool activations at time t must not depend on later steps
    from darsd.autodiff import conv1d
    w = enc.params["conv0.w"]
    a = conv1d(Tensor(x), w).data
    x2 = x.copy()
    x2[:, 8:] += 5.0
    b = conv1d(Tensor(x2), w).data
    np.testing.assert_array_equal(a[:, :8], b[:, :8])


# --- discriminator ---------------------------------------------------------------

def test_discriminator_zero_weights_half():
    disc = Discriminator(5, 4)
    _zero(disc)
    np.testing.assert_array_equal(disc(Tensor(np.random.default_rng(0).standard_normal((3, 5)))).data, 0.5)


def test_discriminator_duplicates_and_hand_computation():
    rng = np.random.default_rng(4)
    disc = Discriminator(5, 7, slope=0.2, rng=rng)
    f = rng.standard_normal((4, 5))
    f[3] = f[1]
    got = disc(Tensor(f)).data
    assert got[3] == got[1]
    p = {k: v.data for k, v in disc.params.items()}
    h = f @ p["l1.w"] + p["l1.b"]
    h = np.where(h > 0, h, 0.2 * h)
    z = (h @ p["l2.w"] + p["l2.b"]).ravel()
    np.testing.assert_allclose(got, 1.0 / (1.0 + np.exp(-z)), rtol=0, atol=1e-12)


def test_discriminator_output_strictly_inside_unit_interval():
    disc = Discriminator(2, 3, rng=np.random.default_rng(0))
    out = disc(Tensor(np.array([[1e6, -1e6], [-1e6, 1e6]]))).data
    assert np.all(out > 0) and np.all(out < 1)


def test_discriminator_shape_error():
    with pytest.raises(ShapeError):
        Discriminator(5, 4)(Tensor(np.zeros((2, 4))))


# --- classifier ----------------------------------------------------------------

def test_classifier_zero_weights_tie_to_class_zero():
    clf = Classifier(4, 3)
    _zero(clf)
    logits = classify(clf, Tensor(np.ones((2, 4))))
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_array_equal(predict(logits), [0, 0])


def test_classifier_hand_computation():
    rng = np.random.default_rng(5)
    clf = Classifier(4, 3, hidden=6, rng=rng).eval()
    f = rng.standard_normal((5, 4))
    p = {k: v.data for k, v in clf.params.items()}
    want = np.maximum(f @ p["l1.w"] + p["l1.b"], 0) @ p["l2.w"] + p["l2.b"]
    np.testing.assert_allclose(clf(Tensor(f)).data, want, rtol=0, atol=1e-12)
    same = clf(Tensor(np.stack([f[0], f[0]]))).data
    np.testing.assert_array_equal(same[0], same[1])


def test_classifier_dropout_only_in_training_with_rng():
    rng = np.random.default_rng(6)
    clf = Classifier(4, 3, hidden=50, dropout=0.5, rng=rng)
    f = Tensor(rng.standard_normal((3, 4)))
    a = clf(f, rng=np.random.default_rng(1)).data
    b = clf.eval()(f, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(b, clf(f).data)


# --- gradient reversal -----------------------------------------------------

def test_grad_reverse_forward_identity_and_backward_negation():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2)), requires_grad=True)
    with Tape():
        y = grad_reverse(x, 1.0)
        np.testing.assert_array_equal(y.data, x.data)
        backward(y.sum())
    np.testing.assert_array_equal(x.grad, -1.0)


@pytest.mark.parametrize("strength", [0.0, 0.5, 2.0])
def test_grad_reverse_scales(strength):
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        backward((grad_reverse(x, strength) * Tensor(3.0)).sum())
    np.testing.assert_array_equal(x.grad, -3.0 * strength)


def test_grad_reverse_negative_strength_rejected():
    with pytest.raises(ValueError):
        grad_reverse(Tensor([1.0]), -1.0)


# --- checkpoint ------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    blobs = {"a": rng.standard_normal((3, 4)), "scalar": np.array(2.5), "enc.conv0.w": rng.standard_normal((5, 3, 2)),
             "tiny": np.array([np.nextafter(0, 1), -0.0, np.inf])}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, blobs)
    back = load_checkpoint(path)
    assert list(back) == list(blobs)
    for k in blobs:
        assert back[k].shape == np.shape(blobs[k])
        assert back[k].tobytes() == np.asarray(blobs[k], dtype="<f8").tobytes()


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"w": np.arange(10.0)})
    raw = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "hdr.bin").write_bytes(raw[:18])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "hdr.bin")
