import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resattunet import loss
from resattunet.data import MARIDA_PIXEL_COUNTS
from resattunet.gradcheck import gradient_check
from resattunet.tensor import Tape, Tensor, precision


def _softmax_col(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def _pixels(z, y):
    B, K, H, W = z.shape
    for n in range(B):
        for i in range(H):
            for j in range(W):
                if y[n, i, j]:
                    yield list(z[n, :, i, j]), int(y[n, i, j]) - 1


def wce_loops(z, y, w):
    num = den = 0.0
    for col, c in _pixels(z, y):
        num += w[c] * -math.log(_softmax_col(col)[c])
        den += w[c]
    return num / den


def focal_loops(z, y, gamma):
    vals = [-(1 - p[c]) ** gamma * math.log(p[c]) for p, c in ((_softmax_col(col), c) for col, c in _pixels(z, y))]
    return sum(vals) / len(vals)


def dice_loops(z, y, eps):
    K = z.shape[1]
    pix = [(_softmax_col(col), c) for col, c in _pixels(z, y)]
    ds = []
    for k in range(K):
        ysum = sum(1 for _, c in pix if c == k)
        if not ysum:
            continue
        inter = sum(p[k] for p, c in pix if c == k)
        psum = sum(p[k] for p, _ in pix)
        ds.append(1 - (2 * inter + eps) / (psum + ysum + eps))
    return sum(ds) / len(ds)


def _instance(rng, shape=(2, 3, 4, 4)):
    z = rng.standard_normal(shape)
    y = rng.integers(0, shape[1] + 1, size=(shape[0], *shape[2:]))
    y[0, 0, 0] = 1
    return z, y


def test_wce_matches_loops(rng, f64):
    z, y = _instance(rng)
    w = np.array([0.5, 2.0, 1.3])
    assert loss.weighted_cross_entropy(Tensor(z), y, w).value == pytest.approx(wce_loops(z, y, w), abs=1e-6)


def test_focal_matches_loops(rng, f64):
    z, y = _instance(rng)
    assert loss.focal_loss(Tensor(z), y, 2.0).value == pytest.approx(focal_loops(z, y, 2.0), abs=1e-6)


def test_dice_matches_loops(rng, f64):
    z, y = _instance(rng)
    assert loss.dice_loss(Tensor(z), y, 1.0).value == pytest.approx(dice_loops(z, y, 1.0), abs=1e-6)


def test_coin_flip_entropy():
    lv = loss.cross_entropy(Tensor(np.zeros((1, 2, 3, 3))), np.ones((1, 3, 3), int))
    assert lv.value == pytest.approx(math.log(2), abs=1e-6)
    assert lv.valid_pixel_count == 9


def test_focal_single_pixel_half():
    lv = loss.focal_loss(Tensor(np.zeros((1, 2, 1, 1))), np.ones((1, 1, 1), int), 2.0)
    assert lv.value == pytest.approx(0.25 * math.log(2), abs=1e-6)
    assert lv.value == pytest.approx(0.17329, abs=1e-5)


def test_confident_predictions_approach_zero():
    y = np.array([[[1, 2], [3, 0]]])
    z = np.full((1, 3, 2, 2), -30.0)
    for c in range(3):
        z[0, c][y[0] == c + 1] = 30
    for fn in (loss.cross_entropy, lambda a, b: loss.focal_loss(a, b, 2.0)):
        assert fn(Tensor(z), y).value < 1e-12
    big = np.tile(z, (1, 1, 8, 8))
    assert loss.dice_loss(Tensor(big), np.tile(y, (1, 8, 8))).value < 1e-3


def test_dice_disjoint_near_one():
    y = np.ones((1, 20, 20), int)
    z = np.zeros((1, 2, 20, 20))
    z[0, 1] = 40
    assert loss.dice_loss(Tensor(z), y).value == pytest.approx(1 - 1 / 401, abs=1e-6)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
@settings(max_examples=40, deadline=None)
def test_reductions_bitwise(seed, scale):
    r = np.random.default_rng(seed)
    z, y = _instance(r)
    zt = Tensor(z)
    ce = loss.cross_entropy(zt, y).tensor.data
    assert loss.focal_loss(zt, y, 0.0).tensor.data.tobytes() == ce.tobytes()
    assert loss.weighted_cross_entropy(zt, y, np.full(3, scale)).tensor.data.tobytes() == ce.tobytes()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_losses_nonnegative(seed):
    z, y = _instance(np.random.default_rng(seed))
    for fn in (loss.cross_entropy, loss.focal_loss, loss.dice_loss):
        assert fn(Tensor(z), y).value >= 0


def test_ignoring_a_pixel_removes_exactly_its_contribution(rng, f64):
    z, y = _instance(rng)
    w = np.array([0.5, 2.0, 1.3])
    y[1, 2, 2] = 2
    full = loss.weighted_cross_entropy(Tensor(z), y, w)
    y2 = y.copy()
    y2[1, 2, 2] = 0
    less = loss.weighted_cross_entropy(Tensor(z), y2, w)
    assert less.valid_pixel_count == full.valid_pixel_count - 1
    assert less.value == pytest.approx(wce_loops(z, y2, w), abs=1e-12)


def test_ignored_pixels_get_no_gradient(rng):
    z, y = _instance(rng)
    zt = Tensor(z, requires_grad=True)
    with Tape() as tape:
        lv = loss.xent_plus_dice(zt, y)
    tape.backward(lv.tensor)
    assert not np.any(np.moveaxis(zt.grad, 1, -1)[y == 0])


@pytest.mark.parametrize("name", ["wce", "focal", "dice", "sum"])
def test_loss_gradients(rng, f64, name):
    z, y = _instance(rng)
    fn = {
        "wce": lambda t: loss.weighted_cross_entropy(t, y, [1.0, 2.0, 0.5]).tensor,
        "focal": lambda t: loss.focal_loss(t, y, 2.0).tensor,
        "dice": lambda t: loss.dice_loss(t, y).tensor,
        "sum": lambda t: loss.xent_plus_dice(t, y, [1.0, 2.0, 0.5]).tensor,
    }[name]
    assert gradient_check(fn, [Tensor(z)]) < 1e-6


def test_rejections():
    z = Tensor(np.zeros((1, 2, 2, 2)))
    with pytest.raises(loss.LossError, match="ignored"):
        loss.cross_entropy(z, np.zeros((1, 2, 2), int))
    with pytest.raises(loss.LossError, match="outside"):
        loss.cross_entropy(z, np.full((1, 2, 2), 3))
    with pytest.raises(loss.LossError):
        loss.focal_loss(z, np.ones((1, 2, 2), int), -1.0)


def test_omega_examples():
    assert loss.omega_weight([1, 0, 0, 0]) == 3
    assert loss.omega_weight([0.5, 0.5, 0.5, 0.5]) == 1
    assert loss.omega_weight([0.25] * 10) == 3
    with pytest.raises(loss.LossError):
        loss.omega_weight([0, 0])


def test_marine_debris_weight_high_precision():
    total = sum(MARIDA_PIXEL_COUNTS.values())
    assert total == 837377
    cw = loss.class_weights_from_counts(MARIDA_PIXEL_COUNTS)
    mpmath.mp.dps = 50
    exact = 1 / mpmath.log(mpmath.mpf("1.02") + mpmath.mpf(3399) / total)
    assert abs(cw.weights[0] - float(exact)) < 1e-6


@given(st.lists(st.integers(0, 10**6), min_size=2, max_size=15).filter(lambda c: sum(c) > 0),
       st.integers(2, 1000))
@settings(max_examples=50, deadline=None)
def test_weights_scale_invariant(counts, k):
    a = loss.class_weights_from_counts(counts).weights
    b = loss.class_weights_from_counts([c * k for c in counts]).weights
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_weights_rarer_is_heavier():
    w = loss.class_weights_from_counts([10, 100, 1000]).weights
    assert w[0] > w[1] > w[2] > 0


def test_class_weights_json_roundtrip():
    cw = loss.class_weights_from_counts({"a": 3, "b": 5})
    back = loss.ClassWeights.from_json(cw.to_json())
    assert back.names == ["a", "b"] and back.weights.tobytes() == cw.weights.tobytes()
    with pytest.raises(loss.LossError):
        loss.class_weights_from_counts([0, 0])
