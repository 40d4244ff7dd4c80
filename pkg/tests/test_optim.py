import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrunet.errors import ShapeError, ValidationError
from mrunet.gradcheck import grad_check
from mrunet.optim import Adadelta, AdadeltaState, adadelta_step, soft_dice_loss
from mrunet.tensor import Tape, Tensor, backward, tensor_sum

from conftest import t64


def probs_from_fg(fg):
    fg = np.asarray(fg, dtype=np.float64)
    return t64(np.stack([1 - fg, fg], axis=1))


def sdsc_direct(p, g, smooth):
    """Straight from the definition, one image at a time."""
    vals = []
    for pi, gi in zip(p, g):
        vals.append((2 * np.sum(pi * gi) + smooth) / (np.sum(pi) + np.sum(gi) + smooth))
    return np.array(vals)


def mask_with(n_fg, shape=(1, 1, 16, 16), seed=0):
    g = np.zeros(int(np.prod(shape)))
    g[np.random.default_rng(seed).choice(g.size, n_fg, replace=False)] = 1
    return g.reshape(shape)


def test_perfect_overlap_loss_zero():
    g = mask_with(100)
    lv = soft_dice_loss(probs_from_fg(g[:, 0]), g)
    assert lv.value == 0.0
    assert lv.per_image_sdsc[0] == 1.0


def test_empty_prediction_loss():
    g = mask_with(100)
    lv = soft_dice_loss(probs_from_fg(np.zeros((1, 16, 16))), g)
    assert lv.per_image_sdsc[0] == pytest.approx(1 / 101, abs=1e-15)
    assert lv.value == pytest.approx(100 / 101, abs=1e-15)


def test_two_pixel_no_smoothing():
    lv = soft_dice_loss(probs_from_fg([[[0.8, 0.2]]]), np.array([[[[1.0, 0.0]]]]), smooth=0.0)
    assert lv.per_image_sdsc[0] == pytest.approx(0.8, abs=1e-12)
    assert lv.value == pytest.approx(0.2, abs=1e-12)


def test_empty_empty_is_one():
    lv = soft_dice_loss(probs_from_fg(np.zeros((2, 4, 4))), np.zeros((2, 1, 4, 4)))
    assert lv.value == 0.0


def test_per_image_mean_not_pooled(rng):
    p = rng.random((3, 5, 5))
    g = (rng.random((3, 1, 5, 5)) > 0.6).astype(float)
    lv = soft_dice_loss(probs_from_fg(p), g)
    direct = sdsc_direct(p, g[:, 0], 1.0)
    np.testing.assert_allclose(lv.per_image_sdsc, direct, rtol=1e-14)
    assert lv.value == pytest.approx(1 - direct.mean(), abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3), h=st.integers(1, 6))
def test_loss_in_unit_interval(seed, n, h):
    r = np.random.default_rng(seed)
    g = (r.random((n, 1, h, h)) > r.random()).astype(float)
    v = soft_dice_loss(probs_from_fg(r.random((n, h, h))), g).value
    assert 0.0 <= v <= 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bump=st.floats(0.0, 1.0))
def test_raising_foreground_probability_never_raises_loss(seed, bump):
    r = np.random.default_rng(seed)
    g = (r.random((1, 1, 4, 4)) > 0.5).astype(float)
    g[0, 0, 0, 0] = 1
    p = r.random((1, 4, 4))
    before = soft_dice_loss(probs_from_fg(p), g).value
    p[0, 0, 0] = p[0, 0, 0] + (1 - p[0, 0, 0]) * bump
    assert soft_dice_loss(probs_from_fg(p), g).value <= before + 1e-15


def test_gradient_matches_finite_differences():
    for seed in range(20):
        r = np.random.default_rng(seed)
        p = t64(r.random((2, 2, 4, 4)))
        g = (r.random((2, 1, 4, 4)) > 0.5).astype(float)
        assert grad_check(lambda p: soft_dice_loss(p, g).loss, [p], seed=seed) <= 1e-4


def test_background_channel_gets_zero_gradient(rng):
    p = probs_from_fg(rng.random((1, 3, 3)))
    with Tape():
        loss = soft_dice_loss(p, np.ones((1, 1, 3, 3))).loss
    backward(loss)
    assert not p.grad[:, 0].any() and p.grad[:, 1].all()


def test_loss_input_errors():
    p = probs_from_fg(np.zeros((1, 2, 2)))
    with pytest.raises(ValidationError):
        soft_dice_loss(p, np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ShapeError):
        soft_dice_loss(p, np.zeros((1, 1, 3, 2)))
    with pytest.raises(ShapeError):
        soft_dice_loss(t64(np.zeros((1, 3, 2, 2))), np.zeros((1, 1, 2, 2)))


# --- Adadelta ---

def test_first_step_formula():
    for g in (1.0, -0.3, 1e-4, 25.0):
        x = np.array([2.0])
        adadelta_step(AdadeltaState(), [x], [np.array([g])])
        expected = -np.sqrt(1e-6) / np.sqrt(0.05 * g * g + 1e-6) * g
        assert x[0] - 2.0 == pytest.approx(expected, rel=1e-12)
    x = np.array([0.0])
    adadelta_step(AdadeltaState(), [x], [np.array([1.0])])
    assert x[0] == pytest.approx(-0.004472091234310839, rel=1e-12)


def test_second_step_uses_both_accumulators():
    rho, eps = 0.95, 1e-6
    x = np.array([0.0])
    state = AdadeltaState()
    adadelta_step(state, [x], [np.array([1.0])])
    adadelta_step(state, [x], [np.array([0.5])])
    eg1, dx1 = (1 - rho), -np.sqrt(eps) / np.sqrt((1 - rho) + eps)
    ed1 = (1 - rho) * dx1 ** 2
    eg2 = rho * eg1 + (1 - rho) * 0.25
    dx2 = -np.sqrt(ed1 + eps) / np.sqrt(eg2 + eps) * 0.5
    assert x[0] == pytest.approx(dx1 + dx2, rel=1e-12)


def test_zero_gradient_decays_accumulators():
    x = np.array([1.0, -2.0])
    state = AdadeltaState()
    adadelta_step(state, [x], [np.array([0.4, -0.1])])
    x_before = x.copy()
    eg, ed = state.square_avg[0].copy(), state.delta_avg[0].copy()
    adadelta_step(state, [x], [np.zeros(2)])
    assert np.array_equal(x, x_before)
    np.testing.assert_allclose(state.square_avg[0], 0.95 * eg, rtol=1e-15)
    np.testing.assert_allclose(state.delta_avg[0], 0.95 * ed, rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(g=st.floats(-1e3, 1e3).filter(lambda v: v != 0))
def test_descent_direction(g):
    x = np.array([0.0])
    adadelta_step(AdadeltaState(), [x], [np.array([g])])
    assert np.sign(x[0]) == -np.sign(g)


def test_scale_invariance_of_first_step(rng):
    g = rng.uniform(0.5, 2.0, size=10) * rng.choice([-1, 1], size=10)
    a, b = np.zeros(10), np.zeros(10)
    adadelta_step(AdadeltaState(), [a], [g])
    adadelta_step(AdadeltaState(), [b], [100 * g])
    assert abs(np.linalg.norm(b) / np.linalg.norm(a) - 1) < 0.01


def test_quadratic_moves_toward_three():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adadelta([x])
    prev_dist = 3.0
    for _ in range(200):
        opt.zero_grad()
        with Tape():
            d = x + Tensor(np.array([-3.0]))
            loss = tensor_sum(d * d) * Tensor(np.array(0.5))
        backward(loss)
        opt.step()
        dist = abs(3.0 - x.data[0])
        assert dist < prev_dist
        prev_dist = dist
    assert x.data[0] > 0


def test_misaligned_lists():
    with pytest.raises(ShapeError):
        adadelta_step(AdadeltaState(), [np.zeros(2)], [])
    with pytest.raises(ShapeError):
        adadelta_step(AdadeltaState(), [np.zeros(2)], [np.zeros(3)])


@pytest.mark.parametrize("kwargs", [dict(rho=1.0), dict(rho=0.0), dict(eps=0.0)])
def test_bad_hyperparameters(kwargs):
    with pytest.raises(ValidationError):
        AdadeltaState(**kwargs)
