import numpy as np
import pytest

from mrunet import ArchitectureSpec, build_model
from mrunet.errors import ShapeError, UnreliableCheckError
from mrunet.gradcheck import grad_check, relative_error
from mrunet.optim import soft_dice_loss
from mrunet.tensor import (
    Tensor,
    avg_pool2x2,
    concat_channels,
    conv2d,
    custom_op,
    max_pool2x2,
    relu,
    softmax_channels,
    tensor_sum,
    transposed_conv2x2,
)

from conftest import bumpy, t64

SEEDS = range(20)
TOL = 1e-4


def weighted(out, seed):
    """Random linear functional so every output element gets a distinct adjoint."""
    w = np.random.default_rng(seed + 999).normal(size=out.shape)
    return tensor_sum(out * Tensor(w))


def case_conv(r):
    x, w, b = t64(r.normal(size=(2, 2, 5, 5))), t64(r.normal(size=(3, 2, 3, 3))), t64(r.normal(size=3))
    return (lambda x, w, b: conv2d(x, w, b)), [x, w, b]


def case_conv_1x1(r):
    x, w, b = t64(r.normal(size=(1, 3, 4, 4))), t64(r.normal(size=(2, 3, 1, 1))), t64(r.normal(size=2))
    return (lambda x, w, b: conv2d(x, w, b)), [x, w, b]


def case_tconv(r):
    x, w, b = t64(r.normal(size=(2, 3, 3, 2))), t64(r.normal(size=(3, 2, 2, 2))), t64(r.normal(size=2))
    return (lambda x, w, b: transposed_conv2x2(x, w, b)), [x, w, b]


def case_maxpool(r):
    # distinct values spaced well beyond the step keep the argmax stable
    x = t64(r.permutation(64).reshape(1, 4, 4, 4) * 0.01)
    return (lambda x: max_pool2x2(x)), [x]


def case_avgpool(r):
    return (lambda x: avg_pool2x2(x)), [t64(r.normal(size=(2, 2, 4, 6)))]


def case_relu(r):
    x = r.normal(size=(3, 7))
    x[np.abs(x) < 1e-2] = 0.5
    return (lambda x: relu(x)), [t64(x)]


def case_concat(r):
    return (lambda a, b: concat_channels(a, b)), [t64(r.normal(size=(2, 2, 3, 3))), t64(r.normal(size=(2, 3, 3, 3)))]


def case_softmax(r):
    return (lambda x: softmax_channels(x)), [t64(r.normal(scale=2, size=(2, 3, 3, 3)))]


def case_relu_conv(r):
    x, w = t64(r.normal(size=(1, 2, 5, 5))), t64(r.normal(size=(2, 2, 3, 3)))
    b = t64(r.normal(size=2))
    return (lambda x, w, b: relu(conv2d(x, w, b))), [x, w, b]


CASES = [case_conv, case_conv_1x1, case_tconv, case_maxpool, case_avgpool, case_relu,
         case_concat, case_softmax, case_relu_conv]


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[5:])
def test_every_op_over_20_seeds(case):
    worst = 0.0
    for seed in SEEDS:
        fn, inputs = case(np.random.default_rng(seed))
        worst = max(worst, grad_check(lambda *a: weighted(fn(*a), seed), inputs, seed=seed))
    assert worst <= TOL


def test_soft_dice_loss_gradient_over_20_seeds():
    worst = 0.0
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        z = t64(r.normal(size=(2, 2, 4, 4)))
        y = (r.random((2, 1, 4, 4)) > 0.5).astype(float)
        worst = max(worst, grad_check(lambda z: soft_dice_loss(softmax_channels(z), y).loss, [z], seed=seed))
    assert worst <= TOL


def test_linear_function_is_exact(rng):
    x = t64(rng.normal(size=(4, 5)))
    assert grad_check(lambda x: tensor_sum(x), [x]) <= 1e-10


def test_backward_scaled_by_two_gives_half():
    # |2g - g| / max(|2g|, |g|) = 1/2
    def doubled_square_sum(x):
        return custom_op(np.asarray((x.data ** 2).sum()), (x,), lambda g: (2 * (2 * g * x.data),))

    x = t64([0.3, -1.2, 2.0])
    assert grad_check(doubled_square_sum, [x]) == pytest.approx(0.5, abs=1e-6)


def test_nondeterministic_function_detected():
    calls = iter(range(10**6))
    x = t64([1.0, 2.0])
    with pytest.raises(UnreliableCheckError):
        grad_check(lambda x: tensor_sum(x) * Tensor(np.array(float(next(calls)))), [x])


def test_non_scalar_output_rejected():
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * x, [t64([1.0, 2.0])])


def test_relative_error_floor():
    assert relative_error(np.float64(0.0), np.float64(0.0)) == 0.0
    assert relative_error(np.float64(1e-12), np.float64(0.0)) == pytest.approx(1e-4)


def test_kink_straddle_is_resolved():
    # relu input sits 5e-5 from zero, inside the default step
    x = t64([5e-5, -3e-5, 0.7])
    assert grad_check(lambda x: tensor_sum(relu(x)), [x]) <= TOL


@pytest.mark.parametrize("variant", ["unet", "mrunet"])
def test_full_network_loss(variant):
    worst = 0.0
    for seed in range(3):
        r = np.random.default_rng(seed)
        model = bumpy(build_model(ArchitectureSpec(variant, 2, 1), seed=seed, dtype=np.float64), seed)
        x = t64(r.random((2, 1, 8, 8)))
        y = (r.random((2, 1, 8, 8)) > 0.5).astype(float)
        params = list(model.parameters.values())
        worst = max(worst, grad_check(lambda *_: soft_dice_loss(model(x), y).loss, [x, *params], samples=4, seed=seed))
    assert worst <= TOL
