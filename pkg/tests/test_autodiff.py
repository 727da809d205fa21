"""Tensor/tape semantics, forward examples, and finite-difference checks."""

import numpy as np
import pytest

from stylenet import autodiff as ad
from stylenet.autodiff import Tape, Tensor
from stylenet.errors import NumericError, ShapeError, UsageError
from stylenet.gradcheck import grad_check

from reference_impls import naive_conv2d


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# forward examples


def test_conv2d_hand_example():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    k = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    out = ad.conv2d(x, k, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 5.0


def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_cross_entropy_uniform_logits():
    for target in range(4):
        loss = ad.cross_entropy(Tensor([0.0, 0.0, 0.0, 0.0]), target)
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-7)


def test_conv2d_matches_naive_reference():
    r = rng(3)
    for _ in range(12):
        n, cin, cout = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
        h, w = r.integers(4, 9), r.integers(4, 9)
        kh, kw = r.integers(1, 4), r.integers(1, 4)
        s, p = int(r.integers(1, 3)), int(r.integers(0, 2))
        x = r.standard_normal((n, cin, h, w))
        k = r.standard_normal((cout, cin, kh, kw))
        ours = ad.conv2d(Tensor(x), Tensor(k), stride=s, padding=p).data
        ref = naive_conv2d(x, k, stride=s, padding=p)
        assert ours.shape == ref.shape
        np.testing.assert_allclose(ours, ref, atol=1e-6)


def test_conv2d_asymmetric_stride_padding():
    r = rng(4)
    x = r.standard_normal((2, 3, 9, 7))
    k = r.standard_normal((4, 3, 3, 2))
    ours = ad.conv2d(Tensor(x), Tensor(k), stride=(2, 1), padding=(0, 1)).data
    ref = naive_conv2d(x, k, stride=(2, 1), padding=(0, 1))
    np.testing.assert_allclose(ours, ref, atol=1e-6)


def test_forward_determinism():
    x = rng(5).standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng(6).standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = ad.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    b = ad.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    assert np.array_equal(a, b)  # bit-identical


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_nonfinite_output_is_an_error_naming_the_op():
    big = Tensor(np.array([1e38], dtype=np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError, match="multiply"):
            ad.mul(big, big)


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    with Tape() as tape:
        loss = ad.total_sum(ad.mul(x, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_dead_relu():
    x = Tensor(np.array([-1.0]))
    with Tape() as tape:
        loss = ad.total_sum(ad.relu(x))
    tape.backward(loss)
    assert x.grad[0] == 0.0


def test_backward_accumulates_over_multiple_uses():
    x = Tensor(np.array([3.0]))
    with Tape() as tape:
        loss = ad.total_sum(ad.add(ad.mul(x, x), x))  # x^2 + x
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [7.0])  # 2x + 1 at x=3


def test_backward_requires_scalar_and_nonempty_tape():
    x = Tensor(np.zeros((2, 2)))
    with Tape() as tape:
        y = ad.add(x, x)
    with pytest.raises(UsageError, match="scalar"):
        tape.backward(y)
    with pytest.raises(UsageError, match="empty"):
        Tape().backward(Tensor(np.zeros(())))


def test_tape_records_in_topological_order():
    x = Tensor(np.ones((2, 2)))
    with Tape() as tape:
        y = ad.relu(ad.add(ad.mul(x, x), x))
        ad.total_sum(y)
    outputs = [rec.output_id for rec in tape._records]
    assert outputs == sorted(outputs)
    for rec in tape._records:
        assert all(i < rec.output_id for i in rec.input_ids)


def test_no_recording_without_tape():
    x = Tensor(np.ones((2, 2)))
    y = ad.mul(x, x)
    assert y.node_id is None


# ---------------------------------------------------------------------------
# finite-difference checks, every primitive


def _points(seed):
    r = rng(seed)
    # keep away from relu/max kinks: |x| > 10 * step
    safe = r.uniform(0.05, 1.5, size=(3, 4)) * r.choice([-1.0, 1.0], size=(3, 4))
    return r, safe


PRIMITIVE_CASES = [
    ("add", lambda r: (lambda a, b: ad.add(a, b),
                       [r.standard_normal((3, 4)), r.standard_normal((3, 4))])),
    ("add-broadcast", lambda r: (lambda a, b: ad.add(a, b),
                                 [r.standard_normal((3, 4)), r.standard_normal((4,))])),
    ("multiply", lambda r: (lambda a, b: ad.mul(a, b),
                            [r.standard_normal((2, 3)), r.standard_normal((2, 3))])),
    ("multiply-broadcast", lambda r: (lambda a, b: ad.mul(a, b),
                                      [r.standard_normal((2, 3, 2)), r.standard_normal((3, 1))])),
    ("matmul", lambda r: (lambda a, b: ad.matmul(a, b),
                          [r.standard_normal((3, 4)), r.standard_normal((4, 2))])),
    ("matmul-batched", lambda r: (lambda a, b: ad.matmul(a, b),
                                  [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 2))])),
    ("conv2d", lambda r: (lambda x, k: ad.conv2d(x, k, stride=2, padding=1),
                          [r.standard_normal((2, 3, 8, 8)), r.standard_normal((4, 3, 3, 3))])),
    ("conv2d-rect", lambda r: (lambda x, k: ad.conv2d(x, k, stride=(1, 2), padding=(2, 0)),
                               [r.standard_normal((1, 2, 6, 7)), r.standard_normal((3, 2, 3, 2))])),
    ("relu", lambda r: (lambda x: ad.relu(x),
                        [r.uniform(0.05, 1.0, (3, 4)) * r.choice([-1.0, 1.0], (3, 4))])),
    ("tanh", lambda r: (lambda x: ad.tanh(x), [r.standard_normal((3, 4))])),
    ("instance-normalize", lambda r: (lambda x, g, b: ad.instance_norm(x, g, b),
                                      [r.standard_normal((2, 3, 4, 4)),
                                       r.uniform(0.5, 1.5, 3), r.standard_normal(3)])),
    ("max-pool", lambda r: (lambda x: ad.max_pool(x, 2),
                            [np.arange(2 * 3 * 6 * 6).reshape(2, 3, 6, 6)
                             + r.uniform(0.0, 0.3, (2, 3, 6, 6))])),
    ("spatial-mean", lambda r: (lambda x: ad.spatial_mean(x),
                                [r.standard_normal((2, 3, 5, 5))])),
    ("linear", lambda r: (lambda x, w, b: ad.linear(x, w, b),
                          [r.standard_normal((3, 5)), r.standard_normal((5, 2)),
                           r.standard_normal(2)])),
    ("softmax", lambda r: (lambda x: ad.softmax(x, axis=-1),
                           [r.standard_normal((3, 5))])),
    ("cross-entropy", lambda r: (lambda x: ad.cross_entropy(x, np.array([0, 2, 1])),
                                 [r.standard_normal((3, 4))])),
    ("reshape", lambda r: (lambda x: ad.reshape(x, (2, 6)),
                           [r.standard_normal((3, 4))])),
    ("flatten", lambda r: (lambda x: ad.flatten(x),
                           [r.standard_normal((2, 3, 4))])),
    ("concatenate", lambda r: (lambda a, b: ad.concat([a, b], axis=1),
                               [r.standard_normal((2, 3)), r.standard_normal((2, 2))])),
    ("swap-last-axes", lambda r: (lambda x: ad.swap_last_axes(x),
                                  [r.standard_normal((2, 3, 4))])),
    ("triu-flatten", lambda r: (lambda x: ad.triu_flatten(x),
                                [r.standard_normal((2, 4, 4))])),
]


@pytest.mark.parametrize("name,case", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(name, case):
    for seed in range(3):
        op, inputs = case(rng(100 + seed))
        result = grad_check(op, inputs, step=1e-3, tolerance=1e-3, seed=seed)
        assert result.passed, f"{name} seed {seed}: {result}"


def test_grad_check_catches_corrupted_backward():
    # a multiply whose backward rule is scaled by 1.01 must fail the check
    def corrupted(a, b):
        out = ad.mul(a, b)
        tape = ad.current_tape()
        if tape is not None:
            rec = tape._records[-1]
            orig = rec.backward
            rec.backward = lambda g: tuple(1.01 * x for x in orig(g))
        return out

    r = rng(9)
    result = grad_check(corrupted, [r.standard_normal((3, 3)), r.standard_normal((3, 3))])
    assert not result.passed
    assert result.max_rel_error > 1e-3


def test_gradients_overwritten_per_backward_call():
    x = Tensor(np.array([2.0]))
    for _ in range(2):
        with Tape() as tape:
            loss = ad.total_sum(ad.mul(x, x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [4.0])  # not accumulated across calls
