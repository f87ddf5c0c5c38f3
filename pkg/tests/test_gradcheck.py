import numpy as np

from sfim import ops
from sfim.gradcheck import GradCheckReport, default_group, gradient_check, relative_error
from sfim.tensor import apply_op, parameter


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == 1e-12 / 1e-8
    assert relative_error(2.0, 1.0) == 0.5


def test_default_group_strips_tensor_name():
    assert default_group("enc.level2.fdb0.fsas.qkv.weight") == "enc.level2.fdb0.fsas.qkv"
    assert default_group("x") == "x"


def test_correct_gradient_passes(rng):
    x = parameter(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    report = gradient_check(lambda: ops.sum(ops.mul(ops.gelu(x), w)), {"x": x}, samples=12)
    assert report.passed()
    assert report.samples == 12


def test_wrong_gradient_is_reported(rng):
    x = parameter(rng.standard_normal(5))

    def broken():
        return ops.sum(apply_op("double", 2.0 * x.data, (x,), lambda g: (g,)))

    report = gradient_check(broken, {"x": x}, samples=5)
    assert not report.passed()
    assert report.worst > 0.4


def test_errors_are_recorded_not_raised():
    x = parameter(np.ones(2))

    def explodes():
        raise RuntimeError("boom")

    report = gradient_check(explodes, {"x": x})
    assert report.error == "RuntimeError: boom"
    assert report.worst == float("inf")
    assert not report.passed()


def test_parameters_restored_after_check(rng):
    data = rng.standard_normal((2, 3))
    x = parameter(data.copy())
    gradient_check(lambda: ops.sum(ops.square(x)), {"x": x}, samples=6)
    np.testing.assert_array_equal(x.data, data)


def test_report_record_and_worst_group():
    report = GradCheckReport("blocks.fsas", {"a": 1e-9, "b": 3e-7}, samples=4)
    assert report.worst_group == "b"
    assert report.to_record() == {"name": "blocks.fsas", "worst": 3e-7, "worst_group": "b",
                                  "samples": 4, "error": None}
