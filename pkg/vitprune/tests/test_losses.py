import numpy as np
import pytest

from .. import losses
from .. import numerics as nx
from ..errors import LabelError, ShapeError
from ..pruning_engine import MaskTrace


def test_dynamic_and_fixed_oracle():
    usages = [[1.0], [0.0]]
    assert losses.dynamic_ratio_loss(usages, [0.5]).value == 0.0
    assert losses.fixed_ratio_loss(usages, [0.5]).value == 0.25


def test_traces_are_accepted():
    traces = [MaskTrace((1,), np.ones((1, 4), dtype=bool)),
              MaskTrace((1,), np.zeros((1, 4), dtype=bool))]
    assert losses.dynamic_ratio_loss(traces, [0.5]).value == 0.0
    assert losses.fixed_ratio_loss(traces, [0.5]).value == 0.25


def test_dynamic_never_exceeds_fixed():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        batch = int(rng.integers(1, 6))
        layers = int(rng.integers(1, 10))
        usages = rng.random((batch, layers)).tolist()
        targets = rng.random(layers).tolist()
        dynamic = losses.dynamic_ratio_loss(usages, targets).value
        fixed = losses.fixed_ratio_loss(usages, targets).value
        assert dynamic <= fixed + 1e-15


def test_single_image_losses_are_equal():
    rng = np.random.default_rng(1)
    for _ in range(100):
        layers = int(rng.integers(1, 10))
        usages = [rng.random(layers).tolist()]
        targets = rng.random(layers).tolist()
        assert losses.dynamic_ratio_loss(usages, targets).value == \
            losses.fixed_ratio_loss(usages, targets).value


def test_ratio_loss_gradient_reaches_usages():
    tape = nx.Tape()
    usage = tape.watch(0.8)
    loss = losses.dynamic_ratio_loss([[usage]], [0.5])
    tape.backward(loss)
    assert usage.grad == pytest.approx(2 * 0.3)


def test_empty_schedule_costs_nothing():
    assert losses.dynamic_ratio_loss([[], []], []).value == 0.0
    assert losses.fixed_ratio_loss([], [0.5]).value == 0.0


def test_ratio_loss_checks_lengths():
    with pytest.raises(ShapeError):
        losses.fixed_ratio_loss([[0.5, 0.5]], [0.5])


def test_ratio_loss_dispatch():
    usages = [[1.0], [0.0]]
    assert losses.ratio_loss("fixed", usages, [0.5]).value == 0.25
    with pytest.raises(ValueError):
        losses.ratio_loss("adaptive", usages, [0.5])


def test_task_loss_of_uniform_scores_is_log_k():
    loss = losses.task_loss(np.zeros((6, 4)), np.array([0, 1, 2, 3, 0, 1]))
    assert loss.value == pytest.approx(np.log(4.0))


def test_task_loss_rejects_bad_labels():
    with pytest.raises(LabelError):
        losses.task_loss(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ShapeError):
        losses.task_loss(np.zeros((2, 3)), np.array([0, 1, 2]))


def test_total_loss():
    total = losses.total_loss(nx.Var(1.5), nx.Var(0.25), 4.0)
    assert total.value == 2.5
    with pytest.raises(ValueError):
        losses.total_loss(nx.Var(1.0), nx.Var(1.0), -1.0)


def test_loss_report_record():
    report = losses.LossReport.from_vars(nx.Var(1.0), nx.Var(0.5),
                                         nx.Var(3.0), [0.7, 0.4])
    assert report.usage == (0.7, 0.4)
    assert report.to_record() == {"task": 1.0, "ratio": 0.5, "total": 3.0}
