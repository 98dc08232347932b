import math

import numpy as np
import pytest

from caveseg import dataset as D
from caveseg import model as M
from caveseg import tensor as T
from caveseg.errors import ParameterError, TrainingError, UsageError
from caveseg.tensor import Tensor
from caveseg.trainer import OptimizerState, TrainConfig, evaluate, sgd_step, train

TINY = M.PRESETS["tiny"]


def param(w, g):
    p = Tensor(np.array([w], dtype=float), requires_grad=True)
    p.grad = np.array([g], dtype=float)
    return p


def test_sgd_plain_step():
    p = param(1.0, 1.0)
    sgd_step({"w": p}, OptimizerState(0.1, 0.0))
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_momentum_two_steps():
    p = param(1.0, 1.0)
    st = OptimizerState(0.1, 0.9)
    sgd_step({"w": p}, st)
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    p.grad = np.array([1.0])
    sgd_step({"w": p}, st)
    assert st.velocity["w"][0] == pytest.approx(1.9, abs=1e-15)
    assert p.data[0] == pytest.approx(0.71, abs=1e-15)


def test_momentum_moves_weight_with_zero_gradient():
    p = param(1.0, 1.0)
    st = OptimizerState(0.1, 0.9)
    sgd_step({"w": p}, st)
    p.grad = np.array([0.0])
    before = p.data[0]
    sgd_step({"w": p}, st)
    assert p.data[0] != before
    q = param(1.0, 0.0)
    sgd_step({"q": q}, OptimizerState(0.1, 0.9))
    assert q.data[0] == 1.0


def test_momentum_zero_equals_gradient_descent():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 4))
    g = rng.standard_normal((3, 4))
    p = Tensor(w.copy(), requires_grad=True)
    p.grad = g.copy()
    sgd_step({"p": p}, OptimizerState(0.05, 0.0))
    np.testing.assert_array_equal(p.data, w - 0.05 * g)


def test_sgd_errors():
    with pytest.raises(UsageError):
        sgd_step({"w": Tensor(np.zeros(2), requires_grad=True)}, OptimizerState())
    with pytest.raises(ParameterError):
        OptimizerState(0.0)
    with pytest.raises(ParameterError):
        OptimizerState(0.1, 1.0)


@pytest.fixture(scope="module")
def samples():
    return D.synthetic_dataset(3, seed=1, h=32, w=32)


def test_epochs_zero_leaves_weights(samples):
    m = M.CaveSegModel.initialize(TINY, 0)
    before = {k: v.data.copy() for k, v in m.weights.items()}
    report = train(m, samples, config=TrainConfig(epochs=0))
    assert report.losses == [] and report.val_metrics == []
    for k, v in m.weights.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_same_seed_same_losses(samples, tmp_path):
    runs = []
    for k in range(2):
        m = M.CaveSegModel.initialize(TINY, 3)
        cfg = TrainConfig(epochs=2, seed=5, learning_rate=1e-3, log_path=str(tmp_path / f"log{k}"),
                          checkpoint_path=str(tmp_path / f"ck{k}"))
        runs.append(train(m, samples, samples[:1], cfg))
    assert runs[0].losses == runs[1].losses
    assert len(runs[0].losses) == 6
    assert (tmp_path / "log0").read_bytes() == (tmp_path / "log1").read_bytes()
    assert (tmp_path / "ck0").read_bytes() == (tmp_path / "ck1").read_bytes()
    log = (tmp_path / "log0").read_text().splitlines()
    assert log[1].startswith("step 0 loss ")
    assert any(l.startswith("epoch 1 val mIoU") for l in log)
    for metrics in runs[0].val_metrics:
        assert all(0 <= v <= 1 for v in metrics.values())


def test_small_step_does_not_increase_loss(samples):
    m = M.CaveSegModel.initialize(TINY, 0)
    x = M.image_to_tensor(samples[0].image)
    labels = samples[0].labels
    loss0 = T.cross_entropy(m(x), labels)
    T.backward(loss0)
    sgd_step(m.weights, OptimizerState(1e-6, 0.9))
    m.zero_grad()
    with T.no_grad():
        loss1 = float(T.cross_entropy(m(x), labels).data)
    assert loss1 <= float(loss0.data) + 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_names_step(samples):
    m = M.CaveSegModel.initialize(TINY, 0)
    m.weights["classifier.bias"].data[0] = math.inf
    with pytest.raises(TrainingError, match="step 0"):
        train(m, samples, config=TrainConfig(epochs=1))


def test_best_epoch_checkpoint_selected(samples, tmp_path):
    from caveseg.checkpoint import load_checkpoint

    m = M.CaveSegModel.initialize(TINY, 0)
    cfg = TrainConfig(epochs=3, seed=0, learning_rate=5e-3, checkpoint_path=str(tmp_path / "best.ckpt"))
    report = train(m, samples, samples[:2], cfg)
    scores = [v["mIoU"] for v in report.val_metrics]
    best = max(scores)
    assert report.best_epoch == max(i for i, s in enumerate(scores) if s == best)
    restored = load_checkpoint(tmp_path / "best.ckpt")
    s = evaluate(restored, samples[:2]).summarize()
    assert s["mIoU"] == best


def test_empty_training_split():
    with pytest.raises(ParameterError):
        train(M.CaveSegModel.initialize(TINY, 0), [])


def test_report_dict_excludes_timing_by_default(samples):
    r = train(M.CaveSegModel.initialize(TINY, 0), samples[:1], config=TrainConfig(epochs=1))
    assert "epoch_seconds" not in r.to_dict()
    assert len(r.to_dict(include_timing=True)["epoch_seconds"]) == 1
