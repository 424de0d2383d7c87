import math

import numpy as np
import pytest

from dsnlab import data as D
from dsnlab import trainer as Tr
from dsnlab.tensor import Tensor


def _param(v):
    return Tensor(np.array([float(v)]), requires_grad=True, name="p")


def test_plain_sgd_step():
    p = _param(1.0)
    Tr.sgd_momentum_step([p], {p: np.array([2.0])}, Tr.OptimizerState(lr=0.1, momentum=0.0))
    assert p.data.tolist() == [0.8]


def test_momentum_two_steps():
    p = _param(0.0)
    st = Tr.OptimizerState(lr=0.1, momentum=0.9)
    Tr.sgd_momentum_step([p], {p: np.array([1.0])}, st)
    assert p.data.tolist() == [-0.1]
    Tr.sgd_momentum_step([p], {p: np.array([1.0])}, st)
    assert p.data.item() == pytest.approx(-0.29, abs=1e-15)
    assert st.step == 2


def test_lr_schedule():
    assert Tr.lr_schedule(0.01, 0, 0.9, 100) == 0.01
    assert Tr.lr_schedule(0.01, 99, 0.9, 100) == 0.01
    assert Tr.lr_schedule(0.01, 100, 0.9, 100) == 0.01 * 0.9
    assert Tr.lr_schedule(0.01, 250, 0.9, 100) == 0.01 * 0.9 ** 2
    with pytest.raises(ValueError):
        Tr.lr_schedule(0.01, 1, 0.9, 0)


def test_optimizer_uses_decayed_rate():
    p = _param(0.0)
    st = Tr.OptimizerState(lr=1.0, momentum=0.0, decay_factor=0.5, decay_interval=1, step=1)
    Tr.sgd_momentum_step([p], {p: np.array([1.0])}, st)
    assert p.data.tolist() == [-0.5]


def test_gradient_shape_checked():
    p = _param(0.0)
    with pytest.raises(Exception, match="shape"):
        Tr.sgd_momentum_step([p], {p: np.ones(2)}, Tr.OptimizerState())


def _blobs_cfg(**kw):
    base = dict(scenario="blobs2d", variant="dsn", steps=60, eval_interval=30, warmup_steps=25,
                n_train=96, n_eval=30, batch_size=16, seed=2)
    base.update(kw)
    return Tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def blobs_run():
    return Tr.train(_blobs_cfg())


def test_warmup_gate_exact(blobs_run):
    recs = blobs_run.records
    for r in recs[:25]:
        assert r.l_total == r.l_task
        # adaptation terms are still measured during warmup
        assert not math.isnan(r.l_recon) and not math.isnan(r.l_sim)
    assert any(r.l_total != r.l_task for r in recs[25:])


def test_evaluation_schedule(blobs_run):
    evaluated = [r.step for r in blobs_run.records if not math.isnan(r.tgt_acc)]
    assert evaluated == [29, 59]
    assert 0.0 <= blobs_run.final.tgt_acc <= 1.0


def test_training_is_deterministic(blobs_run):
    again = Tr.train(_blobs_cfg())
    assert [r.csv_row() for r in again.records] == [r.csv_row() for r in blobs_run.records]
    for a, b in zip(again.model.params.tensors(), blobs_run.model.params.tensors()):
        assert a.data.tobytes() == b.data.tobytes()


def test_metrics_file(tmp_path):
    path = tmp_path / "m.csv"
    Tr.train(_blobs_cfg(variant="source_only", steps=10, eval_interval=5), metrics_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(Tr.CSV_HEADER)
    assert len(lines) == 11
    cells = lines[1].split(",")
    assert cells[0] == "0" and cells[3] == "" and cells[7] == ""
    assert lines[5].split(",")[7] != ""


def test_target_only_learns_the_target():
    res = Tr.train(_blobs_cfg(variant="target_only", steps=400, eval_interval=400, n_train=300))
    assert res.final.tgt_acc > 0.9


def test_numerical_error_reports_step():
    with pytest.raises(Tr.NumericalError) as err:
        Tr.train(_blobs_cfg(lr=1e6, steps=200))
    assert err.value.step > 0
    assert err.value.last is not None and err.value.last.step == err.value.step - 1


def test_pose_evaluation_reports_angle():
    cfg = Tr.TrainConfig(scenario="pose_glyph", variant="source_only", steps=3, eval_interval=3,
                         n_train=16, n_eval=8, batch_size=8)
    res = Tr.train(cfg)
    assert 0.0 <= res.final.angle_err <= 180.0


def test_evaluate_accuracy():
    pair = D.generate(D.default_spec("blobs2d", n_train=30, n_eval=30))
    res = Tr.train(_blobs_cfg(variant="source_only", steps=2, eval_interval=2, n_train=30))
    out = Tr.evaluate(res.model, pair.source_eval)
    assert set(out) == {"accuracy"} and 0.0 <= out["accuracy"] <= 1.0
