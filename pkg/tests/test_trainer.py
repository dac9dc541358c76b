import json
import struct
import warnings

import numpy as np
import pytest

from icnet import autograd as ag
from icnet import datasets, models, trainer
from icnet.autograd import Variable
from icnet.tensor_core import NonFiniteError
from icnet.trainer import CheckpointError, TrainConfig, sgd_step


@pytest.fixture(scope="module")
def blobs():
    return datasets.load_splits("blobs", n_train=96, n_test=48)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=32, lr=0.05, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- SGD -------------------------------------------------------------------------


def test_sgd_matches_hand_rolled_momentum():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(4)]
    lr, mu, wd = 0.1, 0.9, 1e-4
    # independent loop over plain floats
    expect, v = p0.copy(), np.zeros(5)
    for g in grads:
        v = mu * v + (g + wd * expect)
        expect = expect - lr * v
    p = Variable(p0.copy(), requires_grad=True)
    state = {}
    for g in grads:
        p.grad = g
        sgd_step({"p": p}, state, lr, mu, wd)
    np.testing.assert_allclose(p.value, expect, rtol=0, atol=1e-15)


def test_zero_gradient_is_pure_shrinkage():
    p = Variable(np.array([2.0, -4.0]), requires_grad=True)
    p.grad = np.zeros(2)
    state = {}
    sgd_step({"p": p}, state, lr=0.1, momentum=0.9, weight_decay=1e-2)
    np.testing.assert_allclose(p.value, np.array([2.0, -4.0]) * (1 - 0.1 * 1e-2), rtol=1e-15)
    np.testing.assert_allclose(state["p"], np.array([2.0, -4.0]) * 1e-2)


def test_missing_gradient_counts_as_zero():
    p = Variable(np.array([1.0]), requires_grad=True)
    sgd_step({"p": p}, {}, lr=0.5, momentum=0.0, weight_decay=0.0)
    assert p.value[0] == 1.0


def test_non_finite_gradient_aborts():
    p = Variable(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="p"):
        sgd_step({"p": p}, {}, 0.1)
    assert p.value.tolist() == [1.0, 2.0]


def test_lr_steps():
    cfg = TrainConfig(epochs=10, lr=0.1, lr_steps=(3, 6), lr_factor=0.1)
    assert [round(cfg.lr_at(e), 12) for e in (0, 2, 3, 5, 6, 9)] == [0.1, 0.1, 0.01, 0.01, 0.001, 0.001]


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0}, {"momentum": 1.0}, {"weight_decay": -1}, {"dtype": "f16"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        _cfg(**kw)


# -- loop ----------------------------------------------------------------------------


def test_training_reduces_loss_and_is_deterministic(blobs):
    train, test = blobs
    runs = []
    for _ in range(2):
        m = models.build("tiny-cnn", seed=1)
        runs.append((m, trainer.train(m, train, _cfg(epochs=3), test)))
    (m1, r1), (m2, r2) = runs
    assert r1.records == r2.records
    losses = [r.loss for r in r1.records if r.split == "train"]
    assert losses[-1] < losses[0]
    assert [r.split for r in r1.records] == ["train", "test"] * 3
    s1, s2 = m1.state_dict(), m2.state_dict()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)


def test_wall_time_off_by_default(blobs):
    train, _ = blobs
    m = models.build("tiny-cnn", seed=0)
    rec = trainer.train(m, train, _cfg(epochs=1)).records
    assert rec[0].wall_ms == 0.0
    rec = trainer.train(m, train, _cfg(epochs=1, record_wall_time=True)).records
    assert rec[0].wall_ms > 0.0


def test_empty_and_mismatched_datasets(blobs):
    train, _ = blobs
    m = models.build("tiny-cnn", seed=0)
    with pytest.raises(ValueError, match="empty"):
        trainer.train(m, train.subset(0), _cfg())
    other = models.build(models.tiny_cnn_spec(num_classes=3))
    with pytest.raises(ValueError, match="classes"):
        trainer.train(other, train, _cfg())


def test_divergence_is_reported(blobs):
    train, _ = blobs
    m = models.build("tiny-cnn", seed=0)

    def nan_loss(model, xb, yb, progress):
        logits = model.forward(xb, training=True)
        return ag.scale(ag.cross_entropy(logits, yb), np.nan), logits

    with pytest.raises(trainer.DivergenceError):
        trainer.train(m, train, _cfg(), loss_fn=nan_loss)


def test_evaluate_breaks_ties_toward_lowest_class(blobs):
    _, test = blobs
    m = models.build("tiny-cnn", seed=0)
    dense = m.layers[-1]
    dense.weight.value[:] = 0.0
    dense.bias.value[:] = 0.0
    loss, top1 = trainer.evaluate(m, test)
    assert top1 == pytest.approx(float((test.y == 0).mean()))
    assert loss == pytest.approx(np.log(10))


def test_metrics_files(tmp_path, blobs):
    train, test = blobs
    m = models.build("tiny-cnn", seed=0)
    with trainer.MetricsWriter(tmp_path) as w:
        res = trainer.train(m, train, _cfg(), test, writer=w)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,split,loss,top1,lambda,alpha,lr,wall_ms"
    rows = trainer.read_metrics(tmp_path / "metrics.csv")
    jrows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == len(jrows) == len(res.records)
    for r, j, rec in zip(rows, jrows, res.records):
        assert r == j
        assert r["loss"] == rec.loss and r["top1"] == rec.top1


# -- checkpoints ---------------------------------------------------------------


@pytest.fixture
def trained_ic(blobs):
    train, _ = blobs
    base = models.build("tiny-cnn", seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ic = models.replace_with_ic(base, "all_3x3", seed=2, biases=True)
    res = trainer.train(ic, train, _cfg(epochs=1))
    return ic, res.velocity


def test_checkpoint_round_trip(tmp_path, trained_ic, blobs):
    ic, velocity = trained_ic
    blob = trainer.save_checkpoint(tmp_path / "m.icck", ic, velocity, epoch=1, seed=2)
    assert blob[:4] == b"ICCK" and struct.unpack("<I", blob[4:8])[0] == trainer.VERSION
    ck = trainer.load_checkpoint(tmp_path / "m.icck")
    m, v = trainer.restore(ck)
    x = blobs[1].x
    np.testing.assert_array_equal(m.logits(x), ic.logits(x))
    assert set(v) == set(velocity) and all(np.array_equal(v[k], velocity[k]) for k in v)
    assert ck.meta["epoch"] == 1 and ck.meta["seed"] == 2
    assert trainer.encode_checkpoint(trainer.make_checkpoint(m, v, 1, 2)) == blob


def test_checkpoint_preserves_float32(tmp_path):
    m = models.build("tiny-cnn", seed=0, dtype="f32")
    trainer.save_checkpoint(tmp_path / "m.icck", m)
    ck = trainer.load_checkpoint(tmp_path / "m.icck")
    assert all(v.dtype == np.float32 for v in ck.tensors.values())
    restored, _ = trainer.restore(ck)
    assert restored.dtype == np.float32


def test_checkpoint_rejects_corruption(trained_ic):
    ic, velocity = trained_ic
    blob = trainer.encode_checkpoint(trainer.make_checkpoint(ic, velocity))
    with pytest.raises(CheckpointError, match="ICCK"):
        trainer.decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        trainer.decode_checkpoint(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        trainer.decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        trainer.decode_checkpoint(blob + b"\0")


def test_checkpoint_rejects_other_architecture(trained_ic):
    ic, _ = trained_ic
    ck = trainer.make_checkpoint(ic)
    with pytest.raises(CheckpointError, match="hash"):
        trainer.restore(ck, models.build("tiny-cnn"))
