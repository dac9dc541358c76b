import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import softmax_literal

from icnet import autograd as ag
from icnet import datasets, models, trainer, wld
from icnet.autograd import Variable
from icnet.wld import DistillConfig, kd_grad, kd_loss, lambda_at, soft_targets, wld_loss


def _entropy(p):
    return -sum(pi * np.log(pi) for pi in p if pi > 0)


def test_soft_targets_match_literal_softmax(rng):
    z = rng.normal(size=(5, 10)) * 4
    for tau in (0.5, 1.0, 4.0):
        lit = np.array([softmax_literal(row, tau) for row in z])
        np.testing.assert_allclose(soft_targets(z, tau), lit, rtol=1e-13, atol=1e-15)


def test_soft_targets_flatten_with_temperature():
    z = np.array([3.0, 1.0, -2.0])
    assert np.ptp(soft_targets(z, 100.0)) < np.ptp(soft_targets(z, 1.0))
    with pytest.raises(ValueError):
        soft_targets(z, 0.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), tau=st.sampled_from([0.5, 1.0, 2.0, 4.0, 8.0]), n=st.integers(1, 6))
def test_kd_gradient_matches_autograd(seed, tau, n):
    r = np.random.default_rng(seed)
    t = r.normal(size=(n, 10)) * 3
    s = Variable(r.normal(size=(n, 10)) * 3, requires_grad=True)
    kd_loss(t, s, tau).backward()
    assert np.max(np.abs(s.grad - kd_grad(t, s.value, tau))) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), tau=st.sampled_from([1.0, 4.0]))
def test_kd_value_bounded_by_teacher_entropy(seed, tau):
    r = np.random.default_rng(seed)
    t = r.normal(size=(1, 10)) * 3
    s = r.normal(size=(1, 10)) * 3
    floor = tau**2 * _entropy(soft_targets(t, tau)[0])
    assert kd_loss(t, s, tau).item() >= floor - 1e-12
    assert kd_loss(t, t, tau).item() == pytest.approx(floor, rel=1e-12)


def test_kd_scales_with_tau_squared_at_matched_distributions(rng):
    z = rng.normal(size=(1, 10))
    h = _entropy(softmax_literal(z[0], 1.0))
    for tau in (1.0, 2.0, 4.0, 8.0):
        # logits tau * z soften back to softmax(z) at every temperature
        val = kd_loss(tau * z, tau * z, tau).item()
        assert val / tau**2 == pytest.approx(h, rel=1e-12)


def test_kd_gradient_vanishes_for_identical_logits(rng):
    s = Variable(rng.normal(size=(8, 10)), requires_grad=True)
    kd_loss(s.value, s, 4.0).backward()
    assert np.linalg.norm(s.grad) <= 1e-10


def test_kd_is_batch_mean(rng):
    t, s = rng.normal(size=(4, 10)), rng.normal(size=(4, 10))
    per = [kd_loss(t[i:i + 1], s[i:i + 1], 4.0).item() for i in range(4)]
    assert kd_loss(t, s, 4.0).item() == pytest.approx(np.mean(per), rel=1e-13)


# -- combined loss ---------------------------------------------------------------


def test_hinge_switches_off_distillation_below_threshold():
    ce = Variable(np.array(1.3), requires_grad=True)
    kd = Variable(np.array(0.004), requires_grad=True)
    rep = wld_loss(ce, kd, 0.9, 0.005)
    assert not rep.kd_active
    assert rep.L == pytest.approx(0.1 * 1.3, rel=1e-15)
    rep.total.backward()
    assert kd.grad == 0.0 and ce.grad == pytest.approx(0.1)


def test_hinge_active_above_threshold():
    rep = wld_loss(1.3, 0.5, 0.25, 0.005)
    assert rep.kd_active
    assert rep.L == pytest.approx(0.75 * 1.3 + 0.25 * (0.5 - 0.005), rel=1e-15)


def test_literal_form_hinges_cross_entropy():
    rep = wld_loss(0.003, 0.5, 0.5, 0.005, kd_form="literal")
    assert rep.L == pytest.approx(0.5 * 0.003)
    rep = wld_loss(1.0, 0.5, 0.5, 0.005, kd_form="literal")
    assert rep.L == pytest.approx(0.5 + 0.5 * 0.995)


def test_lambda_extremes():
    assert wld_loss(1.7, 3.0, 0.0, 0.005).L == 1.7
    assert wld_loss(1.7, 3.0, 1.0, 0.005).L == pytest.approx(2.995)
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            wld_loss(1.0, 1.0, bad, 0.005)
    with pytest.raises(ValueError):
        wld_loss(1.0, 1.0, 0.5, 0.005, kd_form="kl")


# -- schedules -----------------------------------------------------------------


def test_linear_lambda_schedule():
    cfg = DistillConfig()
    assert lambda_at(cfg, 0.0) == 0.9 and lambda_at(cfg, 1.0) == 0.1
    vals = [lambda_at(cfg, p) for p in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert lambda_at(cfg, 0.5) == pytest.approx(0.5)


def test_step_and_constant_lambda():
    cfg = DistillConfig(lambda_decay="step", lambda_steps=3)
    assert [lambda_at(cfg, p) for p in (0.0, 0.3, 0.4, 0.7, 1.0)] == pytest.approx([0.9, 0.9, 0.5, 0.1, 0.1])
    assert lambda_at(DistillConfig(lambda_decay="constant"), 0.7) == 0.9


def test_manual_alpha_schedule():
    cfg = DistillConfig(alpha_mode="manual", alpha_start=0.0, alpha_end=0.04)
    assert wld.alpha_at(cfg, 0.0) == 0.0 and wld.alpha_at(cfg, 1.0) == 0.04


@pytest.mark.parametrize(
    "kw",
    [{"tau": 0}, {"e": -1}, {"lambda_start": 1.5}, {"lambda_decay": "cosine"}, {"alpha_mode": "auto"}, {"kd_form": "kl"}, {"teacher_bn": "x"}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DistillConfig(**kw)


# -- end to end ----------------------------------------------------------------


@pytest.fixture(scope="module")
def setup():
    train, test = datasets.load_splits("blobs", n_train=96, n_test=48)
    teacher = models.build("tiny-cnn", seed=4)
    trainer.train(teacher, train, trainer.TrainConfig(epochs=1, batch_size=32, lr=0.05))
    return teacher, train, test


def _student(teacher, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return models.replace_with_ic(teacher, "all_3x3", "from_pretrained", seed=4, **kw)


def _tcfg():
    return trainer.TrainConfig(epochs=2, batch_size=32, lr=0.05, seed=1)


def test_initial_student_gradient_of_kd_is_zero(setup):
    teacher, train, _ = setup
    student = _student(teacher)
    xb = train.x[:16]
    with ag.no_grad(), teacher.frozen_stats():
        t_logits = teacher.forward(xb, training=True).value
    with student.frozen_stats():
        s_logits = student.forward(xb, training=True)
    np.testing.assert_array_equal(s_logits.value, t_logits)
    per_sample = kd_grad(t_logits, s_logits.value, 4.0) * len(xb)
    assert np.max(np.linalg.norm(per_sample, axis=1)) <= 1e-10


def test_lambda_zero_matches_plain_training_bitwise(setup):
    teacher, train, test = setup
    a, b = _student(teacher), _student(teacher)
    ra = wld.distill_train(teacher, a, DistillConfig(lambda_start=0.0, lambda_end=0.0), _tcfg(), train, test)
    rb = trainer.train(b, train, _tcfg(), test)
    assert ra.records == rb.records
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_teacher_is_frozen(setup):
    teacher, train, _ = setup
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    reports = []
    wld.distill_train(teacher, _student(teacher), DistillConfig(), _tcfg(), train, reports=reports)
    after = teacher.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert reports and all(0.1 <= r.lam <= 0.9 for r in reports)


def test_trainable_alpha_moves_and_lambda_is_logged(setup):
    teacher, train, test = setup
    student = _student(teacher)
    res = wld.distill_train(teacher, student, DistillConfig(), _tcfg(), train, test)
    lams = [r.lam for r in res.records if r.split == "train"]
    assert lams == [0.9, 0.1]
    assert student.mean_alpha() != 0.0


def test_manual_alpha_follows_schedule(setup):
    teacher, train, _ = setup
    student = _student(teacher, alpha_mode="manual")
    cfg = DistillConfig(alpha_mode="manual", alpha_start=0.0, alpha_end=0.03)
    res = wld.distill_train(teacher, student, cfg, _tcfg(), train)
    assert [r.alpha for r in res.records] == pytest.approx([0.0, 0.03])
    assert all(not l.alpha.requires_grad for _, l in student.ic_layers())


def test_student_must_start_at_teacher(setup):
    teacher, train, _ = setup
    scratch = models.replace_with_ic(teacher, "all_3x3", "scratch", seed=0)
    with pytest.raises(wld.TeacherMismatchError):
        wld.distill_train(teacher, scratch, DistillConfig(), _tcfg(), train)
