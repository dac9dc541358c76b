"""Weak logit distillation: fine-tune an IC student against its plain-conv teacher.

The student starts as an exact copy of the teacher (alpha = 0 in every IC
layer). Its loss mixes cross-entropy with a hinged distillation term::

    L = (1 - lam) * CE + lam * max(KD - e, 0)

so the teacher's soft targets only pull on the student once the two have
drifted apart by more than ``e``. ``lam`` decays over training.
"""

import math
from dataclasses import dataclass

import numpy as np

from icnet import autograd as ag
from icnet.trainer import train

KD_FORMS = ("weak_kd", "literal")
LAMBDA_DECAYS = ("linear", "step", "constant")
ALPHA_MODES = ("trainable", "manual")


@dataclass
class DistillConfig:
    tau: float = 4.0
    e: float = 0.005
    lambda_start: float = 0.9
    lambda_end: float = 0.1
    lambda_decay: str = "linear"
    lambda_steps: int = 4
    alpha_mode: str = "trainable"
    alpha_start: float = 0.0
    alpha_end: float = 0.1
    kd_form: str = "weak_kd"
    teacher_bn: str = "batch"
    init_tol: float = 1e-6

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.e < 0:
            raise ValueError("e must be non-negative")
        for lam in (self.lambda_start, self.lambda_end):
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"lambda {lam} outside [0, 1]")
        if self.lambda_decay not in LAMBDA_DECAYS:
            raise ValueError(f"unknown lambda decay {self.lambda_decay!r}")
        if self.lambda_decay == "step" and self.lambda_steps < 2:
            raise ValueError("step decay needs at least two steps")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"unknown alpha mode {self.alpha_mode!r}")
        if self.kd_form not in KD_FORMS:
            raise ValueError(f"unknown kd form {self.kd_form!r}")
        if self.teacher_bn not in ("batch", "running"):
            raise ValueError(f"unknown teacher batch-norm mode {self.teacher_bn!r}")


def lambda_at(cfg, progress):
    """Mixing weight at ``progress`` in [0, 1] through training."""
    progress = min(max(progress, 0.0), 1.0)
    a, b = cfg.lambda_start, cfg.lambda_end
    if cfg.lambda_decay == "constant":
        return a
    if cfg.lambda_decay == "linear":
        return a * (1.0 - progress) + b * progress
    k = min(math.floor(progress * cfg.lambda_steps), cfg.lambda_steps - 1)
    return a + (b - a) * k / (cfg.lambda_steps - 1)


def alpha_at(cfg, progress):
    """Manual alpha schedule: linear ramp from ``alpha_start`` to ``alpha_end``."""
    progress = min(max(progress, 0.0), 1.0)
    return cfg.alpha_start * (1.0 - progress) + cfg.alpha_end * progress


def soft_targets(logits, tau):
    if not tau > 0:
        raise ValueError("tau must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def kd_loss(teacher_logits, student_logits, tau):
    """``-tau^2 * mean_n sum_i p_t log p_s`` with both sides softened by ``tau``.

    ``student_logits`` is a Variable; the teacher side is a constant.
    """
    s = student_logits if isinstance(student_logits, ag.Variable) else ag.Variable(np.asarray(student_logits))
    pt = soft_targets(teacher_logits, tau).astype(s.dtype)
    n = s.shape[0] if s.ndim > 1 else 1
    logps = ag.log_softmax(ag.scale(s, 1.0 / tau))
    return ag.scale(ag.sum(ag.mul(logps, pt)), -(tau**2) / n)


def kd_grad(teacher_logits, student_logits, tau):
    """Analytic gradient of ``kd_loss`` w.r.t. the student logits: ``tau (p_s - p_t) / N``."""
    s = np.asarray(student_logits, dtype=np.float64)
    n = s.shape[0] if s.ndim > 1 else 1
    return tau * (soft_targets(s, tau) - soft_targets(teacher_logits, tau)) / n


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    return -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum(axis=-1)


@dataclass
class LossReport:
    L_ce: float
    L_kd: float
    L: float
    lam: float
    alpha: float
    kd_active: bool
    total: ag.Variable = None


def wld_loss(l_ce, l_kd, lam, e, kd_form="weak_kd", alpha=0.0):
    """Combine the two losses; arguments may be Variables (differentiable) or floats.

    ``weak_kd`` hinges the distillation term; ``literal`` hinges the
    cross-entropy term instead, which is the other reading of the formula.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if kd_form not in KD_FORMS:
        raise ValueError(f"unknown kd form {kd_form!r}")
    ce = l_ce if isinstance(l_ce, ag.Variable) else ag.Variable(np.asarray(l_ce, dtype=np.float64))
    kd = l_kd if isinstance(l_kd, ag.Variable) else ag.Variable(np.asarray(l_kd, dtype=np.float64))
    if kd_form == "weak_kd":
        hinged = ag.maximum(ag.sub(kd, e), 0.0)
        total = ag.add(ag.scale(ce, 1.0 - lam), ag.scale(hinged, lam))
        active = kd.item() > e
    else:
        hinged = ag.maximum(ag.sub(ce, e), 0.0)
        total = ag.add(ag.scale(ce, 1.0 - lam), ag.scale(hinged, lam))
        active = ce.item() > e
    return LossReport(ce.item(), kd.item(), total.item(), lam, alpha, active, total)


class TeacherMismatchError(ValueError):
    """The student does not reproduce its teacher at the start of distillation."""


def check_student_init(teacher, student, x, tol):
    """Largest logit difference between teacher and student on ``x`` (evaluation mode)."""
    if teacher.spec.num_classes != student.spec.num_classes:
        raise TeacherMismatchError("teacher and student disagree on the number of classes")
    gap = float(np.max(np.abs(teacher.logits(x) - student.logits(x))))
    if not gap <= tol:
        raise TeacherMismatchError(f"student differs from teacher by {gap:.3g} at step 0")
    return gap


def make_wld_loss_fn(teacher, cfg, reports=None):
    """Loss closure for :func:`icnet.trainer.train`; the teacher never receives gradients."""

    def loss_fn(model, xb, yb, progress):
        lam = lambda_at(cfg, progress)
        with ag.no_grad():
            if cfg.teacher_bn == "batch":
                with teacher.frozen_stats():
                    t_logits = teacher.forward(xb, training=True).value
            else:
                t_logits = teacher.forward(xb, training=False).value
        logits = model.forward(xb, training=True)
        ce = ag.cross_entropy(logits, yb)
        kd = kd_loss(t_logits, logits, cfg.tau)
        rep = wld_loss(ce, kd, lam, cfg.e, cfg.kd_form, model.mean_alpha())
        if reports is not None:
            reports.append(rep)
        return rep.total, logits

    return loss_fn


def distill_train(teacher, student, cfg, train_cfg, train_set, eval_set=None, writer=None, reports=None):
    """Fine-tune ``student`` with weak logit distillation from a frozen ``teacher``."""
    if train_set.num_classes != teacher.spec.num_classes:
        raise TeacherMismatchError("dataset and teacher disagree on the number of classes")
    probe = train_set.x[: min(len(train_set), 64)].astype(student.dtype, copy=False)
    check_student_init(teacher, student, probe, cfg.init_tol)
    for p in teacher.named_parameters().values():
        p.requires_grad = False

    if cfg.alpha_mode == "manual":
        for _, layer in student.ic_layers():
            layer.alpha.requires_grad = False

    def on_epoch_start(epoch, progress):
        if cfg.alpha_mode == "manual":
            student.set_alpha(alpha_at(cfg, progress))

    return train(
        student,
        train_set,
        train_cfg,
        eval_set=eval_set,
        loss_fn=make_wld_loss_fn(teacher, cfg, reports),
        on_epoch_start=on_epoch_start,
        lambda_at=lambda p: lambda_at(cfg, p),
        writer=writer,
    )
