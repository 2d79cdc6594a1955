"""Composite training objective with one-way knowledge transfer.

The total objective sums the student's supervised loss, distillation of
the student toward a frozen reference model and toward the jointly trained
wide model, plus the wide model's own supervised and distillation losses.
Every distillation term detaches its target side, so knowledge only flows
from stronger to weaker and never backwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ops import kd_kl_divergence, softmax_cross_entropy
from .tensor import Tensor


@dataclass
class LossConfig:
    """Weights and toggles for the composite objective."""

    static_weight: float = 1.0  # weight on the student<-static distillation term
    temperature: float = 4.0
    use_static_teacher: bool = False
    teacher_ce: bool = True
    dynamic_kd: bool = True

    def __post_init__(self):
        if self.static_weight < 0.0:
            raise ValueError(f"static_weight must be >= 0, got {self.static_weight}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class LossBreakdown:
    """Scalar tensors for each objective component; ``total`` carries the tape."""

    ce_student: Tensor
    kd_student_static: Tensor
    ce_teacher: Tensor
    kd_student_dynamic: Tensor
    kd_dynamic_static: Tensor
    total: Tensor

    def values(self) -> dict:
        return {
            "ce_s": self.ce_student.item(),
            "kd_ss": self.kd_student_static.item(),
            "ce_t": self.ce_teacher.item(),
            "kd_sd": self.kd_student_dynamic.item(),
            "kd_ds": self.kd_dynamic_static.item(),
            "total": self.total.item(),
        }


_ZERO = None


def _zero() -> Tensor:
    # fresh constant each call so nothing aliases across breakdowns
    return Tensor(0.0)


def gpd_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    labels: np.ndarray,
    cfg: LossConfig,
    static_logits: Optional[Tensor] = None,
) -> LossBreakdown:
    """Compose the full objective from both views' logits.

    Distillation targets are detached structurally: the wide model's logits
    enter the student's distillation term as values only, and the frozen
    reference's logits never join the tape at all. Disabled terms are exact
    zeros that do not appear on the tape.
    """
    if cfg.use_static_teacher and static_logits is None:
        raise ValueError("static teacher enabled but no static logits supplied")
    if not cfg.use_static_teacher and static_logits is not None:
        raise ValueError("static logits supplied but use_static_teacher is off")

    tau = cfg.temperature
    ce_student = softmax_cross_entropy(student_logits, labels)
    ce_teacher = softmax_cross_entropy(teacher_logits, labels) if cfg.teacher_ce else _zero()
    kd_student_dynamic = (
        kd_kl_divergence(student_logits, teacher_logits, tau) if cfg.dynamic_kd else _zero()
    )
    if cfg.use_static_teacher:
        kd_student_static = kd_kl_divergence(student_logits, static_logits, tau)
        kd_dynamic_static = kd_kl_divergence(teacher_logits, static_logits, tau)
    else:
        kd_student_static = _zero()
        kd_dynamic_static = _zero()

    total = ce_student + ce_teacher + kd_student_dynamic
    if cfg.use_static_teacher:
        total = total + cfg.static_weight * kd_student_static + kd_dynamic_static
    return LossBreakdown(ce_student, kd_student_static, ce_teacher,
                         kd_student_dynamic, kd_dynamic_static, total)


@dataclass
class StopGradientCheck:
    name: str
    passed: bool
    deviation: float
    detail: str = ""


def verify_stop_gradient(seed: int = 0) -> list:
    """Exercise the detachment and linearity contracts on a small model.

    Returns one check record per contract: distillation terms must leave
    wide-only parameter coordinates untouched (exactly zero), the wide
    model's supervised loss must reach them, and the total's gradient must
    equal the sum of per-term gradients.
    """
    from .expand import ExpansionPlan, expand_model
    from .model import build_student, forward

    rng = np.random.default_rng(seed)
    student = build_student("convnet-tiny", (1, 8, 8), 4, seed=seed)
    wide = expand_model(student, ExpansionPlan(ratio=2, branches=2, epsilon=1e-2, seed=seed))
    x = Tensor(rng.normal(size=(4, 1, 8, 8)))
    labels = rng.integers(0, 4, size=4)
    static = Tensor(rng.normal(size=(4, 4)))
    cfg = LossConfig(use_static_teacher=True)

    def grads_for(term_fn) -> dict:
        wide.zero_grad()
        t_logits = forward(wide, x, "teacher", "eval")
        s_logits = forward(wide, x, "student", "eval")
        term_fn(s_logits, t_logits).backward()
        return {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in wide.parameters()}

    def wide_only_mass(grads: dict) -> float:
        """Gradient magnitude on coordinates only the wide view can reach:
        scale-vector entries and batch-norm affine entries beyond the
        student's channel slice."""
        from .expand import DualBNState, ExpandedBlock

        total = 0.0
        for i, prm in enumerate(wide.params):
            if isinstance(prm, ExpandedBlock):
                for m_idx in range(len(prm.scales)):
                    g = grads[f"layer{i}.scale{m_idx}"]
                    if g.shape[0] > prm.base_out:
                        total = max(total, float(np.max(np.abs(g[prm.base_out:]))))
            elif isinstance(prm, DualBNState):
                c = prm.base_channels
                for key in ("gamma", "beta"):
                    g = grads[f"layer{i}.{key}"]
                    if g.shape[0] > c:
                        total = max(total, float(np.max(np.abs(g[c:]))))
        return total

    checks = []

    g_kd = grads_for(lambda s, t: kd_kl_divergence(s, t, cfg.temperature))
    dev = wide_only_mass(g_kd)
    checks.append(StopGradientCheck(
        "student<-dynamic distillation leaves wide-only coordinates at zero",
        dev == 0.0, dev))

    any_student_path = max(float(np.max(np.abs(g))) for g in g_kd.values())
    checks.append(StopGradientCheck(
        "student<-dynamic distillation reaches shared parameters via the student path",
        any_student_path > 0.0, any_student_path))

    g_ce = grads_for(lambda s, t: softmax_cross_entropy(t, labels))
    dev = wide_only_mass(g_ce)
    checks.append(StopGradientCheck(
        "wide model's supervised loss reaches wide-only coordinates",
        dev > 0.0, dev))

    g_static = grads_for(lambda s, t: kd_kl_divergence(t, static, cfg.temperature))
    live = max(float(np.max(np.abs(g))) for g in g_static.values())
    checks.append(StopGradientCheck(
        "dynamic<-static distillation trains the dynamic side",
        live > 0.0, live))

    # Linearity: gradient of the composed total equals the per-term sum.
    def total_fn(s, t):
        lb = gpd_loss(s, t, labels, cfg, static_logits=static)
        return lb.total

    g_total = grads_for(total_fn)
    per_term = [
        grads_for(lambda s, t: softmax_cross_entropy(s, labels)),
        grads_for(lambda s, t: cfg.static_weight * kd_kl_divergence(s, static, cfg.temperature)),
        grads_for(lambda s, t: softmax_cross_entropy(t, labels)),
        grads_for(lambda s, t: kd_kl_divergence(s, t, cfg.temperature)),
        grads_for(lambda s, t: kd_kl_divergence(t, static, cfg.temperature)),
    ]
    dev = 0.0
    for name in g_total:
        summed = sum(g[name] for g in per_term)
        dev = max(dev, float(np.max(np.abs(g_total[name] - summed))))
    checks.append(StopGradientCheck(
        "total gradient equals the sum of per-term gradients", dev < 1e-12, dev))
    return checks
