"""Function-preserving model expansion along channel and branch dimensions.

Channel expansion replicates each kernel into blocks along its expanded
axes with a per-mode scaling so the wide model computes the same function
as the compact one. Two modes exist:

* ``paper``: the first layer is scaled 1/r and the last layer is left
  unscaled, so intermediate activations flow at 1/r of their original
  values and the final summation over input replicas restores them. Valid
  only for chains whose nonlinearities are positively homogeneous and that
  contain no batch norm (normalization would destroy the propagating
  scale).
* ``bn_safe``: every layer is scaled by one over its input-replica count
  (1 for the first layer, r otherwise), so each expanded channel carries
  the original activation value locally. Batch-norm parameters can then be
  tiled verbatim. Default for batch-norm-bearing models.

Branch expansion turns each (already channel-expanded) convolution into a
block of parallel conv stacks whose outputs are combined through learnable
per-channel scale vectors: the original kernel sits in branch 1 with unit
scales; extra randomly initialized [1x1 -> KxK] stacks start zero-scaled,
so the block's output equals the single convolution exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ShapeError
from .model import ModelGraph, ConvWeight, BNParams, WEIGHT_KINDS
from . import ops
from .tensor import Tensor

IR_MODES = ("paper", "bn_safe")
ROLES = ("first", "intermediate", "last")


@dataclass
class ExpansionPlan:
    """How to grow a compact model into its wide training-time counterpart."""

    ratio: int = 1
    branches: int = 1
    epsilon: float = 0.0
    ir_mode: str = "bn_safe"
    seed: int = 0

    def __post_init__(self):
        if self.ratio < 1 or self.branches < 1:
            raise ValueError(f"ratio and branches must be >= 1, got ({self.ratio}, {self.branches})")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.ir_mode not in IR_MODES:
            raise ValueError(f"unknown ir_mode '{self.ir_mode}'")


def _replica_counts(ratio: int, role: str):
    """(output replicas, input replicas) for a layer of the given role."""
    if role == "first":
        return ratio, 1
    if role == "intermediate":
        return ratio, ratio
    if role == "last":
        return 1, ratio
    raise ValueError(f"unknown role '{role}'")


def kernel_expand_scale(ir_mode: str, role: str, ratio: int) -> float:
    """Factor applied to every kernel replica block during expansion."""
    if ir_mode == "paper":
        return 1.0 / ratio if role in ("first", "intermediate") else 1.0
    # bn_safe: divide by the number of input replicas feeding the layer
    r_in = _replica_counts(ratio, role)[1]
    return 1.0 / r_in


def bias_expand_scale(ir_mode: str, role: str, ratio: int) -> float:
    """Factor applied to every bias replica during expansion."""
    if ir_mode == "paper" and role in ("first", "intermediate"):
        # activations flow at 1/r of their original values
        return 1.0 / ratio
    return 1.0


def expand_channels(w: ConvWeight, ratio: int, role: str, epsilon: float,
                    rng, ir_mode: str = "bn_safe") -> ConvWeight:
    """Replicate a kernel into scaled blocks along its expanded axes.

    Each replica block receives independent uniform noise in
    [-epsilon*std(W), +epsilon*std(W)] to break the symmetry between
    replicas during training; epsilon 0 reproduces the input function
    exactly.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if role not in ROLES:
        raise ValueError(f"unknown role '{role}'")
    if ratio == 1:
        return ConvWeight(
            Tensor(w.kernel.data.copy(), requires_grad=True),
            None if w.bias is None else Tensor(w.bias.data.copy(), requires_grad=True),
            w.stride, w.padding,
        )

    r_out, r_in = _replica_counts(ratio, role)
    c_out, c_in, k, _ = w.kernel.data.shape
    base = w.kernel.data * kernel_expand_scale(ir_mode, role, ratio)
    amp = epsilon * float(w.kernel.data.std())

    out = np.empty((r_out * c_out, r_in * c_in, k, k), dtype=np.float64)
    for ko in range(r_out):
        for ki in range(r_in):
            block = base.copy()
            if epsilon > 0.0:
                block += rng.uniform(-amp, amp, size=base.shape)
            out[ko * c_out:(ko + 1) * c_out, ki * c_in:(ki + 1) * c_in] = block

    bias = None
    if w.bias is not None:
        bbase = w.bias.data * bias_expand_scale(ir_mode, role, ratio)
        bias = Tensor(np.tile(bbase, r_out), requires_grad=True)
    return ConvWeight(Tensor(out, requires_grad=True), bias, w.stride, w.padding)


@dataclass
class DualBNState:
    """Shared batch-norm affine with independent per-view running statistics.

    gamma/beta span the expanded width; the compact view reads their first
    ``base_channels`` entries and owns the untiled statistics buffers, so
    neither view's forward can disturb the other's normalization state.
    """

    gamma: Tensor
    beta: Tensor
    teacher_mean: np.ndarray
    teacher_var: np.ndarray
    student_mean: np.ndarray
    student_var: np.ndarray
    momentum: float
    eps: float
    base_channels: int

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def forward_view(self, x: Tensor, view: str, mode: str) -> Tensor:
        if view == "teacher":
            return ops.batch_norm(x, self.gamma, self.beta, self.teacher_mean,
                                  self.teacher_var, self.momentum, self.eps, mode)
        c = self.base_channels
        return ops.batch_norm(x, self.gamma[:c], self.beta[:c], self.student_mean,
                              self.student_var, self.momentum, self.eps, mode)

    def copy(self) -> "DualBNState":
        return DualBNState(
            Tensor(self.gamma.data.copy(), requires_grad=self.gamma.requires_grad),
            Tensor(self.beta.data.copy(), requires_grad=self.beta.requires_grad),
            self.teacher_mean.copy(), self.teacher_var.copy(),
            self.student_mean.copy(), self.student_var.copy(),
            self.momentum, self.eps, self.base_channels,
        )


def expand_bn(p: BNParams, ratio: int, ir_mode: str = "bn_safe") -> DualBNState:
    """Tile batch-norm parameters to the expanded width with dual statistics."""
    if ir_mode == "paper":
        raise ValueError("batch-norm expansion is undefined in ir_mode 'paper'")
    c = p.channels
    return DualBNState(
        gamma=Tensor(np.tile(p.gamma.data, ratio), requires_grad=True),
        beta=Tensor(np.tile(p.beta.data, ratio), requires_grad=True),
        teacher_mean=np.tile(p.running_mean, ratio),
        teacher_var=np.tile(p.running_var, ratio),
        student_mean=p.running_mean.copy(),
        student_var=p.running_var.copy(),
        momentum=p.momentum,
        eps=p.eps,
        base_channels=c,
    )


@dataclass
class ExpandedBlock:
    """One expanded layer: parallel conv stacks combined by scale vectors.

    ``branches[0]`` is a single convolution holding the channel-expanded
    original kernel; later branches are [1x1 -> KxK] stacks. ``scales[m]``
    multiplies branch m's output per channel; at construction scales are
    (ones, zeros, ...) so the block computes exactly the branch-1 conv.
    """

    branches: List[List[ConvWeight]]
    scales: List[Tensor]
    role: str
    ratio: int
    base_out: int
    base_in: int

    def named_parameters(self, prefix: str):
        for m, stack in enumerate(self.branches):
            for j, cw in enumerate(stack):
                yield f"{prefix}.branch{m}.conv{j}.kernel", cw.kernel
                if cw.bias is not None:
                    yield f"{prefix}.branch{m}.conv{j}.bias", cw.bias
        for m, s in enumerate(self.scales):
            yield f"{prefix}.scale{m}", s

    def forward_teacher(self, x: Tensor) -> Tensor:
        out = None
        width = self.scales[0].shape[0]
        for stack, scale in zip(self.branches, self.scales):
            h = x
            for cw in stack:
                h = ops.conv2d(h, cw)
            h = h * scale.reshape(1, width, 1, 1)
            out = h if out is None else out + h
        return out

    def copy(self) -> "ExpandedBlock":
        return ExpandedBlock(
            [[_copy_cw(cw) for cw in stack] for stack in self.branches],
            [Tensor(s.data.copy(), requires_grad=s.requires_grad) for s in self.scales],
            self.role, self.ratio, self.base_out, self.base_in,
        )


def _copy_cw(cw: ConvWeight) -> ConvWeight:
    return ConvWeight(
        Tensor(cw.kernel.data.copy(), requires_grad=cw.kernel.requires_grad),
        None if cw.bias is None else Tensor(cw.bias.data.copy(), requires_grad=cw.bias.requires_grad),
        cw.stride, cw.padding,
    )


def expand_branches(w_expanded: ConvWeight, branches: int, rng, *,
                    role: str, ratio: int) -> ExpandedBlock:
    """Wrap a channel-expanded kernel into a multi-branch block.

    Extra branches use an internal width of ratio times the compact layer's
    input channels so channel extraction applies to their kernels the same
    way it does to main kernels. They carry no bias and no normalization,
    which keeps branch merging exact.
    """
    if branches < 1:
        raise ValueError(f"branch count must be >= 1, got {branches}")

    r_out, r_in = _replica_counts(ratio, role)
    wide_out, wide_in, k, _ = w_expanded.kernel.data.shape
    base_out, base_in = wide_out // r_out, wide_in // r_in
    mid = ratio * base_in

    stacks = [[w_expanded]]
    scales = [Tensor(np.ones(wide_out), requires_grad=True)]
    for _ in range(1, branches):
        w1 = rng.normal(0.0, np.sqrt(2.0 / wide_in), size=(mid, wide_in, 1, 1))
        w2 = rng.normal(0.0, np.sqrt(2.0 / (mid * k * k)), size=(wide_out, mid, k, k))
        stacks.append([
            ConvWeight(Tensor(w1, requires_grad=True), None, 1, 0),
            ConvWeight(Tensor(w2, requires_grad=True), None, w_expanded.stride, w_expanded.padding),
        ])
        scales.append(Tensor(np.zeros(wide_out), requires_grad=True))
    return ExpandedBlock(stacks, scales, role, ratio, base_out, base_in)


def expand_model(m: ModelGraph, plan: ExpansionPlan) -> ModelGraph:
    """Grow a plain model into its wide multi-branch counterpart.

    With epsilon 0 the returned model's teacher-view forward matches the
    source model's forward on every input (to accumulated rounding).
    """
    if m.is_expanded:
        raise ValueError("model is already expanded")
    if plan.ir_mode == "paper" and m.has_bn():
        raise ValueError("ir_mode 'paper' requires a batch-norm-free model")
    if plan.ratio == 1 and plan.branches == 1:
        return m.copy()

    rng = np.random.default_rng(plan.seed)
    params = []
    for spec, prm in zip(m.layers, m.params):
        if spec.kind in WEIGHT_KINDS:
            wide = expand_channels(prm, plan.ratio, spec.role, plan.epsilon, rng, plan.ir_mode)
            params.append(expand_branches(wide, plan.branches, rng, role=spec.role, ratio=plan.ratio))
        elif spec.kind == "bn":
            params.append(expand_bn(prm, plan.ratio, plan.ir_mode))
        else:
            params.append(None)

    return ModelGraph([s for s in m.layers], params, m.input_shape, m.classes,
                      arch=m.arch, ratio=plan.ratio, branches=plan.branches,
                      ir_mode=plan.ir_mode, epsilon=plan.epsilon, seed=plan.seed)
