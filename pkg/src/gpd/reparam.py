"""Closed-form extraction of the compact student from shared wide parameters.

Extraction is a two-step map applied layer by layer: slice the leading
channel block out of each kernel and rescale it (undoing the expansion
scaling), then merge each branch stack into a single kernel and sum the
branches weighted by the leading slice of their scale vectors. The map is
built from tape operations, so a loss computed through the extracted
student back-propagates into the shared wide parameters automatically.

``grad_pullback`` implements the same map's transpose by hand, against
plain arrays. It exists as an independent oracle for the tape route and as
the gradient path of the reference two-model training loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .expand import DualBNState, ExpandedBlock, _replica_counts
from .model import BNParams, ConvWeight, ModelGraph, WEIGHT_KINDS
from .tensor import Tensor


def kernel_extract_scale(ir_mode: str, role: str, ratio: int) -> float:
    """Scale restoring original magnitude to a sliced kernel."""
    if ir_mode == "paper":
        return float(ratio) if role in ("first", "intermediate") else 1.0
    # bn_safe: multiply back the input-replica count
    return float(_replica_counts(ratio, role)[1])


def bias_extract_scale(ir_mode: str, role: str, ratio: int) -> float:
    if ir_mode == "paper" and role in ("first", "intermediate"):
        return float(ratio)
    return 1.0


def extract_channels(w: ConvWeight, ratio: int, role: str, ir_mode: str = "bn_safe") -> ConvWeight:
    """Slice the leading channel block out of an expanded kernel and rescale.

    Differentiable: the gradient of the result lands in the sliced region of
    the wide kernel multiplied by the same scale; entries outside the slice
    receive exactly zero.
    """
    if role not in ("first", "intermediate", "last"):
        raise ValueError(f"unknown role '{role}'")
    if ratio == 1:
        return w

    r_out, r_in = _replica_counts(ratio, role)
    wide_out, wide_in = w.kernel.shape[:2]
    if wide_out % r_out or wide_in % r_in:
        raise ShapeError(
            f"ratio {ratio} does not divide expanded dims ({wide_out}, {wide_in}) for role '{role}'"
        )
    out_n, in_n = wide_out // r_out, wide_in // r_in

    kscale = kernel_extract_scale(ir_mode, role, ratio)
    kernel = w.kernel[:out_n, :in_n]
    if kscale != 1.0:
        kernel = kernel * kscale

    bias = None
    if w.bias is not None:
        bscale = bias_extract_scale(ir_mode, role, ratio)
        bias = w.bias[:out_n]
        if bscale != 1.0:
            bias = bias * bscale
    return ConvWeight(kernel, bias, w.stride, w.padding)


def merge_branch(stack: List[ConvWeight]) -> ConvWeight:
    """Collapse a [KxK] or [1x1 -> KxK] conv stack into one kernel.

    Convolving with the result equals running the stack sequentially for
    every input (padding belongs to the KxK stage only).
    """
    if len(stack) == 1:
        return stack[0]
    if len(stack) != 2:
        raise ShapeError(f"unsupported stack depth {len(stack)}; expected 1 or 2")
    w1, w2 = stack
    if w1.kernel_size != 1 or w1.stride != 1 or w1.padding != 0:
        raise ShapeError("stack's leading conv must be 1x1 with stride 1 and no padding")
    if w1.bias is not None:
        raise ShapeError("cannot merge a stack whose internal conv carries a bias")
    if w2.in_channels != w1.out_channels:
        raise ShapeError(
            f"stack channel chain mismatch: {w1.out_channels} -> {w2.in_channels}"
        )
    merged = ops.compose_1x1_kxk(w1.kernel, w2.kernel)
    return ConvWeight(merged, w2.bias, w2.stride, w2.padding)


def _stack_roles(depth: int, block_role: str) -> List[str]:
    """Role of each conv in a branch stack, by boundary position.

    Only the stack's first conv touches the block's (possibly unexpanded)
    input and only its last conv produces the block's (possibly unexpanded)
    output; internal dims are always expanded.
    """
    roles = []
    for j in range(depth):
        if j == 0 and block_role == "first":
            roles.append("first")
        elif j == depth - 1 and block_role == "last":
            roles.append("last")
        else:
            roles.append("intermediate")
    return roles


def merge_block(block: ExpandedBlock, ir_mode: str) -> ConvWeight:
    """Extract, merge, and scale-fold every branch; sum into one kernel."""
    total_kernel = None
    total_bias = None
    stride = pad = None
    for stack, scale in zip(block.branches, block.scales):
        roles = _stack_roles(len(stack), block.role)
        extracted = [extract_channels(cw, block.ratio, r, ir_mode) for cw, r in zip(stack, roles)]
        merged = merge_branch(extracted)
        stride, pad = merged.stride, merged.padding

        s = scale[: block.base_out]
        k = merged.kernel * s.reshape(block.base_out, 1, 1, 1)
        total_kernel = k if total_kernel is None else total_kernel + k
        if merged.bias is not None:
            b = merged.bias * s
            total_bias = b if total_bias is None else total_bias + b
    return ConvWeight(total_kernel, total_bias, stride, pad)


@dataclass
class StudentView:
    """Per-use snapshot of the compact model implied by shared parameters.

    Merged kernels stay tape-connected to the owning model's leaves; the
    view is recomputed at every extraction, never cached across updates.
    """

    teacher: ModelGraph
    merged: Dict[int, ConvWeight]

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        m = self.teacher
        for i, (spec, prm) in enumerate(zip(m.layers, m.params)):
            if spec.kind == "conv":
                x = ops.conv2d(x, self.merged[i])
            elif spec.kind == "linear":
                n, d = x.data.shape
                out = ops.conv2d(x.reshape(n, d, 1, 1), self.merged[i])
                x = out.reshape(n, out.data.shape[1])
            elif spec.kind == "bn":
                if isinstance(prm, DualBNState):
                    x = prm.forward_view(x, "student", mode)
                else:
                    x = ops.batchnorm(x, prm, mode)
            elif spec.kind == "relu":
                x = ops.relu(x)
            elif spec.kind == "pool":
                x = ops.avgpool_global(x)
        return x


def extract_student(teacher: ModelGraph) -> StudentView:
    """Compute the student view of a model; identity view for plain models."""
    merged = {}
    for i, (spec, prm) in enumerate(zip(teacher.layers, teacher.params)):
        if spec.kind in WEIGHT_KINDS:
            merged[i] = merge_block(prm, teacher.ir_mode) if isinstance(prm, ExpandedBlock) else prm
    return StudentView(teacher, merged)


def materialize_student(teacher: ModelGraph, trainable: bool = False) -> ModelGraph:
    """Build a standalone plain model whose values equal the student view."""
    view = extract_student(teacher)
    params = []
    for i, (spec, prm) in enumerate(zip(teacher.layers, teacher.params)):
        if spec.kind in WEIGHT_KINDS:
            cw = view.merged[i]
            params.append(ConvWeight(
                Tensor(cw.kernel.data.copy(), requires_grad=trainable),
                None if cw.bias is None else Tensor(cw.bias.data.copy(), requires_grad=trainable),
                cw.stride, cw.padding,
            ))
        elif spec.kind == "bn":
            if isinstance(prm, DualBNState):
                c = prm.base_channels
                params.append(BNParams(
                    Tensor(prm.gamma.data[:c].copy(), requires_grad=trainable),
                    Tensor(prm.beta.data[:c].copy(), requires_grad=trainable),
                    prm.student_mean.copy(), prm.student_var.copy(),
                    prm.momentum, prm.eps,
                ))
            else:
                params.append(BNParams(
                    Tensor(prm.gamma.data.copy(), requires_grad=trainable),
                    Tensor(prm.beta.data.copy(), requires_grad=trainable),
                    prm.running_mean.copy(), prm.running_var.copy(),
                    prm.momentum, prm.eps,
                ))
        else:
            params.append(None)
    return ModelGraph([s for s in teacher.layers], params, teacher.input_shape,
                      teacher.classes, arch=teacher.arch, seed=teacher.seed)


# -- analytic transpose (tape-independent) -------------------------------------

def _extracted_value(cw: ConvWeight, ratio: int, role: str, ir_mode: str):
    """Numpy mirror of extract_channels: (kernel slice value, bias value, slices)."""
    if ratio == 1:
        out_n, in_n = cw.kernel.shape[:2]
        k = cw.kernel.data
        b = None if cw.bias is None else cw.bias.data
        return k, b, (out_n, in_n, 1.0, 1.0)
    r_out, r_in = _replica_counts(ratio, role)
    out_n = cw.kernel.shape[0] // r_out
    in_n = cw.kernel.shape[1] // r_in
    ks = kernel_extract_scale(ir_mode, role, ratio)
    bs = bias_extract_scale(ir_mode, role, ratio)
    k = ks * cw.kernel.data[:out_n, :in_n]
    b = None if cw.bias is None else bs * cw.bias.data[:out_n]
    return k, b, (out_n, in_n, ks, bs)


def merged_block_values(block: ExpandedBlock, ir_mode: str):
    """Numpy-only merged (kernel, bias) of a block: the extraction oracle."""
    total_k = None
    total_b = None
    for stack, scale in zip(block.branches, block.scales):
        roles = _stack_roles(len(stack), block.role)
        vals = [_extracted_value(cw, block.ratio, r, ir_mode) for cw, r in zip(stack, roles)]
        if len(stack) == 1:
            bk, bb = vals[0][0], vals[0][1]
        else:
            (k1, _, _), (k2, b2, _) = vals
            bk = np.einsum("omhw,mi->oihw", k2, k1[:, :, 0, 0])
            bb = b2
        s = scale.data[: block.base_out]
        total_k = (total_k if total_k is not None else 0.0) + s[:, None, None, None] * bk
        if bb is not None:
            total_b = (total_b if total_b is not None else 0.0) + s * bb
    return total_k, total_b


def grad_pullback(teacher: ModelGraph, student_grads: Dict[str, Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Map student-view parameter gradients onto the shared wide parameters.

    ``student_grads`` holds, per layer name ``layer{i}``, gradient arrays
    keyed ``kernel``/``bias`` (weight layers) or ``gamma``/``beta`` (batch
    norm), shaped like the compact student's parameters. Returns gradients
    keyed by the teacher's parameter names. Zero student gradients map to
    zero teacher gradients.
    """
    out: Dict[str, np.ndarray] = {}
    for i, (spec, prm) in enumerate(zip(teacher.layers, teacher.params)):
        name = f"layer{i}"
        grads = student_grads.get(name)
        if grads is None:
            continue
        if spec.kind in WEIGHT_KINDS:
            if isinstance(prm, ExpandedBlock):
                _pullback_block(prm, teacher.ir_mode, name,
                                grads.get("kernel"), grads.get("bias"), out)
            else:
                if grads.get("kernel") is not None:
                    out[f"{name}.kernel"] = grads["kernel"].copy()
                if grads.get("bias") is not None and prm.bias is not None:
                    out[f"{name}.bias"] = grads["bias"].copy()
        elif spec.kind == "bn":
            if isinstance(prm, DualBNState):
                c = prm.base_channels
                for key, tensor in (("gamma", prm.gamma), ("beta", prm.beta)):
                    if grads.get(key) is not None:
                        g = np.zeros_like(tensor.data)
                        g[:c] = grads[key]
                        out[f"{name}.{key}"] = g
            else:
                for key in ("gamma", "beta"):
                    if grads.get(key) is not None:
                        out[f"{name}.{key}"] = grads[key].copy()
    return out


def _pullback_block(block: ExpandedBlock, ir_mode: str, name: str,
                    g_kernel: Optional[np.ndarray], g_bias: Optional[np.ndarray],
                    out: Dict[str, np.ndarray]) -> None:
    c = block.base_out
    for m, (stack, scale) in enumerate(zip(block.branches, block.scales)):
        roles = _stack_roles(len(stack), block.role)
        vals = [_extracted_value(cw, block.ratio, r, ir_mode) for cw, r in zip(stack, roles)]
        s = scale.data[:c]
        ds = np.zeros_like(scale.data)

        if g_kernel is not None:
            if len(stack) == 1:
                bk = vals[0][0]
                ds[:c] += np.einsum("oihw,oihw->o", g_kernel, bk)
                d_bk = s[:, None, None, None] * g_kernel
                _scatter_kernel(stack[0], vals[0][2], d_bk, f"{name}.branch{m}.conv0.kernel", out)
            else:
                (k1, _, sl1), (k2, _, sl2) = vals
                bk = np.einsum("omhw,mi->oihw", k2, k1[:, :, 0, 0])
                ds[:c] += np.einsum("oihw,oihw->o", g_kernel, bk)
                d_bk = s[:, None, None, None] * g_kernel
                d_k2 = np.einsum("oihw,mi->omhw", d_bk, k1[:, :, 0, 0])
                d_k1 = np.einsum("omhw,oihw->mi", k2, d_bk)[:, :, None, None]
                _scatter_kernel(stack[0], sl1, d_k1, f"{name}.branch{m}.conv0.kernel", out)
                _scatter_kernel(stack[1], sl2, d_k2, f"{name}.branch{m}.conv1.kernel", out)

        if g_bias is not None and len(stack) == 1 and stack[0].bias is not None:
            bb = vals[0][1]
            ds[:c] += g_bias * bb
            out_n, _, _, bscale = vals[0][2]
            db = np.zeros_like(stack[0].bias.data)
            db[:out_n] += bscale * s * g_bias
            out[f"{name}.branch{m}.conv0.bias"] = _acc(out.get(f"{name}.branch{m}.conv0.bias"), db)

        out[f"{name}.scale{m}"] = _acc(out.get(f"{name}.scale{m}"), ds)


def _scatter_kernel(cw: ConvWeight, slices, d_extracted: np.ndarray, key: str,
                    out: Dict[str, np.ndarray]) -> None:
    out_n, in_n, kscale, _ = slices
    dk = np.zeros_like(cw.kernel.data)
    dk[:out_n, :in_n] += kscale * d_extracted
    out[key] = _acc(out.get(key), dk)


def _acc(existing: Optional[np.ndarray], fresh: np.ndarray) -> np.ndarray:
    return fresh if existing is None else existing + fresh
