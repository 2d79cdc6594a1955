"""Layer-sequence model description, parameter store, and forward execution.

Models are plain chains: conv / batch-norm / relu / pool / linear. The
classifier head is stored as a 1x1 convolution so channel-level expansion
and extraction treat every weight-bearing layer uniformly. A model is
either plain (ratio = branches = 1) or expanded; expanded models carry one
parameter record per layer that serves both the wide "teacher" view and
the compact "student" view.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .ops import BNParams, ConvWeight
from .tensor import Tensor

WEIGHT_KINDS = ("conv", "linear")


@dataclass
class LayerSpec:
    """Static description of one layer in the chain."""

    kind: str  # conv | bn | relu | linear | pool
    role: Optional[str] = None  # first | intermediate | last (weight layers only)
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = False


class ModelGraph:
    """Ordered layers plus per-layer parameter records and run metadata."""

    def __init__(self, layers, params, input_shape, classes, arch="custom",
                 ratio=1, branches=1, ir_mode="bn_safe", epsilon=0.0, seed=0):
        self.layers = list(layers)
        self.params = list(params)
        self.input_shape = tuple(input_shape)
        self.classes = int(classes)
        self.arch = arch
        self.ratio = int(ratio)
        self.branches = int(branches)
        self.ir_mode = ir_mode
        self.epsilon = float(epsilon)
        self.seed = int(seed)
        if len(self.layers) != len(self.params):
            raise ShapeError("layers and params must align one-to-one")

    @property
    def is_expanded(self) -> bool:
        return self.ratio * self.branches > 1

    def has_bn(self) -> bool:
        return any(s.kind == "bn" for s in self.layers)

    def parameters(self) -> Iterator[tuple]:
        """Yield (name, tensor) for every trainable leaf, in layer order."""
        for i, prm in enumerate(self.params):
            if prm is None:
                continue
            if isinstance(prm, ConvWeight):
                yield f"layer{i}.kernel", prm.kernel
                if prm.bias is not None:
                    yield f"layer{i}.bias", prm.bias
            elif isinstance(prm, BNParams):
                yield f"layer{i}.gamma", prm.gamma
                yield f"layer{i}.beta", prm.beta
            else:  # ExpandedBlock / DualBNState expose their own leaves
                yield from prm.named_parameters(f"layer{i}")

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.parameters():
            t.requires_grad = flag

    def copy(self) -> "ModelGraph":
        """Deep copy: fresh tensors and buffers, identical values."""
        new_params = []
        for prm in self.params:
            if prm is None:
                new_params.append(None)
            elif isinstance(prm, ConvWeight):
                new_params.append(_copy_conv(prm))
            elif isinstance(prm, BNParams):
                new_params.append(BNParams(
                    Tensor(prm.gamma.data.copy(), requires_grad=prm.gamma.requires_grad),
                    Tensor(prm.beta.data.copy(), requires_grad=prm.beta.requires_grad),
                    prm.running_mean.copy(), prm.running_var.copy(),
                    prm.momentum, prm.eps,
                ))
            else:
                new_params.append(prm.copy())
        return ModelGraph([replace(s) for s in self.layers], new_params,
                          self.input_shape, self.classes, self.arch,
                          self.ratio, self.branches, self.ir_mode,
                          self.epsilon, self.seed)


def _copy_conv(cw: ConvWeight) -> ConvWeight:
    return ConvWeight(
        Tensor(cw.kernel.data.copy(), requires_grad=cw.kernel.requires_grad),
        None if cw.bias is None else Tensor(cw.bias.data.copy(), requires_grad=cw.bias.requires_grad),
        cw.stride, cw.padding,
    )


# -- built-in architectures ---------------------------------------------------

def _conv_bn_relu(c_in, c_out, stride, role=None):
    return [
        LayerSpec("conv", role or "intermediate", c_in, c_out, 3, stride, 1, bias=False),
        LayerSpec("bn", in_channels=c_out, out_channels=c_out),
        LayerSpec("relu"),
    ]


def _conv_relu(c_in, c_out, stride, role=None):
    return [
        LayerSpec("conv", role or "intermediate", c_in, c_out, 3, stride, 1, bias=True),
        LayerSpec("relu"),
    ]


def _arch_specs(name: str, in_channels: int, classes: int):
    if name == "convnet-small":
        specs = (
            _conv_bn_relu(in_channels, 8, 1, role="first")
            + _conv_bn_relu(8, 16, 2)
            + _conv_bn_relu(16, 16, 2)
            + [LayerSpec("pool"), LayerSpec("linear", "last", 16, classes, 1, bias=True)]
        )
    elif name == "convnet-medium":
        specs = (
            _conv_bn_relu(in_channels, 16, 1, role="first")
            + _conv_bn_relu(16, 32, 2)
            + _conv_bn_relu(32, 32, 2)
            + [LayerSpec("pool"), LayerSpec("linear", "last", 32, classes, 1, bias=True)]
        )
    elif name == "convnet-tiny":
        specs = (
            _conv_bn_relu(in_channels, 4, 1, role="first")
            + _conv_bn_relu(4, 8, 2)
            + [LayerSpec("pool"), LayerSpec("linear", "last", 8, classes, 1, bias=True)]
        )
    elif name == "convnet-nobn":
        specs = (
            _conv_relu(in_channels, 8, 1, role="first")
            + _conv_relu(8, 16, 2)
            + _conv_relu(16, 16, 2)
            + [LayerSpec("pool"), LayerSpec("linear", "last", 16, classes, 1, bias=True)]
        )
    else:
        raise ValueError(f"unknown architecture '{name}'")
    return specs


ARCH_NAMES = ("convnet-small", "convnet-medium", "convnet-tiny", "convnet-nobn")


def validate_chain(specs, input_shape, classes) -> None:
    """Check role uniqueness and the channel chain end to end."""
    weight_layers = [s for s in specs if s.kind in WEIGHT_KINDS]
    if not weight_layers:
        raise ShapeError("model needs at least one weight-bearing layer")
    if sum(1 for s in weight_layers if s.role == "first") != 1:
        raise ShapeError("exactly one weight layer must have role 'first'")
    if sum(1 for s in weight_layers if s.role == "last") != 1:
        raise ShapeError("exactly one weight layer must have role 'last'")
    if weight_layers[0].role != "first" or weight_layers[-1].role != "last":
        raise ShapeError("role 'first'/'last' must sit at the chain boundaries")

    channels = input_shape[0]
    for s in specs:
        if s.kind in WEIGHT_KINDS:
            if s.in_channels != channels:
                raise ShapeError(
                    f"channel chain broken: layer expects {s.in_channels}, got {channels}"
                )
            channels = s.out_channels
        elif s.kind == "bn":
            if s.in_channels != channels:
                raise ShapeError(
                    f"batch-norm width {s.in_channels} does not match incoming {channels}"
                )
    if channels != classes:
        raise ShapeError(f"final layer emits {channels} channels, expected {classes} classes")


def init_params(specs, rng) -> list:
    """He fan-in initialization for every weight layer; standard BN init."""
    params = []
    for s in specs:
        if s.kind in WEIGHT_KINDS:
            k = s.kernel_size
            fan_in = s.in_channels * k * k
            kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(s.out_channels, s.in_channels, k, k))
            bias = Tensor(np.zeros(s.out_channels), requires_grad=True) if s.bias else None
            params.append(ConvWeight(Tensor(kernel, requires_grad=True), bias, s.stride, s.padding))
        elif s.kind == "bn":
            c = s.in_channels
            params.append(BNParams(
                Tensor(np.ones(c), requires_grad=True),
                Tensor(np.zeros(c), requires_grad=True),
                np.zeros(c), np.ones(c),
            ))
        else:
            params.append(None)
    return params


def build_student(arch: str, input_shape, classes: int, seed: int = 0) -> ModelGraph:
    """Instantiate a named toy architecture with seeded initialization."""
    specs = _arch_specs(arch, input_shape[0], classes)
    validate_chain(specs, input_shape, classes)
    rng = np.random.default_rng(seed)
    return ModelGraph(specs, init_params(specs, rng), input_shape, classes,
                      arch=arch, seed=seed)


def build_custom(specs, input_shape, classes: int, seed: int = 0) -> ModelGraph:
    """Build a model from explicit layer specs (used by verification suites)."""
    validate_chain(specs, input_shape, classes)
    rng = np.random.default_rng(seed)
    return ModelGraph(specs, init_params(specs, rng), input_shape, classes, seed=seed)


# -- forward execution ---------------------------------------------------------

def _linear_forward(x: Tensor, cw: ConvWeight) -> Tensor:
    """Run the 1x1-conv-backed classifier head on [N, D] features."""
    n, d = x.data.shape
    out = ops.conv2d(x.reshape(n, d, 1, 1), cw)
    return out.reshape(n, out.data.shape[1])


def forward(m: ModelGraph, x: Tensor, view: str = "student", mode: str = "eval") -> Tensor:
    """Run the chain and return logits [N, classes].

    ``view`` selects between the expanded model's direct forward (teacher)
    and the sliced-and-merged compact forward (student); they coincide on a
    plain model. Batch-norm reads and, in train mode, updates only the
    statistics belonging to the active view.
    """
    if view not in ("student", "teacher"):
        raise ValueError(f"unknown view '{view}'")
    if x.data.ndim != 4 or x.data.shape[1:] != m.input_shape:
        raise ShapeError(f"input shape {x.data.shape[1:]} != declared {m.input_shape}")

    if m.is_expanded and view == "student":
        from .reparam import extract_student  # avoids a circular import

        return extract_student(m).forward(x, mode)

    for spec, prm in zip(m.layers, m.params):
        if spec.kind == "conv":
            x = prm.forward_teacher(x) if hasattr(prm, "forward_teacher") else ops.conv2d(x, prm)
        elif spec.kind == "linear":
            if hasattr(prm, "forward_teacher"):
                n, d = x.data.shape
                x = prm.forward_teacher(x.reshape(n, d, 1, 1))
                x = x.reshape(n, x.data.shape[1])
            else:
                x = _linear_forward(x, prm)
        elif spec.kind == "bn":
            if isinstance(prm, BNParams):
                x = ops.batchnorm(x, prm, mode)
            else:
                x = prm.forward_view(x, "teacher", mode)
        elif spec.kind == "relu":
            x = ops.relu(x)
        elif spec.kind == "pool":
            x = ops.avgpool_global(x)
        else:
            raise ValueError(f"unknown layer kind '{spec.kind}'")
    return x
