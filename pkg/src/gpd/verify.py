"""Randomized verification suites backing the `verify` command.

Each suite replays an independently computed reference against the
implementation: dense matrix products and replica tiling for expansion,
slice-and-scale algebra for extraction, central finite differences for
gradients, and a literal two-model training step (explicit per-path
gradients plus the hand-derived pull-back) for the shared update rule.
Seeds are embedded in every result for replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import DatasetSpec, synthetic_dataset
from .expand import DualBNState, ExpansionPlan, expand_branches, expand_channels, expand_model
from .losses import LossConfig, verify_stop_gradient
from .model import LayerSpec, ModelGraph, build_custom, build_student, forward
from .ops import (
    BNParams,
    ConvWeight,
    avgpool_global,
    batch_norm,
    compose_1x1_kxk,
    conv2d,
    kd_kl_divergence,
    linear,
    relu,
    softmax_cross_entropy,
)
from .reparam import (
    extract_channels,
    extract_student,
    grad_pullback,
    materialize_student,
    merge_block,
    _stack_roles,
)
from .tensor import Tensor
from .train import TrainConfig, make_velocities, train_step, apply_update
from .ops import sgd_momentum_step

SUITES = ("ir", "cbr", "grad", "algo1")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    deviation: float
    tolerance: float
    seed: int

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"[{status}] {self.suite}/{self.name}: deviation {self.deviation:.3e}"
                f" (tolerance {self.tolerance:.0e}, seed {self.seed})")


def _result(suite, name, deviation, tolerance, seed, ok=None) -> CheckResult:
    passed = (deviation < tolerance) if ok is None else ok
    return CheckResult(suite, name, passed, float(deviation), tolerance, seed)


# -- model generators -----------------------------------------------------------

def random_chain(rng, with_bn: bool, with_head: bool = True):
    """A small random conv chain (plus optional pool/linear head)."""
    n_convs = int(rng.integers(2, 4))
    channels = [int(rng.integers(1, 4))] + [int(rng.integers(2, 6)) for _ in range(n_convs)]
    size = int(rng.integers(6, 10))
    classes = int(rng.integers(2, 5))
    specs = []
    for i in range(n_convs):
        k = int(rng.choice([1, 3]))
        role = "first" if i == 0 else "intermediate"
        last_conv = (i == n_convs - 1) and not with_head
        if last_conv:
            role = "last"
        specs.append(LayerSpec("conv", role, channels[i], channels[i + 1], k,
                               stride=int(rng.choice([1, 2])), padding=k // 2,
                               bias=not with_bn and bool(rng.integers(0, 2))))
        if with_bn:
            specs.append(LayerSpec("bn", in_channels=channels[i + 1],
                                   out_channels=channels[i + 1]))
        if not last_conv:
            specs.append(LayerSpec("relu"))
    if with_head:
        specs.append(LayerSpec("pool"))
        specs.append(LayerSpec("linear", "last", channels[-1], classes, 1, bias=True))
        out_classes = classes
    else:
        out_classes = channels[-1]
    m = build_custom(specs, (channels[0], size, size), out_classes,
                     seed=int(rng.integers(0, 2**31)))
    if with_bn:
        # drift running statistics so eval-mode checks exercise real buffers
        for prm in m.params:
            if isinstance(prm, BNParams):
                prm.running_mean[:] = rng.normal(size=prm.running_mean.shape)
                prm.running_var[:] = rng.uniform(0.2, 2.0, size=prm.running_var.shape)
    return m


def _max_forward_dev(a: ModelGraph, b: ModelGraph, rng, n_inputs: int = 4,
                     view_b: str = "teacher") -> float:
    x = Tensor(rng.normal(size=(n_inputs,) + a.input_shape))
    ya = forward(a, x, "student", "eval").data
    yb = forward(b, x, view_b, "eval").data
    return float(np.max(np.abs(ya - yb)))


# -- suite: function preservation under expansion -------------------------------

def suite_ir(seed: int = 0, trials: int = 100) -> List[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)

    # fixed three-conv construction checked against a dense matrix product
    w1 = np.array([[1.0], [2.0]])
    w2 = np.array([[1.0, 1.0], [2.0, 0.0]])
    w3 = np.array([[1.0, 2.0]])
    specs = [LayerSpec("conv", "first", 1, 2, 1),
             LayerSpec("conv", "intermediate", 2, 2, 1),
             LayerSpec("conv", "last", 2, 1, 1)]
    m = build_custom(specs, (1, 1, 1), 1, seed=seed)
    for prm, w in zip(m.params, (w1, w2, w3)):
        prm.kernel.data[:] = w.reshape(w.shape + (1, 1))
    x = np.full((1, 1, 1, 1), 3.0)
    dense = (w3 @ w2 @ w1 @ x.reshape(1, 1)).item()
    wide = expand_model(m, ExpansionPlan(ratio=2, epsilon=0.0, ir_mode="paper", seed=seed))
    got = forward(wide, Tensor(x), "teacher", "eval").item()
    base = forward(m, Tensor(x), "student", "eval").item()
    dev = max(abs(got - dense), abs(base - dense))
    results.append(_result("ir", "three-conv-ratio-2-fixed-case", dev, 1e-9, seed))

    # randomized bn-free chains, direct-scaling mode
    worst = 0.0
    for _ in range(trials):
        m = random_chain(rng, with_bn=False, with_head=bool(rng.integers(0, 2)))
        r = int(rng.choice([2, 3]))
        wide = expand_model(m, ExpansionPlan(ratio=r, branches=int(rng.choice([1, 2])),
                                             epsilon=0.0, ir_mode="paper",
                                             seed=int(rng.integers(0, 2**31))))
        worst = max(worst, _max_forward_dev(m, wide, rng))
    results.append(_result("ir", f"bn-free-chains-preserved-x{trials}", worst, 1e-9, seed))

    # randomized bn-bearing chains, tiling-safe mode (eval)
    worst = 0.0
    for _ in range(trials):
        m = random_chain(rng, with_bn=True)
        r = int(rng.choice([2, 3]))
        wide = expand_model(m, ExpansionPlan(ratio=r, branches=int(rng.choice([1, 2])),
                                             epsilon=0.0, ir_mode="bn_safe",
                                             seed=int(rng.integers(0, 2**31))))
        worst = max(worst, _max_forward_dev(m, wide, rng))
    results.append(_result("ir", f"bn-chains-preserved-x{trials}", worst, 1e-9, seed))

    # symmetry-breaking noise: deviation shrinks monotonically with epsilon
    m = build_student("convnet-nobn", (1, 12, 12), 4, seed=seed)
    probe = np.random.default_rng(seed + 1).normal(size=(8, 1, 12, 12))
    base = forward(m, Tensor(probe), "student", "eval").data
    devs = []
    for eps in (1e-2, 1e-3, 1e-4):
        wide = expand_model(m, ExpansionPlan(ratio=2, branches=2, epsilon=eps,
                                             ir_mode="paper", seed=seed))
        out = forward(wide, Tensor(probe), "teacher", "eval").data
        devs.append(float(np.max(np.abs(out - base))))
    ordered = devs[0] > devs[1] > devs[2] > 0.0
    results.append(_result("ir", "noise-deviation-monotone", devs[2], float("inf"),
                           seed, ok=ordered))
    return results


# -- suite: extraction ----------------------------------------------------------

def _explicit_block_forward(block, ir_mode, x) -> np.ndarray:
    """Reference: run each extracted branch sequentially, scale, and sum."""
    total = None
    for stack, scale in zip(block.branches, block.scales):
        roles = _stack_roles(len(stack), block.role)
        h = x
        for cw, role in zip(stack, roles):
            h = conv2d(h, extract_channels(cw, block.ratio, role, ir_mode))
        out = h.data * scale.data[: block.base_out].reshape(1, -1, 1, 1)
        total = out if total is None else total + out
    return total


def suite_cbr(seed: int = 0, trials: int = 100) -> List[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)

    # inverse-at-init across roles and plan grid
    worst = 0.0
    for role in ("first", "intermediate", "last"):
        for r in (2, 3):
            for mm in (1, 2, 6):
                for mode in ("paper", "bn_safe"):
                    w = ConvWeight(Tensor(rng.normal(size=(6, 6, 3, 3)), requires_grad=True),
                                   Tensor(rng.normal(size=6), requires_grad=True), 1, 1)
                    wide = expand_channels(w, r, role, 0.0, rng, mode)
                    block = expand_branches(wide, mm, rng, role=role, ratio=r)
                    merged = merge_block(block, mode)
                    worst = max(worst, float(np.max(np.abs(merged.kernel.data - w.kernel.data))))
                    worst = max(worst, float(np.max(np.abs(merged.bias.data - w.bias.data))))
    results.append(_result("cbr", "inverse-at-init-role-grid", worst, 1e-12, seed))

    # merge soundness at drifted weights
    worst = 0.0
    for _ in range(trials):
        role = str(rng.choice(["first", "intermediate", "last"]))
        r = int(rng.choice([2, 3]))
        mm = int(rng.integers(1, 4))
        c_out, c_in = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        k = int(rng.choice([1, 3]))
        w = ConvWeight(Tensor(rng.normal(size=(c_out, c_in, k, k)), requires_grad=True),
                       Tensor(rng.normal(size=c_out), requires_grad=True), 1, k // 2)
        wide = expand_channels(w, r, role, 0.0, rng, "bn_safe")
        block = expand_branches(wide, mm, rng, role=role, ratio=r)
        for stack in block.branches:
            for cw in stack:
                cw.kernel.data[:] = rng.normal(size=cw.kernel.shape)
                if cw.bias is not None:
                    cw.bias.data[:] = rng.normal(size=cw.bias.shape)
        for s in block.scales:
            s.data[:] = rng.normal(size=s.shape)
        merged = merge_block(block, "bn_safe")
        x = Tensor(rng.normal(size=(2, merged.in_channels, 6, 6)))
        direct = conv2d(x, merged).data
        explicit = _explicit_block_forward(block, "bn_safe", x)
        worst = max(worst, float(np.max(np.abs(direct - explicit))))
    results.append(_result("cbr", f"merge-soundness-drifted-x{trials}", worst, 1e-9, seed))

    # extraction is closed-form: identical twice, fresh after an update
    m = build_student("convnet-tiny", (1, 8, 8), 4, seed=seed)
    wide = expand_model(m, ExpansionPlan(ratio=2, branches=2, epsilon=1e-3, seed=seed))
    a = extract_student(wide)
    b = extract_student(wide)
    same = all(np.array_equal(a.merged[i].kernel.data, b.merged[i].kernel.data) for i in a.merged)
    idx = next(i for i, s in enumerate(wide.layers) if s.kind == "conv")
    wide.params[idx].branches[0][0].kernel.data += 0.5
    fresh = not np.array_equal(a.merged[idx].kernel.data,
                               extract_student(wide).merged[idx].kernel.data)
    results.append(_result("cbr", "extraction-deterministic-and-fresh", 0.0, 1.0,
                           seed, ok=same and fresh))
    return results


# -- suite: gradients ------------------------------------------------------------

def _central_diff(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / denom))


def suite_grad(seed: int = 0) -> List[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)
    tol = 1e-4

    def check(name, loss_builder, tensors):
        for t in tensors:
            t.grad = None
        loss = loss_builder()
        loss.backward()
        dev = 0.0
        for t in tensors:
            fd = _central_diff(lambda: loss_builder().item(), t.data)
            got = t.grad if t.grad is not None else np.zeros_like(t.data)
            dev = max(dev, _rel_err(got, fd))
        results.append(_result("grad", name, dev, tol, seed))

    x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    coeff = Tensor(rng.normal(size=(2, 4, 3, 3)))
    check("conv2d", lambda: (conv2d(x, ConvWeight(k, b, 2, 1)) * coeff).sum(), [x, k, b])

    xl = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    wl = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    bl = Tensor(rng.normal(size=2), requires_grad=True)
    cl = Tensor(rng.normal(size=(3, 2)))
    check("linear", lambda: (linear(xl, wl, bl) * cl).sum(), [xl, wl, bl])

    xb = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
    gg = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    bb = Tensor(rng.normal(size=2), requires_grad=True)
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
    cb = Tensor(rng.normal(size=(3, 2, 4, 4)))
    for mode in ("train", "eval"):
        check(f"batch-norm-{mode}",
              lambda mode=mode: (batch_norm(xb, gg, bb, rm.copy(), rv.copy(), 0.1, 1e-5, mode) * cb).sum(),
              [xb, gg, bb])

    # keep relu inputs away from the kink so differences are two-sided
    xr_data = rng.normal(size=(4, 6))
    xr_data[np.abs(xr_data) < 0.05] = 0.1
    xr = Tensor(xr_data, requires_grad=True)
    cr = Tensor(rng.normal(size=(4, 6)))
    check("relu", lambda: (relu(xr) * cr).sum(), [xr])

    xp = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    cp = Tensor(rng.normal(size=(2, 3)))
    check("global-avg-pool", lambda: (avgpool_global(xp) * cp).sum(), [xp])

    zs = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    labels = rng.integers(0, 6, size=4)
    check("softmax-cross-entropy", lambda: softmax_cross_entropy(zs, labels), [zs])

    zk = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    zt = Tensor(rng.normal(size=(4, 6)))
    check("kd-kl-divergence", lambda: kd_kl_divergence(zk, zt, 3.0), [zk])

    w1 = Tensor(rng.normal(size=(2, 3, 1, 1)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
    cc = Tensor(rng.normal(size=(4, 3, 3, 3)))
    check("compose-1x1-kxk", lambda: (compose_1x1_kxk(w1, w2) * cc).sum(), [w1, w2])

    # full extraction pull-back on a small expanded model
    specs = [LayerSpec("conv", "first", 1, 2, 3, 1, 1, bias=True),
             LayerSpec("bn", in_channels=2, out_channels=2),
             LayerSpec("relu"),
             LayerSpec("pool"),
             LayerSpec("linear", "last", 2, 3, 1, bias=True)]
    small = build_custom(specs, (1, 6, 6), 3, seed=seed)
    wide = expand_model(small, ExpansionPlan(ratio=2, branches=2, epsilon=1e-2, seed=seed))
    xs = Tensor(rng.normal(size=(3, 1, 6, 6)))
    ys = rng.integers(0, 3, size=3)

    def pipeline_loss():
        return softmax_cross_entropy(forward(wide, xs, "student", "eval"), ys)

    wide.zero_grad()
    pipeline_loss().backward()
    dev = 0.0
    for name, t in wide.parameters():
        fd = _central_diff(lambda: pipeline_loss().item(), t.data)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        dev = max(dev, _rel_err(got, fd))
    results.append(_result("grad", "full-extraction-pullback", dev, tol, seed))

    for c in verify_stop_gradient(seed):
        results.append(_result("grad", f"stop-gradient: {c.name}", c.deviation,
                               float("inf"), seed, ok=c.passed))
    return results


# -- suite: shared update vs literal two-model step -----------------------------

def collect_student_grads(standalone: ModelGraph) -> Dict[str, Dict[str, np.ndarray]]:
    grads: Dict[str, Dict[str, np.ndarray]] = {}
    for i, (spec, prm) in enumerate(zip(standalone.layers, standalone.params)):
        if spec.kind in ("conv", "linear"):
            grads[f"layer{i}"] = {
                "kernel": prm.kernel.grad if prm.kernel.grad is not None else np.zeros_like(prm.kernel.data),
                "bias": None if prm.bias is None else (
                    prm.bias.grad if prm.bias.grad is not None else np.zeros_like(prm.bias.data)),
            }
        elif spec.kind == "bn":
            grads[f"layer{i}"] = {
                "gamma": prm.gamma.grad if prm.gamma.grad is not None else np.zeros_like(prm.gamma.data),
                "beta": prm.beta.grad if prm.beta.grad is not None else np.zeros_like(prm.beta.data),
            }
    return grads


def reference_train_step(model: ModelGraph, static: Optional[ModelGraph],
                         x: np.ndarray, y: np.ndarray, loss_cfg: LossConfig,
                         lr: float, momentum: float, weight_decay: float,
                         velocities: dict) -> None:
    """The update rule written out literally against two separate models.

    Computes the wide path's gradients on the shared store, materializes a
    standalone compact model, back-propagates its loss there, maps those
    gradients through the analytic extraction transpose, and applies one
    SGD step with the explicit gradient sum.
    """
    xt = Tensor(x)
    model.zero_grad()
    t_logits = forward(model, xt, "teacher", "train")
    static_logits = None
    teacher_loss = softmax_cross_entropy(t_logits, y)
    if static is not None:
        static_logits = forward(static, xt, "student", "eval").detach()
        teacher_loss = teacher_loss + kd_kl_divergence(t_logits, static_logits,
                                                       loss_cfg.temperature)
    teacher_loss.backward()
    g_d = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
           for name, t in model.parameters()}

    standalone = materialize_student(model, trainable=True)
    s_logits = forward(standalone, xt, "student", "train")
    student_loss = softmax_cross_entropy(s_logits, y)
    if loss_cfg.dynamic_kd:
        student_loss = student_loss + kd_kl_divergence(s_logits, t_logits.detach(),
                                                       loss_cfg.temperature)
    if static is not None:
        student_loss = student_loss + loss_cfg.static_weight * kd_kl_divergence(
            s_logits, static_logits, loss_cfg.temperature)
    student_loss.backward()
    g_s = grad_pullback(model, collect_student_grads(standalone))

    # the standalone's train-mode forward advanced the compact statistics
    for prm, sprm in zip(model.params, standalone.params):
        if isinstance(prm, DualBNState):
            prm.student_mean[:] = sprm.running_mean
            prm.student_var[:] = sprm.running_var

    for name, p in model.parameters():
        g = g_d[name] + g_s.get(name, np.zeros_like(p.data))
        p.data, velocities[name] = sgd_momentum_step(p.data, g, velocities[name],
                                                     lr, momentum, weight_decay)


def _model_state(m: ModelGraph) -> Dict[str, np.ndarray]:
    state = {name: t.data.copy() for name, t in m.parameters()}
    for i, prm in enumerate(m.params):
        if isinstance(prm, DualBNState):
            state[f"layer{i}.teacher_mean"] = prm.teacher_mean.copy()
            state[f"layer{i}.teacher_var"] = prm.teacher_var.copy()
            state[f"layer{i}.student_mean"] = prm.student_mean.copy()
            state[f"layer{i}.student_var"] = prm.student_var.copy()
    return state


def suite_algo1(seed: int = 0, steps: int = 10) -> List[CheckResult]:
    results = []
    spec = DatasetSpec(classes=4, train_samples=64 * steps, eval_samples=32,
                       shape=(1, 8, 8), noise=1.0, seed=seed)
    train_ds, _ = synthetic_dataset(spec)
    batches = list(train_ds.batches(64))

    student = build_student("convnet-tiny", (1, 8, 8), 4, seed=seed)
    plan = ExpansionPlan(ratio=2, branches=2, epsilon=1e-2, seed=seed)
    shared = expand_model(student, plan)
    oracle = shared.copy()

    cfg = TrainConfig(arch="convnet-tiny", dataset=spec, lr=0.05,
                      plan=plan, loss=LossConfig(use_static_teacher=False))
    v_shared = make_velocities(shared)
    v_oracle = make_velocities(oracle)
    drift = 0.0
    for xb, yb in batches[:steps]:
        train_step(shared, None, xb, yb, cfg, cfg.lr, v_shared)
        reference_train_step(oracle, None, xb, yb, cfg.loss, cfg.lr,
                             cfg.momentum, cfg.weight_decay, v_oracle)
        a, b = _model_state(shared), _model_state(oracle)
        drift = max(drift, max(float(np.max(np.abs(a[k] - b[k]))) for k in a))
    results.append(_result("algo1", f"shared-vs-two-model-{steps}-steps", drift, 1e-6, seed))

    # normalization statistics stay isolated per view, bit-exactly
    rng = np.random.default_rng(seed + 1)
    model = expand_model(build_student("convnet-tiny", (1, 8, 8), 4, seed=seed + 1),
                         ExpansionPlan(ratio=2, branches=2, epsilon=1e-2, seed=seed + 1))
    velocities = make_velocities(model)
    isolated = True
    for _ in range(100):
        xb = rng.normal(size=(8, 1, 8, 8))
        yb = rng.integers(0, 4, size=8)
        before_student = [(p.student_mean.copy(), p.student_var.copy())
                          for p in model.params if isinstance(p, DualBNState)]
        t_logits = forward(model, Tensor(xb), "teacher", "train")
        after = [(p.student_mean, p.student_var)
                 for p in model.params if isinstance(p, DualBNState)]
        isolated &= all(np.array_equal(b0, a0) and np.array_equal(b1, a1)
                        for (b0, b1), (a0, a1) in zip(before_student, after))

        before_teacher = [(p.teacher_mean.copy(), p.teacher_var.copy())
                          for p in model.params if isinstance(p, DualBNState)]
        s_logits = forward(model, Tensor(xb), "student", "train")
        after_t = [(p.teacher_mean, p.teacher_var)
                   for p in model.params if isinstance(p, DualBNState)]
        isolated &= all(np.array_equal(b0, a0) and np.array_equal(b1, a1)
                        for (b0, b1), (a0, a1) in zip(before_teacher, after_t))

        model.zero_grad()
        lb_total = softmax_cross_entropy(s_logits, yb) + softmax_cross_entropy(t_logits, yb) \
            + kd_kl_divergence(s_logits, t_logits.detach(), 4.0)
        lb_total.backward()
        apply_update(model, velocities, 0.02, 0.9, 1e-4)
    results.append(_result("algo1", "bn-statistics-isolated-100-steps", 0.0, 1.0,
                           seed, ok=isolated))
    return results


def run_suites(names, seed: int = 0) -> List[CheckResult]:
    table = {"ir": suite_ir, "cbr": suite_cbr, "grad": suite_grad, "algo1": suite_algo1}
    results = []
    for name in names:
        if name not in table:
            raise ValueError(f"unknown suite '{name}' (choose from {', '.join(SUITES)} or 'all')")
        results.extend(table[name](seed))
    return results
