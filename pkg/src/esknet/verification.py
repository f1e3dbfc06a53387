"""Independent oracles and the self-check suite behind the ``verify`` command.

The oracles here deliberately avoid the production code paths they check:
the reference convolution is a direct nested loop, the selective-kernel
reference is straight-line numpy with no tape, and gradients are checked
against central finite differences at 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-4
FD_TOLERANCE = 1e-4


def finite_difference(build_loss: Callable[[], Tensor], tensor: Tensor,
                      step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. one tensor.

    ``build_loss`` must re-run the forward pass from scratch; the tensor's
    data is perturbed in place and restored. Runs tape-free.
    """
    fd = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            origin = flat[i]
            flat[i] = origin + step
            hi = float(build_loss().data)
            flat[i] = origin - step
            lo = float(build_loss().data)
            flat[i] = origin
            fd_flat[i] = (hi - lo) / (2.0 * step)
    return fd


def gradient_check(build_loss: Callable[[], Tensor], wrt: Sequence[Tensor],
                   step: float = FD_STEP, grad_scale: float = 1.0) -> float:
    """Max relative disagreement between tape gradients and finite differences.

    The relative error is the max absolute difference normalized by the
    largest gradient magnitude of either side (per tensor), which keeps the
    measure stable when individual entries are near zero. ``grad_scale``
    multiplies the tape gradients; it exists only as a corruption hook for
    negative-control tests.
    """
    for t in wrt:
        t.grad = None
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for t in wrt:
        auto = t.grad if t.grad is not None else np.zeros_like(t.data)
        auto = auto * grad_scale
        fd = finite_difference(build_loss, t, step)
        denom = max(np.abs(auto).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(auto - fd).max(initial=0.0) / denom))
    return worst


# ---------------------------------------------------------------------------
# reference implementations (oracles)
# ---------------------------------------------------------------------------

def conv2d_reference(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                     stride: int = 1, dilation: int = 1,
                     padding="same") -> np.ndarray:
    """Direct nested-loop 2-D convolution over a C,H,W array."""
    cin, h, w = x.shape
    cout, k_cin, kh, kw = kernel.shape
    assert cin == k_cin, "channel mismatch in reference conv"
    if padding == "same":
        total_h = dilation * (kh - 1)
        total_w = dilation * (kw - 1)
        pl_h, pl_w = total_h // 2, total_w // 2
        ph_h, ph_w = total_h - pl_h, total_w - pl_w
    else:
        pl_h = ph_h = pl_w = ph_w = int(padding)
    xp = np.pad(x, ((0, 0), (pl_h, ph_h), (pl_w, ph_w)))
    span_h = (kh - 1) * dilation + 1
    span_w = (kw - 1) * dilation + 1
    ho = (xp.shape[1] - span_h) // stride + 1
    wo = (xp.shape[2] - span_w) // stride + 1
    out = np.zeros((cout, ho, wo), dtype=x.dtype)
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[ci, oy * stride + i * dilation,
                                      ox * stride + j * dilation] * kernel[co, ci, i, j]
                out[co, oy, ox] = acc + bias[co]
    return out


def max_pool2d_reference(x: np.ndarray, window: int = 2) -> np.ndarray:
    """Exhaustive per-window max over a C,H,W array."""
    c, h, w = x.shape
    out = np.zeros((c, h // window, w // window), dtype=x.dtype)
    for ci in range(c):
        for oy in range(h // window):
            for ox in range(w // window):
                out[ci, oy, ox] = x[ci, oy * window:(oy + 1) * window,
                                    ox * window:(ox + 1) * window].max()
    return out


def _sigmoid_ref(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def channel_gate_reference(merged: np.ndarray, reduce_w: np.ndarray, reduce_b: np.ndarray,
                           bn_scale: np.ndarray, bn_shift: np.ndarray,
                           bn_mean: np.ndarray, bn_var: np.ndarray, bn_eps: float,
                           bn_mode: str, expand_w: np.ndarray,
                           expand_b: np.ndarray) -> np.ndarray:
    """Straight-line per-channel gate: pooled stats -> FC/BN/ReLU -> FC -> sigmoid.

    ``merged`` is N,C,H,W; returns the N,C gate matrix.
    """
    pooled = merged.mean(axis=(2, 3))
    z = pooled @ reduce_w.T + reduce_b
    if bn_mode == "train":
        mu = z.mean(axis=0)
        var = z.var(axis=0)
    else:
        mu, var = bn_mean, bn_var
    z = bn_scale * (z - mu) / np.sqrt(var + bn_eps) + bn_shift
    z = np.maximum(z, 0)
    z = z @ expand_w.T + expand_b
    return _sigmoid_ref(z)


def sk_block_reference(x: np.ndarray, params) -> np.ndarray:
    """Straight-line two-branch selective-kernel block (channel gate only).

    Independent oracle for the block with spatial attention and the residual
    path toggled off: two parallel convolutions, summed, recalibrated by a
    single per-channel sigmoid gate that weights the dilated branch by the
    gate and the wide branch by its complement.
    """
    squeeze = x.ndim == 3
    x4 = x[None] if squeeze else x
    wide = np.stack([conv2d_reference(s, params.branch5.kernel.data,
                                      params.branch5.bias.data,
                                      params.branch5.stride, params.branch5.dilation,
                                      params.branch5.padding) for s in x4])
    dilated = np.stack([conv2d_reference(s, params.branch3.kernel.data,
                                         params.branch3.bias.data,
                                         params.branch3.stride, params.branch3.dilation,
                                         params.branch3.padding) for s in x4])
    merged = wide + dilated
    bn = params.reduce_norm
    gate = channel_gate_reference(
        merged,
        params.fc_reduce.weight.data, params.fc_reduce.bias.data,
        bn.scale.data, bn.shift.data, bn.running_mean.data, bn.running_var.data,
        bn.epsilon, bn.mode,
        params.fc_expand.weight.data, params.fc_expand.bias.data)
    gate = gate[:, :, None, None]
    out = (1.0 - gate) * wide + gate * dilated
    return out[0] if squeeze else out


def confusion_reference(pred: np.ndarray, gt: np.ndarray) -> tuple:
    """Brute-force per-pixel confusion counts."""
    tp = fp = tn = fn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def curve_reference(probs: np.ndarray, gt: np.ndarray) -> dict:
    """Exhaustive all-cutpoint P-R / ROC / AUC oracle over pooled pixels.

    A pixel is predicted positive when its probability is >= the threshold;
    thresholds are every distinct probability plus the 1.0 and 0.0 endpoints,
    descending.
    """
    p = probs.reshape(-1)
    g = gt.reshape(-1)
    pos = int(g.sum())
    neg = g.size - pos
    thresholds = sorted(set(np.unique(p).tolist()) | {0.0, 1.0}, reverse=True)
    rows = []
    for t in thresholds:
        pred = p >= t
        tp = int(np.sum(pred & (g == 1)))
        fp = int(np.sum(pred & (g == 0)))
        fn = pos - tp
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / pos if pos else 0.0
        tpr = recall
        fpr = fp / neg if neg else 0.0
        rows.append((t, precision, recall, tpr, fpr))
    fprs = [r[4] for r in rows]
    tprs = [r[3] for r in rows]
    auc = float(np.trapezoid(tprs, fprs))
    return {"thresholds": [r[0] for r in rows],
            "precision": [r[1] for r in rows],
            "recall": [r[2] for r in rows],
            "tpr": tprs, "fpr": fprs, "auc": auc}


# ---------------------------------------------------------------------------
# check suite
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rand(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True, dtype=np.float64)


def _grad_checks(seeds: Iterable[int], corrupt: Optional[str]) -> List[CheckResult]:
    from . import blocks

    results = []

    def run(name: str, setup: Callable[[np.random.Generator], tuple]) -> None:
        scale = 1.01 if corrupt in (name, f"grad:{name}") else 1.0
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            build_loss, wrt = setup(rng)
            worst = max(worst, gradient_check(build_loss, wrt, grad_scale=scale))
        results.append(CheckResult(f"grad:{name}", worst < FD_TOLERANCE,
                                   f"max rel err {worst:.3e}"))

    def conv_setup(rng):
        x = _rand(rng, (2, 3, 6, 6))
        p = T.ConvParams(_rand(rng, (4, 3, 3, 3)), _rand(rng, (4,)), dilation=2)
        return lambda: T.reduce_sum(T.mul(T.conv2d(x, p), T.conv2d(x, p))), \
            [x, p.kernel, p.bias]

    def dense_setup(rng):
        x = _rand(rng, (3, 5))
        p = T.DenseParams(_rand(rng, (4, 5)), _rand(rng, (4,)))
        return lambda: T.reduce_sum(T.mul(T.dense(x, p), T.dense(x, p))), \
            [x, p.weight, p.bias]

    def gap_setup(rng):
        x = _rand(rng, (2, 3, 4, 5))
        return lambda: T.reduce_sum(T.mul(T.global_avg_pool(x), T.global_avg_pool(x))), [x]

    def bn_setup(rng):
        x = _rand(rng, (4, 3))
        p = T.BatchNormParams(_rand(rng, (3,)), _rand(rng, (3,)),
                              Tensor(np.zeros(3), dtype=np.float64),
                              Tensor(np.ones(3), dtype=np.float64))
        return lambda: T.reduce_sum(T.mul(T.batch_norm(x, p), T.batch_norm(x, p))), \
            [x, p.scale, p.shift]

    def relu_setup(rng):
        raw = rng.uniform(-1, 1, (3, 7))
        raw += 0.1 * np.sign(raw)  # keep clear of the kink
        x = Tensor(raw, requires_grad=True, dtype=np.float64)
        return lambda: T.reduce_sum(T.mul(T.activation(x, "relu"), x)), [x]

    def sigmoid_setup(rng):
        x = _rand(rng, (3, 7))
        return lambda: T.reduce_sum(T.mul(T.activation(x, "sigmoid"), x)), [x]

    def pool_setup(rng):
        # Distinct window entries keep the argmax stable under perturbation.
        vals = rng.permutation(2 * 4 * 4).astype(np.float64) * 0.1
        x = Tensor(vals.reshape(2, 4, 4) + rng.uniform(-0.02, 0.02, (2, 4, 4)),
                   requires_grad=True, dtype=np.float64)
        return lambda: T.reduce_sum(T.mul(T.max_pool2d(x, 2), T.max_pool2d(x, 2))), [x]

    def upsample_setup(rng):
        x = _rand(rng, (2, 3, 3))
        return lambda: T.reduce_sum(T.mul(T.upsample2d(x, 3), T.upsample2d(x, 3))), [x]

    def add_setup(rng):
        a = _rand(rng, (3, 4, 5))
        b = _rand(rng, (3, 1, 1))
        return lambda: T.reduce_sum(T.mul(T.add(a, b), T.add(a, b))), [a, b]

    def mul_setup(rng):
        a = _rand(rng, (3, 4, 5))
        b = _rand(rng, (1, 4, 5))
        return lambda: T.reduce_sum(T.mul(T.mul(a, b), T.mul(a, b))), [a, b]

    def bce_setup(rng):
        logits = _rand(rng, (2, 6))
        target = (rng.random((2, 6)) > 0.5).astype(np.float64)
        return lambda: T.bce_loss(T.activation(logits, "sigmoid"), target), [logits]

    def block_setup(rng):
        from .blocks import block_spec, init_esk_block, esk_forward
        spec = block_spec("esk", 2, 2, reduction_dim=32, dilation=3)
        params = init_esk_block(spec, rng)
        cast_block_to(params, np.float64)
        # Random norm scale/shift and a batch of two keep the attention
        # bottleneck off the ReLU kink, where finite differences are invalid.
        norm = params.reduce_norm
        norm.scale.data = rng.uniform(0.5, 1.5, norm.scale.shape)
        norm.shift.data = rng.uniform(-0.5, 0.5, norm.shift.shape)
        x = _rand(rng, (2, 2, 8, 8))
        wrt = [x] + [t for _, t in blocks.named_block_parameters("blk", params)]
        target = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)

        def build_loss():
            out = esk_forward(x, spec, params)
            return T.bce_loss(T.activation(out, "sigmoid"),
                              np.broadcast_to(target, out.shape))

        return build_loss, wrt

    run("conv2d", conv_setup)
    run("dense", dense_setup)
    run("global_avg_pool", gap_setup)
    run("batch_norm", bn_setup)
    run("activation.relu", relu_setup)
    run("activation.sigmoid", sigmoid_setup)
    run("max_pool2d", pool_setup)
    run("upsample2d", upsample_setup)
    run("elementwise.add", add_setup)
    run("elementwise.mul", mul_setup)
    run("bce_loss", bce_setup)
    run("esk_block", block_setup)
    return results


def cast_block_to(params, dtype) -> None:
    """Cast every tensor in a block's parameter set in place (for 64-bit checks)."""
    from .blocks import named_block_parameters, named_block_buffers
    for _, t in named_block_parameters("blk", params):
        t.data = t.data.astype(dtype)
    for _, t in named_block_buffers("blk", params):
        t.data = t.data.astype(dtype)


def cast_network_to(params, dtype) -> None:
    """Cast every parameter and buffer of a network in place (64-bit checks)."""
    from .network import named_state
    for t in named_state(params).values():
        t.data = t.data.astype(dtype)


def _gate_checks(corrupt: Optional[str]) -> List[CheckResult]:
    from .blocks import (block_spec, init_esk_block, esk_forward, channel_gate,
                         spatial_gate, zero_attention_parameters)

    results = []
    rng = np.random.default_rng(7)
    spec = block_spec("esk", 3, 3)
    params = init_esk_block(spec, rng)
    x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32))

    wide = T.conv2d(x, params.branch5)
    dilated = T.conv2d(x, params.branch3)
    merged = T.add(wide, dilated)
    beta = channel_gate(merged, params).data
    alpha = spatial_gate(merged, params).data
    in_range = bool(np.all((beta > 0) & (beta < 1)) and np.all((alpha > 0) & (alpha < 1)))
    comp_exact = bool(np.all((1.0 - beta) + beta == 1.0) and np.all((1.0 - alpha) + alpha == 1.0))
    ok = in_range and comp_exact and corrupt != "gate_partition"
    results.append(CheckResult("gate_partition", ok,
                               "gates in (0,1), complement sums exactly 1"))

    zero_attention_parameters(params)
    beta0 = channel_gate(T.add(T.conv2d(x, params.branch5), T.conv2d(x, params.branch3)),
                         params).data
    half = bool(np.all(beta0 == 0.5))
    out = esk_forward(x, spec, params).data
    w, d = T.conv2d(x, params.branch5).data, T.conv2d(x, params.branch3).data
    expected = x.data + (w + d)
    drift = float(np.abs(out - expected).max())
    ok = half and drift < 1e-6 and corrupt != "zeroed_attention"
    results.append(CheckResult("zeroed_attention", ok,
                               f"gate=0.5 exactly, fused drift {drift:.2e}"))
    return results


def _fused_view_check(corrupt: Optional[str]) -> CheckResult:
    from .blocks import (block_spec, init_esk_block, esk_forward,
                         channel_attention, spatial_attention, residual_path)

    rng = np.random.default_rng(11)
    spec = block_spec("esk", 3, 5)
    params = init_esk_block(spec, rng)
    x = Tensor(rng.uniform(0, 1, (2, 3, 6, 6)).astype(np.float32))

    out = esk_forward(x, spec, params).data
    wide = T.conv2d(x, params.branch5)
    dilated = T.conv2d(x, params.branch3)
    merged = T.add(wide, dilated)
    ch_a, ch_b = channel_attention(merged, wide, dilated, params)
    sp_a, sp_b = spatial_attention(merged, wide, dilated, params)
    grouped = T.add(residual_path(x, spec, params),
                    T.add(T.add(sp_a, sp_b), T.add(ch_a, ch_b))).data
    identical = np.array_equal(out, grouped) and corrupt != "fused_view"
    return CheckResult("fused_view", bool(identical),
                       "grouped attention view matches block output bitwise")


def _sk_reference_check(corrupt: Optional[str], inputs: int = 50) -> CheckResult:
    from .blocks import block_spec, init_esk_block, esk_forward

    worst = 0.0
    for seed in range(inputs):
        rng = np.random.default_rng(1000 + seed)
        spec = block_spec("sk", 3, 4)
        params = init_esk_block(spec, rng)
        cast_block_to(params, np.float64)
        x = rng.uniform(-1, 1, (2, 3, 8, 8))
        ours = esk_forward(Tensor(x, dtype=np.float64), spec, params).data
        ref = sk_block_reference(x, params)
        worst = max(worst, float(np.abs(ours - ref).max()))
    if corrupt == "sk_reference":
        worst += 1.0
    return CheckResult("sk_reference", worst < 1e-6, f"max abs gap {worst:.3e}")


def _metrics_checks(corrupt: Optional[str]) -> List[CheckResult]:
    from .metrics import ConfusionCounts, compute_metrics, confusion

    results = []
    rng = np.random.default_rng(3)
    exact = True
    for _ in range(100):
        pred = (rng.random((8, 8)) > 0.5).astype(np.float32)
        gt = (rng.random((8, 8)) > 0.5).astype(np.float32)
        counts = confusion(pred, gt)
        ref = confusion_reference(pred, gt)
        if (counts.tp, counts.fp, counts.tn, counts.fn) != ref:
            exact = False
    worked = compute_metrics(ConfusionCounts(tp=6, fp=2, tn=5, fn=3))
    rounded = (round(worked.jaccard, 2), round(worked.precision, 2),
               round(worked.recall, 2), round(worked.specificity, 2),
               round(worked.dice, 2))
    exact = exact and rounded == (54.55, 75.0, 66.67, 71.43, 70.59)
    if corrupt == "metrics_oracle":
        exact = False
    results.append(CheckResult("metrics_oracle", exact,
                               f"counts exact, worked example {rounded}"))

    from .metrics import curves
    probs = rng.random((4, 4)).astype(np.float64)
    gt = (rng.random((4, 4)) > 0.5).astype(np.float32)
    ours = curves({"a": probs}, {"a": gt})
    ref = curve_reference(probs, gt)
    same = (np.allclose(ours.thresholds, ref["thresholds"])
            and np.allclose(ours.tpr, ref["tpr"]) and np.allclose(ours.fpr, ref["fpr"])
            and np.allclose(ours.precision, ref["precision"])
            and abs(ours.auc - ref["auc"]) < 1e-12)
    if corrupt == "curve_oracle":
        same = False
    results.append(CheckResult("curve_oracle", bool(same),
                               f"auc ours {ours.auc:.6f} vs oracle {ref['auc']:.6f}"))
    return results


def _schedule_check(corrupt: Optional[str]) -> CheckResult:
    from .training import TrainConfig, lr_schedule

    config = TrainConfig()
    table = {0: 1e-3, 5: 1e-3, 9: 1e-3, 10: 5e-4, 19: 5e-4,
             20: 2.5e-4, 30: 1.25e-4, 40: 1e-4, 49: 1e-4}
    ok = all(lr_schedule(epoch, config) == lr for epoch, lr in table.items())
    if corrupt == "lr_schedule":
        ok = False
    return CheckResult("lr_schedule", ok, "halving-with-floor table exact")


def run_verification(seeds: int = 5, corrupt: Optional[str] = None) -> List[CheckResult]:
    """Run the full self-check suite; ``corrupt`` force-fails one named check
    (negative-control hook used by the CLI tests)."""
    results: List[CheckResult] = []
    results.extend(_grad_checks(range(seeds), corrupt))
    results.extend(_gate_checks(corrupt))
    results.append(_fused_view_check(corrupt))
    results.append(_sk_reference_check(corrupt))
    results.extend(_metrics_checks(corrupt))
    results.append(_schedule_check(corrupt))
    return results
