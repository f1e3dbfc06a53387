"""Selective-kernel convolution blocks with channel and spatial recalibration.

A block runs two parallel convolutions over its input: a wide 5x5 branch and
a dilated 3x3 branch whose taps are spread by the dilation rate, so the two
branches see different receptive fields. The branch outputs are summed into
a merged map from which gates are derived:

* the channel gate is a per-channel sigmoid computed from pooled statistics
  through a bottleneck of two fully connected layers (with batch norm and
  ReLU in between); it weights the dilated branch, and its complement
  weights the wide branch;
* the spatial gate is a per-pixel sigmoid from a 1x1 convolution over the
  rectified merged map, applied the same way across all channels.

The full block adds the gated branch pairs from both attention modules onto
a residual copy of the input (projected by a 1x1 convolution when the
channel count changes). Toggling the spatial gate and the residual path off
leaves the classic selective-kernel block; toggling everything off leaves
the plain two-branch convolution pair used as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import (BatchNormParams, ConvParams, DenseParams, ShapeError,
                     Tensor, init_batch_norm, init_conv, init_dense)

BLOCK_KINDS = ("plain", "sk", "esk")


@dataclass(frozen=True)
class EskBlockSpec:
    in_channels: int
    out_channels: int
    reduction_dim: int = 32
    enable_channel_attention: bool = True
    enable_spatial_attention: bool = True
    enable_residual: bool = True
    dilation: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.reduction_dim < 1 or self.dilation < 1:
            raise ValueError("reduction_dim and dilation must be >= 1")

    @property
    def effective_reduction(self) -> int:
        # The bottleneck width is capped by the channel count so toy widths
        # below the default 32 still produce a valid shape.
        return min(self.reduction_dim, self.out_channels)


def block_spec(kind: str, in_channels: int, out_channels: int,
               reduction_dim: int = 32, dilation: int = 3) -> EskBlockSpec:
    """Preset specs for the ablation ladder: plain / sk / esk."""
    if kind not in BLOCK_KINDS:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
    return EskBlockSpec(
        in_channels=in_channels,
        out_channels=out_channels,
        reduction_dim=reduction_dim,
        enable_channel_attention=kind in ("sk", "esk"),
        enable_spatial_attention=kind == "esk",
        enable_residual=kind == "esk",
        dilation=dilation)


@dataclass
class EskBlockParams:
    branch5: ConvParams                      # 5x5, dilation 1
    branch3: ConvParams                      # 3x3, dilated
    fc_reduce: Optional[DenseParams] = None
    reduce_norm: Optional[BatchNormParams] = None
    fc_expand: Optional[DenseParams] = None
    spatial_conv: Optional[ConvParams] = None
    residual_proj: Optional[ConvParams] = None


def init_esk_block(spec: EskBlockSpec, rng: np.random.Generator) -> EskBlockParams:
    """Allocate block parameters in a fixed rng draw order (determinism)."""
    branch5 = init_conv(rng, spec.out_channels, spec.in_channels, 5)
    branch3 = init_conv(rng, spec.out_channels, spec.in_channels, 3,
                        dilation=spec.dilation)
    fc_reduce = reduce_norm = fc_expand = spatial_conv = residual_proj = None
    if spec.enable_channel_attention:
        red = spec.effective_reduction
        fc_reduce = init_dense(rng, red, spec.out_channels)
        reduce_norm = init_batch_norm(red)
        fc_expand = init_dense(rng, spec.out_channels, red)
    if spec.enable_spatial_attention:
        spatial_conv = init_conv(rng, 1, spec.out_channels, 1)
    if spec.enable_residual and spec.in_channels != spec.out_channels:
        residual_proj = init_conv(rng, spec.out_channels, spec.in_channels, 1)
    return EskBlockParams(branch5, branch3, fc_reduce, reduce_norm, fc_expand,
                          spatial_conv, residual_proj)


def _promote(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C,H,W or N,C,H,W input, got {x.shape}")


def channel_gate(merged: Tensor, params: EskBlockParams) -> Tensor:
    """Per-channel gate in (0,1), shaped for channel broadcast (N,C,1,1)."""
    if params.fc_reduce is None:
        raise ValueError("channel attention is disabled for this block")
    merged, _ = _promote(merged)
    n, c = merged.shape[0], merged.shape[1]
    pooled = T.reshape(T.global_avg_pool(merged), (n, c))
    z = T.dense(pooled, params.fc_reduce)
    z = T.batch_norm(z, params.reduce_norm)
    z = T.activation(z, "relu")
    z = T.dense(z, params.fc_expand)
    gate = T.activation(z, "sigmoid")
    return T.reshape(gate, (n, c, 1, 1))


def channel_attention(merged: Tensor, wide: Tensor, dilated: Tensor,
                      params: EskBlockParams) -> Tuple[Tensor, Tensor]:
    """Gate the branch pair per channel; the dilated branch gets the gate,
    the wide branch its complement."""
    if not (merged.shape[-3:] == wide.shape[-3:] == dilated.shape[-3:]):
        raise ShapeError(f"branch shapes differ: {merged.shape} / {wide.shape} "
                         f"/ {dilated.shape}")
    gate = channel_gate(merged, params)
    squeeze = wide.ndim == 3
    wide4, _ = _promote(wide)
    dilated4, _ = _promote(dilated)
    low = T.mul(T.sub(1.0, gate), wide4)
    high = T.mul(gate, dilated4)
    if squeeze:
        low = T.reshape(low, low.shape[1:])
        high = T.reshape(high, high.shape[1:])
    return low, high


def spatial_gate(merged: Tensor, params: EskBlockParams) -> Tensor:
    """Per-pixel gate in (0,1), shaped for spatial broadcast (N,1,H,W)."""
    if params.spatial_conv is None:
        raise ValueError("spatial attention is disabled for this block")
    merged, _ = _promote(merged)
    logits = T.conv2d(T.activation(merged, "relu"), params.spatial_conv)
    return T.activation(logits, "sigmoid")


def spatial_attention(merged: Tensor, wide: Tensor, dilated: Tensor,
                      params: EskBlockParams) -> Tuple[Tensor, Tensor]:
    """Gate the branch pair per pixel, broadcast across channels."""
    if not (merged.shape[-3:] == wide.shape[-3:] == dilated.shape[-3:]):
        raise ShapeError(f"branch shapes differ: {merged.shape} / {wide.shape} "
                         f"/ {dilated.shape}")
    gate = spatial_gate(merged, params)
    squeeze = wide.ndim == 3
    wide4, _ = _promote(wide)
    dilated4, _ = _promote(dilated)
    low = T.mul(T.sub(1.0, gate), wide4)
    high = T.mul(gate, dilated4)
    if squeeze:
        low = T.reshape(low, low.shape[1:])
        high = T.reshape(high, high.shape[1:])
    return low, high


def residual_path(x: Tensor, spec: EskBlockSpec, params: EskBlockParams) -> Tensor:
    """Identity when channel counts match, else the 1x1 projection."""
    if spec.in_channels == spec.out_channels:
        return x
    if params.residual_proj is None:
        raise ValueError("residual path is disabled for this block")
    return T.conv2d(x, params.residual_proj)


def esk_forward(x: Tensor, spec: EskBlockSpec, params: EskBlockParams) -> Tensor:
    """Run the block; output has spec.out_channels and the input's extent.

    Fusion order is fixed: each attention module's gated pair is summed
    first, the two module sums are added (spatial first), and the residual
    joins last. Both published formulations of the fused output reduce to
    this association, which keeps them bitwise identical.
    """
    x4, squeeze = _promote(x)
    if x4.shape[1] != spec.in_channels:
        raise ShapeError(f"input {x.shape} has {x4.shape[1]} channels, block expects "
                         f"{spec.in_channels}")

    wide = T.conv2d(x4, params.branch5)
    dilated = T.conv2d(x4, params.branch3)
    merged = T.add(wide, dilated)

    attention = None
    if spec.enable_channel_attention:
        ch_low, ch_high = channel_attention(merged, wide, dilated, params)
        attention = T.add(ch_low, ch_high)
    if spec.enable_spatial_attention:
        sp_low, sp_high = spatial_attention(merged, wide, dilated, params)
        spatial_sum = T.add(sp_low, sp_high)
        attention = spatial_sum if attention is None else T.add(spatial_sum, attention)
    if attention is None:
        attention = merged

    out = attention
    if spec.enable_residual:
        out = T.add(residual_path(x4, spec, params), attention)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def zero_attention_parameters(params: EskBlockParams) -> None:
    """Zero every attention parameter so both gates sit at exactly 0.5."""
    for p in (params.fc_reduce, params.fc_expand):
        if p is not None:
            p.weight.data = np.zeros_like(p.weight.data)
            p.bias.data = np.zeros_like(p.bias.data)
    if params.reduce_norm is not None:
        params.reduce_norm.shift.data = np.zeros_like(params.reduce_norm.shift.data)
        params.reduce_norm.running_mean.data = np.zeros_like(
            params.reduce_norm.running_mean.data)
    if params.spatial_conv is not None:
        params.spatial_conv.kernel.data = np.zeros_like(params.spatial_conv.kernel.data)
        params.spatial_conv.bias.data = np.zeros_like(params.spatial_conv.bias.data)


def set_block_mode(params: EskBlockParams, mode: str) -> None:
    if params.reduce_norm is not None:
        params.reduce_norm.mode = mode


def named_block_parameters(prefix: str, params: EskBlockParams) -> Iterator[Tuple[str, Tensor]]:
    """Learnable tensors in a fixed order, named for checkpoints/optimizers."""
    yield f"{prefix}.branch5.kernel", params.branch5.kernel
    yield f"{prefix}.branch5.bias", params.branch5.bias
    yield f"{prefix}.branch3.kernel", params.branch3.kernel
    yield f"{prefix}.branch3.bias", params.branch3.bias
    if params.fc_reduce is not None:
        yield f"{prefix}.fc_reduce.weight", params.fc_reduce.weight
        yield f"{prefix}.fc_reduce.bias", params.fc_reduce.bias
        yield f"{prefix}.reduce_norm.scale", params.reduce_norm.scale
        yield f"{prefix}.reduce_norm.shift", params.reduce_norm.shift
        yield f"{prefix}.fc_expand.weight", params.fc_expand.weight
        yield f"{prefix}.fc_expand.bias", params.fc_expand.bias
    if params.spatial_conv is not None:
        yield f"{prefix}.spatial_conv.kernel", params.spatial_conv.kernel
        yield f"{prefix}.spatial_conv.bias", params.spatial_conv.bias
    if params.residual_proj is not None:
        yield f"{prefix}.residual_proj.kernel", params.residual_proj.kernel
        yield f"{prefix}.residual_proj.bias", params.residual_proj.bias


def named_block_buffers(prefix: str, params: EskBlockParams) -> Iterator[Tuple[str, Tensor]]:
    """Non-learnable state (batch-norm running statistics)."""
    if params.reduce_norm is not None:
        yield f"{prefix}.reduce_norm.running_mean", params.reduce_norm.running_mean
        yield f"{prefix}.reduce_norm.running_var", params.reduce_norm.running_var


def block_parameter_count(spec: EskBlockSpec) -> int:
    """Closed-form learnable parameter count for one block."""
    count = spec.out_channels * spec.in_channels * 25 + spec.out_channels
    count += spec.out_channels * spec.in_channels * 9 + spec.out_channels
    if spec.enable_channel_attention:
        red = spec.effective_reduction
        count += red * spec.out_channels + red          # reduce FC
        count += 2 * red                                # norm scale + shift
        count += spec.out_channels * red + spec.out_channels  # expand FC
    if spec.enable_spatial_attention:
        count += spec.out_channels + 1                  # 1x1 conv to one map
    if spec.enable_residual and spec.in_channels != spec.out_channels:
        count += spec.out_channels * spec.in_channels + spec.out_channels
    return count
