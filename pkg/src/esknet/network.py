"""The deeply supervised U-shaped segmentation network.

Four encoder stages (each a selective-kernel block followed by 2x2 max
pooling), a bottleneck block, and four decoder stages (nearest x2 upsample,
a 3x3 convolution halving the channels, concatenation with the matching
encoder skip, then a block). Stage 1 is the bottleneck, stages 2-5 the
decoder levels; every active stage owns an independent 1x1 head whose
sigmoid output is upsampled back to full resolution, and stage 5 is the
final prediction. With deep supervision off only the stage-5 head exists.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .blocks import (EskBlockParams, EskBlockSpec, block_parameter_count,
                     block_spec, esk_forward, init_esk_block,
                     named_block_buffers, named_block_parameters,
                     set_block_mode)
from .tensor import ConvParams, ShapeError, Tensor, init_conv

STAGE_COUNT = 5
POOLINGS = 4

CHECKPOINT_MAGIC = b"ESKN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_size: Tuple[int, int] = (64, 64)
    base_channels: int = 8
    stage_channels: Optional[Tuple[int, ...]] = None
    block_kind: str = "esk"
    deep_supervision: bool = True
    supervision_factors: Tuple[int, ...] = (16, 8, 4, 2, 1)
    reduction_dim: int = 32
    dilation: int = 3

    def __post_init__(self):
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input size {self.input_size} must be divisible by 16")
        if self.stage_channels is not None and len(self.stage_channels) != STAGE_COUNT:
            raise ValueError("stage_channels must list exactly 5 widths")
        if len(self.supervision_factors) != STAGE_COUNT:
            raise ValueError("supervision_factors must list exactly 5 factors")
        if any(f < 1 for f in self.supervision_factors):
            raise ValueError("supervision factors must be positive")
        if self.supervision_factors[-1] != 1:
            raise ValueError("the final stage factor must be 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    def widths(self) -> Tuple[int, ...]:
        if self.stage_channels is not None:
            return tuple(self.stage_channels)
        return tuple(self.base_channels * m for m in (1, 2, 4, 8, 16))

    def active_stages(self) -> Tuple[int, ...]:
        return tuple(range(1, STAGE_COUNT + 1)) if self.deep_supervision else (STAGE_COUNT,)

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "base_channels": self.base_channels,
            "stage_channels": list(self.stage_channels) if self.stage_channels else None,
            "block_kind": self.block_kind,
            "deep_supervision": self.deep_supervision,
            "supervision_factors": list(self.supervision_factors),
            "reduction_dim": self.reduction_dim,
            "dilation": self.dilation,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            input_size=tuple(d["input_size"]),
            base_channels=d["base_channels"],
            stage_channels=tuple(d["stage_channels"]) if d.get("stage_channels") else None,
            block_kind=d["block_kind"],
            deep_supervision=d["deep_supervision"],
            supervision_factors=tuple(d["supervision_factors"]),
            reduction_dim=d["reduction_dim"],
            dilation=d["dilation"])


@dataclass(frozen=True)
class NetworkLayout:
    """Block and head shapes derived from a spec; the single source used by
    build, forward and the parameter/FLOP counters."""

    encoder_specs: Tuple[EskBlockSpec, ...]
    bottleneck_spec: EskBlockSpec
    up_shapes: Tuple[Tuple[int, int], ...]     # (in, out) of each 3x3 up-conv
    decoder_specs: Tuple[EskBlockSpec, ...]
    head_widths: Dict[int, int]                # stage index -> feature width


def network_layout(spec: NetworkSpec) -> NetworkLayout:
    w = spec.widths()
    make = lambda cin, cout: block_spec(spec.block_kind, cin, cout,
                                        spec.reduction_dim, spec.dilation)
    encoder_ins = (1, w[0], w[1], w[2])
    encoder = tuple(make(encoder_ins[i], w[i]) for i in range(POOLINGS))
    bottleneck = make(w[3], w[4])
    ups = tuple((w[4 - j], w[3 - j]) for j in range(POOLINGS))
    decoder = tuple(make(2 * w[3 - j], w[3 - j]) for j in range(POOLINGS))
    stage_widths = {1: w[4], 2: w[3], 3: w[2], 4: w[1], 5: w[0]}
    heads = {s: stage_widths[s] for s in spec.active_stages()}
    return NetworkLayout(encoder, bottleneck, ups, decoder, heads)


@dataclass
class NetworkParams:
    encoder: List[EskBlockParams]
    bottleneck: EskBlockParams
    up_convs: List[ConvParams]
    decoder: List[EskBlockParams]
    heads: Dict[int, ConvParams]


def build(spec: NetworkSpec, rng_seed: int) -> NetworkParams:
    """Allocate and initialize every parameter tensor, deterministic per seed."""
    layout = network_layout(spec)
    rng = np.random.default_rng(rng_seed)
    encoder = [init_esk_block(s, rng) for s in layout.encoder_specs]
    bottleneck = init_esk_block(layout.bottleneck_spec, rng)
    up_convs = [init_conv(rng, cout, cin, 3) for cin, cout in layout.up_shapes]
    decoder = [init_esk_block(s, rng) for s in layout.decoder_specs]
    heads = {stage: init_conv(rng, 1, width, 1)
             for stage, width in sorted(layout.head_widths.items())}
    return NetworkParams(encoder, bottleneck, up_convs, decoder, heads)


def named_parameters(params: NetworkParams) -> Iterator[Tuple[str, Tensor]]:
    for i, bp in enumerate(params.encoder):
        yield from named_block_parameters(f"encoder.{i}", bp)
    yield from named_block_parameters("bottleneck", params.bottleneck)
    for i, cp in enumerate(params.up_convs):
        yield f"up.{i}.kernel", cp.kernel
        yield f"up.{i}.bias", cp.bias
    for i, bp in enumerate(params.decoder):
        yield from named_block_parameters(f"decoder.{i}", bp)
    for stage in sorted(params.heads):
        yield f"head.{stage}.kernel", params.heads[stage].kernel
        yield f"head.{stage}.bias", params.heads[stage].bias


def named_buffers(params: NetworkParams) -> Iterator[Tuple[str, Tensor]]:
    for i, bp in enumerate(params.encoder):
        yield from named_block_buffers(f"encoder.{i}", bp)
    yield from named_block_buffers("bottleneck", params.bottleneck)
    for i, bp in enumerate(params.decoder):
        yield from named_block_buffers(f"decoder.{i}", bp)


def named_state(params: NetworkParams) -> Dict[str, Tensor]:
    state = dict(named_parameters(params))
    state.update(dict(named_buffers(params)))
    return state


def set_mode(params: NetworkParams, mode: str) -> None:
    """Switch every batch-norm between batch ("train") and running ("eval")
    statistics."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    for bp in [*params.encoder, params.bottleneck, *params.decoder]:
        set_block_mode(bp, mode)


def forward(spec: NetworkSpec, params: NetworkParams, image: Tensor,
            want_features: bool = False):
    """Run the network; returns the list of stage probability masks.

    ``image`` is 1,H,W or N,1,H,W with values in [0, 1]. Every returned mask
    is at full input resolution with values strictly inside (0, 1); the last
    entry is the final prediction. With ``want_features`` the per-stage
    feature maps (and encoder maps) are returned alongside for inspection.
    """
    layout = network_layout(spec)
    squeeze = image.ndim == 3
    x = T.reshape(image, (1,) + image.shape) if squeeze else image
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected a single-channel image, got {image.shape}")
    if x.shape[2:] != tuple(spec.input_size):
        raise ShapeError(f"image extent {x.shape[2:]} does not match the spec "
                         f"input size {spec.input_size}")
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"image values must lie in [0, 1], got [{lo}, {hi}]")

    skips = []
    for i, bp in enumerate(params.encoder):
        feat = esk_forward(x, layout.encoder_specs[i], bp)
        skips.append(feat)
        x = T.max_pool2d(feat, 2)

    d = esk_forward(x, layout.bottleneck_spec, params.bottleneck)
    stage_feats = [d]
    for j in range(POOLINGS):
        up = T.conv2d(T.upsample2d(d, 2), params.up_convs[j])
        d = T.concat([skips[POOLINGS - 1 - j], up], axis=1)
        d = esk_forward(d, layout.decoder_specs[j], params.decoder[j])
        stage_feats.append(d)

    outputs = []
    for stage in spec.active_stages():
        feat = stage_feats[stage - 1]
        prob = T.activation(T.conv2d(feat, params.heads[stage]), "sigmoid")
        mask = T.upsample2d(prob, spec.supervision_factors[stage - 1])
        outputs.append(T.reshape(mask, mask.shape[1:]) if squeeze else mask)

    if want_features:
        features = {"encoder": skips, "stages": stage_feats}
        return outputs, features
    return outputs


def total_loss(outputs: List[Tensor], target) -> Tensor:
    """Sum of the per-stage binary cross-entropies against the full-resolution
    target."""
    if not outputs:
        raise ValueError("no outputs to score")
    loss = T.bce_loss(outputs[0], target)
    for out in outputs[1:]:
        loss = T.add(loss, T.bce_loss(out, target))
    return loss


# ---------------------------------------------------------------------------
# parameter / FLOP accounting
# ---------------------------------------------------------------------------

def _conv_flops(cin: int, cout: int, k: int, h: int, w: int) -> int:
    # Convention: one multiply-accumulate = 2 FLOPs; biases, norms,
    # activations, pooling and resampling are not counted.
    return 2 * k * k * cin * cout * h * w

def _block_flops(spec: EskBlockSpec, h: int, w: int) -> int:
    flops = _conv_flops(spec.in_channels, spec.out_channels, 5, h, w)
    flops += _conv_flops(spec.in_channels, spec.out_channels, 3, h, w)
    if spec.enable_channel_attention:
        red = spec.effective_reduction
        flops += 2 * spec.out_channels * red   # reduce FC (per sample)
        flops += 2 * red * spec.out_channels   # expand FC
    if spec.enable_spatial_attention:
        flops += _conv_flops(spec.out_channels, 1, 1, h, w)
    if spec.enable_residual and spec.in_channels != spec.out_channels:
        flops += _conv_flops(spec.in_channels, spec.out_channels, 1, h, w)
    return flops


def count_params_flops(spec: NetworkSpec) -> Tuple[int, int]:
    """Exact learnable-parameter total and forward multiply-accumulate FLOPs
    (2 per MAC) for one sample at the spec input size."""
    layout = network_layout(spec)
    h, w = spec.input_size
    params = 0
    flops = 0

    size = (h, w)
    for enc in layout.encoder_specs:
        params += block_parameter_count(enc)
        flops += _block_flops(enc, *size)
        size = (size[0] // 2, size[1] // 2)

    params += block_parameter_count(layout.bottleneck_spec)
    flops += _block_flops(layout.bottleneck_spec, *size)

    for j, (cin, cout) in enumerate(layout.up_shapes):
        size = (size[0] * 2, size[1] * 2)
        params += cout * cin * 9 + cout
        flops += _conv_flops(cin, cout, 3, *size)
        dec = layout.decoder_specs[j]
        params += block_parameter_count(dec)
        flops += _block_flops(dec, *size)

    for stage, width in layout.head_widths.items():
        params += width + 1
        factor = spec.supervision_factors[stage - 1]
        flops += _conv_flops(width, 1, 1, h // factor, w // factor)
    return params, flops


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0-3   magic "ESKN"
#   u32         format version
#   u32         header length, then that many bytes of UTF-8 JSON holding
#               {"format_version", "spec", "epoch", "seed", "adam_step"}
#   u32         tensor count, then per tensor:
#               u16 name length + name bytes, u8 ndim, u32 per dim,
#               then the values as little-endian 32-bit reals, row-major.

@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: NetworkParams
    epoch: int = 0
    seed: int = 0
    optimizer_state: Optional[dict] = None   # {"step": int, "m": {...}, "v": {...}}


def _write_tensor(buf: io.BufferedWriter, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_tensor(buf) -> Tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", buf.read(2))
    name = buf.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": checkpoint.spec.to_dict(),
        "epoch": checkpoint.epoch,
        "seed": checkpoint.seed,
        "adam_step": (checkpoint.optimizer_state or {}).get("step"),
    }
    entries = [(name, t.data) for name, t in named_state(checkpoint.params).items()]
    if checkpoint.optimizer_state is not None:
        for name, arr in sorted(checkpoint.optimizer_state["m"].items()):
            entries.append((f"adam.m.{name}", arr))
        for name, arr in sorted(checkpoint.optimizer_state["v"].items()):
            entries.append((f"adam.v.{name}", arr))

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, data in entries:
            _write_tensor(fh, name, data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        blobs = dict(_read_tensor(fh) for _ in range(count))

    spec = NetworkSpec.from_dict(header["spec"])
    params = build(spec, rng_seed=0)
    state = named_state(params)
    for name, tensor in state.items():
        if name not in blobs:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if blobs[name].shape != tensor.data.shape:
            raise ValueError(f"checkpoint tensor {name!r} has shape "
                             f"{blobs[name].shape}, expected {tensor.data.shape}")
        tensor.data = blobs[name]

    optimizer_state = None
    if header.get("adam_step") is not None:
        m = {k[len("adam.m."):]: v for k, v in blobs.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in blobs.items() if k.startswith("adam.v.")}
        optimizer_state = {"step": header["adam_step"], "m": m, "v": v}
    return Checkpoint(spec=spec, params=params, epoch=header["epoch"],
                      seed=header["seed"], optimizer_state=optimizer_state)
