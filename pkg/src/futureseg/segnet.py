"""Full prediction network: encoder pyramid, per-scale recurrence, decoder.

Each of the four input class maps is one-hot encoded and pushed through a
shared 4-stage strided encoder (total stride 16, dilation 2 in the deepest
stage). Per scale, the four frames' feature maps feed one recurrent module
(unidirectional, bidirectional, or the non-recurrent concat baseline).
The decoder fuses the per-scale outputs top-down: starting at the coarsest
map, repeatedly apply a 1x1 convolution to the next finer width, upsample
x2, and add the finer map; a final 1x1 convolution and upsample produce
per-class logits at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    relu,
    slice_batch,
    tensor_new,
    upsample_nearest,
)
from .convlstm import ConvLSTMParams, run_bidirectional, run_sequence
from .data import one_hot_batch

MODE_NONE = "none"
MODE_UNI = "uni"
MODE_BI = "bi"
MODES = (MODE_NONE, MODE_UNI, MODE_BI)

NUM_SCALES = 4
TOTAL_STRIDE = 16
LSTM_KERNELS = (3, 3, 3, 1)  # 1x1 at the coarsest scale
NUM_FRAMES = 4


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    height: int
    width: int
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    mode: str = MODE_UNI

    def __post_init__(self):
        if self.num_classes < 2:
            raise ShapeError(f"need >= 2 classes, got {self.num_classes}")
        if self.height % TOTAL_STRIDE or self.width % TOTAL_STRIDE:
            raise ShapeError(f"input {self.height}x{self.width} must be a "
                             f"multiple of {TOTAL_STRIDE}")
        if len(self.widths) != NUM_SCALES or min(self.widths) < 1:
            raise ShapeError(f"need {NUM_SCALES} positive widths, got {self.widths}")
        if self.mode not in MODES:
            raise ShapeError(f"mode must be one of {MODES}, got {self.mode!r}")

    def scale_dims(self) -> list[tuple[int, int]]:
        """Spatial dims of the feature pyramid: 1/2, 1/4, 1/8, 1/16."""
        return [(self.height >> s, self.width >> s) for s in range(1, NUM_SCALES + 1)]

    def merged_widths(self) -> tuple[int, ...]:
        """Channel width of each scale's merged map (doubled when bidirectional)."""
        if self.mode == MODE_BI:
            return tuple(2 * c for c in self.widths)
        return tuple(self.widths)


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class ModelParams:
    encoder: list[ConvParams]
    laterals: list[ConvParams]          # coarse-to-fine merge convs
    classifier: ConvParams
    cells: list = field(default_factory=list)   # per scale; (fwd, bwd) pairs when bidirectional
    fusion: list[ConvParams] = field(default_factory=list)  # non-recurrent baseline convs


def _conv_init(cout: int, cin: int, k: int, seed: int, gain: float = 1.0) -> ConvParams:
    scale = gain / np.sqrt(cin * k * k)
    return ConvParams(
        w=tensor_new((cout, cin, k, k), "uniform", scale, seed=seed, requires_grad=True),
        b=tensor_new((1, cout, 1, 1), requires_grad=True),
    )


def init_model_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded parameter set for the configured mode.

    The classifier convolution gets a deliberately small init so untrained
    logits stay near zero and the first predictions are near-uniform.
    """
    seeds = iter(np.random.SeedSequence(int(seed)).generate_state(64, dtype=np.uint64))

    def nxt() -> int:
        return int(next(seeds))

    c = cfg.widths
    enc_in = (cfg.num_classes,) + c[:3]
    encoder = [_conv_init(c[k], enc_in[k], 3, nxt()) for k in range(NUM_SCALES)]

    cells: list = []
    fusion: list[ConvParams] = []
    dims = cfg.scale_dims()
    if cfg.mode == MODE_NONE:
        fusion = [_conv_init(c[k], NUM_FRAMES * c[k], 3, nxt()) for k in range(NUM_SCALES)]
    else:
        for k in range(NUM_SCALES):
            hs, ws = dims[k]
            fwd = ConvLSTMParams.init(c[k], c[k], hs, ws, LSTM_KERNELS[k], nxt())
            if cfg.mode == MODE_BI:
                bwd = ConvLSTMParams.init(c[k], c[k], hs, ws, LSTM_KERNELS[k], nxt())
                cells.append((fwd, bwd))
            else:
                cells.append(fwd)

    m = cfg.merged_widths()
    laterals = [_conv_init(m[k], m[k + 1], 1, nxt()) for k in (2, 1, 0)]
    classifier = _conv_init(cfg.num_classes, m[0], 1, nxt(), gain=0.1)
    return ModelParams(encoder=encoder, laterals=laterals, classifier=classifier,
                       cells=cells, fusion=fusion)


def named_parameters(params: ModelParams) -> dict[str, Tensor]:
    """Deterministically ordered name -> tensor mapping (checkpoint order)."""
    out: dict[str, Tensor] = {}
    for k, cp in enumerate(params.encoder, start=1):
        out[f"enc{k}.w"] = cp.w
        out[f"enc{k}.b"] = cp.b
    for k, cell in enumerate(params.cells, start=1):
        if isinstance(cell, tuple):
            out.update(cell[0].named(f"lstm{k}.fwd."))
            out.update(cell[1].named(f"lstm{k}.bwd."))
        else:
            out.update(cell.named(f"lstm{k}."))
    for k, cp in enumerate(params.fusion, start=1):
        out[f"fuse{k}.w"] = cp.w
        out[f"fuse{k}.b"] = cp.b
    for name, cp in zip(("lat3", "lat2", "lat1"), params.laterals):
        out[f"{name}.w"] = cp.w
        out[f"{name}.b"] = cp.b
    out["cls.w"] = params.classifier.w
    out["cls.b"] = params.classifier.b
    return out


def encode(params: ModelParams, cfg: ModelConfig, s_onehot: Tensor) -> list[Tensor]:
    """One-hot frame [N,K,H,W] -> four feature maps at strides 2,4,8,16.

    Each stage is a stride-2 3x3 convolution followed by rectification;
    the deepest stage dilates its taps by 2.
    """
    n, k, h, w = s_onehot.dims
    if k != cfg.num_classes:
        raise ShapeError(f"input has {k} channels, model expects {cfg.num_classes}")
    if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
        raise ShapeError(f"input {h}x{w} must be a multiple of {TOTAL_STRIDE}")
    feats = []
    x = s_onehot
    for stage, cp in enumerate(params.encoder):
        dil = 2 if stage == NUM_SCALES - 1 else 1
        x = relu(conv2d(x, cp.w, cp.b, stride=2, padding=dil, dilation=dil))
        feats.append(x)
    return feats


def decode(params: ModelParams, cfg: ModelConfig, gs: list[Tensor]) -> Tensor:
    """Top-down fusion of the four merged maps into [N,K,H,W] logits."""
    dims = cfg.scale_dims()
    m = cfg.merged_widths()
    if len(gs) != NUM_SCALES:
        raise ShapeError(f"decoder needs exactly {NUM_SCALES} maps, got {len(gs)}")
    for k, g in enumerate(gs):
        if g.dims[1] != m[k] or g.dims[2:] != dims[k]:
            raise ShapeError(f"pyramid map {k + 1} has dims {g.dims}, expected "
                             f"(N,{m[k]},{dims[k][0]},{dims[k][1]})")
    z = gs[3]
    for lat, g in zip(params.laterals, (gs[2], gs[1], gs[0])):
        z = upsample_nearest(conv2d(z, lat.w, lat.b), 2) + g
    return upsample_nearest(conv2d(z, params.classifier.w, params.classifier.b), 2)


def fusion_baseline(params: ModelParams, cfg: ModelConfig,
                    frame_feats: list[list[Tensor]]) -> list[Tensor]:
    """Non-recurrent merge: per scale, concat the 4 frames' features along
    channels and apply one same-padding 3x3 convolution back to the scale
    width. Order-sensitive but stateless."""
    if len(frame_feats) != NUM_FRAMES:
        raise ShapeError(f"expected {NUM_FRAMES} frames of features")
    gs = []
    for k in range(NUM_SCALES):
        stack = frame_feats[0][k]
        for t in range(1, NUM_FRAMES):
            stack = concat_channels(stack, frame_feats[t][k])
        cp = params.fusion[k]
        gs.append(conv2d(stack, cp.w, cp.b, padding=1))
    return gs


def merge_scales(params: ModelParams, cfg: ModelConfig,
                 frame_feats: list[list[Tensor]]) -> list[Tensor]:
    """Dispatch per-scale temporal merging according to cfg.mode."""
    if cfg.mode == MODE_NONE:
        return fusion_baseline(params, cfg, frame_feats)
    gs = []
    for k in range(NUM_SCALES):
        seq = [frame_feats[t][k] for t in range(NUM_FRAMES)]
        if cfg.mode == MODE_BI:
            fwd, bwd = params.cells[k]
            gs.append(run_bidirectional(fwd, bwd, seq))
        else:
            gs.append(run_sequence(params.cells[k], seq))
    return gs


def forward_one_step(params: ModelParams, cfg: ModelConfig, frames) -> Tensor:
    """Four class maps (each (H,W) or (N,H,W)) -> next-frame logits [N,K,H,W]."""
    frames = list(frames)
    if len(frames) != NUM_FRAMES:
        raise ShapeError(f"expected {NUM_FRAMES} input frames, got {len(frames)}")
    maps = []
    for f in frames:
        m = np.asarray(f)
        if m.ndim == 2:
            m = m[None]
        if m.ndim != 3:
            raise ShapeError(f"frame must be (H,W) or (N,H,W), got {m.shape}")
        maps.append(m)
    if len({m.shape for m in maps}) != 1:
        raise ShapeError("input frames disagree on shape")
    # One encoder pass over all four frames stacked along batch, then split
    # back per frame: fewer, fatter convolutions.
    n = maps[0].shape[0]
    stacked = one_hot_batch(np.concatenate(maps, axis=0), cfg.num_classes)
    big_feats = encode(params, cfg, stacked)
    frame_feats = [[slice_batch(f, t * n, (t + 1) * n) for f in big_feats]
                   for t in range(NUM_FRAMES)]
    gs = merge_scales(params, cfg, frame_feats)
    return decode(params, cfg, gs)
