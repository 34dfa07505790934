"""Training loop, prediction, mIoU evaluation, baselines, checkpoint I/O.

Training slides a 4-frame window over every sequence (frames i..i+3 in,
frame i+4 out), minimizes mean pixel cross-entropy with Adam, and keeps
the parameters of the epoch with the best one-step validation mIoU.
Multi-step prediction is autoregressive: each predicted map is fed back
as the newest input. All of it is deterministic for a fixed
(config, seed, data) triple.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
import os
import struct
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    softmax_cross_entropy_mean,
)
from .convlstm import ConvLSTMParams
from .data import SegDataset, augment
from .segnet import (
    MODE_BI,
    MODE_NONE,
    MODE_UNI,
    MODES,
    NUM_FRAMES,
    ConvParams,
    ModelConfig,
    ModelParams,
    forward_one_step,
    init_model_params,
    named_parameters,
)

CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1
_MODE_CODES = {MODE_NONE: 0, MODE_UNI: 1, MODE_BI: 2}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

THREADS_ENV = "FUTURESEG_THREADS"


class CheckpointError(ValueError):
    """Malformed checkpoint file or config/parameter mismatch."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = False
    mode: str = MODE_UNI
    horizon: int = 3

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need epochs >= 0, batch >= 1, lr > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    seed: int
    epoch: int


@dataclass
class MetricsReport:
    """Per-class IoU (nan when a class appears in neither prediction nor
    truth), their mean over present classes, and optional training extras."""

    per_class_iou: list[float]
    present: list[bool]
    miou: float
    per_horizon_miou: list[float] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    initial_loss: float | None = None

    def to_json(self) -> str:
        return json.dumps({
            "miou": self.miou,
            "per_class_iou": [None if math.isnan(v) else round(v, 6)
                              for v in self.per_class_iou],
            "present": self.present,
            "per_horizon_miou": [round(v, 6) for v in self.per_horizon_miou],
            "loss_curve": [round(v, 6) for v in self.loss_curve],
            "initial_loss": self.initial_loss,
        })


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """KxK count matrix indexed [truth, prediction]."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction/truth sizes differ: {pred.shape} vs {gt.shape}")
    if pred.size and (int(pred.max()) >= num_classes or int(gt.max()) >= num_classes):
        raise IndexError(f"class index out of range [0,{num_classes})")
    idx = gt.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> MetricsReport:
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    iou = np.full(conf.shape[0], np.nan)
    iou[present] = inter[present] / union[present]
    if not present.any():
        raise ValueError("no class present in prediction or truth")
    return MetricsReport(per_class_iou=[float(v) for v in iou],
                         present=[bool(p) for p in present],
                         miou=float(iou[present].mean()))


def evaluate_miou(preds, gts, num_classes: int) -> MetricsReport:
    """Aggregate IoU per class over one or more prediction/truth map pairs.

    Classes absent from both sides are flagged and excluded from the mean.
    """
    preds = [preds] if isinstance(preds, np.ndarray) and preds.ndim == 2 else list(preds)
    gts = [gts] if isinstance(gts, np.ndarray) and gts.ndim == 2 else list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError(f"need equal nonempty map sets, got {len(preds)}/{len(gts)}")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        conf += confusion_matrix(p, g, num_classes)
    return miou_from_confusion(conf)


def copy_last_baseline(frames) -> np.ndarray:
    """Predict the future as an exact copy of the newest observed map."""
    frames = list(frames)
    if not frames:
        raise ValueError("no input frames")
    return np.array(frames[-1], copy=True)


def adam_step(params: dict[str, Tensor], grads: dict[Tensor, Tensor],
              moments: dict[str, tuple[np.ndarray, np.ndarray]], t: int,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place under exclusive access.

    Parameters missing from ``grads`` (not reached by the loss) are left
    untouched, moments included.
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(p)
        if g is None:
            continue
        if g.data.shape != p.data.shape:
            raise ShapeError(f"gradient dims {g.dims} != parameter dims {p.dims} ({name})")
        gd = g.data
        m, v = moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1.0 - b1) * gd
        v = b2 * v + (1.0 - b2) * (gd * gd)
        moments[name] = (m, v)
        new = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if not np.isfinite(new).all():
            raise NonFiniteError(f"parameter {name} became non-finite at step {t}")
        p.data = new


def _copy_params(params: ModelParams) -> ModelParams:
    def cp(c: ConvParams) -> ConvParams:
        return ConvParams(w=Tensor(c.w.data.copy(), requires_grad=True),
                          b=Tensor(c.b.data.copy(), requires_grad=True))

    def cell(c: ConvLSTMParams) -> ConvLSTMParams:
        kw = {name: Tensor(t.data.copy(), requires_grad=True) for name, t in c.named()}
        return ConvLSTMParams(kernel_size=c.kernel_size, **kw)

    cells = [(cell(c[0]), cell(c[1])) if isinstance(c, tuple) else cell(c)
             for c in params.cells]
    return ModelParams(encoder=[cp(c) for c in params.encoder],
                       laterals=[cp(c) for c in params.laterals],
                       classifier=cp(params.classifier),
                       cells=cells,
                       fusion=[cp(c) for c in params.fusion])


def _windows(data: SegDataset) -> list[tuple[int, int]]:
    wins = []
    for si, seq in enumerate(data.sequences):
        if seq.shape[0] < NUM_FRAMES + 1:
            raise ValueError(f"sequence {si} has {seq.shape[0]} frames; "
                             f"need >= {NUM_FRAMES + 1}")
        wins.extend((si, st) for st in range(seq.shape[0] - NUM_FRAMES))
    if not wins:
        raise ValueError("empty dataset")
    return wins


def _batch_arrays(data: SegDataset, windows, rng=None, use_augment=False):
    """Stack a list of (seq, start) windows into 4 input maps + target."""
    clips = []
    for si, st in windows:
        clip = data.sequences[si][st:st + NUM_FRAMES + 1]
        if use_augment:
            h, w = clip.shape[1:]
            rots = (0, 90, 180, 270) if h == w else (0, 180)
            clip = augment(clip, seed=int(rng.integers(0, 2 ** 63)), crop=(h, w),
                           rotations=rots)
        clips.append(clip)
    stack = np.stack(clips)  # (B, 5, H, W)
    inputs = [stack[:, t] for t in range(NUM_FRAMES)]
    return inputs, stack[:, NUM_FRAMES]


def _forward_argmax(params: ModelParams, cfg: ModelConfig, frames) -> np.ndarray:
    """Batched hard prediction; ties resolve to the lowest class index."""
    with no_grad():
        logits = forward_one_step(params, cfg, frames)
    return logits.data.argmax(axis=1).astype(np.uint8)


def predict_one_step(ckpt: Checkpoint, frames) -> np.ndarray:
    """Four (H,W) maps -> the predicted next (H,W) map."""
    frames = [np.asarray(f) for f in frames]
    squeeze = frames[0].ndim == 2
    batch = [f[None] if f.ndim == 2 else f for f in frames]
    out = _forward_argmax(ckpt.params, ckpt.config, batch)
    return out[0] if squeeze else out


def predict_autoregressive(ckpt: Checkpoint, frames, horizon: int) -> list[np.ndarray]:
    """Roll the window forward ``horizon`` times, feeding each hard
    prediction back as the newest input."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    frames = [np.asarray(f) for f in frames]
    squeeze = frames[0].ndim == 2
    window = [f[None] if f.ndim == 2 else f for f in frames]
    outs = []
    for _ in range(horizon):
        pred = _forward_argmax(ckpt.params, ckpt.config, window)
        outs.append(pred[0] if squeeze else pred)
        window = window[1:] + [pred]
    return outs


def _max_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    workers = min(_max_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(it) for it in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _horizon_confusions(ckpt: Checkpoint, data: SegDataset, horizon: int,
                        batch_size: int = 16, use_model: bool = True) -> list[np.ndarray]:
    """Per-horizon confusion matrices over window 0 of every sequence.

    With use_model=False the prediction at every horizon is a copy of the
    last observed frame.
    """
    k = data.num_classes
    for seq in data.sequences:
        if seq.shape[0] < NUM_FRAMES + horizon:
            raise ValueError(f"sequences of {seq.shape[0]} frames cannot "
                             f"support horizon {horizon}")
    batches = [data.sequences[i:i + batch_size]
               for i in range(0, len(data.sequences), batch_size)]

    def one_batch(seqs) -> list[np.ndarray]:
        stack = np.stack([s[:NUM_FRAMES + horizon] for s in seqs])
        inputs = [stack[:, t] for t in range(NUM_FRAMES)]
        if use_model:
            preds = predict_autoregressive(ckpt, inputs, horizon)
        else:
            preds = [copy_last_baseline(inputs)] * horizon
        return [confusion_matrix(preds[h], stack[:, NUM_FRAMES + h], k)
                for h in range(horizon)]

    per_batch = _map_ordered(one_batch, batches)
    totals = [np.zeros((k, k), dtype=np.int64) for _ in range(horizon)]
    for confs in per_batch:
        for h in range(horizon):
            totals[h] += confs[h]
    return totals


def evaluate_horizons(ckpt: Checkpoint, data: SegDataset, horizon: int,
                      batch_size: int = 16) -> list[MetricsReport]:
    """Model mIoU report at each horizon 1..h over the dataset."""
    confs = _horizon_confusions(ckpt, data, horizon, batch_size, use_model=True)
    return [miou_from_confusion(c) for c in confs]


def evaluate_copy_last(data: SegDataset, horizon: int,
                       batch_size: int = 16) -> list[MetricsReport]:
    """Copy-last baseline mIoU report at each horizon 1..h."""
    confs = _horizon_confusions(None, data, horizon, batch_size, use_model=False)
    return [miou_from_confusion(c) for c in confs]


def _one_step_miou(params: ModelParams, cfg: ModelConfig, data: SegDataset,
                   batch_size: int = 16) -> MetricsReport:
    ckpt = Checkpoint(params=params, config=cfg, seed=0, epoch=0)
    return evaluate_horizons(ckpt, data, horizon=1, batch_size=batch_size)[0]


def train(cfg: TrainConfig, train_data: SegDataset, val_data: SegDataset,
          model_cfg: ModelConfig | None = None, log_path=None,
          quiet: bool = False) -> tuple[Checkpoint, MetricsReport]:
    """Train and return the best-validation checkpoint plus its report.

    Emits one JSON object per epoch (loss, validation mIoU, per-class IoU)
    to stdout and, when ``log_path`` is given, to that file. The returned
    report carries the per-epoch loss curve, the loss of the very first
    batch before any update, and the best checkpoint's per-horizon mIoU.
    """
    if not train_data.sequences or not val_data.sequences:
        raise ValueError("empty dataset")
    if model_cfg is None:
        h, w = train_data.sequences[0].shape[1:]
        model_cfg = ModelConfig(num_classes=train_data.num_classes, height=h,
                                width=w, mode=cfg.mode)
    elif model_cfg.mode != cfg.mode:
        model_cfg = replace(model_cfg, mode=cfg.mode)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [int(cfg.seed), 0x7261494e])))
    params = init_model_params(model_cfg, seed=cfg.seed)
    named = named_parameters(params)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    windows = _windows(train_data)

    log_fh = open(log_path, "w") if log_path else None

    def emit(obj: dict):
        line = json.dumps(obj)
        if not quiet:
            print(line)
            sys.stdout.flush()
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    loss_curve: list[float] = []
    initial_loss: float | None = None
    best_miou = -1.0
    best_params = _copy_params(params)
    best_epoch = 0
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(windows))
            batch_losses: list[float] = []
            for lo in range(0, len(order), cfg.batch_size):
                chunk = [windows[i] for i in order[lo:lo + cfg.batch_size]]
                inputs, target = _batch_arrays(train_data, chunk, rng=rng,
                                               use_augment=cfg.augment)
                logits = forward_one_step(params, model_cfg, inputs)
                loss = softmax_cross_entropy_mean(logits, target)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NonFiniteError(f"loss diverged at epoch {epoch}")
                if initial_loss is None:
                    initial_loss = loss_val
                batch_losses.append(loss_val)
                grads = backward(loss)
                step += 1
                adam_step(named, grads, moments, step, cfg)
            epoch_loss = float(np.mean(batch_losses))
            loss_curve.append(epoch_loss)
            val = _one_step_miou(params, model_cfg, val_data)
            if val.miou > best_miou:
                best_miou = val.miou
                best_params = _copy_params(params)
                best_epoch = epoch
            emit({"epoch": epoch, "loss": round(epoch_loss, 6),
                  "miou": round(val.miou, 6),
                  "per_class_iou": [None if math.isnan(v) else round(v, 6)
                                    for v in val.per_class_iou],
                  "seconds": round(time.perf_counter() - t0, 2)})
    finally:
        if log_fh:
            log_fh.close()

    ckpt = Checkpoint(params=best_params, config=model_cfg, seed=cfg.seed,
                      epoch=best_epoch)
    final = _one_step_miou(best_params, model_cfg, val_data)
    horizons = evaluate_horizons(ckpt, val_data, cfg.horizon)
    report = MetricsReport(per_class_iou=final.per_class_iou,
                           present=final.present, miou=final.miou,
                           per_horizon_miou=[r.miou for r in horizons],
                           loss_curve=loss_curve, initial_loss=initial_loss)
    return ckpt, report


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the little-endian FSCK container.

    Layout: magic "FSCK" | version u32 | K u32 | H u32 | W u32 |
    4 scale widths u32 | mode u8 | seed u64 | epoch u32 | tensor count
    u32, then per tensor: name length u16, utf-8 name, rank u8, extents
    u32 x rank, float32 payload.
    """
    cfg = ckpt.config
    named = named_parameters(ckpt.params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<8I", CKPT_VERSION, cfg.num_classes, cfg.height,
                             cfg.width, *cfg.widths))
        fh.write(struct.pack("<BQI", _MODE_CODES[cfg.mode], ckpt.seed, ckpt.epoch))
        fh.write(struct.pack("<I", len(named)))
        for name, t in named.items():
            enc = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Read an FSCK container back into a live parameter set."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    try:
        version, k, h, w, c1, c2, c3, c4 = struct.unpack_from("<8I", blob, 4)
        off = 4 + 32
        mode_code, seed, epoch = struct.unpack_from("<BQI", blob, off)
        off += struct.calcsize("<BQI")
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
    except struct.error as exc:
        raise CheckpointError("truncated header") from exc
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if mode_code not in _MODE_NAMES:
        raise CheckpointError(f"unknown mode code {mode_code}")
    cfg = ModelConfig(num_classes=k, height=h, width=w, widths=(c1, c2, c3, c4),
                      mode=_MODE_NAMES[mode_code])
    params = init_model_params(cfg, seed=0)
    named = named_parameters(params)
    seen = set()
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated tensor record near byte {off}") from exc
        if name not in named:
            raise CheckpointError(f"tensor {name!r} does not belong to this config")
        target = named[name]
        if tuple(dims) != target.data.shape:
            raise CheckpointError(f"tensor {name!r} dims {dims} != {target.data.shape}")
        target.data = payload.reshape(dims).astype(np.float32).copy()
        seen.add(name)
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes")
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:3]}...")
    return Checkpoint(params=params, config=cfg, seed=seed, epoch=epoch)
