"""Synthetic moving-shapes segmentation videos, encoding, augmentation, I/O.

Sequences are (T,H,W) uint8 class-index arrays. Each sequence is rendered
from a list of shapes with integer sizes and constant integer velocities;
shapes bounce elastically off the borders and later-drawn shapes occlude
earlier ones. Everything is a pure function of (config, seed), and
per-sequence sub-seeds are derived from (seed, index) so parallel and
serial generation agree bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, default_dtype

SEGV_MAGIC = b"SEGV"
SEGV_VERSION = 1

RECT = "rect"
DISC = "disc"
KINDS = (RECT, DISC)

QUARTER_TURNS = (0, 90, 180, 270)


class SegvError(ValueError):
    """Malformed SEGV file: bad magic, truncation, or out-of-range index."""


@dataclass(frozen=True)
class GenConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_sequence: int = 3
    size_range: tuple[int, int] = (10, 16)
    velocity_range: tuple[int, int] = (1, 3)
    kinds: tuple[str, ...] = KINDS
    frames: int = 8
    count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least background plus one shape class")
        if self.size_range[0] < 2 or self.size_range[1] > min(self.height, self.width):
            raise ValueError(f"shape sizes {self.size_range} do not fit a "
                             f"{self.height}x{self.width} frame")
        if self.velocity_range[0] < 0 or self.velocity_range[1] < self.velocity_range[0]:
            raise ValueError(f"bad velocity range {self.velocity_range}")
        for kind in self.kinds:
            if kind not in KINDS:
                raise ValueError(f"unknown shape kind {kind!r}")
        if self.frames < 1 or self.count < 0:
            raise ValueError("frames must be >= 1 and count >= 0")


@dataclass
class MovingShape:
    """One shape's full state: kind, class, bounding box, and velocity.

    (y, x) is the top-left of the bounding box; a disc fills the largest
    circle inscribed in its (size x size) box.
    """

    kind: str
    class_id: int
    y: int
    x: int
    h: int
    w: int
    vy: int
    vx: int


@dataclass
class SegDataset:
    """Sequences of uniform (T,H,W) class maps plus the dataset-level class count."""

    sequences: list[np.ndarray] = field(default_factory=list)
    num_classes: int = 2


def _bounce(pos: int, vel: int, limit: int) -> tuple[int, int]:
    # limit is the largest valid position; sign flips when the next step
    # would leave [0, limit].
    nxt = pos + vel
    if nxt < 0 or nxt > limit:
        vel = -vel
        nxt = min(max(pos + vel, 0), limit)
    return nxt, vel


def _draw(frame: np.ndarray, s: MovingShape, y: int, x: int) -> None:
    if s.kind == RECT:
        frame[y:y + s.h, x:x + s.w] = s.class_id
    else:
        r = (s.h - 1) / 2.0
        yy, xx = np.ogrid[:s.h, :s.w]
        mask = (yy - r) ** 2 + (xx - r) ** 2 <= r * r
        frame[y:y + s.h, x:x + s.w][mask] = s.class_id


def render_sequence(shapes: list[MovingShape], frames: int, height: int,
                    width: int) -> np.ndarray:
    """Render T frames by advancing every shape per frame with border bounce.

    A pure function of the initial shape states: re-running it reproduces
    the sequence exactly.
    """
    for s in shapes:
        if s.h > height or s.w > width:
            raise ValueError(f"shape {s.h}x{s.w} larger than {height}x{width} frame")
    seq = np.zeros((frames, height, width), dtype=np.uint8)
    ys = [s.y for s in shapes]
    xs = [s.x for s in shapes]
    vys = [s.vy for s in shapes]
    vxs = [s.vx for s in shapes]
    for t in range(frames):
        frame = seq[t]
        for i, s in enumerate(shapes):
            if t > 0:
                ys[i], vys[i] = _bounce(ys[i], vys[i], height - s.h)
                xs[i], vxs[i] = _bounce(xs[i], vxs[i], width - s.w)
            _draw(frame, s, ys[i], xs[i])
    return seq


def sample_shapes(cfg: GenConfig, sequence_index: int) -> list[MovingShape]:
    """Draw one sequence's initial shape states from (seed, index).

    Class ids cycle over 1..K-1 so every class appears when shape count
    >= K-1; velocity components get magnitudes from the configured range
    with independent random signs.
    """
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(cfg.seed), int(sequence_index)])))
    smin, smax = cfg.size_range
    vmin, vmax = cfg.velocity_range
    shapes = []
    for j in range(cfg.shapes_per_sequence):
        kind = cfg.kinds[rng.integers(0, len(cfg.kinds))]
        if kind == DISC:
            size = int(rng.integers(smin, smax + 1)) | 1  # odd box, centered disc
            size = min(size, smax if smax % 2 else smax - 1)
            h = w = max(size, 3)
        else:
            h = int(rng.integers(smin, smax + 1))
            w = int(rng.integers(smin, smax + 1))
        y = int(rng.integers(0, cfg.height - h + 1))
        x = int(rng.integers(0, cfg.width - w + 1))
        vy = int(rng.integers(vmin, vmax + 1)) * (1 if rng.integers(0, 2) else -1)
        vx = int(rng.integers(vmin, vmax + 1)) * (1 if rng.integers(0, 2) else -1)
        shapes.append(MovingShape(kind=kind, class_id=1 + j % (cfg.num_classes - 1),
                                  y=y, x=x, h=h, w=w, vy=vy, vx=vx))
    return shapes


def generate_dataset(cfg: GenConfig) -> SegDataset:
    """Render cfg.count sequences, each from its own (seed, index) sub-seed."""
    sequences = [
        render_sequence(sample_shapes(cfg, i), cfg.frames, cfg.height, cfg.width)
        for i in range(cfg.count)
    ]
    return SegDataset(sequences=sequences, num_classes=cfg.num_classes)


def one_hot_encode(seg_map: np.ndarray, num_classes: int) -> Tensor:
    """Class-index map (H,W) -> one-hot Tensor [1,K,H,W]."""
    return one_hot_batch(np.asarray(seg_map)[None], num_classes)


def one_hot_batch(seg_maps: np.ndarray, num_classes: int) -> Tensor:
    """Batch of class-index maps (N,H,W) -> one-hot Tensor [N,K,H,W]."""
    m = np.asarray(seg_maps)
    if m.ndim != 3:
        raise ShapeError(f"expected (N,H,W) class maps, got shape {m.shape}")
    if m.size and m.max() >= num_classes:
        raise IndexError(f"class index {int(m.max())} out of range [0,{num_classes})")
    eye = np.eye(num_classes, dtype=default_dtype())
    return Tensor(np.ascontiguousarray(eye[m].transpose(0, 3, 1, 2)))


def augment(seq: np.ndarray, seed: int, crop: tuple[int, int],
            rotations=(0, 90, 180, 270)) -> np.ndarray:
    """Seeded crop + quarter-turn rotation, identical for every frame.

    Only quarter turns are offered: they permute pixels, so class indices
    survive unchanged. The crop window must fit the frame.
    """
    seq = np.asarray(seq)
    t, h, w = seq.shape
    ch, cw = crop
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ValueError(f"crop {crop} does not fit frame {h}x{w}")
    rots = sorted(set(int(r) for r in rotations))
    for r in rots:
        if r not in QUARTER_TURNS:
            raise ValueError(f"rotation must be a quarter turn, got {r}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    rot = rots[rng.integers(0, len(rots))]
    out = seq[:, top:top + ch, left:left + cw]
    if rot:
        out = np.rot90(out, rot // 90, axes=(1, 2))
    return np.ascontiguousarray(out)


def write_segv(path, dataset: SegDataset) -> None:
    """Write the little-endian SEGV container.

    Layout: magic "SEGV" | version u32 | sequence count u32 | K u32 |
    H u32 | W u32, then per sequence a T u32 followed by T*H*W class
    bytes.
    """
    seqs = dataset.sequences
    if seqs:
        h, w = seqs[0].shape[1:]
        for s in seqs:
            if s.ndim != 3 or s.shape[1:] != (h, w):
                raise SegvError("sequences must share one (H,W)")
            if s.dtype != np.uint8:
                raise SegvError(f"class maps must be uint8, got {s.dtype}")
            if s.size and s.max() >= dataset.num_classes:
                raise SegvError("class index out of range for dataset K")
    else:
        h = w = 0
    with open(path, "wb") as fh:
        fh.write(SEGV_MAGIC)
        fh.write(struct.pack("<5I", SEGV_VERSION, len(seqs), dataset.num_classes, h, w))
        for s in seqs:
            fh.write(struct.pack("<I", s.shape[0]))
            fh.write(s.tobytes())


def read_segv(path) -> SegDataset:
    """Read a SEGV container; raises SegvError on any malformation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise SegvError(f"file too short for header: {len(blob)} bytes")
    if blob[:4] != SEGV_MAGIC:
        raise SegvError(f"bad magic {blob[:4]!r}")
    version, count, k, h, w = struct.unpack_from("<5I", blob, 4)
    if version != SEGV_VERSION:
        raise SegvError(f"unsupported version {version}")
    off = 24
    sequences = []
    for i in range(count):
        if off + 4 > len(blob):
            raise SegvError(f"truncated at sequence {i} header")
        (t,) = struct.unpack_from("<I", blob, off)
        off += 4
        nbytes = t * h * w
        if off + nbytes > len(blob):
            raise SegvError(f"truncated payload in sequence {i}")
        seq = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off).reshape(t, h, w)
        off += nbytes
        if seq.size and seq.max() >= k:
            raise SegvError(f"sequence {i} holds class index >= K={k}")
        sequences.append(seq.copy())
    if off != len(blob):
        raise SegvError(f"{len(blob) - off} trailing bytes after last sequence")
    return SegDataset(sequences=sequences, num_classes=k)
