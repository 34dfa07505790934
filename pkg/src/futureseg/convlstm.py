"""Recurrent convolutional cell with peephole gates.

The cell mixes each input frame into its state through convolutions and
lets every gate read the cell state through learned per-element weights
(Hadamard product over channel and both spatial axes). A fixed-length
four-step runner produces the final hidden state; the two-direction
variant runs the sequence forward and reversed and concatenates the two
final hidden states along channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat_batch,
    concat_channels,
    conv2d,
    sigmoid,
    slice_channels,
    tanh,
    tensor_new,
)

SEQUENCE_LENGTH = 4


@dataclass
class ConvLSTMParams:
    """Gate kernels, per-element peephole weights, and per-channel biases.

    Input-to-state kernels are (Cout,Cin,k,k), state-to-state kernels
    (Cout,Cout,k,k), peepholes (1,Cout,Hs,Ws) broadcast over batch, and
    biases (1,Cout,1,1). Kernel size must be 1 or 3 so "same" padding
    keeps the working spatial dims constant across steps.
    """

    kernel_size: int
    w_fi: Tensor
    w_hi: Tensor
    w_ci: Tensor
    b_i: Tensor
    w_ff: Tensor
    w_hf: Tensor
    w_cf: Tensor
    b_f: Tensor
    w_fc: Tensor
    w_hc: Tensor
    b_c: Tensor
    w_fo: Tensor
    w_ho: Tensor
    w_co: Tensor
    b_o: Tensor

    def __post_init__(self):
        k = self.kernel_size
        if k not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {k}")
        cout, cin = self.w_fi.dims[0], self.w_fi.dims[1]
        for w in (self.w_fi, self.w_ff, self.w_fc, self.w_fo):
            if w.dims != (cout, cin, k, k):
                raise ShapeError(f"input kernel dims {w.dims} != {(cout, cin, k, k)}")
        for w in (self.w_hi, self.w_hf, self.w_hc, self.w_ho):
            if w.dims != (cout, cout, k, k):
                raise ShapeError(f"state kernel dims {w.dims} != {(cout, cout, k, k)}")
        peep = self.w_ci.dims
        if peep[0] != 1 or peep[1] != cout:
            raise ShapeError(f"peephole dims {peep} must be (1,{cout},Hs,Ws)")
        for w in (self.w_cf, self.w_co):
            if w.dims != peep:
                raise ShapeError(f"peephole dims {w.dims} != {peep}")
        for b in (self.b_i, self.b_f, self.b_c, self.b_o):
            if b.dims != (1, cout, 1, 1):
                raise ShapeError(f"bias dims {b.dims} != (1,{cout},1,1)")

    @property
    def in_channels(self) -> int:
        return self.w_fi.dims[1]

    @property
    def out_channels(self) -> int:
        return self.w_fi.dims[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.w_ci.dims[2], self.w_ci.dims[3]

    @classmethod
    def init(cls, cin: int, cout: int, hs: int, ws: int, kernel_size: int,
             seed: int) -> "ConvLSTMParams":
        """Seeded uniform kernels, zero peepholes, zero biases except the
        forget gate's, which starts at +1 so the cell remembers by default.
        """
        seeds = np.random.SeedSequence(int(seed)).generate_state(8, dtype=np.uint64)
        k = kernel_size
        in_scale = 1.0 / np.sqrt(cin * k * k)
        st_scale = 1.0 / np.sqrt(cout * k * k)

        def in_kernel(s):
            return tensor_new((cout, cin, k, k), "uniform", in_scale,
                              seed=int(s), requires_grad=True)

        def st_kernel(s):
            return tensor_new((cout, cout, k, k), "uniform", st_scale,
                              seed=int(s), requires_grad=True)

        def peep():
            return tensor_new((1, cout, hs, ws), requires_grad=True)

        def bias(value=0.0):
            return tensor_new((1, cout, 1, 1), "constant", value, requires_grad=True)

        return cls(
            kernel_size=k,
            w_fi=in_kernel(seeds[0]), w_hi=st_kernel(seeds[1]), w_ci=peep(), b_i=bias(),
            w_ff=in_kernel(seeds[2]), w_hf=st_kernel(seeds[3]), w_cf=peep(), b_f=bias(1.0),
            w_fc=in_kernel(seeds[4]), w_hc=st_kernel(seeds[5]), b_c=bias(),
            w_fo=in_kernel(seeds[6]), w_ho=st_kernel(seeds[7]), w_co=peep(), b_o=bias(),
        )

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        fields = ("w_fi", "w_hi", "w_ci", "b_i", "w_ff", "w_hf", "w_cf", "b_f",
                  "w_fc", "w_hc", "b_c", "w_fo", "w_ho", "w_co", "b_o")
        return [(prefix + name, getattr(self, name)) for name in fields]


@dataclass
class CellState:
    """Recurrent pair: hidden map h and cell map c, both [N,Cout,Hs,Ws]."""

    h: Tensor
    c: Tensor


def zero_state(n: int, cout: int, hs: int, ws: int) -> CellState:
    """All-zero initial state."""
    if min(n, cout, hs, ws) < 1:
        raise ShapeError(f"state extents must be positive, got {(n, cout, hs, ws)}")
    return CellState(h=tensor_new((n, cout, hs, ws)), c=tensor_new((n, cout, hs, ws)))


def cell_step(p: ConvLSTMParams, f_s: Tensor, prev: CellState) -> CellState:
    """One recurrent update.

    i = sigmoid(w_fi*f + w_hi*h + w_ci.c_prev + b_i)
    f = sigmoid(w_ff*f + w_hf*h + w_cf.c_prev + b_f)
    c = f.c_prev + i.tanh(w_fc*f + w_hc*h + b_c)
    o = sigmoid(w_fo*f + w_ho*h + w_co.c + b_o)      (reads the NEW c)
    h = o.tanh(c)

    where * is a stride-1 same-padding convolution and . the Hadamard
    product. Every gate lies in (0,1) and |h| <= 1 afterwards.
    """
    if f_s.dims[1] != p.in_channels:
        raise ShapeError(f"input has {f_s.dims[1]} channels, cell expects {p.in_channels}")
    n, _, hs, ws = f_s.dims
    expect = (n, p.out_channels, hs, ws)
    if prev.h.dims != expect or prev.c.dims != expect:
        raise ShapeError(f"state dims {prev.h.dims}/{prev.c.dims} != {expect}")
    if (hs, ws) != p.spatial:
        raise ShapeError(f"working dims {(hs, ws)} != peephole dims {p.spatial}")
    pad = p.kernel_size // 2
    cout = p.out_channels

    # All eight convolutions collapse into one: conv(x, w_f) + conv(h, w_h)
    # equals conv(concat(x, h), [w_f | w_h]), and the four gates stack along
    # output channels. Same recurrence, a quarter of the unfold work.
    h, c = prev.h, prev.c
    xh = concat_channels(f_s, h)
    wi = concat_channels(p.w_fi, p.w_hi)
    wf = concat_channels(p.w_ff, p.w_hf)
    wc = concat_channels(p.w_fc, p.w_hc)
    wo = concat_channels(p.w_fo, p.w_ho)
    big_w = concat_batch(concat_batch(wi, wf), concat_batch(wc, wo))
    big_b = concat_channels(concat_channels(p.b_i, p.b_f),
                            concat_channels(p.b_c, p.b_o))
    pre = conv2d(xh, big_w, big_b, padding=pad)

    i = sigmoid(slice_channels(pre, 0, cout) + c * p.w_ci)
    f = sigmoid(slice_channels(pre, cout, 2 * cout) + c * p.w_cf)
    c_new = f * c + i * tanh(slice_channels(pre, 2 * cout, 3 * cout))
    o = sigmoid(slice_channels(pre, 3 * cout, 4 * cout) + c_new * p.w_co)
    return CellState(h=o * tanh(c_new), c=c_new)


def run_sequence(p: ConvLSTMParams, seq) -> Tensor:
    """Run the cell over exactly four frames from a zero state.

    Returns the final hidden state, oldest frame first.
    """
    seq = list(seq)
    if len(seq) != SEQUENCE_LENGTH:
        raise ShapeError(f"runner is fixed at {SEQUENCE_LENGTH} steps, got {len(seq)}")
    dims = seq[0].dims
    for f_s in seq[1:]:
        if f_s.dims != dims:
            raise ShapeError(f"sequence dims differ: {f_s.dims} vs {dims}")
    n, _, hs, ws = dims
    state = zero_state(n, p.out_channels, hs, ws)
    for f_s in seq:
        state = cell_step(p, f_s, state)
    return state.h


def run_bidirectional(p_fwd: ConvLSTMParams, p_bwd: ConvLSTMParams, seq) -> Tensor:
    """Run forward over the sequence and backward over its reversal.

    Returns concat(final forward hidden, final backward hidden) along
    channels. Directions may share one parameter object for tied weights.
    """
    seq = list(seq)
    if p_fwd.in_channels != p_bwd.in_channels:
        raise ShapeError("direction parameter sets disagree on input channels")
    h_fwd = run_sequence(p_fwd, seq)
    h_bwd = run_sequence(p_bwd, list(reversed(seq)))
    return concat_channels(h_fwd, h_bwd)
