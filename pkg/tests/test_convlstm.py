import math

import numpy as np
import pytest

from futureseg.autodiff import (
    ShapeError,
    Tensor,
    backward,
    double_precision,
    finite_diff_grad,
    mul,
    sum_all,
    tensor_new,
)
from futureseg.convlstm import (
    CellState,
    ConvLSTMParams,
    cell_step,
    run_bidirectional,
    run_sequence,
    zero_state,
)


def scalar_peephole_step(p, f, h, c):
    """Plain-float recurrence with per-gate peepholes. Oracle: written
    against math.exp/math.tanh, never the tensor core."""

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    i = sig(p["w_fi"] * f + p["w_hi"] * h + p["w_ci"] * c + p["b_i"])
    fg = sig(p["w_ff"] * f + p["w_hf"] * h + p["w_cf"] * c + p["b_f"])
    c_new = fg * c + i * math.tanh(p["w_fc"] * f + p["w_hc"] * h + p["b_c"])
    o = sig(p["w_fo"] * f + p["w_ho"] * h + p["w_co"] * c_new + p["b_o"])
    return o * math.tanh(c_new), c_new


def scalar_params_to_cell(scalars) -> ConvLSTMParams:
    def t(v, dims):
        return Tensor(np.full(dims, v), requires_grad=True)

    kw = {}
    for name in ("w_fi", "w_hi", "w_ff", "w_hf", "w_fc", "w_hc", "w_fo", "w_ho"):
        kw[name] = t(scalars[name], (1, 1, 1, 1))
    for name in ("w_ci", "w_cf", "w_co"):
        kw[name] = t(scalars[name], (1, 1, 1, 1))
    for name in ("b_i", "b_f", "b_c", "b_o"):
        kw[name] = t(scalars[name], (1, 1, 1, 1))
    return ConvLSTMParams(kernel_size=1, **kw)


def zeroed_params(cin=1, cout=1, hs=1, ws=1, k=1) -> ConvLSTMParams:
    p = ConvLSTMParams.init(cin, cout, hs, ws, k, seed=0)
    for _, t in p.named():
        t.data = np.zeros_like(t.data)
    return p


class TestZeroState:
    def test_all_zero(self):
        st = zero_state(2, 3, 4, 5)
        assert st.h.dims == (2, 3, 4, 5)
        assert not st.h.data.any() and not st.c.data.any()

    def test_two_calls_bit_equal(self):
        a, b = zero_state(1, 2, 3, 3), zero_state(1, 2, 3, 3)
        assert np.array_equal(a.h.data, b.h.data)
        assert np.array_equal(a.c.data, b.c.data)

    def test_positive_extents_required(self):
        with pytest.raises(ShapeError):
            zero_state(0, 1, 1, 1)


class TestCellStep:
    def test_all_zero_parameters_give_half_gates_zero_state(self):
        p = zeroed_params(cin=2, cout=3, hs=4, ws=4, k=3)
        f = tensor_new((1, 2, 4, 4), "uniform", 1.0, seed=3)
        st = cell_step(p, f, zero_state(1, 3, 4, 4))
        assert not st.h.data.any()
        assert not st.c.data.any()

    def test_saturated_forget_gate_carries_cell(self):
        p = zeroed_params(cin=1, cout=1, hs=2, ws=2, k=1)
        p.b_f.data = np.full_like(p.b_f.data, 50.0)
        c0 = tensor_new((1, 1, 2, 2), "uniform", 1.0, seed=9)
        st = cell_step(p, tensor_new((1, 1, 2, 2)), CellState(h=tensor_new((1, 1, 2, 2)), c=c0))
        assert np.array_equal(st.c.data, c0.data)

    def test_matches_scalar_recurrence_over_random_draws(self):
        names = ("w_fi", "w_hi", "w_ci", "b_i", "w_ff", "w_hf", "w_cf", "b_f",
                 "w_fc", "w_hc", "b_c", "w_fo", "w_ho", "w_co", "b_o")
        rng = np.random.Generator(np.random.PCG64(77))
        with double_precision():
            for _ in range(100):
                scalars = {n: float(rng.uniform(-1.5, 1.5)) for n in names}
                p = scalar_params_to_cell(scalars)
                h_ref, c_ref = 0.0, 0.0
                state = zero_state(1, 1, 1, 1)
                for f_val in rng.uniform(-2, 2, size=4):
                    h_ref, c_ref = scalar_peephole_step(scalars, float(f_val), h_ref, c_ref)
                    state = cell_step(p, Tensor(np.full((1, 1, 1, 1), f_val)), state)
                assert abs(state.h.item() - h_ref) < 1e-6
                assert abs(state.c.item() - c_ref) < 1e-6

    def test_gates_bounded_and_hidden_below_one(self):
        p = ConvLSTMParams.init(2, 2, 4, 4, 3, seed=5)
        for _, t in p.named():
            t.data = np.random.RandomState(8).uniform(-2, 2, t.data.shape).astype(np.float32)
        f = tensor_new((2, 2, 4, 4), "normal", 2.0, seed=6)
        state = zero_state(2, 2, 4, 4)
        for _ in range(4):
            state = cell_step(p, f, state)
            assert np.all(np.abs(state.h.data) <= 1.0)

    def test_dims_mismatch_rejected(self):
        p = zeroed_params(cin=2, cout=2, hs=4, ws=4, k=3)
        with pytest.raises(ShapeError):
            cell_step(p, tensor_new((1, 3, 4, 4)), zero_state(1, 2, 4, 4))
        with pytest.raises(ShapeError):
            cell_step(p, tensor_new((1, 2, 5, 5)), zero_state(1, 2, 5, 5))

    def test_kernel_size_must_be_one_or_three(self):
        with pytest.raises(ShapeError):
            ConvLSTMParams.init(1, 1, 2, 2, kernel_size=5, seed=0)

    def test_gradients_match_finite_differences(self):
        with double_precision():
            rng = np.random.Generator(np.random.PCG64(13))
            p = ConvLSTMParams.init(2, 2, 4, 4, 3, seed=2)
            tensors = {}
            for name, t in p.named():
                t.data = rng.uniform(-0.5, 0.5, t.data.shape)
                tensors[name] = t
            x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
            tensors["input"] = x
            proj = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))

            def build_loss():
                return sum_all(mul(cell_step(p, x, zero_state(1, 2, 4, 4)).h, proj))

            grads = backward(build_loss())
            for name, t in tensors.items():
                def f(probe, target=t):
                    saved = target.data
                    target.data = probe.data
                    try:
                        return build_loss().item()
                    finally:
                        target.data = saved

                fd = finite_diff_grad(f, t, eps=1e-5)
                err = np.abs(grads[t].data - fd.data)
                denom = np.maximum(np.maximum(np.abs(grads[t].data), np.abs(fd.data)), 1e-6)
                assert float((err / denom).max()) < 1e-4, name


class TestRunSequence:
    def test_zero_parameters_give_zero_output(self):
        p = zeroed_params(cin=2, cout=2, hs=3, ws=3, k=3)
        seq = [tensor_new((1, 2, 3, 3), "uniform", 1.0, seed=s) for s in range(4)]
        assert not run_sequence(p, seq).data.any()

    def test_equals_manual_unroll(self):
        p = ConvLSTMParams.init(2, 2, 3, 3, 3, seed=21)
        seq = [tensor_new((1, 2, 3, 3), "uniform", 1.0, seed=s) for s in range(4)]
        got = run_sequence(p, seq)
        state = zero_state(1, 2, 3, 3)
        for f in seq:
            state = cell_step(p, f, state)
        assert np.array_equal(got.data, state.h.data)

    def test_constant_input_unroll_bit_equal(self):
        p = ConvLSTMParams.init(2, 2, 3, 3, 3, seed=22)
        frame = tensor_new((1, 2, 3, 3), "constant", 0.7)
        got = run_sequence(p, [frame] * 4)
        state = zero_state(1, 2, 3, 3)
        for _ in range(4):
            state = cell_step(p, frame, state)
        assert np.array_equal(got.data, state.h.data)

    def test_wrong_length_rejected(self):
        p = zeroed_params()
        seq = [tensor_new((1, 1, 1, 1))] * 3
        with pytest.raises(ShapeError):
            run_sequence(p, seq)

    def test_information_flows_from_first_frame(self):
        p = ConvLSTMParams.init(1, 2, 4, 4, 3, seed=33)
        seq = [tensor_new((1, 1, 4, 4), "uniform", 1.0, seed=100 + s) for s in range(4)]
        base = run_sequence(p, seq).data
        bumped = [Tensor(seq[0].data + 0.25)] + seq[1:]
        delta = np.abs(run_sequence(p, bumped).data - base).max()
        assert delta > 0.0


class TestBidirectional:
    def test_channel_doubling(self):
        p1 = ConvLSTMParams.init(2, 3, 4, 4, 3, seed=41)
        p2 = ConvLSTMParams.init(2, 3, 4, 4, 3, seed=42)
        seq = [tensor_new((2, 2, 4, 4), "uniform", 1.0, seed=s) for s in range(4)]
        assert run_bidirectional(p1, p2, seq).dims == (2, 6, 4, 4)

    def test_time_reversal_swaps_halves(self):
        p = ConvLSTMParams.init(2, 2, 4, 4, 3, seed=43)
        seq = [tensor_new((1, 2, 4, 4), "uniform", 1.0, seed=50 + s) for s in range(4)]
        fwd = run_bidirectional(p, p, seq)
        rev = run_bidirectional(p, p, list(reversed(seq)))
        assert np.array_equal(fwd.data[:, :2], rev.data[:, 2:])
        assert np.array_equal(fwd.data[:, 2:], rev.data[:, :2])

    def test_zero_parameters_zero_output(self):
        p1 = zeroed_params(cin=1, cout=1, hs=2, ws=2, k=1)
        p2 = zeroed_params(cin=1, cout=1, hs=2, ws=2, k=1)
        seq = [tensor_new((1, 1, 2, 2), "uniform", 1.0, seed=s) for s in range(4)]
        assert not run_bidirectional(p1, p2, seq).data.any()
