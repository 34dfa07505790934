"""Finite-difference verification of every differentiable operation.

Runs in float64 end to end. Each check builds a scalar loss as a fixed
random projection of the operation's output, takes reverse-mode gradients
for every input, and compares them element by element against central
finite differences. Reported numbers are max relative errors with the
denominator floored at 1e-6.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, double_precision, finite_diff_grad, sum_all
from .convlstm import CellState, ConvLSTMParams, cell_step, run_sequence
from .segnet import ModelConfig, forward_one_step, init_model_params, named_parameters

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
FD_EPS = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float((np.abs(a - b) / denom).max())


def _rand(rng, dims, scale=1.0, requires_grad=True) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=dims), requires_grad=requires_grad)


def _check(build_loss, inputs: dict[str, Tensor]) -> float:
    """Max relative error between reverse-mode and finite-difference
    gradients over every listed input tensor."""
    loss = build_loss()
    grads = backward(loss)
    worst = 0.0
    for name, x in inputs.items():
        got = grads[x].data

        def f(probe, target=x):
            saved = target.data
            target.data = probe.data
            try:
                return build_loss().item()
            finally:
                target.data = saved

        want = finite_diff_grad(f, x, eps=FD_EPS).data
        worst = max(worst, relative_error(got, want))
    return worst


def _conv_case(rng, xdims, wdims, stride, padding, dilation) -> float:
    x = _rand(rng, xdims)
    w = _rand(rng, wdims)
    b = _rand(rng, (1, wdims[0], 1, 1))
    out = ad.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
    proj = Tensor(rng.uniform(-1, 1, size=out.dims))
    return _check(
        lambda: sum_all(ad.mul(ad.conv2d(x, w, b, stride=stride, padding=padding,
                                         dilation=dilation), proj)),
        {"x": x, "w": w, "b": b})


def run_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per operation, float64, small random tensors."""
    results: dict[str, float] = {}
    with double_precision():
        rng = np.random.Generator(np.random.PCG64(seed))

        results["conv2d"] = max(
            _conv_case(rng, (2, 3, 6, 6), (4, 3, 3, 3), 1, 1, 1),
            _conv_case(rng, (1, 2, 6, 6), (3, 2, 3, 3), 2, 2, 2),
            _conv_case(rng, (2, 4, 5, 5), (2, 4, 1, 1), 1, 0, 1),
        )

        a = _rand(rng, (2, 3, 4, 4))
        b = _rand(rng, (2, 3, 4, 4))
        proj = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
        results["add"] = _check(
            lambda: sum_all(ad.mul(ad.add(a, b), proj)), {"a": a, "b": b})
        results["hadamard"] = _check(
            lambda: sum_all(ad.mul(ad.mul(a, b), proj)), {"a": a, "b": b})

        for kind in ("sigmoid", "tanh", "relu"):
            x = _rand(rng, (2, 3, 5, 5), scale=2.0)
            pr = Tensor(rng.uniform(-1, 1, size=(2, 3, 5, 5)))
            results[kind] = _check(
                lambda k=kind, x=x, pr=pr: sum_all(ad.mul(ad.activation(k, x), pr)),
                {"x": x})

        x = _rand(rng, (2, 2, 3, 3))
        pr = Tensor(rng.uniform(-1, 1, size=(2, 2, 6, 6)))
        results["upsample_nearest"] = _check(
            lambda: sum_all(ad.mul(ad.upsample_nearest(x, 2), pr)), {"x": x})

        a = _rand(rng, (2, 2, 4, 4))
        b = _rand(rng, (2, 3, 4, 4))
        pr = Tensor(rng.uniform(-1, 1, size=(2, 5, 4, 4)))
        results["concat_channels"] = _check(
            lambda: sum_all(ad.mul(ad.concat_channels(a, b), pr)), {"a": a, "b": b})

        a = _rand(rng, (1, 3, 4, 4))
        b = _rand(rng, (2, 3, 4, 4))
        pr = Tensor(rng.uniform(-1, 1, size=(3, 3, 4, 4)))
        results["concat_batch"] = _check(
            lambda: sum_all(ad.mul(ad.concat_batch(a, b), pr)), {"a": a, "b": b})

        x = _rand(rng, (2, 4, 4, 4))
        pr = Tensor(rng.uniform(-1, 1, size=(2, 2, 4, 4)))
        results["slice_channels"] = _check(
            lambda: sum_all(ad.mul(ad.slice_channels(x, 1, 3), pr)), {"x": x})

        x = _rand(rng, (3, 2, 4, 4))
        pr = Tensor(rng.uniform(-1, 1, size=(2, 2, 4, 4)))
        results["slice_batch"] = _check(
            lambda: sum_all(ad.mul(ad.slice_batch(x, 1, 3), pr)), {"x": x})

        logits = _rand(rng, (2, 5, 4, 4), scale=2.0)
        targets = rng.integers(0, 5, size=(2, 4, 4))
        results["softmax_cross_entropy_mean"] = _check(
            lambda: ad.softmax_cross_entropy_mean(logits, targets), {"logits": logits})

        results["cell_step"] = _cell_case(rng)
        results["run_sequence"] = _sequence_case(rng)
        results["end_to_end"] = end_to_end_error(seed)
    return results


def _cell_case(rng) -> float:
    p = ConvLSTMParams.init(2, 2, 4, 4, kernel_size=3, seed=11)
    inputs: dict[str, Tensor] = {}
    for name, t in p.named():
        t.data = rng.uniform(-0.5, 0.5, size=t.data.shape)
        inputs[name] = t
    x = _rand(rng, (1, 2, 4, 4))
    inputs["x"] = x
    h0 = _rand(rng, (1, 2, 4, 4), scale=0.5)
    c0 = _rand(rng, (1, 2, 4, 4), scale=0.5)
    inputs["h0"] = h0
    inputs["c0"] = c0
    pr = Tensor(rng.uniform(-1, 1, size=(1, 2, 4, 4)))

    def build():
        state = cell_step(p, x, CellState(h=h0, c=c0))
        return sum_all(ad.mul(state.h, pr))

    return _check(build, inputs)


def _sequence_case(rng) -> float:
    p = ConvLSTMParams.init(2, 2, 3, 3, kernel_size=3, seed=17)
    inputs: dict[str, Tensor] = {}
    for name, t in p.named():
        t.data = rng.uniform(-0.5, 0.5, size=t.data.shape)
        inputs[name] = t
    seq = [_rand(rng, (1, 2, 3, 3)) for _ in range(4)]
    for i, f in enumerate(seq):
        inputs[f"f{i}"] = f
    pr = Tensor(rng.uniform(-1, 1, size=(1, 2, 3, 3)))
    return _check(lambda: sum_all(ad.mul(run_sequence(p, seq), pr)), inputs)


def end_to_end_error(seed: int = 0) -> float:
    """Gradient error of the whole model: cross-entropy loss of a tiny
    unidirectional config (3 classes, 16x16, width 4 everywhere) against
    finite differences over every parameter."""
    with double_precision():
        rng = np.random.Generator(np.random.PCG64(seed + 1))
        cfg = ModelConfig(num_classes=3, height=16, width=16, widths=(4, 4, 4, 4),
                          mode="uni")
        params = init_model_params(cfg, seed=5)
        named = named_parameters(params)
        for t in named.values():
            t.data = rng.uniform(-0.4, 0.4, size=t.data.shape)
        frames = [rng.integers(0, 3, size=(1, 16, 16)) for _ in range(4)]
        target = rng.integers(0, 3, size=(1, 16, 16))

        def build():
            return ad.softmax_cross_entropy_mean(
                forward_one_step(params, cfg, frames), target)

        return _check(build, named)


def format_report(results: dict[str, float]) -> str:
    lines = []
    for name, err in results.items():
        tol = END_TO_END_TOLERANCE if name == "end_to_end" else OP_TOLERANCE
        status = "ok" if err < tol else "FAIL"
        lines.append(f"{name:<28s} max_rel_err={err:.3e}  tol={tol:.0e}  {status}")
    return "\n".join(lines)
