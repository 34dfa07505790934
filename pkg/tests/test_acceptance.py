"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Run with `pytest -s tests/test_acceptance.py` to watch the lines appear;
the trained-model criteria share one module-scoped training fixture.
"""

import math
import time

import numpy as np
import pytest

from futureseg.autodiff import Tensor, double_precision
from futureseg.convlstm import ConvLSTMParams, cell_step, run_bidirectional, zero_state
from futureseg.data import GenConfig, SegDataset, generate_dataset, read_segv, write_segv
from futureseg.gradcheck import END_TO_END_TOLERANCE, OP_TOLERANCE, run_suite
from futureseg.segnet import ModelConfig, named_parameters
from futureseg.train_eval import (
    TrainConfig,
    evaluate_copy_last,
    evaluate_miou,
    load_checkpoint,
    save_checkpoint,
    train,
)

from test_convlstm import scalar_params_to_cell, scalar_peephole_step
from test_train_eval import brute_force_iou

# shared benchmark: 500 train / 100 val sequences, 64x64, 4 classes, seed 7
DATASET_SEED = 7
TRAIN_COUNT, VAL_COUNT = 500, 100
ACCEPT_WIDTHS = (8, 16, 24, 24)
ACCEPT_EPOCHS = 8
MIOU_MARGIN = 0.05


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


@pytest.fixture(scope="module")
def benchmark_data():
    cfg = GenConfig(count=TRAIN_COUNT + VAL_COUNT, seed=DATASET_SEED)
    full = generate_dataset(cfg)
    return (SegDataset(full.sequences[:TRAIN_COUNT], full.num_classes),
            SegDataset(full.sequences[TRAIN_COUNT:], full.num_classes))


def _train_mode(mode, tr, va, epochs=ACCEPT_EPOCHS):
    h, w = tr.sequences[0].shape[1:]
    mcfg = ModelConfig(num_classes=tr.num_classes, height=h, width=w,
                       widths=ACCEPT_WIDTHS, mode=mode)
    tcfg = TrainConfig(epochs=epochs, batch_size=8, seed=DATASET_SEED, mode=mode,
                       horizon=3)
    t0 = time.perf_counter()
    ckpt, report = train(tcfg, tr, va, model_cfg=mcfg, quiet=True)
    return ckpt, report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def trained_models(benchmark_data):
    tr, va = benchmark_data
    out = {}
    for mode in ("uni", "none", "bi"):
        out[mode] = _train_mode(mode, tr, va)
        print(f"[trained {mode}: miou={out[mode][1].miou:.4f} "
              f"in {out[mode][2]:.0f}s]")
    return out


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    e2e = results.pop("end_to_end")
    worst_op = max(results.items(), key=lambda kv: kv[1])
    ok = (all(v < OP_TOLERANCE for v in results.values())
          and e2e < END_TO_END_TOLERANCE and elapsed < 120.0)
    _verdict(1, "gradient suite", ok,
             f"worst op {worst_op[0]}={worst_op[1]:.2e} (tol {OP_TOLERANCE:.0e}), "
             f"end-to-end={e2e:.2e} (tol {END_TO_END_TOLERANCE:.0e}), {elapsed:.0f}s")


def test_criterion_2_scalar_cell_oracle():
    names = ("w_fi", "w_hi", "w_ci", "b_i", "w_ff", "w_hf", "w_cf", "b_f",
             "w_fc", "w_hc", "b_c", "w_fo", "w_ho", "w_co", "b_o")
    rng = np.random.Generator(np.random.PCG64(202))
    worst = 0.0
    with double_precision():
        for _ in range(100):
            scalars = {n: float(rng.uniform(-1.5, 1.5)) for n in names}
            p = scalar_params_to_cell(scalars)
            h_ref, c_ref = 0.0, 0.0
            state = zero_state(1, 1, 1, 1)
            for f_val in rng.uniform(-2, 2, size=4):
                h_ref, c_ref = scalar_peephole_step(scalars, float(f_val), h_ref, c_ref)
                state = cell_step(p, Tensor(np.full((1, 1, 1, 1), f_val)), state)
            worst = max(worst, abs(state.h.item() - h_ref), abs(state.c.item() - c_ref))
    _verdict(2, "scalar cell oracle", worst < 1e-6,
             f"max |cell - scalar recurrence| = {worst:.2e} over 100 draws (tol 1e-6)")


def test_criterion_3_miou_oracle():
    rng = np.random.RandomState(303)
    exact = True
    for _ in range(1000):
        pred = rng.randint(0, 5, (8, 8))
        gt = rng.randint(0, 5, (8, 8))
        rep = evaluate_miou(pred, gt, 5)
        ious, present, miou = brute_force_iou(pred, gt, 5)
        if rep.present != present or not math.isclose(rep.miou, miou, rel_tol=1e-12):
            exact = False
            break
        for a, b in zip(rep.per_class_iou, ious):
            if not ((math.isnan(a) and math.isnan(b)) or a == b):
                exact = False
    hand = evaluate_miou(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
    hand_ok = math.isclose(hand.miou, 7 / 12, rel_tol=1e-12)
    _verdict(3, "miou oracle", exact and hand_ok,
             f"1000 random 8x8 K=5 pairs exact={exact}, hand case miou={hand.miou:.6f} "
             f"(want {7 / 12:.6f})")


def test_criterion_4_beats_copy_last(benchmark_data, trained_models):
    _, va = benchmark_data
    ckpt, report, seconds = trained_models["uni"]
    copy_rep = evaluate_copy_last(va, horizon=1)[0]
    margin = report.miou - copy_rep.miou
    ok = margin >= MIOU_MARGIN and seconds < 1800.0
    _verdict(4, "beats copy-last", ok,
             f"model {report.miou:.4f} vs copy-last {copy_rep.miou:.4f} "
             f"(margin {margin:+.4f}, need >= {MIOU_MARGIN}), trained in {seconds:.0f}s")


def test_criterion_5_beats_concat_fusion(trained_models):
    uni = trained_models["uni"][1].miou
    fusion = trained_models["none"][1].miou
    _verdict(5, "recurrence beats concat fusion", uni >= fusion,
             f"recurrent {uni:.4f} vs concat fusion {fusion:.4f} under identical budget")


def test_criterion_6_horizon_degradation(trained_models):
    horizons = trained_models["uni"][1].per_horizon_miou
    ok = horizons[2] <= horizons[0]
    _verdict(6, "horizon degradation", ok,
             f"per-horizon miou {[round(v, 4) for v in horizons]}; "
             f"h=3 must not beat h=1")


def test_reported_bidirectional_margin(trained_models):
    # the two-direction margin is reported, never gated
    uni = trained_models["uni"][1]
    bi = trained_models["bi"][1]
    print(f"[report] bidirectional miou {bi.miou:.4f} vs unidirectional {uni.miou:.4f} "
          f"(difference {bi.miou - uni.miou:+.4f}, informational only)")


def test_criterion_7_bidirectional_symmetry():
    p = ConvLSTMParams.init(3, 4, 6, 6, kernel_size=3, seed=707)
    rng = np.random.Generator(np.random.PCG64(708))
    for _, t in p.named():
        t.data = rng.uniform(-1, 1, t.data.shape).astype(np.float32)
    seq = [Tensor(rng.uniform(-1, 1, (2, 3, 6, 6)).astype(np.float32)) for _ in range(4)]
    fwd = run_bidirectional(p, p, seq)
    rev = run_bidirectional(p, p, list(reversed(seq)))
    c = 4
    ok = (np.array_equal(fwd.data[:, :c], rev.data[:, c:])
          and np.array_equal(fwd.data[:, c:], rev.data[:, :c]))
    _verdict(7, "bidirectional symmetry", ok,
             "time reversal swaps the concat halves bit-exactly (shared weights)")


def test_criterion_8_determinism_and_round_trips(tmp_path):
    gen = GenConfig(height=32, width=32, num_classes=3, shapes_per_sequence=2,
                    size_range=(6, 9), count=12, seed=808)
    d1, d2 = generate_dataset(gen), generate_dataset(gen)
    data_same = all(np.array_equal(a, b) for a, b in zip(d1.sequences, d2.sequences))

    p1, p2 = tmp_path / "a.segv", tmp_path / "b.segv"
    write_segv(p1, d1)
    write_segv(p2, d2)
    segv_same = p1.read_bytes() == p2.read_bytes()
    back = read_segv(p1)
    segv_round = all(np.array_equal(a, b) for a, b in zip(back.sequences, d1.sequences))

    mcfg = ModelConfig(num_classes=3, height=32, width=32, widths=(2, 2, 2, 2))
    tcfg = TrainConfig(epochs=1, batch_size=4, seed=5, horizon=2)
    ckpt_a, rep_a = train(tcfg, d1, d1, model_cfg=mcfg, quiet=True)
    ckpt_b, rep_b = train(tcfg, d2, d2, model_cfg=mcfg, quiet=True)
    losses_same = rep_a.loss_curve == rep_b.loss_curve

    c1, c2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(c1, ckpt_a)
    save_checkpoint(c2, ckpt_b)
    ckpt_same = c1.read_bytes() == c2.read_bytes()
    reloaded = load_checkpoint(c1)
    orig = named_parameters(ckpt_a.params)
    ckpt_round = all(np.array_equal(t.data, orig[name].data)
                     for name, t in named_parameters(reloaded.params).items())

    ok = data_same and segv_same and segv_round and losses_same and ckpt_same and ckpt_round
    _verdict(8, "determinism and round trips", ok,
             f"datasets={data_same}, segv bytes={segv_same}, segv round-trip={segv_round}, "
             f"loss curves={losses_same}, checkpoints={ckpt_same}, "
             f"checkpoint round-trip={ckpt_round}")


def test_criterion_9_loss_sanity():
    data = generate_dataset(GenConfig(count=50, seed=909))
    tr = SegDataset(data.sequences, data.num_classes)
    mcfg = ModelConfig(num_classes=4, height=64, width=64, widths=ACCEPT_WIDTHS)
    tcfg = TrainConfig(epochs=3, batch_size=8, seed=909, horizon=1)
    _, report = train(tcfg, tr, tr, model_cfg=mcfg, quiet=True)
    ln_k = math.log(4.0)
    initial_ok = abs(report.initial_loss - ln_k) / ln_k < 0.01
    final = report.loss_curve[-1]
    final_ok = final < 0.5 * report.initial_loss
    _verdict(9, "loss sanity", initial_ok and final_ok,
             f"initial {report.initial_loss:.4f} vs ln K {ln_k:.4f} "
             f"({abs(report.initial_loss - ln_k) / ln_k:.2%} off, need < 1%); "
             f"final {final:.4f} < half of initial: {final_ok}")
