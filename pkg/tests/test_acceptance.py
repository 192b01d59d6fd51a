"""Acceptance suite: the eight release criteria, one pass/fail line each.

Each test prints one `[PASS]`/`[FAIL]` line; run with `-rP` (the repo
default) or `-s` to see the lines for passing tests too.
"""

import math
import os
import time

import numpy as np
import pytest

from clamseg import augment, cli, config, gradcheck, losses, metrics
from clamseg import phantoms, preprocess, trainer
from clamseg import tensor as T
from clamseg.seeding import derive_rng
from clamseg.unetpp import UnetPP, UnetPPConfig


def _report(num, desc, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {desc}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = gradcheck.run_suite(module="all", seeds=range(20), h=1e-3, tol=1e-4)
    elapsed = time.time() - t0
    bad = [name for name, r in results if not r["pass"]]
    worst = max(r["max_rel_err"] for _, r in results)
    ok = not bad and elapsed <= 60.0
    _report(1, "gradcheck of every op, hybrid loss after softmax, and the "
               "full 2-level 8x8 model over 20 seeds at tol 1e-4",
            ok, f"{len(results)} checks, worst rel err {worst:.2e}, "
                f"{elapsed:.1f}s" + (f", failed: {bad[:3]}" if bad else ""))


def _hybrid_scalar_oracle(y, p):
    """Plain-float evaluation of the loss formula, independent of tensor.py."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    B, C, H, W = y.shape
    total = 0.0
    for idx in np.ndindex(y.shape):
        yv, pv = float(y[idx]), float(p[idx])
        term = yv * math.log(max(pv, 1e-7))
        denom = yv * yv + pv * pv
        if denom > 0:
            term += yv * pv / denom
        total += term
    return -total / (B * H * W)


def _maps(ylist, plist):
    y = np.array(ylist, dtype=np.float64).T[None, :, None, :]
    p = np.array(plist, dtype=np.float64).T[None, :, None, :]
    return y, p


def test_criterion_2_loss_oracles():
    cases = [
        (_maps([[1, 0]], [[1, 0]]), -0.5),
        (_maps([[1, 0]], [[0.5, 0.5]]), 0.2931471805599453),
        (_maps([[1, 0], [1, 0]], [[1, 0], [0.5, 0.5]]), -0.10342640972002735),
    ]
    worst = 0.0
    ok = True
    for (y, p), frozen in cases:
        assert _hybrid_scalar_oracle(y, p) == pytest.approx(frozen, abs=1e-9)
        got = losses.hybrid_loss(T.Tensor(y), T.Tensor(p)).item()
        worst = max(worst, abs(got - frozen))
        ok = ok and abs(got - frozen) <= 1e-6
    y0, p0 = _maps([[0, 0]], [[0, 0]])
    zero = losses.hybrid_loss(T.Tensor(y0), T.Tensor(p0)).item()
    ok = ok and zero == 0.0
    _report(2, "hybrid loss matches the frozen scalar-oracle values within "
               "1e-6 and 0/0 gives exactly 0",
            ok, f"worst abs err {worst:.2e}, zero case {zero!r}")


def test_criterion_3_pruning_bit_identity():
    cfg = UnetPPConfig(levels=5, input_size=16, base_channels=2)
    model = UnetPP(cfg, seed=5)
    rng = derive_rng(7, "acceptance", "prune-inputs")
    inputs = [rng.random((1, 1, 16, 16)).astype(np.float32) for _ in range(10)]
    mismatches = 0
    for depth in (1, 2, 3, 4):
        sub = model.prune(depth)
        for x in inputs:
            full = model.forward(T.Tensor(x), depth=depth).data
            cut = sub.forward(T.Tensor(x)).data
            if full.tobytes() != cut.tobytes():
                mismatches += 1
    _report(3, "5-level model: pruned output bit-identical to the full graph "
               "at depths 1-4 on 10 inputs",
            mismatches == 0, f"{4 * len(inputs)} comparisons, "
                             f"{mismatches} mismatches")


def test_criterion_4_augmentation_ranges():
    img = derive_rng(3, "acceptance", "aug-img").random((48, 48)).astype(np.float32)
    blur_lo, blur_hi = 1.0, 0.0
    dist_lo, dist_hi = 1.0, 0.0
    ok = True
    for i in range(1000):
        out, info = augment.blur(img, derive_rng(11, "acceptance", "blur", str(i)))
        ok = ok and 0.90 <= info["r"] < 1.00 and out.shape == img.shape
        blur_lo, blur_hi = min(blur_lo, info["r"]), max(blur_hi, info["r"])
        out, info = augment.distort(img, derive_rng(11, "acceptance", "dist", str(i)))
        for k in ("sx", "sy"):
            ok = ok and 0.80 <= info[k] <= 1.00
            dist_lo, dist_hi = min(dist_lo, info[k]), max(dist_hi, info[k])
        ok = ok and out.shape == img.shape
    _report(4, "1000 draws: blur factor in [0.90, 1.00), distortion factors "
               "in [0.80, 1.00], output dims preserved",
            ok, f"blur [{blur_lo:.4f}, {blur_hi:.4f}], "
                f"distort [{dist_lo:.4f}, {dist_hi:.4f}]")


def test_criterion_5_train_determinism_and_roundtrip(tmp_path):
    data = str(tmp_path / "data")
    assert cli.main(["gen-data", "--out", data, "--count", "8",
                     "--positive-frac", "0.5", "--seed", "5",
                     "--size", "64"]) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text("levels = 3\nbase_channels = 2\ntile_size = 32\n"
                   "n_augment = 1\nn_normal = 1\nn_cross = 1\n")
    outs = []
    for tag in ("one", "two"):
        ckpt = str(tmp_path / f"{tag}.ckpt")
        assert cli.main(["train", "--data", data, "--config", str(cfg),
                         "--out", ckpt, "--steps", "3", "--seed", "9"]) == 0
        with open(ckpt, "rb") as fh:
            cbytes = fh.read()
        with open(ckpt + ".log", "rb") as fh:
            lbytes = fh.read()
        outs.append((cbytes, lbytes))
    identical = outs[0] == outs[1]

    state = trainer.load_state(str(tmp_path / "one.ckpt"))
    resaved = str(tmp_path / "resaved.ckpt")
    trainer.save_state(state, resaved)
    with open(resaved, "rb") as fh:
        roundtrip = fh.read() == outs[0][0]
    _report(5, "identical train invocations give byte-identical checkpoints "
               "and logs; load/save round-trip is byte-identical",
            identical and roundtrip,
            f"checkpoint {len(outs[0][0])} bytes, "
            f"rerun identical: {identical}, roundtrip identical: {roundtrip}")


def test_criterion_6_end_to_end_smoke(tmp_path):
    t0 = time.time()
    raw = str(tmp_path / "smoke_raw")
    prep = str(tmp_path / "smoke")
    phantoms.generate_phantoms(raw, 200, 0.5, 123,
                               params=phantoms.PhantomParams.easy(size=64))
    preprocess.preprocess_dataset(raw, prep, mask_mode="external", out_size=64)
    rc = config.RunConfig(levels=3, base_channels=8, tile_size=32,
                          optimizer="sgd", lr=0.3, n_augment=2, n_normal=2,
                          n_cross=4, default_eta=1.0)
    ckpt = str(tmp_path / "smoke.ckpt")
    state, rows = trainer.run_training(
        data_dir=prep,
        model_config=config.to_model_config(rc),
        opt_config=config.to_optimizer_config(rc),
        policy=config.to_policy(rc),
        steps=200, seed=42, out_path=ckpt)
    first = float(np.mean([r["total_loss"] for r in rows[:10]]))
    last = float(np.mean([r["total_loss"] for r in rows[-10:]]))
    rep = metrics.evaluate(ckpt, prep, split="test", trials=200, seed=0)
    elapsed = time.time() - t0
    loss_ok = last < 0.7 * first
    margin = rep["mean_dice"] - rep["baseline_dice"]
    dice_ok = margin >= 0.10
    time_ok = elapsed <= 900.0
    _report(6, "desk-scale smoke: loss drops below 0.7x the early mean and "
               "held-out dice beats the matched random baseline by 0.10 "
               "inside 15 min",
            loss_ok and dice_ok and time_ok,
            f"first10 {first:.3f}, last10 {last:.3f}, "
            f"dice {rep['mean_dice']:.3f} vs baseline "
            f"{rep['baseline_dice']:.3f} (margin {margin:.3f}), "
            f"{elapsed:.0f}s")


def test_criterion_7_organ_mask_stub():
    dices = []
    for i in range(100):
        rng = derive_rng(17, "acceptance", "organ", f"{i:03d}")
        img, _, organ, _ = phantoms.make_phantom(
            rng, phantoms.PhantomParams.easy(), positive=(i % 2 == 0))
        est = preprocess.organ_mask_threshold(img)
        dices.append(metrics.dice(est, organ))
    mean = float(np.mean(dices))
    _report(7, "threshold-mode organ masks reach mean Dice >= 0.95 against "
               "the true organ ellipse on 100 phantoms",
            mean >= 0.95, f"mean {mean:.4f}, min {min(dices):.4f}")


def test_criterion_8_metric_identities():
    rng = derive_rng(23, "acceptance", "metric-pairs")
    worst = 0.0
    for _ in range(1000):
        ra, rb = rng.uniform(0.0, 1.0, size=2)
        a = rng.random((24, 24)) < ra
        b = rng.random((24, 24)) < rb
        d = metrics.dice(a, b)
        i = metrics.iou(a, b)
        worst = max(worst, abs(i - d / (2.0 - d)))
    empty = np.zeros((24, 24), dtype=bool)
    both_one = metrics.dice(empty, empty) == 1.0 and metrics.iou(empty, empty) == 1.0
    _report(8, "iou equals dice/(2-dice) within 1e-9 on 1000 random pairs "
               "and both-empty masks score 1.0",
            worst <= 1e-9 and both_one, f"worst abs dev {worst:.2e}")
