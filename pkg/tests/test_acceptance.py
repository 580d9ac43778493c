"""Acceptance criteria, one test per criterion, each printing a pass/fail line.

Run with `pytest -v -s tests/test_acceptance.py`.  The training-based
criteria (A5, A8) dominate the runtime; everything is single-core.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from csunfold import autodiff as ad
from csunfold import baseline as bl
from csunfold import gradcheck as gc
from csunfold import model as md
from csunfold import nonlocal_prox as nl
from csunfold import sampling as sp
from csunfold import stepsize as ss
from csunfold import training as tr
from csunfold.metrics import psnr, ssim

import oracles

DATA_DIR = Path(__file__).parent / "data"

A8_STEPS = 400
A8_CONFIGS = [
    ("full", "dinlm"),
    ("block", "dinlm"),
    ("global", "dinlm"),
    ("fixed", "dinlm"),
    ("full", "nlm"),
    ("full", "none"),
]


def report(criterion, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


def desk_patches():
    """Four fixed synthetic 33x33 patches in [0, 1]."""
    yy, xx = np.mgrid[0:33, 0:33] / 32.0
    p1 = 0.5 + 0.45 * np.sin(6.0 * xx) * np.cos(4.0 * yy)
    p2 = np.clip(xx * 0.7 + yy * 0.25, 0.0, 1.0)
    p3 = np.zeros((33, 33))
    p3[:17, :] = 0.3
    p3[17:, :20] = 0.85
    p3[5:12, 8:25] = 0.55
    p4 = np.exp(-((xx - 0.4) ** 2 + (yy - 0.6) ** 2) / 0.05) * 0.8 + 0.1
    return [p1, p2, p3, p4]


def train_psnr(params, cfg, op, patches):
    scores = []
    with ad.no_grad():
        for p in patches:
            m = sp.measure_image(op, p)
            xs, _, _ = md.forward(params, cfg, op, m, training=False)
            scores.append(psnr(xs[-1].data[0, 0], p))
    return float(np.mean(scores))


def test_a1_gradient_correctness():
    start = time.monotonic()
    worst_op = 0.0
    worst_model = 0.0
    for seed in range(10):
        for res in gc.op_checks(seed, samples=100):
            worst_op = max(worst_op, res.max_error)
            assert res.max_error < 1e-4, f"{res.name} @ seed {seed}: {res.max_error}"
        model_res = gc.model_check(seed, samples=100)
        worst_model = max(worst_model, model_res.max_error)
        assert model_res.max_error < 1e-4, f"model @ seed {seed}: {model_res.max_error}"
    elapsed = time.monotonic() - start
    ok = worst_op < 1e-4 and worst_model < 1e-4 and elapsed < 300
    report(
        "A1",
        ok,
        f"ops max rel err {worst_op:.2e}, model max rel err {worst_model:.2e}, "
        f"{elapsed:.0f}s (< 300s), 10 seeds x 100 coords, 64-bit",
    )


def test_a2_dinlm_degenerates_to_nlm():
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        cfg = md.ModelConfig(phases=1, channels=4, feb_blocks=1, nl_subsample=1, seed=trial)
        params = md.init_parameters(cfg, seed=trial, dtype=np.float32)
        nl_params = params.phases[0].prox.nl  # offset head is zero at init
        x = ad.Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))
        d_out, _ = nl.dinlm_forward(x, nl_params)
        n_out, _ = nl.nlm_forward(x, nl_params)
        worst = max(worst, float(np.abs(d_out.data - n_out.data).max()))
    report("A2", worst < 1e-6, f"zero-offset dinlm vs nlm, 100 random 8x8 inputs, max diff {worst:.2e} (< 1e-6, 32-bit)")


def test_a3_nonlocal_brute_force_equivalence():
    worst = 0.0
    for h in range(1, 7):
        for w in range(1, 7):
            rng = np.random.default_rng(h * 10 + w)
            c = 2 + (h + w) % 3  # channels 2..4
            cfg = md.ModelConfig(phases=1, channels=c, feb_blocks=1, nl_subsample=1, seed=h * 7 + w)
            params = md.init_parameters(cfg, seed=h * 7 + w, dtype=np.float64)
            p = params.phases[0].prox.nl
            x = rng.normal(size=(1, c, h, w))

            out, aff = nl.nlm_forward(ad.Tensor(x), p)
            ref_out, ref_aff = oracles.nonlocal_pairwise(x, p, deformed=False)
            worst = max(worst, float(np.abs(out.data - ref_out).max()), float(np.abs(aff.entries - ref_aff).max()))

            p.offset_w.data = 0.6 * rng.normal(size=p.offset_w.shape)
            p.offset_b.data = 0.6 * rng.normal(size=p.offset_b.shape)
            out_d, aff_d = nl.dinlm_forward(ad.Tensor(x), p)
            ref_out_d, ref_aff_d = oracles.nonlocal_pairwise(x, p, deformed=True)
            worst = max(worst, float(np.abs(out_d.data - ref_out_d).max()), float(np.abs(aff_d.entries - ref_aff_d).max()))
    report("A3", worst < 1e-10, f"pairwise oracles, all sizes to 6x6, max diff {worst:.2e} (< 1e-10, 64-bit)")


def test_a4_constant_map_reduces_to_scalar_pgd():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        op = sp.make_operator(8, 0.5, seed=seed, dtype=np.float64)
        x = rng.random((1, 1, 16, 16))
        m = sp.sample(op, rng.random((1, 1, 16, 16)))
        rho = float(rng.uniform(0.1, 1.9))
        const = ss.StepSizeMap(ad.Tensor(np.full((1, 1, 16, 16), rho)), "full")
        r = ss.gradient_step(op, ad.Tensor(x), m, const)
        ref = oracles.scalar_pgd_step(op.phi64, x[0, 0], m.data, rho, 8)
        worst = max(worst, float(np.abs(r.data[0, 0] - ref).max()))

    in_range = True
    for variant in ("full", "block", "global", "fixed"):
        cfg = md.ModelConfig(
            phases=1, channels=4, feb_blocks=1, ssg_variant=variant, nl_kind="none", seed=60
        )
        params = md.init_parameters(cfg, seed=60)
        rng = np.random.default_rng(61)
        for _ in range(25):
            h = ad.Tensor((50 * rng.normal(size=(1, 4, 33, 33))).astype(np.float32))
            values = ss.ssg_forward(params.phases[0].ssg, h, training=True).values.data
            in_range &= bool((values >= 0).all() and (values <= 2).all())
    ok = worst < 1e-12 and in_range
    report("A4", ok, f"constant-map vs scalar update max diff {worst:.2e} (< 1e-12, 64-bit); maps within [0,2]: {in_range}")


def test_a5_desk_scale_learnability(tmp_path):
    patches = desk_patches()
    cfg = md.desk_config(rate=0.25, nl_subsample=2)  # 3 phases, c=8, one FEB, one DINLM each
    op = sp.make_operator(33, 0.25, seed=0)
    x0_scores = []
    for p in patches:
        m = sp.measure_image(op, p)
        x0 = sp.initial_reconstruction(op, m)
        x0_scores.append(psnr(x0.data[0, 0], p))
    x0_psnr = float(np.mean(x0_scores))

    start = time.monotonic()
    state = {}

    def callback(step, value, params, op_):
        if (step + 1) % 25 == 0 or step + 1 == 2000:
            score = train_psnr(params, cfg, op_, patches)
            state["latest"] = (step + 1, value, score)
            if value <= state["initial"] / 10.0 and score >= x0_psnr + 3.0:
                return True
        if step == 0:
            state["initial"] = value
        return False

    state["initial"] = None
    params, op, losses = tr.overfit(patches, cfg, steps=2000, lr=1e-4, seed=0, op=op, callback=callback)
    elapsed = time.monotonic() - start
    steps_run, final_loss, final_psnr = state["latest"]
    ratio = losses[0] / final_loss
    ok = ratio >= 10.0 and final_psnr >= x0_psnr + 3.0 and steps_run <= 2000 and elapsed < 900

    # drive the trained model through the CLI: reconstruct-and-eval on the
    # training patches must beat the transpose-apply start point
    from csunfold import pgm
    from csunfold.cli import main as cli_main

    ckpt = tmp_path / "desk.dcsw"
    md.save_checkpoint(ckpt, cfg, params, op)
    dataset = tmp_path / "patches"
    dataset.mkdir()
    for i, p in enumerate(patches):
        pgm.write_image(dataset / f"p{i}.pgm", p)
    report_csv = tmp_path / "report.csv"
    assert cli_main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                     "--out", str(report_csv)]) == 0
    mean_line = report_csv.read_text().strip().splitlines()[-1]
    cli_psnr = float(mean_line.split(",")[4])
    ok &= cli_psnr > x0_psnr

    baseline_path = DATA_DIR / "a5_baseline.json"
    record = {
        "steps": steps_run,
        "initial_loss": losses[0],
        "final_loss": final_loss,
        "x0_psnr": x0_psnr,
        "final_psnr": final_psnr,
    }
    if baseline_path.exists():
        frozen = json.loads(baseline_path.read_text())
        ok &= abs(frozen["final_psnr"] - final_psnr) < 0.75
        ok &= abs(frozen["x0_psnr"] - x0_psnr) < 1e-6
        ok &= abs(frozen["steps"] - steps_run) <= 100
        detail_extra = f"; regression vs frozen baseline ({frozen['final_psnr']:.2f} dB) ok"
    else:
        DATA_DIR.mkdir(exist_ok=True)
        baseline_path.write_text(json.dumps(record, indent=1))
        detail_extra = "; baseline recorded"
    report(
        "A5",
        ok,
        f"loss {losses[0]:.3g} -> {final_loss:.3g} ({ratio:.0f}x >= 10x), "
        f"PSNR {x0_psnr:.2f} -> {final_psnr:.2f} dB (gain >= 3), "
        f"{steps_run} steps, {elapsed:.0f}s (< 900s); CLI eval mean {cli_psnr:.2f} dB "
        f"> x0 {x0_psnr:.2f} dB{detail_extra}",
    )


def test_a6_measurement_allocation():
    ok = sp.measurements_per_block(33, 0.01) == 10
    sweep = {}
    for rate in (0.01, 0.10, 0.25, 0.30, 0.40):
        n = sp.measurements_per_block(33, rate)
        sweep[rate] = n
        ok &= n == int(np.floor(rate * 1089))
    report("A6", ok, f"n_B(33, 0.01) = {sweep[0.01]}; sweep {sweep} matches floor(rate*1089)")


def test_a7_classical_baseline_sanity():
    monotone = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        op = sp.make_operator(16, 0.25, seed=seed, dtype=np.float64)
        if seed >= 10:
            # row-scaled matrices break the consistency of the start point,
            # so these instances exercise a genuine descent
            scale = 1.0 + 0.1 * (seed - 9)
            op.phi64 = op.phi64 * scale
            op.phi = ad.Tensor(op.phi64)
        sigma_sq = bl.operator_norm_sq(op)
        m = sp.measure_image(op, rng.random((32, 32)))
        cfg = bl.IstaConfig(rho=1.0 / sigma_sq, lam=0.0, iterations=25, transform_block=16)
        _, trace = bl.ista_reconstruct(op, m, cfg)
        monotone &= all(trace[i + 1] <= trace[i] + 1e-12 for i in range(len(trace) - 1))

    rng = np.random.default_rng(99)
    op = sp.make_operator(16, 1.0, seed=99, dtype=np.float64)
    img = rng.random((16, 16))
    x, _ = bl.ista_reconstruct(
        op, sp.measure_image(op, img), bl.IstaConfig(rho=1.0, lam=0.0, iterations=1, transform_block=16)
    )
    exact = float(np.abs(x - img).max())
    ok = monotone and exact < 1e-6
    report("A7", ok, f"20 instances non-increasing: {monotone}; rate-1 one-step recovery err {exact:.2e} (< 1e-6)")


def test_a8_ablation_ordering():
    patches = desk_patches()
    per_seed = {}
    start = time.monotonic()
    for seed in (0, 1, 2):
        scores = {}
        for ssg_variant, nl_kind in A8_CONFIGS:
            cfg = md.desk_config(
                rate=0.25, nl_subsample=2, ssg_variant=ssg_variant, nl_kind=nl_kind
            )
            op = sp.make_operator(33, 0.25, seed=seed)
            params, op, _ = tr.overfit(patches, cfg, steps=A8_STEPS, lr=1e-4, seed=seed, op=op)
            scores[(ssg_variant, nl_kind)] = train_psnr(params, cfg, op, patches)
        per_seed[seed] = scores
        print(f"  seed {seed}: " + ", ".join(f"{k[0]}/{k[1]}={v:.2f}" for k, v in scores.items()))

    ssg_ok = 0
    nl_ok = 0
    for seed, s in per_seed.items():
        ssg_chain = (
            s[("full", "dinlm")] >= s[("block", "dinlm")]
            >= s[("global", "dinlm")] >= s[("fixed", "dinlm")]
        )
        nl_chain = s[("full", "dinlm")] >= s[("full", "nlm")] >= s[("full", "none")]
        ssg_ok += ssg_chain
        nl_ok += nl_chain
        if not ssg_chain:
            print(f"  note: step-size ordering broken in seed {seed} (logged, single-seed failures tolerated)")
        if not nl_chain:
            print(f"  note: non-local ordering broken in seed {seed} (logged, single-seed failures tolerated)")
    elapsed = time.monotonic() - start
    ok = ssg_ok >= 2 and nl_ok >= 2
    report(
        "A8",
        ok,
        f"step-size chain holds in {ssg_ok}/3 seeds, non-local chain in {nl_ok}/3 "
        f"(need >= 2/3 each), {A8_STEPS} steps per variant, {elapsed:.0f}s",
    )


def test_a9_serialization_roundtrips(tmp_path):
    rng = np.random.default_rng(5)
    cfg = md.desk_config(channels=4, phases=2, rate=0.25)
    params = md.init_parameters(cfg, seed=5)
    op = sp.make_operator(33, 0.25, seed=5)

    ckpt = tmp_path / "w.dcsw"
    md.save_checkpoint(ckpt, cfg, params, op)
    first = ckpt.read_bytes()
    cfg2, params2, op2 = md.load_checkpoint(ckpt)
    md.save_checkpoint(ckpt, cfg2, params2, op2)
    ckpt_ok = ckpt.read_bytes() == first

    m = sp.measure_image(op, rng.random((40, 50)))
    meas = tmp_path / "m.dcsm"
    sp.write_measurements(meas, m)
    meas_first = meas.read_bytes()
    m2 = sp.read_measurements(meas)
    sp.write_measurements(meas, m2)
    meas_ok = meas.read_bytes() == meas_first

    xs, _, _ = md.forward(params, cfg, op, m2, training=False)
    xs2, _, _ = md.forward(params2, cfg2, op2, m2, training=False)
    recon_ok = all(np.array_equal(a.data, b.data) for a, b in zip(xs, xs2))
    ok = ckpt_ok and meas_ok and recon_ok
    report(
        "A9",
        ok,
        f"checkpoint bit-exact: {ckpt_ok}, measurements bit-exact: {meas_ok}, "
        f"reloaded reconstruction bit-identical: {recon_ok}",
    )


def test_a10_metric_oracles():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)
    closed = abs(psnr(a, b) - 20.0)

    rng = np.random.default_rng(7)
    c = rng.random((16, 16))
    self_ssim = abs(ssim(c, c.copy()) - 1.0)

    worst_psnr = 0.0
    worst_ssim = 0.0
    for _ in range(20):
        x = rng.random((14, 14))
        y = rng.random((14, 14))
        worst_psnr = max(worst_psnr, abs(psnr(x, y) - oracles.psnr_loops(x, y)))
        worst_ssim = max(worst_ssim, abs(ssim(x, y) - oracles.ssim_windows(x, y)))
    ok = closed < 1e-9 and self_ssim < 1e-9 and worst_psnr < 1e-10 and worst_ssim < 1e-6
    report(
        "A10",
        ok,
        f"psnr(MSE=0.01) err {closed:.1e} (< 1e-9); ssim(a,a) err {self_ssim:.1e} (< 1e-9); "
        f"oracle diffs psnr {worst_psnr:.1e} (< 1e-10), ssim {worst_ssim:.1e} (< 1e-6), 20 pairs",
    )
