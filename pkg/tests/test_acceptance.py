"""Acceptance criteria, each run at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, shown in the "acceptance criteria"
section of the pytest summary (and printed directly under ``-s``). The training
criteria share cached runs, so the whole module takes tens of minutes on a CPU.
"""
import math
import time

import numpy as np
import pytest
import torch

from layerstereo import datakit, metrics
from layerstereo.attention import SoftComposition, SoftSplit, STAttention
from layerstereo.datakit import SyntheticSceneSpec, generate_synthetic_stereo
from layerstereo.model import ModelConfig
from layerstereo.training import TrainConfig, clip_to_tensor, evaluate_model, train_loop
from layerstereo.warp import (
    build_shift_stack,
    compose_layers,
    compose_layers_alt,
    implicit_blend,
    warp_horizontal,
)

# Desk-scale "full model": every stage enabled, context encoder at 1/8 width so
# CPU training fits the time budget.
ACCEPT_MODEL = dict(context_width=0.125)
OVERFIT_STEPS = 600
OVERFIT_SCENE = SyntheticSceneSpec(disparities=[1, 4, 7], canvas=(64, 64), length=8,
                                   extents=[None, (0, 0, 64, 30), (16, 24, 32, 28)])
OVERFIT_SEED = 3
ABLATION_STEPS = 1000
ABLATION_SUITE = [[0, 3, 6], [1, 4, 8], [2, 5], [1, 3, 5, 7], [0, 2, 6]]


@pytest.fixture
def criterion(record_property):
    def report(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        record_property("acceptance", line)
        return ok

    return report


def test_paper_scale_results_are_out_of_scope(criterion):
    # Paper-scale numbers need the full corpus and multi-GPU training; this suite
    # substitutes property checks. What is checked here is that the same three
    # metrics are produced by the evaluation path.
    rng = np.random.default_rng(0)
    gt = datakit.FrameSequence(rng.uniform(0, 255, (2, 16, 16, 3)))
    report = metrics.evaluate_pair(gt, gt).as_dict()
    ok = set(report) == {"l1", "ssim", "psnr"}
    criterion("paper-scale scope", ok, "paper-scale numbers not asserted; L1/SSIM/PSNR suite present")
    assert ok


# --------------------------------------------------------------------------- warp gradients


def _smooth(shape, phase=0.0):
    c, h, w = shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    planes = [0.5 + 0.35 * np.sin(0.37 * xs + 0.23 * ys + phase + k) * np.cos(0.17 * ys - 0.11 * xs + k)
              for k in range(c)]
    return torch.tensor(np.stack(planes), dtype=torch.float64)


def _fd_max_rel_error(fn, inputs, step=1e-3):
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    weights = _smooth(tuple(out.shape[-3:]), phase=1.0).expand(out.shape)
    grads = torch.autograd.grad((out * weights).sum(), inputs)
    worst = 0.0
    for k, t in enumerate(inputs):
        base = t.detach().reshape(-1)
        num = torch.empty_like(base)
        for i in range(base.numel()):
            args = [a.detach() for a in inputs]
            vals = []
            for sgn in (1, -1):
                pert = base.clone()
                pert[i] += sgn * step
                args[k] = pert.reshape(t.shape)
                vals.append(float((fn(*args) * weights).sum()))
            num[i] = (vals[0] - vals[1]) / (2 * step)
        ana = grads[k].reshape(-1)
        denom = torch.maximum(ana.abs(), num.abs()).clamp_min(1e-3)
        worst = max(worst, float(((ana - num).abs() / denom).max()))
    return worst


def test_warp_gradient_check(criterion):
    t0 = time.time()
    x = _smooth((3, 16, 16))
    ys, xs = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    raw = 2.5 * np.sin(0.3 * xs - 0.2 * ys) + 0.7
    disp = torch.tensor(np.floor(raw) + 0.2 + 0.6 * (raw - np.floor(raw)), dtype=torch.float64)
    err_warp = _fd_max_rel_error(lambda a, d: warp_horizontal(a, d)[0], [x, disp])

    stack_x = _smooth((3, 16, 16), phase=0.5)
    probs = torch.softmax(_smooth((4, 16, 16), phase=2.0) * 3, dim=0)
    shifts = [-2, -1, 0, 3]
    err_blend = _fd_max_rel_error(
        lambda a, p: implicit_blend(build_shift_stack(a, shifts), p, check=False), [stack_x, probs])
    elapsed = time.time() - t0
    ok = err_warp < 1e-3 and err_blend < 1e-3 and elapsed < 10
    criterion("warp gradient check", ok,
              f"max rel err warp {err_warp:.2e}, blend {err_blend:.2e} (< 1e-3); {elapsed:.1f}s (< 10s)")
    assert ok


# --------------------------------------------------------------------------- layered composition


def reference_algorithm1(warped_output, warped_mask):
    """Line-by-line transcription on python lists: ``[layer][column]``."""
    n = len(warped_mask)
    width = len(warped_mask[0])
    layered_mask = [[0] * width for _ in range(n)]
    total_mask = [[0] * width for _ in range(n)]
    for i in range(n):
        if i == 0:
            layered_mask[i] = list(warped_mask[i])
            total_mask[i] = list(warped_mask[i])
        else:
            for j in range(width):
                total_mask[i][j] = 1 if (warped_mask[i][j] or layered_mask[i - 1][j]) else 0
                layered_mask[i][j] = 1 if ((1 - total_mask[i][j]) and warped_mask[i - 1][j]) else 0
    output = [[layered_mask[i][j] * warped_output[i][j] for j in range(width)] for i in range(n)]
    return [sum(output[i][j] for i in range(n)) for j in range(width)]


def reference_algorithm2(warped_output, warped_mask):
    n = len(warped_mask)
    width = len(warped_mask[0])
    layered_mask = [[0] * width for _ in range(n)]
    total_mask = [[0] * width for _ in range(n)]
    for i in range(n):
        if i == 0:
            layered_mask[i] = list(warped_mask[i])
            total_mask[i] = list(warped_mask[i])
        else:
            for j in range(width):
                total_mask[i][j] = 1 if (warped_mask[i][j] or layered_mask[i - 1][j]) else 0
                layered_mask[i][j] = total_mask[i][j] - warped_mask[i - 1][j]
    output = [[layered_mask[i][j] * warped_output[i][j] for j in range(width)] for i in range(n)]
    return [sum(output[i][j] for i in range(n)) for j in range(width)]


def test_layer_composition_oracles(criterion):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    mismatches = [0, 0]
    for _ in range(50):
        n = int(rng.integers(2, 5))
        masks = rng.integers(0, 2, (n, 8)).tolist()
        images = rng.integers(-50, 50, (n, 8)).astype(float).tolist()
        m = torch.tensor(masks, dtype=torch.float64).reshape(1, n, 1, 1, 1, 8)
        im = torch.tensor(images, dtype=torch.float64).reshape(1, n, 1, 1, 1, 8)
        if compose_layers(im, m).flatten().tolist() != reference_algorithm1(images, masks):
            mismatches[0] += 1
        if compose_layers_alt(im, m).flatten().tolist() != reference_algorithm2(images, masks):
            mismatches[1] += 1
    elapsed = time.time() - t0
    ok = mismatches == [0, 0] and elapsed < 5
    criterion("layer composition oracles", ok,
              f"50 fixtures, mismatches alg1 {mismatches[0]}, alg2 {mismatches[1]} (bit-exact); {elapsed:.2f}s (< 5s)")
    assert ok


# --------------------------------------------------------------------------- synthetic geometry


def test_synthetic_geometry_round_trip(criterion):
    t0 = time.time()
    rng = np.random.default_rng(77)
    worst, checked = 0.0, 0
    for k in range(20):
        spec = datakit.random_scene_spec(rng, canvas=(64, 64), length=4)
        scene = generate_synthetic_stereo(spec, seed=k)
        warped, valid = warp_horizontal(scene.left.frames, scene.gt_disparity)
        keep = (~scene.gt_occlusion) & (valid > 0)
        checked += int(keep.sum())
        worst = max(worst, float(np.abs(warped[keep] - scene.right.frames[keep]).max()))
    elapsed = time.time() - t0
    ok = worst == 0.0 and checked > 0 and elapsed < 10
    criterion("synthetic geometry round trip", ok,
              f"20 scenes, max error {worst} over {checked} pixels (exactly 0); {elapsed:.1f}s (< 10s)")
    assert ok


# --------------------------------------------------------------------------- consistency metric


def test_consistency_metric_oracle(criterion):
    t0 = time.time()
    rng = np.random.default_rng(5)
    zero_max, frac4, gaps = 0.0, [], []
    for d in (1, 2, 3, 4):
        scene = generate_synthetic_stereo(SyntheticSceneSpec(disparities=[d], canvas=(64, 64), length=2), seed=d)
        for t in range(2):
            f_lr, f_rl = scene.flows(t)
            zero_max = max(zero_max, float(metrics.flow_consistency(f_lr, f_rl).errors.max()))
            pert = np.array(f_lr)
            n = pert.shape[0] * pert.shape[1]
            picks = rng.choice(n, size=n // 100, replace=False)
            rows, cols = np.unravel_index(picks, pert.shape[:2])
            axis = rng.integers(0, 2, picks.size)
            pert[rows, cols, axis] += rng.choice([-3.0, 3.0], picks.size)
            cmap = metrics.flow_consistency(metrics.FlowField(pert), f_rl)
            frac4.append(metrics.occlusion_fraction(cmap, 4.0))
            gaps.append(abs(metrics.occlusion_fraction(cmap, 2.0) - picks.size / n))
    elapsed = time.time() - t0
    ok = zero_max == 0.0 and max(frac4) == 0.0 and max(gaps) <= 1e-3 and elapsed < 5
    criterion("consistency metric oracle", ok,
              f"inverse pairs max error {zero_max}; eps=4 fraction {max(frac4)}; "
              f"eps=2 gap to perturbed fraction {max(gaps):.1e} (<= 1e-3); {elapsed:.2f}s (< 5s)")
    assert ok


# --------------------------------------------------------------------------- attention


def test_attention_equivalences(criterion):
    torch.manual_seed(0)
    strided = STAttention(16, 2, temporal_stride=2, window=(4, 4), max_frames=8).double()
    with torch.no_grad():
        strided.pos_embed.normal_()
        strided.frame_embed.normal_()
    full = STAttention(16, 2, temporal_stride=1, window=(4, 4), max_frames=8).double()
    full.load_state_dict(strided.state_dict())
    z = torch.randn(1, 8, 1, 1, 4, 4, 16, dtype=torch.float64)
    with torch.no_grad():
        stride_gap = float((strided(z) - full(z, frame_mask=torch.arange(8) % 2 == 0)).abs().max())
        cross_gap = float((strided(z, z) - strided(z)).abs().max())

    n = 3 * 3 * 3
    split, comp = SoftSplit(3, n, 3, 2).double(), SoftComposition(3, n, 3, 2).double()
    with torch.no_grad():
        for lin in (split.embedding, comp.embedding):
            lin.weight.copy_(torch.eye(n))
            lin.bias.zero_()
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        trip = float((comp(split(x), (16, 16)) - x).abs().max())
    ok = stride_gap < 1e-5 and cross_gap == 0.0 and trip < 1e-5
    criterion("attention equivalences", ok,
              f"strided vs masked {stride_gap:.1e} (< 1e-5); tied cross vs self {cross_gap:.1e}; "
              f"split/compose round trip {trip:.1e} (< 1e-5)")
    assert ok


# --------------------------------------------------------------------------- training runs


def _overfit_scene():
    return generate_synthetic_stereo(OVERFIT_SCENE, seed=OVERFIT_SEED)


def _overfit_config():
    return TrainConfig(learning_rate=3e-5, max_iters=OVERFIT_STEPS, resize_to=64, crop_to=64, seed=0)


def _run_overfit():
    scene = _overfit_scene()
    data = [(clip_to_tensor(scene.left), clip_to_tensor(scene.right))]
    t0 = time.time()
    result = train_loop(data, _overfit_config(), ModelConfig(**ACCEPT_MODEL))
    return scene, result, time.time() - t0


@pytest.fixture(scope="module")
def overfit_run():
    return _run_overfit()


@pytest.mark.slow
def test_overfit_smoke(criterion, overfit_run):
    scene, result, elapsed = overfit_run
    model = result.model.eval()
    summary, _ = evaluate_model(model, [(scene.left, scene.right)])
    copy_left = metrics.evaluate_pair(scene.left, scene.right).l1
    with torch.no_grad():
        probs = model(clip_to_tensor(scene.left)[None]).implicit_probs[0]
    disparity_of = -torch.tensor(model.config.shifts)
    argmax = disparity_of[probs.argmax(dim=1)].numpy()
    visible = ~scene.gt_occlusion
    agreement = float((argmax == scene.gt_disparity)[visible].mean())
    ratio = summary.l1 / copy_left
    ok = (result.step <= 2000 and ratio <= 0.8 and agreement >= 0.8 and elapsed < 4 * 3600)
    criterion("overfit smoke test", ok,
              f"{result.step} steps at lr 3e-5: final L1 {summary.l1:.4f} vs copy-left {copy_left:.4f} "
              f"({(1 - ratio) * 100:.1f}% below, need >= 20%); argmax agreement {agreement * 100:.1f}% "
              f"(>= 80%); {elapsed / 60:.1f} min (< 4 h CPU)")
    assert ok


@pytest.mark.slow
def test_loss_moving_average_decreases_early(overfit_run):
    # invariant rather than a numbered criterion: consecutive 50-step means of
    # the total loss fall over the first 500 steps
    _, result, _ = overfit_run
    totals = np.array([rec["total"] for rec in result.log[:500]])
    means = totals[: len(totals) // 50 * 50].reshape(-1, 50).mean(axis=1)
    assert len(means) == 10
    assert np.all(np.diff(means) < 0), means


@pytest.mark.slow
def test_determinism(criterion, overfit_run):
    _, first, _ = overfit_run
    _, second, _ = _run_overfit()
    strip = lambda log: [{k: v for k, v in rec.items() if k != "wall_time"} for rec in log]
    same = strip(first.log) == strip(second.log)
    ok = same and len(first.log) == OVERFIT_STEPS
    detail = f"two {OVERFIT_STEPS}-step runs with seed 0, single-threaded: loss logs identical={same}"
    criterion("determinism", ok, detail)
    assert ok


def _ablation_suite():
    clips = []
    for i, disparities in enumerate(ABLATION_SUITE):
        scene = generate_synthetic_stereo(SyntheticSceneSpec(disparities=disparities, canvas=(64, 64), length=8),
                                          seed=100 + i)
        clips.append((scene.left, scene.right))
    return clips


@pytest.mark.slow
def test_ablation_ordering(criterion):
    clips = _ablation_suite()
    data = [(clip_to_tensor(left), clip_to_tensor(right)) for left, right in clips]
    cfg = TrainConfig(learning_rate=3e-5, max_iters=ABLATION_STEPS, resize_to=64, crop_to=64, seed=0)
    scores = {}
    for name, flags in (("full", {}), ("w/o context fusion", {"use_fusion": False}),
                        ("w/o layered disparity", {"use_layered": False})):
        result = train_loop(data, cfg, ModelConfig(**ACCEPT_MODEL, **flags))
        scores[name], _ = evaluate_model(result.model.eval(), clips)
    l1 = {k: v.l1 for k, v in scores.items()}
    ok = l1["full"] <= l1["w/o context fusion"] <= l1["w/o layered disparity"]
    criterion("ablation ordering", ok,
              "overfit L1 on 5 clips: " + ", ".join(f"{k} {v:.4f}" for k, v in l1.items())
              + " (need full <= w/o context fusion <= w/o layered disparity)")
    assert ok
