import json

import numpy as np
import pytest
import torch

from layerstereo.datakit import FrameSequence, SyntheticSceneSpec, generate_synthetic_stereo
from layerstereo.metrics import MetricError
from layerstereo.model import ModelConfig, NetworkOutputs, load_checkpoint
from layerstereo.training import (
    ConfigError,
    DivergenceError,
    LossError,
    TrainConfig,
    TrainingError,
    augment_clip,
    build_configs,
    clip_to_tensor,
    compute_losses,
    dump_flat_config,
    evaluate_model,
    gradient_l1,
    infer_video,
    parse_flat_config,
    train_loop,
    window_starts,
)
from layerstereo.warp import warp_horizontal

TINY = ModelConfig(context_width=0.125, shift_range=(-4, 4), feat=16, tex=8, c_z=16, disp_widths=(8, 16))


def outputs_from(aux, layered=None, final=None):
    layered = aux if layered is None else layered
    final = layered if final is None else final
    probs = torch.ones(*aux.shape[:2], 1, *aux.shape[-2:])
    return NetworkOutputs(aux, layered, final, probs, None)


def test_losses_identity_and_offset():
    gt = torch.rand(1, 2, 3, 8, 8)
    rep = compute_losses(outputs_from(gt.clone(), gt.clone(), gt.clone()), gt, TrainConfig())
    assert rep.as_dict() == {"l1_aux": 0, "l1_layered": 0, "l1_final": 0, "perceptual": 0, "total": 0}
    gt = torch.full((1, 1, 3, 8, 8), 0.5)
    pred = gt + 12.75 / 255
    rep = compute_losses(outputs_from(pred, pred.clone(), pred.clone()), gt, TrainConfig())
    assert rep.l1_aux == pytest.approx(12.75, abs=1e-4)
    assert rep.perceptual == pytest.approx(0.0, abs=1e-4)


def test_loss_weight_selection():
    gt = torch.rand(1, 2, 3, 8, 8)
    outs = outputs_from(torch.rand_like(gt), torch.rand_like(gt), torch.rand_like(gt))
    cfg = TrainConfig(lambda_aux=0, lambda_layered=0, lambda_perceptual=0)
    rep = compute_losses(outs, gt, cfg)
    assert rep.total == pytest.approx(rep.l1_final)
    full = compute_losses(outs, gt, TrainConfig())
    expected = full.l1_aux + full.l1_layered + full.l1_final + 0.1 * full.perceptual
    assert full.total == pytest.approx(expected, rel=1e-6)


def test_pass_through_outputs_are_supervised_once():
    gt = torch.rand(1, 2, 3, 8, 8)
    aux = torch.rand_like(gt)
    rep = compute_losses(outputs_from(aux), gt, TrainConfig(lambda_perceptual=0))
    assert rep.total == pytest.approx(rep.l1_aux, rel=1e-6)


def test_non_finite_loss_names_component():
    gt = torch.rand(1, 1, 3, 8, 8)
    bad = gt.clone()
    bad[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(LossError, match="l1_layered"):
        compute_losses(outputs_from(gt.clone(), bad, gt.clone()), gt, TrainConfig())
    with pytest.raises(LossError):
        compute_losses(outputs_from(gt[..., :4]), gt, TrainConfig())


def test_gradient_proxy_zero_only_for_equal_images():
    a = torch.rand(1, 3, 8, 8)
    assert gradient_l1(a, a) == 0
    assert gradient_l1(a, a + 0.3 * torch.rand_like(a)) > 0
    # a constant offset has identical gradients, which the L1 terms still catch
    assert float(gradient_l1(a, a + 1)) < 1e-6


def test_config_validation_lists_keys():
    with pytest.raises(ConfigError, match="crop_to"):
        TrainConfig(crop_to=100, resize_to=84).validate()
    with pytest.raises(ConfigError, match="lambda"):
        TrainConfig(lambda_aux=0, lambda_layered=0, lambda_final=0, lambda_perceptual=0).validate()
    with pytest.raises(ConfigError, match="bogus.*model.nope|model.nope.*bogus"):
        build_configs({"bogus": "1", "model.nope": "2", "seed": "3"})
    with pytest.raises(ConfigError, match="learning_rate"):
        build_configs({"learning_rate": "fast"})


def test_flat_config_round_trip():
    text = "# desk run\nlearning_rate = 1e-4\nmax_iters=10\ndeterministic = no\nmodel.d_lay = 5\nmodel.shift_range = -3,3\n"
    tcfg, mcfg = build_configs(parse_flat_config(text))
    assert tcfg.learning_rate == 1e-4 and tcfg.max_iters == 10 and tcfg.deterministic is False
    assert mcfg.d_lay == 5 and mcfg.shift_range == (-3, 3)
    again = build_configs(parse_flat_config(dump_flat_config(tcfg, mcfg)))
    assert again == (tcfg, mcfg)
    with pytest.raises(ConfigError):
        parse_flat_config("just words")


def test_augment_degenerate_and_deterministic():
    left, right = torch.rand(2, 4, 3, 64, 64)
    cfg = TrainConfig(resize_to=64, crop_to=64)
    a, b = augment_clip(left, right, cfg, seed=3)
    assert torch.equal(a, left) and torch.equal(b, right)
    cfg = TrainConfig(resize_to=84, crop_to=64)
    a1, b1 = augment_clip(left, right, cfg, seed=3)
    a2, b2 = augment_clip(left, right, cfg, seed=3)
    assert a1.shape == (4, 3, 64, 64) and torch.equal(a1, a2) and torch.equal(b1, b2)
    with pytest.raises(TrainingError):
        augment_clip(left, right, TrainConfig(resize_to=32, crop_to=48), seed=0)


@pytest.mark.parametrize("seed", range(4))
def test_augment_preserves_disparity_geometry(seed):
    scene = generate_synthetic_stereo(SyntheticSceneSpec(disparities=[1, 3, 6], canvas=(64, 64), length=2), seed)
    left, right = clip_to_tensor(scene.left).double(), clip_to_tensor(scene.right).double()
    disp = torch.from_numpy(scene.gt_disparity)
    occ = torch.from_numpy(scene.gt_occlusion).double()
    cfg = TrainConfig(resize_to=64, crop_to=40)
    cl, cr, cd, co = augment_clip(left, right, cfg, seed=seed, extras=(disp, occ))
    warped, valid = warp_horizontal(cl, cd)
    keep = (co == 0) & (valid > 0)
    assert keep.any()
    diff = (warped - cr).abs().amax(dim=1)
    assert diff[keep].max() == 0


def test_window_enumeration():
    assert window_starts(8) == [0]
    assert window_starts(5) == [0]
    assert window_starts(14) == [0, 6]
    assert window_starts(20) == [0, 6, 12]
    assert window_starts(16) == [0, 6, 8]
    for t in range(8, 40):
        starts = window_starts(t)
        covered = np.zeros(t, int)
        for s in starts:
            covered[s:s + 8] += 1
        assert covered.min() >= 1 and starts[-1] + 8 == t


class CountingModel(torch.nn.Module):
    """Emits the call index as a constant image so window ownership is visible."""

    def __init__(self):
        super().__init__()
        self.config = ModelConfig(shift_range=(-1, 1))
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        out = torch.full_like(x, self.calls / 10)
        probs = torch.zeros(*x.shape[:2], 3, *x.shape[-2:])
        probs[:, :, 1] = 1
        return NetworkOutputs(out, out, out, probs, None)


class EchoModel(CountingModel):
    def forward(self, x):
        probs = torch.zeros(*x.shape[:2], 3, *x.shape[-2:])
        probs[:, :, 1] = 1
        return NetworkOutputs(x, x, x, probs, None)


@pytest.mark.parametrize("t, owners", [(8, [1] * 8), (14, [1] * 6 + [2] * 8),
                                       (20, [1] * 6 + [2] * 6 + [3] * 8), (5, [1] * 5)])
def test_infer_later_window_wins(t, owners):
    out = infer_video(torch.rand(t, 3, 16, 16), CountingModel())
    assert out.shape[0] == t
    assert [round(float(f.mean()) * 10) for f in out] == owners


def test_infer_pads_space_and_keeps_sequence_type():
    seq = FrameSequence(np.random.default_rng(0).uniform(0, 255, (9, 18, 22, 3)))
    out, diag = infer_video(seq, EchoModel(), diagnostics=True)
    assert isinstance(out, FrameSequence) and out.shape == seq.shape
    np.testing.assert_allclose(out.frames, seq.frames, atol=1e-3)
    assert diag["argmax_disp"].shape == (9, 18, 22) and not diag["argmax_disp"].any()


def test_evaluate_model_identity_and_empty():
    seq = FrameSequence(np.random.default_rng(0).uniform(0, 255, (8, 16, 16, 3)).round())
    summary, reports = evaluate_model(EchoModel(), [(seq, seq)])
    assert summary.l1 < 1e-5 and summary.ssim == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(MetricError):
        evaluate_model(EchoModel(), [])


def tiny_data(length=4, size=32, seed=0):
    scene = generate_synthetic_stereo(SyntheticSceneSpec(disparities=[1, 3], canvas=(size, size), length=length), seed)
    return [(clip_to_tensor(scene.left), clip_to_tensor(scene.right))]


def tiny_cfg(**kw):
    base = dict(clip_length=4, resize_to=32, crop_to=32, max_iters=4, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_checkpoint_is_initialisation(tmp_path):
    torch.manual_seed(0)
    res = train_loop(tiny_data(), tiny_cfg(max_iters=0), TINY, out_dir=tmp_path)
    model, payload = load_checkpoint(tmp_path / "checkpoint.pt")
    assert payload["step"] == 0 and res.log == []
    torch.manual_seed(tiny_cfg().seed)
    from layerstereo.model import StereoNet

    fresh = StereoNet(TINY)
    for (k, a), b in zip(fresh.state_dict().items(), model.state_dict().values()):
        assert torch.equal(a, b), k


def test_learning_rate_zero_leaves_weights_unchanged():
    from layerstereo.model import StereoNet

    torch.manual_seed(0)
    model = StereoNet(TINY)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train_loop(tiny_data(), tiny_cfg(learning_rate=0.0, max_iters=2), model=model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_resume_matches_uninterrupted_run(tmp_path):
    data = tiny_data()
    full = train_loop(data, tiny_cfg(max_iters=6), TINY, out_dir=tmp_path / "a")
    train_loop(data, tiny_cfg(max_iters=3), TINY, out_dir=tmp_path / "b")
    resumed = train_loop(data, tiny_cfg(max_iters=6), out_dir=tmp_path / "b",
                         resume=tmp_path / "b" / "checkpoint.pt")
    assert resumed.step == 6
    for (k, a), b in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(a, b), k
    logged = [json.loads(line)["total"] for line in open(tmp_path / "b" / "metrics.jsonl")]
    assert logged == [r["total"] for r in full.log]


def test_divergence_keeps_last_good_checkpoint(tmp_path):
    calls = []

    def exploding(pred, gt):
        calls.append(1)
        value = gradient_l1(pred, gt)
        return value * float("nan") if len(calls) == 3 else value

    with pytest.raises(DivergenceError, match="perceptual"):
        train_loop(tiny_data(), tiny_cfg(max_iters=5, checkpoint_every=1), TINY,
                   out_dir=tmp_path, perceptual=exploding)
    _, payload = load_checkpoint(tmp_path / "checkpoint.pt")
    assert payload["step"] == 2
    assert len(open(tmp_path / "metrics.jsonl").read().splitlines()) == 2


def test_two_hundred_steps_reduce_loss(tmp_path):
    res = train_loop(tiny_data(), tiny_cfg(max_iters=200, learning_rate=3e-4), TINY, out_dir=tmp_path)
    totals = [r["total"] for r in res.log]
    assert len(totals) == 200 and totals[-1] < totals[0]
    assert (tmp_path / "checkpoint.pt").is_file()
    rec = json.loads(open(tmp_path / "metrics.jsonl").readline())
    assert set(rec) == {"step", "l1_aux", "l1_layered", "l1_final", "perceptual", "total", "wall_time"}
