"""Losses, clip augmentation, the optimisation loop, and sliding-window inference."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datakit import FrameSequence
from .metrics import MetricError, QualityReport, aggregate_reports, evaluate_pair
from .model import ModelConfig, StereoNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class LossError(TrainingError):
    pass


class DivergenceError(TrainingError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    clip_length: int = 8
    resize_to: int = 84
    crop_to: int = 64
    loss_low: float = -127.5
    loss_high: float = 127.5
    lambda_aux: float = 1.0
    lambda_layered: float = 1.0
    lambda_final: float = 1.0
    lambda_perceptual: float = 0.1
    max_iters: int = 200
    checkpoint_every: int = 0
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        bad = []
        if self.crop_to > self.resize_to:
            bad.append("crop_to")
        lambdas = ("lambda_aux", "lambda_layered", "lambda_final", "lambda_perceptual")
        for name in lambdas:
            if getattr(self, name) < 0:
                bad.append(name)
        if all(getattr(self, n) == 0 for n in lambdas):
            bad.append("lambda_*")
        if self.clip_length < 1:
            bad.append("clip_length")
        if self.learning_rate < 0:
            bad.append("learning_rate")
        if self.max_iters < 0:
            bad.append("max_iters")
        if self.loss_high <= self.loss_low:
            bad.append("loss_high")
        if bad:
            raise ConfigError(f"invalid training config keys: {', '.join(bad)}")
        return self

    @property
    def loss_value_range(self):
        return (self.loss_low, self.loss_high)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------- flat config files


def _coerce(text, typ):
    if typ in (bool, "bool"):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ in (tuple, "tuple"):
        return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())
    return typ(text)


def _field_types(cls):
    out = {}
    for f in fields(cls):
        t = f.type if not isinstance(f.type, str) else {"int": int, "float": float, "bool": bool,
                                                        "str": str, "tuple": tuple}[f.type]
        out[f.name] = t
    return out


def parse_flat_config(text):
    """``key = value`` lines (``#`` comments) -> dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_configs(raw, overrides=None):
    """Split a flat key/value mapping into ``(TrainConfig, ModelConfig)``.

    Keys are ``TrainConfig`` field names or ``model.<ModelConfig field>``.
    Unknown keys and unparsable values are reported together.
    """
    merged = dict(raw)
    merged.update(overrides or {})
    tkw, mkw, bad = {}, {}, []
    ttypes, mtypes = _field_types(TrainConfig), _field_types(ModelConfig)
    for key, value in merged.items():
        target, types, name = (mkw, mtypes, key[6:]) if key.startswith("model.") else (tkw, ttypes, key)
        if name not in types:
            bad.append(key)
            continue
        try:
            target[name] = value if not isinstance(value, str) else _coerce(value, types[name])
        except ValueError:
            bad.append(key)
    if bad:
        raise ConfigError(f"invalid config keys: {', '.join(sorted(bad))}")
    try:
        mcfg = ModelConfig(**mkw)
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from None
    return TrainConfig(**tkw).validate(), mcfg


def dump_flat_config(tcfg, mcfg):
    lines = [f"{k} = {v}" for k, v in tcfg.to_dict().items()]
    for k, v in mcfg.to_dict().items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"model.{k} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- losses


@dataclass
class LossReport:
    l1_aux: float
    l1_layered: float
    l1_final: float
    perceptual: float
    total: float
    total_tensor: Optional[torch.Tensor] = None

    def as_dict(self):
        return {k: getattr(self, k) for k in ("l1_aux", "l1_layered", "l1_final", "perceptual", "total")}


def gradient_l1(pred, gt):
    """Default perceptual proxy: L1 between horizontal and vertical image gradients."""
    dxp, dxg = pred[..., :, 1:] - pred[..., :, :-1], gt[..., :, 1:] - gt[..., :, :-1]
    dyp, dyg = pred[..., 1:, :] - pred[..., :-1, :], gt[..., 1:, :] - gt[..., :-1, :]
    return (dxp - dxg).abs().mean() + (dyp - dyg).abs().mean()


def to_loss_range(x, cfg):
    """[0, 1] images -> the configured loss range."""
    return x * (cfg.loss_high - cfg.loss_low) + cfg.loss_low


def compute_losses(outputs, gt_right, cfg, perceptual=gradient_l1):
    """Weighted L1 on the implicit, layered and final predictions plus a
    perceptual term on the final prediction. Images are ``[0, 1]`` tensors.

    A prediction that is the same tensor as an earlier one (an ablated stage
    passing its input through) is only supervised once.
    """
    gt = to_loss_range(gt_right, cfg)
    terms = {}
    seen = []
    for name, pred, weight in (
        ("l1_aux", outputs.aux_right, cfg.lambda_aux),
        ("l1_layered", outputs.layered_right, cfg.lambda_layered),
        ("l1_final", outputs.final_right, cfg.lambda_final),
    ):
        if pred.shape != gt_right.shape:
            raise LossError(f"{name}: prediction {tuple(pred.shape)} vs target {tuple(gt_right.shape)}")
        dup = any(pred is s for s in seen)
        seen.append(pred)
        value = (to_loss_range(pred, cfg) - gt).abs().mean()
        terms[name] = (value, 0.0 if dup else weight)
    pval = perceptual(to_loss_range(outputs.final_right, cfg), gt)
    terms["perceptual"] = (pval, cfg.lambda_perceptual)
    total = sum(w * v for v, w in terms.values())
    for name, (v, _) in terms.items():
        if not torch.isfinite(v):
            raise LossError(f"non-finite loss component {name}")
    if not torch.isfinite(total):
        raise LossError("non-finite total loss")
    vals = {k: float(v.detach()) for k, (v, _) in terms.items()}
    return LossReport(total=float(total.detach()), total_tensor=total, **vals)


# --------------------------------------------------------------------------- augmentation


def augment_clip(left, right, cfg, seed, extras=()):
    """Resize both views to ``resize_to`` and take one random ``crop_to`` crop
    shared by every frame and both views.

    ``left``/``right`` are ``(T, C, H, W)`` tensors. ``extras`` are extra
    ``(T, H, W)`` per-pixel maps (e.g. ground truth) cropped identically; they
    are only resized when the frame size changes (nearest neighbour).
    """
    if left.shape != right.shape:
        raise TrainingError("left and right clips differ in shape")
    size = cfg.resize_to
    if cfg.crop_to > size:
        raise TrainingError(f"crop {cfg.crop_to} larger than resized frame {size}")
    h, w = left.shape[-2:]
    if (h, w) != (size, size):
        left = F.interpolate(left, size=(size, size), mode="bilinear", align_corners=False)
        right = F.interpolate(right, size=(size, size), mode="bilinear", align_corners=False)
        extras = tuple(
            F.interpolate(e.unsqueeze(1).float(), size=(size, size), mode="nearest").squeeze(1) for e in extras
        )
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, size - cfg.crop_to + 1))
    lft = int(rng.integers(0, size - cfg.crop_to + 1))
    sl = (Ellipsis, slice(top, top + cfg.crop_to), slice(lft, lft + cfg.crop_to))
    out = (left[sl], right[sl])
    if extras:
        out = out + tuple(e[sl] for e in extras)
    return out


# --------------------------------------------------------------------------- training loop


def seed_everything(seed, deterministic=True):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def make_optimizer(model, cfg):
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


def clip_to_tensor(seq):
    """FrameSequence -> (T, C, H, W) float32 tensor in [0, 1]."""
    if isinstance(seq, torch.Tensor):
        return seq
    return torch.from_numpy(np.ascontiguousarray(seq.unit().transpose(0, 3, 1, 2)))


def tensor_to_clip(x, value_range=(0.0, 255.0)):
    arr = x.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return FrameSequence.from_unit(arr, value_range)


@dataclass
class TrainResult:
    model: StereoNet
    optimizer: torch.optim.Optimizer
    log: list
    step: int


def _step_rng_seed(seed, step):
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def train_loop(dataset, cfg, model_cfg=None, out_dir=None, resume=None, model=None,
               perceptual=gradient_l1, on_step=None):
    """Optimise a model on ``dataset`` (a sequence of ``(left, right)`` clips).

    Clip choice and crop at step ``k`` depend only on ``(seed, k)``, so a run
    resumed from a checkpoint at step ``k`` matches an uninterrupted run.
    Writes ``metrics.jsonl`` and checkpoints into ``out_dir`` when given.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    seed_everything(cfg.seed, cfg.deterministic)
    start = 0
    if resume is not None:
        model, payload = load_checkpoint(resume)
        optimizer = make_optimizer(model, cfg)
        if "optimizer" in payload:
            optimizer.load_state_dict(payload["optimizer"])
        start = payload["step"]
    else:
        if model is None:
            model = StereoNet(model_cfg or ModelConfig())
        optimizer = make_optimizer(model, cfg)
    model.train()

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "a")
        last_good = out_dir / "checkpoint.pt"
        if resume is None:
            save_checkpoint(last_good, model, optimizer, step=0)

    records = []
    t0 = time.time()
    try:
        for step in range(start, cfg.max_iters):
            rng = np.random.default_rng(_step_rng_seed(cfg.seed, step))
            left, right = dataset[int(rng.integers(0, len(dataset)))]
            left, right = clip_to_tensor(left), clip_to_tensor(right)
            left, right = augment_clip(left, right, cfg, seed=int(rng.integers(0, 2**31)))
            outputs = model(left.unsqueeze(0))
            try:
                report = compute_losses(outputs, right.unsqueeze(0), cfg, perceptual)
            except LossError as exc:
                msg = f"diverged at step {step}: {exc}"
                if out_dir is not None:
                    msg += f"; last good checkpoint kept at {last_good}"
                raise DivergenceError(msg) from None
            optimizer.zero_grad(set_to_none=True)
            report.total_tensor.backward()
            optimizer.step()
            rec = {"step": step, **report.as_dict(), "wall_time": round(time.time() - t0, 3)}
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(step, report, model)
            done = step + 1
            if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(last_good, model, optimizer, step=done)
    finally:
        if log_fh is not None:
            log_fh.close()
    end = max(start, cfg.max_iters)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.pt", model, optimizer, step=end)
    return TrainResult(model, optimizer, records, end)


# --------------------------------------------------------------------------- inference


def window_starts(n_frames, clip_length=8, reference=2):
    """Window origins for sliding-window inference.

    Windows advance by ``clip_length - reference`` so consecutive windows share
    ``reference`` frames; a final window is aligned to the clip end if needed.
    """
    if n_frames <= clip_length:
        return [0]
    step = clip_length - reference
    starts = list(range(0, n_frames - clip_length + 1, step))
    if starts[-1] + clip_length < n_frames:
        starts.append(n_frames - clip_length)
    return starts


def _pad_to_multiple(x, m=4):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


@torch.no_grad()
def infer_video(left, model, clip_length=8, reference=2, diagnostics=False):
    """Right view for a whole clip via overlapping windows (later window wins).

    ``left`` is a FrameSequence or a ``(T, C, H, W)`` [0, 1] tensor; the result
    has the same type and length. With ``diagnostics`` also returns a dict of
    per-frame ``layered_disp`` (T, D_lay, H, W) and ``argmax_disp`` (T, H, W)
    arrays (the disparity of the most probable shifted copy).
    """
    as_seq = isinstance(left, FrameSequence)
    x = clip_to_tensor(left)
    n = x.shape[0]
    padded = x
    if n < clip_length:
        padded = torch.cat([x, x[-1:].expand(clip_length - n, *x.shape[1:])], dim=0)
    padded, (h, w) = _pad_to_multiple(padded)
    was_training = model.training
    model.eval()
    out = torch.zeros_like(padded)
    t_all = padded.shape[0]
    disparity_of_shift = -torch.tensor(model.config.shifts, dtype=torch.float32)
    argmax = torch.zeros(t_all, *padded.shape[-2:])
    layered = None
    for s in window_starts(t_all, clip_length, reference):
        o = model(padded[s:s + clip_length].unsqueeze(0))
        out[s:s + clip_length] = o.final_right[0]
        if diagnostics:
            argmax[s:s + clip_length] = disparity_of_shift[o.implicit_probs[0].argmax(dim=1)]
            if o.layered_disp is not None:
                if layered is None:
                    layered = torch.zeros(t_all, *o.layered_disp.shape[2:])
                layered[s:s + clip_length] = o.layered_disp[0]
    model.train(was_training)
    out = out[:n, :, :h, :w].clamp(0, 1)
    result = tensor_to_clip(out, left.value_range) if as_seq else out
    if not diagnostics:
        return result
    diag = {"argmax_disp": argmax[:n, :h, :w].numpy()}
    if layered is not None:
        diag["layered_disp"] = layered[:n, :, :h, :w].numpy()
    return result, diag


def evaluate_model(model, eval_set, clip_length=8):
    """Run ``infer_video`` on each ``(left, right)`` pair and aggregate metrics."""
    eval_set = list(eval_set)
    if not eval_set:
        raise MetricError("empty evaluation set")
    reports = []
    for left, right in eval_set:
        pred = infer_video(left, model, clip_length)
        reports.append(evaluate_pair(pred, right))
    return aggregate_reports(reports), reports
