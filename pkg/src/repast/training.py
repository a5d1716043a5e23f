"""Loss, optimizer, training loop, and evaluation at desk scale.

Training samples a few scenes per step, decodes a random subset of target
rays for each, and minimizes mean squared error. Every source of
randomness flows from one generator whose state is checkpointed, so an
interrupted run resumed from its checkpoint is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import model as M
from . import tensor as T
from .scenes import images_to_float, read_dataset
from .tensor import NumericsError, Tape, Tensor

__all__ = [
    "TrainConfig",
    "TrainState",
    "evaluate",
    "init_train_state",
    "learning_rate",
    "load_params",
    "load_train_checkpoint",
    "mse_loss",
    "opt_step",
    "save_model_checkpoint",
    "save_train_checkpoint",
    "train",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    steps: int
    train_path: str
    eval_path: str
    checkpoint_path: str
    log_path: str
    batch_scenes: int = 2
    rays_per_scene: int = 128
    lr_warmup: int = 100
    lr_peak: float = 2e-3
    lr_decay: float = 0.1  # final lr as a fraction of peak
    seed: int = 0
    eval_interval: int = 500
    eval_examples: int = 8  # cap on eval-set scenes scored per eval

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("batch_scenes", "rays_per_scene", "lr_warmup", "eval_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps and self.eval_interval > self.steps:
            raise ValueError("eval_interval must not exceed steps")
        if not self.lr_peak > 0:
            raise ValueError("lr_peak must be positive")


@dataclass
class TrainState:
    params: dict  # name -> Tensor
    m: dict = field(default_factory=dict)  # first moments, name -> ndarray
    v: dict = field(default_factory=dict)  # second moments, name -> ndarray
    step: int = 0
    rng: np.random.Generator | None = None


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all components (scalar tensor)."""
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tuple(pred.shape) != tuple(target_arr.shape):
        raise T.ShapeError(f"loss shapes differ: {pred.shape} vs {target_arr.shape}")
    d = T.sub(pred, Tensor(np.asarray(target_arr, dtype=pred.data.dtype)))
    return T.mean(T.mul(d, d))


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak, then cosine decay to peak * lr_decay."""
    if step < cfg.lr_warmup:
        return cfg.lr_peak * (step + 1) / cfg.lr_warmup
    span = max(1, cfg.steps - cfg.lr_warmup)
    progress = min(1.0, (step - cfg.lr_warmup) / span)
    floor = cfg.lr_peak * cfg.lr_decay
    return floor + (cfg.lr_peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def init_train_state(model_cfg: M.ModelConfig, seed: int) -> TrainState:
    params = M.init_params(model_cfg, seed)
    m = {k: np.zeros_like(p.data) for k, p in params.items()}
    v = {k: np.zeros_like(p.data) for k, p in params.items()}
    return TrainState(params=params, m=m, v=v, step=0,
                      rng=np.random.default_rng(np.random.SeedSequence([seed, 0xD7])))


def opt_step(state: TrainState, grads: dict, lr: float,
             beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
             eps: float = ADAM_EPS) -> TrainState:
    """One bias-corrected adaptive-moment update; deterministic given state."""
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params = {}
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r} "
                                f"at step {t}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        mhat = state.m[name] / c1
        vhat = state.v[name] / c2
        data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        new_params[name] = Tensor(data, requires_grad=True, dtype=p.data.dtype)
    state.params = new_params
    state.step = t
    return state


def _batch_loss(examples, picks, model_cfg, params):
    """Mean MSE over sampled scenes and rays; forward pass only."""
    total = None
    for ex_idx, view_idx, pix in picks:
        ex = examples[ex_idx]
        imgs = images_to_float(ex.images, T.default_dtype())
        slsr = M.encode(imgs, ex.cameras, ex.intrinsics, model_cfg, params)
        cam = ex.target_cameras[view_idx]
        o, d = M.pixel_rays_grid(cam, ex.intrinsics)
        pred = M.decode(slsr, o[pix], d[pix], model_cfg, params)
        truth = images_to_float(ex.target_images[view_idx], T.default_dtype())
        truth = truth.reshape(-1, 3)[pix]
        loss = mse_loss(pred, truth)
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, 1.0 / len(picks))


def _draw_picks(rng, n_examples, n_targets, n_pixels, cfg: TrainConfig):
    picks = []
    for _ in range(cfg.batch_scenes):
        ex_idx = int(rng.integers(0, n_examples))
        view_idx = int(rng.integers(0, n_targets))
        pix = rng.integers(0, n_pixels, size=cfg.rays_per_scene)
        picks.append((ex_idx, view_idx, pix))
    return picks


def evaluate(params: dict, model_cfg: M.ModelConfig, examples,
             max_examples: int | None = None, oracle_self: bool = False) -> dict:
    """Mean PSNR/SSIM over all target views of the given scenes.

    ``oracle_self`` scores the ground-truth images against themselves (a
    sanity mode used by the CLI; PSNR is capped, SSIM is exactly 1).
    """
    if len(examples) == 0:
        raise ValueError("cannot evaluate on an empty example set")
    if max_examples is not None:
        examples = examples[:max_examples]
    psnrs, ssims = [], []
    for ex in examples:
        truth = images_to_float(ex.target_images, np.float64)
        if oracle_self:
            pred = truth
        else:
            pred = M.forward(ex, model_cfg, params)
        for view in range(ex.n_target):
            psnrs.append(metrics.psnr(pred[view], truth[view]))
            ssims.append(metrics.ssim(pred[view], truth[view]))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def _append_log(path, line: str) -> None:
    if path:
        with open(path, "a") as f:
            f.write(line + "\n")


def train(cfg: TrainConfig, model_cfg: M.ModelConfig,
          resume_from: str | None = None, quiet: bool = True):
    """Run the training loop; returns (TrainState, history).

    History records per-step losses and per-eval metric rows; the metrics
    log file receives one ``step psnr ssim loss`` line per evaluation and
    a checkpoint is written at every evaluation point.
    """
    train_examples = read_dataset(cfg.train_path)
    eval_examples = read_dataset(cfg.eval_path)
    if not train_examples:
        raise ValueError(f"{cfg.train_path}: training dataset is empty")
    if not eval_examples:
        raise ValueError(f"{cfg.eval_path}: eval dataset is empty")

    if resume_from is not None:
        state = load_train_checkpoint(resume_from, expect=model_cfg)
    else:
        state = init_train_state(model_cfg, cfg.seed)

    n_targets = train_examples[0].n_target
    h, w = train_examples[0].resolution
    history = {"loss": [], "evals": [], "probe_initial": None, "probe_final": None}

    probe = eval_examples[:min(2, len(eval_examples))]
    history["probe_initial"] = _probe_mse(probe, model_cfg, state.params)

    while state.step < cfg.steps:
        picks = _draw_picks(state.rng, len(train_examples), n_targets, h * w, cfg)
        with Tape() as tape:
            loss = _batch_loss(train_examples, picks, model_cfg, state.params)
        tape.backward(loss)
        grads = {name: p.grad for name, p in state.params.items()}
        lr = learning_rate(cfg, state.step)
        state = opt_step(state, grads, lr)
        loss_val = float(loss.data)
        history["loss"].append(loss_val)
        if state.step % cfg.eval_interval == 0 or state.step == cfg.steps:
            scores = evaluate(state.params, model_cfg, eval_examples,
                              max_examples=cfg.eval_examples)
            row = {"step": state.step, "loss": loss_val, **scores}
            history["evals"].append(row)
            _append_log(cfg.log_path,
                        f"{state.step} {scores['psnr']:.4f} {scores['ssim']:.6f} "
                        f"{loss_val:.8f}")
            if cfg.checkpoint_path:
                save_train_checkpoint(cfg.checkpoint_path, model_cfg, state)
            if not quiet:
                print(f"step {state.step}: loss {loss_val:.6f} "
                      f"psnr {scores['psnr']:.3f} ssim {scores['ssim']:.4f}")

    history["probe_final"] = _probe_mse(probe, model_cfg, state.params)
    return state, history


def _probe_mse(probe_examples, model_cfg, params) -> float:
    """Full-image MSE on a small fixed probe set (no sampling noise)."""
    errs = []
    for ex in probe_examples:
        pred = M.forward(ex, model_cfg, params)
        truth = images_to_float(ex.target_images, np.float64)
        errs.append(float(np.mean((pred.astype(np.float64) - truth) ** 2)))
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# train-state persistence (rides on the model checkpoint container)


def save_train_checkpoint(path, model_cfg: M.ModelConfig, state: TrainState) -> None:
    tensors = {f"param.{k}": p.data for k, p in state.params.items()}
    tensors.update({f"opt_m.{k}": v for k, v in state.m.items()})
    tensors.update({f"opt_v.{k}": v for k, v in state.v.items()})
    tensors["train.step"] = np.array([state.step], dtype=np.int64)
    rng_state = json.dumps(state.rng.bit_generator.state).encode("utf-8")
    tensors["train.rng_state"] = np.frombuffer(rng_state, dtype=np.uint8).copy()
    M.save_checkpoint(path, model_cfg, tensors)


def save_model_checkpoint(path, model_cfg: M.ModelConfig, params: dict) -> None:
    """Parameters only (no optimizer state); loadable by inference commands."""
    M.save_checkpoint(path, model_cfg, {f"param.{k}": p.data for k, p in params.items()})


def load_params(path, expect: M.ModelConfig | None = None):
    """Load (config, params) from either flavor of checkpoint."""
    cfg, tensors = M.load_checkpoint(path, expect)
    params = {k[len("param."):]: Tensor(v, requires_grad=True, dtype=v.dtype)
              for k, v in tensors.items() if k.startswith("param.")}
    missing = set(M.param_shapes(cfg)) - set(params)
    if missing:
        raise M.CheckpointError(f"{path}: missing parameters {sorted(missing)[:4]}...")
    return cfg, params


def load_train_checkpoint(path, expect: M.ModelConfig | None = None) -> TrainState:
    cfg, tensors = M.load_checkpoint(path, expect)
    params, m, v = {}, {}, {}
    for key, arr in tensors.items():
        if key.startswith("param."):
            params[key[6:]] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        elif key.startswith("opt_m."):
            m[key[6:]] = arr
        elif key.startswith("opt_v."):
            v[key[6:]] = arr
    if "train.step" not in tensors or "train.rng_state" not in tensors:
        raise M.CheckpointError(f"{path}: not a training checkpoint (no optimizer state)")
    step = int(tensors["train.step"][0])
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(tensors["train.rng_state"].tobytes().decode("utf-8"))
    return TrainState(params=params, m=m, v=v, step=step, rng=rng)
