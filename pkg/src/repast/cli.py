"""Command-line entry point.

Subcommands: ``gen-data`` (procedural dataset files), ``train``, ``render``
(novel view to PNG), ``eval`` (PSNR/SSIM table), ``invariance-check``
(frame / view-order invariance report), and ``cycle`` (render one target
view under every cyclic permutation of the input views).

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines;
explicit flags take precedence over the file, unknown keys are rejected,
and each run echoes its fully resolved configuration. Exit codes: 0 ok,
1 validation or invariance failure, 2 I/O error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import training
from .geometry import look_at, pixel_rays_grid, pose_compose, random_rigid
from .metrics import diff_report
from .model import CheckpointError, ModelConfig
from .scenes import (SCENE_CENTER, DatasetFormatError, GeneratorConfig,
                     images_to_float, make_example, read_dataset, write_dataset)
from .tensor import NumericsError, set_default_dtype, set_deterministic

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; our contract reserves 2 for I/O errors
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


@dataclass(frozen=True)
class _Opt:
    flag: str
    type: object = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    is_flag: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in str(text).split(","))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_COMMON = [
    _Opt("--config", str, None, "flat key = value config file; flags override it"),
    _Opt("--seed", int, 0, "root seed for all randomized behavior"),
    _Opt("--deterministic", is_flag=True, default=False,
         help="pin reduction order / rngs for bit-identical reruns"),
    _Opt("--precision", str, "f32", "scalar precision", choices=("f32", "f64")),
]

_MODEL_OPTS = [
    _Opt("--variant", str, "repast", "model variant",
         choices=("srt", "repast", "repast-b")),
    _Opt("--d-model", int, 128, "token width"),
    _Opt("--heads", int, 4, "attention heads"),
    _Opt("--d-head", int, 32, "per-head width"),
    _Opt("--enc-blocks", int, 3, "encoder depth"),
    _Opt("--dec-blocks", int, 2, "decoder depth"),
    _Opt("--mlp-hidden", int, 256, "block MLP width"),
    _Opt("--cnn-channels", _int_list, (32, 64, 128), "CNN channels per stage"),
    _Opt("--cnn-strides", _int_list, (2, 2, 2), "CNN strides per stage"),
    _Opt("--freqs-origin", int, 6, "ray-origin encoding frequencies"),
    _Opt("--freqs-direction", int, 6, "ray-direction encoding frequencies"),
]

_SCENE_OPTS = [
    _Opt("--n-input", int, 5, "input views per scene"),
    _Opt("--n-target", int, 3, "target views per scene"),
    _Opt("--res", int, 32, "image resolution"),
    _Opt("--min-objects", int, 2, "minimum objects per scene"),
    _Opt("--max-objects", int, 4, "maximum objects per scene"),
]

_COMMANDS: dict[str, dict] = {
    "gen-data": {
        "help": "generate a procedural multi-view dataset file",
        "opts": _COMMON + _SCENE_OPTS + [
            _Opt("--scenes", int, 16, "number of scenes"),
            _Opt("--seed-start", int, 0, "first scene seed"),
            _Opt("--out", str, None, "output dataset path (required)"),
        ],
    },
    "train": {
        "help": "train a model on a dataset",
        "opts": _COMMON + _MODEL_OPTS + [
            _Opt("--data", str, None, "training dataset path (required)"),
            _Opt("--eval-data", str, None, "eval dataset path (required)"),
            _Opt("--steps", int, 2000, "optimization steps"),
            _Opt("--batch-scenes", int, 2, "scenes per step"),
            _Opt("--rays", int, 128, "target rays per scene per step"),
            _Opt("--eval-interval", int, 500, "steps between evals/checkpoints"),
            _Opt("--eval-examples", int, 8, "eval scenes scored per eval"),
            _Opt("--lr-peak", float, 2e-3, "peak learning rate"),
            _Opt("--lr-warmup", int, 100, "linear warmup steps"),
            _Opt("--lr-decay", float, 0.1, "final lr as fraction of peak"),
            _Opt("--out", str, None, "checkpoint path (required)"),
            _Opt("--log", str, None, "metrics log path (default: <out>.log)"),
            _Opt("--resume", str, None, "resume from a training checkpoint"),
        ],
    },
    "render": {
        "help": "render a novel view from a checkpoint to PNG",
        "opts": _COMMON + _SCENE_OPTS + [
            _Opt("--checkpoint", str, None, "model checkpoint (required)"),
            _Opt("--scene-seed", int, 0, "scene to encode"),
            _Opt("--target-view", int, None, "render this generated target view"),
            _Opt("--azimuth", float, None, "camera azimuth in degrees"),
            _Opt("--elevation", float, 35.0, "camera elevation in degrees"),
            _Opt("--radius", float, 3.7, "camera distance"),
            _Opt("--ref-index", int, 0, "reference camera (srt variant only)"),
            _Opt("--out", str, None, "output PNG path (required)"),
        ],
    },
    "eval": {
        "help": "evaluate a checkpoint on a dataset (prints 'variant psnr ssim')",
        "opts": _COMMON + [
            _Opt("--checkpoint", str, None, "model checkpoint"),
            _Opt("--data", str, None, "dataset path (required)"),
            _Opt("--max-examples", int, None, "cap on scenes scored"),
            _Opt("--oracle-self-test", is_flag=True, default=False,
                 help="score ground-truth images against themselves"),
        ],
    },
    "invariance-check": {
        "help": "check frame/order invariance of a model (random weights allowed)",
        "opts": _COMMON + _MODEL_OPTS + [
            _Opt("--checkpoint", str, None, "optional checkpoint (else random weights)"),
            _Opt("--trials", int, 20, "number of random trials"),
            _Opt("--tolerance", float, None,
                 "max-abs RGB tolerance (default 1e-4 f32, 1e-8 f64)"),
            _Opt("--n-input", int, 5, "input views per trial scene"),
            _Opt("--res", int, 16, "trial image resolution"),
            _Opt("--rays", int, 8, "query rays compared per trial"),
        ],
    },
    "cycle": {
        "help": "render one target view under every cyclic input permutation",
        "opts": _COMMON + _SCENE_OPTS + [
            _Opt("--checkpoint", str, None, "model checkpoint (required)"),
            _Opt("--scene-seed", int, 0, "scene to encode"),
            _Opt("--target-view", int, 0, "which generated target view to render"),
            _Opt("--out-dir", str, None, "output directory (required)"),
        ],
    },
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="repast",
                     description="desk-scale novel view synthesis with "
                                 "relative pose attention")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in _COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"])
        for opt in spec["opts"]:
            if opt.is_flag:
                p.add_argument(opt.flag, action="store_const", const=True,
                               default=None, help=opt.help)
            else:
                kwargs = {"type": opt.type, "default": None, "help": opt.help}
                if opt.choices:
                    kwargs["choices"] = opt.choices
                p.add_argument(opt.flag, **kwargs)
    return parser


def _read_config_file(path: str) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(ns: argparse.Namespace, command: str) -> dict:
    opts = {o.dest: o for o in _COMMANDS[command]["opts"]}
    resolved = {dest: o.default for dest, o in opts.items()}
    config_path = getattr(ns, "config", None)
    if config_path:
        for key, raw in _read_config_file(config_path).items():
            if key not in opts or key == "config":
                raise ValueError(f"unknown config key {key!r} for command {command!r}")
            o = opts[key]
            value = _bool(raw) if o.is_flag else o.type(raw)
            if o.choices and value not in o.choices:
                raise ValueError(f"config key {key!r}: {value!r} not in {o.choices}")
            resolved[key] = value
    for dest in opts:
        cli_val = getattr(ns, dest)
        if cli_val is not None:
            resolved[dest] = cli_val
    print(f"resolved config [{command}]")
    for dest in sorted(resolved):
        if dest != "config":
            print(f"  {dest} = {resolved[dest]}")
    return resolved


def _apply_runtime(cfg: dict) -> None:
    set_deterministic(cfg.get("deterministic", False))
    set_default_dtype("float64" if cfg.get("precision") == "f64" else "float32")


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is None:
            raise ValueError(f"--{key.replace('_', '-')} is required")


def _model_config(cfg: dict) -> ModelConfig:
    from .geometry import PosEncConfig

    return ModelConfig(
        variant=cfg["variant"],
        d_model=cfg["d_model"],
        n_heads=cfg["heads"],
        d_head=cfg["d_head"],
        n_enc_blocks=cfg["enc_blocks"],
        n_dec_blocks=cfg["dec_blocks"],
        cnn_channels=tuple(cfg["cnn_channels"]),
        cnn_strides=tuple(cfg["cnn_strides"]),
        mlp_hidden=cfg["mlp_hidden"],
        posenc=PosEncConfig(num_freqs_origin=cfg["freqs_origin"],
                            num_freqs_direction=cfg["freqs_direction"]),
    )


def _gen_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(min_objects=cfg["min_objects"],
                           max_objects=cfg["max_objects"])


def _save_png(path: str, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    tmp = f"{path}.tmp.{os.getpid()}"
    Image.fromarray(arr, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(cfg: dict) -> int:
    _require(cfg, "out")
    gen = _gen_config(cfg)
    examples = [make_example(cfg["seed_start"] + i, cfg["n_input"],
                             cfg["n_target"], cfg["res"], gen)
                for i in range(cfg["scenes"])]
    write_dataset(cfg["out"], examples)
    print(f"wrote {len(examples)} scenes to {cfg['out']}")
    return 0


def _cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "eval_data", "out")
    model_cfg = _model_config(cfg)
    log_path = cfg["log"] or f"{cfg['out']}.log"
    tcfg = training.TrainConfig(
        steps=cfg["steps"], train_path=cfg["data"], eval_path=cfg["eval_data"],
        checkpoint_path=cfg["out"], log_path=log_path,
        batch_scenes=cfg["batch_scenes"], rays_per_scene=cfg["rays"],
        lr_warmup=cfg["lr_warmup"], lr_peak=cfg["lr_peak"],
        lr_decay=cfg["lr_decay"], seed=cfg["seed"],
        eval_interval=cfg["eval_interval"], eval_examples=cfg["eval_examples"])
    state, history = training.train(tcfg, model_cfg, resume_from=cfg["resume"],
                                    quiet=False)
    if state.step == 0:
        training.save_train_checkpoint(cfg["out"], model_cfg, state)
    print(f"finished at step {state.step}; checkpoint {cfg['out']}; log {log_path}")
    return 0


def _load_for_inference(cfg: dict):
    if cfg.get("checkpoint"):
        model_cfg, params = training.load_params(cfg["checkpoint"])
    else:
        model_cfg = _model_config(cfg)
        params = M.init_params(model_cfg, cfg["seed"])
    return model_cfg, params


def _cmd_render(cfg: dict) -> int:
    _require(cfg, "checkpoint", "out")
    model_cfg, params = training.load_params(cfg["checkpoint"])
    ex = make_example(cfg["scene_seed"], cfg["n_input"], cfg["n_target"],
                      cfg["res"], _gen_config(cfg))
    k = ex.intrinsics
    if cfg["target_view"] is not None:
        cam = ex.target_cameras[cfg["target_view"]]
    elif cfg["azimuth"] is not None:
        az = math.radians(cfg["azimuth"])
        el = math.radians(cfg["elevation"])
        r = cfg["radius"]
        pos = np.array([r * math.cos(el) * math.cos(az),
                        r * math.cos(el) * math.sin(az),
                        r * math.sin(el)])
        cam = look_at(pos, SCENE_CENTER)
    else:
        raise ValueError("provide --target-view or --azimuth")
    imgs = images_to_float(ex.images, np.float32)
    slsr = M.encode(imgs, ex.cameras, k, model_cfg, params,
                    ref_index=cfg["ref_index"])
    o, d = pixel_rays_grid(cam, k)
    rows = [M.decode(slsr, o[i:i + 4096], d[i:i + 4096], model_cfg, params,
                     ref_index=cfg["ref_index"]).data
            for i in range(0, len(o), 4096)]
    image = np.concatenate(rows).reshape(k.height, k.width, 3)
    _save_png(cfg["out"], image)
    print(f"wrote {k.width}x{k.height} render to {cfg['out']}")
    return 0


def _cmd_eval(cfg: dict) -> int:
    _require(cfg, "data")
    examples = read_dataset(cfg["data"])
    if cfg["oracle_self_test"]:
        scores = training.evaluate({}, None, examples,
                                   max_examples=cfg["max_examples"], oracle_self=True)
        print(f"oracle {scores['psnr']:.2f} {scores['ssim']:.3f}")
        return 0
    _require(cfg, "checkpoint")
    model_cfg, params = training.load_params(cfg["checkpoint"])
    scores = training.evaluate(params, model_cfg, examples,
                               max_examples=cfg["max_examples"])
    print(f"{model_cfg.variant} {scores['psnr']:.2f} {scores['ssim']:.3f}")
    return 0


def _decode_rays(slsr, origins, dirs, model_cfg, params, ref_index=0):
    return M.decode(slsr, origins, dirs, model_cfg, params, ref_index=ref_index).data


def _cmd_invariance_check(cfg: dict) -> int:
    model_cfg, params = _load_for_inference(cfg)
    tol = cfg["tolerance"]
    if tol is None:
        tol = 1e-8 if cfg["precision"] == "f64" else 1e-4
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0x1C]))
    n = cfg["n_input"]
    is_repa = model_cfg.variant in ("repast", "repast-b")
    worst = {"cyclic": 0.0, "rigid": 0.0, "reference": 0.0}
    ref_fail = 0
    for trial in range(cfg["trials"]):
        ex = make_example(cfg["seed"] + trial, n, 1, cfg["res"])
        imgs = images_to_float(ex.images, np.float64).astype(np.float32)
        k = ex.intrinsics
        o, d = pixel_rays_grid(ex.target_cameras[0], k)
        pick = rng.integers(0, len(o), size=cfg["rays"])
        o, d = o[pick], d[pick]
        base_slsr = M.encode(imgs, ex.cameras, k, model_cfg, params)
        base = _decode_rays(base_slsr, o, d, model_cfg, params)

        # (a) cyclic view permutation
        shift = 1 + trial % max(1, n - 1)
        perm = np.roll(np.arange(n), -shift)
        slsr_p = M.encode(imgs[perm], tuple(ex.cameras[i] for i in perm), k,
                          model_cfg, params)
        diff_a = float(np.max(np.abs(_decode_rays(slsr_p, o, d, model_cfg, params) - base)))

        # (b) random rigid world-frame change applied to cameras and rays
        t = random_rigid(rng)
        cams_t = tuple(pose_compose(t, c) for c in ex.cameras)
        o_t = o @ t.rotation.T + t.translation
        d_t = d @ t.rotation.T
        slsr_t = M.encode(imgs, cams_t, k, model_cfg, params)
        diff_b = float(np.max(np.abs(_decode_rays(slsr_t, o_t, d_t, model_cfg, params) - base)))

        worst["cyclic"] = max(worst["cyclic"], diff_a)
        worst["rigid"] = max(worst["rigid"], diff_b)
        line = f"trial {trial}: cyclic {diff_a:.3e} rigid {diff_b:.3e}"

        if model_cfg.variant == "srt":
            # (c) reference-camera reassignment (reported, not gated)
            slsr_r = M.encode(imgs, ex.cameras, k, model_cfg, params, ref_index=1)
            alt = _decode_rays(slsr_r, o, d, model_cfg, params, ref_index=1)
            diff_c = float(np.max(np.abs(alt - base)))
            worst["reference"] = max(worst["reference"], diff_c)
            ref_fail += diff_c > 1e-3
            line += f" reference {diff_c:.3e}"
        print(line)

    print(f"worst-case: cyclic {worst['cyclic']:.3e} rigid {worst['rigid']:.3e}")
    if model_cfg.variant == "srt":
        print(f"reference-camera sensitivity: worst {worst['reference']:.3e}, "
              f"> 1e-3 in {ref_fail}/{cfg['trials']} trials")
        return 0
    ok = worst["cyclic"] <= tol and worst["rigid"] <= tol
    print(f"invariance {'PASS' if ok else 'FAIL'} at tolerance {tol:.1e}")
    return 0 if ok else 1


def _cmd_cycle(cfg: dict) -> int:
    _require(cfg, "checkpoint", "out_dir")
    model_cfg, params = training.load_params(cfg["checkpoint"])
    ex = make_example(cfg["scene_seed"], cfg["n_input"], cfg["n_target"],
                      cfg["res"], _gen_config(cfg))
    k = ex.intrinsics
    imgs = images_to_float(ex.images, np.float32)
    o, d = pixel_rays_grid(ex.target_cameras[cfg["target_view"]], k)
    n = ex.n_input
    os.makedirs(cfg["out_dir"], exist_ok=True)
    frames = []
    for shift in range(n):
        perm = np.roll(np.arange(n), -shift)
        slsr = M.encode(imgs[perm], tuple(ex.cameras[i] for i in perm), k,
                        model_cfg, params)
        rows = [M.decode(slsr, o[i:i + 4096], d[i:i + 4096], model_cfg, params).data
                for i in range(0, len(o), 4096)]
        frame = np.concatenate(rows).reshape(k.height, k.width, 3)
        frames.append(frame)
        _save_png(os.path.join(cfg["out_dir"], f"frame_{shift}.png"), frame)
    lines = []
    for i in range(n):
        rep = diff_report(frames[i], frames[(i + 1) % n])
        lines.append(f"{i} {(i + 1) % n} {rep['max_abs']:.6e}")
    report_path = os.path.join(cfg["out_dir"], "report.txt")
    with open(report_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {n} frames and report to {cfg['out_dir']}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "invariance-check": _cmd_invariance_check,
    "cycle": _cmd_cycle,
}


def main(argv=None) -> int:
    try:
        ns = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(ns, ns.command)
        _apply_runtime(cfg)
        return _HANDLERS[ns.command](cfg)
    except (DatasetFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
