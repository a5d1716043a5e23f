"""Set-latent scene encoder and light-field decoder, in three variants.

``srt``
    The global-frame baseline: per-pixel ray encodings, expressed in one
    arbitrarily chosen reference camera's frame, are concatenated to RGB
    before the CNN, and the decoder runs plain cross-attention with a
    single query stream. Its outputs depend on the reference choice.

``repast``
    Relative pose attention throughout. The CNN sees RGB alone; every
    query/key comparison re-expresses both rays in the key token's camera
    frame, so no global frame exists anywhere and outputs are invariant to
    rigid re-parametrizations of the scene and to input-view order.

``repast-b``
    Relative pose attention in the encoder only; the decoder uses plain
    attention but keeps one query stream per input view, each initialized
    from the query ray expressed in that view's camera frame (which already
    carries the full relative pose).

Attention with relative pose augmentation compares extended vectors
``[Wq x | g(q_ray -> key cam)]`` and ``[Wk x | g(k_ray -> key cam)]`` where
``g`` is the sinusoidal ray encoding; the dot product therefore splits into
a content term plus a pose term that depends only on rays and cameras, and
the pose term enters the graph as a precomputed constant bias. Softmax
normalization is always global over all tokens (encoder) or over all
N * H' * W' keys jointly (decoder).
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .geometry import (Intrinsics, PosEncConfig, Pose, patch_rays,
                       pixel_rays_grid, posenc_batch, to_local_batch)
from .tensor import ShapeError, Tensor

__all__ = [
    "CheckpointError",
    "ModelConfig",
    "QueryState",
    "Slsr",
    "VARIANTS",
    "decode",
    "decoder_block",
    "encode",
    "encoder_block",
    "encoder_pose_logits",
    "forward",
    "init_params",
    "init_query_streams",
    "load_checkpoint",
    "param_shapes",
    "repa_logits",
    "save_checkpoint",
    "tokenize",
]

VARIANTS = ("srt", "repast", "repast-b")

LN_EPS = 1e-5
_KERNEL = 3  # conv kernels are 3x3 throughout


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "repast"
    d_model: int = 128
    n_heads: int = 4
    d_head: int = 32
    n_enc_blocks: int = 3
    n_dec_blocks: int = 2
    cnn_channels: tuple = (32, 64, 128)
    cnn_strides: tuple = (2, 2, 2)
    mlp_hidden: int = 256
    posenc: PosEncConfig = field(default_factory=PosEncConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        object.__setattr__(self, "cnn_strides", tuple(int(s) for s in self.cnn_strides))
        if len(self.cnn_channels) != len(self.cnn_strides) or not self.cnn_channels:
            raise ValueError("cnn_channels and cnn_strides must be equal-length, non-empty")
        if any(s < 1 for s in self.cnn_strides) or any(c < 1 for c in self.cnn_channels):
            raise ValueError("cnn stages need positive channels and strides")
        for name in ("d_model", "n_heads", "d_head", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_enc_blocks < 0 or self.n_dec_blocks < 0:
            raise ValueError("block counts must be >= 0")

    @property
    def patch_factor(self) -> int:
        return int(np.prod(self.cnn_strides))

    @property
    def gamma_dim(self) -> int:
        return self.posenc.dim

    def canonical_text(self) -> str:
        """Stable key = value serialization used in checkpoint headers."""
        items = {
            "cnn_channels": ",".join(str(c) for c in self.cnn_channels),
            "cnn_strides": ",".join(str(s) for s in self.cnn_strides),
            "d_head": self.d_head,
            "d_model": self.d_model,
            "mlp_hidden": self.mlp_hidden,
            "n_dec_blocks": self.n_dec_blocks,
            "n_enc_blocks": self.n_enc_blocks,
            "n_heads": self.n_heads,
            "posenc_base_frequency": repr(self.posenc.base_frequency),
            "posenc_include_raw": str(self.posenc.include_raw).lower(),
            "posenc_num_freqs_direction": self.posenc.num_freqs_direction,
            "posenc_num_freqs_origin": self.posenc.num_freqs_origin,
            "variant": self.variant,
        }
        return "\n".join(f"{k} = {v}" for k, v in items.items())

    @classmethod
    def from_canonical_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            kv[key.strip()] = value.strip()
        posenc = PosEncConfig(
            num_freqs_origin=int(kv["posenc_num_freqs_origin"]),
            num_freqs_direction=int(kv["posenc_num_freqs_direction"]),
            base_frequency=float(kv["posenc_base_frequency"]),
            include_raw=kv["posenc_include_raw"] == "true",
        )
        return cls(
            variant=kv["variant"],
            d_model=int(kv["d_model"]),
            n_heads=int(kv["n_heads"]),
            d_head=int(kv["d_head"]),
            n_enc_blocks=int(kv["n_enc_blocks"]),
            n_dec_blocks=int(kv["n_dec_blocks"]),
            cnn_channels=tuple(int(c) for c in kv["cnn_channels"].split(",")),
            cnn_strides=tuple(int(s) for s in kv["cnn_strides"].split(",")),
            mlp_hidden=int(kv["mlp_hidden"]),
            posenc=posenc,
        )


@dataclass
class Slsr:
    """Set-latent scene representation: latent patch tokens plus their rays.

    Token t came from camera ``camera_index[t]`` and looks along
    ``ray_dirs[t]`` from that camera's origin. Token order is view-major
    then row-major over the patch grid, so camera_index[t] = t // (H'W').
    """

    tokens: Tensor  # [T, d_model]
    ray_origins: np.ndarray  # [T, 3] float64, world frame
    ray_dirs: np.ndarray  # [T, 3] float64, unit
    camera_index: np.ndarray  # [T] int
    cameras: tuple  # N poses
    _key_gamma: np.ndarray | None = None  # cached per-token key encoding

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class QueryState:
    """Per-query-ray decoding state: one latent stream per input view."""

    origins: np.ndarray  # [B, 3]
    dirs: np.ndarray  # [B, 3]
    streams: Tensor  # [B, n_streams, d_model]


def _use_repa_encoder(cfg: ModelConfig) -> bool:
    return cfg.variant in ("repast", "repast-b")


def _use_repa_decoder(cfg: ModelConfig) -> bool:
    return cfg.variant == "repast"


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Shapes of every named parameter, derivable from the config alone."""
    d, hh = cfg.d_model, cfg.n_heads * cfg.d_head
    shapes: dict[str, tuple] = {}
    cin = 3 + (cfg.gamma_dim if cfg.variant == "srt" else 0)
    for i, ch in enumerate(cfg.cnn_channels):
        shapes[f"cnn.{i}.kernel"] = (_KERNEL, _KERNEL, cin, ch)
        shapes[f"cnn.{i}.bias"] = (ch,)
        cin = ch
    shapes["token_proj.weight"] = (cin, d)
    shapes["token_proj.bias"] = (d,)

    def attn_block(prefix: str, cross: bool) -> None:
        shapes[f"{prefix}.ln1.gain"] = (d,)
        shapes[f"{prefix}.ln1.bias"] = (d,)
        if cross:
            shapes[f"{prefix}.ln_kv.gain"] = (d,)
            shapes[f"{prefix}.ln_kv.bias"] = (d,)
        for w in ("wq", "wk", "wv"):
            shapes[f"{prefix}.attn.{w}"] = (d, hh)
            shapes[f"{prefix}.attn.b{w[1]}"] = (hh,)
        shapes[f"{prefix}.attn.wo"] = (hh, d)
        shapes[f"{prefix}.attn.bo"] = (d,)
        shapes[f"{prefix}.ln2.gain"] = (d,)
        shapes[f"{prefix}.ln2.bias"] = (d,)
        shapes[f"{prefix}.mlp.w1"] = (d, cfg.mlp_hidden)
        shapes[f"{prefix}.mlp.b1"] = (cfg.mlp_hidden,)
        shapes[f"{prefix}.mlp.w2"] = (cfg.mlp_hidden, d)
        shapes[f"{prefix}.mlp.b2"] = (d,)

    for i in range(cfg.n_enc_blocks):
        attn_block(f"enc.{i}", cross=False)
    for i in range(cfg.n_dec_blocks):
        attn_block(f"dec.{i}", cross=True)
    shapes["query_init.weight"] = (cfg.gamma_dim, d)
    shapes["query_init.bias"] = (d,)
    shapes["head.w1"] = (d, cfg.mlp_hidden)
    shapes["head.b1"] = (cfg.mlp_hidden,)
    shapes["head.w2"] = (cfg.mlp_hidden, 3)
    shapes["head.b2"] = (3,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Deterministic parameter initialization for a given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x77]))
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".kernel"):
            kh, kw, cin, _ = shape
            std = math.sqrt(2.0 / (kh * kw * cin))
            data = rng.normal(0.0, std, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 2:
            fin, fout = shape
            std = math.sqrt(2.0 / max(1, fin + fout))
            data = rng.normal(0.0, std, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# relative-pose tables (inputs only; constants w.r.t. parameters)


def _pose_query_table(origins, dirs, cameras, cfg: ModelConfig) -> np.ndarray:
    """g(ray -> camera c) for every ray and every camera: [n, N, gamma]."""
    cols = []
    for cam in cameras:
        o, d = to_local_batch(origins, dirs, cam)
        cols.append(posenc_batch(o, d, cfg.posenc))
    return np.stack(cols, axis=1)


def _pose_key_table(slsr: Slsr, cfg: ModelConfig) -> np.ndarray:
    """g(token ray -> its own camera) per token: [T, gamma]."""
    if slsr._key_gamma is None:
        out = np.empty((slsr.n_tokens, cfg.gamma_dim))
        for c, cam in enumerate(slsr.cameras):
            idx = np.flatnonzero(slsr.camera_index == c)
            o, d = to_local_batch(slsr.ray_origins[idx], slsr.ray_dirs[idx], cam)
            out[idx] = posenc_batch(o, d, cfg.posenc)
        slsr._key_gamma = out
    return slsr._key_gamma


def _pose_pair_logits(q_origins, q_dirs, slsr: Slsr, cfg: ModelConfig) -> np.ndarray:
    """Pose term of every (query ray, key token) logit: [nq, T].

    Entry (q, k) is the dot product of the two ray encodings expressed in
    key k's camera frame; it is invariant to any rigid transform applied
    jointly to all rays and cameras.
    """
    qg = _pose_query_table(q_origins, q_dirs, slsr.cameras, cfg)
    kg = _pose_key_table(slsr, cfg)
    out = np.empty((len(q_origins), slsr.n_tokens))
    for c in range(slsr.n_views):
        idx = np.flatnonzero(slsr.camera_index == c)
        out[:, idx] = qg[:, c, :] @ kg[idx].T
    return out


def encoder_pose_logits(slsr: Slsr, cfg: ModelConfig) -> np.ndarray:
    """[T, T] pose-term bias for encoder self-attention."""
    return _pose_pair_logits(slsr.ray_origins, slsr.ray_dirs, slsr, cfg)


# ---------------------------------------------------------------------------
# encoder


def tokenize(images: np.ndarray, cameras, intrinsics: Intrinsics,
             cfg: ModelConfig, params: dict, ref_index: int = 0) -> Slsr:
    """CNN-tokenize posed images into an Slsr (no attention blocks).

    ``images`` is [N, H, W, 3] in [0, 1]. For the ``srt`` variant the
    per-pixel ray encodings, expressed in ``cameras[ref_index]``'s frame,
    are concatenated to RGB before the CNN; the relative-pose variants feed
    RGB alone.
    """
    images = np.asarray(images)
    n, h, w, _ = images.shape
    pf = cfg.patch_factor
    if h % pf or w % pf:
        raise ShapeError(f"image size {h}x{w} not divisible by patch factor {pf}")
    if len(cameras) != n:
        raise ShapeError(f"{n} images but {len(cameras)} cameras")

    if cfg.variant == "srt":
        ref = cameras[ref_index]
        planes = []
        for cam in cameras:
            o, d = pixel_rays_grid(cam, intrinsics)
            ol, dl = to_local_batch(o, d, ref)
            g = posenc_batch(ol, dl, cfg.posenc).reshape(h, w, cfg.gamma_dim)
            planes.append(g)
        net_in = np.concatenate([images, np.stack(planes)], axis=-1)
    else:
        net_in = images

    x = Tensor(np.asarray(net_in, dtype=T.default_dtype()))
    for i, stride in enumerate(cfg.cnn_strides):
        x = T.conv2d(x, params[f"cnn.{i}.kernel"], stride=stride)
        x = T.add(x, params[f"cnn.{i}.bias"])
        x = T.gelu(x)
    hp, wp = h // pf, w // pf
    x = T.reshape(x, (n * hp * wp, cfg.cnn_channels[-1]))
    tokens = T.add(T.matmul(x, params["token_proj.weight"]), params["token_proj.bias"])

    origins = np.empty((n * hp * wp, 3))
    dirs = np.empty_like(origins)
    for i, cam in enumerate(cameras):
        o, d = patch_rays(cam, intrinsics, (hp, wp))
        origins[i * hp * wp:(i + 1) * hp * wp] = o
        dirs[i * hp * wp:(i + 1) * hp * wp] = d
    camera_index = np.repeat(np.arange(n), hp * wp)
    return Slsr(tokens, origins, dirs, camera_index, tuple(cameras))


def _project_heads(x: Tensor, w: Tensor, b: Tensor, n_heads: int, d_head: int,
                   head_first: bool = True) -> Tensor:
    """[T, d_model] -> [H, T, d_head] (or [T, H, d_head] with head_first=False)."""
    y = T.add(T.matmul(x, w), b)
    y = T.reshape(y, (x.shape[0], n_heads, d_head))
    return T.transpose(y, (1, 0, 2)) if head_first else y


def repa_logits(q_tokens: Tensor, k_tokens: Tensor,
                q_origins, q_dirs, slsr: Slsr, cfg: ModelConfig,
                params: dict, prefix: str,
                pose_table: np.ndarray | None = None,
                include_pose: bool = True) -> Tensor:
    """Scaled attention logits between query and key token blocks: [H, nq, nk].

    Per head, logit(q, k) = (Wq x_q . Wk x_k + g_q(C_k) . g_k(C_k)) / s with
    s = sqrt(d_head + gamma_dim); the pose term compares both rays in key
    k's camera frame and is shared across heads. With ``include_pose=False``
    (or a zero-width encoding) this reduces to standard scaled dot-product
    logits with s = sqrt(d_head).
    """
    q = _project_heads(q_tokens, params[f"{prefix}.wq"], params[f"{prefix}.bq"],
                       cfg.n_heads, cfg.d_head)
    k = _project_heads(k_tokens, params[f"{prefix}.wk"], params[f"{prefix}.bk"],
                       cfg.n_heads, cfg.d_head)
    logits = T.matmul(q, T.transpose(k, (0, 2, 1)))  # [H, nq, nk]
    extra = 0
    if include_pose:
        if pose_table is None:
            pose_table = _pose_pair_logits(np.asarray(q_origins), np.asarray(q_dirs),
                                           slsr, cfg)
        logits = T.add(logits, pose_table[None])
        extra = cfg.gamma_dim
    return T.mul(logits, 1.0 / math.sqrt(cfg.d_head + extra))


def _self_attention(h: Tensor, slsr: Slsr, cfg: ModelConfig, params: dict,
                    prefix: str, pose_table: np.ndarray | None,
                    weights_out: list | None = None) -> Tensor:
    logits = repa_logits(h, h, slsr.ray_origins, slsr.ray_dirs, slsr, cfg,
                         params, prefix, pose_table=pose_table,
                         include_pose=_use_repa_encoder(cfg))
    weights = T.softmax_lastdim(logits, 1.0)  # [H, T, T], rows sum to 1
    if weights_out is not None:
        weights_out.append(np.array(weights.data))
    v = _project_heads(h, params[f"{prefix}.wv"], params[f"{prefix}.bv"],
                       cfg.n_heads, cfg.d_head)
    out = T.matmul(weights, v)  # [H, T, d_head]
    out = T.reshape(T.transpose(out, (1, 0, 2)), (h.shape[0], cfg.n_heads * cfg.d_head))
    return T.add(T.matmul(out, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def encoder_block(slsr: Slsr, cfg: ModelConfig, params: dict, prefix: str,
                  pose_table: np.ndarray | None = None,
                  weights_out: list | None = None) -> Slsr:
    """Pre-norm Transformer block with (relative-pose) global self-attention."""
    if _use_repa_encoder(cfg) and pose_table is None:
        pose_table = encoder_pose_logits(slsr, cfg)
    p = params
    x = slsr.tokens
    h = T.layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], LN_EPS)
    x = T.add(x, _self_attention(h, slsr, cfg, p, f"{prefix}.attn", pose_table,
                                 weights_out))
    h2 = T.layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], LN_EPS)
    m = T.add(T.matmul(h2, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"])
    m = T.add(T.matmul(T.gelu(m), p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
    x = T.add(x, m)
    return replace(slsr, tokens=x)


def encode(images, cameras, intrinsics, cfg: ModelConfig, params: dict,
           ref_index: int = 0) -> Slsr:
    """Posed images -> set-latent scene representation."""
    slsr = tokenize(images, cameras, intrinsics, cfg, params, ref_index)
    pose_table = encoder_pose_logits(slsr, cfg) if _use_repa_encoder(cfg) else None
    for i in range(cfg.n_enc_blocks):
        slsr = encoder_block(slsr, cfg, params, f"enc.{i}", pose_table)
    return slsr


# ---------------------------------------------------------------------------
# decoder


def init_query_streams(origins, dirs, cameras, cfg: ModelConfig, params: dict,
                       ref_index: int = 0) -> QueryState:
    """Initialize decoding streams from the query ray's per-camera encodings.

    Relative-pose variants get one stream per input view, seeded with the
    query ray expressed in that view's frame; the baseline gets a single
    stream seeded with the ray in the reference frame.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    frames = (cameras[ref_index],) if cfg.variant == "srt" else tuple(cameras)
    g = _pose_query_table(origins, dirs, frames, cfg)  # [B, n_frames, gamma]
    gt = Tensor(np.asarray(g, dtype=T.default_dtype()))
    streams = T.add(T.matmul(gt, params["query_init.weight"]), params["query_init.bias"])
    return QueryState(origins, dirs, streams)


def _cross_attention(h: Tensor, kv: Tensor, slsr: Slsr, cfg: ModelConfig,
                     params: dict, prefix: str,
                     pose_bias: np.ndarray | None,
                     weights_out: list | None = None) -> Tensor:
    """Globally normalized multi-stream cross-attention -> one vector per ray.

    ``h`` is [B, n_streams, d_model]; each key token is compared against
    the stream belonging to its own camera, the softmax runs jointly over
    all keys of all views, and the weighted value sum is a single latent
    vector shared by every stream.
    """
    b, n_streams, _ = h.shape
    p = params
    q = T.add(T.matmul(h, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    q = T.reshape(q, (b, n_streams, cfg.n_heads, cfg.d_head))
    q = T.transpose(q, (0, 2, 1, 3))  # [B, H, n_streams, d_head]
    k = _project_heads(kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"],
                       cfg.n_heads, cfg.d_head, head_first=False)
    k = T.transpose(k, (1, 2, 0))  # [H, d_head, T]
    full = T.matmul(q, k)  # [B, H, n_streams, T]

    if cfg.variant == "srt":
        idx = np.zeros(slsr.n_tokens, dtype=np.int64)
    else:
        if n_streams != slsr.n_views:
            raise ShapeError(f"{n_streams} query streams but {slsr.n_views} input views")
        idx = slsr.camera_index.astype(np.int64)
    sel = T.take_along(full, idx[None, None, None, :], axis=2)
    logits = T.reshape(sel, (b, cfg.n_heads, slsr.n_tokens))
    extra = 0
    if pose_bias is not None:
        logits = T.add(logits, pose_bias[:, None, :])
        extra = cfg.gamma_dim
    weights = T.softmax_lastdim(logits, math.sqrt(cfg.d_head + extra))
    if weights_out is not None:
        weights_out.append(np.array(weights.data))

    v = _project_heads(kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"],
                       cfg.n_heads, cfg.d_head)  # [H, T, d_head]
    pooled = T.matmul(T.reshape(weights, (b, cfg.n_heads, 1, slsr.n_tokens)), v)
    pooled = T.reshape(pooled, (b, cfg.n_heads * cfg.d_head))
    return T.add(T.matmul(pooled, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def decoder_block(state: QueryState, slsr: Slsr, cfg: ModelConfig, params: dict,
                  prefix: str, pose_bias: np.ndarray | None = None,
                  weights_out: list | None = None) -> QueryState:
    """Pre-norm cross-attention block updating the per-view query streams."""
    if _use_repa_decoder(cfg) and pose_bias is None:
        pose_bias = _pose_pair_logits(state.origins, state.dirs, slsr, cfg)
    p = params
    v = state.streams
    b = v.shape[0]
    h = T.layer_norm(v, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], LN_EPS)
    kv = T.layer_norm(slsr.tokens, p[f"{prefix}.ln_kv.gain"],
                      p[f"{prefix}.ln_kv.bias"], LN_EPS)
    shared = _cross_attention(h, kv, slsr, cfg, p, f"{prefix}.attn",
                              pose_bias, weights_out)
    v = T.add(v, T.reshape(shared, (b, 1, cfg.d_model)))
    h2 = T.layer_norm(v, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], LN_EPS)
    m = T.add(T.matmul(h2, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"])
    m = T.add(T.matmul(T.gelu(m), p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
    return QueryState(state.origins, state.dirs, T.add(v, m))


def decode(slsr: Slsr, origins, dirs, cfg: ModelConfig, params: dict,
           ref_index: int = 0, weights_out: list | None = None) -> Tensor:
    """Predict RGB in (0, 1) for a batch of query rays: [B, 3]."""
    state = init_query_streams(origins, dirs, slsr.cameras, cfg, params, ref_index)
    pose_bias = (_pose_pair_logits(state.origins, state.dirs, slsr, cfg)
                 if _use_repa_decoder(cfg) else None)
    for i in range(cfg.n_dec_blocks):
        state = decoder_block(state, slsr, cfg, params, f"dec.{i}",
                              pose_bias, weights_out)
    pooled = T.mean(state.streams, axis=1)  # [B, d_model]
    h = T.gelu(T.add(T.matmul(pooled, params["head.w1"]), params["head.b1"]))
    return T.sigmoid(T.add(T.matmul(h, params["head.w2"]), params["head.b2"]))


def forward(example, cfg: ModelConfig, params: dict, ref_index: int = 0,
            chunk: int = 4096) -> np.ndarray:
    """Encode an example's input views and render all target views: [M, H, W, 3]."""
    from .scenes import images_to_float  # local import avoids a cycle

    imgs = images_to_float(example.images, T.default_dtype())
    slsr = encode(imgs, example.cameras, example.intrinsics, cfg, params, ref_index)
    k = example.intrinsics
    out = []
    for cam in example.target_cameras:
        o, d = pixel_rays_grid(cam, k)
        rows = [decode(slsr, o[i:i + chunk], d[i:i + chunk], cfg, params,
                       ref_index).data
                for i in range(0, len(o), chunk)]
        out.append(np.concatenate(rows).reshape(k.height, k.width, 3))
    return np.stack(out)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (little-endian): magic "RPCK", u32 version, u32 config length +
# canonical config text (utf-8), u32 tensor count; per tensor: u32 name
# length + name bytes, u8 dtype tag, u8 ndim, ndim x u32 extents, raw data.

_CKPT_MAGIC = b"RPCK"
_CKPT_VERSION = 1
_TAG_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "|u1", 3: "<i8", 4: "<u8"}
_DTYPE_TO_TAG = {np.dtype(v): k for k, v in _TAG_TO_DTYPE.items()}


class CheckpointError(IOError):
    """Raised for malformed checkpoints or config mismatches."""


def save_checkpoint(path, cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    text = cfg.canonical_text().encode("utf-8")
    buf.write(struct.pack("<II", _CKPT_VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _DTYPE_TO_TAG.get(np.dtype(arr.dtype.str.replace(">", "<")))
        if tag is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_TAG_TO_DTYPE[tag]).tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Read a checkpoint; returns (ModelConfig, {name: array}).

    With ``expect`` given, a checkpoint whose stored config differs is
    rejected with :class:`CheckpointError`.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic bytes)")
    version, clen = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    try:
        cfg = ModelConfig.from_canonical_text(raw[pos:pos + clen].decode("utf-8"))
        pos += clen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dt = np.dtype(_TAG_TO_DTYPE[tag])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            tensors[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                                          offset=pos).reshape(shape).copy()
            pos += n_bytes
    except (struct.error, KeyError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if expect is not None and cfg.canonical_text() != expect.canonical_text():
        raise CheckpointError(f"{path}: checkpoint config does not match the requested "
                              f"model configuration")
    return cfg, tensors
