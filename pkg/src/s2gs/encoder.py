"""Frame-causal transformer over patch tokens with a persistent KV cache.

The cache makes per-frame cost O(history) instead of O(history^2): each step
encodes only the incoming frame's tokens, attending to cached keys/values of
all earlier frames plus its own. Tokens within one frame attend
bidirectionally; causality is enforced at frame granularity.

Training runs the batched path (all frames at once under the additive causal
mask), which is numerically equivalent to the streaming path and
differentiable. The streaming path is plain numpy and tracks a
multiply-accumulate counter for the cost-scaling checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .camera import CameraParams, quat_normalize
from .errors import CausalityError, ContractError, DimensionError

ATTRS_PER_PIXEL = 11  # 3 scale + 4 rotation + 1 opacity logit + 3 rgb


class MacCounter:
    """Multiply-accumulate tally for the streaming path."""

    def __init__(self):
        self.total = 0

    def reset(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


mac_counter = MacCounter()


def _mm(a, b):
    """np.matmul with MAC accounting (batch dims included)."""
    out = np.matmul(a, b)
    n = out.size // out.shape[-1] * a.shape[-1] * out.shape[-1]
    mac_counter.add(n)
    return out


def build_causal_mask(n_frames, tokens_per_frame=1, dtype=np.float32):
    """Additive mask: 0 where the key's frame <= the query's frame, else -inf.

    Block replication expands the frame-level rule to token granularity;
    tokens of one frame see each other both ways.
    """
    if n_frames < 1:
        raise ContractError(f"need at least one frame, got {n_frames}")
    frames = np.arange(n_frames)
    allowed = frames[None, :] <= frames[:, None]
    allowed = np.repeat(np.repeat(allowed, tokens_per_frame, 0), tokens_per_frame, 1)
    mask = np.where(allowed, 0.0, ad.neg_inf(dtype))
    return mask.astype(dtype)


class KVCache:
    """Per-layer appended keys/values, [frames * tokens_per_frame, dim]."""

    def __init__(self, n_layers, tokens_per_frame, dim):
        self.keys = [np.zeros((0, dim), dtype=np.float32) for _ in range(n_layers)]
        self.values = [np.zeros((0, dim), dtype=np.float32) for _ in range(n_layers)]
        self.tokens_per_frame = tokens_per_frame
        self.frames = 0

    def append(self, layer, k, v):
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=0)
        self.values[layer] = np.concatenate([self.values[layer], v], axis=0)

    def length(self):
        return self.keys[0].shape[0]

    def nbytes(self):
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))


def patch_tokens(frame, patch):
    """[H, W, 3] image -> [n_tokens, patch*patch*3], row-major patch grid."""
    h, w, _ = frame.shape
    gh, gw = h // patch, w // patch
    x = frame.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * gw, patch * patch * 3), dtype=np.float32)


def _tokens_to_image(x, grid, patch, channels):
    """Inverse of patch layout for head outputs built on the tape."""
    gh, gw = grid
    x = ad.reshape(x, (gh, gw, patch, patch, channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (gh * patch, gw * patch, channels))


@dataclass
class FrameHeadsOutput:
    """Per-frame head predictions, still on the tape when training."""

    depth: Tensor  # [H, W], strictly positive
    camera: Tensor  # [11]: fx, fy, cx, cy (pixels), unit quat, translation
    attrs: Tensor  # [H, W, 11] raw per-pixel gaussian attributes

    def to_camera(self):
        v = self.camera.data
        return CameraParams(
            fx=float(v[0]), fy=float(v[1]), cx=float(v[2]), cy=float(v[3]),
            quat=quat_normalize(v[4:8]), trans=v[8:11].copy(),
        )


@dataclass
class DistillLosses:
    depth: Tensor
    camera: Tensor
    depth_valid: bool  # False when no valid pixel survived the mask


class CausalEncoder:
    """Token encoder plus depth / camera / gaussian-attribute heads."""

    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        p = cfg.patch_size
        d = cfg.embed_dim
        self.grid = (cfg.image_size // p, cfg.image_size // p)
        self.tokens_per_frame = self.grid[0] * self.grid[1]
        self.patch_embed = nn.Linear(p * p * 3, d, rng)
        self.pos = nn.sincos_grid(self.grid[0], self.grid[1], d)
        self.blocks = [
            nn.TransformerBlock(d, cfg.encoder_heads, 4 * d, rng) for _ in range(cfg.encoder_layers)
        ]
        self.final_ln = nn.LayerNorm(d)
        hh = cfg.head_hidden
        self.depth_head = [nn.Linear(d, hh, rng), nn.Linear(hh, p * p, rng, zero_init=True)]
        self.attr_head = [
            nn.Linear(d, hh, rng),
            nn.Linear(hh, p * p * ATTRS_PER_PIXEL, rng, zero_init=True,
                      bias_init=np.tile(_attr_bias(), p * p)),
        ]
        cam_bias = np.zeros(11, dtype=np.float32)
        cam_bias[0] = cam_bias[1] = _inv_softplus(1.0)
        cam_bias[4] = 1.0  # identity quaternion
        self.cam_head = [nn.Linear(d, hh, rng), nn.Linear(hh, 11, rng, zero_init=True, bias_init=cam_bias)]

    # -- parameters --------------------------------------------------

    def params(self):
        out = self.patch_embed.params("patch_embed.")
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"block{i}."))
        out.update(self.final_ln.params("final_ln."))
        for name, head in (("depth", self.depth_head), ("attr", self.attr_head), ("cam", self.cam_head)):
            out.update(head[0].params(f"{name}_head.0."))
            out.update(head[1].params(f"{name}_head.1."))
        return out

    # -- batched (training / offline-baseline) path -------------------

    def forward_batched(self, frames):
        """Encode ``frames`` [T, H, W, 3] jointly under the causal mask.

        Returns per-frame features as a Tensor [T, tokens_per_frame, dim].
        """
        t = frames.shape[0]
        self._check_size(frames[0])
        toks = np.concatenate([patch_tokens(f, self.cfg.patch_size) for f in frames], axis=0)
        x = ad.add(self.patch_embed(Tensor(toks)), Tensor(np.tile(self.pos, (t, 1))))
        mask = build_causal_mask(t, self.tokens_per_frame)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.final_ln(x)
        return ad.reshape(x, (t, self.tokens_per_frame, self.cfg.embed_dim))

    # -- streaming path ------------------------------------------------

    def encode_step(self, frame, cache):
        """Encode one frame against the cache; appends its keys/values.

        Never touches pixels of past frames: all history enters through the
        cached keys/values.
        """
        self._check_size(frame)
        if cache.tokens_per_frame != self.tokens_per_frame:
            raise DimensionError("cache token layout does not match the encoder")
        cfg = self.cfg
        heads, dh = cfg.encoder_heads, cfg.embed_dim // cfg.encoder_heads
        toks = patch_tokens(frame, cfg.patch_size)
        x = _mm(toks, self.patch_embed.weight.data) + self.patch_embed.bias.data + self.pos
        for li, blk in enumerate(self.blocks):
            h = _np_layernorm(x, blk.ln1.gamma.data, blk.ln1.beta.data)
            q = _mm(h, blk.attn.wq.weight.data) + blk.attn.wq.bias.data
            k = _mm(h, blk.attn.wk.weight.data) + blk.attn.wk.bias.data
            v = _mm(h, blk.attn.wv.weight.data) + blk.attn.wv.bias.data
            cache.append(li, k, v)
            kk, vv = cache.keys[li], cache.values[li]
            n, m = q.shape[0], kk.shape[0]
            qh = q.reshape(n, heads, dh).transpose(1, 0, 2)
            kh = kk.reshape(m, heads, dh).transpose(1, 2, 0)
            vh = vv.reshape(m, heads, dh).transpose(1, 0, 2)
            scores = _mm(qh, kh) * (1.0 / math.sqrt(dh))
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            mixed = _mm(attn, vh).transpose(1, 0, 2).reshape(n, cfg.embed_dim)
            x = x + _mm(mixed, blk.attn.wo.weight.data) + blk.attn.wo.bias.data
            h2 = _np_layernorm(x, blk.ln2.gamma.data, blk.ln2.beta.data)
            hidden = np.maximum(_mm(h2, blk.ff.fc1.weight.data) + blk.ff.fc1.bias.data, 0.0)
            x = x + _mm(hidden, blk.ff.fc2.weight.data) + blk.ff.fc2.bias.data
        x = _np_layernorm(x, self.final_ln.gamma.data, self.final_ln.beta.data)
        cache.frames += 1
        return x, cache

    def new_cache(self):
        return KVCache(self.cfg.encoder_layers, self.tokens_per_frame, self.cfg.embed_dim)

    # -- heads ----------------------------------------------------------

    def heads_forward(self, features):
        """Map one frame's features [tokens, dim] to depth/camera/attributes."""
        if not isinstance(features, Tensor):
            features = Tensor(features)
        p = self.cfg.patch_size
        depth_tok = self.depth_head[1](ad.relu(self.depth_head[0](features)))
        depth = ad.softplus(_tokens_to_image(depth_tok, self.grid, p, 1))
        depth = ad.reshape(depth, (self.cfg.image_size, self.cfg.image_size))
        attr_tok = self.attr_head[1](ad.relu(self.attr_head[0](features)))
        attrs = _tokens_to_image(attr_tok, self.grid, p, ATTRS_PER_PIXEL)
        pooled = ad.tmean(features, axis=0, keepdims=True)
        raw = ad.reshape(self.cam_head[1](ad.relu(self.cam_head[0](pooled))), (11,))
        size = float(self.cfg.image_size)
        fx = ad.mul(ad.softplus(raw[0:1]), size)
        fy = ad.mul(ad.softplus(raw[1:2]), size)
        cx = ad.mul(ad.sigmoid(raw[2:3]), size)
        cy = ad.mul(ad.sigmoid(raw[3:4]), size)
        quat = ad.l2_normalize(raw[4:8], axis=0)
        camera = ad.concat([fx, fy, cx, cy, quat, raw[8:11]], axis=0)
        return FrameHeadsOutput(depth=depth, camera=camera, attrs=attrs)

    # -- teacher distillation -------------------------------------------

    def distill_losses(self, pred, teacher_depth, teacher_cam, valid):
        """L2 depth over valid pixels plus Huber on the 11-vector camera residual."""
        valid = np.asarray(valid)
        if valid.shape != pred.depth.shape:
            raise DimensionError(f"valid mask {valid.shape} vs depth {pred.depth.shape}")
        count = float(valid.sum())
        if count > 0:
            diff = ad.sub(pred.depth, Tensor(np.asarray(teacher_depth, dtype=np.float32)))
            masked = ad.mul(ad.mul(diff, diff), Tensor(valid.astype(np.float32)))
            loss_depth = ad.mul(ad.tsum(masked), 1.0 / count)
            depth_valid = True
        else:
            loss_depth = Tensor(np.zeros(()))
            depth_valid = False

        size = float(self.cfg.image_size)
        tvec = teacher_cam.as_vector(size, size)
        scale = np.array([1 / size, 1 / size, 1 / size, 1 / size, 1, 1, 1, 1, 1, 1, 1], np.float32)
        pred_scaled = ad.mul(pred.camera, Tensor(scale))
        delta = self.cfg.huber_delta
        # q and -q encode one rotation; take the cheaper sign on the quat block
        flip = np.ones(11, dtype=np.float32)
        flip[4:8] = -1.0
        res_a = ad.sub(pred_scaled, Tensor(tvec))
        res_b = ad.sub(pred_scaled, Tensor(tvec * flip))
        cost_a = _huber_np(res_a.data, delta).sum()
        cost_b = _huber_np(res_b.data, delta).sum()
        loss_cam = ad.tsum(ad.huber(res_a if cost_a <= cost_b else res_b, delta))
        return DistillLosses(depth=loss_depth, camera=loss_cam, depth_valid=depth_valid)

    def _check_size(self, frame):
        want = (self.cfg.image_size, self.cfg.image_size, 3)
        if frame.shape != want:
            raise DimensionError(f"frame shape {frame.shape}, expected {want}")


def _huber_np(x, delta):
    small = np.abs(x) <= delta
    return np.where(small, 0.5 * x * x, delta * (np.abs(x) - 0.5 * delta))


def _np_layernorm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def _attr_bias():
    """Per-pixel attribute bias: modest scale, identity rotation, opacity~0.8."""
    b = np.zeros(ATTRS_PER_PIXEL, dtype=np.float32)
    b[0:3] = _inv_softplus(0.05)
    b[3] = 1.0
    b[7] = math.log(0.8 / 0.2)  # sigmoid^-1(0.8)
    return b


def _inv_softplus(y):
    return float(np.log(np.expm1(y)))
