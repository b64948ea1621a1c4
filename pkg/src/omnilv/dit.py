"""Next-DiT style velocity backbone on pixel-patch tokens.

Blocks use QK-normalised attention with axial 2D rotary embeddings,
sandwich RMS norms around both sublayers, and timestep modulation
(scale/shift on the pre-normed input, gate on the residual branch).
Instruction tokens reach every block through a per-head zero-gated
cross-attention path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Tensor, concat, custom_op, rms_norm, softmax, take_rows


class ConfigError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class PlanMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    instr_vocab_size: int = 64
    max_icl_pairs: int = 1
    rope_base: float = 10000.0
    adapter_depth: int = 2
    ffn_mult: int = 2
    interval_stride: int = 2
    norm_eps: float = 1e-6
    qk_norm_eps: float = 1e-12  # keeps the logits scale-invariant to ~1e-12 relative
    gate_init: float = 1.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.head_dim % 4:
            raise ConfigError(f"head_dim {self.head_dim} must be divisible by 4 for 2D RoPE")
        if self.num_blocks % 2 or self.num_blocks < 2:
            raise ConfigError(f"num_blocks must be even and >= 2, got {self.num_blocks}")
        if self.channels < 1 or self.max_icl_pairs < 0 or self.adapter_depth < 1:
            raise ConfigError("channels >= 1, max_icl_pairs >= 0 and adapter_depth >= 1 required")
        if self.interval_stride < 1:
            raise ConfigError("interval_stride must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenGrid:
    """Tokens [B, n, D]; the first rows*cols are the image grid, the rest appended prompts."""

    tokens: Tensor
    rows: int
    cols: int
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.positions is None:
            self.positions = grid_positions(self.rows, self.cols)
        if len(self.positions) != self.tokens.shape[1]:
            raise GeometryError(
                f"{len(self.positions)} positions for {self.tokens.shape[1]} tokens"
            )

    @property
    def n_image(self) -> int:
        return self.rows * self.cols


def grid_positions(rows: int, cols: int, row_offset: int = 0) -> np.ndarray:
    idx = np.arange(rows * cols)
    return np.stack([idx // cols + row_offset, idx % cols], axis=1)


# -- parameters ------------------------------------------------------------------
def _normal(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def init_block(rng, cfg: ModelConfig, prefix: str, modulated: bool, cross: bool) -> dict[str, np.ndarray]:
    d, hd, f = cfg.hidden_dim, cfg.head_dim, cfg.hidden_dim * cfg.ffn_mult
    p = {
        f"{prefix}.attn.wq": _normal(rng, (d, d), d),
        f"{prefix}.attn.wk": _normal(rng, (d, d), d),
        f"{prefix}.attn.wv": _normal(rng, (d, d), d),
        f"{prefix}.attn.wo": _normal(rng, (d, d), d),
        f"{prefix}.attn.q_gain": np.ones(hd),
        f"{prefix}.attn.k_gain": np.ones(hd),
        f"{prefix}.norm.attn_pre": np.ones(d),
        f"{prefix}.norm.attn_post": np.ones(d),
        f"{prefix}.norm.ffn_pre": np.ones(d),
        f"{prefix}.norm.ffn_post": np.ones(d),
        f"{prefix}.ffn.w1": _normal(rng, (d, f), d),
        f"{prefix}.ffn.b1": np.zeros(f),
        f"{prefix}.ffn.w2": _normal(rng, (f, d), f),
        f"{prefix}.ffn.b2": np.zeros(d),
    }
    if modulated:
        bias = np.zeros(6 * d)
        bias[2 * d:3 * d] = cfg.gate_init
        bias[5 * d:6 * d] = cfg.gate_init
        p[f"{prefix}.ada.w"] = rng.normal(0.0, 0.02, size=(d, 6 * d))
        p[f"{prefix}.ada.b"] = bias
    if cross:
        p[f"{prefix}.cross.wk"] = _normal(rng, (d, d), d)
        p[f"{prefix}.cross.wv"] = _normal(rng, (d, d), d)
        p[f"{prefix}.cross.k_gain"] = np.ones(hd)
        p[f"{prefix}.cross.gate"] = np.zeros((cfg.num_heads, 1, 1))
    return p


def init_backbone(cfg: ModelConfig, rng: np.random.Generator, prefix: str = "backbone") -> dict[str, np.ndarray]:
    d, pd = cfg.hidden_dim, cfg.patch_dim
    p = {
        f"{prefix}.patch_embed.w": _normal(rng, (pd, d), pd),
        f"{prefix}.patch_embed.b": np.zeros(d),
        f"{prefix}.time.w1": _normal(rng, (d, d), d),
        f"{prefix}.time.b1": np.zeros(d),
        f"{prefix}.time.w2": _normal(rng, (d, d), d),
        f"{prefix}.time.b2": np.zeros(d),
        f"{prefix}.instr_embed": rng.normal(0.0, 1.0, size=(cfg.instr_vocab_size, d)),
        f"{prefix}.final.ada.w": rng.normal(0.0, 0.02, size=(d, 2 * d)),
        f"{prefix}.final.ada.b": np.zeros(2 * d),
        f"{prefix}.final.norm": np.ones(d),
        f"{prefix}.head.w": np.zeros((d, pd)),
        f"{prefix}.head.b": np.zeros(pd),
    }
    for i in range(cfg.num_blocks):
        p.update(init_block(rng, cfg, f"{prefix}.blocks.{i}", modulated=True, cross=True))
    return p


# -- patches ---------------------------------------------------------------------
def patchify_raw(images, patch_size: int) -> Tensor:
    """[B, c, H, W] -> [B, (H/p)(W/p), c*p*p], patches in row-major grid order."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4:
        raise GeometryError(f"expected a [B, c, H, W] batch, got shape {x.shape}")
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise GeometryError(f"image {h}x{w} not divisible by patch size {p}")
    r, q = h // p, w // p
    x = x.reshape(b, c, r, p, q, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, r * q, c * p * p)


def unpatchify_raw(tokens: Tensor, channels: int, height: int, width: int, patch_size: int) -> Tensor:
    p = patch_size
    b = tokens.shape[0]
    r, q = height // p, width // p
    if tokens.shape[1:] != (r * q, channels * p * p):
        raise GeometryError(f"token shape {tokens.shape} does not match a {channels}x{height}x{width} image")
    x = tokens.reshape(b, r, q, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


def patchify(params: dict[str, Tensor], cfg: ModelConfig, images, prefix: str = "backbone") -> TokenGrid:
    raw = patchify_raw(images, cfg.patch_size)
    tokens = raw @ params[f"{prefix}.patch_embed.w"] + params[f"{prefix}.patch_embed.b"]
    g = images.shape[-2] // cfg.patch_size
    return TokenGrid(tokens, rows=g, cols=images.shape[-1] // cfg.patch_size)


# -- rotary embedding ----------------------------------------------------------------
def rope_tables(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [n, head_dim]: rows drive the first half, columns the second."""
    quarter = head_dim // 4
    theta = base ** (-np.arange(quarter) / quarter)  # base^(-2j / (head_dim/2))
    rows = positions[:, 0:1] * theta
    cols = positions[:, 1:2] * theta
    angles = np.concatenate([np.repeat(rows, 2, axis=1), np.repeat(cols, 2, axis=1)], axis=1)
    return np.cos(angles), np.sin(angles)


def _rotate_pairs(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]
    return out


def _rotate_pairs_t(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 1::2]
    out[..., 1::2] = -x[..., 0::2]
    return out


def rope2d(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate [..., n, head_dim] by 2D axial RoPE; positions is [n, 2] (row, col)."""
    head_dim = x.shape[-1]
    if head_dim % 4:
        raise GeometryError(f"head_dim {head_dim} must be divisible by 4")
    cos, sin = rope_tables(np.asarray(positions, dtype=np.float64), head_dim, base)
    out = x.data * cos + _rotate_pairs(x.data) * sin

    def backward(g):
        return (g * cos + _rotate_pairs_t(g * sin),)

    return custom_op(out, (x,), backward, "rope2d")


# -- timestep ------------------------------------------------------------------------
def timestep_frequencies(dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> np.ndarray:
    half = dim // 2
    return scale * np.exp(-math.log(max_period) * np.arange(half) / half)


def timestep_embed(t, dim: int) -> np.ndarray:
    """Interleaved [sin(w0 t), cos(w0 t), sin(w1 t), ...]; t scalar or [B]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    angles = t[:, None] * timestep_frequencies(dim)[None, :]
    out = np.empty((t.shape[0], 2 * angles.shape[1]))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def time_conditioning(params, cfg: ModelConfig, t, prefix: str = "backbone") -> Tensor:
    emb = Tensor(timestep_embed(t, cfg.hidden_dim))
    h = (emb @ params[f"{prefix}.time.w1"] + params[f"{prefix}.time.b1"]).silu()
    return h @ params[f"{prefix}.time.w2"] + params[f"{prefix}.time.b2"]


# -- instructions -----------------------------------------------------------------------
@dataclass
class InstructionContext:
    embeddings: Tensor  # [B, L, D]
    mask_bias: np.ndarray  # [B, 1, 1, L]; 0 for real tokens, large negative for padding
    present: np.ndarray  # [B, 1, 1, 1]; 0 for samples with no tokens


def embed_instructions(params, instr_ids, batch: int, prefix: str = "backbone") -> InstructionContext | None:
    if instr_ids is None or all(len(ids) == 0 for ids in instr_ids):
        return None
    if len(instr_ids) != batch:
        raise PlanMismatchError(f"{len(instr_ids)} instruction lists for a batch of {batch}")
    length = max(len(ids) for ids in instr_ids)
    ids = np.zeros((batch, length), dtype=np.int64)
    bias = np.full((batch, 1, 1, length), -1e9)
    present = np.zeros((batch, 1, 1, 1))
    for i, seq in enumerate(instr_ids):
        ids[i, :len(seq)] = seq
        bias[i, 0, 0, :len(seq)] = 0.0
        present[i] = 1.0 if len(seq) else 0.0
    emb = take_rows(params[f"{prefix}.instr_embed"], ids)
    return InstructionContext(emb, bias, present)


# -- blocks -----------------------------------------------------------------------------
def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


def attention(params, prefix: str, cfg: ModelConfig, x: Tensor, positions: np.ndarray,
              instr: InstructionContext | None = None) -> Tensor:
    """Bidirectional self-attention over all tokens plus the gated instruction path."""
    heads, hd = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    q = rms_norm(_heads(x @ params[f"{prefix}.attn.wq"], heads), params[f"{prefix}.attn.q_gain"], eps=cfg.qk_norm_eps)
    k = rms_norm(_heads(x @ params[f"{prefix}.attn.wk"], heads), params[f"{prefix}.attn.k_gain"], eps=cfg.qk_norm_eps)
    v = _heads(x @ params[f"{prefix}.attn.wv"], heads)
    qr = rope2d(q, positions, cfg.rope_base)
    kr = rope2d(k, positions, cfg.rope_base)
    weights = softmax((qr @ kr.swap_last()) * scale, axis=-1)
    out = weights @ v
    if instr is not None and f"{prefix}.cross.gate" in params:
        ck = rms_norm(_heads(instr.embeddings @ params[f"{prefix}.cross.wk"], heads),
                      params[f"{prefix}.cross.k_gain"], eps=cfg.qk_norm_eps)
        cv = _heads(instr.embeddings @ params[f"{prefix}.cross.wv"], heads)
        cw = softmax((q @ ck.swap_last()) * scale + instr.mask_bias, axis=-1)
        cross = (cw @ cv) * instr.present
        out = out + cross * params[f"{prefix}.cross.gate"]
    return _merge_heads(out) @ params[f"{prefix}.attn.wo"]


def feed_forward(params, prefix: str, x: Tensor) -> Tensor:
    h = (x @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"]).silu()
    return h @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]


def block_modulation(params, prefix: str, cfg: ModelConfig, t_emb: Tensor) -> list[Tensor]:
    """scale_a, shift_a, gate_a, scale_f, shift_f, gate_f, each [B, 1, D]."""
    d = cfg.hidden_dim
    mod = t_emb.silu() @ params[f"{prefix}.ada.w"] + params[f"{prefix}.ada.b"]
    b = mod.shape[0]
    mod = mod.reshape(b, 1, 6 * d)
    return [mod[:, :, i * d:(i + 1) * d] for i in range(6)]


def sandwich_block(params, prefix: str, cfg: ModelConfig, x: Tensor, positions: np.ndarray,
                   t_emb: Tensor | None = None, instr: InstructionContext | None = None) -> Tensor:
    eps = cfg.norm_eps
    if t_emb is not None:
        scale_a, shift_a, gate_a, scale_f, shift_f, gate_f = block_modulation(params, prefix, cfg, t_emb)
    h = rms_norm(x, params[f"{prefix}.norm.attn_pre"], eps=eps)
    if t_emb is not None:
        h = h * (scale_a + 1.0) + shift_a
    h = rms_norm(attention(params, prefix, cfg, h, positions, instr), params[f"{prefix}.norm.attn_post"], eps=eps)
    x = x + (h * gate_a if t_emb is not None else h)

    h = rms_norm(x, params[f"{prefix}.norm.ffn_pre"], eps=eps)
    if t_emb is not None:
        h = h * (scale_f + 1.0) + shift_f
    h = rms_norm(feed_forward(params, prefix, h), params[f"{prefix}.norm.ffn_post"], eps=eps)
    return x + (h * gate_f if t_emb is not None else h)


# -- full forward -----------------------------------------------------------------------
def _add_to_image_tokens(x: Tensor, feature: Tensor, n_image: int) -> Tensor:
    if x.shape[1] == n_image:
        return x + feature
    return concat([x[:, :n_image] + feature, x[:, n_image:]], axis=1)


def dit_forward(params, cfg: ModelConfig, noised: TokenGrid, t, instr_ids=None,
                condition_features: dict[int, Tensor] | None = None, plan=None,
                prefix: str = "backbone", trace: list | None = None) -> Tensor:
    """Predicted velocity [B, c, H, W] for the image part of ``noised``.

    ``condition_features`` maps block index -> additive feature [B, n_image, D];
    its keys must be exactly ``plan.sites(num_blocks)``.
    """
    features = condition_features or {}
    expected = set(plan.sites(cfg.num_blocks)) if plan is not None else set()
    if plan is not None and not plan.uses_adapter:
        expected = set()
    if set(features) != expected:
        raise PlanMismatchError(
            f"condition features for blocks {sorted(features)} but plan expects {sorted(expected)}"
        )
    x = noised.tokens
    b = x.shape[0]
    n_image = noised.n_image
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    t_emb = time_conditioning(params, cfg, t, prefix)
    instr = embed_instructions(params, instr_ids, b, prefix)

    for i in range(cfg.num_blocks):
        if i in features:
            x = _add_to_image_tokens(x, features[i], n_image)
            if trace is not None:
                trace.append(i)
        x = sandwich_block(params, f"{prefix}.blocks.{i}", cfg, x, noised.positions, t_emb, instr)

    if x.shape[1] != n_image:
        x = x[:, :n_image]
    mod = t_emb.silu() @ params[f"{prefix}.final.ada.w"] + params[f"{prefix}.final.ada.b"]
    d = cfg.hidden_dim
    mod = mod.reshape(b, 1, 2 * d)
    h = rms_norm(x, params[f"{prefix}.final.norm"], eps=cfg.norm_eps) * (mod[:, :, :d] + 1.0) + mod[:, :, d:]
    out = h @ params[f"{prefix}.head.w"] + params[f"{prefix}.head.b"]
    p = cfg.patch_size
    return unpatchify_raw(out, cfg.channels, noised.rows * p, noised.cols * p, p)
