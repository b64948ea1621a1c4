"""Condition adapter, injection plans, instruction vocabulary and in-context prompt fusion."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dit import (
    ModelConfig,
    PlanMismatchError,
    TokenGrid,
    dit_forward,
    grid_positions,
    init_backbone,
    init_block,
    patchify,
    patchify_raw,
    sandwich_block,
)
from .tensor import Tensor, concat


class FusionError(ValueError):
    pass


class Variant(str, enum.Enum):
    INPUT = "input"  # (a) channel concat at the patch embedding
    FIRST_FROZEN = "first-frozen"  # (b) adapter into first half, backbone frozen
    FIRST = "first"  # (c) adapter into first half, co-trained
    SECOND = "second"  # (d) adapter into second half
    INTERVAL = "interval"  # (e) adapter into every stride-th block


TABLE_ROWS = {
    Variant.INPUT: "a",
    Variant.FIRST_FROZEN: "b",
    Variant.FIRST: "c",
    Variant.SECOND: "d",
    Variant.INTERVAL: "e",
}


@dataclass(frozen=True)
class InjectionPlan:
    variant: Variant = Variant.FIRST
    train_backbone: bool | None = None
    stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        expected = self.variant is not Variant.FIRST_FROZEN
        if self.train_backbone is None:
            object.__setattr__(self, "train_backbone", expected)
        elif self.train_backbone != expected:
            raise PlanMismatchError(
                f"variant {self.variant.value!r} requires train_backbone={expected}"
            )

    @classmethod
    def from_flag(cls, name: str, stride: int = 2) -> InjectionPlan:
        return cls(Variant(name), stride=stride)

    @property
    def uses_adapter(self) -> bool:
        return self.variant is not Variant.INPUT

    @property
    def row(self) -> str:
        return TABLE_ROWS[self.variant]

    def sites(self, num_blocks: int) -> list[int]:
        half = num_blocks // 2
        if self.variant is Variant.INPUT:
            return []
        if self.variant in (Variant.FIRST, Variant.FIRST_FROZEN):
            return list(range(half))
        if self.variant is Variant.SECOND:
            return list(range(half, num_blocks))
        return list(range(0, num_blocks, self.stride))


# -- instruction vocabulary -------------------------------------------------------------
UNK = "<unk>"


class Vocab:
    """Fixed keyword table; id 0 is reserved for unknown words."""

    def __init__(self, words: Sequence[str]):
        self.words = [UNK] + sorted(set(w.lower() for w in words) - {UNK})
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def unk_id(self) -> int:
        return 0

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, 0) for w in text.lower().split()]


def encode_instruction(text: str, vocab: Vocab) -> list[int]:
    return vocab.encode(text)


def default_vocab() -> Vocab:
    from .catalog import TaskCatalog

    return Vocab(TaskCatalog().words())


# -- prompts -----------------------------------------------------------------------------
class FusionMode(str, enum.Enum):
    CONCAT = "concat"
    ADDITION = "addition"


@dataclass
class PromptPack:
    instr_token_ids: list[int] = field(default_factory=list)
    icl_pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    fusion_mode: FusionMode = FusionMode.ADDITION


@dataclass
class Conditioning:
    """Batched conditioning inputs for one forward pass."""

    lq: np.ndarray | None  # [B, c, H, W] in [0, 1]
    instr_ids: list[list[int]] | None = None
    icl: np.ndarray | None = None  # [B, n_pairs, 2, c, H, W] in [0, 1]
    fusion: FusionMode = FusionMode.ADDITION

    @classmethod
    def from_packs(cls, lq: np.ndarray, packs: Sequence[PromptPack]) -> Conditioning:
        counts = {len(p.icl_pairs) for p in packs}
        if len(counts) > 1:
            raise FusionError("all prompt packs in a batch must carry the same number of ICL pairs")
        icl = None
        if counts and counts.pop():
            icl = np.stack([np.stack([np.stack(pair) for pair in p.icl_pairs]) for p in packs])
        fusion = packs[0].fusion_mode if packs else FusionMode.ADDITION
        return cls(lq, [list(p.instr_token_ids) for p in packs], icl, FusionMode(fusion))


def to_signed(images: np.ndarray) -> np.ndarray:
    return images * 2.0 - 1.0


def to_unit(images: np.ndarray) -> np.ndarray:
    return (images + 1.0) * 0.5


# -- parameters --------------------------------------------------------------------------
def init_adapter(cfg: ModelConfig, plan: InjectionPlan, rng: np.random.Generator) -> dict[str, np.ndarray]:
    from .dit import _normal

    d, pd = cfg.hidden_dim, cfg.patch_dim
    p = {"adapter.patch_embed.w": _normal(rng, (pd, d), pd), "adapter.patch_embed.b": np.zeros(d)}
    for j in range(cfg.adapter_depth):
        p.update(init_block(rng, cfg, f"adapter.blocks.{j}", modulated=False, cross=False))
    for s in plan.sites(cfg.num_blocks):
        p[f"adapter.heads.{s}.w"] = np.zeros((d, d))
        p[f"adapter.heads.{s}.b"] = np.zeros(d)
    return p


def init_icl(cfg: ModelConfig) -> dict[str, np.ndarray]:
    p = {}
    for slot in range(2 * cfg.max_icl_pairs):
        p[f"icl.proj.{slot}.w"] = np.zeros((cfg.patch_dim, cfg.hidden_dim))
        p[f"icl.proj.{slot}.b"] = np.zeros(cfg.hidden_dim)
    return p


def init_params(cfg: ModelConfig, plan: InjectionPlan | None, seed: int = 0) -> dict[str, Tensor]:
    """Backbone + (adapter or concat columns) + ICL projectors, all trainable leaves."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0A11]))
    raw = init_backbone(cfg, rng)
    if plan is not None:
        if plan.uses_adapter:
            raw.update(init_adapter(cfg, plan, rng))
        else:
            raw["backbone.patch_embed.cond_w"] = np.zeros((cfg.patch_dim, cfg.hidden_dim))
    raw.update(init_icl(cfg))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def is_backbone(name: str) -> bool:
    return name.startswith("backbone.")


def mark_trainable(params: dict[str, Tensor], plan: InjectionPlan | None) -> None:
    frozen = plan is not None and not plan.train_backbone
    for name, p in params.items():
        p.requires_grad = not (frozen and is_backbone(name))


# -- condition adapter ---------------------------------------------------------------------
def encode_condition(params, cfg: ModelConfig, lq_images: np.ndarray, plan: InjectionPlan,
                     fuse: Callable[[TokenGrid], TokenGrid] | None = None) -> dict[int, Tensor]:
    """Run the adapter trunk once and emit one additive feature per injection site.

    ``fuse`` (in-context fusion) is applied to the condition-image tokens before the trunk;
    features keep only the image-token rows.
    """
    if not plan.uses_adapter:
        raise PlanMismatchError("input-concat plan bypasses the adapter; caller must branch")
    grid = patchify(params, cfg, to_signed(lq_images), prefix="adapter")
    if fuse is not None:
        grid = fuse(grid)
    h = grid.tokens
    for j in range(cfg.adapter_depth):
        h = sandwich_block(params, f"adapter.blocks.{j}", cfg, h, grid.positions)
    if h.shape[1] != grid.n_image:
        h = h[:, :grid.n_image]
    return {s: h @ params[f"adapter.heads.{s}.w"] + params[f"adapter.heads.{s}.b"]
            for s in plan.sites(cfg.num_blocks)}


# -- in-context fusion ---------------------------------------------------------------------
@dataclass
class IclProjectors:
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def from_params(cls, params, cfg: ModelConfig) -> IclProjectors:
        n = 2 * cfg.max_icl_pairs
        return cls([params[f"icl.proj.{i}.w"] for i in range(n)], [params[f"icl.proj.{i}.b"] for i in range(n)])

    def __len__(self) -> int:
        return len(self.weights)

    def project(self, slot: int, tokens: Tensor) -> Tensor:
        return tokens @ self.weights[slot] + self.biases[slot]


def fuse_icl_concat(h_img: TokenGrid, prompts: Sequence[TokenGrid]) -> TokenGrid:
    """Token-axis concatenation; prompt k sits below the previous grids (disjoint row offsets)."""
    if not prompts:
        return h_img
    d = h_img.tokens.shape[-1]
    positions = [h_img.positions]
    offset = int(h_img.positions[:, 0].max()) + 1
    for pr in prompts:
        if pr.tokens.shape[-1] != d:
            raise FusionError(f"prompt hidden dim {pr.tokens.shape[-1]} != image hidden dim {d}")
        positions.append(grid_positions(pr.rows, pr.cols, row_offset=offset))
        offset += pr.rows
    tokens = concat([h_img.tokens] + [p.tokens for p in prompts], axis=1)
    return TokenGrid(tokens, h_img.rows, h_img.cols, np.concatenate(positions, axis=0))


def fuse_icl_projection_addition(h_img: TokenGrid, prompts: Sequence[TokenGrid],
                                 projectors: IclProjectors) -> TokenGrid:
    """H_image + sum_i proj_i(H_prompt_i), tokenwise."""
    if len(prompts) > len(projectors):
        raise FusionError(f"{len(prompts)} prompts but only {len(projectors)} projectors")
    tokens = h_img.tokens
    for i, pr in enumerate(prompts):
        if pr.tokens.shape[:2] != tokens.shape[:2]:
            raise FusionError(f"prompt tokens {pr.tokens.shape} do not match image tokens {tokens.shape}")
        tokens = tokens + projectors.project(i, pr.tokens)
    return TokenGrid(tokens, h_img.rows, h_img.cols, h_img.positions)


def prompt_grids(cfg: ModelConfig, icl: np.ndarray) -> list[TokenGrid]:
    """Raw patch grids for each exemplar image, slot order lq0, hq0, lq1, hq1, ..."""
    grids = []
    g = cfg.image_size // cfg.patch_size
    for pair in range(icl.shape[1]):
        for role in range(2):
            raw = patchify_raw(to_signed(icl[:, pair, role]), cfg.patch_size)
            grids.append(TokenGrid(raw, g, g))
    return grids


# -- assembled forward ----------------------------------------------------------------------
def apply_plan(plan: InjectionPlan | None, params, cfg: ModelConfig, cond: Conditioning | None,
               trace: list | None = None) -> Callable[[np.ndarray, np.ndarray], Tensor]:
    """Return forward(x_t, t) -> velocity for this plan and conditioning.

    ``plan=None`` is the unconditional backbone. Frozen plans flip the
    backbone leaves to requires_grad=False as a side effect. Visual prompts
    are fused into the tokens that carry the input image: the adapter grid
    for adapter plans, the backbone grid otherwise.
    """
    mark_trainable(params, plan)
    cond = cond or Conditioning(None)
    fuse = None
    if cond.icl is not None and cond.icl.shape[1] > 0:
        if cond.icl.shape[1] > cfg.max_icl_pairs:
            raise FusionError(f"{cond.icl.shape[1]} ICL pairs exceed max_icl_pairs={cfg.max_icl_pairs}")
        prompts = prompt_grids(cfg, cond.icl)
        proj = IclProjectors.from_params(params, cfg)
        if FusionMode(cond.fusion) is FusionMode.ADDITION:
            def fuse(grid):
                return fuse_icl_projection_addition(grid, prompts, proj)
        else:
            def fuse(grid):
                projected = [TokenGrid(proj.project(i, p.tokens), p.rows, p.cols) for i, p in enumerate(prompts)]
                return fuse_icl_concat(grid, projected)

    features = None
    cond_raw = None
    if plan is not None:
        if cond.lq is None:
            raise PlanMismatchError("a conditional plan needs a condition image")
        if plan.uses_adapter:
            features = encode_condition(params, cfg, cond.lq, plan, fuse)
        else:
            cond_raw = patchify_raw(to_signed(cond.lq), cfg.patch_size)
    backbone_fuse = fuse if features is None else None

    def forward(x_t: np.ndarray, t) -> Tensor:
        grid = patchify(params, cfg, x_t)
        if cond_raw is not None:
            grid = TokenGrid(grid.tokens + cond_raw @ params["backbone.patch_embed.cond_w"], grid.rows, grid.cols)
        if backbone_fuse is not None:
            grid = backbone_fuse(grid)
        return dit_forward(params, cfg, grid, t, cond.instr_ids, features, plan, trace=trace)

    return forward
