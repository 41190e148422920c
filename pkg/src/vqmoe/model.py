"""Dual-path quality network assembly.

Video features (T,H,W,C) and per-frame token features (T,L,C) are fused by
frame-synchronized cross-attention in both directions. The perceptual path
pools the fused video feature three ways (keep-space, keep-time, global) and
routes each through shared spatial/temporal expert pools under structured 2D
gating, producing spatial, temporal, and overall scores. The alignment path
pools token features over time, routes each token and the position-0
sentence token through alignment experts, and produces per-word scores plus
a sentence score.

Six switches (fusion, per-path expert routing, a conventional 1D routing
variant, and the two sub-dimension head groups) select the seven ablation
configurations used in testing; each changes the parameter set structurally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DegenerateInputError, NumericalError, ShapeError
from .moe import (
    Expert,
    Linear,
    make_gating,
    make_token_gating,
    mix_experts,
    structured_weights,
    topk_renorm,
    vanilla_gating,
)
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Shapes, expert counts, routing width, and branch switches."""

    t_frames: int
    height: int
    width: int
    l_tokens: int
    channels: int
    m_spatial: int = 8
    n_temporal: int = 8
    z_alignment: int = 8
    k: int = 2
    k_joint: int | None = None
    expert_hidden: int | None = None
    attn_heads: int = 1
    fusion_on: bool = True
    moe_perceptual_on: bool = True
    moe_alignment_on: bool = True
    vanilla_moe: bool = False
    st_heads_on: bool = True
    wl_heads_on: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("t_frames", "height", "width", "l_tokens", "channels",
                     "m_spatial", "n_temporal", "z_alignment"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.l_tokens < 2:
            raise ConfigError("l_tokens must be >= 2 (position 0 is the sentence slot)")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.k > min(self.m_spatial, self.n_temporal, self.z_alignment):
            raise ConfigError(
                f"k={self.k} exceeds an expert-axis extent "
                f"({self.m_spatial},{self.n_temporal},{self.z_alignment})"
            )
        if self.k_joint is not None and not (
            1 <= self.k_joint <= self.m_spatial * self.n_temporal
        ):
            raise ConfigError(f"k_joint={self.k_joint} outside [1, m*n]")
        if self.attn_heads != 1:
            raise ConfigError("this architecture uses a single attention head")
        if self.expert_hidden is not None and self.expert_hidden < 1:
            raise ConfigError("expert_hidden must be >= 1")
        if self.vanilla_moe and not (self.moe_perceptual_on or self.moe_alignment_on):
            raise ConfigError("vanilla_moe requires at least one routing path enabled")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def hidden(self) -> int:
        return self.expert_hidden if self.expert_hidden is not None else 2 * self.channels

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def ablation_config(base: ModelConfig, row: int) -> ModelConfig:
    """The seven switch combinations exercised in the ablation table."""
    rows = {
        1: dict(fusion_on=False, moe_perceptual_on=False, moe_alignment_on=False,
                vanilla_moe=False, st_heads_on=False, wl_heads_on=False),
        2: dict(fusion_on=True, moe_perceptual_on=False, moe_alignment_on=False,
                vanilla_moe=False, st_heads_on=False, wl_heads_on=False),
        3: dict(fusion_on=True, moe_perceptual_on=False, moe_alignment_on=False,
                vanilla_moe=False, st_heads_on=True, wl_heads_on=True),
        4: dict(fusion_on=True, moe_perceptual_on=False, moe_alignment_on=True,
                vanilla_moe=False, st_heads_on=False, wl_heads_on=True),
        5: dict(fusion_on=True, moe_perceptual_on=True, moe_alignment_on=False,
                vanilla_moe=False, st_heads_on=True, wl_heads_on=False),
        6: dict(fusion_on=True, moe_perceptual_on=True, moe_alignment_on=True,
                vanilla_moe=True, st_heads_on=True, wl_heads_on=True),
        7: dict(fusion_on=True, moe_perceptual_on=True, moe_alignment_on=True,
                vanilla_moe=False, st_heads_on=True, wl_heads_on=True),
    }
    if row not in rows:
        raise ConfigError(f"ablation row must be 1..7, got {row}")
    return replace(base, **rows[row])


@dataclass
class AttnBlock:
    """Single-head scaled dot-product attention with residual + layer norm."""

    q: Linear
    k: Linear
    v: Linear
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, rng, channels: int, dtype: str, scale: float) -> "AttnBlock":
        return cls(
            Linear.init(rng, channels, channels, dtype, scale),
            Linear.init(rng, channels, channels, dtype, scale),
            Linear.init(rng, channels, channels, dtype, scale),
            Tensor(np.ones(channels), dtype=dtype),
            Tensor(np.zeros(channels), dtype=dtype),
        )

    def named_params(self, prefix: str):
        yield from self.q.named_params(f"{prefix}.q")
        yield from self.k.named_params(f"{prefix}.k")
        yield from self.v.named_params(f"{prefix}.v")
        yield f"{prefix}.ln.gamma", self.gamma
        yield f"{prefix}.ln.beta", self.beta


@dataclass
class ModelParams:
    """All learnable tensors, grouped by component; absent when toggled off."""

    config: ModelConfig
    fusion_p: AttnBlock | None
    fusion_a: AttnBlock | None
    spatial_experts: list[Expert]
    temporal_experts: list[Expert]
    alignment_experts: list[Expert]
    perceptual_gate: Linear | None
    gate_spatial_1d: Linear | None
    gate_temporal_1d: Linear | None
    gate_overall_s_1d: Linear | None
    gate_overall_t_1d: Linear | None
    alignment_gate: Linear | None
    gate_word_1d: Linear | None
    gate_sentence_1d: Linear | None
    fc_spatial: Linear | None
    fc_temporal: Linear | None
    fc_overall: Linear
    fc_word: Linear | None
    fc_sentence: Linear

    def named_params(self):
        if self.fusion_p is not None:
            yield from self.fusion_p.named_params("fusion.video")
        if self.fusion_a is not None:
            yield from self.fusion_a.named_params("fusion.token")
        for i, e in enumerate(self.spatial_experts):
            yield from e.named_params(f"experts.spatial.{i}")
        for i, e in enumerate(self.temporal_experts):
            yield from e.named_params(f"experts.temporal.{i}")
        for i, e in enumerate(self.alignment_experts):
            yield from e.named_params(f"experts.alignment.{i}")
        named_linears = [
            ("gate.perceptual", self.perceptual_gate),
            ("gate.spatial_1d", self.gate_spatial_1d),
            ("gate.temporal_1d", self.gate_temporal_1d),
            ("gate.overall_spatial_1d", self.gate_overall_s_1d),
            ("gate.overall_temporal_1d", self.gate_overall_t_1d),
            ("gate.alignment", self.alignment_gate),
            ("gate.word_1d", self.gate_word_1d),
            ("gate.sentence_1d", self.gate_sentence_1d),
            ("head.spatial", self.fc_spatial),
            ("head.temporal", self.fc_temporal),
            ("head.overall", self.fc_overall),
            ("head.word", self.fc_word),
            ("head.sentence", self.fc_sentence),
        ]
        for name, lin in named_linears:
            if lin is not None:
                yield from lin.named_params(name)

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_params())


def init_params(config: ModelConfig, seed: int, scale: float = 0.05) -> ModelParams:
    """Deterministic parameter construction from one seed."""
    rng = np.random.default_rng(seed)
    dt = config.dtype
    C, h = config.channels, config.hidden
    vanilla = config.vanilla_moe

    fusion_p = AttnBlock.init(rng, C, dt, scale) if config.fusion_on else None
    fusion_a = AttnBlock.init(rng, C, dt, scale) if config.fusion_on else None

    spatial = temporal = []
    perceptual_gate = gate_s = gate_t = gate_os = gate_ot = None
    if config.moe_perceptual_on:
        spatial = [Expert.init(rng, C, h, dt, scale) for _ in range(config.m_spatial)]
        temporal = [Expert.init(rng, C, h, dt, scale) for _ in range(config.n_temporal)]
        if vanilla:
            gate_s = Linear.init(rng, C, config.m_spatial, dt, scale)
            gate_t = Linear.init(rng, C, config.n_temporal, dt, scale)
            gate_os = Linear.init(rng, C, config.m_spatial, dt, scale)
            gate_ot = Linear.init(rng, C, config.n_temporal, dt, scale)
        else:
            perceptual_gate = Linear.init(
                rng, C, config.m_spatial * config.n_temporal, dt, scale
            )

    alignment = []
    alignment_gate = gate_w = gate_sent = None
    if config.moe_alignment_on:
        alignment = [Expert.init(rng, C, h, dt, scale) for _ in range(config.z_alignment)]
        if vanilla:
            gate_w = Linear.init(rng, C, config.z_alignment, dt, scale)
            gate_sent = Linear.init(rng, C, config.z_alignment, dt, scale)
        else:
            alignment_gate = Linear.init(rng, C, config.z_alignment, dt, scale)

    fc_spatial = fc_temporal = None
    if config.st_heads_on:
        fc_spatial = Linear.init(rng, C, 1, dt, scale)
        fc_temporal = Linear.init(rng, C, 1, dt, scale)
    overall_width = 2 * C if config.moe_perceptual_on else C
    fc_overall = Linear.init(rng, overall_width, 1, dt, scale)
    fc_word = Linear.init(rng, C, 1, dt, scale) if config.wl_heads_on else None
    fc_sentence = Linear.init(rng, C, 1, dt, scale)

    return ModelParams(
        config=config,
        fusion_p=fusion_p,
        fusion_a=fusion_a,
        spatial_experts=spatial,
        temporal_experts=temporal,
        alignment_experts=alignment,
        perceptual_gate=perceptual_gate,
        gate_spatial_1d=gate_s,
        gate_temporal_1d=gate_t,
        gate_overall_s_1d=gate_os,
        gate_overall_t_1d=gate_ot,
        alignment_gate=alignment_gate,
        gate_word_1d=gate_w,
        gate_sentence_1d=gate_sent,
        fc_spatial=fc_spatial,
        fc_temporal=fc_temporal,
        fc_overall=fc_overall,
        fc_word=fc_word,
        fc_sentence=fc_sentence,
    )


@dataclass
class PredictionBundle:
    """Per-sample outputs; heads toggled off in the config come back None."""

    q_spatial: Tensor | None
    q_temporal: Tensor | None
    q_overall_percept: Tensor
    q_word: Tensor | None
    q_sentence: Tensor

    def as_floats(self) -> dict:
        out = {
            "q_overall_percept": self.q_overall_percept.item(),
            "q_sentence": self.q_sentence.item(),
        }
        out["q_spatial"] = None if self.q_spatial is None else self.q_spatial.item()
        out["q_temporal"] = None if self.q_temporal is None else self.q_temporal.item()
        out["q_word"] = None if self.q_word is None else self.q_word.tolist()
        return out


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize over the channel (last) axis with learnable scale/shift."""
    ax = x.ndim - 1
    keep = x.shape[:-1] + (1,)
    mean = tz.reshape(tz.mean_pool(x, (ax,)), keep)
    centered = tz.sub(x, mean)
    var = tz.reshape(tz.mean_pool(tz.square(centered), (ax,)), keep)
    normed = tz.div(centered, tz.sqrt(tz.add(var, LN_EPS)))
    return tz.add(tz.mul(normed, gamma), beta)


def cross_attention(query_src: Tensor, kv_src: Tensor, block: AttnBlock) -> Tensor:
    """Frame-synchronized attention: frame t queries attend within frame t.

    Middle axes of each (T, ..., C) source are flattened into positions;
    output restores the query's original shape after residual + layer norm.
    """
    if query_src.shape[-1] != kv_src.shape[-1]:
        raise ShapeError(
            f"channel widths differ: {query_src.shape[-1]} vs {kv_src.shape[-1]}"
        )
    if query_src.shape[0] != kv_src.shape[0]:
        raise ShapeError(
            f"frame counts differ: {query_src.shape[0]} vs {kv_src.shape[0]}"
        )
    t = query_src.shape[0]
    c = query_src.shape[-1]
    q_shape = query_src.shape
    q_pos = int(np.prod(q_shape[1:-1], dtype=np.int64)) if query_src.ndim > 2 else 1
    kv_pos = int(np.prod(kv_src.shape[1:-1], dtype=np.int64)) if kv_src.ndim > 2 else 1

    q_in = tz.reshape(query_src, (t, q_pos, c))
    kv_in = tz.reshape(kv_src, (t, kv_pos, c))
    q = block.q.apply(q_in)
    k = block.k.apply(kv_in)
    v = block.v.apply(kv_in)
    scores = tz.div(tz.matmul(q, tz.swapaxes(k, -1, -2)), math.sqrt(c))
    attn = tz.softmax(scores, axis=-1)
    mixed = tz.matmul(attn, v)
    out = _layer_norm(tz.add(q_in, mixed), block.gamma, block.beta)
    return tz.reshape(out, q_shape)


def _scalar_head(fc: Linear, x: Tensor) -> Tensor:
    return tz.take(fc.apply(x), 0, axis=0)


def perceptual_forward(f_p: Tensor, params: ModelParams):
    """Spatial, temporal, and overall scores from the fused video feature."""
    cfg = params.config
    want = (cfg.t_frames, cfg.height, cfg.width, cfg.channels)
    if f_p.shape != want:
        raise ShapeError(f"perceptual feature shape {f_p.shape}, expected {want}")
    try:
        return _perceptual(f_p, params)
    except NumericalError as exc:
        raise NumericalError(f"perceptual path: {exc}") from exc


def _perceptual(f_p: Tensor, params: ModelParams):
    cfg = params.config
    f_overall = tz.mean_pool(f_p, (0, 1, 2))

    q_spatial = q_temporal = None
    if cfg.moe_perceptual_on:
        if cfg.vanilla_moe:
            w_s = topk_renorm(
                vanilla_gating(f_overall, cfg.m_spatial, params.gate_spatial_1d), cfg.k
            )
            w_t = topk_renorm(
                vanilla_gating(f_overall, cfg.n_temporal, params.gate_temporal_1d), cfg.k
            )
            w_os = topk_renorm(
                vanilla_gating(f_overall, cfg.m_spatial, params.gate_overall_s_1d), cfg.k
            )
            w_ot = topk_renorm(
                vanilla_gating(f_overall, cfg.n_temporal, params.gate_overall_t_1d), cfg.k
            )
        else:
            gating = make_gating(
                f_overall, cfg.m_spatial, cfg.n_temporal, params.perceptual_gate
            )
            w_s, w_t, w_os, w_ot = structured_weights(gating, cfg.k, cfg.k_joint)

        r_os = mix_experts(w_os, params.spatial_experts, f_overall)
        r_ot = mix_experts(w_ot, params.temporal_experts, f_overall)
        q_overall = _scalar_head(params.fc_overall, tz.concat([r_os, r_ot], axis=0))

        if cfg.st_heads_on:
            f_spatial = tz.mean_pool(f_p, (0,))
            r_ss = mix_experts(w_s, params.spatial_experts, f_spatial)
            q_spatial = _scalar_head(params.fc_spatial, tz.mean_pool(r_ss, (0, 1)))
            f_temporal = tz.mean_pool(tz.mean_pool(f_p, (1, 2)), (0,))
            r_tt = mix_experts(w_t, params.temporal_experts, f_temporal)
            q_temporal = _scalar_head(params.fc_temporal, r_tt)
    else:
        q_overall = _scalar_head(params.fc_overall, f_overall)
        if cfg.st_heads_on:
            q_spatial = _scalar_head(
                params.fc_spatial, tz.mean_pool(tz.mean_pool(f_p, (0,)), (0, 1))
            )
            q_temporal = _scalar_head(
                params.fc_temporal, tz.mean_pool(tz.mean_pool(f_p, (1, 2)), (0,))
            )
    return q_spatial, q_temporal, q_overall


def alignment_forward(f_a: Tensor, token_mask: Sequence[bool], params: ModelParams):
    """Per-word scores (all token positions) and the sentence score.

    token_mask flags the real word positions 1..L-1; it gates the loss, not
    the forward computation, but an all-masked sample is rejected here.
    """
    cfg = params.config
    want = (cfg.t_frames, cfg.l_tokens, cfg.channels)
    if f_a.shape != want:
        raise ShapeError(f"alignment feature shape {f_a.shape}, expected {want}")
    mask = [bool(b) for b in token_mask]
    if len(mask) != cfg.l_tokens - 1:
        raise ShapeError(
            f"token mask length {len(mask)}, expected {cfg.l_tokens - 1} "
            "(one flag per non-sentence position)"
        )
    if not any(mask):
        raise DegenerateInputError("no unmasked word tokens in sample")
    try:
        return _alignment(f_a, params)
    except NumericalError as exc:
        raise NumericalError(f"alignment path: {exc}") from exc


def _alignment(f_a: Tensor, params: ModelParams):
    cfg = params.config
    d = cfg.l_tokens
    tokens = tz.mean_pool(f_a, (0,))
    cls_feat = tz.take(tokens, 0, axis=0)
    k_eff = min(cfg.k, cfg.z_alignment)

    q_word = None
    if cfg.moe_alignment_on:
        if cfg.vanilla_moe:
            if cfg.wl_heads_on:
                scores = []
                for i in range(d):
                    tok = tz.take(tokens, i, axis=0)
                    gate = vanilla_gating(tok, cfg.z_alignment, params.gate_word_1d)
                    mixed = mix_experts(
                        topk_renorm(gate, k_eff), params.alignment_experts, tok
                    )
                    scores.append(_scalar_head(params.fc_word, mixed))
                q_word = tz.stack(scores)
            sent_gate = vanilla_gating(
                cls_feat, cfg.z_alignment, params.gate_sentence_1d
            )
            r_sent = mix_experts(
                topk_renorm(sent_gate, k_eff), params.alignment_experts, cls_feat
            )
        else:
            gating = make_token_gating(tokens, cfg.z_alignment, params.alignment_gate)
            if cfg.wl_heads_on:
                scores = []
                for i in range(d):
                    row = tz.take(gating.W, i, axis=0)
                    tok = tz.take(tokens, i, axis=0)
                    mixed = mix_experts(
                        topk_renorm(row, k_eff), params.alignment_experts, tok
                    )
                    scores.append(_scalar_head(params.fc_word, mixed))
                q_word = tz.stack(scores)
            avg_row = tz.mean_pool(gating.W, (0,))
            r_sent = mix_experts(
                topk_renorm(avg_row, k_eff), params.alignment_experts, cls_feat
            )
        q_sentence = _scalar_head(params.fc_sentence, r_sent)
    else:
        if cfg.wl_heads_on:
            scores = []
            for i in range(d):
                scores.append(_scalar_head(params.fc_word, tz.take(tokens, i, axis=0)))
            q_word = tz.stack(scores)
        q_sentence = _scalar_head(params.fc_sentence, cls_feat)
    return q_word, q_sentence


def full_forward(f_vst: Tensor, f_blip: Tensor, token_mask: Sequence[bool],
                 params: ModelParams) -> PredictionBundle:
    """Fusion (when enabled) followed by both path forwards."""
    cfg = params.config
    want_v = (cfg.t_frames, cfg.height, cfg.width, cfg.channels)
    want_b = (cfg.t_frames, cfg.l_tokens, cfg.channels)
    if f_vst.shape != want_v:
        raise ShapeError(f"video feature shape {f_vst.shape}, expected {want_v}")
    if f_blip.shape != want_b:
        raise ShapeError(f"token feature shape {f_blip.shape}, expected {want_b}")
    if str(f_vst.dtype) != cfg.dtype or str(f_blip.dtype) != cfg.dtype:
        raise ShapeError(
            f"feature dtypes ({f_vst.dtype}, {f_blip.dtype}) differ from "
            f"configured {cfg.dtype}"
        )

    if cfg.fusion_on:
        try:
            f_p = cross_attention(f_vst, f_blip, params.fusion_p)
            f_a = cross_attention(f_blip, f_vst, params.fusion_a)
        except NumericalError as exc:
            raise NumericalError(f"fusion: {exc}") from exc
    else:
        f_p, f_a = f_vst, f_blip

    q_spatial, q_temporal, q_overall = perceptual_forward(f_p, params)
    q_word, q_sentence = alignment_forward(f_a, token_mask, params)
    return PredictionBundle(q_spatial, q_temporal, q_overall, q_word, q_sentence)
