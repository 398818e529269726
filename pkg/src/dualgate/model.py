"""Patch transformer forecaster with a text/series gated expert sublayer.

Each channel is forecast independently by the same network::

    normalize -> patchify -> patch embed (+ position) ->
    n_layers x [ LN(h + attn(h)) -> LN(h + moe(h, text)) ] -> flatten head -> denormalize

Parameters live in an ordered ``dict[str, np.ndarray]``; the forward pass wraps
them in :class:`~dualgate.numerics.Tensor` objects so the same code serves
inference and training.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import normalize_batch, denormalize
from .mmoe import (ExpertFFN, GateParams, MmoeParams, load_balance_loss, mmoe_forward,
                   smoe_forward, tmoe_forward, vanilla_moe_forward)
from .numerics import Tensor, layer_norm, matmul, reshape, scale, softmax, transpose

__all__ = [
    "ABLATIONS", "ModelConfig", "init_params", "param_shapes", "param_count",
    "patchify", "patch_embed", "self_attention", "encoder_block", "forecast_head",
    "forward_rows", "model_forward", "to_rows", "from_rows",
]

ABLATIONS = ("none", "no_tmoe", "no_smoe", "vanilla_moe")


@dataclass
class ModelConfig:
    lookback: int = 32
    horizon: int = 8
    channels: int = 1
    patch_len: int = 8
    patch_stride: int | None = None  # None: non-overlapping patches
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 1
    n_text_experts: int = 4
    n_series_experts: int = 4
    k_text: int = 2
    k_series: int = 2
    text_dim: int = 32
    d_ff: int | None = None  # None: 2 * d_model
    revin: bool = True
    pos_embed: bool = True
    ablation: str = "none"
    renormalize: bool = False
    balance_coef: float = 0.0
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.patch_stride is None:
            self.patch_stride = self.patch_len
        if self.d_ff is None:
            self.d_ff = 2 * self.d_model
        for name in ("lookback", "horizon", "channels", "patch_len", "patch_stride", "d_model",
                     "n_heads", "n_layers", "n_text_experts", "n_series_experts", "text_dim", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.patch_len > self.lookback:
            raise ValueError(f"patch_len={self.patch_len} exceeds lookback={self.lookback}")
        if not 1 <= self.k_text <= self.n_text_experts:
            raise ValueError(f"k_text={self.k_text} outside [1, {self.n_text_experts}]")
        if not 1 <= self.k_series <= self.n_series_experts:
            raise ValueError(f"k_series={self.k_series} outside [1, {self.n_series_experts}]")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")

    @property
    def n_patches(self) -> int:
        return (self.lookback - self.patch_len) // self.patch_stride + 1

    @property
    def n_token_experts(self) -> int:
        return self.n_text_experts + self.n_series_experts

    @property
    def k_token(self) -> int:
        return self.k_text + self.k_series

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters

def _expert_shapes(prefix, d, d_ff):
    return [(f"{prefix}.W1", (d, d_ff), d), (f"{prefix}.b1", (d_ff,), d),
            (f"{prefix}.W2", (d_ff, d), d_ff), (f"{prefix}.b2", (d,), d_ff)]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int | str]]:
    """``(name, shape, init)`` in storage order; ``init`` is the fan-in or a tag."""
    D, N, P, S = cfg.d_model, cfg.n_patches, cfg.patch_len, cfg.horizon
    out = [("patch.W", (P, D), P), ("patch.b", (D,), P)]
    if cfg.pos_embed:
        out.append(("pos", (N, D), "pos"))
    for l in range(cfg.n_layers):
        pre = f"layers.{l}"
        for m in ("q", "k", "v", "o"):
            out += [(f"{pre}.attn.W{m}", (D, D), D), (f"{pre}.attn.b{m}", (D,), D)]
        for ln in ("ln1", "ln2"):
            out += [(f"{pre}.{ln}.gamma", (D,), "one"), (f"{pre}.{ln}.beta", (D,), "zero")]
        if cfg.ablation == "vanilla_moe":
            out.append((f"{pre}.token.gate", (cfg.n_token_experts, D), D))
            for i in range(cfg.n_token_experts):
                out += _expert_shapes(f"{pre}.token.expert{i}", D, cfg.d_ff)
            continue
        if cfg.ablation != "no_tmoe":
            out.append((f"{pre}.text.gate", (cfg.n_text_experts, cfg.text_dim), cfg.text_dim))
            for i in range(cfg.n_text_experts):
                out += _expert_shapes(f"{pre}.text.expert{i}", D, cfg.d_ff)
        if cfg.ablation != "no_smoe":
            out.append((f"{pre}.series.gate", (cfg.n_series_experts, N * D), N * D))
            for i in range(cfg.n_series_experts):
                out += _expert_shapes(f"{pre}.series.expert{i}", D, cfg.d_ff)
    out += [("head.W", (N * D, S), N * D), ("head.b", (S,), N * D)]
    return out


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars."""
    D, N, P, S, F = cfg.d_model, cfg.n_patches, cfg.patch_len, cfg.horizon, cfg.d_ff
    expert = 2 * D * F + F + D
    if cfg.ablation == "vanilla_moe":
        moe = cfg.n_token_experts * (expert + D)
    else:
        moe = 0
        if cfg.ablation != "no_tmoe":
            moe += cfg.n_text_experts * (expert + cfg.text_dim)
        if cfg.ablation != "no_smoe":
            moe += cfg.n_series_experts * (expert + N * D)
    layer = 4 * (D * D + D) + 4 * D + moe
    return (P * D + D + (N * D if cfg.pos_embed else 0) + cfg.n_layers * layer
            + N * D * S + S)


def init_params(cfg: ModelConfig) -> "OrderedDict[str, np.ndarray]":
    """Uniform(+-1/sqrt(fan_in)) for affine maps, unit/zero LayerNorm, small position table."""
    rng = np.random.default_rng(cfg.seed)
    params = OrderedDict()
    for name, shape, init in param_shapes(cfg):
        if init == "one":
            params[name] = np.ones(shape)
        elif init == "zero":
            params[name] = np.zeros(shape)
        elif init == "pos":
            params[name] = rng.uniform(-0.02, 0.02, size=shape)
        else:
            bound = 1.0 / math.sqrt(init)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------- building blocks

def patchify(x: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    """Split the last axis into windows ``[j*stride, j*stride + patch_len)``.

    A trailing remainder shorter than ``patch_len`` is dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if patch_len > L:
        raise ValueError(f"patch length {patch_len} exceeds series length {L}")
    if stride < 1:
        raise ValueError("patch stride must be >= 1")
    n = (L - patch_len) // stride + 1
    idx = stride * np.arange(n)[:, None] + np.arange(patch_len)[None, :]
    return x[..., idx]


def patch_embed(patches, W: Tensor, b: Tensor) -> Tensor:
    """Shared affine map R^P -> R^D applied to every patch (last axis)."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(f"patch embed shapes disagree: patches {patches.shape}, W {W.shape}, b {b.shape}")
    return matmul(patches, W) + b


def self_attention(h: Tensor, p: dict, n_heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention over tokens ``h`` (R, N, D), no mask."""
    R, N, D = h.shape
    if D % n_heads:
        raise ValueError(f"model dim {D} not divisible by {n_heads} heads")
    dh = D // n_heads

    def heads(t):
        return transpose(reshape(t, (R, N, n_heads, dh)), (0, 2, 1, 3))

    q = heads(matmul(h, p["Wq"]) + p["bq"])
    k = heads(matmul(h, p["Wk"]) + p["bk"])
    v = heads(matmul(h, p["Wv"]) + p["bv"])
    att = softmax(scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), axis=-1)
    ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (R, N, D))
    out = matmul(ctx, p["Wo"]) + p["bo"]
    return (out, att.data) if return_weights else out


def _experts(T, prefix, m):
    return [ExpertFFN(T[f"{prefix}.expert{i}.W1"], T[f"{prefix}.expert{i}.b1"],
                      T[f"{prefix}.expert{i}.W2"], T[f"{prefix}.expert{i}.b2"]) for i in range(m)]


def _moe(h: Tensor, hbar, T, l: int, cfg: ModelConfig, fixed: dict | None):
    pre = f"layers.{l}"
    fixed = fixed or {}
    if cfg.ablation == "vanilla_moe":
        out, dec = vanilla_moe_forward(h, _experts(T, f"{pre}.token", cfg.n_token_experts),
                                       GateParams(T[f"{pre}.token.gate"]), cfg.k_token,
                                       cfg.renormalize, fixed.get("token"))
        return out, {"token": dec}
    if cfg.ablation == "none":
        mp = MmoeParams(_experts(T, f"{pre}.text", cfg.n_text_experts),
                        _experts(T, f"{pre}.series", cfg.n_series_experts),
                        GateParams(T[f"{pre}.text.gate"]), GateParams(T[f"{pre}.series.gate"]),
                        cfg.k_text, cfg.k_series, cfg.renormalize)
        return mmoe_forward(h, hbar, mp, fixed)
    if cfg.ablation == "no_tmoe":
        out, dec = smoe_forward(h, _experts(T, f"{pre}.series", cfg.n_series_experts),
                                GateParams(T[f"{pre}.series.gate"]), cfg.k_series,
                                cfg.renormalize, fixed.get("series"))
        return out, {"series": dec}
    out, dec = tmoe_forward(h, hbar, _experts(T, f"{pre}.text", cfg.n_text_experts),
                            GateParams(T[f"{pre}.text.gate"]), cfg.k_text,
                            cfg.renormalize, fixed.get("text"))
    return out, {"text": dec}


def encoder_block(h: Tensor, hbar, T: dict, l: int, cfg: ModelConfig, fixed: dict | None = None):
    """Post-norm block: ``LN(h + attn(h))`` then ``LN(. + moe(., hbar))``.

    Returns ``(tokens, {branch: GateDecision})``.
    """
    pre = f"layers.{l}"
    attn = {k: T[f"{pre}.attn.{k}"] for k in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}
    h1 = layer_norm(h + self_attention(h, attn, cfg.n_heads),
                    T[f"{pre}.ln1.gamma"], T[f"{pre}.ln1.beta"], cfg.ln_eps)
    m, decisions = _moe(h1, hbar, T, l, cfg, fixed)
    h2 = layer_norm(h1 + m, T[f"{pre}.ln2.gamma"], T[f"{pre}.ln2.beta"], cfg.ln_eps)
    return h2, decisions


def forecast_head(tokens: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Row-major flatten of (R, N, D) tokens followed by one affine map to S outputs."""
    R, N, D = tokens.shape
    if W.shape[0] != N * D or W.shape[1] != b.shape[0]:
        raise ValueError(f"head shapes disagree: tokens {tokens.shape}, W {W.shape}, b {b.shape}")
    return matmul(reshape(tokens, (R, N * D)), W) + b


# ---------------------------------------------------------------- full model

def to_rows(x: np.ndarray) -> np.ndarray:
    """(B, L, C) -> (B*C, L); row ``b*C + c`` is channel ``c`` of sample ``b``."""
    B, L, C = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(B * C, L)


def from_rows(rows: np.ndarray, batch: int, channels: int) -> np.ndarray:
    return rows.reshape(batch, channels, -1).transpose(0, 2, 1)


def as_tensors(params, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad)
            for k, v in params.items()}


def forward_rows(x_rows: np.ndarray, hbar_rows: np.ndarray, T: dict[str, Tensor],
                 cfg: ModelConfig, fixed: list | None = None):
    """Core network on per-channel rows (already normalized if applicable).

    Returns ``(pred (R, S) Tensor, decisions per layer, aux_loss or None)``.
    ``fixed`` replays earlier expert selections (one dict per layer).
    """
    if x_rows.shape[-1] != cfg.lookback:
        raise ValueError(f"lookback {x_rows.shape[-1]} does not match config {cfg.lookback}")
    if hbar_rows.shape != (x_rows.shape[0], cfg.text_dim):
        raise ValueError(f"text embeddings {hbar_rows.shape} do not match ({x_rows.shape[0]}, {cfg.text_dim})")
    patches = patchify(x_rows, cfg.patch_len, cfg.patch_stride)
    h = patch_embed(patches, T["patch.W"], T["patch.b"])
    if cfg.pos_embed:
        h = h + T["pos"]
    hbar = Tensor(hbar_rows)
    decisions, aux = [], None
    for l in range(cfg.n_layers):
        h, dec = encoder_block(h, hbar, T, l, cfg, None if fixed is None else fixed[l])
        decisions.append(dec)
        if cfg.balance_coef > 0:
            for d in dec.values():
                term = scale(load_balance_loss(d), cfg.balance_coef)
                aux = term if aux is None else aux + term
    return forecast_head(h, T["head.W"], T["head.b"]), decisions, aux


def model_forward(x_in, hbar, params, cfg: ModelConfig, log=None, sample_offset: int = 0) -> np.ndarray:
    """Forecast ``(S, C)`` from ``x_in`` (L, C), or a batch (B, L, C) -> (B, S, C).

    ``hbar`` is the text embedding, (D_text,) or (B, D_text), shared by all
    channels. When ``log`` is given, gate decisions are recorded with sample
    ids starting at ``sample_offset``.
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    hbar = np.asarray(hbar, dtype=np.float64)
    single = x_in.ndim == 2
    if single:
        x_in, hbar = x_in[None], hbar[None]
    B, L, C = x_in.shape
    if C != cfg.channels:
        raise ValueError(f"input has {C} channels, config expects {cfg.channels}")
    if cfg.revin:
        xn, stats = normalize_batch(x_in)
    else:
        xn, stats = x_in, None
    T = params if all(isinstance(v, Tensor) for v in params.values()) else as_tensors(params)
    pred, decisions, _ = forward_rows(to_rows(xn), np.repeat(hbar, C, axis=0), T, cfg)
    if log is not None:
        samples = sample_offset + np.repeat(np.arange(B), C)
        chans = np.tile(np.arange(C), B)
        for l, dec in enumerate(decisions):
            for branch, d in dec.items():
                if branch != "token":
                    log.record(samples, chans, l, branch, d)
    out = from_rows(pred.data, B, C)
    if stats is not None:
        out = denormalize(out, stats)
    return out[0] if single else out
