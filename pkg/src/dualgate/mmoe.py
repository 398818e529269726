"""Gated mixtures of position-wise feed-forward experts.

Two routing signals share one dispatch path:

* text-routed (``tmoe_forward``): one gate decision per sample from the pooled
  text embedding, applied to every patch token;
* series-routed (``smoe_forward``): one gate decision per sample from the
  concatenation of all patch tokens;

and ``mmoe_forward`` adds the two. ``vanilla_moe_forward`` routes each token on
its own and exists for ablation runs.

Top-k weights are raw softmax scores over all experts; they are not
renormalized over the selected subset unless ``renormalize=True``. Selection
indices are constants under differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, gelu, matmul, mul, reshape, scatter_rows, softmax, sum_, transpose

__all__ = [
    "ExpertFFN", "GateParams", "GateDecision", "MmoeParams", "select_top_k",
    "gate", "mix_experts", "tmoe_forward", "smoe_forward", "mmoe_forward",
    "vanilla_moe_forward", "load_balance_loss",
]


@dataclass
class ExpertFFN:
    """Two-layer GELU network ``D -> d_ff -> D``."""
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __call__(self, h: Tensor) -> Tensor:
        return matmul(gelu(matmul(h, self.W1) + self.b1), self.W2) + self.b2

    @property
    def dim(self) -> int:
        return self.W1.shape[0]


@dataclass
class GateParams:
    W: Tensor  # (M, input_dim)

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] < 1:
            raise ValueError(f"gate weight must be (M, input_dim) with M >= 1, got {self.W.shape}")

    @property
    def n_experts(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class GateDecision:
    """Scores over all experts, the selected indices (ascending), and their weights.

    Arrays carry any leading batch axes of the routing input.
    """
    scores: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    score_tensor: Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class MmoeParams:
    text_experts: list[ExpertFFN]
    series_experts: list[ExpertFFN]
    W_t: GateParams
    W_s: GateParams
    k_t: int
    k_s: int
    renormalize: bool = False

    def __post_init__(self):
        if not 1 <= self.k_t <= len(self.text_experts):
            raise ValueError(f"k_t={self.k_t} outside [1, {len(self.text_experts)}]")
        if not 1 <= self.k_s <= len(self.series_experts):
            raise ValueError(f"k_s={self.k_s} outside [1, {len(self.series_experts)}]")


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores along the last axis, ascending.

    Equal scores prefer the lower index.
    """
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


@dataclass
class _Routing:
    scores: Tensor
    weights: Tensor  # scores masked to the selection, shape (..., M)
    mask: np.ndarray
    decision: GateDecision = field(repr=False)


def _route(logits: Tensor, k: int, renormalize: bool, selected: np.ndarray | None) -> _Routing:
    m = logits.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} outside [1, {m}]")
    scores = softmax(logits, axis=-1)
    if selected is None:
        selected = select_top_k(scores.data, k)
    elif selected.shape != scores.shape[:-1] + (k,):
        raise ValueError(f"fixed selection has shape {selected.shape}, expected {scores.shape[:-1] + (k,)}")
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    weights = mul(scores, mask.astype(np.float64))
    if renormalize:
        weights = weights / sum_(weights, axis=-1, keepdims=True)
    decision = GateDecision(scores=scores.data, selected=selected,
                            weights=np.take_along_axis(weights.data, selected, axis=-1),
                            score_tensor=scores)
    return _Routing(scores, weights, mask, decision)


def gate(route_input, params: GateParams, k: int, renormalize: bool = False,
         selected: np.ndarray | None = None) -> GateDecision:
    """Softmax gate over ``params.W @ route_input`` with top-``k`` selection.

    ``route_input`` may carry leading batch axes.
    """
    x = route_input if isinstance(route_input, Tensor) else Tensor(route_input)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"route input has dim {x.shape[-1]}, gate expects {params.input_dim}")
    return _gate_logits(x, params, k, renormalize, selected).decision


def _gate_logits(x: Tensor, params: GateParams, k, renormalize, selected) -> _Routing:
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    logits = matmul(x, transpose(params.W))
    if squeeze:
        logits = reshape(logits, (params.n_experts,))
    return _route(logits, k, renormalize, selected)


def mix_experts(h: Tensor, weights: Tensor, mask: np.ndarray, experts: list[ExpertFFN]) -> Tensor:
    """``out[g] = sum_i weights[g, i] * experts[i](h[g])`` over selected ``i`` only.

    ``h`` is (G, ..., D); ``weights`` and ``mask`` are (G, M). Each expert is
    evaluated only on the rows that selected it.
    """
    n_rows = h.shape[0]
    tail = (1,) * (h.ndim - 1)
    out = None
    for i, ffn in enumerate(experts):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            continue
        if rows.size == n_rows:
            y = mul(ffn(h), reshape(weights[:, i], (n_rows,) + tail))
        else:
            y = mul(ffn(h[rows]), reshape(weights[rows, i], (rows.size,) + tail))
            y = scatter_rows(y, rows, n_rows)
        out = y if out is None else out + y
    if out is None:
        out = Tensor(np.zeros(h.shape))
    return out


def tmoe_forward(tokens: Tensor, hbar, experts: list[ExpertFFN], W_t: GateParams, k: int,
                 renormalize: bool = False, selected: np.ndarray | None = None):
    """Text-routed mixture. ``tokens`` (R, N, D); ``hbar`` (R, D_text).

    Returns ``(output, GateDecision)``; the decision has one row per sample.
    """
    hbar = hbar if isinstance(hbar, Tensor) else Tensor(hbar)
    if hbar.ndim != 2 or hbar.shape[0] != tokens.shape[0]:
        raise ValueError(f"text embedding batch {hbar.shape} does not match tokens {tokens.shape}")
    if hbar.shape[1] != W_t.input_dim:
        raise ValueError(f"text embedding dim {hbar.shape[1]} != gate input dim {W_t.input_dim}")
    r = _gate_logits(hbar, W_t, k, renormalize, selected)
    return mix_experts(tokens, r.weights, r.mask, experts), r.decision


def smoe_forward(tokens: Tensor, experts: list[ExpertFFN], W_s: GateParams, k: int,
                 renormalize: bool = False, selected: np.ndarray | None = None):
    """Series-routed mixture; the gate sees ``[h_1, ..., h_N]`` concatenated."""
    n_rows, n, d = tokens.shape
    if n * d != W_s.input_dim:
        raise ValueError(f"{n} patches of dim {d} do not match series gate input dim {W_s.input_dim}")
    route = reshape(tokens, (n_rows, n * d))
    r = _gate_logits(route, W_s, k, renormalize, selected)
    return mix_experts(tokens, r.weights, r.mask, experts), r.decision


def mmoe_forward(tokens: Tensor, hbar, params: MmoeParams, selected: dict | None = None):
    """Sum of the text-routed and series-routed mixtures.

    Returns ``(output, {"text": GateDecision, "series": GateDecision})``.
    """
    selected = selected or {}
    t_out, t_dec = tmoe_forward(tokens, hbar, params.text_experts, params.W_t, params.k_t,
                                params.renormalize, selected.get("text"))
    s_out, s_dec = smoe_forward(tokens, params.series_experts, params.W_s, params.k_s,
                                params.renormalize, selected.get("series"))
    return t_out + s_out, {"text": t_dec, "series": s_dec}


def vanilla_moe_forward(tokens: Tensor, experts: list[ExpertFFN], W_tok: GateParams, k: int,
                        renormalize: bool = False, selected: np.ndarray | None = None):
    """Per-token routing: every token picks its own experts from ``W_tok @ h``.

    The decision arrays have shape (R, N, ...).
    """
    n_rows, n, d = tokens.shape
    if d != W_tok.input_dim:
        raise ValueError(f"token dim {d} != gate input dim {W_tok.input_dim}")
    flat = reshape(tokens, (n_rows * n, d))
    if selected is not None:
        selected = selected.reshape(n_rows * n, -1)
    r = _gate_logits(flat, W_tok, k, renormalize, selected)
    out = reshape(mix_experts(flat, r.weights, r.mask, experts), (n_rows, n, d))
    dec = r.decision
    m = W_tok.n_experts
    return out, GateDecision(dec.scores.reshape(n_rows, n, m), dec.selected.reshape(n_rows, n, k),
                             dec.weights.reshape(n_rows, n, k), score_tensor=dec.score_tensor)


def load_balance_loss(decision: GateDecision) -> Tensor:
    """``M * sum_i f_i * P_i`` with ``f_i`` the selection fraction and ``P_i`` the mean score."""
    scores = decision.score_tensor
    m = scores.shape[-1]
    flat = reshape(scores, (-1, m))
    mask = np.zeros(flat.shape)
    np.put_along_axis(mask, decision.selected.reshape(flat.shape[0], -1), 1.0, axis=-1)
    frac = mask.mean(axis=0)
    mean_p = sum_(flat, axis=0) / float(flat.shape[0])
    return sum_(mul(mean_p, frac * m))
