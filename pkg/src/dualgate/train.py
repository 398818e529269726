"""Adam training with early stopping, evaluation metrics, and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import WindowSet, normalize_batch
from .model import ModelConfig, as_tensors, forward_rows, init_params, model_forward, param_shapes, to_rows
from .numerics import Tape, backward, mean, square

__all__ = [
    "TrainConfig", "OptimizerState", "History", "Checkpoint", "CheckpointFormatError",
    "mse", "mae", "adam_step", "clip_by_global_norm", "loss_and_grads", "train_loop",
    "evaluate", "aggregate_horizons", "predict", "save_checkpoint", "load_checkpoint",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TIMICKPT"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 10
    patience: int = 3
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_mse,val_mae,best"]
        for i, (tl, vm, va) in enumerate(zip(self.train_loss, self.val_mse, self.val_mae)):
            lines.append(f"{i + 1},{tl!r},{vm!r},{va!r},{int(i == self.best_epoch)}")
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"

    def rounded(self) -> "Checkpoint":
        """Copy with parameters rounded through float32, as stored on disk."""
        return Checkpoint(self.config, OrderedDict(
            (k, v.astype("<f4").astype(np.float64)) for k, v in self.params.items()))


# ---------------------------------------------------------------- metrics

def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"prediction has {p.size} values, truth has {t.size}")
    if p.size == 0:
        raise ValueError("metrics need at least one value")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


# ---------------------------------------------------------------- optimization

def adam_step(params, grads, state: OptimizerState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises ``FloatingPointError`` before touching anything if a gradient is non-finite.
    """
    for k, g in grads.items():
        if k not in params or g.shape != params[k].shape:
            raise ValueError(f"gradient {k!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        params[k] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)


def clip_by_global_norm(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * f
    return norm


def _normalized_batch(x_in, x_out, cfg: ModelConfig):
    if cfg.revin:
        xn, st = normalize_batch(x_in)
        yn = (x_out - st.mean) / st.std
    else:
        xn, yn = x_in, x_out
    return to_rows(xn), to_rows(yn)


def loss_and_grads(params, x_in, x_out, hbar, cfg: ModelConfig):
    """L2 loss on normalized targets and its gradient for every parameter."""
    T = as_tensors(params, requires_grad=True)
    x_rows, y_rows = _normalized_batch(x_in, x_out, cfg)
    with Tape() as tape:
        pred, _, aux = forward_rows(x_rows, np.repeat(hbar, cfg.channels, axis=0), T, cfg)
        loss = mean(square(pred - y_rows))
        total = loss if aux is None else loss + aux
    g = backward(tape, total)
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    return float(loss.data), {k: g.get(T[k], zero[k]) for k in params}


def predict(params, cfg: ModelConfig, x_in, hbar, batch_size: int = 256, log=None) -> np.ndarray:
    out = []
    for s in range(0, len(x_in), batch_size):
        out.append(model_forward(x_in[s:s + batch_size], hbar[s:s + batch_size], params, cfg,
                                 log=log, sample_offset=s))
    return np.concatenate(out) if out else np.zeros((0, cfg.horizon, cfg.channels))


def _text_for(windows: WindowSet, text, cfg: ModelConfig) -> np.ndarray:
    if text is None:
        return np.zeros((len(windows), cfg.text_dim))
    if isinstance(text, np.ndarray):
        h = text
    else:
        h = text.for_windows(windows.end_ts)
    if h.shape != (len(windows), cfg.text_dim):
        raise ValueError(f"text embeddings have shape {h.shape}, expected ({len(windows)}, {cfg.text_dim})")
    return h


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, train: WindowSet, val: WindowSet,
               text=None, text_val=None) -> tuple[Checkpoint, History]:
    """Train with shuffled mini-batches and early stopping on validation MSE.

    ``text`` is a :class:`~dualgate.textenc.TextSource` used for both splits,
    or an array of embeddings aligned with ``train`` (then ``text_val`` holds
    the validation array). Returns the checkpoint of the best validation epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    params = init_params(model_cfg)
    hist = History()
    if train_cfg.max_epochs == 0:
        return Checkpoint(model_cfg, params), hist
    h_train = _text_for(train, text, model_cfg)
    h_val = _text_for(val, text if text_val is None else text_val, model_cfg)
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(train_cfg.seed)
    best, best_params, bad = math.inf, None, 0
    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(len(train))
        losses, weights = [], []
        for s in range(0, len(order), train_cfg.batch_size):
            idx = order[s:s + train_cfg.batch_size]
            loss, grads = loss_and_grads(params, train.x_in[idx], train.x_out[idx], h_train[idx], model_cfg)
            clip_by_global_norm(grads, train_cfg.clip_norm)
            adam_step(params, grads, state, train_cfg)
            losses.append(loss)
            weights.append(len(idx))
        pred = predict(params, model_cfg, val.x_in, h_val)
        vm, va = mse(pred, val.x_out), mae(pred, val.x_out)
        hist.train_loss.append(float(np.average(losses, weights=weights)))
        hist.val_mse.append(vm)
        hist.val_mae.append(va)
        log.info("epoch %d train %.6f val mse %.6f mae %.6f", epoch + 1, hist.train_loss[-1], vm, va)
        if vm < best:
            best, bad = vm, 0
            hist.best_epoch = epoch
            best_params = OrderedDict((k, v.copy()) for k, v in params.items())
        else:
            bad += 1
            if bad >= train_cfg.patience:
                break
    return Checkpoint(model_cfg, best_params), hist


def evaluate(ckpt: Checkpoint, split: WindowSet, text=None, log=None) -> dict:
    """MSE and MAE of denormalized forecasts on ``split``."""
    cfg = ckpt.config
    if split.x_in.shape[1:] != (cfg.lookback, cfg.channels) or split.x_out.shape[1:] != (cfg.horizon, cfg.channels):
        raise ValueError(f"split windows {split.x_in.shape[1:]}/{split.x_out.shape[1:]} do not match "
                         f"checkpoint ({cfg.lookback}, {cfg.channels})/({cfg.horizon}, {cfg.channels})")
    pred = predict(ckpt.params, cfg, split.x_in, _text_for(split, text, cfg), log=log)
    return {"horizon": cfg.horizon, "mse": mse(pred, split.x_out), "mae": mae(pred, split.x_out),
            "n_windows": len(split)}


def aggregate_horizons(results: list[dict]) -> dict:
    """Unweighted mean of per-horizon metrics."""
    if not results:
        raise ValueError("nothing to aggregate")
    return {"horizons": [r["horizon"] for r in results],
            "mse": float(np.mean([r["mse"] for r in results])),
            "mae": float(np.mean([r["mae"] for r in results]))}


# ---------------------------------------------------------------- checkpoint files

class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, params, config: ModelConfig) -> None:
    """``TIMICKPT`` | u32 LE header length | JSON header | f32 LE arrays."""
    arrays, offset, blobs = [], 0, []
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"format_version": FORMAT_VERSION, "model_config": config.to_dict(),
                         "arrays": arrays}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", ModelConfig]:
    """Validate the whole file before building any array."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise CheckpointFormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if 12 + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: header length {hlen} runs past end of file ({len(raw)} bytes)")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        version = header["format_version"]
        cfg = ModelConfig.from_dict(header["model_config"])
        arrays = header["arrays"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header: {e}") from e
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format_version {version}")
    want = [(name, list(shape)) for name, shape, _ in param_shapes(cfg)]
    got = [(a.get("name"), list(a.get("shape", []))) for a in arrays]
    if got != want:
        raise CheckpointFormatError(f"{path}: array names/shapes do not match the stored model config")
    body = raw[12 + hlen:]
    expected = 0
    for a in arrays:
        if a["offset"] != expected:
            raise CheckpointFormatError(f"{path}: array {a['name']!r} at offset {a['offset']}, expected {expected}")
        expected += 4 * int(np.prod(a["shape"], dtype=np.int64))
    if expected != len(body):
        raise CheckpointFormatError(f"{path}: arrays need {expected} bytes, payload has {len(body)}")
    params = OrderedDict()
    for a in arrays:
        n = int(np.prod(a["shape"], dtype=np.int64))
        params[a["name"]] = np.frombuffer(body, dtype="<f4", count=n, offset=a["offset"]) \
            .astype(np.float64).reshape(a["shape"])
    return params, cfg
