"""Reverse-mode gradients on the tape, checked against central differences."""
import numpy as np

from dualgate.model import as_tensors, forward_rows, init_params, ModelConfig
from dualgate.numerics import Tape, Tensor, backward, grad_check, mean, softmax, square, getitem

# a scalar function of two inputs
x = Tensor([0.0, 0.0], requires_grad=True)
with Tape() as tape:
    y = getitem(softmax(x), 0)
print("d softmax(x)[0] / dx at x=[0, 0]:", backward(tape, y)[x])

# a whole forecaster: fix the expert choices first so the finite differences
# see the same routing as the analytic pass
cfg = ModelConfig(lookback=8, horizon=4, patch_len=4, d_model=8, n_heads=2,
                  n_text_experts=2, n_series_experts=2, k_text=1, k_series=1, text_dim=8)
params = init_params(cfg)
rng = np.random.default_rng(0)
x_rows, y_rows, hbar = rng.normal(size=(2, 8)), rng.normal(size=(2, 4)), rng.normal(size=(2, 8))
_, decisions, _ = forward_rows(x_rows, hbar, as_tensors(params), cfg)
fixed = [{b: d.selected for b, d in dec.items()} for dec in decisions]

T = as_tensors(params, requires_grad=True)
with Tape() as tape:
    pred, _, _ = forward_rows(x_rows, hbar, T, cfg, fixed)
    loss = mean(square(pred - y_rows))
g = backward(tape, loss)
analytic = {k: g.get(T[k], np.zeros_like(v)) for k, v in params.items()}


def loss_value():
    p, _, _ = forward_rows(x_rows, hbar, as_tensors(params), cfg, fixed)
    return float(np.mean((p.data - y_rows) ** 2))


rows = grad_check(loss_value, params, analytic, n_coords=20, rng=1)
for name, idx, a, n, err in rows[:8]:
    print(f"{name:28s} {str(idx):10s} analytic {a:+.6e}  numeric {n:+.6e}  rel err {err:.1e}")
print("worst relative error over", len(rows), "coordinates:", max(r[4] for r in rows))
