"""How the text gate, the series gate and their sum route tokens to experts."""
import numpy as np

from dualgate.mmoe import ExpertFFN, GateParams, MmoeParams, gate, mmoe_forward
from dualgate.numerics import Tensor

# logits [3, 1, 2, 0] with k=2 pick experts 0 and 2; weights are raw softmax scores
dec = gate(np.array([1.0]), GateParams(Tensor([[3.0], [1.0], [2.0], [0.0]])), k=2)
print("selected", dec.selected, "weights", dec.weights.round(4), "sum", dec.weights.sum().round(4))

# tied scores prefer the lower index
print("all-zero logits, k=2 ->", gate(np.ones(3), GateParams(Tensor(np.zeros((4, 3)))), k=2).selected)

rng = np.random.default_rng(0)
R, N, D, Dt = 3, 4, 8, 6


def experts(m):
    return [ExpertFFN(Tensor(rng.normal(size=(D, 2 * D)) * 0.3), Tensor(np.zeros(2 * D)),
                      Tensor(rng.normal(size=(2 * D, D)) * 0.3), Tensor(np.zeros(D))) for _ in range(m)]


params = MmoeParams(experts(4), experts(4), GateParams(Tensor(rng.normal(size=(4, Dt)))),
                    GateParams(Tensor(rng.normal(size=(4, N * D)) * 0.2)), k_t=1, k_s=1)
tokens, hbar = rng.normal(size=(R, N, D)), rng.normal(size=(R, Dt))
out, decisions = mmoe_forward(Tensor(tokens), hbar, params)
print("output shape", out.shape)
for r in range(R):
    print(f"sample {r}: text expert {decisions['text'].selected[r, 0]}, "
          f"series expert {decisions['series'].selected[r, 0]}")

# change only the text embedding: the series choice stays, the text choice may move
_, moved = mmoe_forward(Tensor(tokens), -hbar, params)
print("text experts with negated text  :", moved["text"].selected.ravel())
print("series experts with negated text:", moved["series"].selected.ravel())
