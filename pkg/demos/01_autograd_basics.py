"""Tour of the float64 autodiff kernel: ops, the tape, and gradient checking.

Run: python3 demos/01_autograd_basics.py
"""

import numpy as np

from microvlm import tensor as T
from microvlm.tensor import Tensor, backward, recording

print("== forward ops are plain numpy underneath ==")
a = Tensor([[1.0, 2.0], [3.0, 4.0]])
b = Tensor([[0.0, 1.0], [1.0, 0.0]])
print("matmul:\n", T.matmul(a, b).data)
print("softmax of [0, ln 3]:", T.softmax(Tensor([0.0, np.log(3.0)])).data)

print("\n== recording a tape and replaying it backward ==")
w = Tensor(np.array([[0.5, -0.2], [0.1, 0.3]]), requires_grad=True)
x = Tensor(np.array([[1.0, 2.0]]))
with recording() as tape:
    h = T.gelu(T.matmul(x, w))
    loss = T.sum_all(T.mul(h, h))
print(f"tape recorded {len(tape)} ops, loss = {loss.item():.6f}")
backward(loss, tape)
print("dloss/dw =\n", w.grad)

print("\n== the same gradient by central finite differences ==")
h_step = 1e-5
fd = np.zeros_like(w.data)
for i in range(2):
    for j in range(2):
        for sign in (+1, -1):
            w.data[i, j] += sign * h_step
            out = T.gelu(T.matmul(x, w))
            fd[i, j] += sign * float((out.data ** 2).sum()) / (2 * h_step)
            w.data[i, j] -= sign * h_step
print("finite differences =\n", fd)
print("max |analytic - fd| =", np.abs(w.grad - fd).max())

print("\n== Adam takes one bias-corrected step ==")
from microvlm.optim import AdamState, adam_step

params = {"w": w}
updated, state = adam_step(params, {"w": w.grad}, AdamState(), lr=0.01)
print("step moved each weight by about lr, against the gradient sign:")
print((updated["w"].data - w.data) / 0.01)
