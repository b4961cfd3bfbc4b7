"""
Reverse-mode autodiff and gradient checking
===========================================

Build a tiny two-layer network from the autodiff primitives, backpropagate
an MSE loss, and compare every gradient with central finite differences.
"""

import numpy as np

from soundalign import autodiff as ad

rng = np.random.default_rng(0)

# leaf tensors that want gradients
x = ad.Tensor(rng.normal(size=(5, 3)))
w1 = ad.Tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True)
w2 = ad.Tensor(rng.normal(size=(8, 2)) * 0.5, requires_grad=True)
y = rng.normal(size=(5, 2))


def loss_fn():
    hidden = ad.gelu(ad.matmul(x, w1))
    return ad.mse(ad.matmul(hidden, w2), y)


loss = loss_fn()
loss.backward()
print(f"loss = {loss.item():.6f}")
print("dL/dw2 row 0:", np.round(w2.grad[0], 5))

# the recorded graph, in evaluation order
for node in ad.trace(loss):
    print(f"  {node.op:<12} {node.inputs} -> {node.output}")

# central differences, eps = 1e-5; relative error is measured on norms
err = ad.gradcheck(loss_fn, [w1, w2], eps=1e-5)
print(f"gradcheck relative error: {err:.2e}")
