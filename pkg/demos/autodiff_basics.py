"""
Reverse-mode gradients and a finite-difference check
=====================================================

"""

import numpy as np

from bnlandscape import Graph, Rng, fd_grad
from bnlandscape.norm_layers import bn_composite

rng = Rng(0)

# a tiny two-layer network: tanh(X W1) W2, squared error against T
X = rng.normal(size=(6, 3))
T = rng.normal(size=(6, 2))
g = Graph()
w1 = g.root("w1")
w2 = g.root("w2")
h = (g.const(X) @ w1).tanh() @ w2
g.set_output((h - g.const(T)).square().sum())

W1 = rng.normal(size=(3, 4))
W2 = rng.normal(size=(4, 2))
loss = g.forward({"w1": W1, "w2": W2})
grads = g.backward()
print("loss", loss)

# central differences on the same graph, one weight matrix at a time
num = fd_grad(lambda w: g.forward({"w1": w, "w2": W2}), W1)
print("max |autodiff - finite diff| for w1:", np.abs(grads["w1"] - num).max())

# batch normalization spelled out in primitive ops is differentiable too
g2 = Graph()
y = g2.root("y")
z = bn_composite(g2, y, g2.const(np.ones(3)), g2.const(np.zeros(3)), eps=1e-5)
g2.set_output((z * g2.const(rng.normal(size=(5, 3)))).sum())
Y = rng.normal(size=(5, 3))
g2.forward({"y": Y})
print("BN input gradient column sums (should be ~0):", g2.backward()["y"].sum(axis=0))
