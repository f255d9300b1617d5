"""
Checking a hand-written backward pass
=====================================

The model runs on a small tape-based autodiff.  This walks through
recording a graph, backpropagating and comparing against central
differences, the same comparison the test suite makes for every layer.
"""

import numpy as np

import posegauss.tensorcore as tc
from posegauss.tensorcore import GRUParams, conv_gru_step, grad_check

rng = np.random.default_rng(0)

# a scalar function of two leaves
a = tc.param(rng.uniform(0.5, 1.5, size=(3,)))
b = tc.param(rng.uniform(0.5, 1.5, size=(3,)))
with tc.Tape() as tape:
    y = tc.tsum(tc.log(a) * b + tc.sigmoid(a * b))
tc.backprop(tape, output=y)
print("d/da analytic", a.grad)

# the same derivative from differences
eps = 1e-6
num = np.zeros(3)
for i in range(3):
    a.data[i] += eps
    up = tc.tsum(tc.log(a) * b + tc.sigmoid(a * b)).data
    a.data[i] -= 2 * eps
    down = tc.tsum(tc.log(a) * b + tc.sigmoid(a * b)).data
    a.data[i] += eps
    num[i] = (up - down) / (2 * eps)
print("d/da numeric ", num)

# grad_check does this for every coordinate and reports the worst relative error
gru = GRUParams.init(4, 3, rng, dtype=np.float64)
h = tc.param(rng.normal(size=(6, 6, 4)))
x = tc.param(rng.normal(size=(6, 6, 3)))
w = rng.normal(size=(6, 6, 4))
leaves = [h, x, gru.update.weight, gru.reset.weight, gru.candidate.weight]
err = grad_check(lambda: tc.tsum(conv_gru_step(h, x, gru) * w), leaves)
print(f"convolutional GRU step: worst relative error {err:.2e}")
