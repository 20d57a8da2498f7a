"""A short walk through the tape: build a graph, run backward, check it."""

import numpy as np

from mceiu import tensor as T

rng = np.random.default_rng(0)

# leaves that want gradients
W = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="W")
x = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="x")

h = T.tanh(x @ W)                        # [5, 3]
p = T.softmax(h, axis=-1)                # rows sum to one
loss = -T.reduce("mean", T.log(p[:, 0]))
print("loss", loss.item())

T.backward(loss)
print("dL/dW\n", W.grad)

# same thing again accumulates, so clear first
W.zero_grad()
x.zero_grad()


def f():
    return -T.reduce("mean", T.log(T.softmax(T.tanh(x @ W), axis=-1)[:, 0]))


err = T.grad_check(f, [W, x], eps=1e-5)
print(f"max relative error vs central differences: {err:.2e}")

# max routes its gradient to the first maximum
m = T.Tensor([1.0, 7.0, 7.0], requires_grad=True)
T.backward(T.reduce("max", m))
print("max mask", m.grad)

# no_grad keeps the tape empty
with T.no_grad():
    y = x @ W
print("recorded under no_grad?", y.node is not None)

# 32-bit mode is for speed only
with T.precision("f32"):
    print("dtype in f32 mode:", T.tensor([1.0]).data.dtype)
