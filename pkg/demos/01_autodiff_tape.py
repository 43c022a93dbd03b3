"""Tour of the reverse-mode core: tapes, backward, accumulation.

Builds a two-layer scrap network by hand, checks one gradient entry
against a central finite difference, and shows how repeated backward
calls add into .grad (the behaviour gradient accumulation relies on).
"""

import numpy as np

from cpm2c import tensor as T
from cpm2c.tensor import Tape, Tensor, backward

rng = np.random.default_rng(6)

# every Tensor, intermediates included, is cast to the context dtype at
# creation, so the finite-difference comparison below needs the whole
# computation inside the 64-bit block
with T.precision("float64"):
    W = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
    x = Tensor(rng.standard_normal((3, 2)))
    target = Tensor(rng.standard_normal((4, 2)))

    def loss_value():
        """Mean squared error of relu(W x + b) against a fixed target."""
        hidden = T.relu(T.add(T.matmul(W, x), b))
        diff = T.sub(hidden, target)
        return T.reduce_mean(T.mul(diff, diff))

    # ops recorded inside a Tape block become differentiable; outside
    # they just compute
    with Tape():
        loss = loss_value()
    backward(loss)
    print(f"loss                {float(loss.data):.6f}")
    print(f"dL/dW[0,0] (tape)   {W.grad[0, 0]:+.10f}")

    # independent check: central finite difference on the same entry
    h = 1e-6
    keep = W.data[0, 0]
    W.data[0, 0] = keep + h
    up = float(loss_value().data)
    W.data[0, 0] = keep - h
    down = float(loss_value().data)
    W.data[0, 0] = keep
    print(f"dL/dW[0,0] (fd)     {(up - down) / (2 * h):+.10f}")

    # .grad accumulates across backward calls until cleared
    first = b.grad.copy()
    with Tape():
        loss = loss_value()
    backward(loss)
    print(f"b.grad doubled      {bool(np.allclose(b.grad, 2 * first))}")

    wide = Tensor(np.ones(2))

# outside the context new tensors drop back to the 32-bit default
print(f"64-bit context      {wide.data.dtype}")
print(f"default             {Tensor(np.ones(2)).data.dtype}")
