# %% [markdown]
# Reverse-mode autodiff on numpy arrays: build a small graph, backprop, and
# compare against central differences.

# %%
import numpy as np

from dla import tensor as T
from dla.tensor import Tensor, backward, reference_mode
from dla.verification import finite_diff_gradcheck

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True, name="x")
w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True, name="w")

# conv -> relu -> global average pool -> sum
out = T.tsum(T.global_average_pool(T.relu(T.conv2d(x, w, 1, 1))))
backward(out)
print("loss", out.item())
print("dL/dw shape", w.grad.shape)

# %%
# the tape gradient agrees with finite differences
err = finite_diff_gradcheck(lambda: T.tsum(T.tanh(T.conv2d(x, w, 1, 1))), [x, w])
print(f"max relative error {err:.2e}")

# %%
# reference_mode swaps the BLAS fast path for fixed-order loops, bit-for-bit
# equal to the naive triple loop
a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
with reference_mode():
    ref = T.matmul(Tensor(a), Tensor(b)).data
fast = T.matmul(Tensor(a), Tensor(b)).data
print("fast vs reference", np.abs(ref - fast).max())
