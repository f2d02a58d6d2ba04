# %% [markdown]
# The four recurrent cells behind one interface, and their weight counts.

# %%
import numpy as np

from dla import cells
from dla.cells import CellState, init_cell, param_count
from dla.tensor import Tensor

C, r = 64, 4
for kind in ("dsu", "lstm", "dia", "rnn"):
    p = init_cell(kind, C, r, zero=True)
    print(f"{kind:5s} weights={param_count(p):6d}")
# DSU = 5C^2/r = 5120, LSTM = 8C^2 = 32768, DIA = 6C^2/r, RNN = 2C^2

# %%
# one DSU step: gates are sigmoids, the state is f*c + i*c_tilde
rng = np.random.default_rng(1)
p = init_cell("dsu", 8, 2, rng=rng)
y = Tensor(3.0 * rng.normal(size=(1, 8)))
c = Tensor(np.zeros((1, 8)))
gates = cells.dsu_gates(y, c, p)
print({k: np.round(v.data, 3) for k, v in gates.items() if k in ("i", "f")})
state = cells.step(p, y, CellState(c, None))
print("new state", np.round(state.c.data, 3))

# %%
# sigma squashes the previous state before the bottleneck; it is the
# ablation axis, so compare the four choices from a non-zero state
c1 = Tensor(rng.normal(size=(1, 8)))
for sigma in ("sigmoid", "tanh", "relu", "identity"):
    q = init_cell("dsu", 8, 2, sigma, np.random.default_rng(1))
    print(sigma, np.round(cells.step(q, y, CellState(c1, None)).c.data[0, :3], 3))
