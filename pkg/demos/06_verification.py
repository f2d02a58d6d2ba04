# %% [markdown]
# The independent checks: brute-force attention, the whole-network gradient
# check and the depth-scaling timing probe.

# %%
import numpy as np

from dla import attention as A
from dla import tensor as T
from dla.backbone import NetworkConfig, build_network
from dla.tensor import Tensor
from dla.verification import brute_force_attention_oracle, gradcheck_report, timing_scaling_probe

rng = np.random.default_rng(0)
cfg = A.AttentionConfig("mrla-b", 8, 2, value_init="normal")
mod = A.LayerAttention(cfg, 3, rng)
cache = A.TokenCache()
for l in range(1, 4):
    x = Tensor(rng.normal(size=(1, 8, 2, 2)))
    for store, t in zip((cache.xs, cache.ys, cache.qs, cache.ks, cache.vs), (x, *A.compute_tokens(x, l, mod.proj, cfg))):
        store.append(t)
o, _ = A.attention_base(cache, 3, cfg)
loops = brute_force_attention_oracle(cache.qs[-1].data, [k.data for k in cache.ks], [v.data for v in cache.vs], 3, cfg.key_dim)
print("attention vs scalar loops", np.abs(o.data - loops).max())

# %%
net = build_network(NetworkConfig(variant="dla-l", widths=[8], blocks=2, resolution=4, heads=2,
                                  value_init="normal", residual_gamma=1.0))
x = rng.normal(size=(2, 3, 4, 4))
labels = np.array([3, 7])
report = gradcheck_report(lambda: T.cross_entropy(net.forward(x, "train"), labels) * 2.0, net.parameters())
print(f"tiny DLA-L network: {report.checked} coordinates, max relative error {report.max_error:.2e}")

# %%
# forward context grows with depth, a single refresh gate does not
print(timing_scaling_probe([8, 16, 32], repeats=20).to_text())
