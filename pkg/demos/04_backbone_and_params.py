# %% [markdown]
# The mini ResNet backbone with attention after every block, its parameter
# ledger and the checkpoint format.

# %%
import tempfile
from pathlib import Path

import numpy as np

from dla.backbone import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from dla.verification import attachment_formula, format_ledger, param_count_oracle, plain_network_formula

plain = build_network(NetworkConfig())
dla = build_network(NetworkConfig(variant="dla-l"))
print("plain", plain.param_count(), "closed form", plain_network_formula(plain.cfg))
print("dla-l", dla.param_count(), "attachment", attachment_formula(dla.cfg))

# %%
ledger = param_count_oracle(dla)
print("\n".join(l for l in format_ledger(ledger).splitlines() if "stage3.attn" in l))

# %%
x = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
logits = dla.forward(x, "eval")
print("logits", logits.shape)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "net.bin"
    save_checkpoint(dla, path)
    again = load_checkpoint(path)
    print("reloaded logits equal:", np.array_equal(again.forward(x, "eval").data, logits.data))
