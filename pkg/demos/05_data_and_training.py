# %% [markdown]
# Synthetic 10-class patterns, then a short DLA-L training run. The full
# 30-epoch, 5000-image protocol lives in the acceptance suite; this one
# is shrunk to finish in about a minute.

# %%
import numpy as np

from dla.backbone import NetworkConfig
from dla.datagen import DatasetSpec, encode_dataset, generate_synthetic
from dla.training import TrainConfig, accuracy_table, run_seeds

train, test = generate_synthetic(DatasetSpec(n_train=600, n_test=200, seed=1))
print("train", train.images.shape, "per class", train.class_counts().tolist())
print("container bytes", len(encode_dataset(train)))

# %%
cfg = TrainConfig(epochs=4, milestones=[3], seed=0)
rows = []
for variant in (None, "dla-l"):
    net_cfg = NetworkConfig(variant=variant, widths=[8, 16, 32], blocks=2)
    accs = run_seeds(net_cfg, cfg, train, test, seeds=[0, 1], progress=print)
    rows.append((variant or "none", 0, accs))
print(accuracy_table(rows))
