"""
Non-IID client splits
=====================

Three ways of dealing a labelled dataset out to simulated clients, drawn as
client-by-class count matrices.
"""

# %%
# The built-in ``synthetic_blobs`` set needs no download: ten classes of
# 8x8 single-channel images, 2000 for training and 500 for testing.
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from coboost.datasets import PartitionSpec, load_dataset, partition

blobs = load_dataset("synthetic_blobs")
print(blobs.name, blobs.sample_shape, len(blobs.train_y), "train samples")

# %%
# A Dirichlet split draws, for every class, client proportions from
# ``Dir(alpha)``.  Small ``alpha`` leaves most clients with a handful of classes.
specs = {
    "Dir(0.05)": PartitionSpec("dirichlet", num_clients=10, alpha=0.05, seed=0),
    "Dir(1.0)": PartitionSpec("dirichlet", num_clients=10, alpha=1.0, seed=0),
    "C=2 classes": PartitionSpec("class_count", num_clients=10, classes_per_client=2, seed=0),
    "lognormal sizes": PartitionSpec("lognormal_amount", num_clients=10, sigma=0.8, seed=0),
}
fig, axes = plt.subplots(1, len(specs), figsize=(14, 3.2))
for ax, (title, spec) in zip(axes, specs.items()):
    shards = partition(blobs, spec)
    counts = np.stack([s.class_histogram for s in shards])
    ax.imshow(counts, cmap="viridis")
    ax.set_title(title)
    ax.set_xlabel("class")
    ax.set_ylabel("client")
fig.tight_layout()
fig.savefig("partitions.png")

# %%
# Shards are disjoint and cover the training set exactly, whatever the scheme.
shards = partition(blobs, specs["Dir(0.05)"])
all_idx = np.concatenate([s.indices for s in shards])
print("covered:", len(np.unique(all_idx)) == len(blobs.train_y) == len(all_idx))
