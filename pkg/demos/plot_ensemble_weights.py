"""
Reweighting an ensemble of skewed clients
=========================================

Clients trained on a few classes each are averaged at the logit level.  A
signed-gradient step on the ensemble weights, repeated on labelled inputs,
shifts mass toward the clients that are right about them.
"""

# %%
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from coboost.datasets import PartitionSpec, load_dataset, partition
from coboost.ensemble import WeightedEnsemble, WeightUpdateConfig, update_weights
from coboost.local import LocalTrainConfig, evaluate, train_client
from coboost.models import ModelSpec, build_model

torch.set_num_threads(1)
blobs = load_dataset("synthetic_blobs")
shards = partition(blobs, PartitionSpec("dirichlet", num_clients=6, alpha=0.1, seed=1))
spec = ModelSpec("mlp_tiny", blobs.num_classes, blobs.sample_shape)
clients = [train_client(build_model(spec, s.client_id), s, blobs, LocalTrainConfig(epochs=20, batch_size=32)) for s in shards]
for c in clients:
    print(f"client {c.client_id}: {int(c.metadata['num_samples'])} samples, "
          f"test acc {evaluate(c, blobs.test_x, blobs.test_y):.2f}")

# %%
# Uniform logit averaging already beats most single clients.
ens = WeightedEnsemble(clients)
print("uniform ensemble:", evaluate(ens, blobs.test_x, blobs.test_y))

# %%
# Here real test inputs stand in for the synthetic batches the full method
# would use.  Each step moves every weight by ``mu`` against the sign of its
# gradient, then clamps to [0, 1] and renormalizes.
cfg = WeightUpdateConfig(step_size=0.02)
gen = torch.Generator().manual_seed(0)
trace = [ens.weights.tolist()]
for _ in range(40):
    idx = torch.randint(0, len(blobs.test_y), (128,), generator=gen)
    ens = update_weights(ens, blobs.test_x[idx], blobs.test_y[idx], cfg)
    trace.append(ens.weights.tolist())
print("reweighted ensemble:", evaluate(ens, blobs.test_x, blobs.test_y))

fig, ax = plt.subplots(figsize=(5, 3.5))
ax.plot(trace)
ax.set_xlabel("update")
ax.set_ylabel("weight")
fig.tight_layout()
fig.savefig("weights.png")
