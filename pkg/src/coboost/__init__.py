"""Data-free one-shot federated learning with a co-boosted client ensemble."""

from .config import ExperimentConfig, Toggles, desk_profile, load_config, reference_profile
from .datasets import ClientShard, DatasetHandle, PartitionSpec, load_dataset, partition
from .distill import DistillConfig, kd_loss
from .ensemble import WeightedEnsemble, WeightUpdateConfig, normalize_weights, update_weights
from .local import LocalTrainConfig, evaluate, train_client
from .models import ClientModel, ModelSpec, build_generator, build_model, forward_logits
from .orchestrator import RunResult, prepare_federation, run, run_co_boosting, run_fedavg, run_fedens, run_plain_distill, sweep
from .synthesis import SynthesisConfig, SyntheticStore, diversify

__version__ = "0.1.0"
