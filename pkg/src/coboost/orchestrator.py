"""End-to-end runs: client pre-training, ensemble boosting with distillation, baselines and sweeps."""

from __future__ import annotations

import json
import logging
import shutil
import time
import traceback
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .config import METHODS, ExperimentConfig, Toggles
from .datasets import ClientShard, DatasetHandle, load_dataset, partition, partition_to_json
from .distill import Distiller
from .ensemble import WeightedEnsemble, combine_logits, update_weights
from .local import evaluate, predict_logits, train_client
from .metrics import MetricsSink, atomic_write_text, emit_curves, emit_table
from .models import ClientModel, ModelSpec, build_generator, build_model, save_checkpoint
from .synthesis import SyntheticStore, Synthesizer, diversify, dump_sample_grid, grid_filename

logger = logging.getLogger(__name__)


class RunError(RuntimeError):
    """A sub-step failed; the message carries method, seed and epoch."""


def derive_seed(seed: int, stream: str, offset: int = 0) -> int:
    """Independent 63-bit seed for a named random stream of one run."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode()), int(offset)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_rng(seed: int, stream: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stream))


def resolve_spec(entry: Any, handle: DatasetHandle) -> ModelSpec:
    if isinstance(entry, ModelSpec):
        return entry
    if isinstance(entry, str):
        entry = {"arch": entry}
    return ModelSpec(
        arch=entry["arch"],
        num_classes=entry.get("num_classes", handle.num_classes),
        input_shape=tuple(entry.get("input_shape", handle.sample_shape)),
    )


# --------------------------------------------------------------------------- federation setup


@dataclass
class Federation:
    """Frozen pre-trained clients and the data they came from."""

    handle: DatasetHandle
    shards: list[ClientShard]
    clients: list[ClientModel]
    partition_json: str

    def test_client_logits(self) -> torch.Tensor:
        if not hasattr(self, "_test_logits"):
            self._test_logits = torch.stack([predict_logits(c, self.handle.test_x) for c in self.clients])
        return self._test_logits


_DATASETS: dict[tuple[str, str | None], DatasetHandle] = {}
_FEDERATIONS: dict[str, Federation] = {}


def get_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    key = (cfg.dataset, cfg.data_root)
    if key not in _DATASETS:
        _DATASETS[key] = load_dataset(cfg.dataset, cfg.data_root)
    return _DATASETS[key]


def _federation_key(cfg: ExperimentConfig, seed: int) -> str:
    d = cfg.to_dict()
    return json.dumps([d["dataset"], d["data_root"], d["partition"], d["client_specs"], d["local"], seed], sort_keys=True)


def prepare_federation(cfg: ExperimentConfig, seed: int, sink: MetricsSink | None = None, cache: bool = True) -> Federation:
    """Partition the data and pre-train every client for this seed.

    Results are memoized per process: all methods of one seed share the same
    frozen clients, which is what makes paired comparisons meaningful.
    """
    key = _federation_key(cfg, seed)
    if cache and key in _FEDERATIONS:
        return _FEDERATIONS[key]
    handle = get_dataset(cfg)
    pspec = cfg.partition.__class__(**{**cfg.partition.__dict__, "seed": derive_seed(seed, "partition", cfg.partition.seed)})
    shards = partition(handle, pspec)
    clients = []
    for k, (entry, shard) in enumerate(zip(cfg.client_arch_list(), shards)):
        spec = resolve_spec(entry, handle)
        model = build_model(spec, derive_seed(seed, "client_init", k), client_id=k)
        local_cfg = cfg.local.__class__(**{**cfg.local.__dict__, "seed": derive_seed(seed, "local_train", k)})
        clients.append(train_client(model, shard, handle, local_cfg, sink=sink))
    fed = Federation(handle, shards, clients, partition_to_json(pspec, shards))
    if cache:
        _FEDERATIONS[key] = fed
    return fed


def clear_caches() -> None:
    _DATASETS.clear()
    _FEDERATIONS.clear()


# --------------------------------------------------------------------------- results


@dataclass
class RunResult:
    method: str
    seed: int
    records: list[dict] = field(default_factory=list)
    final_server_acc: float | None = None
    final_ensemble_acc: float | None = None
    weight_trajectory: list[list[float]] = field(default_factory=list)
    wall_clock: float = 0.0
    toggles: str = ""
    row: str = ""
    run_dir: str | None = None
    error: str | None = None
    client_accs: list[float] = field(default_factory=list)

    @property
    def curve(self) -> list[float]:
        return [r["server_test_acc"] for r in self.records if r.get("server_test_acc") is not None]

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "toggles": self.toggles,
            "row": self.row,
            "final_server_acc": self.final_server_acc,
            "final_ensemble_acc": self.final_ensemble_acc,
            "client_accs": self.client_accs,
            "final_weights": self.weight_trajectory[-1] if self.weight_trajectory else None,
            "epochs": len(self.records),
            "error": self.error,
        }


def _row_label(cfg: ExperimentConfig) -> str:
    p = cfg.partition
    param = {"dirichlet": f"alpha={p.alpha}", "class_count": f"C={p.classes_per_client}", "lognormal_amount": f"sigma={p.sigma}"}[p.scheme]
    return f"{cfg.dataset} {p.scheme}({param}) n={p.num_clients}"


def _run_dir(cfg: ExperimentConfig, method: str, seed: int, tag: str = "") -> Path | None:
    if cfg.output_dir is None:
        return None
    name = f"{method}{'_' + tag if tag else ''}_seed{seed}"
    d = Path(cfg.output_dir) / name
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    atomic_write_text(d / "config.json", json.dumps({**cfg.to_dict(), "method": method, "seed": seed}, indent=2, sort_keys=True, default=str))
    return d


def _finish(result: RunResult, run_dir: Path | None, started: float) -> RunResult:
    result.wall_clock = time.perf_counter() - started
    if run_dir is not None:
        result.run_dir = str(run_dir)
        atomic_write_text(run_dir / "summary.json", json.dumps({**result.summary(), "wall_clock": result.wall_clock}, indent=2, sort_keys=True))
    return result


class _Recorder:
    def __init__(self, sink: MetricsSink | None):
        self.sink = sink
        self.records: list[dict] = []

    def add(self, record: dict) -> None:
        self.records.append(record)
        if self.sink is not None:
            epoch = record["epoch"]
            self.sink.append_many(epoch, {k: v for k, v in record.items() if k != "epoch"})


def _client_accs(fed: Federation) -> list[float]:
    y = fed.handle.test_y
    return [float((lg.argmax(1) == y).float().mean()) for lg in fed.test_client_logits()]


# --------------------------------------------------------------------------- boosted distillation


def run_co_boosting(
    cfg: ExperimentConfig,
    seed: int,
    federation: Federation | None = None,
    toggles: Toggles | None = None,
    method: str = "co_boosting",
) -> RunResult:
    """Run the full synthesis / diversify / reweight / distill loop.

    Each epoch, in order: train the generator on a fresh noise batch, append
    the result to the store, perturb the whole store (DHS), take one signed
    step on the ensemble weights over a batch of perturbed samples (EE), and
    distill one pass over the perturbed store into the server.  With GHS off
    the generator minimizes plain cross-entropy.

    Every random stream (noise, perturbation directions, weight batches,
    distillation order) is seeded independently, so flipping a toggle does
    not shift the randomness used by the other stages.
    """
    toggles = toggles or cfg.toggles
    started = time.perf_counter()
    fed = federation or prepare_federation(cfg, seed)
    handle = fed.handle
    run_dir = _run_dir(cfg, method, seed, "" if method == "plain_distill" else _toggle_tag(toggles))
    sink = MetricsSink(run_dir / "metrics.jsonl", run_id=f"{method}-{seed}") if run_dir else None
    rec = _Recorder(sink)
    if run_dir is not None:
        atomic_write_text(run_dir / "partition.json", fed.partition_json)

    ens = WeightedEnsemble(fed.clients)
    server = build_model(resolve_spec(cfg.server_spec, handle), derive_seed(seed, "server_init"))
    generator = build_generator(
        cfg.synth.noise_dim, handle.num_classes, handle.sample_shape,
        seed=derive_seed(seed, "generator_init"), mean=handle.mean, std=handle.std,
    )
    synth = Synthesizer(generator, cfg.synth)
    distiller = Distiller(server, cfg.distill)
    store = SyntheticStore(cfg.synth.store_capacity)
    rng_noise = torch_rng(seed, "generator_noise")
    rng_div = torch_rng(seed, "diversify")
    rng_wbatch = torch_rng(seed, "weight_batch")
    rng_distill = torch_rng(seed, "distill_order")
    test_logits = fed.test_client_logits()
    test_y = handle.test_y
    checksums = [c.checksum() for c in fed.clients]
    weights = [ens.weights.tolist()]

    epoch = -1
    try:
        for epoch in range(cfg.distill.epochs):
            gen_losses: list[float] = []
            batch = synth.step(ens, server, rng_noise, hard=toggles.GHS, on_loss=lambda _, v: gen_losses.append(v))
            store.append(batch.samples, batch.labels, epoch)
            x_store, y_store = store.tensors()
            x_use = diversify(x_store, y_store, ens, cfg.synth.epsilon, rng_div) if toggles.DHS else x_store

            if toggles.EE and len(ens) > 1:
                if cfg.weight_update.full_store:
                    idx = torch.arange(len(y_store))
                else:
                    idx = torch.randperm(len(y_store), generator=rng_wbatch)[: cfg.weight_update.batch_size]
                ens = update_weights(ens, x_use[idx], y_store[idx], cfg.weight_update)
            weights.append(ens.weights.tolist())

            kd = distiller.epoch(ens, x_use, rng_distill)

            ens_acc = float((combine_logits(test_logits, ens.weights).argmax(1) == test_y).float().mean())
            rec.add({
                "epoch": epoch,
                "gen_loss": gen_losses[-1] if gen_losses else None,
                "kd_loss": kd,
                "server_test_acc": evaluate(server, handle.test_x, test_y),
                "ensemble_test_acc": ens_acc,
                "w": ens.weights.tolist(),
                "store_size": len(store),
            })
            if run_dir is not None and cfg.grid_every and (epoch + 1) % cfg.grid_every == 0:
                dump_sample_grid(store, epoch, run_dir / "grids" / grid_filename(epoch + 1), handle.num_classes, handle.mean, handle.std)
    except Exception as exc:
        raise RunError(f"{method} seed={seed} failed at epoch {epoch}: {exc}") from exc
    finally:
        if sink is not None:
            sink.close()

    if [c.checksum() for c in fed.clients] != checksums:
        raise RunError("client parameters changed during the run")

    result = RunResult(
        method=method,
        seed=seed,
        records=rec.records,
        final_server_acc=rec.records[-1]["server_test_acc"] if rec.records else evaluate(server, handle.test_x, test_y),
        final_ensemble_acc=float((combine_logits(test_logits, ens.weights).argmax(1) == test_y).float().mean()),
        weight_trajectory=weights,
        toggles=toggles.label(),
        row=_row_label(cfg),
        client_accs=_client_accs(fed),
    )
    result.server = server  # type: ignore[attr-defined]
    result.ensemble = ens  # type: ignore[attr-defined]
    result.store = store  # type: ignore[attr-defined]
    if run_dir is not None:
        save_checkpoint(server, run_dir / "checkpoints" / "server.pt")
        if cfg.save_clients:
            for c in fed.clients:
                save_checkpoint(c, run_dir / "checkpoints" / f"client{c.client_id}.pt")
    return _finish(result, run_dir, started)


def _toggle_tag(t: Toggles) -> str:
    return "" if (t.GHS and t.DHS and t.EE) else t.label()


def run_plain_distill(cfg: ExperimentConfig, seed: int, federation: Federation | None = None) -> RunResult:
    """The main loop with every toggle off: plain-CE generator, no perturbation, uniform weights."""
    return run_co_boosting(cfg, seed, federation, toggles=Toggles(False, False, False), method="plain_distill")


# --------------------------------------------------------------------------- baselines


def average_parameters(models: Sequence[ClientModel], seed: int = 0) -> ClientModel:
    """Unweighted mean of every floating-point tensor in the state dicts."""
    specs = {m.spec for m in models}
    if len(specs) != 1:
        raise ValueError(f"parameter averaging needs identical architectures, got {sorted(s.arch for s in specs)}")
    avg = build_model(models[0].spec, seed)
    states = [m.net.state_dict() for m in models]
    merged = {}
    for name, t in states[0].items():
        if t.is_floating_point():
            merged[name] = torch.stack([s[name] for s in states]).mean(0)
        else:
            merged[name] = torch.stack([s[name] for s in states]).max(0).values
    avg.net.load_state_dict(merged)
    return avg.freeze()


def run_fedavg(cfg: ExperimentConfig, seed: int, federation: Federation | None = None) -> RunResult:
    if not cfg.homogeneous():
        raise ValueError("fedavg requires identical client architectures")
    started = time.perf_counter()
    fed = federation or prepare_federation(cfg, seed)
    run_dir = _run_dir(cfg, "fedavg", seed)
    server = average_parameters(fed.clients, derive_seed(seed, "server_init"))
    acc = evaluate(server, fed.handle.test_x, fed.handle.test_y)
    ens_acc = _uniform_ensemble_acc(fed)
    result = RunResult("fedavg", seed, records=[{"epoch": 0, "server_test_acc": acc, "ensemble_test_acc": ens_acc}],
                       final_server_acc=acc, final_ensemble_acc=ens_acc, row=_row_label(cfg), client_accs=_client_accs(fed))
    result.server = server  # type: ignore[attr-defined]
    if run_dir is not None:
        with MetricsSink(run_dir / "metrics.jsonl", run_id=f"fedavg-{seed}") as sink:
            sink.append_many(0, {"server_test_acc": acc, "ensemble_test_acc": ens_acc})
        save_checkpoint(server, run_dir / "checkpoints" / "server.pt")
    return _finish(result, run_dir, started)


def _uniform_ensemble_acc(fed: Federation) -> float:
    ens = WeightedEnsemble(fed.clients)
    return float((combine_logits(fed.test_client_logits(), ens.weights).argmax(1) == fed.handle.test_y).float().mean())


def run_fedens(cfg: ExperimentConfig, seed: int, federation: Federation | None = None) -> RunResult:
    """Uniform logit average of the clients, evaluated directly; nothing is trained."""
    started = time.perf_counter()
    fed = federation or prepare_federation(cfg, seed)
    run_dir = _run_dir(cfg, "fedens", seed)
    acc = _uniform_ensemble_acc(fed)
    result = RunResult("fedens", seed, records=[{"epoch": 0, "server_test_acc": acc, "ensemble_test_acc": acc}],
                       final_server_acc=acc, final_ensemble_acc=acc, row=_row_label(cfg), client_accs=_client_accs(fed))
    if run_dir is not None:
        with MetricsSink(run_dir / "metrics.jsonl", run_id=f"fedens-{seed}") as sink:
            sink.append_many(0, {"server_test_acc": acc, "ensemble_test_acc": acc})
    return _finish(result, run_dir, started)


_RUNNERS = {
    "co_boosting": run_co_boosting,
    "plain_distill": run_plain_distill,
    "fedavg": run_fedavg,
    "fedens": run_fedens,
}


def run(cfg: ExperimentConfig, seed: int, method: str | None = None, federation: Federation | None = None) -> RunResult:
    method = method or cfg.method
    if method not in _RUNNERS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return _RUNNERS[method](cfg, seed, federation=federation)


# --------------------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    results: list[RunResult]
    table: str
    methods: list[str]

    def by_method(self, method: str) -> list[RunResult]:
        return [r for r in self.results if r.method == method and r.error is None]


def sweep(configs: Sequence[ExperimentConfig] | ExperimentConfig, seeds: Sequence[int] | None = None) -> SweepResult:
    """Run every (method, seed) pair and tabulate mean±std server accuracy.

    A single config with ``methods`` set expands into one config per method.
    Failures are logged and show up as ``n/a`` cells rather than aborting.
    """
    if isinstance(configs, ExperimentConfig):
        base = configs
        configs = [base.replace(method=m, methods=None) for m in (base.methods or [base.method])]
    configs = list(configs)
    if not configs:
        raise ValueError("sweep needs at least one config")
    methods = list(dict.fromkeys(c.method for c in configs))
    results: list[RunResult] = []
    for cfg in configs:
        for seed in seeds if seeds is not None else cfg.seeds:
            try:
                results.append(run(cfg, seed))
            except Exception as exc:
                logger.error("%s seed %d failed: %s", cfg.method, seed, exc)
                results.append(RunResult(cfg.method, seed, row=_row_label(cfg), error="".join(traceback.format_exception_only(type(exc), exc)).strip()))
    table = emit_table(results, methods)
    out = configs[0].output_dir
    if out is not None:
        atomic_write_text(Path(out) / "summary.txt", table)
        emit_curves([r for r in results if r.error is None], Path(out) / "curves.png", methods)
    return SweepResult(results, table, methods)


def load_run_summaries(directory: str | Path) -> list[RunResult]:
    """Rebuild light RunResults from the ``summary.json``/``metrics.jsonl`` files under ``directory``."""
    from .metrics import read_records

    out = []
    for summary in sorted(Path(directory).glob("*/summary.json")):
        doc = json.loads(summary.read_text())
        records: dict[int, dict] = {}
        metrics = summary.parent / "metrics.jsonl"
        if metrics.exists():
            for r in read_records(metrics):
                if "/" not in r.name:
                    records.setdefault(r.epoch, {"epoch": r.epoch})[r.name] = r.value
        out.append(RunResult(
            method=doc["method"], seed=doc["seed"], records=[records[k] for k in sorted(records)],
            final_server_acc=doc.get("final_server_acc"), final_ensemble_acc=doc.get("final_ensemble_acc"),
            toggles=doc.get("toggles", ""), row=doc.get("row", ""), run_dir=str(summary.parent), error=doc.get("error"),
        ))
    return out


def report(directory: str | Path, methods: Sequence[str] | None = None) -> str:
    """Table plus curves for every run found under ``directory``."""
    results = load_run_summaries(directory)
    if not results:
        raise FileNotFoundError(f"no run summaries under {directory}")
    if methods is None:
        methods = [m for m in METHODS if any(r.method == m for r in results)]
    table = emit_table(results, methods)
    atomic_write_text(Path(directory) / "summary.txt", table)
    emit_curves(results, Path(directory) / "curves.png", methods)
    return table
