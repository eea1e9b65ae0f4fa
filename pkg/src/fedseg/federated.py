"""Federated orchestration: local training, weighted averaging, rounds, twins.

The server never sees client volumes; the only things crossing the
client -> server boundary are a ParameterStore and the training sample count
n_k. Aggregation sums in ascending client id order with an extended-precision
accumulator, so serial and parallel execution produce bit-identical results
and averaging K identical stores returns them unchanged.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import AugmentConfig, ClientDataset, augment
from .losses import composite_loss, one_hot
from .model import ModelConfig, forward
from .optim import AdamState, adam_step
from .params import ParameterStore
from .tensor import Tape, Tensor, backward


@dataclass
class TrainStats:
    epochs: int
    batches: int
    first_epoch_loss: float
    final_epoch_loss: float


@dataclass
class RoundLog:
    round_index: int
    participants: list[int]
    n_k: dict[int, int]
    weights: dict[int, float]
    first_epoch_loss: dict[int, float]
    final_epoch_loss: dict[int, float]
    epochs: int
    wall_time: float
    metric_snapshots: list[str] = field(default_factory=list)

    def to_json_dict(self, include_wall_time: bool = False) -> dict:
        d = {
            "round": self.round_index,
            "participants": self.participants,
            "n_k": {str(k): v for k, v in self.n_k.items()},
            "weights": {str(k): v for k, v in self.weights.items()},
            "first_epoch_loss": {str(k): v for k, v in self.first_epoch_loss.items()},
            "final_epoch_loss": {str(k): v for k, v in self.final_epoch_loss.items()},
            "epochs": self.epochs,
            "metric_snapshots": self.metric_snapshots,
        }
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class GlobalState:
    round_index: int
    params: ParameterStore
    logs: list[RoundLog] = field(default_factory=list)


@dataclass(frozen=True)
class ParticipationPolicy:
    """Deterministic per-round participant subset."""

    fraction: float = 1.0
    seed: int = 0

    def select(self, round_index: int, client_ids: Sequence[int]) -> list[int]:
        ids = sorted(client_ids)
        if self.fraction >= 1.0:
            return ids
        k = max(1, round(self.fraction * len(ids)))
        rng = np.random.default_rng([self.seed, 0x9A, round_index])
        return sorted(rng.choice(ids, size=k, replace=False).tolist())


@dataclass(frozen=True)
class FedConfig:
    epochs: int = 5
    batch_size: int = 2
    lr: float = 1e-4
    loss_mode: str = "dice+ce"
    participation: ParticipationPolicy = field(default_factory=ParticipationPolicy)
    workers: int = 0  # 0 = serial; >0 = process pool over clients
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dt_epochs: int = 1


def derive_client_seed(global_seed: int, round_index: int, client_id: int) -> list[int]:
    """Seed material for one client's local pass in one round."""
    return [global_seed, 0x10C, round_index, client_id]


def local_train(
    params_in: ParameterStore,
    dataset: ClientDataset,
    epochs: int,
    batch_size: int,
    seed,
    model_config: ModelConfig,
    loss_mode: str = "dice+ce",
    lr: float = 1e-4,
    augment_config: Optional[AugmentConfig] = None,
) -> tuple[ParameterStore, TrainStats]:
    """Epochs x batches of augment -> forward -> loss -> backward -> Adam.

    The input store is deep-copied; optimizer state is fresh. Batch order and
    augmentation draws derive from ``seed`` alone, so identical inputs give a
    bit-identical result.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not dataset.train:
        raise ValueError(f"client {dataset.client_id}: empty training split")
    seed = list(np.atleast_1d(seed).astype(np.int64))
    aug_cfg = augment_config or AugmentConfig()

    params = params_in.copy()
    state = AdamState(params, lr=lr)
    n = len(dataset.train)
    first_epoch_loss = final_epoch_loss = float("nan")
    batches = 0
    for epoch in range(epochs):
        order = np.random.default_rng(seed + [1, epoch]).permutation(n)
        losses = []
        for b0 in range(0, n, batch_size):
            idxs = order[b0 : b0 + batch_size]
            vols = [
                augment(
                    dataset.train[i],
                    np.random.default_rng(seed + [2, epoch, int(i)]),
                    aug_cfg,
                )
                for i in idxs
            ]
            x = Tensor(np.stack([v.image for v in vols]))
            y = one_hot(np.stack([v.label for v in vols]))
            with Tape():
                logits = forward(params, x, model_config, mode="train")
                loss = composite_loss(logits, y, mode=loss_mode)
                backward(loss)
            adam_step(params, state)
            losses.append(float(loss.data))
            batches += 1
        mean_loss = float(np.mean(losses))
        if epoch == 0:
            first_epoch_loss = mean_loss
        final_epoch_loss = mean_loss
    return params, TrainStats(epochs, batches, first_epoch_loss, final_epoch_loss)


def fedavg_aggregate(
    updates: Sequence[tuple[ParameterStore, int]],
) -> ParameterStore:
    """Dataset-size weighted mean of stores (trainables AND buffers).

    Accumulates n_k-scaled values in 80-bit (or wider) floats before the
    single division by N: exact for integer n_k with N <= 2048, which makes
    identical inputs aggregate to a bit-identical output.
    """
    if not updates:
        raise ValueError("fedavg_aggregate: no updates")
    first = updates[0][0]
    for store, n_k in updates[1:]:
        mismatch = first.compatible_with(store)
        if mismatch is not None:
            raise ValueError(f"fedavg_aggregate: incompatible stores: {mismatch}")
    total = 0
    for _, n_k in updates:
        if n_k <= 0:
            raise ValueError(f"fedavg_aggregate: non-positive sample count {n_k}")
        total += int(n_k)

    out = ParameterStore()
    for name, t in first.items():
        acc = np.zeros(t.data.shape, dtype=np.longdouble)
        for store, n_k in updates:
            acc += np.longdouble(int(n_k)) * store[name].data
        out.add(name, (acc / np.longdouble(total)).astype(np.float64),
                buffer=first.is_buffer(name))
    return out


def _train_job(args):
    (params, dataset, epochs, batch_size, seed, model_config, loss_mode, lr,
     aug_cfg) = args
    updated, stats = local_train(
        params, dataset, epochs, batch_size, seed, model_config,
        loss_mode=loss_mode, lr=lr, augment_config=aug_cfg,
    )
    return dataset.client_id, updated, stats


def run_round(
    state: GlobalState,
    clients: Sequence[ClientDataset],
    model_config: ModelConfig,
    fed: FedConfig,
    global_seed: int = 0,
) -> GlobalState:
    """One synchronous round: broadcast, parallel local training over the
    participant subset, dataset-size weighted aggregation, log append."""
    by_id = {c.client_id: c for c in clients}
    participants = fed.participation.select(state.round_index, list(by_id))
    if not participants:
        raise ValueError(f"round {state.round_index}: zero participants")

    t0 = time.perf_counter()
    jobs = [
        (
            state.params,
            by_id[cid],
            fed.epochs,
            fed.batch_size,
            derive_client_seed(global_seed, state.round_index, cid),
            model_config,
            fed.loss_mode,
            fed.lr,
            fed.augment,
        )
        for cid in participants  # ascending ids: fixed aggregation order
    ]
    if fed.workers > 0:
        with ProcessPoolExecutor(max_workers=fed.workers) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    updates = [(store, by_id[cid].n_k) for cid, store, _ in results]
    new_params = fedavg_aggregate(updates)
    total = sum(n for _, n in updates)
    log = RoundLog(
        round_index=state.round_index,
        participants=participants,
        n_k={cid: by_id[cid].n_k for cid in participants},
        weights={cid: by_id[cid].n_k / total for cid in participants},
        first_epoch_loss={cid: s.first_epoch_loss for cid, _, s in results},
        final_epoch_loss={cid: s.final_epoch_loss for cid, _, s in results},
        epochs=fed.epochs,
        wall_time=time.perf_counter() - t0,
    )
    return GlobalState(state.round_index + 1, new_params, state.logs + [log])


def fine_tune_digital_twin(
    global_params: ParameterStore,
    client: ClientDataset,
    model_config: ModelConfig,
    fed: FedConfig,
    global_seed: int = 0,
    epochs: Optional[int] = None,
    start_params: Optional[ParameterStore] = None,
) -> tuple[ParameterStore, TrainStats]:
    """Client-personalized model: fine-tune the aggregated weights locally.

    ``start_params`` switches the starting point (e.g. the previous twin);
    the default is the current global store, which is never modified.
    """
    e = fed.dt_epochs if epochs is None else epochs
    if e < 1:
        raise ValueError(f"digital twin epochs must be >= 1, got {e}")
    origin = start_params if start_params is not None else global_params
    return local_train(
        origin,
        client,
        e,
        fed.batch_size,
        [global_seed, 0xD7, client.client_id],
        model_config,
        loss_mode=fed.loss_mode,
        lr=fed.lr,
        augment_config=fed.augment,
    )
