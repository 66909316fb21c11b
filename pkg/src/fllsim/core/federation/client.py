"""
Simulated client: local SGD on the contrastive objective.

Clients run either in-process or in a multiprocessing pool. Pool workers
receive the training images and the training settings once, at start-up;
each task then carries the round's model snapshot, the plan and the client's
own seed and shard, so the result never depends on which worker ran it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, List, Optional

import numpy as np

from fllsim.core.datasets import Partition
from fllsim.core.encoder import LayeredEncoder, set_trainable
from fllsim.core.errors import NonFiniteError
from fllsim.core.federation.schedule import RoundPlan
from fllsim.core.objective import contrastive_loss, make_views
from fllsim.core.resources import ResourceSample
from fllsim.core.tensor import WORD_BYTES, ParamId, Tape, backward, count_ops
from fllsim.io.schema import AugmentConfig, ExperimentConfig

IMAGES: Optional[np.ndarray] = None
SETTINGS: Optional["TrainSettings"] = None


@dataclass(frozen=True)
class TrainSettings:
    """What a client needs to know about local training."""

    batch_size: int
    local_steps: int
    client_lr: float
    temperature: float
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    accounting: str = "full"

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "TrainSettings":
        fed = cfg.federation
        return cls(
            batch_size=fed.batch_size,
            local_steps=fed.local_steps,
            client_lr=fed.client_lr,
            temperature=cfg.temperature,
            augment=cfg.augment,
            accounting=cfg.accounting,
        )


@dataclass
class ClientUpdate:
    """
    Result of one client's local work.

    Attributes
    ----------
    client_id : int
    deltas : dict
        Parameter id -> (final - initial) for the trainable layers and head.
    num_examples : int
        Examples processed: local_steps * batch_size.
    resources : ResourceSample
        Measured bytes, FLOPs and peak words.
    loss_mean : float
        Mean contrastive loss over local steps (NaN when no step ran).
    resampled : bool
        True when the shard was smaller than a batch and was sampled with
        replacement.
    failed : bool
        True when training hit a non-finite value; the update is excluded
        from aggregation.
    """

    client_id: int
    deltas: Dict[ParamId, np.ndarray]
    num_examples: int
    resources: ResourceSample
    loss_mean: float = float("nan")
    resampled: bool = False
    failed: bool = False
    error: Optional[str] = None


def client_train(
    snapshot: LayeredEncoder,
    plan: RoundPlan,
    images: np.ndarray,
    settings: TrainSettings,
    client_id: int = 0,
    seed: int = 0,
    indices: Optional[np.ndarray] = None,
) -> ClientUpdate:
    """
    Run local SGD on a private copy of `snapshot` and return the deltas.

    Parameters
    ----------
    snapshot : LayeredEncoder
        Model restricted to the plan's kept layers and the tap layer's head.
        It is never modified.
    plan : RoundPlan
        Kept, trainable and tap layers for this round.
    images : np.ndarray
        The client's shard, [n, C, H, W].
    settings : TrainSettings
    client_id, seed : int
        Identity and private seed of the client.
    indices : np.ndarray, optional
        Global dataset indices of the shard rows (recorded in batches).
    """
    if len(images) == 0:
        raise ValueError(f"client {client_id}: empty shard")

    model = snapshot.copy()
    set_trainable(model, plan.trainable, include_head=True)
    trainable = model.trainable_parameters()
    initial = {pid: t.data.copy() for pid, t in trainable.items()}
    model_words = model.num_words()

    if settings.accounting == "cached":
        down_words = sum(t.size for t in trainable.values())
    else:
        down_words = model_words

    rng = np.random.default_rng(seed)
    resampled = len(images) < settings.batch_size
    row_ids = np.arange(len(images)) if indices is None else np.asarray(indices)

    flops_forward = flops_backward = 0
    peak_words = model_words
    losses: List[float] = []

    try:
        for _ in range(settings.local_steps):
            picked = rng.choice(len(images), size=settings.batch_size, replace=resampled)
            batch = make_views(images[picked], settings.augment, rng, indices=row_ids[picked])

            with count_ops() as counter, Tape() as tape:
                loss = contrastive_loss(model, batch, plan.kept, plan.tap_layer, settings.temperature)
                grads = backward(loss, tape)

            flops_forward += counter.forward_flops
            flops_backward += tape.backward_flops
            grad_words = sum(g.size for g in grads.values())
            peak_words = max(peak_words, model_words + tape.activation_words + grad_words)

            lr = np.float32(settings.client_lr)
            for pid, t in trainable.items():
                g = grads.get(pid)
                if g is not None:
                    t.data = (t.data - lr * g).astype(t.data.dtype)
                    if not np.all(np.isfinite(t.data)):
                        raise NonFiniteError(f"parameter {pid} diverged")
            losses.append(loss.item())
    except NonFiniteError as e:
        return ClientUpdate(
            client_id=client_id,
            deltas={},
            num_examples=0,
            resources=ResourceSample(bytes_down=WORD_BYTES * down_words),
            resampled=resampled,
            failed=True,
            error=str(e),
        )

    deltas = {pid: trainable[pid].data - initial[pid] for pid in trainable}
    upload_words = sum(d.size for d in deltas.values())
    return ClientUpdate(
        client_id=client_id,
        deltas=deltas,
        num_examples=settings.local_steps * settings.batch_size,
        resources=ResourceSample(
            bytes_down=WORD_BYTES * down_words,
            bytes_up=WORD_BYTES * upload_words,
            flops_forward=flops_forward,
            flops_backward=flops_backward,
            peak_memory_words=peak_words,
        ),
        loss_mean=float(np.mean(losses)) if losses else float("nan"),
        resampled=resampled,
    )


# Worker pool

def init_worker(images: np.ndarray, settings: TrainSettings) -> None:
    """Install the training images and settings as worker globals."""
    global IMAGES, SETTINGS
    IMAGES = images
    SETTINGS = settings


def train_task(task: tuple) -> ClientUpdate:
    """Pool entry point: task = (snapshot, plan, client_id, seed, shard indices)."""
    snapshot, plan, client_id, seed, shard = task
    return client_train(snapshot, plan, IMAGES[shard], SETTINGS, client_id, seed, shard)


class ClientPool:
    """
    Runs a round's clients, serially or over `workers` processes.

    Updates always come back in the plan's client order.
    """

    def __init__(self, images: np.ndarray, settings: TrainSettings, workers: int = 1):
        self.images = images
        self.settings = settings
        self.workers = workers
        self._pool = None

    def __enter__(self) -> "ClientPool":
        if self.workers > 1:
            self._pool = Pool(
                processes=self.workers,
                initializer=init_worker,
                initargs=(self.images, self.settings),
            )
        return self

    def __exit__(self, *exc) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def run(self, snapshot: LayeredEncoder, plan: RoundPlan, partition: Partition) -> List[ClientUpdate]:
        tasks = [
            (snapshot, plan, cid, seed, partition.shard(cid))
            for cid, seed in zip(plan.clients, plan.client_seeds)
        ]
        if self._pool is None:
            return [
                client_train(snap, p, self.images[shard], self.settings, cid, seed, shard)
                for snap, p, cid, seed, shard in tasks
            ]
        return self._pool.map(train_task, tasks, chunksize=1)
