"""The per-round protocol: inject, distill, upload, aggregate, download.

Stage discipline is enforced mechanically, not by convention:

* during injection the messenger is frozen and run in eval mode — its bytes
  are asserted unchanged when the stage ends;
* during distillation the local model and the shared adapter are frozen the
  same way;
* inference (``evaluate``) uses the local model only.

Each client's work within a round is independent, so rounds can fan out over
a thread pool; the aggregation barrier sits between upload and download.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .data import Dataset
from .fusion import FusionProjections
from .metrics import accuracy, dice_coefficient, macro_f1
from .models import Model
from .optim import Optimizer, make_optimizer
from .snapshot import MessengerSnapshot, aggregate, load_snapshot_into, snapshot_from_model
from .tensor import Tensor


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoundPlan:
    rounds: int = 100
    epochs_injection: int = 4
    epochs_distillation: int = 1
    batch_size: int = 8
    lr_injection: float = 1e-4
    lr_distillation: float = 1e-5
    optimizer: str = "adam"
    reset_messenger_optimizer: bool = False

    def __post_init__(self) -> None:
        for name in ("rounds", "epochs_injection", "epochs_distillation", "batch_size"):
            if getattr(self, name) < 1:
                raise ProtocolError(f"RoundPlan.{name} must be >= 1")
        if self.lr_injection <= 0 or self.lr_distillation <= 0:
            raise ProtocolError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ProtocolError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class AblationSwitches:
    aggregate_head: bool = True
    aggregate_body: bool = True
    use_receiver: bool = True
    use_transmitter: bool = True


@dataclass
class MetricsRecord:
    round: int
    client_id: int
    split: str
    loss: float
    acc: float | None = None
    mf1: float | None = None
    dice: float | None = None
    wall_ms: float | None = None


PROBE_SIZE = 16


class ClientState:
    """One client: private data slice, local model, and (for the messenger
    protocol) the fusion projections plus per-stage optimizers."""

    def __init__(
        self,
        client_id: int,
        local: Model,
        dataset: Dataset,
        train_idx: np.ndarray,
        test_idx: np.ndarray,
        plan: RoundPlan,
        shuffle_seed: int,
        messenger: Model | None = None,
        fusion: FusionProjections | None = None,
    ):
        if len(train_idx) == 0:
            raise ProtocolError(f"client {client_id} has an empty training partition")
        self.client_id = client_id
        self.local = local
        self.dataset = dataset
        self.train_idx = np.asarray(train_idx, dtype=np.int64)
        self.test_idx = np.asarray(test_idx, dtype=np.int64)
        self.plan = plan
        self.task = local.spec.task
        self.rng = np.random.default_rng(shuffle_seed)
        self.messenger = messenger
        self.fusion = fusion
        self.probe_idx = self.train_idx[: min(PROBE_SIZE, len(self.train_idx))].copy()
        if messenger is not None and fusion is not None:
            self.opt_injection: Optimizer | None = make_optimizer(
                plan.optimizer, local.parameters() + fusion.receiver_params(), plan.lr_injection
            )
            self.opt_distillation: Optimizer | None = make_optimizer(
                plan.optimizer, messenger.parameters() + fusion.transmitter_params(), plan.lr_distillation
            )
            self.opt_local: Optimizer | None = None
        else:
            self.opt_injection = None
            self.opt_distillation = None
            self.opt_local = make_optimizer(plan.optimizer, local.parameters(), plan.lr_injection)

    # -- helpers ------------------------------------------------------------

    def batches(self, epoch_order: np.ndarray):
        bs = self.plan.batch_size
        for start in range(0, len(epoch_order), bs):
            idx = epoch_order[start : start + bs]
            if len(idx) < 2:  # batch-norm needs >= 2 samples in train mode
                continue
            yield idx

    def batch_tensors(self, idx: np.ndarray) -> tuple[Tensor, np.ndarray]:
        return Tensor(self.dataset.inputs[idx]), self.dataset.labels[idx]


def _state_bytes(model: Model) -> bytes:
    return b"".join(arr.tobytes() for _, arr in model.state_items())


def _fusion_bytes(fusion: FusionProjections, names: tuple[str, ...]) -> bytes:
    return b"".join(fusion.params[n].tensor.data.tobytes() for n in names)


_ADAPTER = ("fusion.w_d.weight", "fusion.w_d.bias")


def injection_stage(client: ClientState, weights: L.LossWeights, switches: AblationSwitches) -> dict:
    """Stage 1: the frozen messenger guides local training (plus receiver)."""
    if client.messenger is None or client.fusion is None or client.opt_injection is None:
        raise ProtocolError("injection_stage needs a messenger-protocol client")
    before = _state_bytes(client.messenger)
    client.local.train()
    client.messenger.eval()
    for p in client.messenger.parameters(trainable_only=False):
        p.freeze()
    for p in client.fusion.transmitter_params():
        p.freeze()
    for p in client.local.parameters(trainable_only=False):
        p.unfreeze()
    for p in client.fusion.receiver_params():
        p.unfreeze()
    epoch_losses = []
    for _ in range(client.plan.epochs_injection):
        order = client.rng.permutation(client.train_idx)
        total, seen = 0.0, 0
        for idx in client.batches(order):
            x, y = client.batch_tensors(idx)
            loss, _, _ = L.injection_loss(
                x, y, client.local, client.messenger, client.fusion, weights, client.task, switches.use_receiver
            )
            client.opt_injection.zero_grad()
            loss.backward()
            client.opt_injection.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        epoch_losses.append(total / max(seen, 1))
    if _state_bytes(client.messenger) != before:
        raise ProtocolError("messenger state changed during injection")
    return {"epoch_losses": epoch_losses}


def distillation_stage(
    client: ClientState, weights: L.LossWeights, switches: AblationSwitches, kl_variant: str = "standard"
) -> dict:
    """Stage 2: the frozen local model teaches the messenger (plus transmitter)."""
    if client.messenger is None or client.fusion is None or client.opt_distillation is None:
        raise ProtocolError("distillation_stage needs a messenger-protocol client")
    local_before = _state_bytes(client.local)
    adapter_before = _fusion_bytes(client.fusion, _ADAPTER)
    client.local.eval()
    client.messenger.train()
    for p in client.local.parameters(trainable_only=False):
        p.freeze()
    for p in client.fusion.receiver_params():
        p.freeze()  # includes the shared adapter: the transmitter reuses it frozen
    for p in client.messenger.parameters(trainable_only=False):
        p.unfreeze()
    for p in client.fusion.transmitter_params():
        p.unfreeze()
    epoch_losses = []
    for _ in range(client.plan.epochs_distillation):
        order = client.rng.permutation(client.train_idx)
        total, seen = 0.0, 0
        for idx in client.batches(order):
            x, y = client.batch_tensors(idx)
            loss, _, _ = L.distillation_loss(
                x,
                y,
                client.local,
                client.messenger,
                client.fusion,
                weights,
                client.task,
                kl_variant,
                switches.use_transmitter,
            )
            client.opt_distillation.zero_grad()
            loss.backward()
            client.opt_distillation.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        epoch_losses.append(total / max(seen, 1))
    if _state_bytes(client.local) != local_before:
        raise ProtocolError("local model state changed during distillation")
    if _fusion_bytes(client.fusion, _ADAPTER) != adapter_before:
        raise ProtocolError("shared adapter changed during distillation")
    return {"epoch_losses": epoch_losses}


def probe_kl(client: ClientState, switches: AblationSwitches, kl_variant: str = "standard") -> float:
    """Consistency (KL) term of the distillation objective on the client's
    frozen probe batch.

    Computed the way the stage itself computes it — batch statistics, not
    running buffers — so the number tracks what the optimizer actually
    descends. Normalization buffers are saved and restored afterwards, making
    the probe free of side effects on model state."""
    if client.messenger is None or client.fusion is None:
        raise ProtocolError("probe_kl needs a messenger-protocol client")
    was_local, was_mes = client.local.training, client.messenger.training
    saved = [
        (p.tensor.data, p.tensor.data.copy())
        for model in (client.local, client.messenger)
        for name, p in model.params.items()
        if name.endswith((".running_mean", ".running_var"))
    ]
    client.local.train()
    client.messenger.train()
    x = Tensor(client.dataset.inputs[client.probe_idx])
    try:
        with T.no_grad():
            y_m, teacher = L.distillation_outputs(x, client.local, client.messenger, client.fusion, switches.use_transmitter)
            value = L.kl_loss(y_m, teacher, kl_variant).item()
    finally:
        for live, copy in saved:
            np.copyto(live, copy)
        client.local.training = was_local
        client.messenger.training = was_mes
    return value


def upload(client: ClientState, round_index: int) -> MessengerSnapshot:
    """Stage 3: snapshot the client's messenger (and nothing else)."""
    if client.messenger is None:
        raise ProtocolError("upload needs a messenger-protocol client")
    snap = snapshot_from_model(client.messenger, round_index, int(len(client.train_idx)), client.client_id)
    local_names = {name for name, _ in client.local.state_items()}
    for name, _ in snap.entries:
        if name in local_names or name.startswith("fusion."):
            raise ProtocolError(f"upload would leak non-messenger parameter {name!r}")
    return snap


def download(client: ClientState, snapshot: MessengerSnapshot, reset_optimizer: bool = False) -> None:
    """Stage 5: install the aggregated messenger; optimizer slots are retained
    unless the plan says to reset them."""
    if client.messenger is None:
        raise ProtocolError("download needs a messenger-protocol client")
    load_snapshot_into(snapshot, client.messenger)
    if reset_optimizer and client.opt_distillation is not None:
        client.opt_distillation.reset_state()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

EVAL_BATCH = 64


def _forward_logits(model: Model, inputs: np.ndarray) -> np.ndarray:
    model.eval()
    outs = []
    with T.no_grad():
        for start in range(0, len(inputs), EVAL_BATCH):
            outs.append(model.forward(Tensor(inputs[start : start + EVAL_BATCH])).data)
    return np.concatenate(outs, axis=0)


def _np_log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    x = logits.astype(np.float64)
    x -= x.max(axis=axis, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


def evaluate_arrays(model: Model, inputs: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    """Loss + task metrics of a local model on a raw (inputs, labels) pair."""
    if len(inputs) == 0:
        raise ProtocolError("evaluate on an empty split")
    logits = _forward_logits(model, inputs)
    if model.spec.task == "classification":
        lsm = _np_log_softmax(logits, 1)
        loss = float(-lsm[np.arange(len(labels)), labels].mean())
        preds = logits.argmax(axis=1)
        return {
            "loss": loss,
            "acc": accuracy(preds, labels),
            "mf1": macro_f1(preds, labels, num_classes),
            "dice": None,
        }
    probs = np.exp(_np_log_softmax(logits, 1))
    eps = 1e-6
    dices = []
    for cls in range(1, num_classes):
        p = probs[:, cls]
        m = (labels == cls).astype(np.float64)
        dices.append((2.0 * (p * m).sum() + eps) / (p.sum() + m.sum() + eps))
    loss = float(1.0 - np.mean(dices))
    preds = logits.argmax(axis=1)
    per_image = [dice_coefficient(preds[i], labels[i]) for i in range(len(labels))]
    return {"loss": loss, "acc": None, "mf1": None, "dice": float(np.mean(per_image))}


def evaluate(client: ClientState, split: str = "test") -> dict:
    idx = client.test_idx if split == "test" else client.train_idx
    return evaluate_arrays(client.local, client.dataset.inputs[idx], client.dataset.labels[idx], client.dataset.num_classes)


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------


@dataclass
class RoundLog:
    round: int
    snapshots: list[MessengerSnapshot] = field(default_factory=list)
    aggregated: MessengerSnapshot | None = None
    probe_before: dict[int, float] = field(default_factory=dict)
    probe_after: dict[int, float] = field(default_factory=dict)
    stage_logs: dict[int, dict] = field(default_factory=dict)
    wall_ms: dict[int, float] = field(default_factory=dict)


def client_threads(num_clients: int) -> int:
    cap = os.environ.get("MHFLID_THREADS", "1")
    try:
        threads = int(cap)
    except ValueError as exc:
        raise ProtocolError(f"MHFLID_THREADS must be an integer, got {cap!r}") from exc
    return max(1, min(threads, num_clients))


def run_round(
    clients: list[ClientState],
    round_index: int,
    weights: L.LossWeights,
    switches: AblationSwitches,
    kl_variant: str = "standard",
    aggregation: str = "data_weighted",
    threads: int = 1,
) -> RoundLog:
    """One full protocol round over all clients.

    Per-client work (stages 1-3) is embarrassingly parallel; aggregation is
    the barrier; download happens strictly after it.
    """
    log = RoundLog(round=round_index)

    def work(client: ClientState):
        t0 = time.perf_counter()
        inj = injection_stage(client, weights, switches)
        before = probe_kl(client, switches, kl_variant)
        dis = distillation_stage(client, weights, switches, kl_variant)
        after = probe_kl(client, switches, kl_variant)
        snap = upload(client, round_index)
        wall = (time.perf_counter() - t0) * 1000.0
        return client.client_id, inj, dis, before, after, snap, wall

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]

    snaps_by_id = {}
    for cid, inj, dis, before, after, snap, wall in results:
        log.stage_logs[cid] = {"injection": inj, "distillation": dis}
        log.probe_before[cid] = before
        log.probe_after[cid] = after
        log.wall_ms[cid] = wall
        snaps_by_id[cid] = snap
    log.snapshots = [snaps_by_id[c.client_id] for c in clients]

    log.aggregated = aggregate(log.snapshots, aggregation, switches.aggregate_body, switches.aggregate_head)
    for client in clients:
        download(client, log.aggregated, client.plan.reset_messenger_optimizer)
    return log


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def supervised_epochs(client: ClientState, epochs: int) -> list[float]:
    """Plain task-loss training of the local model (used by both baselines);
    the epoch budget matches the protocol's injection+distillation budget."""
    if client.opt_local is None:
        raise ProtocolError("supervised_epochs needs a baseline client")
    client.local.train()
    for p in client.local.parameters(trainable_only=False):
        p.unfreeze()
    epoch_losses = []
    for _ in range(epochs):
        order = client.rng.permutation(client.train_idx)
        total, seen = 0.0, 0
        for idx in client.batches(order):
            x, y = client.batch_tensors(idx)
            loss = L.task_loss(client.local.forward(x), y, client.task)
            client.opt_local.zero_grad()
            loss.backward()
            client.opt_local.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        epoch_losses.append(total / max(seen, 1))
    return epoch_losses


def local_round(clients: list[ClientState], round_index: int, threads: int = 1) -> RoundLog:
    """Local-only baseline: every client trains alone; nothing is exchanged."""
    log = RoundLog(round=round_index)

    def work(client: ClientState):
        t0 = time.perf_counter()
        losses = supervised_epochs(client, client.plan.epochs_injection + client.plan.epochs_distillation)
        return client.client_id, losses, (time.perf_counter() - t0) * 1000.0

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    for cid, losses, wall in results:
        log.stage_logs[cid] = {"supervised": {"epoch_losses": losses}}
        log.wall_ms[cid] = wall
    return log


def fedavg_round(clients: list[ClientState], round_index: int, aggregation: str = "data_weighted", threads: int = 1) -> RoundLog:
    """Weight-averaging baseline over architecturally identical local models."""
    log = RoundLog(round=round_index)

    def work(client: ClientState):
        t0 = time.perf_counter()
        losses = supervised_epochs(client, client.plan.epochs_injection + client.plan.epochs_distillation)
        snap = snapshot_from_model(client.local, round_index, int(len(client.train_idx)), client.client_id)
        return client.client_id, losses, snap, (time.perf_counter() - t0) * 1000.0

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    snaps_by_id = {}
    for cid, losses, snap, wall in results:
        log.stage_logs[cid] = {"supervised": {"epoch_losses": losses}}
        log.wall_ms[cid] = wall
        snaps_by_id[cid] = snap
    log.snapshots = [snaps_by_id[c.client_id] for c in clients]
    log.aggregated = aggregate(log.snapshots, aggregation, True, True)
    for client in clients:
        load_snapshot_into(log.aggregated, client.local)
    return log
