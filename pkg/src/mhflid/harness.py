"""Experiment harness: build clients from a config, run rounds, write outputs.

Seeding: one root seed fans out through ``numpy.random.SeedSequence`` into
independent streams for data generation, partitioning, model initialization
and batch shuffling, so two runs with the same config and seed are bitwise
identical (at the default single-thread client execution)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import protocol as P
from .config import ExperimentConfig, client_input_shapes, messenger_spec_for, resolved_dict, validate
from .data import Dataset, dirichlet_partition, gen_classification, gen_segmentation, resolution_partition
from .fusion import FusionProjections
from .metrics import disentanglement
from .models import build_client_spec, build_model
from .protocol import ClientState, MetricsRecord, RoundLog
from .snapshot import MessengerSnapshot, load_snapshot_into, snapshot_from_model


@dataclass
class RunResult:
    config: dict
    records: list[MetricsRecord]
    summary: dict
    probe: list[tuple[int, int, float, float]] = field(default_factory=list)  # round, client, before, after
    disentanglement: list[tuple[int, float]] = field(default_factory=list)
    cross_eval: np.ndarray | None = None
    checkpoints: dict[int, bytes] = field(default_factory=dict)
    client_ids: list[int] = field(default_factory=list)


def _spawn_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def build_clients(config: ExperimentConfig) -> list[ClientState]:
    """Materialize dataset, partition, models and fusion for every client."""
    k = len(config.clients)
    seeds = _spawn_seeds(config.seed, 3 + 3 * k)
    data_seed, part_seed, mes_seed = seeds[0], seeds[1], seeds[2]
    model_seeds = seeds[3 : 3 + k]
    fusion_seeds = seeds[3 + k : 3 + 2 * k]
    shuffle_seeds = seeds[3 + 2 * k : 3 + 3 * k]

    ds_cfg = config.dataset
    if config.task == "classification":
        dataset = gen_classification(ds_cfg.num_samples, ds_cfg.num_classes, ds_cfg.image_size, data_seed)
    else:
        dataset = gen_segmentation(ds_cfg.num_samples, ds_cfg.image_size, data_seed)

    shapes = client_input_shapes(config)
    per_client: list[tuple[Dataset, np.ndarray, np.ndarray]] = []
    if config.partitioner.kind == "dirichlet":
        part = dirichlet_partition(
            dataset, k, config.partitioner.alpha, part_seed, min_per_split=config.partitioner.min_per_split
        )
        for cid in range(k):
            per_client.append((dataset, part.train_indices[cid], part.test_indices[cid]))
    else:
        for rc in resolution_partition(dataset, list(config.partitioner.factors), part_seed):
            per_client.append((rc.dataset, rc.train_indices, rc.test_indices))

    use_messenger = config.method == "mhpflid"
    init_snapshot = None
    if use_messenger:
        base_mes = build_model(messenger_spec_for(config, shapes[0]), mes_seed, prefix="mes.")
        init_snapshot = snapshot_from_model(base_mes, 0, 0)

    clients = []
    for cid, arch in enumerate(config.clients):
        local = build_model(build_client_spec(arch, ds_cfg.num_classes, shapes[cid]), model_seeds[cid])
        messenger = None
        fusion = None
        if use_messenger:
            messenger = build_model(messenger_spec_for(config, shapes[cid]), mes_seed, prefix="mes.")
            load_snapshot_into(init_snapshot, messenger)  # identical start regardless of input shape
            fusion = FusionProjections(local.d_body, messenger.d_body, fusion_seeds[cid])
        ds_i, tr, te = per_client[cid]
        clients.append(
            ClientState(
                cid,
                local,
                ds_i,
                tr,
                te,
                config.rounds,
                shuffle_seeds[cid],
                messenger=messenger,
                fusion=fusion,
            )
        )
    return clients


def _last_body_conv_weight(snapshot: MessengerSnapshot) -> np.ndarray:
    candidates = [(name, arr) for name, arr in snapshot.entries if "body." in name and name.endswith(".weight") and arr.ndim == 4]
    if not candidates:
        raise P.ProtocolError("no body conv weight in snapshot")
    return candidates[-1][1]


def run_experiment(config: ExperimentConfig) -> RunResult:
    validate(config)
    clients = build_clients(config)
    threads = P.client_threads(len(clients))
    plan = config.rounds
    records: list[MetricsRecord] = []
    probe: list[tuple[int, int, float, float]] = []
    disent: list[tuple[int, float]] = []
    checkpoints: dict[int, bytes] = {}

    for rnd in range(1, plan.rounds + 1):
        if config.method == "mhpflid":
            log = P.run_round(
                clients,
                rnd,
                config.loss_weights,
                config.ablation,
                kl_variant=config.kl_variant,
                aggregation=config.aggregation,
                threads=threads,
            )
            for cid in sorted(log.probe_before):
                probe.append((rnd, cid, log.probe_before[cid], log.probe_after[cid]))
            disent.append((rnd, disentanglement(_last_body_conv_weight(log.aggregated))))
            if rnd % config.checkpoint_every == 0 or rnd == plan.rounds:
                checkpoints[rnd] = log.aggregated.to_bytes()
        elif config.method == "local":
            log = P.local_round(clients, rnd, threads=threads)
        else:
            log = P.fedavg_round(clients, rnd, aggregation=config.aggregation, threads=threads)
        for client in clients:
            for split in ("train", "test"):
                ev = P.evaluate(client, split)
                records.append(
                    MetricsRecord(
                        round=rnd,
                        client_id=client.client_id,
                        split=split,
                        loss=ev["loss"],
                        acc=ev["acc"],
                        mf1=ev["mf1"],
                        dice=ev["dice"],
                        wall_ms=log.wall_ms.get(client.client_id, 0.0) if config.record_timing else None,
                    )
                )

    cross = _cross_eval(clients)
    summary = _summarize(config, clients, records)
    return RunResult(
        config=resolved_dict(config),
        records=records,
        summary=summary,
        probe=probe,
        disentanglement=disent,
        cross_eval=cross,
        checkpoints=checkpoints,
        client_ids=[c.client_id for c in clients],
    )


def _cross_eval(clients: list[ClientState]) -> np.ndarray | None:
    """Matrix of client i's model evaluated on client j's test split.

    Defined only when every client consumes the same input shape (the
    reduced-resolution regime has no meaningful cross-client inference)."""
    shapes = {c.dataset.inputs.shape[1:] for c in clients}
    if len(shapes) != 1:
        return None
    metric = "acc" if clients[0].task == "classification" else "dice"
    k = len(clients)
    out = np.zeros((k, k), dtype=np.float64)
    for i, model_client in enumerate(clients):
        for j, data_client in enumerate(clients):
            ev = P.evaluate_arrays(
                model_client.local,
                data_client.dataset.inputs[data_client.test_idx],
                data_client.dataset.labels[data_client.test_idx],
                data_client.dataset.num_classes,
            )
            out[i, j] = ev[metric]
    return out


def _summarize(config: ExperimentConfig, clients: list[ClientState], records: list[MetricsRecord]) -> dict:
    final_round = config.rounds.rounds
    per_client = {}
    for client in clients:
        rec = next(
            r for r in records if r.round == final_round and r.client_id == client.client_id and r.split == "test"
        )
        entry = {"loss": rec.loss}
        if rec.acc is not None:
            entry["acc"] = rec.acc
            entry["mf1"] = rec.mf1
        if rec.dice is not None:
            entry["dice"] = rec.dice
        per_client[str(client.client_id)] = entry
    keys = sorted({k for entry in per_client.values() for k in entry})
    average = {k: float(np.mean([entry[k] for entry in per_client.values()])) for k in keys}
    return {
        "task": config.task,
        "method": config.method,
        "seed": config.seed,
        "rounds": final_round,
        "clients": per_client,
        "average": average,
    }


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    return f"{x:.6g}"


def write_outputs(result: RunResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(result.config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("round,client_id,split,loss,acc,mf1,dice,wall_ms\n")
        for r in result.records:
            fh.write(
                f"{r.round},{r.client_id},{r.split},{_fmt(r.loss)},{_fmt(r.acc)},{_fmt(r.mf1)},{_fmt(r.dice)},{_fmt(r.wall_ms)}\n"
            )
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.cross_eval is not None:
        with open(os.path.join(out_dir, "cross_eval.csv"), "w") as fh:
            ids = result.client_ids
            fh.write("model_client," + ",".join(f"data_{j}" for j in ids) + "\n")
            for i, row in zip(ids, result.cross_eval):
                fh.write(f"{i}," + ",".join(_fmt(v) for v in row) + "\n")
    if result.disentanglement:
        with open(os.path.join(out_dir, "disentanglement.csv"), "w") as fh:
            fh.write("round,e\n")
            for rnd, e in result.disentanglement:
                fh.write(f"{rnd},{_fmt(e)}\n")
    if result.probe:
        with open(os.path.join(out_dir, "probe_kl.csv"), "w") as fh:
            fh.write("round,client_id,kl_before,kl_after\n")
            for rnd, cid, before, after in result.probe:
                fh.write(f"{rnd},{cid},{_fmt(before)},{_fmt(after)}\n")
    if result.checkpoints:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        for rnd, blob in sorted(result.checkpoints.items()):
            with open(os.path.join(ckpt_dir, f"messenger_round_{rnd:04d}.bin"), "wb") as fh:
                fh.write(blob)


def run_and_write(config: ExperimentConfig, out_dir: str) -> RunResult:
    result = run_experiment(config)
    write_outputs(result, out_dir)
    return result


def with_overrides(config: ExperimentConfig, seed: int | None = None, method: str | None = None, out_dir: str | None = None) -> ExperimentConfig:
    if seed is not None:
        config = replace(config, seed=seed)
    if method is not None:
        config = replace(config, method=method)
    if out_dir is not None:
        config = replace(config, out_dir=out_dir)
    return config


# ---------------------------------------------------------------------------
# run comparison
# ---------------------------------------------------------------------------


def compare_runs(run_dirs: list[str]) -> str:
    """Side-by-side table of run summaries; deltas are against the first run."""
    rows = []
    for d in run_dirs:
        path = os.path.join(d, "summary.json")
        if not os.path.isfile(path):
            raise FileNotFoundError(f"no summary.json in {d}")
        with open(path) as fh:
            rows.append((d, json.load(fh)))
    metrics = sorted({m for _, s in rows for m in s.get("average", {})})
    header = ["run", "method", "seed"] + metrics + [f"d_{m}" for m in metrics]
    base = rows[0][1].get("average", {})
    table = [header]
    for d, s in rows:
        avg = s.get("average", {})
        row = [os.path.basename(os.path.normpath(d)), str(s.get("method", "?")), str(s.get("seed", "?"))]
        row += [_fmt(avg.get(m)) if avg.get(m) is not None else "" for m in metrics]
        row += [_fmt(avg[m] - base[m]) if m in avg and m in base else "" for m in metrics]
        table.append(row)
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines)
