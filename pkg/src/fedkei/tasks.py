"""Synthetic federated continual task streams.

Each class has a unit prototype in input space; samples are prototype plus
Gaussian noise. Task t of a client is binary: the new class t (positive)
against the union of classes 0..t-1 (negative). Classes are assigned
round-robin to ``n_groups`` groups, each with its own orthonormal
"progression" direction whose coordinate grows with class index.
``transfer_strength`` controls how much prototype energy sits on the group
direction, so a task's discriminative structure matches earlier tasks of the
same group but not the others; at 0 the prototypes are independent random
directions and nothing transfers.

Client heterogeneity: every class's sample budget is split across clients
with Dirichlet-drawn shares.
"""

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import TaskBatch

MIN_SAMPLES_PER_SIDE = 8


@dataclass(frozen=True)
class StreamConfig:
    n_clients: int = 5
    n_tasks: int = 5
    input_dim: int = 16
    dirichlet_alpha: float = 0.5
    samples_per_class: int = 60       # train budget per class per client
    eval_samples_per_class: int = 100
    noise_sigma: float = 0.4
    transfer_strength: float = 0.8
    n_groups: int = 2
    seed: int = 0

    def validate(self):
        if self.n_clients < 2 or self.n_tasks < 2:
            raise ConfigError("need n_clients >= 2 and n_tasks >= 2")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("dirichlet_alpha must be > 0")
        if not 0.0 <= self.transfer_strength <= 1.0:
            raise ConfigError("transfer_strength must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 1 <= self.n_groups <= min(self.n_classes, self.input_dim):
            raise ConfigError("n_groups must be in [1, min(n_classes, input_dim)]")
        if min(self.samples_per_class, self.eval_samples_per_class) < MIN_SAMPLES_PER_SIDE:
            raise ConfigError(
                f"need at least {MIN_SAMPLES_PER_SIDE} samples per class per client")

    @property
    def n_classes(self) -> int:
        return self.n_tasks + 1


@dataclass
class SyntheticTask:
    client_id: int
    task_time: int              # 1-based position in the client's stream
    positive_class: int
    negative_classes: tuple
    train: TaskBatch
    eval: TaskBatch


def make_prototypes(cfg: StreamConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit class prototypes (n_classes, input_dim).

    prototype_k = sqrt(ts) * b_k * s_{k mod G} + (1 - ts) * u_k, renormalized,
    where the s_g are orthonormal group directions, u_k independent unit
    directions, and the progression coordinate b_k rises from 0 to 1 with
    class index.
    """
    d = cfg.input_dim
    ts = cfg.transfer_strength
    dirs, _ = np.linalg.qr(rng.standard_normal((d, cfg.n_groups)))
    protos = np.empty((cfg.n_classes, d))
    for k in range(cfg.n_classes):
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        b = k / max(1, cfg.n_classes - 1)
        p = np.sqrt(ts) * b * dirs[:, k % cfg.n_groups] + (1.0 - ts) * u
        norm = np.linalg.norm(p)
        protos[k] = p / norm if norm > 0 else u  # ts=1, b=0: no group energy

    return protos


def dirichlet_counts(rng: np.random.Generator, alpha: float, n_clients: int,
                     total: int) -> np.ndarray:
    """Split ``total`` samples over clients with Dir(alpha) shares.

    Largest-remainder rounding preserves the total; a per-client floor keeps
    every task feasible under extreme heterogeneity.
    """
    shares = rng.dirichlet(np.full(n_clients, alpha))
    raw = shares * total
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    counts = np.maximum(counts, MIN_SAMPLES_PER_SIDE)
    return counts


def _draw(rng, proto, sigma, n):
    return proto[None, :] + sigma * rng.standard_normal((n, proto.shape[0]))


def _negative_mix(counts_row: np.ndarray, total: int) -> np.ndarray:
    """Allocate ``total`` negatives over past classes proportionally."""
    raw = counts_row / counts_row.sum() * total
    alloc = np.floor(raw).astype(int)
    remainder = total - alloc.sum()
    order = np.argsort(-(raw - alloc), kind="stable")
    alloc[order[:remainder]] += 1
    return alloc


def generate_stream(cfg: StreamConfig) -> dict:
    """Generate all clients' ordered task lists; deterministic in cfg.seed."""
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    proto_rng, count_rng, sample_rng = [
        np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3)]
    protos = make_prototypes(cfg, proto_rng)

    # counts[split][k, i]: samples of class k held by client i
    counts = {}
    for split, budget in (("train", cfg.samples_per_class),
                          ("eval", cfg.eval_samples_per_class)):
        counts[split] = np.stack([
            dirichlet_counts(count_rng, cfg.dirichlet_alpha, cfg.n_clients,
                             budget * cfg.n_clients)
            for _ in range(cfg.n_classes)])

    streams = {i: [] for i in range(cfg.n_clients)}
    for i in range(cfg.n_clients):
        for t in range(1, cfg.n_tasks + 1):
            pos_class = t
            neg_classes = tuple(range(t))
            batches = {}
            for split in ("train", "eval"):
                n_pos = int(counts[split][pos_class, i])
                mix = _negative_mix(counts[split][:t, i].astype(float), n_pos)
                xs = [_draw(sample_rng, protos[pos_class], cfg.noise_sigma, n_pos)]
                ys = [np.ones(n_pos)]
                for j, n_neg in zip(neg_classes, mix):
                    if n_neg > 0:
                        xs.append(_draw(sample_rng, protos[j], cfg.noise_sigma,
                                        int(n_neg)))
                        ys.append(np.zeros(int(n_neg)))
                batches[split] = TaskBatch(np.concatenate(xs),
                                           np.concatenate(ys))
            streams[i].append(SyntheticTask(
                client_id=i, task_time=t, positive_class=pos_class,
                negative_classes=neg_classes,
                train=batches["train"], eval=batches["eval"]))
    return {"config": cfg, "prototypes": protos, "streams": streams}


def shuffle_orders(streams: dict, mode: str, seed: int = 0) -> dict:
    """Reorder each client's task list: synchronous (identity), reversed
    (every client reversed identically), or shuffled (independent permutation
    per client). Task times are reassigned to stream position."""
    if mode not in ("synchronous", "reversed", "shuffled"):
        raise ConfigError(f"unknown order mode {mode!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {}
    for i in sorted(streams):
        tasks = list(streams[i])
        if mode == "reversed":
            tasks = tasks[::-1]
        elif mode == "shuffled":
            perm = rng.permutation(len(tasks))
            tasks = [tasks[j] for j in perm]
        out[i] = [SyntheticTask(client_id=task.client_id, task_time=pos + 1,
                                positive_class=task.positive_class,
                                negative_classes=task.negative_classes,
                                train=task.train, eval=task.eval)
                  for pos, task in enumerate(tasks)]
    return out


def stream_content_hash(stream: dict) -> str:
    """SHA-256 over all task arrays, for exact-replay bookkeeping."""
    h = hashlib.sha256()
    for i in sorted(stream["streams"]):
        for task in stream["streams"][i]:
            for batch in (task.train, task.eval):
                h.update(batch.inputs.tobytes())
                h.update(batch.labels.tobytes())
    return h.hexdigest()


def export_stream(stream: dict, directory) -> None:
    """Write one CSV per task (feature columns + label) plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = stream["config"]
    manifest = {"config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
                "content_hash": stream_content_hash(stream), "tasks": []}
    for i in sorted(stream["streams"]):
        for task in stream["streams"][i]:
            for split, batch in (("train", task.train), ("eval", task.eval)):
                fname = f"c{i:03d}_t{task.task_time:03d}_{split}.csv"
                with open(directory / fname, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(
                        [f"x{d}" for d in range(batch.inputs.shape[1])] + ["label"])
                    for row, label in zip(batch.inputs, batch.labels):
                        writer.writerow([repr(float(v)) for v in row]
                                        + [int(label)])
                manifest["tasks"].append({
                    "client_id": i, "task_time": task.task_time,
                    "split": split, "file": fname,
                    "positive_class": task.positive_class,
                    "n_samples": len(batch)})
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
