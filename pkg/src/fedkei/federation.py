"""Server/client orchestration of the full per-task protocol.

For every task time t the driver runs: global clustering of the pooled
modules (skipped at t=1, falling back to random initialization), the
outer-loop round(s) with inner alpha updates at clients and the beta update
at the server barrier, actual alpha learning on the optimized cluster
modules, initialization assembly, local fine-tuning, and module upload into
the pool.

Transport is an in-process typed-message channel. Every payload crossing
the server/client boundary is a module-sized vector (cluster modules down,
per-cluster gradients up, trained modules up) and is recorded in a
communication ledger; no raw data ever enters a payload. Clients may run
sequentially or on a thread pool; results are reduced in ascending client
id either way, so both modes produce identical output.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import bilevel, clustering
from .bilevel import BiLevelConfig
from .errors import (ConfigError, DivergenceError, IncompleteRoundError,
                     InputError, ProtocolError)
from .kernels import BACKEND
from .metrics import auc, lca
from .model import Model, ModelConfig, PARTS, TaskBatch, TaskModule
from .paramspace import (vector_byte_size, vector_from_bytes, vector_to_bytes,
                         weighted_sum)
from .pool import KnowledgePool, PoolEntry
from .tasks import (StreamConfig, generate_stream, shuffle_orders,
                    stream_content_hash)

# Message kinds; the phase index doubles as the per-task round ordering.
CLUSTER_MODULES_DOWN = 1
CLIENT_GRAD_UP = 2
OPTIMIZED_MODULES_DOWN = 3
TASK_MODULE_UP = 4

KIND_NAMES = {
    CLUSTER_MODULES_DOWN: "ClusterModulesDown",
    CLIENT_GRAD_UP: "ClientGradUp",
    OPTIMIZED_MODULES_DOWN: "OptimizedModulesDown",
    TASK_MODULE_UP: "TaskModuleUp",
}

SERVER_ID = 0xFFFFFFFF
_PART_CODES = {"adapter": 0, "head": 1}
_PART_FROM_CODE = {v: k for k, v in _PART_CODES.items()}
_HEADER = struct.Struct("<BIIIBI")


@dataclass(frozen=True)
class Message:
    kind: int
    task_time: int
    phase: int
    sender: int
    part: str
    payload: np.ndarray

    def to_bytes(self) -> bytes:
        body = vector_to_bytes(self.payload)
        return _HEADER.pack(self.kind, self.task_time, self.phase,
                            self.sender, _PART_CODES[self.part],
                            len(body)) + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Message":
        if len(buf) < _HEADER.size:
            raise InputError("message shorter than header")
        kind, t, phase, sender, part_code, n = _HEADER.unpack_from(buf)
        body = buf[_HEADER.size:]
        if len(body) != n:
            raise InputError("message payload length mismatch")
        return cls(kind=kind, task_time=t, phase=phase, sender=sender,
                   part=_PART_FROM_CODE[part_code],
                   payload=vector_from_bytes(body))


class CommLedger:
    """Per (client, task_time, kind, direction) message counts and bytes."""

    def __init__(self):
        self._rows = {}

    def record(self, client: int, message: Message, direction: str):
        key = (client, message.task_time, message.kind, direction)
        count, total = self._rows.get(key, (0, 0))
        self._rows[key] = (count + 1, total + len(message.to_bytes()))

    def rows(self):
        out = []
        for (client, t, kind, direction), (count, nbytes) in sorted(self._rows.items()):
            out.append({"client": client, "task_time": t,
                        "kind": KIND_NAMES[kind], "direction": direction,
                        "messages": count, "bytes": nbytes})
        return out

    def module_transfers(self, client: int, t: int, module_bytes: int) -> float:
        """Total traffic for one client/task in module-sized units, where a
        module is the combined (adapter, head) pair."""
        total = 0
        for (c, tt, _, _), (_, nbytes) in self._rows.items():
            if c == client and tt == t:
                total += nbytes
        return total / module_bytes

    def kinds_for(self, client: int, t: int):
        return sorted({KIND_NAMES[kind]
                       for (c, tt, kind, _) in self._rows
                       if c == client and tt == t})


def message_envelope_bytes(dim: int) -> int:
    """Serialized size of one message carrying a vector of ``dim`` floats."""
    return _HEADER.size + vector_byte_size(dim)


def combined_module_bytes(model_cfg: ModelConfig) -> int:
    """Wire size of one part-combined module (two messages, one per part)."""
    return (message_envelope_bytes(model_cfg.adapter_dim)
            + message_envelope_bytes(model_cfg.head_dim))


class ProtocolMonitor:
    """Enforces per-sender round ordering and the down-before-up rule."""

    def __init__(self):
        self._last_round = {}
        self._delivered = set()

    def deliver(self, client: int, message: Message):
        self._check_order(("server", message.sender), message)
        self._delivered.add((client, message.task_time, message.kind))

    def uplink(self, message: Message):
        self._check_order(("client", message.sender), message)
        if message.kind == CLIENT_GRAD_UP:
            key = (message.sender, message.task_time, CLUSTER_MODULES_DOWN)
            if key not in self._delivered:
                raise ProtocolError(
                    f"client {message.sender} sent gradients for t={message.task_time} "
                    "before receiving cluster modules")

    def _check_order(self, sender_key, message: Message):
        tag = (message.task_time, message.phase)
        last = self._last_round.get(sender_key)
        if last is not None and tag < last:
            raise ProtocolError(f"round tag {tag} not increasing for {sender_key}")
        self._last_round[sender_key] = tag


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    bilevel: BiLevelConfig = field(default_factory=BiLevelConfig)
    k_clusters: int = 3                 # per part; clamped to M at early t
    finetune_epochs: int = 10
    finetune_lr: float = 0.005
    finetune_batch_size: int = 32
    rand_scale: float = 0.1
    normalize_clusters: bool = False    # unit-norm columns before clustering
    order_mode: str = "synchronous"
    clients_parallel: bool = False
    skip_actual_alpha: bool = False

    def validate(self):
        self.stream.validate()
        if self.k_clusters < 1:
            raise ConfigError("k_clusters must be >= 1")
        if self.finetune_epochs < 1:
            raise ConfigError("finetune_epochs must be >= 1")
        if self.finetune_lr < 0:
            raise ConfigError("finetune_lr must be >= 0")
        if self.order_mode not in ("synchronous", "reversed", "shuffled"):
            raise ConfigError(f"unknown order_mode {self.order_mode!r}")


# Stable tags for deriving independent RNG streams from (seed, t, client).
_SEED_TAGS = {"rand_init": 1, "finetune": 2, "inner": 3, "fresh": 4,
              "actual_alpha": 5, "cluster_adapter": 6, "cluster_head": 7,
              "direct": 8, "order": 9}


def derived_rng(seed: int, tag: str, t: int = 0, client: int = 0):
    ss = np.random.SeedSequence(entropy=[seed, _SEED_TAGS[tag], t, client])
    return np.random.Generator(np.random.PCG64(ss))


def _minibatches(batch: TaskBatch, batch_size: int, rng) -> list:
    order = rng.permutation(len(batch))
    return [TaskBatch(batch.inputs[order[s:s + batch_size]],
                      batch.labels[order[s:s + batch_size]])
            for s in range(0, len(batch), batch_size)]


def _epoch_stream(batch: TaskBatch, batch_size: int, rng, max_epochs: int):
    for _ in range(max_epochs):
        yield _minibatches(batch, batch_size, rng)


class _TaskRunner:
    """State shared across task steps of one run."""

    def __init__(self, config: ExperimentConfig, variant: str, seed: int):
        config.validate()
        self.config = config
        self.variant = variant
        self.seed = seed
        self.model = Model(config.model)
        self.pool = KnowledgePool()
        self.ledger = CommLedger()
        self.monitor = ProtocolMonitor()
        self.inner_approximate = False

    # -- loss/grad callbacks over part dicts -------------------------------

    def _grad_fn(self, batch):
        def fn(parts, b):
            return self.model.grad_module(
                self.model.module_from_parts(parts), b).parts
        return fn

    def _loss_fn(self):
        def fn(parts, b):
            return self.model.forward_loss(self.model.module_from_parts(parts), b)
        return fn

    # -- initialization strategies ------------------------------------------

    def _rand_init(self, t, client) -> TaskModule:
        rng = derived_rng(self.seed, "rand_init", t, client)
        c = self.config.model
        return TaskModule(
            adapter=self.config.rand_scale * rng.standard_normal(c.adapter_dim),
            head=self.config.rand_scale * rng.standard_normal(c.head_dim))

    def _pool_parts(self, t):
        return {p: self.pool.snapshot(p, t) for p in PARTS}

    def _fedavg_init(self, t) -> TaskModule:
        mods = self._pool_parts(t)
        parts = {p: weighted_sum(mods[p], np.full(mods[p].shape[1],
                                                  1.0 / mods[p].shape[1]))
                 for p in PARTS}
        return self.model.module_from_parts(parts)

    def _cluster_pool(self, t):
        """Per-part clustering of the pool; K clamped to M."""
        mods = self._pool_parts(t)
        out = {}
        for p in PARTS:
            m = mods[p].shape[1]
            k = min(self.config.k_clusters, m)
            seed_rng = derived_rng(self.seed, f"cluster_{p}", t)
            assignment = clustering.cluster(
                mods[p], k, int(seed_rng.integers(2 ** 31)),
                normalize=self.config.normalize_clusters)
            out[p] = assignment
        return mods, out

    def _client_aggregates(self, t):
        """Variant A: per-client mean of that client's past modules."""
        out = {}
        for p in PARTS:
            entries = self.pool.entries(p, t)
            clients = sorted({e.client_id for e in entries})
            rows = []
            for cid in clients:
                own = [e.module for e in entries if e.client_id == cid]
                rows.append(np.mean(np.stack(own), axis=0))
            out[p] = np.stack(rows)
        return out

    def _actual_alpha(self, thetas, task, t, client):
        cfg = self.config
        if cfg.skip_actual_alpha:
            return {p: bilevel.uniform_alpha(thetas[p].shape[0]) for p in PARTS}
        rng = derived_rng(self.seed, "actual_alpha", t, client)
        epochs = _epoch_stream(task.train, cfg.bilevel.inner_batch_size, rng,
                               cfg.bilevel.actual_alpha_max_epochs)
        return bilevel.learn_alpha_actual(thetas, epochs, self._loss_fn(),
                                          self._grad_fn(task.train),
                                          cfg.bilevel, task.train)

    # -- the FedKEI bi-level round -------------------------------------------

    def _send_modules_down(self, kind, phase, t, client, thetas):
        for p in PARTS:
            for c in range(thetas[p].shape[0]):
                msg = Message(kind=kind, task_time=t, phase=phase,
                              sender=SERVER_ID, part=p, payload=thetas[p][c])
                self.monitor.deliver(client, msg)
                self.ledger.record(client, msg, "down")

    def _client_inner_work(self, t, client, task, thetas):
        """Pure client computation: inner alpha updates plus outer grads."""
        cfg = self.config
        rng = derived_rng(self.seed, "inner", t, client)
        batches = _minibatches(task.train, cfg.bilevel.inner_batch_size, rng)
        alphas = {p: bilevel.uniform_alpha(thetas[p].shape[0]) for p in PARTS}
        inner = bilevel.inner_update_alpha(alphas, thetas, batches,
                                           self._grad_fn(task.train),
                                           cfg.bilevel.eta1)
        fresh_rng = derived_rng(self.seed, "fresh", t, client)
        fresh = _minibatches(task.train, cfg.bilevel.inner_batch_size,
                             fresh_rng)[0]
        updated = {p: inner[p].alpha_updated for p in PARTS}
        v = self._grad_fn(task.train)(
            {p: bilevel.aggregate_inter(updated[p], thetas[p]) for p in PARTS},
            fresh)
        grads = {p: bilevel.client_outer_grad(inner[p], thetas[p], v[p])
                 for p in PARTS}
        if any(inner[p].approximate for p in PARTS):
            self.inner_approximate = True
        return grads

    def _fedkei_round(self, t, tasks_at_t):
        cfg = self.config
        mods, assignments = self._cluster_pool(t)
        betas = {p: bilevel.init_beta(assignments[p]) for p in PARTS}
        clients = sorted(tasks_at_t)

        for _ in range(cfg.bilevel.outer_steps):
            thetas = {p: bilevel.cluster_modules_from_beta(betas[p], mods[p])
                      for p in PARTS}
            for client in clients:
                self._send_modules_down(CLUSTER_MODULES_DOWN, 1, t, client, thetas)

            work = {c: (lambda c=c: self._client_inner_work(
                t, c, tasks_at_t[c], thetas)) for c in clients}
            results = _run_clients(work, cfg.clients_parallel)
            if set(results) != set(clients):
                raise IncompleteRoundError("missing client report")

            client_grads = {p: [] for p in PARTS}
            for client in clients:  # fixed reduction order at the barrier
                grads = results[client]
                for p in PARTS:
                    for c in range(grads[p].shape[0]):
                        msg = Message(kind=CLIENT_GRAD_UP, task_time=t,
                                      phase=2, sender=client, part=p,
                                      payload=grads[p][c])
                        self.monitor.uplink(msg)
                        self.ledger.record(client, msg, "up")
                    client_grads[p].append(grads[p])
            betas = {p: bilevel.server_update_beta(betas[p], mods[p],
                                                   client_grads[p],
                                                   cfg.bilevel.eta2)
                     for p in PARTS}

        thetas_opt = {p: bilevel.cluster_modules_from_beta(betas[p], mods[p])
                      for p in PARTS}
        inits = {}
        for client in clients:
            self._send_modules_down(OPTIMIZED_MODULES_DOWN, 3, t, client,
                                    thetas_opt)
        alpha_work = {c: (lambda c=c: self._actual_alpha(
            thetas_opt, tasks_at_t[c], t, c)) for c in clients}
        alpha_results = _run_clients(alpha_work, cfg.clients_parallel)
        for client in clients:
            alpha_hat = alpha_results[client]
            parts = {p: bilevel.build_init(alpha_hat[p], betas[p], mods[p])
                     for p in PARTS}
            inits[client] = self.model.module_from_parts(parts)
        return inits

    def _variant_c_inits(self, t, tasks_at_t):
        cfg = self.config
        mods, assignments = self._cluster_pool(t)
        beta0 = {p: bilevel.init_beta(assignments[p]) for p in PARTS}
        inits = {}
        for client in sorted(tasks_at_t):
            task = tasks_at_t[client]
            rng = derived_rng(self.seed, "direct", t, client)
            epochs = _epoch_stream(task.train, cfg.bilevel.inner_batch_size,
                                   rng, cfg.bilevel.actual_alpha_max_epochs)
            alphas, betas = _direct_alpha_beta(beta0, mods, epochs,
                                               self._loss_fn(),
                                               self._grad_fn(task.train),
                                               cfg.bilevel, task.train)
            parts = {p: bilevel.build_init(alphas[p], betas[p], mods[p])
                     for p in PARTS}
            inits[client] = self.model.module_from_parts(parts)
        return inits

    def _variant_inits(self, t, tasks_at_t):
        variant = self.variant
        clients = sorted(tasks_at_t)
        if t == 1 or variant == "Rand":
            return {c: self._rand_init(t, c) for c in clients}
        if variant == "FedAvgInit":
            init = self._fedavg_init(t)
            return {c: init for c in clients}
        if variant == "A":
            thetas = self._client_aggregates(t)
            out = {}
            for c in clients:
                alpha = self._actual_alpha(thetas, tasks_at_t[c], t, c)
                parts = {p: bilevel.aggregate_inter(alpha[p], thetas[p])
                         for p in PARTS}
                out[c] = self.model.module_from_parts(parts)
            return out
        if variant == "B":
            mods, assignments = self._cluster_pool(t)
            betas = {p: bilevel.init_beta(assignments[p]) for p in PARTS}
            thetas = {p: bilevel.cluster_modules_from_beta(betas[p], mods[p])
                      for p in PARTS}
            out = {}
            for c in clients:
                alpha = self._actual_alpha(thetas, tasks_at_t[c], t, c)
                parts = {p: bilevel.aggregate_inter(alpha[p], thetas[p])
                         for p in PARTS}
                out[c] = self.model.module_from_parts(parts)
            return out
        if variant == "C":
            return self._variant_c_inits(t, tasks_at_t)
        if variant == "FedKEI":
            return self._fedkei_round(t, tasks_at_t)
        raise ConfigError(f"unknown variant {variant!r}")

    # -- one task step ---------------------------------------------------------

    def run_task_step(self, t: int, tasks_at_t: dict) -> list:
        cfg = self.config
        try:
            inits = self._variant_inits(t, tasks_at_t)
        except InputError as exc:
            # Overflowed weights produce non-finite module vectors, which the
            # parameter-space validation flags; during a run that is numeric
            # divergence, not caller misuse.
            if "non-finite" in str(exc):
                raise DivergenceError(str(exc)) from exc
            raise

        def finetune(client):
            task = tasks_at_t[client]
            init = inits[client]
            init_scores = self.model.predict_scores(init, task.eval.inputs)
            init_auc = auc(init_scores, task.eval.labels)
            module, trace = self.model.local_finetune(
                init, task.train, task.eval, cfg.finetune_epochs,
                cfg.finetune_lr, cfg.finetune_batch_size,
                seed=int(derived_rng(self.seed, "finetune", t,
                                     client).integers(2 ** 31)))
            return init_auc, module, trace

        work = {c: (lambda c=c: finetune(c)) for c in sorted(tasks_at_t)}
        results = _run_clients(work, cfg.clients_parallel)

        rows = []
        for client in sorted(tasks_at_t):
            init_auc, module, trace = results[client]
            for p, vec in module.parts.items():
                msg = Message(kind=TASK_MODULE_UP, task_time=t, phase=4,
                              sender=client, part=p, payload=vec)
                self.monitor.uplink(msg)
                self.ledger.record(client, msg, "up")
                self.pool.insert(PoolEntry(client_id=client, task_time=t,
                                           part=p, module=vec))
            rows.append({"client": client, "task_time": t,
                         "init_auc": init_auc, "trace": list(trace),
                         "final_auc": trace[-1], "lca": lca(trace)})
        return rows


def _run_clients(work: dict, parallel: bool) -> dict:
    """Run per-client closures; outputs keyed by client id so the caller's
    fixed-order reduction is independent of completion order."""
    if not parallel:
        return {c: work[c]() for c in sorted(work)}
    with ThreadPoolExecutor(max_workers=min(8, len(work))) as pool:
        futures = {c: pool.submit(work[c]) for c in sorted(work)}
        return {c: futures[c].result() for c in sorted(work)}


def _direct_alpha_beta(beta0, mods, batch_epochs, loss_fn, grad_fn, cfg,
                       full_batch):
    """Variant C: joint direct gradient descent on (alpha, beta) for one
    client, no bi-level structure."""
    alphas = {p: bilevel.uniform_alpha(beta0[p].shape[0]) for p in beta0}
    betas = {p: beta0[p].copy() for p in beta0}

    def assemble():
        return {p: bilevel.aggregate_inter(
            alphas[p], bilevel.cluster_modules_from_beta(betas[p], mods[p]))
            for p in alphas}

    prev_loss = loss_fn(assemble(), full_batch)
    stall = 0
    for epoch, batches in enumerate(batch_epochs):
        if epoch >= cfg.actual_alpha_max_epochs:
            break
        for batch in batches:
            grads = grad_fn(assemble(), batch)
            for p in alphas:
                thetas = bilevel.cluster_modules_from_beta(betas[p], mods[p])
                g = grads[p]
                dalpha = thetas @ g
                dbeta = np.outer(alphas[p], mods[p].T @ g)
                alphas[p] = alphas[p] - cfg.eta1 * dalpha
                betas[p] = betas[p] - cfg.eta2 * dbeta
        loss = loss_fn(assemble(), full_batch)
        if abs(prev_loss - loss) < cfg.actual_alpha_rel_tol * max(1.0, abs(prev_loss)):
            stall += 1
            if stall >= cfg.actual_alpha_patience:
                break
        else:
            stall = 0
        prev_loss = loss
    return alphas, betas


def run_stream(config: ExperimentConfig, variant: str = "FedKEI",
               seed: int = 0) -> dict:
    """Run the full task stream for one variant and one seed.

    Returns a JSON-serializable report with per-task metrics, overall
    means, the communication ledger, and everything needed for exact replay.
    """
    config.validate()
    stream = generate_stream(replace(config.stream, seed=seed))
    streams = stream["streams"]
    if config.order_mode != "synchronous":
        order_seed = int(derived_rng(seed, "order").integers(2 ** 31))
        streams = shuffle_orders(streams, config.order_mode, order_seed)

    runner = _TaskRunner(config, variant, seed)
    per_task = []
    for t in range(1, config.stream.n_tasks + 1):
        tasks_at_t = {c: streams[c][t - 1] for c in sorted(streams)}
        try:
            rows = runner.run_task_step(t, tasks_at_t)
        except DivergenceError as exc:
            # Abort with rollback: the failed task never entered the pool.
            raise DivergenceError(
                f"seed={seed} t={t} variant={variant}: {exc}",
                step=exc.step) from exc
        per_task.append({
            "task_time": t,
            "mean_final_auc": float(np.mean([r["final_auc"] for r in rows])),
            "mean_lca": float(np.mean([r["lca"] for r in rows])),
            "clients": rows,
        })

    report = {
        "variant": variant,
        "seed": seed,
        "backend": BACKEND,
        "inner_approximate": runner.inner_approximate,
        "dataset_hash": stream_content_hash(stream),
        "overall_auc": float(np.mean([r["mean_final_auc"] for r in per_task])),
        "overall_lca": float(np.mean([r["mean_lca"] for r in per_task])),
        "per_task": per_task,
        "ledger": runner.ledger.rows(),
    }
    return report
