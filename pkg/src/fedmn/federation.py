"""Server round loop, client local updates, block-wise exchange and accounting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .datagen import ClientData, FederatedDataset, generate, load_manifest
from .errors import ShapeError
from .modular import (ArchitectureSpec, DecisionVector, active_mask, block_count, forward,
                      path_count, repair_output_path)
from .pool import ENCODER_LAYER, ModulePool
from .routing import (HYPER_LAYER, HypernetSpec, TemperatureSchedule, draw_noise, harden,
                      routing_probs, sample_decision, temperature)

log = logging.getLogger(__name__)

# rng stream tags
_NOISE, _BATCH, _EVAL = 1, 2, 3


def _rng(seed: int, tag: int, client: int, round_: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, tag, client, round_ + 1_000_000, epoch])


@dataclass
class ClientState:
    cid: int
    data: ClientData
    model: ModulePool
    probs: np.ndarray | None = None
    decision: DecisionVector | None = None
    mask: np.ndarray | None = None
    train_loss: float = float("nan")

    @property
    def num_samples(self) -> int:
        return self.data.num_train


@dataclass
class UploadPayload:
    client_id: int
    num_samples: int
    mask: np.ndarray
    params: dict
    param_count: int


@dataclass
class CommLedger:
    entries: list = field(default_factory=list)

    def record(self, round_: int, client: int, direction: str, count: int, phase: str = "train"):
        self.entries.append({"phase": phase, "round": round_, "client": client,
                             "direction": direction, "count": int(count)})

    def total(self, direction: str | None = None, phase: str | None = None) -> int:
        return int(sum(e["count"] for e in self.entries
                       if (direction is None or e["direction"] == direction)
                       and (phase is None or e["phase"] == phase)))

    def round_counts(self, round_: int, direction: str, num_clients: int, phase: str = "train") -> list:
        out = [0] * num_clients
        for e in self.entries:
            if e["round"] == round_ and e["direction"] == direction and e["phase"] == phase:
                out[e["client"]] += e["count"]
        return out


@dataclass
class RoundMetrics:
    round: int
    global_loss: float
    mean_accuracy: float
    median_accuracy: float
    accuracies: list
    upload: list
    download: list
    cumulative_params: int
    tau: float | None
    decisions: list

    def to_record(self) -> dict:
        return {"type": "round", **self.__dict__}


@dataclass
class TrainingResult:
    method: str
    clients: list
    global_pool: ModulePool | None
    decisions: list
    metrics: list
    ledger: CommLedger
    initial_loss: float


def payload_param_count(spec: ArchitectureSpec, mask, hyper: HypernetSpec | None = None,
                        include_hypernet: bool = False) -> int:
    """Scalars sent for all encoders plus the active blocks (plus the hypernetwork if asked)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (block_count(spec),):
        raise ShapeError("payload_param_count (mask)", mask.shape, (block_count(spec),))
    count = spec.width(1) * sum(int(np.prod(s)) for s in spec.encoder_shapes().values())
    for active, (l, _) in zip(mask, spec.block_keys()):
        if active:
            count += sum(int(np.prod(s)) for s in spec.block_shapes(l).values())
    if include_hypernet and hyper is not None:
        shapes = hyper.shapes(spec.input_dim, spec.num_classes, path_count(spec))
        count += sum(int(np.prod(s)) for s in shapes.values())
    return int(count)


def full_model_count(spec: ArchitectureSpec) -> int:
    return payload_param_count(spec, np.ones(block_count(spec), dtype=bool))


def _transfer_keys(pool: ModulePool, mask, include_hyper: bool) -> list:
    keys = list(pool.encoder_keys())
    keys += [k for k, a in zip(pool.spec.block_keys(), mask) if a]
    if include_hyper:
        keys += pool.hyper_keys()
    return keys


def hard_decision(probs: np.ndarray, spec: ArchitectureSpec, relaxed: DecisionVector | None = None):
    """Hard, output-repaired decision; thresholds the relaxed sample if given, else the probabilities."""
    base = relaxed if relaxed is not None else DecisionVector(np.asarray(probs, float))
    return repair_output_path(harden(base), probs, spec)


def _output_fallback(probs: np.ndarray, spec: ArchitectureSpec) -> int:
    return int(np.argmax(probs[-spec.width(spec.num_layers):]))


def client_probs(client: ClientState, pool: ModulePool | None = None) -> np.ndarray:
    pool = client.model if pool is None else pool
    X, y = client.data.train_X, client.data.train_y
    return routing_probs(X, T.one_hot(y, pool.spec.num_classes), pool).data.copy()


def download(client: ClientState, global_pool: ModulePool, round_: int,
             ledger: CommLedger | None = None, include_hyper: bool = True,
             count_hyper: bool = False, phase: str = "train") -> int:
    """Copy global parameters into the client; round 1 (or no mask yet) copies everything."""
    spec = client.model.spec
    full = round_ == 1 or client.mask is None
    mask = np.ones(block_count(spec), dtype=bool) if full else client.mask
    keys = _transfer_keys(global_pool, mask, include_hyper and global_pool.hyper is not None)
    client.model.load_state(global_pool.state(keys))
    count = payload_param_count(spec, mask, global_pool.hyper, count_hyper and include_hyper)
    if ledger is not None:
        ledger.record(round_, client.cid, "down", count, phase)
    return count


def build_payload(client: ClientState, mask, include_hyper: bool, count_hyper: bool) -> UploadPayload:
    pool = client.model
    keys = _transfer_keys(pool, mask, include_hyper and pool.hyper is not None)
    return UploadPayload(
        client_id=client.cid,
        num_samples=client.num_samples,
        mask=np.asarray(mask, dtype=bool).copy(),
        params=pool.state(keys),
        param_count=payload_param_count(pool.spec, mask, pool.hyper, count_hyper and include_hyper),
    )


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def local_update(client: ClientState, round_: int, epochs: int, learning_rate: float,
                 schedule: TemperatureSchedule | None, batch_size: int = 32, seed: int = 0,
                 routing: bool = True, trainable=None, include_hyper: bool = True,
                 count_hyper: bool = False, hyper_lr_scale: float = 1.0) -> UploadPayload:
    """Run ``epochs`` of SGD on the client's data and return its upload.

    With routing, each epoch draws one uniform noise vector; every batch
    recomputes the routing probabilities from the current hypernetwork and
    maps them through that fixed noise, so gradients reach the hypernetwork
    while the sampled architecture stays put for the epoch.  A learning rate
    of 0 runs the forward/backward passes without changing any parameter.
    ``trainable`` restricts updates to a subset of parameters and
    ``hyper_lr_scale`` multiplies the step size of hypernetwork parameters.
    """
    pool = client.model
    spec = pool.spec
    X, y = client.data.train_X, client.data.train_y
    Y = T.one_hot(y, spec.num_classes)
    params = pool.parameters() if trainable is None else list(trainable)
    hyper_params = [p for p in params if p.pid[0] == HYPER_LAYER]
    model_params = [p for p in params if p.pid[0] != HYPER_LAYER]
    n = X.shape[0]
    tau = temperature(round_, schedule) if routing else None
    ones = DecisionVector.ones(spec)
    noise = None
    for epoch in range(epochs):
        if routing:
            noise = draw_noise(_rng(seed, _NOISE, client.cid, round_, epoch), path_count(spec))
        for idx in _batches(_rng(seed, _BATCH, client.cid, round_, epoch), n, batch_size):
            T.zero_grad(pool.parameters())
            if routing:
                probs = routing_probs(X, Y, pool)
                V = sample_decision(probs, tau, noise)
                fallback = _output_fallback(probs.data, spec)
            else:
                V, fallback = ones, None
            loss = T.softmax_cross_entropy(forward(X[idx], V, pool, fallback=fallback), Y[idx])
            loss.backward()
            if learning_rate > 0:
                T.sgd_step(model_params, learning_rate)
                if hyper_lr_scale > 0:
                    T.sgd_step(hyper_params, learning_rate * hyper_lr_scale)

    if routing:
        probs = routing_probs(X, Y, pool).data.copy()
        if noise is None:
            noise = draw_noise(_rng(seed, _NOISE, client.cid, round_, 0), path_count(spec))
        relaxed = sample_decision(probs, tau, noise)
        client.probs = probs
        client.decision = hard_decision(probs, spec, relaxed)
        client.train_loss = T.softmax_cross_entropy(
            forward(X, relaxed, pool, fallback=_output_fallback(probs, spec)), Y).item()
        mask = active_mask(client.decision, spec)
    else:
        client.decision = ones
        client.train_loss = T.softmax_cross_entropy(forward(X, ones, pool), Y).item()
        mask = np.ones(block_count(spec), dtype=bool)
    client.mask = mask
    return build_payload(client, mask, include_hyper and routing, count_hyper)


def aggregate(payloads: list, previous_global: ModulePool, mode: str = "renormalized") -> ModulePool:
    """Block-wise weighted average of client uploads.

    Encoders and hypernetwork parameters average over every payload that
    carries them with weights ``n_m / n``.  A block averages over the clients
    that mark it active; ``renormalized`` divides by their total weight,
    ``literal`` does not.  A block nobody uploaded keeps its previous value.
    """
    if not payloads:
        raise ValueError("aggregate needs at least one payload")
    if mode not in ("renormalized", "literal"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    payloads = sorted(payloads, key=lambda p: p.client_id)
    total = float(sum(p.num_samples for p in payloads))
    weights = [p.num_samples / total for p in payloads]
    out = previous_global.copy()
    out.version = previous_global.version + 1
    spec = previous_global.spec
    block_index = {key: i for i, key in enumerate(spec.block_keys())}

    for pid, param in out.params.items():
        key = pid[:2]
        shared = key[0] in (ENCODER_LAYER, HYPER_LAYER)
        acc = None
        weight_sum = 0.0
        for w, p in zip(weights, payloads):
            if pid not in p.params:
                continue
            if not shared and not p.mask[block_index[key]]:
                continue
            value = np.asarray(p.params[pid], dtype=float)
            if value.shape != param.data.shape:
                raise ShapeError(f"aggregate block {key} slot {pid[2]!r}", param.data.shape, value.shape)
            term = w * value
            acc = term if acc is None else acc + term
            weight_sum += w
        if acc is None or weight_sum == 0.0:
            continue
        if mode == "renormalized" or shared:
            param.data[...] = acc / weight_sum
        else:
            param.data[...] = acc
    return out


def evaluate_accuracy(pool: ModulePool, X, y, decision: DecisionVector) -> float:
    logits = forward(X, decision, pool).data
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _build(config: ExperimentConfig, dataset: FederatedDataset):
    spec = ArchitectureSpec.from_string(
        config.architecture, input_dim=dataset.input_dim, num_classes=dataset.num_classes,
        encoder_out_dim=config.encoder_out_dim, block_hidden_dim=config.block_hidden_dim,
        block_out_dim=config.block_out_dim, block_depth=config.block_depth)
    hyper = HypernetSpec(config.d_x, config.d_y, config.hyper_hidden) if config.method == "fedmn" else None
    return spec, hyper


def load_dataset(config: ExperimentConfig) -> FederatedDataset:
    if config.manifest:
        return load_manifest(config.manifest)
    return generate(config.synth)


def _weighted(values, counts) -> float:
    counts = np.asarray(counts, dtype=float)
    return float(np.sum(np.asarray(values) * counts) / counts.sum())


def _pretrain_encoders(config, global_pool, clients, ledger) -> ModulePool:
    """FedAvg on the all-ones architecture; only the encoder weights are kept afterwards."""
    work = global_pool.copy()
    for r in range(1, config.pretrain_rounds + 1):
        payloads = []
        for c in clients:
            download(c, work, 1, None, include_hyper=False)
            ledger.record(r, c.cid, "down", full_model_count(work.spec), "pretrain")
            payloads.append(local_update(c, r, config.local_epochs, config.learning_rate, None,
                                         config.batch_size, config.seed + 7919, routing=False))
            ledger.record(r, c.cid, "up", payloads[-1].param_count, "pretrain")
        work = aggregate(payloads, work, config.aggregation)
    out = global_pool.copy()
    out.load_state(work.state(out.encoder_keys()))
    for c in clients:
        c.mask = None
        c.decision = None
    return out


def run_training(config: ExperimentConfig, dataset: FederatedDataset | None = None,
                 on_round=None) -> TrainingResult:
    """Train ``config.method`` for ``config.rounds`` rounds; ``on_round`` sees each RoundMetrics."""
    config.validate()
    dataset = load_dataset(config) if dataset is None else dataset
    spec, hyper = _build(config, dataset)
    method = config.method
    routing = method == "fedmn"
    global_pool = ModulePool.create(spec, hyper, seed=config.seed, head_scale=config.hyper_head_scale,
                                    head_bias=config.hyper_head_bias)
    clients = [ClientState(m, data, global_pool.copy()) for m, data in enumerate(dataset.clients)]
    empty = [c.cid for c in clients if c.num_samples == 0]
    for cid in empty:
        log.warning("client %d has no training data and is skipped", cid)
    clients = [c for c in clients if c.num_samples > 0]
    counts = [c.num_samples for c in clients]
    schedule = TemperatureSchedule(config.rounds, config.tau_start, config.tau_end)
    ledger = CommLedger()
    ones = DecisionVector.ones(spec)
    include_hyper = routing and config.aggregate_hypernet

    if routing and config.pretrain_rounds:
        global_pool = _pretrain_encoders(config, global_pool, clients, ledger)
        for c in clients:
            c.model = global_pool.copy()

    def evaluate(pool_for):
        accs, bits = [], []
        for c in clients:
            pool = pool_for(c)
            if routing:
                decision = hard_decision(client_probs(c, pool), spec)
            else:
                decision = ones
            accs.append(evaluate_accuracy(pool, c.data.test_X, c.data.test_y, decision))
            bits.append(decision.bitstring())
        return accs, bits

    def initial_loss():
        losses = []
        tau = temperature(1, schedule)
        for c in clients:
            X, Y = c.data.train_X, T.one_hot(c.data.train_y, spec.num_classes)
            if routing:
                probs = routing_probs(X, Y, global_pool)
                noise = draw_noise(_rng(config.seed, _EVAL, c.cid, 0), path_count(spec))
                V = sample_decision(probs, tau, noise)
                fb = _output_fallback(probs.data, spec)
            else:
                V, fb = ones, None
            losses.append(T.softmax_cross_entropy(forward(X, V, global_pool, fallback=fb), Y).item())
        return _weighted(losses, counts)

    def emit(metrics):
        history.append(metrics)
        if on_round is not None:
            on_round(metrics)

    history: list = []
    loss0 = initial_loss()
    accs, bits = evaluate(lambda c: global_pool)
    emit(RoundMetrics(0, loss0, float(np.mean(accs)), float(np.median(accs)), accs,
                      [0] * len(clients), [0] * len(clients), ledger.total(), None, bits))

    for t in range(1, config.rounds + 1):
        tau = temperature(t, schedule) if routing else None
        payloads = []
        for c in clients:
            if method != "local":
                if routing and t > 1:
                    c.decision = hard_decision(client_probs(c), spec)
                    c.mask = active_mask(c.decision, spec)
                download(c, global_pool, t, ledger, include_hyper, config.count_hypernet)
            payload = local_update(c, t, config.local_epochs, config.learning_rate,
                                   schedule if routing else None, config.batch_size, config.seed,
                                   routing=routing, include_hyper=include_hyper,
                                   count_hyper=config.count_hypernet,
                                   hyper_lr_scale=config.hyper_lr_scale)
            if method != "local":
                ledger.record(t, c.cid, "up", payload.param_count)
                payloads.append(payload)
        if method == "local":
            accs, bits = evaluate(lambda c: c.model)
        else:
            global_pool = aggregate(payloads, global_pool, config.aggregation)
            accs, bits = evaluate(lambda c: global_pool if include_hyper or not routing
                                  else _personal_view(global_pool, c))
        n = len(clients)
        emit(RoundMetrics(
            t, _weighted([c.train_loss for c in clients], counts),
            float(np.mean(accs)), float(np.median(accs)), accs,
            _by_client(ledger.round_counts(t, "up", len(dataset.clients)), clients)[:n],
            _by_client(ledger.round_counts(t, "down", len(dataset.clients)), clients)[:n],
            ledger.total(), tau, bits))

    decisions = [c.decision for c in clients]
    return TrainingResult(method, clients, None if method == "local" else global_pool,
                          decisions, history, ledger, loss0)


def _by_client(per_cid: list, clients: list) -> list:
    return [per_cid[c.cid] for c in clients]


def _personal_view(global_pool: ModulePool, client: ClientState) -> ModulePool:
    """Global modules with the client's own hypernetwork (used when it is not aggregated)."""
    view = global_pool.copy()
    view.load_state(client.model.state(client.model.hyper_keys()))
    return view


def fedavg_baseline(config: ExperimentConfig, dataset: FederatedDataset | None = None,
                    on_round=None) -> TrainingResult:
    return run_training(_with_method(config, "fedavg"), dataset, on_round)


def local_baseline(config: ExperimentConfig, dataset: FederatedDataset | None = None,
                   on_round=None) -> TrainingResult:
    return run_training(_with_method(config, "local"), dataset, on_round)


def _with_method(config: ExperimentConfig, method: str) -> ExperimentConfig:
    return config.with_overrides({"method": method})
