"""Synthetic heterogeneous federated datasets, shard partitioning and CSV ingestion.

Each latent cluster shifts the feature mean (marginal shift) and relabels the
output of one shared linear rule (conditional shift), so clusters differ in
both p(x) and p(y|x).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DataError

CONDITIONAL_SHIFTS = ("permutation", "rotation", "none")


@dataclass(frozen=True)
class SynthConfig:
    num_clusters: int = 3
    clients_per_cluster: int = 4
    samples_per_client: int = 600
    input_dim: int = 20
    num_classes: int = 5
    marginal_shift: float = 3.0
    conditional_shift: str = "permutation"
    noise: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def problems(self) -> list:
        out = []
        for name in ("num_clusters", "clients_per_cluster", "samples_per_client",
                     "input_dim", "num_classes"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be >= 1")
        if self.noise < 0:
            out.append("noise must be >= 0")
        if self.marginal_shift < 0:
            out.append("marginal_shift must be >= 0")
        if self.conditional_shift not in CONDITIONAL_SHIFTS:
            out.append(f"conditional_shift must be one of {CONDITIONAL_SHIFTS}")
        if not 0 < self.test_fraction < 1:
            out.append("test_fraction must be in (0, 1)")
        if self.num_classes > self.samples_per_client:
            out.append("num_classes exceeds samples_per_client")
        if (self.conditional_shift == "permutation"
                and self.num_clusters > _factorial_capped(self.num_classes, self.num_clusters)):
            out.append("not enough distinct label permutations for the clusters")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)


def _factorial_capped(n: int, cap: int) -> int:
    out = 1
    for k in range(2, n + 1):
        out *= k
        if out >= cap:
            return out
    return out


@dataclass
class ClientData:
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray

    @property
    def num_train(self) -> int:
        return int(self.train_y.shape[0])


@dataclass
class FederatedDataset:
    clients: list
    num_classes: int
    input_dim: int
    # ground truth for diagnostics only; training code never reads it
    cluster_labels: list = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def to_bytes(self) -> bytes:
        chunks = []
        for c in self.clients:
            for arr in (c.train_X, c.train_y, c.test_X, c.test_y):
                chunks.append(np.ascontiguousarray(arr).tobytes())
        chunks.append(np.asarray(self.cluster_labels, dtype=np.int64).tobytes())
        return b"".join(chunks)


def _permutations(rng: np.random.Generator, c: int, k: int) -> list:
    perms = [np.arange(c)]
    seen = {tuple(perms[0])}
    while len(perms) < k:
        p = rng.permutation(c)
        if tuple(p) not in seen:
            seen.add(tuple(p))
            perms.append(p)
    return perms


def _rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _split(rng: np.random.Generator, X, y, test_fraction):
    n = y.shape[0]
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test, train = order[:n_test], order[n_test:]
    return ClientData(X[train], y[train], X[test], y[test])


def generate(config: SynthConfig) -> FederatedDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, c, K = config.input_dim, config.num_classes, config.num_clusters
    weights = rng.normal(scale=1.0 / np.sqrt(d), size=(d, c))

    means = []
    for _ in range(K):
        direction = rng.normal(size=d)
        means.append(config.marginal_shift * direction / np.linalg.norm(direction))
    if config.conditional_shift == "permutation":
        perms = _permutations(rng, c, K)
        rotations = [np.eye(d)] * K
    elif config.conditional_shift == "rotation":
        perms = [np.arange(c)] * K
        rotations = [np.eye(d)] + [_rotation(rng, d) for _ in range(K - 1)]
    else:
        perms = [np.arange(c)] * K
        rotations = [np.eye(d)] * K

    clients, clusters = [], []
    for k in range(K):
        for _ in range(config.clients_per_cluster):
            X = means[k] + rng.normal(size=(config.samples_per_client, d))
            logits = (X @ rotations[k]) @ weights
            logits = logits + config.noise * rng.normal(size=logits.shape)
            y = perms[k][np.argmax(logits, axis=1)]
            clients.append(_split(rng, X, y.astype(np.int64), config.test_fraction))
            clusters.append(k)
    return FederatedDataset(clients, c, d, clusters)


def partition_labels_pathological(X, y, num_clients: int, shards_per_client: int,
                                  seed: int = 0, test_fraction: float = 0.2,
                                  num_classes: int | None = None) -> FederatedDataset:
    """Sort by label, cut into equal shards and deal ``shards_per_client`` to each client."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n_shards = num_clients * shards_per_client
    if num_clients < 1 or shards_per_client < 1:
        raise DataError("num_clients and shards_per_client must be >= 1")
    if y.shape[0] < 2 * n_shards:
        raise DataError(f"{y.shape[0]} samples cannot fill {n_shards} shards of >= 2 samples")
    rng = np.random.default_rng(seed)
    order = np.argsort(y, kind="stable")
    shards = np.array_split(order, n_shards)
    assignment = rng.permutation(n_shards)
    clients = []
    for m in range(num_clients):
        mine = assignment[m * shards_per_client:(m + 1) * shards_per_client]
        idx = np.concatenate([shards[s] for s in sorted(mine)])
        clients.append(_split(rng, X[idx], y[idx], test_fraction))
    c = int(num_classes if num_classes is not None else y.max() + 1)
    return FederatedDataset(clients, c, X.shape[1], [])


def load_csv(path, label_column: str):
    """Numeric CSV with header -> (features scaled to [0, 1] per column, integer labels).

    Constant columns scale to 0.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        if label_column not in header:
            raise DataError(f"{path}: missing label column", column=label_column)
        label_at = header.index(label_column)
        rows = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: expected {len(header)} cells, got {len(row)}", row=row_no)
            values = []
            for col, cell in zip(header, row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell {cell!r}", row=row_no, column=col) from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path} has no data rows")
    table = np.array(rows, dtype=float)
    labels = table[:, label_at]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise DataError(f"{path}: labels must be non-negative integers", column=label_column)
    X = np.delete(table, label_at, axis=1)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    scaled = np.zeros_like(X)
    varying = span > 0
    scaled[:, varying] = (X[:, varying] - lo[varying]) / span[varying]
    return scaled, labels.astype(np.int64)


def load_manifest(path) -> FederatedDataset:
    """Read a YAML/JSON manifest naming one train and one test CSV per client.

    Expected keys: ``label_column``, ``num_classes`` and ``clients``, a list of
    ``{train: path, test: path}``; relative paths resolve against the manifest.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    spec = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    try:
        label_column = spec["label_column"]
        entries = spec["clients"]
    except (KeyError, TypeError):
        raise DataError(f"{path}: manifest needs 'label_column' and 'clients'") from None
    clients = []
    max_label = -1
    dims = set()
    for entry in entries:
        tr_X, tr_y = load_csv(path.parent / entry["train"], label_column)
        te_X, te_y = load_csv(path.parent / entry["test"], label_column)
        dims.update({tr_X.shape[1], te_X.shape[1]})
        max_label = max(max_label, int(tr_y.max()), int(te_y.max()))
        clients.append(ClientData(tr_X, tr_y, te_X, te_y))
    if len(dims) != 1:
        raise DataError(f"{path}: clients disagree on feature count {sorted(dims)}")
    c = int(spec.get("num_classes", max_label + 1))
    return FederatedDataset(clients, c, dims.pop(), [])


def label_distribution(y, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=num_classes)
    return counts / counts.sum()


__all__ = [
    "SynthConfig", "ClientData", "FederatedDataset", "generate",
    "partition_labels_pathological", "load_csv", "load_manifest", "label_distribution",
]
