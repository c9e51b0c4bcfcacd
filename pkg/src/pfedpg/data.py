"""Synthetic colored-shape classification data and federated partitions.

Three non-IID regimes are supported: per-client domain maps (hue rotation,
contrast, 90 degree rotations), disjoint label sets, and Dirichlet label skew.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .container import save_tensors

log = logging.getLogger(__name__)

SIDE = 16
CHANNELS = 3


# ----------------------------------------------------------------- templates


def _shape_masks(side: int = SIDE) -> list[np.ndarray]:
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    c = (side - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    masks = [
        (np.abs(yy - c) <= 3.5) & (np.abs(xx - c) <= 3.5),  # square
        r <= 4.5,  # disk
        (np.abs(yy - c) <= 1.5) & (np.abs(xx - c) <= 5.5),  # horizontal bar
        (np.abs(xx - c) <= 1.5) & (np.abs(yy - c) <= 5.5),  # vertical bar
        ((np.abs(yy - c) <= 1.0) | (np.abs(xx - c) <= 1.0)) & (r <= 6.0),  # plus
        (np.abs(yy - xx) <= 1.5) & (r <= 6.0),  # diagonal
        (r >= 3.0) & (r <= 5.5),  # ring
        (yy >= 4) & (yy <= 11) & (np.abs(xx - c) <= (yy - 3) * 0.75),  # triangle
        ((np.abs(yy - c) <= 5.5) & (np.abs(xx - c) <= 5.5)) & (((yy // 3) + (xx // 3)) % 2 == 0),  # checker
        ((np.abs(xx - 5) <= 1.5) & (yy >= 3) & (yy <= 12)) | ((np.abs(yy - 11) <= 1.5) & (xx >= 4) & (xx <= 12)),  # L
    ]
    return [m.astype(float) for m in masks]


_PALETTE = np.array([
    [1.0, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.35, 1.0],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.9],
    [0.1, 0.85, 0.9],
])


def class_templates(num_classes: int) -> np.ndarray:
    """``(Y, 3, 16, 16)`` noiseless templates; class ``k`` is shape ``k % 10`` in color ``k // 10``-ish."""
    masks = _shape_masks()
    n_shapes = len(masks)
    out = np.zeros((num_classes, CHANNELS, SIDE, SIDE))
    for k in range(num_classes):
        shape = k % n_shapes
        color = _PALETTE[(k // n_shapes + k) % len(_PALETTE)]
        out[k] = masks[shape][None] * color[:, None, None]
    return out


# ------------------------------------------------------------------ datasets


@dataclass
class Pooled:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Pooled":
        idx = np.asarray(idx, dtype=np.int64)
        return Pooled(self.images[idx], self.labels[idx], self.ids[idx], self.num_classes)


def gen_base_task(num_classes: int = 20, samples_per_class: int = 60, seed: int = 0,
                  noise_std: float = 0.1, jitter: int = 2) -> Pooled:
    """Pooled labeled images: class template, random shift by up to ``jitter`` px, Gaussian noise."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    templates = class_templates(num_classes)
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = templates[labels].copy()
    if jitter > 0:
        shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
        for i in range(n):
            images[i] = np.roll(images[i], tuple(shifts[i]), axis=(1, 2))
    if noise_std > 0:
        images += rng.normal(0.0, noise_std, size=images.shape)
    return Pooled(images, labels, np.arange(n), num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    regime: str  # "domain" | "disjoint" | "dirichlet"
    num_clients: int
    seed: int = 0
    classes_per_client: int = 2
    alpha: float = 0.1

    def __post_init__(self):
        if self.regime not in ("domain", "disjoint", "dirichlet"):
            raise ValueError(f"unknown partition regime {self.regime!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.regime == "dirichlet" and not self.alpha > 0:
            raise ValueError("Dirichlet alpha must be > 0")


@dataclass
class ClientData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray

    @property
    def num_train(self) -> int:
        return int(self.train_y.shape[0])


@dataclass
class DomainMap:
    """Hue rotation about the gray axis, contrast about mid-gray, then ``k`` quarter turns."""

    hue: float = 0.0
    contrast: float = 1.0
    quarter_turns: int = 0

    def _rot(self, angle: float) -> np.ndarray:
        u = np.ones(3) / math.sqrt(3.0)
        ux = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
        return math.cos(angle) * np.eye(3) + math.sin(angle) * ux + (1 - math.cos(angle)) * np.outer(u, u)

    def apply(self, images: np.ndarray) -> np.ndarray:
        x = np.einsum("ij,njhw->nihw", self._rot(self.hue), images)
        x = 0.5 + self.contrast * (x - 0.5)
        return np.rot90(x, self.quarter_turns, axes=(2, 3)).copy()

    def inverse(self, images: np.ndarray) -> np.ndarray:
        x = np.rot90(images, -self.quarter_turns, axes=(2, 3))
        x = 0.5 + (x - 0.5) / self.contrast
        return np.einsum("ij,njhw->nihw", self._rot(-self.hue), x)

    @property
    def is_identity(self) -> bool:
        return self.hue == 0.0 and self.contrast == 1.0 and self.quarter_turns % 4 == 0


@dataclass
class FedDataset:
    clients: list[ClientData]
    num_classes: int
    spec: dict
    domains: list[DomainMap] = field(default_factory=list)
    repairs: list[str] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def client_labels(self, n: int) -> set[int]:
        c = self.clients[n]
        return set(np.concatenate([c.train_y, c.test_y]).tolist())


def _split_client(pool: Pooled, idx: np.ndarray, rng: np.random.Generator,
                  test_fraction: float) -> ClientData:
    """Per-class train/test split inside one client, guaranteeing one sample on each side."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size < 2:
        raise ValueError("a client needs at least two samples")
    train, test = [], []
    for k in np.unique(pool.labels[idx]):
        members = rng.permutation(idx[pool.labels[idx] == k])
        n_test = int(math.floor(test_fraction * members.size + 0.5))
        test.extend(members[:n_test].tolist())
        train.extend(members[n_test:].tolist())
    if not test:
        test.append(train.pop())
    if not train:
        train.append(test.pop())
    train, test = np.sort(train), np.sort(test)
    return ClientData(pool.images[train], pool.labels[train], pool.images[test], pool.labels[test],
                      pool.ids[train], pool.ids[test])


def make_domains(pool: Pooled, num_clients: int, seed: int = 0, test_fraction: float = 0.25,
                 identity: bool = False) -> FedDataset:
    """Deal each class evenly across clients, then push client data through its domain map."""
    if num_clients < 2:
        raise ValueError("domain regime needs at least two clients")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for k in range(pool.num_classes):
        members = rng.permutation(np.flatnonzero(pool.labels == k))
        for j, i in enumerate(members):
            buckets[j % num_clients].append(int(i))
    offset_turn = int(rng.integers(0, 4))
    hue0 = float(rng.uniform(0, 2 * math.pi))
    domains, clients = [], []
    for n in range(num_clients):
        if identity:
            dm = DomainMap()
        else:
            dm = DomainMap(
                hue=(hue0 + 2 * math.pi * n / num_clients) % (2 * math.pi),
                contrast=float(rng.uniform(0.6, 1.4)),
                quarter_turns=(offset_turn + n) % 4,
            )
        cd = _split_client(pool, np.array(buckets[n]), rng, test_fraction)
        if not dm.is_identity:
            cd.train_x = dm.apply(cd.train_x)
            cd.test_x = dm.apply(cd.test_x)
        domains.append(dm)
        clients.append(cd)
    spec = asdict(PartitionSpec("domain", num_clients, seed))
    return FedDataset(clients, pool.num_classes, spec, domains=domains)


def partition_disjoint(pool: Pooled, num_clients: int, classes_per_client: int, seed: int = 0,
                       test_fraction: float = 0.25) -> FedDataset:
    if classes_per_client * num_clients > pool.num_classes:
        raise ValueError(
            f"cannot give {num_clients} clients {classes_per_client} disjoint classes out of {pool.num_classes}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(pool.num_classes)
    clients = []
    for n in range(num_clients):
        mine = order[n * classes_per_client:(n + 1) * classes_per_client]
        idx = np.flatnonzero(np.isin(pool.labels, mine))
        clients.append(_split_client(pool, idx, rng, test_fraction))
    spec = asdict(PartitionSpec("disjoint", num_clients, seed, classes_per_client=classes_per_client))
    spec["selected_classes"] = order[: classes_per_client * num_clients].tolist()
    return FedDataset(clients, pool.num_classes, spec)


def dirichlet_assignment(labels: np.ndarray, num_classes: int, num_clients: int, alpha: float,
                         rng: np.random.Generator) -> tuple[list[list[int]], list[str]]:
    """Per-class Dirichlet shares turned into index lists, plus a log of empty-client repairs."""
    owners: list[list[int]] = [[] for _ in range(num_clients)]
    for k in range(num_classes):
        members = rng.permutation(np.flatnonzero(labels == k))
        shares = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(shares)[:-1] * members.size).astype(np.int64)
        for n, part in enumerate(np.split(members, cuts)):
            owners[n].extend(part.tolist())
    repairs = []
    while True:
        sizes = [len(o) for o in owners]
        poor = int(np.argmin(sizes))
        if sizes[poor] >= 2:
            break
        rich = int(np.argmax(sizes))
        moved = owners[rich].pop(int(rng.integers(len(owners[rich]))))
        owners[poor].append(moved)
        msg = f"moved sample {moved} from client {rich} to under-filled client {poor}"
        log.info(msg)
        repairs.append(msg)
    return owners, repairs


def partition_dirichlet(pool: Pooled, num_clients: int, alpha: float = 0.1, seed: int = 0,
                        test_fraction: float = 0.25) -> FedDataset:
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if num_clients < 2:
        raise ValueError("Dirichlet regime needs at least two clients")
    rng = np.random.default_rng(seed)
    owners, repairs = dirichlet_assignment(pool.labels, pool.num_classes, num_clients, alpha, rng)
    clients = [_split_client(pool, np.array(sorted(o)), rng, test_fraction) for o in owners]
    spec = asdict(PartitionSpec("dirichlet", num_clients, seed, alpha=alpha))
    return FedDataset(clients, pool.num_classes, spec, repairs=repairs)


def make_pretrain_split(pool: Pooled, fraction: float, seed: int = 0,
                        stratified: bool = True) -> tuple[Pooled, Pooled]:
    """Disjoint (pretrain, federated) split of the pooled data."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if stratified:
        pre = []
        for k in range(pool.num_classes):
            members = rng.permutation(np.flatnonzero(pool.labels == k))
            pre.extend(members[: int(round(fraction * members.size))].tolist())
        pre = np.array(sorted(pre), dtype=np.int64)
    else:
        pre = np.sort(rng.permutation(len(pool))[: int(round(fraction * len(pool)))])
    rest = np.setdiff1d(np.arange(len(pool)), pre)
    return pool.subset(pre), pool.subset(rest)


def partition(pool: Pooled, spec: PartitionSpec, test_fraction: float = 0.25) -> FedDataset:
    if spec.regime == "domain":
        return make_domains(pool, spec.num_clients, spec.seed, test_fraction)
    if spec.regime == "disjoint":
        return partition_disjoint(pool, spec.num_clients, spec.classes_per_client, spec.seed, test_fraction)
    return partition_dirichlet(pool, spec.num_clients, spec.alpha, spec.seed, test_fraction)


def top_class_shares(fed: FedDataset) -> np.ndarray:
    """Fraction of each client's samples that belong to its most frequent class."""
    out = []
    for c in fed.clients:
        y = np.concatenate([c.train_y, c.test_y])
        out.append(np.bincount(y).max() / y.size)
    return np.array(out)


def export_dataset(fed: FedDataset, directory, extra: Optional[dict] = None) -> Path:
    """Write one tensor file per client split plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for n, c in enumerate(fed.clients):
        for split, x, y, ids in (("train", c.train_x, c.train_y, c.train_ids),
                                 ("test", c.test_x, c.test_y, c.test_ids)):
            name = f"client{n:03d}_{split}.npz"
            save_tensors(directory / name, {"images": x, "labels": y, "ids": ids},
                         {"client": n, "split": split})
            files.append({"client": n, "split": split, "file": name, "count": int(y.size)})
    manifest = {
        "partition": fed.spec,
        "num_clients": fed.num_clients,
        "num_classes": fed.num_classes,
        "files": files,
        "domains": [asdict(d) for d in fed.domains],
        "repairs": fed.repairs,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
