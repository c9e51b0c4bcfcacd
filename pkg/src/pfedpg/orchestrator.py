"""Synchronous federated rounds: issue prompts, adapt locally, update the server, log."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np

from .client import AdaptResult, ClientState, LocalHparams, evaluate, local_adapt
from .config import ExperimentConfig, dump_config
from .container import save_tensors
from .data import FedDataset, PartitionSpec, Pooled, gen_base_task, make_pretrain_split, partition
from .encoder import EncoderWeights, Head
from .pretrain import load_encoder, pretrain_encoder, save_encoder
from .server import (
    INIT_STD,
    Generator,
    aggregate_fedvpt,
    comm_cost,
    make_generator,
    save_generator,
    server_update,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ("round", "client", "train_loss", "test_acc", "uplink_params", "downlink_params", "wall_ms")


class FrozenEncoderViolation(RuntimeError):
    pass


# ---------------------------------------------------------------- strategies


class Strategy:
    """Server-side behaviour of one experiment arm."""

    name = "base"

    def issue(self, client: ClientState) -> np.ndarray:
        raise NotImplementedError

    def receive(self, results: list[AdaptResult], clients: list[ClientState]):
        pass

    def deployed(self, client: ClientState) -> np.ndarray:
        """Prompts the client evaluates with."""
        return client.prompts

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}


class GeneratorStrategy(Strategy):
    def __init__(self, name: str, generator: Generator, lr: float, literal_sign: bool = False,
                 mode: str = "sequential"):
        self.name = name
        self.generator = generator
        self.lr = lr
        self.literal_sign = literal_sign
        self.mode = mode

    def issue(self, client):
        return self.generator.generate(client.cid)

    def receive(self, results, clients):
        server_update(self.generator, [r.delta for r in results], self.lr, self.literal_sign, self.mode)

    def deployed(self, client):
        if self.name == "base_only":
            return self.generator.params["p_base"]
        return client.prompts

    def state_arrays(self):
        return {f"server.{k}": v for k, v in self.generator.state_arrays().items()}


class FedVPTStrategy(Strategy):
    name = "fedvpt"

    def __init__(self, prompts: np.ndarray):
        self.prompts = np.array(prompts, dtype=np.float64)

    def issue(self, client):
        return self.prompts

    def receive(self, results, clients):
        self.prompts = aggregate_fedvpt([(r.prompts, r.delta.num_samples) for r in results])

    def deployed(self, client):
        return self.prompts

    def state_arrays(self):
        return {"server.global_prompts": self.prompts.copy()}


class LocalOnlyStrategy(Strategy):
    name = "local_only"

    def issue(self, client):
        return client.prompts


def make_strategy(cfg: ExperimentConfig) -> Strategy:
    rng = np.random.default_rng([cfg.model_seed, 101])
    if cfg.strategy == "fedvpt":
        return FedVPTStrategy(rng.normal(0, INIT_STD, (cfg.num_prompts, cfg.embed_dim)))
    if cfg.strategy == "local_only":
        return LocalOnlyStrategy()
    gen = make_generator(cfg.strategy, cfg.num_clients, cfg.num_prompts, cfg.embed_dim, cfg.key_dim,
                         cfg.value_dim, cfg.mlp_hidden, seed=cfg.model_seed)
    return GeneratorStrategy(cfg.strategy, gen, cfg.server_lr, cfg.literal_sign, cfg.server_update_mode)


# ------------------------------------------------------------------- records


@dataclass
class RoundRecord:
    round: int
    train_loss: list[float]
    test_acc: list[float]
    uplink: list[int]
    downlink: list[int]
    wall_ms: float = 0.0

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.test_acc))

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.train_loss))


def _fmt(x: float) -> str:
    return repr(float(x))


def records_to_csv(records: list[RoundRecord], wall_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        ms = _fmt(r.wall_ms) if wall_time else "0"
        for n, (loss, acc, up, down) in enumerate(zip(r.train_loss, r.test_acc, r.uplink, r.downlink)):
            w.writerow([r.round, n, _fmt(loss), _fmt(acc), up, down, ms])
        w.writerow([r.round, -1, _fmt(r.mean_loss), _fmt(r.mean_acc), _fmt(np.mean(r.uplink)),
                    _fmt(np.mean(r.downlink)), ms])
    return buf.getvalue()


# -------------------------------------------------------------------- rounds


@dataclass
class Federation:
    """Everything a run mutates: clients, the server strategy, the frozen encoder."""

    config: ExperimentConfig
    encoder: EncoderWeights
    clients: list[ClientState]
    strategy: Strategy
    dataset: FedDataset
    encoder_hash: str = ""
    records: list[RoundRecord] = field(default_factory=list)


def _adapt_one(args):
    client, p_init, encoder, t, seed = args
    return local_adapt(client, p_init, encoder, round_idx=t, seed=seed)


def run_round(t: int, fed: Federation, executor: Optional[ThreadPoolExecutor] = None) -> RoundRecord:
    """One synchronous round; every client adapts from prompts issued before any server update."""
    cfg = fed.config
    start = time.perf_counter()
    issued = [np.array(fed.strategy.issue(c), copy=True) for c in fed.clients]
    if cfg.reset_head:
        for c in fed.clients:
            c.head = Head.zeros(cfg.embed_dim, cfg.num_classes)
    jobs = [(c, p, fed.encoder, t, cfg.train_seed) for c, p in zip(fed.clients, issued)]
    try:
        if executor is None:
            results = [_adapt_one(j) for j in jobs]
        else:
            results = list(executor.map(_adapt_one, jobs))
    except Exception as exc:
        raise RuntimeError(f"round {t} aborted: {exc}") from exc
    fed.strategy.receive(results, fed.clients)
    accs = [evaluate(c, fed.encoder, fed.strategy.deployed(c))[0] for c in fed.clients]
    cost = comm_cost(cfg.strategy, cfg.num_prompts, cfg.embed_dim)
    n = len(fed.clients)
    rec = RoundRecord(
        round=t,
        train_loss=[r.train_loss for r in results],
        test_acc=accs,
        uplink=[cost["uplink"]] * n,
        downlink=[cost["downlink"]] * n,
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )
    fed.records.append(rec)
    log.info("round %d mean acc %.4f mean loss %.4f", t, rec.mean_acc, rec.mean_loss)
    return rec


def final_evaluate(fed: Federation, deploy: Optional[str] = None) -> list[dict]:
    """Per-client test accuracy with deployed prompts.

    ``deploy="base"`` evaluates a generator run with ``P_base`` in place of
    each client's prompts (what the ``base_only`` arm deploys).
    """
    rows = []
    for c in fed.clients:
        if deploy == "base":
            prompts = fed.strategy.generator.params["p_base"]
        else:
            prompts = fed.strategy.deployed(c)
        acc, loss = evaluate(c, fed.encoder, prompts)
        rows.append({"client": c.cid, "test_acc": acc, "test_loss": loss,
                     "num_train": c.num_train, "num_test": int(len(c.data.test_y))})
    return rows


# ---------------------------------------------------------------- experiment


def build_pool(cfg: ExperimentConfig) -> Pooled:
    return gen_base_task(cfg.num_classes, cfg.samples_per_class, cfg.data_seed, cfg.noise_std, cfg.jitter)


def build_encoder(cfg: ExperimentConfig, pool: Optional[Pooled] = None) -> tuple[EncoderWeights, Pooled]:
    """Frozen-encoder weights and the pool left for federated clients."""
    pool = pool if pool is not None else build_pool(cfg)
    if cfg.encoder_mode == "random":
        return EncoderWeights.init(cfg.encoder_config(), seed=cfg.model_seed), pool
    pre, rest = make_pretrain_split(pool, cfg.pretrain_fraction, cfg.data_seed)
    if cfg.encoder_path and Path(cfg.encoder_path).exists():
        enc = load_encoder(cfg.encoder_path)
        if enc.config != cfg.encoder_config():
            raise ValueError(f"{cfg.encoder_path}: encoder config does not match the experiment config")
        return enc, rest
    enc = pretrain_encoder(cfg.encoder_config(), pre, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.batch_size,
                           seed=cfg.model_seed)
    if cfg.encoder_path:
        save_encoder(enc, cfg.encoder_path)
    return enc, rest


def build_dataset(cfg: ExperimentConfig, pool: Pooled) -> FedDataset:
    spec = PartitionSpec(cfg.partition, cfg.num_clients, cfg.data_seed, cfg.classes_per_client,
                         cfg.dirichlet_alpha)
    return partition(pool, spec, cfg.test_fraction)


def setup(cfg: ExperimentConfig, encoder: Optional[EncoderWeights] = None,
          dataset: Optional[FedDataset] = None) -> Federation:
    if encoder is None or dataset is None:
        built, rest = build_encoder(cfg)
        encoder = encoder if encoder is not None else built
        dataset = dataset if dataset is not None else build_dataset(cfg, rest)
    if dataset.num_clients != cfg.num_clients:
        raise ValueError(f"dataset has {dataset.num_clients} clients, config says {cfg.num_clients}")
    digest = encoder.freeze()
    hp = LocalHparams(cfg.client_lr, cfg.weight_decay, cfg.batch_size, cfg.local_epochs)
    rng = np.random.default_rng([cfg.model_seed, 202])
    clients = []
    for n, cd in enumerate(dataset.clients):
        init = rng.normal(0, INIT_STD, (cfg.num_prompts, cfg.embed_dim))
        clients.append(ClientState.create(n, cd, encoder, cfg.num_prompts, dataset.num_classes, hp, init))
    return Federation(cfg, encoder, clients, make_strategy(cfg), dataset, digest)


@dataclass
class ExperimentResult:
    federation: Federation
    records: list[RoundRecord]
    final: list[dict]
    summary: dict
    run_dir: Optional[Path]


def run_rounds(fed: Federation) -> list[RoundRecord]:
    cfg = fed.config
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for t in range(1, cfg.rounds + 1):
                run_round(t, fed, pool)
    else:
        for t in range(1, cfg.rounds + 1):
            run_round(t, fed)
    if fed.encoder.content_hash() != fed.encoder_hash:
        raise FrozenEncoderViolation("frozen encoder weights changed during the run")
    return fed.records


def summarize(fed: Federation, final: list[dict]) -> dict:
    cfg = fed.config
    accs = [r["test_acc"] for r in final]
    cost = comm_cost(cfg.strategy, cfg.num_prompts, cfg.embed_dim)
    full = fed.encoder.parameter_count() + cfg.embed_dim * fed.dataset.num_classes + fed.dataset.num_classes
    return {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "partition": fed.dataset.spec,
        "rounds": cfg.rounds,
        "config_hash": cfg.digest(),
        "encoder_hash": fed.encoder_hash,
        "encoder_mode": fed.encoder.mode,
        "final": final,
        "mean_acc": float(np.mean(accs)),
        "comm": {
            "uplink_per_client": cost["uplink"],
            "downlink_per_client": cost["downlink"],
            "full_model_params": int(full),
            "ratio": cost["uplink"] / full,
        },
        "wall_ms": [r.wall_ms for r in fed.records],
        "repairs": fed.dataset.repairs,
    }


def default_run_dir(cfg: ExperimentConfig) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    return Path(cfg.output_dir) / f"{cfg.strategy}-{cfg.digest()[:12]}-{stamp}"


def persist(fed: Federation, summary: dict, run_dir) -> Path:
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.toml").write_text(dump_config(fed.config))
        (run_dir / "rounds.csv").write_text(records_to_csv(fed.records, fed.config.log_wall_time))
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write run artifacts under {run_dir}: {exc}") from exc
    arrays = dict(fed.strategy.state_arrays())
    for c in fed.clients:
        arrays[f"client{c.cid}.prompts"] = c.prompts
        arrays[f"client{c.cid}.head_w"] = c.head.weight
        arrays[f"client{c.cid}.head_b"] = c.head.bias
    save_tensors(run_dir / "states.npz", arrays, {"strategy": fed.config.strategy, "rounds": fed.config.rounds})
    if isinstance(fed.strategy, GeneratorStrategy):
        save_generator(fed.strategy.generator, run_dir / "generator.npz", {"strategy": fed.config.strategy})
    return run_dir


def run_experiment(cfg: ExperimentConfig, run_dir=None, encoder: Optional[EncoderWeights] = None,
                   dataset: Optional[FedDataset] = None, save: bool = True) -> ExperimentResult:
    fed = setup(cfg, encoder, dataset)
    run_rounds(fed)
    final = final_evaluate(fed)
    summary = summarize(fed, final)
    out = None
    if save:
        out = persist(fed, summary, run_dir if run_dir is not None else default_run_dir(cfg))
    return ExperimentResult(fed, fed.records, final, summary, out)
