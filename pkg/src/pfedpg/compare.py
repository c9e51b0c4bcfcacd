"""Multi-seed strategy comparison on a shared encoder and partition per seed."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .orchestrator import build_dataset, build_encoder, final_evaluate, run_experiment

log = logging.getLogger(__name__)


@dataclass
class Comparison:
    strategies: list[str]
    seeds: list[int]
    # accuracy[strategy][i] is the mean final client accuracy for seeds[i]
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, strategy: str) -> float:
        return float(np.mean(self.accuracy[strategy]))

    def se(self, strategy: str) -> float:
        return standard_error(self.accuracy[strategy])

    def paired(self, a: str, b: str) -> np.ndarray:
        return np.asarray(self.accuracy[a]) - np.asarray(self.accuracy[b])

    def margin(self, a: str, b: str) -> tuple[float, float]:
        """Mean and standard error of the per-seed accuracy difference ``a - b``."""
        d = self.paired(a, b)
        return float(d.mean()), standard_error(d)

    def wins(self, a: str, b: str) -> int:
        return int(np.sum(self.paired(a, b) >= 0))

    def table(self) -> str:
        lines = [f"{'strategy':<14} {'mean':>7} {'se':>7}  per-seed"]
        for s in self.strategies:
            per = " ".join(f"{v:.4f}" for v in self.accuracy[s])
            lines.append(f"{s:<14} {self.mean(s):>7.4f} {self.se(s):>7.4f}  {per}")
        return "\n".join(lines)


def standard_error(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def compare(base: ExperimentConfig, strategies, seeds) -> Comparison:
    """Run every strategy for every seed (``seed = [s, s, s]``) and collect final accuracy.

    Within one seed all arms share the pretrained encoder and the client
    partition.  ``base_only`` is read off the ``pfedpg`` run by evaluating with
    ``P_base`` when both are requested: the two arms train identically and
    differ only in the prompts deployed at evaluation.
    """
    strategies, seeds = list(strategies), [int(s) for s in seeds]
    out = Comparison(strategies, seeds, {s: [] for s in strategies})
    start = time.perf_counter()
    for seed in seeds:
        cfg = base.replace(seed=[seed, seed, seed], encoder_path="")
        enc, rest = build_encoder(cfg)
        dataset = build_dataset(cfg, rest)
        derived_base = "base_only" in strategies and "pfedpg" in strategies
        for name in strategies:
            if name == "base_only" and derived_base:
                continue
            res = run_experiment(cfg.replace(strategy=name), encoder=enc, dataset=dataset, save=False)
            out.accuracy[name].append(res.summary["mean_acc"])
            if name == "pfedpg" and derived_base:
                rows = final_evaluate(res.federation, "base")
                out.accuracy["base_only"].append(float(np.mean([r["test_acc"] for r in rows])))
        log.info("seed %d: %s", seed, {k: round(v[-1], 4) for k, v in out.accuracy.items()})
    out.seconds = time.perf_counter() - start
    return out
