"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run just this file with ``pytest tests/test_acceptance.py -v`` (the lines are
echoed in the terminal summary) or directly with ``python tests/test_acceptance.py``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from pfedpg import gradcheck
from pfedpg.compare import compare
from pfedpg.config import load_config
from pfedpg.data import gen_base_task, partition_dirichlet, partition_disjoint, top_class_shares
from pfedpg.encoder import EncoderConfig, EncoderWeights, embed_patches, encode
from pfedpg.numerics import Tensor
from pfedpg.orchestrator import build_dataset, build_encoder, records_to_csv, run_experiment, run_rounds, setup
from pfedpg.server import CrossAttentionGenerator, prompt_fraction

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = [0, 1, 2, 3, 4]


def _line(report_line, number, ok, detail):
    report_line(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}")


def test_criterion_1_finite_difference_oracles(report_line):
    start = time.perf_counter()
    checks = gradcheck.primitive_checks(0) + gradcheck.pipeline_checks(0) + gradcheck.generator_checks(0)
    seconds = time.perf_counter() - start
    worst = max(c.error for c in checks)
    ok = all(c.passed for c in checks) and all(c.tol == 1e-4 for c in checks) and seconds < 60
    _line(report_line, 1, ok, f"{len(checks)} finite-difference checks, worst rel err {worst:.2e} "
          f"(tol 1e-4), {seconds:.1f}s")
    assert ok, "\n".join(c.line() for c in checks if not c.passed)


def test_criterion_2_pseudo_gradient_is_exact_for_one_full_batch_step(report_line):
    start = time.perf_counter()
    checks = gradcheck.pseudo_gradient_checks(0)
    seconds = time.perf_counter() - start
    names = {c.name.split(": ")[1] for c in checks if c.name.startswith("pfedpg pseudo")}
    assert {"p_base", "wq", "wk", "wv", "wo", "descriptor"} <= names
    worst = max(c.error for c in checks if c.tol > 0)
    ok = all(c.passed for c in checks) and seconds < 60
    _line(report_line, 2, ok, f"{len(checks)} generator parameters (3 generators), worst rel err {worst:.2e} "
          f"(tol 1e-6), {seconds:.1f}s")
    assert ok, "\n".join(c.line() for c in checks if not c.passed)


def test_criterion_3_structural_invariants(report_line):
    errors = {}
    rng = np.random.default_rng(0)
    # W_O = 0 gives P_base for every client.
    gen = CrossAttentionGenerator.init(4, 5, 8, seed=1)
    for k in gen.params:
        gen.params[k] = rng.normal(size=gen.params[k].shape)
    gen.params["wo"][:] = 0.0
    errors["W_O=0 -> P_base"] = max(np.abs(gen.generate(n) - gen.params["p_base"]).max() for n in range(4))
    # Identical descriptors give identical prompts.
    gen.params["wo"] = rng.normal(size=gen.params["wo"].shape)
    gen.params["descriptors"][3] = gen.params["descriptors"][1]
    errors["identical descriptors"] = np.abs(gen.generate(1) - gen.generate(3)).max()
    # Prompt-row permutation leaves the class-token output unchanged.
    enc = EncoderWeights.init(EncoderConfig(embed_dim=16, depth=2, heads=2, seed=2))
    prompts = rng.normal(size=(6, 16))
    z = embed_patches(rng.normal(size=(4, 3, 16, 16)), enc)
    out = encode(Tensor(prompts), z, enc).data
    errors["prompt permutation"] = max(
        np.abs(encode(Tensor(prompts[rng.permutation(6)]), z, enc).data - out).max() for _ in range(5))
    # Zero client step: every round leaves generator, prompts and encoder where they were.
    cfg = load_config(CONFIGS / "dirichlet.toml").replace(client_lr=0.0, rounds=3, encoder_mode="random",
                                                         num_clients=4)
    fed = setup(cfg)
    before = fed.strategy.generator.copy()
    run_rounds(fed)
    errors["client_lr=0 fixed point"] = max(
        np.abs(fed.strategy.generator.params[k] - before.params[k]).max() for k in before.params)
    errors["frozen-encoder hash"] = 0.0 if fed.encoder.content_hash() == fed.encoder_hash else 1.0
    worst = max(errors.values())
    ok = worst <= 1e-9
    _line(report_line, 3, ok, ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + " (tol 1e-9)")
    assert ok, errors


def test_criterion_4_determinism(report_line, tmp_path):
    cfg = load_config(CONFIGS / "dirichlet.toml").replace(rounds=3)
    enc, rest = build_encoder(cfg)
    dataset = build_dataset(cfg, rest)
    run_experiment(cfg, run_dir=tmp_path / "a", encoder=enc, dataset=dataset)
    run_experiment(cfg, run_dir=tmp_path / "b", encoder=enc, dataset=dataset)
    same_csv = (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()
    # A second, independently built encoder and partition from the same seeds.
    enc2, rest2 = build_encoder(cfg)
    par = run_experiment(cfg.replace(workers=4), encoder=enc2, dataset=build_dataset(cfg, rest2), save=False)
    same_parallel = records_to_csv(par.records) == (tmp_path / "a" / "rounds.csv").read_text()
    ok = same_csv and same_parallel
    _line(report_line, 4, ok, f"repeat run CSV byte-identical: {same_csv}; 4 workers vs sequential "
          f"identical: {same_parallel}")
    assert ok


def test_criterion_5_dirichlet_ordering(report_line):
    cfg = load_config(CONFIGS / "dirichlet.toml")
    result = compare(cfg, ["pfedpg", "fedvpt", "base_only", "local_only"], SEEDS)
    m_vpt, se_vpt = result.margin("pfedpg", "fedvpt")
    m_base, se_base = result.margin("pfedpg", "base_only")
    wins_local = result.wins("pfedpg", "local_only")
    ok_vpt = m_vpt > 0 and m_vpt > se_vpt
    ok_base = m_base > 0 and m_base > se_base
    ok_local = wins_local >= 3
    ok = ok_vpt and ok_base and ok_local
    _line(report_line, 5, ok,
          f"pfedpg {result.mean('pfedpg'):.4f} | fedvpt {result.mean('fedvpt'):.4f} "
          f"(margin {m_vpt:+.4f}, se {se_vpt:.4f}) | base_only {result.mean('base_only'):.4f} "
          f"(margin {m_base:+.4f}, se {se_base:.4f}) | pfedpg >= local_only in {wins_local}/5 seeds "
          f"| {result.seconds:.0f}s")
    print(result.table())
    assert ok_vpt, f"pfedpg - fedvpt = {m_vpt:+.4f} (se {se_vpt:.4f})"
    assert ok_base, f"pfedpg - base_only = {m_base:+.4f} (se {se_base:.4f})"
    assert ok_local, f"pfedpg >= local_only in {wins_local}/5 seeds"


def test_criterion_6_domain_shift_ordering(report_line):
    cfg = load_config(CONFIGS / "domain.toml")
    assert cfg.partition == "domain" and cfg.num_clients == 4
    result = compare(cfg, ["pfedpg", "fedvpt"], SEEDS)
    m, se = result.margin("pfedpg", "fedvpt")
    ok = m > 0 and m > se
    _line(report_line, 6, ok, f"pfedpg {result.mean('pfedpg'):.4f} | fedvpt {result.mean('fedvpt'):.4f} "
          f"(margin {m:+.4f}, se {se:.4f}, pfedpg >= fedvpt in {result.wins('pfedpg', 'fedvpt')}/5 seeds) "
          f"| {result.seconds:.0f}s")
    print(result.table())
    assert ok


def test_criterion_7_communication(report_line):
    cfg = load_config(CONFIGS / "dirichlet.toml").replace(rounds=2, encoder_mode="random")
    per_strategy = {}
    for strategy in ("pfedpg", "fedvpt"):
        res = run_experiment(cfg.replace(strategy=strategy), save=False)
        per_strategy[strategy] = {u for r in res.records for u in r.uplink + r.downlink}
    kl = cfg.num_prompts * cfg.embed_dim
    logged_ok = all(v == {kl} for v in per_strategy.values())
    ratio = prompt_fraction(10, 768, 85.8e6)
    ratio_ok = 5e-5 <= ratio <= 5e-4
    ok = logged_ok and ratio_ok
    _line(report_line, 7, ok, f"logged per-client up/down = {sorted(set().union(*per_strategy.values()))} "
          f"(K*l = {kl}); K=10, l=768 vs 85.8M params -> ratio {ratio:.3e} (~{100 * ratio:.3f}%)")
    assert ok


def test_criterion_8_partition_statistics(report_line):
    pool = gen_base_task(20, 30, seed=0, noise_std=0.0, jitter=0)
    overlaps = 0
    for seed in range(20):
        fed = partition_disjoint(pool, 10, 2, seed=seed)
        sets = [fed.client_labels(n) for n in range(10)]
        overlaps += sum(len(sets[i] & sets[j]) for i in range(10) for j in range(i + 1, 10))
    ten = gen_base_task(10, 60, seed=0, noise_std=0.0, jitter=0)
    shares = np.concatenate([top_class_shares(partition_dirichlet(ten, 10, 0.1, seed=s)) for s in range(20)])
    twenty = np.concatenate([top_class_shares(partition_dirichlet(pool, 10, 0.1, seed=s)) for s in range(20)])
    median = float(np.median(shares))
    ok = overlaps == 0 and median > 0.5
    _line(report_line, 8, ok, f"disjoint-label overlaps over 20 seeds: {overlaps}; Dir(0.1) over 10 clients, "
          f"10 classes: median top-class share {median:.3f} (> 0.5) [20 classes: {np.median(twenty):.3f}]")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
