import json

import numpy as np
import pytest

from pfedpg.container import ContainerError, load_tensors, save_tensors
from pfedpg.data import (
    DomainMap,
    PartitionSpec,
    export_dataset,
    gen_base_task,
    make_domains,
    make_pretrain_split,
    partition,
    partition_dirichlet,
    partition_disjoint,
    top_class_shares,
)


def all_ids(fed):
    return np.concatenate([np.concatenate([c.train_ids, c.test_ids]) for c in fed.clients])


def test_generation_is_deterministic():
    a, b = gen_base_task(5, 10, seed=3), gen_base_task(5, 10, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_base_task(5, 10, seed=4).images)


def test_zero_noise_and_jitter_gives_identical_class_samples():
    pool = gen_base_task(6, 5, seed=0, noise_std=0.0, jitter=0)
    for k in range(6):
        imgs = pool.images[pool.labels == k]
        assert all(np.array_equal(imgs[0], im) for im in imgs)


def test_linear_classifier_separates_noiseless_pool():
    # Least-squares one-vs-all on raw pixels as a separability oracle.
    pool = gen_base_task(20, 10, seed=0, noise_std=0.0, jitter=0)
    x = np.c_[pool.images.reshape(len(pool), -1), np.ones(len(pool))]
    targets = np.eye(20)[pool.labels]
    w, *_ = np.linalg.lstsq(x, targets, rcond=None)
    acc = np.mean(np.argmax(x @ w, axis=1) == pool.labels)
    assert acc > 0.9


def test_domain_map_round_trip():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(4, 3, 16, 16))
    for dm in (DomainMap(1.1, 0.7, 1), DomainMap(4.0, 1.3, 3), DomainMap()):
        assert np.max(np.abs(dm.inverse(dm.apply(x)) - x)) < 1e-6


def test_domain_clients_recover_pooled_samples():
    pool = gen_base_task(5, 12, seed=1)
    fed = make_domains(pool, 4, seed=2)
    lookup = {int(i): pool.images[j] for j, i in enumerate(pool.ids)}
    for c, dm in zip(fed.clients, fed.domains):
        back = dm.inverse(c.train_x)
        for img, i in zip(back, c.train_ids):
            assert np.max(np.abs(img - lookup[int(i)])) < 1e-6
    assert len({(d.hue, d.quarter_turns) for d in fed.domains}) == 4


def test_identity_domains_give_untransformed_iid_split():
    pool = gen_base_task(5, 12, seed=1)
    fed = make_domains(pool, 3, seed=2, identity=True)
    lookup = {int(i): pool.images[j] for j, i in enumerate(pool.ids)}
    for n, c in enumerate(fed.clients):
        assert all(np.array_equal(img, lookup[int(i)]) for img, i in zip(c.train_x, c.train_ids))
        assert fed.client_labels(n) == set(range(5))
    assert sorted(all_ids(fed).tolist()) == list(range(len(pool)))


def test_disjoint_labels_are_pairwise_disjoint():
    pool = gen_base_task(20, 6, seed=0)
    fed = partition_disjoint(pool, 10, 2, seed=5)
    sets = [fed.client_labels(n) for n in range(10)]
    for i in range(10):
        assert len(sets[i]) == 2
        for j in range(i + 1, 10):
            assert not sets[i] & sets[j]
    assert set().union(*sets) == set(fed.spec["selected_classes"])


def test_disjoint_single_client_with_all_classes_is_the_pool():
    pool = gen_base_task(4, 6, seed=0)
    fed = partition_disjoint(pool, 1, 4, seed=0)
    assert sorted(all_ids(fed).tolist()) == list(range(len(pool)))


def test_disjoint_rejects_oversubscription():
    with pytest.raises(ValueError):
        partition_disjoint(gen_base_task(4, 3), 3, 2)


def test_dirichlet_conserves_samples_and_has_no_tiny_clients():
    pool = gen_base_task(20, 30, seed=0)
    fed = partition_dirichlet(pool, 10, 0.1, seed=0)
    ids = all_ids(fed)
    assert sorted(ids.tolist()) == list(range(len(pool)))
    assert all(c.num_train >= 1 and len(c.test_y) >= 1 for c in fed.clients)


def test_dirichlet_large_alpha_is_near_uniform():
    pool = gen_base_task(4, 1000, seed=0, noise_std=0.0, jitter=0)
    worst = 0.0
    for seed in range(20):
        fed = partition_dirichlet(pool, 5, 1e6, seed=seed)
        for c in fed.clients:
            y = np.concatenate([c.train_y, c.test_y])
            shares = np.bincount(y, minlength=4) / 1000.0
            worst = max(worst, np.max(np.abs(shares - 0.2)))
    assert worst < 0.05


def sampled_top_share(num_classes, num_clients, alpha, draws, seed=0):
    # Direct sampling: per-class Dirichlet shares, each client's top-class fraction.
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(draws):
        shares = rng.dirichlet(np.full(num_clients, alpha), size=num_classes)
        out.extend((shares / shares.sum(axis=0)).max(axis=0))
    return float(np.median(out))


def test_dirichlet_small_alpha_is_skewed():
    pool = gen_base_task(10, 60, seed=0, noise_std=0.0, jitter=0)
    shares = np.concatenate([top_class_shares(partition_dirichlet(pool, 10, 0.1, seed=s)) for s in range(20)])
    assert np.median(shares) > 0.5


def test_dirichlet_skew_tracks_direct_sampling():
    for classes in (10, 20):
        pool = gen_base_task(classes, 200, seed=0, noise_std=0.0, jitter=0)
        shares = np.concatenate([top_class_shares(partition_dirichlet(pool, 10, 0.1, seed=s)) for s in range(20)])
        assert abs(np.median(shares) - sampled_top_share(classes, 10, 0.1, 500)) < 0.05


def test_partition_dispatch_and_spec_validation():
    pool = gen_base_task(6, 10, seed=0)
    assert partition(pool, PartitionSpec("disjoint", 3, 0, classes_per_client=2)).spec["regime"] == "disjoint"
    assert partition(pool, PartitionSpec("domain", 2, 0)).spec["regime"] == "domain"
    with pytest.raises(ValueError):
        PartitionSpec("bogus", 2)
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", 2, alpha=0.0)


def test_pretrain_split_sizes_disjointness_and_stratification():
    pool = gen_base_task(10, 100, seed=0, noise_std=0.0, jitter=0)
    pre, rest = make_pretrain_split(pool, 0.5, seed=1)
    assert len(pre) == len(rest) == 500
    assert not set(pre.ids.tolist()) & set(rest.ids.tolist())
    full = np.bincount(pool.labels) / len(pool)
    for part in (pre, rest):
        assert np.max(np.abs(np.bincount(part.labels, minlength=10) / len(part) - full)) < 0.02


def test_unstratified_pretrain_split_sizes():
    pool = gen_base_task(10, 100, seed=0)
    pre, rest = make_pretrain_split(pool, 0.3, seed=1, stratified=False)
    assert len(pre) == 300 and len(rest) == 700


def test_export_writes_manifest_and_tensors(tmp_path):
    pool = gen_base_task(6, 8, seed=0)
    fed = partition_disjoint(pool, 3, 2, seed=0)
    path = export_dataset(fed, tmp_path / "out", {"note": "x"})
    manifest = json.loads(path.read_text())
    assert manifest["num_clients"] == 3 and manifest["note"] == "x"
    assert len(manifest["files"]) == 6
    arrays, meta = load_tensors(tmp_path / "out" / manifest["files"][0]["file"])
    assert meta["client"] == 0 and np.array_equal(arrays["labels"], fed.clients[0].train_y)


def test_container_rejects_foreign_files(tmp_path):
    np.savez(tmp_path / "plain.npz", a=np.ones(2))
    with pytest.raises(ContainerError):
        load_tensors(tmp_path / "plain.npz")
    p = save_tensors(tmp_path / "ok.npz", {"a": np.arange(3.0)}, {"k": 1})
    arrays, meta = load_tensors(p)
    assert np.array_equal(arrays["a"], [0.0, 1.0, 2.0]) and meta["k"] == 1
