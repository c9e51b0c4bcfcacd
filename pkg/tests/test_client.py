import numpy as np
import pytest

from pfedpg.client import (
    ClientState,
    LocalHparams,
    TrainingError,
    argmax_class,
    evaluate,
    local_adapt,
    logits_for,
    predict,
    prompt_gradient,
)
from pfedpg.data import ClientData
from pfedpg.encoder import EncoderConfig, EncoderWeights, Head, embed_patches, encode, head_forward
from pfedpg.numerics import DimensionError, Tensor

CFG = EncoderConfig(image_side=8, channels=3, patch_side=4, embed_dim=8, depth=1, heads=2, seed=0)


@pytest.fixture(scope="module")
def enc():
    w = EncoderWeights.init(CFG)
    w.freeze()
    return w


def toy_data(n=12, classes=3, seed=0, separable=False):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    x = rng.normal(0, 0.3, size=(n, 3, 8, 8))
    if separable:
        x[np.arange(n), y] += 2.0
    ty = np.arange(6) % classes
    tx = rng.normal(0, 0.3, size=(6, 3, 8, 8))
    if separable:
        tx[np.arange(6), ty] += 2.0
    return ClientData(x, y, tx, ty, np.arange(n), np.arange(6))


def make_client(enc, hp, classes=3, seed=0, separable=False, k=2):
    data = toy_data(classes=classes, seed=seed, separable=separable)
    p0 = np.random.default_rng(seed + 100).normal(0, 0.1, (k, 8))
    return ClientState.create(0, data, enc, k, classes, hp, p0)


def test_zero_learning_rate_gives_zero_delta(enc):
    c = make_client(enc, LocalHparams(lr=0.0, weight_decay=0.001, batch_size=4, epochs=2))
    p0 = c.prompts.copy()
    res = local_adapt(c, p0, enc, round_idx=0, seed=0)
    assert np.array_equal(res.delta.delta, np.zeros_like(p0))
    assert np.array_equal(res.prompts, p0)


def test_single_full_batch_step_is_one_gradient_step(enc):
    c = make_client(enc, LocalHparams(lr=0.25, weight_decay=0.0, batch_size=64, epochs=1))
    p0 = c.prompts.copy()
    head0 = c.head.copy()
    res = local_adapt(c, p0, enc, round_idx=3, seed=1)
    _, gp, _, _ = prompt_gradient(p0, head0, c.train_z, c.data.train_y, enc)
    assert np.max(np.abs(res.delta.delta - (-0.25 * gp))) < 1e-12
    assert res.delta.num_samples == 12 and res.delta.round == 3


def test_weight_decay_enters_as_l2_term(enc):
    c = make_client(enc, LocalHparams(lr=0.1, weight_decay=0.5, batch_size=64, epochs=1))
    c.head = Head(np.ones((8, 3)), np.ones(3))
    p0, head0 = c.prompts.copy(), c.head.copy()
    res = local_adapt(c, p0, enc)
    _, gp, gw, gb = prompt_gradient(p0, head0, c.train_z, c.data.train_y, enc)
    assert np.allclose(res.prompts, p0 - 0.1 * (gp + 0.5 * p0), atol=1e-14)
    assert np.allclose(res.head.weight, head0.weight - 0.1 * (gw + 0.5 * head0.weight), atol=1e-14)
    assert np.allclose(res.head.bias, head0.bias - 0.1 * (gb + 0.5 * head0.bias), atol=1e-14)


def test_adaptation_mutates_state_and_is_deterministic(enc):
    hp = LocalHparams(lr=0.1, weight_decay=0.001, batch_size=5, epochs=2)
    a, b = make_client(enc, hp), make_client(enc, hp)
    ra = local_adapt(a, a.prompts.copy(), enc, round_idx=2, seed=7)
    rb = local_adapt(b, b.prompts.copy(), enc, round_idx=2, seed=7)
    assert np.array_equal(ra.prompts, rb.prompts) and np.array_equal(a.head.weight, b.head.weight)
    assert np.array_equal(a.prompts, ra.prompts)
    assert len(ra.epoch_losses) == 2 and ra.train_loss == ra.epoch_losses[-1]


def test_different_round_gives_different_batches(enc):
    hp = LocalHparams(lr=0.1, weight_decay=0.0, batch_size=5, epochs=1)
    a, b = make_client(enc, hp), make_client(enc, hp)
    ra = local_adapt(a, a.prompts.copy(), enc, round_idx=0, seed=0)
    rb = local_adapt(b, b.prompts.copy(), enc, round_idx=1, seed=0)
    assert not np.array_equal(ra.prompts, rb.prompts)


def test_loss_decreases_on_separable_toy(enc):
    for seed in range(5):
        c = make_client(enc, LocalHparams(lr=0.5, weight_decay=0.0, batch_size=64, epochs=30),
                        seed=seed, separable=True)
        res = local_adapt(c, c.prompts.copy(), enc, seed=seed)
        assert res.epoch_losses[-1] < res.epoch_losses[0]


def test_bad_prompt_shape_and_empty_data_raise(enc):
    c = make_client(enc, LocalHparams())
    with pytest.raises(DimensionError):
        local_adapt(c, np.zeros((2, 5)), enc)
    empty = ClientData(np.zeros((0, 3, 8, 8)), np.zeros(0, int), np.zeros((1, 3, 8, 8)), np.zeros(1, int),
                       np.zeros(0, int), np.zeros(1, int))
    e = ClientState.create(1, empty, enc, 2, 3)
    with pytest.raises(TrainingError):
        local_adapt(e, np.zeros((2, 8)), enc)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(enc):
    c = make_client(enc, LocalHparams(lr=1e300, weight_decay=0.0, batch_size=4, epochs=3))
    with pytest.raises(TrainingError, match="client 0"):
        local_adapt(c, c.prompts.copy(), enc)


def test_argmax_ties_go_to_lowest_index():
    assert argmax_class([0.5, 2.0, 2.0, -1.0]) == 1
    assert argmax_class([1.0, 1.0]) == 0


def test_predict_matches_manual_composition(enc):
    c = make_client(enc, LocalHparams())
    rng = np.random.default_rng(3)
    c.head = Head(rng.normal(size=(8, 3)), rng.normal(size=3))
    img = c.data.test_x[0]
    z = embed_patches(img[None], enc)
    logits = head_forward(encode(Tensor(c.prompts), z, enc), c.head.weight, c.head.bias).data[0]
    assert predict(c, img, enc) == int(np.argmax(logits))


def test_accuracy_matches_per_sample_loop(enc):
    c = make_client(enc, LocalHparams())
    rng = np.random.default_rng(4)
    c.head = Head(rng.normal(size=(8, 3)), rng.normal(size=3))
    acc, _ = evaluate(c, enc)
    loop = np.mean([predict(c, x, enc) == y for x, y in zip(c.data.test_x, c.data.test_y)])
    assert acc == loop


def test_accuracy_is_one_when_head_reads_labels_perfectly(enc):
    c = make_client(enc, LocalHparams())
    logits = logits_for(c.test_z, c.prompts, c.head, enc)
    assert logits.shape == (6, 3)
    # A head that ignores features and always says class 0, on an all-zero-label split.
    c.data.test_y = np.zeros(6, int)
    c.head = Head(np.zeros((8, 3)), np.array([1.0, 0.0, 0.0]))
    assert evaluate(c, enc)[0] == 1.0


def test_explicit_prompts_override_state(enc):
    c = make_client(enc, LocalHparams())
    rng = np.random.default_rng(5)
    c.head = Head(rng.normal(size=(8, 3)), np.zeros(3))
    other = rng.normal(size=c.prompts.shape)
    _, la = evaluate(c, enc)
    _, lb = evaluate(c, enc, other)
    assert la != lb
