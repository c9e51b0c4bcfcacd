"""Gradient oracles: central differences for every differentiable op, and the
exact single-step check of the server's pseudo-gradient against end-to-end
differentiation through generator, encoder and loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .client import ClientState, LocalHparams, batch_loss, local_adapt
from .data import ClientData
from .encoder import EncoderConfig, EncoderWeights, Head, embed_patches, encode, head_forward
from .numerics import GradTape, Tensor
from .server import AdaINGenerator, CrossAttentionGenerator, Generator, MLPGenerator, server_update

FD_TOL = 1e-4
PSEUDO_TOL = 1e-6
FD_STEP = 1e-5


@dataclass
class Check:
    name: str
    error: float
    tol: float  # 0.0 means the error must be exactly zero

    @property
    def passed(self) -> bool:
        return bool(self.error == 0.0) if self.tol == 0.0 else bool(self.error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44s} err={self.error:.3e}  tol={self.tol:.0e}"


def _fd(name: str, f: Callable[[Tensor], Tensor], x, rng, tol=FD_TOL) -> Check:
    return Check(name, nx.finite_diff_check(f, x, h=FD_STEP, n_coords=50, rng=rng), tol)


def small_encoder(seed: int = 0, depth: int = 2) -> EncoderWeights:
    cfg = EncoderConfig(image_side=8, channels=3, patch_side=4, embed_dim=8, depth=depth, heads=2,
                        mlp_ratio=2.0, seed=seed)
    return EncoderWeights.init(cfg)


def primitive_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    A, B, W = r(4, 5), r(5, 3), r(4, 3)
    X, G, Bv = r(3, 6), r(6), r(6)
    Wx = r(3, 6)
    Xb, Wb = r(2, 4, 5), r(2, 4, 3)
    R29, R36, R436 = r(2, 9), r(3, 6), r(4, 3, 6)
    labels = rng.integers(0, 5, size=3)
    checks = [
        _fd("matmul (left)", lambda a: nx.sum(nx.matmul(a, B) * W), A, rng),
        _fd("matmul (right)", lambda b: nx.sum(nx.matmul(A, b) * W), B, rng),
        _fd("matmul (batched x weight)", lambda b: nx.sum(nx.matmul(Tensor(Xb), b) * Wb), B, rng),
        _fd("softmax_rows", lambda x: nx.sum(nx.softmax_rows(x) * Wx), X, rng),
        _fd("layer_norm (x)", lambda x: nx.sum(nx.layer_norm(x, G, Bv, 1e-5) * Wx), X, rng),
        _fd("layer_norm (gain)", lambda g: nx.sum(nx.layer_norm(X, g, Bv, 1e-5) * Wx), G, rng),
        _fd("layer_norm (bias)", lambda b: nx.sum(nx.layer_norm(X, G, b, 1e-5) * Wx), Bv, rng),
        _fd("gelu", lambda x: nx.sum(nx.gelu(x) * Wx), X, rng),
        _fd("tanh", lambda x: nx.sum(nx.tanh(x) * Wx), X, rng),
        _fd("sqrt", lambda x: nx.sum(nx.sqrt(x) * Wx), np.abs(X) + 0.5, rng),
        _fd("div", lambda x: nx.sum(nx.div(Wx, x)), np.abs(X) + 0.5, rng),
        _fd("maximum (away from floor)", lambda x: nx.sum(nx.maximum(x, -10.0) * Wx), X, rng),
        _fd("cross_entropy", lambda x: nx.cross_entropy(x, labels), r(3, 5), rng),
        _fd("softmax + cross_entropy", lambda x: nx.cross_entropy(nx.softmax_rows(x) * 3.0, labels), r(3, 5), rng),
        _fd("transpose/reshape", lambda x: nx.sum(nx.reshape(nx.transpose(x), (2, 9)) * R29), r(3, 6), rng),
        _fd("concat/getitem", lambda x: nx.sum(nx.concat([x, x * 2.0], axis=0)[1:4] * R36), r(3, 6), rng),
        _fd("broadcast_to/mean", lambda x: nx.mean(nx.broadcast_to(x, (4, 3, 6)) * R436), r(3, 6), rng),
    ]
    return checks


def _toy_batch(enc: EncoderWeights, n: int, classes: int, rng) -> tuple[np.ndarray, np.ndarray]:
    c = enc.config
    images = rng.normal(size=(n, c.channels, c.image_side, c.image_side))
    return embed_patches(images, enc).data, rng.integers(0, classes, size=n)


def pipeline_checks(seed: int = 0) -> list[Check]:
    """Encoder -> head -> loss composite, against prompts, head and encoder weights."""
    rng = np.random.default_rng(seed)
    enc = small_encoder(seed)
    l, classes, k = enc.config.embed_dim, 4, 3
    z, y = _toy_batch(enc, 6, classes, rng)
    prompts = rng.normal(0, 0.5, (k, l))
    hw, hb = rng.normal(size=(l, classes)), rng.normal(size=classes)
    checks = [
        _fd("pipeline d/d prompts", lambda p: batch_loss(p, hw, hb, z, y, enc), prompts, rng),
        _fd("pipeline d/d head weight", lambda w: batch_loss(prompts, w, hb, z, y, enc), hw, rng),
        _fd("pipeline d/d head bias", lambda b: batch_loss(prompts, hw, b, z, y, enc), hb, rng),
    ]
    images = rng.normal(size=(4, 3, 8, 8))
    for name in ("patch_w", "pos", "cls", "blocks.0.q_w", "blocks.1.fc1_w", "blocks.0.ln1_g", "norm_b"):
        def f(wt, name=name):
            params = enc.tensors()
            params[name] = wt
            zz = embed_patches(images, enc, params)
            feats = encode(Tensor(prompts), zz, enc, params)
            return nx.cross_entropy(head_forward(feats, hw, hb), y[:4])
        checks.append(_fd(f"pipeline d/d encoder {name}", f, enc.params[name], rng))
    return checks


def _generator_fd(gen: Generator, label: str, rng) -> list[Check]:
    """Finite differences of <generate(phi), R> for each generator parameter."""
    proj = rng.normal(size=(gen.num_prompts, gen.dim))
    checks = []
    n = 1 if gen.num_clients > 1 else 0
    for name in list(gen.shared) + ["descriptor"]:
        def f(x, name=name):
            params = {k: Tensor(gen.params[k]) for k in gen.shared}
            d = Tensor(gen.params["descriptors"][n])
            if name == "descriptor":
                d = x
            else:
                params[name] = x
            return nx.sum(gen.forward(params, d) * proj)
        x0 = gen.params["descriptors"][n] if name == "descriptor" else gen.params[name]
        checks.append(_fd(f"{label} d/d {name}", f, x0, rng))
    return checks


def generator_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    ca = CrossAttentionGenerator.init(3, 4, 6, 5, 7, seed=seed)
    # Non-trivial scales so the softmax is far from uniform.
    for k in ca.params:
        ca.params[k] = rng.normal(size=ca.params[k].shape)
    mlp = MLPGenerator.init(3, 4, 6, hidden=5, seed=seed)
    for k in mlp.params:
        mlp.params[k] = rng.normal(size=mlp.params[k].shape)
    ada = AdaINGenerator.init(3, 4, 6, seed=seed)
    for k in ada.params:
        ada.params[k] = rng.normal(size=ada.params[k].shape)
    return _generator_fd(ca, "cross-attention", rng) + _generator_fd(mlp, "mlp", rng) + _generator_fd(ada, "adain", rng)


# ------------------------------------------------------- pseudo-gradient oracle


def end_to_end_gradients(gen: Generator, n: int, head: Head, z: np.ndarray, y: np.ndarray,
                         enc: EncoderWeights, weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """Gradient of client n's full-batch loss with respect to every generator parameter.

    ``weight_decay`` adds ``wd/2 * ||P||^2`` so the oracle matches a decayed local step.
    """
    tape = GradTape()
    leaves = {k: tape.watch(gen.params[k]) for k in gen.shared}
    d = tape.watch(gen.params["descriptors"][n])
    prompts = gen.forward(leaves, d)
    loss = batch_loss(prompts, head.weight, head.bias, z, y, enc)
    if weight_decay:
        loss = loss + nx.sum(prompts * prompts) * (0.5 * weight_decay)
    names = list(gen.shared) + ["descriptor"]
    return dict(zip(names, nx.backward(tape, loss, list(leaves.values()) + [d])))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-30)
    return float(np.abs(a - b).max() / scale)


def pseudo_gradient_oracle(kind: str = "pfedpg", seed: int = 0, client_lr: float = 0.25,
                           server_lr: float = 0.001, weight_decay: float = 0.0) -> dict[str, float]:
    """Relative error between the server step and ``-lr_c * lr_s * dL/dphi`` per parameter.

    One local epoch with a full batch makes the client's prompt change
    ``-lr_c * (dL/dP + wd * P)`` exactly, so the pseudo-gradient step equals
    scaled end-to-end gradient descent.
    """
    rng = np.random.default_rng(seed)
    enc = small_encoder(seed)
    enc.freeze()
    l, classes, k, n_clients = enc.config.embed_dim, 4, 3, 2
    if kind == "pfedpg":
        gen = CrossAttentionGenerator.init(n_clients, k, l, seed=seed)
    elif kind == "pfedpg_mlp":
        gen = MLPGenerator.init(n_clients, k, l, hidden=6, seed=seed)
    elif kind == "pfedpg_adain":
        gen = AdaINGenerator.init(n_clients, k, l, seed=seed)
    else:
        raise ValueError(kind)
    for name in gen.params:
        gen.params[name] = rng.normal(0, 0.5, gen.params[name].shape)
    n = 1
    images = rng.normal(size=(7, 3, 8, 8))
    labels = rng.integers(0, classes, size=7)
    data = ClientData(images, labels, images[:1], labels[:1], np.arange(7), np.arange(1))
    hp = LocalHparams(lr=client_lr, weight_decay=weight_decay, batch_size=64, epochs=1)
    client = ClientState.create(n, data, enc, k, classes, hp)
    client.head = Head(rng.normal(size=(l, classes)), rng.normal(size=classes))
    head0 = client.head.copy()

    oracle = end_to_end_gradients(gen, n, head0, client.train_z, labels, enc, weight_decay)
    before = gen.copy()
    p_init = gen.generate(n)
    result = local_adapt(client, p_init, enc, round_idx=0, seed=seed)
    server_update(gen, [result.delta], server_lr)
    errs = {}
    for name in gen.shared:
        step = gen.params[name] - before.params[name]
        errs[name] = rel_err(step, -client_lr * server_lr * oracle[name])
    step = gen.params["descriptors"][n] - before.params["descriptors"][n]
    errs["descriptor"] = rel_err(step, -client_lr * server_lr * oracle["descriptor"])
    other = 1 - n
    errs["other descriptor unchanged"] = float(
        np.abs(gen.params["descriptors"][other] - before.params["descriptors"][other]).max()
    )
    return errs


def pseudo_gradient_checks(seed: int = 0) -> list[Check]:
    checks = []
    for kind in ("pfedpg", "pfedpg_mlp", "pfedpg_adain"):
        for name, err in pseudo_gradient_oracle(kind, seed).items():
            tol = 0.0 if name == "other descriptor unchanged" else PSEUDO_TOL
            checks.append(Check(f"{kind} pseudo-grad: {name}", err, tol))
    return checks


def run_all(seed: int = 0) -> tuple[list[Check], float]:
    start = time.perf_counter()
    checks = primitive_checks(seed) + pipeline_checks(seed) + generator_checks(seed) + pseudo_gradient_checks(seed)
    return checks, time.perf_counter() - start
