"""Central pretraining of the encoder on a pooled split, before it is frozen."""

from __future__ import annotations

import logging

import numpy as np

from . import numerics as nx
from .container import load_tensors, save_tensors
from .data import Pooled
from .encoder import EncoderConfig, EncoderWeights, embed_patches, encode, head_forward
from .numerics import GradTape

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            out[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def pretrain_encoder(config: EncoderConfig, pool: Pooled, epochs: int = 10, lr: float = 3e-3,
                     batch_size: int = 64, seed: int = 0) -> EncoderWeights:
    """Train every encoder weight plus a throwaway linear head on ``pool`` (no prompts)."""
    weights = EncoderWeights.init(config, seed=seed)
    rng = np.random.default_rng([seed, 7919])
    l, y = config.embed_dim, pool.num_classes
    params = dict(weights.params)
    params["head_w"] = np.zeros((l, y))
    params["head_b"] = np.zeros(y)
    opt = Adam(lr)
    n = len(pool)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = GradTape()
            leaves = {k: tape.watch(v) for k, v in params.items()}
            enc = {k: leaves[k] for k in weights.params}
            z = embed_patches(pool.images[idx], weights, enc)
            feats = encode(None, z, weights, enc)
            loss = nx.cross_entropy(head_forward(feats, leaves["head_w"], leaves["head_b"]), pool.labels[idx])
            names = list(leaves)
            grads = dict(zip(names, nx.backward(tape, loss, [leaves[k] for k in names])))
            params = opt.step(params, grads)
            total += float(loss.data) * idx.size
        log.info("pretrain epoch %d loss %.4f", epoch, total / n)
    out = EncoderWeights(config, {k: params[k] for k in weights.params}, mode="pretrained")
    return out


def save_encoder(weights: EncoderWeights, path):
    return save_tensors(path, weights.to_arrays(), weights.metadata())


def load_encoder(path) -> EncoderWeights:
    arrays, meta = load_tensors(path)
    config = EncoderConfig(**meta["config"])
    return EncoderWeights(config, arrays, mode=meta.get("mode", "random"))
