"""Client-side prompt adaptation and inference on a frozen encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .data import ClientData
from .encoder import EncoderWeights, Head, embed_patches, encode, head_forward
from .numerics import DimensionError, GradTape, Tensor

EVAL_CHUNK = 256


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LocalHparams:
    lr: float = 0.25
    weight_decay: float = 0.001
    batch_size: int = 64
    epochs: int = 5


@dataclass
class PromptDelta:
    delta: np.ndarray
    client: int
    round: int
    num_samples: int


@dataclass
class AdaptResult:
    prompts: np.ndarray
    delta: PromptDelta
    epoch_losses: list[float]
    head: Head

    @property
    def train_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def embed_images(images: np.ndarray, encoder: EncoderWeights, chunk: int = 512) -> np.ndarray:
    """Frozen patch embeddings for a stack of images, ``(n, m, l)``."""
    if len(images) == 0:
        cfg = encoder.config
        return np.zeros((0, cfg.num_patches, cfg.embed_dim))
    parts = [embed_patches(images[i:i + chunk], encoder).data for i in range(0, len(images), chunk)]
    return np.concatenate(parts, axis=0)


@dataclass
class ClientState:
    cid: int
    data: ClientData
    prompts: np.ndarray
    head: Head
    hparams: LocalHparams = field(default_factory=LocalHparams)
    train_z: Optional[np.ndarray] = None
    test_z: Optional[np.ndarray] = None

    @classmethod
    def create(cls, cid: int, data: ClientData, encoder: EncoderWeights, num_prompts: int,
               num_classes: int, hparams: LocalHparams = LocalHparams(),
               prompts: Optional[np.ndarray] = None) -> "ClientState":
        l = encoder.config.embed_dim
        if prompts is None:
            prompts = np.zeros((num_prompts, l))
        return cls(
            cid=cid,
            data=data,
            prompts=np.array(prompts, dtype=np.float64),
            head=Head.zeros(l, num_classes),
            hparams=hparams,
            train_z=embed_images(data.train_x, encoder),
            test_z=embed_images(data.test_x, encoder),
        )

    @property
    def num_train(self) -> int:
        return self.data.num_train


def batch_loss(prompts: Tensor, head_w, head_b, z: np.ndarray, y: np.ndarray,
               encoder: EncoderWeights) -> Tensor:
    """Mean cross-entropy of the head on the prompted class-token features."""
    feats = encode(prompts, Tensor(z), encoder)
    return nx.cross_entropy(head_forward(feats, head_w, head_b), y)


def prompt_gradient(prompts: np.ndarray, head: Head, z: np.ndarray, y: np.ndarray,
                    encoder: EncoderWeights) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and gradients with respect to (prompts, head weight, head bias)."""
    tape = GradTape()
    p = tape.watch(prompts)
    w = tape.watch(head.weight)
    b = tape.watch(head.bias)
    loss = batch_loss(p, w, b, z, y, encoder)
    gp, gw, gb = nx.backward(tape, loss, [p, w, b])
    return float(loss.data), gp, gw, gb


def round_rng(seed: int, cid: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, cid, round_idx])


def local_adapt(state: ClientState, p_init: np.ndarray, encoder: EncoderWeights,
                round_idx: int = 0, seed: int = 0) -> AdaptResult:
    """Mini-batch SGD on prompts and head from ``p_init``; updates ``state`` in place."""
    hp = state.hparams
    p_init = np.asarray(p_init, dtype=np.float64)
    if p_init.ndim != 2 or p_init.shape[1] != encoder.config.embed_dim:
        raise DimensionError(f"client {state.cid}: prompt init has shape {p_init.shape}")
    n = state.num_train
    if n == 0:
        raise TrainingError(f"client {state.cid}: empty training set")
    rng = round_rng(seed, state.cid, round_idx)
    prompts = p_init.copy()
    w, b = state.head.weight.copy(), state.head.bias.copy()
    lr, wd = hp.lr, hp.weight_decay
    epoch_losses = []
    step = 0
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            loss, gp, gw, gb = prompt_gradient(prompts, Head(w, b), state.train_z[idx],
                                               state.data.train_y[idx], encoder)
            if not math.isfinite(loss):
                raise TrainingError(f"client {state.cid}: non-finite loss at batch {step}")
            prompts = prompts - lr * (gp + wd * prompts)
            w = w - lr * (gw + wd * w)
            b = b - lr * (gb + wd * b)
            total += loss * idx.size
            step += 1
        epoch_losses.append(total / n)
    state.prompts = prompts
    state.head = Head(w, b)
    delta = PromptDelta(prompts - p_init, state.cid, round_idx, n)
    return AdaptResult(prompts, delta, epoch_losses, state.head)


def logits_for(z: np.ndarray, prompts: np.ndarray, head: Head, encoder: EncoderWeights) -> np.ndarray:
    out = []
    for i in range(0, len(z), EVAL_CHUNK):
        feats = encode(Tensor(prompts), Tensor(z[i:i + EVAL_CHUNK]), encoder)
        out.append(head_forward(feats, head.weight, head.bias).data)
    return np.concatenate(out, axis=0)


def argmax_class(logits) -> int:
    # np.argmax returns the first maximal index: ties go to the lowest class.
    return int(np.argmax(np.asarray(logits)))


def predict(state: ClientState, image: np.ndarray, encoder: EncoderWeights,
            prompts: Optional[np.ndarray] = None) -> int:
    prompts = state.prompts if prompts is None else prompts
    z = embed_patches(np.asarray(image)[None], encoder).data
    return argmax_class(logits_for(z, prompts, state.head, encoder)[0])


def evaluate(state: ClientState, encoder: EncoderWeights, prompts: Optional[np.ndarray] = None,
             split: str = "test") -> tuple[float, float]:
    """Accuracy and mean cross-entropy on the client's own ``split``."""
    z = state.test_z if split == "test" else state.train_z
    y = state.data.test_y if split == "test" else state.data.train_y
    if len(y) == 0:
        raise ValueError(f"client {state.cid}: empty {split} split")
    prompts = state.prompts if prompts is None else prompts
    logits = logits_for(z, prompts, state.head, encoder)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    loss = float(nx.cross_entropy(logits, y).data)
    return acc, loss
