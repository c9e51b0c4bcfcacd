"""Frozen ViT-style encoder: patch embedding, ``[cls, prompts, patches]`` tokens, pre-LN blocks.

Positional offsets are added to patch tokens only; the class token and prompt
tokens carry none, so the class-token output is invariant to the order of the
prompt rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, GradTape, Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 16
    channels: int = 3
    patch_side: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side**2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def _block_names(i: int) -> list[str]:
    p = f"blocks.{i}."
    return [p + n for n in (
        "ln1_g", "ln1_b", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "proj_w", "proj_b",
        "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
    )]


class EncoderWeights:
    """Named parameter arrays of the encoder.

    After :meth:`freeze` the arrays are read-only and :attr:`digest` records a
    SHA-256 over names, shapes and bytes.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray], mode: str = "random"):
        self.config = config
        self.mode = mode
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self._digest: Optional[str] = None
        self._check()

    def _check(self):
        c = self.config
        l, h = c.embed_dim, c.hidden_dim
        want = {
            "patch_w": (c.patch_dim, l), "patch_b": (l,), "pos": (c.num_patches, l), "cls": (l,),
            "norm_g": (l,), "norm_b": (l,),
        }
        for i in range(c.depth):
            shapes = [(l,), (l,), (l, l), (l,), (l, l), (l,), (l, l), (l,), (l, l), (l,),
                      (l,), (l,), (l, h), (h,), (h, l), (l,)]
            want.update(zip(_block_names(i), shapes))
        if set(want) != set(self.params):
            missing = sorted(set(want) - set(self.params))
            extra = sorted(set(self.params) - set(want))
            raise DimensionError(f"encoder weights: missing {missing}, unexpected {extra}")
        for k, shape in want.items():
            if self.params[k].shape != shape:
                raise DimensionError(f"encoder weight {k}: expected {shape}, got {self.params[k].shape}")

    @classmethod
    def init(cls, config: EncoderConfig, seed: Optional[int] = None) -> "EncoderWeights":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        l, h = config.embed_dim, config.hidden_dim

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        params = {
            "patch_w": dense(config.patch_dim, l),
            "patch_b": np.zeros(l),
            "pos": rng.normal(0.0, 0.02, size=(config.num_patches, l)),
            "cls": rng.normal(0.0, 0.02, size=l),
            "norm_g": np.ones(l),
            "norm_b": np.zeros(l),
        }
        for i in range(config.depth):
            vals = [np.ones(l), np.zeros(l), dense(l, l), np.zeros(l), dense(l, l), np.zeros(l),
                    dense(l, l), np.zeros(l), dense(l, l), np.zeros(l), np.ones(l), np.zeros(l),
                    dense(l, h), np.zeros(h), dense(h, l), np.zeros(l)]
            params.update(zip(_block_names(i), vals))
        return cls(config, params, mode="random")

    @property
    def frozen(self) -> bool:
        return self._digest is not None

    @property
    def digest(self) -> Optional[str]:
        return self._digest

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            arr = np.ascontiguousarray(self.params[k])
            h.update(k.encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def freeze(self) -> str:
        """Make the weights read-only and return the content hash (idempotent)."""
        if self._digest is None:
            for arr in self.params.values():
                arr.flags.writeable = False
            self._digest = self.content_hash()
        return self._digest

    def parameter_count(self) -> int:
        return int(np.sum([v.size for v in self.params.values()]))

    def tensors(self, tape: Optional[GradTape] = None) -> dict[str, Tensor]:
        """Wrap parameters as tensors, traced on ``tape`` unless frozen or ``tape`` is None."""
        if tape is None or self.frozen:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def to_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    def metadata(self) -> dict:
        return {"config": asdict(self.config), "mode": self.mode}


# ------------------------------------------------------------------- forward


def extract_patches(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """``(B, C, H, W)`` or ``(C, H, W)`` -> ``(B, m, C*p*p)`` in raster patch order."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    s, p, ch = config.image_side, config.patch_side, config.channels
    if images.shape[1:] != (ch, s, s):
        raise DimensionError(f"expected images of shape ({ch}, {s}, {s}), got {images.shape[1:]}")
    b, g = images.shape[0], s // p
    x = images.reshape(b, ch, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, ch * p * p)


def embed_patches(images, weights: EncoderWeights, params: Optional[dict] = None) -> Tensor:
    """Patch embedding ``z``: projection plus positional offsets.

    A single ``(C, H, W)`` image yields ``(m, l)``; a batch yields ``(B, m, l)``.
    """
    params = params if params is not None else weights.tensors()
    images = np.asarray(images)
    patches = extract_patches(images, weights.config)
    z = nx.matmul(Tensor(patches), params["patch_w"]) + params["patch_b"] + params["pos"]
    return z[0] if images.ndim == 3 else z


def _attention(x: Tensor, p: dict, prefix: str, heads: int, cls_only: bool = False) -> Tensor:
    b, t, l = x.shape
    dh = l // heads

    def split(y, n):
        return nx.transpose(nx.reshape(y, (b, n, heads, dh)), (0, 2, 1, 3))

    xq = x[:, :1, :] if cls_only else x
    tq = xq.shape[1]
    q = split(xq @ p[prefix + "q_w"] + p[prefix + "q_b"], tq)
    k = split(x @ p[prefix + "k_w"] + p[prefix + "k_b"], t)
    v = split(x @ p[prefix + "v_w"] + p[prefix + "v_b"], t)
    att = nx.softmax_rows(nx.matmul(q, nx.transpose(k)) * (1.0 / np.sqrt(dh)))
    y = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (b, tq, l))
    return y @ p[prefix + "proj_w"] + p[prefix + "proj_b"]


def _block(x: Tensor, p: dict, i: int, heads: int, cls_only: bool = False) -> Tensor:
    """Pre-LN block.  ``cls_only`` returns just the class-token row ``(B, 1, l)``."""
    pre = f"blocks.{i}."
    att = _attention(nx.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"], LN_EPS), p, pre, heads, cls_only)
    x = (x[:, :1, :] if cls_only else x) + att
    hdn = nx.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"], LN_EPS)
    hdn = nx.gelu(hdn @ p[pre + "fc1_w"] + p[pre + "fc1_b"])
    return x + (hdn @ p[pre + "fc2_w"] + p[pre + "fc2_b"])


def encode(prompts: Optional[Tensor], z: Tensor, weights: EncoderWeights,
           params: Optional[dict] = None) -> Tensor:
    """Batched forward pass: ``z`` is ``(B, m, l)``, prompts ``(K, l)``; returns ``(B, l)``.

    ``prompts=None`` runs the encoder with no prompt tokens.
    """
    cfg = weights.config
    params = params if params is not None else weights.tensors()
    z = nx.as_tensor(z)
    if z.ndim != 3 or z.shape[1:] != (cfg.num_patches, cfg.embed_dim):
        raise DimensionError(f"encode: z must be (B, {cfg.num_patches}, {cfg.embed_dim}), got {z.shape}")
    b, _, l = z.shape
    parts = [nx.broadcast_to(nx.reshape(params["cls"], (1, 1, l)), (b, 1, l))]
    if prompts is not None:
        prompts = nx.as_tensor(prompts)
        if prompts.ndim != 2 or prompts.shape[1] != l:
            raise DimensionError(f"encode: prompts must be (K, {l}), got {prompts.shape}")
        parts.append(nx.broadcast_to(nx.reshape(prompts, (1,) + prompts.shape), (b,) + prompts.shape))
    parts.append(z)
    x = nx.concat(parts, axis=1)
    # Only the class token reaches the output, so the last block skips the other queries.
    for i in range(cfg.depth):
        x = _block(x, params, i, cfg.heads, cls_only=i == cfg.depth - 1)
    cls_out = x[:, 0, :]
    return nx.layer_norm(cls_out, params["norm_g"], params["norm_b"], LN_EPS)


def encoder_forward(c, prompts, z, weights: EncoderWeights, params: Optional[dict] = None) -> Tensor:
    """Single-example forward over ``[c, P, z]``; returns the class-token feature of length l.

    ``c`` overrides the stored class token (shape ``(1, l)`` or ``(l,)``).
    """
    params = dict(params if params is not None else weights.tensors())
    c = nx.as_tensor(c)
    params["cls"] = nx.reshape(c, (weights.config.embed_dim,))
    z = nx.as_tensor(z)
    if z.ndim != 2:
        raise DimensionError(f"encoder_forward: z must be (m, l), got {z.shape}")
    out = encode(prompts, nx.reshape(z, (1,) + z.shape), weights, params)
    return out[0]


@dataclass
class Head:
    """Affine classification head l -> Y."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, dim: int, classes: int) -> "Head":
        return cls(np.zeros((dim, classes)), np.zeros(classes))

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def copy(self) -> "Head":
        return Head(self.weight.copy(), self.bias.copy())


def head_forward(feature, weight, bias) -> Tensor:
    """Logits ``feature @ weight + bias``; feature may be ``(l,)`` or ``(B, l)``."""
    feature, weight, bias = nx.as_tensor(feature), nx.as_tensor(weight), nx.as_tensor(bias)
    if weight.ndim != 2 or feature.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"head: feature {feature.shape}, weight {weight.shape}, bias {bias.shape}")
    if feature.ndim == 1:
        return nx.reshape(nx.reshape(feature, (1, -1)) @ weight, (-1,)) + bias
    return feature @ weight + bias
