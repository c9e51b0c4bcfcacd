"""Server-side prompt generators and their pseudo-gradient training.

Each generator maps a client descriptor ``d_n`` to a ``(K, l)`` prompt set.
Given a client's prompt change ``dP = P_tilde - P_n`` the server back-propagates
the cotangent ``-dP`` (or ``+dP`` with ``literal_sign``) through the generator
and takes an SGD step on every generator parameter.  With one full-batch local
step ``-dP`` equals ``lr_client * dL/dP``, so the step is exactly gradient
descent on the clients' loss.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .client import PromptDelta
from .container import load_tensors, save_tensors
from .numerics import DimensionError, GradTape, Tensor

INIT_STD = 0.02
ADAIN_STD_FLOOR = 1e-6

STRATEGIES = ("pfedpg", "pfedpg_mlp", "pfedpg_adain", "fedvpt", "local_only", "base_only")


class Generator:
    """Base class: named parameters, one row of ``descriptors`` per client."""

    kind = "base"
    shared: tuple[str, ...] = ()

    def __init__(self, params: dict[str, np.ndarray], num_prompts: int):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.num_prompts = num_prompts

    @property
    def num_clients(self) -> int:
        return self.params["descriptors"].shape[0]

    @property
    def dim(self) -> int:
        return self.params["descriptors"].shape[1]

    def forward(self, params: dict[str, Tensor], descriptor: Tensor) -> Tensor:
        raise NotImplementedError

    def _check_client(self, n: int):
        if not 0 <= n < self.num_clients:
            raise KeyError(f"unknown client id {n} (have {self.num_clients})")

    def generate(self, n: int) -> np.ndarray:
        self._check_client(n)
        params = {k: Tensor(self.params[k]) for k in self.shared}
        return self.forward(params, Tensor(self.params["descriptors"][n])).data.copy()

    def copy(self) -> "Generator":
        out = object.__new__(type(self))
        out.__dict__.update(self.__dict__)
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def pseudo_gradients(self, delta: PromptDelta, literal_sign: bool = False) -> dict[str, np.ndarray]:
        """Vector-Jacobian product of the generated prompts with the client's cotangent.

        Returns gradients for every shared parameter and ``"descriptor"`` (the
        row of client ``delta.client``).
        """
        n = delta.client
        self._check_client(n)
        dp = np.asarray(delta.delta, dtype=np.float64)
        want = (self.num_prompts, self.dim)
        if dp.shape != want:
            raise DimensionError(f"delta from client {n} has shape {dp.shape}, expected {want}")
        tape = GradTape()
        leaves = {k: tape.watch(self.params[k]) for k in self.shared}
        d = tape.watch(self.params["descriptors"][n])
        out = self.forward(leaves, d)
        cot = dp if literal_sign else -dp
        names = list(self.shared) + ["descriptor"]
        grads = nx.backward(tape, out, list(leaves.values()) + [d], seed=cot)
        return dict(zip(names, grads))

    def apply(self, grads: dict[str, np.ndarray], lr: float, client: Optional[int] = None):
        for k in self.shared:
            if k in grads:
                self.params[k] = self.params[k] - lr * grads[k]
        if client is not None and "descriptor" in grads:
            self.params["descriptors"][client] = self.params["descriptors"][client] - lr * grads["descriptor"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


class CrossAttentionGenerator(Generator):
    """``P_n = P_base + softmax(q K^T / sqrt(l_k)) V W_O`` with a single query from ``d_n``.

    The attention output is one row; it is added to every row of ``P_base``.
    """

    kind = "pfedpg"
    shared = ("p_base", "wq", "wk", "wv", "wo")

    @classmethod
    def init(cls, num_clients: int, num_prompts: int, dim: int, key_dim: int = 0, value_dim: int = 0,
             seed: int = 0) -> "CrossAttentionGenerator":
        key_dim = key_dim or dim
        value_dim = value_dim or dim
        if key_dim <= 0 or value_dim <= 0:
            raise ValueError("key_dim and value_dim must be positive")
        rng = np.random.default_rng(seed)
        params = {
            "p_base": rng.normal(0, INIT_STD, (num_prompts, dim)),
            "descriptors": rng.normal(0, INIT_STD, (num_clients, dim)),
            "wq": rng.normal(0, INIT_STD, (dim, key_dim)),
            "wk": rng.normal(0, INIT_STD, (dim, key_dim)),
            "wv": rng.normal(0, INIT_STD, (dim, value_dim)),
            "wo": rng.normal(0, INIT_STD, (value_dim, dim)),
        }
        return cls(params, num_prompts)

    @property
    def key_dim(self) -> int:
        return self.params["wq"].shape[1]

    def attention_weights(self, params: dict[str, Tensor], descriptor: Tensor) -> Tensor:
        q = nx.reshape(descriptor, (1, -1)) @ params["wq"]
        k = params["p_base"] @ params["wk"]
        scale = 1.0 / np.sqrt(params["wq"].shape[1])
        return nx.softmax_rows(nx.matmul(q, nx.transpose(k)) * scale)

    def forward(self, params: dict[str, Tensor], descriptor: Tensor) -> Tensor:
        att = self.attention_weights(params, descriptor)
        row = att @ (params["p_base"] @ params["wv"]) @ params["wo"]
        return params["p_base"] + row

    def attention(self, n: int) -> np.ndarray:
        self._check_client(n)
        params = {k: Tensor(self.params[k]) for k in self.shared}
        return self.attention_weights(params, Tensor(self.params["descriptors"][n])).data


class MLPGenerator(Generator):
    """Two-layer tanh MLP from ``d_n`` to ``K * l`` outputs reshaped to ``(K, l)``."""

    kind = "pfedpg_mlp"
    shared = ("w1", "b1", "w2", "b2")

    @classmethod
    def init(cls, num_clients: int, num_prompts: int, dim: int, hidden: int = 64,
             seed: int = 0) -> "MLPGenerator":
        rng = np.random.default_rng(seed)
        params = {
            "descriptors": rng.normal(0, INIT_STD, (num_clients, dim)),
            "w1": rng.normal(0, 1.0 / np.sqrt(dim), (dim, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0, INIT_STD, (hidden, num_prompts * dim)),
            "b2": rng.normal(0, INIT_STD, num_prompts * dim),
        }
        return cls(params, num_prompts)

    def forward(self, params: dict[str, Tensor], descriptor: Tensor) -> Tensor:
        h = nx.tanh(nx.reshape(descriptor, (1, -1)) @ params["w1"] + params["b1"])
        out = h @ params["w2"] + params["b2"]
        return nx.reshape(out, (self.num_prompts, self.dim))


def _scalar_stats(x: Tensor, floor: float = 0.0) -> tuple[Tensor, Tensor]:
    mu = nx.mean(x)
    var = nx.mean((x - mu) * (x - mu))
    sd = nx.sqrt(var)
    if floor > 0:
        sd = nx.maximum(sd, floor)
    return mu, sd


class AdaINGenerator(Generator):
    """``P_n = sd(d_n) * (P_base - mean(P_base)) / sd(P_base) + mean(d_n)`` with scalar statistics."""

    kind = "pfedpg_adain"
    shared = ("p_base",)

    @classmethod
    def init(cls, num_clients: int, num_prompts: int, dim: int, seed: int = 0) -> "AdaINGenerator":
        rng = np.random.default_rng(seed)
        params = {
            "p_base": rng.normal(0, INIT_STD, (num_prompts, dim)),
            "descriptors": rng.normal(0, INIT_STD, (num_clients, dim)),
        }
        return cls(params, num_prompts)

    def forward(self, params: dict[str, Tensor], descriptor: Tensor) -> Tensor:
        base = params["p_base"]
        mu_b, sd_b = _scalar_stats(base, ADAIN_STD_FLOOR)
        mu_d, sd_d = _scalar_stats(descriptor)
        return sd_d * ((base - mu_b) / sd_b) + mu_d


def server_update(gen: Generator, deltas: Iterable[PromptDelta], lr: float,
                  literal_sign: bool = False, mode: str = "sequential") -> Generator:
    """Apply pseudo-gradient steps for one round of client deltas, in ascending client order.

    ``mode="sequential"`` steps after each client; ``mode="mean"`` computes all
    client gradients at the current state and applies the average for shared
    parameters (each descriptor still gets its own client's gradient).
    """
    if mode not in ("sequential", "mean"):
        raise ValueError(f"unknown server update mode {mode!r}")
    deltas = sorted(deltas, key=lambda d: d.client)
    seen = set()
    for d in deltas:
        gen._check_client(d.client)
        if d.client in seen:
            raise ValueError(f"duplicate delta from client {d.client}")
        seen.add(d.client)
    if mode == "sequential":
        for d in deltas:
            gen.apply(gen.pseudo_gradients(d, literal_sign), lr, client=d.client)
        return gen
    per_client = [(d.client, gen.pseudo_gradients(d, literal_sign)) for d in deltas]
    if not per_client:
        return gen
    shared = {k: np.mean([g[k] for _, g in per_client], axis=0) for k in gen.shared}
    gen.apply(shared, lr)
    for n, g in per_client:
        gen.apply({"descriptor": g["descriptor"]}, lr, client=n)
    return gen


def aggregate_fedvpt(prompts: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Sample-count weighted average of client prompt sets."""
    if not prompts:
        raise ValueError("no client prompts to aggregate")
    total = float(sum(n for _, n in prompts))
    if total <= 0:
        raise ValueError("total sample count is zero")
    out = np.zeros_like(np.asarray(prompts[0][0], dtype=np.float64))
    for p, n in prompts:
        out = out + (n / total) * np.asarray(p, dtype=np.float64)
    return out


def comm_cost(strategy: str, num_prompts: int, dim: int) -> dict[str, int]:
    """Parameters sent per client per round in each direction."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    n = 0 if strategy == "local_only" else num_prompts * dim
    return {"uplink": n, "downlink": n}


def prompt_fraction(num_prompts: int, dim: int, model_params: float) -> float:
    """Ratio of per-round prompt traffic to a full-model transfer."""
    return num_prompts * dim / float(model_params)


def make_generator(strategy: str, num_clients: int, num_prompts: int, dim: int, key_dim: int = 0,
                   value_dim: int = 0, mlp_hidden: int = 64, seed: int = 0) -> Generator:
    if strategy in ("pfedpg", "base_only"):
        return CrossAttentionGenerator.init(num_clients, num_prompts, dim, key_dim, value_dim, seed)
    if strategy == "pfedpg_mlp":
        return MLPGenerator.init(num_clients, num_prompts, dim, mlp_hidden, seed)
    if strategy == "pfedpg_adain":
        return AdaINGenerator.init(num_clients, num_prompts, dim, seed)
    raise ValueError(f"strategy {strategy!r} has no generator")


_KINDS = {c.kind: c for c in (CrossAttentionGenerator, MLPGenerator, AdaINGenerator)}


def save_generator(gen: Generator, path, extra: Optional[dict] = None):
    meta = {"kind": gen.kind, "num_prompts": gen.num_prompts}
    meta.update(extra or {})
    return save_tensors(path, gen.state_arrays(), meta)


def load_generator(path) -> Generator:
    arrays, meta = load_tensors(path)
    cls = _KINDS.get(meta.get("kind"))
    if cls is None:
        raise ValueError(f"{path}: unknown generator kind {meta.get('kind')!r}")
    return cls(arrays, int(meta["num_prompts"]))
