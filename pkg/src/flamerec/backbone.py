"""SASRec-style network: item/position embedding plus a causal Transformer.

The network is a sequence of components ``["emb", 1, ..., L]``; a
:class:`SubModuleBoundary` groups them into contiguous stages so that stages
of two networks with identical shapes can be mixed.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .data import PAD, Batch
from .errors import ConfigError
from .numerics import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class NetworkConfig:
    n_items: int
    max_len: int = 50
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    dropout: float = 0.5
    d_ff: int | None = None

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or self.d

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def items(self):
        return ((f.name, getattr(self, f.name)) for f in fields(self))


class NetworkParams:
    """Parameters of one network.  Row 0 of ``item_table`` stays zero."""

    def __init__(self, config: NetworkConfig, item_table: Tensor, position_table: Tensor,
                 layers: list[LayerParams]):
        self.config = config
        self.item_table = item_table
        self.position_table = position_table
        self.layers = layers

    @classmethod
    def init(cls, config: NetworkConfig, rng: np.random.Generator) -> NetworkParams:
        d, f = config.d, config.ff_dim

        def glorot(n_in, n_out):
            limit = np.sqrt(6.0 / (n_in + n_out))
            return Tensor(rng.uniform(-limit, limit, (n_in, n_out)).astype(np.float32), True)

        items = rng.normal(0.0, d ** -0.5, (config.n_items + 1, d)).astype(np.float32)
        items[PAD] = 0.0
        pos = rng.normal(0.0, d ** -0.5, (config.max_len, d)).astype(np.float32)
        layers = []
        for _ in range(config.n_layers):
            layers.append(LayerParams(
                wq=glorot(d, d), wk=glorot(d, d), wv=glorot(d, d), wo=glorot(d, d),
                w1=glorot(d, f), w2=glorot(f, d),
                ln1_gain=Tensor(np.ones(d, np.float32), True),
                ln1_bias=Tensor(np.zeros(d, np.float32), True),
                ln2_gain=Tensor(np.ones(d, np.float32), True),
                ln2_bias=Tensor(np.zeros(d, np.float32), True),
            ))
        return cls(config, Tensor(items, True), Tensor(pos, True), layers)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"item_table": self.item_table, "position_table": self.position_table}
        for i, layer in enumerate(self.layers):
            for name, t in layer.items():
                out[f"layers.{i}.{name}"] = t
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    @classmethod
    def from_state(cls, config: NetworkConfig, state: dict[str, np.ndarray],
                   requires_grad: bool = True) -> NetworkParams:
        template = cls.init(config, np.random.default_rng(0))
        expected = template.named_parameters()
        missing = set(expected) - set(state)
        if missing:
            raise ConfigError(f"state is missing tensors: {sorted(missing)}")
        for name, t in expected.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ConfigError(f"tensor {name!r} has shape {arr.shape}, model expects {t.shape}")
            t.data = arr.copy()
            t.requires_grad = requires_grad
        return template

    def astype(self, dtype) -> NetworkParams:
        state = {k: v.astype(dtype) for k, v in self.state_dict().items()}
        p = NetworkParams.from_state(self.config, state)
        for name, t in p.named_parameters().items():
            t.requires_grad = self.named_parameters()[name].requires_grad
        return p

    def copy(self) -> NetworkParams:
        return self.astype(self.item_table.dtype)

    def freeze(self) -> NetworkParams:
        for t in self.named_parameters().values():
            t.requires_grad = False
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


# --- forward pieces --------------------------------------------------------


def embed(batch: Batch, params: NetworkParams, training: bool = False,
          rng: np.random.Generator | None = None) -> Tensor:
    """Item plus position embedding, dropout, padded slots zeroed."""
    ids = batch.padded_ids
    cfg = params.config
    if ids.shape[1] != cfg.max_len:
        raise ConfigError(f"batch window {ids.shape[1]} != max_len {cfg.max_len}")
    e = nx.embedding(params.item_table, ids, padding_idx=PAD) + params.position_table
    e = nx.dropout(e, cfg.dropout, training, rng)
    return nx.mask_rows(e, batch.valid_mask)


def attention_bias(valid_mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive [B, 1, T, T] bias: causal plus key-side padding."""
    T = valid_mask.shape[1]
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    blocked = causal[None, :, :] | ~valid_mask[:, None, :]
    return np.where(blocked, MASK_VALUE, 0.0).astype(dtype)[:, None, :, :]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def multi_head_attention(x: Tensor, layer: LayerParams, bias: np.ndarray, n_heads: int) -> Tensor:
    dh = x.shape[-1] // n_heads
    q = _split_heads((x @ layer.wq) * (1.0 / np.sqrt(dh)), n_heads)
    k = _split_heads(x @ layer.wk, n_heads)
    v = _split_heads(x @ layer.wv, n_heads)
    attn = nx.softmax(q @ k.transpose(0, 1, 3, 2), axis=-1, bias=bias)
    return _merge_heads(attn @ v) @ layer.wo


def transformer_layer(x: Tensor, layer: LayerParams, valid_mask: np.ndarray, cfg: NetworkConfig,
                      training: bool, rng, bias: np.ndarray | None = None) -> Tensor:
    """Post-norm block: LN(x + attn(x)), then LN(x + FFN(x)), padded rows zeroed."""
    if bias is None:
        bias = attention_bias(valid_mask, x.dtype)
    a = multi_head_attention(x, layer, bias, cfg.n_heads)
    x = nx.layer_norm(x + nx.dropout(a, cfg.dropout, training, rng), layer.ln1_gain, layer.ln1_bias)
    f = nx.relu(x @ layer.w1) @ layer.w2
    x = nx.layer_norm(x + nx.dropout(f, cfg.dropout, training, rng), layer.ln2_gain, layer.ln2_bias)
    return nx.mask_rows(x, valid_mask)


def encode(E: Tensor, params: NetworkParams, valid_mask: np.ndarray, training: bool = False,
           rng=None, layers: range | None = None) -> Tensor:
    """Apply the Transformer layers (all of them unless ``layers`` is given)."""
    layers = range(params.config.n_layers) if layers is None else layers
    bias = attention_bias(valid_mask, E.dtype)
    H = E
    for i in layers:
        H = transformer_layer(H, params.layers[i], valid_mask, params.config, training, rng, bias)
    return H


def final_representation(H: Tensor) -> Tensor:
    return H[:, -1, :]


def forward(batch: Batch, params: NetworkParams, training: bool = False, rng=None) -> Tensor:
    """Monolithic forward pass returning the final-position representation [B, d]."""
    E = embed(batch, params, training, rng)
    return final_representation(encode(E, params, batch.valid_mask, training, rng))


# --- sub-module decomposition ----------------------------------------------


@dataclass(frozen=True)
class SubModuleBoundary:
    """Contiguous grouping of ``["emb", 0, ..., L-1]`` into stages.

    Layer components are 0-based indices into ``NetworkParams.layers``.
    """

    stages: tuple[tuple, ...]

    @property
    def M(self) -> int:
        return len(self.stages)


def split_into_submodules(params_or_layers, M: int) -> SubModuleBoundary:
    """Embedding alone, then layers in ``M - 1`` near-equal contiguous groups.

    Earlier groups take the remainder.  ``M = 1`` (whole network as one
    stage) is accepted for path-enumeration experiments.
    """
    L = params_or_layers if isinstance(params_or_layers, int) else params_or_layers.config.n_layers
    if M == 1:
        return SubModuleBoundary((("emb", *range(L)),))
    if not 2 <= M <= L + 1:
        raise ConfigError(f"M must satisfy 2 <= M <= L+1 = {L + 1}, got {M}")
    groups = M - 1
    base, extra = divmod(L, groups)
    stages: list[tuple] = [("emb",)]
    start = 0
    for g in range(groups):
        size = base + (1 if g < extra else 0)
        stages.append(tuple(range(start, start + size)))
        start += size
    return SubModuleBoundary(tuple(stages))


def run_stage(stage: tuple, x, params: NetworkParams, valid_mask: np.ndarray, training: bool,
              rng=None):
    """Run one stage.  The embedding stage takes a Batch, later ones a Tensor."""
    out = x
    bias = None
    for comp in stage:
        if comp == "emb":
            out = embed(out, params, training, rng)
            continue
        if bias is None:
            bias = attention_bias(valid_mask, out.dtype)
        out = transformer_layer(out, params.layers[comp], valid_mask, params.config, training, rng, bias)
    return out
