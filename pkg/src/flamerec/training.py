"""Pretraining, FLAME joint training, baseline ensembles, Adam and checkpoints."""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .backbone import NetworkConfig, NetworkParams, embed, encode, final_representation
from .data import PAD, SequenceDataset, make_batches
from .ensemble import LRN, EnsembleState, forward_all_hidden
from .errors import ConfigError, ContractError, FormatError
from .evaluation import DEFAULT_KS, MetricReport, evaluate
from .numerics import Tensor, no_grad
from .objectives import (
    AnnealSchedule,
    anneal,
    conventional_mkt,
    mkt_loss,
    rec_loss,
    rec_loss_per_position,
    total_loss,
)

MODES = ("single", "ensemble_scratch", "ensemble_guide", "flame")
SELECTION_METRIC = "NDCG@20"

# independent RNG streams, so that skipping one consumer never shifts another
STREAM_INIT, STREAM_SHUFFLE, STREAM_DROPOUT = 0, 1, 2


@dataclass
class TrainConfig:
    mode: str = "flame"
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    n_submodules: int = 2
    dropout: float = 0.5
    tau: float = 1.0
    lambda0: float = 0.1
    lambda_R: float = 1e-5
    weighting: str = "similarity"
    normalize: bool = False
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    patience: int = 30
    seed: int = 0
    per_position: bool = False
    mask_history: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 1 <= self.patience <= self.epochs:
            raise ConfigError(f"patience must be in [1, epochs={self.epochs}], got {self.patience}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.weighting not in ("similarity", "uniform"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.mode != "single" and self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        AnnealSchedule(self.lambda0, self.lambda_R, self.epochs)

    def network_config(self, n_items: int) -> NetworkConfig:
        return NetworkConfig(n_items=n_items, max_len=self.max_len, d=self.d, n_layers=self.n_layers,
                             n_heads=self.n_heads, dropout=self.dropout)

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**asdict(self), **changes})

    def schedule(self) -> AnnealSchedule:
        # first epoch trains at lambda0, the last at lambda_R
        return AnnealSchedule(self.lambda0, self.lambda_R, max(self.epochs - 1, 1))

    def lambda_at(self, epoch: int) -> float:
        """Coefficient for 1-based ``epoch``."""
        return anneal(epoch - 1, self.schedule())


def rng_stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([purpose, seed])


# --- Adam ------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place, on every trainable tensor.

    Row 0 of any ``item_table`` (the padding row) is left untouched.
    """
    trainable = {k: t for k, t in params.items() if t.requires_grad}
    for name, t in trainable.items():
        if t.grad is None:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in trainable.items():
        g = t.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(t.dtype, copy=False)
        if name.endswith("item_table"):
            update[PAD] = 0
        t.data = t.data - update


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"FLAMECKPT"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    hyper: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(**self.hyper["network"])

    def to_params(self, config: NetworkConfig | None = None, requires_grad: bool = True) -> NetworkParams:
        config = config or self.network_config()
        return NetworkParams.from_state(config, self.tensors, requires_grad)


def checkpoint_from_params(params: NetworkParams, train_config: TrainConfig | None = None,
                           **meta) -> Checkpoint:
    hyper = {"network": params.config.as_dict()}
    if train_config is not None:
        hyper["train"] = asdict(train_config)
    return Checkpoint(hyper, params.state_dict(), dict(meta))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = json.dumps({"hyper": ckpt.hyper, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    entries, payloads, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes()
        nb = name.encode("utf-8")
        entry = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
        entry += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", offset)
        entries.append(entry)
        payloads.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(entries)))
        for e in entries:
            fh.write(e)
        fh.write(struct.pack("<Q", offset))
        for p in payloads:
            fh.write(p)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, hlen = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    (n,) = r.unpack("<I")
    directory = []
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}")
        dims = r.unpack(f"<{rank}I")
        (offset,) = r.unpack("<Q")
        directory.append((name, _DTYPE_TAGS[tag], dims, offset))
    (total,) = r.unpack("<Q")
    payload = r.take(total)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint payload")
    tensors = {}
    for name, dtype, dims, offset in directory:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > total:
            raise FormatError(f"tensor {name!r} extends past the payload")
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[name] = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(header["hyper"], tensors, header["meta"], version)


# --- training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoints: dict[str, Checkpoint]
    history: dict[str, list[dict]]
    best_epoch: int
    epochs_run: int

    @property
    def trace(self) -> list[dict]:
        return self.history[next(iter(self.history))]


def _hidden(batch, params: NetworkParams, training: bool, rng) -> Tensor:
    return encode(embed(batch, params, training, rng), params, batch.valid_mask, training, rng)


def _supervised(H: Tensor, params: NetworkParams, batch, per_position: bool) -> Tensor:
    if per_position:
        return rec_loss_per_position(H, params.item_table, batch.position_targets)
    return rec_loss(final_representation(H), params.item_table, batch.targets)


def _metric_row(report: MetricReport) -> dict[str, float]:
    row = {}
    for k in DEFAULT_KS:
        row[f"val_HR@{k}"] = report.hr[k]
    for k in DEFAULT_KS:
        row[f"val_NDCG@{k}"] = report.ndcg[k]
    return row


def _check_frozen(config: TrainConfig, net_cfg: NetworkConfig, frozen: Checkpoint) -> NetworkParams:
    fcfg = frozen.network_config()
    for key in ("n_items", "max_len", "d", "n_layers", "n_heads"):
        if getattr(fcfg, key) != getattr(net_cfg, key):
            raise ConfigError(
                f"frozen checkpoint {key}={getattr(fcfg, key)} does not match config {key}={getattr(net_cfg, key)}")
    return frozen.to_params(net_cfg, requires_grad=False)


def _fit(config: TrainConfig, dataset: SequenceDataset, frozen_ckpt: Checkpoint | None = None,
         on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    mode = config.mode
    net_cfg = config.network_config(dataset.n_items)
    init_rng = rng_stream(config.seed, STREAM_INIT)
    shuffle_rng = rng_stream(config.seed, STREAM_SHUFFLE)
    drop_rng = rng_stream(config.seed, STREAM_DROPOUT)

    trainable: dict[str, NetworkParams] = {"learnable": NetworkParams.init(net_cfg, init_rng)}
    frozen = state = None
    if mode == "ensemble_scratch":
        trainable = {"a": trainable["learnable"], "b": NetworkParams.init(net_cfg, init_rng)}
    if mode in ("ensemble_guide", "flame"):
        if frozen_ckpt is None:
            raise ConfigError(f"mode={mode} needs a frozen checkpoint")
        frozen = _check_frozen(config, net_cfg, frozen_ckpt)
    if mode == "flame":
        state = EnsembleState.build(frozen, trainable["learnable"], config.n_submodules)

    opt = {name: OptimizerState() for name in trainable}
    params = {name: net.named_parameters() for name, net in trainable.items()}

    history: dict[str, list[dict]] = {name: [] for name in trainable}
    frozen_row = None
    if mode == "ensemble_guide":
        history["frozen"] = []
        frozen_row = _metric_row(evaluate(frozen, dataset, "valid", mask_history=config.mask_history))

    best = {name: (-np.inf, 0, None) for name in trainable}
    last_improvement = 0
    epoch = 0
    per_position = config.per_position
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        lam = 0.0 if mode == "single" else config.lambda_at(epoch)
        batches = make_batches(dataset, config.batch_size, shuffle=True, seed=shuffle_rng,
                               contrastive=mode != "single", per_position=per_position)
        sums = np.zeros(3)
        for batch in batches:
            for net in trainable.values():
                net.zero_grad()
            mkt = None
            if mode == "single" or (mode == "flame" and lam == 0):
                net = trainable["learnable"]
                rec = _supervised(_hidden(batch, net, True, drop_rng), net, batch, per_position)
            elif mode == "flame":
                hidden = forward_all_hidden(batch, state, True, drop_rng)
                all_lrn = (LRN,) * state.M
                rec = _supervised(hidden[all_lrn], state.learnable, batch, per_position)
                bundle = {p: final_representation(H) for p, H in hidden.items()}
                mkt = mkt_loss(bundle, config.tau, config.weighting, normalize=config.normalize)
            elif mode == "ensemble_guide":
                with no_grad():
                    hf = final_representation(_hidden(batch, frozen, False, None))
                net = trainable["learnable"]
                H = _hidden(batch, net, True, drop_rng)
                rec = _supervised(H, net, batch, per_position)
                mkt = conventional_mkt([hf, final_representation(H)], config.tau, config.normalize)
            else:
                hs = {}
                rec = None
                for name, net in trainable.items():
                    H = _hidden(batch, net, True, drop_rng)
                    hs[name] = final_representation(H)
                    r = _supervised(H, net, batch, per_position)
                    rec = r if rec is None else rec + r
                mkt = conventional_mkt(list(hs.values()), config.tau, config.normalize)
            loss = total_loss(rec, mkt, lam)
            loss.backward()
            for name in trainable:
                adam_step(params[name], opt[name], config.lr)
            sums += (loss.item(), rec.item(), 0.0 if mkt is None else mkt.item())
        means = sums / len(batches)
        base = {"epoch": epoch, "lambda": lam, "train_loss": float(means[0]),
                "rec_loss": float(means[1]), "mkt_loss": float(means[2])}

        improved = False
        rows = {}
        for name, net in trainable.items():
            report = evaluate(net, dataset, "valid", mask_history=config.mask_history)
            rows[name] = _metric_row(report)
            score = report.ndcg[20]
            if score > best[name][0]:
                best[name] = (score, epoch, net.state_dict())
                improved = True
        elapsed = time.perf_counter() - start
        for name, row in rows.items():
            history[name].append({**base, **row, "wall_seconds": elapsed})
        if frozen_row is not None:
            history["frozen"].append({**base, **frozen_row, "wall_seconds": elapsed})
        if on_epoch is not None:
            on_epoch(history[next(iter(trainable))][-1])
        if improved:
            last_improvement = epoch
        elif epoch - last_improvement >= config.patience:
            break

    checkpoints = {}
    for name, (score, best_epoch, sd) in best.items():
        ckpt = Checkpoint({"network": net_cfg.as_dict(), "train": asdict(config)}, sd, {
            "mode": mode, "network": name, "epoch": best_epoch, "epochs_run": epoch,
            "best_val_ndcg20": float(score),
            "rng_state": {
                "shuffle": _jsonable(shuffle_rng.bit_generator.state),
                "dropout": _jsonable(drop_rng.bit_generator.state),
            },
        })
        checkpoints[name] = ckpt
    primary = checkpoints[next(iter(trainable))]
    return TrainResult(primary, checkpoints, history, primary.meta["epoch"], epoch)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def pretrain_frozen(config: TrainConfig, dataset: SequenceDataset, **kw) -> TrainResult:
    """Train one network on the next-item loss only (the future frozen anchor)."""
    return _fit(config.replace(mode="single"), dataset, **kw)


def train_flame(config: TrainConfig, dataset: SequenceDataset, frozen: Checkpoint, **kw) -> TrainResult:
    return _fit(config.replace(mode="flame"), dataset, frozen, **kw)


def train_baseline(config: TrainConfig, dataset: SequenceDataset, frozen: Checkpoint | None = None,
                   **kw) -> TrainResult:
    if config.mode not in ("single", "ensemble_scratch", "ensemble_guide"):
        raise ConfigError(f"train_baseline does not handle mode={config.mode!r}")
    return _fit(config, dataset, frozen, **kw)


def train(config: TrainConfig, dataset: SequenceDataset, frozen: Checkpoint | None = None,
          **kw) -> TrainResult:
    """Dispatch on ``config.mode``."""
    return _fit(config, dataset, frozen, **kw)


# --- metrics CSV -----------------------------------------------------------

METRIC_COLUMNS = ["epoch", "lambda", "train_loss", "rec_loss", "mkt_loss",
                  "val_HR@5", "val_HR@10", "val_HR@20", "val_NDCG@5", "val_NDCG@10", "val_NDCG@20",
                  "wall_seconds"]


def write_metrics_csv(records: list[dict], path, include_timing: bool = True) -> None:
    """One row per epoch.  Without timing, ``wall_seconds`` is written as NA."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for rec in records:
            row = []
            for col in METRIC_COLUMNS:
                v = rec[col]
                if col == "wall_seconds" and not include_timing:
                    row.append("NA")
                elif col == "epoch":
                    row.append(int(v))
                else:
                    row.append(repr(float(v)))
            w.writerow(row)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if v == "NA" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def set_deterministic() -> None:
    """Force single-threaded BLAS so reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
