"""Interaction logs, 5-core filtering, leave-one-out splits and batching."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError, ParseError

PAD = 0
DATASET_MAGIC = b"FLAMEDATA"
DATASET_VERSION = 1


@dataclass
class InteractionLog:
    """Raw events plus contiguous 1-based id maps (0 is reserved for padding).

    ``sequences[uid - 1]`` holds the user's item ids sorted by timestamp,
    ties kept in input order.
    """

    events: list[tuple[str, str, int]]
    user_index: dict[str, int]
    item_index: dict[str, int]
    sequences: list[list[int]]

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)


def parse_interactions(source, delimiter: str = "\t") -> InteractionLog:
    """Parse ``user<TAB>item<TAB>timestamp`` lines.

    ``source`` may be raw bytes, a binary/text stream or a filesystem path.
    """
    text = _read_text(source)
    events: list[tuple[str, str, int]] = []
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        fields = line.split(delimiter)
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, got {len(fields)}", lineno)
        user, item, ts_text = fields
        if not user or not item:
            raise ParseError("empty user or item key", lineno)
        try:
            ts = int(ts_text)
        except ValueError:
            raise ParseError(f"timestamp {ts_text!r} is not an integer", lineno) from None
        uid = user_index.setdefault(user, len(user_index) + 1)
        iid = item_index.setdefault(item, len(item_index) + 1)
        per_user.setdefault(uid, []).append((ts, len(events), iid))
        events.append((user, item, ts))
    if not events:
        raise DataError("interaction log is empty")
    sequences = []
    for uid in range(1, len(user_index) + 1):
        # (timestamp, input position) keys give a stable sort
        sequences.append([iid for _, _, iid in sorted(per_user[uid])])
    return InteractionLog(events, user_index, item_index, sequences)


def _read_text(source) -> str:
    if isinstance(source, bytes):
        data = source
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
        if isinstance(data, str):
            return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"input is not valid UTF-8: {exc}") from None


@dataclass
class SequenceDataset:
    """Leave-one-out splits of 5-core filtered user sequences.

    Item ids run from 1 to ``n_items``; ``item_keys[i - 1]`` is the raw key.
    """

    user_keys: list[str]
    item_keys: list[str]
    train: list[np.ndarray]
    valid: np.ndarray
    test: np.ndarray
    max_len: int

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    def full_sequence(self, u: int) -> np.ndarray:
        return np.concatenate([self.train[u], [self.valid[u], self.test[u]]])

    def n_interactions(self) -> int:
        return int(sum(len(s) for s in self.train)) + 2 * self.n_users

    def stats(self) -> dict[str, float]:
        """Dataset summary in the usual users/items/interactions/sparsity form."""
        n = self.n_interactions()
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n,
            "avg_seq_len": n / self.n_users,
            "sparsity": 1.0 - n / (self.n_users * self.n_items),
        }

    def item_counts(self) -> np.ndarray:
        """Training-split interaction count per item id (index 0 unused)."""
        counts = np.zeros(self.n_items + 1, dtype=np.int64)
        for s in self.train:
            np.add.at(counts, s, 1)
        return counts

    def eval_inputs(self, split: str) -> tuple[list[np.ndarray], np.ndarray]:
        """History and target per user for ``split`` in {valid, test}."""
        if split == "valid":
            return list(self.train), self.valid
        if split == "test":
            hist = [np.append(s, v) for s, v in zip(self.train, self.valid)]
            return hist, self.test
        raise ValueError(f"unknown split {split!r}")


def build_sequences(log: InteractionLog, max_len: int, min_count: int = 5) -> SequenceDataset:
    """Iterative k-core filtering followed by a leave-one-out split."""
    if max_len < 3:
        raise ConfigError(f"max_len must be >= 3, got {max_len}")
    seqs = {uid: np.asarray(s, dtype=np.int64) for uid, s in enumerate(log.sequences, start=1)}
    while True:
        counts = np.zeros(log.n_items + 1, dtype=np.int64)
        for s in seqs.values():
            np.add.at(counts, s, 1)
        bad_items = counts < min_count
        changed = False
        kept = {}
        for uid, s in seqs.items():
            t = s[~bad_items[s]]
            if len(t) != len(s):
                changed = True
            if len(t) >= min_count:
                kept[uid] = t
            else:
                changed = True
        seqs = kept
        if not changed:
            break
    if not seqs:
        raise DataError(f"no users left after {min_count}-core filtering")

    users_by_key = {v: k for k, v in log.user_index.items()}
    items_by_key = {v: k for k, v in log.item_index.items()}
    surviving = np.unique(np.concatenate(list(seqs.values())))
    remap = np.zeros(log.n_items + 1, dtype=np.int64)
    remap[surviving] = np.arange(1, len(surviving) + 1)

    user_keys, train, valid, test = [], [], [], []
    for uid in sorted(seqs):
        s = remap[seqs[uid]]
        user_keys.append(users_by_key[uid])
        train.append(s[:-2].astype(np.int32))
        valid.append(s[-2])
        test.append(s[-1])
    return SequenceDataset(
        user_keys=user_keys,
        item_keys=[items_by_key[int(i)] for i in surviving],
        train=train,
        valid=np.asarray(valid, dtype=np.int32),
        test=np.asarray(test, dtype=np.int32),
        max_len=max_len,
    )


def pad_or_truncate(seq, max_len: int) -> np.ndarray:
    """Keep the most recent ``max_len`` items, left-padding with 0."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        raise ContractError("cannot pad an empty sequence")
    out = np.zeros(max_len, dtype=np.int64)
    tail = seq[-max_len:]
    out[max_len - len(tail):] = tail
    return out


@dataclass
class Batch:
    padded_ids: np.ndarray  # [B, T] int
    targets: np.ndarray  # [B] int, in [1, n_items]
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    position_targets: np.ndarray | None = None  # [B, T] next item per slot, 0 = none

    @property
    def valid_mask(self) -> np.ndarray:
        return self.padded_ids != PAD

    def __len__(self) -> int:
        return len(self.targets)


def make_window_batch(histories: Iterable, targets, max_len: int, users=None) -> Batch:
    histories = list(histories)
    ids = np.stack([pad_or_truncate(h, max_len) for h in histories])
    users = np.arange(len(histories)) if users is None else np.asarray(users)
    return Batch(ids, np.asarray(targets, dtype=np.int64), users)


def make_batches(
    dataset: SequenceDataset,
    batch_size: int,
    shuffle: bool = True,
    seed: int | np.random.Generator = 0,
    contrastive: bool = False,
    per_position: bool = False,
) -> list[Batch]:
    """Training batches: input ``train[:-1]``, target ``train[-1]`` per user.

    With ``per_position`` each batch also carries next-item targets for every
    valid slot of the window.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    if contrastive and batch_size < 2:
        raise ConfigError("contrastive objectives need batch_size >= 2 (in-batch negatives)")
    order = np.arange(dataset.n_users)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(dataset.n_users)
    T = dataset.max_len
    batches = []
    for start in range(0, len(order), batch_size):
        users = order[start:start + batch_size]
        hist = [dataset.train[u][:-1] for u in users]
        tgts = [dataset.train[u][-1] for u in users]
        batch = make_window_batch(hist, tgts, T, users)
        if per_position:
            nxt = np.stack([pad_or_truncate(dataset.train[u][1:], T) for u in users])
            nxt[batch.padded_ids == PAD] = PAD
            batch.position_targets = nxt
        batches.append(batch)
    return batches


def make_eval_batches(dataset: SequenceDataset, split: str, batch_size: int = 1024) -> list[Batch]:
    hist, targets = dataset.eval_inputs(split)
    out = []
    for start in range(0, dataset.n_users, batch_size):
        sl = slice(start, start + batch_size)
        users = np.arange(dataset.n_users)[sl]
        out.append(make_window_batch(hist[sl], targets[sl], dataset.max_len, users))
    return out


# --- dataset cache ---------------------------------------------------------


def save_dataset(dataset: SequenceDataset, path) -> None:
    header = json.dumps(
        {"user_keys": dataset.user_keys, "item_keys": dataset.item_keys, "max_len": dataset.max_len}
    ).encode("utf-8")
    lengths = np.asarray([len(s) for s in dataset.train], dtype="<i8")
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype("<i8")
    flat = np.concatenate(dataset.train).astype("<i4") if dataset.train else np.zeros(0, "<i4")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", DATASET_VERSION, len(header), dataset.n_users))
        fh.write(header)
        fh.write(offsets.tobytes())
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
        fh.write(dataset.valid.astype("<i4").tobytes())
        fh.write(dataset.test.astype("<i4").tobytes())


def load_dataset(path) -> SequenceDataset:
    with open(path, "rb") as fh:
        return _read_dataset(fh)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("dataset cache is truncated")
    return buf


def _read_dataset(fh: BinaryIO) -> SequenceDataset:
    if _read_exact(fh, len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise FormatError("not a FLAMEDATA file")
    version, hlen, n_users = struct.unpack("<III", _read_exact(fh, 12))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset cache version {version}")
    header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
    offsets = np.frombuffer(_read_exact(fh, 8 * (n_users + 1)), dtype="<i8")
    (n_flat,) = struct.unpack("<Q", _read_exact(fh, 8))
    flat = np.frombuffer(_read_exact(fh, 4 * n_flat), dtype="<i4").astype(np.int32)
    valid = np.frombuffer(_read_exact(fh, 4 * n_users), dtype="<i4").astype(np.int32)
    test = np.frombuffer(_read_exact(fh, 4 * n_users), dtype="<i4").astype(np.int32)
    if fh.read(1):
        raise FormatError("trailing bytes after dataset cache payload")
    train = [flat[offsets[i]:offsets[i + 1]] for i in range(n_users)]
    return SequenceDataset(header["user_keys"], header["item_keys"], train, valid, test, header["max_len"])


def is_dataset_cache(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(len(DATASET_MAGIC)) == DATASET_MAGIC
    except OSError:
        return False
