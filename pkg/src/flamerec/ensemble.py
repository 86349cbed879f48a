"""Frozen/learnable modular ensemble and its 2^M decision paths."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .backbone import NetworkParams, SubModuleBoundary, final_representation, run_stage, split_into_submodules
from .data import Batch
from .errors import ConfigError
from .numerics import Tensor, no_grad

FRZ = "frz"
LRN = "lrn"

Path = tuple[str, ...]


def enumerate_paths(M: int) -> list[Path]:
    """All of {frz, lrn}^M in lexicographic order (frz before lrn)."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    return list(itertools.product((FRZ, LRN), repeat=M))


def path_label(path: Path) -> str:
    return "-".join(path)


@dataclass
class EnsembleState:
    frozen: NetworkParams
    learnable: NetworkParams
    boundary: SubModuleBoundary
    stage_executions: int = field(default=0, compare=False)

    @classmethod
    def build(cls, frozen: NetworkParams, learnable: NetworkParams, M: int = 2) -> EnsembleState:
        if frozen.config != learnable.config:
            raise ConfigError(
                f"frozen and learnable networks differ: {frozen.config} vs {learnable.config}")
        frozen.freeze()
        return cls(frozen, learnable, split_into_submodules(learnable, M))

    @property
    def M(self) -> int:
        return self.boundary.M

    def network(self, owner: str) -> NetworkParams:
        if owner == FRZ:
            return self.frozen
        if owner == LRN:
            return self.learnable
        raise ValueError(f"unknown owner {owner!r}")

    def _run(self, i: int, owner: str, x, batch: Batch, training: bool, rng) -> Tensor:
        self.stage_executions += 1
        stage = self.boundary.stages[i]
        params = self.network(owner)
        if owner == FRZ:
            # frozen stages always run in evaluation mode
            if isinstance(x, Tensor) and x.requires_grad:
                return run_stage(stage, x, params, batch.valid_mask, False)
            with no_grad():
                return run_stage(stage, x, params, batch.valid_mask, False)
        return run_stage(stage, x, params, batch.valid_mask, training, rng)


def forward_path(batch: Batch, path: Path, state: EnsembleState, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Final representation [B, d] along one decision path."""
    if len(path) != state.M:
        raise ConfigError(f"path length {len(path)} != M = {state.M}")
    x = batch
    for i, owner in enumerate(path):
        x = state._run(i, owner, x, batch, training, rng)
    return final_representation(x)


def forward_all_hidden(batch: Batch, state: EnsembleState, training: bool = False,
                       rng: np.random.Generator | None = None) -> dict[Path, Tensor]:
    """Full [B, T, d] outputs for every path, sharing stage outputs across prefixes.

    A stage output depends only on (stage, owner, input) and the input is fixed
    by the path prefix, so each prefix is computed once: 2 + 4 + ... + 2^M
    stage runs instead of M * 2^M.
    """
    cache: dict[Path, object] = {(): batch}
    for i in range(state.M):
        for prefix in itertools.product((FRZ, LRN), repeat=i):
            x = cache[prefix]
            for owner in (FRZ, LRN):
                cache[prefix + (owner,)] = state._run(i, owner, x, batch, training, rng)
    return {p: cache[p] for p in enumerate_paths(state.M)}


def forward_all(batch: Batch, state: EnsembleState, training: bool = False,
                rng: np.random.Generator | None = None) -> dict[Path, Tensor]:
    """Final representations h~_u^p [B, d] for all 2^M paths."""
    hidden = forward_all_hidden(batch, state, training, rng)
    return {p: final_representation(H) for p, H in hidden.items()}
