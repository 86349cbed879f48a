import math

import numpy as np
import pytest

from flamerec.backbone import (
    NetworkConfig,
    NetworkParams,
    embed,
    encode,
    final_representation,
    forward,
    run_stage,
    split_into_submodules,
)
from flamerec.data import Batch
from flamerec.errors import ConfigError
from flamerec.numerics import Tensor

from helpers import random_batch, tiny_params


def naive_forward(params, ids):
    """Loop-by-loop float64 reimplementation of embedding + post-norm layers."""
    cfg = params.config
    I = params.item_table.data.astype(np.float64)
    P = params.position_table.data.astype(np.float64)
    B, T = ids.shape
    d, h = cfg.d, cfg.n_heads
    dh = d // h

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((x - mu) ** 2 for x in v) / len(v)
        return [(x - mu) / math.sqrt(var + 1e-8) * gi + bi for x, gi, bi in zip(v, g, b)]

    X = np.zeros((B, T, d))
    for b in range(B):
        for t in range(T):
            if ids[b, t] != 0:
                X[b, t] = I[ids[b, t]] + P[t]
    for layer in params.layers:
        W = {k: v.data.astype(np.float64) for k, v in layer.items()}
        Y = np.zeros_like(X)
        for b in range(B):
            for i in range(T):
                heads = []
                for hd in range(h):
                    sl = slice(hd * dh, (hd + 1) * dh)
                    q = (X[b, i] @ W["wq"])[sl]
                    allowed = [j for j in range(i + 1) if ids[b, j] != 0]
                    if not allowed:
                        heads.append(np.zeros(dh))
                        continue
                    s = [q @ (X[b, j] @ W["wk"])[sl] / math.sqrt(dh) for j in allowed]
                    m = max(s)
                    w = [math.exp(v - m) for v in s]
                    z = sum(w)
                    heads.append(sum(wj / z * (X[b, j] @ W["wv"])[sl] for wj, j in zip(w, allowed)))
                a = np.concatenate(heads) @ W["wo"]
                x1 = ln(X[b, i] + a, W["ln1_gain"], W["ln1_bias"])
                f = np.maximum(np.asarray(x1) @ W["w1"], 0) @ W["w2"]
                x2 = ln(np.asarray(x1) + f, W["ln2_gain"], W["ln2_bias"])
                Y[b, i] = x2 if ids[b, i] != 0 else 0.0
        X = Y
    return X


class TestEmbed:
    def test_all_padding_row_is_zero(self):
        p = tiny_params()
        batch = Batch(np.array([[0] * 6, [0, 0, 0, 1, 2, 3]]), np.array([1, 1]))
        out = embed(batch, p, training=True, rng=np.random.default_rng(0)).data
        np.testing.assert_array_equal(out[0], 0.0)
        np.testing.assert_array_equal(out[1, :3], 0.0)

    def test_single_item_last_position(self):
        p = tiny_params()
        batch = Batch(np.array([[0, 0, 0, 0, 0, 7]]), np.array([1]))
        out = embed(batch, p).data
        np.testing.assert_array_equal(out[0, -1], p.item_table.data[7] + p.position_table.data[5])

    def test_rows_independent(self):
        p = tiny_params()
        a = Batch(np.array([[0, 0, 1, 2, 3, 4], [0, 5, 6, 7, 8, 9]]), np.array([1, 1]))
        b = Batch(np.array([[0, 0, 1, 2, 3, 4], [1, 1, 1, 1, 1, 1]]), np.array([1, 1]))
        np.testing.assert_array_equal(embed(a, p).data[0], embed(b, p).data[0])

    def test_out_of_range(self):
        p = tiny_params()
        with pytest.raises(IndexError):
            embed(Batch(np.array([[0, 0, 0, 0, 0, 13]]), np.array([1])), p)

    def test_padding_row_is_zero_after_init(self):
        p = NetworkParams.init(NetworkConfig(n_items=5, max_len=4, d=4), np.random.default_rng(0))
        np.testing.assert_array_equal(p.item_table.data[0], 0.0)


class TestEncode:
    def test_no_layers_is_identity(self):
        p = tiny_params(n_layers=0)
        E = Tensor(np.random.default_rng(0).normal(size=(2, 6, 4)).astype(np.float32))
        assert encode(E, p, np.ones((2, 6), bool)) is E

    @pytest.mark.parametrize("seed", range(5))
    def test_causality_exact(self, seed):
        rng = np.random.default_rng(seed)
        p = tiny_params(seed=seed, n_items=12, max_len=6)
        batch = random_batch(rng, 12, 6, 3, min_len=6)
        H = encode(embed(batch, p), p, batch.valid_mask).data
        for t in range(6):
            ids = batch.padded_ids.copy()
            ids[:, t] = (ids[:, t] % 12) + 1
            H2 = encode(embed(Batch(ids, batch.targets), p), p, ids != 0).data
            assert H2[:, :t].tobytes() == H[:, :t].tobytes()
            if t < 5:
                assert not np.array_equal(H2[:, t:], H[:, t:])

    def test_matches_naive_oracle(self):
        p = tiny_params(seed=3, n_layers=1).astype(np.float64)
        batch = random_batch(np.random.default_rng(3), 12, 6, 3, min_len=2)
        got = encode(embed(batch, p), p, batch.valid_mask).data
        np.testing.assert_allclose(got, naive_forward(p, batch.padded_ids), atol=1e-5)

    def test_two_layers_match_naive_oracle_float32(self):
        p = tiny_params(seed=4, n_layers=2)
        batch = random_batch(np.random.default_rng(4), 12, 6, 4, min_len=1)
        got = encode(embed(batch, p), p, batch.valid_mask).data
        np.testing.assert_allclose(got, naive_forward(p, batch.padded_ids), atol=1e-4)

    def test_padded_slots_do_not_leak(self):
        p = tiny_params(seed=5)
        batch = Batch(np.array([[0, 0, 0, 3, 4, 5]]), np.array([1]))
        h1 = forward(batch, p).data
        q = p.copy()
        q.position_table.data[:3] += 10.0
        q.item_table.data[0] += 0.0  # padding row stays zero
        assert forward(batch, q).data.tobytes() == h1.tobytes()


class TestFinalRepresentation:
    def test_last_row(self):
        H = Tensor(np.arange(24, dtype=np.float32).reshape(1, 6, 4))
        np.testing.assert_array_equal(final_representation(H).data, H.data[:, -1])

    def test_shape(self):
        H = Tensor(np.zeros((5, 3, 7), np.float32))
        assert final_representation(H).shape == (5, 7)

    def test_ignores_earlier_positions(self):
        a = np.zeros((2, 4, 3), np.float32)
        b = a.copy()
        b[:, :3] = 9.0
        assert final_representation(Tensor(a)).data.tobytes() == final_representation(Tensor(b)).data.tobytes()


class TestSubmodules:
    def test_two(self):
        assert split_into_submodules(2, 2).stages == (("emb",), (0, 1))

    def test_layerwise(self):
        assert split_into_submodules(2, 3).stages == (("emb",), (0,), (1,))

    def test_remainder_rule_by_enumeration(self):
        assert split_into_submodules(3, 3).stages == (("emb",), (0, 1), (2,))
        for L in range(1, 7):
            for M in range(2, L + 2):
                stages = split_into_submodules(L, M).stages
                flat = [c for s in stages for c in s]
                assert flat == ["emb", *range(L)]
                sizes = [len(s) for s in stages[1:]]
                assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)

    @pytest.mark.parametrize("M", [0, 4])
    def test_out_of_range(self, M):
        with pytest.raises(ConfigError):
            split_into_submodules(2, M)

    @pytest.mark.parametrize("M", [1, 2, 3])
    def test_stage_composition_bitwise(self, M):
        p = tiny_params(seed=6, dropout=0.3)
        batch = random_batch(np.random.default_rng(6), 12, 6, 3)
        for training in (False, True):
            mono = forward(batch, p, training, np.random.default_rng(9)).data
            rng = np.random.default_rng(9)
            x = batch
            for stage in split_into_submodules(p, M).stages:
                x = run_stage(stage, x, p, batch.valid_mask, training, rng)
            assert final_representation(x).data.tobytes() == mono.tobytes()


def test_heads_must_divide_d():
    with pytest.raises(ConfigError):
        NetworkConfig(n_items=3, d=5, n_heads=2)


def test_from_state_shape_mismatch_names_tensor():
    a = NetworkParams.init(NetworkConfig(n_items=4, max_len=5, d=4), np.random.default_rng(0))
    with pytest.raises(ConfigError, match="item_table"):
        NetworkParams.from_state(NetworkConfig(n_items=4, max_len=5, d=8), a.state_dict())
