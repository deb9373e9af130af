"""Multi-query slot attention: init, iteration math, head independence."""

import time

import numpy as np
import pytest

from helpers import tiny_bank
from slotforge import autodiff as ad
from slotforge.attention import (HeadBank, SlotSet, attention_iteration,
                                 evaluate_attention, init_slots, run_all_heads,
                                 run_head, run_head_projected)
from slotforge.autodiff import Tensor
from slotforge.errors import ContractError
from slotforge.features import FeatureMap


class TestInitSlots:
    def test_degenerate_sigma_returns_mu(self):
        bank = tiny_bank(np.random.default_rng(0))
        bank.log_sigma[0].data[:] = -1e6  # sigma underflows to exactly 0
        out = init_slots(bank, 0, np.random.default_rng(1))
        np.testing.assert_array_equal(out.values,
                                      np.tile(bank.mu[0].data, (2, 1)))

    def test_deterministic_per_seed(self):
        bank = tiny_bank(np.random.default_rng(0))
        a = init_slots(bank, 1, np.random.default_rng(5))
        b = init_slots(bank, 1, np.random.default_rng(5))
        assert np.array_equal(a.values, b.values)
        assert a.head_index == 1

    def test_moment_match(self):
        bank = HeadBank(h=1, k_slots=1000, d_slots=8, d_feats=4,
                        rng=np.random.default_rng(0))
        bank.mu[0].data[:] = 0.0
        bank.log_sigma[0].data[:] = 0.0  # sigma = 1
        out = init_slots(bank, 0, np.random.default_rng(2)).values
        assert np.all(np.abs(out.mean(axis=0)) < 0.1)
        assert np.all(np.abs(out.std(axis=0) - 1.0) < 0.1)

    def test_head_bounds(self):
        bank = tiny_bank(np.random.default_rng(0))
        with pytest.raises(ContractError):
            init_slots(bank, 2, np.random.default_rng(0))


def _projected(bank, rng, n=5):
    fmap = FeatureMap(1, n, rng.normal(size=(n, bank.d_feats)))
    feats_k, feats_v = bank.project(fmap)
    return fmap, feats_k, feats_v


class TestAttentionIteration:
    def test_single_slot_collapse(self):
        rng = np.random.default_rng(3)
        bank = tiny_bank(rng, k=1)
        _, fk, fv = _projected(bank, rng, n=4)
        slots = init_slots(bank, 0, rng)
        _, state = attention_iteration(fk, fv, slots, bank, 0)
        np.testing.assert_array_equal(state.attn.data, np.ones((4, 1)))
        np.testing.assert_allclose(state.weights.data, 0.25, rtol=1e-15)
        np.testing.assert_allclose(state.updates.data,
                                   fv.data.mean(axis=0, keepdims=True),
                                   rtol=1e-12)

    def test_identical_slots_symmetric(self):
        rng = np.random.default_rng(4)
        bank = tiny_bank(rng, k=2)
        _, fk, fv = _projected(bank, rng)
        base = init_slots(bank, 0, rng).values
        base[1] = base[0]
        slots = SlotSet(Tensor(base), 0)
        _, state = attention_iteration(fk, fv, slots, bank, 0)
        np.testing.assert_array_equal(state.attn.data[:, 0],
                                      state.attn.data[:, 1])
        np.testing.assert_array_equal(state.updates.data[0],
                                      state.updates.data[1])

    def test_straight_line_oracle(self):
        """Flat numpy re-implementation of one iteration, matched to 1e-12."""
        rng = np.random.default_rng(5)
        n, k, d = 3, 2, 2
        bank = HeadBank(h=1, k_slots=k, d_slots=d, d_feats=d, t_iters=1,
                        rng=rng)
        fmap = FeatureMap(1, n, rng.normal(size=(n, d)))
        feats_k, feats_v = bank.project(fmap)
        slots = init_slots(bank, 0, rng)
        _, state = attention_iteration(feats_k, feats_v, slots, bank, 0)

        def ln(x, gain, bias):
            m = x.mean(axis=-1, keepdims=True)
            c = x - m
            v = (c * c).mean(axis=-1, keepdims=True)
            return c / np.sqrt(v + 1e-5) * gain + bias

        x = ln(fmap.tokens, bank.ln_in.gain.data, bank.ln_in.bias.data)
        kk = x @ bank.k_proj.data
        vv = x @ bank.v_proj.data
        s = ln(slots.values, bank.ln_slots[0].gain.data,
               bank.ln_slots[0].bias.data)
        q = s @ bank.q_proj[0].data
        lam = kk @ q.T / np.sqrt(d)
        e = np.exp(lam - lam.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        shifted = attn + bank.epsilon
        weights = shifted / shifted.sum(axis=0, keepdims=True)
        upd = weights.T @ vv

        np.testing.assert_allclose(state.logits.data, lam, atol=1e-12)
        np.testing.assert_allclose(state.attn.data, attn, atol=1e-12)
        np.testing.assert_allclose(state.weights.data, weights, atol=1e-12)
        np.testing.assert_allclose(state.updates.data, upd, atol=1e-12)

    def test_normalization_axes(self):
        rng = np.random.default_rng(6)
        bank = tiny_bank(rng, k=3)
        _, fk, fv = _projected(bank, rng, n=7)
        slots = init_slots(bank, 0, rng)
        _, state = attention_iteration(fk, fv, slots, bank, 0)
        np.testing.assert_allclose(state.attn.data.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(state.weights.data.sum(axis=0), 1.0,
                                   atol=1e-9)

    def test_epsilon_guards_empty_slot(self):
        # force one slot to get ~zero attention everywhere: huge logit gap
        rng = np.random.default_rng(7)
        bank = tiny_bank(rng, k=2)
        _, fk, fv = _projected(bank, rng)
        vals = np.array([[100.0] * bank.d_slots, [-100.0] * bank.d_slots])
        _, state = attention_iteration(fk, fv, SlotSet(Tensor(vals), 0),
                                       bank, 0)
        assert np.all(np.isfinite(state.weights.data))
        np.testing.assert_allclose(state.weights.data.sum(axis=0), 1.0,
                                   atol=1e-9)


class TestRunHead:
    def test_t0_returns_initial_slots_with_one_readout(self):
        rng = np.random.default_rng(8)
        bank = tiny_bank(rng, t=0)
        fmap = FeatureMap(1, 5, rng.normal(size=(5, 4)))
        noise = np.random.default_rng(9).standard_normal((2, 4))
        slots, state = run_head(fmap, bank, 0, noise=noise)
        expected = init_slots(bank, 0, noise=noise)
        np.testing.assert_array_equal(slots.values, expected.values)
        np.testing.assert_allclose(state.attn.data.sum(axis=1), 1.0, atol=1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        for trial in range(10):
            bank = tiny_bank(np.random.default_rng(trial), k=4)
            fmap = FeatureMap(1, 6, rng.normal(size=(6, 4)))
            fk, fv = bank.project(fmap)
            base = rng.normal(size=(4, 4))
            perm = rng.permutation(4)
            out, _ = run_head_projected(fk, fv, bank, 0,
                                        initial=SlotSet(Tensor(base.copy()), 0))
            out_p, _ = run_head_projected(fk, fv, bank, 0,
                                          initial=SlotSet(Tensor(base[perm]), 0))
            assert np.max(np.abs(out_p.values - out.values[perm])) < 1e-9

    def test_projection_inside_run_head(self):
        rng = np.random.default_rng(11)
        bank = tiny_bank(rng)
        fmap = FeatureMap(1, 5, rng.normal(size=(5, 4)))
        noise = np.random.default_rng(12).standard_normal((2, 4))
        a, _ = run_head(fmap, bank, 0, noise=noise)
        fk, fv = bank.project(fmap)
        b, _ = run_head_projected(fk, fv, bank, 0, noise=noise)
        np.testing.assert_array_equal(a.values, b.values)


class TestRunAllHeads:
    def test_single_head_matches_run_head(self):
        rng = np.random.default_rng(13)
        bank = tiny_bank(rng, h=1)
        fmap = FeatureMap(1, 5, rng.normal(size=(5, 4)))
        all_out = run_all_heads(fmap, bank, np.random.default_rng(42))
        stream = np.random.default_rng(42).spawn(1)[0]
        solo, _ = run_head(fmap, bank, 0, stream)
        assert len(all_out) == 1
        np.testing.assert_array_equal(all_out[0][0].values, solo.values)

    def test_matches_individual_heads_on_split_streams(self):
        rng = np.random.default_rng(14)
        bank = tiny_bank(rng, h=3)
        fmap = FeatureMap(1, 5, rng.normal(size=(5, 4)))
        all_out = run_all_heads(fmap, bank, np.random.default_rng(7))
        streams = np.random.default_rng(7).spawn(3)
        for j in range(3):
            solo, _ = run_head(fmap, bank, j, streams[j])
            np.testing.assert_array_equal(all_out[j][0].values, solo.values)

    def test_head_parameter_independence(self):
        rng = np.random.default_rng(15)
        bank = tiny_bank(rng, h=3)
        fmap = FeatureMap(1, 5, rng.normal(size=(5, 4)))
        before = [s.values.copy() for s, _ in
                  run_all_heads(fmap, bank, np.random.default_rng(1))]
        for _, t in bank.gru[2].tensors():
            t.data[:] = 0.0
        bank.q_proj[2].data[:] = 0.0
        after = [s.values.copy() for s, _ in
                 run_all_heads(fmap, bank, np.random.default_rng(1))]
        assert np.array_equal(before[0], after[0])
        assert np.array_equal(before[1], after[1])
        assert not np.array_equal(before[2], after[2])

    def test_gradient_isolation_between_heads(self):
        rng = np.random.default_rng(16)
        bank = tiny_bank(rng, h=2)
        fmap = FeatureMap(1, 5, rng.normal(size=(5, 4)))
        fk, fv = bank.project(fmap)
        slots, _ = run_head_projected(fk, fv, bank, 0,
                                      noise=rng.standard_normal((2, 4)))
        grads = ad.gradient_map(ad.sum_all(slots.slots))
        for p in bank.head_parameters(0):
            assert id(p.tensor) in grads
        for p in bank.head_parameters(1):
            assert id(p.tensor) not in grads
        assert id(bank.k_proj) in grads and id(bank.v_proj) in grads

    def test_shared_projection_amortization(self):
        """run_all_heads reuses one projection, so it beats h separate
        run_head calls (informational benchmark)."""
        rng = np.random.default_rng(17)
        bank = HeadBank(h=8, k_slots=6, d_slots=64, d_feats=384,
                        rng=rng)
        fmap = FeatureMap(14, 14, rng.normal(size=(196, 384)))

        def time_shared():
            t0 = time.perf_counter()
            run_all_heads(fmap, bank, np.random.default_rng(0))
            return time.perf_counter() - t0

        def time_separate():
            t0 = time.perf_counter()
            for j, stream in enumerate(np.random.default_rng(0).spawn(8)):
                run_head(fmap, bank, j, stream)
            return time.perf_counter() - t0

        time_shared(), time_separate()  # warm-up: BLAS init, allocator
        shared = min(time_shared() for _ in range(3))
        separate = min(time_separate() for _ in range(3))
        print(f"shared={shared*1e3:.1f}ms separate={separate*1e3:.1f}ms")
        assert shared < separate * 1.02


class TestCheckpointNames:
    def test_spec_parameter_names_present(self):
        bank = tiny_bank(np.random.default_rng(0), h=2)
        names = {p.name for p in bank.parameters()}
        for expected in ("shared.k", "shared.v", "head0.mu", "head0.log_sigma",
                         "head0.q", "head1.gru.w_ih", "head1.mlp.w2"):
            assert expected in names

    def test_disjoint_head_parameters(self):
        bank = tiny_bank(np.random.default_rng(0), h=3)
        ids0 = {id(p.tensor) for p in bank.head_parameters(0)}
        ids1 = {id(p.tensor) for p in bank.head_parameters(1)}
        assert not ids0 & ids1
