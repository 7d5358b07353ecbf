import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from negattn.attention import (AttentionConfig, ConfigError, ProjectionWeights, attend,
                               cross_attention, disable_mask_variant, negative_attention)
from negattn.numerics import DimensionError, Rng, gaussian


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def random_case(seed, n=6, l=4, ls=3, d_model=8, d_cond=5, heads=2, d_k=3):
    r = Rng(seed)
    w = ProjectionWeights(
        gaussian(r.child(0), (d_model, heads * d_k)),
        gaussian(r.child(1), (d_cond, heads * d_k)),
        gaussian(r.child(2), (d_cond, heads * d_k)),
        gaussian(r.child(3), (heads * d_k, d_model)),
        heads)
    f = gaussian(r.child(4), (n, d_model))
    cond = gaussian(r.child(5), (l, d_cond))
    subj = gaussian(r.child(6), (ls, d_cond))
    mask = (torch.from_numpy(r.child(7).uniform(size=n)) > 0.5).double()
    return f, cond, subj, w, mask


def scalar_weights():
    one = t([[1.0]])
    return ProjectionWeights(one, one, one, one, 1)


class TestCrossAttention:
    def test_single_key_broadcasts_value(self):
        d = 3
        eye = torch.eye(d, dtype=torch.float64)
        w = ProjectionWeights(eye, eye, eye, eye, 1)
        f = gaussian(Rng(0), (5, d))
        cond = t([[0.5, -1.0, 2.0]])
        z, probs = cross_attention(f, cond, w)
        assert torch.equal(z, cond.expand(5, d))
        assert torch.equal(probs, torch.ones(1, 5, 1, dtype=torch.float64))

    def test_identical_keys_average_values(self):
        # two keys equal, values differ: projections read disjoint cond columns
        w = ProjectionWeights(t([[1.0]]), t([[1.0], [0.0]]), t([[0.0], [1.0]]), t([[1.0]]), 1)
        cond = t([[0.7, 2.0], [0.7, 6.0]])
        z, _ = cross_attention(t([[1.0], [-3.0]]), cond, w)
        assert torch.allclose(z, t([[4.0], [4.0]]), rtol=0, atol=1e-15)

    def test_hand_evaluation(self):
        # softmax([0, ln 3]) = [0.25, 0.75]; 0.25*0 + 0.75*4 = 3
        w = ProjectionWeights(t([[1.0]]), t([[1.0], [0.0]]), t([[0.0], [1.0]]), t([[1.0]]), 1)
        cond = t([[0.0, 0.0], [math.log(3), 4.0]])
        z, probs = cross_attention(t([[1.0]]), cond, w)
        assert torch.allclose(z, t([[3.0]]), rtol=0, atol=1e-14)
        assert torch.allclose(probs[0, 0], t([0.25, 0.75]), rtol=0, atol=1e-15)

    def test_scale_is_inverse_sqrt_dk(self):
        f, cond, _, w, _ = random_case(3, heads=1, d_k=4)
        _, probs = cross_attention(f, cond, w)
        q, k = f @ w.w_q, cond @ w.w_k
        ref = torch.softmax(q @ k.T / 2.0, dim=-1)
        assert torch.allclose(probs[0], ref, rtol=0, atol=1e-14)

    def test_matches_torch_sdpa(self):
        f, cond, _, w, _ = random_case(11, heads=2, d_k=3)
        z, _ = cross_attention(f, cond, w)
        q = (f @ w.w_q).reshape(6, 2, 3).transpose(0, 1)
        k = (cond @ w.w_k).reshape(4, 2, 3).transpose(0, 1)
        v = (cond @ w.w_v).reshape(4, 2, 3).transpose(0, 1)
        ref = torch.nn.functional.scaled_dot_product_attention(q, k, v)
        ref = ref.transpose(0, 1).reshape(6, 6) @ w.w_out
        assert torch.allclose(z, ref, rtol=0, atol=1e-12)

    def test_key_mask_equals_truncation(self):
        f, cond, _, w, _ = random_case(5)
        padded = torch.cat([cond, gaussian(Rng(9), (3, cond.shape[1]))])
        valid = torch.tensor([True] * 4 + [False] * 3)
        z_pad, probs = cross_attention(f, padded, w, key_mask=valid)
        z, _ = cross_attention(f, cond, w)
        assert torch.allclose(z_pad, z, rtol=0, atol=1e-13)
        assert (probs[..., 4:] == 0).all()

    def test_width_errors(self):
        f, cond, _, w, _ = random_case(0)
        with pytest.raises(DimensionError):
            cross_attention(f[:, :3], cond, w)
        bad = ProjectionWeights(w.w_q, w.w_k[:, :4], w.w_v, w.w_out, w.heads)
        with pytest.raises(DimensionError):
            cross_attention(f, cond, bad)
        with pytest.raises(DimensionError):
            cross_attention(f, cond, ProjectionWeights(w.w_q, w.w_k, w.w_v, w.w_out, 4))
        empty = ProjectionWeights(torch.zeros(8, 0), torch.zeros(5, 0), torch.zeros(5, 0),
                                  torch.zeros(0, 8), 1)
        with pytest.raises(DimensionError):
            cross_attention(f, cond, empty)


class TestNegativeAttention:
    def test_zero_scale_is_baseline(self):
        f, cond, subj, w, mask = random_case(1)
        z, probs = negative_attention(f, cond, subj, w, mask, AttentionConfig(lam=0.0))
        zb, pb = cross_attention(f, cond, w)
        assert torch.equal(z, zb) and torch.equal(probs, pb)

    def test_zero_mask_is_baseline(self):
        f, cond, subj, w, _ = random_case(2)
        z, _ = negative_attention(f, cond, subj, w, torch.zeros(6, dtype=torch.float64),
                                  AttentionConfig(lam=0.9))
        assert torch.equal(z, cross_attention(f, cond, w)[0])

    def test_hand_evaluation(self):
        # single keys: main value 2, subject value 4, 2 - 0.5 * 4 = 0
        z, _ = negative_attention(t([[1.0]]), t([[2.0]]), t([[4.0]]), scalar_weights(),
                                  t([1.0]), AttentionConfig(lam=0.5))
        assert torch.equal(z, t([[0.0]]))

    def test_disabled_flag(self):
        f, cond, subj, w, mask = random_case(4)
        cfg = AttentionConfig(lam=0.8, negative_attention=False)
        z, _ = negative_attention(f, cond, subj, w, mask, cfg)
        assert torch.equal(z, cross_attention(f, cond, w)[0])

    def test_mask_gates_rows_before_projection(self):
        f, cond, subj, w, mask = random_case(6)
        cfg = AttentionConfig(lam=0.7)
        z, _ = negative_attention(f, cond, subj, w, mask, cfg)
        zb, _ = cross_attention(f, cond, w)
        zs, _ = cross_attention(f, subj, w)
        # w_out is linear, so gating per-head rows equals gating projected rows
        expected = zb - 0.7 * mask[:, None] * zs
        assert torch.allclose(z, expected, rtol=0, atol=1e-12)
        off = mask == 0
        assert torch.equal(z[off], zb[off])

    def test_errors(self):
        f, cond, subj, w, _ = random_case(0)
        with pytest.raises(DimensionError):
            negative_attention(f, cond, subj, w, torch.ones(5), AttentionConfig(lam=0.5))
        with pytest.raises(ConfigError):
            AttentionConfig(lam=-0.1)
        cfg = AttentionConfig(lam=0.5)
        cfg.lam = -1.0
        with pytest.raises(ConfigError):
            negative_attention(f, cond, subj, w, torch.ones(6), cfg)

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0))
    @settings(max_examples=40, deadline=None)
    def test_linear_in_scale(self, seed, lam):
        f, cond, subj, w, mask = random_case(seed)
        z = lambda s: negative_attention(f, cond, subj, w, mask, AttentionConfig(lam=s))[0]
        z0, z1 = z(0.0), z(1.0)
        assert torch.allclose(z(lam), z0 - lam * (z0 - z1), rtol=0, atol=1e-10)

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_monotone_suppression_full_mask(self, seed, lam):
        f, cond, _, w, _ = random_case(seed)
        ones = torch.ones(6, dtype=torch.float64)
        z, _ = negative_attention(f, cond, cond, w, ones, AttentionConfig(lam=lam))
        z0, _ = cross_attention(f, cond, w)
        assert math.isclose(float(z.norm()), (1 - lam) * float(z0.norm()),
                            rel_tol=1e-9, abs_tol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_prob_rows_sum_to_one(self, seed):
        f, cond, subj, w, mask = random_case(seed)
        _, probs = negative_attention(f, cond, subj, w, mask, AttentionConfig(lam=0.6))
        assert (probs.sum(-1) - 1).abs().max() < 1e-12

    def test_batched_matches_unbatched(self):
        cases = [random_case(s) for s in range(3)]
        w = cases[0][3]
        f = torch.stack([c[0] for c in cases])
        cond = torch.stack([c[1] for c in cases])
        subj = torch.stack([c[2] for c in cases])
        mask = torch.stack([c[4] for c in cases])
        cfg = AttentionConfig(lam=0.6)
        zb, pb = negative_attention(f, cond, subj, w, mask, cfg)
        for i, c in enumerate(cases):
            z, p = negative_attention(c[0], c[1], c[2], w, c[4], cfg)
            assert torch.allclose(zb[i], z, rtol=0, atol=1e-13)
            assert torch.allclose(pb[i], p, rtol=0, atol=1e-15)

    def test_subject_probs_returned(self):
        f, cond, subj, w, mask = random_case(8)
        res = attend(f, cond, subj, w, mask, AttentionConfig(lam=0.6))
        assert res.subject_probs.shape == (2, 6, 3)
        assert attend(f, cond, subj, w, mask, AttentionConfig(lam=0.0)).subject_probs is None


class TestNoMaskVariant:
    def test_zero_scale(self):
        f, cond, subj, w, _ = random_case(1)
        cfg = AttentionConfig(lam=0.0, background_masking=False)
        assert torch.equal(disable_mask_variant(f, cond, subj, w, cfg),
                           cross_attention(f, cond, w)[0])

    def test_equals_all_ones_mask(self):
        f, cond, subj, w, _ = random_case(2)
        cfg = AttentionConfig(lam=0.8, background_masking=False)
        z = disable_mask_variant(f, cond, subj, w, cfg)
        ref, _ = negative_attention(f, cond, subj, w, torch.ones(6, dtype=torch.float64), cfg)
        assert torch.equal(z, ref)

    def test_branch_cancellation(self):
        f, cond, _, w, _ = random_case(3)
        cfg = AttentionConfig(lam=1.0, background_masking=False)
        z = disable_mask_variant(f, cond, cond, w, cfg)
        assert torch.equal(z, torch.zeros_like(z))

    def test_requires_masking_off(self):
        f, cond, subj, w, _ = random_case(0)
        with pytest.raises(ConfigError):
            disable_mask_variant(f, cond, subj, w, AttentionConfig(lam=0.5))
