"""Patch embedding: branch composition, gating, token layout."""

import numpy as np
import numpy.testing as npt
import pytest

from eegtf.numerics import (
    Tensor,
    concat,
    conv1d,
    finite_diff_check,
    gelu,
    group_norm,
    linear,
    rfft_amplitude,
)
from eegtf.stfe import (
    PATCH_SAMPLES,
    embed_patches,
    embed_segment,
    frequency_embed,
    init_stfe,
    selective_fuse,
    temporal_embed,
)


def zero_biases(params):
    for blk in params.temporal + params.frequency:
        blk.bias.data[:] = 0
        blk.beta.data[:] = 0
    params.fusion_b.data[:] = 0


def branch_oracle(x, blocks):
    """Compose numerics ops block by block, independently of the branch code."""
    h = Tensor(x.reshape(1, 1, -1))
    for blk in blocks:
        h = conv1d(h, blk.weight, blk.bias, stride=blk.stride, padding=blk.padding)
        h = gelu(h)
        h = group_norm(h, blk.groups, blk.gamma, blk.beta)
    return h.data[0].mean(axis=-1)


class TestTemporalEmbed:
    def test_zeros_propagate(self):
        params = init_stfe(64, seed=0)
        zero_biases(params)
        out = temporal_embed(np.zeros(PATCH_SAMPLES), params)
        npt.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_output_width(self):
        params = init_stfe(64, seed=1)
        assert temporal_embed(np.ones(PATCH_SAMPLES), params).shape == (32,)

    def test_matches_composition_oracle(self):
        rng = np.random.default_rng(2)
        params = init_stfe(32, seed=3)
        x = rng.normal(size=PATCH_SAMPLES)
        got = temporal_embed(x, params).data
        npt.assert_allclose(got, branch_oracle(x, params.temporal), atol=1e-12)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="patch length"):
            temporal_embed(np.zeros(150), init_stfe(8, seed=0))


class TestFrequencyEmbed:
    def test_circular_shift_invariance(self):
        # A patch supported on [0, 163) shifted by 37 samples is, after the
        # zero-pad to 256, exactly a circular roll of the padded frame, so the
        # amplitude spectrum (and any feature of it) is unchanged.
        rng = np.random.default_rng(4)
        params = init_stfe(16, seed=5)
        x1 = np.zeros(PATCH_SAMPLES)
        x1[:163] = rng.normal(size=163)
        x2 = np.zeros(PATCH_SAMPLES)
        x2[37:] = x1[:163]
        amp1 = rfft_amplitude(Tensor(x1)).data
        amp2 = rfft_amplitude(Tensor(x2)).data
        npt.assert_allclose(amp1, amp2, atol=1e-9)
        f1 = frequency_embed(x1, params).data
        f2 = frequency_embed(x2, params).data
        npt.assert_allclose(f1, f2, atol=1e-9)

    def test_zeros_propagate(self):
        params = init_stfe(64, seed=6)
        zero_biases(params)
        out = frequency_embed(np.zeros(PATCH_SAMPLES), params)
        npt.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_matches_composition_oracle(self):
        rng = np.random.default_rng(7)
        params = init_stfe(32, seed=8)
        x = rng.normal(size=PATCH_SAMPLES)
        amp = rfft_amplitude(Tensor(x)).data
        assert amp.shape == (129,)
        got = frequency_embed(x, params).data
        npt.assert_allclose(got, branch_oracle(amp, params.frequency), atol=1e-12)


class TestSelectiveFuse:
    def test_gate_off_ignores_frequency_bitwise(self):
        rng = np.random.default_rng(9)
        params = init_stfe(16, seed=10)
        zt = Tensor(rng.normal(size=8))
        out1 = selective_fuse(zt, Tensor(rng.normal(size=8) * 100), 0.0,
                              params.fusion_w, params.fusion_b).data
        out2 = selective_fuse(zt, Tensor(rng.normal(size=8) * 1e6), 0.0,
                              params.fusion_w, params.fusion_b).data
        npt.assert_array_equal(out1, out2)

    def test_identity_projection_concatenates(self):
        from eegtf.numerics import Parameter

        zt, zf = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
        out = selective_fuse(zt, zf, 1.0, Parameter(np.eye(4)), Parameter(np.zeros(4)))
        npt.assert_array_equal(out.data, [1, 2, 3, 4])

    def test_half_gate_matches_direct_evaluation(self):
        rng = np.random.default_rng(11)
        params = init_stfe(16, seed=12)
        zt, zf = rng.normal(size=8), rng.normal(size=8)
        got = selective_fuse(Tensor(zt), Tensor(zf), 0.5,
                             params.fusion_w, params.fusion_b).data
        want = params.fusion_w.data @ np.concatenate([zt, 0.5 * zf]) + params.fusion_b.data
        npt.assert_allclose(got, want, atol=1e-12)

    def test_gate_out_of_range_rejected(self):
        params = init_stfe(16, seed=13)
        with pytest.raises(ValueError, match="gate"):
            selective_fuse(Tensor(np.zeros(8)), Tensor(np.zeros(8)), 1.5,
                           params.fusion_w, params.fusion_b)


class TestEmbedSegment:
    def test_token_count(self):
        params = init_stfe(16, seed=14)
        seq = embed_segment(np.random.default_rng(15).normal(size=(2, 10, 200)), params)
        assert seq.count == 21
        assert seq.provenance[0] == (0, 0) and seq.provenance[-1] == (1, 9)

    def test_channel_permutation_permutes_rows(self):
        rng = np.random.default_rng(16)
        params = init_stfe(16, seed=17)
        x = rng.normal(size=(3, 10, 200))
        seq = embed_segment(x, params).tokens.data
        perm = [2, 0, 1]
        seq_p = embed_segment(x[perm], params).tokens.data
        npt.assert_array_equal(seq_p[0], seq[0])  # cls fixed
        for new_c, old_c in enumerate(perm):
            npt.assert_array_equal(seq_p[1 + 10 * new_c:1 + 10 * (new_c + 1)],
                                   seq[1 + 10 * old_c:1 + 10 * (old_c + 1)])

    def test_token_equals_per_patch_recomputation(self):
        rng = np.random.default_rng(18)
        params = init_stfe(16, seed=19)
        params.set_gate(1.0)
        x = rng.normal(size=(2, 10, 200))
        seq = embed_segment(x, params).tokens.data
        i, j = 1, 7
        zt = temporal_embed(x[i, j], params)
        zf = frequency_embed(x[i, j], params)
        tok = selective_fuse(zt, zf, 1.0, params.fusion_w, params.fusion_b).data
        npt.assert_allclose(seq[1 + 10 * i + j], tok, atol=1e-12)

    def test_shape_contract_across_channel_counts(self):
        params = init_stfe(8, seed=20)
        for c in (1, 5, 23):
            x = np.zeros((c, 10, 200))
            assert embed_segment(x, params).tokens.shape == (c * 10 + 1, 8)

    def test_malformed_shape_rejected(self):
        params = init_stfe(8, seed=21)
        with pytest.raises(ValueError, match="patches"):
            embed_segment(np.zeros((2, 7, 200)), params)


class TestGateBehavior:
    def test_gate_off_invariance_to_frequency_params(self):
        rng = np.random.default_rng(22)
        params = init_stfe(16, seed=23, lambda_f=0.0)
        x = rng.normal(size=(2, 10, 200))
        before = embed_segment(x, params).tokens.data
        for p in params.frequency_parameters():
            p.data = rng.normal(size=p.shape) * 10
        after = embed_segment(x, params).tokens.data
        npt.assert_array_equal(before, after)

    def test_gate_continuity(self):
        rng = np.random.default_rng(24)
        params = init_stfe(16, seed=25)
        x = rng.normal(size=(4, 200))
        params.set_gate(0.0)
        at_zero = embed_patches(x, params).data
        params.set_gate(1e-6)
        at_eps = embed_patches(x, params).data
        assert np.max(np.abs(at_eps - at_zero)) <= 1e-4

    def test_gate_off_zeroes_frequency_gradients(self):
        rng = np.random.default_rng(26)
        params = init_stfe(8, seed=27, lambda_f=0.0)
        x = rng.normal(size=(3, 200))
        out = embed_patches(x, params).sum()
        out.backward()
        for p in params.frequency_parameters():
            assert p.grad is None or not np.any(p.grad)

    def test_gradients_flow_with_gate_on(self):
        rng = np.random.default_rng(28)
        params = init_stfe(8, seed=29, lambda_f=1.0)
        x = rng.normal(size=(2, 200))
        named = {}  # every STFE parameter by name
        for i, blk in enumerate(params.temporal):
            named.update({f"t{i}.w": blk.weight, f"t{i}.b": blk.bias,
                          f"t{i}.g": blk.gamma, f"t{i}.beta": blk.beta})
        for i, blk in enumerate(params.frequency):
            named.update({f"f{i}.w": blk.weight, f"f{i}.b": blk.bias,
                          f"f{i}.g": blk.gamma, f"f{i}.beta": blk.beta})
        named.update({"W": params.fusion_w, "b": params.fusion_b, "cls": params.cls})

        def f():
            toks = embed_patches(x, params)
            return (toks * toks).mean()

        err = finite_diff_check(f, named, max_coords=6, seed=0)
        assert err <= 1e-4
