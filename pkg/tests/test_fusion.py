import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fusionbench.encoders import MLP
from fusionbench.fusion import (FUSION_TAGS, CrossmodalBlock, CrossmodalFusion, FiLM, MIParams,
                                ScalabilityError, build_fusion, crossmodal_fuse, crossmodal_pairs,
                                early_fuse, film_fuse, gate_fuse, late_fuse, lrtf_fuse, mi_fuse,
                                mi_shapes, tensor_fuse, tensor_fusion_dim)

from oracles import gradient_relative_error, naive_lrtf, random_projection

T = torch.tensor


def _seqs(dims, T_len=4, batch=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, T_len, d, generator=g, dtype=dtype) for d in dims]


class TestConcat:
    def test_early_fuse_values(self):
        assert early_fuse([T([[1.0, 2.0]]), T([[3.0]])]).tolist() == [[1.0, 2.0, 3.0]]

    def test_single_modality_identity(self):
        x = torch.randn(3, 4)
        assert torch.equal(early_fuse([x]), x) and torch.equal(late_fuse([x]), x)

    def test_dims_add(self):
        zs = [torch.zeros(2, d) for d in (4, 5, 6)]
        assert early_fuse(zs).shape[1] == 15 and late_fuse(zs).shape[1] == 15

    def test_early_flattens_sequences(self):
        assert early_fuse([torch.zeros(2, 3, 4), torch.zeros(2, 5)]).shape == (2, 17)


class TestTensorFusion:
    def test_small_example(self):
        assert tensor_fuse([T([[1.0]]), T([[2.0]])]).tolist() == [[2.0, 1.0, 2.0, 1.0]]

    def test_only_bias_survives(self):
        out = tensor_fuse([T([[0.0, 0.0]]), T([[0.0]])])
        assert out.tolist() == [[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]]

    def test_three_modality_dim(self):
        zs = [torch.randn(1, d) for d in (2, 3, 4)]
        assert tensor_fuse(zs).shape[1] == 60 == tensor_fusion_dim((2, 3, 4))

    def test_cap_raises(self):
        with pytest.raises(ScalabilityError):
            tensor_fuse([torch.zeros(1, 9), torch.zeros(1, 9)], cap=99)
        with pytest.raises(ScalabilityError):
            build_fusion("tf", [300, 35, 74, 20])

    def test_layout_modality_one_slowest(self):
        z1, z2 = torch.randn(1, 2), torch.randn(1, 3)
        out = tensor_fuse([z1, z2])[0]
        a1, a2 = torch.cat([z1[0], T([1.0])]), torch.cat([z2[0], T([1.0])])
        for i, j in itertools.product(range(3), range(4)):
            assert out[i * 4 + j] == a1[i] * a2[j]

    @given(st.lists(st.integers(1, 4), min_size=2, max_size=3), st.integers(0, 10 ** 6))
    def test_sub_block_recovery(self, dims, seed):
        g = torch.Generator().manual_seed(seed)
        zs = [torch.randn(1, d, generator=g, dtype=torch.float64) for d in dims]
        full = tensor_fuse(zs)[0].reshape([d + 1 for d in dims])
        bias_index = [d for d in dims]
        assert full[tuple(bias_index)] == 1.0
        for m, z in enumerate(zs):
            index = list(bias_index)
            index[m] = slice(0, dims[m])
            assert torch.equal(full[tuple(index)], z[0])


class TestLRTF:
    def test_all_ones_rank_one(self):
        factors = [torch.ones(1, 2, 1), torch.ones(1, 2, 1)]
        assert lrtf_fuse([T([[1.0]]), T([[1.0]])], factors).tolist() == [[4.0]]

    def test_zero_factors(self):
        factors = [torch.zeros(2, 3, 4), torch.zeros(2, 2, 4)]
        assert torch.equal(lrtf_fuse([torch.randn(3, 2), torch.randn(3, 1)], factors),
                           torch.zeros(3, 4))

    def test_rank_zero_rejected(self):
        with pytest.raises(ValueError):
            build_fusion("lrtf", [2, 2], rank=0)

    def test_matches_naive_contraction(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dims = rng.integers(1, 4, size=2)
            rank, d_out = int(rng.integers(1, 3)), int(rng.integers(1, 4))
            zs = [rng.standard_normal(d) for d in dims]
            factors = [rng.standard_normal((rank, d + 1, d_out)) for d in dims]
            got = lrtf_fuse([torch.from_numpy(z)[None] for z in zs],
                            [torch.from_numpy(f) for f in factors])[0].numpy()
            want = naive_lrtf(zs, factors)
            assert np.linalg.norm(got - want) <= 1e-5 * max(np.linalg.norm(want), 1e-12)


class TestMI:
    @pytest.mark.parametrize("mode", ["matrix", "vector", "scalar"])
    def test_zero_params_zero_output(self, mode):
        shapes = mi_shapes(mode, 3, 2, 4)
        params = MIParams(**{k: torch.zeros(v) for k, v in shapes.items()})
        out = mi_fuse(torch.randn(5, 3), torch.randn(5, 2), params, mode)
        assert torch.equal(out, torch.zeros_like(out))

    def test_identity_u_returns_z1(self):
        shapes = mi_shapes("matrix", 3, 2, 3)
        params = MIParams(torch.zeros(shapes["W"]), torch.eye(3), torch.zeros(shapes["V"]),
                          torch.zeros(3))
        z1 = torch.randn(4, 3)
        assert torch.equal(mi_fuse(z1, torch.randn(4, 2), params, "matrix"), z1)

    def test_vector_mode_is_film_closed_form(self):
        g = torch.Generator().manual_seed(3)
        d1, d2 = 4, 3
        W, V = torch.randn(d1, d2, generator=g), torch.randn(d1, d2, generator=g)
        U, b = torch.randn(d1, generator=g), torch.randn(d1, generator=g)
        z1, z2 = torch.randn(6, d1, generator=g), torch.randn(6, d2, generator=g)
        gamma = torch.stack([W @ z2[n] + U for n in range(6)])
        beta = torch.stack([V @ z2[n] + b for n in range(6)])
        out = mi_fuse(z1, z2, MIParams(W, U, V, b), "vector")
        np.testing.assert_allclose(out, gamma * z1 + beta, atol=1e-6)

    def test_matrix_mode_loop_oracle(self):
        g = torch.Generator().manual_seed(4)
        d1, d2, d_out = 3, 2, 4
        p = MIParams(*(torch.randn(s, generator=g, dtype=torch.float64)
                       for s in mi_shapes("matrix", d1, d2, d_out).values()))
        z1 = torch.randn(1, d1, generator=g, dtype=torch.float64)
        z2 = torch.randn(1, d2, generator=g, dtype=torch.float64)
        want = torch.zeros(d_out, dtype=torch.float64)
        for o in range(d_out):
            want[o] = (sum(z1[0, i] * p.W[i, o, j] * z2[0, j] for i in range(d1) for j in range(d2))
                       + sum(z1[0, i] * p.U[i, o] for i in range(d1))
                       + sum(p.V[o, j] * z2[0, j] for j in range(d2)) + p.b[o])
        np.testing.assert_allclose(mi_fuse(z1, z2, p, "matrix")[0], want, atol=1e-12)

    def test_shape_mismatch(self):
        params = MIParams(torch.zeros(2), torch.zeros(1), torch.zeros(2), torch.zeros(1))
        with pytest.raises(ValueError):
            mi_fuse(torch.randn(1, 3), torch.randn(1, 3), params, "scalar")


class TestFiLM:
    def test_unit_gamma_zero_beta(self):
        z1 = torch.randn(4, 3)
        out = film_fuse(z1, torch.randn(4, 2), lambda z: torch.ones(4, 3),
                        lambda z: torch.zeros(4, 3))
        assert torch.equal(out, z1)

    def test_zero_gamma_gives_beta(self):
        beta = torch.randn(4, 3)
        out = film_fuse(torch.randn(4, 3), torch.randn(4, 2), lambda z: torch.zeros(4, 3),
                        lambda z: beta)
        assert torch.equal(out, beta)

    def test_linear_film_reproduces_mi_vector(self):
        film = build_fusion("film", [4, 3], seed=2, hidden_dims=(), dtype=torch.float64)
        gw, gb = film.gamma_net.net[0].weight, film.gamma_net.net[0].bias
        bw, bb = film.beta_net.net[0].weight, film.beta_net.net[0].bias
        params = MIParams(gw.detach(), gb.detach(), bw.detach(), bb.detach())
        z1, z2 = torch.randn(5, 4, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64)
        np.testing.assert_allclose(film([z1, z2]).detach(), mi_fuse(z1, z2, params, "vector"),
                                   atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            film_fuse(torch.randn(2, 3), torch.randn(2, 2), MLP(2, (), 4), MLP(2, (), 3))


class TestGate:
    @pytest.mark.parametrize("tag", ["gate", "nlgate"])
    def test_zero_params_half_gate(self, tag):
        module = build_fusion(tag, [3, 2])
        with torch.no_grad():
            for p in module.parameters():
                p.zero_()
        z1 = torch.randn(4, 3)
        assert torch.equal(module([z1, torch.randn(4, 2)]), 0.5 * z1)

    @pytest.mark.parametrize("tag", ["gate", "nlgate"])
    def test_zero_z1(self, tag):
        module = build_fusion(tag, [3, 2])
        assert torch.equal(module([torch.zeros(4, 3), torch.randn(4, 2)]), torch.zeros(4, 3))

    @given(st.integers(0, 10 ** 6), st.sampled_from(["gate", "nlgate"]))
    def test_bounded_by_z1(self, seed, tag):
        g = torch.Generator().manual_seed(seed)
        module = build_fusion(tag, [3, 2], seed=seed % 7)
        z1, z2 = 5 * torch.randn(4, 3, generator=g), 5 * torch.randn(4, 2, generator=g)
        gate = module.gate(z2)
        assert ((gate >= 0) & (gate <= 1)).all()
        assert (module([z1, z2]).abs() <= z1.abs()).all()

    def test_gate_fuse_elementwise(self):
        assert gate_fuse(T([[2.0, 4.0]]), None, lambda z: T([[0.5, 0.25]])).tolist() == [[1.0, 1.0]]


class TestCrossmodal:
    def test_uniform_attention_for_identical_keys(self):
        blk = CrossmodalBlock(3, 2, 4, positional=False)
        b = torch.randn(2, 1, 2).expand(2, 5, 2)
        blk(torch.randn(2, 3, 3), b)
        np.testing.assert_allclose(blk.attn.last_weights, torch.full((2, 1, 3, 5), 1 / 5),
                                   atol=1e-7)

    def test_context_permutation_invariance_without_positions(self):
        blk = build_fusion("mult", [3, 2], d_model=8, positional=False,
                           dtype=torch.float64).blocks[0]
        a, b = _seqs([3, 2], T_len=6)
        perm = torch.randperm(6)
        np.testing.assert_allclose(blk(a, b).detach(), blk(a, b[:, perm]).detach(), atol=1e-6)

    def test_output_dims(self):
        assert build_fusion("mult", [3, 2], d_model=8).out_dim == 16
        assert build_fusion("mult", [3, 2, 4], d_model=8).out_dim == 48
        out = crossmodal_fuse(*_seqs([3, 2], dtype=torch.float32),
                              build_fusion("mult", [3, 2], d_model=8))
        assert out.shape == (2, 16)

    def test_pairs(self):
        assert crossmodal_pairs(2) == [(0, 1), (1, 0)]
        assert crossmodal_pairs(3) == [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)]

    def test_more_than_three_needs_groups(self):
        with pytest.raises(ValueError):
            CrossmodalFusion([2, 2, 2, 2])
        fusion = CrossmodalFusion([2, 2, 2, 2], d_model=4, groups=[[0, 1], [2], [3]])
        assert fusion(_seqs([2, 2, 2, 2], dtype=torch.float32)).shape == (2, 24)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            CrossmodalFusion([2, 2], d_model=6, heads=4)


GRAD_CASES = {
    "ef": dict(dims=[3, 2]), "lf": dict(dims=[3, 2]), "tf": dict(dims=[2, 2]),
    "lrtf": dict(dims=[3, 2], params=dict(out_dim=3, rank=2)),
    "mi-matrix": dict(dims=[3, 2], params=dict(out_dim=3)),
    "mi-vector": dict(dims=[3, 2]), "mi-scalar": dict(dims=[3, 2]),
    "film": dict(dims=[3, 2], params=dict(hidden_dims=(4,))),
    "gate": dict(dims=[3, 2]), "nlgate": dict(dims=[3, 2], params=dict(key_dim=3)),
    "mult": dict(dims=[3, 2], params=dict(d_model=4, heads=2)),
}


def test_every_tag_has_a_gradient_case():
    assert set(GRAD_CASES) == set(FUSION_TAGS)


@pytest.mark.parametrize("tag", list(GRAD_CASES))
def test_fusion_gradients(tag):
    case = GRAD_CASES[tag]
    module = build_fusion(tag, case["dims"], seed=1, dtype=torch.float64, **case.get("params", {}))
    for trial in range(10):
        if module.needs_sequences:
            zs = _seqs(case["dims"], T_len=3, seed=trial)
        else:
            g = torch.Generator().manual_seed(trial)
            zs = [torch.randn(2, d, generator=g, dtype=torch.float64) for d in case["dims"]]
        for z in zs:
            z.requires_grad_(True)
        w = random_projection(module(zs), trial)
        err = gradient_relative_error(lambda: (module(zs) * w).sum(), [*zs, *module.parameters()])
        assert err < 1e-4, (tag, trial, err)


@pytest.mark.parametrize("tag", FUSION_TAGS)
def test_build_is_deterministic(tag):
    dims = [3, 2]
    a = build_fusion(tag, dims, seed=5)
    b = build_fusion(tag, dims, seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert a.tag == tag
