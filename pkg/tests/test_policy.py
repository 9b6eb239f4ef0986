import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_instance
from quasiroute import tensor as tn
from quasiroute.env import reset, step
from quasiroute.errors import DomainError, ShapeError
from quasiroute.policy import (
    DECODER_MATRICES, Policy, adaptation_bias, aafm, aafm_reference, bias_alpha, decode_logits, decode_step,
    describe, embed_nodes, encode, encoder_layer, get_preset, init_params, mbm, problem_state_scalar,
    relation_matrix, trajectory_view, wdad_delta, wdad_effective_weights,
)
from quasiroute.quasimetric import gen_asymmetric
from quasiroute.tensor import Tensor
from quasiroute.variants import build_lambda, generate_instance, make_spec

DESK = get_preset("desk")


def bias_net(W1, b1, W2, b2):
    return {"n.W1": Tensor(W1), "n.b1": Tensor(b1), "n.W2": Tensor(W2), "n.b2": Tensor(b2)}


def e(k, n=10):
    v = np.zeros(n)
    v[k] = 1.0
    return v


class TestBiasAlpha:
    def test_clamped(self):
        p = bias_net(np.zeros((10, 4)), np.zeros(4), np.zeros((4, 1)), np.array([-1.0]))
        assert bias_alpha(e(0), p, "n").item() == 0.0

    def test_constant(self):
        p = bias_net(np.zeros((10, 4)), np.zeros(4), np.zeros((4, 1)), np.array([0.5]))
        assert bias_alpha(e(3), p, "n").item() == 0.5

    def test_two_units(self):
        W1 = np.zeros((10, 2))
        W1[0] = [1.0, -2.0]
        p = bias_net(W1, np.array([0.5, 0.5]), np.array([[2.0], [1.0]]), np.array([0.1]))
        # hidden = [1.5, -1.5]; 2 * 1.5 + 1 * (-1.5) + 0.1
        assert bias_alpha(e(0), p, "n").item() == pytest.approx(1.6, abs=1e-15)


class TestAafm:
    def test_hand_case(self):
        V = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = aafm(np.zeros((2, 2)), np.zeros((2, 2)), V, np.zeros((2, 2))).data
        assert np.allclose(out, [[1.0, 1.5], [1.0, 1.5]], atol=1e-15)

    def test_single_key(self):
        Q, V = np.array([[0.3, -1.0]]), np.array([[2.0, 5.0]])
        out = aafm(Q, np.array([[0.7, 0.1]]), V, np.zeros((1, 1))).data
        np.testing.assert_allclose(out, 1 / (1 + np.exp(-Q)) * V, rtol=1e-15)

    def test_masked_column(self):
        rng = np.random.default_rng(0)
        Q, K, V = (rng.normal(size=(4, 3)) for _ in range(3))
        A = rng.normal(size=(4, 4))
        A[:, 2] = -1e9
        V2 = V.copy()
        V2[2] = 1e3
        diff = aafm(Q, K, V2, A).data - aafm(Q, K, V, A).data
        assert np.abs(diff).max() < 1e-12

    def test_all_masked_row(self):
        with pytest.raises(DomainError):
            aafm(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.full((1, 2), -1e9))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            aafm(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32))
    def test_stabilized_matches_naive(self, n, m, d, seed):
        rng = np.random.default_rng(seed)
        Q, K, V = rng.normal(size=(n, d)), rng.normal(size=(m, d)) * 3, rng.normal(size=(m, d))
        A = rng.normal(size=(n, m)) * 3
        ref = aafm_reference(Q, K, V, A)
        got = aafm(Q, K, V, A).data
        assert np.all(np.abs(got - ref) <= 1e-10 * np.maximum(1.0, np.abs(ref)))


class TestAdaptationBias:
    def test_zero_alpha(self):
        assert not adaptation_bias(0.0, 10, np.ones((3, 3))).data.any()

    def test_two_nodes(self):
        d = np.array([[0.0, 1.5], [-0.5, 0.0]])
        assert np.array_equal(adaptation_bias(2.0, 2, d).data, -2.0 * d)

    def test_monotone(self):
        b = adaptation_bias(0.7, 20, np.array([[0.1, 0.4, 0.9]])).data
        assert b[0, 0] > b[0, 1] > b[0, 2]

    def test_relation_unscaled(self):
        R = np.ones((3, 3))
        assert np.array_equal(adaptation_bias(0.5, 64, R, scale_by_n=False).data, -0.5 * R)


class TestWdad:
    def test_hand_case(self):
        up = np.zeros((10, 1, 2, 1))
        down = np.zeros((10, 1, 1, 2))
        g = np.zeros((10, 1, 2))
        up[0, 0] = [[1.0], [0.0]]
        down[0, 0] = [[3.0, 4.0]]
        g[0, 0] = [2.0, 5.0]
        delta = wdad_delta(e(0), up, down, g, eps=1e-6).data
        np.testing.assert_allclose(delta, [[1.2, 1.6], [0.0, 0.0]], rtol=1e-6)
        assert delta[1].tolist() == [0.0, 0.0]

    def test_mean_over_attributes(self):
        rng = np.random.default_rng(0)
        one = [rng.normal(size=s) for s in ((3, 4, 2), (3, 2, 5), (3, 4))]
        up, down, g = (np.broadcast_to(a, (10,) + a.shape).copy() for a in one)
        single = wdad_delta(e(1), up, down, g).data
        lam = np.zeros(10)
        lam[[1, 4, 7]] = 1
        np.testing.assert_allclose(wdad_delta(lam, up, down, g).data, single, rtol=1e-14, atol=1e-15)

    def test_zero_lambda_falls_back(self):
        params = init_params(DESK, seed=1)
        for name in DECODER_MATRICES:
            params[f"dec.{name}.g"] = Tensor(np.random.default_rng(2).normal(size=params[f"dec.{name}.g"].shape))
        W = wdad_effective_weights(np.zeros(10), params, DESK)
        for name in DECODER_MATRICES:
            assert np.array_equal(W[name].data, params[f"dec.{name}.W0"].data)

    def test_zero_g_falls_back(self):
        params = init_params(DESK, seed=1)
        W = wdad_effective_weights(build_lambda(make_spec("OCVRPBTW")), params, DESK)
        for name in DECODER_MATRICES:
            assert np.array_equal(W[name].data, params[f"dec.{name}.W0"].data)

    def test_decoder_bit_identical_at_init(self):
        inst = generate_instance(make_spec("CVRPTW"), 8, 0)
        pol = Policy(DESK, seed=3)
        enc = pol.encode([inst], [[0]])
        base = {n: pol.params[f"dec.{n}.W0"] for n in DECODER_MATRICES}
        enc0 = replace(enc, weights=base, K=enc.H @ base["Wk"], V=enc.H @ base["Wv"])
        state = reset(inst)
        mask = np.where(np.arange(inst.n_nodes) == 0, -1e9, 0.0)[None]
        args = ([0], [0], [1.0], mask, DESK)
        p = decode_step(enc, trajectory_view(enc, [0]), *args).data
        p0 = decode_step(enc0, trajectory_view(enc0, [0]), *args).data
        assert np.array_equal(p, p0) and state.t == 0


class TestEncoder:
    def test_embed_linear(self):
        params = init_params(DESK, seed=0)
        rng = np.random.default_rng(0)
        u = rng.normal(size=(5, DESK.udr_width))
        assert not embed_nodes(np.zeros((1, DESK.udr_width)), params, DESK).data.any()
        parts = []
        for lo, hi in ((0, 8), (8, 14), (14, 21)):
            v = np.zeros_like(u)
            v[:, lo:hi] = u[:, lo:hi]
            parts.append(embed_nodes(v, params, DESK).data)
        np.testing.assert_allclose(embed_nodes(u, params, DESK).data, sum(parts), atol=1e-13)
        with pytest.raises(ShapeError):
            embed_nodes(np.zeros((2, 5)), params, DESK)

    def _layer_inputs(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        H = Tensor(rng.normal(size=(n, DESK.d_model)))
        D = rng.normal(size=(n, n))
        return H, D, D.T.copy()

    def test_missing_relation_branch(self):
        params = init_params(DESK, seed=0)
        H, D, DT = self._layer_inputs()
        lam = build_lambda(make_spec("CVRP"))
        out = mbm(H, D, DT, None, lam, params, 0, 6).data
        Wo = params["enc.0.Wo"].data.copy()
        Wo[2 * DESK.d_model:] = 123.0
        params["enc.0.Wo"] = Tensor(Wo)
        assert np.array_equal(mbm(H, D, DT, None, lam, params, 0, 6).data, out)

    def test_skip_path(self):
        params = init_params(DESK, seed=0)
        params["enc.0.Wo"] = Tensor(np.zeros_like(params["enc.0.Wo"].data))
        params["enc.0.ff.W2"] = Tensor(np.zeros_like(params["enc.0.ff.W2"].data))
        H, D, DT = self._layer_inputs()
        out = encoder_layer(H, D, DT, None, np.zeros(10), params, DESK, 0, 6).data
        twice = tn.instance_norm(tn.instance_norm(H, eps=1e-5), eps=1e-5).data
        np.testing.assert_allclose(out, twice, atol=1e-12)

    def test_permutation_equivariance(self):
        n = 9
        d = gen_asymmetric(n, 4).d
        perm = np.random.default_rng(1).permutation(n)
        inv = np.argsort(perm)
        a = make_instance("ATSP", d)
        b = make_instance("ATSP", d[np.ix_(perm, perm)])
        params = init_params(DESK, seed=2)
        Ha = encode([a], [[3]], params, DESK).H.data[0]
        Hb = encode([b], [[int(inv[3])]], params, DESK).H.data[0]
        np.testing.assert_allclose(Hb, Ha[perm], atol=1e-10)

    def test_relation_matrix(self):
        inst = generate_instance(make_spec("PDCVRP"), 4, 0)
        R = relation_matrix(inst)
        assert R[1, 3] == R[3, 1] == R[2, 4] == 0 and R[1, 2] == 1
        assert relation_matrix(generate_instance(make_spec("CVRP"), 4, 0)) is None

    def test_paper_preset_finite(self):
        cfg = get_preset("paper")
        inst = generate_instance(make_spec("APDCVRP"), 48, 0)
        enc = encode([inst], [[0]], init_params(cfg, seed=0), cfg)
        assert enc.H.shape == (1, 49, 128) and np.all(np.isfinite(enc.H.data))


class TestDecoder:
    def setup_method(self):
        self.inst = generate_instance(make_spec("CVRP"), 8, 0)
        self.enc = Policy(DESK, seed=0).encode([self.inst], [[0, 3]])
        self.view = trajectory_view(self.enc, [0, 0])

    def test_single_open_node(self):
        mask = np.full((2, 9), -1e9)
        mask[:, 4] = 0.0
        p = decode_step(self.enc, self.view, [0, 0], [0, 2], [1.0, 0.5], mask, DESK).data
        assert np.array_equal(p[:, 4], [1.0, 1.0]) and p.sum() == 2.0

    def test_simplex_and_clip(self):
        mask = np.zeros((2, 9))
        mask[:, 0] = -1e9
        logits = decode_logits(self.enc, self.view, [0, 0], [0, 5], [1.0, 0.3], mask, DESK).data
        assert np.all(np.abs(logits) <= 50.0)
        p = decode_step(self.enc, self.view, [0, 0], [0, 5], [1.0, 0.3], mask, DESK).data
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9) and np.all(p[:, 0] == 0)


class TestContextScalar:
    def test_cvrp_fresh(self):
        inst = generate_instance(make_spec("CVRP"), 5, 0)
        assert problem_state_scalar(reset(inst), inst.spec) == 1.0

    def test_tsp(self):
        inst = generate_instance(make_spec("TSP"), 5, 0)
        assert problem_state_scalar(reset(inst), inst.spec) == 0.0

    def test_op_half(self):
        inst = generate_instance(make_spec("OP"), 5, 0)
        assert problem_state_scalar(replace(reset(inst), route_used=2.0), inst.spec) == 0.5
        ainst = generate_instance(make_spec("AOP"), 5, 0)
        assert problem_state_scalar(replace(reset(ainst), route_used=0.5), ainst.spec) == 0.5

    def test_pc_remaining(self):
        inst = make_instance("PCTSP", np.ones((3, 3)) - np.eye(3), prize=[0, 0.4, 0.9], penalty=[0, 1, 1])
        s = step(reset(inst), inst, 1)
        assert problem_state_scalar(s, inst.spec, inst.pc_threshold) == pytest.approx(0.6)


def test_checkpoint_and_describe(tmp_path):
    pol = Policy(DESK, seed=0)
    path = str(tmp_path / "m.bin")
    pol.save(path, {"note": "x"})
    back = Policy.load(path)
    assert back.cfg == DESK
    for k, v in pol.params.items():
        np.testing.assert_allclose(back.params[k].data, v.data, rtol=1e-6, atol=1e-7)
    counts = describe(pol.params)
    total = counts.pop("total")
    assert total == sum(counts.values()) == sum(p.data.size for p in pol.params.values())
