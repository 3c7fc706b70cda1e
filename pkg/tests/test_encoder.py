"""Encoder forward values against hand traces and dense numpy oracles;
end-to-end gradients against finite differences."""

import math

import numpy as np
import pytest

from tradecast.encoder import (
    EncoderConfig,
    HeadParams,
    LatentDist,
    build_input,
    dagan_head,
    drop_edge_mask,
    encode_snapshot,
    fuse,
    gcn_branch,
    gcn_norm,
    init_encoder_params,
    kl_divergence,
    sample_z,
    variational_heads,
)
from tradecast.graphdata import GraphSnapshot, synth_generate
from tradecast.rng import Rng
from tradecast.tape import Param, ShapeError, Tape, add, mul, sum_all

from gradcheck import analytic_grads, assert_grads_match


def make_head(name, d_in, d_hidden, rng, depth=1, raw_prop=0.0, raw_skip=0.0, s=1.0):
    bound = math.sqrt(6.0 / (d_in + d_hidden))
    return HeadParams(
        w_in=Param(f"{name}.w_in", rng.uniform(d_in, d_hidden, -bound, bound)),
        b_in=Param(f"{name}.b_in", np.zeros((1, d_hidden))),
        scale=Param(f"{name}.scale", [[s]]),
        raw_prop=[Param(f"{name}.step{l}.raw_prop", [[raw_prop]]) for l in range(depth)],
        raw_skip=[Param(f"{name}.step{l}.raw_skip", [[raw_skip]]) for l in range(depth)],
    )


def toy_snapshot(rng, n=6, density=0.4):
    adj = rng.bernoulli((n, n), density) * (1.0 - np.eye(n))
    trade = adj * rng.lognormal(1.0, 0.5, (n, n))
    feats = rng.normal(n, 4)
    return GraphSnapshot(2020, adj, trade, feats)


def dense_head_oracle(x, head, adj, trade):
    """Independent numpy evaluation of a depth-1 head with no edge dropout."""
    pre = x @ head.w_in.value + head.b_in.value
    m0 = np.maximum(pre, 0.0)
    norms = np.maximum(np.linalg.norm(m0, axis=1, keepdims=True), 1e-12)
    m0 = head.scale.value[0, 0] * m0 / norms
    p = np.zeros_like(trade)
    for j in range(trade.shape[0]):
        on = adj[:, j] > 0
        if on.any():
            e = np.exp(trade[on, j] - trade[on, j].max())
            p[on, j] = e / e.sum()
    a = 1.0 / (1.0 + math.exp(-head.raw_prop[0].value[0, 0]))
    b = 1.0 / (1.0 + math.exp(-head.raw_skip[0].value[0, 0]))
    return a * (p.T @ m0) + b * m0


class TestBuildInput:
    def test_shape_law(self):
        params = init_encoder_params(EncoderConfig(), n=7, rng=Rng(3))
        tape = Tape()
        out = build_input(tape, Rng(4).normal(7, 4), params)
        assert out.shape == (7, 8)
        assert np.isfinite(out.data).all()

    def test_row_mismatch(self):
        params = init_encoder_params(EncoderConfig(), n=7, rng=Rng(3))
        with pytest.raises(ShapeError, match="universe drift"):
            build_input(Tape(), Rng(4).normal(6, 4), params)

    def test_embedding_receives_gradient(self):
        params = init_encoder_params(EncoderConfig(feat_dim=2, embed_dim=2, hidden_dim=3,
                                                   latent_dim=2), n=4, rng=Rng(3))
        feats = Rng(4).normal(4, 2)

        def build(tape):
            return sum_all(build_input(tape, feats, params))

        assert_grads_match(build, [params.node_embed])
        (grad,) = analytic_grads(build, [params.node_embed])
        assert (grad != 0.0).all()


class TestDropEdge:
    def test_keep_fraction(self):
        rng = Rng(7).child("mc")
        adj = np.zeros((25, 25))
        idx = Rng(8).choice_without_replacement(25 * 25 - 25, 100)
        offdiag = np.flatnonzero(1.0 - np.eye(25))
        adj.ravel()[offdiag[idx]] = 1.0
        kept = 0
        for t in range(10000):
            kept += drop_edge_mask(adj, 0.2, rng.child(t)).sum()
        frac = kept / (10000 * 100)
        assert abs(frac - 0.8) <= 0.02

    def test_zero_drop_is_identity(self):
        adj = np.eye(4)[::-1].copy()
        out = drop_edge_mask(adj, 0.0, None)
        assert out is adj


class TestDaganHead:
    def test_empty_graph_single_step(self):
        rng = Rng(11)
        n = 5
        head = make_head("h", 4, 3, rng, depth=1)  # raw 0 -> prop = skip = 0.5
        x = rng.normal(n, 4)
        adj = np.zeros((n, n))
        tape = Tape()
        out = dagan_head(tape, tape.constant(x), adj, adj, head, 0.0, None, train=False)
        pre = np.maximum(x @ head.w_in.value, 0.0)
        m0 = pre / np.maximum(np.linalg.norm(pre, axis=1, keepdims=True), 1e-12)
        np.testing.assert_allclose(out.data, 0.5 * m0, atol=1e-14)

    def test_single_edge_hand_trace(self):
        # saturate the mixes: propagated weight 1, skip weight 0
        rng = Rng(13)
        head = make_head("h", 4, 3, rng, depth=1, raw_prop=500.0, raw_skip=-500.0)
        n = 3
        adj = np.zeros((n, n))
        trade = np.zeros((n, n))
        adj[0, 1] = 1.0
        trade[0, 1] = 5.0
        x = rng.normal(n, 4)
        tape = Tape()
        out = dagan_head(tape, tape.constant(x), adj, trade, head, 0.0, None, train=False)
        pre = np.maximum(x @ head.w_in.value, 0.0)
        m0 = pre / np.maximum(np.linalg.norm(pre, axis=1, keepdims=True), 1e-12)
        np.testing.assert_allclose(out.data[1], m0[0], atol=1e-14)
        np.testing.assert_allclose(out.data[0], 0.0, atol=1e-14)
        np.testing.assert_allclose(out.data[2], 0.0, atol=1e-14)

    def test_matches_dense_oracle(self):
        rng = Rng(17)
        snap = toy_snapshot(rng.child("snap"), n=7)
        head = make_head("h", 4, 5, rng.child("head"), depth=1, raw_prop=0.3, raw_skip=-0.2)
        tape = Tape()
        out = dagan_head(tape, tape.constant(snap.feats), snap.adj, snap.trade,
                         head, 0.0, None, train=False)
        expected = dense_head_oracle(snap.feats, head, snap.adj, snap.trade)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_mix_weights_stay_in_unit_interval(self):
        for raw in np.linspace(-30.0, 30.0, 13):
            w = 1.0 / (1.0 + math.exp(-raw))
            assert 0.0 < w < 1.0


class TestGcn:
    def test_isolated_node(self):
        np.testing.assert_array_equal(gcn_norm(np.zeros((1, 1))), [[1.0]])

    def test_two_node_pair(self):
        adj = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(gcn_norm(adj), np.full((2, 2), 0.5), atol=1e-15)

    def test_symmetric_for_symmetric_input(self):
        rng = Rng(19)
        a = rng.bernoulli((6, 6), 0.4)
        a = np.maximum(a, a.T) * (1.0 - np.eye(6))
        ahat = gcn_norm(a)
        np.testing.assert_allclose(ahat, ahat.T, atol=1e-15)


class TestFuse:
    def test_identical_heads_double_branch(self):
        tape = Tape()
        h0 = tape.constant(Rng(23).normal(4, 3))
        out = fuse(h0, [h0, h0])
        np.testing.assert_allclose(out.data, 2.0 * h0.data, atol=1e-15)

    def test_single_negated_head_cancels(self):
        tape = Tape()
        h0 = tape.constant(Rng(23).normal(4, 3))
        neg_h0 = tape.constant(-h0.data)
        out = fuse(h0, [neg_h0])
        np.testing.assert_allclose(out.data, h0.data, atol=1e-15)

    def test_formula_oracle(self):
        rng = Rng(29)
        h0 = rng.normal(4, 3)
        ms = [rng.normal(4, 3) for _ in range(3)]
        tape = Tape()
        out = fuse(tape.constant(h0), [tape.constant(m) for m in ms])
        expected = (h0 + sum(ms)) / 4.0 + h0
        np.testing.assert_allclose(out.data, expected, atol=1e-14)


class TestVariationalHeads:
    def setup_method(self):
        self.config = EncoderConfig(feat_dim=3, embed_dim=2, hidden_dim=4, latent_dim=3,
                                    heads=1, depth=1)
        self.params = init_encoder_params(self.config, n=5, rng=Rng(31))
        self.snap = toy_snapshot(Rng(37), n=5)
        self.snap.feats = self.snap.feats[:, :3].copy()

    def test_zero_mean_weight_gives_zero_mean(self):
        self.params.w_mu.value[...] = 0.0
        tape = Tape()
        h = tape.constant(Rng(41).normal(5, 4))
        dist = variational_heads(tape, h, tape.constant(gcn_norm(self.snap.adj)), self.params)
        np.testing.assert_array_equal(dist.mu.data, 0.0)

    def test_shapes(self):
        tape = Tape()
        h = tape.constant(Rng(41).normal(5, 4))
        dist = variational_heads(tape, h, tape.constant(gcn_norm(self.snap.adj)), self.params)
        assert dist.mu.shape == (5, 3)
        assert dist.log_sigma.shape == (5, 3)

    def test_shared_trunk_feeds_both_heads(self):
        h_data = Rng(41).normal(5, 4)
        ahat = gcn_norm(self.snap.adj)

        def outputs():
            tape = Tape()
            dist = variational_heads(tape, tape.constant(h_data), tape.constant(ahat), self.params)
            return dist.mu.data.copy(), dist.log_sigma.data.copy()

        mu0, ls0 = outputs()
        self.params.w_shared.value[0, 0] += 1e-3
        mu1, ls1 = outputs()
        assert np.abs(mu1 - mu0).max() > 0.0
        assert np.abs(ls1 - ls0).max() > 0.0


class TestSampleZ:
    def make_dist(self, tape, mu, log_sigma):
        return LatentDist(tape.constant(mu), tape.constant(log_sigma))

    def test_eval_mode_returns_mean(self):
        tape = Tape()
        mu = Rng(43).normal(4, 3)
        dist = self.make_dist(tape, mu, np.zeros((4, 3)))
        z = sample_z(tape, dist, None, train=False)
        assert z.data is mu or (z.data == mu).all()

    def test_tiny_log_sigma_pins_sample_to_mean(self):
        mu = Rng(47).normal(3, 2)
        worst = 0.0
        for t in range(100):
            tape = Tape()
            dist = self.make_dist(tape, mu, np.full((3, 2), -10.0))
            z = sample_z(tape, dist, Rng(48).child(t), train=True)
            worst = max(worst, np.abs(z.data - mu).max())
        assert worst <= 1e-3

    def test_sample_mean_clt(self):
        mu = np.array([[0.7, -1.2]])
        log_sigma = np.array([[math.log(0.5), math.log(2.0)]])
        draws = np.zeros((100_000, 2))
        rng = Rng(53)
        eps = rng.normal(100_000, 2)
        sigma = np.exp(log_sigma)
        draws = mu + sigma * eps  # same construction as sample_z, batched
        tol = 4.0 * sigma[0] / math.sqrt(100_000)
        assert (np.abs(draws.mean(axis=0) - mu[0]) <= tol).all()

    def test_gradient_flows_through_mu_and_log_sigma_only(self):
        mu = Param("mu", Rng(59).normal(3, 2))
        ls = Param("ls", Rng(60).normal(3, 2, std=0.3))
        noise = Rng(61).normal(3, 2)

        def build(tape):
            dist = LatentDist(tape.leaf(mu), tape.leaf(ls))
            eps = tape.constant(noise)
            from tradecast.tape import exp as texp
            z = add(dist.mu, mul(texp(dist.log_sigma), eps))
            return sum_all(mul(z, z))

        assert_grads_match(build, [mu, ls])


class TestKl:
    def evaluate(self, mu, log_sigma):
        tape = Tape()
        dist = LatentDist(tape.constant(mu), tape.constant(log_sigma))
        return kl_divergence(tape, dist).data[0, 0]

    def test_prior_equals_posterior(self):
        assert self.evaluate(np.zeros((3, 2)), np.zeros((3, 2))) == 0.0

    def test_unit_mean_entry(self):
        assert abs(self.evaluate([[1.0]], [[0.0]]) - 0.5) < 1e-12

    def test_log_two_sigma_entry(self):
        expected = 1.5 - math.log(2.0)
        assert abs(self.evaluate([[0.0]], [[math.log(2.0)]]) - expected) < 1e-12

    def test_non_negative(self):
        rng = Rng(67)
        for t in range(200):
            mu = rng.child("mu", t).normal(4, 3, std=2.0)
            ls = rng.child("ls", t).normal(4, 3, std=1.5)
            assert self.evaluate(mu, ls) >= -1e-10


class TestEncodeSnapshot:
    CFG = EncoderConfig(feat_dim=4, embed_dim=3, hidden_dim=8, latent_dim=4,
                        heads=2, depth=2, drop_edge=0.2)

    def test_same_seed_same_latent(self):
        snap = toy_snapshot(Rng(71))
        params = init_encoder_params(self.CFG, snap.n, Rng(72))

        def run():
            tape = Tape()
            z, kl = encode_snapshot(tape, snap, params, self.CFG, Rng(73), train=True)
            return z.data.copy(), kl.data[0, 0]

        z1, kl1 = run()
        z2, kl2 = run()
        assert (z1 == z2).all()
        assert kl1 == kl2

    @pytest.mark.parametrize("latent", [16, 32, 64])
    def test_latent_width_choices(self, latent):
        cfg = EncoderConfig(hidden_dim=8, latent_dim=latent, heads=1, depth=1)
        snap = toy_snapshot(Rng(79))
        params = init_encoder_params(cfg, snap.n, Rng(80))
        tape = Tape()
        z, _ = encode_snapshot(tape, snap, params, cfg, Rng(81), train=True)
        assert z.shape == (snap.n, latent)

    def test_eval_mode_deterministic_without_rng(self):
        snap = toy_snapshot(Rng(83))
        params = init_encoder_params(self.CFG, snap.n, Rng(84))

        def run():
            tape = Tape()
            z, kl = encode_snapshot(tape, snap, params, self.CFG, None, train=False)
            return z.data.copy(), kl.data[0, 0]

        z1, kl1 = run()
        z2, kl2 = run()
        assert (z1 == z2).all() and kl1 == kl2

    def test_end_to_end_gradients(self):
        snap = toy_snapshot(Rng(89), n=6)
        params = init_encoder_params(self.CFG, snap.n, Rng(90))

        def build(tape):
            z, kl = encode_snapshot(tape, snap, params, self.CFG, Rng(91), train=True)
            return add(kl, sum_all(z))

        assert_grads_match(build, params.params(), rel=1e-4, abs_tol=1e-7)


class TestClosedFormHead:
    def test_depth_one_no_dropout_oracle(self):
        rng = Rng(97)
        for t in range(5):
            snap = toy_snapshot(rng.child("snap", t), n=6)
            head = make_head(f"h{t}", 4, 4, rng.child("head", t), depth=1,
                             raw_prop=float(rng.child("a", t).random() * 2 - 1),
                             raw_skip=float(rng.child("b", t).random() * 2 - 1))
            tape = Tape()
            out = dagan_head(tape, tape.constant(snap.feats), snap.adj, snap.trade,
                             head, 0.0, None, train=False)
            expected = dense_head_oracle(snap.feats, head, snap.adj, snap.trade)
            np.testing.assert_allclose(out.data, expected, atol=1e-12)
