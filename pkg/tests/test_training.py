"""Loss and metric hand cases, brute-force AUC/AP oracles, and the
training-loop determinism and protocol contracts."""

import math

import numpy as np
import pytest

from tradecast.encoder import EncoderConfig
from tradecast.graphdata import ConfigError, synth_generate
from tradecast.rng import Rng
from tradecast.tape import Tape
from tradecast.training import (
    EvaluationError,
    TrainConfig,
    aggregate_runs,
    ap_score,
    auc_score,
    evaluate,
    iter_training,
    loss_total,
    run_seeds,
    static_baseline_run,
    symmetrize_target,
    train_run,
    window_sweep,
)

SMALL = TrainConfig(
    epochs=3, window=3, seeds=(1000, 1001),
    encoder=EncoderConfig(hidden_dim=8, latent_dim=4, heads=2, depth=1),
)


def small_dataset(seed=5, n=14, years=7):
    return synth_generate(Rng(seed), n=n, s_years=years, p_backbone=0.25, p_churn=0.1)


def brute_force_auc(pos, neg):
    hits = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                hits += 1.0
            elif p == q:
                hits += 0.5
    return hits / (len(pos) * len(neg))


def brute_force_ap(pos, neg):
    scored = [(s, 0, 1) for s in pos] + [(s, 1, 0) for s in neg]
    # descending score; candidate-list position breaks ties (positives first)
    indexed = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    tp, total = 0, 0.0
    for rank, i in enumerate(indexed, start=1):
        if scored[i][2] == 1:
            tp += 1
            total += tp / rank
    return total / len(pos)


class TestSymmetrize:
    def test_directed_edge_becomes_undirected(self):
        adj = np.zeros((3, 3))
        adj[0, 1] = 1.0
        a_sym, mask = symmetrize_target(adj)
        assert a_sym[0, 1] == 1.0 and a_sym[1, 0] == 1.0

    def test_symmetric_unchanged(self):
        adj = np.array([[0.0, 1.0], [1.0, 0.0]])
        a_sym, _ = symmetrize_target(adj)
        np.testing.assert_array_equal(a_sym, adj)

    def test_mask_size(self):
        _, mask = symmetrize_target(np.zeros((7, 7)))
        assert mask.sum() == 7 * 6 / 2
        assert np.all(np.tril(mask) == 0.0)


class TestLossTotal:
    def test_zero_logits_give_log_two(self):
        tape = Tape()
        logits = tape.constant(np.zeros((4, 4)))
        a_sym, _ = symmetrize_target((Rng(3).bernoulli((4, 4), 0.5)))
        loss = loss_total(tape, logits, a_sym, [], kl_weight=0.0)
        assert abs(loss.data[0, 0] - math.log(2.0)) < 1e-12

    def test_perfect_logits_vanish(self):
        adj = Rng(5).bernoulli((6, 6), 0.4) * (1.0 - np.eye(6))
        a_sym, _ = symmetrize_target(adj)
        logits_data = np.where(a_sym == 1.0, 20.0, -20.0)
        tape = Tape()
        loss = loss_total(tape, tape.constant(logits_data), a_sym, [], kl_weight=0.0)
        assert loss.data[0, 0] <= 1e-8

    def test_zero_kl_weight_ignores_kl_terms(self):
        tape = Tape()
        logits = tape.constant(Rng(7).normal(4, 4))
        a_sym, _ = symmetrize_target(Rng(8).bernoulli((4, 4), 0.5))
        small = loss_total(tape, logits, a_sym, [tape.constant([[1.0]])], kl_weight=0.0)
        huge = loss_total(tape, logits, a_sym, [tape.constant([[1e6]])], kl_weight=0.0)
        assert small.data[0, 0] == huge.data[0, 0]

    def test_kl_terms_averaged(self):
        tape = Tape()
        logits = tape.constant(np.zeros((3, 3)))
        a_sym = np.zeros((3, 3))
        kls = [tape.constant([[2.0]]), tape.constant([[4.0]])]
        loss = loss_total(tape, logits, a_sym, kls, kl_weight=0.5)
        expected = math.log(2.0) + 0.5 * 3.0
        assert abs(loss.data[0, 0] - expected) < 1e-12

    def test_non_negative_and_permutation_invariant(self):
        rng = Rng(11)
        logits_data = rng.normal(6, 6)
        logits_data = logits_data + logits_data.T
        a_sym, _ = symmetrize_target(rng.bernoulli((6, 6), 0.4) * (1 - np.eye(6)))
        perm = np.asarray(Rng(12).choice_without_replacement(6, 6))
        tape = Tape()
        base = loss_total(tape, tape.constant(logits_data), a_sym, [], 0.0)
        permuted = loss_total(tape, tape.constant(logits_data[np.ix_(perm, perm)]),
                              a_sym[np.ix_(perm, perm)], [], 0.0)
        assert base.data[0, 0] >= 0.0
        assert abs(base.data[0, 0] - permuted.data[0, 0]) < 1e-12


class TestMetricOracles:
    def test_auc_hand_case(self):
        assert auc_score(np.array([0.9, 0.7]), np.array([0.8, 0.2])) == 0.75

    def test_ap_hand_case(self):
        # descending labels [1, 0, 1] -> 1*1/1 weighted into two positives
        ap = ap_score(np.array([0.9, 0.5]), np.array([0.7]))
        assert abs(ap - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12

    def test_perfect_separation(self):
        pos = np.array([2.0, 3.0, 4.0])
        neg = np.array([-1.0, 0.0, 1.0])
        assert auc_score(pos, neg) == 1.0
        assert ap_score(pos, neg) == 1.0

    def test_ties_count_half(self):
        assert auc_score(np.array([1.0]), np.array([1.0])) == 0.5

    def test_against_brute_force(self):
        rng = Rng(13)
        for trial in range(200):
            t_rng = rng.child(trial)
            n_pos = int(t_rng.child("p").integers(1, 51))
            n_neg = int(t_rng.child("n").integers(1, 61))
            # quantized scores force plenty of exact ties
            pos = np.round(t_rng.child("ps").random(n_pos) * 8) / 8.0
            neg = np.round(t_rng.child("ns").random(n_neg) * 8) / 8.0
            assert abs(auc_score(pos, neg) - brute_force_auc(pos, neg)) <= 1e-12
            assert abs(ap_score(pos, neg) - brute_force_ap(pos, neg)) <= 1e-12

    def test_random_scores_near_half(self):
        rng = Rng(17)
        aucs = []
        for trial in range(1000):
            t_rng = rng.child(trial)
            pos = t_rng.child("p").random(20)
            neg = t_rng.child("n").random(20)
            aucs.append(auc_score(pos, neg))
        assert abs(np.mean(aucs) - 0.5) <= 0.05


class TestEvaluate:
    def setup_method(self):
        adj = Rng(19).bernoulli((10, 10), 0.15) * (1.0 - np.eye(10))
        self.a_sym, self.mask = symmetrize_target(adj)
        self.scores = Rng(20).normal(10, 10)
        self.scores = self.scores + self.scores.T

    def test_deterministic_given_rng_seed(self):
        r1 = evaluate(self.scores, self.a_sym, self.mask, Rng(7).child("negatives"))
        r2 = evaluate(self.scores, self.a_sym, self.mask, Rng(7).child("negatives"))
        assert r1 == r2

    def test_ignores_diagonal_and_lower_triangle(self):
        base = evaluate(self.scores, self.a_sym, self.mask, Rng(7).child("negatives"))
        poisoned = self.scores.copy()
        poisoned[np.tril_indices(10)] = 1e9
        after = evaluate(poisoned, self.a_sym, self.mask, Rng(7).child("negatives"))
        assert base == after

    def test_no_positives_raises(self):
        with pytest.raises(EvaluationError):
            evaluate(self.scores, np.zeros((10, 10)), self.mask, Rng(7))

    def test_not_enough_negatives_raises(self):
        a_sym, mask = symmetrize_target(np.ones((4, 4)) - np.eye(4))
        with pytest.raises(EvaluationError):
            evaluate(self.scores[:4, :4], a_sym, mask, Rng(7))


class TestAggregate:
    def make(self, auc, ap=None, seed=0):
        from tradecast.training import RunResult
        ap = auc if ap is None else ap
        return RunResult(seed, auc, ap, [0.1], [auc], [ap])

    def test_single_run(self):
        report = aggregate_runs([self.make(0.9)])
        assert report.auc_mean == 90.0
        assert report.auc_std == 0.0
        assert "90.00 ± 0.00" in report.summary()

    def test_two_point_sample_std(self):
        report = aggregate_runs([self.make(0.90, seed=0), self.make(0.92, seed=1)])
        assert abs(report.auc_mean - 91.0) < 1e-12
        assert abs(report.auc_std - math.sqrt(2.0)) < 1e-12
        assert "91.00 ± 1.41" in report.summary()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_runs([])


class TestTrainRun:
    def test_same_seed_bit_identical(self):
        ds = small_dataset()
        a = train_run(ds, SMALL, 1000)
        b = train_run(ds, SMALL, 1000)
        assert a.loss_curve == b.loss_curve
        assert a.auc_curve == b.auc_curve
        assert a.ap_curve == b.ap_curve

    def test_curve_lengths_match_epochs(self):
        ds = small_dataset()
        result = train_run(ds, SMALL, 1000)
        assert len(result.loss_curve) == SMALL.epochs
        assert len(result.auc_curve) == SMALL.epochs

    def test_loss_decreases_over_training(self):
        ds = small_dataset()
        cfg = TrainConfig(epochs=30, window=3, seeds=(1000,),
                          encoder=SMALL.encoder)
        result = train_run(ds, cfg, 1000)
        assert result.loss_curve[-1] < result.loss_curve[0]

    def test_insufficient_snapshots(self):
        ds = small_dataset(years=4)
        with pytest.raises(ConfigError):
            train_run(ds, TrainConfig(epochs=1, window=3, encoder=SMALL.encoder), 1000)

    def test_metrics_in_range(self):
        ds = small_dataset()
        result = train_run(ds, SMALL, 1001)
        assert 0.0 <= result.final_auc <= 1.0
        assert 0.0 <= result.final_ap <= 1.0

    def test_gru_ablation_differs_from_tama(self):
        ds = small_dataset()
        tama = train_run(ds, SMALL, 1000, model="tama")
        gru = train_run(ds, SMALL, 1000, model="gru")
        assert tama.loss_curve != gru.loss_curve

    def test_unknown_model_rejected(self):
        with pytest.raises(ConfigError):
            train_run(small_dataset(), SMALL, 1000, model="lstm")

    def test_persist_memory_flag_changes_eval(self):
        ds = small_dataset(years=9)
        cfg_off = TrainConfig(epochs=2, window=3, seeds=(1000,), encoder=SMALL.encoder)
        cfg_on = TrainConfig(epochs=2, window=3, seeds=(1000,), encoder=SMALL.encoder,
                             persist_memory=True)
        off = train_run(ds, cfg_off, 1000)
        on = train_run(ds, cfg_on, 1000)
        assert off.loss_curve == on.loss_curve  # training untouched
        assert off.auc_curve != on.auc_curve or off.ap_curve != on.ap_curve


class TestStaticBaseline:
    def test_uses_fewer_parameters(self):
        from tradecast.encoder import init_encoder_params
        from tradecast.tama import init_tama_params
        enc = init_encoder_params(SMALL.encoder, 14, Rng(1))
        tama = init_tama_params(SMALL.encoder.latent_dim, Rng(2))
        n_static = sum(p.value.size for p in enc.params())
        n_dynamic = n_static + sum(p.value.size for p in tama.params())
        assert n_static < n_dynamic

    def test_runs_and_yields_curves(self):
        ds = small_dataset()
        result = static_baseline_run(ds, SMALL, 1000)
        assert len(result.auc_curve) == SMALL.epochs
        assert 0.0 <= result.final_auc <= 1.0

    def test_deterministic(self):
        ds = small_dataset()
        a = static_baseline_run(ds, SMALL, 1000)
        b = static_baseline_run(ds, SMALL, 1000)
        assert a.loss_curve == b.loss_curve


class TestRunSeeds:
    def test_job_count_does_not_change_results(self):
        ds = small_dataset()
        seq = run_seeds(ds, SMALL, "tama", jobs=1)
        par = run_seeds(ds, SMALL, "tama", jobs=2)
        assert [r.seed for r in seq] == [r.seed for r in par]
        for a, b in zip(seq, par):
            assert a.loss_curve == b.loss_curve


class TestWindowSweep:
    def test_rows_and_skips(self):
        ds = small_dataset(years=7)  # windows up to 5 feasible (need S - w >= 2)
        cfg = TrainConfig(epochs=2, window=3, seeds=(1000,), encoder=SMALL.encoder)
        rows, notices = window_sweep(ds, cfg, range(3, 9))
        assert [r["w"] for r in rows] == [3, 4, 5]
        assert len(notices) == 3
        for row in rows:
            assert set(row) == {"w", "auc_mean", "auc_std", "ap_mean", "ap_std"}
