import itertools
import math

import numpy as np
import pytest

from latentdir.directions import init_direction_models
from latentdir.generators import ground_truth_directions, make_synthetic_generator, sample_latents, with_bias
from latentdir.hungarian import linear_sum_assignment
from latentdir.metrics import (EvalError, align_vectors, alignment_score, diversity_score, fingerprints,
                               identifiability_margin, margin_from_divergences, random_alignment_null,
                               rescoring, transfer_eval)


def brute_force(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def global_set(vectors):
    vectors = np.asarray(vectors, float)
    dset = init_direction_models("global", len(vectors), vectors.shape[1])
    for m, v in zip(dset.models, vectors):
        m.params["theta"] = v.copy()
    return dset


class TestHungarian:
    def test_square_matches_brute_force(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            n = int(rng.integers(1, 7))
            cost = rng.random((n, n))
            rows, cols = linear_sum_assignment(cost)
            assert sorted(rows) == list(range(n)) and sorted(cols) == list(range(n))
            assert cost[rows, cols].sum() == pytest.approx(brute_force(cost), abs=1e-12)

    def test_integer_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            cost = rng.integers(0, 3, (n, n)).astype(float)
            rows, cols = linear_sum_assignment(cost)
            assert cost[rows, cols].sum() == brute_force(cost)

    @pytest.mark.parametrize("shape", [(2, 5), (5, 2), (3, 4), (6, 1)])
    def test_rectangular(self, shape):
        rng = np.random.default_rng(shape[0] * 10 + shape[1])
        for _ in range(20):
            cost = rng.random(shape)
            rows, cols = linear_sum_assignment(cost)
            assert len(rows) == min(shape) and len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
            assert cost[rows, cols].sum() == pytest.approx(brute_force(cost), abs=1e-12)

    def test_known_instance(self):
        cost = np.array([[4.0, 1, 3], [2, 0, 5], [3, 2, 2]])
        rows, cols = linear_sum_assignment(cost)
        assert list(cols) == [1, 0, 2]


class TestAlignment:
    def test_exact_truth(self):
        V = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 6)))[0][:3]
        rep = align_vectors(V, V)
        assert rep.mean_cos == pytest.approx(1.0, abs=1e-12)
        assert rep.assignment == {0: 0, 1: 1, 2: 2}

    def test_signs_and_order_ignored(self):
        V = np.linalg.qr(np.random.default_rng(1).standard_normal((6, 6)))[0][:4]
        perm = [2, 0, 3, 1]
        learned = V[perm] * np.array([-1, 1, -1, -1])[:, None]
        rep = align_vectors(learned, V)
        assert rep.mean_cos == pytest.approx(1.0, abs=1e-12)
        assert rep.assignment == {i: p for i, p in enumerate(perm)}

    def test_mean_invariant_to_flips_and_reorderings(self, rng):
        L, T = rng.standard_normal((5, 7)), rng.standard_normal((4, 7))
        base = align_vectors(L, T).mean_cos
        for _ in range(20):
            Lp = L[rng.permutation(5)] * rng.choice([-1, 1], (5, 1))
            Tp = T[rng.permutation(4)] * rng.choice([-1, 1], (4, 1))
            assert align_vectors(Lp, Tp).mean_cos == pytest.approx(base, abs=1e-12)

    def test_fewer_learned_than_truth(self):
        V = np.eye(5)
        rep = align_vectors(V[[3, 1]], V)
        assert rep.mean_cos == pytest.approx(1.0)
        assert rep.unmatched == [] and rep.unmatched_truth == [0, 2, 4]

    def test_more_learned_than_truth(self):
        V = np.eye(4)
        rep = align_vectors(V, V[:2])
        assert rep.unmatched == [2, 3]

    def test_probe_requirement(self, synth):
        dset = global_set(ground_truth_directions(synth))
        with pytest.raises(EvalError, match="32"):
            alignment_score(dset, ground_truth_directions(synth), np.zeros((10, 8)))

    def test_truth_set_scores_one(self, synth, rng):
        V = ground_truth_directions(synth)
        rep = alignment_score(global_set(-V[::-1]), V, rng.standard_normal((32, 8)))
        assert rep.mean_cos == pytest.approx(1.0, abs=1e-12)

    def test_conditional_fingerprint(self, rng):
        dset = init_direction_models("linear", 2, 3)
        for m in dset.models:
            m.params["M"] = np.zeros((3, 3))
        dset.models[0].params["M"][0, :] = 1.0  # M z = (sum z) e1
        dset.models[1].params["M"][2, 2] = 1.0
        probes = np.abs(rng.standard_normal((64, 3))) + 0.1
        fp, spread = fingerprints(dset, probes, 1.0)
        np.testing.assert_allclose(fp, [[1, 0, 0], [0, 0, 1]], atol=1e-12)
        np.testing.assert_allclose(spread, 0.0, atol=1e-20)


class TestDiversity:
    def test_identical(self):
        assert diversity_score(global_set([[1.0, 2, 3]] * 4)) == pytest.approx(1.0)

    def test_orthonormal(self):
        assert diversity_score(global_set(np.eye(5))) == pytest.approx(0.0, abs=1e-15)

    def test_sixty_degrees(self):
        a = [np.array([math.cos(t), math.sin(t)]) for t in (0, math.pi / 3, 2 * math.pi / 3)]
        assert diversity_score(global_set(a)) == pytest.approx(0.5, abs=1e-12)

    def test_rotation_invariance(self, rng):
        V = rng.standard_normal((6, 5))
        Q = np.linalg.qr(rng.standard_normal((5, 5)))[0]
        assert diversity_score(global_set(V @ Q.T)) == pytest.approx(diversity_score(global_set(V)), abs=1e-12)


class TestMargin:
    def test_identical_divergences(self):
        assert margin_from_divergences(np.ones((3, 2, 4))) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_batch_constant(self):
        f = np.repeat(np.eye(4)[None, :3] * 2.5, 5, axis=0)
        assert margin_from_divergences(f) == pytest.approx(1.0, abs=1e-12)

    def test_range(self, rng):
        for _ in range(20):
            assert -2 <= margin_from_divergences(rng.standard_normal((4, 3, 5))) <= 2

    def test_zero_divergence_rejected(self):
        with pytest.raises(EvalError):
            margin_from_divergences(np.zeros((2, 2, 3)))

    def test_truth_beats_random(self, synth, rng):
        batch = sample_latents(rng, 16, 8, 1.0)
        truth = identifiability_margin(synth, global_set(ground_truth_directions(synth)), batch)
        rand = identifiability_margin(synth, init_direction_models("global", 4, 8, seed=0), batch)
        assert truth > rand


class TestRescoring:
    def test_truth_direction_is_monotone(self, synth, rng):
        V = ground_truth_directions(synth)
        dset = global_set(V)
        probes = sample_latents(rng, 100, 8, 1.0)
        for k in range(4):
            rep = rescoring(synth, dset, k, [-3, 0, 3], probes)
            assert rep.factor == k and rep.monotone_fraction == 1.0 and rep.sign == 1
            np.testing.assert_array_equal(rep.scores[:, 1], rep.baseline)

    def test_flipped_direction_decreases(self, synth, rng):
        dset = global_set(-ground_truth_directions(synth))
        rep = rescoring(synth, dset, 2, [-3, -1.5, 0, 1.5, 3], sample_latents(rng, 50, 8, 1.0))
        assert rep.sign == -1 and rep.monotone_fraction == 1.0

    def test_baseline_is_unedited(self, synth, rng):
        probes = sample_latents(rng, 40, 8, 1.0)
        rep = rescoring(synth, init_direction_models("global", 4, 8, seed=2), 0, [-1, 0, 1], probes)
        from latentdir.generators import features

        np.testing.assert_array_equal(rep.baseline, features(synth, probes)[:, rep.factor])

    def test_probe_order_invariance(self, synth, rng):
        dset = init_direction_models("global", 4, 8, seed=5)
        probes = sample_latents(rng, 60, 8, 1.0)
        a = rescoring(synth, dset, 1, [-3, -1.5, 0, 1.5, 3], probes, factor=0)
        b = rescoring(synth, dset, 1, [-3, -1.5, 0, 1.5, 3], probes[rng.permutation(60)], factor=0)
        assert a.monotone_fraction == b.monotone_fraction

    @pytest.mark.parametrize("grid", [[0, 1, 2], [-1, 1], [-2, 0, 1]])
    def test_grid_must_be_symmetric(self, synth, grid):
        with pytest.raises(EvalError, match="symmetric"):
            rescoring(synth, global_set(np.eye(8)[:4]), 0, grid, np.zeros((40, 8)), factor=0)

    def test_unassigned_direction(self, synth, rng):
        dset = init_direction_models("global", 6, 8, seed=1)
        report = alignment_score(dset, ground_truth_directions(synth), sample_latents(rng, 32, 8, 1.0))
        k = report.unmatched[0]
        with pytest.raises(EvalError, match="not assigned"):
            rescoring(synth, dset, k, [-1, 0, 1], sample_latents(rng, 32, 8, 1.0))


class TestTransfer:
    def test_same_generator_matches_alignment(self, synth, rng):
        dset = init_direction_models("global", 4, 8, seed=3)
        probes = sample_latents(rng, 32, 8, 1.0)
        a = transfer_eval(dset, synth, probes=probes)
        b = alignment_score(dset, ground_truth_directions(synth), probes)
        assert a == b

    def test_shifted_bias_identical(self, synth, rng):
        dset = init_direction_models("global", 4, 8, seed=3)
        probes = sample_latents(rng, 32, 8, 1.0)
        a = transfer_eval(dset, synth, probes=probes)
        b = transfer_eval(dset, with_bias(synth, 0.3), probes=probes)
        assert a.to_dict() == b.to_dict()

    def test_latent_dim_mismatch(self, rng):
        dset = init_direction_models("global", 4, 8)
        with pytest.raises(EvalError, match="latent dimension"):
            transfer_eval(dset, make_synthetic_generator(0, 6, 4), probes=rng.standard_normal((32, 6)))

    def test_null_statistics(self):
        mean, std = random_alignment_null(4, 4, 8, trials=400, seed=0)
        assert 0.3 < mean < 0.7 and 0 < std < 0.2
        assert random_alignment_null(4, 4, 8, trials=50, seed=3) == random_alignment_null(4, 4, 8, trials=50, seed=3)
