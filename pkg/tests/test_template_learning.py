"""Template learning: exact E-step, closed-form M-step, end-to-end EM."""

import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from gencap.core_model import PartGeometry, Pose, Template, build_feature_matrix
from gencap.scene_gen import generate_single_object_scenes
from gencap.template_learning import (
    LearningConfig,
    e_step_pose,
    exact_permutation_posterior,
    learn_template,
    m_step_update,
    normalize_template,
    permutation_log_likelihoods,
    permutation_pose_posteriors,
    procrustes_align,
    reestimate_lambda,
    smse,
    template_from_parts,
)
from gencap.template_learning import DegenerateScaleError


def _feature_rows(parts):
    return np.vstack(
        [build_feature_matrix(PartGeometry(px, py)) for px, py in np.atleast_2d(parts)]
    )


class TestNormalizeTemplate:
    def test_square_arithmetic(self):
        parts = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]])
        out = normalize_template(parts)
        # centered corners at distance 1 from the middle of each edge axis
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
        assert (out**2).sum() == pytest.approx(4.0)
        assert np.allclose(np.abs(out), math.sqrt(0.5), atol=1e-12)

    def test_idempotent(self, rng):
        parts = rng.standard_normal((5, 2))
        once = normalize_template(parts)
        assert np.allclose(normalize_template(once), once, atol=1e-12)

    def test_coincident_parts_rejected(self):
        with pytest.raises(ValueError):
            normalize_template(np.ones((3, 2)))


class TestPosePosteriorStructure:
    def test_precision_is_isotropic_for_normalized_templates(self, rng):
        # for a centered template with sum |p|^2 = N the posterior precision
        # is exactly (alpha + beta*lam*N) I4
        for _ in range(20):
            n = int(rng.integers(2, 6))
            parts = normalize_template(rng.standard_normal((n, 2)))
            points = rng.standard_normal((n, 2))
            r = np.full((n, n), 1.0 / n)
            beta, lam, alpha = 1.0, float(rng.uniform(10, 1e4)), float(rng.uniform(0.5, 2))
            _, lam_post = e_step_pose(points, parts, r, beta, lam, alpha)
            assert np.allclose(lam_post, (alpha + beta * lam * n) * np.eye(4), atol=1e-12 * lam * n)

    def test_rotation_block_inverse_identity(self, rng):
        # T^T = s^2 T^-1 for every pose's rotation-scale block
        for _ in range(50):
            pose = Pose.from_vector(rng.standard_normal(4))
            T = pose.rotation_matrix()
            s2 = pose.scale() ** 2
            if s2 < 1e-12:
                continue
            assert np.allclose(T.T, s2 * np.linalg.inv(T), atol=1e-12 * max(1, s2))


class TestExactPosterior:
    def test_matches_direct_gaussian_oracle(self, rng):
        # independent oracle: p(x | perm) is a zero-mean Gaussian with
        # covariance I/(beta lam) + F_perm F_perm^T / alpha
        for trial in range(15):
            n = int(rng.integers(2, 5))
            parts = normalize_template(rng.standard_normal((n, 2)))
            points = rng.standard_normal((n, 2))
            beta, lam, alpha = 0.5, 100.0, 1.3
            perms, logps = permutation_log_likelihoods(points, parts, beta, lam, alpha)
            x = points.reshape(-1)
            F = _feature_rows(parts)
            for perm, lp in zip(perms, logps):
                rows = np.concatenate([[2 * p, 2 * p + 1] for p in perm])
                Fp = F[rows]
                cov = np.eye(2 * n) / (beta * lam) + Fp @ Fp.T / alpha
                want = multivariate_normal.logpdf(x, mean=np.zeros(2 * n), cov=cov)
                assert lp == pytest.approx(want, abs=1e-8)

    def test_evidence_is_logsumexp_of_uniform_mixture(self, rng):
        n = 3
        parts = normalize_template(rng.standard_normal((n, 2)))
        points = rng.standard_normal((n, 2))
        perms, logps = permutation_log_likelihoods(points, parts, 1.0, 50.0, 1.0)
        _, log_evidence = exact_permutation_posterior(points, parts, 1.0, 50.0, 1.0)
        assert log_evidence == pytest.approx(logsumexp(logps) - math.lgamma(n + 1))

    def test_marginals_are_doubly_stochastic(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 6))
            parts = normalize_template(rng.standard_normal((n, 2)))
            points = rng.standard_normal((n, 2))
            r, _ = exact_permutation_posterior(points, parts, 1.0, 1e3, 1.0)
            assert np.abs(r.sum(axis=0) - 1).max() < 1e-12
            assert np.abs(r.sum(axis=1) - 1).max() < 1e-12

    def test_noise_free_concentration(self, triangle_template):
        parts = normalize_template(triangle_template.part_locations())
        pose = Pose.from_vector([0.3, -0.2, 1.4, 0.5])
        points = pose.apply(parts)
        r, _ = exact_permutation_posterior(points, parts, 1.0, 1e4, 1.0)
        assert np.diag(r).min() > 0.999

    def test_identical_parts_split_evenly(self):
        parts = np.array([[1.0, 0.0], [-1.0, 0.0]])
        points = np.array([[2.0, 0.0], [-2.0, 0.0]])
        r, _ = exact_permutation_posterior(points, parts, 1.0, 1e4, 1.0)
        # the two-part template has a half-turn symmetry: both permutations tie
        assert np.allclose(r, 0.5, atol=1e-9)

    def test_enumeration_guard(self):
        parts = np.zeros((9, 2))
        parts[:, 0] = np.arange(9)
        with pytest.raises(ValueError):
            permutation_log_likelihoods(parts, parts, 1.0, 1.0, 1.0)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            permutation_log_likelihoods(np.zeros((2, 2)), np.zeros((3, 2)), 1.0, 1.0, 1.0)

    def test_per_permutation_poses_interpolate(self, triangle_template):
        # each permutation's pose mean reproduces its own assignment
        parts = normalize_template(triangle_template.part_locations())
        pose = Pose.from_vector([0.1, 0.4, 0.9, -0.3])
        points = pose.apply(parts)
        perms, w, mus = permutation_pose_posteriors(points, parts, 1.0, 1e6, 1.0)
        top = int(np.argmax(w))
        assert perms[top] == (0, 1, 2)
        assert np.allclose(mus[top], pose.as_vector(), atol=1e-3)


class TestMStep:
    def test_single_identity_entry_recovers_average(self, rng):
        parts = normalize_template(rng.standard_normal((3, 2)))
        points = parts.copy()
        r = np.eye(3)
        mu = np.array([0.0, 0.0, 1.0, 0.0])
        out = m_step_update(parts, [(points, r, mu)])
        assert np.allclose(out, parts, atol=1e-12)

    def test_undoes_rotation_and_scale(self, rng):
        parts = normalize_template(rng.standard_normal((4, 2)))
        pose = Pose.from_vector([0.5, -1.0, 1.2, 0.8])
        points = pose.apply(parts)
        out = m_step_update(parts, [(points, np.eye(4), pose.as_vector())])
        assert np.allclose(out, parts, atol=1e-9)

    def test_scale_squared_weighting(self, rng):
        # two entries with scales s and 2s: the second carries 4x the weight
        parts = normalize_template(rng.standard_normal((3, 2)))
        pa = parts + np.array([0.3, 0.0])
        pb = parts - np.array([0.3, 0.0])
        mu_a = np.array([0.0, 0.0, 1.0, 0.0])
        mu_b = np.array([0.0, 0.0, 2.0, 0.0])
        out = m_step_update(parts, [(pa, np.eye(3), mu_a), (2.0 * pb, np.eye(3), mu_b)])
        want = normalize_template((1.0 * pa + 4.0 * pb) / 5.0)
        assert np.allclose(out, want, atol=1e-9)

    def test_explicit_weights_multiply_in(self, rng):
        parts = normalize_template(rng.standard_normal((3, 2)))
        pa = parts + np.array([0.2, 0.1])
        pb = parts + np.array([-0.1, 0.3])
        mu = np.array([0.0, 0.0, 1.0, 0.0])
        out = m_step_update(parts, [(pa, np.eye(3), mu, 0.25), (pb, np.eye(3), mu, 0.75)])
        want = normalize_template(0.25 * pa + 0.75 * pb)
        assert np.allclose(out, want, atol=1e-9)

    def test_all_zero_scales_degenerate(self, rng):
        parts = normalize_template(rng.standard_normal((3, 2)))
        mu = np.zeros(4)
        with pytest.raises(DegenerateScaleError):
            m_step_update(parts, [(parts, np.eye(3), mu)])


class TestReestimateLambda:
    def test_known_residual(self):
        parts = np.array([[1.0, 0.0], [-1.0, 0.0]])
        mu = np.array([0.0, 0.0, 1.0, 0.0])
        points = parts + np.array([[0.1, 0.0], [0.1, 0.0]])
        lam = reestimate_lambda(parts, [(points, np.eye(2), mu)])
        # mean squared residual per coordinate = 2 * 0.01 / 4
        assert lam == pytest.approx(1.0 / 0.005)

    def test_zero_residual_hits_cap(self):
        parts = np.array([[1.0, 0.0], [-1.0, 0.0]])
        mu = np.array([0.0, 0.0, 1.0, 0.0])
        lam = reestimate_lambda(parts, [(parts, np.eye(2), mu)])
        assert lam == 1e8

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            reestimate_lambda(np.zeros((2, 2)), [])

    def test_monte_carlo_recovers_noise_precision(self, rng):
        parts = normalize_template(rng.standard_normal((4, 2)))
        sigma = 0.05
        mu = np.array([0.0, 0.0, 1.0, 0.0])
        batch = []
        for _ in range(256):
            noisy = parts + sigma * rng.standard_normal(parts.shape)
            batch.append((noisy, np.eye(4), mu))
        lam = reestimate_lambda(parts, batch)
        assert lam == pytest.approx(1.0 / sigma**2, rel=0.1)


class TestAlignmentAndError:
    def test_procrustes_removes_rotation(self, rng):
        ref = normalize_template(rng.standard_normal((5, 2)))
        theta = 1.1
        R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        aligned = procrustes_align(ref @ R.T, ref)
        assert np.allclose(aligned, ref, atol=1e-9)

    def test_procrustes_never_reflects(self, rng):
        ref = normalize_template(rng.standard_normal((4, 2)))
        flipped = ref * np.array([1.0, -1.0])
        aligned = procrustes_align(flipped, ref)
        # a reflection cannot be undone by a proper rotation
        assert smse(aligned, ref) > 1e-6

    def test_smse_example(self):
        a = np.zeros((2, 2))
        b = np.array([[0.3, 0.0], [0.0, 0.4]])
        assert smse(a, b) == pytest.approx((0.09 + 0.16) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            smse(np.zeros((2, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            procrustes_align(np.zeros((2, 2)), np.zeros((3, 2)))


class TestLearnTemplate:
    def _learned_error(self, template, sigma, seed, n_scenes=64):
        rng = np.random.default_rng(seed)
        scenes = generate_single_object_scenes(template, n_scenes, rng, sigma=sigma)
        parts, trace = learn_template(
            scenes, LearningConfig(n_scenes=n_scenes), rng=np.random.default_rng(seed + 1000)
        )
        truth = normalize_template(template.part_locations())
        return smse(procrustes_align(parts, truth), truth), trace

    @pytest.mark.parametrize("shape", ["triangle", "square"])
    def test_noise_free_recovery_is_exact(self, shape, square_template, triangle_template):
        template = square_template if shape == "square" else triangle_template
        err, trace = self._learned_error(template, 0.0, seed=0)
        assert err < 1e-10
        assert trace.converged

    def test_deterministic(self, triangle_template):
        a, _ = self._learned_error(triangle_template, 0.1, seed=3)
        b, _ = self._learned_error(triangle_template, 0.1, seed=3)
        assert a == b

    def test_mixed_part_counts_rejected(self, square_template, triangle_template):
        rng = np.random.default_rng(0)
        scenes = generate_single_object_scenes(square_template, 2, rng) + \
            generate_single_object_scenes(triangle_template, 2, rng)
        with pytest.raises(ValueError):
            learn_template(scenes, LearningConfig(n_scenes=4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LearningConfig(n_scenes=0)
        with pytest.raises(ValueError):
            LearningConfig(stop_smse=0.0)

    def test_template_from_parts(self):
        t = template_from_parts("learned", np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert isinstance(t, Template)
        assert t.id == "learned"
        assert np.allclose(t.part_locations(), [[0.0, 1.0], [1.0, 0.0]])
