import numpy as np
import pytest

from decquic.errors import ConfigError
from decquic.losses import (
    K_CLASSES,
    LossParams,
    class_weights,
    combined_loss,
    combined_loss_batch,
    distance_loss,
    focal_loss,
    ordinal_loss,
    ordinal_targets,
    softmax,
)

FD_STEP = 1e-5
FD_TOL = 1e-4


def fd_grad(fn, logits, step=FD_STEP):
    """Central finite differences of a scalar loss over the logit vector."""
    g = np.zeros_like(logits)
    for i in range(logits.size):
        up = logits.copy()
        up[i] += step
        down = logits.copy()
        down[i] -= step
        g[i] = (fn(up) - fn(down)) / (2 * step)
    return g


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def random_case(rng, scale=4.0):
    logits = rng.uniform(-scale, scale, size=K_CLASSES)
    y = int(rng.integers(0, K_CLASSES))
    return logits, y


class TestClassWeights:
    def test_uniform_histogram_unit_weights(self):
        np.testing.assert_allclose(class_weights(np.full(K_CLASSES, 10)), 1.0)

    def test_inverse_frequency_ratio(self):
        hist = np.zeros(K_CLASSES, dtype=int)
        hist[0], hist[1] = 75, 25
        w = class_weights(hist)
        assert w[1] / w[0] == pytest.approx(3.0)

    def test_skewed_histogram_weights_minority_more(self):
        # roughly 75% of the mass on classes 0..2, long tail beyond
        hist = np.array([400, 200, 150] + [20] * 10 + [6] * 6 + [7] * 2)
        assert hist[:3].sum() / hist.sum() == pytest.approx(0.75)
        w = class_weights(hist)
        assert w[10:].min() > w[:3].max()

    def test_zero_count_gets_max_weight(self):
        hist = np.zeros(K_CLASSES, dtype=int)
        hist[0], hist[5] = 90, 10
        w = class_weights(hist)
        assert w[7] == w[5] == w.max()

    def test_mean_is_one(self, rng):
        hist = rng.integers(0, 50, size=K_CLASSES)
        hist[0] = 1
        assert class_weights(hist).mean() == pytest.approx(1.0)

    def test_all_zero_rejected(self):
        with pytest.raises(ConfigError):
            class_weights(np.zeros(K_CLASSES))


class TestFocal:
    def test_gamma_zero_equals_cross_entropy(self, rng):
        params = LossParams(gamma=0.0)
        for _ in range(20):
            logits, y = random_case(rng)
            value, _ = focal_loss(logits, y, params)
            assert value == pytest.approx(-np.log(softmax(logits)[y]), abs=1e-9)

    def test_well_classified_vanishes(self):
        logits = np.full(K_CLASSES, -20.0)
        logits[4] = 20.0
        value, grad = focal_loss(logits, 4, LossParams(gamma=2.0))
        assert value < 1e-12
        assert np.abs(grad).max() < 1e-6

    def test_gradient_vs_finite_differences(self, rng):
        params = LossParams(gamma=2.0)
        worst = 0.0
        for _ in range(100):
            logits, y = random_case(rng)
            _, grad = focal_loss(logits, y, params)
            numeric = fd_grad(lambda z: focal_loss(z, y, params)[0], logits)
            worst = max(worst, rel_err(grad, numeric))
        assert worst < FD_TOL

    def test_nonfinite_logits_rejected(self):
        bad = np.zeros(K_CLASSES)
        bad[3] = np.nan
        with pytest.raises(ConfigError):
            focal_loss(bad, 0, LossParams())


class TestDistance:
    def test_one_hot_at_label_zero_loss(self):
        logits = np.full(K_CLASSES, -40.0)
        logits[7] = 40.0
        value, _ = distance_loss(logits, 7)
        assert value < 1e-12

    def test_uniform_probabilities_y0(self):
        value, _ = distance_loss(np.zeros(K_CLASSES), 0)
        assert value == pytest.approx(10.0, abs=1e-12)

    def test_gradient_vs_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            logits, y = random_case(rng)
            _, grad = distance_loss(logits, y)
            numeric = fd_grad(lambda z: distance_loss(z, y)[0], logits)
            worst = max(worst, rel_err(grad, numeric))
        assert worst < FD_TOL

    def test_mass_shift_monotonicity(self, rng):
        # moving mass to a farther class strictly increases the loss
        for _ in range(30):
            p = rng.dirichlet(np.ones(K_CLASSES) * 2.0)
            p = np.clip(p, 1e-6, None)
            p /= p.sum()
            y = int(rng.integers(0, K_CLASSES))
            i, j = rng.choice(K_CLASSES, size=2, replace=False)
            if abs(i - y) > abs(j - y):
                i, j = j, i  # ensure j is farther from y than i
            if abs(i - y) == abs(j - y):
                continue
            eps = 0.5 * p[i]
            q = p.copy()
            q[i] -= eps
            q[j] += eps
            before, _ = distance_loss(np.log(p), y)
            after, _ = distance_loss(np.log(q), y)
            assert after > before


class TestOrdinal:
    def test_targets_y0(self):
        np.testing.assert_array_equal(ordinal_targets(0), [1.0] + [0.0] * 20)

    def test_targets_y20(self):
        np.testing.assert_array_equal(ordinal_targets(20), np.ones(K_CLASSES))

    def test_saturated_correct_logits(self):
        for y in (0, 7, 20):
            logits = np.where(np.arange(K_CLASSES) <= y, 40.0, -40.0)
            value, _ = ordinal_loss(logits, y)
            assert value < 1e-15

    def test_gradient_vs_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            logits, y = random_case(rng)
            _, grad = ordinal_loss(logits, y)
            numeric = fd_grad(lambda z: ordinal_loss(z, y)[0], logits)
            worst = max(worst, rel_err(grad, numeric))
        assert worst < FD_TOL

    def test_cost_grows_with_rank_distance(self):
        # saturated rank-consistent logits predicting class m
        for y in (0, 5, 20):
            costs = []
            for m in range(K_CLASSES):
                logits = np.where(np.arange(K_CLASSES) <= m, 40.0, -40.0)
                costs.append(ordinal_loss(logits, y)[0])
            for m in range(K_CLASSES - 1):
                d_m = abs(m - y)
                d_next = abs(m + 1 - y)
                if d_next > d_m:
                    assert costs[m + 1] > costs[m]
                elif d_next < d_m:
                    assert costs[m + 1] < costs[m]


class TestCombined:
    def test_alpha_one_is_focal(self, rng):
        params = LossParams(alpha=1.0, beta=0.4, gamma=2.0)
        logits, y = random_case(rng)
        out = combined_loss(logits, y, params)
        assert out.total == pytest.approx(out.fl, abs=1e-12)

    def test_alpha_zero_beta_one_is_ordinal(self, rng):
        params = LossParams(alpha=0.0, beta=1.0)
        logits, y = random_case(rng)
        out = combined_loss(logits, y, params)
        assert out.total == pytest.approx(out.orl, abs=1e-12)

    def test_alpha_zero_beta_zero_is_distance(self, rng):
        params = LossParams(alpha=0.0, beta=0.0)
        logits, y = random_case(rng)
        out = combined_loss(logits, y, params)
        assert out.total == pytest.approx(out.dbl, abs=1e-12)

    def test_paper_optimum_mixture(self, rng):
        # alpha=0.7, beta=0.4, gamma=2: hand-composed mixture must match
        params = LossParams(alpha=0.7, beta=0.4, gamma=2.0)
        for _ in range(20):
            logits, y = random_case(rng)
            out = combined_loss(logits, y, params)
            expected = 0.7 * out.fl + 0.3 * (0.4 * out.orl + 0.6 * out.dbl)
            assert out.total == pytest.approx(expected, abs=1e-12)

    def test_gradient_vs_finite_differences(self, rng):
        params = LossParams(alpha=0.7, beta=0.4, gamma=2.0)
        worst = 0.0
        for _ in range(100):
            logits, y = random_case(rng)
            out = combined_loss(logits, y, params)
            numeric = fd_grad(lambda z: combined_loss(z, y, params).total, logits)
            worst = max(worst, rel_err(out.grad, numeric))
        assert worst < FD_TOL

    def test_batch_averages_samples(self, rng):
        params = LossParams(alpha=0.5, beta=0.6, gamma=1.0)
        logits = rng.uniform(-3, 3, size=(8, K_CLASSES))
        ys = rng.integers(0, K_CLASSES, size=8)
        batch = combined_loss_batch(logits, ys, params)
        singles = [combined_loss(logits[i], int(ys[i]), params) for i in range(8)]
        assert batch.total == pytest.approx(np.mean([s.total for s in singles]), abs=1e-12)
        for i, s in enumerate(singles):
            np.testing.assert_allclose(batch.grad[i], s.grad / 8, atol=1e-15)

    def test_total_identity_invariant(self, rng):
        for _ in range(50):
            a, b, g = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 3)
            params = LossParams(alpha=a, beta=b, gamma=g)
            logits, y = random_case(rng)
            out = combined_loss(logits, y, params)
            expected = a * out.fl + (1 - a) * (b * out.orl + (1 - b) * out.dbl)
            assert out.total == pytest.approx(expected, abs=1e-12)


def test_params_validation():
    with pytest.raises(ConfigError):
        LossParams(alpha=1.5)
    with pytest.raises(ConfigError):
        LossParams(gamma=-1.0)
    with pytest.raises(ConfigError):
        LossParams(class_weights=np.zeros(K_CLASSES))
