from fractions import Fraction

import numpy as np
import pytest

from mrdebias import propensity as prop
from mrdebias.data import BiasLevelSpec, RatingDataset, generate_semi_synthetic, make_low_rank_ratings
from mrdebias.errors import MissingMarSampleError, OracleUnavailableError

from conftest import toy_dataset


def _toy_train():
    # 3x4 grid, observed ratings 1, 3, 3, 3
    return toy_dataset([(0, 0, 1), (0, 1, 3), (1, 2, 3), (2, 3, 3)], shape=(3, 4), scale=(1, 3))


def _toy_mar():
    return toy_dataset([(0, 2, 1), (1, 0, 2), (2, 0, 3), (2, 1, 3)], shape=(3, 4), scale=(1, 3))


class TestNaiveBayes:
    def test_bayes_arithmetic(self):
        assert prop.naive_bayes_propensity(0.5, 0.2, 0.25) == pytest.approx(0.4)

    def test_independence_gives_constant(self):
        table = prop.naive_bayes_propensity([0.1, 0.3, 0.6], 0.2, [0.1, 0.3, 0.6])
        np.testing.assert_allclose(table, 0.2)

    def test_hand_counts_with_smoothing(self):
        model = prop.fit_naive_bayes(_toy_train(), _toy_mar())
        F = Fraction
        p_r_obs = [F(2, 7), F(1, 7), F(4, 7)]  # counts 1,0,3 plus one, over 4 + 3
        p_obs = F(5, 14)  # (4 + 1) / (12 + 2)
        p_r = [F(2, 7), F(2, 7), F(3, 7)]  # MAR counts 1,1,2
        expected = [a * p_obs / b for a, b in zip(p_r_obs, p_r)]
        np.testing.assert_allclose(model.params["p_obs_given_rating"], [float(x) for x in expected], rtol=1e-15)
        train = _toy_train()
        assert prop.estimate(model, train, 0, 0) == pytest.approx(float(expected[0]), rel=1e-15)
        assert prop.estimate(model, train, 0, 1) == pytest.approx(float(expected[2]), rel=1e-15)
        mixture = sum(a * b for a, b in zip(p_r, expected))
        assert prop.estimate(model, train, 1, 1) == pytest.approx(float(mixture), rel=1e-15)

    def test_uniform_marginal_matches_uniform_variant(self):
        mar = toy_dataset([(0, 0, 1), (1, 1, 2), (2, 2, 3)], shape=(3, 4), scale=(1, 3))
        a = prop.fit_naive_bayes(_toy_train(), mar)
        b = prop.fit_naive_bayes_uniform(_toy_train())
        np.testing.assert_allclose(a.params["p_obs_given_rating"], b.params["p_obs_given_rating"], rtol=0, atol=1e-12)

    def test_uniform_observed_gives_p_obs(self):
        train = toy_dataset([(0, 0, 1), (1, 1, 2), (2, 2, 3)], shape=(3, 4), scale=(1, 3))
        model = prop.fit_naive_bayes_uniform(train)
        np.testing.assert_allclose(model.params["p_obs_given_rating"], model.params["p_obs"], rtol=1e-14)

    def test_missing_mar_sample(self):
        with pytest.raises(MissingMarSampleError):
            prop.fit_naive_bayes(_toy_train(), None)
        empty = toy_dataset([], shape=(3, 4), scale=(1, 3))
        with pytest.raises(MissingMarSampleError):
            prop.fit_naive_bayes(_toy_train(), empty)

    def test_recovers_rating_only_exposure(self):
        base = make_low_rank_ratings(150, 150, 0.3, seed=3)
        syn = generate_semi_synthetic(base, BiasLevelSpec(2, 1.5, 0.2), seed=4)
        y, p = syn.full_ratings, syn.true_propensities
        u, i = np.nonzero(np.ones_like(y))
        population = RatingDataset(150, 150, u, i, y[u, i], syn.rating_scale)
        estimates = []
        for t in range(60):
            masked = syn.with_mask(np.random.default_rng(t).random(y.shape) < p)
            estimates.append(prop.fit_naive_bayes(masked, population).params["p_obs_given_rating"])
        est = np.array(estimates)
        truth = np.array([p[y == r][0] for r in (1, 2, 3, 4, 5)])
        se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
        assert np.all(np.abs(est.mean(axis=0) - truth) <= 3 * se)


class TestOtherKinds:
    def test_user_frequency_smoothing(self):
        ds = toy_dataset([(1, k, 3) for k in range(300)], shape=(2, 300))
        model = prop.fit_user_frequency(ds, clip_floor=1e-4)
        assert prop.estimate(model, ds, 0, 5) == pytest.approx(1 / 302)
        assert prop.estimate(model, ds, 1, 5) == pytest.approx(301 / 302)

    def test_equal_counts_equal_propensity(self):
        ds = toy_dataset([(0, 0, 3), (1, 2, 4)], shape=(2, 3))
        model = prop.fit_user_frequency(ds)
        assert prop.estimate(model, ds, 0, 1) == prop.estimate(model, ds, 1, 1)

    def test_constant(self):
        ds = toy_dataset([(0, 0, 3)])
        np.testing.assert_array_equal(prop.estimate_matrix(prop.constant_model(0.3), ds), 0.3)

    def test_clip_floor(self):
        ds = toy_dataset([(0, 0, 3)])
        assert prop.estimate(prop.constant_model(1e-6), ds, 0, 0) == 0.05

    def test_oracle(self, small_synthetic):
        est = prop.estimate_matrix(prop.oracle_model(clip_floor=1e-9), small_synthetic)
        np.testing.assert_array_equal(est, small_synthetic.true_propensities)

    def test_oracle_unavailable(self):
        with pytest.raises(OracleUnavailableError):
            prop.estimate(prop.oracle_model(), toy_dataset([(0, 0, 3)]), 0, 0)

    def test_estimates_in_range(self, small_synthetic):
        mar = small_synthetic.subset(np.arange(20))
        for model in (prop.fit_naive_bayes(small_synthetic, mar), prop.fit_user_frequency(small_synthetic)):
            est = prop.estimate_matrix(model, small_synthetic)
            assert est.min() >= model.clip_floor and est.max() <= 1


class TestSerialization:
    @pytest.mark.parametrize("make", [
        lambda: prop.fit_naive_bayes(_toy_train(), _toy_mar()),
        lambda: prop.fit_user_frequency(_toy_train()),
        lambda: prop.constant_model(0.123456789012345),
        lambda: prop.oracle_model(0.07),
    ])
    def test_text_round_trip(self, make):
        model = make()
        again = prop.PropensityModel.from_text(model.to_text())
        assert again.kind == model.kind and again.clip_floor == model.clip_floor
        assert again.to_text() == model.to_text()
        ds = _toy_train()
        if model.kind != "oracle":
            np.testing.assert_array_equal(prop.estimate_matrix(again, ds), prop.estimate_matrix(model, ds))
