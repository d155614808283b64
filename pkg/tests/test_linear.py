import math

import numpy as np
import pytest

from metaselect import (
    CovariateMeta,
    FitOptions,
    FitResult,
    MetaDataset,
    ModelSpec,
    fit,
    forward_ic_select,
    forward_test_select,
    information_criterion,
    univariate_select,
)
from metaselect.linear import SelectOptions

from conftest import random_dataset


def _planted(rng, k=80, coef=1.0):
    # strong main effect on x0 and interaction x0*x2, x1 pure noise
    return random_dataset(
        rng, k=k, p=3, tau2=0.02, binary=(2,),
        beta={"const": 0.3, 0: coef, (0, 2): -coef},
        v_range=(0.02, 0.08),
    )


class TestUnivariate:
    def test_recovers_planted_effects(self, rng):
        ds = _planted(rng)
        res = univariate_select(ds)
        assert 0 in res.spec.mains
        assert (0, 2) in res.spec.interactions
        assert res.spec.is_closed
        assert res.stopped_reason == "exhausted"

    def test_trace_covers_all_candidates(self, rng):
        ds = random_dataset(rng, k=30, p=3)
        res = univariate_select(ds)
        assert len(res.trace) == 3 + 3  # three MEs, three pairs
        labels = [step.candidate for step in res.trace]
        assert labels == ["x0", "x1", "x2", "x0:x1", "x0:x2", "x1:x2"]

    def test_tiny_alpha_selects_nothing(self, rng):
        ds = random_dataset(rng, k=40, p=3)
        res = univariate_select(ds, alpha=1e-9)
        assert res.spec.mains == () and res.spec.interactions == ()
        assert res.final_fit is not None and res.final_fit.m == 1

    def test_monte_carlo_level(self):
        # pure noise: per-candidate rejection rate should sit near alpha
        alpha = 0.05
        hits = 0
        total = 0
        for rep in range(500):
            rng = np.random.default_rng(30_000 + rep)
            k = 30
            x = rng.normal(size=(k, 2))
            y = rng.normal(size=k) * 0.3
            ds = MetaDataset(y=y, v=np.full(k, 0.09), x=x,
                             covariates=[CovariateMeta("a", "metric"),
                                         CovariateMeta("b", "metric")])
            res = univariate_select(ds, alpha=alpha)
            hits += sum(1 for s in res.trace if s.accepted)
            total += len(res.trace)
        rate = hits / total
        assert abs(rate - alpha) < 0.03

    def test_small_sample_rejected(self, rng):
        ds = random_dataset(rng, k=3, p=2)
        with pytest.raises(Exception):
            univariate_select(ds)


class TestForwardTest:
    def test_recovers_planted_effects(self, rng):
        ds = _planted(rng)
        res = forward_test_select(ds)
        assert 0 in res.spec.mains
        assert (0, 2) in res.spec.interactions
        assert res.spec.is_closed
        assert res.final_fit is not None

    def test_interaction_can_lead(self, rng):
        # signal lives only in the product term
        k = 120
        x = rng.normal(size=(k, 3))
        v = np.full(k, 0.04)
        y = 1.5 * x[:, 0] * x[:, 1] + rng.normal(scale=np.sqrt(v))
        ds = MetaDataset(y=y, v=v, x=x,
                         covariates=[CovariateMeta(f"x{j}", "metric")
                                     for j in range(3)])
        res = forward_test_select(ds)
        assert (0, 1) in res.spec.interactions
        assert res.trace[0].candidate == "x0:x1"
        assert {0, 1} <= set(res.spec.mains)

    def test_noise_stops_immediately(self, rng):
        ds = random_dataset(rng, k=40, p=3)
        res = forward_test_select(ds, alpha=1e-9)
        assert res.spec.m == 1
        assert res.stopped_reason == "no_candidate"
        assert not res.trace[-1].accepted

    def test_exact_ties_keep_lowest_index(self, rng):
        # engine-level check: with every candidate scoring the same, the
        # first in enumeration order (lowest main index) must win
        from metaselect.linear import _forward

        ds = random_dataset(rng, k=30, p=3)
        res = _forward(ds, lambda *_: 0.01,
                       accept_fn=lambda best, _cur: best < 0.05,
                       start_score=lambda _fit: math.inf,
                       se_cap=100.0, fit_options=None, context="tie test")
        assert res.stopped_reason == "exhausted"
        order = [s.candidate for s in res.trace]
        assert order == ["x0", "x1", "x2", "x0:x1", "x0:x2", "x1:x2"]
        assert all(s.accepted for s in res.trace)

    def test_deterministic_across_reruns(self, rng):
        ds = _planted(rng, k=60)
        first = forward_test_select(ds)
        for _ in range(49):
            again = forward_test_select(ds)
            assert again.trace == first.trace
            assert again.spec == first.spec

    def test_duplicate_column_halts_as_non_convergence(self, rng):
        # the interaction candidate a:b is collinear, so the first sweep
        # halts before anything can be accepted
        k = 50
        x = rng.normal(size=(k, 2))
        x[:, 1] = x[:, 0]
        v = np.full(k, 0.05)
        y = 1.2 * x[:, 0] + rng.normal(scale=np.sqrt(v))
        ds = MetaDataset(y=y, v=v, x=x,
                         covariates=[CovariateMeta("a", "metric"),
                                     CovariateMeta("b", "metric")])
        res = forward_test_select(ds)
        assert res.stopped_reason == "non_convergence"
        assert math.isnan(res.trace[-1].score)
        assert res.trace[-1].candidate == "a:b"
        assert not res.trace[-1].accepted
        assert res.spec.m == 1

    def test_se_cap_halts_after_acceptance(self, rng):
        ds = _planted(rng)
        res = forward_test_select(ds, se_cap=1e-9)
        assert res.stopped_reason == "se_explosion"
        accepted = [s for s in res.trace if s.accepted]
        assert len(accepted) == 1

    def test_exhausts_all_terms_with_loose_alpha(self, rng):
        ds = random_dataset(rng, k=30, p=2,
                            beta={0: 1.0, 1: 1.0, (0, 1): 1.0})
        res = forward_test_select(ds, alpha=1 - 1e-12)
        assert res.stopped_reason == "exhausted"
        assert res.spec.mains == (0, 1)
        assert res.spec.interactions == ((0, 1),)


class TestInformationCriterion:
    def _stub(self, loglik, k, m):
        return FitResult(spec=ModelSpec.empty(), beta=np.zeros(m),
                         sigma=np.eye(m), tau2=0.0, loglik=loglik,
                         m=m, k=k, converged=True, max_se=1.0)

    def test_aicc_small_sample_penalty(self):
        # m = 3, k = 5: q = 4, effective size 6, penalty 2*4*6/1 = 48
        r = self._stub(loglik=-10.0, k=5, m=3)
        assert information_criterion(r, "aicc") == pytest.approx(20.0 + 48.0)

    def test_aicc_approaches_aic_for_large_k(self):
        r = self._stub(loglik=-50.0, k=2000, m=3)
        aicc = information_criterion(r, "aicc")
        aic = -2.0 * r.loglik + 2.0 * (r.m + 1)
        assert 0.0 < aicc - aic < 0.05

    def test_bic_formula(self):
        r = self._stub(loglik=-7.5, k=100, m=2)
        want = 15.0 + 3 * math.log(100)
        assert information_criterion(r, "bic") == pytest.approx(want)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            information_criterion(self._stub(0.0, 10, 1), "dic")


class TestForwardIC:
    @pytest.mark.parametrize("kind", ["aicc", "bic"])
    def test_recovers_planted_effects(self, rng, kind):
        ds = _planted(rng)
        res = forward_ic_select(ds, kind)
        assert 0 in res.spec.mains
        assert (0, 2) in res.spec.interactions
        assert res.spec.is_closed

    def test_scores_strictly_decrease_on_accept(self, rng):
        ds = _planted(rng)
        res = forward_ic_select(ds, "aicc")
        accepted_scores = [s.score for s in res.trace if s.accepted]
        start = information_criterion(fit(ds, ModelSpec.empty()), "aicc")
        prev = start
        for score in accepted_scores:
            assert score < prev
            prev = score

    def test_noise_keeps_empty_model(self, rng):
        ds = random_dataset(rng, k=40, p=3)
        res = forward_ic_select(ds, "bic")
        assert res.spec.m == 1
        assert res.stopped_reason == "no_candidate"

    def test_final_fit_matches_spec(self, rng):
        ds = _planted(rng)
        res = forward_ic_select(ds, "aicc")
        direct = fit(ds, res.spec)
        assert np.allclose(res.final_fit.beta, direct.beta, atol=1e-10)


class TestSelectOptions:
    def test_defaults(self):
        opts = SelectOptions()
        assert opts.alpha == 0.05
        assert opts.criterion == "aicc"
        assert opts.se_cap == 100.0

    def test_validation(self):
        with pytest.raises(ValueError):
            SelectOptions(alpha=0.0)
        with pytest.raises(ValueError):
            SelectOptions(alpha=1.0)
        with pytest.raises(ValueError):
            SelectOptions(criterion="cp")
        with pytest.raises(ValueError):
            SelectOptions(se_cap=0.0)
