"""Linear selection procedures for main and interaction effects.

Four procedures share the same candidate universe (every covariate as a
main effect, every unordered covariate pair as an interaction) and the
same marginality discipline: whenever an interaction enters a model, any
missing parent main effect enters with it.

* univariate testing: each candidate is tested in its own small model.
* forward testing: stepwise growth by smallest Wald p-value.
* forward AICc / BIC: stepwise growth by information criterion.

Forward procedures stop when no candidate helps, when a candidate fit
fails, or when the accepted model's standard errors explode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import MetaDataset, ModelSpec
from .errors import DegenerateCorrection, InsufficientDF, NumericError
from .estimation import FitOptions, FitResult, fit, wald_pvalue

STOP_NO_CANDIDATE = "no_candidate"
STOP_NON_CONVERGENCE = "non_convergence"
STOP_SE_EXPLOSION = "se_explosion"
STOP_EXHAUSTED = "exhausted"


@dataclass
class TraceStep:
    """One evaluated candidate: its label, score, and the decision."""

    candidate: str
    score: float
    accepted: bool


@dataclass
class SelectionResult:
    """Outcome of a selection procedure.

    ``final_fit`` is None only when the terminal model could not be
    refitted (possible for the univariate union on tiny samples).
    """

    spec: ModelSpec
    final_fit: FitResult | None
    trace: tuple[TraceStep, ...]
    stopped_reason: str


@dataclass
class SelectOptions:
    """Bundled defaults for the command line layer."""

    alpha: float = 0.05
    criterion: str = "aicc"
    se_cap: float = 100.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        self.criterion = self.criterion.lower()
        if self.criterion not in ("aicc", "bic"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not self.se_cap > 0.0:
            raise ValueError("se_cap must be positive")


def _label(ds: MetaDataset, term) -> str:
    kind, ref = term
    if kind == "main":
        return ds.covariates[ref].name
    a, b = ref
    return f"{ds.covariates[a].name}:{ds.covariates[b].name}"


def _coef_index(spec: ModelSpec, term) -> int:
    """Column index of a term inside the design built from ``spec``."""
    kind, ref = term
    if kind == "main":
        return 1 + spec.mains.index(ref)
    return 1 + len(spec.mains) + spec.interactions.index(tuple(ref))


def _forward_candidates(current: ModelSpec, p: int):
    """Admissible additions in deterministic order: MEs, then IE pairs."""
    for j in range(p):
        if j not in current.mains:
            yield ("main", j), current.with_main(j)
    for a in range(p):
        for b in range(a + 1, p):
            if (a, b) not in current.interactions:
                yield ("ie", (a, b)), current.with_interaction((a, b))


def _check_sample(ds: MetaDataset, context: str) -> None:
    ds.require_complete(context)
    if ds.k <= 3:
        raise InsufficientDF(f"{context} needs more than 3 studies, got {ds.k}")


def univariate_select(ds: MetaDataset, alpha: float = 0.05,
                      fit_options: FitOptions | None = None) -> SelectionResult:
    """Select effects by testing each candidate in isolation.

    Main effect j is kept when its coefficient in the model {j} has
    p < alpha.  Pair {a, b} is kept when the interaction coefficient in
    the model {a, b, a*b} has p < alpha.  The returned spec is the union
    of everything kept, closed under marginality.  Candidates whose fit
    fails are recorded with a NaN score and not selected.
    """
    _check_sample(ds, "univariate selection")
    trace: list[TraceStep] = []
    kept_mains: list[int] = []
    kept_pairs: list[tuple[int, int]] = []

    def evaluate(term, spec: ModelSpec) -> float:
        result = fit(ds, spec, fit_options)
        if not result.converged:
            return float("nan")
        return wald_pvalue(result, _coef_index(spec, term))

    for j in range(ds.p):
        term = ("main", j)
        try:
            p_val = evaluate(term, ModelSpec((j,), ()))
        except NumericError:
            p_val = float("nan")
        selected = p_val < alpha  # NaN compares False
        if selected:
            kept_mains.append(j)
        trace.append(TraceStep(_label(ds, term), p_val, selected))
    for a in range(ds.p):
        for b in range(a + 1, ds.p):
            term = ("ie", (a, b))
            try:
                p_val = evaluate(term, ModelSpec((a, b), ((a, b),)))
            except NumericError:
                p_val = float("nan")
            selected = p_val < alpha
            if selected:
                kept_pairs.append((a, b))
            trace.append(TraceStep(_label(ds, term), p_val, selected))

    spec = ModelSpec(tuple(kept_mains), tuple(kept_pairs)).closure()
    try:
        final_fit = fit(ds, spec, fit_options)
    except NumericError:
        final_fit = None
    return SelectionResult(spec, final_fit, tuple(trace), STOP_EXHAUSTED)


def _forward(ds: MetaDataset, score_fn, accept_fn, start_score,
             se_cap: float, fit_options: FitOptions | None,
             context: str) -> SelectionResult:
    """Shared forward stepping engine.

    ``score_fn(term, spec, fit)`` maps a candidate to a score (smaller is
    better); ``accept_fn(best_score, current_score)`` decides acceptance;
    ``start_score(fit)`` scores the intercept-only start.
    """
    _check_sample(ds, context)
    current = ModelSpec.empty()
    current_fit = fit(ds, current, fit_options)
    current_score = start_score(current_fit)
    trace: list[TraceStep] = []

    while True:
        candidates = [
            (term, spec)
            for term, spec in _forward_candidates(current, ds.p)
            if spec.m < ds.k
        ]
        if not candidates:
            return SelectionResult(current, current_fit, tuple(trace),
                                   STOP_EXHAUSTED)
        best = None
        for term, spec in candidates:
            try:
                cand_fit = fit(ds, spec, fit_options)
                if not cand_fit.converged:
                    raise NumericError("tau2 search did not converge")
                score = score_fn(term, spec, cand_fit)
            except NumericError:
                trace.append(TraceStep(_label(ds, term), float("nan"), False))
                return SelectionResult(current, current_fit, tuple(trace),
                                       STOP_NON_CONVERGENCE)
            if best is None or score < best[0]:
                best = (score, term, spec, cand_fit)
        score, term, spec, cand_fit = best
        if not accept_fn(score, current_score):
            trace.append(TraceStep(_label(ds, term), score, False))
            return SelectionResult(current, current_fit, tuple(trace),
                                   STOP_NO_CANDIDATE)
        trace.append(TraceStep(_label(ds, term), score, True))
        current, current_fit, current_score = spec, cand_fit, score
        if current_fit.max_se > se_cap:
            return SelectionResult(current, current_fit, tuple(trace),
                                   STOP_SE_EXPLOSION)


def forward_test_select(ds: MetaDataset, alpha: float = 0.05,
                        se_cap: float = 100.0,
                        fit_options: FitOptions | None = None
                        ) -> SelectionResult:
    """Forward selection by smallest Wald p-value.

    Each step fits current-plus-candidate for every admissible candidate
    and reads the candidate coefficient's p-value; an interaction
    candidate enters together with any missing parent main effects and is
    judged by the interaction coefficient alone.  Ties go to the earliest
    candidate in enumeration order (main effects by index, then pairs).
    """
    def score_fn(term, spec, cand_fit):
        return wald_pvalue(cand_fit, _coef_index(spec, term))

    return _forward(
        ds,
        score_fn,
        accept_fn=lambda best, _current: best < alpha,
        start_score=lambda _fit: math.inf,
        se_cap=se_cap,
        fit_options=fit_options,
        context="forward selection",
    )


def information_criterion(fit_result: FitResult, kind: str) -> float:
    """AICc or BIC of a fitted model; tau2 counts as one parameter.

    AICc uses an effective sample size floored at m + 3 so the
    small-sample denominator stays positive.
    """
    kind = kind.lower()
    q = fit_result.m + 1  # coefficients plus tau2
    if kind == "aicc":
        k_star = max(fit_result.k, fit_result.m + 3)
        denom = k_star - q - 1
        if denom <= 0:
            raise DegenerateCorrection(
                f"AICc denominator {denom} with k*={k_star}, m={fit_result.m}"
            )
        return -2.0 * fit_result.loglik + 2.0 * q * k_star / denom
    if kind == "bic":
        return -2.0 * fit_result.loglik + q * math.log(fit_result.k)
    raise ValueError(f"unknown criterion {kind!r}")


def forward_ic_select(ds: MetaDataset, kind: str = "aicc",
                      se_cap: float = 100.0,
                      fit_options: FitOptions | None = None
                      ) -> SelectionResult:
    """Forward selection by information criterion.

    A step is accepted only when the best candidate's criterion is
    strictly below the current model's.
    """
    kind_l = kind.lower()
    if kind_l not in ("aicc", "bic"):
        raise ValueError(f"unknown criterion {kind!r}")

    def score_fn(_term, _spec, cand_fit):
        return information_criterion(cand_fit, kind_l)

    return _forward(
        ds,
        score_fn,
        accept_fn=lambda best, current: best < current,
        start_score=lambda start_fit: information_criterion(start_fit, kind_l),
        se_cap=se_cap,
        fit_options=fit_options,
        context=f"forward {kind_l} selection",
    )
