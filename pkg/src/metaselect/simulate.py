"""Plasmode simulation harness for interaction selection error rates.

Replicates are built from a real (or realistic) base table of study
covariates: rows are bootstrapped, a linear predictor is formed from a
coefficient setting, a random effect and sampling noise are added, and
the sampling variance is synthesized from the study size through an
event-probability transform.  Selected interaction sets are scored
against the setting's true pairs as Type I / Type II error rates.

Seven covariates drive the settings: time, trial, male, age, sbp, multi,
disc.  The base dataset must provide covariates with these names (case
insensitive) for the built-in settings to apply.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import CovariateMeta, MetaDataset, ModelSpec
from .errors import DataError, DegenerateVariance, MissingColumn
from .ensemble import (
    EnsembleOptions,
    fit_ensemble,
    selection_matrix,
    threshold_select,
)
from .linear import forward_ic_select, forward_test_select, univariate_select
from .tree import PruneRule, default_prune_c, grow_tree, prune_tree, tree_to_spec

SETTING_NAMES = ("time", "trial", "male", "age", "sbp", "multi", "disc")

METHODS = (
    "uni_test",
    "multi_test",
    "aicc",
    "bic",
    "femrt",
    "remrt",
    "sfemrt",
    "sremrt",
)

_ENSEMBLE_METHODS = ("sfemrt", "sremrt")

# Probabilities are clamped away from 0 and 1 before the variance formula
# so synthesized sampling variances stay finite.
_P_CLAMP = (0.01, 0.99)


@dataclass(frozen=True)
class DgmSetting:
    """One outcome-generating configuration.

    ``me_coefs`` maps covariate names to main effect coefficients and
    ``ie_coefs`` maps name pairs to interaction coefficients.  When
    ``nonlinear`` is set, the (single) interaction term is replaced by an
    indicator-gated version instead of a plain product.
    """

    id: str
    intercept: float
    me_coefs: tuple[tuple[str, float], ...]
    ie_coefs: tuple[tuple[tuple[str, str], float], ...]
    nonlinear: str | None = None


_ALL_ME = (
    ("time", -0.5),
    ("trial", -0.5),
    ("male", -0.5),
    ("age", 0.5),
    ("sbp", 0.5),
    ("multi", -0.5),
    ("disc", -0.5),
)

_IE_AGE_TIME = (("age", "time"), -0.5)
_IE_DISC_TIME = (("disc", "time"), -0.5)
_IE_DISC_MULTI = (("disc", "multi"), 0.5)


def _setting(sid, mes, ies, nonlinear=None):
    return DgmSetting(sid, -1.0, tuple(mes), tuple(ies), nonlinear)


def _build_settings() -> dict[str, DgmSetting]:
    s: dict[str, DgmSetting] = {}
    s["1"] = _setting("1", (), ())
    s["2"] = _setting("2", _ALL_ME, ())
    s["3"] = _setting("3", (), (_IE_AGE_TIME,))
    s["4"] = _setting("4", (("time", -0.5), ("age", 0.5)), (_IE_AGE_TIME,))
    s["5"] = _setting("5", _ALL_ME, (_IE_AGE_TIME,))
    s["6"] = _setting("6", (), (_IE_DISC_TIME,))
    s["7"] = _setting("7", (("time", -0.5), ("disc", -0.5)), (_IE_DISC_TIME,))
    s["8"] = _setting("8", _ALL_ME, (_IE_DISC_TIME,))
    s["9"] = _setting("9", (), (_IE_DISC_MULTI,))
    s["10"] = _setting("10", (("trial", -0.5), ("multi", -0.5)),
                       (_IE_DISC_MULTI,))
    s["11"] = _setting("11", _ALL_ME, (_IE_DISC_MULTI,))
    all_ie = (_IE_AGE_TIME, _IE_DISC_TIME, _IE_DISC_MULTI)
    s["12"] = _setting("12", (), all_ie)
    s["13"] = _setting(
        "13",
        (("time", -0.5), ("trial", -0.5), ("age", 0.5), ("multi", -0.5),
         ("disc", -0.5)),
        all_ie,
    )
    s["14"] = _setting("14", _ALL_ME, all_ie)
    # Nonlinear settings reuse the coefficient layouts of settings 3-8
    # with the interaction term swapped for an indicator-gated form.
    for nid, base_id, kind in (
        ("N1", "3", "time_age_indicator"),
        ("N2", "4", "time_age_indicator"),
        ("N3", "5", "time_age_indicator"),
        ("N4", "6", "time_disc_indicator"),
        ("N5", "7", "time_disc_indicator"),
        ("N6", "8", "time_disc_indicator"),
    ):
        ref = s[base_id]
        s[nid] = DgmSetting(nid, ref.intercept, ref.me_coefs, ref.ie_coefs,
                            kind)
    return s


_SETTINGS = _build_settings()


def linear_settings() -> dict[str, DgmSetting]:
    return {sid: _SETTINGS[sid] for sid in map(str, range(1, 15))}


def nonlinear_settings() -> dict[str, DgmSetting]:
    return {sid: _SETTINGS[sid] for sid in
            ("N1", "N2", "N3", "N4", "N5", "N6")}


def get_setting(sid) -> DgmSetting:
    key = str(sid).upper() if str(sid).lower().startswith("n") else str(sid)
    if key not in _SETTINGS:
        raise ValueError(f"unknown simulation setting {sid!r}")
    return _SETTINGS[key]


def _setting_code(sid: str) -> int:
    """Stable integer code for seed derivation."""
    if sid.upper().startswith("N"):
        return 100 + int(sid[1:])
    return int(sid)


def _name_columns(base: MetaDataset) -> dict[str, int]:
    return {meta.name.lower(): j for j, meta in enumerate(base.covariates)}


def _column(base: MetaDataset, cols: dict[str, int], name: str) -> int:
    if name not in cols:
        raise MissingColumn(
            f"base dataset lacks a covariate named {name!r} required by "
            "the simulation settings"
        )
    return cols[name]


def hot_deck_impute(base: MetaDataset, rng: np.random.Generator) -> MetaDataset:
    """Fill missing covariate cells with draws from the observed values
    of the same column; observed cells are untouched."""
    x = base.x.copy()
    for j in range(base.p):
        col = x[:, j]
        missing = ~np.isfinite(col)
        if not missing.any():
            continue
        observed = col[~missing]
        # MetaDataset construction already rejects all-missing columns,
        # so observed is nonempty here.
        col[missing] = rng.choice(observed, size=int(missing.sum()),
                                  replace=True)
    n = None if base.n is None else base.n.copy()
    metas = tuple(CovariateMeta(m.name, m.scale, m.reference, m.mean, m.sd)
                  for m in base.covariates)
    return MetaDataset(base.y.copy(), base.v.copy(), x, metas, n)


def truth_spec(base: MetaDataset, setting: DgmSetting) -> ModelSpec:
    """True effect set of a setting, as indices into the base covariates."""
    cols = _name_columns(base)
    mains = [_column(base, cols, name) for name, coef in setting.me_coefs
             if coef != 0.0]
    pairs = [
        (_column(base, cols, a), _column(base, cols, b))
        for (a, b), coef in setting.ie_coefs
        if coef != 0.0
    ]
    return ModelSpec(tuple(mains), tuple(pairs)).closure()


def make_replicate(base: MetaDataset, setting: DgmSetting, k: int,
                   tau2: float, rng: np.random.Generator, *,
                   sampling_error: bool = True
                   ) -> tuple[MetaDataset, ModelSpec]:
    """Bootstrap covariate rows and synthesize outcomes for one setting.

    The base must be complete (impute first) with a sample size for every
    row, and should already be standardized: coefficients refer to the
    standardized covariate scale.  Draw order is fixed (rows, random
    effects, sampling noise), so one generator yields one reproducible
    replicate.  ``sampling_error=False`` suppresses the noise term while
    consuming the same draws; it exists for exactness checks.
    """
    base.require_complete("replicate generation")
    if base.n is None or not np.all(np.isfinite(base.n)):
        raise DataError("replicate generation needs a sample size for "
                        "every base row")
    if k < 1:
        raise ValueError("replicate size k must be positive")
    if tau2 < 0.0:
        raise ValueError("tau2 must be nonnegative")
    cols = _name_columns(base)

    rows = rng.integers(0, base.k, size=k)
    x = base.x[rows].copy()
    n = base.n[rows].copy()

    eta = np.full(k, setting.intercept)
    for name, coef in setting.me_coefs:
        if coef != 0.0:
            eta += coef * x[:, _column(base, cols, name)]
    if setting.nonlinear is None:
        for (a, b), coef in setting.ie_coefs:
            if coef != 0.0:
                eta += coef * (x[:, _column(base, cols, a)]
                               * x[:, _column(base, cols, b)])
    elif setting.nonlinear == "time_age_indicator":
        coef = dict(setting.ie_coefs)[("age", "time")]
        age = x[:, _column(base, cols, "age")]
        time = x[:, _column(base, cols, "time")]
        eta += coef * time * age * (age > np.mean(age))
    elif setting.nonlinear == "time_disc_indicator":
        coef = dict(setting.ie_coefs)[("disc", "time")]
        disc = x[:, _column(base, cols, "disc")]
        time = x[:, _column(base, cols, "time")]
        eta += coef * disc * (time > np.mean(time))
    else:
        raise ValueError(f"unknown nonlinear kind {setting.nonlinear!r}")

    u = rng.normal(0.0, math.sqrt(tau2), size=k)
    theta = eta + u
    p_true = np.clip(expit(theta), _P_CLAMP[0], _P_CLAMP[1])
    v = 1.0 / (n * p_true * (1.0 - p_true))
    if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
        raise DegenerateVariance("synthesized sampling variance is not "
                                 "finite and positive")
    noise = rng.standard_normal(k) * np.sqrt(v)
    y = theta + noise if sampling_error else theta.copy()

    metas = tuple(CovariateMeta(m.name, m.scale, m.reference, m.mean, m.sd)
                  for m in base.covariates)
    replicate = MetaDataset(y, v, x, metas, n)
    return replicate, truth_spec(base, setting)


def error_rates(selected: ModelSpec, truth_ies, candidate_pairs):
    """Type I and Type II interaction error rates of one selection.

    Type I is the fraction of false candidate pairs selected; Type II the
    fraction of true pairs missed (None when there are no true pairs).
    """
    truth = {(min(a, b), max(a, b)) for a, b in truth_ies}
    candidates = {(min(a, b), max(a, b)) for a, b in candidate_pairs}
    if not truth <= candidates:
        raise ValueError("every true pair must be a candidate pair")
    chosen = set(selected.interactions) & candidates
    false_pool = candidates - truth
    false_hits = chosen - truth
    type1 = len(false_hits) / len(false_pool) if false_pool else 0.0
    type2 = None
    if truth:
        type2 = len(truth - chosen) / len(truth)
    return type1, type2


# ---------------------------------------------------------------------
# Grid configuration and report


@dataclass
class GridConfig:
    """Full factorial simulation grid."""

    settings: tuple[str, ...]
    k_values: tuple[int, ...] = (13, 23, 41, 100)
    tau2_values: tuple[float, ...] = (0.0, 0.141, 0.195, 0.233, 0.317)
    methods: tuple[str, ...] = METHODS
    replications: int = 100
    lambda_values: tuple[float, ...] = (0.5,)
    B: int = 100
    alpha: float = 0.05
    master_seed: int = 1

    def __post_init__(self) -> None:
        self.settings = tuple(get_setting(s).id for s in self.settings)
        self.k_values = tuple(int(k) for k in self.k_values)
        self.tau2_values = tuple(float(t) for t in self.tau2_values)
        self.methods = tuple(self.methods)
        self.lambda_values = tuple(float(x) for x in self.lambda_values)
        if not self.settings:
            raise ValueError("grid needs at least one setting")
        if any(k < 2 for k in self.k_values):
            raise ValueError("every k must be at least 2")
        if any(t < 0.0 for t in self.tau2_values):
            raise ValueError("tau2 values must be nonnegative")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if not self.methods:
            raise ValueError("grid needs at least one method")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if any(not 0.0 < x < 1.0 for x in self.lambda_values):
            raise ValueError("lambda values must lie in (0, 1)")
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        self.master_seed = int(self.master_seed)

    @classmethod
    def from_dict(cls, obj: dict) -> "GridConfig":
        known = {
            "settings", "k_values", "tau2_values", "methods", "replications",
            "lambda_values", "B", "alpha", "master_seed",
        }
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown grid config keys: {sorted(unknown)}")
        if "settings" not in obj:
            raise ValueError("grid config lacks keys: ['settings']")
        return cls(
            settings=tuple(str(s) for s in obj["settings"]),
            k_values=tuple(obj.get("k_values", (13, 23, 41, 100))),
            tau2_values=tuple(
                obj.get("tau2_values", (0.0, 0.141, 0.195, 0.233, 0.317))),
            methods=tuple(obj.get("methods", METHODS)),
            replications=int(obj.get("replications", 100)),
            lambda_values=tuple(obj.get("lambda_values", (0.5,))),
            B=int(obj.get("B", 100)),
            alpha=float(obj.get("alpha", 0.05)),
            master_seed=int(obj.get("master_seed", 1)),
        )

    @classmethod
    def from_json(cls, source) -> "GridConfig":
        if hasattr(source, "read"):
            return cls.from_dict(json.load(source))
        with open(source) as handle:
            return cls.from_dict(json.load(handle))


@dataclass
class ReportRow:
    setting: str
    k: int
    tau2: float
    method: str
    lam: float | None
    type1: float | None
    type2: float | None
    n_reps: int
    mean_selected_ies: float | None
    failures: int
    error: str | None

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "k": self.k,
            "tau2": self.tau2,
            "method": self.method,
            "lambda": self.lam,
            "type1": self.type1,
            "type2": self.type2,
            "n_reps": self.n_reps,
            "mean_selected_ies": self.mean_selected_ies,
            "failures": self.failures,
            "error": self.error,
        }


@dataclass
class ErrorReport:
    rows: list[ReportRow]

    _HEADER = ("setting,k,tau2,method,lambda,type1,type2,n_reps,"
               "mean_selected_ies,failures,error")

    def to_csv(self) -> str:
        def cell(value) -> str:
            if value is None:
                return ""
            if isinstance(value, float):
                return repr(value)
            return str(value)

        lines = [self._HEADER]
        for r in self.rows:
            error = "" if r.error is None else r.error.replace(",", ";")
            lines.append(",".join([
                r.setting, str(r.k), repr(r.tau2), r.method, cell(r.lam),
                cell(r.type1), cell(r.type2), str(r.n_reps),
                cell(r.mean_selected_ies), str(r.failures), error,
            ]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.rows], indent=2)


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


def _short_error(exc: Exception) -> str:
    text = f"{type(exc).__name__}: {exc}"
    text = text.replace("\n", " ")
    return text[:160]


def _method_spec(replicate: MetaDataset, method: str, alpha: float,
                 kids) -> ModelSpec:
    """One non-ensemble method's selected spec for a replicate."""
    if method == "uni_test":
        return univariate_select(replicate, alpha).spec
    if method == "multi_test":
        return forward_test_select(replicate, alpha).spec
    if method == "aicc":
        return forward_ic_select(replicate, "aicc").spec
    if method == "bic":
        return forward_ic_select(replicate, "bic").spec
    if method in ("femrt", "remrt"):
        mode = "fe" if method == "femrt" else "re"
        tree = grow_tree(replicate, mode)
        rule = PruneRule(default_prune_c(mode, replicate.k))
        seed = _seed_int(kids[1] if mode == "fe" else kids[2])
        return tree_to_spec(prune_tree(replicate, tree, rule, seed=seed))
    raise ValueError(f"unknown method {method!r}")


def _run_cell(base: MetaDataset, config: GridConfig, sid: str, k: int,
              tau2: float) -> list[ReportRow]:
    """All replications of one (setting, k, tau2) cell, aggregated."""
    setting = get_setting(sid)
    candidate_pairs = {
        (i, j) for i in range(base.p) for j in range(i + 1, base.p)
    }
    keys: list[tuple[str, float | None]] = []
    for method in config.methods:
        if method in _ENSEMBLE_METHODS:
            keys.extend((method, lam) for lam in config.lambda_values)
        else:
            keys.append((method, None))
    acc = {key: {"t1": [], "t2": [], "nsel": [], "fail": 0, "err": None}
           for key in keys}

    def record(key, spec, truth_pairs):
        t1, t2 = error_rates(spec, truth_pairs, candidate_pairs)
        acc[key]["t1"].append(t1)
        if t2 is not None:
            acc[key]["t2"].append(t2)
        acc[key]["nsel"].append(len(spec.interactions))

    def record_failure(key, exc):
        acc[key]["fail"] += 1
        if acc[key]["err"] is None:
            acc[key]["err"] = _short_error(exc)

    code = _setting_code(setting.id)
    tau2_code = int(round(tau2 * 1e6))
    for rep in range(config.replications):
        seq = np.random.SeedSequence(
            (config.master_seed, code, k, tau2_code, rep)
        )
        kids = seq.spawn(5)
        rng = np.random.default_rng(kids[0])
        replicate, truth = make_replicate(base, setting, k, tau2, rng)
        truth_pairs = set(truth.interactions)
        for method in config.methods:
            if method in _ENSEMBLE_METHODS:
                mode = "fe" if method == "sfemrt" else "re"
                try:
                    opts = EnsembleOptions(
                        B=config.B,
                        seed=_seed_int(kids[3] if mode == "fe" else kids[4]),
                    )
                    trees = fit_ensemble(replicate, mode, opts)
                    matrix = selection_matrix(trees, replicate.p)
                    for lam in config.lambda_values:
                        record((method, lam), threshold_select(matrix, lam),
                               truth_pairs)
                except Exception as exc:  # recorded, grid never aborts
                    for lam in config.lambda_values:
                        record_failure((method, lam), exc)
            else:
                try:
                    spec = _method_spec(replicate, method, config.alpha, kids)
                except Exception as exc:
                    record_failure((method, None), exc)
                else:
                    record((method, None), spec, truth_pairs)

    rows = []
    for method, lam in keys:
        slot = acc[(method, lam)]
        n_ok = len(slot["t1"])
        rows.append(ReportRow(
            setting=setting.id,
            k=k,
            tau2=tau2,
            method=method,
            lam=lam,
            type1=(sum(slot["t1"]) / n_ok) if n_ok else None,
            type2=(sum(slot["t2"]) / len(slot["t2"])) if slot["t2"] else None,
            n_reps=n_ok,
            mean_selected_ies=(sum(slot["nsel"]) / n_ok) if n_ok else None,
            failures=slot["fail"],
            error=slot["err"],
        ))
    return rows


def run_grid(base: MetaDataset, config: GridConfig,
             n_jobs: int = 1) -> ErrorReport:
    """Run the full factorial grid and aggregate error rates per cell.

    The base must be complete (hot-deck impute first) and should be
    standardized.  Every cell derives its own seed stream from
    (master_seed, setting, k, tau2, replication), so reports are
    byte-identical for a given master seed regardless of worker count.
    """
    base.require_complete("grid simulation")
    if base.n is None or not np.all(np.isfinite(base.n)):
        raise DataError("grid simulation needs a sample size for every row")
    cells = [
        (sid, k, tau2)
        for sid in config.settings
        for k in config.k_values
        for tau2 in config.tau2_values
    ]
    if n_jobs == 1:
        per_cell = [_run_cell(base, config, *cell) for cell in cells]
    else:
        from joblib import Parallel, delayed

        per_cell = Parallel(n_jobs=n_jobs)(
            delayed(_run_cell)(base, config, *cell) for cell in cells
        )
    rows: list[ReportRow] = []
    for cell_rows in per_cell:
        rows.extend(cell_rows)
    return ErrorReport(rows)


def synthetic_base(n_studies: int = 335, seed: int = 20260816,
                   missing_rate: float = 0.0) -> MetaDataset:
    """Generate a stand-in base table with the simulation schema.

    Produces the seven covariates the built-in settings reference (time,
    trial, male, age, sbp, multi, disc), per-study sample sizes, and a
    placeholder outcome; values are drawn on plausible clinical scales
    with mild dependence between age and blood pressure and between trial
    status and multicenter status.  ``missing_rate`` pokes that fraction
    of covariate cells out (for imputation demos).  Standardize before
    feeding the result to a grid.
    """
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError("missing_rate must lie in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    size = int(n_studies)
    # recruitment years, roughly uniform over a few decades; mean patient
    # age drifts downward across years (the kind of covariate confounding
    # study-level re-analyses look for)
    time = np.floor(rng.uniform(1981.0, 2015.0, size))
    year_c = (time - time.mean()) / time.std()
    age = 67.0 - 2.8 * year_c + rng.normal(0.0, 7.0, size)
    sbp = rng.normal(124.0, 14.0, size) + 0.35 * (age - 67.0)
    # proportion of male patients, bounded away from 0 and 1
    male = np.clip(rng.beta(6.0, 4.0, size), 0.075, 0.986)
    trial = (rng.random(size) < 0.55).astype(float)
    multi = (rng.random(size) < (0.40 + 0.25 * trial)).astype(float)
    disc = (rng.random(size) < 0.45).astype(float)
    n_i = np.clip(np.round(np.exp(rng.normal(math.log(150.0), 1.0, size))),
                  25, 5000)
    theta = -1.0 + rng.normal(0.0, math.sqrt(0.15), size)
    p_true = np.clip(expit(theta), _P_CLAMP[0], _P_CLAMP[1])
    v = 1.0 / (n_i * p_true * (1.0 - p_true))
    y = theta + rng.standard_normal(size) * np.sqrt(v)

    x = np.column_stack([time, trial, male, age, sbp, multi, disc])
    if missing_rate > 0.0:
        holes = rng.random(x.shape) < missing_rate
        # keep at least one observed value per column
        for j in range(x.shape[1]):
            if holes[:, j].all():
                holes[0, j] = False
        x[holes] = np.nan
    metas = (
        CovariateMeta("time", "metric"),
        CovariateMeta("trial", "binary"),
        CovariateMeta("male", "metric"),
        CovariateMeta("age", "metric"),
        CovariateMeta("sbp", "metric"),
        CovariateMeta("multi", "binary"),
        CovariateMeta("disc", "binary"),
    )
    return MetaDataset(y, v, x, metas, n_i)
