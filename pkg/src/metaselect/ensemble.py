"""Stabilized tree ensembles: bootstrap forests and selection frequencies.

Trees are grown unpruned on with-replacement resamples of the studies.
The selection matrix A records, per covariate, the fraction of trees that
split on it (diagonal) and, per covariate pair, the fraction of trees in
which the two meet on a root-to-leaf path (off-diagonal).  Thresholding A
at a level lambda yields a marginality-closed model spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import MetaDataset, ModelSpec
from .tree import Tree, TreeControls, grow_tree, tree_to_spec

_NEVER_COLOR = "#e4e4e4"
_RAMP_LOW = (222, 235, 247)
_RAMP_HIGH = (8, 69, 148)


@dataclass
class EnsembleOptions:
    """Bootstrap ensemble settings; individual trees are never pruned."""

    B: int = 100
    lam: float = 0.5
    seed: int = 0
    controls: TreeControls = field(default_factory=TreeControls)

    def __post_init__(self) -> None:
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must lie in (0, 1)")


@dataclass
class SelectionMatrix:
    """Relative selection frequencies from an ensemble of trees."""

    a: np.ndarray
    b: int
    mode: str

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=float)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError("selection matrix must be square")
        if not np.allclose(self.a, self.a.T, atol=1e-12):
            raise ValueError("selection matrix must be symmetric")
        if np.any(self.a < 0.0) or np.any(self.a > 1.0):
            raise ValueError("selection frequencies must lie in [0, 1]")

    @property
    def p(self) -> int:
        return self.a.shape[0]

    def to_csv(self, names=None) -> str:
        labels = list(names) if names is not None else [
            f"x{j}" for j in range(self.p)
        ]
        lines = ["," + ",".join(labels)]
        for i in range(self.p):
            cells = ",".join(repr(float(self.a[i, j])) for j in range(self.p))
            lines.append(f"{labels[i]},{cells}")
        return "\n".join(lines) + "\n"

    def to_dict(self, names=None) -> dict:
        labels = list(names) if names is not None else [
            f"x{j}" for j in range(self.p)
        ]
        return {
            "mode": self.mode,
            "trees": self.b,
            "names": labels,
            "a": [[float(v) for v in row] for row in self.a],
        }

    def to_json(self, names=None) -> str:
        return json.dumps(self.to_dict(names), indent=2)


def _grow_bootstrap(ds: MetaDataset, mode: str, controls: TreeControls,
                    child: np.random.SeedSequence) -> Tree:
    rng = np.random.default_rng(child)
    idx = rng.integers(0, ds.k, ds.k)
    return grow_tree(ds.subset(idx), mode, controls)


def fit_ensemble(ds: MetaDataset, mode: str, opts: EnsembleOptions,
                 n_jobs: int = 1) -> list[Tree]:
    """Grow B unpruned trees on bootstrap resamples of the studies.

    Resample b draws its rows from a generator derived from child b of
    the seed sequence, so results are identical for any worker count.
    """
    ds.require_complete("ensemble growth")
    children = np.random.SeedSequence(opts.seed).spawn(opts.B)
    if n_jobs == 1:
        return [_grow_bootstrap(ds, mode, opts.controls, c) for c in children]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(
        delayed(_grow_bootstrap)(ds, mode, opts.controls, c) for c in children
    )


def selection_matrix(trees: list[Tree], p: int) -> SelectionMatrix:
    """Frequency matrix over an ensemble.

    Diagonal entry i: fraction of trees splitting on covariate i.
    Off-diagonal (i, j): fraction of trees where i and j co-occur on some
    root-to-leaf path.
    """
    if not trees:
        raise ValueError("need at least one tree")
    counts = np.zeros((p, p))
    for tree in trees:
        spec = tree_to_spec(tree)
        for j in spec.mains:
            counts[j, j] += 1.0
        for i, j in spec.interactions:
            counts[i, j] += 1.0
            counts[j, i] += 1.0
    return SelectionMatrix(counts / len(trees), len(trees), trees[0].mode)


def threshold_select(matrix: SelectionMatrix, lam: float) -> ModelSpec:
    """Effects whose stability exceeds lambda.

    Main effect i needs a_ii > lambda.  Pair {i, j} needs both mains
    selected and a_ij / min(a_ii, a_jj) > lambda (0/0 counts as 0).
    All comparisons are strict.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    a = matrix.a
    mains = tuple(i for i in range(matrix.p) if a[i, i] > lam)
    kept = set(mains)
    pairs = []
    for i in mains:
        for j in mains:
            if j <= i:
                continue
            floor = min(a[i, i], a[j, j])
            ratio = 0.0 if floor == 0.0 else a[i, j] / floor
            if ratio > lam:
                pairs.append((i, j))
    return ModelSpec(mains, tuple(pairs))


def _selection_level(a: np.ndarray, i: int, j: int) -> float:
    """Largest lambda below which cell (i, j) would be selected."""
    if i == j:
        return float(a[i, i])
    floor = min(a[i, i], a[j, j])
    if floor == 0.0:
        return 0.0
    return float(min(floor, a[i, j] / floor))


def _band_color(band: int, n_bands: int) -> str:
    if band == 0:
        return _NEVER_COLOR
    t = (band - 1) / max(n_bands - 2, 1)
    rgb = tuple(
        round(lo + (hi - lo) * t) for lo, hi in zip(_RAMP_LOW, _RAMP_HIGH)
    )
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def heatmap_svg(matrix: SelectionMatrix,
                lambda_scale=(0.1, 0.3, 0.5, 0.7, 0.9),
                names=None) -> str:
    """Lower-triangular heatmap of the selection matrix as SVG text.

    Cell color encodes the largest threshold on the given scale at which
    the effect would still be selected; the label is the raw frequency to
    two decimals.  Output bytes are a pure function of the inputs.
    """
    scale = tuple(float(s) for s in lambda_scale)
    if any(not 0.0 < s < 1.0 for s in scale) or list(scale) != sorted(scale):
        raise ValueError("lambda scale must be increasing values in (0, 1)")
    p = matrix.p
    labels = list(names) if names is not None else [f"x{j}" for j in range(p)]
    cell = 46
    left = 14 + 8 * max(len(s) for s in labels)
    top = 16
    legend_h = 64
    width = left + p * cell + 20
    height = top + p * cell + 30 + legend_h
    n_bands = len(scale) + 1

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        '<g font-family="Helvetica,Arial,sans-serif" font-size="12">',
    ]
    for i in range(p):
        y0 = top + i * cell
        parts.append(
            f'<text x="{left - 6}" y="{y0 + cell / 2 + 4:.0f}" '
            f'text-anchor="end">{labels[i]}</text>'
        )
        for j in range(i + 1):
            x0 = left + j * cell
            level = _selection_level(matrix.a, i, j)
            band = sum(1 for s in scale if level > s)
            color = _band_color(band, n_bands)
            text_fill = "#ffffff" if band >= n_bands - 2 else "#000000"
            parts.append(
                f'<rect x="{x0}" y="{y0}" width="{cell}" height="{cell}" '
                f'fill="{color}" stroke="#ffffff" stroke-width="2"/>'
            )
            parts.append(
                f'<text x="{x0 + cell / 2:.0f}" y="{y0 + cell / 2 + 4:.0f}" '
                f'text-anchor="middle" fill="{text_fill}">'
                f'{matrix.a[i, j]:.2f}</text>'
            )
    base_y = top + p * cell + 16
    for j in range(p):
        x0 = left + j * cell + cell / 2
        parts.append(
            f'<text x="{x0:.0f}" y="{base_y}" text-anchor="end" '
            f'transform="rotate(-40 {x0:.0f} {base_y})">{labels[j]}</text>'
        )
    ly = top + p * cell + 46
    parts.append(
        f'<text x="{left}" y="{ly - 8}" font-size="11">largest lambda '
        'still selecting:</text>'
    )
    sw = 58
    for band in range(n_bands):
        x0 = left + band * (sw + 6)
        color = _band_color(band, n_bands)
        label = "never" if band == 0 else f"&gt; {scale[band - 1]:.1f}"
        parts.append(
            f'<rect x="{x0}" y="{ly}" width="{sw}" height="14" '
            f'fill="{color}" stroke="#999999" stroke-width="0.5"/>'
        )
        parts.append(
            f'<text x="{x0 + sw / 2:.0f}" y="{ly + 26}" '
            f'text-anchor="middle" font-size="10">{label}</text>'
        )
    parts.append("</g></svg>")
    return "\n".join(parts) + "\n"
