"""Meta-regression trees grown by between-subgroup heterogeneity.

Studies are recursively partitioned by covariate splits that maximize the
between-subgroup Q statistic.  Fixed effect mode (``"fe"``) weights by
1/v_i throughout; random effects mode (``"re"``) re-estimates the
between-study variance by the moment (DerSimonian-Laird) formula for the
candidate partition and weights by 1/(v_i + tau2) before scoring, for
every candidate split.

Trees can be pruned by cost-complexity with a c * SE cross-validation
rule, and reduced to a marginality-closed model spec: split variables
become main effects, variables meeting on a root-to-leaf path become
interaction pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import MetaDataset, ModelSpec
from .errors import EmptyGroup

_MODES = ("fe", "re")


def _check_mode(mode: str) -> str:
    low = mode.lower()
    if low not in _MODES:
        raise ValueError(f"mode must be 'fe' or 're', got {mode!r}")
    return low


@dataclass
class TreeControls:
    """Growth and pruning controls."""

    minsplit: int = 20
    minbucket: int = 7
    maxdepth: int = 30
    cv_folds: int = 10
    min_qb_gain: float = 0.0

    def __post_init__(self) -> None:
        if self.minbucket < 1:
            raise ValueError("minbucket must be at least 1")
        if self.minsplit < 2:
            raise ValueError("minsplit must be at least 2")
        if self.maxdepth < 1:
            raise ValueError("maxdepth must be at least 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if self.min_qb_gain < 0.0:
            raise ValueError("min_qb_gain must be nonnegative")


@dataclass
class PruneRule:
    """Cost-complexity pruning strength; c = 0 disables pruning."""

    c: float

    def __post_init__(self) -> None:
        if self.c < 0.0:
            raise ValueError("pruning c must be nonnegative")


@dataclass(frozen=True)
class Split:
    """One routing rule: left child takes studies with x[var] <= threshold.

    Binary covariates use threshold 0.5, so the reference level (0) goes
    left and the other level (1) goes right.
    """

    var: int
    kind: str  # "metric" or "binary"
    threshold: float


@dataclass
class TreeNode:
    id: int
    depth: int
    members: np.ndarray
    mean: float = 0.0
    split: Split | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None


@dataclass
class Tree:
    """Grown (possibly pruned) tree over one dataset's studies.

    ``tau2_path`` holds the re-estimated between-study variance after
    each surviving split, in split order; always empty in FE mode.
    """

    root: TreeNode
    mode: str
    tau2_path: tuple[float, ...]
    controls: TreeControls

    @property
    def k(self) -> int:
        return self.root.members.size

    def leaves(self) -> list[TreeNode]:
        out: list[TreeNode] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend((node.right, node.left))
        out.sort(key=lambda n: n.id)
        return out

    def internal_nodes(self) -> list[TreeNode]:
        out = [n for n in self._all_nodes() if not n.is_leaf]
        out.sort(key=lambda n: n.id)
        return out

    def _all_nodes(self) -> list[TreeNode]:
        out: list[TreeNode] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.extend((node.right, node.left))
        return out

    @property
    def n_leaves(self) -> int:
        return len(self.leaves())

    def assign(self, x: np.ndarray) -> np.ndarray:
        """Leaf node id for each row of a covariate matrix."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(x.shape[0], dtype=int)

        def route(node: TreeNode, rows: np.ndarray) -> None:
            if node.is_leaf:
                out[rows] = node.id
                return
            goes_left = x[rows, node.split.var] <= node.split.threshold
            route(node.left, rows[goes_left])
            route(node.right, rows[~goes_left])

        route(self.root, np.arange(x.shape[0]))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Leaf mean for each row of a covariate matrix."""
        ids = self.assign(x)
        means = {leaf.id: leaf.mean for leaf in self.leaves()}
        return np.array([means[i] for i in ids])

    def to_dict(self, names=None) -> dict:
        def node_dict(node: TreeNode) -> dict:
            entry: dict = {
                "id": int(node.id),
                "n": int(node.members.size),
                "mean": float(node.mean),
            }
            if not node.is_leaf:
                split: dict = {
                    "var": int(node.split.var),
                    "kind": node.split.kind,
                    "threshold": float(node.split.threshold),
                }
                if names is not None:
                    split["name"] = names[node.split.var]
                entry["split"] = split
                entry["left"] = node_dict(node.left)
                entry["right"] = node_dict(node.right)
            return entry

        return {
            "mode": self.mode,
            "tau2_path": [float(t) for t in self.tau2_path],
            "controls": {
                "minsplit": self.controls.minsplit,
                "minbucket": self.controls.minbucket,
                "maxdepth": self.controls.maxdepth,
                "cv_folds": self.controls.cv_folds,
                "min_qb_gain": self.controls.min_qb_gain,
            },
            "root": node_dict(self.root),
        }

    def to_json(self, names=None) -> str:
        return json.dumps(self.to_dict(names), indent=2)

    def render(self, names=None) -> str:
        """Indented text rendering, one line per node."""
        lines: list[str] = []

        def var_name(j: int) -> str:
            return names[j] if names is not None else f"x{j}"

        def emit(node: TreeNode, label: str, indent: int) -> None:
            prefix = "  " * indent
            lines.append(
                f"{prefix}{label}: n={node.members.size}, mean={node.mean:.4f}"
            )
            if node.is_leaf:
                return
            name = var_name(node.split.var)
            if node.split.kind == "binary":
                left_label, right_label = f"{name} = 0", f"{name} = 1"
            else:
                t = node.split.threshold
                left_label = f"{name} <= {t:.4g}"
                right_label = f"{name} > {t:.4g}"
            emit(node.left, left_label, indent + 1)
            emit(node.right, right_label, indent + 1)

        emit(self.root, "root", 0)
        return "\n".join(lines)


def qb(ds: MetaDataset, partition, weights) -> float:
    """Between-subgroup heterogeneity of a partition under given weights.

    ``partition`` lists disjoint study index groups; the grand mean is the
    weighted mean over their union.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (ds.k,):
        raise ValueError("weights must have one entry per study")
    if np.any(w <= 0.0):
        raise ValueError("weights must be positive")
    groups = [np.asarray(g, dtype=int) for g in partition]
    for g in groups:
        if g.size == 0:
            raise EmptyGroup("partition contains an empty group")
    if groups:
        combined = np.concatenate(groups)
        if np.unique(combined).size != combined.size:
            raise ValueError("partition groups overlap")
    else:
        raise EmptyGroup("partition has no groups")
    w_tot = sum(float(np.sum(w[g])) for g in groups)
    y_tot = sum(float(np.sum(w[g] * ds.y[g])) for g in groups)
    grand = y_tot / w_tot
    total = 0.0
    for g in groups:
        wg = float(np.sum(w[g]))
        yg = float(np.sum(w[g] * ds.y[g])) / wg
        total += wg * (yg - grand) ** 2
    return total


def _dl_grouped(y: np.ndarray, v: np.ndarray, groups) -> float:
    """Moment tau2 for a group-membership design, truncated at zero.

    Closed form of the general estimator when the design is the group
    indicator matrix.  Unidentifiable cases (no residual df, c <= 0)
    fall back to 0.
    """
    k = y.size
    df = k - len(groups)
    if df <= 0:
        return 0.0
    w0 = 1.0 / v
    q = 0.0
    c = float(np.sum(w0))
    for g in groups:
        a = float(np.sum(w0[g]))
        b = float(np.sum(w0[g] * y[g]))
        q += float(np.sum(w0[g] * y[g] * y[g])) - b * b / a
        c -= float(np.sum(w0[g] * w0[g])) / a
    if c <= 0.0:
        return 0.0
    return max(0.0, (q - df) / c)


def _candidate_cuts(sv: np.ndarray, n: int, minbucket: int):
    """Feasible left-group sizes and midpoint thresholds for sorted values."""
    boundaries = np.flatnonzero(sv[1:] != sv[:-1]) + 1
    if boundaries.size == 0:
        return None
    keep = (boundaries >= minbucket) & (boundaries <= n - minbucket)
    sizes = boundaries[keep]
    if sizes.size == 0:
        return None
    thresholds = 0.5 * (sv[sizes - 1] + sv[sizes])
    return sizes, thresholds


def _scan_splits(y, v, x, scales, leaves, mode, controls):
    """Best admissible split over the current leaf partition.

    ``leaves`` is the full partition as (id, depth, members) triples in
    node id order.  Returns (position in leaves, Split, gain, tau2 after
    the split) or None.  Ties keep the earlier (leaf id, variable index,
    smaller threshold) candidate: blocks are visited in that order and a
    later candidate must win strictly.
    """
    k = y.size
    p = x.shape[1]
    w0 = 1.0 / v
    eligible = []
    for pos, (_, depth, members) in enumerate(leaves):
        if members.size < controls.minsplit or depth >= controls.maxdepth:
            continue
        # A constant outcome can only produce rounding-noise gains.
        if np.all(y[members] == y[members[0]]):
            continue
        eligible.append(pos)
    if not eligible:
        return None

    if mode == "re":
        # Moment aggregates per current leaf, shared by every candidate.
        agg = np.empty((len(leaves), 4))
        for g, (_, _, members) in enumerate(leaves):
            wg = w0[members]
            agg[g] = (
                np.sum(wg),
                np.sum(wg * y[members]),
                np.sum(wg * y[members] * y[members]),
                np.sum(wg * wg),
            )
        q_parts = agg[:, 2] - agg[:, 1] ** 2 / agg[:, 0]
        s_parts = agg[:, 3] / agg[:, 0]
        w0_tot = float(np.sum(w0))
        q_all = float(np.sum(q_parts))
        s_all = float(np.sum(s_parts))
        n_groups = len(leaves)

        # Baseline objective under the current partition's weights.
        df_cur = k - n_groups
        c_cur = w0_tot - s_all
        tau2_cur = 0.0
        if df_cur > 0 and c_cur > 0.0:
            tau2_cur = max(0.0, (q_all - df_cur) / c_cur)
        u = 1.0 / (v + tau2_cur)
        uy = u * y
        leaf_col = np.empty(k, dtype=int)
        for g, (_, _, members) in enumerate(leaves):
            leaf_col[members] = g
        membership = np.zeros((k, n_groups))
        membership[np.arange(k), leaf_col] = 1.0
        wg_cur = u @ membership
        yg_cur = uy @ membership
        qb_cur = float(np.sum(yg_cur**2 / wg_cur)
                       - np.sum(uy) ** 2 / np.sum(u))

    best = None  # (gain, pos, Split, tau2_after)
    for pos in eligible:
        leaf_id, _, members = leaves[pos]
        n_leaf = members.size
        for j in range(p):
            order = np.argsort(x[members, j], kind="stable")
            sm = members[order]
            sv = x[sm, j]
            cuts = _candidate_cuts(sv, n_leaf, controls.minbucket)
            if cuts is None:
                continue
            sizes, thresholds = cuts
            ws = w0[sm]
            ys = y[sm]
            cw = np.concatenate(([0.0], np.cumsum(ws)))
            cwy = np.concatenate(([0.0], np.cumsum(ws * ys)))
            w_leaf, y_leaf = cw[-1], cwy[-1]
            wl, yl = cw[sizes], cwy[sizes]
            wr, yr = w_leaf - wl, y_leaf - yl

            if mode == "fe":
                # With fixed weights the grand mean is unchanged, so the
                # gain reduces to the leaf-local sum-of-squares identity.
                gains = yl**2 / wl + yr**2 / wr - y_leaf**2 / w_leaf
                tau2_cand = np.zeros(sizes.size)
            else:
                cwyy = np.concatenate(([0.0], np.cumsum(ws * ys * ys)))
                cww = np.concatenate(([0.0], np.cumsum(ws * ws)))
                q_rest = q_all - q_parts[pos]
                s_rest = s_all - s_parts[pos]
                ql = cwyy[sizes] - yl**2 / wl
                qr = (cwyy[-1] - cwyy[sizes]) - yr**2 / wr
                dl_ = cww[sizes]
                dr_ = cww[-1] - cww[sizes]
                q_cand = q_rest + ql + qr
                c_cand = w0_tot - (s_rest + dl_ / wl + dr_ / wr)
                df_cand = k - (n_groups + 1)
                tau2_cand = np.zeros(sizes.size)
                ok = (c_cand > 0.0) & (df_cand > 0)
                tau2_cand[ok] = np.maximum(
                    0.0, (q_cand[ok] - df_cand) / c_cand[ok]
                )
                # Re-weighted objective, one weight vector per candidate.
                big_u = 1.0 / (tau2_cand[:, None] + v[None, :])
                big_uy = big_u * y[None, :]
                wg = big_u @ membership
                yg = big_uy @ membership
                w_tot_c = big_u.sum(axis=1)
                y_tot_c = big_uy.sum(axis=1)
                cum_w = np.cumsum(big_u[:, sm], axis=1)
                cum_wy = np.cumsum(big_uy[:, sm], axis=1)
                rows = np.arange(sizes.size)
                wl_c = cum_w[rows, sizes - 1]
                yl_c = cum_wy[rows, sizes - 1]
                wr_c = wg[:, pos] - wl_c
                yr_c = yg[:, pos] - yl_c
                rest = (
                    np.sum(yg**2 / wg, axis=1) - yg[:, pos] ** 2 / wg[:, pos]
                )
                qb_cand = (
                    rest + yl_c**2 / wl_c + yr_c**2 / wr_c
                    - y_tot_c**2 / w_tot_c
                )
                gains = qb_cand - qb_cur

            best_local = int(np.argmax(gains))
            gain = float(gains[best_local])
            if gain <= controls.min_qb_gain:
                continue
            if best is None or gain > best[0]:
                split = Split(j, scales[j], float(thresholds[best_local]))
                best = (gain, pos, split, float(tau2_cand[best_local]))

    if best is None:
        return None
    gain, pos, split, tau2_after = best
    return pos, split, gain, tau2_after


def best_split(ds: MetaDataset, tree: Tree, mode: str | None = None):
    """Best admissible split for the tree's current leaves, if any.

    Returns (leaf id, Split, gain) or None.  ``mode`` defaults to the
    tree's own mode.
    """
    ds.require_complete("split search")
    mode = _check_mode(mode if mode is not None else tree.mode)
    scales = tuple(meta.scale for meta in ds.covariates)
    leaves = [(n.id, n.depth, n.members) for n in tree.leaves()]
    found = _scan_splits(ds.y, ds.v, ds.x, scales, leaves, mode,
                         tree.controls)
    if found is None:
        return None
    pos, split, gain, _ = found
    return leaves[pos][0], split, gain


def _set_means(root: TreeNode, y: np.ndarray, w: np.ndarray) -> None:
    stack = [root]
    while stack:
        node = stack.pop()
        wm = w[node.members]
        node.mean = float(np.sum(wm * y[node.members]) / np.sum(wm))
        if not node.is_leaf:
            stack.extend((node.left, node.right))


def _final_tau2(ds: MetaDataset, root: TreeNode, mode: str) -> float:
    if mode == "fe":
        return 0.0
    groups = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            groups.append(node.members)
        else:
            stack.extend((node.right, node.left))
    return _dl_grouped(ds.y, ds.v, groups)


def grow_tree(ds: MetaDataset, mode: str,
              controls: TreeControls | None = None) -> Tree:
    """Grow a tree by repeated best splits until none is admissible.

    Node means are weighted means of member outcomes under the final
    weights (1/v in FE mode, 1/(v + final tau2) in RE mode).
    """
    ds.require_complete("tree growth")
    mode = _check_mode(mode)
    ctrl = controls if controls is not None else TreeControls()
    scales = tuple(meta.scale for meta in ds.covariates)
    root = TreeNode(0, 0, np.arange(ds.k))
    nodes = {0: root}
    leaf_list = [root]
    tau2_path: list[float] = []
    next_id = 1
    while True:
        leaves = [(n.id, n.depth, n.members) for n in leaf_list]
        found = _scan_splits(ds.y, ds.v, ds.x, scales, leaves, mode, ctrl)
        if found is None:
            break
        pos, split, _, tau2_after = found
        node = leaf_list[pos]
        goes_left = ds.x[node.members, split.var] <= split.threshold
        left = TreeNode(next_id, node.depth + 1, node.members[goes_left])
        right = TreeNode(next_id + 1, node.depth + 1,
                         node.members[~goes_left])
        next_id += 2
        node.split = split
        node.left, node.right = left, right
        nodes[left.id] = left
        nodes[right.id] = right
        leaf_list[pos:pos + 1] = [left, right]
        leaf_list.sort(key=lambda n: n.id)
        if mode == "re":
            tau2_path.append(tau2_after)

    tau2_final = tau2_path[-1] if tau2_path else _final_tau2(ds, root, mode)
    w = 1.0 / (ds.v + (tau2_final if mode == "re" else 0.0))
    _set_means(root, ds.y, w)
    return Tree(root, mode, tuple(tau2_path), ctrl)


def tree_to_spec(tree: Tree) -> ModelSpec:
    """Model spec implied by a tree: split variables as main effects,
    path-co-occurring variable pairs as interactions."""
    mains: set[int] = set()
    pairs: set[tuple[int, int]] = set()

    def walk(node: TreeNode, ancestors: tuple[int, ...]) -> None:
        if node.is_leaf:
            return
        var = node.split.var
        mains.add(var)
        for prev in ancestors:
            if prev != var:
                pairs.add((min(prev, var), max(prev, var)))
        walk(node.left, ancestors + (var,))
        walk(node.right, ancestors + (var,))

    walk(tree.root, ())
    return ModelSpec(tuple(mains), tuple(pairs))


def default_prune_c(mode: str, k: int) -> float:
    """Recommended pruning strength by mode and study count."""
    mode = _check_mode(mode)
    if mode == "fe":
        return 1.0 if k < 80 else 0.5
    return 1.0 if k < 120 else 0.5


# ---------------------------------------------------------------------
# Cost-complexity pruning


def _node_table(tree: Tree, y: np.ndarray, w: np.ndarray):
    """Per-node leaf risk and child links for the weakest-link sweep."""
    risk: dict[int, float] = {}
    children: dict[int, tuple[int, int]] = {}
    stack = [tree.root]
    while stack:
        node = stack.pop()
        wm = w[node.members]
        mean = float(np.sum(wm * y[node.members]) / np.sum(wm))
        resid = y[node.members] - mean
        risk[node.id] = float(np.sum(wm * resid * resid))
        if not node.is_leaf:
            children[node.id] = (node.left.id, node.right.id)
            stack.extend((node.left, node.right))
    return risk, children


def _subtree_sequence(tree: Tree, y: np.ndarray, w: np.ndarray):
    """Weakest-link sequence [(alpha, kept internal ids)], alpha rising.

    The first entry has alpha 0; the last keeps nothing (root-only tree).
    """
    risk, children = _node_table(tree, y, w)
    kept = set(children)
    ids_desc = sorted(risk, reverse=True)
    seq: list[tuple[float, frozenset[int]]] = [(0.0, frozenset(kept))]
    while kept:
        sub_risk: dict[int, float] = {}
        n_leaves: dict[int, int] = {}
        for node_id in ids_desc:
            if node_id in kept:
                a, b = children[node_id]
                sub_risk[node_id] = sub_risk[a] + sub_risk[b]
                n_leaves[node_id] = n_leaves[a] + n_leaves[b]
            else:
                sub_risk[node_id] = risk[node_id]
                n_leaves[node_id] = 1
        link = {
            t: (risk[t] - sub_risk[t]) / (n_leaves[t] - 1) for t in kept
        }
        alpha = min(link.values())
        cut = alpha + 1e-12 * (1.0 + abs(alpha))
        drop = {t for t, g in link.items() if g <= cut}
        # Removing a node removes its whole subtree from the kept set.
        changed = True
        while changed:
            changed = False
            for t in list(kept):
                if t in drop:
                    continue
                parent_dropped = False
                for d in drop:
                    a, b = children[d]
                    if t in (a, b):
                        parent_dropped = True
                        break
                if parent_dropped:
                    drop.add(t)
                    changed = True
        kept -= drop
        alpha = max(alpha, seq[-1][0])
        seq.append((alpha, frozenset(kept)))
    return seq


def _pick_subtree(seq, alpha: float) -> frozenset:
    """Kept-set whose alpha interval contains the target penalty."""
    chosen = seq[0][1]
    for a, kept in seq:
        if a <= alpha:
            chosen = kept
        else:
            break
    return chosen


def _collapse(tree: Tree, kept: frozenset) -> TreeNode:
    def copy(node: TreeNode) -> TreeNode:
        fresh = TreeNode(node.id, node.depth, node.members.copy(), node.mean)
        if not node.is_leaf and node.id in kept:
            fresh.split = node.split
            fresh.left = copy(node.left)
            fresh.right = copy(node.right)
        return fresh

    return copy(tree.root)


def _leaf_groups(root: TreeNode) -> list[np.ndarray]:
    groups = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            groups.append(node.members)
        else:
            stack.extend((node.right, node.left))
    return groups


def _leaf_means_under(root: TreeNode, kept: frozenset, y, w) -> dict[int, float]:
    """Means of the leaves of the subtree defined by a kept-set."""
    means: dict[int, float] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf or node.id not in kept:
            wm = w[node.members]
            means[node.id] = float(np.sum(wm * y[node.members]) / np.sum(wm))
        else:
            stack.extend((node.right, node.left))
    return means


def _predict_kept(root: TreeNode, kept: frozenset, x: np.ndarray,
                  means: dict[int, float]) -> np.ndarray:
    out = np.empty(x.shape[0])

    def route(node: TreeNode, rows: np.ndarray) -> None:
        if rows.size == 0:
            return
        if node.is_leaf or node.id not in kept:
            out[rows] = means[node.id]
            return
        goes_left = x[rows, node.split.var] <= node.split.threshold
        route(node.left, rows[goes_left])
        route(node.right, rows[~goes_left])

    route(root, np.arange(x.shape[0]))
    return out


def prune_tree(ds: MetaDataset, tree: Tree, rule: PruneRule,
               seed: int = 0) -> Tree:
    """Cost-complexity pruning with the c * SE cross-validation rule.

    The weakest-link penalty sequence of the grown tree defines candidate
    subtree sizes; each size's prediction error is estimated by
    cross-validation (folds drawn from ``seed``), and the smallest
    subtree within ``rule.c`` standard errors of the minimum is returned.
    ``rule.c = 0`` returns the tree unchanged.  Errors are weighted
    squared prediction errors with 1/v weights in FE mode and
    1/(v + tau2) weights, at the grown tree's final tau2, in RE mode.
    """
    if rule.c == 0.0 or tree.root.is_leaf:
        return tree
    folds = min(tree.controls.cv_folds, ds.k)
    if folds < 2:
        return tree
    tau2_fin = _final_tau2(ds, tree.root, tree.mode)
    w = 1.0 / (ds.v + (tau2_fin if tree.mode == "re" else 0.0))
    seq = _subtree_sequence(tree, ds.y, w)
    if len(seq) < 2:
        return tree
    alphas = [a for a, _ in seq]
    # Geometric-mean representatives of the penalty intervals.
    reps = [
        math.sqrt(alphas[i] * alphas[i + 1]) for i in range(len(alphas) - 1)
    ]
    reps.append(math.inf)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = rng.permutation(ds.k)
    loss = np.zeros((ds.k, len(seq)))
    bounds = np.linspace(0, ds.k, folds + 1).astype(int)
    for f in range(folds):
        test_idx = perm[bounds[f]:bounds[f + 1]]
        if test_idx.size == 0:
            continue
        mask = np.ones(ds.k, dtype=bool)
        mask[test_idx] = False
        train_idx = np.flatnonzero(mask)
        sub = ds.subset(train_idx)
        fold_tree = grow_tree(sub, tree.mode, tree.controls)
        fold_seq = _subtree_sequence(fold_tree, sub.y, w[train_idx])
        x_test = ds.x[test_idx]
        for col, rep_alpha in enumerate(reps):
            kept = _pick_subtree(fold_seq, rep_alpha)
            means = _leaf_means_under(fold_tree.root, kept, sub.y,
                                      w[train_idx])
            pred = _predict_kept(fold_tree.root, kept, x_test, means)
            loss[test_idx, col] = w[test_idx] * (ds.y[test_idx] - pred) ** 2

    r_cv = loss.sum(axis=0)
    se = loss.std(axis=0, ddof=1) * math.sqrt(ds.k)
    j_min = int(np.argmin(r_cv))
    threshold = r_cv[j_min] + rule.c * se[j_min]
    j_star = j_min
    for j in range(len(seq) - 1, -1, -1):
        if r_cv[j] <= threshold:
            j_star = j
            break
    kept = seq[j_star][1]
    root = _collapse(tree, kept)

    tau2_path: tuple[float, ...] = ()
    if tree.mode == "re":
        # Replay the surviving splits in growth order so the recorded
        # tau2 path matches a direct regrowth of the pruned structure.
        path = []
        groups: list[np.ndarray] = [tree.root.members]
        surviving = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                surviving[node.id] = node
                stack.extend((node.right, node.left))
        for node_id in sorted(surviving):
            node = surviving[node_id]
            for pos, g in enumerate(groups):
                if g.size == node.members.size and np.array_equal(
                        g, node.members):
                    groups[pos:pos + 1] = [node.left.members,
                                           node.right.members]
                    break
            path.append(_dl_grouped(ds.y, ds.v, groups))
        tau2_path = tuple(path)

    tau2_new = _final_tau2(ds, root, tree.mode)
    w_new = 1.0 / (ds.v + (tau2_new if tree.mode == "re" else 0.0))
    _set_means(root, ds.y, w_new)
    return Tree(root, tree.mode, tau2_path, tree.controls)
