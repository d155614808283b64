import numpy as np
import pytest

from metaselect import (
    CovariateMeta,
    EmptyGroup,
    MetaDataset,
    ModelSpec,
    PruneRule,
    Split,
    Tree,
    TreeControls,
    TreeNode,
    best_split,
    build_design,
    default_prune_c,
    estimate_tau2,
    grow_tree,
    prune_tree,
    qb,
    tree_to_spec,
)
from metaselect.tree import _dl_grouped

from conftest import random_dataset


def _plain_ds(y, v, x, scales=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if scales is None:
        scales = ["metric"] * x.shape[1]
    covs = [CovariateMeta(f"x{j}", s) for j, s in enumerate(scales)]
    return MetaDataset(y=np.asarray(y, float), v=np.asarray(v, float),
                       x=x, covariates=covs)


def _root_tree(ds, mode, controls=None):
    ctrl = controls if controls is not None else TreeControls()
    return Tree(TreeNode(0, 0, np.arange(ds.k)), mode, (), ctrl)


def _cuts_for(values, minbucket):
    # candidate thresholds: midpoints between consecutive sorted uniques,
    # keeping only cuts leaving >= minbucket on both sides
    sv = np.sort(values)
    out = []
    n = sv.size
    for i in range(1, n):
        if sv[i] != sv[i - 1] and minbucket <= i <= n - minbucket:
            out.append(0.5 * (sv[i - 1] + sv[i]))
    return sorted(set(out))


def _brute_force_root_split(ds, mode, controls):
    """Exhaustive best root split via direct qb evaluation."""
    members = np.arange(ds.k)
    if ds.k < controls.minsplit:
        return None
    best = None
    for var in range(ds.p):
        for cut in _cuts_for(ds.x[members, var], controls.minbucket):
            left = members[ds.x[members, var] <= cut]
            right = members[ds.x[members, var] > cut]
            if mode == "fe":
                w = 1.0 / ds.v
            else:
                # independent route: DL through the regression module on
                # a group-indicator design
                ind = (ds.x[:, var] > cut).astype(float)
                ds_ind = _plain_ds(ds.y, ds.v, ind, ["binary"])
                X = build_design(ds_ind, ModelSpec((0,), ()))
                tau2 = estimate_tau2(ds_ind, X, "dl")
                w = 1.0 / (ds.v + tau2)
            gain = qb(ds, [left, right], w)
            if gain <= controls.min_qb_gain:
                continue
            if best is None or gain > best[0] + 1e-11 * max(1.0, best[0]):
                best = (gain, var, cut)
    return best


class TestQb:
    def test_single_group_zero(self, rng):
        ds = random_dataset(rng, k=8, p=1)
        assert qb(ds, [np.arange(8)], np.full(8, 2.0)) == 0.0

    def test_two_singletons_hand_value(self):
        ds = _plain_ds([0.0, 2.0], [1.0, 1.0], [[0.0], [1.0]])
        got = qb(ds, [[0], [1]], [1.0, 1.0])
        assert got == pytest.approx(2.0, abs=1e-14)

    def test_constant_outcome_zero_everywhere(self, rng):
        k = 9
        ds = _plain_ds([0.7] * k, [0.2] * k, rng.normal(size=(k, 1)))
        w = rng.uniform(1.0, 3.0, size=k)
        for split_at in (3, 5, 7):
            part = [np.arange(split_at), np.arange(split_at, k)]
            assert qb(ds, part, w) == pytest.approx(0.0, abs=1e-20)

    def test_empty_group_rejected(self, rng):
        ds = random_dataset(rng, k=5, p=1)
        with pytest.raises(EmptyGroup):
            qb(ds, [np.arange(5), np.array([], dtype=int)], np.ones(5))

    def test_overlap_rejected(self, rng):
        ds = random_dataset(rng, k=5, p=1)
        with pytest.raises(ValueError):
            qb(ds, [[0, 1, 2], [2, 3, 4]], np.ones(5))

    def test_matches_direct_formula(self, rng):
        ds = random_dataset(rng, k=20, p=1)
        w = rng.uniform(0.5, 4.0, size=20)
        groups = [np.arange(0, 7), np.arange(7, 12), np.arange(12, 20)]
        grand = np.sum(w * ds.y) / np.sum(w)
        want = sum(
            np.sum(w[g]) * (np.sum(w[g] * ds.y[g]) / np.sum(w[g]) - grand) ** 2
            for g in groups
        )
        assert qb(ds, groups, w) == pytest.approx(want, abs=1e-12)


class TestGroupedDl:
    @pytest.mark.parametrize("seed", range(30))
    def test_matches_regression_route(self, seed):
        # grouped closed form vs the general moment estimator on the
        # equivalent indicator design
        rng = np.random.default_rng(41_000 + seed)
        k = int(rng.integers(8, 26))
        y = rng.normal(size=k)
        v = rng.uniform(0.05, 0.4, size=k)
        n_groups = int(rng.integers(2, 4))
        labels = rng.integers(0, n_groups, size=k)
        # ensure no empty group
        labels[:n_groups] = np.arange(n_groups)
        groups = [np.flatnonzero(labels == g) for g in range(n_groups)]
        got = _dl_grouped(y, v, groups)

        x = np.zeros((k, n_groups - 1))
        for g in range(1, n_groups):
            x[labels == g, g - 1] = 1.0
        ds = _plain_ds(y, v, x, ["binary"] * (n_groups - 1))
        X = build_design(ds, ModelSpec(tuple(range(n_groups - 1)), ()))
        want = estimate_tau2(ds, X, "dl")
        assert got == pytest.approx(want, abs=1e-10)


class TestBestSplit:
    def test_monotone_covariate_wins(self, rng):
        k = 40
        x = np.zeros((k, 3))
        x[:, 1] = np.linspace(-1, 1, k)
        x[:, 0] = 0.0
        x[:, 2] = 0.0
        y = np.linspace(0.0, 3.0, k)
        ds = _plain_ds(y, np.full(k, 0.1), x)
        got = best_split(ds, _root_tree(ds, "fe"))
        assert got is not None
        leaf_id, split, gain = got
        assert leaf_id == 0
        assert split.var == 1
        assert gain > 0

    def test_small_sample_gate(self, rng):
        ds = random_dataset(rng, k=19, p=2)
        assert best_split(ds, _root_tree(ds, "fe")) is None
        assert best_split(ds, _root_tree(ds, "re")) is None

    @pytest.mark.parametrize("seed", range(200))
    def test_fe_matches_brute_force(self, seed):
        rng = np.random.default_rng(52_000 + seed)
        k = int(rng.integers(20, 31))
        p = int(rng.integers(1, 5))
        binary = tuple(j for j in range(p) if rng.random() < 0.3)
        ds = random_dataset(rng, k=k, p=p, tau2=0.05, binary=binary,
                            beta={0: 0.8})
        controls = TreeControls()
        got = best_split(ds, _root_tree(ds, "fe", controls))
        want = _brute_force_root_split(ds, "fe", controls)
        if want is None:
            assert got is None
            return
        _, split, gain = got
        assert split.var == want[1]
        assert split.threshold == pytest.approx(want[2], abs=1e-12)
        assert gain == pytest.approx(want[0], abs=1e-9)

    @pytest.mark.parametrize("seed", range(50))
    def test_re_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(53_000 + seed)
        k = int(rng.integers(20, 28))
        p = int(rng.integers(1, 4))
        ds = random_dataset(rng, k=k, p=p, tau2=0.1, beta={0: 0.8})
        controls = TreeControls()
        got = best_split(ds, _root_tree(ds, "re", controls))
        want = _brute_force_root_split(ds, "re", controls)
        if want is None:
            assert got is None
            return
        _, split, gain = got
        assert split.var == want[1]
        assert split.threshold == pytest.approx(want[2], abs=1e-12)
        assert gain == pytest.approx(want[0], abs=1e-9)


def _naive_grow_fe(ds, controls):
    """Pure-python greedy grower used as a full-structure oracle."""
    root = {"id": 0, "depth": 0, "members": np.arange(ds.k), "split": None,
            "left": None, "right": None}
    leaves = [root]
    next_id = 1
    w = 1.0 / ds.v
    while True:
        best = None
        for leaf in leaves:  # kept sorted by id
            members = leaf["members"]
            if members.size < controls.minsplit:
                continue
            if leaf["depth"] >= controls.maxdepth:
                continue
            if np.all(ds.y[members] == ds.y[members][0]):
                continue
            base = qb(ds, [l["members"] for l in leaves], w) \
                if len(leaves) > 1 else 0.0
            for var in range(ds.p):
                for cut in _cuts_for(ds.x[members, var], controls.minbucket):
                    left = members[ds.x[members, var] <= cut]
                    right = members[ds.x[members, var] > cut]
                    part = [l["members"] for l in leaves if l is not leaf]
                    part += [left, right]
                    gain = qb(ds, part, w) - base
                    if gain <= controls.min_qb_gain:
                        continue
                    if best is None or gain > best[0] * (1 + 1e-11) + 1e-13:
                        best = (gain, leaf, var, cut)
        if best is None:
            break
        _, leaf, var, cut = best
        members = leaf["members"]
        mask = ds.x[members, var] <= cut
        scale = ds.covariates[var].scale
        leaf["split"] = (var, scale, cut if scale == "metric" else 0.5)
        leaf["left"] = {"id": next_id, "depth": leaf["depth"] + 1,
                        "members": members[mask], "split": None,
                        "left": None, "right": None}
        leaf["right"] = {"id": next_id + 1, "depth": leaf["depth"] + 1,
                         "members": members[~mask], "split": None,
                         "left": None, "right": None}
        next_id += 2
        leaves.remove(leaf)
        leaves.extend([leaf["left"], leaf["right"]])
        leaves.sort(key=lambda l: l["id"])
    return root


def _structure(node):
    if isinstance(node, TreeNode):
        if node.is_leaf:
            return ("leaf", tuple(sorted(node.members.tolist())))
        return ("split", node.split.var,
                round(float(node.split.threshold), 9),
                _structure(node.left), _structure(node.right))
    if node["split"] is None:
        return ("leaf", tuple(sorted(node["members"].tolist())))
    var, scale, thr = node["split"]
    return ("split", var, round(float(thr), 9),
            _structure(node["left"]), _structure(node["right"]))


class TestGrowTree:
    def test_constant_outcome_single_leaf(self, rng):
        k = 30
        ds = _plain_ds([0.4] * k, [0.1] * k, rng.normal(size=(k, 2)))
        tree = grow_tree(ds, "fe")
        assert tree.n_leaves == 1
        assert tree_to_spec(tree) == ModelSpec.empty()

    def test_recovers_planted_threshold(self, rng):
        k = 100
        age = rng.normal(60.0, 8.0, size=k)
        med = float(np.median(age))
        y = (age > med).astype(float) + rng.normal(scale=0.05, size=k)
        x = np.column_stack([age, rng.normal(size=k)])
        ds = _plain_ds(y, np.full(k, 0.05), x)
        tree = grow_tree(ds, "fe")
        split = tree.root.split
        assert split is not None and split.var == 0
        below = age[age <= med].max()
        above = age[age > med].min()
        assert below <= split.threshold <= above

    def test_re_homogeneous_tau2_path_near_zero(self, rng):
        k = 60
        x = rng.normal(size=(k, 2))
        y = 1.0 * (x[:, 0] > 0) + rng.normal(scale=0.02, size=k)
        ds = _plain_ds(y, np.full(k, 0.3), x)
        tree = grow_tree(ds, "re")
        assert len(tree.tau2_path) == len(tree.internal_nodes())
        assert all(t < 0.05 for t in tree.tau2_path[1:])

    def test_fe_has_empty_tau2_path(self, rng):
        ds = random_dataset(rng, k=50, p=2, beta={0: 1.0})
        tree = grow_tree(ds, "fe")
        assert tree.tau2_path == ()

    def test_leaves_partition_studies(self, rng):
        ds = random_dataset(rng, k=80, p=3, beta={0: 1.0, (0, 1): 0.8})
        for mode in ("fe", "re"):
            tree = grow_tree(ds, mode)
            all_members = np.concatenate(
                [leaf.members for leaf in tree.leaves()])
            assert sorted(all_members.tolist()) == list(range(80))

    def test_deterministic(self, rng):
        ds = random_dataset(rng, k=70, p=3, tau2=0.05, beta={0: 0.8})
        t1 = grow_tree(ds, "re")
        t2 = grow_tree(ds, "re")
        assert t1.to_dict() == t2.to_dict()
        assert t1.tau2_path == t2.tau2_path

    @pytest.mark.parametrize("seed", range(20))
    def test_fe_full_growth_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(54_000 + seed)
        k = int(rng.integers(24, 40))
        p = int(rng.integers(1, 4))
        binary = tuple(j for j in range(p) if rng.random() < 0.25)
        ds = random_dataset(rng, k=k, p=p, tau2=0.08, binary=binary,
                            beta={0: 1.0})
        controls = TreeControls(minsplit=10, minbucket=4, maxdepth=4)
        got = grow_tree(ds, "fe", controls)
        want = _naive_grow_fe(ds, controls)
        assert _structure(got.root) == _structure(want)

    def test_respects_minbucket(self, rng):
        ds = random_dataset(rng, k=60, p=2, beta={0: 1.5})
        tree = grow_tree(ds, "fe")
        for leaf in tree.leaves():
            assert leaf.members.size >= tree.controls.minbucket

    def test_respects_maxdepth(self, rng):
        ds = random_dataset(rng, k=200, p=3, v_range=(0.001, 0.002),
                            beta={0: 2.0, 1: 1.0, (0, 1): 1.0})
        controls = TreeControls(minsplit=4, minbucket=2, maxdepth=3)
        tree = grow_tree(ds, "fe", controls)
        assert max(leaf.depth for leaf in tree.leaves()) <= 3


class TestDefaultPruneC:
    def test_fe_boundaries(self):
        assert default_prune_c("fe", 79) == 1.0
        assert default_prune_c("fe", 80) == 0.5

    def test_re_boundaries(self):
        assert default_prune_c("re", 119) == 1.0
        assert default_prune_c("re", 120) == 0.5


class TestPruneTree:
    def test_c_zero_is_identity(self, rng):
        ds = random_dataset(rng, k=60, p=2, beta={0: 1.0})
        tree = grow_tree(ds, "fe")
        pruned = prune_tree(ds, tree, PruneRule(0.0), seed=1)
        assert pruned.to_dict() == tree.to_dict()

    def test_prunes_to_subtree(self, rng):
        ds = random_dataset(rng, k=90, p=3, tau2=0.08, beta={0: 1.0})
        tree = grow_tree(ds, "fe")
        pruned = prune_tree(ds, tree, PruneRule(1.0), seed=7)
        kept_ids = {n.id for n in pruned.internal_nodes()}
        orig_ids = {n.id for n in tree.internal_nodes()}
        assert kept_ids <= orig_ids
        members = np.concatenate([l.members for l in pruned.leaves()])
        assert sorted(members.tolist()) == list(range(ds.k))

    def test_noise_collapses_to_root(self):
        root_only = 0
        for rep in range(100):
            rng = np.random.default_rng(60_000 + rep)
            k = 60
            x = rng.normal(size=(k, 2))
            v = np.full(k, 0.1)
            y = rng.normal(scale=np.sqrt(v))
            ds = _plain_ds(y, v, x)
            tree = grow_tree(ds, "fe")
            pruned = prune_tree(ds, tree, PruneRule(1.0), seed=rep)
            if pruned.n_leaves == 1:
                root_only += 1
        assert root_only >= 90

    def test_deterministic_given_seed(self, rng):
        ds = random_dataset(rng, k=80, p=3, tau2=0.05, beta={0: 0.7})
        tree = grow_tree(ds, "re")
        p1 = prune_tree(ds, tree, PruneRule(0.5), seed=11)
        p2 = prune_tree(ds, tree, PruneRule(0.5), seed=11)
        assert p1.to_dict() == p2.to_dict()

    def test_re_tau2_path_tracks_internal_nodes(self, rng):
        ds = random_dataset(rng, k=90, p=3, tau2=0.1,
                            beta={0: 1.0, (0, 1): 0.8})
        tree = grow_tree(ds, "re")
        pruned = prune_tree(ds, tree, PruneRule(0.5), seed=3)
        assert len(pruned.tau2_path) == len(pruned.internal_nodes())

    def test_strong_signal_survives(self, rng):
        ds = random_dataset(rng, k=100, p=2, v_range=(0.01, 0.03),
                            beta={0: 3.0})
        tree = grow_tree(ds, "fe")
        pruned = prune_tree(ds, tree, PruneRule(1.0), seed=5)
        assert pruned.n_leaves >= 2
        assert 0 in tree_to_spec(pruned).mains


def _hand_tree(splits, k=40):
    """Build a tree from nested (var, left, right) tuples; None = leaf."""
    counter = [0]

    def build(node_spec, depth, members):
        nid = counter[0]
        counter[0] += 1
        if node_spec is None:
            return TreeNode(nid, depth, members)
        var, left_spec, right_spec = node_spec
        half = members.size // 2
        node = TreeNode(nid, depth, members,
                        split=Split(var, "metric", 0.0))
        node.left = build(left_spec, depth + 1, members[:half])
        node.right = build(right_spec, depth + 1, members[half:])
        return node

    root = build(splits, 0, np.arange(k))
    return Tree(root, "fe", (), TreeControls())


class TestTreeToSpec:
    def test_single_leaf_empty(self):
        assert tree_to_spec(_hand_tree(None)) == ModelSpec.empty()

    def test_chain_gives_pair(self):
        # root splits 3, left child splits 1
        tree = _hand_tree((3, (1, None, None), None))
        spec = tree_to_spec(tree)
        assert spec.mains == (1, 3)
        assert spec.interactions == ((1, 3),)

    def test_siblings_do_not_pair(self):
        # root splits 0; children split 1 and 2: pairs only with the root
        tree = _hand_tree((0, (1, None, None), (2, None, None)))
        spec = tree_to_spec(tree)
        assert spec.mains == (0, 1, 2)
        assert spec.interactions == ((0, 1), (0, 2))

    def test_repeated_variable_not_self_paired(self):
        tree = _hand_tree((0, (0, None, None), None))
        spec = tree_to_spec(tree)
        assert spec.mains == (0,)
        assert spec.interactions == ()

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_path_enumeration_oracle(self, seed):
        rng = np.random.default_rng(55_000 + seed)
        ds = random_dataset(rng, k=60, p=4, tau2=0.05,
                            beta={0: 1.0, (0, 1): 1.0, 2: 0.5})
        tree = grow_tree(ds, "fe",
                         TreeControls(minsplit=8, minbucket=3, maxdepth=5))
        # oracle: collect split variables along every root-to-leaf path
        paths = []

        def walk(node, acc):
            if node.is_leaf:
                paths.append(acc)
                return
            walk(node.left, acc + [node.split.var])
            walk(node.right, acc + [node.split.var])

        walk(tree.root, [])
        mains = sorted({v for path in paths for v in path})
        pairs = set()
        for path in paths:
            for i in range(len(path)):
                for j in range(i + 1, len(path)):
                    if path[i] != path[j]:
                        pairs.add((min(path[i], path[j]),
                                   max(path[i], path[j])))
        spec = tree_to_spec(tree)
        assert list(spec.mains) == mains
        assert set(spec.interactions) == pairs
        assert spec.is_closed


class TestTreeSerialization:
    def test_round_trip_fields(self, rng):
        ds = random_dataset(rng, k=60, p=2, beta={0: 1.2})
        tree = grow_tree(ds, "fe")
        d = tree.to_dict(("age", "sbp"))
        assert d["mode"] == "fe"
        assert d["root"]["n"] == 60
        if tree.root.split is not None:
            assert d["root"]["split"]["name"] in ("age", "sbp")

    def test_render_mentions_split_names(self, rng):
        ds = random_dataset(rng, k=60, p=2, binary=(1,),
                            beta={0: 1.5, 1: 1.0})
        tree = grow_tree(ds, "fe")
        text = tree.render(("age", "fl"))
        assert "root" in text
        if tree.root.split is not None:
            name = ("age", "fl")[tree.root.split.var]
            assert name in text

    def test_assign_routes_all_rows(self, rng):
        ds = random_dataset(rng, k=60, p=2, beta={0: 1.2})
        tree = grow_tree(ds, "fe")
        labels = tree.assign(ds.x)
        leaf_ids = {leaf.id for leaf in tree.leaves()}
        assert set(labels.tolist()) <= leaf_ids
        # members recorded during growth agree with routing
        for leaf in tree.leaves():
            assert np.all(labels[leaf.members] == leaf.id)
