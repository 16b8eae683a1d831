import pytest
from hypothesis import given, settings, strategies as st

from dappecc.topology import TopologyError, TreeSpec, build_tree


def full_tree(height=6, fanout=2, c_cpu=20):
    return build_tree(TreeSpec(height=height, fanouts=fanout, c_cpu=c_cpu))


class TestBuildTree:
    def test_paper_shape_height6_fanout2(self):
        t = full_tree()
        assert len(t.leaves) == 32
        assert t.capacity(t.root_id) == 120
        assert t.level(t.root_id) == 5

    def test_degenerate_single_node(self):
        t = build_tree(TreeSpec(height=1, fanouts=(), c_cpu=20))
        root = t.node(t.root_id)
        assert root.level == 0 and root.capacity == 20
        assert t.leaves == [t.root_id]

    def test_pruning_keeps_only_poa_regions(self):
        # 4 grid cells, one empty: its leaf goes; internal nodes with a
        # surviving descendant stay.
        t = build_tree(TreeSpec(height=3, grid_rows=2, grid_cols=2,
                                poa_cells=((0, 0), (0, 1), (1, 0))))
        assert len(t.leaves) == 3
        for n in t.nodes.values():
            if not n.is_leaf:
                assert n.children
        # every remaining node has a PoA below it
        for n in t.nodes.values():
            assert any(t.in_subtree(leaf, n.id) for leaf in t.leaves)

    def test_capacity_override(self):
        t = build_tree(TreeSpec(height=2, fanouts=2, c_cpu=20,
                                capacity_overrides={1: 17}))
        assert t.capacity(t.root_id) == 17

    def test_no_poas_is_an_error(self):
        with pytest.raises(TopologyError):
            build_tree(TreeSpec(height=2, fanouts=2, poa_mask=(False, False)))

    def test_level_zero_iff_leaf(self):
        t = build_tree(TreeSpec(height=4, fanouts=(3, 2, 2)))
        for n in t.nodes.values():
            assert (n.level == 0) == (not n.children)


class TestPaths:
    def test_leaf_path_spans_all_levels(self):
        t = full_tree()
        path = t.path_to_root(t.leaves[0])
        assert len(path) == 6
        assert path[-1] == t.root_id
        assert [t.level(x) for x in path] == [0, 1, 2, 3, 4, 5]

    def test_root_path_is_fixed_point(self):
        t = full_tree()
        assert t.path_to_root(t.root_id) == (t.root_id,)

    def test_mid_level_path_length(self):
        t = full_tree()
        lvl2 = next(n.id for n in t.nodes.values() if n.level == 2)
        assert len(t.path_to_root(lvl2)) == 4

    def test_unknown_id_raises(self):
        t = full_tree()
        with pytest.raises(TopologyError):
            t.path_to_root(9999)


class TestFeasiblePrefix:
    def test_rt_prefix_stops_at_level_two(self):
        t = full_tree()
        prefix = t.feasible_prefix(t.leaves[0], 3)
        assert [t.level(x) for x in prefix] == [0, 1, 2]
        assert prefix == t.path_to_root(t.leaves[0])[:3]

    def test_non_rt_prefix_reaches_root(self):
        t = full_tree()
        prefix = t.feasible_prefix(t.leaves[5], 6)
        assert prefix == t.path_to_root(t.leaves[5])
        assert prefix[-1] == t.root_id

    def test_prefix_of_one_is_the_poa(self):
        t = full_tree()
        assert t.feasible_prefix(t.leaves[3], 1) == (t.leaves[3],)

    def test_prefix_clips_at_path_length(self):
        t = build_tree(TreeSpec(height=2, fanouts=2))
        assert len(t.feasible_prefix(t.leaves[0], 3)) == 2

    def test_non_leaf_poa_rejected(self):
        t = full_tree()
        with pytest.raises(TopologyError):
            t.feasible_prefix(t.root_id, 3)


class TestIsAncestor:
    def test_root_above_every_leaf(self):
        t = full_tree()
        assert all(t.is_ancestor(t.root_id, leaf) for leaf in t.leaves)

    def test_strict_no_self(self):
        t = full_tree()
        assert not t.is_ancestor(t.leaves[0], t.leaves[0])

    def test_siblings_are_not_ancestors(self):
        t = full_tree()
        assert not t.is_ancestor(t.leaves[0], t.leaves[1])
        assert not t.is_ancestor(t.leaves[1], t.leaves[0])


@st.composite
def tree_specs(draw):
    height = draw(st.integers(min_value=1, max_value=4))
    fanouts = tuple(draw(st.lists(st.integers(1, 3), min_size=height - 1,
                                  max_size=height - 1)))
    n_leaves = 1
    for f in fanouts:
        n_leaves *= f
    mask = tuple(draw(st.lists(st.booleans(), min_size=n_leaves, max_size=n_leaves)))
    if not any(mask):
        mask = (True,) + mask[1:]
    return TreeSpec(height=height, fanouts=fanouts, poa_mask=mask)


@settings(max_examples=60, deadline=None)
@given(tree_specs(), st.integers(1, 6))
def test_prefix_is_contiguous_and_level_increasing(spec, k):
    t = build_tree(spec)
    for leaf in t.leaves:
        prefix = t.feasible_prefix(leaf, k)
        path = t.path_to_root(leaf)
        assert prefix == path[:len(prefix)]
        levels = [t.level(x) for x in prefix]
        assert levels == sorted(set(levels))


@settings(max_examples=60, deadline=None)
@given(tree_specs())
def test_levels_partition_the_leaves(spec):
    t = build_tree(spec)
    for level in range(t.height):
        nodes = [n for n in t.nodes.values() if n.level == level]
        if not nodes:
            continue
        counts = [sum(1 for leaf in t.leaves if t.in_subtree(leaf, n.id))
                  for n in nodes]
        assert sum(counts) == len(t.leaves)
        assert all(c >= 1 for c in counts)  # pruning leaves no empty regions
