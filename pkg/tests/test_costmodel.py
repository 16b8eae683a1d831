import pytest
from hypothesis import given, settings, strategies as st

from dappecc.costmodel import (CostDomainError, PlacementSnapshot, beta,
                               check_feasible, comp_cost, mig_cost, objective)
from dappecc.topology import TreeSpec, build_tree
from dappecc.workload import NON_RT, RT, Request


@pytest.fixture(scope="module")
def topo():
    return build_tree(TreeSpec(height=6, fanouts=2, c_cpu=20))


def rt(topo, rid=1, leaf_idx=0, place=None):
    return Request(id=rid, cls=RT, poa=topo.leaves[leaf_idx], arrival_seq=rid,
                   cur_place=place, state="placed" if place else "unplaced")


def nrt(topo, rid=1, leaf_idx=0, place=None):
    return Request(id=rid, cls=NON_RT, poa=topo.leaves[leaf_idx], arrival_seq=rid,
                   cur_place=place, state="placed" if place else "unplaced")


class TestBeta:
    def test_rt_level2_needs_19(self, topo):
        req = rt(topo)
        lvl2 = topo.path_to_root(req.poa)[2]
        assert beta(topo, req, lvl2) == 19

    def test_non_rt_uniform_17(self, topo):
        req = nrt(topo)
        for dc in topo.path_to_root(req.poa):
            assert beta(topo, req, dc) == 17

    def test_rt_level3_out_of_prefix(self, topo):
        req = rt(topo)
        lvl3 = topo.path_to_root(req.poa)[3]
        with pytest.raises(CostDomainError):
            beta(topo, req, lvl3)

    def test_off_path_datacenter_rejected(self, topo):
        req = rt(topo, leaf_idx=0)
        other_leaf = topo.leaves[-1]
        with pytest.raises(CostDomainError):
            beta(topo, req, other_leaf)


class TestCompCost:
    def test_rt_table(self, topo):
        req = rt(topo)
        path = topo.path_to_root(req.poa)
        assert [comp_cost(topo, req, dc) for dc in path[:3]] == [544, 278, 164]

    def test_non_rt_table(self, topo):
        req = nrt(topo)
        path = topo.path_to_root(req.poa)
        costs = [comp_cost(topo, req, dc) for dc in path]
        assert costs == [544, 278, 148, 86, 58, 47]

    def test_cost_strictly_decreases_toward_cloud(self, topo):
        req = nrt(topo)
        path = topo.path_to_root(req.poa)
        costs = [comp_cost(topo, req, dc) for dc in path]
        assert all(a > b for a, b in zip(costs, costs[1:]))


class TestMigCost:
    def test_default_constant(self, topo):
        assert mig_cost(rt(topo), 4, 9) == 600

    def test_first_placement_free(self, topo):
        assert mig_cost(rt(topo), None, 9) == 0

    def test_config_override(self, topo):
        assert mig_cost(rt(topo), 4, 9, cost=250) == 250

    def test_same_place_is_not_a_migration(self, topo):
        with pytest.raises(CostDomainError):
            mig_cost(rt(topo), 4, 4)


class TestObjective:
    def test_new_non_rt_at_root(self, topo):
        req = nrt(topo, rid=1)
        snap = PlacementSnapshot.of(topo, [req], {1: topo.root_id})
        cb = objective(topo, snap, [1])
        assert (cb.migration, cb.computational, cb.total) == (0, 47, 47)

    def test_migrated_rt_leaf_to_level2(self, topo):
        req = rt(topo, rid=1)
        leaf = req.poa
        lvl2 = topo.path_to_root(leaf)[2]
        snap = PlacementSnapshot.of(topo, [req], {1: lvl2}, previous={1: leaf})
        cb = objective(topo, snap, [1])
        assert (cb.migration, cb.computational, cb.total) == (600, 164, 764)

    def test_empty_handled_set(self, topo):
        snap = PlacementSnapshot.of(topo, [], {})
        cb = objective(topo, snap, [])
        assert cb.total == 0

    def test_undefined_placement_raises(self, topo):
        req = nrt(topo, rid=1)
        snap = PlacementSnapshot.of(topo, [req], {1: None})
        with pytest.raises(CostDomainError):
            objective(topo, snap, [1])


class TestCheckFeasible:
    def small(self):
        # two-level tree with a 34-unit root
        return build_tree(TreeSpec(height=2, fanouts=2, c_cpu=17))

    def test_exact_fit_is_feasible(self):
        t = self.small()
        reqs = [nrt(t, rid=i, leaf_idx=0, place=t.root_id) for i in (1, 2)]
        for r in reqs:
            r.poa = t.leaves[0]
        snap = PlacementSnapshot.of(t, reqs, {1: t.root_id, 2: t.root_id})
        assert check_feasible(t, snap).ok

    def test_overload_reported_with_amount(self):
        t = self.small()
        reqs = [nrt(t, rid=i, place=t.root_id) for i in (1, 2, 3)]
        snap = PlacementSnapshot.of(t, reqs, {i: t.root_id for i in (1, 2, 3)})
        report = check_feasible(t, snap)
        assert not report.ok
        assert report.overloaded == [(t.root_id, 51, 34)]

    def test_delay_violation_reported(self, topo):
        req = rt(topo, rid=1)
        lvl3 = topo.path_to_root(req.poa)[3]
        snap = PlacementSnapshot.of(topo, [req], {1: lvl3})
        report = check_feasible(topo, snap)
        assert not report.ok and report.outside_prefix == [1]

    def test_departed_requests_ignored(self, topo):
        req = nrt(topo, rid=1)
        req.state = "departed"
        snap = PlacementSnapshot.of(topo, [req], {1: None})
        assert check_feasible(topo, snap).ok


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_objective_additive_over_disjoint_sets(data):
    topo = build_tree(TreeSpec(height=6, fanouts=2, c_cpu=20))
    n = data.draw(st.integers(2, 8))
    reqs = []
    place = {}
    for i in range(n):
        cls = data.draw(st.sampled_from([RT, NON_RT]))
        leaf = data.draw(st.sampled_from(topo.leaves))
        req = Request(id=i, cls=cls, poa=leaf, arrival_seq=i)
        prefix = topo.feasible_prefix(leaf, cls.max_levels)
        place[i] = data.draw(st.sampled_from(list(prefix)))
        reqs.append(req)
    snap = PlacementSnapshot.of(topo, reqs, place)
    ids = list(range(n))
    cut = data.draw(st.integers(0, n))
    left, right = ids[:cut], ids[cut:]
    total = objective(topo, snap, ids)
    a, b = objective(topo, snap, left), objective(topo, snap, right)
    assert total.total == a.total + b.total
    assert total.migration == a.migration + b.migration
