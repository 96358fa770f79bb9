import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaos_sim.model import (
    LinkMetrics,
    NodeState,
    OverlayTopology,
    TrainingState,
    split_state,
    validate_topology,
)


def make_topo(nodes, links):
    topo = OverlayTopology()
    for n in nodes:
        topo.add_node(n)
    for a, b in links:
        topo.add_link(a, b, LinkMetrics(1.0, 0.5))
    return topo


class TestValidateTopology:
    def test_minimal_valid_graph(self):
        topo = make_topo([1, 2], [(1, 2)])
        assert validate_topology(topo) == []

    def test_dangling_link(self):
        topo = make_topo([1], [])
        topo.links[(1, 2)] = LinkMetrics(1.0, 0.5)
        kinds = [v.kind for v in validate_topology(topo)]
        assert "DanglingLink" in kinds

    def test_disconnected_active_nodes(self):
        topo = make_topo([1, 2, 3], [])
        kinds = [v.kind for v in validate_topology(topo)]
        assert kinds == ["Disconnected"]

    def test_failed_node_must_not_stay_linked(self):
        topo = make_topo([1, 2], [(1, 2)])
        topo.nodes[2].state = NodeState.FAILED
        kinds = [v.kind for v in validate_topology(topo)]
        assert "FailedNodeLinked" in kinds

    def test_pure_function(self):
        topo = make_topo([1, 2, 3], [(1, 2), (2, 3)])
        assert validate_topology(topo) == validate_topology(topo)


class TestLinkMetrics:
    def test_rejects_negative_prop(self):
        with pytest.raises(ValueError):
            LinkMetrics(-1.0, 0.5)

    def test_rejects_zero_trans(self):
        with pytest.raises(ValueError):
            LinkMetrics(0.0, 0.0)


class TestTrainingState:
    def test_total_size(self):
        state = TrainingState(tensors=(("a", 4), ("b", 8)))
        assert state.total_size == 12
        assert state.min_tensor_size == 4
        assert state.max_tensor_size == 8

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            TrainingState(tensors=())

    def test_rejects_nonpositive_tensor(self):
        with pytest.raises(ValueError):
            TrainingState(tensors=(("a", 0),))


class TestSplitState:
    def test_single_shard(self):
        shards = split_state(TrainingState(tensors=(("w", 10),)), 10)
        assert shards.count == 1
        assert shards.size_of(0) == 10

    def test_ceil_tiling_with_short_tail(self):
        shards = split_state(TrainingState(tensors=(("w", 10),)), 3)
        assert shards.count == 4
        assert [shards.size_of(j) for j in range(4)] == [3, 3, 3, 1]

    def test_boundaries_cross_tensors(self):
        state = TrainingState(tensors=(("a", 4), ("b", 8)))
        shards = split_state(state, 4)
        assert shards.count == 3
        assert shards.shard(0).ranges == (("a", 0, 4),)
        assert shards.shard(1).ranges == (("b", 0, 4),)
        assert shards.shard(2).ranges == (("b", 4, 8),)

    def test_shard_spanning_a_boundary(self):
        state = TrainingState(tensors=(("a", 3), ("b", 5)))
        shards = split_state(state, 4)
        assert shards.shard(0).ranges == (("a", 0, 3), ("b", 0, 1))

    def test_rejects_nonpositive_size(self):
        state = TrainingState(tensors=(("a", 4),))
        with pytest.raises(ValueError):
            split_state(state, 0)

    @settings(max_examples=200, deadline=None)
    @given(
        sizes=st.lists(st.integers(min_value=1, max_value=50),
                       min_size=1, max_size=6),
        shard_size=st.integers(min_value=1, max_value=60),
    )
    def test_roundtrip_tiling(self, sizes, shard_size):
        """Reassembling shard ranges reproduces the exact state extent."""
        state = TrainingState(
            tensors=tuple((f"t{i}", s) for i, s in enumerate(sizes)))
        shards = split_state(state, shard_size)
        assert sum(shards.size_of(j) for j in range(shards.count)) \
            == state.total_size
        covered = {name: [] for name, _ in state.tensors}
        for shard in shards.shards:
            assert shard.size == sum(hi - lo for _, lo, hi in shard.ranges)
            for name, lo, hi in shard.ranges:
                covered[name].append((lo, hi))
        for name, size in state.tensors:
            spans = sorted(covered[name])
            assert spans[0][0] == 0 and spans[-1][1] == size
            for (a, b), (c, d) in zip(spans, spans[1:]):
                assert b == c  # no gap, no overlap
