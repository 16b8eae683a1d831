"""Fat-tree edge-cloud continuum: construction, paths, and delay-feasible prefixes.

Datacenters form a tree with the cloud at the top.  Leaves (level 0) are
co-located with PoAs; a PoA is identified by its leaf datacenter id.  Node
capacity at level l defaults to (l+1) * c_cpu so that capacity grows toward
the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

# Datacenter ids are carried in 12-bit wire fields; id 0 is reserved
# for "no datacenter", so valid ids are 1..4095.
MAX_DATACENTER_ID = 4095


class TopologyError(Exception):
    """Malformed tree spec or unknown datacenter lookup."""


@dataclass(frozen=True)
class TreeSpec:
    """Declarative description of a fat tree.

    Exactly one of two modes applies:
      * fanout mode: ``fanouts`` gives the number of children per node,
        either a single int for all levels or one int per internal level
        (index 0 = children of level-1 nodes).  ``poa_mask`` optionally
        marks which leaf positions (left to right) host a PoA; unmarked
        leaves and any internal node left without PoA descendants are
        pruned.
      * grid mode: ``grid_rows`` x ``grid_cols`` cells are recursively
        bisected (longest axis first) down to single cells, which become
        the leaves.  ``poa_cells`` lists the (row, col) cells that host a
        PoA; empty cells are pruned the same way.
    """

    height: int
    fanouts: int | tuple[int, ...] | None = None
    grid_rows: int | None = None
    grid_cols: int | None = None
    poa_cells: tuple[tuple[int, int], ...] | None = None
    poa_mask: tuple[bool, ...] | None = None
    c_cpu: int = 20
    capacity_overrides: dict[int, int] = field(default_factory=dict)

    def with_c_cpu(self, c_cpu: int) -> "TreeSpec":
        return replace(self, c_cpu=c_cpu)


@dataclass
class DatacenterNode:
    id: int
    level: int
    parent: int | None
    children: list[int]
    capacity: int
    grid_cell: tuple[int, int] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.level == 0


class Topology:
    """Immutable after construction; safe to share across simulation runs."""

    def __init__(self, nodes: list[DatacenterNode], root_id: int, height: int,
                 spec: TreeSpec | None = None):
        self.nodes: dict[int, DatacenterNode] = {n.id: n for n in nodes}
        self.root_id = root_id
        self.height = height
        self.spec = spec
        self.leaves: list[int] = sorted(n.id for n in nodes if n.is_leaf)
        self._paths: dict[int, tuple[int, ...]] = {}
        for n in nodes:
            path = [n.id]
            cur = n
            while cur.parent is not None:
                cur = self.nodes[cur.parent]
                path.append(cur.id)
            self._paths[n.id] = tuple(path)

    def node(self, dc_id: int) -> DatacenterNode:
        try:
            return self.nodes[dc_id]
        except KeyError:
            raise TopologyError(f"unknown datacenter id {dc_id}") from None

    def level(self, dc_id: int) -> int:
        return self.node(dc_id).level

    def capacity(self, dc_id: int) -> int:
        return self.node(dc_id).capacity

    def path_to_root(self, dc_id: int) -> tuple[int, ...]:
        self.node(dc_id)
        return self._paths[dc_id]

    def feasible_prefix(self, poa: int, max_levels: int) -> tuple[int, ...]:
        """First min(max_levels, path length) hops of the path from ``poa`` up.

        The last entry is the top delay-feasible datacenter for a request
        entering at ``poa``.
        """
        node = self.node(poa)
        if not node.is_leaf:
            raise TopologyError(f"datacenter {poa} is not a PoA leaf")
        if max_levels < 1:
            raise TopologyError(f"max_levels must be >= 1, got {max_levels}")
        path = self._paths[poa]
        return path[:min(max_levels, len(path))]

    def is_ancestor(self, a: int, b: int) -> bool:
        """True iff ``a`` lies strictly above ``b`` on b's path to the root."""
        self.node(a)
        return a != b and a in self._paths[b]

    def in_subtree(self, dc_id: int, root: int) -> bool:
        return dc_id == root or root in self._paths[dc_id]

    def child_toward(self, dc_id: int, descendant: int) -> int:
        """The child of ``dc_id`` whose subtree contains ``descendant``."""
        path = self._paths[descendant]
        idx = path.index(dc_id)
        if idx == 0:
            raise TopologyError(f"{descendant} is not a strict descendant of {dc_id}")
        return path[idx - 1]

    def tree_path(self, a: int, b: int) -> tuple[int, ...]:
        """Unique path between two datacenters (through the lowest common ancestor)."""
        pa, pb = self._paths[a], self._paths[b]
        common = set(pa) & set(pb)
        up = [x for x in pa if x not in common]
        lca = next(x for x in pa if x in common)
        down = [x for x in pb if x not in common]
        return tuple(up + [lca] + list(reversed(down)))

    def dump(self) -> str:
        """Text adjacency listing for debugging."""
        lines = []
        for dc_id in sorted(self.nodes):
            n = self.nodes[dc_id]
            kids = ",".join(str(c) for c in n.children) or "-"
            cell = f" cell={n.grid_cell}" if n.grid_cell is not None else ""
            lines.append(f"dc {n.id} lvl={n.level} cap={n.capacity} "
                         f"parent={n.parent if n.parent is not None else '-'} children={kids}{cell}")
        return "\n".join(lines)


class _Proto:
    """Mutable node used while building, before ids are assigned."""

    __slots__ = ("level", "children", "leaf_index", "grid_cell", "parent")

    def __init__(self, level: int):
        self.level = level
        self.children: list[_Proto] = []
        self.leaf_index: int | None = None
        self.grid_cell: tuple[int, int] | None = None
        self.parent: "_Proto | None" = None


def _build_fanout(spec: TreeSpec) -> _Proto:
    if isinstance(spec.fanouts, int):
        fanouts = (spec.fanouts,) * (spec.height - 1)
    else:
        fanouts = tuple(spec.fanouts or ())
    if len(fanouts) != spec.height - 1:
        raise TopologyError(
            f"need {spec.height - 1} fanout values for height {spec.height}, got {len(fanouts)}")
    if any(f < 1 for f in fanouts):
        raise TopologyError("fanouts must be >= 1")

    leaf_counter = [0]

    def grow(level: int) -> _Proto:
        node = _Proto(level)
        if level == 0:
            node.leaf_index = leaf_counter[0]
            leaf_counter[0] += 1
        else:
            for _ in range(fanouts[level - 1]):
                child = grow(level - 1)
                child.parent = node
                node.children.append(child)
        return node

    return grow(spec.height - 1)


def _build_grid(spec: TreeSpec) -> _Proto:
    rows, cols = spec.grid_rows or 0, spec.grid_cols or 0
    if rows < 1 or cols < 1:
        raise TopologyError("grid mode needs positive grid_rows and grid_cols")
    n_cells = rows * cols
    if n_cells != 2 ** (spec.height - 1):
        raise TopologyError(
            f"grid of {n_cells} cells does not match height {spec.height} "
            f"(need {2 ** (spec.height - 1)} cells)")

    leaf_counter = [0]

    def bisect(r0: int, r1: int, c0: int, c1: int, level: int) -> _Proto:
        node = _Proto(level)
        if level == 0:
            node.grid_cell = (r0, c0)
            node.leaf_index = leaf_counter[0]
            leaf_counter[0] += 1
            return node
        if (c1 - c0) >= (r1 - r0):
            cm = (c0 + c1) // 2
            halves = [(r0, r1, c0, cm), (r0, r1, cm, c1)]
        else:
            rm = (r0 + r1) // 2
            halves = [(r0, rm, c0, c1), (rm, r1, c0, c1)]
        for h in halves:
            child = bisect(*h, level - 1)
            child.parent = node
            node.children.append(child)
        return node

    return bisect(0, rows, 0, cols, spec.height - 1)


def build_tree(spec: TreeSpec) -> Topology:
    """Build the fat tree described by ``spec``, pruning PoA-less regions.

    Every surviving leaf hosts exactly one PoA.  Internal nodes whose
    subtree loses all PoAs are pruned with their subtrees.  Capacity of a
    node at level l is (l+1) * c_cpu unless overridden per node id.
    """
    if spec.height < 1:
        raise TopologyError("height must be >= 1")
    grid_mode = spec.grid_rows is not None or spec.grid_cols is not None
    if grid_mode:
        root = _build_grid(spec)
        wanted = set(spec.poa_cells) if spec.poa_cells is not None else None

        def keeps(leaf: _Proto) -> bool:
            return wanted is None or leaf.grid_cell in wanted
    else:
        root = _build_fanout(spec)
        mask = spec.poa_mask

        def keeps(leaf: _Proto) -> bool:
            return mask is None or (leaf.leaf_index is not None
                                    and leaf.leaf_index < len(mask)
                                    and mask[leaf.leaf_index])

    def prune(node: _Proto) -> bool:
        """Drop subtrees without PoAs; True if this node survives."""
        if node.level == 0:
            return keeps(node)
        node.children = [c for c in node.children if prune(c)]
        return bool(node.children)

    if not prune(root):
        raise TopologyError("tree has no PoAs after pruning")

    # Breadth-first relabeling gives deterministic ids starting at 1.
    nodes: list[DatacenterNode] = []
    queue: list[tuple[_Proto, int | None]] = [(root, None)]
    assigned: list[tuple[_Proto, DatacenterNode]] = []
    next_id = 1
    while queue:
        proto, parent_id = queue.pop(0)
        if next_id > MAX_DATACENTER_ID:
            raise TopologyError(f"tree exceeds {MAX_DATACENTER_ID} datacenters")
        cap = spec.capacity_overrides.get(next_id, (proto.level + 1) * spec.c_cpu)
        if cap <= 0:
            raise TopologyError(f"capacity of datacenter {next_id} must be positive")
        dn = DatacenterNode(id=next_id, level=proto.level, parent=parent_id,
                            children=[], capacity=cap, grid_cell=proto.grid_cell)
        nodes.append(dn)
        assigned.append((proto, dn))
        next_id += 1
        for child in proto.children:
            queue.append((child, dn.id))

    by_proto = {id(p): d for p, d in assigned}
    for proto, dn in assigned:
        dn.children = sorted(by_proto[id(c)].id for c in proto.children)

    return Topology(nodes, root_id=nodes[0].id, height=spec.height, spec=spec)
