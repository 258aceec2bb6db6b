"""Adversary coordination graph: topology, feature sharing, consensus.

Colluding clients form an undirected connected graph. Edges mean two
adversaries exchange their feature slices (so each node sees a wider
view than its own slice) and, later, their locally inferred index sets.
Consensus is leader-based: the highest-degree node collects proposals
over BFS, applies a majority vote, and distributes the agreed set back.

Connectivity is summarized by the algebraic connectivity (second
smallest Laplacian eigenvalue), the knob the sweep experiments turn.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConnectivityError, ContractError
from .data import VerticalDataset


@dataclass(frozen=True)
class AdversaryGraph:
    """Undirected connected graph over adversary client ids."""

    nodes: tuple[int, ...]
    edges: frozenset  # of frozenset({u, v}) pairs

    def __post_init__(self):
        if len(self.nodes) == 0:
            raise ConfigError("graph needs at least one adversary")
        if len(set(self.nodes)) != len(self.nodes):
            raise ConfigError(f"duplicate adversary ids in {self.nodes}")
        node_set = set(self.nodes)
        for edge in self.edges:
            pair = tuple(edge)
            if len(pair) != 2:
                raise ConfigError(f"self-loop or malformed edge {set(edge)}")
            if not set(pair) <= node_set:
                raise ConfigError(f"edge {set(edge)} references unknown node")
        if len(self.nodes) > 1:
            seen = set(_bfs_order(self, self.nodes[0]))
            if seen != node_set:
                missing = sorted(node_set - seen)
                raise ConnectivityError(f"graph is disconnected; unreachable nodes {missing}")

    def neighbors(self, node: int) -> list[int]:
        out = []
        for edge in self.edges:
            pair = tuple(edge)
            if node in pair:
                out.append(pair[0] if pair[1] == node else pair[1])
        return sorted(out)

    def degree(self, node: int) -> int:
        return len(self.neighbors(node))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def _edge(u: int, v: int) -> frozenset:
    if u == v:
        raise ConfigError(f"self-loop at node {u}")
    return frozenset((u, v))


def build_graph(
    topology: str,
    adversaries: list[int],
    edges: list[tuple[int, int]] | None = None,
    step: int | None = None,
) -> AdversaryGraph:
    """Construct the coordination graph for a named topology.

    Topologies: "complete", "line" (ascending id order), "ring", "custom"
    (explicit edge list), "degree-sweep" (k-th power of the line graph,
    step = k; step 1 is the line, step n-1 the complete graph).
    """
    nodes = tuple(sorted(adversaries))
    n = len(nodes)
    if topology == "complete":
        edge_set = {_edge(nodes[i], nodes[j]) for i in range(n) for j in range(i + 1, n)}
    elif topology == "line":
        edge_set = {_edge(nodes[i], nodes[i + 1]) for i in range(n - 1)}
    elif topology == "ring":
        edge_set = {_edge(nodes[i], nodes[(i + 1) % n]) for i in range(n)} if n > 1 else set()
    elif topology == "degree-sweep":
        if step is None or not 1 <= step <= max(1, n - 1):
            raise ConfigError(f"degree-sweep needs step in [1, {max(1, n - 1)}], got {step}")
        edge_set = {
            _edge(nodes[i], nodes[j])
            for i in range(n)
            for j in range(i + 1, min(n, i + step + 1))
        }
    elif topology == "custom":
        if edges is None:
            raise ConfigError("custom topology requires an edge list")
        edge_set = {_edge(int(u), int(v)) for u, v in edges}
    else:
        raise ConfigError(f"unknown topology {topology!r}")
    return AdversaryGraph(nodes, frozenset(edge_set))


def degree_sweep(adversaries: list[int]) -> list[AdversaryGraph]:
    """The line-to-complete family: powers of the path graph, k = 1..n-1."""
    n = len(adversaries)
    return [build_graph("degree-sweep", adversaries, step=k) for k in range(1, n)]


def laplacian(graph: AdversaryGraph, normalized: bool = False) -> np.ndarray:
    index = {node: i for i, node in enumerate(graph.nodes)}
    n = graph.num_nodes
    adj = np.zeros((n, n))
    for edge in graph.edges:
        u, v = tuple(edge)
        adj[index[u], index[v]] = adj[index[v], index[u]] = 1.0
    deg = adj.sum(axis=1)
    lap = np.diag(deg) - adj
    if normalized:
        with np.errstate(divide="ignore"):
            inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
        lap = lap * inv_sqrt[:, None] * inv_sqrt[None, :]
    return lap


def algebraic_connectivity(graph: AdversaryGraph, normalized: bool = False) -> float:
    """Second-smallest Laplacian eigenvalue (Fiedler value).

    Positive exactly when the graph is connected, which the constructor
    already guarantees; needs at least two nodes to be defined.
    """
    if graph.num_nodes < 2:
        raise ContractError("algebraic connectivity needs at least two nodes")
    eigenvalues = np.linalg.eigvalsh(laplacian(graph, normalized=normalized))
    return float(eigenvalues[1])


def _bfs_order(graph: AdversaryGraph, root: int) -> list[int]:
    # Deterministic traversal: neighbors visited in ascending id order.
    seen = {root}
    order = [root]
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for nb in graph.neighbors(node):
            if nb not in seen:
                seen.add(nb)
                order.append(nb)
                queue.append(nb)
    return order


def elect_leader(graph: AdversaryGraph) -> int:
    """Highest-degree node; ties broken toward the lowest id."""
    return max(graph.nodes, key=lambda node: (graph.degree(node), -node))


def bfs_collect(graph: AdversaryGraph, leader: int, payloads: dict):
    """Gather per-node payloads at the leader in BFS visitation order.

    Returns (order, collected) where collected[i] is payloads[order[i]].

    Raises:
        ConnectivityError: a node never reaches the leader (cannot happen
            for graphs that passed construction, but checked anyway).
        ContractError: a payload is missing.
    """
    if leader not in graph.nodes:
        raise ContractError(f"leader {leader} is not a graph node")
    order = _bfs_order(graph, leader)
    if set(order) != set(graph.nodes):
        unreachable = sorted(set(graph.nodes) - set(order))
        raise ConnectivityError(f"nodes {unreachable} cannot reach leader {leader}")
    missing = [node for node in order if node not in payloads]
    if missing:
        raise ContractError(f"missing payloads for nodes {missing}")
    return order, [payloads[node] for node in order]


def majority_vote(proposals: list, num_adversaries: int, inclusive: bool = False) -> np.ndarray:
    """Indices backed by more than ceil(n/2) proposals (sorted ascending).

    The strict threshold demands a supermajority for odd n (e.g. all 3 of
    3); the inclusive flag relaxes to >=, the documented ablation of the
    voting stage. A single proposer can never pass the strict gate, so
    singleton adversary sets should skip voting entirely.
    """
    if len(proposals) != num_adversaries:
        raise ContractError(f"{len(proposals)} proposals for {num_adversaries} adversaries")
    threshold = math.ceil(num_adversaries / 2)
    counts: dict[int, int] = {}
    for proposal in proposals:
        for idx in np.unique(np.asarray(list(proposal), dtype=np.int64)):
            counts[int(idx)] = counts.get(int(idx), 0) + 1
    if inclusive:
        agreed = [idx for idx, c in counts.items() if c >= threshold]
    else:
        agreed = [idx for idx, c in counts.items() if c > threshold]
    return np.array(sorted(agreed), dtype=np.int64)


def distribute_results(graph: AdversaryGraph, leader: int, result: np.ndarray) -> dict:
    """Push the agreed set from the leader to every node (BFS order).

    Every node receives its own copy so later local mutation cannot
    corrupt a peer's view.
    """
    order = _bfs_order(graph, leader)
    if set(order) != set(graph.nodes):
        unreachable = sorted(set(graph.nodes) - set(order))
        raise ConnectivityError(f"nodes {unreachable} unreachable from leader {leader}")
    return {node: np.array(result, dtype=np.int64, copy=True) for node in order}


@dataclass
class ConcatenatedView:
    """One adversary's widened feature view: its slice plus neighbors'.

    Blocks are references into the vertical dataset (no copies); matrix()
    materializes flattened, concatenated rows on demand. Carries no
    labels by construction.
    """

    owner: int
    client_ids: tuple[int, ...]  # ascending
    blocks: dict[int, np.ndarray] = field(repr=False)
    rects: dict[int, tuple[int, int, int, int]]

    @property
    def dim(self) -> int:
        return sum(int(np.prod(b.shape[1:])) for b in self.blocks.values())

    @property
    def num_rows(self) -> int:
        return len(next(iter(self.blocks.values())))

    def matrix(self, indices: np.ndarray | None = None) -> np.ndarray:
        """Rows (selected or all) as a flat (n, dim) float array."""
        parts = []
        for k in self.client_ids:
            block = self.blocks[k] if indices is None else self.blocks[k][indices]
            parts.append(block.reshape(len(block), -1))
        return np.concatenate(parts, axis=1)


def share_features(graph: AdversaryGraph, vdataset: VerticalDataset) -> dict[int, ConcatenatedView]:
    """Feature exchange along edges: each node's view of the train slices.

    View m covers sorted({m} | neighbors(m)); blocks reference the
    dataset's slice arrays directly.
    """
    views = {}
    for m in graph.nodes:
        ids = tuple(sorted({m, *graph.neighbors(m)}))
        views[m] = ConcatenatedView(
            owner=m,
            client_ids=ids,
            blocks={k: vdataset.client_view(k) for k in ids},
            rects={k: vdataset.scheme.rects[k] for k in ids},
        )
    return views
