"""Spatial graphs over trap locations.

Traps are linked by truncated k-nearest-neighbour search on great-circle
distance: each node receives messages from at most ``k`` other nodes lying
within ``radius_km``.  Edges are directed (source is one of the target's
nearest neighbours) and are not symmetrised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from magegraph.errors import DataError, ParameterError

EARTH_RADIUS_KM = 6371.0088
DEFAULT_K = 10
DEFAULT_RADIUS_KM = 50.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        validate_coordinates(self.lat, self.lon)


def validate_coordinates(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise DataError(f"latitude {lat} outside [-90, 90]")
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise DataError(f"longitude {lon} outside [-180, 180]")


def geo_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine great-circle distance in kilometres."""
    validate_coordinates(a.lat, a.lon)
    validate_coordinates(b.lat, b.lon)
    return float(pairwise_distances(np.array([[a.lat, a.lon]]), np.array([[b.lat, b.lon]]))[0, 0])


def pairwise_distances(p: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
    """Haversine distance matrix (km) between rows of ``p`` and ``q`` given as (lat, lon) degrees."""
    q = p if q is None else q
    lat1 = np.radians(p[:, 0])[:, None]
    lat2 = np.radians(q[:, 0])[None, :]
    dlat = lat2 - lat1
    dlon = np.radians(q[:, 1])[None, :] - np.radians(p[:, 1])[:, None]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _as_positions(positions) -> np.ndarray:
    pts = np.array([[p.lat, p.lon] if isinstance(p, GeoPoint) else p for p in positions], dtype=np.float64)
    pts = pts.reshape(-1, 2)
    for lat, lon in pts:
        validate_coordinates(lat, lon)
    return pts


def build_knn_graph(positions, k: int = DEFAULT_K, radius_km: float = DEFAULT_RADIUS_KM) -> list[list[tuple[int, float]]]:
    """In-neighbour lists: for node v, up to ``k`` nearest other nodes within ``radius_km``.

    Each list is sorted by (distance, index); ties keep the lower index first.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if radius_km <= 0:
        raise ParameterError(f"radius_km must be positive, got {radius_km}")
    pts = _as_positions(positions)
    n = len(pts)
    if n == 0:
        raise DataError("cannot build a graph with no nodes")
    dist = pairwise_distances(pts)
    adjacency: list[list[tuple[int, float]]] = []
    for v in range(n):
        row = dist[v]
        order = np.lexsort((np.arange(n), row))
        nbrs = []
        for u in order:
            if u == v:
                continue
            if row[u] > radius_km or len(nbrs) == k:
                break
            nbrs.append((int(u), float(row[u])))
        adjacency.append(nbrs)
    return adjacency


@dataclass
class SpatialGraph:
    week: int
    node_ids: list[str]
    positions: np.ndarray
    in_neighbors: list[list[tuple[int, float]]]
    labeled_mask: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return sum(len(n) for n in self.in_neighbors)

    def edges(self) -> list[tuple[int, int, float]]:
        """(source, target, distance_km) triples."""
        return [(u, v, d) for v, nbrs in enumerate(self.in_neighbors) for u, d in nbrs]

    def aggregation_matrix(self, aggregator: str = "mean") -> np.ndarray:
        """Row-stochastic (or all-zero for isolated nodes) matrix A with AGG(H) = A @ H."""
        n = self.num_nodes
        a = np.zeros((n, n))
        for v, nbrs in enumerate(self.in_neighbors):
            if not nbrs:
                continue
            if aggregator == "mean":
                for u, _ in nbrs:
                    a[v, u] += 1.0 / len(nbrs)
            elif aggregator == "inverse-distance":
                if any(d <= 0 for _, d in nbrs):
                    raise DataError(f"zero edge distance into node {self.node_ids[v]}")
                w = np.array([1.0 / d for _, d in nbrs])
                w /= w.sum()
                for (u, _), wu in zip(nbrs, w):
                    a[v, u] += wu
            else:
                raise ParameterError(f"unknown aggregator {aggregator!r}")
        return a

    def subgraph_reachable(self, source: int, hops: int) -> set[int]:
        """Nodes whose representation can depend on ``source`` after ``hops`` message-passing rounds."""
        out_edges: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v, _ in self.edges():
            out_edges[u].append(v)
        frontier, seen = {source}, {source}
        for _ in range(hops):
            frontier = {v for u in frontier for v in out_edges[u]} - seen
            seen |= frontier
        return seen


def _select(node_ids: Sequence[str], positions, mask) -> tuple[list[str], np.ndarray]:
    pts = _as_positions(positions)
    mask = np.asarray(mask, dtype=bool)
    return [nid for nid, m in zip(node_ids, mask) if m], pts[mask]


def build_supervised_graph(week: int, node_ids: Sequence[str], positions, checked, k: int = DEFAULT_K,
                           radius_km: float = DEFAULT_RADIUS_KM) -> SpatialGraph:
    """Graph over the traps checked in ``week`` only; every node is labeled."""
    ids, pts = _select(node_ids, positions, checked)
    if not ids:
        raise DataError(f"week {week}: no checked traps, supervised graph is empty")
    adj = build_knn_graph(pts, k, radius_km)
    return SpatialGraph(week, ids, pts, adj, np.ones(len(ids), dtype=bool))


def build_semisupervised_graph(week: int, node_ids: Sequence[str], positions, checked, k: int = DEFAULT_K,
                               radius_km: float = DEFAULT_RADIUS_KM) -> SpatialGraph:
    """Graph over every known trap; unchecked traps contribute features but carry no label."""
    pts = _as_positions(positions)
    if len(pts) == 0:
        raise DataError(f"week {week}: no traps")
    adj = build_knn_graph(pts, k, radius_km)
    return SpatialGraph(week, list(node_ids), pts, adj, np.asarray(checked, dtype=bool).copy())


@dataclass
class ConnectivityPartition:
    node_ids: list[str]
    scores: np.ndarray
    upper_set: set[str] = field(default_factory=set)
    lower_set: set[str] = field(default_factory=set)


def connectivity_partition(graph: SpatialGraph) -> ConnectivityPartition:
    """Score each node by summed inverse in-edge distance; flag nodes beyond the 80th/20th percentiles."""
    if graph.num_nodes == 0:
        raise DataError("connectivity partition of an empty graph")
    scores = np.zeros(graph.num_nodes)
    for v, nbrs in enumerate(graph.in_neighbors):
        for _, d in nbrs:
            if d <= 0:
                raise DataError(f"zero distance edge into {graph.node_ids[v]}; de-duplicate coordinates first")
            scores[v] += 1.0 / d
    hi, lo = np.percentile(scores, [80, 20])
    upper = {nid for nid, s in zip(graph.node_ids, scores) if s > hi}
    lower = {nid for nid, s in zip(graph.node_ids, scores) if s < lo}
    return ConnectivityPartition(list(graph.node_ids), scores, upper, lower)


def edge_list_lines(graphs: Iterable[SpatialGraph]) -> list[str]:
    """``week,src_id,dst_id,distance_km`` lines, lexicographically sorted."""
    lines = []
    for g in graphs:
        for u, v, d in g.edges():
            lines.append(f"{g.week},{g.node_ids[u]},{g.node_ids[v]},{d:.6f}")
    return sorted(lines)


def check_unique_positions(node_ids: Sequence[str], positions) -> None:
    pts = _as_positions(positions)
    seen: dict[tuple[float, float], str] = {}
    for nid, (lat, lon) in zip(node_ids, pts):
        key = (float(lat), float(lon))
        if key in seen:
            raise DataError(f"traps {seen[key]} and {nid} share coordinates ({lat}, {lon})")
        seen[key] = nid
