"""
Finite metric measure spaces built from weighted graphs
"""

import json
import logging
from dataclasses import dataclass
from functools import wraps

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from config import (
    MAX_RETRIES,
    METRIC_TOL,
    RANDOM_EDGE_DENSITY,
    RANDOM_MEASURE_RANGE,
    RANDOM_WEIGHT_RANGE,
)


class SpaceError(ValueError):
    pass


def retry_on_failure(max_retries=MAX_RETRIES):
    """Decorator re-running a construction with a fresh attempt index"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            for attempt in range(max_retries):
                try:
                    return func(*args, attempt=attempt, **kwargs)
                except SpaceError as e:
                    if attempt == max_retries - 1:
                        logging.error(f"{func.__name__} failed after {max_retries} attempts: {e}")
                        raise
                    logging.debug(f"Attempt {attempt + 1} of {func.__name__} failed, retrying: {e}")
            return None
        return wrapper
    return decorator


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple  # (id, m)
    edges: tuple  # (u, v, w)

    @classmethod
    def from_json(cls, doc):
        try:
            nodes = tuple((str(n["id"]), float(n["m"])) for n in doc["nodes"])
            edges = tuple((str(e["u"]), str(e["v"]), float(e["w"])) for e in doc["edges"])
        except (KeyError, TypeError, ValueError) as e:
            raise SpaceError(f"malformed graph document: {e}") from e
        return cls(nodes, edges)

    def to_json(self):
        return {
            "nodes": [{"id": i, "m": m} for i, m in self.nodes],
            "edges": [{"u": u, "v": v, "w": w} for u, v, w in self.edges],
        }

    def validate(self):
        ids = [i for i, _ in self.nodes]
        if len(ids) < 1:
            raise SpaceError("graph has no nodes")
        if len(set(ids)) != len(ids):
            raise SpaceError("node ids are not distinct")
        for node_id, m in self.nodes:
            if not np.isfinite(m) or m <= 0:
                raise SpaceError(f"nonpositive measure weight at node {node_id}: {m}")
        known = set(ids)
        seen = set()
        for u, v, w in self.edges:
            if u not in known or v not in known:
                raise SpaceError(f"edge ({u}, {v}) references an unknown node")
            if u == v:
                raise SpaceError(f"self-loop at node {u}")
            if not np.isfinite(w) or w <= 0:
                raise SpaceError(f"nonpositive edge length on ({u}, {v}): {w}")
            key = frozenset((u, v))
            if key in seen:
                raise SpaceError(f"duplicate edge ({u}, {v})")
            seen.add(key)


class FiniteMetricMeasureSpace:
    """Immutable (X, d, m) with the edge structure that induced d"""

    def __init__(self, ids, dist, measure, edges):
        self.ids = tuple(ids)
        self.n = len(self.ids)
        self._index = {node_id: i for i, node_id in enumerate(self.ids)}

        self.dist = np.array(dist, dtype=float)
        self.measure = np.array(measure, dtype=float)
        self.dist.setflags(write=False)
        self.measure.setflags(write=False)

        ordered = sorted((min(i, j), max(i, j), float(w)) for i, j, w in edges)
        self.edges = {(i, j): w for i, j, w in ordered}
        self.edge_u = np.array([e[0] for e in ordered], dtype=int)
        self.edge_v = np.array([e[1] for e in ordered], dtype=int)
        self.edge_w = np.array([e[2] for e in ordered], dtype=float)
        for arr in (self.edge_u, self.edge_v, self.edge_w):
            arr.setflags(write=False)

        self._neighbors = [[] for _ in range(self.n)]
        for i, j, w in ordered:
            self._neighbors[i].append((j, w))
            self._neighbors[j].append((i, w))
        self._neighbors = tuple(tuple(sorted(nb)) for nb in self._neighbors)

    def __repr__(self):
        return f"FiniteMetricMeasureSpace(n={self.n}, edges={len(self.edges)})"

    def index(self, node_id):
        try:
            return self._index[str(node_id)]
        except KeyError:
            raise SpaceError(f"unknown node id: {node_id}") from None

    def neighbors(self, i):
        return self._neighbors[i]

    def edge_length(self, i, j):
        return self.edges[(min(i, j), max(i, j))]

    def has_edge(self, i, j):
        return (min(i, j), max(i, j)) in self.edges

    @property
    def total_measure(self):
        return float(self.measure.sum())

    @property
    def diameter(self):
        return float(self.dist.max())

    @property
    def longest_incident_edge(self):
        longest = np.zeros(self.n)
        np.maximum.at(longest, self.edge_u, self.edge_w)
        np.maximum.at(longest, self.edge_v, self.edge_w)
        return longest

    def graph(self):
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        for (i, j), w in self.edges.items():
            g.add_edge(i, j, weight=w)
        return g

    def graph_spec(self):
        return GraphSpec(
            tuple((node_id, float(m)) for node_id, m in zip(self.ids, self.measure)),
            tuple((self.ids[i], self.ids[j], w) for (i, j), w in self.edges.items()),
        )


def build_from_graph(spec):
    """All-pairs shortest-path metric of a weighted graph, with the node masses as measure"""
    spec.validate()
    ids = [i for i, _ in spec.nodes]
    index = {node_id: k for k, node_id in enumerate(ids)}
    n = len(ids)

    rows, cols, weights = [], [], []
    edges = []
    for u, v, w in spec.edges:
        i, j = index[u], index[v]
        rows += [i, j]
        cols += [j, i]
        weights += [w, w]
        edges.append((i, j, w))

    adjacency = csr_matrix((weights, (rows, cols)), shape=(n, n))
    dist = shortest_path(adjacency, method="D", directed=False)
    if not np.all(np.isfinite(dist)):
        raise SpaceError("not a metric space candidate: infinite distances")

    measure = [m for _, m in spec.nodes]
    space = FiniteMetricMeasureSpace(ids, dist, measure, edges)
    logging.debug(f"Built space with {n} points and {len(edges)} edges")
    return space


@dataclass(frozen=True)
class MetricViolation:
    axiom: str
    witness: tuple
    residual: float


def validate_metric(space, tol=METRIC_TOL):
    """List violated axioms with their worst residual; empty iff valid"""
    if isinstance(space, FiniteMetricMeasureSpace):
        dist = np.asarray(space.dist, dtype=float)
        labels = space.ids
    else:
        dist = np.asarray(space, dtype=float)
        labels = tuple(range(dist.shape[0]))
    n = dist.shape[0]
    violations = []

    if dist.shape != (n, n):
        return [MetricViolation("shape", dist.shape, float("inf"))]
    if not np.all(np.isfinite(dist)):
        bad = np.argwhere(~np.isfinite(dist))[0]
        return [MetricViolation("finite", (labels[bad[0]], labels[bad[1]]), float("inf"))]

    diag = np.abs(np.diag(dist))
    if diag.max(initial=0.0) > tol:
        i = int(diag.argmax())
        violations.append(MetricViolation("zero_diagonal", (labels[i],), float(diag[i])))

    asym = np.abs(dist - dist.T)
    if asym.max(initial=0.0) > tol:
        i, j = np.unravel_index(asym.argmax(), asym.shape)
        violations.append(MetricViolation("symmetry", (labels[i], labels[j]), float(asym[i, j])))

    off = dist + np.eye(n) * np.inf
    if n > 1 and off.min() <= 0:
        i, j = np.unravel_index(off.argmin(), off.shape)
        violations.append(MetricViolation("positivity", (labels[i], labels[j]), float(-off[i, j])))

    best = np.full((n, n), np.inf)
    via = np.zeros((n, n), dtype=int)
    for j in range(n):
        candidate = dist[:, j, None] + dist[None, j, :]
        better = candidate < best
        best[better] = candidate[better]
        via[better] = j
    excess = dist - best
    if excess.max(initial=0.0) > tol:
        i, k = np.unravel_index(excess.argmax(), excess.shape)
        witness = (labels[i], labels[via[i, k]], labels[k])
        violations.append(MetricViolation("triangle", witness, float(excess[i, k])))

    if isinstance(space, FiniteMetricMeasureSpace):
        if space.measure.min() <= 0:
            i = int(space.measure.argmin())
            violations.append(MetricViolation("measure", (labels[i],), float(-space.measure[i])))
        if len(space.edges):
            over = dist[space.edge_u, space.edge_v] - space.edge_w
            if over.max() > tol:
                e = int(over.argmax())
                witness = (labels[space.edge_u[e]], labels[space.edge_v[e]])
                violations.append(MetricViolation("edge_bound", witness, float(over[e])))

    return violations


@retry_on_failure()
def random_space(seed, n, edge_density=RANDOM_EDGE_DENSITY, weight_range=RANDOM_WEIGHT_RANGE,
                 measure_range=RANDOM_MEASURE_RANGE, attempt=0):
    """Seeded Erdos-Renyi weighted graph space; retried until connected"""
    if n < 2:
        raise ValueError(f"random_space needs n >= 2, got {n}")
    rng = np.random.default_rng([int(seed), attempt])
    ids = [str(i) for i in range(n)]
    masses = rng.uniform(*measure_range, size=n)

    g = nx.Graph()
    g.add_nodes_from(range(n))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < edge_density:
                w = float(rng.uniform(*weight_range))
                g.add_edge(i, j)
                edges.append((ids[i], ids[j], w))

    if not nx.is_connected(g):
        raise SpaceError(f"random graph (seed={seed}, n={n}) is disconnected")

    spec = GraphSpec(tuple(zip(ids, (float(m) for m in masses))), tuple(edges))
    return build_from_graph(spec)


def two_point(length=1.0, masses=(1.0, 1.0)):
    """The two-point space X2 with ids a, b"""
    spec = GraphSpec((("a", masses[0]), ("b", masses[1])), (("a", "b", length),))
    return build_from_graph(spec)


def path_graph(n, length=1.0, total_measure=1.0):
    """P_n: n points at spacing length/(n-1) with equal masses"""
    if n < 2:
        raise ValueError("path_graph needs at least two points")
    h = length / (n - 1)
    ids = [str(i) for i in range(n)]
    nodes = tuple((i, total_measure / n) for i in ids)
    edges = tuple((ids[k], ids[k + 1], h) for k in range(n - 1))
    return build_from_graph(GraphSpec(nodes, edges))


def grid_graph(k, length=1.0, total_measure=1.0):
    """k x k grid on [0, length]^2 with 4-neighbour edges and uniform measure"""
    if k < 2:
        raise ValueError("grid_graph needs k >= 2")
    h = length / (k - 1)
    ids = [f"{r}_{c}" for r in range(k) for c in range(k)]
    nodes = tuple((i, total_measure / (k * k)) for i in ids)
    edges = []
    for r in range(k):
        for c in range(k):
            if c + 1 < k:
                edges.append((f"{r}_{c}", f"{r}_{c + 1}", h))
            if r + 1 < k:
                edges.append((f"{r}_{c}", f"{r + 1}_{c}", h))
    return build_from_graph(GraphSpec(nodes, tuple(edges)))


def grid_coordinates(space, length=1.0):
    """(x, y) coordinates of a grid_graph space, in node order"""
    k = int(round(np.sqrt(space.n)))
    h = length / (k - 1)
    coords = []
    for node_id in space.ids:
        r, c = node_id.split("_")
        coords.append((int(c) * h, int(r) * h))
    return np.array(coords)


def space_to_json(space):
    doc = space.graph_spec().to_json()
    doc["dist"] = space.dist.tolist()
    return doc


def space_from_json(doc):
    space = build_from_graph(GraphSpec.from_json(doc))
    if "dist" in doc:
        stored = np.asarray(doc["dist"], dtype=float)
        if stored.shape != space.dist.shape or not np.allclose(stored, space.dist, rtol=0, atol=1e-9):
            logging.warning("Stored dist block disagrees with the graph metric; using the recomputed metric")
    return space


def load_space(path):
    with open(path, "r") as f:
        return space_from_json(json.load(f))


def save_space(space, path):
    with open(path, "w") as f:
        json.dump(space_to_json(space), f, indent=2, sort_keys=True)
    return path
