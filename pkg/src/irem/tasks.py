"""Procedural algorithmic tasks, their ground-truth solvers and brute-force
cross-checks.

Continuous tasks (addition, matrix completion, matrix inverse) yield flat
``x``/``y`` vectors.  Graph tasks (edge copy, connected components, shortest
path) are posed on the complete directed graph over ``n`` nodes: every
ordered pair (i, j), i != j, is an edge carrying an input feature and a
target value.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nets import GraphInstance

CONTINUOUS_KINDS = ("addition", "matrix-completion", "matrix-inverse")
GRAPH_KINDS = ("edge-copy", "connected-components", "shortest-path")
DATASET_FORMAT = "irem-dataset"
DATASET_VERSION = 1

MAX_CONDITION = 1e6


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class ContinuousProblem:
    kind: str
    x: np.ndarray
    y: np.ndarray
    difficulty: str = "same"
    mask: np.ndarray | None = None
    aux: dict = field(default_factory=dict, repr=False)


@dataclass
class GraphProblem:
    kind: str
    graph: GraphInstance
    y: np.ndarray              # (E, 1), one target per ordered pair
    target_matrix: np.ndarray  # (n, n) including the diagonal
    weights: np.ndarray        # (n, n) generating matrix (edge values / distances / adjacency)

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def x(self) -> GraphInstance:
        return self.graph


@dataclass(frozen=True)
class Sat3Formula:
    n_vars: int
    clauses: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        for c in self.clauses:
            for lit in c:
                if lit == 0 or abs(lit) > self.n_vars:
                    raise ValueError(f"literal {lit} out of range for {self.n_vars} variables")


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

def floyd_warshall(weights: np.ndarray) -> np.ndarray:
    """All-pairs shortest distances; ``inf`` marks a missing edge."""
    d = np.array(weights, dtype=np.float64)
    n = len(d)
    np.fill_diagonal(d, 0.0)
    for k in range(n):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


def shortest_paths_bruteforce(weights: np.ndarray) -> np.ndarray:
    """Minimum over every simple path; exponential, for small graphs only."""
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    best = np.full((n, n), np.inf)
    np.fill_diagonal(best, 0.0)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            others = [k for k in range(n) if k not in (i, j)]
            for r in range(len(others) + 1):
                for mid in itertools.permutations(others, r):
                    path = (i, *mid, j)
                    cost = 0.0
                    for a, b in zip(path[:-1], path[1:]):
                        cost += w[a, b]
                    best[i, j] = min(best[i, j], cost)
    return best


def connectivity_union_find(n: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    roots = np.array([find(i) for i in range(n)])
    return (roots[:, None] == roots[None, :]).astype(np.float64)


def connectivity_bfs(adj: np.ndarray) -> np.ndarray:
    """Transitive closure by breadth-first search from every node."""
    adj = np.asarray(adj) > 0
    n = len(adj)
    out = np.zeros((n, n))
    for s in range(n):
        seen = {s}
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for v in np.flatnonzero(adj[u]):
                    if v not in seen:
                        seen.add(int(v))
                        nxt.append(int(v))
            frontier = nxt
        out[s, sorted(seen)] = 1.0
    return out


def gauss_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse by Gauss-Jordan elimination with partial pivoting."""
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    aug = np.hstack([a, np.eye(n)])
    scale = np.abs(a).max() or 1.0
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[piv, col]) <= 1e-13 * scale:
            raise np.linalg.LinAlgError("matrix is singular")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= aug[col, col]
        others = np.arange(n) != col
        aug[others] -= np.outer(aug[others, col], aug[col])
    return aug[:, n:]


def sat3_energy(formula: Sat3Formula, assignment) -> int:
    """Number of clauses the 0/1 assignment violates."""
    a = np.asarray(assignment).astype(bool)
    if a.shape != (formula.n_vars,):
        raise ValueError(f"assignment must have length {formula.n_vars}")
    violated = 0
    for clause in formula.clauses:
        sat = False
        for lit in clause:
            if lit == 0 or abs(lit) > formula.n_vars:
                raise ValueError(f"literal {lit} out of range")
            if a[abs(lit) - 1] == (lit > 0):
                sat = True
                break
        violated += not sat
    return violated


def sat3_energy_all(formula: Sat3Formula) -> np.ndarray:
    """Energies of all 2^D assignments, indexed by the assignment's bits
    (variable 1 is the most significant bit)."""
    d = formula.n_vars
    bits = ((np.arange(2 ** d)[:, None] >> np.arange(d - 1, -1, -1)) & 1).astype(bool)
    energy = np.zeros(2 ** d, dtype=np.int64)
    for clause in formula.clauses:
        sat = np.zeros(2 ** d, dtype=bool)
        for lit in clause:
            col = bits[:, abs(lit) - 1]
            sat |= col if lit > 0 else ~col
        energy += ~sat
    return energy


def dpll_satisfiable(formula: Sat3Formula) -> bool:
    """Satisfiability by unit propagation + splitting."""

    def solve(clauses: list[frozenset[int]]) -> bool:
        clauses = list(clauses)
        while True:
            if not clauses:
                return True
            if any(len(c) == 0 for c in clauses):
                return False
            unit = next((c for c in clauses if len(c) == 1), None)
            if unit is None:
                break
            clauses = _assign(clauses, next(iter(unit)))
        lit = next(iter(clauses[0]))
        return solve(_assign(clauses, lit)) or solve(_assign(clauses, -lit))

    def _assign(clauses, lit):
        return [c - {-lit} for c in clauses if lit not in c]

    return solve([frozenset(c) for c in formula.clauses])


def random_sat3(n_vars: int, n_clauses: int, seed) -> Sat3Formula:
    rng = _rng(seed)
    clauses = []
    for _ in range(n_clauses):
        vars_ = rng.choice(n_vars, size=3, replace=n_vars < 3) + 1
        signs = rng.choice([-1, 1], size=3)
        clauses.append(tuple(int(v * s) for v, s in zip(vars_, signs)))
    return Sat3Formula(n_vars, tuple(clauses))


# --------------------------------------------------------------------------
# continuous generators
# --------------------------------------------------------------------------

def _completion_rank(side: int) -> int:
    return max(1, side // 2)


def generate_continuous(kind: str, difficulty: str, dim: int, seed) -> ContinuousProblem:
    """One problem.  ``dim`` is the vector length (addition) or matrix side."""
    rng = _rng(seed)
    if difficulty not in ("same", "harder"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    hard = difficulty == "harder"
    if kind == "addition":
        bound = 2.5 if hard else 1.0
        a = rng.uniform(-bound, bound, dim)
        b = rng.uniform(-bound, bound, dim)
        return ContinuousProblem(kind, np.concatenate([a, b]), a + b, difficulty)
    if kind == "matrix-completion":
        std = 0.47 if hard else 0.22
        r = _completion_rank(dim)
        u = rng.normal(0.0, std, (r, dim))
        v = rng.normal(0.0, std, (r, dim))
        noise = rng.normal(0.0, 1.0, (dim, dim))
        m = u.T @ v + 0.1 * noise
        mask = np.zeros(dim * dim)
        mask[rng.permutation(dim * dim)[: dim * dim // 2]] = 1.0
        flat = m.reshape(-1)
        return ContinuousProblem(kind, np.concatenate([flat * mask, mask]), flat.copy(), difficulty,
                                 mask=mask, aux={"U": u, "V": v, "noise": noise})
    if kind == "matrix-inverse":
        shift = 0.1 if hard else 0.5
        while True:
            r = rng.uniform(-1.0, 1.0, (dim, dim))
            m = r + r.T + shift * np.eye(dim)
            if np.linalg.cond(m) <= MAX_CONDITION:
                break
        return ContinuousProblem(kind, m.reshape(-1), gauss_inverse(m).reshape(-1), difficulty, aux={"R": r})
    raise ValueError(f"unknown continuous task {kind!r}")


# --------------------------------------------------------------------------
# graph generators
# --------------------------------------------------------------------------

def complete_edges(n: int) -> np.ndarray:
    return np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=np.int64).reshape(-1, 2)


def _symmetric_uniform(rng, n, lo, hi) -> np.ndarray:
    w = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    w[iu] = rng.uniform(lo, hi, len(iu[0]))
    return w + w.T


def _graph_problem(kind: str, weights: np.ndarray, target: np.ndarray) -> GraphProblem:
    n = len(weights)
    e = complete_edges(n)
    g = GraphInstance(n, np.ones((n, 1)), e, weights[e[:, 0], e[:, 1]].reshape(-1, 1))
    return GraphProblem(kind, g, target[e[:, 0], e[:, 1]].reshape(-1, 1), target, weights)


def generate_graph(kind: str, n_nodes: int, seed, keep_prob: float = 0.05) -> GraphProblem:
    if n_nodes < 2:
        raise ValueError("graphs need at least two nodes")
    rng = _rng(seed)
    n = n_nodes
    if kind == "edge-copy":
        w = _symmetric_uniform(rng, n, -1.0, 1.0)
        return _graph_problem(kind, w, w.copy())
    if kind == "connected-components":
        adj = np.zeros((n, n))
        iu = np.triu_indices(n, 1)
        adj[iu] = (rng.random(len(iu[0])) < keep_prob).astype(np.float64)
        adj = adj + adj.T
        return graph_from_adjacency(adj)
    if kind == "shortest-path":
        w = _symmetric_uniform(rng, n, 0.0, 1.0)
        return graph_from_distances(w)
    raise ValueError(f"unknown graph task {kind!r}")


def graph_from_distances(w: np.ndarray) -> GraphProblem:
    return _graph_problem("shortest-path", np.asarray(w, dtype=np.float64), floyd_warshall(w))


def graph_from_adjacency(adj: np.ndarray) -> GraphProblem:
    adj = np.asarray(adj, dtype=np.float64)
    edges = list(zip(*np.nonzero(np.triu(adj, 1))))
    return _graph_problem("connected-components", adj, connectivity_union_find(len(adj), edges))


def oracle_solve(problem):
    """Recompute the ground truth of a generated problem from its inputs."""
    if isinstance(problem, GraphProblem):
        if problem.kind == "shortest-path":
            return floyd_warshall(problem.weights)
        if problem.kind == "connected-components":
            edges = list(zip(*np.nonzero(np.triu(problem.weights, 1))))
            return connectivity_union_find(problem.n, edges)
        if problem.kind == "edge-copy":
            return problem.weights.copy()
    elif isinstance(problem, ContinuousProblem):
        if problem.kind == "addition":
            half = len(problem.x) // 2
            return problem.x[:half] + problem.x[half:]
        if problem.kind == "matrix-completion":
            if "U" in problem.aux:
                a = problem.aux
                return (a["U"].T @ a["V"] + 0.1 * a["noise"]).reshape(-1)
            return problem.y.copy()
        if problem.kind == "matrix-inverse":
            side = int(round(np.sqrt(len(problem.x))))
            return gauss_inverse(problem.x.reshape(side, side)).reshape(-1)
    raise ValueError(f"no oracle for {problem!r}")


# --------------------------------------------------------------------------
# tasks: batched sampling used by training and evaluation
# --------------------------------------------------------------------------

class ContinuousTask:
    """Vector-valued task; ``dim`` is the vector length or matrix side."""

    is_graph = False

    def __init__(self, kind: str, dim: int):
        if kind not in CONTINUOUS_KINDS:
            raise ValueError(f"unknown continuous task {kind!r}")
        self.kind = kind
        self.dim = dim
        probe = generate_continuous(kind, "same", dim, 0)
        self.in_dim = probe.x.size
        self.out_dim = probe.y.size

    def sample(self, n: int, rng, difficulty: str = "same") -> list[ContinuousProblem]:
        rng = _rng(rng)
        return [generate_continuous(self.kind, difficulty, self.dim, rng) for _ in range(n)]

    def collate_x(self, xs):
        return np.stack(xs)

    def collate_y(self, ys):
        return np.stack(ys)

    def split_y(self, y: np.ndarray, xs) -> list[np.ndarray]:
        return list(y)

    def y_shape(self, xb) -> tuple[int, ...]:
        return (len(xb), self.out_dim)


class GraphTask:
    """Graph task; training sizes are drawn uniformly from ``n_range``."""

    is_graph = True

    def __init__(self, kind: str, n_range: tuple[int, int] = (2, 6)):
        if kind not in GRAPH_KINDS:
            raise ValueError(f"unknown graph task {kind!r}")
        self.kind = kind
        self.n_range = tuple(n_range)
        self.node_dim = 1
        self.edge_dim = 1

    def sample(self, n: int, rng, n_nodes: int | None = None, difficulty: str = "same") -> list[GraphProblem]:
        rng = _rng(rng)
        out = []
        for _ in range(n):
            size = n_nodes if n_nodes is not None else int(rng.integers(self.n_range[0], self.n_range[1] + 1))
            out.append(generate_graph(self.kind, size, rng))
        return out

    def collate_x(self, xs):
        return GraphInstance.batch(list(xs))

    def collate_y(self, ys):
        return np.concatenate(ys)

    def split_y(self, y: np.ndarray, xs) -> list[np.ndarray]:
        cuts = np.cumsum([g.n_edges for g in xs])[:-1]
        return np.split(y, cuts)

    def y_shape(self, xb) -> tuple[int, ...]:
        return (xb.n_edges, 1)


def make_task(name: str, dim: int | None = None, n_range=(2, 6)):
    if name in CONTINUOUS_KINDS:
        return ContinuousTask(name, dim or (64 if name == "addition" else 8))
    if name in GRAPH_KINDS:
        return GraphTask(name, n_range)
    raise ValueError(f"unknown task {name!r}")


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

def _problem_record(p) -> dict:
    if isinstance(p, GraphProblem):
        return {"n": p.n, "weights": p.weights.tolist(), "y": p.y.reshape(-1).tolist()}
    rec = {"x": p.x.tolist(), "y": p.y.tolist()}
    if p.mask is not None:
        rec["mask"] = p.mask.tolist()
    return rec


def save_dataset(path, problems: Sequence, kind: str, seed: int, difficulty: str) -> None:
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "kind": kind,
        "seed": seed,
        "difficulty": difficulty,
        "problems": [_problem_record(p) for p in problems],
    }
    Path(path).write_text(json.dumps(doc))


def load_dataset(path) -> tuple[dict, list]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DATASET_FORMAT or doc.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    kind = doc["kind"]
    problems = []
    for rec in doc["problems"]:
        if kind in GRAPH_KINDS:
            w = np.array(rec["weights"])
            if kind == "shortest-path":
                p = graph_from_distances(w)
            elif kind == "connected-components":
                p = graph_from_adjacency(w)
            else:
                p = _graph_problem(kind, w, w.copy())
        else:
            mask = np.array(rec["mask"]) if "mask" in rec else None
            p = ContinuousProblem(kind, np.array(rec["x"]), np.array(rec["y"]), doc["difficulty"], mask=mask)
        problems.append(p)
    meta = {k: doc[k] for k in ("kind", "seed", "difficulty")}
    return meta, problems
