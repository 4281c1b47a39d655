"""Energy and regression networks: MLPs for vector tasks, GINE-style message
passing for graph tasks.

Parameters live in a :class:`Params` container (descriptor + named float64
tensors).  Energy models expose ``energy(x, y[, z])`` returning one scalar per
batch item (per graph for graph batches).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "irem-params"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"swish": ad.swish, "relu": ad.relu}


@dataclass(frozen=True)
class MlpDescriptor:
    """Three hidden linear layers of width ``hidden`` then a linear head."""

    in_dim: int
    hidden: int = 128
    out_dim: int = 1
    activation: str = "swish"
    depth: int = 3
    kind: str = "mlp"


@dataclass(frozen=True)
class GraphDescriptor:
    """Message-passing network over node features and edge features.

    ``y_dim`` extra per-edge channels are concatenated to the edge features
    (the candidate solution for energy models).  ``readout="energy"`` projects
    each node to a scalar and sums per graph; ``readout="edge"`` predicts
    ``out_dim`` values per edge from the concatenated endpoint states.
    """

    node_dim: int = 1
    edge_dim: int = 1
    y_dim: int = 1
    width: int = 64
    layers: int = 3
    activation: str = "swish"
    readout: str = "energy"
    out_dim: int = 1
    kind: str = "graph"


PRESETS = {
    "desk": {"mlp_hidden": 128, "graph_width": 64},
    "full": {"mlp_hidden": 512, "graph_width": 128},
}


def descriptor_from_dict(d: dict):
    d = dict(d)
    kind = d.get("kind")
    if kind == "mlp":
        return MlpDescriptor(**d)
    if kind == "graph":
        return GraphDescriptor(**d)
    raise ValueError(f"unknown descriptor kind {kind!r}")


class Params:
    """Named parameter tensors plus the descriptor that shapes them."""

    def __init__(self, descriptor, tensors: dict[str, Tensor]):
        self.descriptor = descriptor
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def checksum(self) -> str:
        return ad.parameters_checksum(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self) -> "Params":
        return Params(self.descriptor, {k: ad.parameter(v) for k, v in self.arrays().items()})

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite values in place (used by the optimizer)."""
        for k, v in arrays.items():
            self.tensors[k].data = np.asarray(v, dtype=np.float64)


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def _linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def _mlp_shapes(d: MlpDescriptor) -> list[tuple[int, int]]:
    dims = [d.in_dim] + [d.hidden] * d.depth + [d.out_dim]
    return list(zip(dims[:-1], dims[1:]))


def _graph_shapes(d: GraphDescriptor) -> list[tuple[str, int, int]]:
    w = d.width
    shapes = [("node_in", d.node_dim, w), ("edge_in", d.edge_dim + d.y_dim, w)]
    for i in range(d.layers):
        shapes += [(f"mp{i}_a", w, w), (f"mp{i}_b", w, w)]
    head_in = w if d.readout == "energy" else 2 * w
    head_out = 1 if d.readout == "energy" else d.out_dim
    shapes.append(("head", head_in, head_out))
    return shapes


def init_params(descriptor, seed) -> Params:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and eps zero."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    if isinstance(descriptor, MlpDescriptor):
        for i, (fi, fo) in enumerate(_mlp_shapes(descriptor)):
            arrays[f"W{i}"], arrays[f"b{i}"] = _linear(rng, fi, fo)
    elif isinstance(descriptor, GraphDescriptor):
        for name, fi, fo in _graph_shapes(descriptor):
            arrays[f"{name}_W"], arrays[f"{name}_b"] = _linear(rng, fi, fo)
            if name.endswith("_a"):
                arrays[f"{name[:-2]}_eps"] = np.zeros(1)
    else:
        raise TypeError(f"unsupported descriptor {descriptor!r}")
    return Params(descriptor, {k: ad.parameter(v) for k, v in arrays.items()})


def zeros_like_params(params: Params) -> Params:
    return Params(params.descriptor, {k: ad.parameter(np.zeros_like(t.data)) for k, t in params.tensors.items()})


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

def mlp_forward(params: Params, inp: Tensor) -> Tensor:
    d: MlpDescriptor = params.descriptor
    if inp.shape[-1] != d.in_dim:
        raise ValueError(f"MLP expects input width {d.in_dim}, got {inp.shape[-1]}")
    act = _ACTIVATIONS[d.activation]
    h = inp
    for i in range(d.depth):
        h = act(ad.matmul(h, params[f"W{i}"]) + params[f"b{i}"])
    return ad.matmul(h, params[f"W{d.depth}"]) + params[f"b{d.depth}"]


def mlp_energy_forward(params: Params, x: Tensor, y: Tensor, z: Tensor | None = None) -> Tensor:
    """E(x, y) for each row: MLP over concat(x, y[, z]), shape (batch,)."""
    x, y = ad._as_tensor(x), ad._as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"expected batch x O and batch x M, got {x.shape} and {y.shape}")
    parts = [x, y] if z is None else [x, y, ad._as_tensor(z)]
    out = mlp_forward(params, ad.concat(parts, axis=1))
    return ad.reshape(out, (out.shape[0],))


# --------------------------------------------------------------------------
# graphs
# --------------------------------------------------------------------------

@dataclass
class GraphInstance:
    """One graph, or several graphs batched as a disjoint union.

    ``edge_index`` is (E, 2) with rows (src, dst); messages flow src -> dst.
    ``node_graph`` maps each node to its graph within the batch.
    """

    n: int
    node_feat: np.ndarray
    edge_index: np.ndarray
    edge_feat: np.ndarray
    node_graph: np.ndarray = field(default=None)
    n_graphs: int = 1

    def __post_init__(self):
        self.node_feat = np.asarray(self.node_feat, dtype=np.float64).reshape(self.n, -1)
        self.edge_index = np.asarray(self.edge_index, dtype=np.int64).reshape(-1, 2)
        ef = np.asarray(self.edge_feat, dtype=np.float64)
        width = -1 if ef.size else (ef.shape[-1] if ef.ndim == 2 else 1)
        self.edge_feat = ef.reshape(len(self.edge_index), width)
        if self.node_graph is None:
            self.node_graph = np.zeros(self.n, dtype=np.int64)
        if self.edge_index.size and (self.edge_index.min() < 0 or self.edge_index.max() >= self.n):
            raise IndexError("edge references a node outside [0, n)")

    @property
    def n_edges(self) -> int:
        return len(self.edge_index)

    @property
    def edge_graph(self) -> np.ndarray:
        return self.node_graph[self.edge_index[:, 0]]

    @staticmethod
    def batch(graphs: list["GraphInstance"]) -> "GraphInstance":
        offsets = np.cumsum([0] + [g.n for g in graphs])
        gidx = np.concatenate([g.node_graph + sum(h.n_graphs for h in graphs[:i])
                               for i, g in enumerate(graphs)])
        return GraphInstance(
            n=int(offsets[-1]),
            node_feat=np.concatenate([g.node_feat for g in graphs]),
            edge_index=np.concatenate([g.edge_index + o for g, o in zip(graphs, offsets)]),
            edge_feat=np.concatenate([g.edge_feat for g in graphs]),
            node_graph=gidx,
            n_graphs=sum(g.n_graphs for g in graphs),
        )

    def permuted(self, perm: np.ndarray) -> tuple["GraphInstance", np.ndarray]:
        """Relabel node i as perm[i]; returns the graph and the edge order used
        (edge k of the result is edge order[k] of the original)."""
        perm = np.asarray(perm)
        new_edges = perm[self.edge_index]
        order = np.lexsort((new_edges[:, 1], new_edges[:, 0]))
        inv = np.argsort(perm)
        g = GraphInstance(self.n, self.node_feat[inv], new_edges[order], self.edge_feat[order],
                          self.node_graph[inv], self.n_graphs)
        return g, order


def message_passing_layer(node_h: Tensor, graph: GraphInstance, edge_h: Tensor,
                          params: Params, layer: int) -> Tensor:
    """h'_i = MLP((1 + eps) h_i + sum_{j->i} relu(h_j + e_{j->i}))."""
    act = _ACTIVATIONS[params.descriptor.activation]
    src, dst = graph.edge_index[:, 0], graph.edge_index[:, 1]
    msg = ad.relu(ad.gather(node_h, src) + edge_h)
    agg = ad.segment_sum(msg, dst, graph.n)
    h = ad.mul(1.0 + params[f"mp{layer}_eps"], node_h) + agg
    h = act(ad.matmul(h, params[f"mp{layer}_a_W"]) + params[f"mp{layer}_a_b"])
    return ad.matmul(h, params[f"mp{layer}_b_W"]) + params[f"mp{layer}_b_b"]


def _graph_trunk(params: Params, graph: GraphInstance, y_edges: Tensor | None) -> Tensor:
    d: GraphDescriptor = params.descriptor
    act = _ACTIVATIONS[d.activation]
    e = Tensor(graph.edge_feat)
    if d.y_dim:
        if y_edges is None:
            raise ValueError("this network consumes a per-edge candidate y")
        y_edges = ad._as_tensor(y_edges)
        if y_edges.shape != (graph.n_edges, d.y_dim):
            raise ValueError(f"y_edges must have shape ({graph.n_edges}, {d.y_dim}), got {y_edges.shape}")
        e = ad.concat([y_edges, e], axis=1)
    edge_h = ad.matmul(e, params["edge_in_W"]) + params["edge_in_b"]
    node_h = ad.matmul(Tensor(graph.node_feat), params["node_in_W"]) + params["node_in_b"]
    for i in range(d.layers):
        node_h = act(message_passing_layer(node_h, graph, edge_h, params, i))
    return node_h


def graph_energy_forward(params: Params, graph: GraphInstance, y_edges: Tensor) -> Tensor:
    """Per-graph energy, shape (n_graphs,)."""
    node_h = _graph_trunk(params, graph, y_edges)
    per_node = ad.matmul(node_h, params["head_W"]) + params["head_b"]
    return ad.reshape(ad.segment_sum(per_node, graph.node_graph, graph.n_graphs), (graph.n_graphs,))


def graph_edge_forward(params: Params, graph: GraphInstance, y_edges: Tensor | None = None) -> Tensor:
    """Per-edge predictions from concatenated endpoint states, shape (E, out_dim)."""
    node_h = _graph_trunk(params, graph, y_edges)
    src, dst = graph.edge_index[:, 0], graph.edge_index[:, 1]
    pair = ad.concat([ad.gather(node_h, src), ad.gather(node_h, dst)], axis=1)
    return ad.matmul(pair, params["head_W"]) + params["head_b"]


# --------------------------------------------------------------------------
# model wrappers used by the reasoner and trainer
# --------------------------------------------------------------------------

class MlpEnergy:
    """E(x, y[, z]) over flat vectors."""

    def __init__(self, params: Params):
        self.params = params

    def energy(self, x, y, z=None) -> Tensor:
        return mlp_energy_forward(self.params, x, y, z)


class GraphEnergy:
    """E(graph, y_edges); x is a (batched) GraphInstance."""

    def __init__(self, params: Params):
        self.params = params

    def energy(self, x: GraphInstance, y, z=None) -> Tensor:
        if z is not None:
            raise ValueError("graph energies take no scratchpad")
        return graph_energy_forward(self.params, x, y)


def energy_model(params: Params):
    return GraphEnergy(params) if isinstance(params.descriptor, GraphDescriptor) else MlpEnergy(params)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_params(path, params: Params) -> None:
    """Write descriptor + float64 arrays to an ``.npz`` container."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "descriptor": dataclasses.asdict(params.descriptor),
        "names": params.names(),
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 **{f"p_{k}": v for k, v in params.arrays().items()})


def load_params(path) -> Params:
    with np.load(Path(path), allow_pickle=False) as npz:
        header = json.loads(npz["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a parameter checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        desc = descriptor_from_dict(header["descriptor"])
        tensors = {k: ad.parameter(npz[f"p_{k}"]) for k in header["names"]}
    return Params(desc, tensors)
