"""Fixed binary tree of three binary classifiers.

The root decides Carcinoma vs NonCarcinoma; its children split each
superclass into leaves: Normal/Benign under NonCarcinoma, InSitu/Invasive
under Carcinoma. Each node holds one or more network versions whose
probability pairs are averaged before any routing decision.
"""

import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DataError
from .ioutil import read_json, write_json
from .nnet import Network, load_network


class LeafLabel(Enum):
    NORMAL = "Normal"
    BENIGN = "Benign"
    IN_SITU = "InSitu"
    INVASIVE = "Invasive"


LEAF_ORDER = (LeafLabel.NORMAL, LeafLabel.BENIGN, LeafLabel.IN_SITU, LeafLabel.INVASIVE)
LEAF_INDEX = {label: i for i, label in enumerate(LEAF_ORDER)}
CARCINOMA_LEAVES = frozenset({LeafLabel.IN_SITU, LeafLabel.INVASIVE})

NODE_CLASS_ORDER = {
    "carci": ("NonCarcinoma", "Carcinoma"),
    "norbe": ("Normal", "Benign"),
    "invis": ("InSitu", "Invasive"),
}
NODE_NAMES = tuple(NODE_CLASS_ORDER)


def superclass_of(label: LeafLabel) -> int:
    """Root-node class index: 0 = NonCarcinoma, 1 = Carcinoma."""
    return 1 if label in CARCINOMA_LEAVES else 0


@dataclass
class TreeNode:
    name: str
    versions: list
    weights: list | None = None

    def __post_init__(self):
        if self.name not in NODE_CLASS_ORDER:
            raise ValueError(f"unknown node {self.name!r}")
        if not self.versions:
            raise ValueError(f"node {self.name!r} has no model versions")
        if self.weights is not None and len(self.weights) != len(self.versions):
            raise ValueError(f"node {self.name!r}: weights do not match versions")

    @property
    def class_order(self):
        return NODE_CLASS_ORDER[self.name]


@dataclass
class HierarchyTree:
    carci: TreeNode
    norbe: TreeNode
    invis: TreeNode

    def node(self, name: str) -> TreeNode:
        if name not in NODE_CLASS_ORDER:
            raise ValueError(f"unknown node {name!r}")
        return getattr(self, name)


def ensemble_node_prob(versions, x, weights=None) -> np.ndarray:
    """Weighted mean of per-version probability pairs, row-wise.

    ``x`` may be a single row or a batch; the result matches. Uniform
    weights by default.
    """
    if isinstance(versions, Network):
        versions = [versions]
    if not versions:
        raise ValueError("ensemble needs at least one version")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if weights is None:
        w = np.full(len(versions), 1.0 / len(versions))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(versions),) or w.min() < 0 or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        w = w / w.sum()
    out = np.zeros((batch.shape[0], 2))
    for net, wi in zip(versions, w):
        net.eval()
        out += wi * net.forward(batch)
    return out[0] if single else out


def node_prob(node: TreeNode, x) -> np.ndarray:
    return ensemble_node_prob(node.versions, x, node.weights)


def route_pairs(root_pair, norbe_pair, invis_pair) -> LeafLabel:
    """Greedy root-to-leaf routing over probability pairs.

    Ties take the first class in each node's class order.
    """
    if root_pair[1] > root_pair[0]:
        pair = invis_pair
        return LeafLabel.INVASIVE if pair[1] > pair[0] else LeafLabel.IN_SITU
    pair = norbe_pair
    return LeafLabel.BENIGN if pair[1] > pair[0] else LeafLabel.NORMAL


def chain_pairs(root_pair, norbe_pair, invis_pair) -> np.ndarray:
    """Leaf distribution via the chain rule, in ``LEAF_ORDER``."""
    return np.array(
        [
            root_pair[0] * norbe_pair[0],
            root_pair[0] * norbe_pair[1],
            root_pair[1] * invis_pair[0],
            root_pair[1] * invis_pair[1],
        ]
    )


def predict_hard(tree: HierarchyTree, x) -> LeafLabel:
    """Route one sample greedily; only the chosen child is evaluated."""
    root = node_prob(tree.carci, np.asarray(x, dtype=np.float64))
    if root[1] > root[0]:
        pair = node_prob(tree.invis, x)
        return LeafLabel.INVASIVE if pair[1] > pair[0] else LeafLabel.IN_SITU
    pair = node_prob(tree.norbe, x)
    return LeafLabel.BENIGN if pair[1] > pair[0] else LeafLabel.NORMAL


def predict_soft(tree: HierarchyTree, x) -> np.ndarray:
    """Four leaf probabilities (chain rule), summing to one."""
    return chain_pairs(node_prob(tree.carci, x), node_prob(tree.norbe, x), node_prob(tree.invis, x))


def predict_hard_batch(tree: HierarchyTree, batch: np.ndarray) -> list:
    """Greedy routing for every row; children only see the rows routed to them."""
    batch = np.asarray(batch, dtype=np.float64)
    root = node_prob(tree.carci, batch)
    carcinoma = root[:, 1] > root[:, 0]
    labels = [None] * batch.shape[0]
    for mask, node, first, second in (
        (~carcinoma, tree.norbe, LeafLabel.NORMAL, LeafLabel.BENIGN),
        (carcinoma, tree.invis, LeafLabel.IN_SITU, LeafLabel.INVASIVE),
    ):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        pairs = node_prob(node, batch[idx])
        for row, pair in zip(idx, pairs):
            labels[row] = second if pair[1] > pair[0] else first
    return labels


def predict_soft_batch(tree: HierarchyTree, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    root = node_prob(tree.carci, batch)
    nb = node_prob(tree.norbe, batch)
    iv = node_prob(tree.invis, batch)
    return np.column_stack(
        [root[:, 0] * nb[:, 0], root[:, 0] * nb[:, 1], root[:, 1] * iv[:, 0], root[:, 1] * iv[:, 1]]
    )


@dataclass
class ConsistencyReport:
    """Where greedy routing and the chained argmax disagree (they may)."""

    total: int
    mismatch_indices: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.mismatch_indices)


def hard_soft_consistency_check(tree: HierarchyTree, batch) -> ConsistencyReport:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        return ConsistencyReport(total=0)
    hard = predict_hard_batch(tree, batch)
    soft = predict_soft_batch(tree, batch)
    mismatches = [
        i for i, label in enumerate(hard) if LEAF_ORDER[int(np.argmax(soft[i]))] is not label
    ]
    return ConsistencyReport(total=batch.shape[0], mismatch_indices=mismatches)


# -- manifest ----------------------------------------------------------------

MANIFEST_VERSION = 1


def write_manifest(path: str, node_files: dict, node_weights: dict | None = None) -> None:
    """Record, per node, the network files (relative to the manifest) and
    class order consumed by ``predict`` and ``eval``."""
    node_weights = node_weights or {}
    base = os.path.dirname(os.path.abspath(path))
    nodes = {}
    for name in NODE_NAMES:
        files = node_files.get(name)
        if not files:
            raise ValueError(f"manifest needs at least one version for node {name!r}")
        rel = [os.path.relpath(os.path.abspath(f), base) for f in files]
        nodes[name] = {
            "class_order": list(NODE_CLASS_ORDER[name]),
            "versions": rel,
            "weights": node_weights.get(name),
        }
    write_json(path, {"format_version": MANIFEST_VERSION, "nodes": nodes})


def load_manifest(path: str) -> dict:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    doc = read_json(path)
    if doc.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('format_version')!r}")
    for name in NODE_NAMES:
        entry = doc.get("nodes", {}).get(name)
        if not entry or not entry.get("versions"):
            raise DataError(f"manifest is missing node {name!r}")
        if tuple(entry.get("class_order", ())) != NODE_CLASS_ORDER[name]:
            raise DataError(f"manifest class order for {name!r} does not match the fixed tree")
    return doc


def load_tree(path: str) -> HierarchyTree:
    doc = load_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    nodes = {}
    for name in NODE_NAMES:
        entry = doc["nodes"][name]
        versions = []
        for rel in entry["versions"]:
            file_path = os.path.join(base, rel)
            if not os.path.exists(file_path):
                raise DataError(f"network file not found: {file_path}")
            versions.append(load_network(file_path))
        nodes[name] = TreeNode(name=name, versions=versions, weights=entry.get("weights"))
    tree = HierarchyTree(**nodes)
    dims = {n.versions[0].input_dim for n in (tree.carci, tree.norbe, tree.invis)}
    dims.update(v.input_dim for n in (tree.carci, tree.norbe, tree.invis) for v in n.versions)
    if len(dims) != 1:
        raise DataError(f"tree mixes input widths {sorted(dims)}")
    return tree
