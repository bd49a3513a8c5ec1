"""Binary decision trees and the structure moves used by all samplers.

Trees hold vector-valued leaf parameters (length ``p``; univariate samplers
use ``p = 1``).  Split rules send a row left when ``x[variable] < cutpoint``.
Leaf numbering is always preorder, so partitions, sufficient statistics, and
leaf-value matrices line up without extra bookkeeping; preorder also makes
every subtree's leaf indices contiguous, which lets a move patch the cached
partition instead of re-routing every row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import MvbcfError

# Minimum training rows per leaf; proposals that would violate it are
# discarded at proposal time (the sampler treats that as a rejection).
N_MIN_DEFAULT = 5

# Selection weights for the four structure moves, renormalized over whichever
# moves are structurally feasible for the current tree.
MOVE_WEIGHTS = {"grow": 0.25, "prune": 0.25, "change": 0.4, "swap": 0.1}
_MOVE_ORDER = ("grow", "prune", "change", "swap")


@dataclass
class SplitRule:
    variable: int
    cutpoint: float


@dataclass
class TreePriorConfig:
    """Depth-penalty prior: P(node at depth d is internal) = alpha * (1+d)^-beta."""

    alpha: float = 0.95
    beta: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")

    def leaf_term(self, depth: int) -> float:
        return math.log1p(-self.alpha * (1.0 + depth) ** -self.beta)

    def internal_term(self, depth: int) -> float:
        return math.log(self.alpha) - self.beta * math.log1p(depth)

    def grow_delta(self, depth: int) -> float:
        """Change in the log structure prior from splitting a leaf at ``depth``."""
        return (
            self.internal_term(depth)
            + 2.0 * self.leaf_term(depth + 1)
            - self.leaf_term(depth)
        )


class Node:
    __slots__ = ("split", "left", "right", "value", "depth")

    def __init__(self, depth: int, value: Optional[np.ndarray] = None):
        self.split: Optional[SplitRule] = None
        self.left: Optional[Node] = None
        self.right: Optional[Node] = None
        self.value = value
        self.depth = depth

    def is_leaf(self) -> bool:
        return self.split is None


class Tree:
    """A binary tree over a fixed leaf-parameter dimension ``p``.

    Preorder traversal lists (all nodes, leaves, internal nodes) are kept
    up to date by the move machinery so samplers never re-walk the tree.
    """

    def __init__(self, root: Node, p: int):
        self.root = root
        self.p = p
        self.node_list: list[Node] = []
        self.leaf_list: list[Node] = []
        self.internal_list: list[Node] = []
        self._rebuild_caches()

    @classmethod
    def stump(cls, p: int) -> "Tree":
        return cls(Node(0, value=np.zeros(p)), p)

    def _rebuild_caches(self) -> None:
        self.node_list.clear()
        self.leaf_list.clear()
        self.internal_list.clear()
        stack = [self.root]
        while stack:
            node = stack.pop()
            self.node_list.append(node)
            if node.is_leaf():
                self.leaf_list.append(node)
            else:
                self.internal_list.append(node)
                stack.append(node.right)
                stack.append(node.left)

    # -- traversal ---------------------------------------------------------

    def nodes(self) -> list[Node]:
        return self.node_list

    def leaves(self) -> list[Node]:
        """Leaves in preorder; leaf k of a partition is ``leaves()[k]``."""
        return self.leaf_list

    def internal_nodes(self) -> list[Node]:
        return self.internal_list

    def prunable_nodes(self) -> list[Node]:
        """Internal nodes whose children are both leaves."""
        return [
            n for n in self.internal_list
            if n.left.is_leaf() and n.right.is_leaf()
        ]

    def swappable_pairs(self) -> list[tuple[Node, Node]]:
        pairs = []
        for parent in self.internal_list:
            for child in (parent.left, parent.right):
                if not child.is_leaf():
                    pairs.append((parent, child))
        return pairs

    def n_leaves(self) -> int:
        return len(self.leaf_list)

    def leaf_values(self) -> np.ndarray:
        """(K, p) matrix of leaf parameters in preorder."""
        return np.array([leaf.value for leaf in self.leaf_list])

    def set_leaf_values(self, values: np.ndarray) -> None:
        for leaf, row in zip(self.leaf_list, values):
            leaf.value = np.asarray(row, dtype=float).copy()

    def leaf_index(self, leaf: Node) -> int:
        return self.leaf_list.index(leaf)

    def first_leaf_index(self, node: Node) -> int:
        """Preorder index of the leftmost leaf under ``node``."""
        cur = node
        while not cur.is_leaf():
            cur = cur.left
        return self.leaf_list.index(cur)

    def subtree_leaf_count(self, node: Node) -> int:
        count, stack = 0, [node]
        while stack:
            cur = stack.pop()
            if cur.is_leaf():
                count += 1
            else:
                stack.append(cur.right)
                stack.append(cur.left)
        return count

    def copy(self) -> "Tree":
        def clone(node: Node) -> Node:
            new = Node(node.depth)
            if node.is_leaf():
                new.value = node.value.copy()
            else:
                new.split = SplitRule(node.split.variable, node.split.cutpoint)
                new.left = clone(node.left)
                new.right = clone(node.right)
            return new

        return Tree(clone(self.root), self.p)


# -- partitioning and evaluation -------------------------------------------


def partition(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Leaf index (preorder numbering) for every row of ``X``."""
    n = X.shape[0]
    leaf_ids = np.empty(n, dtype=np.intp)
    _route(tree.root, X, np.arange(n), leaf_ids, 0)
    return leaf_ids


def _route(node: Node, X: np.ndarray, rows: np.ndarray, leaf_ids: np.ndarray,
           counter: int) -> int:
    """Assign preorder leaf ids to ``rows`` under ``node``; returns next id."""
    if node.is_leaf():
        leaf_ids[rows] = counter
        return counter + 1
    go_left = X[rows, node.split.variable] < node.split.cutpoint
    counter = _route(node.left, X, rows[go_left], leaf_ids, counter)
    return _route(node.right, X, rows[~go_left], leaf_ids, counter)


def evaluate(tree: Tree, X: np.ndarray) -> np.ndarray:
    """(n, p) matrix of leaf contributions for every row of ``X``."""
    return tree.leaf_values()[partition(tree, X)]


def log_tree_prior(tree: Tree, prior: TreePriorConfig) -> float:
    """Log of the depth-penalty structure prior; ignores leaf values."""
    total = 0.0
    for node in tree.nodes():
        if node.is_leaf():
            total += prior.leaf_term(node.depth)
        else:
            total += prior.internal_term(node.depth)
    return total


# -- structure moves -----------------------------------------------------------


@dataclass
class AppliedMove:
    """An in-place structure move, reversible until the sampler commits it."""

    kind: str
    log_transition_ratio: float
    log_prior_delta: float
    leaf_ids: np.ndarray = field(repr=False)   # patched partition of the new tree
    counts: np.ndarray = field(repr=False)
    undo: Callable[[], None] = field(repr=False)


@dataclass
class MoveProposal:
    kind: str
    new_tree: Tree
    log_transition_ratio: float
    leaf_ids: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)


def cutpoint_grids(X: np.ndarray) -> list[np.ndarray]:
    """Distinct observed values per column; the cutpoint proposal grid."""
    return [np.unique(X[:, j]) for j in range(X.shape[1])]


def _feasible_kinds(tree: Tree) -> list[str]:
    if not tree.internal_list:
        return ["grow"]
    kinds = ["grow", "prune", "change"]
    # A parent-child pair of internal nodes exists iff any non-root node is
    # internal, i.e. there are at least two internal nodes.
    if len(tree.internal_list) >= 2:
        kinds.append("swap")
    return kinds


def _log_kind_prob(kind: str, tree: Tree) -> float:
    kinds = _feasible_kinds(tree)
    total = sum(MOVE_WEIGHTS[k] for k in kinds)
    return math.log(MOVE_WEIGHTS[kind] / total)


def apply_random_move(
    tree: Tree,
    X: np.ndarray,
    prior: TreePriorConfig,
    rng: np.random.Generator,
    leaf_ids: np.ndarray,
    counts: np.ndarray,
    grids: list[np.ndarray],
    n_min: int = N_MIN_DEFAULT,
) -> Optional[AppliedMove]:
    """Mutate ``tree`` in place with one random structure move.

    ``leaf_ids``/``counts`` are the tree's cached partition of ``X``; the
    returned move carries the patched partition for the mutated tree plus an
    ``undo`` callback restoring the previous structure.  Returns ``None``
    (tree untouched) when the sampled proposal would leave a leaf with fewer
    than ``n_min`` rows; callers treat that as a rejected proposal.
    """
    kinds = _feasible_kinds(tree)
    weights = np.array([MOVE_WEIGHTS[k] for k in kinds])
    cum = np.cumsum(weights / weights.sum())
    kind = kinds[int(np.searchsorted(cum, rng.random(), side="right"))]
    d = X.shape[1]

    if kind == "grow":
        k = int(rng.integers(len(tree.leaf_list)))
        node = tree.leaf_list[k]
        var = int(rng.integers(d))
        grid = grids[var]
        cut = float(grid[rng.integers(grid.size)])
        rows = np.flatnonzero(leaf_ids == k)
        go_left = X[rows, var] < cut
        n_left = int(go_left.sum())
        n_right = rows.size - n_left
        if min(n_left, n_right) < n_min:
            return None
        log_p_grow = _log_kind_prob("grow", tree)
        n_leaves_before = len(tree.leaf_list)
        node.split = SplitRule(var, cut)
        node.left = Node(node.depth + 1, value=node.value.copy())
        node.right = Node(node.depth + 1, value=node.value.copy())
        node.value = None
        tree.leaf_list[k:k + 1] = [node.left, node.right]
        tree.internal_list.append(node)
        tree.node_list.append(node.left)
        tree.node_list.append(node.right)
        new_ids = np.where(leaf_ids > k, leaf_ids + 1, leaf_ids)
        new_ids[rows[~go_left]] = k + 1
        new_counts = np.insert(counts, k + 1, n_right)
        new_counts[k] = n_left
        ratio = (
            _log_kind_prob("prune", tree) - math.log(len(tree.prunable_nodes()))
        ) - (
            log_p_grow - math.log(n_leaves_before) - math.log(d) - math.log(grid.size)
        )

        def undo():
            tree.leaf_list[k:k + 2] = [node]
            tree.internal_list.remove(node)
            tree.node_list.remove(node.left)
            tree.node_list.remove(node.right)
            node.value = node.left.value
            node.split = None
            node.left = None
            node.right = None

        return AppliedMove("grow", ratio, prior.grow_delta(node.depth),
                           new_ids, new_counts, undo)

    if kind == "prune":
        candidates = tree.prunable_nodes()
        node = candidates[int(rng.integers(len(candidates)))]
        k = tree.leaf_index(node.left)
        var = node.split.variable
        grid_size = grids[var].size
        log_p_prune = _log_kind_prob("prune", tree)
        old_split, old_left, old_right = node.split, node.left, node.right
        node.value = node.left.value
        node.split = None
        node.left = None
        node.right = None
        tree.leaf_list[k:k + 2] = [node]
        tree.internal_list.remove(node)
        tree.node_list.remove(old_left)
        tree.node_list.remove(old_right)
        new_ids = leaf_ids.copy()
        new_ids[leaf_ids == k + 1] = k
        new_ids[leaf_ids > k + 1] -= 1
        new_counts = counts.copy()
        new_counts[k] += new_counts[k + 1]
        new_counts = np.delete(new_counts, k + 1)
        ratio = (
            _log_kind_prob("grow", tree)
            - math.log(len(tree.leaf_list))
            - math.log(d)
            - math.log(grid_size)
        ) - (log_p_prune - math.log(len(candidates)))

        def undo():
            node.split, node.left, node.right = old_split, old_left, old_right
            node.value = None
            tree.leaf_list[k:k + 1] = [old_left, old_right]
            tree.internal_list.append(node)
            tree.node_list.append(old_left)
            tree.node_list.append(old_right)

        return AppliedMove("prune", ratio, -prior.grow_delta(node.depth),
                           new_ids, new_counts, undo)

    if kind == "change":
        node = tree.internal_list[int(rng.integers(len(tree.internal_list)))]
        var = int(rng.integers(d))
        grid = grids[var]
        cut = float(grid[rng.integers(grid.size)])
        old_split = node.split
        node.split = SplitRule(var, cut)

        def undo():
            node.split = old_split

        return _reroute_subtree("change", tree, node, X, leaf_ids, counts,
                                n_min, undo)

    # swap
    internal = tree.internal_list
    pairs = [
        (parent, child)
        for parent in internal
        for child in (parent.left, parent.right)
        if not child.is_leaf()
    ]
    parent, child = pairs[int(rng.integers(len(pairs)))]
    parent.split, child.split = child.split, parent.split

    def undo():
        parent.split, child.split = child.split, parent.split

    return _reroute_subtree("swap", tree, parent, X, leaf_ids, counts, n_min, undo)


def _reroute_subtree(kind: str, tree: Tree, node: Node, X: np.ndarray,
                     leaf_ids: np.ndarray, counts: np.ndarray, n_min: int,
                     undo: Callable[[], None]) -> Optional[AppliedMove]:
    """Re-route only the rows owned by ``node`` after a rule modification."""
    first = tree.first_leaf_index(node)
    width = tree.subtree_leaf_count(node)
    rows = np.flatnonzero((leaf_ids >= first) & (leaf_ids < first + width))
    new_ids = leaf_ids.copy()
    _route(node, X, rows, new_ids, first)
    new_counts = np.bincount(new_ids, minlength=counts.size)
    if new_counts.min() < n_min:
        undo()
        return None
    # Rule rearrangements keep the node set, so the structure prior is unchanged.
    return AppliedMove(kind, 0.0, 0.0, new_ids, new_counts, undo)


def propose_move(
    tree: Tree,
    X: np.ndarray,
    prior: TreePriorConfig,
    rng: np.random.Generator,
    grids: Optional[list[np.ndarray]] = None,
    n_min: int = N_MIN_DEFAULT,
    leaf_ids: Optional[np.ndarray] = None,
) -> Optional[MoveProposal]:
    """Draw one grow/prune/change/swap proposal as a new tree.

    Returns ``None`` when the sampled proposal would produce an empty or
    undersized leaf; callers treat that as an immediate rejection.  The
    ``log_transition_ratio`` is ``log q(T|T') - log q(T'|T)``: zero for change
    and swap (symmetric proposals) and the selection asymmetry for grow/prune.
    """
    if grids is None:
        grids = cutpoint_grids(X)
    if leaf_ids is None:
        leaf_ids = partition(tree, X)
    counts = np.bincount(leaf_ids, minlength=tree.n_leaves())
    new_tree = tree.copy()
    applied = apply_random_move(new_tree, X, prior, rng, leaf_ids, counts,
                                grids, n_min)
    if applied is None:
        return None
    return MoveProposal(applied.kind, new_tree, applied.log_transition_ratio,
                        applied.leaf_ids, applied.counts)


# -- sufficient statistics ---------------------------------------------------


@dataclass
class LeafStats:
    """Per-leaf accumulators adequate for every closed-form leaf update.

    ``zz[k] = Z_k' Z_k`` and ``zr[k] = sum_i Z_i R_i'`` carry the treatment
    cross terms; both are ``None`` for prognostic (treatment-free) trees.
    """

    counts: np.ndarray            # (K,)
    rsum: np.ndarray              # (K, p)
    router: np.ndarray            # (K, p, p), sum of residual outer products
    zz: Optional[np.ndarray]      # (K, p, p)
    zr: Optional[np.ndarray]      # (K, p, p), zr[k, a, b] = sum_i Z_ia R_ib


def leaf_suffstats(
    tree: Tree,
    X: np.ndarray,
    residuals: np.ndarray,
    Z: Optional[np.ndarray] = None,
    leaf_ids: Optional[np.ndarray] = None,
) -> LeafStats:
    """Accumulate per-leaf statistics of ``residuals`` (n, p) under ``tree``.

    ``leaf_ids`` may be passed to reuse a cached partition.  Raises if any
    leaf ends up empty, which the move machinery makes unreachable.
    """
    if leaf_ids is None:
        leaf_ids = partition(tree, X)
    return suffstats_from_ids(leaf_ids, tree.n_leaves(), residuals, Z)


def suffstats_from_ids(
    leaf_ids: np.ndarray,
    n_leaves: int,
    residuals: np.ndarray,
    Z: Optional[np.ndarray] = None,
) -> LeafStats:
    residuals = np.atleast_2d(residuals.T).T  # (n, p) even for vector input
    p = residuals.shape[1]
    counts = np.bincount(leaf_ids, minlength=n_leaves)
    if counts.min() == 0:
        raise MvbcfError("violated invariant: a leaf holds zero training rows")
    rsum = np.empty((n_leaves, p))
    router = np.empty((n_leaves, p, p))
    for a in range(p):
        rsum[:, a] = np.bincount(leaf_ids, weights=residuals[:, a], minlength=n_leaves)
        for b in range(a, p):
            acc = np.bincount(
                leaf_ids, weights=residuals[:, a] * residuals[:, b], minlength=n_leaves
            )
            router[:, a, b] = acc
            router[:, b, a] = acc
    zz = zr = None
    if Z is not None:
        Z = np.atleast_2d(Z.T).T
        zz = np.empty((n_leaves, p, p))
        zr = np.empty((n_leaves, p, p))
        for a in range(p):
            for b in range(p):
                zr[:, a, b] = np.bincount(
                    leaf_ids, weights=Z[:, a] * residuals[:, b], minlength=n_leaves
                )
                if b >= a:
                    acc = np.bincount(
                        leaf_ids, weights=Z[:, a] * Z[:, b], minlength=n_leaves
                    )
                    zz[:, a, b] = acc
                    zz[:, b, a] = acc
    return LeafStats(counts, rsum, router, zz, zr)


# -- frozen trees and serialization -----------------------------------------


class FrozenTree:
    """Immutable array-backed snapshot of a tree, cheap to store and replay."""

    __slots__ = ("var", "cut", "left", "right", "leaf_slot", "values")

    def __init__(self, var, cut, left, right, leaf_slot, values):
        self.var = var
        self.cut = cut
        self.left = left
        self.right = right
        self.leaf_slot = leaf_slot
        self.values = values

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        n = X.shape[0]
        idx = np.zeros(n, dtype=np.int32)
        active = np.flatnonzero(self.var[idx] >= 0)
        while active.size:
            node = idx[active]
            go_left = X[active, self.var[node]] < self.cut[node]
            idx[active] = np.where(go_left, self.left[node], self.right[node])
            active = active[self.var[idx[active]] >= 0]
        return self.values[self.leaf_slot[idx]]


def freeze(tree: Tree) -> FrozenTree:
    """Snapshot using the cached preorder node list (no recursion)."""
    nodes = tree.node_list
    order = {id(node): i for i, node in enumerate(nodes)}
    m = len(nodes)
    var = np.full(m, -1, dtype=np.int32)
    cut = np.zeros(m, dtype=float)
    left = np.full(m, -1, dtype=np.int32)
    right = np.full(m, -1, dtype=np.int32)
    leaf_slot = np.full(m, -1, dtype=np.int32)
    values = np.empty((tree.n_leaves(), tree.p), dtype=float)
    slot = 0
    for i, node in enumerate(nodes):
        if node.is_leaf():
            leaf_slot[i] = slot
            values[slot] = node.value
            slot += 1
        else:
            var[i] = node.split.variable
            cut[i] = node.split.cutpoint
            left[i] = order[id(node.left)]
            right[i] = order[id(node.right)]
    return FrozenTree(var, cut, left, right, leaf_slot, values)


def thaw(frozen: FrozenTree) -> Tree:
    p = frozen.values.shape[1]

    def build(pos: int, depth: int) -> Node:
        node = Node(depth)
        if frozen.var[pos] < 0:
            node.value = frozen.values[frozen.leaf_slot[pos]].copy()
            return node
        node.split = SplitRule(int(frozen.var[pos]), float(frozen.cut[pos]))
        node.left = build(int(frozen.left[pos]), depth + 1)
        node.right = build(int(frozen.right[pos]), depth + 1)
        return node

    return Tree(build(0, 0), p)


def tree_to_dict(tree_or_frozen) -> dict:
    """Nested-record form: internal nodes carry var/cut, leaves their vector."""
    if isinstance(tree_or_frozen, FrozenTree):
        frozen = tree_or_frozen

        def from_frozen(pos: int) -> dict:
            if frozen.var[pos] < 0:
                return {"leaf": frozen.values[frozen.leaf_slot[pos]].tolist()}
            return {
                "var": int(frozen.var[pos]),
                "cut": float(frozen.cut[pos]),
                "left": from_frozen(int(frozen.left[pos])),
                "right": from_frozen(int(frozen.right[pos])),
            }

        return from_frozen(0)

    def from_node(node: Node) -> dict:
        if node.is_leaf():
            return {"leaf": np.asarray(node.value, dtype=float).tolist()}
        return {
            "var": node.split.variable,
            "cut": node.split.cutpoint,
            "left": from_node(node.left),
            "right": from_node(node.right),
        }

    return from_node(tree_or_frozen.root)


def tree_from_dict(record: dict) -> Tree:
    def build(rec: dict, depth: int) -> tuple[Node, int]:
        node = Node(depth)
        if "leaf" in rec:
            node.value = np.asarray(rec["leaf"], dtype=float)
            return node, node.value.shape[0]
        node.split = SplitRule(int(rec["var"]), float(rec["cut"]))
        node.left, p = build(rec["left"], depth + 1)
        node.right, _ = build(rec["right"], depth + 1)
        return node, p

    root, p = build(record, 0)
    return Tree(root, p)


def tree_to_json(tree_or_frozen) -> str:
    return json.dumps(tree_to_dict(tree_or_frozen), separators=(",", ":"))


def tree_from_json(text: str) -> Tree:
    return tree_from_dict(json.loads(text))
