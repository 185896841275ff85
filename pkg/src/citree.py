"""Conditional inference classification trees.

Splits are chosen in two steps. First every sampled predictor is tested for
association with the binary response using the permutation distribution of
the linear statistic T = sum(g * h) (numeric predictor as its own influence,
class indicator as response). The predictor with the smallest Bonferroni
adjusted p-value is selected, and growth stops when that p-value exceeds
``alpha``. Second, the cut point is the one maximising the standardized
two-sample statistic over cuts that leave ``min_bucket`` rows on each side.

P-values use the normal approximation of the permutation distribution;
``p_value_exact`` and ``p_value_montecarlo`` are the exact and simulated
counterparts used to check it.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import erfc

from src.data_model import Dataset
from src.errors import BadValue, LengthMismatch, NoFeasibleSplit, TooLarge
from src.rng import substream

logger = logging.getLogger(__name__)

# Permutations enumerated per block by p_value_exact.
_EXACT_CHUNK = 50_000
# Permutations drawn per block by p_value_montecarlo; fixed so the draw order never depends on B.
_MC_CHUNK = 10_000
# Relative slack when comparing permuted statistics against the observed one.
_TIE_RTOL = 1e-12


class TreeParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = 0.05
    min_split: int = 20
    min_bucket: int = 7
    mtry: int = 6
    max_permutation_n: int = 8

    @model_validator(mode="after")
    def _check(self) -> "TreeParams":
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.min_bucket < 1:
            raise ValueError("min_bucket must be >= 1")
        if self.min_split < 2 * self.min_bucket:
            raise ValueError("min_split must be >= 2 * min_bucket")
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.max_permutation_n < 1:
            raise ValueError("max_permutation_n must be >= 1")
        return self


@dataclass(frozen=True)
class Leaf:
    n: int
    positive_fraction: float


@dataclass(frozen=True)
class Internal:
    split_variable: int
    cut: float
    p_adjusted: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Internal]


@dataclass(frozen=True)
class ConditionalTree:
    """A grown tree plus the feature layout it routes on."""

    root: TreeNode
    n_features: int
    names: Tuple[str, ...] = ()


@dataclass(frozen=True)
class AssociationResult:
    statistic: float
    mu: float
    sigma2: float
    z: float
    p_value: float


def _two_sided_p(z: np.ndarray) -> np.ndarray:
    # erfc(|z|/sqrt 2) == 2 * (1 - Phi(|z|)); floored so p stays inside (0, 1].
    p = erfc(np.abs(z) / math.sqrt(2.0))
    return np.clip(p, np.finfo(np.float64).tiny, 1.0)


def _as_pair(g, h) -> Tuple[np.ndarray, np.ndarray]:
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if g.ndim != 1 or g.shape != h.shape:
        raise LengthMismatch(f"g and h must be vectors of equal length, got {g.shape} and {h.shape}")
    if g.size < 2:
        raise LengthMismatch("association needs at least two observations")
    return g, h


def linear_association(g, h) -> AssociationResult:
    """Moments and normal-approximation p-value of T = sum(g * h) under permutation of h"""
    g, h = _as_pair(g, h)
    n = g.size
    g_bar, h_bar = g.mean(), h.mean()
    statistic = float(g @ h)
    mu = float(n * g_bar * h_bar)
    if np.ptp(g) == 0 or np.ptp(h) == 0:
        return AssociationResult(statistic, mu, 0.0, 0.0, 1.0)

    sigma2 = float(np.sum((g - g_bar) ** 2) * np.sum((h - h_bar) ** 2) / (n - 1))
    # sum((g - g_bar) * h) equals T - mu without the cancellation
    z = float(np.sum((g - g_bar) * h) / math.sqrt(sigma2))
    return AssociationResult(statistic, mu, sigma2, z, float(_two_sided_p(np.array(z))))


def _extreme_count(stats: np.ndarray, mu: float, observed: float) -> int:
    target = abs(observed - mu)
    tol = _TIE_RTOL * max(1.0, target, abs(mu))
    return int(np.count_nonzero(np.abs(stats - mu) >= target - tol))


def _permutation_blocks(n: int) -> Iterator[np.ndarray]:
    perms = itertools.permutations(range(n))
    while True:
        block = np.array(list(itertools.islice(perms, _EXACT_CHUNK)), dtype=np.intp)
        if block.size == 0:
            return
        yield block


def p_value_exact(g, h, max_n: int = 8) -> float:
    """Exact two-sided permutation p-value by enumerating all n! permutations"""
    g, h = _as_pair(g, h)
    n = g.size
    if n > max_n:
        raise TooLarge(f"exact enumeration limited to n <= {max_n}, got n = {n}")
    mu = n * g.mean() * h.mean()
    observed = float(g @ h)
    extreme = 0
    for block in _permutation_blocks(n):
        extreme += _extreme_count(h[block] @ g, mu, observed)
    return extreme / math.factorial(n)


def p_value_montecarlo(g, h, B: int = 10_000, seed: int = 0) -> float:
    """Simulated permutation p-value (1 + #extreme) / (B + 1)"""
    g, h = _as_pair(g, h)
    if B < 1000:
        raise BadValue(f"Monte-Carlo p-values need B >= 1000, got {B}")
    n = g.size
    mu = n * g.mean() * h.mean()
    observed = float(g @ h)
    rng = substream(seed, n, B)
    extreme = 0
    done = 0
    while done < B:
        size = min(_MC_CHUNK, B - done)
        shuffled = rng.permuted(np.tile(h, (size, 1)), axis=1)
        extreme += _extreme_count(shuffled @ g, mu, observed)
        done += size
    return (1 + extreme) / (B + 1)


def _column_association(G: np.ndarray, h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized linear_association over the columns of G; returns (z, p)"""
    n = G.shape[0]
    dev = G - G.mean(axis=0)
    h_dev = h - h.mean()
    ss_h = float(h_dev @ h_dev)
    ss_g = np.einsum("ij,ij->j", dev, dev)
    usable = (np.ptp(G, axis=0) > 0) & (ss_h > 0)
    sigma = np.sqrt(np.where(usable, ss_g * ss_h / (n - 1), 1.0))
    z = np.where(usable, (dev.T @ h) / sigma, 0.0)
    p = np.where(usable, _two_sided_p(z), 1.0)
    return z, p


def select_split_variable(X: np.ndarray, y: np.ndarray, candidates: Sequence[int], alpha: float,
                          exact_max_n: int = 0) -> Optional[Tuple[int, float]]:
    """Pick the candidate most associated with y, or None when nothing is significant.

    P-values are Bonferroni-adjusted over the candidates tested. Nodes with at
    most ``exact_max_n`` rows use exact permutation p-values instead of the
    normal approximation. Equal associations resolve to the smallest schema index.
    """
    cands = np.array(sorted(set(int(c) for c in candidates)), dtype=np.intp)
    if cands.size == 0:
        raise BadValue("select_split_variable needs at least one candidate")
    G = np.asarray(X, dtype=np.float64)[:, cands]
    h = np.asarray(y, dtype=np.float64)
    z, p = _column_association(G, h)
    if 2 <= G.shape[0] <= exact_max_n:
        p = np.array([p_value_exact(G[:, j], h, max_n=exact_max_n) for j in range(cands.size)])
    p_adj = np.minimum(1.0, cands.size * p)
    # smallest p first, then strongest |z|; lexsort is stable so ties keep ascending index order
    best = np.lexsort((cands, -np.abs(z), p))[0]
    if p_adj[best] > alpha:
        return None
    return int(cands[best]), float(p_adj[best])


def best_split_point(x, y, min_bucket: int = 1) -> float:
    """Cut maximising |z| of the two-sample statistic; go left iff x <= cut"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch("x and y must be vectors of equal length")
    n = x.size
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order].astype(np.int64)
    values, first = np.unique(xs, return_index=True)
    if values.size < 2:
        raise NoFeasibleSplit("predictor has fewer than two distinct values")

    # rows left of the cut between values[k] and values[k + 1]
    n_left = first[1:].astype(np.int64)
    pos_cum = np.concatenate(([0], np.cumsum(ys)))
    pos_left = pos_cum[n_left]
    total_pos = int(pos_cum[-1])

    feasible = (n_left >= min_bucket) & (n - n_left >= min_bucket)
    if not feasible.any():
        raise NoFeasibleSplit(f"no cut leaves {min_bucket} rows on both sides")

    # n * (T - mu) in integers: symmetric under swapping the two classes
    numerator = (n * pos_left - n_left * total_pos).astype(np.float64)
    score = numerator ** 2 / (n_left * (n - n_left))
    score[~feasible] = -1.0
    k = int(np.argmax(score))

    mid = (values[k] + values[k + 1]) / 2.0
    return float(mid if mid < values[k + 1] else values[k])


def grow_tree(data: Dataset, params: TreeParams, rng: np.random.Generator) -> ConditionalTree:
    """Grow a conditional inference tree on every row of ``data``"""
    if len(data) == 0:
        raise BadValue("cannot grow a tree on an empty dataset")
    return grow_from_arrays(data.X, data.y, params, rng, data.schema.names)


def grow_from_arrays(X: np.ndarray, y: np.ndarray, params: TreeParams, rng: np.random.Generator,
                     names: Tuple[str, ...] = ()) -> ConditionalTree:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_features = X.shape[1]
    if params.mtry > n_features:
        raise BadValue(f"mtry = {params.mtry} exceeds the {n_features} available predictors")
    root = _grow_node(X, y, np.arange(len(y)), params, rng)
    return ConditionalTree(root=root, n_features=n_features, names=tuple(names))


def _grow_node(X: np.ndarray, y: np.ndarray, rows: np.ndarray, params: TreeParams,
               rng: np.random.Generator) -> TreeNode:
    n = rows.size
    positives = int(y[rows].sum())
    leaf = Leaf(n=n, positive_fraction=positives / n)
    if n < params.min_split or positives in (0, n):
        return leaf

    candidates = rng.choice(X.shape[1], size=params.mtry, replace=False)
    node_X, node_y = X[rows], y[rows]
    selected = select_split_variable(node_X, node_y, candidates, params.alpha, params.max_permutation_n)
    if selected is None:
        return leaf
    variable, p_adjusted = selected
    try:
        cut = best_split_point(node_X[:, variable], node_y, params.min_bucket)
    except NoFeasibleSplit:
        return leaf

    goes_left = node_X[:, variable] <= cut
    logger.debug(f"split n={n} on variable {variable} at {cut:.6g} (p_adj={p_adjusted:.3g})")
    return Internal(
        split_variable=variable,
        cut=cut,
        p_adjusted=p_adjusted,
        left=_grow_node(X, y, rows[goes_left], params, rng),
        right=_grow_node(X, y, rows[~goes_left], params, rng),
    )


def predict_tree(tree: ConditionalTree, x) -> float:
    """Positive fraction of the leaf that x routes to"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tree.n_features,):
        raise LengthMismatch(f"expected {tree.n_features} features, got {x.shape}")
    node = tree.root
    while isinstance(node, Internal):
        node = node.left if x[node.split_variable] <= node.cut else node.right
    return node.positive_fraction


def predict_tree_matrix(tree: ConditionalTree, X) -> np.ndarray:
    """predict_tree for every row of X"""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tree.n_features:
        raise LengthMismatch(f"expected rows of {tree.n_features} features, got {X.shape}")
    out = np.empty(X.shape[0], dtype=np.float64)
    _fill(tree.root, X, np.arange(X.shape[0]), out)
    return out


def _fill(node: TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
    if isinstance(node, Leaf):
        out[rows] = node.positive_fraction
        return
    goes_left = X[rows, node.split_variable] <= node.cut
    _fill(node.left, X, rows[goes_left], out)
    _fill(node.right, X, rows[~goes_left], out)


def leaves(tree: ConditionalTree) -> Iterator[Leaf]:
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, Leaf):
            yield node
        else:
            stack.extend((node.right, node.left))


def depth(tree: ConditionalTree) -> int:
    def _depth(node: TreeNode) -> int:
        if isinstance(node, Leaf):
            return 0
        return 1 + max(_depth(node.left), _depth(node.right))
    return _depth(tree.root)


def variables_used(tree: ConditionalTree) -> Set[int]:
    used = set()
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, Internal):
            used.add(node.split_variable)
            stack.extend((node.left, node.right))
    return used


def tree_to_dict(tree: ConditionalTree) -> Dict[str, Any]:
    def _node(node: TreeNode) -> Dict[str, Any]:
        if isinstance(node, Leaf):
            return {"kind": "leaf", "n": node.n, "positive_fraction": node.positive_fraction}
        return {
            "kind": "internal",
            "variable": node.split_variable,
            "name": tree.names[node.split_variable] if tree.names else None,
            "cut": node.cut,
            "p_adjusted": node.p_adjusted,
            "left": _node(node.left),
            "right": _node(node.right),
        }
    return {"n_features": tree.n_features, "names": list(tree.names), "root": _node(tree.root)}


def tree_from_dict(doc: Dict[str, Any]) -> ConditionalTree:
    def _node(d: Dict[str, Any]) -> TreeNode:
        if d["kind"] == "leaf":
            return Leaf(n=int(d["n"]), positive_fraction=float(d["positive_fraction"]))
        if d["kind"] != "internal":
            raise BadValue(f"unknown tree node kind {d['kind']!r}")
        return Internal(split_variable=int(d["variable"]), cut=float(d["cut"]),
                        p_adjusted=float(d["p_adjusted"]), left=_node(d["left"]), right=_node(d["right"]))
    return ConditionalTree(root=_node(doc["root"]), n_features=int(doc["n_features"]),
                           names=tuple(doc.get("names", ())))
