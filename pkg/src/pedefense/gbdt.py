"""Gradient-boosted decision trees with optional monotone constraints.

Histogram-based trainer for binary logistic loss, self-contained on
purpose: the monotone-constraint mechanism is the modeling idea this
package leans on, so it is first-class and testable rather than hidden
behind an external booster.

Monotonicity is enforced two ways, both standard:

* a candidate split on a constrained feature is rejected when the implied
  child values are ordered against the constraint, and
* every node carries a ``[lower, upper]`` bound on leaf values; splitting
  on a constrained feature pins the children's bounds around the midpoint
  of the child values, and leaf values are clamped into their node bounds.

Together these guarantee that increasing a ``+1`` feature can never lower
the raw score.  Leaf values are additionally clamped into
``[-LEAF_VALUE_BOUND, +LEAF_VALUE_BOUND]`` at the root.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

FORMAT_VERSION = 1
LEAF_VALUE_BOUND = 10.0
_MIN_GAIN = 1e-12
_PRIOR_CLIP = 1e-3


class DimensionMismatch(ValueError):
    """Input vector length does not match the model's feature dimension."""


class CorruptModel(ValueError):
    """Model file failed structural validation."""


@dataclass
class Tree:
    """One regression tree in struct-of-arrays form; node 0 is the root."""
    feature: np.ndarray      # int32; -1 marks a leaf
    threshold: np.ndarray    # float64; rule is x[f] <= t -> left
    left: np.ndarray         # int32 child indices
    right: np.ndarray
    value: np.ndarray        # float64 leaf contribution (post learning rate)
    default_left: np.ndarray  # bool; branch taken on missing values

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class TrainConfig:
    num_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    histogram_bins: int = 256
    l2_leaf_regularization: float = 1.0
    subsample: float = 1.0
    colsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("num_trees, max_depth, min_samples_leaf must be >= 1")
        if self.learning_rate <= 0 or self.l2_leaf_regularization <= 0:
            raise ValueError("learning_rate and l2 regularization must be > 0")
        if not 2 <= self.histogram_bins <= 256:
            raise ValueError("histogram_bins must be in [2, 256]")
        if not 0 < self.subsample <= 1 or not 0 < self.colsample <= 1:
            raise ValueError("subsample ratios must be in (0, 1]")


@dataclass
class TreeEnsemble:
    trees: List[Tree]
    base_score: float
    monotone: np.ndarray        # int8 per feature, values in {-1, 0, +1}
    feature_dimension: int
    metadata: Dict = field(default_factory=dict)

    def digest(self) -> str:
        payload = json.dumps(model_to_dict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _tree_raw_scores(tree: Tree, X: np.ndarray) -> np.ndarray:
    out = np.zeros(len(X), dtype=np.float64)
    node = np.zeros(len(X), dtype=np.int32)
    active = np.arange(len(X))
    while active.size:
        cur = node[active]
        leaf = tree.feature[cur] < 0
        if leaf.any():
            done = active[leaf]
            out[done] = tree.value[node[done]]
            active = active[~leaf]
            cur = node[active]
        if not active.size:
            break
        x = X[active, tree.feature[cur]]
        go_left = np.where(np.isnan(x), tree.default_left[cur],
                           x <= tree.threshold[cur])
        node[active] = np.where(go_left, tree.left[cur], tree.right[cur])
    return out


def raw_score(ensemble: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Base score plus summed tree outputs, before the sigmoid."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != ensemble.feature_dimension:
        raise DimensionMismatch(
            f"expected {ensemble.feature_dimension} features, got {X.shape[1]}")
    total = np.full(len(X), ensemble.base_score, dtype=np.float64)
    for tree in ensemble.trees:
        total += _tree_raw_scores(tree, X)
    return total


def predict(ensemble: TreeEnsemble, x) -> np.ndarray:
    """Malware probability in [0, 1]; accepts one vector or a matrix."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    probs = _sigmoid(raw_score(ensemble, arr))
    return probs[0] if single else probs


def predict_one(ensemble: TreeEnsemble, x) -> float:
    return float(predict(ensemble, np.asarray(x, dtype=np.float64)))


# --------------------------------------------------------------------------
# training

def _quantile_thresholds(col: np.ndarray, max_bins: int) -> np.ndarray:
    """Split-candidate thresholds: midpoints of (subsampled) unique values."""
    u = np.unique(col)
    if u.size <= 1:
        return np.empty(0, dtype=np.float64)
    mids = (u[:-1] + u[1:]) / 2.0
    if mids.size <= max_bins - 1:
        return mids
    pick = np.round(np.linspace(0, mids.size - 1, max_bins - 1)).astype(np.int64)
    return np.unique(mids[pick])


def _bin_data(X: np.ndarray, max_bins: int):
    """Per-feature thresholds plus the binned uint8 matrix.

    Bin index is ``#{t in thresholds : t < x}``, so ``bin(x) <= b`` holds
    exactly when ``x <= thresholds[b]`` -- binned training and threshold
    prediction agree bit-for-bit, ties included.
    """
    n, d = X.shape
    thresholds = []
    binned = np.empty((n, d), dtype=np.uint8)
    nbins = np.empty(d, dtype=np.int64)
    for f in range(d):
        thr = _quantile_thresholds(X[:, f], max_bins)
        thresholds.append(thr)
        binned[:, f] = np.searchsorted(thr, X[:, f], side="left").astype(np.uint8)
        nbins[f] = len(thr) + 1
    return thresholds, binned, nbins


def _node_histograms(binned_sub: np.ndarray, rows: np.ndarray,
                     g: np.ndarray, h: np.ndarray, maxb: int):
    """(g, h, count) histograms of shape (n_features, maxb) for one node."""
    m, F = len(rows), binned_sub.shape[1]
    flat = binned_sub[rows].astype(np.int64)
    flat += np.arange(F, dtype=np.int64) * maxb
    flat = flat.ravel()
    size = F * maxb
    gh = np.bincount(flat, weights=np.repeat(g[rows], F), minlength=size)
    hh = np.bincount(flat, weights=np.repeat(h[rows], F), minlength=size)
    ch = np.bincount(flat, minlength=size)
    return gh.reshape(F, maxb), hh.reshape(F, maxb), ch.reshape(F, maxb).astype(np.float64)


class _TreeGrower:
    def __init__(self, binned_sub, thresholds_sub, nbins_sub, feats_global,
                 mono_sub, g, h, config, gains_out):
        self.binned_sub = binned_sub
        self.thresholds_sub = thresholds_sub
        self.nbins_sub = nbins_sub
        self.feats_global = feats_global
        self.mono_sub = mono_sub.reshape(-1, 1)
        self.g = g
        self.h = h
        self.cfg = config
        self.maxb = int(nbins_sub.max())
        self.valid_bins = (np.arange(self.maxb - 1)[None, :]
                           < (nbins_sub - 1)[:, None])
        self.gains_out = gains_out
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def _leaf_value(self, gsum: float, hsum: float, lo: float, hi: float) -> float:
        lam = self.cfg.l2_leaf_regularization
        raw = -self.cfg.learning_rate * gsum / (hsum + lam)
        return float(min(max(raw, lo), hi))

    def grow(self, rows: np.ndarray) -> Tree:
        hist = _node_histograms(self.binned_sub, rows, self.g, self.h, self.maxb)
        self._build(rows, hist, 0, -LEAF_VALUE_BOUND, LEAF_VALUE_BOUND)
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
            default_left=np.ones(len(self.feature), dtype=bool),
        )

    def _build(self, rows, hist, depth, lo, hi) -> int:
        node = self._new_node()
        gsum = float(self.g[rows].sum())
        hsum = float(self.h[rows].sum())
        if depth >= self.cfg.max_depth or len(rows) < 2 * self.cfg.min_samples_leaf:
            self.value[node] = self._leaf_value(gsum, hsum, lo, hi)
            return node

        gh, hh, ch = hist
        lam = self.cfg.l2_leaf_regularization
        lr = self.cfg.learning_rate
        GL = np.cumsum(gh, axis=1)[:, :-1]
        HL = np.cumsum(hh, axis=1)[:, :-1]
        CL = np.cumsum(ch, axis=1)[:, :-1]
        GR, HR, CR = gsum - GL, hsum - HL, len(rows) - CL
        gain = (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam)
                - gsum ** 2 / (hsum + lam))
        wL = np.clip(-lr * GL / (HL + lam), lo, hi)
        wR = np.clip(-lr * GR / (HR + lam), lo, hi)
        invalid = (~self.valid_bins
                   | (CL < self.cfg.min_samples_leaf)
                   | (CR < self.cfg.min_samples_leaf)
                   | ((self.mono_sub > 0) & (wL > wR))
                   | ((self.mono_sub < 0) & (wL < wR)))
        gain[invalid] = -np.inf

        flat_best = int(np.argmax(gain))
        fi, b = divmod(flat_best, gain.shape[1])
        best_gain = float(gain[fi, b])
        if not np.isfinite(best_gain) or best_gain <= _MIN_GAIN:
            self.value[node] = self._leaf_value(gsum, hsum, lo, hi)
            return node

        self.gains_out.append(best_gain)
        go_left = self.binned_sub[rows, fi] <= b
        rows_l, rows_r = rows[go_left], rows[~go_left]

        small_rows, small_is_left = ((rows_l, True) if len(rows_l) <= len(rows_r)
                                     else (rows_r, False))
        hist_small = _node_histograms(self.binned_sub, small_rows,
                                      self.g, self.h, self.maxb)
        hist_large = tuple(p - s for p, s in zip(hist, hist_small))
        hist_l, hist_r = ((hist_small, hist_large) if small_is_left
                          else (hist_large, hist_small))
        del hist, hist_small, hist_large, gh, hh, ch, GL, HL, CL, gain

        constraint = int(self.mono_sub[fi, 0])
        vl, vr = float(wL[fi, b]), float(wR[fi, b])
        if constraint > 0:
            mid = (vl + vr) / 2.0
            bounds_l, bounds_r = (lo, mid), (mid, hi)
        elif constraint < 0:
            mid = (vl + vr) / 2.0
            bounds_l, bounds_r = (mid, hi), (lo, mid)
        else:
            bounds_l = bounds_r = (lo, hi)

        self.feature[node] = fi
        self.threshold[node] = float(self.thresholds_sub[fi][b])
        left = self._build(rows_l, hist_l, depth + 1, *bounds_l)
        right = self._build(rows_r, hist_r, depth + 1, *bounds_r)
        self.left[node], self.right[node] = left, right
        return node


def _training_digest(X: np.ndarray, y: np.ndarray, config: TrainConfig,
                     monotone: np.ndarray) -> str:
    hasher = hashlib.sha256()
    hasher.update(repr((X.shape, tuple(sorted(vars(config).items())))).encode())
    hasher.update(np.ascontiguousarray(X).tobytes())
    hasher.update(np.ascontiguousarray(y).tobytes())
    hasher.update(np.ascontiguousarray(monotone).tobytes())
    return hasher.hexdigest()


def train(X, y, config: TrainConfig = TrainConfig(),
          monotone: Optional[Sequence[int]] = None,
          metadata: Optional[Dict] = None) -> TreeEnsemble:
    """Fit a boosted ensemble on binary labels.

    ``monotone`` gives a per-feature constraint in {-1, 0, +1} (or a single
    int broadcast to every feature).  Class imbalance is handled with a
    positive-class weight of ``n_neg / n_pos``.  Single-class data yields a
    constant model at the clipped class-prior log-odds.
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if len(X) != len(y):
        raise ValueError("X and y length mismatch")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n, d = X.shape

    if monotone is None:
        mono = np.zeros(d, dtype=np.int8)
    elif np.isscalar(monotone):
        mono = np.full(d, int(monotone), dtype=np.int8)
    else:
        mono = np.asarray(monotone, dtype=np.int8)
    if mono.shape != (d,) or not np.isin(mono, (-1, 0, 1)).all():
        raise ValueError("monotone must give -1/0/+1 per feature")

    meta = dict(metadata or {})
    meta.setdefault("n_train", int(n))
    meta["training_digest"] = _training_digest(X, y, config, mono)

    n_pos = int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        prior = min(max(n_pos / n, _PRIOR_CLIP), 1.0 - _PRIOR_CLIP)
        meta["degenerate_single_class"] = True
        return TreeEnsemble(trees=[], base_score=float(np.log(prior / (1 - prior))),
                            monotone=mono, feature_dimension=d, metadata=meta)

    w = np.where(y == 1, n_neg / n_pos, 1.0)
    prior = float(np.clip((w * y).sum() / w.sum(), _PRIOR_CLIP, 1 - _PRIOR_CLIP))
    base_score = float(np.log(prior / (1 - prior)))

    thresholds, binned, nbins = _bin_data(X, config.histogram_bins)
    rng = np.random.default_rng(config.seed)
    raw = np.full(n, base_score, dtype=np.float64)
    trees: List[Tree] = []
    gains: List[float] = []

    n_rows = max(2 * config.min_samples_leaf, int(round(n * config.subsample)))
    n_cols = max(1, int(round(d * config.colsample)))
    for _ in range(config.num_trees):
        p = _sigmoid(raw)
        g = w * (p - y)
        h = w * p * (1 - p)

        rows = (np.sort(rng.permutation(n)[:n_rows])
                if config.subsample < 1.0 else np.arange(n))
        if config.colsample < 1.0:
            feats = np.sort(rng.permutation(d)[:n_cols])
        else:
            feats = np.arange(d)

        grower = _TreeGrower(
            binned_sub=binned[:, feats],
            thresholds_sub=[thresholds[f] for f in feats],
            nbins_sub=nbins[feats],
            feats_global=feats,
            mono_sub=mono[feats].astype(np.float64),
            g=g, h=h, config=config, gains_out=gains)
        tree = grower.grow(rows)
        # remap subset feature ids to global ids
        internal = tree.feature >= 0
        tree.feature[internal] = feats[tree.feature[internal]]
        trees.append(tree)
        raw += _tree_raw_scores(tree, X)

    meta["min_split_gain"] = float(min(gains)) if gains else 0.0
    meta["n_splits"] = len(gains)
    return TreeEnsemble(trees=trees, base_score=base_score, monotone=mono,
                        feature_dimension=d, metadata=meta)


# --------------------------------------------------------------------------
# gradient verification

@dataclass
class GradientCheckReport:
    max_abs_error_g: float
    max_abs_error_h: float
    n_points: int

    @property
    def max_abs_error(self) -> float:
        return max(self.max_abs_error_g, self.max_abs_error_h)


def logistic_loss(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Numerically stable negative log-likelihood of sigmoid(z)."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)


def logistic_gradients(p: np.ndarray, y: np.ndarray):
    """Analytic (g, h) of the logistic loss w.r.t. the raw score."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return p - y, p * (1.0 - p)


def verify_gradients(n_points: int = 100, seed: int = 0) -> GradientCheckReport:
    """Check analytic g, h against central finite differences of the loss."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.02, 0.98, n_points)
    y = rng.integers(0, 2, n_points).astype(np.float64)
    z = np.log(p / (1 - p))
    g, h = logistic_gradients(p, y)

    eps_g, eps_h = 1e-6, 1e-4
    g_fd = (logistic_loss(z + eps_g, y) - logistic_loss(z - eps_g, y)) / (2 * eps_g)
    h_fd = (logistic_loss(z + eps_h, y) - 2 * logistic_loss(z, y)
            + logistic_loss(z - eps_h, y)) / eps_h ** 2
    return GradientCheckReport(
        max_abs_error_g=float(np.max(np.abs(g - g_fd))),
        max_abs_error_h=float(np.max(np.abs(h - h_fd))),
        n_points=n_points)


# --------------------------------------------------------------------------
# serialization

def model_to_dict(ensemble: TreeEnsemble) -> Dict:
    trees = []
    for tree in ensemble.trees:
        nodes = []
        for i in range(tree.n_nodes):
            if tree.feature[i] < 0:
                nodes.append({"v": float(tree.value[i])})
            else:
                nodes.append({"f": int(tree.feature[i]),
                              "t": float(tree.threshold[i]),
                              "l": int(tree.left[i]),
                              "r": int(tree.right[i]),
                              "d": "left" if tree.default_left[i] else "right"})
        trees.append(nodes)
    return {
        "format": "pedefense-gbdt",
        "version": FORMAT_VERSION,
        "feature_dimension": ensemble.feature_dimension,
        "base_score": ensemble.base_score,
        "monotone": [int(m) for m in ensemble.monotone],
        "metadata": ensemble.metadata,
        "trees": trees,
    }


def model_from_dict(payload: Dict) -> TreeEnsemble:
    try:
        if payload.get("format") != "pedefense-gbdt":
            raise CorruptModel("not a model file")
        if payload.get("version") != FORMAT_VERSION:
            raise CorruptModel(f"unsupported model version {payload.get('version')}")
        dim = int(payload["feature_dimension"])
        monotone = np.asarray(payload["monotone"], dtype=np.int8)
        if monotone.shape != (dim,):
            raise CorruptModel("monotone constraint length mismatch")
        trees = []
        for nodes in payload["trees"]:
            n_nodes = len(nodes)
            tree = Tree(
                feature=np.full(n_nodes, -1, dtype=np.int32),
                threshold=np.zeros(n_nodes, dtype=np.float64),
                left=np.full(n_nodes, -1, dtype=np.int32),
                right=np.full(n_nodes, -1, dtype=np.int32),
                value=np.zeros(n_nodes, dtype=np.float64),
                default_left=np.ones(n_nodes, dtype=bool),
            )
            for i, node in enumerate(nodes):
                if "v" in node:
                    tree.value[i] = float(node["v"])
                    continue
                f, l, r = int(node["f"]), int(node["l"]), int(node["r"])
                if not 0 <= f < dim:
                    raise CorruptModel(f"feature index {f} out of range")
                if not (i < l < n_nodes and i < r < n_nodes):
                    raise CorruptModel(f"dangling or cyclic child index at node {i}")
                t = float(node["t"])
                if not np.isfinite(t):
                    raise CorruptModel("non-finite threshold")
                tree.feature[i] = f
                tree.threshold[i] = t
                tree.left[i] = l
                tree.right[i] = r
                tree.default_left[i] = node.get("d", "left") == "left"
            trees.append(tree)
        return TreeEnsemble(trees=trees,
                            base_score=float(payload["base_score"]),
                            monotone=monotone, feature_dimension=dim,
                            metadata=dict(payload.get("metadata", {})))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptModel):
            raise
        raise CorruptModel(f"malformed model payload: {exc}") from exc


def save_model(ensemble: TreeEnsemble, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(ensemble), fh)
        fh.write("\n")


def load_model(path) -> TreeEnsemble:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptModel(f"cannot read model file: {exc}") from exc
    return model_from_dict(payload)
