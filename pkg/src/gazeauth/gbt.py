"""Gradient-boosted decision trees with a multi-class softmax objective.

Windows are flattened to feature vectors (feature index = channel * T +
t) and boosted with second-order (Newton) trees: per round, class
probabilities give per-class gradients/hessians, one depth-limited tree
is grown per class by exhaustive greedy split search over quantized
feature thresholds, and leaf weights -G/(H+lambda) are added to the
running class scores scaled by eta.

Split search runs on per-node (feature x bin) gradient histograms with
the smaller-child-plus-subtraction trick; with n_bins at least the
number of distinct values per feature the thresholds are the exact
midpoints between consecutive values, so binned and unbinned training
coincide bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .tensor import InvalidTarget, ShapeMismatch

GBT_FORMAT_VERSION = 1


class DegenerateData(Exception):
    pass


@dataclass(frozen=True)
class GbtConfig:
    eta: float = 0.3
    max_depth: int = 6
    n_rounds: int = 50
    lam: float = 1.0
    gamma: float = 0.0
    n_classes: int = 2
    n_bins: Optional[int] = 256  # None = exact (all distinct values)
    early_stop_train_loss: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


@dataclass
class TreeNode:
    """Internal split (feature, threshold, default side) or leaf (weight).

    Routing: x[feature] < threshold goes left; missing values follow
    ``default_left``. Leaf weight is the raw -G/(H+lambda) value; eta is
    applied when the ensemble accumulates scores.
    """

    weight: Optional[float] = None
    feature: Optional[int] = None
    threshold: Optional[float] = None
    default_left: bool = False
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.weight is not None

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Sum of routed leaf weights for each row of X."""
        out = np.empty(len(X), dtype=np.float64)
        self._predict_into(X, np.arange(len(X)), out)
        return out

    def _predict_into(self, X, idx, out):
        if self.is_leaf:
            out[idx] = self.weight
            return
        col = X[idx, self.feature]
        missing = np.isnan(col)
        goes_left = np.where(missing, self.default_left, col < self.threshold)
        self.left._predict_into(X, idx[goes_left], out)
        self.right._predict_into(X, idx[~goes_left], out)

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def to_plain(self) -> dict:
        if self.is_leaf:
            return {"w": self.weight}
        return {
            "f": self.feature,
            "t": self.threshold,
            "dl": self.default_left,
            "l": self.left.to_plain(),
            "r": self.right.to_plain(),
        }

    @classmethod
    def from_plain(cls, doc: dict) -> "TreeNode":
        if "w" in doc:
            return cls(weight=doc["w"])
        return cls(
            feature=doc["f"],
            threshold=doc["t"],
            default_left=doc["dl"],
            left=cls.from_plain(doc["l"]),
            right=cls.from_plain(doc["r"]),
        )


def flatten_window(window: np.ndarray) -> np.ndarray:
    """Row-major (C x T) flattening: feature index = c * T + t."""
    window = np.asarray(window)
    return window.reshape(-1)


def flatten_windowset(data: np.ndarray) -> np.ndarray:
    """Flatten a (W x C x T) array to a (W x C*T) feature matrix."""
    return np.asarray(data).reshape(len(data), -1)


def softmax_grad_hess(logits: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class gradient/hessian of softmax cross-entropy at one sample.

    g_k = p_k - 1[k == target], h_k = p_k * (1 - p_k).
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not 0 <= target < n:
        raise InvalidTarget(f"target {target} outside [0, {n})")
    shifted = logits - logits.max()
    p = np.exp(shifted)
    p /= p.sum()
    g = p.copy()
    g[target] -= 1.0
    return g, p * (1.0 - p)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _logloss(logits: np.ndarray, labels: np.ndarray) -> float:
    p = _softmax_rows(logits)
    return float(-np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300)).mean())


class BinnedFeatures:
    """Quantized feature matrix: per-feature threshold candidates + codes.

    Candidate thresholds ("edges") are midpoints between consecutive
    distinct values when the feature has at most n_bins distinct values,
    otherwise quantile cut points. A value's code counts the edges at or
    below it, so code <= b is exactly x < edges[b]; missing values get
    code -1.
    """

    def __init__(self, X: np.ndarray, n_bins: Optional[int]):
        X = np.asarray(X, dtype=np.float64)
        n, F = X.shape
        self.n_features = F
        self.edges: list[np.ndarray] = []
        codes = np.empty((n, F), dtype=np.int32)
        for f in range(F):
            col = X[:, f]
            finite = col[~np.isnan(col)]
            uniq = np.unique(finite)
            if n_bins is None or len(uniq) <= n_bins:
                edges = (uniq[:-1] + uniq[1:]) / 2.0 if len(uniq) > 1 else np.empty(0)
            else:
                qs = np.arange(1, n_bins) / n_bins
                edges = np.unique(np.quantile(finite, qs))
            self.edges.append(edges)
            code = np.searchsorted(edges, col, side="right").astype(np.int32)
            code[np.isnan(col)] = -1
            codes[:, f] = code
        self.n_edges = np.array([len(e) for e in self.edges], dtype=np.int64)
        self.max_bins = int(self.n_edges.max(initial=0)) + 2  # value bins + missing bucket
        missing_code = self.max_bins - 1
        hist_codes = np.where(codes < 0, missing_code, codes).astype(np.int64)
        # flat index per (row, feature) for one-shot bincount histograms
        self._flat = hist_codes + np.arange(F, dtype=np.int64) * self.max_bins
        self.codes = codes

    def histograms(self, idx: np.ndarray, g: np.ndarray, h: np.ndarray):
        """Per-(feature, bin) sums of g and h over the instance subset."""
        B = self.max_bins
        flat = self._flat[idx].ravel()
        length = self.n_features * B
        F = self.n_features
        hg = np.bincount(flat, weights=np.repeat(g[idx], F), minlength=length)
        hh = np.bincount(flat, weights=np.repeat(h[idx], F), minlength=length)
        return hg.reshape(F, B), hh.reshape(F, B)


class SplitDecision(NamedTuple):
    feature: int
    threshold: float
    gain: float
    default_left: bool
    bin_index: int


def _split_gain(gl, hl, gr, hr, lam, gamma):
    return 0.5 * (
        gl * gl / (hl + lam)
        + gr * gr / (hr + lam)
        - (gl + gr) * (gl + gr) / (hl + hr + lam)
    ) - gamma


def _best_split_from_hist(
    binned: BinnedFeatures,
    hist_g: np.ndarray,
    hist_h: np.ndarray,
    lam: float,
    gamma: float,
) -> Optional[SplitDecision]:
    """Scan every (feature, boundary) candidate; strict-max with ties
    resolved to the lowest feature then lowest threshold."""
    B = binned.max_bins
    g_miss = hist_g[:, B - 1]
    h_miss = hist_h[:, B - 1]
    gl_nm = np.cumsum(hist_g[:, : B - 1], axis=1)
    hl_nm = np.cumsum(hist_h[:, : B - 1], axis=1)
    g_tot = gl_nm[:, -1] + g_miss
    h_tot = hl_nm[:, -1] + h_miss

    n_cand = B - 2  # boundary b splits bins [0..b] | [b+1..]
    if n_cand <= 0:
        return None
    gl_nm = gl_nm[:, :n_cand]
    hl_nm = hl_nm[:, :n_cand]
    gt = g_tot[:, None]
    ht = h_tot[:, None]
    # missing routed right vs left
    gain_r = _split_gain(gl_nm, hl_nm, gt - gl_nm, ht - hl_nm, lam, gamma)
    gl_wm = gl_nm + g_miss[:, None]
    hl_wm = hl_nm + h_miss[:, None]
    gain_l = _split_gain(gl_wm, hl_wm, gt - gl_wm, ht - hl_wm, lam, gamma)

    valid = np.arange(n_cand)[None, :] < binned.n_edges[:, None]
    use_left = gain_l > gain_r  # tie -> missing goes right
    gains = np.where(use_left, gain_l, gain_r)
    gains = np.where(valid, gains, -np.inf)

    flat_best = int(np.argmax(gains))  # first occurrence = lowest (feature, bin)
    f, b = divmod(flat_best, n_cand)
    best_gain = gains[f, b]
    if not best_gain > 0.0:
        return None
    return SplitDecision(f, float(binned.edges[f][b]), float(best_gain), bool(use_left[f, b]), b)


def find_best_split(
    features: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    instances: np.ndarray,
    lam: float = 1.0,
    gamma: float = 0.0,
    n_bins: Optional[int] = None,
) -> Optional[SplitDecision]:
    """Exhaustive greedy split search over an instance subset.

    Returns the maximum-gain (feature, threshold) with the gain formula
    0.5 * [GL^2/(HL+lam) + GR^2/(HR+lam) - (GL+GR)^2/(HL+HR+lam)] - gamma,
    or None when no candidate has positive gain.
    """
    instances = np.asarray(instances)
    if len(instances) < 2:
        return None
    binned = BinnedFeatures(np.asarray(features)[instances], n_bins)
    g = np.asarray(g, dtype=np.float64)[instances]
    h = np.asarray(h, dtype=np.float64)[instances]
    all_idx = np.arange(len(instances))
    hg, hh = binned.histograms(all_idx, g, h)
    return _best_split_from_hist(binned, hg, hh, lam, gamma)


def _grow_tree(
    binned: BinnedFeatures,
    g: np.ndarray,
    h: np.ndarray,
    idx: np.ndarray,
    hist: tuple[np.ndarray, np.ndarray],
    depth: int,
    config: GbtConfig,
) -> TreeNode:
    hg, hh = hist
    G = float(hg[0].sum())
    H = float(hh[0].sum())
    leaf = TreeNode(weight=-G / (H + config.lam))
    if depth >= config.max_depth or len(idx) < 2:
        return leaf
    split = _best_split_from_hist(binned, hg, hh, config.lam, config.gamma)
    if split is None:
        return leaf

    code = binned.codes[idx, split.feature]
    goes_left = np.where(code < 0, split.default_left, code <= split.bin_index)
    left_idx = idx[goes_left]
    right_idx = idx[~goes_left]
    if len(left_idx) == 0 or len(right_idx) == 0:
        return leaf

    if len(left_idx) <= len(right_idx):
        hist_left = binned.histograms(left_idx, g, h)
        hist_right = (hg - hist_left[0], hh - hist_left[1])
    else:
        hist_right = binned.histograms(right_idx, g, h)
        hist_left = (hg - hist_right[0], hh - hist_right[1])
    del hg, hh, hist

    return TreeNode(
        feature=split.feature,
        threshold=split.threshold,
        default_left=split.default_left,
        left=_grow_tree(binned, g, h, left_idx, hist_left, depth + 1, config),
        right=_grow_tree(binned, g, h, right_idx, hist_right, depth + 1, config),
    )


@dataclass
class GbtEnsemble:
    """Boosted trees: ``trees[round][class]``; scores accumulate eta * leaf."""

    config: GbtConfig
    feature_count: int
    trees: list[list[TreeNode]]
    train_loss: list[float]

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.feature_count:
            raise ShapeMismatch(
                f"feature vector length {X.shape[1]} != trained {self.feature_count}"
            )
        scores = np.zeros((len(X), self.config.n_classes))
        for round_trees in self.trees:
            for cls_idx, tree in enumerate(round_trees):
                scores[:, cls_idx] += self.config.eta * tree.predict(X)
        return scores

    def save(self, path: str | Path, extra_meta: Optional[dict] = None) -> None:
        doc = {
            "format_version": GBT_FORMAT_VERSION,
            "config": asdict(self.config),
            "feature_count": self.feature_count,
            "train_loss": self.train_loss,
            "trees": [[t.to_plain() for t in round_trees] for round_trees in self.trees],
            "meta": extra_meta or {},
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> tuple["GbtEnsemble", dict]:
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != GBT_FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble format {doc.get('format_version')}")
        ensemble = cls(
            config=GbtConfig(**doc["config"]),
            feature_count=doc["feature_count"],
            trees=[[TreeNode.from_plain(t) for t in rt] for rt in doc["trees"]],
            train_loss=list(doc["train_loss"]),
        )
        return ensemble, doc["meta"]


def train_gbt(features: np.ndarray, labels: np.ndarray, config: GbtConfig) -> GbtEnsemble:
    """Fit the boosted ensemble; deterministic for a fixed input order.

    Per round: softmax of the running scores gives per-class (g, h), one
    tree per class is grown greedily to max_depth, then all class scores
    are updated together. Training multi-class log-loss is recorded per
    round; optional early stop once it drops below
    ``early_stop_train_loss``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeMismatch("features must be (n, F) with one label per row")
    if len(y) and (y.min() < 0 or y.max() >= config.n_classes):
        raise InvalidTarget(f"labels must lie in [0, {config.n_classes})")
    counts = np.bincount(y, minlength=config.n_classes)
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise DegenerateData(f"classes {missing.tolist()} have zero instances")

    n, F = X.shape
    binned = BinnedFeatures(X, config.n_bins)
    scores = np.zeros((n, config.n_classes))
    all_idx = np.arange(n)
    trees: list[list[TreeNode]] = []
    losses: list[float] = []
    onehot = np.zeros((n, config.n_classes))
    onehot[all_idx, y] = 1.0

    for _ in range(config.n_rounds):
        p = _softmax_rows(scores)
        grad = p - onehot
        hess = p * (1.0 - p)
        round_trees = []
        for cls_idx in range(config.n_classes):
            g = np.ascontiguousarray(grad[:, cls_idx])
            h = np.ascontiguousarray(hess[:, cls_idx])
            root_hist = binned.histograms(all_idx, g, h)
            round_trees.append(_grow_tree(binned, g, h, all_idx, root_hist, 0, config))
        for cls_idx, tree in enumerate(round_trees):
            scores[:, cls_idx] += config.eta * tree.predict(X)
        trees.append(round_trees)
        losses.append(_logloss(scores, y))
        if config.early_stop_train_loss is not None and losses[-1] < config.early_stop_train_loss:
            break

    return GbtEnsemble(config=config, feature_count=F, trees=trees, train_loss=losses)


def predict_gbt(ensemble: GbtEnsemble, features: np.ndarray) -> tuple[int | np.ndarray, np.ndarray]:
    """Class prediction (argmax of summed scores) plus the score vector(s)."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    scores = ensemble.raw_scores(features)
    pred = np.argmax(scores, axis=1)
    if single:
        return int(pred[0]), scores[0]
    return pred, scores


class GbtClassifier:
    """WindowSet-facing wrapper with the same surface as the neural models."""

    model_kind = "gbt"

    def __init__(self, config: GbtConfig):
        self.config = config
        self.ensemble: Optional[GbtEnsemble] = None
        self.label_encoder = None
        self.is_trained = False

    def fit(self, data: np.ndarray, encoded_labels: np.ndarray) -> GbtEnsemble:
        self.ensemble = train_gbt(flatten_windowset(data), encoded_labels, self.config)
        self.is_trained = True
        return self.ensemble

    def predict_classes(self, windows: np.ndarray, batch_size: int = 0) -> np.ndarray:
        if not self.is_trained:
            from .transformer import UntrainedModel

            raise UntrainedModel("GBT ensemble not trained")
        pred, _ = predict_gbt(self.ensemble, flatten_windowset(windows))
        return pred

    def save(self, path: str | Path) -> None:
        self.ensemble.save(
            path,
            {
                "model_kind": self.model_kind,
                "classes": list(self.label_encoder.classes) if self.label_encoder else None,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "GbtClassifier":
        from .training import LabelEncoder

        ensemble, meta = GbtEnsemble.load(path)
        model = cls(ensemble.config)
        model.ensemble = ensemble
        if meta.get("classes"):
            model.label_encoder = LabelEncoder(tuple(meta["classes"]))
            model.is_trained = True
        return model
