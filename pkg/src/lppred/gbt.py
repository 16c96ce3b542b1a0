"""Gradient-boosted regression trees on logistic loss, built from scratch.

Rows are described by three features: the learner's dense index, the
question's dense index, and the attempt ordinal. Each boosting round fits a
binary regression tree to the current gradients g = p - y and hessians
h = p(1 - p), growing greedily by the second-order split score

    0.5 * (GL^2/(HL + 1) + GR^2/(HR + 1) - G^2/(H + 1))

where the leaf L2 constant is fixed at 1. A split is materialized only when
that score strictly exceeds ``gamma`` and both children's hessian sums reach
``min_child_weight``. Candidate thresholds are midpoints between consecutive
distinct feature values present at the node (exact greedy; the datasets are
small). Equal-score candidates (up to a 1e-9 relative tolerance, which makes
tie-breaking stable under float summation order) resolve to the lowest
feature index, then the lowest threshold.

Prediction is sigmoid(base_score + learning_rate * sum of leaf weights),
with base_score the log-odds of the training mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .seeds import derive_seed

LEAF_L2 = 1.0        # leaf-weight ridge constant, not exposed as a tunable
GAIN_TIE_RTOL = 1e-9
FEATURE_NAMES = ("learner", "question", "attempt")
UNSEEN_ID = -1.0     # feature value for ids absent from training; routed like any number


@dataclass(frozen=True)
class GbtConfig:
    """The seven boosting hyperparameters."""

    n_trees: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    subsample: float = 1.0
    colsample_bytree: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if not 0.0 < self.colsample_bytree <= 1.0:
            raise ValueError("colsample_bytree must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.min_child_weight < 0:
            raise ValueError("min_child_weight must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "subsample": self.subsample,
            "colsample_bytree": self.colsample_bytree,
            "gamma": self.gamma,
            "min_child_weight": self.min_child_weight,
        }


@dataclass
class TreeNode:
    """Internal node (feature/threshold/children set) or leaf (weight set)."""

    weight: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    gain: float = 0.0
    hess_left: float = 0.0
    hess_right: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf weights for a feature matrix, vectorized by recursive masking."""
        out = np.empty(len(x))
        self._apply_into(x, np.arange(len(x)), out)
        return out

    def _apply_into(self, x, idx, out):
        if self.is_leaf:
            out[idx] = self.weight
            return
        go_left = x[idx, self.feature] < self.threshold
        self.left._apply_into(x, idx[go_left], out)
        self.right._apply_into(x, idx[~go_left], out)

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.weight}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "gain": self.gain,
            "hess_left": self.hess_left,
            "hess_right": self.hess_right,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TreeNode":
        if "leaf" in payload:
            return cls(weight=float(payload["leaf"]))
        return cls(
            feature=int(payload["feature"]),
            threshold=float(payload["threshold"]),
            gain=float(payload["gain"]),
            hess_left=float(payload.get("hess_left", 0.0)),
            hess_right=float(payload.get("hess_right", 0.0)),
            left=cls.from_dict(payload["left"]),
            right=cls.from_dict(payload["right"]),
        )


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def _logloss(margins, y) -> float:
    return float(np.mean(np.logaddexp(0.0, margins) - y * margins))


@dataclass
class GbtEnsemble:
    """Fitted boosting model: base score plus an ordered list of trees."""

    base_score: float
    trees: list[TreeNode]
    config: GbtConfig
    learner_index: dict[str, int] = field(default_factory=dict)
    question_index: dict[str, int] = field(default_factory=dict)
    train_logloss: tuple[float, ...] = ()

    def margins(self, x: np.ndarray) -> np.ndarray:
        total = np.full(len(x), self.base_score)
        for tree in self.trees:
            total += self.config.learning_rate * tree.apply(x)
        return total

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(self.margins(x))

    def feature_matrix(self, keys: Sequence[tuple[str, str, int]]) -> np.ndarray:
        x = np.empty((len(keys), 3))
        for i, (lid, qid, attempt) in enumerate(keys):
            x[i, 0] = self.learner_index.get(lid, UNSEEN_ID)
            x[i, 1] = self.question_index.get(qid, UNSEEN_ID)
            x[i, 2] = attempt
        return x

    def to_json(self) -> str:
        return json.dumps(
            {
                "base_score": self.base_score,
                "config": self.config.to_dict(),
                "trees": [t.to_dict() for t in self.trees],
                "learner_index": self.learner_index,
                "question_index": self.question_index,
            }
        )

    @classmethod
    def from_json(cls, payload: str) -> "GbtEnsemble":
        data = json.loads(payload)
        return cls(
            base_score=float(data["base_score"]),
            trees=[TreeNode.from_dict(t) for t in data["trees"]],
            config=GbtConfig(**data["config"]),
            learner_index={k: int(v) for k, v in data["learner_index"].items()},
            question_index={k: int(v) for k, v in data["question_index"].items()},
        )


class _SplitContext:
    """Per-fit precomputation shared by every node of every tree.

    ``codes_stack`` holds the three features' value codes offset into one
    shared bin space so each node needs a single histogram pass, and
    ``uniques`` the per-feature sorted distinct values.
    """

    __slots__ = ("codes_stack", "uniques", "offsets", "n_bins")

    def __init__(self, x: np.ndarray):
        self.uniques = []
        code_rows = []
        self.offsets = []
        offset = 0
        for f in range(x.shape[1]):
            u, c = np.unique(x[:, f], return_inverse=True)
            self.uniques.append(u)
            code_rows.append(c + offset)
            self.offsets.append(offset)
            offset += len(u)
        self.n_bins = offset
        self.codes_stack = np.vstack(code_rows)


def _grow_tree(rows, gx, hx, ctx: _SplitContext, features, config) -> TreeNode:
    """Grow one tree level by level; all nodes of a level share one histogram pass.

    Candidate thresholds are midpoints between consecutive distinct values
    present at the node; a boundary is materialized only when its score
    strictly exceeds gamma and both child hessian sums reach
    min_child_weight. Gains within GAIN_TIE_RTOL of a node's best count as
    tied and resolve to the lowest feature index, then lowest threshold
    (the concatenated candidate order below is exactly that order).
    """
    n_bins = ctx.n_bins
    root = TreeNode()
    nodes = [root]
    nid = np.zeros(len(rows), dtype=np.int64)
    cur_rows, cur_g, cur_h = rows, gx, hx

    for depth in range(config.max_depth + 1):
        n_active = len(nodes)
        if n_active == 0 or len(cur_rows) == 0:
            break
        g_tot = np.bincount(nid, weights=cur_g, minlength=n_active)
        h_tot = np.bincount(nid, weights=cur_h, minlength=n_active)
        if depth == config.max_depth:
            for j, node in enumerate(nodes):
                node.weight = -g_tot[j] / (h_tot[j] + LEAF_L2)
            break

        flat = (nid * n_bins + ctx.codes_stack[:, cur_rows]).ravel()
        length = n_active * n_bins
        hist_g = np.bincount(flat, weights=np.tile(cur_g, 3), minlength=length).reshape(
            n_active, n_bins
        )
        hist_h = np.bincount(flat, weights=np.tile(cur_h, 3), minlength=length).reshape(
            n_active, n_bins
        )
        hist_n = np.bincount(flat, minlength=length).reshape(n_active, n_bins)

        gain_blocks = []
        thr_blocks = []
        hl_blocks = []
        hr_blocks = []
        feat_of_col = []
        code_of_col = []
        for f in features:
            lo = ctx.offsets[f]
            u = ctx.uniques[f]
            block = slice(lo, lo + len(u))
            cum_g = np.cumsum(hist_g[:, block], axis=1)
            cum_h = np.cumsum(hist_h[:, block], axis=1)
            cum_n = np.cumsum(hist_n[:, block], axis=1)
            tot_g = cum_g[:, -1:]
            tot_h = cum_h[:, -1:]
            tot_n = cum_n[:, -1:]
            present = hist_n[:, block] > 0
            # value of the next distinct feature value present at the node
            rev = np.where(present, u[None, :], np.inf)[:, ::-1]
            suffix_min = np.minimum.accumulate(rev, axis=1)[:, ::-1]
            nxt = np.full_like(suffix_min, np.inf)
            nxt[:, :-1] = suffix_min[:, 1:]

            gl, hl = cum_g, cum_h
            gr, hr = tot_g - gl, tot_h - hl
            gain = 0.5 * (
                gl * gl / (hl + LEAF_L2)
                + gr * gr / (hr + LEAF_L2)
                - tot_g * tot_g / (tot_h + LEAF_L2)
            )
            ok = (
                present
                & np.isfinite(nxt)
                & (cum_n < tot_n)
                & (gain > config.gamma)
                & (hl >= config.min_child_weight)
                & (hr >= config.min_child_weight)
            )
            gain_blocks.append(np.where(ok, gain, -np.inf))
            thr_blocks.append((u[None, :] + nxt) / 2.0)
            hl_blocks.append(hl)
            hr_blocks.append(hr)
            feat_of_col.extend([f] * len(u))
            code_of_col.extend(range(len(u)))

        gains = np.concatenate(gain_blocks, axis=1)
        thresholds = np.concatenate(thr_blocks, axis=1)
        hls = np.concatenate(hl_blocks, axis=1)
        hrs = np.concatenate(hr_blocks, axis=1)
        feat_of_col = np.array(feat_of_col)
        code_of_col = np.array(code_of_col)

        best = gains.max(axis=1)
        splittable = np.isfinite(best)
        cutoff = best - GAIN_TIE_RTOL * np.maximum(1.0, np.abs(best))
        pick = np.argmax(gains >= cutoff[:, None], axis=1)

        sel_feature = np.full(n_active, -1, dtype=np.int64)
        sel_bin = np.zeros(n_active, dtype=np.int64)
        next_nodes: list[TreeNode] = []
        child_base = np.full(n_active, -1, dtype=np.int64)
        for j, node in enumerate(nodes):
            if not splittable[j]:
                node.weight = -g_tot[j] / (h_tot[j] + LEAF_L2)
                continue
            k = pick[j]
            f = int(feat_of_col[k])
            node.feature = f
            node.threshold = float(thresholds[j, k])
            node.gain = float(gains[j, k])
            node.hess_left = float(hls[j, k])
            node.hess_right = float(hrs[j, k])
            node.left = TreeNode()
            node.right = TreeNode()
            sel_feature[j] = f
            sel_bin[j] = ctx.offsets[f] + code_of_col[k]
            child_base[j] = len(next_nodes)
            next_nodes.extend((node.left, node.right))

        if not next_nodes:
            break
        keep = sel_feature[nid] >= 0
        cur_rows, cur_g, cur_h, nid = cur_rows[keep], cur_g[keep], cur_h[keep], nid[keep]
        go_right = (ctx.codes_stack[sel_feature[nid], cur_rows] > sel_bin[nid]).astype(np.int64)
        nid = child_base[nid] + go_right
        nodes = next_nodes
    return root


def gbt_fit(train: Dataset, config: GbtConfig = GbtConfig(), seed: int = 0) -> GbtEnsemble:
    """Boost ``config.n_trees`` rounds of second-order trees on the labeled rows.

    Row subsampling (without replacement) and column subsampling are redrawn
    per tree from a seed derived as (seed, tree index); with both ratios at 1
    the fit is deterministic and reproducible bit for bit.
    """
    labeled = train.labeled_positions()
    if len(labeled) < 2:
        raise ValueError("gbt_fit requires at least 2 labeled rows")
    keys = [train.records[i].key() for i in labeled]
    y = train.obs_array(labeled)

    x = np.empty((len(keys), 3))
    for i, (lid, qid, attempt) in enumerate(keys):
        x[i, 0] = train.learner_index[lid]
        x[i, 1] = train.question_index[qid]
        x[i, 2] = attempt
    ctx = _SplitContext(x)

    mean = min(max(float(y.mean()), 1e-6), 1.0 - 1e-6)
    base_score = float(np.log(mean / (1.0 - mean)))
    margins = np.full(len(y), base_score)
    loss_trace = [_logloss(margins, y)]

    n = len(y)
    trees: list[TreeNode] = []
    for t in range(config.n_trees):
        p = _sigmoid(margins)
        g = p - y
        h = p * (1.0 - p)

        rows = np.arange(n)
        features = list(range(3))
        if config.subsample < 1.0 or config.colsample_bytree < 1.0:
            rng = np.random.default_rng(derive_seed(seed, "tree", t))
            if config.subsample < 1.0:
                size = max(1, int(round(config.subsample * n)))
                rows = np.sort(rng.choice(n, size=size, replace=False))
            if config.colsample_bytree < 1.0:
                n_feats = max(1, int(round(config.colsample_bytree * 3)))
                features = sorted(rng.choice(3, size=n_feats, replace=False).tolist())

        tree = _grow_tree(rows, g[rows], h[rows], ctx, features, config)
        trees.append(tree)
        margins += config.learning_rate * tree.apply(x)
        loss_trace.append(_logloss(margins, y))

    return GbtEnsemble(
        base_score=base_score,
        trees=trees,
        config=config,
        learner_index=dict(train.learner_index),
        question_index=dict(train.question_index),
        train_logloss=tuple(loss_trace),
    )


def gbt_predict(model: GbtEnsemble, rows: Sequence[tuple[str, str, int]]) -> np.ndarray:
    """Probabilities for (learner, question, attempt) keys; unseen ids become -1."""
    return model.predict_matrix(model.feature_matrix(rows))


def feature_importance(model: GbtEnsemble) -> np.ndarray:
    """Total split gain accumulated per feature (learner, question, attempt)."""
    totals = np.zeros(3)

    def walk(node: TreeNode):
        if node.is_leaf:
            return
        totals[node.feature] += node.gain
        walk(node.left)
        walk(node.right)

    for tree in model.trees:
        walk(tree)
    return totals


class GbtModel:
    """Predictor wrapper around gbt_fit/gbt_predict."""

    name = "gbt"

    def __init__(self, config: GbtConfig = GbtConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self.model: GbtEnsemble | None = None

    def fit(self, train: Dataset) -> "GbtModel":
        self.model = gbt_fit(train, self.config, seed=self.seed)
        return self

    def predict(self, rows: Sequence[tuple[str, str, int]]) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("predict called before fit")
        return gbt_predict(self.model, rows)

    def export_json(self) -> dict:
        if self.model is None:
            raise RuntimeError("export before fit")
        return json.loads(self.model.to_json())
