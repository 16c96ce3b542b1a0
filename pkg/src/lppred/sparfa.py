"""Low-rank logistic matrix completion with automatic rank selection.

Outcomes are collapsed to a binary learner-by-question matrix (first attempt
per pair) and modeled as

    P(correct) = sigmoid(learner_factors[l] . question_factors[:, q] + intercept[q])

The learner factors capture understanding of latent concepts, the question
factors the concept loading of each question, and the intercept the
question's inherent difficulty. Fitting alternates gradient steps on the two
factor blocks, with step halving whenever the regularized objective would
increase. The objective is the per-cell mean NLL plus an L2 penalty on the
factor blocks, so the regularization strength has the same meaning
regardless of how many cells are observed; factors start at a truncated SVD
of the centered response matrix.

The number of latent concepts is chosen automatically: each candidate rank
(always including the intercept-only rank 0) is scored by held-out log-loss
on an internal k-fold split of the observed cells, and the winner is
refitted on all observed cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .seeds import derive_seed


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


@dataclass
class LowRankModel:
    """Fitted factors; rank 0 means intercept-only."""

    learner_factors: np.ndarray    # (n_learners, rank)
    question_factors: np.ndarray   # (rank, n_questions)
    intercepts: np.ndarray         # (n_questions,)
    rank: int
    learner_index: dict[str, int] = field(default_factory=dict)
    question_index: dict[str, int] = field(default_factory=dict)
    global_mean: float = 0.5
    objective_trace: tuple[float, ...] = ()
    rank_val_logloss: dict[int, float] = field(default_factory=dict)

    def logits(self) -> np.ndarray:
        return self.learner_factors @ self.question_factors + self.intercepts

    def to_dict(self) -> dict:
        return {
            "W": self.learner_factors.tolist(),
            "C": self.question_factors.tolist(),
            "mu": self.intercepts.tolist(),
            "r": self.rank,
            "learners": list(self.learner_index),
            "questions": list(self.question_index),
        }


def _first_attempt_cells(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse to one (learner, question, outcome) cell per pair: earliest labeled attempt."""
    chosen: dict[tuple[int, int], tuple[int, int]] = {}
    for rec in ds.records:
        if rec.obs is None:
            continue
        key = (ds.learner_index[rec.learner_id], ds.question_index[rec.question_id])
        if key not in chosen or rec.attempt < chosen[key][0]:
            chosen[key] = (rec.attempt, rec.obs)
    rows = np.array([k[0] for k in chosen], dtype=int)
    cols = np.array([k[1] for k in chosen], dtype=int)
    vals = np.array([v[1] for v in chosen.values()], dtype=float)
    return rows, cols, vals


def _cell_logloss(logits, y):
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def _fit_intercept_only(rows, cols, vals, n_q):
    """Per-question intercepts at the smoothed empirical log-odds."""
    totals = np.bincount(cols, minlength=n_q).astype(float)
    correct = np.bincount(cols, weights=vals, minlength=n_q)
    rate = (correct + 0.5) / (totals + 1.0)
    return np.log(rate / (1.0 - rate))


def _fit_rank(rows, cols, vals, n_l, n_q, rank, l2, seed, max_iter, tol):
    """Alternating halved-step gradient descent on the regularized mean logistic NLL."""
    rng = np.random.default_rng(seed)
    n_cells = len(vals)
    mu = _fit_intercept_only(rows, cols, vals, n_q)

    # spectral start: leading factors of the intercept-centered residuals
    resid_mat = np.zeros((n_l, n_q))
    resid_mat[rows, cols] = vals - _sigmoid(mu[cols])
    left, sing, right = np.linalg.svd(resid_mat, full_matrices=False)
    w = left[:, :rank] * np.sqrt(sing[:rank]) * 2.0 + rng.normal(0.0, 0.01, (n_l, rank))
    c = (right[:rank, :].T * np.sqrt(sing[:rank])).T * 2.0 + rng.normal(0.0, 0.01, (rank, n_q))

    def objective(wm, cm, mm):
        z = np.sum(wm[rows] * cm[:, cols].T, axis=1) + mm[cols]
        nll = float(np.sum(np.logaddexp(0.0, z) - vals * z)) / n_cells
        return nll + 0.5 * l2 * (float(np.sum(wm * wm)) + float(np.sum(cm * cm)))

    obj = objective(w, c, mu)
    trace = [obj]
    step_w = step_c = 0.5
    for _ in range(max_iter):
        z = np.sum(w[rows] * c[:, cols].T, axis=1) + mu[cols]
        resid = (_sigmoid(z) - vals) / n_cells

        # learner-factor block
        grad_w = np.zeros_like(w)
        np.add.at(grad_w, rows, resid[:, None] * c[:, cols].T)
        grad_w += l2 * w
        while step_w > 1e-12:
            cand = w - step_w * grad_w
            cand_obj = objective(cand, c, mu)
            if cand_obj <= obj:
                w, obj = cand, cand_obj
                trace.append(obj)
                step_w = min(step_w * 1.5, 10.0)
                break
            step_w *= 0.5

        # question-factor and intercept block
        z = np.sum(w[rows] * c[:, cols].T, axis=1) + mu[cols]
        resid = (_sigmoid(z) - vals) / n_cells
        grad_c = np.zeros_like(c)
        np.add.at(grad_c.T, cols, resid[:, None] * w[rows])
        grad_c += l2 * c
        grad_mu = np.bincount(cols, weights=resid, minlength=n_q)
        while step_c > 1e-12:
            cand_c = c - step_c * grad_c
            cand_mu = mu - step_c * grad_mu
            cand_obj = objective(w, cand_c, cand_mu)
            if cand_obj <= obj:
                c, mu, obj = cand_c, cand_mu, cand_obj
                trace.append(obj)
                step_c = min(step_c * 1.5, 10.0)
                break
            step_c *= 0.5

        if len(trace) >= 3 and trace[-3] - trace[-1] < tol:
            break
    return w, c, mu, trace


def sparfa_fit(
    train: Dataset,
    rank_candidates: Sequence[int] = (1, 2, 3, 4),
    l2: float = 0.01,
    seed: int = 0,
    max_iter: int = 600,
    tol: float = 1e-9,
    inner_folds: int = 4,
) -> LowRankModel:
    """Fit the low-rank model, selecting the rank by internal validation.

    The observed cells are split (seeded) into ``inner_folds`` parts; every
    candidate rank plus the intercept-only rank 0 is scored by summed
    held-out log-loss over the parts, and the winner is refitted on all
    cells. An all-constant observation matrix short-circuits to rank 0.
    """
    if len(train.learner_index) < 2 or len(train.question_index) < 2:
        raise ValueError("need at least 2 learners and 2 questions")
    n_l = len(train.learner_index)
    n_q = len(train.question_index)
    rows, cols, vals = _first_attempt_cells(train)
    global_mean = float(vals.mean())

    candidates = sorted({int(r) for r in rank_candidates if r > 0})
    for r in candidates:
        if r > min(n_l, n_q):
            raise ValueError(f"rank {r} exceeds min(n_learners, n_questions)")

    def build(rank, w, c, mu, trace, val_scores):
        return LowRankModel(
            learner_factors=w,
            question_factors=c,
            intercepts=mu,
            rank=rank,
            learner_index=dict(train.learner_index),
            question_index=dict(train.question_index),
            global_mean=global_mean,
            objective_trace=tuple(trace),
            rank_val_logloss=val_scores,
        )

    if np.all(vals == vals[0]):
        mu = _fit_intercept_only(rows, cols, vals, n_q)
        return build(0, np.zeros((n_l, 0)), np.zeros((0, n_q)), mu, (), {})

    rng = np.random.default_rng(derive_seed(seed, "sparfa-val"))
    n_cells = len(vals)
    folds = rng.permutation(n_cells) % max(2, min(inner_folds, n_cells))

    val_scores: dict[int, float] = {r: 0.0 for r in [0] + candidates}
    for fold in range(folds.max() + 1):
        hold = folds == fold
        fit_rows, fit_cols, fit_vals = rows[~hold], cols[~hold], vals[~hold]
        val_rows, val_cols, val_vals = rows[hold], cols[hold], vals[hold]
        mu0 = _fit_intercept_only(fit_rows, fit_cols, fit_vals, n_q)
        val_scores[0] += _cell_logloss(mu0[val_cols], val_vals) * len(val_vals)
        for r in candidates:
            w, c, mu, _ = _fit_rank(
                fit_rows, fit_cols, fit_vals, n_l, n_q, r,
                l2, derive_seed(seed, "sparfa-fit", fold, r), max_iter, tol,
            )
            z = np.sum(w[val_rows] * c[:, val_cols].T, axis=1) + mu[val_cols]
            val_scores[r] += _cell_logloss(z, val_vals) * len(val_vals)

    best_rank = min(val_scores, key=lambda r: (val_scores[r], r))
    if best_rank == 0:
        mu = _fit_intercept_only(rows, cols, vals, n_q)
        return build(0, np.zeros((n_l, 0)), np.zeros((0, n_q)), mu, (), val_scores)
    w, c, mu, trace = _fit_rank(
        rows, cols, vals, n_l, n_q, best_rank,
        l2, derive_seed(seed, "sparfa-refit", best_rank), max_iter, tol,
    )
    return build(best_rank, w, c, mu, trace, val_scores)


def sparfa_predict(model: LowRankModel, learner_id: str, question_id: str) -> float:
    """Success probability for one (learner, question) pair.

    Unseen learners fall back to the question intercept alone; unseen
    questions fall back to the global training mean.
    """
    qi = model.question_index.get(question_id)
    if qi is None:
        return model.global_mean
    li = model.learner_index.get(learner_id)
    if li is None:
        return float(_sigmoid(model.intercepts[qi]))
    z = float(model.learner_factors[li] @ model.question_factors[:, qi] + model.intercepts[qi])
    return float(_sigmoid(z))


class SparfaModel:
    """Predictor wrapper. Attempts share the pair's matrix probability."""

    name = "sparfa"

    def __init__(
        self,
        rank_candidates: Sequence[int] = (1, 2, 3, 4),
        l2: float = 0.01,
        seed: int = 0,
        max_iter: int = 600,
    ):
        self.rank_candidates = tuple(rank_candidates)
        self.l2 = l2
        self.seed = seed
        self.max_iter = max_iter
        self.model: LowRankModel | None = None

    def fit(self, train: Dataset) -> "SparfaModel":
        self.model = sparfa_fit(
            train,
            rank_candidates=self.rank_candidates,
            l2=self.l2,
            seed=self.seed,
            max_iter=self.max_iter,
        )
        return self

    def predict(self, rows: Sequence[tuple[str, str, int]]) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("predict called before fit")
        return np.array([sparfa_predict(self.model, lid, qid) for lid, qid, _ in rows])

    def export_json(self) -> dict:
        if self.model is None:
            raise RuntimeError("export before fit")
        return self.model.to_dict()
