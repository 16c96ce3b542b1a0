"""Performance Factor Analysis: logistic model over prior success/failure counts.

The log-odds of a correct answer are

    beta[question] + gamma[learner] + alpha * s + rho * f

where s and f count the learner's earlier correct and incorrect attempts on
the same question (one skill per question). ``gamma`` is the per-learner
ability term that captures variability among individual learners; learners
absent from training predict with gamma = 0. Fitting minimizes the
L2-regularized negative log-likelihood by gradient descent with backtracking
line search.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .seeds import derive_seed


@dataclass(frozen=True)
class PfaFeatures:
    """Feature row: prior-success and prior-failure counts plus the two ids."""

    learner_id: str
    question_id: str
    attempt: int
    s: int
    f: int


@dataclass
class PfaParams:
    """Fitted weights of the logistic model."""

    beta: dict[str, float]   # per-question difficulty/easiness intercept
    gamma: dict[str, float]  # per-learner ability
    alpha: float             # weight on prior successes
    rho: float               # weight on prior failures
    l2: float
    converged: bool = True
    objective: float = float("nan")
    # regularized NLL after each accepted line-search step
    objective_trace: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "beta": dict(self.beta),
            "gamma": dict(self.gamma),
            "alpha": self.alpha,
            "rho": self.rho,
            "l2": self.l2,
            "converged": self.converged,
        }


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def pfa_features(ds: Dataset) -> list[PfaFeatures]:
    """Per-record counts of strictly earlier labeled attempts, aligned with ds.records.

    Counts are causal: only attempts with a lower ordinal contribute, so
    reordering or relabeling later rows never changes earlier features.
    """
    history: dict[tuple[str, str], list[tuple[int, int]]] = {}
    for rec in ds.records:
        if rec.obs is None:
            continue
        history.setdefault((rec.learner_id, rec.question_id), []).append((rec.attempt, rec.obs))

    out = []
    for rec in ds.records:
        earlier = history.get((rec.learner_id, rec.question_id), ())
        s = sum(1 for a, o in earlier if a < rec.attempt and o == 1)
        f = sum(1 for a, o in earlier if a < rec.attempt and o == 0)
        out.append(PfaFeatures(rec.learner_id, rec.question_id, rec.attempt, s, f))
    return out


def pfa_predict(feat: PfaFeatures, params: PfaParams) -> float:
    """Success probability for one feature row under fitted weights."""
    z = (
        params.beta.get(feat.question_id, 0.0)
        + params.gamma.get(feat.learner_id, 0.0)
        + params.alpha * feat.s
        + params.rho * feat.f
    )
    return float(_sigmoid(z))


def _objective_and_grad(theta, q_idx, l_idx, s, f, y, n_q, n_l, l2):
    """Regularized NLL and its gradient over the packed parameter vector.

    Layout: theta = [beta (n_q), gamma (n_l), alpha, rho].
    """
    beta = theta[:n_q]
    gamma = theta[n_q : n_q + n_l]
    alpha, rho = theta[-2], theta[-1]
    z = beta[q_idx] + gamma[l_idx] + alpha * s + rho * f
    # stable softplus: log(1 + e^z) = logaddexp(0, z)
    nll = float(np.sum(np.logaddexp(0.0, z) - y * z))
    obj = nll + 0.5 * l2 * float(theta @ theta)

    resid = _sigmoid(z) - y
    grad = np.empty_like(theta)
    grad[:n_q] = np.bincount(q_idx, weights=resid, minlength=n_q)
    grad[n_q : n_q + n_l] = np.bincount(l_idx, weights=resid, minlength=n_l)
    grad[-2] = float(resid @ s)
    grad[-1] = float(resid @ f)
    grad += l2 * theta
    return obj, grad


def pfa_fit(
    train: Dataset,
    l2: float = 0.1,
    max_iter: int = 5000,
    tol: float = 1e-6,
    seed: int = 0,
) -> PfaParams:
    """Minimize the L2-regularized NLL by gradient descent with backtracking.

    Stops when the gradient infinity-norm falls below ``tol``. The problem is
    convex, so different seeds (which only jitter the starting point) land on
    the same objective value. If the iteration budget runs out first, the
    best iterate is returned with ``converged=False`` and a warning.
    """
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    labeled = train.labeled_positions()
    if not labeled:
        raise ValueError("pfa_fit requires at least one labeled record")

    feats = pfa_features(train)
    n_q = len(train.question_index)
    n_l = len(train.learner_index)
    q_idx = np.array([train.question_index[feats[i].question_id] for i in labeled])
    l_idx = np.array([train.learner_index[feats[i].learner_id] for i in labeled])
    s = np.array([feats[i].s for i in labeled], dtype=float)
    f = np.array([feats[i].f for i in labeled], dtype=float)
    y = train.obs_array(labeled)

    rng = np.random.default_rng(derive_seed(seed, "pfa"))
    theta = rng.normal(0.0, 0.01, size=n_q + n_l + 2)
    obj, grad = _objective_and_grad(theta, q_idx, l_idx, s, f, y, n_q, n_l, l2)

    trace = [obj]
    step = 1.0
    converged = False
    for _ in range(max_iter):
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        # Armijo backtracking on the steepest-descent direction
        g_sq = float(grad @ grad)
        while True:
            candidate = theta - step * grad
            cand_obj, cand_grad = _objective_and_grad(
                candidate, q_idx, l_idx, s, f, y, n_q, n_l, l2
            )
            if cand_obj <= obj - 1e-4 * step * g_sq:
                break
            step *= 0.5
            if step < 1e-14:
                break
        if step < 1e-14:
            break
        theta, obj, grad = candidate, cand_obj, cand_grad
        trace.append(obj)
        step = min(step * 2.0, 1e4)
    if not converged and np.max(np.abs(grad)) < tol:
        converged = True
    if not converged:
        warnings.warn(
            f"pfa_fit stopped before reaching gradient tolerance "
            f"(|grad|_inf = {np.max(np.abs(grad)):.2e})"
        )

    q_ids = list(train.question_index)
    l_ids = list(train.learner_index)
    return PfaParams(
        beta={qid: float(theta[i]) for i, qid in enumerate(q_ids)},
        gamma={lid: float(theta[n_q + i]) for i, lid in enumerate(l_ids)},
        alpha=float(theta[-2]),
        rho=float(theta[-1]),
        l2=l2,
        converged=converged,
        objective=obj,
        objective_trace=tuple(trace),
    )


class PfaModel:
    """Predictor wrapper around pfa_fit/pfa_predict.

    Prediction features (prior success/failure counts) are recomputed for
    each queried row from the stored training history.
    """

    name = "pfa"

    def __init__(self, l2: float = 0.1, seed: int = 0, max_iter: int = 5000, tol: float = 1e-6):
        self.l2 = l2
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol
        self.params: PfaParams | None = None
        self._history: dict[tuple[str, str], list[tuple[int, int]]] = {}

    def fit(self, train: Dataset) -> "PfaModel":
        self.params = pfa_fit(
            train, l2=self.l2, max_iter=self.max_iter, tol=self.tol, seed=self.seed
        )
        self._history = {}
        for rec in train.records:
            if rec.obs is None:
                continue
            self._history.setdefault((rec.learner_id, rec.question_id), []).append(
                (rec.attempt, rec.obs)
            )
        return self

    def predict(self, rows: Sequence[tuple[str, str, int]]) -> np.ndarray:
        if self.params is None:
            raise RuntimeError("predict called before fit")
        preds = np.empty(len(rows))
        for i, (lid, qid, attempt) in enumerate(rows):
            earlier = self._history.get((lid, qid), ())
            s = sum(1 for a, o in earlier if a < attempt and o == 1)
            f = sum(1 for a, o in earlier if a < attempt and o == 0)
            preds[i] = pfa_predict(PfaFeatures(lid, qid, attempt, s, f), self.params)
        return preds

    def export_json(self) -> dict:
        if self.params is None:
            raise RuntimeError("export before fit")
        return self.params.to_dict()
