"""Three-way factorization of the learner x question x attempt array.

The observed outcomes are modeled as inner products between a learner factor
row and a per-(question, attempt) factor fiber:

    estimate(l, q, a) = learner_factors[l] . qa_factors[:, q, a]

fitted by alternating ridge least squares over the observed cells only:
learner rows are solved in closed form given the fiber factors, then fibers
given the rows. Each subproblem is solved exactly, so the regularized
squared-error objective never increases between sweeps. Predictions are
clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .seeds import derive_seed


@dataclass
class TensorModel:
    """Fitted factors plus the index maps needed to answer id-keyed queries."""

    learner_factors: np.ndarray   # (n_learners, rank)
    qa_factors: np.ndarray        # (rank, n_questions, max_attempt)
    rank: int
    ridge: float
    learner_index: dict[str, int] = field(default_factory=dict)
    question_index: dict[str, int] = field(default_factory=dict)
    global_mean: float = 0.5
    objective_trace: tuple[float, ...] = ()
    cold_learners: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "U": self.learner_factors.tolist(),
            "V": self.qa_factors.tolist(),
            "r": self.rank,
            "lambda": self.ridge,
            "learners": list(self.learner_index),
            "questions": list(self.question_index),
        }


def als_objective(u, v_flat, li, qa, y, ridge) -> float:
    """Regularized squared error over the observed cells."""
    est = np.sum(u[li] * v_flat[:, qa].T, axis=1)
    sse = float(np.sum((y - est) ** 2))
    return sse + ridge * (float(np.sum(u * u)) + float(np.sum(v_flat * v_flat)))


def als_fit_cells(
    li: np.ndarray,
    qa: np.ndarray,
    y: np.ndarray,
    n_learners: int,
    n_fibers: int,
    rank: int,
    ridge: float,
    max_sweeps: int,
    tol: float,
    seed: int,
):
    """Core alternating least squares over (learner, fiber, value) cells.

    ``y`` may be any real values; the Dataset-facing fit passes binary
    outcomes while reconstruction checks pass exact products. Returns
    (learner factors, flattened fiber factors, objective trace). Each
    subproblem is solved exactly (ridge solve, or minimum-norm lstsq when
    ridge is 0), so the trace is non-increasing.
    """
    rng = np.random.default_rng(derive_seed(seed, "tensor"))
    scale = 1.0 / np.sqrt(rank)
    u = rng.uniform(0.0, scale, size=(n_learners, rank))
    v = rng.uniform(0.0, scale, size=(rank, n_fibers))

    cells_by_learner = [np.flatnonzero(li == l) for l in range(n_learners)]
    cells_by_fiber = [np.flatnonzero(qa == f) for f in range(n_fibers)]
    eye = np.eye(rank)

    trace = [als_objective(u, v, li, qa, y, ridge)]
    for _ in range(max_sweeps):
        for l, cells in enumerate(cells_by_learner):
            if cells.size == 0:
                continue
            vt = v[:, qa[cells]].T  # (m, rank)
            if ridge > 0:
                u[l] = np.linalg.solve(vt.T @ vt + ridge * eye, vt.T @ y[cells])
            else:
                u[l] = np.linalg.lstsq(vt, y[cells], rcond=None)[0]
        for f, cells in enumerate(cells_by_fiber):
            if cells.size == 0:
                continue
            um = u[li[cells]]
            if ridge > 0:
                v[:, f] = np.linalg.solve(um.T @ um + ridge * eye, um.T @ y[cells])
            else:
                v[:, f] = np.linalg.lstsq(um, y[cells], rcond=None)[0]
        trace.append(als_objective(u, v, li, qa, y, ridge))
        if trace[-2] - trace[-1] < tol:
            break
    return u, v, trace


def tensor_fit_als(
    train: Dataset,
    rank: int = 3,
    ridge: float = 0.1,
    max_sweeps: int = 200,
    tol: float = 1e-10,
    seed: int = 0,
) -> TensorModel:
    """Alternating ridge least squares on the observed (learner, question, attempt) cells.

    Iterates full sweeps (all learner rows, then all observed fibers) until
    the objective improvement falls below ``tol``. Factors start uniform in
    [0, 1/sqrt(rank)], seeded. Learners without a single observed cell get
    the mean of the fitted rows and are listed in ``cold_learners``.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    n_l = len(train.learner_index)
    if rank > n_l:
        raise ValueError(f"rank {rank} exceeds number of learners {n_l}")
    n_q = len(train.question_index)
    n_a = train.meta.max_attempt

    li, qa, y = [], [], []
    for rec in train.records:
        if rec.obs is None:
            continue
        li.append(train.learner_index[rec.learner_id])
        qa.append(train.question_index[rec.question_id] * n_a + (rec.attempt - 1))
        y.append(float(rec.obs))
    li = np.array(li, dtype=int)
    qa = np.array(qa, dtype=int)
    y = np.array(y, dtype=float)
    if y.size == 0:
        raise ValueError("tensor_fit_als requires labeled records")

    u, v, trace = als_fit_cells(li, qa, y, n_l, n_q * n_a, rank, ridge, max_sweeps, tol, seed)

    observed_learners = np.flatnonzero(np.bincount(li, minlength=n_l) > 0)
    cold = [lid for lid, l in train.learner_index.items() if l not in set(observed_learners)]
    if cold:
        mean_row = u[observed_learners].mean(axis=0)
        for lid in cold:
            u[train.learner_index[lid]] = mean_row

    # fibers that never appeared in training: borrow the nearest fitted
    # attempt slice of the same question so queries there are not random
    fitted = np.bincount(qa, minlength=n_q * n_a) > 0
    for q in range(n_q):
        have = [a for a in range(n_a) if fitted[q * n_a + a]]
        if not have or len(have) == n_a:
            continue
        for a in range(n_a):
            if not fitted[q * n_a + a]:
                nearest = min(have, key=lambda h: (abs(h - a), h))
                v[:, q * n_a + a] = v[:, q * n_a + nearest]

    return TensorModel(
        learner_factors=u,
        qa_factors=v.reshape(rank, n_q, n_a),
        rank=rank,
        ridge=ridge,
        learner_index=dict(train.learner_index),
        question_index=dict(train.question_index),
        global_mean=float(y.mean()),
        objective_trace=tuple(trace),
        cold_learners=tuple(cold),
    )


def tensor_predict(model: TensorModel, learner_id: str, question_id: str, attempt: int) -> float:
    """Clamped inner-product estimate for one query.

    Attempts beyond the trained range use the last attempt slice; unseen
    learners use the mean factor row; unseen questions fall back to the
    global training mean.
    """
    qi = model.question_index.get(question_id)
    if qi is None:
        return model.global_mean
    li = model.learner_index.get(learner_id)
    row = model.learner_factors[li] if li is not None else model.learner_factors.mean(axis=0)
    a = min(max(attempt, 1), model.qa_factors.shape[2]) - 1
    est = float(row @ model.qa_factors[:, qi, a])
    return float(np.clip(est, 0.0, 1.0))


class TensorFactorizationModel:
    """Predictor wrapper around tensor_fit_als/tensor_predict."""

    name = "tensor"

    def __init__(self, rank: int = 3, ridge: float = 0.1, max_sweeps: int = 200, seed: int = 0):
        self.rank = rank
        self.ridge = ridge
        self.max_sweeps = max_sweeps
        self.seed = seed
        self.model: TensorModel | None = None

    def fit(self, train: Dataset) -> "TensorFactorizationModel":
        self.model = tensor_fit_als(
            train,
            rank=self.rank,
            ridge=self.ridge,
            max_sweeps=self.max_sweeps,
            seed=self.seed,
        )
        return self

    def predict(self, rows: Sequence[tuple[str, str, int]]) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("predict called before fit")
        return np.array([tensor_predict(self.model, lid, qid, a) for lid, qid, a in rows])

    def export_json(self) -> dict:
        if self.model is None:
            raise RuntimeError("export before fit")
        return self.model.to_dict()
