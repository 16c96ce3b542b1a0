"""Bayesian Knowledge Tracing with per-question parameters and EM fitting.

Each question is modeled as a two-state hidden Markov chain over the
learner's mastery of that question's skill. Four probabilities govern the
chain: initial mastery (p_init), the per-opportunity transition from
unmastered to mastered (p_learn), answering wrong while mastered (p_slip),
and answering right while unmastered (p_guess). There is no forgetting:
the mastered state is absorbing.

Fitting is Baum-Welch over the per-(learner, question) attempt sequences of
one question, in log space. Attempt slots whose outcome is unknown (for
example held out by the cross-validation harness) are marginalized: the
chain still transitions there but no emission is scored.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .seeds import derive_seed

PROB_FLOOR = 1e-6
# Guess/slip are capped below 0.5 so that p_slip + p_guess < 1 always holds;
# estimates at or above 0.5 would swap the meaning of the two states.
NOISE_CAP = 0.5 - 1e-6

DEFAULT_INIT = dict(p_init=0.4, p_learn=0.2, p_slip=0.1, p_guess=0.2)


@dataclass(frozen=True)
class BktParams:
    """The four chain probabilities for one question's skill."""

    p_init: float
    p_learn: float
    p_slip: float
    p_guess: float

    def __post_init__(self):
        for name in ("p_init", "p_learn", "p_slip", "p_guess"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie strictly in (0, 1), got {v}")
        if self.p_slip + self.p_guess >= 1.0:
            raise ValueError(
                f"p_slip + p_guess must be < 1 "
                f"(got {self.p_slip} + {self.p_guess})"
            )

    def to_dict(self) -> dict:
        return {
            "p_init": self.p_init,
            "p_learn": self.p_learn,
            "p_slip": self.p_slip,
            "p_guess": self.p_guess,
        }


def _clamp(p: float) -> float:
    return min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)


def bkt_predict_next(belief: float, params: BktParams) -> float:
    """Probability of a correct answer given the current mastery belief."""
    return belief * (1.0 - params.p_slip) + (1.0 - belief) * params.p_guess


def bkt_posterior_update(belief: float, obs: int, params: BktParams) -> float:
    """Condition the mastery belief on one observed outcome, then apply learning.

    All probabilities are clamped away from 0 and 1 before the division so a
    noiseless parameter set cannot produce a degenerate denominator.
    """
    b = _clamp(belief)
    s = _clamp(params.p_slip)
    g = _clamp(params.p_guess)
    if obs == 1:
        posterior = b * (1.0 - s) / (b * (1.0 - s) + (1.0 - b) * g)
    else:
        posterior = b * s / (b * s + (1.0 - b) * (1.0 - g))
    return posterior + (1.0 - posterior) * params.p_learn


def mastery_trace(observations: Sequence[int], params: BktParams) -> list[float]:
    """Posterior mastery probability after each observed attempt of one sequence."""
    belief = params.p_init
    trace = []
    for obs in observations:
        belief = bkt_posterior_update(belief, obs, params)
        trace.append(belief)
    return trace


def sequence_predictions(observations: Sequence[int], params: BktParams) -> list[float]:
    """Filtered correctness probabilities: P(correct at t | outcomes before t)."""
    belief = params.p_init
    preds = []
    for obs in observations:
        preds.append(bkt_predict_next(belief, params))
        belief = bkt_posterior_update(belief, obs, params)
    return preds


def sequence_loglik(observations: Sequence[int], params: BktParams) -> float:
    """Log-likelihood of one fully observed sequence under the chain."""
    total = 0.0
    for pred, obs in zip(sequence_predictions(observations, params), observations):
        p = _clamp(pred)
        total += np.log(p) if obs == 1 else np.log(1.0 - p)
    return float(total)


# ---------------------------------------------------------------------------
# EM fitting
# ---------------------------------------------------------------------------


def _sequences_by_question(ds: Dataset) -> dict[str, list[tuple[str, dict[int, int]]]]:
    """Labeled observations grouped per question as (learner, attempt -> obs) pairs."""
    grouped: dict[str, dict[str, dict[int, int]]] = {q: {} for q in ds.question_index}
    for rec in ds.records:
        if rec.obs is None:
            continue
        grouped[rec.question_id].setdefault(rec.learner_id, {})[rec.attempt] = rec.obs
    return {
        qid: sorted(by_learner.items(), key=lambda kv: ds.learner_index[kv[0]])
        for qid, by_learner in grouped.items()
    }


def _pack_sequences(sequences: list[dict[int, int]]):
    """Pad attempt-indexed observations into (obs, observed, length) arrays.

    Slot t of a sequence is attempt t+1. A slot inside the sequence without
    an observation (held-out attempt) has observed=False; slots past the last
    observed attempt are outside the sequence and excluded via ``lengths``.
    """
    lengths = np.array([max(s) for s in sequences], dtype=int)
    t_max = int(lengths.max())
    obs = np.zeros((len(sequences), t_max))
    observed = np.zeros((len(sequences), t_max), dtype=bool)
    for i, seq in enumerate(sequences):
        for attempt, value in seq.items():
            obs[i, attempt - 1] = value
            observed[i, attempt - 1] = True
    return obs, observed, lengths


def _forward_backward(obs, observed, lengths, params: BktParams):
    """Log-space forward-backward over padded sequences.

    Returns (loglik_total, gamma, xi) where gamma[i, t, k] is the posterior
    of state k at slot t and xi[i, t, j, k] the posterior of the (j -> k)
    transition between slots t and t+1. State 0 is unmastered, state 1
    mastered.
    """
    n, t_max = obs.shape
    pi = _clamp(params.p_init)
    pl = _clamp(params.p_learn)
    s = _clamp(params.p_slip)
    g = _clamp(params.p_guess)

    log_a = np.array([[np.log1p(-pl), np.log(pl)], [-np.inf, 0.0]])
    # emission log-probs per slot and state, zero where nothing was observed
    log_e = np.zeros((n, t_max, 2))
    log_e[:, :, 0] = np.where(obs == 1.0, np.log(g), np.log1p(-g))
    log_e[:, :, 1] = np.where(obs == 1.0, np.log1p(-s), np.log(s))
    log_e[~observed] = 0.0

    la = np.full((n, t_max, 2), -np.inf)
    la[:, 0, 0] = np.log1p(-pi) + log_e[:, 0, 0]
    la[:, 0, 1] = np.log(pi) + log_e[:, 0, 1]
    for t in range(1, t_max):
        prev = la[:, t - 1, :]
        la[:, t, 0] = prev[:, 0] + log_a[0, 0] + log_e[:, t, 0]
        la[:, t, 1] = (
            np.logaddexp(prev[:, 0] + log_a[0, 1], prev[:, 1] + log_a[1, 1])
            + log_e[:, t, 1]
        )

    lb = np.zeros((n, t_max, 2))
    for t in range(t_max - 2, -1, -1):
        nxt = lb[:, t + 1, :] + log_e[:, t + 1, :]
        lb[:, t, 0] = np.logaddexp(log_a[0, 0] + nxt[:, 0], log_a[0, 1] + nxt[:, 1])
        lb[:, t, 1] = log_a[1, 1] + nxt[:, 1]

    # total mass is preserved past each sequence's end, so the final slot
    # gives every sequence's likelihood regardless of padding
    loglik_seq = np.logaddexp(la[:, -1, 0], la[:, -1, 1])
    loglik_total = float(loglik_seq.sum())

    gamma = np.exp(la + lb - loglik_seq[:, None, None])

    xi = np.zeros((n, max(t_max - 1, 0), 2, 2))
    for t in range(t_max - 1):
        nxt = log_e[:, t + 1, :] + lb[:, t + 1, :]
        for j in range(2):
            for k in range(2):
                if not np.isfinite(log_a[j, k]):
                    continue
                xi[:, t, j, k] = np.exp(la[:, t, j] + log_a[j, k] + nxt[:, k] - loglik_seq)
    return loglik_total, gamma, xi


def _em_single_question(
    sequences: list[dict[int, int]],
    init: BktParams,
    max_iter: int,
    tol: float,
) -> tuple[BktParams, list[float]]:
    obs, observed, lengths = _pack_sequences(sequences)
    n, t_max = obs.shape
    slot_valid = np.arange(t_max)[None, :] < lengths[:, None]
    trans_valid = np.arange(max(t_max - 1, 0))[None, :] < (lengths - 1)[:, None]

    params = init
    trace: list[float] = []
    for _ in range(max_iter):
        loglik, gamma, xi = _forward_backward(obs, observed, lengths, params)
        trace.append(loglik)
        if len(trace) >= 2 and trace[-1] - trace[-2] < tol:
            break

        p_init = float(np.mean(gamma[:, 0, 1]))
        num_learn = float((xi[:, :, 0, 1] * trans_valid).sum())
        den_learn = float((gamma[:, :-1, 0] * trans_valid).sum()) if t_max > 1 else 0.0
        p_learn = num_learn / den_learn if den_learn > 0 else params.p_learn

        w_obs = observed & slot_valid
        den_g = float((gamma[:, :, 0] * w_obs).sum())
        num_g = float((gamma[:, :, 0] * w_obs * obs).sum())
        p_guess = num_g / den_g if den_g > 0 else params.p_guess
        den_s = float((gamma[:, :, 1] * w_obs).sum())
        num_s = float((gamma[:, :, 1] * w_obs * (1.0 - obs)).sum())
        p_slip = num_s / den_s if den_s > 0 else params.p_slip

        params = BktParams(
            p_init=_clamp(p_init),
            p_learn=_clamp(p_learn),
            p_slip=min(max(p_slip, PROB_FLOOR), NOISE_CAP),
            p_guess=min(max(p_guess, PROB_FLOOR), NOISE_CAP),
        )
    return params, trace


@dataclass
class BktFit:
    """Fitted per-question parameters plus fitting diagnostics."""

    question_params: dict[str, BktParams]
    fallback: BktParams
    loglik_trace: dict[str, list[float]] = field(default_factory=dict)
    learner_offsets: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {qid: p.to_dict() for qid, p in self.question_params.items()}
        if self.learner_offsets:
            out["_learner_offsets"] = dict(self.learner_offsets)
        return out


def bkt_fit_em(
    train: Dataset,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    individualized: bool = False,
) -> BktFit:
    """Fit per-question chain parameters by EM (Baum-Welch).

    Iterates until the log-likelihood improvement drops below ``tol`` or
    ``max_iter`` is reached. Initial values are the documented defaults with
    a small seeded jitter to break symmetry. Questions without a single
    labeled sequence fall back to the un-jittered defaults, with a warning.

    With ``individualized=True``, a per-learner offset on the logit of
    p_init is fitted afterwards against each learner's own sequences.
    """
    fallback = BktParams(**DEFAULT_INIT)
    grouped = _sequences_by_question(train)
    question_params: dict[str, BktParams] = {}
    traces: dict[str, list[float]] = {}
    for qid in train.question_index:
        pairs = grouped.get(qid, [])
        if not pairs:
            warnings.warn(f"question {qid}: no labeled sequences, using prior parameters")
            question_params[qid] = fallback
            traces[qid] = []
            continue
        rng = np.random.default_rng(derive_seed(seed, "bkt", qid))
        jitter = rng.uniform(-0.02, 0.02, size=4)
        init = BktParams(
            p_init=_clamp(DEFAULT_INIT["p_init"] + jitter[0]),
            p_learn=_clamp(DEFAULT_INIT["p_learn"] + jitter[1]),
            p_slip=min(max(DEFAULT_INIT["p_slip"] + jitter[2], PROB_FLOOR), NOISE_CAP),
            p_guess=min(max(DEFAULT_INIT["p_guess"] + jitter[3], PROB_FLOOR), NOISE_CAP),
        )
        params, trace = _em_single_question(
            [seq for _, seq in pairs], init, max_iter, tol
        )
        question_params[qid] = params
        traces[qid] = trace

    fit = BktFit(question_params=question_params, fallback=fallback, loglik_trace=traces)
    if individualized:
        fit.learner_offsets = _fit_learner_offsets(train, fit)
    return fit


def _offset_params(params: BktParams, delta: float) -> BktParams:
    logit = np.log(params.p_init / (1.0 - params.p_init))
    p0 = 1.0 / (1.0 + np.exp(-(logit + delta)))
    return BktParams(_clamp(float(p0)), params.p_learn, params.p_slip, params.p_guess)


def _fit_learner_offsets(ds: Dataset, fit: BktFit) -> dict[str, float]:
    """Golden-section search for each learner's p_init logit offset."""
    by_learner: dict[str, list[tuple[str, list[int]]]] = {}
    grouped = _sequences_by_question(ds)
    for qid, pairs in grouped.items():
        for lid, seq in pairs:
            ordered = [seq[a] for a in sorted(seq)]
            by_learner.setdefault(lid, []).append((qid, ordered))

    phi = (np.sqrt(5.0) - 1.0) / 2.0
    offsets: dict[str, float] = {}
    for lid, seqs in by_learner.items():
        def neg_loglik(delta: float) -> float:
            total = 0.0
            for qid, observations in seqs:
                params = _offset_params(fit.question_params[qid], delta)
                total += sequence_loglik(observations, params)
            return -total

        lo, hi = -4.0, 4.0
        x1 = hi - phi * (hi - lo)
        x2 = lo + phi * (hi - lo)
        f1, f2 = neg_loglik(x1), neg_loglik(x2)
        for _ in range(40):
            if f1 < f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - phi * (hi - lo)
                f1 = neg_loglik(x1)
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + phi * (hi - lo)
                f2 = neg_loglik(x2)
        offsets[lid] = (lo + hi) / 2.0
    return offsets


# ---------------------------------------------------------------------------
# Predictor
# ---------------------------------------------------------------------------


class BktModel:
    """Predictor wrapper: EM fit at ``fit`` time, belief filtering at ``predict``.

    For a queried (learner, question, attempt) the mastery belief is rolled
    forward through that learner's earlier attempts on the question: attempts
    whose outcome is in the training data update the belief by Bayes rule,
    attempts falling in the query's past but absent from training apply the
    learning transition only.
    """

    name = "bkt"

    def __init__(
        self,
        seed: int = 0,
        max_iter: int = 100,
        tol: float = 1e-6,
        individualized: bool = False,
    ):
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol
        self.individualized = individualized
        self.fit_result: BktFit | None = None
        self._history: dict[tuple[str, str], dict[int, int]] = {}

    def fit(self, train: Dataset) -> "BktModel":
        self.fit_result = bkt_fit_em(
            train,
            max_iter=self.max_iter,
            tol=self.tol,
            seed=self.seed,
            individualized=self.individualized,
        )
        self._history = {}
        for rec in train.records:
            if rec.obs is None:
                continue
            self._history.setdefault((rec.learner_id, rec.question_id), {})[rec.attempt] = rec.obs
        return self

    def _params_for(self, learner_id: str, question_id: str) -> BktParams:
        assert self.fit_result is not None
        params = self.fit_result.question_params.get(question_id, self.fit_result.fallback)
        delta = self.fit_result.learner_offsets.get(learner_id)
        if delta:
            params = _offset_params(params, delta)
        return params

    def predict(self, rows: Sequence[tuple[str, str, int]]) -> np.ndarray:
        if self.fit_result is None:
            raise RuntimeError("predict called before fit")
        preds = np.empty(len(rows))
        for i, (lid, qid, attempt) in enumerate(rows):
            params = self._params_for(lid, qid)
            history = self._history.get((lid, qid), {})
            belief = params.p_init
            for past in range(1, attempt):
                obs = history.get(past)
                if obs is None:
                    belief = belief + (1.0 - belief) * params.p_learn
                else:
                    belief = bkt_posterior_update(belief, obs, params)
            preds[i] = bkt_predict_next(belief, params)
        return np.clip(preds, 0.0, 1.0)

    def export_json(self) -> dict:
        if self.fit_result is None:
            raise RuntimeError("export before fit")
        return self.fit_result.to_dict()
