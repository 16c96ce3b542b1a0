import numpy as np
import pytest

from lppred.data import Dataset, InteractionRecord


def make_records(rows):
    """rows: iterable of (learner, question, attempt, obs-or-None)."""
    return [InteractionRecord(l, q, a, o) for l, q, a, o in rows]


def random_dataset(rng, n_learners=6, n_questions=4, max_attempt=3, n_rows=40, labeled=True):
    """Random dataset with unique keys; attempts contiguous from 1 per pair."""
    capacity = n_learners * n_questions * max_attempt
    if n_rows > capacity:
        raise ValueError(f"cannot draw {n_rows} unique rows from capacity {capacity}")
    counts = {}
    records = []
    while len(records) < n_rows:
        lid = f"L{rng.integers(n_learners) + 1}"
        qid = f"Q{rng.integers(n_questions) + 1}"
        attempt = counts.get((lid, qid), 0) + 1
        if attempt > max_attempt:
            continue
        counts[(lid, qid)] = attempt
        obs = int(rng.integers(2)) if labeled else None
        records.append(InteractionRecord(lid, qid, attempt, obs))
    return Dataset.from_records(records)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
