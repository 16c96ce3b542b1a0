"""Interaction-record data model, file ingestion, and fold splitting.

An interaction record is one (learner, question, attempt) observation with a
binary outcome: 1 for a correct answer, 0 for an incorrect one. Rows whose
outcome is unknown (empty ``obs`` field) are permitted and flagged as
prediction targets.

The on-disk format is comma-separated UTF-8 text with the header
``learner_id,question_id,attempt,obs``, one record per line. An optional
lesson metadata file is a JSON object with ``lesson_name`` and a
``questions`` map from question id to ``{text, options, answer}``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

EXPECTED_HEADER = ("learner_id", "question_id", "attempt", "obs")


class DataError(ValueError):
    """Malformed or inconsistent interaction data."""


@dataclass(frozen=True)
class InteractionRecord:
    """One learner attempt on one question. ``obs`` is None for rows awaiting prediction."""

    learner_id: str
    question_id: str
    attempt: int
    obs: int | None

    def key(self) -> tuple[str, str, int]:
        return (self.learner_id, self.question_id, self.attempt)


@dataclass(frozen=True)
class QuestionInfo:
    text: str = ""
    options: tuple[str, ...] = ()
    answer: str = ""


@dataclass(frozen=True)
class LessonMeta:
    """Lesson-level counts plus optional question texts keyed by question id."""

    lesson_name: str
    n_learners: int
    n_questions: int
    max_attempt: int
    questions: dict[str, QuestionInfo] = field(default_factory=dict)


@dataclass(frozen=True)
class Dataset:
    """Validated, immutable collection of interaction records.

    ``learner_index`` and ``question_index`` map the opaque ids appearing in
    ``records`` onto dense 0-based integers, in order of first appearance.
    """

    records: tuple[InteractionRecord, ...]
    meta: LessonMeta
    learner_index: dict[str, int]
    question_index: dict[str, int]

    @classmethod
    def from_records(
        cls,
        records,
        lesson_name: str = "",
        questions: dict[str, QuestionInfo] | None = None,
    ) -> "Dataset":
        records = tuple(records)
        if not records:
            raise DataError("dataset has no records")
        learner_index: dict[str, int] = {}
        question_index: dict[str, int] = {}
        seen: set[tuple[str, str, int]] = set()
        max_attempt = 0
        for rec in records:
            if rec.attempt < 1:
                raise DataError(f"attempt must be >= 1, got {rec.attempt} for {rec.key()}")
            if rec.obs is not None and rec.obs not in (0, 1):
                raise DataError(f"obs must be 0 or 1, got {rec.obs} for {rec.key()}")
            key = rec.key()
            if key in seen:
                raise DataError(f"duplicate record for (learner, question, attempt) = {key}")
            seen.add(key)
            if rec.learner_id not in learner_index:
                learner_index[rec.learner_id] = len(learner_index)
            if rec.question_id not in question_index:
                question_index[rec.question_id] = len(question_index)
            max_attempt = max(max_attempt, rec.attempt)
        meta = LessonMeta(
            lesson_name=lesson_name,
            n_learners=len(learner_index),
            n_questions=len(question_index),
            max_attempt=max_attempt,
            questions=dict(questions) if questions else {},
        )
        return cls(records, meta, learner_index, question_index)

    @property
    def n_records(self) -> int:
        return len(self.records)

    def labeled_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.obs is not None]

    def unlabeled_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.obs is None]

    def subset(self, positions) -> "Dataset":
        """New Dataset over the given record positions (indices rebuilt, meta revalidated)."""
        return Dataset.from_records(
            (self.records[i] for i in positions),
            lesson_name=self.meta.lesson_name,
            questions=self.meta.questions,
        )

    def keys(self) -> list[tuple[str, str, int]]:
        return [r.key() for r in self.records]

    def obs_array(self, positions=None) -> np.ndarray:
        """Outcomes for the given (labeled) positions as a float array."""
        if positions is None:
            positions = range(self.n_records)
        out = []
        for i in positions:
            rec = self.records[i]
            if rec.obs is None:
                raise DataError(f"record {rec.key()} has no observation")
            out.append(float(rec.obs))
        return np.asarray(out, dtype=float)


@dataclass(frozen=True)
class FoldSplit:
    """Assignment of labeled record positions to k folds.

    ``assignments[i]`` is the fold label of record position ``i``, or -1 for
    rows without an observation (which never enter any fold).
    """

    k: int
    seed: int
    assignments: tuple[int, ...]

    def fold_positions(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignments) if f == fold]

    def train_positions(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignments) if f != fold and f >= 0]


def parse_meta(meta_path) -> tuple[str, dict[str, QuestionInfo]]:
    """Read the optional lesson metadata JSON file."""
    with open(meta_path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"metadata file {meta_path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise DataError(f"metadata file {meta_path}: expected a JSON object")
    lesson_name = str(payload.get("lesson_name", ""))
    questions: dict[str, QuestionInfo] = {}
    for qid, info in (payload.get("questions") or {}).items():
        questions[str(qid)] = QuestionInfo(
            text=str(info.get("text", "")),
            options=tuple(str(o) for o in info.get("options", ())),
            answer=str(info.get("answer", "")),
        )
    return lesson_name, questions


def parse_dataset(path, meta_path=None) -> Dataset:
    """Read a comma-separated interaction file into a validated Dataset.

    Raises DataError naming the offending line for malformed rows (wrong
    column count, non-binary obs, attempt < 1) and for duplicate
    (learner, question, attempt) triples.
    """
    lesson_name, questions = ("", {})
    if meta_path is not None:
        lesson_name, questions = parse_meta(meta_path)

    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        if tuple(h.strip() for h in header) != EXPECTED_HEADER:
            raise DataError(
                f"{path}: line 1: expected header {','.join(EXPECTED_HEADER)}, "
                f"got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 columns, got {len(row)}")
            learner_id, question_id, attempt_s, obs_s = (c.strip() for c in row)
            try:
                attempt = int(attempt_s)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: attempt must be an integer, got {attempt_s!r}") from None
            if attempt < 1:
                raise DataError(f"{path}: line {lineno}: attempt must be >= 1, got {attempt}")
            if obs_s == "":
                obs: int | None = None
            elif obs_s in ("0", "1"):
                obs = int(obs_s)
            else:
                raise DataError(f"{path}: line {lineno}: obs must be 0 or 1, got {obs_s!r}")
            records.append(InteractionRecord(learner_id, question_id, attempt, obs))
    try:
        return Dataset.from_records(records, lesson_name=lesson_name, questions=questions)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_dataset(ds: Dataset, path) -> None:
    """Serialize a Dataset back to the comma-separated file format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPECTED_HEADER)
        for rec in ds.records:
            writer.writerow(
                [rec.learner_id, rec.question_id, rec.attempt, "" if rec.obs is None else rec.obs]
            )


def make_folds(ds: Dataset, k: int, seed: int) -> FoldSplit:
    """Partition the labeled records into k near-equal folds, uniformly at random.

    Deterministic given (ds, k, seed). Fold sizes differ by at most one; rows
    without an observation receive fold label -1.
    """
    if k < 2:
        raise DataError(f"fold count must be >= 2, got {k}")
    labeled = ds.labeled_positions()
    if k > len(labeled):
        raise DataError(f"cannot split {len(labeled)} labeled records into {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labeled))
    n = len(labeled)
    base, extra = divmod(n, k)
    assignments = [-1] * ds.n_records
    cursor = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        for j in order[cursor : cursor + size]:
            assignments[labeled[j]] = fold
        cursor += size
    return FoldSplit(k=k, seed=seed, assignments=tuple(assignments))


@dataclass(frozen=True)
class DatasetSummary:
    """Descriptive statistics to accompany LessonMeta."""

    meta: LessonMeta
    n_records: int
    n_labeled: int
    correct_rate: float
    question_correct_rate: dict[str, float]
    attempts_histogram: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "lesson_name": self.meta.lesson_name,
            "n_learners": self.meta.n_learners,
            "n_questions": self.meta.n_questions,
            "max_attempt": self.meta.max_attempt,
            "n_records": self.n_records,
            "n_labeled": self.n_labeled,
            "correct_rate": self.correct_rate,
            "question_correct_rate": self.question_correct_rate,
            "attempts_histogram": {str(a): c for a, c in sorted(self.attempts_histogram.items())},
        }

    def to_text(self) -> str:
        lines = [
            f"lesson: {self.meta.lesson_name or '(unnamed)'}",
            f"learners: {self.meta.n_learners}  questions: {self.meta.n_questions}  "
            f"max attempt: {self.meta.max_attempt}",
            f"records: {self.n_records} ({self.n_labeled} labeled), "
            f"overall correct rate {self.correct_rate:.3f}",
            "per-question correct rate:",
        ]
        for qid, rate in self.question_correct_rate.items():
            lines.append(f"  {qid}: {rate:.3f}")
        lines.append("attempts histogram:")
        for attempt, count in sorted(self.attempts_histogram.items()):
            lines.append(f"  attempt {attempt}: {count}")
        return "\n".join(lines)


def summarize(ds: Dataset) -> DatasetSummary:
    """Counts, per-question correct rates (labeled rows), and attempts histogram."""
    per_q_total: dict[str, int] = {}
    per_q_correct: dict[str, int] = {}
    histogram: dict[int, int] = {}
    n_labeled = 0
    n_correct = 0
    for rec in ds.records:
        histogram[rec.attempt] = histogram.get(rec.attempt, 0) + 1
        if rec.obs is None:
            continue
        n_labeled += 1
        n_correct += rec.obs
        per_q_total[rec.question_id] = per_q_total.get(rec.question_id, 0) + 1
        per_q_correct[rec.question_id] = per_q_correct.get(rec.question_id, 0) + rec.obs
    rates = {
        qid: per_q_correct[qid] / per_q_total[qid]
        for qid in ds.question_index
        if per_q_total.get(qid)
    }
    return DatasetSummary(
        meta=ds.meta,
        n_records=ds.n_records,
        n_labeled=n_labeled,
        correct_rate=(n_correct / n_labeled) if n_labeled else 0.0,
        question_correct_rate=rates,
        attempts_histogram=histogram,
    )
