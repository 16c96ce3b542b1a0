"""Encode / predict / decode pipeline for chat-completion language models.

Interaction records are verbalized into contextual sentences, assembled into
a staged chain-of-thought prompt script, sent to a chat-completion client,
and the client's structured answer records are parsed back into numeric
predictions. A deterministic offline mock client implements the same
heuristic a capable assistant applies to such transcripts (per-question
difficulty shrunk toward 0.5, discounted for repeated attempts), which makes
the whole pipeline testable without any network access.

Prompt stages are tagged a-j in order: (a) learning materials,
(b) transcription of the performance data, (c) analysis request,
(d) method selection, (e) model development, (f) performance evaluation,
(g) configuration disclosure, (h) skill assessment, (i) optimization,
(j) iterative feedback. Stages (a) and (h) require lesson metadata and are
omitted without it.
"""

from __future__ import annotations

import json
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, InteractionRecord, LessonMeta
from .metrics import rmse

STAGE_ORDER = "abcdefghij"

# mock-heuristic constants: pseudo-observations pulling the per-question
# rate toward 0.5, the per-extra-attempt discount, and its floor
SHRINK_PSEUDO_COUNT = 2.0
ATTEMPT_PENALTY = 0.1
ATTEMPT_PENALTY_FLOOR = 0.5


class DecodeError(ValueError):
    """The response text contained no usable prediction records."""


class ClientError(RuntimeError):
    """Transport-level failure talking to the model endpoint."""


def _ordinal(n: int) -> str:
    if 10 <= n % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


@dataclass(frozen=True)
class EncodedBatch:
    """One contextual sentence per record, keyed and flagged train/test."""

    sentences: tuple[str, ...]
    keys: tuple[tuple[str, str, int], ...]
    is_test: tuple[bool, ...]

    def train_sentences(self) -> list[str]:
        return [s for s, t in zip(self.sentences, self.is_test) if not t]

    def test_sentences(self) -> list[str]:
        return [s for s, t in zip(self.sentences, self.is_test) if t]

    def test_keys(self) -> list[tuple[str, str, int]]:
        return [k for k, t in zip(self.keys, self.is_test) if t]


def encode_records(ds: Dataset, meta: LessonMeta | None = None) -> EncodedBatch:
    """Verbalize every record; rows without an outcome become prediction targets.

    The question id always appears verbatim in the sentence so the text
    round-trips losslessly; the title comes from the metadata when present,
    else the placeholder "question <id>".
    """
    questions = (meta.questions if meta else None) or (ds.meta.questions or {})
    sentences = []
    keys = []
    flags = []
    for rec in ds.records:
        info = questions.get(rec.question_id)
        title = info.text if info and info.text else f"question {rec.question_id}"
        sentence = (
            f"The current learner {rec.learner_id} attempted to answer the question "
            f"{rec.question_id} titled as '{title}' on their {_ordinal(rec.attempt)} attempt."
        )
        if rec.obs is not None:
            sentence += f" Their performance was observed as {rec.obs}."
        sentences.append(sentence)
        keys.append(rec.key())
        flags.append(rec.obs is None)
    return EncodedBatch(tuple(sentences), tuple(keys), tuple(flags))


@dataclass(frozen=True)
class PromptStep:
    stage: str  # one letter of STAGE_ORDER
    content: str


@dataclass(frozen=True)
class PromptScript:
    """Ordered prompt stages; convertible to chat messages or audit text."""

    steps: tuple[PromptStep, ...]

    def messages(self) -> list[dict[str, str]]:
        return [{"role": "user", "content": s.content} for s in self.steps]

    def stage_tags(self) -> str:
        return "".join(s.stage for s in self.steps)

    def to_text(self) -> str:
        blocks = [f"[{s.stage}] {s.content}" for s in self.steps]
        return "\n\n".join(blocks)


PREDICTION_FORMAT = (
    "{'learner ID': ..., 'Question ID': ..., 'Attempt': ..., "
    "'Prediction': ..., 'Assessment': ...}"
)


def build_cot_script(
    batch: EncodedBatch,
    meta: LessonMeta | None = None,
    stages: str = STAGE_ORDER,
    rows_per_chunk: int = 0,
) -> PromptScript:
    """Assemble the staged prompt sequence around an encoded batch.

    ``stages`` restricts which of the a-j steps appear (order is always
    a-j); stages a and h are dropped when no lesson metadata is available.
    ``rows_per_chunk`` > 0 splits the transcription stage into several
    messages of at most that many sentences.
    """
    if not batch.sentences:
        raise ValueError("cannot build a script from an empty batch")
    bad = [s for s in stages if s not in STAGE_ORDER]
    if bad:
        raise ValueError(f"unknown stages {bad!r}")
    has_meta = meta is not None and bool(meta.questions)
    wanted = [s for s in STAGE_ORDER if s in stages]
    if not has_meta:
        wanted = [s for s in wanted if s not in ("a", "h")]

    steps: list[PromptStep] = []
    for stage in wanted:
        if stage == "a":
            lines = [
                f"Here are the learning materials for the lesson "
                f"'{meta.lesson_name or 'unnamed lesson'}'."
            ]
            for qid, info in meta.questions.items():
                lines.append(f"Question {qid}: {info.text}")
                if info.options:
                    lines.append("  Options: " + "; ".join(info.options))
                if info.answer:
                    lines.append(f"  Answer: {info.answer}")
            steps.append(PromptStep("a", "\n".join(lines)))
        elif stage == "b":
            train = batch.train_sentences()
            test = batch.test_sentences()
            chunks: list[list[str]] = []
            if rows_per_chunk and rows_per_chunk > 0:
                for start in range(0, len(train), rows_per_chunk):
                    chunks.append(train[start : start + rows_per_chunk])
            else:
                chunks = [train]
            head = "Historical learning performance records:"
            for ci, chunk in enumerate(chunks):
                body = "\n".join(chunk) if chunk else "(none)"
                label = head if ci == 0 else "More historical records:"
                steps.append(PromptStep("b", f"{label}\n{body}"))
            if test:
                steps.append(
                    PromptStep(
                        "b",
                        "Rows awaiting prediction (outcome withheld):\n" + "\n".join(test),
                    )
                )
        elif stage == "c":
            steps.append(
                PromptStep(
                    "c",
                    "Analyze these records for patterns in question difficulty and how "
                    "performance changes over repeated attempts. Then produce, for every "
                    "row awaiting prediction, a likelihood between 0 and 1 that the "
                    "learner answers correctly, one record per row in exactly this "
                    f"format: {PREDICTION_FORMAT}",
                )
            )
        elif stage == "d":
            steps.append(
                PromptStep(
                    "d",
                    "Which prediction method do you recommend for this data: logistic "
                    "regression, random forest, gradient boosting machine, or XGBoost? "
                    "Name one.",
                )
            )
        elif stage == "e":
            steps.append(
                PromptStep(
                    "e",
                    "Develop the chosen model, training and validating across the "
                    "dataset folds.",
                )
            )
        elif stage == "f":
            steps.append(
                PromptStep(
                    "f",
                    "Report the validation outcome as RMSE for each fold.",
                )
            )
        elif stage == "g":
            steps.append(
                PromptStep("g", "Share the full configuration settings of the model you used.")
            )
        elif stage == "h":
            steps.append(
                PromptStep(
                    "h",
                    "Assess each learner's reading comprehension skills based on their "
                    "performance records and the lesson questions.",
                )
            )
        elif stage == "i":
            steps.append(
                PromptStep(
                    "i",
                    "Suggest how to tune the model's hyperparameters to improve "
                    "predictive performance.",
                )
            )
        elif stage == "j":
            steps.append(
                PromptStep(
                    "j",
                    "I may ask follow-up questions to refine the analysis; keep the "
                    "context available.",
                )
            )
    return PromptScript(tuple(steps))


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodedPrediction:
    learner_id: str
    question_id: str
    attempt: int
    prediction: float
    assessment: str = ""

    def key(self) -> tuple[str, str, int]:
        return (self.learner_id, self.question_id, self.attempt)


@dataclass
class DecodeResult:
    predictions: list[DecodedPrediction]
    rejected: list[tuple[str, str]] = field(default_factory=list)  # (snippet, reason)
    unparsed: str = ""


_BRACED = re.compile(r"\{[^{}]*\}")
_KEY_ALIASES = {
    "learnerid": "learner_id",
    "learner": "learner_id",
    "questionid": "question_id",
    "question": "question_id",
    "attempt": "attempt",
    "attempts": "attempt",
    "prediction": "prediction",
    "assessment": "assessment",
}


def split_pairs(body: str) -> list[str]:
    """Split on commas that sit outside single or double quotes."""
    parts = []
    depth_quote = ""
    buf = []
    for ch in body:
        if depth_quote:
            if ch == depth_quote:
                depth_quote = ""
            buf.append(ch)
        elif ch in "'\"":
            depth_quote = ch
            buf.append(ch)
        elif ch == ",":
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if buf:
        parts.append("".join(buf))
    return parts


def strip_quotes(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def decode_response(text: str) -> DecodeResult:
    """Extract every braced prediction record from free-form response text.

    Tolerates single or double quotes, arbitrary key order, and unquoted id
    values. Records missing required keys, with a non-numeric attempt or
    prediction, or with a prediction outside [0, 1] are collected under
    ``rejected`` with a reason. Raises DecodeError if nothing decodes.
    """
    predictions: list[DecodedPrediction] = []
    rejected: list[tuple[str, str]] = []
    remainder = text
    for match in _BRACED.finditer(text):
        snippet = match.group(0)
        remainder = remainder.replace(snippet, "", 1)
        fields: dict[str, str] = {}
        for pair in split_pairs(snippet[1:-1]):
            if ":" not in pair:
                continue
            raw_key, raw_val = pair.split(":", 1)
            key = re.sub(r"[^a-z]", "", strip_quotes(raw_key).lower())
            key = _KEY_ALIASES.get(key)
            if key:
                fields[key] = strip_quotes(raw_val)
        required = {"learner_id", "question_id", "attempt", "prediction"}
        if not required <= set(fields):
            rejected.append((snippet, "missing keys"))
            continue
        try:
            attempt = int(fields["attempt"])
        except ValueError:
            rejected.append((snippet, "attempt not an integer"))
            continue
        try:
            pred = float(fields["prediction"])
        except ValueError:
            rejected.append((snippet, "prediction not a number"))
            continue
        if not 0.0 <= pred <= 1.0:
            rejected.append((snippet, "prediction out of range"))
            continue
        predictions.append(
            DecodedPrediction(
                learner_id=fields["learner_id"],
                question_id=fields["question_id"],
                attempt=attempt,
                prediction=pred,
                assessment=fields.get("assessment", ""),
            )
        )
    if not predictions:
        raise DecodeError("no predictions found in response")
    return DecodeResult(predictions=predictions, rejected=rejected, unparsed=remainder.strip())


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

_RECORD_SENTENCE = re.compile(
    r"learner (\S+) attempted to answer the question (\S+) .*?"
    r"on their (\d+)\w{2} attempt\.(?: Their performance was observed as ([01])\.)?"
)


def heuristic_prediction(n_train: int, n_correct: int, attempt: int) -> float:
    """Per-question rate shrunk toward 0.5, discounted for repeated attempts."""
    base = (n_correct + 0.5 * SHRINK_PSEUDO_COUNT) / (n_train + SHRINK_PSEUDO_COUNT)
    penalty = max(ATTEMPT_PENALTY_FLOOR, 1.0 - ATTEMPT_PENALTY * (attempt - 1))
    return base * penalty


class MockHeuristicClient:
    """Deterministic offline stand-in for a hosted chat model.

    Parses the transcription stage out of the incoming messages, applies the
    documented difficulty-and-attempts heuristic, and answers with one
    structured record per prediction row (plus a method recommendation, so
    method-selection prompts also get an answer). Pure and reentrant.
    """

    name = "mock"

    def send(self, messages: Sequence[dict[str, str]]) -> str:
        text = "\n".join(m.get("content", "") for m in messages)
        train: dict[str, list[int]] = {}
        test_rows: list[tuple[str, str, int]] = []
        for m in _RECORD_SENTENCE.finditer(text):
            lid, qid, attempt, obs = m.group(1), m.group(2), int(m.group(3)), m.group(4)
            if obs is None:
                test_rows.append((lid, qid, attempt))
            else:
                train.setdefault(qid, []).append(int(obs))
        recommendation = (
            "Based on per-question difficulty and attempt counts, I recommend XGBoost "
            "for this data."
        )
        if not test_rows:
            if "'Prediction'" in text:
                raise ValueError("no prediction rows found in the prompt script")
            return recommendation

        lines = [recommendation + " Heuristic likelihoods for the requested rows:"]
        for lid, qid, attempt in test_rows:
            outcomes = train.get(qid, [])
            pred = heuristic_prediction(len(outcomes), sum(outcomes), attempt)
            note = "likely correct" if pred >= 0.5 else "likely incorrect"
            lines.append(
                f"{{'learner ID': '{lid}', 'Question ID': '{qid}', 'Attempt': {attempt}, "
                f"'Prediction': {pred!r}, 'Assessment': '{note}'}}"
            )
        return "\n".join(lines)


class HttpChatClient:
    """Minimal chat-completion HTTP client: message list in, text out.

    POSTs ``{"model", "messages", "temperature"}`` as JSON to the endpoint
    and reads ``choices[0].message.content`` from the reply. The bearer
    token comes from the environment (default variable LPPRED_API_TOKEN)
    and is never logged. Failed calls are retried with a linear backoff.
    """

    name = "http"

    def __init__(
        self,
        endpoint: str,
        model: str = "gpt-4",
        temperature: float = 0.0,
        timeout: float = 120.0,
        max_retries: int = 2,
        token_env: str = "LPPRED_API_TOKEN",
        backoff: float = 1.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        self.token_env = token_env
        self.backoff = backoff

    def send(self, messages: Sequence[dict[str, str]]) -> str:
        payload = json.dumps(
            {"model": self.model, "messages": list(messages), "temperature": self.temperature}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        for retry in range(self.max_retries + 1):
            try:
                request = urllib.request.Request(
                    self.endpoint, data=payload, headers=headers, method="POST"
                )
                with urllib.request.urlopen(request, timeout=self.timeout) as response:
                    body = json.loads(response.read().decode("utf-8"))
                return body["choices"][0]["message"]["content"]
            except (urllib.error.URLError, OSError, KeyError, json.JSONDecodeError) as exc:
                last_error = exc
                if retry < self.max_retries:
                    time.sleep(self.backoff * (retry + 1))
        raise ClientError(f"chat endpoint failed after {self.max_retries + 1} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

METHOD_REGISTRY = {
    "xgboost": "gbt",
    "gradient boosting": "gbt",
    "logistic regression": "pfa",
}


def select_method(client, ds_train: Dataset, meta: LessonMeta | None = None) -> str:
    """Ask the client to name a method (stage d) and map it onto the registry.

    Unrecognized answers fall back to "gbt". The chosen model is always fit
    locally; no code from the client is executed.
    """
    batch = encode_records(ds_train, meta)
    script = build_cot_script(batch, meta, stages="bd")
    answer = client.send(script.messages()).lower()
    for phrase, model_name in METHOD_REGISTRY.items():
        if phrase in answer:
            return model_name
    return "gbt"


@dataclass
class PipelineResult:
    """Aligned predictions and diagnostics from repeated pipeline runs."""

    test_keys: list[tuple[str, str, int]]
    run_predictions: list[np.ndarray]
    imputed_per_run: list[int]
    run_rmse: list[float] | None
    decode_diagnostics: list[DecodeResult]
    script_text: str = ""  # audit dump of the prompt script that was sent

    @property
    def repeats(self) -> int:
        return len(self.run_predictions)

    @property
    def mean_predictions(self) -> np.ndarray:
        return np.mean(np.stack(self.run_predictions), axis=0)

    @property
    def coverage(self) -> float:
        total = self.repeats * len(self.test_keys)
        imputed = sum(self.imputed_per_run)
        return 1.0 - imputed / total if total else 1.0

    @property
    def mean_rmse(self) -> float | None:
        if not self.run_rmse:
            return None
        return float(np.mean(self.run_rmse))

    @property
    def std_error(self) -> float | None:
        """Standard error across repeated runs (None with a single run)."""
        if not self.run_rmse:
            return None
        if len(self.run_rmse) < 2:
            return 0.0
        return float(np.std(self.run_rmse, ddof=1) / np.sqrt(len(self.run_rmse)))


def llm_predict_pipeline(
    ds_train: Dataset,
    ds_test: Dataset,
    client,
    repeats: int = 1,
    meta: LessonMeta | None = None,
    stages: str = STAGE_ORDER,
    rows_per_chunk: int = 0,
    concurrency: int = 1,
) -> PipelineResult:
    """Encode both datasets, run the script through the client ``repeats`` times,
    and align the decoded records back onto the test rows.

    Test outcomes are never encoded; when ``ds_test`` carries labels they are
    used only to score each run's RMSE afterwards. Test rows missing from a
    run's decoded output are imputed at 0.5 and counted. ``concurrency`` > 1
    sends repeated runs to the client from that many threads; results stay
    ordered by run index.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    train_records = [r for r in ds_train.records if r.obs is not None]
    test_records = list(ds_test.records)
    masked = [
        InteractionRecord(r.learner_id, r.question_id, r.attempt, None) for r in test_records
    ]
    combined = Dataset.from_records(
        train_records + masked,
        lesson_name=ds_train.meta.lesson_name,
        questions=(meta.questions if meta else None) or ds_train.meta.questions,
    )
    batch = encode_records(combined, meta)
    script = build_cot_script(batch, meta, stages=stages, rows_per_chunk=rows_per_chunk)
    test_keys = batch.test_keys()
    key_pos = {key: i for i, key in enumerate(test_keys)}

    labels = None
    if all(r.obs is not None for r in test_records) and test_records:
        by_key = {r.key(): float(r.obs) for r in test_records}
        labels = np.array([by_key[k] for k in test_keys])

    def one_run(run: int) -> tuple[DecodeResult, np.ndarray, int]:
        try:
            response = client.send(script.messages())
        except ClientError as exc:
            raise ClientError(f"run {run}: {exc}") from exc
        decoded = decode_response(response)
        preds = np.full(len(test_keys), 0.5)
        seen: set[tuple[str, str, int]] = set()
        for record in decoded.predictions:
            pos = key_pos.get(record.key())
            if pos is None or record.key() in seen:
                continue
            seen.add(record.key())
            preds[pos] = record.prediction
        return decoded, preds, len(test_keys) - len(seen)

    if concurrency > 1 and repeats > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(concurrency, repeats)) as pool:
            outcomes = list(pool.map(one_run, range(repeats)))
    else:
        outcomes = [one_run(run) for run in range(repeats)]

    run_predictions: list[np.ndarray] = []
    imputed_per_run: list[int] = []
    run_rmse: list[float] = [] if labels is not None else None
    diagnostics: list[DecodeResult] = []
    for decoded, preds, imputed in outcomes:
        diagnostics.append(decoded)
        run_predictions.append(preds)
        imputed_per_run.append(imputed)
        if labels is not None:
            run_rmse.append(rmse(preds, labels))

    return PipelineResult(
        test_keys=test_keys,
        run_predictions=run_predictions,
        imputed_per_run=imputed_per_run,
        run_rmse=run_rmse,
        decode_diagnostics=diagnostics,
        script_text=script.to_text(),
    )


class LlmPredictor:
    """Predictor adapter so the CV harness can benchmark a client end to end."""

    name = "llm"

    def __init__(self, client, meta: LessonMeta | None = None, stages: str = "bc"):
        self.client = client
        self.meta = meta
        self.stages = stages
        self._train: Dataset | None = None

    def fit(self, train: Dataset) -> "LlmPredictor":
        self._train = train
        return self

    def predict(self, rows: Sequence[tuple[str, str, int]]) -> np.ndarray:
        if self._train is None:
            raise RuntimeError("predict called before fit")
        test = Dataset.from_records(
            [InteractionRecord(lid, qid, attempt, None) for lid, qid, attempt in rows],
            lesson_name=self._train.meta.lesson_name,
            questions=self._train.meta.questions,
        )
        result = llm_predict_pipeline(
            self._train, test, self.client, repeats=1, meta=self.meta, stages=self.stages
        )
        return result.run_predictions[0]
