"""Hyperparameter search for the boosted-tree model.

Two strategies: exhaustive grid search over a Cartesian product of candidate
values (the default grid enumerates exactly 1,296 combinations), and an
LLM-driven loop that asks a chat client to propose the next configuration
given the history of (configuration, RMSE) pairs. Both evaluate candidates
with the shared cross-validation harness on identical folds, so results are
comparable and deterministic given the seed.
"""

from __future__ import annotations

import itertools
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .gbt import GbtConfig, GbtModel
from .llm import split_pairs, strip_quotes
from .metrics import cross_validate
from .seeds import derive_seed

GRID_FIELDS = (
    "n_trees",
    "learning_rate",
    "max_depth",
    "subsample",
    "colsample_bytree",
    "gamma",
    "min_child_weight",
)


@dataclass(frozen=True)
class Grid:
    """Candidate lists for the seven boosting hyperparameters."""

    n_trees: tuple[int, ...] = (50, 100, 200)
    learning_rate: tuple[float, ...] = (0.05, 0.1, 0.2, 0.3)
    max_depth: tuple[int, ...] = (2, 4, 6)
    subsample: tuple[float, ...] = (0.6, 0.8, 1.0)
    colsample_bytree: tuple[float, ...] = (0.8, 1.0)
    gamma: tuple[float, ...] = (0.0, 1.0)
    min_child_weight: tuple[float, ...] = (1.0, 3.0, 5.0)

    @property
    def size(self) -> int:
        n = 1
        for name in GRID_FIELDS:
            n *= len(getattr(self, name))
        return n

    def combinations(self) -> list[GbtConfig]:
        """All configurations in deterministic enumeration order."""
        axes = [getattr(self, name) for name in GRID_FIELDS]
        return [
            GbtConfig(**dict(zip(GRID_FIELDS, values)))
            for values in itertools.product(*axes)
        ]

    @classmethod
    def from_json(cls, payload: str) -> "Grid":
        data = json.loads(payload)
        kwargs = {name: tuple(data[name]) for name in GRID_FIELDS if name in data}
        return cls(**kwargs)


def default_grid() -> Grid:
    """The stock sweep: 3*4*3*3*2*2*3 = 1,296 combinations."""
    return Grid()


@dataclass(frozen=True)
class TuneEntry:
    config: GbtConfig
    mean_rmse: float


@dataclass
class TuneReport:
    """Per-configuration scores plus five-number summary over configurations.

    ``aggregation`` names the unit the summary runs over: "configuration"
    for a grid sweep or LLM session, "session" for cross-session summaries.
    """

    method: str
    entries: list[TuneEntry]
    failures: list[tuple[int, str]] = field(default_factory=list)  # (index, message)
    aggregation: str = "configuration"

    def __post_init__(self):
        if not self.entries:
            raise ValueError("TuneReport requires at least one successful evaluation")

    @property
    def best(self) -> TuneEntry:
        return min(self.entries, key=lambda e: e.mean_rmse)

    def summary(self) -> dict[str, float]:
        values = np.array([e.mean_rmse for e in self.entries])
        return {
            "mean": float(values.mean()),
            "median": float(np.median(values)),
            "std": float(values.std(ddof=0)),
            "min": float(values.min()),
            "max": float(values.max()),
        }

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "aggregation": self.aggregation,
            "n_evaluated": len(self.entries),
            "n_failures": len(self.failures),
            "summary": self.summary(),
            "best": {"config": self.best.config.to_dict(), "mean_rmse": self.best.mean_rmse},
            "entries": [
                {"config": e.config.to_dict(), "mean_rmse": e.mean_rmse} for e in self.entries
            ],
            "failures": [{"index": i, "error": msg} for i, msg in self.failures],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def summary_text(self) -> str:
        return format_summary_rows([(self.method, self.summary())])


def format_summary_rows(rows: Sequence[tuple[str, dict[str, float]]]) -> str:
    """Five-column summary block: Mean Median Std. Min. Max."""
    header = f"{'Method':<28}{'Mean':>8}{'Median':>8}{'Std.':>8}{'Min.':>8}{'Max.':>8}"
    lines = [header, "-" * len(header)]
    for name, s in rows:
        lines.append(
            f"{name:<28}{s['mean']:>8.3f}{s['median']:>8.3f}{s['std']:>8.3f}"
            f"{s['min']:>8.3f}{s['max']:>8.3f}"
        )
    return "\n".join(lines)


def _evaluate_config(args) -> tuple[int, float | None, str]:
    index, ds, config, k, seed = args
    try:
        report = cross_validate(
            lambda fold_seed: GbtModel(config, seed=fold_seed),
            ds,
            k=k,
            seed=seed,
            model_name="gbt",
        )
        return index, report.mean_rmse, ""
    except Exception as exc:  # noqa: BLE001 - recorded per configuration
        return index, None, str(exc)


def grid_search(
    ds: Dataset,
    grid: Grid | None = None,
    k: int = 5,
    seed: int = 0,
    workers: int = 1,
) -> TuneReport:
    """Cross-validate every grid combination; deterministic given the seed.

    All configurations share the same folds and fold seeds, so their mean
    RMSEs are directly comparable and the best entry reproduces exactly when
    refit standalone. Failures are recorded and excluded from the summary.
    """
    grid = grid or default_grid()
    configs = grid.combinations()
    if not configs:
        raise ValueError("empty grid")
    jobs = [(i, ds, config, k, seed) for i, config in enumerate(configs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_config, jobs, chunksize=8))
    else:
        results = [_evaluate_config(job) for job in jobs]

    entries = []
    failures = []
    for index, mean_rmse, error in results:  # already in enumeration order
        if mean_rmse is None:
            failures.append((index, error))
        else:
            entries.append(TuneEntry(configs[index], mean_rmse))
    return TuneReport(method="grid", entries=entries, failures=failures)


# ---------------------------------------------------------------------------
# LLM-driven tuning
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {re.sub(r"[^a-z]", "", name): name for name in GRID_FIELDS}
_BRACED = re.compile(r"\{[^{}]*\}")


def parse_config_proposal(text: str) -> GbtConfig | None:
    """Extract a full seven-field configuration from a braced block, if any."""
    for match in _BRACED.finditer(text):
        fields: dict[str, float] = {}
        for pair in split_pairs(match.group(0)[1:-1]):
            if ":" not in pair:
                continue
            raw_key, raw_val = pair.split(":", 1)
            key = _CONFIG_KEYS.get(re.sub(r"[^a-z]", "", strip_quotes(raw_key).lower()))
            if key is None:
                continue
            try:
                fields[key] = float(strip_quotes(raw_val))
            except ValueError:
                break
        if set(fields) == set(GRID_FIELDS):
            try:
                return GbtConfig(
                    n_trees=int(fields["n_trees"]),
                    learning_rate=fields["learning_rate"],
                    max_depth=int(fields["max_depth"]),
                    subsample=fields["subsample"],
                    colsample_bytree=fields["colsample_bytree"],
                    gamma=fields["gamma"],
                    min_child_weight=fields["min_child_weight"],
                )
            except ValueError:
                continue
    return None


def _proposal_prompt(history: list[tuple[GbtConfig, float]]) -> list[dict[str, str]]:
    lines = [
        "We are tuning a gradient-boosted tree model for learner performance "
        "prediction. Propose the next hyperparameter configuration to try, as one "
        "braced dict with keys n_trees, learning_rate, max_depth, subsample, "
        "colsample_bytree, gamma, min_child_weight.",
    ]
    if history:
        lines.append("Configurations evaluated so far (config -> CV RMSE):")
        for config, score in history:
            lines.append(f"{json.dumps(config.to_dict())} -> {score:.4f}")
    return [{"role": "user", "content": "\n".join(lines)}]


class CyclingProposalClient:
    """Offline tuning client: proposes configurations from a fixed list, cycling.

    Keeps the message lists it received so tests can assert the history
    protocol grows one pair per iteration.
    """

    name = "cycling-mock"

    def __init__(self, configs: Sequence[GbtConfig] | None = None):
        if configs is None:
            configs = [
                GbtConfig(n_trees=50, learning_rate=0.1, max_depth=2),
                GbtConfig(n_trees=100, learning_rate=0.1, max_depth=4),
                GbtConfig(n_trees=200, learning_rate=0.05, max_depth=6),
                GbtConfig(n_trees=100, learning_rate=0.3, max_depth=2, subsample=0.8),
                GbtConfig(n_trees=50, learning_rate=0.2, max_depth=4, min_child_weight=3.0),
            ]
        self.configs = list(configs)
        self.calls: list[list[dict[str, str]]] = []

    def send(self, messages: Sequence[dict[str, str]]) -> str:
        self.calls.append(list(messages))
        config = self.configs[(len(self.calls) - 1) % len(self.configs)]
        payload = ", ".join(f"'{k}': {v}" for k, v in config.to_dict().items())
        return f"Try this configuration next: {{{payload}}}"


def llm_tuning_loop(
    ds: Dataset,
    client,
    budget: int,
    k: int = 5,
    seed: int = 0,
    grid: Grid | None = None,
) -> TuneReport:
    """Client-proposed tuning: ask, parse, evaluate locally, repeat to budget.

    An unparsable proposal triggers one clarifying re-prompt; if that also
    fails to parse, a random point from the (default) grid is evaluated
    instead and the event is recorded under failures.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    grid = grid or default_grid()
    fallback_configs = grid.combinations()
    history: list[tuple[GbtConfig, float]] = []
    entries: list[TuneEntry] = []
    failures: list[tuple[int, str]] = []
    for i in range(budget):
        response = client.send(_proposal_prompt(history))
        config = parse_config_proposal(response)
        if config is None:
            retry = client.send(
                _proposal_prompt(history)
                + [
                    {
                        "role": "user",
                        "content": "That was not parsable. Reply with only the braced "
                        "configuration dict.",
                    }
                ]
            )
            config = parse_config_proposal(retry)
        if config is None:
            rng = np.random.default_rng(derive_seed(seed, "llm-tune-fallback", i))
            config = fallback_configs[int(rng.integers(len(fallback_configs)))]
            failures.append((i, "unparsable proposal, random grid point used"))
        _, mean_rmse, error = _evaluate_config((i, ds, config, k, seed))
        if mean_rmse is None:
            failures.append((i, error))
            continue
        history.append((config, mean_rmse))
        entries.append(TuneEntry(config, mean_rmse))
    return TuneReport(method="llm", entries=entries, failures=failures)


def summarize_tuning(session_minima: Sequence[float]) -> dict[str, float]:
    """Five-number summary over per-session best RMSEs."""
    if not session_minima:
        raise ValueError("no sessions to summarize")
    values = np.array(session_minima, dtype=float)
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "std": float(values.std(ddof=0)),
        "min": float(values.min()),
        "max": float(values.max()),
    }
