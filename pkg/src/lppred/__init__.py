"""Learner performance prediction suite.

Knowledge-tracing baselines (BKT, PFA, low-rank matrix completion, tensor
factorization, gradient-boosted trees), an LLM encode/predict/decode
pipeline with an offline mock, and a shared cross-validation benchmark
harness, all driven from a simple interaction-record file format.
"""

__version__ = "0.1.0"
