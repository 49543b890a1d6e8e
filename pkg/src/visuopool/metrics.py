"""Attention-based robustness predictors and their correlation with OOD success."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .pooling import AttentionRecord
from .tape import ContractError, DimensionError


class UndefinedCorrelationError(ValueError):
    """One of the inputs has zero variance."""


def attention_mass(record: AttentionRecord, mask) -> float:
    """Mean over heads of the attention weight that lands inside ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != record.grid_shape:
        raise DimensionError(f"mask shape {mask.shape} != record grid {record.grid_shape}")
    return float(record.weights[:, mask.reshape(-1)].sum(axis=1).mean())


def attention_entropy(record: AttentionRecord) -> float:
    """Mean over heads of the Shannon entropy in nats, with 0 ln 0 = 0."""
    w = record.weights
    terms = np.where(w > 0, -w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    return float(terms.sum(axis=1).mean())


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson needs equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise ContractError("pearson needs at least 3 samples")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(dx @ dx), math.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class PredictorSample:
    """One (trained policy, OOD condition) point; ``run`` names both, e.g. ``afa-s3/texture``."""

    run: str
    kind: str
    mass: float
    entropy: float
    ood_success: float


def predictor_report(samples: list[PredictorSample]) -> dict:
    """Correlations of mass and entropy with OOD success, plus the scatter data."""
    if len(samples) < 3:
        raise ContractError(f"need at least 3 predictor samples, got {len(samples)}")
    if len({s.kind for s in samples}) < 2:
        raise ContractError("predictor samples must span at least 2 pooling kinds")
    mass = [s.mass for s in samples]
    ent = [s.entropy for s in samples]
    succ = [s.ood_success for s in samples]
    return {
        "n_samples": len(samples),
        "kinds": sorted({s.kind for s in samples}),
        "rho_mass": pearson(mass, succ),
        "rho_entropy": pearson(ent, succ),
        "samples": [asdict(s) for s in samples],
    }


def report_from_json(text: str) -> dict:
    return json.loads(text)


def scatter_csv(samples: list[PredictorSample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "kind", "mass", "entropy", "ood_success"])
    for s in samples:
        writer.writerow([s.run, s.kind, repr(s.mass), repr(s.entropy), repr(s.ood_success)])
    return buf.getvalue()
