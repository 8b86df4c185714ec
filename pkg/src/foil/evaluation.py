"""Forecast metrics, environment-recovery scoring and comparison tables."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .envinfer import mean_run_length
from .errors import ConfigError, DataError


def _pair(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise DataError(f"prediction shape {pred.shape} does not match target shape {true.shape}")
    if pred.size == 0:
        raise DataError("no predictions to score")
    return pred, true


def mse(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.mean((pred - true) ** 2))


def mae(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.mean(np.abs(pred - true)))


@dataclass
class EvalReport:
    split: str
    mse: float
    mae: float
    n_samples: int
    per_step_mse: List[float]
    scale: str  # "normalized" or "raw"
    env_accuracy: Optional[float] = None
    mean_run_length: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_forecasts(pred, true, split: str, scale: str = "normalized") -> EvalReport:
    pred, true = _pair(pred, true)
    pred2 = pred.reshape(-1, pred.shape[-1]) if pred.ndim > 1 else pred[None]
    true2 = true.reshape(pred2.shape)
    per_step = np.mean((pred2 - true2) ** 2, axis=0)
    return EvalReport(split, mse(pred, true), mae(pred, true), len(pred2), per_step.tolist(), scale)


def env_recovery_score(assignment, truth) -> float:
    """Best agreement with the true labels over relabelings of the inferred ones."""
    pred = np.asarray(getattr(assignment, "labels", assignment))
    true = np.asarray(getattr(truth, "labels", truth))
    if pred.shape != true.shape:
        raise DataError("assignment and truth differ in length")
    if len(pred) == 0:
        raise DataError("empty assignment")
    pred_alpha, pred_idx = np.unique(pred, return_inverse=True)
    true_alpha, true_idx = np.unique(true, return_inverse=True)
    k = max(len(pred_alpha), len(true_alpha))
    if k > 6:
        raise ConfigError(f"exhaustive permutation search is limited to 6 labels, got {k}")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (pred_idx, true_idx), 1)
    best = max(confusion[np.arange(k), list(p)].sum() for p in itertools.permutations(range(k)))
    return float(best) / len(pred)


def attach_env_stats(report: EvalReport, assignment, truth) -> EvalReport:
    report.env_accuracy = env_recovery_score(assignment, truth)
    report.mean_run_length = mean_run_length(getattr(assignment, "labels", assignment))
    return report


def percent_improvement(baseline: float, method: float) -> float:
    if baseline == 0:
        raise DataError("baseline metric is zero; improvement undefined")
    return (baseline - method) / baseline * 100.0


def improvement_table(
    runs: Mapping[str, Mapping[str, Mapping[str, float]]],
    baseline: str,
    metrics: Sequence[str] = ("mse", "mae"),
) -> Dict[str, Dict[str, float]]:
    """Average percentage improvement over ``baseline`` across horizon settings.

    ``runs[method][setting][metric]`` holds a metric for one horizon (or any
    other shared setting). Returns ``{method: {metric: IMP}}``.
    """
    if baseline not in runs or len(runs) < 2:
        raise ConfigError("need the baseline and at least one other run")
    base = runs[baseline]
    out: Dict[str, Dict[str, float]] = {}
    for name, by_setting in runs.items():
        if name == baseline:
            continue
        if set(by_setting) != set(base):
            raise ConfigError(f"run {name!r} does not share settings with the baseline")
        out[name] = {
            m: float(np.mean([percent_improvement(base[s][m], by_setting[s][m]) for s in base])) for m in metrics
        }
    return out


def format_table(rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> str:
    """Aligned plain-text table."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    cells = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
