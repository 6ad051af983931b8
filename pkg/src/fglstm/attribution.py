"""Path-integrated gradient attribution for grouped time-series inputs.

The baseline is a virtual patient with the same measurement pattern (same
windows, same indicators, same time deltas) whose every value sits at the
population median; standardization maps that median to zero, so the baseline
is simply the sequence with all values zeroed.  The path scales only the
standardized values, holding indicators and deltas fixed, and gradients are
averaged at the right-endpoint points 1/n, 2/n, ..., 1 of that path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .cells import Model, forward_batch, make_batch, predict_proba
from .errors import ConfigError, DataError, DimensionError, UntrainedModelError
from .preprocess import GroupedSequence
from .training import backward


@dataclass
class AttributionMap:
    """(T, p) signed attributions in risk-probability units, plus the
    endpoint predictions they decompose."""

    values: np.ndarray  # (T, p)
    prediction: float
    baseline_prediction: float
    s: np.ndarray  # (T,) window times of the attributed sequence

    @property
    def total(self) -> float:
        return float(self.values.sum())


def _prob_and_dprob(logits: np.ndarray, activation: str, target_class: int | None):
    """Predicted probability and its gradient w.r.t. the logits, per row."""
    proba = predict_proba(logits, activation)
    if activation == "sigmoid":
        p = proba[:, 0]
        d = np.zeros_like(logits)
        d[:, 0] = p * (1.0 - p)
        return p, d
    if activation == "multi_sigmoid":
        if target_class is None:
            raise ConfigError("multi-output head needs a target class for attribution")
        p = proba[:, target_class]
        d = np.zeros_like(logits)
        d[:, target_class] = p * (1.0 - p)
        return p, d
    if activation == "softmax":
        if target_class is None:
            raise ConfigError("softmax head needs a target class for attribution")
        p = proba[:, target_class]
        d = proba * (-p[:, None])
        d[:, target_class] += p
        return p, d
    raise ConfigError(f"unknown activation {activation!r}")


def integrated_gradients(model: Model, seq: GroupedSequence, steps: int = 50,
                         target_class: int | None = None) -> AttributionMap:
    """Per-feature per-window attribution of the predicted probability.

    attribution[t, j] = (u[t, j] / steps) * sum over the path points of the
    probability gradient w.r.t. u[t, j].  All path points are evaluated as one
    batch; the gradients reuse the exact training-time backward pass.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if not model.trained:
        raise UntrainedModelError("attribution requires a trained model")
    if model.kind == "percentile":
        raise ConfigError("attribution over values is undefined for bucket-embedding inputs")
    p = seq.n_features
    alphas = np.arange(1, steps + 1) / steps
    scaled = [replace(seq, u=seq.u * a, label=None) for a in alphas]
    baseline = replace(seq, u=np.zeros_like(seq.u), label=None)

    batch = make_batch(model, scaled + [baseline])
    logits, cache = forward_batch(model, batch)
    prob, dprob = _prob_and_dprob(logits, model.head.activation, target_class)
    _, dx = backward(model, cache, dprob)
    # dx row r holds the probability gradient evaluated at path point r (the
    # last row is the baseline); the value block is the first p input columns.
    grad_sum = dx[: seq.T, :steps, :p].sum(axis=1)
    values = seq.u * grad_sum / steps
    return AttributionMap(
        values=values,
        prediction=float(prob[steps - 1]),
        baseline_prediction=float(prob[steps]),
        s=seq.s.copy(),
    )


@dataclass
class FeatureDivergence:
    feature: int
    total: float
    per_time: np.ndarray  # (T,) absolute attribution differences


def top_divergent_features(map_a: AttributionMap, map_b: AttributionMap, k: int):
    """Features ranked by total absolute attribution difference, descending;
    ties keep index order."""
    if map_a.values.shape != map_b.values.shape or not np.array_equal(map_a.s, map_b.s):
        raise DimensionError("attribution maps cover different grids")
    diff = np.abs(map_a.values - map_b.values)
    totals = diff.sum(axis=0)
    order = np.argsort(-totals, kind="stable")[: max(k, 0)]
    return [FeatureDivergence(feature=int(j), total=float(totals[j]), per_time=diff[:, j]) for j in order]


def export_attributions(map_: AttributionMap, seq: GroupedSequence, path,
                        feature_names=None) -> None:
    """Attribution CSV: one row per (window, feature) with the raw signed
    attribution; log-scaling for display is left to downstream plotting."""
    if map_.values.size and map_.values.shape != seq.u.shape:
        raise DimensionError("attribution map does not match the sequence")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "window_time", "value", "attribution", "sign"])
        T, p = map_.values.shape if map_.values.size else (0, 0)
        for t in range(T):
            for j in range(p):
                a = map_.values[t, j]
                name = feature_names[j] if feature_names is not None else j
                writer.writerow([name, f"{map_.s[t]:.17g}", f"{seq.u[t, j]:.17g}",
                                 f"{a:.17g}", int(np.sign(a))])


def read_attributions(path):
    """Parse an attribution CSV back into (features, times, values, attributions)."""
    feats, times, vals, attrs = [], [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            feats.append(row["feature"])
            times.append(float(row["window_time"]))
            vals.append(float(row["value"]))
            attrs.append(float(row["attribution"]))
    return feats, np.array(times), np.array(vals), np.array(attrs)


def export_divergence_report(map_a: AttributionMap, map_b: AttributionMap, path,
                             feature_names=None) -> None:
    """Comparison CSV for two models on the same patient: per-feature
    aggregate attribution divergence, largest first."""
    ranked = top_divergent_features(map_a, map_b, k=map_a.values.shape[1])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "total_divergence", "total_attribution_a", "total_attribution_b"])
        for fd in ranked:
            name = feature_names[fd.feature] if feature_names is not None else fd.feature
            writer.writerow([
                name, f"{fd.total:.17g}",
                f"{map_a.values[:, fd.feature].sum():.17g}",
                f"{map_b.values[:, fd.feature].sum():.17g}",
            ])
