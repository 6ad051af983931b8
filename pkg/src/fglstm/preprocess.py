"""Turn raw observation events into model-ready grouped sequences.

Pipeline: 20-minute windowing with averaging of duplicates and skipping of
empty windows, training-split standardization (median to 0, one standard
deviation to 1, clipped at 10 SD), imputation (linear interpolation in time or
median fill), binary presence indicators, accumulated time-since-observation
deltas, and optional percentile bucketing for embedding models.

Missing entries are carried as NaN in ``u`` until an imputation step replaces
them; the indicator matrix ``v`` records which entries were actually observed
and is never modified by imputation.

Window times ``s`` are expressed in horizon units (fraction of the 48-hour
observation window) and rebased so the first retained step is 0.  Time deltas
``w`` inherit that normalization, so both live in [0, 1].
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .containers import load_container, save_container
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    EmptySequenceError,
    OrderingError,
    StatsError,
)

WINDOW_SECONDS = 20.0 * 60.0
HORIZON_SECONDS = 48.0 * 3600.0

DATASET_FORMAT = "fglstm-dataset"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# Raw events
# ---------------------------------------------------------------------------

@dataclass
class EventStream:
    """Columnar (entity, time, feature, value) observations before windowing."""

    entity_id: np.ndarray  # object array of strings
    time_seconds: np.ndarray  # float64
    feature: np.ndarray  # int64, in [0, n_features)
    value: np.ndarray  # float64, native units
    n_features: int

    def __len__(self) -> int:
        return len(self.time_seconds)

    def validate(self) -> None:
        n = len(self.time_seconds)
        if not (len(self.entity_id) == len(self.feature) == len(self.value) == n):
            raise DimensionError("event stream columns have unequal lengths")
        if n and np.min(self.time_seconds) < 0:
            raise DataError("event times must be >= 0 seconds")
        if n and (np.min(self.feature) < 0 or np.max(self.feature) >= self.n_features):
            raise DataError(f"feature indices must lie in [0, {self.n_features})")

    @classmethod
    def from_records(cls, records, n_features: int) -> "EventStream":
        ents, times, feats, vals = [], [], [], []
        for ent, t, f, v in records:
            ents.append(str(ent))
            times.append(float(t))
            feats.append(int(f))
            vals.append(float(v))
        ev = cls(
            entity_id=np.array(ents, dtype=object),
            time_seconds=np.array(times, dtype=np.float64),
            feature=np.array(feats, dtype=np.int64),
            value=np.array(vals, dtype=np.float64),
            n_features=n_features,
        )
        ev.validate()
        return ev


def load_feature_dict(path) -> dict[str, int]:
    """Feature-dictionary file: JSON object mapping feature names to indices."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    mapping = {str(k): int(v) for k, v in raw.items()}
    indices = sorted(mapping.values())
    if indices != list(range(len(indices))):
        raise DataError(f"{path}: feature indices must be exactly 0..{len(indices) - 1}")
    return mapping


def save_feature_dict(path, names) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({name: i for i, name in enumerate(names)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_events_csv(path, feature_dict: dict[str, int] | None = None, n_features: int | None = None) -> EventStream:
    """Event CSV with columns entity_id,time_seconds,feature,value.

    The feature column holds names resolved through ``feature_dict``, or bare
    integer indices when no dictionary is given.
    """
    ents, times, feats, vals = [], [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"entity_id", "time_seconds", "feature", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(required)}")
        for row in reader:
            ents.append(row["entity_id"])
            times.append(float(row["time_seconds"]))
            if feature_dict is not None:
                try:
                    feats.append(feature_dict[row["feature"]])
                except KeyError:
                    raise DataError(f"{path}: unknown feature name {row['feature']!r}") from None
            else:
                feats.append(int(row["feature"]))
            vals.append(float(row["value"]))
    if n_features is None:
        n_features = len(feature_dict) if feature_dict is not None else (max(feats) + 1 if feats else 0)
    ev = EventStream(
        entity_id=np.array(ents, dtype=object),
        time_seconds=np.array(times, dtype=np.float64),
        feature=np.array(feats, dtype=np.int64),
        value=np.array(vals, dtype=np.float64),
        n_features=int(n_features),
    )
    ev.validate()
    return ev


def write_events_csv(path, events: EventStream, feature_names=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entity_id", "time_seconds", "feature", "value"])
        for ent, t, f, v in zip(events.entity_id, events.time_seconds, events.feature, events.value):
            name = feature_names[f] if feature_names is not None else int(f)
            writer.writerow([ent, f"{t:.17g}", name, f"{v:.17g}"])


def read_events_jsonl(path, feature_dict: dict[str, int] | None = None, n_features: int | None = None) -> EventStream:
    """JSON-lines alternative to the event CSV; same fields per record."""
    ents, times, feats, vals = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            ents.append(str(rec["entity_id"]))
            times.append(float(rec["time_seconds"]))
            f = rec["feature"]
            if feature_dict is not None and not isinstance(f, int):
                f = feature_dict[str(f)]
            feats.append(int(f))
            vals.append(float(rec["value"]))
    if n_features is None:
        n_features = len(feature_dict) if feature_dict is not None else (max(feats) + 1 if feats else 0)
    ev = EventStream(
        entity_id=np.array(ents, dtype=object),
        time_seconds=np.array(times, dtype=np.float64),
        feature=np.array(feats, dtype=np.int64),
        value=np.array(vals, dtype=np.float64),
        n_features=int(n_features),
    )
    ev.validate()
    return ev


def read_labels_csv(path, task: str | None = None) -> dict[str, float]:
    """Labels CSV with columns entity_id,task,label; filtered to one task."""
    labels: dict[str, float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"entity_id", "task", "label"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(required)}")
        for row in reader:
            if task is not None and row["task"] != task:
                continue
            labels[row["entity_id"]] = float(row["label"])
    if not labels:
        raise DataError(f"{path}: no labels found" + (f" for task {task!r}" if task else ""))
    return labels


def write_labels_csv(path, labels: dict[str, float], task: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entity_id", "task", "label"])
        for ent in labels:
            writer.writerow([ent, task, f"{labels[ent]:.17g}"])


# ---------------------------------------------------------------------------
# Grouped sequences
# ---------------------------------------------------------------------------

@dataclass
class GroupedSequence:
    """Per-entity windowed time series: values, presence indicators, deltas.

    ``u`` holds NaN wherever ``v`` is 0 until an imputation step fills it.
    ``s`` is in horizon units with s[0] == 0; ``w`` (if computed) shares that
    scale.  ``buckets`` (if computed) holds percentile bucket indices with the
    sentinel value ``n_buckets`` marking missing entries.
    """

    entity_id: str
    s: np.ndarray  # (T,) window times, horizon units, s[0] = 0
    window_index: np.ndarray  # (T,) absolute 20-minute window ids
    u: np.ndarray  # (T, p)
    v: np.ndarray  # (T, p) in {0, 1}
    w: np.ndarray | None = None  # (T, p)
    buckets: np.ndarray | None = None  # (T, p) int
    label: float | np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.u.shape[0]

    @property
    def n_features(self) -> int:
        return self.u.shape[1]

    def validate(self) -> None:
        T, p = self.u.shape
        if T < 1:
            raise EmptySequenceError(f"{self.entity_id}: sequence has no timesteps")
        if self.v.shape != (T, p) or self.s.shape != (T,):
            raise DimensionError(f"{self.entity_id}: component shapes disagree")
        if not np.isin(self.v, (0.0, 1.0)).all():
            raise DataError(f"{self.entity_id}: indicators must be 0 or 1")
        if not (self.v.sum(axis=1) >= 1).all():
            raise DataError(f"{self.entity_id}: every timestep must have an observed feature")
        if self.s[0] != 0.0:
            raise DataError(f"{self.entity_id}: window times must be rebased to start at 0")
        if T > 1 and not (np.diff(self.s) > 0).all():
            raise OrderingError(f"{self.entity_id}: window times must be strictly increasing")
        if self.w is not None:
            if self.w.shape != (T, p):
                raise DimensionError(f"{self.entity_id}: delta shape disagrees")
            if (self.w < 0).any() or (self.w[0] != 0).any():
                raise DataError(f"{self.entity_id}: deltas must be >= 0 and 0 at the first step")


def window_entity(entity_id: str, times: np.ndarray, feats: np.ndarray, vals: np.ndarray,
                  n_features: int, window: float = WINDOW_SECONDS, horizon: float = HORIZON_SECONDS) -> GroupedSequence:
    """Window one entity's events; one step per non-empty window, duplicates averaged.

    Windows are aligned to admission time: window i covers [i*window,
    (i+1)*window) seconds.  Events at or past the horizon are dropped.  Window
    times are converted to horizon units and rebased so the first step is 0.
    """
    keep = (times >= 0) & (times < horizon)
    times, feats, vals = times[keep], feats[keep], vals[keep]
    if len(times) == 0:
        raise EmptySequenceError(f"{entity_id}: no events inside the horizon")
    wid = np.floor(times / window).astype(np.int64)
    uniq, inv = np.unique(wid, return_inverse=True)
    T = len(uniq)
    sums = np.zeros((T, n_features))
    counts = np.zeros((T, n_features))
    np.add.at(sums, (inv, feats), vals)
    np.add.at(counts, (inv, feats), 1.0)
    with np.errstate(invalid="ignore"):
        u = sums / counts  # NaN where count == 0
    v = (counts > 0).astype(np.float64)
    s = (uniq - uniq[0]) * (window / horizon)
    return GroupedSequence(entity_id=entity_id, s=s, window_index=uniq, u=u, v=v)


def window_events(events: EventStream, window: float = WINDOW_SECONDS,
                  horizon: float = HORIZON_SECONDS) -> list[GroupedSequence]:
    """Window a whole cohort, one GroupedSequence per entity (sorted by id)."""
    events.validate()
    order = np.argsort(events.entity_id, kind="stable")
    ent_sorted = events.entity_id[order]
    bounds = np.flatnonzero(np.r_[True, ent_sorted[1:] != ent_sorted[:-1], True])
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        out.append(
            window_entity(str(ent_sorted[a]), events.time_seconds[idx], events.feature[idx],
                          events.value[idx], events.n_features, window, horizon)
        )
    return out


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass
class StandardizationStats:
    """Per-feature median and standard deviation from the training split only."""

    median: np.ndarray  # (p,)
    std: np.ndarray  # (p,)
    clip_limit: float = 10.0

    def validate(self) -> None:
        if (self.std <= 0).any() or not np.isfinite(self.std).all():
            raise StatsError("standardization std must be positive and finite")


def compute_standardization_stats(train_sequences, clip_limit: float = 10.0) -> StandardizationStats:
    """Median/std of the observed windowed values per feature.

    The standard deviation is the population deviation about the mean; pairing
    it with a median center reproduces the documented transform.  Features with
    no training observations or zero variance are rejected here, before they
    can poison downstream arithmetic.
    """
    if not train_sequences:
        raise StatsError("no training sequences to compute statistics from")
    p = train_sequences[0].n_features
    values = [[] for _ in range(p)]
    for seq in train_sequences:
        obs = seq.v > 0
        for j in range(p):
            col = seq.u[obs[:, j], j]
            if len(col):
                values[j].append(col)
    median = np.zeros(p)
    std = np.zeros(p)
    bad = []
    for j in range(p):
        if not values[j]:
            bad.append((j, "never observed in training"))
            continue
        col = np.concatenate(values[j])
        median[j] = np.median(col)
        std[j] = np.std(col)
        if std[j] <= 0:
            bad.append((j, "zero variance in training"))
    if bad:
        detail = "; ".join(f"feature {j}: {why}" for j, why in bad)
        raise StatsError(f"cannot standardize: {detail}")
    return StandardizationStats(median=median, std=std, clip_limit=clip_limit)


def standardize(seq: GroupedSequence, stats: StandardizationStats) -> GroupedSequence:
    """Center on the training median, scale by std, clip at +-clip_limit SD."""
    stats.validate()
    u = (seq.u - stats.median) / stats.std
    u = np.clip(u, -stats.clip_limit, stats.clip_limit)
    return replace(seq, u=u)


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------

def interpolate_missing(seq: GroupedSequence) -> GroupedSequence:
    """Linear interpolation in time, carry-forward after the last observation,
    carry-backward before the first, zero for never-observed features.

    Exact on observed points; indicators are left untouched.
    """
    u = seq.u.copy()
    for j in range(seq.n_features):
        obs = seq.v[:, j] > 0
        if not obs.any():
            u[:, j] = 0.0
            continue
        if obs.all():
            continue
        # np.interp clamps to the boundary values, which is exactly the
        # carry-forward / carry-backward rule.
        u[~obs, j] = np.interp(seq.s[~obs], seq.s[obs], seq.u[obs, j])
    return replace(seq, u=u)


def median_fill(seq: GroupedSequence) -> GroupedSequence:
    """Missing standardized values become 0, the training median."""
    u = seq.u.copy()
    u[seq.v == 0] = 0.0
    return replace(seq, u=u)


# ---------------------------------------------------------------------------
# Time deltas
# ---------------------------------------------------------------------------

def compute_time_deltas(seq: GroupedSequence) -> GroupedSequence:
    """Accumulated time since each feature was last observed.

    First step is 0 for every feature.  Later steps add the gap to the
    previous step's delta while the feature stayed unobserved and reset to the
    single gap once it was observed at the previous step; this closed form
    (current time minus time of the last strictly-earlier observation, or the
    sequence start when there is none) telescopes that recurrence exactly.
    Deltas inherit the horizon normalization of ``s``.
    """
    T, p = seq.u.shape
    if T > 1 and not (np.diff(seq.s) > 0).all():
        raise OrderingError(f"{seq.entity_id}: window times must be strictly increasing")
    obs_time = np.where(seq.v > 0, seq.s[:, None], -np.inf)
    last = np.maximum.accumulate(obs_time, axis=0)
    w = np.zeros((T, p))
    if T > 1:
        prev = last[:-1]
        w[1:] = seq.s[1:, None] - np.where(np.isfinite(prev), prev, 0.0)
    return replace(seq, w=w)


# ---------------------------------------------------------------------------
# Percentile buckets
# ---------------------------------------------------------------------------

@dataclass
class BucketSpec:
    """Per-feature percentile boundaries; ties go to the higher bucket."""

    boundaries: np.ndarray  # (p, n_buckets - 1), nondecreasing per row
    n_buckets: int

    @property
    def sentinel(self) -> int:
        """Bucket index reserved for missing values."""
        return self.n_buckets


def compute_bucket_boundaries(train_sequences, n_buckets: int) -> BucketSpec:
    """Percentile boundaries from training observed values; missing ignored."""
    if n_buckets < 2:
        raise ConfigError(f"n_buckets must be >= 2, got {n_buckets}")
    if not train_sequences:
        raise StatsError("no training sequences to compute bucket boundaries from")
    p = train_sequences[0].n_features
    qs = np.arange(1, n_buckets) / n_buckets
    boundaries = np.zeros((p, n_buckets - 1))
    for j in range(p):
        cols = [seq.u[seq.v[:, j] > 0, j] for seq in train_sequences]
        col = np.concatenate([c for c in cols if len(c)]) if any(len(c) for c in cols) else None
        if col is None or len(col) == 0:
            raise StatsError(f"feature {j}: never observed in training, cannot bucket")
        boundaries[j] = np.quantile(col, qs)
    return BucketSpec(boundaries=boundaries, n_buckets=n_buckets)


def percentile_bucketize(seq: GroupedSequence, spec: BucketSpec) -> GroupedSequence:
    """Map observed values to buckets 0..n_buckets-1; missing to the sentinel.

    Intervals are right-closed: a value equal to a boundary lands in the
    higher bucket.
    """
    T, p = seq.u.shape
    buckets = np.full((T, p), spec.sentinel, dtype=np.int64)
    for j in range(p):
        obs = seq.v[:, j] > 0
        if obs.any():
            buckets[obs, j] = np.searchsorted(spec.boundaries[j], seq.u[obs, j], side="right")
    return replace(seq, buckets=buckets)


# ---------------------------------------------------------------------------
# Model-input assembly
# ---------------------------------------------------------------------------

def assemble_feature_groups(seq: GroupedSequence, use_time_deltas: bool,
                            use_indicators: bool = True) -> np.ndarray:
    """Concatenate the per-feature components into the model input matrix.

    Blocks are laid out as (u_1..u_p, v_1..v_p[, w_1..w_p]), so component j of
    feature k sits at column j*p + k and all components of feature k share the
    residue k mod p -- the layout the group masks isolate.
    """
    if np.isnan(seq.u).any():
        raise DataError(f"{seq.entity_id}: values must be imputed before assembly")
    blocks = [seq.u]
    if use_indicators:
        blocks.append(seq.v)
    if use_time_deltas:
        if seq.w is None:
            raise DataError(f"{seq.entity_id}: time deltas requested but not computed")
        blocks.append(seq.w)
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# Cohort split
# ---------------------------------------------------------------------------

def split_by_entity(entities, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic entity-level partition into (train, validation, test).

    Assignment depends only on (entity id, seed): each id hashes to a point in
    [0, 1) that is compared against the cumulative fractions, so every
    sequence of an entity lands in the same split and growing the cohort never
    moves existing entities.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    seen = set()
    unique = []
    for ent in entities:
        if ent not in seen:
            seen.add(ent)
            unique.append(ent)
    if not unique:
        raise DataError("cannot split an empty cohort")
    train, valid, test = [], [], []
    c0, c1 = fractions[0], fractions[0] + fractions[1]
    for ent in unique:
        digest = hashlib.sha256(f"{seed}|{ent}".encode("utf-8")).digest()
        point = int.from_bytes(digest[:8], "little") / 2.0**64
        if point < c0:
            train.append(ent)
        elif point < c1:
            valid.append(ent)
        else:
            test.append(ent)
    return train, valid, test


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------

def save_dataset(path, sequences, stats: StandardizationStats | None = None,
                 meta: dict | None = None) -> None:
    """Persist sequences (and the stats that produced them) in one container."""
    arrays = {}
    lengths = np.array([seq.T for seq in sequences], dtype=np.int64)
    arrays["lengths"] = lengths
    arrays["s"] = np.concatenate([seq.s for seq in sequences]) if sequences else np.zeros(0)
    arrays["window_index"] = (
        np.concatenate([seq.window_index for seq in sequences]) if sequences else np.zeros(0, np.int64)
    )
    arrays["u"] = np.concatenate([seq.u for seq in sequences], axis=0) if sequences else np.zeros((0, 0))
    arrays["v"] = np.concatenate([seq.v for seq in sequences], axis=0) if sequences else np.zeros((0, 0))
    has_w = all(seq.w is not None for seq in sequences) and sequences
    if has_w:
        arrays["w"] = np.concatenate([seq.w for seq in sequences], axis=0)
    has_b = all(seq.buckets is not None for seq in sequences) and sequences
    if has_b:
        arrays["buckets"] = np.concatenate([seq.buckets for seq in sequences], axis=0)
    labels = [seq.label for seq in sequences]
    if all(l is not None for l in labels) and sequences:
        arrays["labels"] = np.asarray(labels, dtype=np.float64)
    if stats is not None:
        arrays["stats_median"] = stats.median
        arrays["stats_std"] = stats.std
    full_meta = dict(meta or {})
    full_meta["entities"] = [seq.entity_id for seq in sequences]
    if stats is not None:
        full_meta["clip_limit"] = stats.clip_limit
    save_container(path, DATASET_FORMAT, DATASET_VERSION, full_meta, arrays)


def load_dataset(path):
    """Returns (sequences, stats or None, meta)."""
    meta, arrays = load_container(path, DATASET_FORMAT, DATASET_VERSION)
    lengths = arrays["lengths"]
    offsets = np.r_[0, np.cumsum(lengths)]
    sequences = []
    labels = arrays.get("labels")
    for i, ent in enumerate(meta["entities"]):
        a, b = offsets[i], offsets[i + 1]
        sequences.append(
            GroupedSequence(
                entity_id=ent,
                s=arrays["s"][a:b],
                window_index=arrays["window_index"][a:b],
                u=arrays["u"][a:b],
                v=arrays["v"][a:b],
                w=arrays["w"][a:b] if "w" in arrays else None,
                buckets=arrays["buckets"][a:b] if "buckets" in arrays else None,
                label=float(labels[i]) if labels is not None else None,
            )
        )
    stats = None
    if "stats_median" in arrays:
        stats = StandardizationStats(
            median=arrays["stats_median"], std=arrays["stats_std"],
            clip_limit=float(meta.get("clip_limit", 10.0)),
        )
    return sequences, stats, meta
