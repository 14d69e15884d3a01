"""Raw eye-tracking CSV ingestion.

Parses wide per-participant CSVs (one timestamp column plus one column
per sensor channel), maps dataset-specific column names onto the
10-feature canon through schema profiles, coalesces duplicate
timestamps, and computes robust per-participant baseline statistics
from the resting-state recording.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyRecordingError, SchemaError

# Fixed feature order; defines the column order of every downstream tensor.
FEATURE_CANON = (
    "pupil_left",
    "pupil_right",
    "gaze_x",
    "gaze_y",
    "gaze_velocity",
    "gaze_acceleration",
    "fixation_flag",
    "saccade_flag",
    "blink_flag",
    "distance",
)
N_FEATURES = len(FEATURE_CANON)
BINARY_FLAGS = ("fixation_flag", "saccade_flag", "blink_flag")
# derivable from gaze position when a dataset does not export them
DERIVABLE = ("gaze_velocity", "gaze_acceleration")

# Column-name mappings per dataset family. "generic" doubles as the
# round-trip serialization format.
SCHEMA_PROFILES = {
    "generic": {
        "timestamp": "timestamp",
        "features": {f: f for f in FEATURE_CANON},
        "label_columns": {"interval": "interval", "rating": "rating"},
        "label_time_based": False,
    },
    "clare": {
        "timestamp": "Timestamp",
        "features": {
            "pupil_left": "ET_PupilLeft",
            "pupil_right": "ET_PupilRight",
            "gaze_x": "ET_GazeX",
            "gaze_y": "ET_GazeY",
            "gaze_velocity": "ET_GazeVelocity",
            "gaze_acceleration": "ET_GazeAcceleration",
            "fixation_flag": "ET_Fixation",
            "saccade_flag": "ET_Saccade",
            "blink_flag": "ET_Blink",
            "distance": "ET_Distance",
        },
        "label_columns": {"time": "Timestamp", "rating": "Rating"},
        "label_time_based": True,
    },
    "cldrive": {
        "timestamp": "time_s",
        "features": {
            "pupil_left": "pupil_left_mm",
            "pupil_right": "pupil_right_mm",
            "gaze_x": "gaze_x_px",
            "gaze_y": "gaze_y_px",
            "gaze_velocity": "gaze_velocity",
            "gaze_acceleration": "gaze_acceleration",
            "fixation_flag": "is_fixation",
            "saccade_flag": "is_saccade",
            "blink_flag": "is_blink",
            "distance": "head_distance_cm",
        },
        "label_columns": {"time": "time_s", "rating": "paas_rating"},
        "label_time_based": True,
    },
}


@dataclass
class RawRecording:
    """Time-ordered (timestamp, channel, value) samples for one session."""

    participant_id: str
    samples: list  # [(t: float, channel: str, value: float)]
    session_kind: str = "experiment"  # or "baseline"

    def channel_series(self, channel: str):
        """(times, values) arrays for one channel, in sample order."""
        ts = [s[0] for s in self.samples if s[1] == channel]
        vs = [s[2] for s in self.samples if s[1] == channel]
        return np.asarray(ts, dtype=np.float64), np.asarray(vs, dtype=np.float64)


@dataclass
class BaselineStats:
    """Per-feature center/spread from the resting-state session."""

    mu: np.ndarray  # (N_FEATURES,)
    sigma: np.ndarray  # (N_FEATURES,)
    fallback_features: list = field(default_factory=list)
    thin_features: list = field(default_factory=list)


def _parse_cell(cell: str):
    """Float value of a CSV cell, or None when the cell is absent data."""
    cell = cell.strip()
    if not cell:
        return None
    try:
        v = float(cell)
    except ValueError:
        return None
    if math.isnan(v) or math.isinf(v):
        return None
    return v


def parse_recording(path, profile: str, participant_id: str = "", session_kind: str = "experiment") -> RawRecording:
    """Parse one wide CSV into canonical-channel samples.

    Unparseable or empty cells become absent observations, never zeros.
    Velocity/acceleration columns may be missing (they are derivable);
    any other missing column is a schema error naming the column.
    """
    if profile not in SCHEMA_PROFILES:
        raise SchemaError(f"unknown schema profile {profile!r}")
    spec = SCHEMA_PROFILES[profile]
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyRecordingError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col_index = {name: i for i, name in enumerate(header)}

        ts_col = spec["timestamp"]
        if ts_col not in col_index:
            raise SchemaError(f"{path}: missing required column {ts_col!r}")
        feature_cols = []
        for feat in FEATURE_CANON:
            col = spec["features"][feat]
            if col in col_index:
                feature_cols.append((feat, col_index[col]))
            elif feat not in DERIVABLE:
                raise SchemaError(f"{path}: missing required column {col!r}")

        samples = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            t = _parse_cell(row[col_index[ts_col]])
            if t is None:
                continue
            for feat, idx in feature_cols:
                if idx >= len(row):
                    continue
                v = _parse_cell(row[idx])
                if v is not None:
                    samples.append((t, feat, v))

    if not samples:
        raise EmptyRecordingError(f"{path}: no data rows")
    samples.sort(key=lambda s: s[0])  # stable, keeps row order within a timestamp
    return RawRecording(participant_id=participant_id, samples=samples, session_kind=session_kind)


def write_generic_csv(rec: RawRecording, path):
    """Serialize a recording in the generic wide profile (round-trips the
    sample multiset exactly)."""
    by_time: dict = {}
    for t, ch, v in rec.samples:
        by_time.setdefault(t, {})[ch] = v
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", *FEATURE_CANON])
        for t in sorted(by_time):
            row = [repr(t)]
            for feat in FEATURE_CANON:
                v = by_time[t].get(feat)
                row.append("" if v is None else repr(v))
            writer.writerow(row)


def coalesce_timestamps(rec: RawRecording) -> RawRecording:
    """Keep at most one sample per (timestamp, channel); the last valid
    observation wins, independently per channel."""
    latest: dict = {}
    order: list = []
    for t, ch, v in rec.samples:
        key = (t, ch)
        if key not in latest:
            order.append(key)
        latest[key] = v
    samples = [(t, ch, latest[(t, ch)]) for (t, ch) in order]
    samples.sort(key=lambda s: s[0])
    return RawRecording(rec.participant_id, samples, rec.session_kind)


def baseline_stats(rec: RawRecording, min_obs_for_filter: int = 10) -> BaselineStats:
    """Robust per-feature statistics from a resting-state recording.

    Continuous features: keep values inside the [Q10, Q90] band
    (linear-interpolated percentiles), then mu = median and sigma =
    standard deviation of the kept values.  Binary flags always use
    (0, 1).  Features with no observations fall back to (0, 1) and are
    flagged; features with fewer than ``min_obs_for_filter`` observations
    skip the percentile filter and are flagged as thin.
    """
    if rec.session_kind != "baseline":
        raise ContractError("baseline_stats requires a baseline-session recording")
    mu = np.zeros(N_FEATURES)
    sigma = np.ones(N_FEATURES)
    fallback = []
    thin = []
    for i, feat in enumerate(FEATURE_CANON):
        if feat in BINARY_FLAGS:
            continue  # z-scoring indicators against near-zero variance is meaningless
        _, values = rec.channel_series(feat)
        if values.size == 0:
            fallback.append(feat)
            continue
        if values.size < min_obs_for_filter:
            thin.append(feat)
            kept = values
        else:
            q10, q90 = np.percentile(values, [10.0, 90.0], method="linear")
            kept = values[(values >= q10) & (values <= q90)]
            if kept.size == 0:  # pathological spread; fall back to all values
                kept = values
        mu[i] = float(np.median(kept))
        sigma[i] = float(np.std(kept))
    return BaselineStats(mu=mu, sigma=sigma, fallback_features=fallback, thin_features=thin)


def parse_label_track(path, profile: str, interval_seconds: float = 10.0):
    """Read the per-interval self-report ratings for one session.

    Returns the ratings list indexed by interval.  Time-based profiles
    map each row's start time to an interval index; the generic profile
    carries explicit indices.
    """
    if profile not in SCHEMA_PROFILES:
        raise SchemaError(f"unknown schema profile {profile!r}")
    spec = SCHEMA_PROFILES[profile]
    cols = spec["label_columns"]
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyRecordingError(f"{path}: empty label file") from None
        col_index = {name: i for i, name in enumerate(header)}
        key_col = cols["time"] if spec["label_time_based"] else cols["interval"]
        for needed in (key_col, cols["rating"]):
            if needed not in col_index:
                raise SchemaError(f"{path}: missing required column {needed!r}")
        entries = {}
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            key = _parse_cell(row[col_index[key_col]])
            rating = _parse_cell(row[col_index[cols["rating"]]])
            if key is None or rating is None:
                continue
            idx = int(round(key / interval_seconds)) if spec["label_time_based"] else int(round(key))
            entries[idx] = int(round(rating))
    if not entries:
        raise EmptyRecordingError(f"{path}: no label rows")
    n = max(entries) + 1
    ratings = []
    for i in range(n):
        if i not in entries:
            raise SchemaError(f"{path}: label track has a gap at interval {i}")
        if not (1 <= entries[i] <= 9):
            raise SchemaError(f"{path}: rating {entries[i]} at interval {i} outside 1..9")
        ratings.append(entries[i])
    return ratings


def write_profile_sidecar(profile: str, path):
    """Document the active column mapping next to pipeline outputs."""
    import json

    spec = SCHEMA_PROFILES[profile]
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"profile": profile, **spec}, f, indent=2, sort_keys=True)
        f.write("\n")
