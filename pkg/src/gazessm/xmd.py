"""Values-Masks-Deltas window construction.

Turns a coalesced recording into fixed-length training windows: uniform
grid resampling with forward-fill, change-detection observation masks
computed from the *source* timestamps, the time-since-last-observation
recurrence, baseline-initialized imputation, participant z-scoring,
midpoint-rule labeling, and a lossless 32-bit serialization format.

Grid-cell convention: cell t covers the half-open source interval
((t-1)/rate, t/rate] after the recording start, so the grid step where a
new observation first appears in the resampled values is exactly the
step whose mask bit is set.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorruptionError, DomainError, ShapeError
from .ingest import FEATURE_CANON, N_FEATURES, BaselineStats, RawRecording

_TIME_FUZZ = 1e-9


@dataclass
class GridSeries:
    """Uniformly resampled values with masks and time-deltas.

    ``values`` may contain NaN before imputation (cells preceding a
    channel's first observation); afterwards it must not.
    """

    participant_id: str
    sample_rate: float
    start_time: float  # absolute time of grid step 0
    values: np.ndarray  # (T, F) float64
    masks: np.ndarray  # (T, F) uint8
    deltas: np.ndarray  # (T, F) float64, seconds

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]


@dataclass
class LabelTrack:
    """Interval ratings (1..9) binarized at the high-load threshold."""

    interval_seconds: float
    ratings: list
    threshold: int = 5

    def __post_init__(self):
        for i, r in enumerate(self.ratings):
            if not (1 <= int(r) <= 9):
                raise DomainError(f"rating {r} at interval {i} outside 1..9")

    def binary_label(self, interval: int) -> int:
        return 1 if self.ratings[interval] >= self.threshold else 0


@dataclass
class XmdWindow:
    """One training example: (T, 3F) tensor laid out values|masks|log-deltas."""

    z: np.ndarray  # (T, 3F) float32
    label: int
    participant_id: str
    window_index: int
    start_time: float  # seconds from the recording start


def resample_to_grid(rec: RawRecording, rate: float = 50.0) -> GridSeries:
    """Forward-fill each channel onto the uniform grid.

    Grid timestamps are start + k/rate where start is the recording's
    first timestamp; each cell holds the most recent source observation
    at or before it, NaN when none exists yet.
    """
    if rate <= 0:
        raise ContractError("sample rate must be positive")
    if not rec.samples:
        return GridSeries(rec.participant_id, rate, 0.0, np.zeros((0, N_FEATURES)), np.zeros((0, N_FEATURES), np.uint8), np.zeros((0, N_FEATURES)))
    t0 = rec.samples[0][0]
    t_end = rec.samples[-1][0]
    n_steps = int(math.ceil((t_end - t0) * rate - _TIME_FUZZ)) + 1
    grid_t = t0 + np.arange(n_steps) / rate
    values = np.full((n_steps, N_FEATURES), np.nan)
    for fi, feat in enumerate(FEATURE_CANON):
        ts, vs = rec.channel_series(feat)
        if ts.size == 0:
            continue
        idx = np.searchsorted(ts, grid_t, side="right") - 1
        have = idx >= 0
        values[have, fi] = vs[idx[have]]
    masks = np.zeros((n_steps, N_FEATURES), dtype=np.uint8)
    deltas = np.zeros((n_steps, N_FEATURES))
    return GridSeries(rec.participant_id, rate, t0, values, masks, deltas)


def compute_masks(rec: RawRecording, grid: GridSeries, mode: str = "change") -> np.ndarray:
    """Observation masks from the original source timestamps.

    ``change`` mode (default) sets a bit only when an observation's value
    differs from the channel's previous observation (first observations
    always count); ``arrival`` mode sets a bit for every observation.
    """
    if mode not in ("change", "arrival"):
        raise ContractError(f"unknown mask mode {mode!r}")
    n_steps = grid.n_steps
    masks = np.zeros((n_steps, N_FEATURES), dtype=np.uint8)
    if n_steps == 0:
        return masks
    rate, t0 = grid.sample_rate, grid.start_time
    for fi, feat in enumerate(FEATURE_CANON):
        ts, vs = rec.channel_series(feat)
        if ts.size == 0:
            continue
        if mode == "change":
            fresh = np.ones(ts.size, dtype=bool)
            fresh[1:] = vs[1:] != vs[:-1]
        else:
            fresh = np.ones(ts.size, dtype=bool)
        cells = np.ceil((ts - t0) * rate - _TIME_FUZZ).astype(np.int64)
        cells = np.clip(cells, 0, n_steps - 1)
        masks[cells[fresh], fi] = 1
    return masks


def deltas_from_masks(masks: np.ndarray, rate: float, initial_gap_steps=None) -> np.ndarray:
    """Seconds since the last observed cell, per feature.

    Implements the recurrence delta_t = 0 at observations and
    delta_{t-1} + 1/rate otherwise.  A column whose first cell is
    unobserved starts at ``initial_gap_steps/rate`` (default one step,
    i.e. a virtual observation just before the grid).
    """
    n_steps, n_feat = masks.shape
    if initial_gap_steps is None:
        initial_gap_steps = np.ones(n_feat, dtype=np.int64)
    idx = np.arange(n_steps, dtype=np.int64)[:, None]
    marked = np.where(masks.astype(bool), idx, np.int64(-(2**62)))
    last = np.maximum.accumulate(marked, axis=0)
    virtual_start = -np.asarray(initial_gap_steps, dtype=np.int64)[None, :]
    last = np.maximum(last, virtual_start)
    return (idx - last) / rate


def compute_deltas(masks: np.ndarray, rate: float):
    """(deltas, log_deltas) for a mask grid; log-deltas are log1p(delta)."""
    deltas = deltas_from_masks(masks, rate)
    return deltas, np.log1p(deltas)


def impute_values(grid: GridSeries, base: BaselineStats) -> GridSeries:
    """Fill cells that precede a channel's first observation with the
    baseline mean; all other unobserved cells already carry the previous
    value from forward-fill resampling."""
    values = grid.values.copy()
    nan = np.isnan(values)
    if nan.any():
        values[nan] = np.broadcast_to(base.mu, values.shape)[nan]
    return GridSeries(grid.participant_id, grid.sample_rate, grid.start_time, values, grid.masks, grid.deltas)


def normalize(grid: GridSeries, base: BaselineStats, eps: float = 1e-8) -> GridSeries:
    """Per-feature z-score against participant baseline statistics."""
    values = (grid.values - base.mu) / (base.sigma + eps)
    return GridSeries(grid.participant_id, grid.sample_rate, grid.start_time, values, grid.masks, grid.deltas)


def encode_xmd(values: np.ndarray, masks: np.ndarray, log_deltas: np.ndarray) -> np.ndarray:
    """Concatenate the three blocks along the feature axis: values first,
    then masks, then log-deltas."""
    if values.shape != masks.shape or values.shape != log_deltas.shape:
        raise ShapeError(
            f"encode_xmd: blocks disagree: {values.shape} / {masks.shape} / {log_deltas.shape}"
        )
    return np.concatenate([values, masks.astype(values.dtype), log_deltas], axis=-1)


def window_and_label(
    grid: GridSeries,
    labels: LabelTrack,
    window_seconds: float = 10.0,
):
    """Cut non-overlapping windows aligned to the recording start and
    label each by the interval containing its midpoint.

    Returns (windows, dropped_count); windows whose midpoint falls
    outside the label track are dropped and counted.
    """
    rate = grid.sample_rate
    t_win = int(round(window_seconds * rate))
    if t_win < 1:
        raise ContractError("window shorter than one grid step")
    if np.isnan(grid.values).any():
        raise ContractError("window_and_label requires imputed values")
    deltas = grid.deltas
    log_deltas = np.log1p(deltas)
    n_windows = grid.n_steps // t_win
    windows = []
    dropped = 0
    for k in range(n_windows):
        lo, hi = k * t_win, (k + 1) * t_win
        t_k = lo / rate
        i_star = int(math.floor((t_k + window_seconds / 2.0) / labels.interval_seconds))
        if not (0 <= i_star < len(labels.ratings)):
            dropped += 1
            continue
        z = encode_xmd(grid.values[lo:hi], grid.masks[lo:hi], log_deltas[lo:hi])
        windows.append(
            XmdWindow(
                z=z.astype(np.float32),
                label=labels.binary_label(i_star),
                participant_id=grid.participant_id,
                window_index=k,
                start_time=t_k,
            )
        )
    return windows, dropped


def derive_gaze_dynamics(rec: RawRecording):
    """Add gaze_velocity / gaze_acceleration channels when a dataset does
    not export them, from finite differences of gaze position at
    timestamps where both coordinates are present.

    Returns (recording, list of channels that were derived).
    """
    have = {ch for _, ch, _ in rec.samples}
    need = [ch for ch in ("gaze_velocity", "gaze_acceleration") if ch not in have]
    if not need:
        return rec, []
    tx, vx = rec.channel_series("gaze_x")
    ty, vy = rec.channel_series("gaze_y")
    common, ix, iy = np.intersect1d(tx, ty, return_indices=True)
    extra = []
    if common.size >= 2:
        x, y = vx[ix], vy[iy]
        dt = np.diff(common)
        ok = dt > 0
        speed = np.hypot(np.diff(x), np.diff(y)) / np.where(ok, dt, 1.0)
        sp_t = common[1:][ok]
        sp_v = speed[ok]
        if "gaze_velocity" in need:
            extra += [(t, "gaze_velocity", float(v)) for t, v in zip(sp_t, sp_v)]
        if "gaze_acceleration" in need and sp_t.size >= 2:
            dv = np.diff(sp_v)
            dts = np.diff(sp_t)
            ok2 = dts > 0
            acc = dv / np.where(ok2, dts, 1.0)
            extra += [(t, "gaze_acceleration", float(a)) for t, a in zip(sp_t[1:][ok2], acc[ok2])]
    samples = sorted(rec.samples + extra, key=lambda s: s[0])
    return RawRecording(rec.participant_id, samples, rec.session_kind), need


def build_windows(
    rec: RawRecording,
    base: BaselineStats,
    labels: LabelTrack,
    rate: float = 50.0,
    window_seconds: float = 10.0,
    eps: float = 1e-8,
    mask_mode: str = "change",
):
    """Full per-participant transform: grid, masks, deltas, imputation,
    normalization, windowing.  Returns (windows, provenance dict)."""
    from .ingest import coalesce_timestamps

    rec = coalesce_timestamps(rec)
    rec, derived = derive_gaze_dynamics(rec)
    grid = resample_to_grid(rec, rate)
    grid.masks[:] = compute_masks(rec, grid, mode=mask_mode)
    grid.deltas[:] = deltas_from_masks(grid.masks, rate)
    grid = impute_values(grid, base)
    grid = normalize(grid, base, eps=eps)
    windows, dropped = window_and_label(grid, labels, window_seconds)
    provenance = {
        "participant": rec.participant_id,
        "grid_steps": grid.n_steps,
        "grid_start_time": grid.start_time,
        "windows": len(windows),
        "dropped_windows": dropped,
        "derived_channels": derived,
        "baseline_fallback_features": list(base.fallback_features),
        "baseline_thin_features": list(base.thin_features),
        "mask_mode": mask_mode,
    }
    return windows, provenance


# -- invariant validation ------------------------------------------------------


def validate_grid(grid: GridSeries, fill_values: np.ndarray, tol: float = 1e-9):
    """Check GridSeries invariants after imputation.

    ``fill_values`` is what an unobserved leading cell must equal (the
    baseline means before normalization, zeros after).  Returns
    (cells_checked, violations list).
    """
    violations = []
    m = grid.masks.astype(bool)
    d = grid.deltas
    v = grid.values
    rate = grid.sample_rate
    if np.isnan(v).any():
        violations.append("values contain NaN after imputation")
    if np.any(d[m] != 0.0):
        violations.append("delta nonzero at an observed cell")
    step = d[1:] - d[:-1]
    bad_rec = (~m[1:]) & (np.abs(step - 1.0 / rate) > tol)
    if bad_rec.any():
        violations.append(f"delta recurrence broken at {int(bad_rec.sum())} cells")
    if grid.n_steps > 0:
        first_unobs = ~m[0]
        if np.any(np.abs(d[0][first_unobs] - 1.0 / rate) > tol):
            violations.append("initial unobserved delta differs from one grid step")
        if np.any(v[0][first_unobs] != fill_values[first_unobs]):
            violations.append("leading unobserved cell differs from fill value")
    hold = (~m[1:]) & (v[1:] != v[:-1])
    if hold.any():
        violations.append(f"unobserved cell differs from previous value at {int(hold.sum())} cells")
    return int(m.size), violations


def validate_windows(windows, rate: float, window_seconds: float = 10.0, n_features: int = N_FEATURES):
    """Check XmdWindow invariants; returns (cells_checked, violations).

    The log-delta block is recomputed bitwise from the mask block (with
    the initial gap recovered from the stored first delta), so any drift
    in the delta recurrence or the log scaling is a violation.
    """
    f = n_features
    t_expected = int(round(window_seconds * rate))
    cells = 0
    violations = []
    for w in windows:
        tag = f"window {w.participant_id}/{w.window_index}"
        if w.z.shape != (t_expected, 3 * f):
            violations.append(f"{tag}: shape {w.z.shape} != ({t_expected}, {3*f})")
            continue
        values = w.z[:, :f]
        masks = w.z[:, f : 2 * f]
        logd = w.z[:, 2 * f :]
        cells += values.size
        if w.label not in (0, 1):
            violations.append(f"{tag}: label {w.label} not binary")
        if not np.isin(masks, (0.0, 1.0)).all():
            violations.append(f"{tag}: mask block not binary")
            continue
        if (logd < 0.0).any():
            violations.append(f"{tag}: negative log-delta")
        mbool = masks.astype(bool)
        if np.any(logd[mbool] != 0.0):
            violations.append(f"{tag}: observed cell with nonzero delta")
        # recover the pre-window gap, then recompute the block bitwise
        d0 = np.expm1(logd[0].astype(np.float64))
        gap = np.where(mbool[0], 1, np.maximum(1, np.rint(d0 * rate).astype(np.int64)))
        expect = np.log1p(deltas_from_masks(masks.astype(np.uint8), rate, initial_gap_steps=gap)).astype(np.float32)
        if not np.array_equal(expect, logd):
            violations.append(f"{tag}: log-delta block does not replay from masks")
        interior = ~mbool[1:]
        if np.any(values[1:][interior] != values[:-1][interior]):
            violations.append(f"{tag}: unobserved value differs from previous cell")
    return cells, violations


# -- serialization ---------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
DATA_NAME = "windows.bin"
MANIFEST_VERSION = 1


def serialize_windows(windows, out_dir, pipeline_params: dict, schema_profile: str, provenance=None):
    """Write windows.bin (little-endian float32 records, row-major (T, 3F))
    plus a JSON manifest carrying labels and every pipeline parameter.

    Returns the manifest path.  Deterministic: identical windows produce
    byte-identical files.
    """
    windows = list(windows)
    if not windows:
        raise ContractError("serialize_windows: no windows")
    t_steps, width = windows[0].z.shape
    os.makedirs(out_dir, exist_ok=True)
    records = []
    blob = bytearray()
    for w in windows:
        if w.z.shape != (t_steps, width):
            raise ShapeError("serialize_windows: inconsistent window shapes")
        blob += np.ascontiguousarray(w.z.astype("<f4")).tobytes()
        records.append(
            {
                "participant": w.participant_id,
                "window_index": w.window_index,
                "label": int(w.label),
                "start_time": w.start_time,
            }
        )
    labels = [r["label"] for r in records]
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "data_file": DATA_NAME,
        "n_windows": len(windows),
        "t_steps": t_steps,
        "width": width,
        "n_features": width // 3,
        "schema_profile": schema_profile,
        "pipeline": pipeline_params,
        "participants": sorted({w.participant_id for w in windows}),
        "label_counts": {"0": labels.count(0), "1": labels.count(1)},
        "windows": records,
        "provenance": provenance or {},
    }
    data_path = os.path.join(out_dir, DATA_NAME)
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    _atomic_write_bytes(data_path, bytes(blob))
    _atomic_write_text(manifest_path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest_path


def load_windows(manifest_path):
    """Read windows back; verifies record count against the binary size.

    Returns (windows, manifest dict).
    """
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    t_steps = manifest["t_steps"]
    width = manifest["width"]
    n = manifest["n_windows"]
    data_path = os.path.join(os.path.dirname(manifest_path), manifest["data_file"])
    raw = open(data_path, "rb").read()
    expected = n * t_steps * width * 4
    if len(raw) != expected:
        raise CorruptionError(
            f"{data_path}: {len(raw)} bytes but manifest implies {expected}"
        )
    if len(manifest["windows"]) != n:
        raise CorruptionError(f"{manifest_path}: record list length != n_windows")
    arr = np.frombuffer(raw, dtype="<f4").reshape(n, t_steps, width)
    windows = []
    for i, rec in enumerate(manifest["windows"]):
        windows.append(
            XmdWindow(
                z=arr[i].astype(np.float32),
                label=int(rec["label"]),
                participant_id=rec["participant"],
                window_index=int(rec["window_index"]),
                start_time=float(rec["start_time"]),
            )
        )
    return windows, manifest


def _atomic_write_bytes(path, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_write_text(path, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
