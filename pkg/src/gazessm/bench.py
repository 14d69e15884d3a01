"""Inference latency/throughput benchmark harness.

Mirrors the edge protocol: batch-1, seeded random input windows, a
warmup phase excluded from statistics, per-iteration monotonic-clock
timing, and power sampling on a background thread that never blocks the
timed path.  Hardware power sources plug in through PowerSampler; the
default null sampler reports nothing and the benchmark still succeeds.
"""
from __future__ import annotations

import platform
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .model import ModelParams, forward_batch
from .numerics import Tensor, no_grad


@dataclass
class BenchConfig:
    batch_size: int = 1
    warmup_iterations: int = 20
    iterations: int = 100
    power_interval_ms: float = 50.0
    t_steps: int = 500
    input_dim: int = 30
    precision: str = "float32"
    seed: int = 0

    def validate(self):
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.warmup_iterations < 0:
            raise ContractError("warmup_iterations must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ContractError(f"unknown precision {self.precision!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "warmup_iterations": self.warmup_iterations,
            "iterations": self.iterations,
            "power_interval_ms": self.power_interval_ms,
            "t_steps": self.t_steps,
            "input_dim": self.input_dim,
            "precision": self.precision,
            "seed": self.seed,
        }


class PowerSampler:
    """Reads instantaneous power in watts; return None when unavailable.

    Subclass and implement read_watts() to integrate a platform sensor.
    Exceptions are swallowed by the sampling loop and counted in the
    report; a failing sampler degrades to absent power, never a failed
    benchmark.
    """

    def read_watts(self):
        return None


class NullPowerSampler(PowerSampler):
    """No power source; the report's power field stays absent."""


class ConstantPowerSampler(PowerSampler):
    """Fixed wattage, for tests and dry runs."""

    def __init__(self, watts: float):
        self.watts = float(watts)

    def read_watts(self):
        return self.watts


class FilePowerSampler(PowerSampler):
    """Reads a sysfs-style file containing an integer in microwatts
    (e.g. a hwmon power sensor); pass ``scale`` to adjust units."""

    def __init__(self, path, scale: float = 1e-6):
        self.path = path
        self.scale = float(scale)

    def read_watts(self):
        with open(self.path, "r", encoding="ascii") as fh:
            return float(fh.read().strip()) * self.scale


class _PowerMonitor:
    def __init__(self, sampler: PowerSampler, interval_s: float):
        self.sampler = sampler
        self.interval_s = max(1e-3, interval_s)
        self.samples = []  # (monotonic time, watts)
        self.errors = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.is_set():
            try:
                w = self.sampler.read_watts()
                if w is not None:
                    self.samples.append((time.monotonic(), float(w)))
            except Exception:
                self.errors += 1
            self._stop.wait(self.interval_s)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join(timeout=5.0)


def host_descriptor() -> dict:
    return {
        "os": platform.platform(),
        "cpu": platform.processor() or platform.machine(),
        "python": platform.python_version(),
    }


def benchmark_inference(
    params: ModelParams,
    cfg: BenchConfig,
    power: PowerSampler | None = None,
    forward_fn=None,
) -> dict:
    """Run the timed inference loop and return the report dict.

    ``forward_fn(z_tensor)`` defaults to the real model forward; tests
    inject a counting stub to audit that warmup iterations never enter
    the statistics.  Latency is model-forward only; windows are
    pre-encoded (preprocessing is not timed).
    """
    cfg.validate()
    power = power or NullPowerSampler()
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    rng = np.random.default_rng(cfg.seed)
    z = rng.normal(size=(cfg.batch_size, cfg.t_steps, cfg.input_dim)).astype(dtype)
    if params is not None:
        work = params if params.w_in.data.dtype == dtype else params.astype(dtype)
    else:
        work = None

    if forward_fn is None:

        def forward_fn(zt):
            prob, _, _, _ = forward_batch(zt, work, training=False)
            return prob.data

    zt = Tensor(z)
    latencies_ms = []
    with _PowerMonitor(power, cfg.power_interval_ms / 1000.0) as monitor:
        with no_grad():
            for _ in range(cfg.warmup_iterations):
                forward_fn(zt)
            for i in range(cfg.iterations):
                t0 = time.perf_counter()
                out = forward_fn(zt)
                t1 = time.perf_counter()
                if not np.all(np.isfinite(out)):
                    raise NumericError(f"benchmark: non-finite output at iteration {i}")
                latencies_ms.append((t1 - t0) * 1000.0)

    lat = np.asarray(latencies_ms)
    mean_ms = float(lat.mean())
    watts = [w for _, w in monitor.samples]
    return {
        "latency_ms": {
            "mean": mean_ms,
            "median": float(np.median(lat)),
            "p95": float(np.percentile(lat, 95.0, method="linear")),
            "min": float(lat.min()),
            "max": float(lat.max()),
        },
        "fps": 1000.0 / mean_ms,
        "power_watts": float(np.mean(watts)) if watts else None,
        "power_samples": len(watts),
        "power_sampler_errors": monitor.errors,
        "iterations_measured": len(latencies_ms),
        "iterations_warmup": cfg.warmup_iterations,
        "host": host_descriptor(),
        "config": cfg.to_dict(),
    }
