"""Runtime and memory benchmark for the attention path.

Times strictly sequential forward passes of one encoder layer (attention
plus feed-forward) in inference mode and reports the paper-style column
set: run-time per pass, throughput in sequences per second, and peak
allocated bytes measured by the tensor allocation tracker.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from fluid import attention as A
from fluid import model as M
from fluid import tensor as T
from fluid.tensor import Tensor


@dataclass
class BenchDims:
    d_model: int = 64
    heads: int = 4
    batch: int = 1
    seq_len: int = 1024
    top_k: int | None = None
    euler_steps: int = 5
    ffn_dim: int = 128
    seed: int = 0


@dataclass
class BenchReport:
    mean_time_s: float
    std_time_s: float
    throughput_seq_per_s: float
    peak_memory_mb: float
    reps: int
    dims: dict

    CSV_HEADER = "run_time_s,throughput_seq_per_s,peak_memory_mb"

    def csv_row(self) -> str:
        return (f"{self.mean_time_s:.6f},{self.throughput_seq_per_s:.4f},"
                f"{self.peak_memory_mb:.3f}")

    def to_dict(self) -> dict:
        return {"run_time_s": self.mean_time_s,
                "run_time_std_s": self.std_time_s,
                "throughput_seq_per_s": self.throughput_seq_per_s,
                "peak_memory_mb": self.peak_memory_mb,
                "reps": self.reps, "dims": self.dims}


def default_model_factory(dims: BenchDims):
    """One encoder layer over a random embedded batch; returns a thunk."""
    lan = A.LanConfig(d_model=dims.d_model, heads=dims.heads,
                      euler_steps=dims.euler_steps, top_k=dims.top_k,
                      sink_gate_enabled=True, causal=False)
    cfg = M.ModelConfig(lan=lan, n_layers=1, ffn_dim=dims.ffn_dim,
                        in_features=1, out_dim=1,
                        max_len=max(dims.seq_len, 1), seed=dims.seed)
    layer = M.EncoderLayer(cfg, np.random.default_rng(dims.seed))
    x = Tensor(np.random.default_rng(dims.seed + 1).standard_normal(
        (dims.batch, dims.seq_len, dims.d_model)))

    def forward():
        with T.no_grad():
            layer.forward(x)

    return forward


def bench(model_factory, dims: BenchDims, reps: int = 10) -> BenchReport:
    """Warm up once, then time `reps` sequential passes."""
    if reps < 3:
        raise ValueError("need reps >= 3 plus warmup for stable statistics")
    T.track_allocations(True)
    forward = model_factory(dims)
    forward()  # warmup
    T.reset_peak_allocated()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        forward()
        times.append(time.perf_counter() - t0)
    peak = T.peak_allocated_bytes()
    T.track_allocations(False)

    times = np.asarray(times)
    total = float(times.sum())
    return BenchReport(
        mean_time_s=float(times.mean()),
        std_time_s=float(times.std()),
        throughput_seq_per_s=dims.batch * reps / total,
        peak_memory_mb=peak / 1e6,
        reps=reps,
        dims=dims.__dict__.copy(),
    )
