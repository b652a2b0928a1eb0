"""Effective-receptive-field analysis, area-ratio statistics, and benchmarks.

The ERF of a network (or sub-block) is measured by backpropagating from the
channel-summed center output activation of random inputs and accumulating
input-gradient magnitudes.  Area ratios summarize how concentrated the
resulting contribution map is: ``ratio(t)`` is the smallest fraction of
pixels whose sorted contributions cover a fraction ``t`` of the total.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .blocks import ModelConfig, ModelParams, cofb_forward, count_params, init_params, walk_params
from .tensor import AllocationTracker, Tensor

DEFAULT_THRESHOLDS = (0.10, 0.20, 0.30, 0.50, 0.70, 0.90, 0.95)


class DegenerateErfError(RuntimeError):
    """The measured contribution map is identically zero (disconnected graph)."""


@dataclass
class ErfMap:
    """Aggregated absolute input-gradient magnitudes for the center output."""

    grid: np.ndarray  # (h, w), non-negative
    context: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError("ErfMap grid must be 2-D")
        if np.any(self.grid < 0):
            raise ValueError("ErfMap grid must be non-negative")

    @property
    def normalized(self) -> np.ndarray:
        peak = self.grid.max()
        return self.grid / peak if peak > 0 else self.grid

    def support(self) -> np.ndarray:
        return self.grid > 0


@dataclass
class AreaRatioTable:
    """Fraction of pixels needed per cumulative-contribution threshold."""

    thresholds: tuple[float, ...]
    ratios: tuple[float, ...]
    context: str = ""

    def as_dict(self) -> dict:
        return {
            "context": self.context,
            "thresholds": list(self.thresholds),
            "ratios": list(self.ratios),
        }


def erf_map(
    forward: Callable[[Tensor], Tensor],
    in_channels: int,
    input_size: int,
    num_samples: int = 8,
    rng: np.random.Generator | None = None,
    context: str = "",
) -> ErfMap:
    """Accumulate |d(center output)/d(input)| over random standard-normal inputs.

    The center readout sums over output channels before one backward pass
    per sample; gradients are summed over samples and input channels.
    """
    rng = rng or np.random.default_rng(0)
    grid = np.zeros((input_size, input_size), dtype=np.float64)
    for _ in range(num_samples):
        x = Tensor(rng.standard_normal((1, in_channels, input_size, input_size)).astype(np.float32))
        x.requires_grad = True
        out = forward(x)
        cy, cx = out.data.shape[2] // 2, out.data.shape[3] // 2
        center = T.sum_all(T.pick(out, (slice(None), slice(None), cy, cx)))
        center.backward()
        grid += np.abs(x.grad).sum(axis=(0, 1))
    if not np.any(grid > 0):
        raise DegenerateErfError("ERF map is identically zero; the graph is disconnected")
    return ErfMap(grid=grid, context=context)


def area_ratio(erf: ErfMap, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> AreaRatioTable:
    """Smallest top-cell fraction covering each cumulative threshold.

    Cells are ranked by (value descending, linear index ascending) so ties
    resolve reproducibly.
    """
    flat = erf.grid.reshape(-1)
    total = flat.sum()
    if total <= 0:
        raise DegenerateErfError("area_ratio needs a map with positive total mass")
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    ratios = []
    for t in thresholds:
        if not 0 < t <= 1:
            raise ValueError(f"thresholds must lie in (0, 1], got {t}")
        count = int(np.searchsorted(cum, t * total, side="left")) + 1
        ratios.append(count / flat.size)
    return AreaRatioTable(tuple(thresholds), tuple(ratios), context=erf.context)


def compare_erf(
    before: ErfMap | AreaRatioTable,
    after: ErfMap | AreaRatioTable,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> dict[float, float]:
    """Per-threshold relative change (after - before) / before of area ratios."""
    tb = before if isinstance(before, AreaRatioTable) else area_ratio(before, thresholds)
    ta = after if isinstance(after, AreaRatioTable) else area_ratio(after, thresholds)
    if tb.thresholds != ta.thresholds:
        raise ValueError("before/after tables use different thresholds")
    return {t: (a - b) / b for t, a, b in zip(tb.thresholds, ta.ratios, tb.ratios)}


def save_erf(erf: ErfMap, table: AreaRatioTable, prefix) -> tuple[Path, Path]:
    """Write an 8-bit grayscale heatmap PNG plus a JSON sidecar."""
    from PIL import Image

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    png_path = prefix.with_suffix(".png")
    json_path = prefix.with_suffix(".json")
    gray = np.clip(np.rint(erf.normalized * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(png_path, format="PNG")
    payload = {"grid": erf.grid.tolist(), "area_ratio": table.as_dict()}
    json_path.write_text(json.dumps(payload))
    return png_path, json_path


# ---------------------------------------------------------------------------
# COFB cascade experiment


@dataclass
class CofbErfReport:
    """Before/after area ratios around one COFB cascade ordering."""

    kernels: tuple[int, ...]
    before: AreaRatioTable
    after: AreaRatioTable
    change: dict[float, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.change:
            self.change = compare_erf(self.before, self.after)


def cofb_erf_experiment(
    kernels: tuple[int, ...] = (7, 15),
    seed: int = 0,
    channels: int = 32,
    input_size: int = 64,
    num_samples: int = 8,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    params: ModelParams | None = None,
) -> CofbErfReport:
    """Measure how one COFB reshapes its contribution map.

    A standalone COFB is driven with feature-style random inputs.  The
    "before" state taps the first depthwise stage of the cascade; the
    "after" state is the block output, whose gating path re-injects the
    unspread features.  Matched seeds give matched kernel values across
    cascade orderings, so ordering effects are isolated.
    """
    cfg = ModelConfig(
        scale=2,
        channels=channels,
        num_groups=1,
        chbs_per_group=(1,),
        cofb_kernels=tuple(kernels),
        ffn_kind="plain",
    )
    if params is None:
        params = _cofb_matched_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)

    def stage_forward(x: Tensor) -> Tensor:
        _, _, stages, _ = cofb_forward(x, params, cfg, "group0.cofb", return_stages=True)
        return stages[0]

    def block_forward(x: Tensor) -> Tensor:
        return cofb_forward(x, params, cfg, "group0.cofb")

    rng_state = rng.bit_generator.state
    before = erf_map(
        stage_forward, channels, input_size, num_samples, rng, context=f"before COFB {kernels}"
    )
    rng.bit_generator.state = rng_state  # same probe inputs for both taps
    after = erf_map(
        block_forward, channels, input_size, num_samples, rng, context=f"after COFB {kernels}"
    )
    return CofbErfReport(
        kernels=tuple(kernels),
        before=area_ratio(before, thresholds),
        after=area_ratio(after, thresholds),
    )


def _cofb_matched_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Init where each depthwise kernel's values depend only on its size.

    Reversing the cascade order then reuses identical kernel tensors, so
    the two orderings are compared at genuinely matched weights.
    """
    params = init_params(cfg, seed)
    for i, k in enumerate(cfg.cofb_kernels, start=1):
        kernel_rng = np.random.default_rng(seed * 1000 + k)
        shape = params[f"group0.cofb.dw{i}.weight"].data.shape
        fan_in = k * k
        params.tensors[f"group0.cofb.dw{i}.weight"] = Tensor(
            kernel_rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32),
            requires_grad=True,
        )
    return params


# ---------------------------------------------------------------------------
# benchmarking and parameter accounting


def bench(forward: Callable[[Tensor], Tensor], input_size: int, repeats: int = 50, in_channels: int = 3) -> dict:
    """Wall-clock latency statistics and a transient-allocation estimate."""
    if input_size < 1:
        raise ValueError("input_size must be positive")
    if repeats < 1:
        raise ValueError("repeats must be positive")
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((1, in_channels, input_size, input_size), dtype=np.float32))
    with T.no_grad():
        forward(x)  # warm-up
        with AllocationTracker() as tracker:
            forward(x)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward(x)
            times.append(time.perf_counter() - t0)
    times_arr = np.asarray(times)
    return {
        "mean_latency": float(times_arr.mean()),
        "p95": float(np.percentile(times_arr, 95)),
        "peak_bytes": int(tracker.total_bytes),
        "largest_tensor_bytes": int(tracker.largest_bytes),
        "repeats": repeats,
    }


_MODULE_BUCKETS = ("conv_in", "bn", "la", "mrfe", "gcp", "lambda", "ffn", "cofb", "conv_out")


def _bucket_of(path: str) -> str:
    if path.startswith("head.conv_in"):
        return "conv_in"
    if path.startswith("head.conv_out"):
        return "conv_out"
    for part in (".bn1.", ".bn2."):
        if part in path:
            return "bn"
    for bucket in ("la", "mrfe", "gcp", "ffn", "cofb"):
        if f".{bucket}." in path:
            return bucket
    if path.endswith(".lambda"):
        return "lambda"
    raise ValueError(f"cannot classify parameter path {path!r}")


def param_report(config: ModelConfig) -> dict[str, int]:
    """Parameter counts per architectural component; values sum to the total."""
    report = {bucket: 0 for bucket in _MODULE_BUCKETS}
    for path, _, shape in walk_params(config):
        report[_bucket_of(path)] += int(np.prod(shape)) if shape else 1
    assert sum(report.values()) == count_params(config)
    return report
