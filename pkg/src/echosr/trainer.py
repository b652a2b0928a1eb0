"""Adam optimization, milestone LR schedule, checkpointing, training loop.

Checkpoint byte format: magic ``ECSR``, little-endian u32 format version,
u64 header length, a UTF-8 JSON header (config snapshot, step, data-stream
state, and a tensor directory of name/shape/offset/nbytes entries), then
contiguous little-endian float32 payloads in directory order.

The metrics log is newline-delimited JSON records
``{step, lr, pixel, freq, total, val_psnr?}``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import ModelConfig, ModelParams, echosr_forward, init_params, walk_params
from .data import PatchDataset, PairBatch, augment, sample_patch
from .losses import total_loss
from .metrics import psnr_y
from .tensor import BnRunningStats, Tensor

CHECKPOINT_MAGIC = b"ECSR"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-8

PAPER_TOTAL_ITERS = 520_000
PAPER_MILESTONES = (200_000, 300_000, 400_000, 480_000, 500_000)


class TrainingAbort(RuntimeError):
    """Raised when optimization hits non-finite values."""


class CheckpointError(RuntimeError):
    """Raised for malformed or incompatible checkpoint files."""


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """Per-parameter Adam moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"NaN/Inf gradient for parameter {path!r} at step {t}")
        p = params[path]
        if path not in state.m:
            state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bias1
        vhat = v / bias2
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate halved at each milestone."""

    initial_lr: float = 1e-3
    decay_factor: float = 0.5
    milestones: tuple[int, ...] = PAPER_MILESTONES

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")

    def scaled(self, factor: float) -> "Schedule":
        """Shrink (or stretch) the whole schedule while keeping its shape."""
        ms = tuple(max(1, round(m * factor)) for m in self.milestones)
        return Schedule(self.initial_lr, self.decay_factor, ms)


def lr_at(schedule: Schedule, step: int) -> float:
    passed = sum(1 for m in schedule.milestones if m <= step)
    return schedule.initial_lr * schedule.decay_factor**passed


# ---------------------------------------------------------------------------
# checkpoint serialization


def config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for key in ("chbs_per_group", "mrfe_kernels", "cofb_kernels"):
        d[key] = list(d[key])
    return d


def config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise CheckpointError(f"unknown model config keys: {sorted(unknown)}")
    kwargs = dict(d)
    for key in ("chbs_per_group", "mrfe_kernels", "cofb_kernels"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


@dataclass
class Checkpoint:
    """Everything needed to restart training or run inference."""

    config: ModelConfig
    step: int
    tensors: dict[str, np.ndarray]  # namespaced: param/..., bn/..., adam/m/..., adam/v/...
    stream_state: dict | None = None
    version: int = CHECKPOINT_VERSION


def checkpoint_from_training(
    params: ModelParams, step: int, optim: OptimState | None = None, stream_state: dict | None = None
) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for path, t in params.tensors.items():
        tensors[f"param/{path}"] = t.data
    for path, stats in params.bn_stats.items():
        if stats.initialized():
            tensors[f"bn/{path}/mean"] = stats.mean
            tensors[f"bn/{path}/var"] = stats.var
    if optim is not None:
        for path, m in optim.m.items():
            tensors[f"adam/m/{path}"] = m
            tensors[f"adam/v/{path}"] = optim.v[path]
        stream_state = dict(stream_state or {})
        stream_state["adam_step"] = optim.step
    return Checkpoint(config=params.config, step=step, tensors=tensors, stream_state=stream_state)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    directory = []
    offset = 0
    blobs = []
    for name, arr in ckpt.tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": config_to_dict(ckpt.config),
        "step": ckpt.step,
        "stream_state": ckpt.stream_state,
        "directory": directory,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an ECSR checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    payload = raw[16 + header_len :]
    tensors = {}
    for entry in header["directory"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path} is truncated: tensor {entry['name']} out of range")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(
        config=config_from_dict(header["config"]),
        step=header["step"],
        tensors=tensors,
        stream_state=header.get("stream_state"),
        version=version,
    )


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    """Rebuild ModelParams, validating every shape against the config."""
    cfg = ckpt.config
    tensors = {}
    for path, kind, shape in walk_params(cfg):
        key = f"param/{path}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint missing parameter {path!r}")
        arr = ckpt.tensors[key]
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointError(
                f"parameter {path!r} has shape {tuple(arr.shape)}, config expects {tuple(shape)}"
            )
        tensors[path] = Tensor(arr.copy(), requires_grad=True)
    params = ModelParams(cfg, tensors, {})
    from .blocks import walk_bn_stats

    for path in walk_bn_stats(cfg):
        stats = BnRunningStats()
        mean_key, var_key = f"bn/{path}/mean", f"bn/{path}/var"
        if mean_key in ckpt.tensors:
            stats.mean = ckpt.tensors[mean_key].copy()
            stats.var = ckpt.tensors[var_key].copy()
        params.bn_stats[path] = stats
    return params


def optim_from_checkpoint(ckpt: Checkpoint) -> OptimState:
    state = OptimState()
    for name, arr in ckpt.tensors.items():
        if name.startswith("adam/m/"):
            state.m[name[len("adam/m/") :]] = arr.copy()
        elif name.startswith("adam/v/"):
            state.v[name[len("adam/v/") :]] = arr.copy()
    if ckpt.stream_state and "adam_step" in ckpt.stream_state:
        state.step = int(ckpt.stream_state["adam_step"])
    return state


# ---------------------------------------------------------------------------
# batch stream with capturable state


class BatchStream:
    """Epoch-shuffled patch batches whose full state can be checkpointed."""

    def __init__(self, dataset: PatchDataset, batch_size: int, seed: int, augment_data: bool = True):
        self.dataset = dataset
        self.batch_size = batch_size
        self.augment_data = augment_data
        self.rng = np.random.default_rng(seed)
        self.order: list[int] = []

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": list(self.order)}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = list(state["order"])

    def next(self) -> PairBatch:
        lrs, hrs, prov = [], [], []
        for _ in range(self.batch_size):
            if not self.order:
                self.order = list(self.rng.permutation(len(self.dataset)))
            idx = self.order.pop()
            hr_img, lr_img, name = self.dataset.pair(idx)
            lr, hr, (x, y) = sample_patch(hr_img, lr_img, self.dataset.patch, self.dataset.scale, self.rng)
            if self.augment_data:
                (lr, hr), flags = augment((lr, hr), None, self.rng)
            else:
                flags = (False, 0)
            lrs.append(lr)
            hrs.append(hr)
            prov.append({"source": name, "offset": [x, y], "hflip": flags[0], "rot": flags[1]})
        return PairBatch(Tensor(np.stack(lrs)), Tensor(np.stack(hrs)), prov)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainRunConfig:
    """Desk-scale run settings; iteration counts scale the reference schedule."""

    out_dir: str = "runs/echosr"
    iters: int | None = None  # None: PAPER_TOTAL_ITERS * iter_scale
    iter_scale: float = 1.0
    batch: int = 32
    patch: int = 72
    seed: int = 0
    ckpt_every: int = 100
    val_every: int = 50
    augment: bool = True
    initial_lr: float = 1e-3
    milestones: tuple[int, ...] | None = None  # None: paper milestones * iter_scale


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    history: list[dict]
    params: ModelParams


def _val_psnr(params: ModelParams, cfg: ModelConfig, dataset: PatchDataset) -> float:
    # fixed center patch of the first image: plumbing, not a paper protocol
    hr_img, lr_img, _ = dataset.pair(0)
    p = dataset.patch
    y = max(0, (lr_img.shape[1] - p) // 2)
    x = max(0, (lr_img.shape[2] - p) // 2)
    r = dataset.scale
    lr = lr_img[:, y : y + p, x : x + p]
    hr = hr_img[:, r * y : r * (y + p), r * x : r * (x + p)]
    with T.no_grad():
        sr = echosr_forward(Tensor(lr[None]), params, cfg, mode="eval")
    return psnr_y(sr.data[0], hr, crop_border=r)


def train(config: ModelConfig, data_dir, run: TrainRunConfig, resume: Checkpoint | None = None) -> TrainResult:
    """Run the optimization loop; returns the final checkpoint location.

    Emits NDJSON metrics and periodic checkpoints under ``run.out_dir``;
    aborts on non-finite loss while keeping the last good checkpoint.
    """
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.ndjson"
    ckpt_path = out_dir / "checkpoint.ecsr"

    dataset = PatchDataset(data_dir, config.scale, patch=run.patch)
    stream = BatchStream(dataset, run.batch, run.seed, augment_data=run.augment)
    if run.milestones is not None:
        schedule = Schedule(initial_lr=run.initial_lr, milestones=tuple(run.milestones))
    else:
        schedule = Schedule(initial_lr=run.initial_lr).scaled(run.iter_scale)
    total_iters = run.iters if run.iters is not None else max(1, round(PAPER_TOTAL_ITERS * run.iter_scale))

    if resume is not None:
        if config_to_dict(resume.config) != config_to_dict(config):
            raise CheckpointError("resume checkpoint was built for a different model config")
        params = params_from_checkpoint(resume)
        optim = optim_from_checkpoint(resume)
        start_step = resume.step
        if resume.stream_state and "stream" in resume.stream_state:
            stream.restore(resume.stream_state["stream"])
    else:
        params = init_params(config, run.seed)
        optim = OptimState()
        start_step = 0

    history: list[dict] = []
    mode = "a" if resume is not None else "w"
    param_paths = params.paths()
    with open(metrics_path, mode) as log_f:
        if start_step >= total_iters:
            ckpt = checkpoint_from_training(params, start_step, optim, {"stream": stream.state()})
            save_checkpoint(ckpt_path, ckpt)
            return TrainResult(ckpt_path, metrics_path, history, params)
        for step in range(start_step, total_iters):
            batch = stream.next()
            lr_now = lr_at(schedule, step)
            params.zero_grad()
            sr = echosr_forward(batch.lr, params, config, mode="train")
            loss, report = total_loss(sr, batch.hr)
            if not np.isfinite(report.total):
                raise TrainingAbort(
                    f"non-finite loss at step {step + 1}; last good checkpoint kept at {ckpt_path}"
                )
            loss.backward()
            grads = {
                path: (params[path].grad if params[path].grad is not None else np.zeros_like(params[path].data))
                for path in param_paths
            }
            adam_step(params, grads, optim, lr_now)

            record = {
                "step": step + 1,
                "lr": lr_now,
                "pixel": report.pixel,
                "freq": report.freq,
                "total": report.total,
            }
            if run.val_every and (step + 1) % run.val_every == 0:
                record["val_psnr"] = _val_psnr(params, config, dataset)
            history.append(record)
            log_f.write(json.dumps(record) + "\n")
            if run.ckpt_every and (step + 1) % run.ckpt_every == 0:
                ckpt = checkpoint_from_training(params, step + 1, optim, {"stream": stream.state()})
                save_checkpoint(ckpt_path, ckpt)
        ckpt = checkpoint_from_training(params, total_iters, optim, {"stream": stream.state()})
        save_checkpoint(ckpt_path, ckpt)
    return TrainResult(ckpt_path, metrics_path, history, params)
