"""EchoSR network blocks: LA, MRFE, GCP, CHB, COFB, CHRG, and assembly.

The architecture is expressed functionally: a ``ModelConfig`` fixes every
shape, ``ModelParams`` is a flat map from dotted parameter paths (for
example ``group0.chb2.la.pw1.weight``) to tensors, and the forward
functions below thread activations through those parameters.  A single
walker enumerates every (path, shape) pair, so initialization, counting,
checkpointing, and the params/forward round-trip all share one source of
truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BnRunningStats, ConfigError, ConvSpec, Tensor

PLAIN_FFN_EXPAND = 2.0
GATE_FFN_EXPAND = 2.0
# The channel-aggregation FFN approximates an external design whose exact
# internals are not public here; the 1.75 hidden ratio keeps whole-model
# parameter counts near the reference totals.
CA_FFN_EXPAND = 1.75
CA_SIGMA_INIT = 0.01

FFN_KINDS = ("plain", "gate", "channel_aggregation")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-size network."""

    scale: int = 2
    channels: int = 60
    num_groups: int = 4
    chbs_per_group: tuple[int, ...] = (5, 5, 5, 5)
    la_expansion: float = 1.5
    la_group_size: int = 6
    mrfe_kernels: tuple[int, ...] = (0, 5, 11, 17)  # 0 marks the identity branch
    cofb_kernels: tuple[int, ...] = (7, 15)
    gcp_pool_factor: int = 8
    lambda_init: float = 0.1
    ffn_kind: str = "channel_aggregation"

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3, or 4, got {self.scale}")
        if len(self.chbs_per_group) != self.num_groups:
            raise ConfigError("chbs_per_group length must equal num_groups")
        if self.channels % len(self.mrfe_kernels):
            raise ConfigError(
                f"channels={self.channels} not divisible by {len(self.mrfe_kernels)} branch split"
            )
        if self.la_channels % self.la_group_size:
            raise ConfigError(
                f"LA intermediate width {self.la_channels} not divisible by "
                f"group size {self.la_group_size}"
            )
        for k in self.mrfe_kernels:
            if k != 0 and (k < 1 or k % 2 == 0):
                raise ConfigError(f"mrfe kernel sizes must be odd (or 0 for identity), got {k}")
        for k in self.cofb_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"cofb kernel sizes must be odd, got {k}")
        if self.ffn_kind not in FFN_KINDS:
            raise ConfigError(f"ffn_kind must be one of {FFN_KINDS}, got {self.ffn_kind!r}")
        if self.gcp_pool_factor < 1:
            raise ConfigError("gcp_pool_factor must be positive")

    @property
    def la_channels(self) -> int:
        return round(self.la_expansion * self.channels)

    @property
    def mrfe_branch_channels(self) -> int:
        return self.channels // len(self.mrfe_kernels)

    @property
    def ffn_hidden(self) -> int:
        if self.ffn_kind == "plain":
            return round(PLAIN_FFN_EXPAND * self.channels)
        if self.ffn_kind == "gate":
            return round(GATE_FFN_EXPAND * self.channels)
        return round(CA_FFN_EXPAND * self.channels)


def echosr_config(scale: int, **overrides) -> ModelConfig:
    """The full EchoSR preset: C=60, four groups of five CHBs."""
    return replace(ModelConfig(scale=scale), **overrides) if overrides else ModelConfig(scale=scale)


def echosr_lite_config(scale: int, **overrides) -> ModelConfig:
    """The lite preset: C=36 with [2, 3, 2, 3] CHBs per group."""
    cfg = ModelConfig(scale=scale, channels=36, chbs_per_group=(2, 3, 2, 3))
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# parameter walking


def _conv_entry(path: str, out_c: int, in_c_per_group: int, k: int, bias: bool = True):
    yield path + ".weight", "conv", (out_c, in_c_per_group, k, k)
    if bias:
        yield path + ".bias", "bias", (out_c,)


def _ffn_entries(prefix: str, cfg: ModelConfig):
    c, h = cfg.channels, cfg.ffn_hidden
    if cfg.ffn_kind == "plain":
        yield from _conv_entry(prefix + ".pw1", h, c, 1)
        yield from _conv_entry(prefix + ".pw2", c, h, 1)
    elif cfg.ffn_kind == "gate":
        yield from _conv_entry(prefix + ".pw_gate", h, c, 1)
        yield from _conv_entry(prefix + ".pw_val", h, c, 1)
        yield from _conv_entry(prefix + ".pw2", c, h, 1)
    else:
        yield from _conv_entry(prefix + ".pw1", h, c, 1)
        yield from _conv_entry(prefix + ".dw", h, 1, 3)
        yield from _conv_entry(prefix + ".agg", 1, h, 1)
        yield prefix + ".sigma", "ca_sigma", (h,)
        yield from _conv_entry(prefix + ".pw2", c, h, 1)


def _chb_entries(prefix: str, cfg: ModelConfig):
    c, e = cfg.channels, cfg.la_channels
    yield prefix + ".bn1.gamma", "bn_gamma", (c,)
    yield prefix + ".bn1.beta", "bn_beta", (c,)
    yield from _conv_entry(prefix + ".la.pw1", e, c, 1)
    yield from _conv_entry(prefix + ".la.gc", e, cfg.la_group_size, 3)
    yield from _conv_entry(prefix + ".la.pw2", c, e, 1)
    cb = cfg.mrfe_branch_channels
    for k in cfg.mrfe_kernels:
        if k:
            yield from _conv_entry(f"{prefix}.mrfe.dw{k}", cb, 1, k)
    yield from _conv_entry(prefix + ".gcp.dw", c, 1, 3)
    yield from _conv_entry(prefix + ".gcp.pw", c, c, 1)
    yield prefix + ".lambda", "lambda", ()
    yield prefix + ".bn2.gamma", "bn_gamma", (c,)
    yield prefix + ".bn2.beta", "bn_beta", (c,)
    yield from _ffn_entries(prefix + ".ffn", cfg)


def _cofb_entries(prefix: str, cfg: ModelConfig):
    c = cfg.channels
    yield from _conv_entry(prefix + ".pw1", c, c, 1)
    for i, k in enumerate(cfg.cofb_kernels, start=1):
        yield from _conv_entry(f"{prefix}.dw{i}", c, 1, k)
    yield from _conv_entry(prefix + ".pw2", c, c, 1)
    yield from _conv_entry(prefix + ".pw3", c, c, 1)


def walk_params(cfg: ModelConfig) -> Iterator[tuple[str, str, tuple[int, ...]]]:
    """Yield (path, kind, shape) for every learnable scalar in the model."""
    c = cfg.channels
    yield from _conv_entry("head.conv_in", c, 3, 3)
    for gi in range(cfg.num_groups):
        for bj in range(cfg.chbs_per_group[gi]):
            yield from _chb_entries(f"group{gi}.chb{bj}", cfg)
        yield from _cofb_entries(f"group{gi}.cofb", cfg)
    yield from _conv_entry("head.conv_out", 3 * cfg.scale**2, c, 3)


def walk_bn_stats(cfg: ModelConfig) -> Iterator[str]:
    """Yield the path of every batch-norm running-statistics buffer."""
    for gi in range(cfg.num_groups):
        for bj in range(cfg.chbs_per_group[gi]):
            yield f"group{gi}.chb{bj}.bn1"
            yield f"group{gi}.chb{bj}.bn2"


class ModelParams:
    """Named learnable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], bn_stats: dict[str, BnRunningStats]):
        self.config = config
        self.tensors = tensors
        self.bn_stats = bn_stats
        self._touched: set[str] | None = None

    def __getitem__(self, path: str) -> Tensor:
        if self._touched is not None:
            self._touched.add(path)
        try:
            return self.tensors[path]
        except KeyError:
            raise KeyError(f"missing model parameter {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def paths(self) -> list[str]:
        return list(self.tensors)

    def stats(self, path: str) -> BnRunningStats:
        if self._touched is not None:
            self._touched.add(path + ".running")
        return self.bn_stats[path]

    def track_usage(self) -> set[str]:
        self._touched = set()
        return self._touched

    def stop_tracking(self) -> None:
        self._touched = None

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Reproducible fan-in-scaled normal initialization.

    Conv weights ~ N(0, 2 / fan_in), biases zero, BN gamma 1 / beta 0, the
    per-block scaling coefficient at its configured initial value.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for path, kind, shape in walk_params(config):
        if kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind == "bias" or kind == "bn_beta":
            data = np.zeros(shape)
        elif kind == "bn_gamma":
            data = np.ones(shape)
        elif kind == "lambda":
            data = np.asarray(config.lambda_init)
        elif kind == "ca_sigma":
            data = np.full(shape, CA_SIGMA_INIT)
        else:  # pragma: no cover - walker kinds are closed
            raise ConfigError(f"unknown parameter kind {kind!r}")
        tensors[path] = Tensor(data.astype(dtype), requires_grad=True)
    bn_stats = {path: BnRunningStats() for path in walk_bn_stats(config)}
    return ModelParams(config, tensors, bn_stats)


def count_params(config: ModelConfig) -> int:
    """Exact learnable-scalar count (weights, biases, BN affine, lambdas)."""
    return sum(int(np.prod(shape)) if shape else 1 for _, _, shape in walk_params(config))


# ---------------------------------------------------------------------------
# block forwards


def la_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, prefix: str) -> Tensor:
    """Local aggregation: pointwise expand, group conv, pointwise compress."""
    e = cfg.la_channels
    h = T.pointwise_conv(x, params[prefix + ".pw1.weight"], params[prefix + ".pw1.bias"])
    h = T.activation(h)
    gc_spec = ConvSpec(e, e, (3, 3), groups=e // cfg.la_group_size)
    h = T.group_conv(h, params[prefix + ".gc.weight"], params[prefix + ".gc.bias"], gc_spec)
    return T.pointwise_conv(h, params[prefix + ".pw2.weight"], params[prefix + ".pw2.bias"])


def mrfe_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, prefix: str) -> Tensor:
    """Multi-scale expansion: even channel split, per-branch depthwise kernels."""
    branches = T.split_channels(x, len(cfg.mrfe_kernels))
    outs = []
    for k, piece in zip(cfg.mrfe_kernels, branches):
        if k == 0:
            outs.append(piece)
        else:
            outs.append(
                T.depthwise_conv(
                    piece,
                    params[f"{prefix}.dw{k}.weight"],
                    params[f"{prefix}.dw{k}.bias"],
                )
            )
    return T.concat_channels(outs)


def gcp_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, prefix: str) -> Tensor:
    """Global context prior: pooled attention map multiplied back onto x."""
    h, w = x.data.shape[2], x.data.shape[3]
    att = T.max_pool(x, kernel=cfg.gcp_pool_factor, stride=cfg.gcp_pool_factor)
    att = T.depthwise_conv(att, params[prefix + ".dw.weight"], params[prefix + ".dw.bias"])
    att = T.pointwise_conv(att, params[prefix + ".pw.weight"], params[prefix + ".pw.bias"])
    att = T.bilinear_upsample(att, h, w)
    return T.ew_mul(att, x)


def ffn_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, prefix: str, kind: str | None = None) -> Tensor:
    """Shape-preserving channel mixer in one of three configurable flavors."""
    kind = kind or cfg.ffn_kind
    if kind == "plain":
        h = T.pointwise_conv(x, params[prefix + ".pw1.weight"], params[prefix + ".pw1.bias"])
        h = T.activation(h)
        return T.pointwise_conv(h, params[prefix + ".pw2.weight"], params[prefix + ".pw2.bias"])
    if kind == "gate":
        g = T.pointwise_conv(x, params[prefix + ".pw_gate.weight"], params[prefix + ".pw_gate.bias"])
        v = T.pointwise_conv(x, params[prefix + ".pw_val.weight"], params[prefix + ".pw_val.bias"])
        h = T.ew_mul(T.activation(g), v)
        return T.pointwise_conv(h, params[prefix + ".pw2.weight"], params[prefix + ".pw2.bias"])
    if kind == "channel_aggregation":
        # gate flavor augmented with a depthwise 3x3 and a learned
        # channel-aggregation reweighting (approximation, see README)
        v = T.pointwise_conv(x, params[prefix + ".pw1.weight"], params[prefix + ".pw1.bias"])
        v = T.depthwise_conv(v, params[prefix + ".dw.weight"], params[prefix + ".dw.bias"])
        v = T.activation(v)
        s = T.pointwise_conv(v, params[prefix + ".agg.weight"], params[prefix + ".agg.bias"])
        s = T.activation(s)
        hidden = v.data.shape[1]
        diff = T.ew_sub(v, T.broadcast_channels(s, hidden))
        v = T.ew_add(v, T.channel_affine(diff, params[prefix + ".sigma"]))
        return T.pointwise_conv(v, params[prefix + ".pw2.weight"], params[prefix + ".pw2.bias"])
    raise ConfigError(f"unknown ffn kind {kind!r}")


def chb_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, prefix: str, mode: str = "train") -> Tensor:
    """Context-harnessing block with its residual connection."""
    xn = T.batch_norm(
        x,
        params[prefix + ".bn1.gamma"],
        params[prefix + ".bn1.beta"],
        params.stats(prefix + ".bn1"),
        mode,
    )
    xp = la_forward(xn, params, cfg, prefix + ".la")
    fused = T.ew_add(
        mrfe_forward(xp, params, cfg, prefix + ".mrfe"),
        T.scalar_scale(gcp_forward(xp, params, cfg, prefix + ".gcp"), params[prefix + ".lambda"]),
    )
    fused = T.batch_norm(
        fused,
        params[prefix + ".bn2.gamma"],
        params[prefix + ".bn2.beta"],
        params.stats(prefix + ".bn2"),
        mode,
    )
    return T.ew_add(ffn_forward(fused, params, cfg, prefix + ".ffn"), x)


def cofb_forward(
    x: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    prefix: str,
    return_stages: bool = False,
):
    """Cross-scale fusion: cascaded large depthwise kernels gate the input.

    With ``return_stages`` the per-stage cascade outputs are also returned
    (used by the receptive-field tooling).
    """
    yhat = T.pointwise_conv(x, params[prefix + ".pw1.weight"], params[prefix + ".pw1.bias"])
    yhat = T.activation(yhat)
    h = yhat
    stages = []
    for i in range(1, len(cfg.cofb_kernels) + 1):
        h = T.depthwise_conv(h, params[f"{prefix}.dw{i}.weight"], params[f"{prefix}.dw{i}.bias"])
        stages.append(h)
    ybar = T.pointwise_conv(h, params[prefix + ".pw2.weight"], params[prefix + ".pw2.bias"])
    out = T.pointwise_conv(
        T.ew_mul(ybar, yhat), params[prefix + ".pw3.weight"], params[prefix + ".pw3.bias"]
    )
    if return_stages:
        return out, yhat, stages, ybar
    return out


def chrg_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, group_index: int, mode: str = "train") -> Tensor:
    """Residual group: a chain of CHBs closed by one COFB plus the skip."""
    h = x
    for bj in range(cfg.chbs_per_group[group_index]):
        h = chb_forward(h, params, cfg, f"group{group_index}.chb{bj}", mode)
    h = cofb_forward(h, params, cfg, f"group{group_index}.cofb")
    return T.ew_add(h, x)


def echosr_forward(ilr: Tensor, params: ModelParams, cfg: ModelConfig, mode: str = "eval") -> Tensor:
    """Full network: shallow conv, stacked residual groups, upsampling head."""
    if ilr.data.ndim != 4 or ilr.data.shape[1] != 3:
        raise T.ShapeError(f"expected an (n, 3, h, w) input, got shape {ilr.data.shape}")
    conv_in_spec = ConvSpec(3, cfg.channels, (3, 3))
    x0 = T.conv2d(ilr, params["head.conv_in.weight"], params["head.conv_in.bias"], conv_in_spec)
    x = x0
    for gi in range(cfg.num_groups):
        x = chrg_forward(x, params, cfg, gi, mode)
    feat = T.ew_add(x0, x)
    head_spec = ConvSpec(cfg.channels, 3 * cfg.scale**2, (3, 3))
    out = T.conv2d(feat, params["head.conv_out.weight"], params["head.conv_out.bias"], head_spec)
    return T.pixel_shuffle(out, cfg.scale)
