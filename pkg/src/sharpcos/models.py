"""Model zoo: every cell of the layer x activation x pooling x normalisation grid.

Two families are provided. ``rohrer_small`` / ``rohrer_100k`` are three
blocks of (3x3 extractor -> [batchnorm] -> [relu] -> 2x2 pool) with widths
16/32/64 and 32/64/128, giving about 24K and 95K parameters. ``mini_resnet``
is a CIFAR-style residual net: a stem extractor and pool, then three stages of
two basic blocks (16/32/64 channels) with parameter-free shortcuts.
Every model ends in global average pooling, flatten and a 10-way linear head.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError

LAYER_KINDS = ("conv", "cossim", "scs", "sdp")
ACTIVATIONS = ("relu", "none")
POOLINGS = ("maxpool", "maxabspool")
NORMALIZATIONS = ("batchnorm", "none")
ARCH_FAMILIES = ("rohrer_small", "rohrer_100k", "mini_resnet")

ROHRER_WIDTHS = {"rohrer_small": (16, 32, 64), "rohrer_100k": (32, 64, 128)}
PARAM_BUDGETS = {"rohrer_small": (20_000, 30_000), "rohrer_100k": (90_000, 110_000)}
RESNET_WIDTHS = (16, 32, 64)
NUM_CLASSES = 10


@dataclass(frozen=True)
class LayerVariantConfig:
    layer_kind: str = "scs"
    activation: str = "none"
    pooling: str = "maxpool"
    normalization: str = "none"
    p_mode: str = "learned"
    arch_family: str = "rohrer_small"
    seed: int = 0

    def __post_init__(self):
        for name, allowed in (("layer_kind", LAYER_KINDS), ("activation", ACTIVATIONS),
                              ("pooling", POOLINGS), ("normalization", NORMALIZATIONS),
                              ("arch_family", ARCH_FAMILIES)):
            value = getattr(self, name)
            if value not in allowed:
                raise ConfigError(f"{name}={value!r} not in {allowed}", key=name)
        L.parse_p_mode(self.p_mode)
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit int, got {self.seed!r}", key="seed")

    @property
    def known_degraded(self) -> bool:
        # plain convolutions need an explicit nonlinearity
        return self.layer_kind == "conv" and self.activation == "none"

    @property
    def name(self) -> str:
        p = "" if self.layer_kind in ("conv", "cossim") or self.p_mode == "learned" \
            else "-p" + str(L.parse_p_mode(self.p_mode))
        return (f"{self.arch_family}-{self.layer_kind}{p}-{self.activation}-{self.pooling}"
                f"-{self.normalization}-s{self.seed}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> LayerVariantConfig:
        return cls(**d)


@dataclass
class ModelDescriptor:
    config: LayerVariantConfig
    layers: list[tuple[str, str, tuple[int, ...]]]   # (name, type, output shape)
    parameter_count: int
    parameter_shapes: list[tuple[str, tuple[int, ...]]]
    telemetry_layers: list[str]
    known_degraded: bool = False
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config.to_dict(),
            "layers": [[n, t, list(s)] for n, t, s in self.layers],
            "parameter_count": self.parameter_count,
            "parameter_shapes": [[n, list(s)] for n, s in self.parameter_shapes],
            "telemetry_layers": self.telemetry_layers,
            "known_degraded": self.known_degraded,
        }, sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


class _Stage(L.Module):
    """extractor -> [batchnorm] -> [activation] -> [pool]."""

    def __init__(self, cfg: LayerVariantConfig, cin: int, cout: int, *, stride=1,
                 pool: bool, rng, dtype, activate=True):
        super().__init__()
        self.extract = make_extractor(cfg, cin, cout, 3, stride, 1, rng=rng, dtype=dtype)
        self.norm = L.BatchNorm2d(cout, dtype=dtype) if cfg.normalization == "batchnorm" \
            else L.Identity()
        self.act = L.ReLU() if cfg.activation == "relu" and activate else L.Identity()
        self.pool = make_pool(cfg) if pool else L.Identity()

    def forward(self, x):
        return self.pool(self.act(self.norm(self.extract(x))))


class BasicBlock(L.Module):
    def __init__(self, cfg, cin: int, cout: int, stride: int, *, rng, dtype):
        super().__init__()
        self.stride, self.extra_channels = stride, cout - cin
        self.branch1 = _Stage(cfg, cin, cout, stride=stride, pool=False, rng=rng, dtype=dtype)
        self.branch2 = _Stage(cfg, cout, cout, pool=False, rng=rng, dtype=dtype, activate=False)
        self.act = L.ReLU() if cfg.activation == "relu" else L.Identity()

    def shortcut(self, x):
        if self.stride != 1:
            x = x[:, :, ::self.stride, ::self.stride]
        if self.extra_channels:
            lo = self.extra_channels // 2
            x = T.pad(x, ((0, 0), (lo, self.extra_channels - lo), (0, 0), (0, 0)))
        return x

    def forward(self, x):
        return self.act(self.branch2(self.branch1(x)) + self.shortcut(x))


def make_extractor(cfg: LayerVariantConfig, cin, cout, k, stride, padding, *, rng, dtype):
    cls = L.EXTRACTORS[cfg.layer_kind]
    kwargs = {"rng": rng, "dtype": dtype}
    if cfg.layer_kind in ("scs", "sdp"):
        kwargs["p_mode"] = cfg.p_mode
    return cls(cin, cout, k, stride, padding, **kwargs)


def make_pool(cfg: LayerVariantConfig):
    return L.MaxAbsPool2d(2) if cfg.pooling == "maxabspool" else L.MaxPool2d(2)


class Net(L.Module):
    """A chain of named stages followed by the shared classifier head."""

    def __init__(self, cfg: LayerVariantConfig, stages: list[tuple[str, L.Module]],
                 width: int, *, rng, dtype):
        super().__init__()
        self.config = cfg
        self.stage_names = [name for name, _ in stages]
        for name, stage in stages:
            setattr(self, name, stage)
        self.gap = L.AdaptiveAvgPool2d((1, 1))
        self.flatten = L.Flatten()
        self.fc = L.Linear(width, NUM_CLASSES, rng=rng, dtype=dtype)
        # per-channel input standardisation; identity unless set_input_stats() is called
        self.register_buffer("input_mean", np.zeros(3, dtype=dtype))
        self.register_buffer("input_std", np.ones(3, dtype=dtype))

    def set_input_stats(self, mean, std) -> None:
        self.input_mean[...] = mean
        self.input_std[...] = std

    def forward(self, x, check_finite: bool = False, trace: list | None = None):
        x = T.as_tensor(x)
        if np.any(self.input_mean != 0) or np.any(self.input_std != 1):
            x = (x - self.input_mean.reshape(1, -1, 1, 1)) / self.input_std.reshape(1, -1, 1, 1)
        for name in self.stage_names + ["gap", "flatten", "fc"]:
            layer = getattr(self, name)
            x = layer(x)
            if check_finite:
                T.assert_finite(x, name)
            if trace is not None:
                trace.append((name, type(layer).__name__, tuple(x.shape)))
        return x

    def __call__(self, x, **kwargs):
        return self.forward(x, **kwargs)

    def telemetry_layers(self) -> list[tuple[str, L.Module]]:
        """Modules that own a ``weight`` parameter, in declaration order."""
        return [(name, m) for name, m in self.named_modules()
                if name and isinstance(m._params.get("weight"), L.Parameter)]

    def find_finite_violation(self, x) -> str | None:
        """Name of the first stage whose output is non-finite, if any."""
        from .errors import NonFiniteError
        with T.no_grad():
            try:
                self.forward(x, check_finite=True)
            except NonFiniteError as exc:
                return exc.where
        return None


def _rohrer(cfg, rng, dtype) -> Net:
    widths = ROHRER_WIDTHS[cfg.arch_family]
    stages, cin = [], 3
    for i, w in enumerate(widths, 1):
        stages.append((f"block{i}", _Stage(cfg, cin, w, pool=True, rng=rng, dtype=dtype)))
        cin = w
    return Net(cfg, stages, cin, rng=rng, dtype=dtype)


def _mini_resnet(cfg, rng, dtype) -> Net:
    stages = [("stem", _Stage(cfg, 3, RESNET_WIDTHS[0], pool=True, rng=rng, dtype=dtype))]
    cin = RESNET_WIDTHS[0]
    for s, w in enumerate(RESNET_WIDTHS, 1):
        for b in range(2):
            stride = 2 if (b == 0 and s > 1) else 1
            stages.append((f"stage{s}_{b}", BasicBlock(cfg, cin, w, stride, rng=rng, dtype=dtype)))
            cin = w
    return Net(cfg, stages, cin, rng=rng, dtype=dtype)


def build_model(cfg: LayerVariantConfig, dtype=np.float64,
                input_shape=(1, 3, 32, 32)) -> tuple[Net, ModelDescriptor]:
    """Construct the model for one grid cell and describe it.

    All draws come from a single generator seeded by ``cfg.seed`` and happen in
    the same order for every layer kind, so variants of one (family, seed)
    start from identical kernels.
    """
    if cfg.arch_family not in ARCH_FAMILIES:
        raise ConfigError(f"unknown architecture family {cfg.arch_family!r}", key="arch_family")
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(dtype)
    model = _rohrer(cfg, rng, dtype) if cfg.arch_family in ROHRER_WIDTHS \
        else _mini_resnet(cfg, rng, dtype)
    trace: list = []
    model.eval()
    with T.no_grad():
        model.forward(np.zeros(input_shape, dtype=dtype), trace=trace)
    model.train()
    desc = ModelDescriptor(
        config=cfg,
        layers=trace,
        parameter_count=model.num_parameters(),
        parameter_shapes=[(n, tuple(p.shape)) for n, p in model.named_parameters()],
        telemetry_layers=[n for n, _ in model.telemetry_layers()],
        known_degraded=cfg.known_degraded,
        metadata={"dtype": str(dtype)},
    )
    return model, desc
