"""Full U-shape model: dual encoders, fusion, decoder, channel interaction, head.

The model is a parameter struct plus pure ``forward``/``predict`` functions.
``build`` initializes every learnable tensor deterministically from a seed;
checkpoints round-trip the registry (parameters and running buffers) bit
exactly together with a self-describing config header.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import ParamRegistry
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .tensor import ShapeError, Tensor

__all__ = [
    "SpiroNetConfig",
    "SpiroNetParams",
    "ConfigError",
    "build",
    "forward",
    "loss_bce",
    "predict",
    "variant_from_table1",
    "count_params",
    "save_checkpoint",
    "load_checkpoint",
    "VARIANTS",
]

# Ablation rows: which of {spatial encoder, frequency encoder, cross-attention,
# channel interaction} each named variant enables.
VARIANTS: dict[str, tuple[bool, bool, bool, bool]] = {
    "I": (True, False, False, False),
    "II": (False, True, False, False),
    "III": (True, True, False, False),
    "IV": (True, True, True, False),
    "V": (True, False, False, True),
    "VI": (False, True, False, True),
    "VII": (True, True, False, True),
    "full": (True, True, True, True),
}


class ConfigError(ValueError):
    """Invalid architecture configuration."""


@dataclass(frozen=True)
class SpiroNetConfig:
    input_size: int = 64
    stages: int = 4
    base_channels: int = 16
    d0_min: int = 8
    ppm_bins: tuple[int, ...] = (1, 2, 4, 8)
    use_spatial_encoder: bool = True
    use_frequency_encoder: bool = True
    use_cross_attention: bool = True
    use_tci: bool = True
    precision: str = "f32"
    tci_inner_dim: int | None = None

    def validate(self) -> None:
        s = self.input_size
        if s < 4 or (s & (s - 1)) != 0:
            raise ConfigError(f"input_size {s} must be a power of two >= 4")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if s % (2 ** self.stages) != 0:
            raise ConfigError(f"input_size {s} not divisible by 2^stages={2 ** self.stages}")
        if s % 4 != 0:
            raise ConfigError(f"input_size {s} not divisible by 4")
        if not (self.use_spatial_encoder or self.use_frequency_encoder):
            raise ConfigError("at least one encoder must be enabled")
        if self.use_cross_attention and not (self.use_spatial_encoder and self.use_frequency_encoder):
            raise ConfigError("cross-attention requires both encoders")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if not self.ppm_bins:
            raise ConfigError("ppm_bins must be non-empty")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def stage_channels(self) -> list[int]:
        return [self.base_channels * (2 ** i) for i in range(self.stages)]

    def d0(self, c: int) -> int:
        return max(self.d0_min, c // 2)


@dataclass
class SpiroNetParams:
    config: SpiroNetConfig
    registry: ParamRegistry
    stem: B.ConvBnParams = None
    enc_spa: list[B.SpatialBlockParams] = field(default_factory=list)
    enc_freq: list[B.FrequencyBlockParams] = field(default_factory=list)
    fuse: list[B.CrossAttentionParams] = field(default_factory=list)
    bottleneck: B.SpatialBlockParams = None
    dec_up: list[B.ConvParams] = field(default_factory=list)
    dec_block: list[B.SpatialBlockParams] = field(default_factory=list)
    tci: B.TciParams | None = None
    head: B.ConvParams = None

    def named_parameters(self) -> dict[str, Tensor]:
        return self.registry.params

    def named_buffers(self) -> dict[str, np.ndarray]:
        return self.registry.buffers

    def parameters(self) -> list[Tensor]:
        return list(self.registry.params.values())


def count_params(params: SpiroNetParams) -> int:
    return T.count_params(params.parameters())


def build(config: SpiroNetConfig, rng_seed: int) -> SpiroNetParams:
    """Deterministically initialize all parameters for the given config."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    reg = ParamRegistry(config.dtype)
    p = SpiroNetParams(config=config, registry=reg)
    chans = config.stage_channels()

    p.stem = B.init_conv_bn(reg, rng, "stem", chans[0], 1, 3)

    cin = chans[0]
    for i, c in enumerate(chans):
        if config.use_spatial_encoder:
            p.enc_spa.append(B.init_spatial_block(reg, rng, f"enc_spa.{i}", cin, c))
        if config.use_frequency_encoder:
            p.enc_freq.append(B.init_frequency_block(reg, rng, f"enc_freq.{i}", cin, c))
        if config.use_cross_attention:
            p.fuse.append(B.init_cross_attention(reg, rng, f"fuse.{i}", c, config.d0(c)))
        cin = c

    p.bottleneck = B.init_spatial_block(reg, rng, "bottleneck", chans[-1], chans[-1])

    prev = chans[-1]
    for i in reversed(range(config.stages)):
        c = chans[i]
        up_w = reg.param(f"dec.{i}.up.w", B._he_normal(rng, (prev, c, 2, 2), prev * 4))
        up_b = reg.param(f"dec.{i}.up.b", np.zeros(c))
        p.dec_up.append(B.ConvParams(up_w, up_b))
        p.dec_block.append(B.init_spatial_block(reg, rng, f"dec.{i}.block", 2 * c, c))
        prev = c
    p.dec_up.reverse()
    p.dec_block.reverse()

    if config.use_tci:
        d = (config.input_size // 4) ** 2
        p.tci = B.init_tci(reg, rng, "tci", chans[0], d, config.tci_inner_dim)

    p.head = B.init_conv(reg, rng, "head", 1, chans[0], 1)
    return p


def forward(params: SpiroNetParams, x: Tensor, train: bool) -> Tensor:
    """Compute per-pixel logits for an N x 1 x H x W input."""
    cfg = params.config
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise ShapeError(f"forward: expected N x 1 x H x W, got {x.data.shape}")
    if x.data.shape[2] != cfg.input_size or x.data.shape[3] != cfg.input_size:
        raise ShapeError(
            f"forward: spatial size {x.data.shape[2:]} != configured {cfg.input_size}"
        )
    if x.data.dtype != cfg.dtype:
        raise ShapeError(f"forward: input dtype {x.data.dtype} != configured {cfg.dtype}")

    f0 = B.conv_bn_relu(x, params.stem, train, padding=1)
    cur_spa = cur_freq = f0
    skips: list[Tensor] = []
    for i in range(cfg.stages):
        fs = B.spatial_encoder_block(cur_spa, params.enc_spa[i], train) if cfg.use_spatial_encoder else None
        ff = B.frequency_encoder_block(cur_freq, params.enc_freq[i], train) if cfg.use_frequency_encoder else None
        if fs is not None and ff is not None:
            if cfg.use_cross_attention:
                skip = B.cross_attention_fuse(fs, ff, params.fuse[i], cfg.ppm_bins, train)
            else:
                skip = T.add(fs, ff)
        else:
            skip = fs if fs is not None else ff
        skips.append(skip)
        if i + 1 < cfg.stages:
            if fs is not None:
                cur_spa = T.maxpool2d(fs, 2, 2)
            if ff is not None:
                cur_freq = T.maxpool2d(ff, 2, 2)

    cur = B.spatial_encoder_block(T.maxpool2d(skips[-1], 2, 2), params.bottleneck, train)
    for i in reversed(range(cfg.stages)):
        cur = T.conv2d_transpose(cur, params.dec_up[i].w, params.dec_up[i].b, stride=2)
        cur = T.concat_channels(cur, skips[i])
        cur = B.spatial_encoder_block(cur, params.dec_block[i], train)

    if cfg.use_tci:
        cur = B.tci_forward(cur, params.tci, train)
    return T.conv2d(cur, params.head.w, params.head.b)


def loss_bce(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean binary cross entropy on logits (stable form)."""
    return T.bce_with_logits(logits, gt)


def predict(params: SpiroNetParams, x: Tensor) -> np.ndarray:
    """Binary mask: sigmoid(logit) >= 0.5 maps to 1 (ties at exactly 0.5 go to 1)."""
    with T.no_grad():
        logits = forward(params, x, train=False)
    return (logits.data >= 0.0).astype(np.uint8)


def variant_from_table1(name: str, **overrides) -> SpiroNetConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; valid: {sorted(VARIANTS)}")
    se, fe, ca, tci = VARIANTS[name]
    cfg = SpiroNetConfig(
        use_spatial_encoder=se,
        use_frequency_encoder=fe,
        use_cross_attention=ca,
        use_tci=tci,
    )
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "input_size",
    "stages",
    "base_channels",
    "d0_min",
    "precision",
)


def _config_header(cfg: SpiroNetConfig) -> dict[str, str]:
    hdr = {k: str(getattr(cfg, k)) for k in _CONFIG_KEYS if k != "precision"}
    hdr["ppm_bins"] = ",".join(str(b) for b in cfg.ppm_bins)
    hdr["use_spatial_encoder"] = str(int(cfg.use_spatial_encoder))
    hdr["use_frequency_encoder"] = str(int(cfg.use_frequency_encoder))
    hdr["use_cross_attention"] = str(int(cfg.use_cross_attention))
    hdr["use_tci"] = str(int(cfg.use_tci))
    hdr["tci_inner_dim"] = "" if cfg.tci_inner_dim is None else str(cfg.tci_inner_dim)
    return hdr


def config_from_header(meta: dict[str, str]) -> SpiroNetConfig:
    try:
        return SpiroNetConfig(
            input_size=int(meta["input_size"]),
            stages=int(meta["stages"]),
            base_channels=int(meta["base_channels"]),
            d0_min=int(meta["d0_min"]),
            ppm_bins=tuple(int(b) for b in meta["ppm_bins"].split(",")),
            use_spatial_encoder=meta["use_spatial_encoder"] == "1",
            use_frequency_encoder=meta["use_frequency_encoder"] == "1",
            use_cross_attention=meta["use_cross_attention"] == "1",
            use_tci=meta["use_tci"] == "1",
            precision=meta["precision"],
            tci_inner_dim=int(meta["tci_inner_dim"]) if meta.get("tci_inner_dim") else None,
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint header missing key {exc}") from exc


def save_checkpoint(path, params: SpiroNetParams, extra: dict[str, str] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in params.named_parameters().items():
        tensors[f"param.{name}"] = t.data
    for name, arr in params.named_buffers().items():
        tensors[f"buffer.{name}"] = arr
    header = _config_header(params.config)
    header.update(extra or {})
    save_tensors(path, tensors, params.config.precision, header)


def load_checkpoint(path) -> tuple[SpiroNetParams, dict[str, str]]:
    """Rebuild a model from a checkpoint; values are restored bit-exactly."""
    meta, tensors = load_tensors(path)
    cfg = config_from_header(meta)
    params = build(cfg, rng_seed=0)
    assign_state(params, tensors, path)
    return params, meta


def assign_state(params: SpiroNetParams, tensors: dict[str, np.ndarray], src="<state>") -> None:
    expected = {f"param.{n}" for n in params.named_parameters()} | {
        f"buffer.{n}" for n in params.named_buffers()
    }
    got = set(tensors)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise CheckpointError(f"{src}: state mismatch (missing {missing}, unexpected {extra})")
    for name, t in params.named_parameters().items():
        arr = tensors[f"param.{name}"]
        if arr.size != t.data.size:
            raise CheckpointError(f"{src}: size mismatch for {name}")
        t.data = arr.reshape(t.data.shape).astype(params.config.dtype)
    for name, buf in params.named_buffers().items():
        arr = tensors[f"buffer.{name}"]
        if arr.size != buf.size:
            raise CheckpointError(f"{src}: size mismatch for buffer {name}")
        buf[...] = arr.reshape(buf.shape)
