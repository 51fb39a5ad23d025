"""Model configuration: encoder variants, decoders, heads and preprocessing."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

from .errors import ConfigurationError


class Variant(str, Enum):
    RGB_ONLY = "rgb"
    SWINV2_T_4CH = "swinv2-t"
    SWINV2_T_MULTI = "swinv2-t-multi"
    SWINV2_T_128_MULTI = "swinv2-t-128-multi"

    @property
    def uses_depth(self) -> bool:
        return self is not Variant.RGB_ONLY

    @property
    def split_embedding(self) -> bool:
        return self in (Variant.SWINV2_T_MULTI, Variant.SWINV2_T_128_MULTI)


@dataclass(frozen=True)
class EncoderConfig:
    variant: Variant = Variant.SWINV2_T_128_MULTI
    stem_channels: int = 128
    rgb_embed_channels: int = 96
    depth_embed_channels: int = 32
    depths_per_stage: tuple[int, int, int, int] = (2, 2, 6, 2)
    window_size: int = 8
    head_dim: int = 32
    mlp_ratio: int = 4
    cpb_hidden: int = 512
    patch_size: int = 4

    def stage_channels(self) -> list[int]:
        return [self.stem_channels * 2 ** s for s in range(4)]

    def stage_heads(self) -> list[int]:
        return [c // self.head_dim for c in self.stage_channels()]

    def embed_groups(self) -> list[int]:
        """Channel groups normalized independently after the patch embedding."""
        if self.variant.split_embedding:
            return [self.rgb_embed_channels, self.depth_embed_channels]
        return [self.stem_channels]

    def validate(self) -> None:
        v = Variant(self.variant)
        if self.stem_channels != self.rgb_embed_channels + self.depth_embed_channels:
            raise ConfigurationError(
                f"stem {self.stem_channels} != rgb {self.rgb_embed_channels} "
                f"+ depth {self.depth_embed_channels}")
        if v.split_embedding:
            if self.depth_embed_channels <= 0:
                raise ConfigurationError(f"{v.value} needs depth embedding channels")
            for n in (self.rgb_embed_channels, self.depth_embed_channels):
                if n % self.head_dim:
                    raise ConfigurationError(
                        f"{v.value}: embedding group of {n} channels is not a "
                        f"multiple of head_dim {self.head_dim}")
        elif self.depth_embed_channels != 0:
            raise ConfigurationError(f"{v.value} embeds all inputs jointly; depth_embed must be 0")
        for c in self.stage_channels():
            if c % self.head_dim:
                raise ConfigurationError(
                    f"stage width {c} not divisible by head_dim {self.head_dim}")
        if len(self.depths_per_stage) != 4 or min(self.depths_per_stage) < 1:
            raise ConfigurationError("depths_per_stage needs four positive entries")
        if self.window_size < 2 or self.window_size % 2:
            raise ConfigurationError("window_size must be even and >= 2")


@dataclass(frozen=True)
class ContextConfig:
    bins: tuple[int, ...] = (1, 2, 4, 8)
    branch_channels: int = 256
    out_channels: int = 512


@dataclass(frozen=True)
class DecoderConfig:
    # Dense decoder per branch: "segformer" or "emsanet".
    semantic: str = "segformer"
    instance: str = "emsanet"
    emsanet_channels: tuple[int, int, int] = (512, 256, 128)
    segformer_channels: tuple[int, int, int, int] = (256, 128, 64, 64)
    segformer_hidden: int = 256
    segformer_out: int = 64


@dataclass(frozen=True)
class PreprocessConfig:
    rgb_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    rgb_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    depth_scale: float = 1.0 / 5000.0
    depth_mean: float = 0.55
    depth_std: float = 0.35


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    num_classes: int = 40
    num_scene_classes: int = 10
    # Label ids (1-based, 0 = void) of classes without instances.
    stuff_classes: tuple[int, ...] = (1, 2, 22)
    layer_norm_eps: float = 1e-5

    def validate(self) -> None:
        self.encoder.validate()
        for name in (self.decoder.semantic, self.decoder.instance):
            if name not in ("segformer", "emsanet"):
                raise ConfigurationError(f"unknown decoder {name!r}")
        if self.num_classes < 1 or self.num_scene_classes < 1:
            raise ConfigurationError("class counts must be positive")
        if any(c < 1 or c > self.num_classes for c in self.stuff_classes):
            raise ConfigurationError("stuff class ids must lie in 1..num_classes")
        if 1 not in self.context.bins:
            raise ConfigurationError("context bins must include the global bin 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["variant"] = Variant(self.encoder.variant).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            enc = dict(d["encoder"])
            enc["variant"] = Variant(enc["variant"])
            enc["depths_per_stage"] = tuple(enc["depths_per_stage"])
            ctx = dict(d["context"])
            ctx["bins"] = tuple(ctx["bins"])
            dec = dict(d["decoder"])
            for k in ("emsanet_channels", "segformer_channels"):
                dec[k] = tuple(dec[k])
            pre = {k: tuple(v) if isinstance(v, list) else v
                   for k, v in d["preprocess"].items()}
            cfg = cls(
                encoder=EncoderConfig(**enc),
                context=ContextConfig(**ctx),
                decoder=DecoderConfig(**dec),
                preprocess=PreprocessConfig(**pre),
                num_classes=int(d["num_classes"]),
                num_scene_classes=int(d["num_scene_classes"]),
                stuff_classes=tuple(d["stuff_classes"]),
                layer_norm_eps=float(d["layer_norm_eps"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed model config: {exc}") from None
        cfg.validate()
        return cfg


_VARIANT_WIDTHS = {
    Variant.RGB_ONLY: (96, 96, 0),
    Variant.SWINV2_T_4CH: (96, 96, 0),
    Variant.SWINV2_T_MULTI: (96, 64, 32),
    Variant.SWINV2_T_128_MULTI: (128, 96, 32),
}


def reference_config(variant: Variant | str = Variant.SWINV2_T_128_MULTI,
                     semantic_decoder: str = "segformer",
                     instance_decoder: str = "emsanet") -> ModelConfig:
    """Full-size configuration for one of the four encoder variants."""
    variant = Variant(variant)
    stem, rgb, depth = _VARIANT_WIDTHS[variant]
    cfg = ModelConfig(
        encoder=EncoderConfig(variant=variant, stem_channels=stem,
                              rgb_embed_channels=rgb, depth_embed_channels=depth),
        decoder=DecoderConfig(semantic=semantic_decoder, instance=instance_decoder),
    )
    cfg.validate()
    return cfg


def tiny_config(variant: Variant | str = Variant.SWINV2_T_128_MULTI,
                semantic_decoder: str = "segformer",
                instance_decoder: str = "emsanet") -> ModelConfig:
    """Narrow, shallow configuration for tests and quick benchmarks."""
    variant = Variant(variant)
    stem, rgb, depth = {
        Variant.RGB_ONLY: (64, 64, 0),
        Variant.SWINV2_T_4CH: (64, 64, 0),
        Variant.SWINV2_T_MULTI: (64, 32, 32),
        Variant.SWINV2_T_128_MULTI: (96, 64, 32),
    }[variant]
    cfg = ModelConfig(
        encoder=EncoderConfig(variant=variant, stem_channels=stem, rgb_embed_channels=rgb,
                              depth_embed_channels=depth, depths_per_stage=(2, 2, 2, 2),
                              cpb_hidden=64),
        context=ContextConfig(bins=(1, 2, 4, 8), branch_channels=32, out_channels=64),
        decoder=DecoderConfig(semantic=semantic_decoder, instance=instance_decoder,
                              emsanet_channels=(64, 48, 32),
                              segformer_channels=(64, 32, 16, 16),
                              segformer_hidden=64, segformer_out=32),
        num_classes=40,
        num_scene_classes=10,
    )
    cfg.validate()
    return cfg
