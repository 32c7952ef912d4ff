"""Named backbones and operating points."""

from __future__ import annotations

from dataclasses import dataclass

from gearkv.gear import GearConfig
from gearkv.quant import GroupingScheme

BACKBONES = {
    # key scheme, value scheme
    "per-token-g64": (GroupingScheme.per_token(64), GroupingScheme.per_token(64)),
    "kcvt": (GroupingScheme.per_channel_vector(), GroupingScheme.per_token_vector()),
    "kivi-g64": (GroupingScheme.per_channel(64), GroupingScheme.per_token(64)),
}


def backbone_config(name: str, **overrides) -> GearConfig:
    try:
        key, value = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None
    return GearConfig(key_scheme=key, value_scheme=value, **overrides)


@dataclass(frozen=True)
class Preset:
    backbone: str
    settings: dict
    # accounting workload and the reported KV size, where one exists
    n_prefill: int = 900
    n_gen: int = 256
    d: int = 1024
    heads: int = 8
    reported_percent: float | None = None

    def config(self) -> GearConfig:
        return backbone_config(self.backbone, **self.settings)


_QUANT_ONLY = {"sparsity": 0.0, "rank_prefill": 0, "rank_decode": 0}

PRESETS = {
    # plain backbones
    "fp16": Preset("per-token-g64", {"bits": 16, **_QUANT_ONLY, "buffer_size": 1}),
    "kcvt4": Preset("kcvt", {"bits": 4, **_QUANT_ONLY, "buffer_size": 20}),
    "kivi2": Preset("kivi-g64", {"bits": 2, **_QUANT_ONLY, "buffer_size": 64}),
    # error-reduced operating points
    "gear-l-kcvt4": Preset("kcvt", {"bits": 4, "sparsity": 0.0, "rank_prefill": 4, "rank_decode": 2, "buffer_size": 20}),
    "gear-kcvt4": Preset("kcvt", {"bits": 4, "sparsity": 2.0, "rank_prefill": 4, "rank_decode": 2, "buffer_size": 20}),
    "gear-l-kivi2": Preset("kivi-g64", {"bits": 2, "sparsity": 0.0, "rank_prefill": 4, "rank_decode": 2, "buffer_size": 64}),
    "gear-kivi2": Preset("kivi-g64", {"bits": 2, "sparsity": 2.0, "rank_prefill": 4, "rank_decode": 2, "buffer_size": 64}),
    # GSM8k KV-size rows (LLaMA3-8B: 8 KV heads of 128)
    "pertoken4-gsm8k": Preset("per-token-g64", {"bits": 4, **_QUANT_ONLY, "buffer_size": 64}, reported_percent=35.2),
    "kcvt4-gsm8k": Preset("kcvt", {"bits": 4, **_QUANT_ONLY, "buffer_size": 20}, reported_percent=26.7),
    "kivi2-gsm8k": Preset("kivi-g64", {"bits": 2, **_QUANT_ONLY, "buffer_size": 64}, reported_percent=22.7),
    "gear-l-kivi2-gsm8k": Preset("kivi-g64", {"bits": 2, "sparsity": 0.0, "rank_prefill": 4, "rank_decode": 2,
                                              "buffer_size": 64}, reported_percent=25.0),
    "gear-kivi2-gsm8k": Preset("kivi-g64", {"bits": 2, "sparsity": 2.0, "rank_prefill": 4, "rank_decode": 2,
                                            "buffer_size": 64}, reported_percent=29.0),
}

REPORTED_PRESETS = [name for name, p in PRESETS.items() if p.reported_percent is not None]


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
