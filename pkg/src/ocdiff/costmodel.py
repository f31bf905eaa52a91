"""Attention FLOP and attention-map storage estimates.

Everything is exact integer arithmetic; fractions of token counts are
rounded up to whole tokens.  No wall-clock model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError
from .sampler import SamplerConfig, blend_steps, make_bg_schedule, make_fg_schedule


@dataclass(frozen=True)
class AttentionLayerSpec:
    """One attention layer type.

    Self/cross-frame attention attends to ``frames_attended`` frames of image
    tokens.  With ``context_tokens`` set the layer is cross-attention to a
    fixed-length context (e.g. text) that is never merged.
    """

    tokens_per_frame: int
    frames_attended: int = 1
    heads: int = 8
    head_dim: int = 64
    occurrences_per_unet_pass: int = 1
    context_tokens: int | None = None
    name: str = ""

    def __post_init__(self) -> None:
        counts = (self.tokens_per_frame, self.frames_attended, self.heads, self.head_dim, self.occurrences_per_unet_pass)
        if min(counts) < 1 or (self.context_tokens is not None and self.context_tokens < 1):
            raise ConfigError(f"layer counts must be >= 1: {self}")

    @property
    def resolution(self) -> tuple[int, int] | None:
        side = math.isqrt(self.tokens_per_frame)
        return (side, side) if side * side == self.tokens_per_frame else None


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[AttentionLayerSpec, ...]
    frames: int = 8
    bytes_per_element: int = 2
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.frames < 1 or self.bytes_per_element < 1:
            raise ConfigError("frames and bytes_per_element must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        layers = tuple(AttentionLayerSpec(**layer) for layer in d.get("layers", []))
        return cls(
            layers=layers,
            frames=int(d.get("frames", 8)),
            bytes_per_element=int(d.get("bytes_per_element", 2)),
            name=str(d.get("name", "")),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "frames": self.frames,
            "bytes_per_element": self.bytes_per_element,
            "layers": [asdict(layer) for layer in self.layers],
        }


def load_model_spec(source: str | Path) -> ModelSpec:
    """Load a ModelSpec from a JSON file, or ``builtin:<name>`` for shipped specs."""
    source = str(source)
    if source.startswith("builtin:"):
        text = resources.files("ocdiff").joinpath("data").joinpath(source.split(":", 1)[1] + ".json").read_text()
    else:
        text = Path(source).read_text()
    return ModelSpec.from_dict(json.loads(text))


@dataclass(frozen=True)
class CostReport:
    """Integer cost totals with a per-phase breakdown (keys: fg, bg, blend)."""

    attention_flops: int
    attention_map_bytes: int
    token_steps: int
    baseline_token_steps: int
    phases: dict[str, dict[str, int]] = field(default_factory=dict)
    token_step_fraction: Fraction = Fraction(0)
    quadratic_fraction: Fraction = Fraction(0)
    formula_fraction: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("token_step_fraction", "quadratic_fraction"):
            frac = getattr(self, key)
            d[key] = float(frac)
            d[key + "_exact"] = f"{frac.numerator}/{frac.denominator}"
        return d


def _as_fraction(x: float | Fraction) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x).limit_denominator(1 << 20)


def _keep(n: int, frac: Fraction) -> int:
    return min(n, math.ceil(n * frac))


def attention_flops(layer: AttentionLayerSpec, n_q: int, n_kv: int) -> int:
    """Multiply-add FLOPs of QK^T plus attention-times-V, per occurrence."""
    if n_q < 1 or n_kv < 1:
        raise ConfigError("n_q and n_kv must be >= 1")
    return 4 * layer.heads * n_q * n_kv * layer.head_dim


def _layer_tokens(
    layer: AttentionLayerSpec,
    frames: int,
    tpf: int,
    kv_keep: Fraction,
    q_keep: Fraction,
    caps: Mapping[tuple[int, int], int],
) -> tuple[int, int]:
    """(n_q, n_kv) for a layer when ``tpf`` image tokens per frame are processed."""
    n_q = _keep(tpf, q_keep) * frames
    if layer.context_tokens is not None:
        return n_q, layer.context_tokens
    kv_pf = _keep(tpf, kv_keep)
    cap = caps.get(layer.resolution) if layer.resolution else None
    if cap is not None:
        kv_pf = max(kv_pf, min(cap, tpf))
    return n_q, kv_pf * layer.frames_attended


def _scaled_tpf(layer: AttentionLayerSpec, share: Fraction) -> int:
    return math.ceil(layer.tokens_per_frame * share)


def _storage_per_step(
    model: ModelSpec,
    share: Fraction = Fraction(1),
    kv_keep: Fraction = Fraction(1),
    q_keep: Fraction = Fraction(1),
    caps: Mapping[tuple[int, int], int] | None = None,
) -> int:
    total = 0
    for layer in model.layers:
        tpf = _scaled_tpf(layer, share)
        if tpf == 0:
            continue
        n_q, n_kv = _layer_tokens(layer, model.frames, tpf, kv_keep, q_keep, caps or {})
        total += layer.occurrences_per_unet_pass * layer.heads * n_q * n_kv * model.bytes_per_element
    return total


def _flops_per_step(model: ModelSpec, share: Fraction = Fraction(1), kv_keep=Fraction(1), q_keep=Fraction(1), caps=None) -> int:
    total = 0
    for layer in model.layers:
        tpf = _scaled_tpf(layer, share)
        if tpf == 0:
            continue
        n_q, n_kv = _layer_tokens(layer, model.frames, tpf, kv_keep, q_keep, caps or {})
        total += layer.occurrences_per_unet_pass * attention_flops(layer, n_q, n_kv)
    return total


def attention_map_storage(model: ModelSpec, steps: int) -> int:
    """Bytes to keep every attention map of every layer for ``steps`` steps."""
    return _storage_per_step(model) * steps


def merged_storage(
    model: ModelSpec,
    steps: int,
    kv_keep_fraction: float | Fraction,
    q_keep_fraction: float | Fraction = 1,
    caps: Mapping[tuple[int, int], int] | None = None,
) -> int:
    """Storage with image KV tokens and queries thinned to the given fractions.

    ``caps`` (keyed by layer resolution) sets a floor on KV tokens kept per frame.
    """
    kv, q = _as_fraction(kv_keep_fraction), _as_fraction(q_keep_fraction)
    if not (0 < kv <= 1 and 0 < q <= 1):
        raise ConfigError("keep fractions must be in (0, 1]")
    return _storage_per_step(model, Fraction(1), kv, q, caps) * steps


def phase_step_counts(cfg: SamplerConfig, delta: int, total: int) -> dict[str, int]:
    """Denoiser invocations per phase; phases with no tokens run no steps."""
    fg = max(len(make_fg_schedule(cfg.T, cfg.N, cfg.gamma)) - 1, 0)
    bg = max(len(make_bg_schedule(cfg.T, cfg.N, cfg.phi, cfg.gamma)) - 1, 0)
    return {
        "fg": fg if delta > 0 else 0,
        "bg": bg if total - delta > 0 else 0,
        "blend": blend_steps(cfg.N, cfg.gamma),
    }


def oc_sampling_report(
    cfg: SamplerConfig,
    delta: int,
    total: int,
    model: ModelSpec | None = None,
    kv_keep_fraction: float | Fraction = 1,
    q_keep_fraction: float | Fraction = 1,
    caps: Mapping[tuple[int, int], int] | None = None,
) -> CostReport:
    """Work done by object-centric sampling relative to full sampling.

    ``delta`` is the foreground crop token count out of ``total`` tokens.
    With a model, attention FLOPs and map storage are summed over phases,
    scaling each layer's tokens per frame by the phase's token share.
    """
    if not 0 <= delta <= total or total < 1:
        raise ConfigError(f"need 0 <= delta <= total, got delta={delta}, total={total}")
    steps = phase_step_counts(cfg, delta, total)
    rest = total - delta
    sizes = {"fg": delta, "bg": rest, "blend": total}
    phases: dict[str, dict[str, int]] = {}
    flops = storage = 0
    kv, q = _as_fraction(kv_keep_fraction), _as_fraction(q_keep_fraction)
    for name, n in sizes.items():
        entry = {"steps": steps[name], "tokens": n, "token_steps": steps[name] * n}
        if model is not None:
            share = Fraction(n, total)
            entry["attention_flops"] = _flops_per_step(model, share, kv, q, caps) * steps[name]
            entry["attention_map_bytes"] = _storage_per_step(model, share, kv, q, caps) * steps[name]
            flops += entry["attention_flops"]
            storage += entry["attention_map_bytes"]
        phases[name] = entry
    token_steps = sum(p["token_steps"] for p in phases.values())
    baseline = cfg.N * total
    quad = sum(steps[k] * sizes[k] ** 2 for k in sizes)

    g = cfg.gamma
    formula = g + (1 - g) * delta / total
    if not math.isinf(cfg.phi):
        formula += (1 - g) * (rest / total) / cfg.phi
    return CostReport(
        attention_flops=flops,
        attention_map_bytes=storage,
        token_steps=token_steps,
        baseline_token_steps=baseline,
        phases=phases,
        token_step_fraction=Fraction(token_steps, baseline),
        quadratic_fraction=Fraction(quad, cfg.N * total * total),
        formula_fraction=formula,
    )
