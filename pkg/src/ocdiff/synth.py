"""Synthetic video latents with a moving square object and exact masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .seeding import rng
from .tensor import ForegroundMask, TokenGrid
from .tome import MergeConfig, apply_merge, build_plan, unmerge

# object-size buckets as fractions of frame area (large, medium, small)
SIZE_BUCKETS = {"large": (48 / 64, 1.0), "medium": (32 / 64, 48 / 64), "small": (0.0, 32 / 64)}


@dataclass(frozen=True)
class Texture:
    """Smooth gradient plus per-token noise.

    ``base`` is the mean token direction strength, ``gradient`` the
    amplitude of a slow spatial ramp, ``noise`` the static per-location
    noise and ``frame_noise`` fresh noise drawn every frame.
    """

    base: float = 1.0
    gradient: float = 0.5
    noise: float = 0.1
    frame_noise: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    frames: int = 8
    height: int = 64
    width: int = 64
    channels: int = 8
    object_size: int = 24
    velocity: tuple[int, int] = (1, 1)
    start: tuple[int, int] | None = None  # top-left; centred when omitted
    fg_texture: Texture = Texture(base=1.0, gradient=0.6, noise=0.15, frame_noise=0.02)
    bg_texture: Texture = Texture(base=1.0, gradient=0.4, noise=0.05, frame_noise=0.02)
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError("scene dims must be >= 1")
        if self.object_size < 1:
            raise ConfigError("object_size must be >= 1")
        if self.object_size > min(self.height, self.width):
            raise ConfigError(f"object of size {self.object_size} does not fit a {self.height}x{self.width} frame")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneSpec":
        kw = dict(d)
        for key in ("fg_texture", "bg_texture"):
            if key in kw:
                kw[key] = Texture(**kw[key])
        for key in ("velocity", "start"):
            if kw.get(key) is not None:
                kw[key] = tuple(int(v) for v in kw[key])
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def positions(self) -> list[tuple[int, int]]:
        s = self.object_size
        if self.start is None:
            y0, x0 = (self.height - s) // 2, (self.width - s) // 2
        else:
            y0, x0 = self.start
        vy, vx = self.velocity
        return [
            (min(max(y0 + f * vy, 0), self.height - s), min(max(x0 + f * vx, 0), self.width - s))
            for f in range(self.frames)
        ]


@dataclass(frozen=True)
class ReconMetrics:
    fg_mse: float
    bg_mse: float
    total_mse: float


def _field(tex: Texture, direction: np.ndarray, ramp: np.ndarray, h: int, w: int, gen: np.random.Generator) -> np.ndarray:
    """An h x w x C texture patch in its own coordinates."""
    c = direction.size
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    grad = np.cos(np.pi * (ramp[0] * yy[..., None] + ramp[1] * xx[..., None]) + ramp[2][None, None, :])
    return tex.base * direction + tex.gradient * grad + tex.noise * gen.standard_normal((h, w, c))


def generate(scene: SceneSpec) -> tuple[TokenGrid, ForegroundMask]:
    """Render the scene; the object texture moves rigidly with the object."""
    f, h, w, c, s = scene.frames, scene.height, scene.width, scene.channels, scene.object_size
    gen = rng(scene.seed, "scene")
    bg_dir = gen.standard_normal(c)
    bg_dir /= np.linalg.norm(bg_dir)
    # foreground direction orthogonal to the background one, for contrast
    fg_dir = gen.standard_normal(c)
    if c > 1:
        fg_dir -= (fg_dir @ bg_dir) * bg_dir
        fg_dir /= np.linalg.norm(fg_dir)
    else:
        fg_dir = -bg_dir
    bg_ramp = (gen.uniform(0.3, 1.0), gen.uniform(0.3, 1.0), gen.uniform(0, 2 * np.pi, c))
    fg_ramp = (gen.uniform(1.0, 2.0), gen.uniform(1.0, 2.0), gen.uniform(0, 2 * np.pi, c))
    bg = _field(scene.bg_texture, bg_dir, bg_ramp, h, w, gen)
    fg = _field(scene.fg_texture, fg_dir, fg_ramp, s, s, gen)

    data = np.empty((f, h, w, c))
    bits = np.zeros((f, h, w), dtype=bool)
    for i, (y0, x0) in enumerate(scene.positions()):
        data[i] = bg
        data[i, y0:y0 + s, x0:x0 + s] = fg
        bits[i, y0:y0 + s, x0:x0 + s] = True
        if scene.bg_texture.frame_noise or scene.fg_texture.frame_noise:
            amp = np.where(bits[i], scene.fg_texture.frame_noise, scene.bg_texture.frame_noise)
            data[i] += amp[..., None] * gen.standard_normal((h, w, c))
    return TokenGrid(data), ForegroundMask(bits)


def _mse_split(err: np.ndarray, fg: np.ndarray) -> ReconMetrics:
    n_fg = int(fg.sum())
    n_bg = fg.size - n_fg
    fg_mse = float(err[fg].mean()) if n_fg else 0.0
    bg_mse = float(err[~fg].mean()) if n_bg else 0.0
    return ReconMetrics(fg_mse, bg_mse, (n_fg * fg_mse + n_bg * bg_mse) / fg.size)


def merge_roundtrip_error(grid: TokenGrid, mask: ForegroundMask, cfg: MergeConfig) -> ReconMetrics:
    """MSE of unmerge(apply_merge(grid)) against the grid, split by mask."""
    plan = build_plan(grid, mask, cfg)
    merged, _ = apply_merge(grid, plan)
    rec = unmerge(merged, plan)
    err = ((rec.tokens() - grid.tokens()) ** 2).mean(axis=1)
    return _mse_split(err, mask.flat())


def size_bucket(delta: int, frame_tokens: int) -> str:
    """Large / medium / small by box area relative to the frame."""
    side = (delta / frame_tokens) ** 0.5
    for name, (lo, hi) in SIZE_BUCKETS.items():
        if lo <= side < hi or (name == "large" and side >= hi):
            return name
    return "small"
