"""Deterministic diffusion sampling, standard and object-centric.

Object-centric sampling splits the latent into a rectangular foreground
crop and the remaining background.  The crop is denoised at the normal
stride down to the blending step ``T_b``, the background at an accelerated
stride (or not at all), then both are scattered back together and the full
latent is denoised to 0.

Denoisers see flat token lists: ``predict(z, t, index)`` receives ``z`` of
shape (n, C), the timestep, and the flat grid index of every row, so a
denoiser can tell which tokens it is looking at.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Protocol

import numpy as np

from .errors import ConfigError, EmptyForegroundError, ShapeError
from .tensor import ForegroundMask, TokenGrid, gather, mask_to_padded_box, scatter


class Denoiser(Protocol):
    def predict(self, z: np.ndarray, t: int, index: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear beta schedule; ``alpha_bar[t]`` for t = 0..T with alpha_bar[0] = 1."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        betas.flags.writeable = False
        alpha_bar.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", alpha_bar)


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 1000
    N: int = 20
    gamma: float = 0.25
    phi: float = 4.0  # math.inf skips background sampling
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "phi", float(self.phi))
        if self.N < 1 or self.T < 1:
            raise ConfigError("T and N must be >= 1")
        if self.N > self.T:
            raise ConfigError(f"N={self.N} exceeds T={self.T}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if not self.phi >= 1.0:
            raise ConfigError(f"phi must be >= 1 (or inf), got {self.phi}")

    @property
    def delta_t(self) -> float:
        return self.T / self.N

    @property
    def blend_steps(self) -> int:
        return blend_steps(self.N, self.gamma)

    @property
    def t_b(self) -> int:
        return _grid_point(self.T, self.N, self.blend_steps)

    def to_dict(self) -> dict:
        phi = "inf" if math.isinf(self.phi) else self.phi
        return {"T": self.T, "N": self.N, "gamma": self.gamma, "phi": phi, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SamplerConfig":
        known = {"T", "N", "gamma", "phi", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown sampler keys: {sorted(extra)}")
        kw = dict(d)
        if "phi" in kw:
            phi = kw["phi"]
            kw["phi"] = math.inf if phi is None or (isinstance(phi, str) and phi.lower() in ("inf", "infinity")) else float(phi)
        return cls(**kw)


# -- schedules ----------------------------------------------------------------

def _grid_point(T: int, N: int, i: int) -> int:
    """Timestep after ``N - i`` strides, i.e. ceil(i * T / N)."""
    return math.ceil(Fraction(i * T, N))


def blend_steps(N: int, gamma: float) -> int:
    """Number of joint steps; T_b is snapped down onto the step grid."""
    return min(N, int(math.floor(gamma * N + 1e-9)))


def make_schedule(T: int, N: int) -> list[int]:
    """Descending timesteps [T, T - dT, ..., dT]; non-divisible T/N rounds up."""
    if N < 1 or N > T:
        raise ConfigError(f"need 1 <= N <= T, got N={N}, T={T}")
    return [_grid_point(T, N, i) for i in range(N, 0, -1)]


def make_fg_schedule(T: int, N: int, gamma: float) -> list[int]:
    """Foreground timesteps from T down to and including T_b; [] if no steps."""
    b = blend_steps(N, gamma)
    if b >= N:
        return []
    return [_grid_point(T, N, i) for i in range(N, b - 1, -1)]


def make_bg_schedule(T: int, N: int, phi: float, gamma: float) -> list[int]:
    """Background timesteps from T at stride phi * dT, ending exactly at T_b.

    The final stride is shortened to land on T_b.  Returns [] when there are
    no background steps (phi = inf, or gamma = 1).
    """
    if phi < 1.0:
        raise ConfigError("phi must be >= 1")
    b = blend_steps(N, gamma)
    if b >= N or math.isinf(phi):
        return []
    t_b = _grid_point(T, N, b)
    stride = Fraction(phi) * Fraction(T, N)
    steps = []
    k = 0
    while True:
        t = Fraction(T) - k * stride
        if t <= Fraction(b * T, N):
            break
        tc = math.ceil(t)
        if tc > t_b and (not steps or tc < steps[-1]):
            steps.append(tc)
        k += 1
    return steps + [t_b]


def _pairs(ts: list[int]) -> list[tuple[int, int]]:
    return list(zip(ts[:-1], ts[1:]))


# -- denoisers ----------------------------------------------------------------

class DeltaOracleDenoiser:
    """Exact noise prediction when the data distribution is a point mass at ``mu``."""

    def __init__(self, mu: TokenGrid, schedule: NoiseSchedule):
        self.mu = mu.tokens()
        self.schedule = schedule

    def predict(self, z: np.ndarray, t: int, index: np.ndarray) -> np.ndarray:
        ab = self.schedule.alpha_bar[t]
        return (z - math.sqrt(ab) * self.mu[index]) / math.sqrt(1.0 - ab)


class _CountingDenoiser:
    def __init__(self, inner: Denoiser):
        self.inner = inner
        self.token_steps = 0
        self.calls = 0

    def predict(self, z: np.ndarray, t: int, index: np.ndarray) -> np.ndarray:
        self.calls += 1
        self.token_steps += z.shape[0]
        return self.inner.predict(z, t, index)


class _NullDenoiser:
    def predict(self, z: np.ndarray, t: int, index: np.ndarray) -> np.ndarray:
        return np.zeros_like(z)


# -- stepping -----------------------------------------------------------------

def ddim_step(
    denoiser: Denoiser,
    z_t: np.ndarray,
    t: int,
    t_next: int,
    schedule: NoiseSchedule,
    index: np.ndarray | None = None,
) -> np.ndarray:
    """One zero-variance DDIM update from ``t`` to ``t_next``."""
    if not (0 <= t_next < t <= schedule.T):
        raise ConfigError(f"invalid step {t} -> {t_next} for T={schedule.T}")
    if index is None:
        index = np.arange(z_t.shape[0])
    eps = denoiser.predict(z_t, t, index)
    if eps.shape != z_t.shape:
        raise ShapeError(f"denoiser returned {eps.shape}, expected {z_t.shape}")
    ab_t = schedule.alpha_bar[t]
    ab_n = schedule.alpha_bar[t_next]
    x0 = (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_n) * x0 + math.sqrt(1.0 - ab_n) * eps


StepHook = Callable[[str, int, np.ndarray, np.ndarray], None]


def _run(denoiser, z, index, ts, schedule, phase, on_step):
    for t, t_next in _pairs(ts):
        z = ddim_step(denoiser, z, t, t_next, schedule, index)
        if on_step is not None:
            on_step(phase, t_next, z, index)
    return z


def standard_sample(
    denoiser: Denoiser,
    z_T: TokenGrid,
    cfg: SamplerConfig,
    schedule: NoiseSchedule | None = None,
    on_step: StepHook | None = None,
) -> TokenGrid:
    schedule = schedule or NoiseSchedule(cfg.T)
    index = np.arange(z_T.n_tokens)
    z = _run(denoiser, z_T.tokens().copy(), index, make_schedule(cfg.T, cfg.N) + [0], schedule, "joint", on_step)
    return TokenGrid.from_tokens(z, z_T.dims)


@dataclass
class OCSampleResult:
    z0: TokenGrid
    t_b: int
    fg_schedule: list[int]
    bg_schedule: list[int]
    blend_schedule: list[int]
    fg_tokens: int
    bg_tokens: int
    fg_token_steps: int = 0
    bg_token_steps: int = 0
    blend_token_steps: int = 0
    bg_final_stride: int | None = None  # length of the shortened last background stride


def run_object_centric(
    denoiser: Denoiser,
    z_T: TokenGrid,
    mask: ForegroundMask,
    cfg: SamplerConfig,
    schedule: NoiseSchedule | None = None,
    pad: int = 0,
    per_frame_box: bool = False,
    background: TokenGrid | None = None,
    on_step: StepHook | None = None,
) -> OCSampleResult:
    """Object-centric sampling with step accounting.

    ``background`` stands in for an inverted latent: when the background
    phase is skipped (phi = inf) its tokens are used at the blending step;
    otherwise skipped background tokens keep their ``z_T`` values.
    """
    if mask.dims != z_T.dims:
        raise ShapeError(f"mask dims {mask.dims} do not match latent dims {z_T.dims}")
    if background is not None and background.data.shape != z_T.data.shape:
        raise ShapeError("background latent shape differs from z_T")
    schedule = schedule or NoiseSchedule(cfg.T)
    b = cfg.blend_steps
    t_b = cfg.t_b
    fg_ts = make_fg_schedule(cfg.T, cfg.N, cfg.gamma)
    bg_ts = make_bg_schedule(cfg.T, cfg.N, cfg.phi, cfg.gamma)
    blend_ts = [_grid_point(cfg.T, cfg.N, i) for i in range(b, -1, -1)] if b else []

    try:
        crop = mask_to_padded_box(mask, pad, per_frame=per_frame_box).to_mask()
    except EmptyForegroundError:
        crop = ForegroundMask.full(mask.dims, False)
    n_fg = crop.count()
    n_bg = z_T.n_tokens - n_fg
    if fg_ts and n_bg and math.isinf(cfg.phi) and b == 0:
        raise ConfigError("gamma=0 with phi=inf never produces the background")

    res = OCSampleResult(
        z0=z_T, t_b=t_b, fg_schedule=fg_ts, bg_schedule=bg_ts,
        blend_schedule=blend_ts, fg_tokens=n_fg, bg_tokens=n_bg,
    )
    z = z_T
    if fg_ts:
        z_f, i_f = gather(z_T, crop)
        z_b, i_b = gather(z_T, ~crop)
        counter = _CountingDenoiser(denoiser)
        if n_fg:
            z_f = _run(counter, z_f, i_f, fg_ts, schedule, "fg", on_step)
        res.fg_token_steps, counter.token_steps = counter.token_steps, 0
        if n_bg:
            if bg_ts:
                z_b = _run(counter, z_b, i_b, bg_ts, schedule, "bg", on_step)
                res.bg_final_stride = bg_ts[-2] - bg_ts[-1]
            elif background is not None:
                z_b = background.tokens()[i_b]
        res.bg_token_steps = counter.token_steps
        z = scatter(z_f, i_f, z_b, i_b, z_T.dims)

    counter = _CountingDenoiser(denoiser)
    out = _run(counter, z.tokens().copy(), np.arange(z.n_tokens), blend_ts, schedule, "joint", on_step)
    res.blend_token_steps = counter.token_steps
    res.z0 = TokenGrid.from_tokens(out, z_T.dims)
    return res


def object_centric_sample(
    denoiser: Denoiser,
    z_T: TokenGrid,
    mask: ForegroundMask,
    cfg: SamplerConfig,
    schedule: NoiseSchedule | None = None,
    **kwargs,
) -> TokenGrid:
    return run_object_centric(denoiser, z_T, mask, cfg, schedule, **kwargs).z0


def count_token_steps(
    cfg: SamplerConfig,
    mask: ForegroundMask,
    pad: int = 0,
    per_frame_box: bool = False,
) -> tuple[int, int, int]:
    """(fg, bg, blend) token-steps, measured by running the sampler with a null denoiser."""
    z = TokenGrid(np.zeros((*mask.dims, 1)))
    res = run_object_centric(_NullDenoiser(), z, mask, cfg, pad=pad, per_frame_box=per_frame_box)
    return res.fg_token_steps, res.bg_token_steps, res.blend_token_steps
