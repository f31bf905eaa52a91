"""Object-centric spatio-temporal token merging.

Tokens are split into a grid-sampled destination set and the remaining
sources.  Each source finds its most similar destination (optionally only
inside its own temporal window), similarities of foreground sources are
scaled by ``eta``, and the best-matching fraction ``r`` of sources is
averaged into their destinations.  The resulting :class:`MergePlan` is plain
index data, so it can be saved during inversion and replayed on other
tensors of the same shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateTokenError, PartitionError, ShapeError
from .tensor import Dims, ForegroundMask, TokenGrid

# minimum surviving tokens per frame, keyed by (H, W)
DEFAULT_CAPS: dict[tuple[int, int], int] = {(8, 8): 4, (16, 16): 16}

# similarity entries evaluated per block; bounds peak memory on large grids
_BLOCK_ELEMS = 1 << 22

# candidates within this cosine distance of a row's BLAS maximum are re-scored exactly
_NEAR_TIE = 1e-9


class SearchMode(str, Enum):
    WTS = "wts"  # destinations restricted to the source's temporal window
    GTS = "gts"  # destinations drawn from the whole clip


@dataclass(frozen=True)
class WindowSpec:
    s_t: int = 1
    s_y: int = 2
    s_x: int = 2

    def __post_init__(self) -> None:
        if min(self.s_t, self.s_y, self.s_x) < 1:
            raise ConfigError(f"window strides must be >= 1, got {self}")

    def clamped(self, dims: Sequence[int]) -> "WindowSpec":
        f, h, w = dims
        return WindowSpec(min(self.s_t, f), min(self.s_y, h), min(self.s_x, w))


@dataclass(frozen=True)
class MergeConfig:
    r: float = 0.5
    eta: float = 1.0
    window: WindowSpec = field(default_factory=WindowSpec)
    search_mode: SearchMode = SearchMode.WTS
    resample_per_window: bool = True
    kv_only: bool = True
    caps: Mapping[tuple[int, int], int] = field(default_factory=lambda: dict(DEFAULT_CAPS))
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"r must be in [0, 1], got {self.r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        object.__setattr__(self, "search_mode", SearchMode(self.search_mode))
        caps = {tuple(int(v) for v in k): int(c) for k, c in self.caps.items()}
        if any(c < 1 for c in caps.values()):
            raise ConfigError("cap values must be >= 1")
        object.__setattr__(self, "caps", caps)
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")


# -- similarity ---------------------------------------------------------------

def _row_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot products summed channel by channel in a fixed order.

    Used wherever similarity values must be reproducible bit for bit,
    independent of BLAS blocking or of where a pair sits in a batch.
    """
    acc = a[:, 0] * b[:, 0]
    for c in range(1, a.shape[1]):
        acc = acc + a[:, c] * b[:, c]
    return acc


def _norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(_row_dot(x, x))


def _exact_sim(a: np.ndarray, na: np.ndarray, b: np.ndarray, nb: np.ndarray) -> np.ndarray:
    cos = _row_dot(a, b) / (na * nb)
    np.clip(cos, -1.0, 1.0, out=cos)
    return 0.5 * (cos + 1.0)


def sim(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity mapped from [-1, 1] onto [0, 1].

    Same operation order as the batched path, so values agree bit for bit.
    """
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    if len(a) != len(b) or not a:
        raise ShapeError("sim needs two equal-length non-empty vectors")
    dot, aa, bb = a[0] * b[0], a[0] * a[0], b[0] * b[0]
    for u, v in zip(a[1:], b[1:]):
        dot += u * v
        aa += u * u
        bb += v * v
    na, nb = math.sqrt(aa), math.sqrt(bb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateTokenError("zero-norm token")
    cos = min(1.0, max(-1.0, dot / (na * nb)))
    return 0.5 * (cos + 1.0)


def eta_sim(a: Sequence[float], b: Sequence[float], m_i: bool, eta: float) -> float:
    """``sim`` with foreground sources (``m_i``) down-weighted by ``eta``."""
    s = sim(a, b)
    return eta * s if m_i else s


# -- destination sampling -----------------------------------------------------

def sample_dst(
    dims: Sequence[int],
    window: WindowSpec,
    resample_per_window: bool = True,
    seed: int = 0,
) -> np.ndarray:
    """One destination per s_t x s_y x s_x cell, as sorted flat indices.

    Strides larger than the grid are clamped; remainder cells at the edges
    still get one destination.  Without ``resample_per_window`` the offsets
    drawn for the first temporal window are reused for all of them.
    """
    f, h, w = (int(d) for d in dims)
    win = window.clamped((f, h, w))
    st, sy, sx = win.s_t, win.s_y, win.s_x
    nw, ny, nx = -(-f // st), -(-h // sy), -(-w // sx)
    gen = np.random.default_rng(seed)
    draws = nw if resample_per_window else 1
    off = gen.integers(0, [st, sy, sx], size=(draws, ny, nx, 3))
    off = np.broadcast_to(off, (nw, ny, nx, 3))

    base_t, base_y, base_x = np.arange(nw) * st, np.arange(ny) * sy, np.arange(nx) * sx
    ext_t = np.minimum(st, f - base_t)
    ext_y = np.minimum(sy, h - base_y)
    ext_x = np.minimum(sx, w - base_x)
    ft = base_t[:, None, None] + np.minimum(off[..., 0], ext_t[:, None, None] - 1)
    yy = base_y[None, :, None] + np.minimum(off[..., 1], ext_y[None, :, None] - 1)
    xx = base_x[None, None, :] + np.minimum(off[..., 2], ext_x[None, None, :] - 1)
    return np.sort(((ft * h + yy) * w + xx).reshape(-1)).astype(np.int64)


# -- rate capping -------------------------------------------------------------

def merge_count(rate: float, n_src: int) -> int:
    """floor(rate * n_src), tolerant to float noise at integer boundaries."""
    return min(n_src, int(math.floor(rate * n_src + 1e-9)))


def cap_rate(
    r: float,
    tokens_per_frame: int,
    resolution: Sequence[int],
    caps: Mapping[tuple[int, int], int],
    src_per_frame: int | Sequence[int] | None = None,
) -> float:
    """Largest rate <= r that leaves at least ``caps[resolution]`` tokens per frame.

    ``src_per_frame`` is the number of merge candidates in each frame; the
    conservative default treats every token as a candidate.
    """
    cap = caps.get(tuple(int(v) for v in resolution))
    if cap is None:
        return r
    if cap >= tokens_per_frame:
        return 0.0
    allowed = tokens_per_frame - cap
    if src_per_frame is None:
        per_frame = [tokens_per_frame]
    elif isinstance(src_per_frame, (int, np.integer)):
        per_frame = [int(src_per_frame)]
    else:
        per_frame = [int(s) for s in src_per_frame]
    total = sum(per_frame)
    if total == 0:
        return r
    capacity = sum(min(s, allowed) for s in per_frame)
    return min(r, capacity / total)


# -- plans --------------------------------------------------------------------

def _index_array(values: Sequence[int]) -> np.ndarray:
    a = np.asarray(values, dtype=np.int64).reshape(-1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MergePlan:
    """Recorded partition of token indices into unm / dst / merged src.

    ``merge_src[i]`` is averaged into ``dst[merge_dst[i]]``.  ``dst_sizes``
    holds the number of tokens each destination already represents before
    this merge (1 for raw tokens).
    """

    dims: Dims
    dst: np.ndarray
    unm: np.ndarray
    merge_src: np.ndarray
    merge_dst: np.ndarray
    dst_sizes: np.ndarray
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("dst", "unm", "merge_src", "merge_dst"):
            object.__setattr__(self, name, _index_array(getattr(self, name)))
        sizes = np.asarray(self.dst_sizes, dtype=np.float64).reshape(-1)
        sizes.flags.writeable = False
        object.__setattr__(self, "dst_sizes", sizes)

        n = self.n_tokens
        if self.merge_src.size != self.merge_dst.size:
            raise PartitionError("merge sources and targets differ in length")
        if sizes.size != self.dst.size or np.any(sizes < 1):
            raise PartitionError("need one size >= 1 per destination")
        if self.merge_dst.size and (self.merge_dst.min() < 0 or self.merge_dst.max() >= self.dst.size):
            raise PartitionError("merge target position out of range")
        every = np.concatenate([self.dst, self.unm, self.merge_src])
        if every.size != n or (n and (every.min() < 0 or every.max() >= n)):
            raise PartitionError(f"plan does not cover exactly {n} tokens")
        if np.bincount(every, minlength=n).max(initial=0) > 1:
            raise PartitionError("plan index sets overlap")

    @property
    def n_tokens(self) -> int:
        f, h, w = self.dims
        return f * h * w

    @property
    def n_merged(self) -> int:
        return int(self.merge_src.size)

    @property
    def n_out(self) -> int:
        return int(self.unm.size + self.dst.size)

    @property
    def merges(self) -> list[tuple[int, int]]:
        return list(zip(self.merge_src.tolist(), self.merge_dst.tolist()))

    def same_structure(self, other: "MergePlan") -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.unm, other.unm)
            and np.array_equal(self.merge_src, other.merge_src)
            and np.array_equal(self.merge_dst, other.merge_dst)
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MergePlan):
            return NotImplemented
        return (
            self.same_structure(other)
            and np.array_equal(self.dst_sizes, other.dst_sizes)
            and self.seed == other.seed
        )

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict:
        sizes = [int(s) if float(s).is_integer() else float(s) for s in self.dst_sizes]
        return {
            "dims": list(self.dims),
            "dst": self.dst.tolist(),
            "unm": self.unm.tolist(),
            "merges": [[s, p] for s, p in self.merges],
            "sizes": sizes,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergePlan":
        merges = np.asarray(d["merges"], dtype=np.int64).reshape(-1, 2)
        dims = d.get("dims")
        if dims is None:
            n = len(d["dst"]) + len(d["unm"]) + len(merges)
            dims = (1, 1, n)
        return cls(
            dims=tuple(dims),
            dst=d["dst"],
            unm=d["unm"],
            merge_src=merges[:, 0],
            merge_dst=merges[:, 1],
            dst_sizes=d.get("sizes", [1] * len(d["dst"])),
            seed=int(d.get("seed", 0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def loads(cls, s: str) -> "MergePlan":
        return cls.from_dict(json.loads(s))


def _within_group_rank(groups: np.ndarray) -> np.ndarray:
    """For each position, how many earlier positions share its group label."""
    order = np.argsort(groups, kind="stable")
    sorted_g = groups[order]
    starts = np.flatnonzero(np.r_[True, sorted_g[1:] != sorted_g[:-1]])
    run_start = np.repeat(starts, np.diff(np.r_[starts, sorted_g.size]))
    ranks = np.empty_like(order)
    ranks[order] = np.arange(order.size) - run_start
    return ranks


def _best_matches(
    x: np.ndarray,
    norms: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    src_fg: np.ndarray,
    eta: float,
    groups: list[tuple[int, int, int, int]],
) -> tuple[np.ndarray, np.ndarray]:
    """Best eta-weighted similarity and dst position for every source.

    ``groups`` lists (src_lo, src_hi, dst_lo, dst_hi) slices that may match.
    A BLAS product of unit vectors narrows each row to its near-maximal
    candidates; those are re-scored with the exact channel-ordered
    similarity, so results equal pairwise ``eta_sim`` evaluation.  Ties go
    to the lowest destination.
    """
    unit = x / norms[:, None]
    best = np.empty(src.size, dtype=np.float64)
    pos = np.empty(src.size, dtype=np.int64)
    for s_lo, s_hi, d_lo, d_hi in groups:
        b = unit[dst[d_lo:d_hi]]
        step = max(1, _BLOCK_ELEMS // max(1, d_hi - d_lo))
        for lo in range(s_lo, s_hi, step):
            hi = min(lo + step, s_hi)
            rows = src[lo:hi]
            fg = src_fg[lo:hi]
            # eta = 0 flattens foreground rows to exact zeros: first dst wins
            flat = fg if eta == 0.0 else np.zeros_like(fg)
            best[lo:hi][flat] = 0.0
            pos[lo:hi][flat] = d_lo
            live = np.flatnonzero(~flat)
            if live.size == 0:
                continue
            cos = unit[rows[live]] @ b.T
            top = cos.max(axis=1)
            r, c = np.nonzero(cos >= (top - _NEAR_TIE)[:, None])
            a_idx, b_idx = rows[live[r]], dst[d_lo + c]
            val = _exact_sim(x[a_idx], norms[a_idx], x[b_idx], norms[b_idx])
            val = np.where(fg[live[r]], eta * val, val)
            # per row: highest exact value, then lowest column
            order = np.lexsort((c, -val, r))
            first = order[np.r_[True, r[order][1:] != r[order][:-1]]]
            best[lo + live] = val[first]
            pos[lo + live] = d_lo + c[first]
    return best, pos


def build_plan(tokens: TokenGrid, mask: ForegroundMask, cfg: MergeConfig) -> MergePlan:
    """Choose which sources merge into which destinations.

    Ranking is by best-match similarity (descending), ties going to the
    lower source index; a source's best match on ties is the lower
    destination index.
    """
    if tokens.dims != mask.dims:
        raise ShapeError(f"mask dims {mask.dims} do not match token dims {tokens.dims}")
    f, h, w = tokens.dims
    tpf = h * w
    x = tokens.tokens()
    norms = _norms(x)
    if np.any(norms == 0.0):
        raise DegenerateTokenError(f"{int(np.sum(norms == 0.0))} zero-norm token(s)")

    win = cfg.window.clamped(tokens.dims)
    dst = sample_dst(tokens.dims, win, cfg.resample_per_window, cfg.seed)
    is_dst = np.zeros(tokens.n_tokens, dtype=bool)
    is_dst[dst] = True
    src = np.flatnonzero(~is_dst)
    src_fg = mask.flat()[src]

    if cfg.search_mode is SearchMode.WTS:
        # windows are contiguous runs of frames, hence contiguous in flat order
        span = win.s_t * tpf
        edges = np.arange(0, tokens.n_tokens + span, span)
        s_cut = np.searchsorted(src, edges)
        d_cut = np.searchsorted(dst, edges)
        groups = [
            (int(s_cut[i]), int(s_cut[i + 1]), int(d_cut[i]), int(d_cut[i + 1]))
            for i in range(edges.size - 1)
            if s_cut[i + 1] > s_cut[i]
        ]
    else:
        groups = [(0, src.size, 0, dst.size)] if src.size else []
    best, pos = _best_matches(x, norms, src, dst, src_fg, cfg.eta, groups)

    order = np.argsort(-best, kind="stable")
    cap = cfg.caps.get((h, w))
    if cap is not None:
        src_frames = src // tpf
        r_eff = cap_rate(cfg.r, tpf, (h, w), cfg.caps, np.bincount(src_frames, minlength=f).tolist())
        ranked_frames = src_frames[order]
        order = order[_within_group_rank(ranked_frames) < max(tpf - cap, 0)]
    else:
        r_eff = cfg.r
    k = merge_count(r_eff, src.size)
    chosen = np.sort(order[:k])
    merged = np.zeros(src.size, dtype=bool)
    merged[chosen] = True

    return MergePlan(
        dims=tokens.dims,
        dst=dst,
        unm=src[~merged],
        merge_src=src[chosen],
        merge_dst=pos[chosen],
        dst_sizes=np.ones(dst.size),
        seed=cfg.seed,
    )


def _as_tokens(tokens: TokenGrid | np.ndarray, plan: MergePlan) -> np.ndarray:
    x = tokens.tokens() if isinstance(tokens, TokenGrid) else np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != plan.n_tokens:
        raise ShapeError(f"plan expects {plan.n_tokens} tokens, got array of shape {x.shape}")
    return x


def apply_merge(tokens: TokenGrid | np.ndarray, plan: MergePlan) -> tuple[np.ndarray, np.ndarray]:
    """Merge by size-weighted averaging.

    Returns ``(merged, sizes)`` where ``merged`` is the unm tokens (ascending
    index) followed by the destinations in plan order, and ``sizes`` are the
    updated destination sizes.
    """
    x = _as_tokens(tokens, plan)
    prior = plan.dst_sizes
    acc = x[plan.dst] * prior[:, None]
    np.add.at(acc, plan.merge_dst, x[plan.merge_src])
    added = np.bincount(plan.merge_dst, minlength=plan.dst.size)
    sizes = prior + added
    # destinations that absorbed nothing pass through untouched
    dst_vals = np.where(added[:, None] > 0, acc / sizes[:, None], x[plan.dst])
    return np.concatenate([x[plan.unm], dst_vals]), sizes


def untouched_dst(plan: MergePlan) -> np.ndarray:
    """Destination indices that absorbed no source under ``plan``."""
    hit = np.bincount(plan.merge_dst, minlength=plan.dst.size) > 0
    return plan.dst[~hit]


def unmerge(merged: np.ndarray, plan: MergePlan) -> TokenGrid:
    """Spread merged tokens back to the full grid; merged sources copy their dst."""
    merged = np.asarray(merged, dtype=np.float64)
    if merged.ndim != 2 or merged.shape[0] != plan.n_out:
        raise ShapeError(f"plan expects {plan.n_out} merged tokens, got array of shape {merged.shape}")
    n_unm = plan.unm.size
    dst_vals = merged[n_unm:]
    out = np.empty((plan.n_tokens, merged.shape[1]), dtype=np.float64)
    out[plan.unm] = merged[:n_unm]
    out[plan.dst] = dst_vals
    out[plan.merge_src] = dst_vals[plan.merge_dst]
    return TokenGrid.from_tokens(out, plan.dims)


def replay(plan: MergePlan, tokens: TokenGrid | np.ndarray) -> np.ndarray:
    """Apply a recorded plan to other tokens without recomputing similarity."""
    return apply_merge(tokens, plan)[0]


def merge_attention_inputs(
    q: TokenGrid,
    k: TokenGrid,
    v: TokenGrid,
    mask: ForegroundMask,
    cfg: MergeConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, MergePlan]:
    """Merge keys and values under one plan computed on the keys.

    Queries are merged too unless ``cfg.kv_only``; in that case the caller
    must unmerge the attention output with the returned plan.
    """
    if not q.dims == k.dims == v.dims:
        raise ShapeError(f"q, k, v token dims differ: {q.dims}, {k.dims}, {v.dims}")
    plan = build_plan(k, mask, cfg)
    q_out = q.tokens().copy() if cfg.kv_only else replay(plan, q)
    return q_out, replay(plan, k), replay(plan, v), plan
