"""Independent slow reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np

from ocdiff.tome import eta_sim


def brute_force_plan(x, fg, dims, dst, eta, r, s_t=1, mode="wts", caps=None):
    """Exhaustive matcher: scalar similarity over every allowed src/dst pair.

    Returns (unm, merges) with merges as sorted (src, dst_position) pairs.
    """
    f, h, w = dims
    tpf = h * w
    n = f * h * w
    dst = [int(d) for d in dst]
    dst_set = set(dst)
    src = [t for t in range(n) if t not in dst_set]
    scored = []
    for s in src:
        best, best_pos = -math.inf, None
        for p, d in enumerate(dst):
            if mode == "wts" and (s // tpf) // s_t != (d // tpf) // s_t:
                continue
            v = eta_sim(x[s], x[d], bool(fg[s]), eta)
            if v > best:  # strict: first (lowest) dst index wins ties
                best, best_pos = v, p
        scored.append((best, s, best_pos))
    ranked = sorted(scored, key=lambda e: (-e[0], e[1]))

    cap = (caps or {}).get((h, w))
    if cap is None:
        k = math.floor(r * len(src) + 1e-9)
        chosen = ranked[:k]
    else:
        allowed = max(tpf - cap, 0)
        per_frame = [sum(1 for s in src if s // tpf == fr) for fr in range(f)]
        total = sum(per_frame)
        r_eff = r if total == 0 else min(r, sum(min(c, allowed) for c in per_frame) / total)
        if cap >= tpf:
            r_eff = 0.0
        k = math.floor(r_eff * len(src) + 1e-9)
        used = [0] * f
        chosen = []
        for e in ranked:
            if len(chosen) == k:
                break
            fr = e[1] // tpf
            if used[fr] < allowed:
                used[fr] += 1
                chosen.append(e)
    merged = sorted((s, p) for _, s, p in chosen)
    merged_src = {s for s, _ in merged}
    unm = [s for s in src if s not in merged_src]
    return unm, merged


def expected_unmerge(x, dst, merges, sizes=None):
    """Reconstruction predicted position by position from merge groups."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    sizes = np.ones(len(dst)) if sizes is None else np.asarray(sizes, dtype=np.float64)
    groups: dict[int, list[int]] = {}
    for s, p in merges:
        groups.setdefault(p, []).append(s)
    for p, srcs in groups.items():
        d = dst[p]
        total = x[d] * sizes[p] + sum(x[s] for s in srcs)
        val = total / (sizes[p] + len(srcs))
        out[d] = val
        for s in srcs:
            out[s] = val
    return out
