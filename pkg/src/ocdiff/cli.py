"""Command-line entry point: merge benchmarks, sampling demos, cost reports.

Every report embeds the resolved config, its hash, the run seed and the
library version, and contains nothing time- or host-dependent, so reruns
are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .costmodel import attention_map_storage, load_model_spec, merged_storage, oc_sampling_report
from .errors import ConfigError, OCDError
from .sampler import (
    DeltaOracleDenoiser,
    NoiseSchedule,
    SamplerConfig,
    run_object_centric,
    standard_sample,
)
from .seeding import derive_seed, rng
from .synth import SceneSpec, generate, size_bucket
from .tensor import TokenGrid, mask_to_padded_box, write_grid, write_mask, write_pgm_frames
from .tome import MergeConfig, SearchMode, WindowSpec, apply_merge, build_plan, unmerge, untouched_dst

GB = 10**9


class CheckFailed(Exception):
    pass


def _parse_caps(raw: dict[str, int] | None) -> dict[tuple[int, int], int]:
    if raw is None:
        return {}
    caps = {}
    for key, value in raw.items():
        try:
            h, w = (int(v) for v in str(key).lower().split("x"))
        except ValueError:
            raise ConfigError(f"cap key must look like '8x8', got {key!r}") from None
        caps[(h, w)] = int(value)
    return caps


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _envelope(command: str, cfg: dict, seed: int) -> dict:
    return {
        "tool": "ocdiff",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config_hash": _config_hash(cfg),
        "config": cfg,
    }


def _csv_text(columns: list[str], rows: list[dict], env: dict) -> str:
    buf = io.StringIO()
    meta = ["seed", "config_hash", "version"]
    writer = csv.DictWriter(buf, fieldnames=columns + meta, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "seed": env["seed"], "config_hash": env["config_hash"], "version": env["version"]})
    return buf.getvalue()


# -- merge-bench --------------------------------------------------------------

MERGE_COLUMNS = [
    "r", "eta", "s_t", "search_mode", "seeds", "tokens_in", "tokens_out", "merges",
    "fg_mse_median", "bg_mse_median", "total_mse_median", "fg_mse_mean", "bg_mse_mean", "total_mse_mean",
]


def _merge_cell(job: tuple[dict, dict, int, list[int]]) -> dict:
    cell, shared, seed, seed_ids = job
    scene_kw = shared["scene"]
    mcfg = shared["merge"]
    fg, bg, tot = [], [], []
    tokens_out = merges = tokens_in = 0
    for i in seed_ids:
        grid, mask = generate(SceneSpec.from_dict({**scene_kw, "seed": derive_seed(seed, "scene", i)}))
        cfg = MergeConfig(
            r=cell["r"],
            eta=cell["eta"],
            window=WindowSpec(cell["s_t"], mcfg["s_y"], mcfg["s_x"]),
            search_mode=SearchMode(cell["search_mode"]),
            resample_per_window=mcfg["resample_per_window"],
            caps=_parse_caps(mcfg["caps"]),
            seed=derive_seed(seed, "dst-sampling", i),
        )
        plan = build_plan(grid, mask, cfg)
        merged, _ = apply_merge(grid, plan)
        rec = unmerge(merged, plan).tokens()
        x = grid.tokens()
        kept = np.concatenate([plan.unm, untouched_dst(plan)])
        if not np.array_equal(rec[kept], x[kept]):
            raise CheckFailed("reconstruction differs at unmerged positions")
        err = ((rec - x) ** 2).mean(axis=1)
        m = mask.flat()
        fg.append(float(err[m].mean()) if m.any() else 0.0)
        bg.append(float(err[~m].mean()) if (~m).any() else 0.0)
        tot.append(float(err.mean()))
        tokens_in, tokens_out, merges = plan.n_tokens, plan.n_out, plan.n_merged
    row = {
        **cell,
        "seeds": len(seed_ids),
        "tokens_in": tokens_in,
        "tokens_out": tokens_out,
        "merges": merges,
    }
    for name, vals in (("fg_mse", fg), ("bg_mse", bg), ("total_mse", tot)):
        row[f"{name}_median"] = float(np.median(vals)) if vals else 0.0
        row[f"{name}_mean"] = float(np.mean(vals)) if vals else 0.0
    row["per_seed"] = {"fg_mse": fg, "bg_mse": bg, "total_mse": tot}
    return row


def _resolve_merge_bench(raw: dict, seed: int) -> dict:
    sweep = raw.get("sweep", {})
    merge = raw.get("merge", {})
    seeds = raw.get("seeds", 10)
    cfg = {
        "scene": {k: v for k, v in raw.get("scene", {}).items() if k != "seed"},
        "seeds": list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds],
        "sweep": {
            "r": [float(v) for v in sweep.get("r", [0.5])],
            "eta": [float(v) for v in sweep.get("eta", [1.0])],
            "s_t": [int(v) for v in sweep.get("s_t", [1])],
            "search_mode": [SearchMode(v).value for v in sweep.get("search_mode", ["wts"])],
        },
        "merge": {
            "s_y": int(merge.get("s_y", 2)),
            "s_x": int(merge.get("s_x", 2)),
            "resample_per_window": bool(merge.get("resample_per_window", True)),
            "caps": merge.get("caps", {"8x8": 4, "16x16": 16}),
        },
        "workers": int(raw.get("workers", 1)),
        "dump_dir": raw.get("dump_dir"),
        "seed": seed,
    }
    SceneSpec.from_dict(cfg["scene"])  # validate early
    _parse_caps(cfg["merge"]["caps"])
    unknown = set(raw) - {"scene", "seeds", "sweep", "merge", "workers", "dump_dir", "seed"}
    if unknown:
        raise ConfigError(f"unknown merge-bench keys: {sorted(unknown)}")
    return cfg


def cmd_merge_bench(raw: dict, seed: int, fmt: str) -> tuple[str, bool]:
    cfg = _resolve_merge_bench(raw, seed)
    env = _envelope("merge-bench", {k: v for k, v in cfg.items() if k != "workers"}, seed)
    sw = cfg["sweep"]
    cells = [
        {"r": r, "eta": eta, "s_t": st, "search_mode": mode}
        for r in sw["r"] for eta in sw["eta"] for st in sw["s_t"] for mode in sw["search_mode"]
    ]
    jobs = [(cell, cfg, seed, cfg["seeds"]) for cell in cells]
    workers = cfg["workers"]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_merge_cell, jobs))
    else:
        rows = [_merge_cell(job) for job in jobs]

    if cfg["dump_dir"] and cfg["seeds"]:
        out = Path(cfg["dump_dir"])
        out.mkdir(parents=True, exist_ok=True)
        grid, mask = generate(SceneSpec.from_dict({**cfg["scene"], "seed": derive_seed(seed, "scene", cfg["seeds"][0])}))
        write_grid(grid, out / "scene.bin")
        write_mask(mask, out / "scene_mask.bin")
        write_pgm_frames(grid, out / "scene")

    if fmt == "csv":
        return _csv_text(MERGE_COLUMNS, rows, env), True
    return json.dumps({**env, "results": rows, "checks": {"locality": True}}, indent=2) + "\n", True


# -- sample-demo --------------------------------------------------------------

RECOVERY_TOL = 1e-6


def _resolve_sample_demo(raw: dict, seed: int) -> dict:
    unknown = set(raw) - {"sampler", "scene", "pad", "per_frame_box", "dump_dir", "seed"}
    if unknown:
        raise ConfigError(f"unknown sample-demo keys: {sorted(unknown)}")
    sampler = SamplerConfig.from_dict({**raw.get("sampler", {}), "seed": seed})
    scene_raw = {k: v for k, v in raw.get("scene", {"frames": 4, "height": 32, "width": 32, "channels": 4, "object_size": 12}).items() if k != "seed"}
    SceneSpec.from_dict(scene_raw)
    return {
        "sampler": sampler.to_dict(),
        "scene": scene_raw,
        "pad": int(raw.get("pad", 0)),
        "per_frame_box": bool(raw.get("per_frame_box", False)),
        "dump_dir": raw.get("dump_dir"),
        "seed": seed,
    }


def cmd_sample_demo(raw: dict, seed: int, fmt: str) -> tuple[str, bool]:
    cfg = _resolve_sample_demo(raw, seed)
    env = _envelope("sample-demo", cfg, seed)
    scfg = SamplerConfig.from_dict(cfg["sampler"])
    mu, mask = generate(SceneSpec.from_dict({**cfg["scene"], "seed": derive_seed(seed, "scene", 0)}))
    z_T = TokenGrid(rng(seed, "noise").standard_normal(mu.data.shape))
    sched = NoiseSchedule(scfg.T)
    den = DeltaOracleDenoiser(mu, sched)

    dump = Path(cfg["dump_dir"]) if cfg["dump_dir"] else None
    hook = None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
        write_grid(z_T, dump / "z_T.bin")
        write_mask(mask, dump / "mask.bin")

        def hook(phase: str, t: int, z: np.ndarray, index: np.ndarray) -> None:
            if phase == "joint":
                write_grid(TokenGrid.from_tokens(z, mu.dims), dump / f"oc_t{t:04d}.bin")

    std = standard_sample(den, z_T, scfg, sched)
    res = run_object_centric(den, z_T, mask, scfg, sched, pad=cfg["pad"], per_frame_box=cfg["per_frame_box"], on_step=hook)

    box = mask_to_padded_box(mask, cfg["pad"], per_frame=cfg["per_frame_box"])
    report = oc_sampling_report(scfg, res.fg_tokens, mu.n_tokens)
    err_std = float(np.max(np.abs(std.data - mu.data)))
    err_oc = float(np.max(np.abs(res.z0.data - mu.data)))
    identical = bool(np.array_equal(std.data, res.z0.data))
    expect_identical = scfg.gamma >= 1.0 or scfg.blend_steps == scfg.N or scfg.phi == 1.0
    counted = (res.fg_token_steps, res.bg_token_steps, res.blend_token_steps)
    modelled = tuple(report.phases[p]["token_steps"] for p in ("fg", "bg", "blend"))
    checks = {
        "standard_recovery": err_std < RECOVERY_TOL,
        "object_centric_recovery": err_oc < RECOVERY_TOL,
        "identical_when_expected": identical or not expect_identical,
        "token_steps_match_cost_model": counted == modelled,
    }
    frame_tokens = mu.height * mu.width
    oc = {
        "recovery_error": err_oc,
        "t_b": res.t_b,
        "fg_schedule": res.fg_schedule,
        "bg_schedule": res.bg_schedule,
        "blend_schedule": res.blend_schedule,
        "bg_final_stride": res.bg_final_stride,
        "fg_tokens": res.fg_tokens,
        "bg_tokens": res.bg_tokens,
        "object_size_bucket": size_bucket(box.token_count() // mu.frames, frame_tokens),
        "token_steps": {"fg": counted[0], "bg": counted[1], "blend": counted[2], "total": sum(counted)},
        "baseline_token_steps": scfg.N * mu.n_tokens,
        "token_step_fraction": float(report.token_step_fraction),
        "quadratic_fraction": float(report.quadratic_fraction),
    }
    rows = [
        {"mode": "standard", "recovery_error": err_std, "token_steps": scfg.N * mu.n_tokens,
         "token_step_fraction": 1.0, "identical_to_standard": True},
        {"mode": "object_centric", "recovery_error": err_oc, "token_steps": sum(counted),
         "token_step_fraction": float(report.token_step_fraction), "identical_to_standard": identical},
    ]
    ok = all(checks.values())
    if fmt == "csv":
        return _csv_text(["mode", "recovery_error", "token_steps", "token_step_fraction", "identical_to_standard"], rows, env), ok
    body = {
        **env,
        "results": {
            "standard": {"recovery_error": err_std, "schedule": res.blend_schedule if scfg.blend_steps == scfg.N else None},
            "object_centric": oc,
            "identical_outputs": identical,
            "expected_identical": expect_identical,
        },
        "checks": checks,
    }
    return json.dumps(body, indent=2) + "\n", ok


# -- cost-report --------------------------------------------------------------

def _resolve_cost_report(raw: dict, seed: int, base: Path) -> dict:
    unknown = set(raw) - {"model", "steps", "merge", "oc", "seed"}
    if unknown:
        raise ConfigError(f"unknown cost-report keys: {sorted(unknown)}")
    model = str(raw.get("model", "builtin:fatezero_like"))
    if not model.startswith("builtin:"):
        path = Path(model)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"model spec not found: {path}")
        model = str(path)
    steps = [int(s) for s in raw.get("steps", [50, 20])]
    if len(steps) != 2 or min(steps) < 1:
        raise ConfigError("steps must be two positive counts: [full, reduced]")
    merge = raw.get("merge", {})
    oc = raw.get("oc", {})
    return {
        "model": model,
        "steps": steps,
        "merge": {
            "kv_keep_fraction": float(merge.get("kv_keep_fraction", 0.125)),
            "q_keep_fraction": float(merge.get("q_keep_fraction", 1.0)),
            "caps": merge.get("caps", {"8x8": 4, "16x16": 16}),
        },
        "oc": {
            "T": int(oc.get("T", 1000)),
            "gamma": float(oc.get("gamma", 0.25)),
            "phi": "inf" if str(oc.get("phi", 2.0)).lower() in ("inf", "infinity", "none") else float(oc.get("phi", 2.0)),
            "delta": int(oc.get("delta", 3600)),
            "total": int(oc.get("total", 4096)),
        },
        "seed": seed,
    }


def cmd_cost_report(raw: dict, seed: int, fmt: str, base: Path = Path(".")) -> tuple[str, bool]:
    cfg = _resolve_cost_report(raw, seed, base)
    env = _envelope("cost-report", {**cfg, "model": Path(cfg["model"]).name if not cfg["model"].startswith("builtin:") else cfg["model"]}, seed)
    model = load_model_spec(cfg["model"])
    full, reduced = cfg["steps"]
    mcfg = cfg["merge"]
    caps = _parse_caps(mcfg["caps"])
    kv, q = mcfg["kv_keep_fraction"], mcfg["q_keep_fraction"]
    occ = cfg["oc"]
    scfg = SamplerConfig(T=occ["T"], N=reduced, gamma=occ["gamma"], phi=math.inf if occ["phi"] == "inf" else occ["phi"])

    storage = {
        f"baseline_{full}": attention_map_storage(model, full),
        f"baseline_{reduced}": attention_map_storage(model, reduced),
        f"oc_{reduced}": oc_sampling_report(scfg, occ["delta"], occ["total"], model).attention_map_bytes,
        f"merged_{reduced}": merged_storage(model, reduced, kv, q, caps),
        f"merged_oc_{reduced}": oc_sampling_report(scfg, occ["delta"], occ["total"], model, kv, q, caps).attention_map_bytes,
    }
    chain = [storage[f"baseline_{full}"], storage[f"baseline_{reduced}"], storage[f"merged_{reduced}"], storage[f"merged_oc_{reduced}"]]
    if chain[0] > 0:
        ratio = Fraction(chain[1], chain[0])
        checks = {
            "step_ratio_exact": ratio == Fraction(reduced, full),
            "strict_ordering": all(a > b for a, b in zip(chain, chain[1:])),
        }
    else:
        ratio = None
        checks = {"all_zero": all(v == 0 for v in storage.values())}
    rows = [{"config": name, "bytes": b, "gb": b / GB} for name, b in storage.items()]
    ok = all(checks.values())
    if fmt == "csv":
        return _csv_text(["config", "bytes", "gb"], rows, env), ok
    body = {
        **env,
        "results": {
            "storage": rows,
            "step_ratio": None if ratio is None else f"{ratio.numerator}/{ratio.denominator}",
            "reduction_factor": None if not chain[-1] else chain[0] / chain[-1],
        },
        "checks": checks,
    }
    return json.dumps(body, indent=2) + "\n", ok


# -- entry point --------------------------------------------------------------

COMMANDS: dict[str, Callable[..., tuple[str, bool]]] = {
    "merge-bench": cmd_merge_bench,
    "sample-demo": cmd_sample_demo,
    "cost-report": cmd_cost_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ocdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", type=Path, help="report path (stdout when omitted)")
        p.add_argument("--seed", type=int, help="run seed; overrides the config's seed")
        p.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw: dict[str, Any] = {}
        base = Path(".")
        if args.config is not None:
            raw = json.loads(args.config.read_text())
            base = args.config.parent
            if not isinstance(raw, dict):
                raise ConfigError("config must be a JSON object")
        seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if args.command == "cost-report":
            text, ok = cmd_cost_report(raw, seed, args.format, base)
        else:
            text, ok = COMMANDS[args.command](raw, seed, args.format)
    except (OCDError, OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        print(f"ocdiff {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except CheckFailed as e:
        print(f"ocdiff {args.command}: check failed: {e}", file=sys.stderr)
        return 1
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    if not ok:
        print(f"ocdiff {args.command}: internal checks failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
