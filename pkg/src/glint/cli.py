"""Command-line entry point: ``glint <command> [options]``.

Every command accepts ``--config file.json``; explicit flags override values
from the file. Exit codes: 0 success, 1 failed comparison, 2 usage or input
error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fields
from .hierarchy import (DEFAULT_EPSILON, DEFAULT_TAU, CacheError, build_hierarchy, load_cache,
                        save_cache)
from .imgio import ImageF32, ImageFormatError, write_pfm, write_png
from .kernels import GAUSSIAN, KINDS, FootprintQuery
from .normal_field import NormalField
from .pndf import ClampPolicy, FootprintNDF, histogram_disk, pndf_bin_oracle
from .render import Scene, SceneError, render
from .shadow import (GGXTable, fit_ggx, ggx_projected_area, hemisphere_grid, projected_area_mc,
                     projected_area_ndf)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

DEFAULTS = {
    "epsilon": DEFAULT_EPSILON,
    "tau": DEFAULT_TAU,
    "kernel": GAUSSIAN,
    "threads": None,
    "grid": 128,
}

BENCH_SCALES = (64, 128, 256)


class UsageError(Exception):
    pass


def _pair(text) -> tuple[float, float]:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",")]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected X,Y but got {text!r}")
    return vals[0], vals[1]


def _merge(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "func"):
            cfg[key] = value
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_map(cfg: dict) -> NormalField:
    _require(cfg, "map")
    return NormalField.load(cfg["map"])


def _hierarchy(cfg: dict, field: NormalField):
    if cfg.get("no_hier"):
        return None
    cache = cfg.get("cache")
    if cache and Path(cache).exists():
        return load_cache(cache, field)
    return build_hierarchy(field, float(cfg["epsilon"]), not cfg.get("raw_jacobian_weights"))


def _query(cfg: dict) -> FootprintQuery:
    _require(cfg, "at", "footprint")
    return FootprintQuery(_pair(cfg["at"]), _pair(cfg["footprint"]), cfg["kernel"])


def _emit(report: dict) -> None:
    print(json.dumps(report, indent=2, sort_keys=True))


def _write_gray(img: np.ndarray, path) -> None:
    write_pfm(ImageF32(np.asarray(img, dtype=np.float32)[..., None]), path)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_build(cfg: dict) -> int:
    _require(cfg, "out")
    field = _load_map(cfg)
    t0 = time.perf_counter()
    hier = build_hierarchy(field, float(cfg["epsilon"]), not cfg.get("raw_jacobian_weights"))
    seconds = time.perf_counter() - t0
    save_cache(hier, cfg["out"])
    nodes = [int(r.size) for r in hier.residual]
    _emit({"map": str(cfg["map"]), "out": str(cfg["out"]), "seconds": round(seconds, 3),
           "levels": len(nodes), "nodes_per_level": nodes, "nodes": sum(nodes)})
    return EXIT_OK


def cmd_ndf(cfg: dict) -> int:
    _require(cfg, "out")
    field = _load_map(cfg)
    q = _query(cfg)
    hier = _hierarchy(cfg, field)
    ndf = FootprintNDF(field, q, hier, float(cfg["tau"]), ClampPolicy(float(cfg["epsilon"])))
    img = ndf.image(int(cfg["grid"]), int(cfg.get("supersample") or 1))
    _write_gray(img, cfg["out"])
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    _require(cfg, "out")
    field = _load_map(cfg)
    q = _query(cfg)
    hier = _hierarchy(cfg, field)
    ndf = FootprintNDF(field, q, hier, float(cfg["tau"]), ClampPolicy(float(cfg["epsilon"])))
    m = ndf.sample(np.random.default_rng(int(cfg.get("seed") or 0)), int(cfg.get("count") or 10_000))
    out = Path(cfg["out"])
    if out.suffix.lower() == ".pfm":
        grid = int(cfg["grid"])
        counts = histogram_disk(m, grid)
        _write_gray(counts / (len(m) * (2.0 / grid) ** 2), out)
    elif out.suffix.lower() in (".txt", ".csv"):
        np.savetxt(out, m, delimiter=",", fmt="%.17g")
    else:
        np.save(out, m)
    return EXIT_OK


def cmd_area(cfg: dict) -> int:
    _require(cfg, "out")
    field = _load_map(cfg)
    q = _query(cfg)
    n = int(cfg.get("omega_grid") or 64)
    mode = cfg.get("mode") or "analytic"
    dirs, mask = hemisphere_grid(n)
    d = dirs[mask]
    policy = ClampPolicy(float(cfg["epsilon"]))
    if mode == "analytic":
        ndf = FootprintNDF(field, q, _hierarchy(cfg, field), float(cfg["tau"]), policy)
        vals = projected_area_ndf(ndf, d)
    elif mode == "ggx":
        table = GGXTable.load(cfg["ggx"]) if cfg.get("ggx") else None
        if table is not None:
            Omega = table.lookup(q.x, q.r)
        else:
            level = max(1, int(round(np.log2(2.0 * max(q.r)))))
            Omega = fit_ggx(field, level, q.x, policy).Omega
        vals = ggx_projected_area(Omega, d)
    elif mode == "mc":
        rng = np.random.default_rng(int(cfg.get("seed") or 0))
        count = int(cfg.get("count") or 100_000)
        vals = np.array([projected_area_mc(field, q, w, count, rng, policy)[0] for w in d])
    else:
        raise UsageError(f"unknown area mode {mode!r}")
    img = np.zeros((n, n))
    img[mask] = vals
    _write_gray(img, cfg["out"])
    return EXIT_OK


def cmd_fit_ggx(cfg: dict) -> int:
    field = _load_map(cfg)
    out = cfg.get("out") or str(Path(cfg["map"]).with_suffix(".ggx"))
    t0 = time.perf_counter()
    table = GGXTable.build(field, ClampPolicy(float(cfg["epsilon"])))
    table.save(out)
    _emit({"out": out, "levels": sorted(table.omegas), "seconds": round(time.perf_counter() - t0, 3)})
    return EXIT_OK


def cmd_render(cfg: dict) -> int:
    _require(cfg, "scene", "out")
    scene = Scene.load(cfg["scene"])
    if cfg.get("spp") is not None:
        scene.spp = int(cfg["spp"])
    if cfg.get("seed") is not None:
        scene.seed = int(cfg["seed"])
    if cfg.get("no_hier"):
        scene.use_hierarchy = False
    img = render(scene, threads=cfg.get("threads"))
    write_pfm(img, cfg["out"])
    if cfg.get("png"):
        write_png(img, cfg["png"], scene.exposure)
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    field = _load_map(cfg)
    hier = _hierarchy(dict(cfg, no_hier=False), field)
    tau = float(cfg["tau"])
    policy = ClampPolicy(float(cfg["epsilon"]))
    report = {"tau": tau, "queries": int(cfg.get("queries") or 16), "seed": int(cfg.get("seed") or 0),
              "kernel": cfg["kernel"], "scales": []}
    for scale in BENCH_SCALES:
        counts = bench_counts(field, hier, scale / 2.0, [0.0, tau], report["queries"],
                              int(cfg.get("seed") or 0), cfg["kernel"], policy)
        report["scales"].append({"footprint": f"{scale}x{scale}", "r": scale / 2.0,
                                 "mean_candidates": counts[1], "mean_candidates_tau0": counts[0]})
    _emit(report)
    return EXIT_OK


def bench_counts(field, hier, r: float, taus, queries: int, seed: int, kernel: str = GAUSSIAN,
                 policy: ClampPolicy = ClampPolicy(), per_query: int = 64):
    """Mean candidate-triangle count per evaluation for each tau.

    Queries sit at random texture points; the normals evaluated are drawn
    from the query's own P-NDF, the ones a renderer actually asks for.
    """
    rng = np.random.default_rng(seed)
    totals = np.zeros(len(taus))
    for _ in range(queries):
        x = rng.uniform(0, [field.width, field.height])
        q = FootprintQuery(tuple(x), (r, r), kernel)
        m = FootprintNDF(field, q, None, policy=policy).sample(rng, per_query)
        for k, tau in enumerate(taus):
            totals[k] += FootprintNDF(field, q, hier, tau, policy).candidate_count(m).mean()
    return (totals / queries).tolist()


def cmd_oracle_compare(cfg: dict) -> int:
    field = _load_map(cfg)
    q = _query(cfg)
    grid = int(cfg["grid"])
    seed = int(cfg.get("seed") or 0)
    n = int(cfg.get("count") or 10_000_000)
    policy = ClampPolicy(float(cfg["epsilon"]))
    oracle, counts = pndf_bin_oracle(field, q, n, grid, policy, np.random.default_rng(seed))
    ndf = FootprintNDF(field, q, None, policy=policy)
    img = ndf.image(grid, int(cfg.get("supersample") or 8))
    sel = counts >= int(cfg.get("min_hits") or 50)
    l1 = float(np.abs(img - oracle)[sel].sum() / max(oracle[sel].sum(), 1e-300))
    prefix = cfg.get("out")
    if prefix:
        _write_gray(img, f"{prefix}_eval.pfm")
        _write_gray(oracle, f"{prefix}_oracle.pfm")
    _emit({"l1_rel": l1, "bins_compared": int(sel.sum()), "seed": seed})
    return EXIT_OK if l1 < float(cfg.get("threshold") or 0.05) else EXIT_FAILED


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    field = fields.make(cfg.get("kind") or "isotropic", int(cfg.get("size") or 256), int(cfg.get("seed") or 0))
    write_pfm(ImageF32(field.to_vectors().astype(np.float32)), cfg["out"])
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with default option values")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.set_defaults(func=func)
        return p

    def map_opts(p):
        p.add_argument("--map", help="normal map (.pfm or .png)")
        p.add_argument("--epsilon", type=float)

    def query_opts(p):
        p.add_argument("--at", type=_pair, help="footprint center X,Y in texels")
        p.add_argument("--footprint", type=_pair, help="half-extents RX,RY in texels")
        p.add_argument("--kernel", choices=KINDS)

    def hier_opts(p):
        p.add_argument("--cache", help="hierarchy cache (.pnmh); built on the fly if absent")
        p.add_argument("--tau", type=float)
        p.add_argument("--no-hier", action="store_true", default=None)

    p = command("build", cmd_build, "build and cache the cluster/min-max hierarchy")
    map_opts(p)
    p.add_argument("--out")
    p.add_argument("--raw-jacobian-weights", action="store_true", default=None,
                   help="weight cluster fits by 1/J without the epsilon floor")

    p = command("ndf", cmd_ndf, "evaluate the P-NDF image over [-1, 1]^2")
    map_opts(p), query_opts(p), hier_opts(p)
    p.add_argument("--grid", type=int)
    p.add_argument("--supersample", type=int)
    p.add_argument("--out")

    p = command("sample", cmd_sample, "draw projected normals from the P-NDF")
    map_opts(p), query_opts(p), hier_opts(p)
    p.add_argument("--count", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--out", help=".npy, .txt/.csv, or .pfm for a histogram")

    p = command("area", cmd_area, "projected area over a hemisphere grid")
    map_opts(p), query_opts(p), hier_opts(p)
    p.add_argument("--omega-grid", type=int)
    p.add_argument("--mode", choices=("analytic", "ggx", "mc"))
    p.add_argument("--ggx", help="GGX table from fit-ggx")
    p.add_argument("--count", type=int, help="samples per direction for --mode mc")
    p.add_argument("--out")

    p = command("fit-ggx", cmd_fit_ggx, "fit per-level GGX surrogates and write map.ggx")
    map_opts(p)
    p.add_argument("--out")

    p = command("render", cmd_render, "render a scene description")
    p.add_argument("--scene")
    p.add_argument("--out")
    p.add_argument("--png")
    p.add_argument("--spp", type=int)
    p.add_argument("--no-hier", action="store_true", default=None)

    p = command("bench", cmd_bench, "candidate-triangle counts per query at several footprints")
    map_opts(p)
    p.add_argument("--cache")
    p.add_argument("--tau", type=float)
    p.add_argument("--kernel", choices=KINDS)
    p.add_argument("--queries", type=int)

    p = command("oracle-compare", cmd_oracle_compare, "P-NDF image vs binning oracle")
    map_opts(p), query_opts(p)
    p.add_argument("--grid", type=int)
    p.add_argument("--count", type=int, help="oracle samples")
    p.add_argument("--supersample", type=int)
    p.add_argument("--min-hits", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="prefix for the two PFM images")

    p = command("synth", cmd_synth, "write a procedural normal map")
    p.add_argument("--kind", choices=fields.KINDS)
    p.add_argument("--size", type=int)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(_merge(args))
    except (UsageError, OSError, ValueError, ImageFormatError, CacheError, SceneError) as exc:
        print(f"glint {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
