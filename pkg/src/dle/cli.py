"""Command-line entry point: ``dle run|sweep|gen|blocks``."""
from __future__ import annotations

import argparse
import itertools
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import metrics
from .numerics import make_rng
from .pipeline import load_config, run_pipeline
from .pointcloud import block_partition, load_episode, load_ply, save_episode, write_labels, write_ply
from .synthetic import SynthSpec, generate_synthetic_episode

DEFAULT_GRID = {
    "tau": [0.5, 0.6, 0.7, 0.8, 0.9],
    "theta": [0.5, 0.6, 0.7, 0.8, 0.9],
    "N_a": [50, 100, 150, 200],
}
SWEEP_FIELDS = ("tau", "theta", "N_a", "seed", "miou", "coverage", "precision", "self_loss")


class CLIError(Exception):
    pass


def _episode_id(path) -> str:
    return Path(path).stem


def run_episode(manifest, config, seed: int, out_dir=None, fmt: str = "json") -> dict:
    cfg = load_config(config)
    episode = load_episode(manifest, k_neighbors=cfg.feature_k)
    result = run_pipeline(episode, cfg, seed, episode_id=_episode_id(manifest))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = result.report["episode"]
        for name in ("confident", "expanded", "final", "prediction"):
            write_labels(out / f"{stem}.{name}.labels", getattr(result, name))
        if fmt == "csv":
            (out / f"{stem}.metrics.csv").write_text(metrics.records_to_csv([result.report]))
        else:
            (out / f"{stem}.report.json").write_text(metrics.records_to_json(result.report))
    return result.report


def parse_grid(text: str) -> dict:
    grid = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"grid line {lineno}: expected key=v1,v2,...")
        key, vals = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULT_GRID:
            raise ValueError(f"grid line {lineno}: can only sweep {sorted(DEFAULT_GRID)}, got {key!r}")
        cast = int if key == "N_a" else float
        grid[key] = [cast(v) for v in vals.split(",") if v.strip()]
        if not grid[key]:
            raise ValueError(f"grid line {lineno}: no values for {key}")
    return {k: grid.get(k, DEFAULT_GRID[k]) for k in DEFAULT_GRID}


def sweep(manifest, config, grid: dict, seeds: list) -> list:
    """One record per (tau, theta, N_a, seed), tau outermost and seed innermost."""
    if not all(grid.values()) or not seeds:
        raise ValueError("sweep grid and seed list must be non-empty")
    base = load_config(config)
    episode = load_episode(manifest, k_neighbors=base.feature_k)
    rows = []
    for tau, theta, n_a, seed in itertools.product(grid["tau"], grid["theta"], grid["N_a"], seeds):
        cfg = replace(base, tau=tau, theta=theta, n_agents=n_a)
        rep = run_pipeline(episode, cfg, seed, episode_id=_episode_id(manifest)).report
        rows.append({"tau": tau, "theta": theta, "N_a": n_a, "seed": seed,
                     "miou": rep["miou"], "coverage": rep["coverage"],
                     "precision": rep["precision"], "self_loss": rep["self_loss"]})
    return rows


def gen_synthetic(spec_path, out_dir, seed: int) -> Path:
    spec = SynthSpec.from_dict(json.loads(Path(spec_path).read_text()))
    episode = generate_synthetic_episode(spec, make_rng(seed))
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CLIError(f"cannot create output directory {out}: {e}") from e
    return save_episode(episode, out, name=Path(spec_path).stem)


def partition(cloud_path, config, seed: int, out_dir) -> list:
    cfg = load_config(config)
    blocks = block_partition(load_ply(cloud_path), cfg.block_size, cfg.points_per_block, make_rng(seed))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for b in blocks:
        stem = f"{Path(cloud_path).stem}_block_{b.cell[0]}_{b.cell[1]}"
        write_ply(out / f"{stem}.ply", b.cloud)
        write_labels(out / f"{stem}.index", b.indices)
        names.append(stem)
    return names


def _seeds(args) -> list:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    return [args.seed]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dle", description="Few-shot point cloud segmentation by "
                                "decoupled localization and expansion.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file; missing keys use defaults")
        sp.add_argument("--seed", type=int, default=0, help="unsigned 64-bit seed (default 0)")
        sp.add_argument("--out", help="output directory")

    r = sub.add_parser("run", help="segment one episode")
    r.add_argument("--episode", required=True, help="episode manifest (JSON)")
    r.add_argument("--format", choices=("json", "csv"), default="json")
    common(r)

    s = sub.add_parser("sweep", help="tau x theta x N_a grid over one episode")
    s.add_argument("--episode", required=True)
    s.add_argument("--sweep", help="grid file with lines like tau=0.5,0.7 (default: tau and theta 0.5..0.9, N_a 50..200)")
    s.add_argument("--seeds", help="comma-separated seeds; overrides --seed")
    s.add_argument("--format", choices=("json", "csv"), default="csv")
    common(s)

    g = sub.add_parser("gen", help="write a synthetic episode from a JSON spec")
    g.add_argument("--spec", required=True)
    common(g)

    b = sub.add_parser("blocks", help="partition a PLY scene into resampled XY blocks")
    b.add_argument("--cloud", required=True)
    common(b)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            report = run_episode(args.episode, args.config, args.seed, args.out, args.format)
            if args.out is None:
                sys.stdout.write(metrics.records_to_json(report) if args.format == "json"
                                 else metrics.records_to_csv([report]))
        elif args.command == "sweep":
            grid = parse_grid(Path(args.sweep).read_text()) if args.sweep else DEFAULT_GRID
            rows = sweep(args.episode, args.config, grid, _seeds(args))
            text = (metrics.records_to_csv(rows, SWEEP_FIELDS) if args.format == "csv"
                    else metrics.records_to_json(rows))
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"sweep.{args.format}").write_text(text)
            else:
                sys.stdout.write(text)
        elif args.command == "gen":
            if not args.out:
                raise CLIError("gen needs --out")
            print(gen_synthetic(args.spec, args.out, args.seed))
        elif args.command == "blocks":
            if not args.out:
                raise CLIError("blocks needs --out")
            for name in partition(args.cloud, args.config, args.seed, args.out):
                print(name)
    except (CLIError, ValueError, KeyError, OSError, IndexError) as e:
        print(f"dle: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
