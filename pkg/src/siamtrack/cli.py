"""siamtrack command line: track, eval, simulate, train-reinstater, bench.

Exit codes: 0 success, 2 input error, 3 config or training error, 4 evaluation mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .cues import FileProvider, MissingEmbedding, ParseError
from .io import (ConfigError, load_solver_config, read_seqinfo, read_trajectories, write_embeddings,
                 write_results, write_seqinfo)
from .learn import ModelFormatError, save_model
from .metrics import SequenceMismatch, evaluate
from .sim import SimProvider, WorldConfig, generate, scenario_library, simulate_world
from .solver import run

EXIT_INPUT, EXIT_CONFIG, EXIT_MISMATCH = 2, 3, 4
CONFIG_ENV = "SIAMTRACK_CONFIG"
WORLD_FILE = "world.cfg"

log = logging.getLogger("siamtrack")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# track -----------------------------------------------------------------------

def _load_config(path: str | None):
    path = path or os.environ.get(CONFIG_ENV) or None
    try:
        return load_solver_config(path)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _replay_provider(directory: str, search_ratio: float) -> SimProvider:
    path = Path(directory) / WORLD_FILE
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_INPUT) from None
    try:
        world = WorldConfig.from_text(text, str(path))
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    return SimProvider(simulate_world(world), search_ratio)


def cmd_track(args) -> int:
    cfg = _load_config(args.config)
    fps, length = cfg.fps, None
    if args.seqinfo:
        try:
            info = read_seqinfo(args.seqinfo)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot read seqinfo {args.seqinfo}: {exc}", EXIT_INPUT) from None
        fps = info.get("fps", fps)
        length = info.get("sequence_length")
    cfg = replace(cfg, fps=fps)
    if args.replay:
        provider = _replay_provider(args.replay, cfg.search_ratio)
        cfg = replace(cfg, fps=provider.fps)
    else:
        if not args.det:
            raise CliError("track needs --det FILE or --replay DIR", EXIT_INPUT)
        if not args.emb:
            print("warning: no --emb given, reinstatement disabled", file=sys.stderr)
            cfg = replace(cfg, reinstate_mode="off", use_track_branch=True)
        provider = FileProvider.load(args.det, args.emb, fps=fps, num_frames=length,
                                     search_ratio=cfg.search_ratio)
    start = time.perf_counter()
    try:
        result = run(provider, cfg)
    except (ValueError, ModelFormatError, MissingEmbedding) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    elapsed = time.perf_counter() - start
    write_results(result, args.out)
    print(f"tracks: {len(result.tracks)}  frames: {provider.num_frames}  time: {elapsed:.2f}s")
    return 0


# eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    gt = read_trajectories(args.gt, sequence_length=args.length, fps=args.fps)
    pred = read_trajectories(args.pred, sequence_length=gt.sequence_length, fps=args.fps,
                             min_visibility=0.0)
    report = evaluate(pred, gt)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        for key, value in report.items():
            print(f"{key:>12} {_fmt(value)}")
    return 0


# simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    library = scenario_library()
    if args.scenario not in library:
        raise CliError(f"unknown scenario {args.scenario!r}; available: {', '.join(library)}",
                       EXIT_INPUT)
    world = replace(library[args.scenario], seed=args.seed)
    if args.noiseless:
        world = world.without_noise()
    gt, provider = generate(world)
    Path(args.out_gt).parent.mkdir(parents=True, exist_ok=True)
    write_results(gt, args.out_gt)
    out = Path(args.out_cues)
    out.mkdir(parents=True, exist_ok=True)
    (out / WORLD_FILE).write_text(world.to_text(), encoding="utf-8")
    write_seqinfo(out / "seqinfo.ini", args.scenario, world.fps, world.frames)
    # detections alone, usable by ``track --det``; the full stream replays from world.cfg
    rows, embs = [], []
    for f in range(world.frames):
        for d in provider.detections(f):
            rows.append((f, d))
            embs.append(d.embedding)
    with open(out / "det.txt", "w", encoding="utf-8") as fh:
        for f, d in rows:
            b = d.box
            vals = ",".join(repr(float(v)) for v in (b.x, b.y, b.w, b.h, d.score))
            fh.write(f"{f + 1},-1,{vals},-1,-1,-1\n")
    write_embeddings(embs, out / "emb.txt")
    print(f"{args.scenario}: {len(gt.tracks)} tracks, {world.frames} frames, {len(rows)} detections")
    return 0


# train-reinstater ------------------------------------------------------------

def scenario_sets() -> dict[str, list[WorldConfig]]:
    base = bench.crowded_occlusion()
    easy = replace(scenario_library()["full-occlusion"], n_people=6, frames=150,
                   occlusion_script="0:20-40;2:60-90;4:100-115", emb_noise=0.1, lookalike_rate=0.0)
    return {
        "crowded-occlusion": [replace(base, seed=s) for s in bench.TRAIN_SEEDS],
        "small": [replace(base, seed=s, frames=100, n_people=16) for s in bench.TRAIN_SEEDS[:3]],
        "separable": [replace(easy, seed=s) for s in range(200, 206)],
    }


def cmd_train(args) -> int:
    sets = scenario_sets()
    if args.scenario_set not in sets:
        raise CliError(f"unknown scenario set {args.scenario_set!r}; available: {', '.join(sets)}",
                       EXIT_INPUT)
    worlds = sets[args.scenario_set]
    online = None
    if args.mode == "offline":
        online = bench.train_from_worlds(worlds, "online", seed=args.seed, jobs=args.jobs,
                                         steps=args.steps)
    parts = [bench.reinstate_examples(w, args.mode, online_model=online) for w in worlds]
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    rng = np.random.default_rng(args.seed)
    test = rng.random(len(y)) < 0.2
    try:
        model = bench.train_reinstater(X[~test], y[~test], args.mode, seed=args.seed,
                                       steps=args.steps)
    except FloatingPointError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_CONFIG) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    if not test.any():
        raise CliError("no held-out examples", EXIT_CONFIG)
    p = model.forward(X[test])[:, 0]
    acc = float(((p > 0.5) == (y[test] == 1)).mean())
    save_model(model, args.out)
    print(f"examples: {len(y)}  positive: {int(y.sum())}  held-out accuracy: {acc:.4f}")
    return 0


# bench -----------------------------------------------------------------------

def _throughput(n_people: int, frames: int, seed: int) -> tuple[int, float]:
    world = WorldConfig(seed=seed, n_people=n_people, frames=frames, arena_w=3840, arena_h=2160,
                        layout="random")
    _, provider = generate(world)
    cfg = replace(load_solver_config(None), fps=world.fps)
    start = time.perf_counter()
    run(provider, cfg)
    return n_people, (time.perf_counter() - start) / frames


def cmd_bench(args) -> int:
    if args.ablation:
        table = bench.ablation(seeds=tuple(range(args.seeds)), jobs=args.jobs, frames=args.frames)
        if args.json:
            print(json.dumps({v: {k: x for k, x in r.items() if k != "per_seed_AP50"}
                              for v, r in table.items()}, sort_keys=True))
        else:
            print(f"{'variant':<12} {'AP50':>7} {'AP75':>7} {'MOTA':>7} {'IDF1':>7} {'IDsw':>7}")
            for v, r in table.items():
                print(f"{v:<12} {r['AP50']:7.4f} {r['AP75']:7.4f} {r['MOTA']:7.4f} "
                      f"{r['IDF1']:7.4f} {r['IDsw']:7.1f}")
        return 0
    sizes = [int(s) for s in args.sizes.split(",")]
    jobs = [(n, args.frames, args.seed) for n in sizes]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_throughput, *zip(*jobs)))
    else:
        rows = [_throughput(*j) for j in jobs]
    if args.json:
        print(json.dumps({str(n): t for n, t in rows}))
    else:
        print(f"{'tracks':>7} {'ms/frame':>9} {'ms/track':>9}")
        for n, t in rows:
            print(f"{n:>7} {1000 * t:9.3f} {1000 * t / max(n, 1):9.4f}")
    return 0


# main ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siamtrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="run the online solver over a cue file or a simulated stream")
    t.add_argument("--det", help="MOT detection file")
    t.add_argument("--emb", help="embedding file, one row per detection row")
    t.add_argument("--config", help=f"solver config (default ${CONFIG_ENV} or built-in)")
    t.add_argument("--seqinfo", help="seqinfo.ini with frameRate and seqLength")
    t.add_argument("--replay", metavar="DIR", help="cue directory written by simulate")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score a result file against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--fps", type=float, default=30.0)
    e.add_argument("--length", type=int, help="sequence length (default: last gt frame)")
    e.add_argument("--json", action="store_true", help="flat machine-readable output")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="write a scenario's ground truth and cue stream")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noiseless", action="store_true")
    s.add_argument("--out-gt", required=True)
    s.add_argument("--out-cues", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("train-reinstater", help="train the reinstatement classifier")
    r.add_argument("--scenario-set", required=True)
    r.add_argument("--mode", choices=("online", "offline"), required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--steps", type=int, default=3000)
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="solver throughput, or the component ablation")
    b.add_argument("--ablation", action="store_true")
    b.add_argument("--seeds", type=int, default=10)
    b.add_argument("--sizes", default="5,10,20,40,80")
    b.add_argument("--frames", type=int, default=200)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SequenceMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
