"""Command-line entry point: ``mlk {gen-scene,train,eval,localize,retrieve}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mlk")


class UsageError(Exception):
    pass


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def str_list(choices):
    def parse(text: str) -> list[str]:
        values = [v.strip() for v in text.split(",") if v.strip()]
        bad = [v for v in values if v not in choices]
        if not values or bad:
            raise argparse.ArgumentTypeError(f"expected a comma-separated subset of {sorted(choices)}, got {text!r}")
        return values

    return parse


def grid_pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"grid dimensions must be positive, got {text!r}")
    return h, w


RETRIEVAL_CHOICES = {"covis", "vpr", "embedding"}
SCALE_CHOICES = {"motion", "umeyama"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON file of flag defaults; explicit flags win")
        p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene file")
    common(p)
    p.add_argument("--frames", type=positive_int, default=32, help="database frames")
    p.add_argument("--queries", type=positive_int, default=8)
    p.add_argument("--landmarks", type=positive_int, default=500)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--grid", type=grid_pair, default=(4, 4))
    p.add_argument("--channels", type=int, default=8, help="feature channels (last one stores hit counts)")
    p.add_argument("--trap-fraction", type=float, default=0.0)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("train", help="train the regressor")
    common(p)
    p.add_argument("--scene", type=Path, action="append", default=[], help="training scene file (repeatable)")
    p.add_argument("--synthetic", type=int, default=0, help="also train on N generated scenes")
    p.add_argument("--steps", type=positive_int, default=5000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-final", type=float, default=None, help="defaults to lr / 100")
    p.add_argument("--batch-size", type=positive_int, default=8)
    p.add_argument("--k-min", type=positive_int, default=2)
    p.add_argument("--k-max", type=positive_int, default=8)
    p.add_argument("--token-mode", choices=["all_learnable", "last_only"], default="all_learnable")
    p.add_argument("--pairwise", action="store_true", help="pair-only baseline: k = 1, no pose encoding")
    p.add_argument("--query-share", type=float, default=0.5, help="query frame's share of each loss term")
    p.add_argument("--plain-mean", action="store_true", help="weight all k + 1 frames equally instead")
    p.add_argument("--dim", type=positive_int, default=32)
    p.add_argument("--blocks", type=positive_int, default=2)
    p.add_argument("--heads", type=positive_int, default=4)
    p.add_argument("--registers", type=int, default=2)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("-o", "--output", type=Path, required=True, help="output directory")

    p = sub.add_parser("eval", help="run the localization benchmark")
    common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--oracle", action="store_true", help="use ground-truth relative poses")
    p.add_argument("--oracle-noise", type=float, default=None, metavar="DEG",
                   help="ground truth plus co-visibility-scaled angular noise of DEG degrees")
    p.add_argument("--k", type=positive_int, default=10)
    p.add_argument("--grid-k", type=int_list, default=None, help="comma-separated k values, overrides --k")
    p.add_argument("--retrieval", type=str_list(RETRIEVAL_CHOICES), default=["covis"])
    p.add_argument("--scale", type=str_list(SCALE_CHOICES), default=["motion"])
    p.add_argument("--timing", action="store_true", help="record wall times (reports are then not reproducible)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-o", "--output", type=Path, required=True, help="report directory")

    for name, helptext in (("localize", "localize one query"), ("retrieve", "inspect retrieval for one query")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--scene", type=Path, required=True)
        p.add_argument("--query", required=True, help="query frame id")
        p.add_argument("--k", type=positive_int, default=10)
        p.add_argument("--retrieval", choices=sorted(RETRIEVAL_CHOICES), default="covis")
        if name == "localize":
            p.add_argument("--checkpoint", type=Path)
            p.add_argument("--oracle", action="store_true")
            p.add_argument("--oracle-noise", type=float, default=None, metavar="DEG")
            p.add_argument("--scale", choices=sorted(SCALE_CHOICES), default="motion")
    return parser


def _resolve(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            defaults = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(defaults) - known
        if unknown:
            parser.error(f"unknown keys in {args.config}: {sorted(unknown)}")
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _config_dict(args, exclude=()) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("config", "dump_config", "verbose", *exclude):
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, (list, tuple)):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        out[k] = v
    return out


def _require_existing(path: Path, what: str) -> None:
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")


# ---------------------------------------------------------------- commands


def cmd_gen_scene(args) -> int:
    from .data import SceneGenConfig, generate_scene, save_scene
    from .retrieval import retrieve_covis

    try:
        cfg = SceneGenConfig(
            num_landmarks=args.landmarks,
            num_database_frames=args.frames,
            num_queries=args.queries,
            fov_degrees=args.fov,
            descriptor_dim=args.channels,
            grid=tuple(args.grid),
            trap_fraction=args.trap_fraction,
            seed=args.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    scene = generate_scene(cfg)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, args.output)
    covis = [retrieve_covis(scene, q.id, 1).scores[0] for q in scene.queries()]
    print(
        f"wrote {args.output}: {len(scene.database())} database frames, {len(scene.queries())} queries, "
        f"{scene.num_landmarks} landmarks, mean best co-visibility {np.mean(covis):.3f}"
    )
    return EXIT_OK


def _load_scenes(paths):
    from .data import load_scene

    for p in paths:
        _require_existing(p, "scene file")
    return [load_scene(p) for p in paths]


def cmd_train(args) -> int:
    from .data import SceneGenConfig, generate_scene
    from .plotting import plot_loss_curve
    from .regressor import ModelConfig, PoseRegressor, save_checkpoint
    from .training import TrainConfig, TrainingDiverged, pairwise_baseline, train, write_curve

    scenes = _load_scenes(args.scene)
    if args.synthetic:
        grid = scenes[0].grid if scenes else (4, 4)
        scenes += [generate_scene(SceneGenConfig(seed=10_000 + args.seed * 1000 + i, num_queries=4, grid=grid))
                   for i in range(args.synthetic)]
    if not scenes:
        raise UsageError("train needs --scene files or --synthetic N")
    grids = {s.grid for s in scenes}
    channels = {s.frames[0].feature_map.shape[2] for s in scenes}
    if len(grids) != 1 or len(channels) != 1:
        raise UsageError("all training scenes must share one grid and channel count")
    lr_final = args.lr / 100 if args.lr_final is None else args.lr_final
    try:
        model_cfg = ModelConfig(
            token_dim=args.dim, num_blocks=args.blocks, num_heads=args.heads,
            patch_grid=grids.pop(), feature_channels=channels.pop(), num_register_tokens=args.registers,
            token_mode=args.token_mode, seed=args.seed, use_pose_tokens=not args.pairwise, dtype=args.dtype,
        )
        train_cfg = TrainConfig(
            lr_initial=args.lr, lr_final=lr_final, steps=args.steps, batch_size=args.batch_size,
            k_range=(args.k_min, args.k_max), seed=args.seed, token_mode=args.token_mode,
            query_share=None if args.plain_mean else args.query_share,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    model = PoseRegressor(model_cfg)
    out = args.output
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.pairwise:
            result = pairwise_baseline(model, scenes, train_cfg)
        else:
            result = train(model, scenes, train_cfg)
    except TrainingDiverged as e:
        path = out / "diverged.json"
        path.write_text(json.dumps(e.record, indent=1) + "\n")
        print(f"training diverged at step {e.record['step']}; diagnostics in {path}", file=sys.stderr)
        return EXIT_FAILURE
    save_checkpoint(model, out / "checkpoint.json", extra={"train": asdict(train_cfg)})
    write_curve(result.curve, out / "loss.csv")
    plot_loss_curve(result.curve, out / "loss.png")
    final = result.curve[-1]["total"]
    print(f"wrote {out / 'checkpoint.json'} and {out / 'loss.csv'} ({len(result.curve)} steps, final loss {final:.4f})")
    return EXIT_OK if np.isfinite(final) else EXIT_FAILURE


def _estimator(args):
    from .eval import NoisyOracleEstimator, OracleEstimator, estimator_for
    from .regressor import load_checkpoint

    if args.oracle:
        return OracleEstimator()
    if args.oracle_noise is not None:
        return NoisyOracleEstimator(args.oracle_noise, args.oracle_noise, seed=args.seed)
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required unless --oracle or --oracle-noise is given")
    _require_existing(args.checkpoint, "checkpoint")
    return estimator_for(load_checkpoint(args.checkpoint))


def cmd_eval(args) -> int:
    from .eval import BenchmarkGrid, run_benchmark, write_report

    estimator = _estimator(args)
    scene = _load_scenes([args.scene])[0]
    grid = BenchmarkGrid(
        tuple(args.grid_k or [args.k]), tuple(args.retrieval), tuple(args.scale)
    )
    report = run_benchmark(scene, estimator, grid, seed=args.seed, record_timing=args.timing,
                           config={"cli": _config_dict(args, exclude=("output",))})
    paths = write_report(report, args.output, figures=not args.no_figures)
    for row in report.aggregates:
        print(
            f"k={row['k']:<3d} {row['retrieval']:<13s} {row['method']:<17s} "
            f"median {row['median_trans_units']:.4g} units / {row['median_rot_deg']:.4g} deg  "
            f"AUC@5/10/20 {row['auc@5']:.3f}/{row['auc@10']:.3f}/{row['auc@20']:.3f}  "
            f"failures {row['failures']}/{row['num_queries']}"
        )
    print(f"wrote {paths['json']}")
    return EXIT_OK


def cmd_localize(args) -> int:
    from .eval import localize_query, query_errors
    from .scale_recovery import DegenerateGeometry

    estimator = _estimator(args)
    scene = _load_scenes([args.scene])[0]
    try:
        scene.frame(args.query)
    except KeyError as e:
        raise UsageError(str(e)) from None
    try:
        pose, diag = localize_query(scene, args.query, estimator, args.k, args.retrieval, args.scale)
    except DegenerateGeometry as e:
        print(f"localization failed: {e}", file=sys.stderr)
        return EXIT_FAILURE
    trans, rot, tdeg = query_errors(scene, scene.frame(args.query), pose, scene.frame(diag["references"][0]))
    print(json.dumps({
        "query": args.query,
        "pose": pose.to_dict(),
        "center": pose.center.tolist(),
        "errors": {"trans_units": trans, "rot_deg": rot, "trans_deg": tdeg},
        "diagnostics": diag,
    }, indent=1))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    from .retrieval import retrieve

    scene = _load_scenes([args.scene])[0]
    try:
        result = retrieve(scene, args.query, args.k, args.retrieval)
    except KeyError as e:
        raise UsageError(str(e)) from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"# {result.strategy.value} top-{args.k} for {args.query}")
    for fid, score in zip(result.frame_ids, result.scores):
        print(f"{fid}\t{score:.6f}")
    return EXIT_OK


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "train": cmd_train,
    "eval": cmd_eval,
    "localize": cmd_localize,
    "retrieve": cmd_retrieve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _resolve(parser, argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.dump_config:
        print(json.dumps({"command": args.command, **_config_dict(args)}, indent=1, sort_keys=True))
        return EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"mlk {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure exit code
        log.debug("failure", exc_info=True)
        print(f"mlk {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
