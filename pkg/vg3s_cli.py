"""
VG3S Occupancy Pipeline CLI

Command-line interface with the following subcommands:
1. selftest   - run the invariant and gradient suite
2. gen-tokens - write the synthetic token stack of the bundled scene
3. train      - train on the bundled scene, write checkpoint and log
4. eval       - score a checkpoint, write the metrics report
5. splat      - Gaussian-set file -> voxel file
6. export-ply - voxel file -> ASCII PLY point cloud
7. ablate     - train and score every adapter variant, write the table

Exit codes: 0 ok, 1 self-test or run failure, 2 usage or configuration
error, 3 I/O error.
"""

import argparse
import sys
from pathlib import Path

from src.gaussian_scene import labels_from, splat
from src.main import (CheckpointError, NonFiniteLossError, evaluate, prepare_data,
                      resolve_output_dir, run_ablation, train)
from src.run_config import ConfigError, parse_config
from src.scene_io import (SceneFileError, export_ply, read_gaussian_file, read_voxel_file,
                          write_voxel_file)
from src.selftest import run_selftest
from src.token_provider import TokenFileError, write_token_file

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3


def cmd_selftest(args, cfg) -> int:
    return EXIT_OK if run_selftest(verbose=True) else EXIT_FAILURE


def cmd_gen_tokens(args, cfg) -> int:
    out = Path(args.out) if args.out else resolve_output_dir() / "tokens.vgt"
    out.parent.mkdir(parents=True, exist_ok=True)
    print("Generating synthetic tokens for the bundled scene...")
    data = prepare_data(cfg)
    write_token_file(data.tokens, out)
    views, layers, tokens, channels = data.tokens.data.shape
    print(f"  - Shape: {views} views x {layers} layers x {tokens} tokens x {channels} channels")
    print(f"Tokens written to: {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    train(cfg, output_dir=args.out, resume=args.resume, stop_at=args.steps, excel=args.excel)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    out = args.out if args.out else resolve_output_dir()
    evaluate(cfg, checkpoint=args.checkpoint, output_dir=out, excel=args.excel)
    return EXIT_OK


def cmd_splat(args, cfg) -> int:
    gaussians = read_gaussian_file(args.gaussians)
    if gaussians.num_classes != cfg.scene.num_classes:
        raise ConfigError(f"Gaussian file has {gaussians.num_classes} classes, "
                          f"config num_classes = {cfg.scene.num_classes}")
    kappa = cfg.scene.cull_kappa if args.kappa is None else args.kappa
    print(f"Splatting {gaussians.count} Gaussians into a "
          f"{'x'.join(str(d) for d in cfg.grid.dims)} grid (kappa = {kappa})...")
    grid = labels_from(splat(gaussians, cfg.grid, kappa, cfg.workers), cfg.scene.occ_threshold)
    write_voxel_file(grid, args.out)
    occupied = int((grid.labels != grid.empty_label).sum())
    print(f"  - Occupied voxels: {occupied} of {cfg.grid.num_voxels}")
    print(f"Voxels written to: {args.out}")
    return EXIT_OK


def cmd_export_ply(args, cfg) -> int:
    grid = read_voxel_file(args.voxels)
    count = export_ply(grid, args.out)
    print(f"Exported {count} occupied voxels to: {args.out}")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    groups = None
    if args.groups:
        try:
            groups = [int(k) for k in args.groups.split(",")]
        except ValueError:
            raise ConfigError(f"--groups must be comma-separated integers, got '{args.groups}'")
    run_ablation(cfg, output_dir=args.out, steps=args.steps, group_counts=groups, excel=args.excel)
    return EXIT_OK


COMMANDS = {
    "selftest": cmd_selftest,
    "gen-tokens": cmd_gen_tokens,
    "train": cmd_train,
    "eval": cmd_eval,
    "splat": cmd_splat,
    "export-ply": cmd_export_ply,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', help='Flat key = value config file')
    common.add_argument('--seed', type=int, help='Override the config seed')

    parser = argparse.ArgumentParser(
        description='VG3S Occupancy Pipeline CLI',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Check the build
  python vg3s_cli.py selftest

  # Train on the bundled toy scene, then evaluate
  python vg3s_cli.py train --out output/run1
  python vg3s_cli.py eval --checkpoint output/run1/checkpoint.npz --out output/run1

  # Voxelize the trained Gaussians and export for a point-cloud viewer
  python vg3s_cli.py splat --gaussians output/run1/gaussians.vgs --out output/run1/scene.vox
  python vg3s_cli.py export-ply --voxels output/run1/scene.vox --out output/run1/scene.ply

  # Component and grouping ablations, short runs
  python vg3s_cli.py ablate --steps 50 --out output/ablation --excel
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('selftest', parents=[common], help='Run the invariant and gradient suite')

    p = sub.add_parser('gen-tokens', parents=[common], help='Write the synthetic token stack')
    p.add_argument('--out', metavar='PATH', help='Token file (default: <output>/tokens.vgt)')

    p = sub.add_parser('train', parents=[common], help='Train on the bundled toy scene')
    p.add_argument('--out', metavar='DIR', help='Output directory (default: output/)')
    p.add_argument('--resume', metavar='CHECKPOINT', help='Continue from a checkpoint')
    p.add_argument('--steps', type=int, metavar='N', help='Stop after N total steps')
    p.add_argument('--excel', action='store_true', help='Also write train_log.xlsx')

    p = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    p.add_argument('--checkpoint', metavar='PATH',
                   help='Trained checkpoint (default: untrained initialization)')
    p.add_argument('--out', metavar='DIR', help='Output directory (default: output/)')
    p.add_argument('--excel', action='store_true', help='Also write metrics.xlsx')

    p = sub.add_parser('splat', parents=[common], help='Gaussian-set file to voxel file')
    p.add_argument('--gaussians', metavar='PATH', required=True, help='VG3SGAU1 input')
    p.add_argument('--out', metavar='PATH', required=True, help='VG3SVOX1 output')
    p.add_argument('--kappa', type=float, help='Culling radius (default: config cull_kappa)')

    p = sub.add_parser('export-ply', parents=[common], help='Voxel file to ASCII PLY')
    p.add_argument('--voxels', metavar='PATH', required=True, help='VG3SVOX1 input')
    p.add_argument('--out', metavar='PATH', required=True, help='PLY output')

    p = sub.add_parser('ablate', parents=[common], help='Train and score every adapter variant')
    p.add_argument('--out', metavar='DIR', help='Output directory (default: output/)')
    p.add_argument('--steps', type=int, metavar='N', help='Training steps per variant')
    p.add_argument('--groups', metavar='K,K,...',
                   help='Group counts for the grouping study (default: divisors of layers up to 6)')
    p.add_argument('--excel', action='store_true', help='Also write ablation.xlsx')
    return parser


def main(argv=None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        cfg = parse_config(args.config, seed=args.seed)
        return COMMANDS[args.command](args, cfg)
    except (TokenFileError, SceneFileError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, CheckpointError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
