"""Command-line entry point: ``mipcad <stage> [--config FILE]``.

Exit codes: 0 success, 1 contract or data error, 2 missing upstream stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import MipCadError
from .pipeline import STAGES, Pipeline, PipelineConfig, dump_toml

log = logging.getLogger("mipcad")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", type=Path, help="TOML config file")
    p.add_argument("--fold", type=int, help="override the configured fold index")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--force", action="store_true", help="ignore cached results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mipcad", description="MIP-based lung nodule detection pipeline")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run the {stage} stage"))
    _common(sub.add_parser("run", help="run every stage in order"))

    plan = sub.add_parser("plan", help="print the fold plan")
    _common(plan)

    synth = sub.add_parser("synth", help="write the synthetic mini-dataset and a matching config")
    synth.add_argument("out", type=Path)
    synth.add_argument("--volumes", type=int, default=6)
    synth.add_argument("--seed", type=int, default=0)

    png = sub.add_parser("export-png", help="save one slab image of a cached MIP stack as PNG")
    _common(png)
    png.add_argument("series_id")
    png.add_argument("thickness", type=int)
    png.add_argument("index", type=int, help="output z index (1 mm grid)")
    png.add_argument("out", type=Path)
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if args.fold is not None:
        cfg.fold = args.fold
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def mini_config(root: Path) -> PipelineConfig:
    """Settings sized for the synthetic mini-dataset on a single CPU core."""
    from .detect2d.train import TrainConfig2D
    from .fpr3d.train import TrainConfig3D

    return PipelineConfig(
        data_root=root / "data",
        cache_dir=root / "cache",
        n_subsets=3,
        detect2d=TrainConfig2D(base_width=4, lr=3e-3, max_epochs=25, early_stop_patience=25, plateau_patience=25, max_shift=10),
        fpr3d=TrainConfig3D(base_width=4, dense_width=32, lr=1e-3, max_epochs=40, early_stop_patience=8),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            from .synthetic import write_mini_dataset

            ids = write_mini_dataset(args.out / "data", args.volumes, args.seed)
            cfg = mini_config(args.out.resolve())
            cfg.seed = args.seed
            (args.out / "config.toml").write_text(dump_toml(cfg))
            print(f"wrote {len(ids)} volumes to {args.out / 'data'} and {args.out / 'config.toml'}")
            return 0

        cfg = _config(args)
        pipe = Pipeline(cfg)
        if args.command == "plan":
            plan = pipe.plan()
            for name in ("train", "val", "test"):
                part = getattr(plan, name)
                print(f"{name:5s} {len(part):4d}  {' '.join(part)}")
            return 0
        if args.command == "export-png":
            from .mip import to_png
            from .pipeline.runner import load_stack

            stack = load_stack(pipe.scan_dir(args.series_id) / f"mip_t{args.thickness}.npz")
            to_png(stack[args.index], args.out)
            print(args.out)
            return 0

        results = pipe.run_all(args.force) if args.command == "run" else [pipe.run(args.command, args.force)]
        for r in results:
            print(f"{r.stage:12s} {r.status:6s} {r.seconds:7.1f}s  {r.key[:12]}")
        if args.command in ("report", "run"):
            summary = pipe.fold_dir() / "report" / "summary.txt"
            print(summary.read_text())
        return 0
    except MipCadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
