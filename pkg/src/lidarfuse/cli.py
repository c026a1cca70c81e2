"""Command-line entry point: ``lidarfuse <command> [options]``.

Every command writes ``report.txt`` into ``--out``: a version header, then
``key = value`` lines, then optional ``[table <name>]`` sections holding CSV
rows. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio, pipeline, synth
from .dataio import Config
from .errors import LidarFuseError
from .geometry import calibrate_points, project_to_range, range_input_features, voxel_index
from .metrics import panoptic_quality
from .panoptic import PanopticPrediction

REPORT_VERSION = "lidarfuse-report 1"


class Report:
    """Collects scalar entries and tables, then writes them in one go."""

    def __init__(self, command: str):
        self.entries: list[tuple[str, object]] = [("command", command)]
        self.tables: list[tuple[str, list[str], list[list]]] = []

    def add(self, key: str, value) -> None:
        self.entries.append((key, value))

    def table(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
        self.tables.append((name, list(header), [list(r) for r in rows]))

    def render(self) -> str:
        lines = [f"# {REPORT_VERSION}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.entries]
        for name, header, rows in self.tables:
            lines.append(f"[table {name}]")
            lines.append(",".join(header))
            lines += [",".join(_fmt(v) for v in row) for row in rows]
        return "\n".join(lines) + "\n"

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "report.txt"
        path.write_text(self.render(), encoding="utf-8")
        return path


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def parse_report(text: str) -> tuple[dict, dict]:
    """Inverse of :meth:`Report.render`: (scalars as strings, tables as row lists)."""
    lines = text.splitlines()
    if not lines or lines[0] != f"# {REPORT_VERSION}":
        raise ValueError("not a lidarfuse report (missing version header)")
    scalars, tables, current = {}, {}, None
    for line in lines[1:]:
        if line.startswith("[table ") and line.endswith("]"):
            current = line[7:-1]
            tables[current] = []
        elif current is not None:
            tables[current].append(line.split(","))
        else:
            key, _, value = line.partition(" = ")
            scalars[key] = value
    return scalars, tables


# -- commands --------------------------------------------------------------------


def _scene_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if (p / "points.bin").exists())
    if not dirs:
        raise LidarFuseError(f"no scenes found under {root}")
    return dirs


def cmd_synth(args, cfg: Config, report: Report) -> None:
    scenes = synth.generate_scenes(args.count, pipeline.scene_spec(cfg), cfg.seed)
    for i, scene in enumerate(scenes):
        synth.save_scene(args.out / f"scene_{i:03d}", scene)
    report.add("scenes", len(scenes))
    report.table("scenes", ["scene", "points", "instances"],
                 [[f"scene_{i:03d}", s.n, len(np.unique(s.instance[s.instance > 0]))]
                  for i, s in enumerate(scenes)])


def cmd_project(args, cfg: Config, report: Report) -> None:
    scene = synth.load_scene(args.scene)
    pc = scene.points
    rv = project_to_range(pc, cfg.range_height, cfg.range_width, cfg.fov_up, cfg.fov_down)
    occupied, p2v = voxel_index(pc.coords, cfg.voxel_size)
    pixels = calibrate_points(pc, scene.calib)
    args.out.mkdir(parents=True, exist_ok=True)
    np.save(args.out / "range.npy", range_input_features(pc, rv))
    np.save(args.out / "range_index.npy", rv.pixel_to_point)
    np.save(args.out / "voxels.npy", occupied)
    np.save(args.out / "point_voxel.npy", p2v)
    np.save(args.out / "pixels.npy", pixels)
    report.add("points", pc.n)
    report.add("range_occupied", len(rv.occupied()))
    report.add("range_skipped", int(np.count_nonzero(rv.skipped)))
    report.add("voxels", len(occupied))
    report.add("points_in_image", int(np.all(np.isfinite(pixels), axis=1).sum()))


def _load_or_make(args, cfg: Config) -> list:
    if args.scenes is not None:
        scenes = [synth.load_scene(d) for d in _scene_dirs(args.scenes)]
        return [pipeline.prepare_scene(s, cfg) for s in scenes]
    return pipeline.make_scenes(cfg, cfg.scenes, cfg.seed)


def cmd_train(args, cfg: Config, report: Report) -> None:
    data = _load_or_make(args, cfg)
    params = pipeline.ModelParams.init(cfg, cfg.seed)
    result = pipeline.train(data, params, cfg, seed=cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    dataio.write_checkpoint(args.out / "model.ckpt", params.state())
    (args.out / "config.txt").write_text(dataio.format_config(cfg), encoding="utf-8")
    report.add("steps", len(result.losses))
    report.add("final_loss", result.losses[-1])
    report.add("train_accuracy", pipeline.accuracy(data, params, cfg))
    report.table("loss", ["step", "loss"], [[i, v] for i, v in enumerate(result.losses)])


def cmd_eval(args, cfg: Config, report: Report) -> None:
    pred_sem, pred_inst = dataio.split_labels(dataio.read_labels(args.pred))
    gt_sem, gt_inst = dataio.split_labels(dataio.read_labels(args.gt))
    if len(pred_sem) != len(gt_sem):
        raise LidarFuseError(f"{args.pred} has {len(pred_sem)} points, {args.gt} has {len(gt_sem)}")
    result = panoptic_quality(
        PanopticPrediction(pred_sem, pred_inst), PanopticPrediction(gt_sem, gt_inst),
        cfg.num_classes, cfg.thing_classes, cfg.ignore_index,
    )
    for key, value in result.as_dict().items():
        report.add(key, value)
    # 1 = wrong class, 0 = correct or ignored
    errors = ((pred_sem != gt_sem) & (gt_sem != cfg.ignore_index)).astype(np.uint32)
    args.out.mkdir(parents=True, exist_ok=True)
    dataio.write_labels(args.out / "errors.label", errors)
    report.add("error_points", int(errors.sum()))
    report.table("pq_per_class", ["class", "pq", "sq", "rq", "tp", "fp", "fn"],
                 [[c, *v] for c, v in sorted(result.per_class_pq.items())])


def cmd_sweep(args, cfg: Config, report: Report) -> None:
    sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    if not sigmas or any(s < 0 for s in sigmas):
        raise LidarFuseError("--sigmas needs non-negative comma-separated values")
    result = pipeline.calibration_sweep(cfg, sigmas, cfg.seed)
    report.add("sigma_rot", cfg.calib_sigma_rot)
    report.add("noise_draws", cfg.noise_draws)
    report.table("calibration", ["sigma", "soft", "hard"],
                 list(zip(sigmas, result["soft"], result["hard"])))


def cmd_ablate(args, cfg: Config, report: Report) -> None:
    sets = [v.strip().upper() for v in args.views.split(",") if v.strip()]
    train_scenes = pipeline.make_scenes(cfg, cfg.scenes, cfg.seed)
    eval_scenes = pipeline.make_scenes(cfg, cfg.eval_scenes, cfg.seed + 10_000)
    rows = []
    for views in sets:
        r = pipeline.ablate(cfg, views, cfg.seed, train_scenes, eval_scenes)
        rows.append([r["views"], r["accuracy"], r["miou"], r["final_loss"]])
    report.table("ablation", ["views", "accuracy", "miou", "final_loss"], rows)


COMMANDS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-calib": cmd_sweep,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file layered over the preset")
    common.add_argument("--preset", choices=("desk", "full"), default="desk",
                        help="desk: toy-scale defaults (default); full: production-scale defaults")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lidarfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="write synthetic scenes")
    p.add_argument("--count", type=int, default=10)
    p = sub.add_parser("project", parents=[common], help="range/voxel/pixel maps of one scene")
    p.add_argument("--scene", type=Path, required=True)
    p = sub.add_parser("train", parents=[common], help="train the toy pipeline")
    p.add_argument("--scenes", type=Path, help="directory of scene folders (default: synthesize)")
    p = sub.add_parser("eval", parents=[common], help="mIoU/PQ from prediction and ground-truth labels")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p = sub.add_parser("sweep-calib", parents=[common], help="accuracy vs calibration noise")
    p.add_argument("--sigmas", default="0,0.05,0.1,0.2")
    p = sub.add_parser("ablate", parents=[common], help="modality/view ablation")
    p.add_argument("--views", default="VPR,VPRI", help="comma-separated view sets, e.g. V,VP,VPRI")
    return parser


def load_config(args, environ=None) -> Config:
    cfg = pipeline.desk_config() if args.preset == "desk" else Config()
    if args.config is not None:
        cfg = dataio.parse_config(args.config, cfg)
    cfg = dataio.env_overrides(cfg, environ)
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        report = Report(args.command)
        report.add("seed", cfg.seed)
        COMMANDS[args.command](args, cfg, report)
        path = report.write(args.out)
    except (LidarFuseError, OSError, ValueError) as exc:
        print(f"lidarfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
