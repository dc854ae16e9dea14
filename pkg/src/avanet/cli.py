"""Command-line entry points wiring the pipeline end to end.

Commands::

    avanet synth   --config cfg.txt --out data/
    avanet train   --config cfg.txt --data data/manifest.txt --out run/
    avanet predict --checkpoint run/checkpoint_best.npz --data data/region_02 --out maps/
    avanet eval    --checkpoint run/checkpoint_best.npz --data data/region_02
    avanet render  --data data/region_02 --out maps/

Configuration is a plain ``key = value`` text file (``#`` starts a comment).
Every key has a default; unknown keys are rejected. Each command writes the
fully resolved configuration next to its outputs so runs are reproducible.
All randomness derives from the single ``seed`` key.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import neuralnet as nn
from .raster import Raster, hillshade, load_ascii_grid, render_hazard_png, write_ascii_grid
from .synth import SynthConfig, gen_dataset, load_dataset, Region
from .training import TrainConfig, evaluate_map, predict_map, train
from .viewport import ViewportGeometry


class ConfigError(ValueError):
    """Raised for unknown keys or unparsable values in a run configuration."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_str_tuple(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _parse_sizes(text: str) -> tuple[tuple[int, int], ...]:
    sizes = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        k, _, l = part.partition("x")
        sizes.append((int(k), int(l)))
    return tuple(sizes)


def _parse_optional_float(text: str) -> float | None:
    return None if text.strip().lower() == "none" else float(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}x{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_fields(prefix, cls, skip):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()
        out[f"{prefix}.{f.name}"] = default
    return out


def _build_defaults() -> dict:
    defaults = {"seed": 0, "workers": 1, "stride": 4}
    defaults.update(_section_fields("geometry", ViewportGeometry, skip=()))
    defaults.update(_section_fields("model", nn.ModelConfig, skip=("geometry",)))
    defaults.update(_section_fields("optimizer", nn.OptimizerConfig, skip=()))
    defaults.update(_section_fields("train", TrainConfig, skip=("seed", "optimizer")))
    defaults.update(_section_fields("synth", SynthConfig, skip=("seed",)))
    defaults["synth.n_regions"] = 3
    defaults["synth.validation_fraction"] = 1.0 / 3.0
    return defaults


_DEFAULTS = _build_defaults()

_PARSERS = {
    "model.conv_channels": _parse_int_tuple,
    "model.conv_sizes": _parse_sizes,
    "model.dense_widths": _parse_int_tuple,
    "train.validation_regions": _parse_str_tuple,
    "train.stop_top1": _parse_optional_float,
    "train.stop_top2": _parse_optional_float,
}


def _parse_value(key: str, text: str):
    parser = _PARSERS.get(key)
    if parser is None:
        default = _DEFAULTS[key]
        if isinstance(default, bool):
            parser = _parse_bool
        elif isinstance(default, int):
            parser = int
        elif isinstance(default, float):
            parser = float
        else:
            parser = str
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for config key {key!r}: {exc}") from None


class RunConfig:
    """Fully resolved key/value configuration of one run."""

    def __init__(self, values: dict | None = None):
        self.values = dict(_DEFAULTS)
        if values:
            self.values.update(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key = key.strip()
            if key not in _DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg.values[key] = _parse_value(key, value.strip())
        return cfg

    def save(self, path) -> None:
        lines = [f"{key} = {_format_value(self.values[key])}" for key in sorted(self.values)]
        Path(path).write_text("\n".join(lines) + "\n")

    def _section(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def geometry(self) -> ViewportGeometry:
        return ViewportGeometry(**self._section("geometry"))

    def model_config(self) -> nn.ModelConfig:
        return nn.ModelConfig(geometry=self.geometry(), **self._section("model"))

    def optimizer_config(self) -> nn.OptimizerConfig:
        return nn.OptimizerConfig(**self._section("optimizer"))

    def train_config(self) -> TrainConfig:
        section = self._section("train")
        return TrainConfig(seed=self.seed, optimizer=self.optimizer_config(), **section)

    def synth_config(self) -> SynthConfig:
        section = self._section("synth")
        section.pop("n_regions")
        section.pop("validation_fraction")
        return SynthConfig(seed=self.seed, **section)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.values["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.values["workers"] = args.workers
    if getattr(args, "stride", None) is not None:
        cfg.values["stride"] = args.stride
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "run_config.txt")


def _load_region_dir(path) -> Region:
    """A region directory holds terrain.asc, snow.asc and optionally hazard.asc."""
    path = Path(path)
    terrain = load_ascii_grid(path / "terrain.asc")
    snow_path = path / "snow.asc"
    hazard_path = path / "hazard.asc"
    snow = load_ascii_grid(snow_path) if snow_path.exists() else None
    hazard = load_ascii_grid(hazard_path) if hazard_path.exists() else None
    return Region(
        region_id=path.name, split="", terrain=terrain, snow=snow, hazard=hazard
    )


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    manifest = gen_dataset(
        cfg.synth_config(),
        n_regions=cfg.values["synth.n_regions"],
        validation_fraction=cfg.values["synth.validation_fraction"],
        out_dir=out_dir,
    )
    print(f"wrote dataset manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    data = Path(args.data)
    manifest = data / "manifest.txt" if data.is_dir() else data
    regions = load_dataset(manifest)

    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    resume = None
    if args.checkpoint:
        resume = nn.load_checkpoint(args.checkpoint)
        model_cfg = resume.model_cfg
        print(f"resuming from {args.checkpoint} at step {resume.step}")

    result = train(regions, model_cfg, train_cfg, out_dir, resume=resume)
    print(nn.format_parameter_summary(result.params))
    print(
        f"finished at step {result.steps_run}; "
        f"best validation top-1 {result.best_val_top1:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {out_dir / 'metrics.csv'}")
    return 0


def _coarse_terrain(terrain: Raster, stride: int) -> Raster:
    values = terrain.values[::stride, ::stride]
    ny, nx = values.shape
    cs = terrain.cell_size
    return Raster(
        ncols=nx,
        nrows=ny,
        x_origin=terrain.x_origin - cs * (stride - 1) / 2.0,
        y_origin=terrain.y_origin + (terrain.nrows - ny * stride) * cs + cs * (stride - 1) / 2.0,
        cell_size=cs * stride,
        values=values,
    )


def cmd_predict(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    checkpoint = nn.load_checkpoint(args.checkpoint)
    region = _load_region_dir(args.data)
    if region.snow is None:
        raise FileNotFoundError(f"{args.data}: missing snow.asc")
    stride = cfg.values["stride"]
    workers = cfg.values["workers"]

    probs, labels = predict_map(
        checkpoint.params, checkpoint.model_cfg, region.terrain, region.snow,
        stride=stride, workers=workers,
    )
    for name, raster in zip(("green", "yellow", "red"), probs):
        write_ascii_grid(raster, out_dir / f"prob_{name}.asc")
    write_ascii_grid(labels, out_dir / "labels.asc")

    coarse = _coarse_terrain(region.terrain, stride)
    shade = hillshade(coarse)
    render_hazard_png(labels, shade, out_dir / "hazard.png")
    print(f"wrote hazard map ({labels.nrows}x{labels.ncols} cells) to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    checkpoint = nn.load_checkpoint(args.checkpoint)
    region = _load_region_dir(args.data)
    if region.snow is None or region.hazard is None:
        raise FileNotFoundError(f"{args.data}: needs snow.asc and hazard.asc")
    report = evaluate_map(
        checkpoint.params, checkpoint.model_cfg, region.terrain, region.snow,
        region.hazard, stride=cfg.values["stride"], workers=cfg.values["workers"],
    )
    text = report.format()
    print(f"evaluated {report.n_points} points of {region.region_id}")
    print(text)
    if args.out:
        out_dir = Path(args.out)
        _echo_config(cfg, out_dir)
        (out_dir / "eval_report.txt").write_text(text + "\n")
    return 0


def cmd_render(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    region = _load_region_dir(args.data)
    if region.hazard is None:
        raise FileNotFoundError(f"{args.data}: missing hazard.asc")
    shade = hillshade(region.terrain)
    render_hazard_png(region.hazard, shade, out_dir / "hazard.png")
    print(f"wrote {out_dir / 'hazard.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avanet",
        description="rotation-invariant hazard-zone mapping for snow avalanches",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, data=False, out=False, checkpoint=False):
        if config:
            p.add_argument("--config", help="key=value run configuration file")
        if data:
            p.add_argument("--data", required=True, help="dataset manifest or region directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint (.npz)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="worker threads for prediction")
        p.add_argument("--stride", type=int, help="cell stride for map prediction")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, config=True, out=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the classifier")
    common(p, config=True, data=True, out=True, checkpoint=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict hazard maps for a region")
    common(p, config=True, data=True, out=True, checkpoint=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a reference map")
    common(p, config=True, data=True, checkpoint=True)
    p.add_argument("--out", help="optional output directory for the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a hazard raster over a hillshade")
    common(p, config=True, data=True, out=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("predict", "eval") and not args.checkpoint:
        parser.error(f"{args.command} requires --checkpoint")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
