"""Command-line interface: ``mesofix correct|analyze|orient``.

Settings come from built-in defaults, then an optional TOML file
(``--config``), then command-line flags, later sources winning.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from mesofix.correct import (
    DEFAULT_CLAMP_MM,
    correct_model,
    diff_stacks,
    element_size_report,
    element_sizes_to_dict,
    open_model,
)
from mesofix.orient import AnnealConfig, ObjectiveError, anneal, evaluate_objective
from mesofix.raster import StructuringElement, write_pgm, write_png
from mesofix.volume import (
    MeshError,
    Orientation,
    VoxelizationError,
    extract_surface,
    load_mesh,
    obj_text,
    to_build_frame,
    stl_bytes,
    voxelize,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("mesofix")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_INVARIANT = 4
EXIT_VOXELIZATION = 5
EXIT_IO = 6

THREADS_ENV = "MESOFIX_THREADS"


class ConfigError(ValueError):
    pass


class InvariantError(RuntimeError):
    pass


@dataclass
class RunConfig:
    input: str | None = None
    output: str | None = None
    min_feature_diameter_mm: float | None = None
    layer_height_mm: float | None = None
    in_plane_pitch_mm: float | None = None
    theta1: float | None = None
    theta2: float | None = None
    optimize: bool = False
    report: str | None = None
    diff_meshes: bool = False
    dump_slices: str | None = None
    dump_format: str = "pgm"
    trace: str | None = None
    summary: str | None = None
    surface: str = "faces"
    spur_removal: bool = True
    verify: bool = False
    seed: int = 0
    threads: int = 1
    max_iterations: int = 300
    cooling_rate: float = 0.97
    initial_temperature: float | None = None
    proposal_scale: float = math.pi / 4
    coarse_pitch_mm: float | None = None
    clamp_min_mm: float = DEFAULT_CLAMP_MM[0]
    clamp_max_mm: float = DEFAULT_CLAMP_MM[1]
    element_mode: str = "local"

    @property
    def pitch(self) -> float:
        return self.in_plane_pitch_mm or self.layer_height_mm

    def orientation(self) -> Orientation:
        return Orientation(self.theta1 or 0.0, self.theta2 or 0.0)

    def anneal_config(self) -> AnnealConfig:
        return AnnealConfig(
            initial_temperature=self.initial_temperature,
            cooling_rate=self.cooling_rate,
            max_iterations=self.max_iterations,
            proposal_scale=self.proposal_scale,
            rng_seed=self.seed,
            initial=(self.theta1 or 0.0, self.theta2 or 0.0),
            eval_pitch=self.coarse_pitch_mm,
        )

    def validate(self, command: str) -> None:
        if not self.input:
            raise ConfigError("no input mesh given")
        if self.layer_height_mm is None or not self.layer_height_mm > 0:
            raise ConfigError("layer height must be given and positive")
        if self.in_plane_pitch_mm is not None and not self.in_plane_pitch_mm > 0:
            raise ConfigError("in-plane pitch must be positive")
        if command in ("correct", "orient"):
            if self.min_feature_diameter_mm is None or not self.min_feature_diameter_mm > 0:
                raise ConfigError("minimum feature diameter must be given and positive")
        if command == "correct" and not self.output:
            raise ConfigError("correct needs an output mesh path")
        if self.optimize and (self.theta1 is not None or self.theta2 is not None):
            raise ConfigError("give either a fixed orientation or optimize, not both")
        if command == "orient" and not (self.trace or self.summary or self.output):
            raise ConfigError("orient needs at least one of --trace, --summary or --output")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.dump_format not in ("pgm", "png"):
            raise ConfigError("dump format must be pgm or png")
        if self.surface not in ("faces", "marching_cubes"):
            raise ConfigError("surface must be faces or marching_cubes")
        if not 0 <= self.clamp_min_mm <= self.clamp_max_mm:
            raise ConfigError("clamp range must satisfy 0 <= min <= max")
        try:
            self.orientation()
            if self.optimize or command == "orient":
                self.anneal_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def provenance(self) -> dict:
        """Every setting that shapes the geometry, for embedding in reports."""
        skip = {"output", "report", "dump_slices", "trace", "summary", "threads", "dump_format", "diff_meshes"}
        return {k: v for k, v in asdict(self).items() if k not in skip}


_KEYS = {f.name for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc
    unknown = set(data) - _KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads and getattr(args, "threads", None) is None:
        try:
            values["threads"] = int(env_threads)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV}={env_threads!r} is not an integer") from exc
    if args.config:
        values.update(load_config_file(args.config))
    for key in _KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(**values)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mesofix", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("input", nargs="?", help="STL or OBJ mesh")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--config", help="TOML file with default settings")
    common.add_argument("-o", "--output", help="output mesh (STL/OBJ)")
    common.add_argument("-d", "--diameter", dest="min_feature_diameter_mm", type=float,
                        help="minimum printable feature diameter in mm")
    common.add_argument("--layer-height", dest="layer_height_mm", type=float, help="mm")
    common.add_argument("--pitch", dest="in_plane_pitch_mm", type=float,
                        help="in-plane pixel size in mm (default: layer height)")
    common.add_argument("--theta1", type=float, help="build-direction tilt, radians in [-pi/2, pi/2]")
    common.add_argument("--theta2", type=float, help="build-direction azimuth, radians in [0, pi]")
    common.add_argument("--threads", type=int, help=f"worker threads (env {THREADS_ENV})")
    common.add_argument("--no-spur-removal", dest="spur_removal", action="store_const", const=False)

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--seed", type=int)
    search.add_argument("--max-iterations", type=int)
    search.add_argument("--cooling-rate", type=float)
    search.add_argument("--initial-temperature", type=float)
    search.add_argument("--proposal-scale", type=float)
    search.add_argument("--coarse-pitch", dest="coarse_pitch_mm", type=float,
                        help="grid used while searching (mm)")
    search.add_argument("--trace", help="write the annealing trace as CSV")
    search.add_argument("--summary", help="write the search summary as JSON")

    c = sub.add_parser("correct", parents=[common, search], help="correct a mesh for printability")
    c.add_argument("--optimize", action="store_const", const=True,
                   help="search the build direction first")
    c.add_argument("--report", help="report JSON (default: <output>.report.json)")
    c.add_argument("--diff-meshes", action="store_const", const=True,
                   help="also write <output>.added.stl and <output>.removed.stl")
    c.add_argument("--dump-slices", help="directory for per-layer images")
    c.add_argument("--dump-format", choices=("pgm", "png"))
    c.add_argument("--surface", choices=("faces", "marching_cubes"))
    c.add_argument("--verify", action="store_const", const=True,
                   help="check the correction invariants on every slice")

    a = sub.add_parser("analyze", parents=[common], help="per-layer maximum element size")
    a.add_argument("--clamp-min", dest="clamp_min_mm", type=float)
    a.add_argument("--clamp-max", dest="clamp_max_mm", type=float)
    a.add_argument("--mode", dest="element_mode", choices=("local", "global"))

    sub.add_parser("orient", parents=[common, search], help="optimize the build direction")
    return p


class _Outputs:
    """Collects output files and writes them together, removing them on failure."""

    def __init__(self):
        self.files: list[tuple[Path, bytes]] = []

    def add(self, path, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.files.append((Path(path), data))

    def commit(self) -> None:
        written = []
        try:
            for path, data in self.files:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
                written.append(path)
        except OSError:
            for path in written:
                path.unlink(missing_ok=True)
            raise


def _mesh_bytes(mesh, path: Path) -> bytes:
    if path.suffix.lower() == ".obj":
        return obj_text(mesh).encode("utf-8")
    return stl_bytes(mesh)


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _run_search(cfg: RunConfig, mesh, out: _Outputs):
    trace = anneal(
        mesh,
        cfg.anneal_config(),
        diameter_mm=cfg.min_feature_diameter_mm,
        layer_height=cfg.layer_height_mm,
        pitch=cfg.pitch,
        threads=cfg.threads,
        spur_removal=cfg.spur_removal,
    )
    log.info(
        "search: objective %s -> %s at theta=%s",
        trace.initial_objective, trace.best_objective, trace.best.as_tuple(),
    )
    if cfg.trace:
        out.add(cfg.trace, trace.to_csv())
    if cfg.summary:
        summary = trace.summary(cfg.anneal_config())
        if cfg.coarse_pitch_mm:
            # the search ran on a coarse grid; score both ends at full resolution
            summary["full_resolution"] = {
                key: evaluate_objective(
                    mesh,
                    o,
                    diameter_mm=cfg.min_feature_diameter_mm,
                    layer_height=cfg.layer_height_mm,
                    pitch=cfg.pitch,
                    threads=cfg.threads,
                    spur_removal=cfg.spur_removal,
                )
                for key, o in (("initial_objective", trace.initial), ("optimized_objective", trace.best))
            }
        summary["provenance"] = cfg.provenance()
        out.add(cfg.summary, json.dumps(summary, indent=2, sort_keys=True))
    return trace


def _correct(cfg: RunConfig, mesh, orientation: Orientation, out: _Outputs, extra: dict | None = None) -> None:
    f = StructuringElement.from_diameter(cfg.min_feature_diameter_mm, cfg.pitch)
    stack = voxelize(
        to_build_frame(mesh, orientation), cfg.layer_height_mm, cfg.pitch, f.radius_px + 1, threads=cfg.threads
    )
    params = {"orientation": list(orientation.as_tuple()), "config": cfg.provenance()}
    if stack.stats is not None:
        params["voxelization"] = asdict(stack.stats)
    params.update(extra or {})
    corrected, report = correct_model(
        stack, f, threads=cfg.threads, spur_removal=cfg.spur_removal, parameters=params
    )
    if cfg.verify:
        baseline = open_model(stack, f, threads=cfg.threads)
        reopened = open_model(corrected, f, threads=cfg.threads)
        for i, (s_hat, s_open, s_re) in enumerate(zip(corrected, baseline, reopened)):
            if not s_open.issubset(s_hat) or s_re != s_hat:
                raise InvariantError(f"layer {i}: corrected slice violates the opening invariants")
    output = Path(cfg.output)
    out.add(output, _mesh_bytes(extract_surface(corrected, cfg.surface), output))
    out.add(Path(cfg.report) if cfg.report else _sibling(output, ".report.json"), report.to_json())
    if cfg.diff_meshes:
        added, removed = diff_stacks(stack, corrected).meshes()
        for mesh_, suffix in ((added, ".added.stl"), (removed, ".removed.stl")):
            if mesh_ is not None:
                out.add(_sibling(output, suffix), stl_bytes(mesh_))
    if cfg.dump_slices:
        _dump_slices(Path(cfg.dump_slices), stack, corrected, cfg.dump_format, out)
    log.info("objective %d voxels (%d added, %d removed)", report.objective, report.total_added, report.total_removed)


def _dump_slices(folder: Path, stack, corrected, fmt: str, out: _Outputs) -> None:
    import tempfile

    writer = write_pgm if fmt == "pgm" else write_png
    with tempfile.TemporaryDirectory() as tmp:
        for name, st in (("input", stack), ("corrected", corrected)):
            for i, s in enumerate(st):
                tmp_path = Path(tmp) / f"{name}_{i:05d}.{fmt}"
                writer(s, tmp_path)
                out.add(folder / tmp_path.name, tmp_path.read_bytes())


def cmd_correct(cfg: RunConfig) -> None:
    mesh = load_mesh(cfg.input)
    out = _Outputs()
    extra = None
    if cfg.optimize:
        trace = _run_search(cfg, mesh, out)
        orientation = trace.best
        extra = {"search": {k: v for k, v in trace.summary().items() if k != "timing"}}
    else:
        orientation = cfg.orientation()
    _correct(cfg, mesh, orientation, out, extra)
    out.commit()


def cmd_analyze(cfg: RunConfig) -> None:
    mesh = load_mesh(cfg.input)
    orientation = cfg.orientation()
    stack = voxelize(to_build_frame(mesh, orientation), cfg.layer_height_mm, cfg.pitch, 1, threads=cfg.threads)
    clamp = (cfg.clamp_min_mm, cfg.clamp_max_mm)
    rows = element_size_report(stack, clamp, mode=cfg.element_mode, threads=cfg.threads)
    payload = element_sizes_to_dict(
        rows, clamp, {"orientation": list(orientation.as_tuple()), "config": cfg.provenance()}
    )
    text = json.dumps(payload, indent=2, sort_keys=True)
    out = _Outputs()
    if cfg.output:
        if cfg.output.lower().endswith(".csv"):
            lines = ["index,z_mm,raw_px,raw_mm,clamped_mm"]
            lines += [
                f"{r.index},{r.z_mm!r},{'' if r.raw_px is None else r.raw_px},"
                f"{'' if r.raw_mm is None else repr(r.raw_mm)},{r.clamped_mm!r}"
                for r in rows
            ]
            out.add(cfg.output, "\n".join(lines) + "\n")
        else:
            out.add(cfg.output, text)
        out.commit()
    else:
        print(text)


def cmd_orient(cfg: RunConfig) -> None:
    mesh = load_mesh(cfg.input)
    out = _Outputs()
    trace = _run_search(cfg, mesh, out)
    if cfg.output:
        extra = {"search": {k: v for k, v in trace.summary().items() if k != "timing"}}
        _correct(cfg, mesh, trace.best, out, extra)
    out.commit()


COMMANDS = {"correct": cmd_correct, "analyze": cmd_analyze, "orient": cmd_orient}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = build_config(args)
        if args.command == "orient":
            cfg.optimize = True
        cfg.validate(args.command)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"mesofix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeshError as exc:
        print(f"mesofix: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (VoxelizationError, ObjectiveError) as exc:
        print(f"mesofix: voxelization error: {exc}", file=sys.stderr)
        return EXIT_VOXELIZATION
    except InvariantError as exc:
        print(f"mesofix: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"mesofix: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
