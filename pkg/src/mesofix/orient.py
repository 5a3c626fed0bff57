"""Build-direction search by simulated annealing.

The objective is the number of voxels the correction adds or removes at a
given orientation. Candidates are Gaussian steps around the current state
whose spread shrinks with the temperature; worse candidates are accepted
with the Metropolis probability; the temperature decays exponentially.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from mesofix.correct import correct_model
from mesofix.raster import StructuringElement
from mesofix.volume import Orientation, TriangleMesh, VoxelizationError, to_build_frame, voxelize


class ObjectiveError(RuntimeError):
    def __init__(self, orientation: Orientation, cause: Exception):
        super().__init__(f"objective failed at theta={orientation.as_tuple()}: {cause}")
        self.orientation = orientation


def evaluate_objective(
    mesh: TriangleMesh,
    orientation: Orientation,
    *,
    diameter_mm: float,
    layer_height: float,
    pitch: float | None = None,
    threads: int = 1,
    spur_removal: bool = True,
) -> int:
    """Total voxels added plus removed when printing ``mesh`` at ``orientation``."""
    pitch = layer_height if pitch is None else pitch
    f = StructuringElement.from_diameter(diameter_mm, pitch)
    try:
        stack = voxelize(to_build_frame(mesh, orientation), layer_height, pitch, f.radius_px + 1)
    except VoxelizationError as exc:
        raise ObjectiveError(orientation, exc) from exc
    _, report = correct_model(stack, f, threads=threads, spur_removal=spur_removal, analyze=False)
    return report.objective


@dataclass
class AnnealConfig:
    initial_temperature: float | None = None  # None: objective at the start point
    cooling_rate: float = 0.97
    max_iterations: int = 300
    proposal_scale: float = math.pi / 4
    rng_seed: int = 0
    initial: tuple[float, float] = (0.0, 0.0)
    eval_pitch: float | None = None
    eval_layer_height: float | None = None

    def __post_init__(self):
        if not 0 < self.cooling_rate < 1:
            raise ValueError(f"cooling_rate must be in (0, 1), got {self.cooling_rate}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.proposal_scale > 0:
            raise ValueError(f"proposal_scale must be positive, got {self.proposal_scale}")
        if self.initial_temperature is not None and not self.initial_temperature > 0:
            raise ValueError("initial_temperature must be positive")
        Orientation(*self.initial)


@dataclass(frozen=True)
class AnnealStep:
    iteration: int
    theta1: float
    theta2: float
    objective: float
    temperature: float
    accepted: bool


@dataclass
class AnnealTrace:
    initial: Orientation
    initial_objective: float
    initial_temperature: float
    steps: list[AnnealStep] = field(default_factory=list)
    best: Orientation | None = None
    best_objective: float = math.inf
    wall_time_s: float = 0.0

    def __len__(self):
        return len(self.steps)

    def running_best(self) -> list[float]:
        out, best = [], self.initial_objective
        for step in self.steps:
            best = min(best, step.objective)
            out.append(best)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "theta1", "theta2", "objective", "temperature", "accepted"])
        for s in self.steps:
            writer.writerow(
                [s.iteration, repr(s.theta1), repr(s.theta2), repr(s.objective), repr(s.temperature), int(s.accepted)]
            )
        return buf.getvalue()

    def summary(self, config: AnnealConfig | None = None) -> dict:
        reduction = (
            1.0 - self.best_objective / self.initial_objective if self.initial_objective else 0.0
        )
        out = {
            "schema": "mesofix.orient_summary/1",
            "initial_theta": list(self.initial.as_tuple()),
            "initial_objective": self.initial_objective,
            "optimized_theta": list(self.best.as_tuple()) if self.best else None,
            "optimized_objective": self.best_objective,
            "reduction": reduction,
            "iterations": len(self.steps),
            "initial_temperature": self.initial_temperature,
            "timing": {"wall_time_s": self.wall_time_s},
        }
        if config is not None:
            out["config"] = asdict(config)
        return out

    def summary_json(self, config: AnnealConfig | None = None) -> str:
        return json.dumps(self.summary(config), indent=2, sort_keys=True)


def propose(
    current: Orientation,
    temperature: float,
    rng: np.random.Generator,
    *,
    initial_temperature: float,
    proposal_scale: float,
) -> Orientation:
    """Gaussian step with spread proportional to temperature, clipped to the bounds."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    sigma = proposal_scale * temperature / initial_temperature
    step = rng.normal(0.0, sigma, size=2)
    return Orientation.clipped(current.theta1 + step[0], current.theta2 + step[1])


def accept(delta: float, temperature: float, rng: np.random.Generator) -> bool:
    """Metropolis rule. Draws from ``rng`` only for uphill moves."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if delta <= 0:
        return True
    return bool(rng.random() < math.exp(-delta / temperature))


def anneal_function(objective: Callable[[Orientation], float], config: AnnealConfig) -> AnnealTrace:
    """Minimize ``objective`` over the orientation box.

    The returned best is the lowest objective seen among the start point and
    every candidate, not the final chain state.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.rng_seed)
    current = Orientation(*config.initial)
    current_obj = objective(current)
    t0 = config.initial_temperature
    if t0 is None:
        t0 = float(current_obj) if current_obj > 0 else 1.0
    trace = AnnealTrace(current, current_obj, t0, best=current, best_objective=current_obj)

    for t in range(config.max_iterations):
        ratio = config.cooling_rate**t
        temperature = t0 * ratio
        # T/T0 passed as the exact ratio so rescaled objectives give identical steps
        cand = propose(current, ratio, rng, initial_temperature=1.0, proposal_scale=config.proposal_scale)
        cand_obj = objective(cand)
        ok = accept(cand_obj - current_obj, temperature, rng)
        trace.steps.append(AnnealStep(t + 1, cand.theta1, cand.theta2, cand_obj, temperature, ok))
        if cand_obj < trace.best_objective:
            trace.best, trace.best_objective = cand, cand_obj
        if ok:
            current, current_obj = cand, cand_obj
    trace.wall_time_s = time.perf_counter() - t_start
    return trace


def anneal(
    mesh: TriangleMesh,
    config: AnnealConfig,
    *,
    diameter_mm: float,
    layer_height: float,
    pitch: float | None = None,
    threads: int = 1,
    spur_removal: bool = True,
) -> AnnealTrace:
    """Anneal the build direction of ``mesh``.

    ``config.eval_pitch``/``config.eval_layer_height`` let the search run on a
    coarser grid than the final correction.
    """
    pitch = layer_height if pitch is None else pitch
    # a coarse pitch on its own coarsens the layers too
    eval_p = config.eval_pitch or pitch
    eval_h = config.eval_layer_height or config.eval_pitch or layer_height

    def objective(o: Orientation) -> float:
        return evaluate_objective(
            mesh,
            o,
            diameter_mm=diameter_mm,
            layer_height=eval_h,
            pitch=eval_p,
            threads=threads,
            spur_removal=spur_removal,
        )

    return anneal_function(objective, config)


def axis_tilt(orientation: Orientation, axis=(0.0, 0.0, 1.0)) -> float:
    """Angle in radians between the build direction and the model line ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    cos = abs(float(orientation.build_direction() @ a)) / float(np.linalg.norm(a))
    return math.acos(min(1.0, cos))
