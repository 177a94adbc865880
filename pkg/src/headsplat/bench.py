"""Benchmark harness: drives the runtime for N frames and summarizes the
four per-frame stages (median / p95), excluding warmup frames."""

from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field

import numpy as np

from .blending import FRAME_STAGES
from .geom import Camera
from .runtime import AvatarRuntime


@dataclass
class TimingReport:
    frames: int
    warmup_excluded: int
    stages: dict  # stage -> {median_us, p95_us, mean_us}
    total: dict  # {median_us, p95_us, mean_us}
    machine: str
    per_frame: list = field(default_factory=list)  # one {stage: us, ..., total_us} per frame

    def to_json_dict(self) -> dict:
        return {
            "frames": self.frames,
            "warmup_excluded": self.warmup_excluded,
            "stages": self.stages,
            "total": self.total,
            "machine": self.machine,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    def save_frames_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for record in self.per_frame:
                fh.write(json.dumps(record) + "\n")


def _machine_descriptor() -> str:
    return f"{platform.machine()} {platform.system()} python{platform.python_version()}"


def _summarize(samples: np.ndarray) -> dict:
    return {
        "median_us": float(np.median(samples)),
        "p95_us": float(np.percentile(samples, 95)),
        "mean_us": float(samples.mean()),
    }


def default_weight_schedule(frame: int, frames: int, names: list[str]) -> dict[str, float]:
    """Sinusoidal sweep of the first blendshape so the dynamic path does real work."""
    if not names:
        return {}
    phase = 2.0 * np.pi * frame / max(frames, 1)
    return {names[0]: 0.5 + 0.5 * float(np.sin(phase))}


def run_bench(
    runtime: AvatarRuntime,
    camera: Camera,
    frames: int,
    warmup: int = 1,
    weight_schedule=None,
) -> tuple[TimingReport, np.ndarray]:
    """Render ``warmup + frames`` frames and report stage statistics.

    Returns the report plus the last rendered image (useful for determinism
    checks across configurations).
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if warmup < 1:
        raise ValueError("at least one warmup frame is required")
    schedule = weight_schedule or (
        lambda i: default_weight_schedule(i, frames, runtime.blendshape_names)
    )

    records = []
    image = None
    for i in range(warmup + frames):
        result = runtime.render_frame(schedule(i), camera)
        image = result.image
        if i < warmup:
            continue
        record = dict(result.timing.stages)
        record["total_us"] = result.timing.total_us
        records.append(record)

    stage_stats = {
        stage: _summarize(np.array([r[stage] for r in records])) for stage in FRAME_STAGES
    }
    total_stats = _summarize(np.array([r["total_us"] for r in records]))
    report = TimingReport(
        frames=frames,
        warmup_excluded=warmup,
        stages=stage_stats,
        total=total_stats,
        machine=_machine_descriptor(),
        per_frame=records,
    )
    return report, image
