"""Age-accuracy and identity-preservation metrics, reports, and image grids.

AGE is the mean absolute difference between an estimator's prediction on
the edited image and the requested target age.  ID is one minus the cosine
similarity between face embeddings of the input and the output, so lower
is better for both.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import AGE_MAX, AGE_MIN
from .errors import MetricError, ValidationError
from .imageio import load_image, save_image

#: The benchmark's target-age grid (report columns, in this order).
DEFAULT_TARGET_AGES = (1, 5, 8, 12, 17, 25, 35, 45, 60, 80)


@dataclass(frozen=True)
class EvalRecord:
    input_ref: str
    output_ref: str
    target_age: int
    estimated_age: int
    id_distance: float

    def __post_init__(self):
        if not AGE_MIN <= self.estimated_age <= AGE_MAX:
            raise ValidationError(f"estimated_age {self.estimated_age} outside [{AGE_MIN}, {AGE_MAX}]")
        if not 0.0 <= self.id_distance <= 2.0:
            raise ValidationError(f"id_distance {self.id_distance} outside [0, 2]")


@dataclass(frozen=True)
class AgeMetricResult:
    per_target: dict[int, float]
    overall: float


@dataclass(frozen=True)
class IdMetricResult:
    value: float
    excluded: tuple[dict, ...] = ()


def age_metric(records: Sequence[EvalRecord]) -> AgeMetricResult:
    """Mean |estimated - target| per target age, plus the overall mean."""
    if not records:
        raise MetricError("age_metric needs at least one record")
    per: dict[int, list[float]] = {}
    for r in records:
        per.setdefault(r.target_age, []).append(abs(r.estimated_age - r.target_age))
    per_target = {t: float(np.mean(v)) for t, v in per.items()}
    overall = float(np.mean([abs(r.estimated_age - r.target_age) for r in records]))
    return AgeMetricResult(per_target=per_target, overall=overall)


def id_metric(pairs: Iterable[tuple], embedder) -> IdMetricResult:
    """Mean (1 - cosine) of embedding pairs; failures become exclusions."""
    import torch

    distances = []
    excluded = []
    for i, (left, right) in enumerate(pairs):
        try:
            a = embedder.embed(left)
            b = embedder.embed(right)
            cos = float(torch.nn.functional.cosine_similarity(a, b, dim=-1).mean())
        except Exception as exc:  # noqa: BLE001 - failed pairs are reported, not fatal
            excluded.append({"pair": i, "reason": str(exc)})
            continue
        distances.append(1.0 - cos)
    if not distances:
        raise MetricError("id_metric: every pair failed embedding")
    return IdMetricResult(value=float(np.mean(distances)), excluded=tuple(excluded))


def id_distance(input_image, output_image, embedder) -> float:
    import torch

    a = embedder.embed(input_image)
    b = embedder.embed(output_image)
    cos = float(torch.nn.functional.cosine_similarity(a, b, dim=-1).mean())
    return min(max(1.0 - cos, 0.0), 2.0)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    records: list[EvalRecord]
    target_ages: tuple[int, ...]
    age: Optional[AgeMetricResult]
    id_result: Optional[IdMetricResult]
    id_per_target: dict[int, float] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    estimator_id: str = ""
    embedder_id: str = ""

    def table_rows(self) -> list[list[str]]:
        """Delimited table: header of target ages plus ALL, one row per metric."""
        header = ["metric"] + [str(t) for t in self.target_ages] + ["ALL"]
        def fmt(value: Optional[float]) -> str:
            return "NA" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.4f}"
        age_row = ["AGE"]
        id_row = ["ID"]
        for t in self.target_ages:
            age_row.append(fmt(self.age.per_target.get(t) if self.age else None))
            id_row.append(fmt(self.id_per_target.get(t)))
        age_row.append(fmt(self.age.overall if self.age else None))
        id_row.append(fmt(self.id_result.value if self.id_result else None))
        return [header, age_row, id_row]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table_path = out / "report.tsv"
        with table_path.open("w", encoding="utf-8") as fh:
            for row in self.table_rows():
                fh.write("\t".join(row) + "\n")
        records_path = out / "records.jsonl"
        with records_path.open("w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps({
                    "input": r.input_ref,
                    "output": r.output_ref,
                    "target_age": r.target_age,
                    "estimated_age": r.estimated_age,
                    "id_distance": r.id_distance,
                }, sort_keys=True) + "\n")
        meta_path = out / "report_meta.json"
        meta_path.write_text(json.dumps({
            "estimator": self.estimator_id,
            "embedder": self.embedder_id,
            "target_ages": list(self.target_ages),
            "failures": self.failures,
            "excluded_pairs": list(self.id_result.excluded) if self.id_result else [],
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return {"table": table_path, "records": records_path, "meta": meta_path}


def _metrics_from_records(
    records: list[EvalRecord],
    target_ages: Sequence[int],
    failures: list[dict],
    estimator_id: str,
    embedder_id: str,
) -> BenchmarkReport:
    age = age_metric(records) if records else None
    id_per_target: dict[int, float] = {}
    for t in target_ages:
        vals = [r.id_distance for r in records if r.target_age == t]
        if vals:
            id_per_target[t] = float(np.mean(vals))
    overall = (
        IdMetricResult(value=float(np.mean([r.id_distance for r in records])))
        if records else None
    )
    return BenchmarkReport(
        records=records,
        target_ages=tuple(target_ages),
        age=age,
        id_result=overall,
        id_per_target=id_per_target,
        failures=failures,
        estimator_id=estimator_id,
        embedder_id=embedder_id,
    )


def evaluate_records(
    pairs: Iterable[dict],
    estimator,
    embedder,
    target_ages: Sequence[int] = DEFAULT_TARGET_AGES,
    image_loader: Callable[[str], np.ndarray] = load_image,
    estimator_id: str = "",
    embedder_id: str = "",
) -> BenchmarkReport:
    """Score already-edited (input, output, target_age) triples.

    Each element needs keys ``input``, ``output``, ``target_age``.  Records
    that fail loading/estimation/embedding go to the failure list.
    """
    records: list[EvalRecord] = []
    failures: list[dict] = []
    for item in pairs:
        try:
            inp = image_loader(item["input"])
            outp = image_loader(item["output"])
            est = int(estimator.estimate(outp))
            dist = id_distance(inp, outp, embedder)
            records.append(
                EvalRecord(
                    input_ref=str(item["input"]),
                    output_ref=str(item["output"]),
                    target_age=int(item["target_age"]),
                    estimated_age=est,
                    id_distance=dist,
                )
            )
        except Exception as exc:  # noqa: BLE001 - failed rows are reported, not fatal
            failures.append({"input": str(item.get("input")), "reason": str(exc)})
    if not records:
        raise MetricError("no evaluable records")
    seen = sorted({r.target_age for r in records})
    columns = tuple(target_ages) if target_ages else tuple(seen)
    return _metrics_from_records(records, columns, failures, estimator_id, embedder_id)


def run_benchmark(
    profiles: Sequence,
    inputs: dict,
    edit_fn: Callable,
    estimator,
    embedder,
    out_dir: str | Path,
    target_ages: Sequence[int] = DEFAULT_TARGET_AGES,
    seed: int = 0,
    estimator_id: str = "",
    embedder_id: str = "",
) -> BenchmarkReport:
    """Edit every input of every profile to every target age and score it.

    ``inputs`` maps profile token -> list of input image paths;
    ``edit_fn(profile, input_path, target_age, seed)`` returns the edited
    image as an HxWx3 uint8 array.  Failed edits are recorded as missing
    cells, not fatal errors.  Writes the report files plus one qualitative
    grid image per identity.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[EvalRecord] = []
    failures: list[dict] = []
    grid_cells: dict[str, dict[int, np.ndarray]] = {}

    for profile in profiles:
        for input_path in inputs.get(profile.token, ()):  # type: ignore[union-attr]
            input_image = load_image(input_path)
            for t in target_ages:
                try:
                    edited = edit_fn(profile, input_path, t, seed)
                    out_path = out / "edits" / f"{profile.token}_{Path(input_path).stem}_to_{t}.png"
                    save_image(edited, out_path)
                    est = int(estimator.estimate(edited))
                    dist = id_distance(input_image, edited, embedder)
                    records.append(
                        EvalRecord(str(input_path), str(out_path), int(t), est, dist)
                    )
                    grid_cells.setdefault(profile.token, {})[t] = edited
                except Exception as exc:  # noqa: BLE001
                    failures.append(
                        {"profile": profile.token, "input": str(input_path),
                         "target_age": int(t), "reason": str(exc)}
                    )

    report = _metrics_from_records(records, tuple(target_ages), failures, estimator_id, embedder_id)
    report.write(out)
    for token, cells in grid_cells.items():
        grid = render_grid([[cells.get(t) for t in target_ages]])
        save_image(grid, out / f"grid_{token}.png")
    return report


def render_grid(rows: list[list[Optional[np.ndarray]]], pad: int = 2) -> np.ndarray:
    """Compose images into a grid: one row per config, one column per target age.

    Missing cells render as black tiles.
    """
    sizes = [img.shape for row in rows for img in row if img is not None]
    if not sizes:
        raise MetricError("render_grid needs at least one image")
    h, w, _ = sizes[0]
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    canvas = np.zeros((n_rows * (h + pad) - pad, n_cols * (w + pad) - pad, 3), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            if img is None:
                continue
            y, x = i * (h + pad), j * (w + pad)
            canvas[y:y + h, x:x + w] = img
    return canvas
