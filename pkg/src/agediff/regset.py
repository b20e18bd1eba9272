"""Regularization-set refinement: integer age relabeling of a group-labeled set.

A group-labeled face manifest is re-labeled with integer ages from a
pluggable estimator; entries on an explicit skip-list (or failing
estimation) are reported, never silently dropped.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .core import AGE_GROUPS, AGE_MAX, AGE_MIN, AgeLabeledManifest, ManifestEntry
from .errors import ConfigurationError, ValidationError


class AgeEstimator(Protocol):
    """Predicts an integer age in [0, 100] from a face image.

    Implementations must be deterministic for a fixed model and input, and
    must declare whether a single instance is safe for concurrent calls
    (``concurrent_safe``); callers clone per worker otherwise.
    """

    concurrent_safe: bool

    def estimate(self, image: np.ndarray) -> int: ...


#: Representative integer age per source group, used when training consumes
#: group labels directly instead of refined integer labels.  The fallback
#: convention is the group's median age; these defaults are configurable.
GROUP_REPRESENTATIVE_AGE = {
    "child": 6,
    "teenager": 15,
    "young adults": 25,
    "middle-aged": 45,
    "elderly": 60,
    "old": 75,
}


def effective_age(entry: ManifestEntry, use_refined: bool = True,
                  representative_ages: Optional[dict] = None) -> int:
    """Training age for one entry: its own label, or its group's representative."""
    if use_refined:
        return entry.age
    ages = representative_ages or GROUP_REPRESENTATIVE_AGE
    if entry.source_group is None:
        raise ValidationError(
            f"{entry.image_ref!r} has no source group; cannot map to a representative age"
        )
    return ages[entry.source_group]


@dataclass(frozen=True)
class SkippedEntry:
    image_ref: str
    reason: str


@dataclass(frozen=True)
class RefineResult:
    manifest: AgeLabeledManifest
    skipped: tuple[SkippedEntry, ...] = field(default_factory=tuple)


def _load_with_pil(path: str) -> np.ndarray:
    from .imageio import load_image

    return load_image(path)


def refine_regularization_set(
    groups: AgeLabeledManifest,
    estimator: AgeEstimator,
    skip_list: Sequence[str] = (),
    image_loader: Callable[[str], np.ndarray] = _load_with_pil,
    workers: int = 1,
) -> RefineResult:
    """Reassign integer age labels to a group-labeled manifest.

    Every entry must carry a source group.  Output keeps the input order and
    groups; entries on ``skip_list`` or failing the estimator are routed to
    the skip report with a reason.  With ``workers`` > 1 estimation runs on
    a thread pool; the estimator must be safe for concurrent calls or
    provide ``clone()``.
    """
    skip = set(skip_list)
    for entry in groups:
        if entry.source_group is None:
            raise ValidationError(f"{entry.image_ref!r} has no source_group")

    def estimate_one(entry: ManifestEntry, est: AgeEstimator):
        if entry.image_ref in skip:
            return SkippedEntry(entry.image_ref, "on skip-list")
        try:
            age = int(est.estimate(image_loader(entry.image_ref)))
        except Exception as exc:  # noqa: BLE001 - failures become skip entries
            return SkippedEntry(entry.image_ref, f"estimator failure: {exc}")
        if not AGE_MIN <= age <= AGE_MAX:
            return SkippedEntry(
                entry.image_ref, f"estimated age {age} outside [{AGE_MIN}, {AGE_MAX}]"
            )
        return ManifestEntry(entry.image_ref, age, entry.source_group)

    if workers <= 1:
        results = [estimate_one(e, estimator) for e in groups]
    else:
        if getattr(estimator, "concurrent_safe", False):
            pool_estimators = [estimator] * workers
        elif hasattr(estimator, "clone"):
            pool_estimators = [estimator.clone() for _ in range(workers)]
        else:
            raise ConfigurationError(
                "estimator is not declared safe for concurrent calls and has no clone(); "
                "use workers=1"
            )
        from concurrent.futures import ThreadPoolExecutor

        entries = list(groups)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda pair: estimate_one(pair[1], pool_estimators[pair[0] % workers]),
                    enumerate(entries),
                )
            )

    out_entries = tuple(r for r in results if isinstance(r, ManifestEntry))
    skipped = tuple(r for r in results if isinstance(r, SkippedEntry))
    return RefineResult(AgeLabeledManifest(out_entries), skipped)


def sample_balanced(manifest: AgeLabeledManifest, per_group: int, seed: int) -> AgeLabeledManifest:
    """Draw exactly ``per_group`` entries per source group, without replacement.

    Selection is seeded and uniform; output preserves the manifest's entry
    order so a fixed seed reproduces byte-identical files.
    """
    if per_group < 0:
        raise ConfigurationError(f"per_group must be >= 0, got {per_group}")
    if per_group == 0:
        return AgeLabeledManifest(())
    by_group: dict[str, list[int]] = {}
    for i, entry in enumerate(manifest):
        if entry.source_group is None:
            raise ValidationError(f"{entry.image_ref!r} has no source_group")
        by_group.setdefault(entry.source_group, []).append(i)
    rng = random.Random(seed)
    chosen: set[int] = set()
    for group in AGE_GROUPS:
        indices = by_group.get(group, [])
        if not indices:
            continue
        if len(indices) < per_group:
            raise ConfigurationError(
                f"group {group!r} has only {len(indices)} entries, need {per_group}"
            )
        chosen.update(rng.sample(indices, per_group))
    entries = tuple(manifest.entries[i] for i in sorted(chosen))
    return AgeLabeledManifest(entries)
