"""Deterministic toy-scale test assets: tiny backend, tokenizer, stubs, images.

The whole pipeline runs on these in seconds, with no network access and no
model downloads.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import AgeLabeledManifest, IdentityProfile, ManifestEntry, PipelineConfig, Reference
from ..imageio import save_image
from .images import synthetic_face, synthetic_face_set
from .stubs import ConstantAgeEstimator, FailingAgeEstimator, MeanIntensityAgeEstimator, ToyFaceEmbedder
from .tiny import IMAGE_SIZE, TinyBackend
from .tokenizer import ToyTokenizer

__all__ = [
    "TinyBackend",
    "ToyTokenizer",
    "MeanIntensityAgeEstimator",
    "ConstantAgeEstimator",
    "FailingAgeEstimator",
    "ToyFaceEmbedder",
    "synthetic_face",
    "synthetic_face_set",
    "make_fixture",
    "FixtureSet",
    "fixture_config",
    "materialize_workspace",
    "IMAGE_SIZE",
]

#: Directory of checked-in fixture assets (small PNGs plus a manifest).
ASSETS_DIR = Path(__file__).parent / "assets_v1"

#: Pixel mean-absolute-error budget for null-text reconstruction on the
#: tiny backend (includes the lossy 4x latent pooling).
RECONSTRUCTION_MAE_THRESHOLD = 0.05


def fixture_config(**overrides) -> PipelineConfig:
    """Pipeline defaults shrunk to fixture scale."""
    base = dict(
        iterations=10,
        batch_size=2,
        learning_rate=1.0e-3,
        lora_rank=4,
        image_size=IMAGE_SIZE,
        diffusion_steps=3,
        guidance_scale=7.5,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@dataclass
class FixtureSet:
    backend: TinyBackend
    tokenizer: ToyTokenizer
    estimator: MeanIntensityAgeEstimator
    embedder: ToyFaceEmbedder
    images: list[np.ndarray]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, tensor in self.backend.base_parameters():
            h.update(name.encode())
            h.update(tensor.detach().numpy().tobytes())
        for img in self.images:
            h.update(img.tobytes())
        return h.hexdigest()


def make_fixture(seed: int = 0, image_count: int = 8) -> FixtureSet:
    """Build the full deterministic fixture kit for one seed."""
    backend = TinyBackend(seed=seed)
    return FixtureSet(
        backend=backend,
        tokenizer=backend.tokenizer,
        estimator=MeanIntensityAgeEstimator(),
        embedder=ToyFaceEmbedder(seed=seed),
        images=synthetic_face_set(seed, image_count),
    )


def materialize_workspace(root: str | Path, seed: int = 0, references: int = 3,
                          reg_images: int = 6) -> dict:
    """Write a ready-to-run workspace: profile, reference PNGs, reg manifest.

    Returns the paths of everything written; used by CLI smoke flows and the
    end-to-end tests.
    """
    from ..core import AGE_GROUPS, save_manifest, save_profile

    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    ref_ages = [25, 40, 55, 30, 60][:references]
    refs = []
    for i, age in enumerate(ref_ages):
        path = images_dir / f"ref_{i}.png"
        save_image(synthetic_face(seed * 7919 + i, size=IMAGE_SIZE), path)
        refs.append(Reference(str(path), age))
    profile = IdentityProfile(token="sks", gender="male", references=tuple(refs))
    profile_path = root / "profile.json"
    save_profile(profile, profile_path)

    entries = []
    for i in range(reg_images):
        path = images_dir / f"reg_{i}.png"
        save_image(synthetic_face(seed * 104729 + 1000 + i, size=IMAGE_SIZE), path)
        entries.append(ManifestEntry(str(path), age=20 + 10 * (i % 6), source_group=AGE_GROUPS[i % 6]))
    manifest = AgeLabeledManifest(tuple(entries))
    manifest_path = root / "regset.tsv"
    save_manifest(manifest, manifest_path)

    input_path = images_dir / "input.png"
    save_image(synthetic_face(seed * 15485863 + 99, size=IMAGE_SIZE), input_path)

    return {
        "profile": profile_path,
        "manifest": manifest_path,
        "input": input_path,
        "images_dir": images_dir,
        "profile_obj": profile,
        "manifest_obj": manifest,
    }
