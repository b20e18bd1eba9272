#!/usr/bin/env python3
"""Regenerate the committed fixture assets (src/agediff/fixtures/assets_v1).

Small deterministic PNGs plus a manifest covering all six source groups.
"""
from pathlib import Path

from agediff.core import AGE_GROUPS, AgeLabeledManifest, ManifestEntry, save_manifest
from agediff.fixtures import ASSETS_DIR
from agediff.fixtures.images import synthetic_face
from agediff.imageio import save_image


def main():
    ASSETS_DIR.mkdir(parents=True, exist_ok=True)
    entries = []
    ages = [6, 14, 24, 44, 58, 72]
    for i, (group, age) in enumerate(zip(AGE_GROUPS, ages)):
        name = f"face_{i:02d}.png"
        save_image(synthetic_face(42_000 + i), ASSETS_DIR / name)
        entries.append(ManifestEntry(name, age, group))
    save_manifest(AgeLabeledManifest(tuple(entries)), ASSETS_DIR / "manifest.tsv")
    print(f"wrote {len(entries)} assets into {ASSETS_DIR}")


if __name__ == "__main__":
    main()
