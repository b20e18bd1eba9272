import numpy as np
import pytest

from agediff.core import AGE_GROUPS, AgeLabeledManifest, ManifestEntry, save_manifest
from agediff.errors import ConfigurationError, ValidationError
from agediff.fixtures import ConstantAgeEstimator, FailingAgeEstimator, MeanIntensityAgeEstimator
from agediff.regset import (
    GROUP_REPRESENTATIVE_AGE,
    effective_age,
    refine_regularization_set,
    sample_balanced,
)


def grouped_manifest(per_group=102):
    entries = []
    for g_i, group in enumerate(AGE_GROUPS):
        for i in range(per_group):
            entries.append(ManifestEntry(f"{group}/{i:04d}.png", 50, group))
    return AgeLabeledManifest(tuple(entries))


def gray_loader(level):
    def load(path):
        return np.full((8, 8, 3), level, dtype=np.uint8)

    return load


class TestRefine:
    def test_skip_list_reduces_612_to_594(self):
        manifest = grouped_manifest(102)
        skip = [e.image_ref for e in manifest.entries[:18]]
        result = refine_regularization_set(
            manifest, MeanIntensityAgeEstimator(), skip_list=skip, image_loader=gray_loader(127)
        )
        assert len(manifest) == 612
        assert len(result.manifest) == 594
        assert len(result.skipped) == 18
        assert all(s.reason == "on skip-list" for s in result.skipped)

    def test_empty_input(self):
        result = refine_regularization_set(
            AgeLabeledManifest(()), ConstantAgeEstimator(30), image_loader=gray_loader(0)
        )
        assert len(result.manifest) == 0

    def test_constant_estimator_relabels_everything(self):
        manifest = grouped_manifest(3)
        result = refine_regularization_set(
            manifest, ConstantAgeEstimator(30), image_loader=gray_loader(0)
        )
        assert len(result.manifest) == len(manifest)
        assert all(e.age == 30 for e in result.manifest)

    def test_groups_preserved_no_invented_refs(self):
        manifest = grouped_manifest(4)
        result = refine_regularization_set(
            manifest, ConstantAgeEstimator(30), image_loader=gray_loader(0)
        )
        assert set(result.manifest.image_refs()) <= set(manifest.image_refs())
        for before, after in zip(manifest, result.manifest):
            assert before.source_group == after.source_group

    def test_estimator_failure_routed_to_skip_report(self):
        manifest = grouped_manifest(2)
        target = manifest.entries[3].image_ref

        def loader(path):
            return np.full((4, 4, 3), 255 if path == target else 10, dtype=np.uint8)

        estimator = FailingAgeEstimator(
            ConstantAgeEstimator(20), fail_when=lambda img: img.max() == 255
        )
        result = refine_regularization_set(manifest, estimator, image_loader=loader)
        assert len(result.manifest) == len(manifest) - 1
        assert any("estimator failure" in s.reason for s in result.skipped)

    def test_missing_group_rejected(self):
        manifest = AgeLabeledManifest((ManifestEntry("a.png", 10, None),))
        with pytest.raises(ValidationError):
            refine_regularization_set(manifest, ConstantAgeEstimator(5), image_loader=gray_loader(0))

    def test_ages_within_bounds(self):
        manifest = grouped_manifest(2)
        result = refine_regularization_set(
            manifest, MeanIntensityAgeEstimator(), image_loader=gray_loader(255)
        )
        assert all(0 <= e.age <= 100 for e in result.manifest)


class TestSampleBalanced:
    def test_full_draw(self):
        manifest = grouped_manifest(102)
        out = sample_balanced(manifest, per_group=102, seed=0)
        assert len(out) == 612

    def test_per_group_zero(self):
        assert len(sample_balanced(grouped_manifest(3), per_group=0, seed=0)) == 0

    def test_counts_per_group(self):
        out = sample_balanced(grouped_manifest(10), per_group=4, seed=3)
        groups = out.groups()
        assert all(len(entries) == 4 for entries in groups.values())
        assert len(groups) == 6

    def test_deterministic_bytes(self, tmp_path):
        manifest = grouped_manifest(10)
        a = sample_balanced(manifest, per_group=5, seed=42)
        b = sample_balanced(manifest, per_group=5, seed=42)
        pa, pb = tmp_path / "a.tsv", tmp_path / "b.tsv"
        save_manifest(a, pa)
        save_manifest(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_different_seeds_differ(self):
        manifest = grouped_manifest(30)
        assert sample_balanced(manifest, 5, seed=0) != sample_balanced(manifest, 5, seed=1)

    def test_insufficient_group_names_group_and_count(self):
        entries = list(grouped_manifest(5).entries)
        # drop 'old' group down to 2 entries
        entries = [e for e in entries if not (e.source_group == "old" and e.image_ref.endswith(("3.png", "4.png")))]
        manifest = AgeLabeledManifest(tuple(entries))
        with pytest.raises(ConfigurationError, match="old"):
            sample_balanced(manifest, per_group=5, seed=0)


class TestWorkers:
    def test_worker_pool_matches_serial_output(self):
        manifest = grouped_manifest(8)
        serial = refine_regularization_set(
            manifest, MeanIntensityAgeEstimator(), image_loader=gray_loader(90)
        )
        pooled = refine_regularization_set(
            manifest, MeanIntensityAgeEstimator(), image_loader=gray_loader(90), workers=4
        )
        assert pooled.manifest == serial.manifest
        assert pooled.skipped == serial.skipped

    def test_unsafe_estimator_without_clone_rejected(self):
        class Unsafe:
            concurrent_safe = False

            def estimate(self, image):
                return 10

        with pytest.raises(ConfigurationError):
            refine_regularization_set(
                grouped_manifest(2), Unsafe(), image_loader=gray_loader(0), workers=2
            )

    def test_unsafe_estimator_with_clone_accepted(self):
        class Cloneable:
            concurrent_safe = False

            def estimate(self, image):
                return 10

            def clone(self):
                return Cloneable()

        result = refine_regularization_set(
            grouped_manifest(2), Cloneable(), image_loader=gray_loader(0), workers=2
        )
        assert all(e.age == 10 for e in result.manifest)


class TestEffectiveAge:
    def test_refined_uses_entry_age(self):
        e = ManifestEntry("a.png", 33, "child")
        assert effective_age(e, use_refined=True) == 33

    def test_unrefined_uses_group_representative(self):
        e = ManifestEntry("a.png", 33, "child")
        assert effective_age(e, use_refined=False) == GROUP_REPRESENTATIVE_AGE["child"]

    def test_unrefined_without_group_rejected(self):
        with pytest.raises(ValidationError):
            effective_age(ManifestEntry("a.png", 33, None), use_refined=False)
