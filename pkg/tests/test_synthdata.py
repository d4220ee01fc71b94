"""Phantom generator: invariants, determinism, split hygiene, file I/O."""

import io

import numpy as np
import pytest

from queryseg.errors import ConfigError, DataError, GeometryError
from queryseg.synthdata import (
    OrganGeometry,
    PhantomSpec,
    TextureParams,
    generate_split,
    generate_volume,
    load_volume,
    materialize_dataset,
    read_manifest,
    save_volume,
    write_manifest,
)

SPEC = PhantomSpec(seed=42)


class TestSpecValidation:
    def test_zero_inlier_classes_rejected(self):
        with pytest.raises(ConfigError):
            PhantomSpec(num_inlier_tumor_classes=0)

    def test_zero_ood_classes_rejected(self):
        with pytest.raises(ConfigError):
            PhantomSpec(num_ood_tumor_classes=0)

    def test_organ_too_large_rejected(self):
        with pytest.raises(GeometryError):
            PhantomSpec(shape=(32, 32, 1), organ_geometry=OrganGeometry((20.0, 24.0)))

    def test_duplicate_texture_signatures_rejected(self):
        tex = TextureParams(mean=0.5, amplitude=0.05, frequency=4.0)
        with pytest.raises(ConfigError):
            PhantomSpec(
                num_inlier_tumor_classes=1,
                num_ood_tumor_classes=1,
                textures=(tex, tex, tex, tex),
            )

    def test_negative_case_seed_rejected(self):
        with pytest.raises(ConfigError):
            generate_volume(SPEC, -1, allow_ood=False)

    def test_class_layout(self):
        assert SPEC.num_classes_train == 5
        assert SPEC.num_classes_total == 7
        assert SPEC.inlier_class_ids == (2, 3, 4)
        assert SPEC.ood_class_ids == (5, 6)
        assert SPEC.class_roles[:2] == ("background", "organ")


class TestVolumeInvariants:
    def test_partition_of_unity_over_many_volumes(self):
        for seed in range(12):
            vol = generate_volume(SPEC, seed, allow_ood=seed % 3 == 0)
            assert (vol.masks.sum(axis=0) == 1).all(), f"seed {seed}"

    def test_masks_binary_and_consistent_with_label_map(self):
        vol = generate_volume(SPEC, 5, allow_ood=True)
        assert set(np.unique(vol.masks)) <= {0, 1}
        rebuilt = np.zeros_like(vol.masks)
        for c in range(vol.masks.shape[0]):
            rebuilt[c] = vol.label_map == c
        np.testing.assert_array_equal(rebuilt, vol.masks)

    def test_tumors_inside_organ(self):
        # Organ region = organ label plus anything painted over it.
        for seed in range(8):
            vol = generate_volume(SPEC, seed, allow_ood=True)
            tumor = vol.label_map >= 2
            background = vol.label_map == 0
            assert not (tumor & background).any()
            # Tumor voxels must not touch the grid border (organ has margin).
            assert not tumor[0].any() and not tumor[-1].any()
            assert not tumor[:, 0].any() and not tumor[:, -1].any()

    def test_determinism_bit_identical(self):
        a = generate_volume(SPEC, 9, allow_ood=True)
        b = generate_volume(SPEC, 9, allow_ood=True)
        buf_a, buf_b = io.BytesIO(), io.BytesIO()
        np.save(buf_a, a.image)
        np.save(buf_b, b.image)
        assert buf_a.getvalue() == buf_b.getvalue()
        np.testing.assert_array_equal(a.masks, b.masks)

    def test_different_seeds_differ(self):
        a = generate_volume(SPEC, 1, allow_ood=False)
        b = generate_volume(SPEC, 2, allow_ood=False)
        assert not np.array_equal(a.image, b.image)

    def test_ood_flag_tracks_content(self):
        assert not generate_volume(SPEC, 3, allow_ood=False).is_ood_case
        vol = generate_volume(SPEC, 3, allow_ood=True)
        assert vol.is_ood_case
        assert np.isin(vol.label_map, SPEC.ood_class_ids).sum() > 0

    def test_inlier_volume_has_a_lesion(self):
        for seed in range(6):
            vol = generate_volume(SPEC, seed, allow_ood=False)
            assert (vol.label_map >= 2).sum() > 0

    def test_3d_mode(self):
        spec = PhantomSpec(shape=(32, 32, 16), organ_geometry=OrganGeometry((10.0, 13.0)))
        vol = generate_volume(spec, 0, allow_ood=True)
        assert vol.image.shape == (32, 32, 16)
        assert (vol.masks.sum(axis=0) == 1).all()


class TestSplit:
    def test_counts_and_flags(self):
        manifest = generate_split(SPEC, 10, 2, 2, 2)
        assert len(manifest.all_cases()) == 16
        flagged = [rec for rec in manifest.all_cases() if rec.is_ood_case]
        assert len(flagged) == 2
        assert all(rec.partition == "test_ood" for rec in flagged)

    def test_empty_ood_partition(self):
        manifest = generate_split(SPEC, 3, 1, 1, 0)
        assert manifest.cases("test_ood") == []

    def test_case_ids_unique(self):
        manifest = generate_split(SPEC, 5, 2, 2, 2)
        ids = [rec.case_id for rec in manifest.all_cases()]
        assert len(set(ids)) == len(ids)

    def test_no_held_out_labels_outside_ood_partition(self):
        manifest = generate_split(SPEC, 6, 2, 2, 2)
        for part in ("train", "val", "test_inlier"):
            for rec in manifest.cases(part):
                vol = generate_volume(SPEC, rec.case_seed, rec.allow_ood)
                assert not np.isin(vol.label_map, SPEC.ood_class_ids).any(), rec.case_id

    def test_negative_counts_rejected(self):
        with pytest.raises(ConfigError):
            generate_split(SPEC, -1, 0, 0, 0)


class TestFiles:
    def test_manifest_round_trip(self, tmp_path):
        manifest = generate_split(SPEC, 4, 1, 1, 2)
        path = write_manifest(manifest, tmp_path / "manifest.json")
        loaded = read_manifest(path)
        assert loaded.spec == SPEC
        assert loaded.partitions == manifest.partitions

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(DataError):
            read_manifest(tmp_path / "nope.json")

    def test_volume_round_trip(self, tmp_path):
        manifest = generate_split(SPEC, 1, 0, 0, 1)
        rec = manifest.cases("test_ood")[0]
        vol = generate_volume(SPEC, rec.case_seed, rec.allow_ood, case_id=rec.case_id)
        save_volume(vol, tmp_path)
        loaded = load_volume(SPEC, rec, tmp_path)
        np.testing.assert_array_equal(loaded.image, vol.image)
        np.testing.assert_array_equal(loaded.masks, vol.masks)
        assert loaded.is_ood_case == vol.is_ood_case

    def test_materialize_dataset(self, tmp_path):
        manifest = generate_split(SPEC, 2, 1, 1, 1)
        out = materialize_dataset(manifest, tmp_path / "ds")
        assert (out / "manifest.json").exists()
        for rec in manifest.all_cases():
            assert (out / "cases" / f"{rec.case_id}.image.npy").exists()
            assert (out / "cases" / f"{rec.case_id}.labels.npy").exists()

    def test_materialize_is_reproducible_bytes(self, tmp_path):
        manifest = generate_split(SPEC, 1, 0, 0, 1)
        a = materialize_dataset(manifest, tmp_path / "a")
        b = materialize_dataset(manifest, tmp_path / "b")
        for rec in manifest.all_cases():
            fa = (a / "cases" / f"{rec.case_id}.image.npy").read_bytes()
            fb = (b / "cases" / f"{rec.case_id}.image.npy").read_bytes()
            assert fa == fb
