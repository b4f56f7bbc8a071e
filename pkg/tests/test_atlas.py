"""Atlas construction, labeling, and the on-disk bundle format."""

import json
import shutil

import numpy as np
import pytest

from fiberatlas import (
    TRACT_NAMES,
    UNLABELED,
    AnatomicalLabel,
    AtlasBuildConfig,
    AtlasBuildError,
    AtlasChecksumError,
    AtlasTruncatedError,
    AtlasVersionError,
    FiberDistanceParams,
    NotAnAtlasBundleError,
    build_atlas,
    load_atlas,
    mcp,
    save_atlas,
    transfer_labels,
    with_cluster_labels,
)

NAMES8 = list(TRACT_NAMES[:8])


@pytest.fixture(scope="module")
def labeled_atlas(small_atlas):
    return with_cluster_labels(small_atlas, NAMES8)


@pytest.fixture(scope="module")
def saved_bundle(tmp_path_factory, labeled_atlas):
    path = tmp_path_factory.mktemp("bundles") / "atlas"
    save_atlas(labeled_atlas, path)
    return path


def bundle_copy(saved_bundle, tmp_path):
    dest = tmp_path / "copy"
    shutil.copytree(saved_bundle, dest)
    return dest


class TestBuild:
    def test_shape_and_labels(self, small_atlas, small_cohort):
        assert small_atlas.n_clusters == 8
        assert small_atlas.points_per_fiber == 15
        assert not small_atlas.has_labels
        assert not small_atlas.is_fully_labeled
        total = sum(len(t) for t, _ in small_cohort)
        assert int(small_atlas.clusters.member_counts.sum()) == total
        for reps in small_atlas.representative_fibers:
            assert reps.shape[0] <= 5
            assert reps.shape[1:] == (15, 3)

    def test_provenance_records_the_build(self, small_atlas, small_cohort):
        prov = small_atlas.provenance
        for key in (
            "k",
            "embedding_dims",
            "nystrom_sample_size",
            "sigma",
            "fibers_per_subject",
            "points_per_fiber",
            "seed",
            "registration",
            "subject_ids",
            "subject_fiber_counts",
            "subject_sample_indices",
            "subject_transforms",
            "registration_objective_trace",
            "registration_converged",
            "nystrom_sample_indices",
            "training_cluster_assignments",
            "representative_pool_indices",
        ):
            assert key in prov, key
        assert prov["registration"] is None
        assert prov["subject_ids"] == [t.subject_id for t, _ in small_cohort]
        assert len(prov["training_cluster_assignments"]) == sum(
            len(t) for t, _ in small_cohort
        )
        # skipping registration pins every subject to the identity
        for rows in prov["subject_transforms"]:
            m = np.asarray(rows)
            assert np.array_equal(m[:, :3], np.eye(3))
            assert np.array_equal(m[:, 3], np.zeros(3))
        json.dumps(prov)

    def test_representatives_come_from_their_cluster(self, small_atlas):
        assigned = np.asarray(small_atlas.provenance["training_cluster_assignments"])
        for k, pool_idx in enumerate(
            small_atlas.provenance["representative_pool_indices"]
        ):
            assert len(pool_idx) == small_atlas.representative_fibers[k].shape[0]
            assert all(assigned[i] == k for i in pool_idx)

    def test_build_is_deterministic(self, small_atlas, small_cohort):
        cfg = AtlasBuildConfig(
            k=8,
            embedding_dims=8,
            nystrom_sample_size=120,
            sigma=30.0,
            fibers_per_subject=240,
            points_per_fiber=15,
            representatives_per_cluster=5,
            seed=3,
            registration=None,
        )
        again = build_atlas([t for t, _ in small_cohort], cfg)
        assert np.array_equal(
            again.nystrom.eigenvalues, small_atlas.nystrom.eigenvalues
        )
        assert np.array_equal(
            again.clusters.centroids, small_atlas.clusters.centroids
        )
        assert np.array_equal(
            again.clusters.member_counts, small_atlas.clusters.member_counts
        )

    def test_needs_two_subjects(self, small_cohort):
        cfg = AtlasBuildConfig(k=2, fibers_per_subject=30, registration=None)
        with pytest.raises(ValueError, match="at least 2 subjects"):
            build_atlas([small_cohort[0][0]], cfg)

    def test_rejects_undersized_subject(self, small_cohort):
        cfg = AtlasBuildConfig(k=2, fibers_per_subject=10_000, registration=None)
        with pytest.raises(ValueError, match="below the downsample target"):
            build_atlas([t for t, _ in small_cohort], cfg)

    def test_stage_failures_carry_the_stage_name(self, small_cohort):
        cfg = AtlasBuildConfig(
            k=2,
            embedding_dims=50,
            nystrom_sample_size=12,
            fibers_per_subject=30,
            registration=None,
        )
        with pytest.raises(AtlasBuildError, match="stage 'embed'") as info:
            build_atlas([t for t, _ in small_cohort], cfg)
        assert info.value.stage == "embed"

    def test_config_validation(self):
        with pytest.raises(ValueError, match="k must be"):
            AtlasBuildConfig(k=0)
        with pytest.raises(ValueError, match="representative"):
            AtlasBuildConfig(k=2, representatives_per_cluster=0)


class TestLabels:
    def test_with_cluster_labels(self, small_atlas):
        labeled = with_cluster_labels(small_atlas, NAMES8)
        assert labeled.is_fully_labeled
        assert labeled.tract_names == tuple(sorted(NAMES8))
        # the original is untouched
        assert not small_atlas.has_labels

    def test_label_count_must_match(self, small_atlas):
        with pytest.raises(ValueError, match="names for 8 clusters"):
            with_cluster_labels(small_atlas, NAMES8[:3])

    def test_unlabeled_marker_allowed(self, small_atlas):
        names = [UNLABELED] * 7 + [NAMES8[0]]
        partial = with_cluster_labels(small_atlas, names)
        assert partial.has_labels
        assert not partial.is_fully_labeled
        assert partial.tract_names == (NAMES8[0],)

    def test_label_validation(self):
        with pytest.raises(ValueError, match="unknown tract name"):
            AnatomicalLabel.for_tract("no_such_tract")
        with pytest.raises(ValueError, match="inconsistent"):
            AnatomicalLabel("CC1", None)
        assert AnatomicalLabel.unlabeled().is_unlabeled


class TestTransferLabels:
    def test_matches_mean_distance_oracle(self, small_atlas, labeled_atlas):
        got = transfer_labels(small_atlas, labeled_atlas)
        params = FiberDistanceParams()
        want = []
        for reps in small_atlas.representative_fibers:
            means = []
            for ref_reps in labeled_atlas.representative_fibers:
                vals = [mcp(a, b, params) for a in reps for b in ref_reps]
                means.append(sum(vals) / len(vals))
            want.append(labeled_atlas.labels[int(np.argmin(means))])
        assert got.labels == tuple(want)

    def test_identical_representatives_map_to_themselves(
        self, small_atlas, labeled_atlas
    ):
        got = transfer_labels(small_atlas, labeled_atlas)
        assert got.labels == labeled_atlas.labels

    def test_idempotent(self, small_atlas, labeled_atlas):
        once = transfer_labels(small_atlas, labeled_atlas)
        twice = transfer_labels(once, labeled_atlas)
        assert once.labels == twice.labels

    def test_reference_must_be_fully_labeled(self, small_atlas):
        with pytest.raises(ValueError, match="unlabeled clusters"):
            transfer_labels(small_atlas, small_atlas)

    def test_point_count_mismatch(self, small_cohort, labeled_atlas):
        cfg = AtlasBuildConfig(
            k=2,
            embedding_dims=4,
            nystrom_sample_size=40,
            fibers_per_subject=60,
            points_per_fiber=10,
            representatives_per_cluster=3,
            seed=1,
            registration=None,
        )
        coarse = build_atlas([t for t, _ in small_cohort], cfg)
        with pytest.raises(ValueError, match="point count mismatch"):
            transfer_labels(coarse, labeled_atlas)


class TestBundleFormat:
    def test_round_trip_preserves_everything(self, labeled_atlas, saved_bundle):
        loaded = load_atlas(saved_bundle)
        a, b = labeled_atlas, loaded
        assert np.array_equal(a.nystrom.sample_fibers, b.nystrom.sample_fibers)
        assert np.array_equal(a.nystrom.eigenvalues, b.nystrom.eigenvalues)
        assert np.array_equal(
            a.nystrom.sample_eigenvectors, b.nystrom.sample_eigenvectors
        )
        assert np.array_equal(
            a.nystrom.row_sum_normalizer, b.nystrom.row_sum_normalizer
        )
        assert a.nystrom.sigma == b.nystrom.sigma
        assert a.nystrom.dropped_leading == b.nystrom.dropped_leading
        assert a.nystrom.distance == b.nystrom.distance
        assert np.array_equal(a.clusters.centroids, b.clusters.centroids)
        assert np.array_equal(a.clusters.member_counts, b.clusters.member_counts)
        assert np.array_equal(a.clusters.inertia_trace, b.clusters.inertia_trace)
        assert a.labels == b.labels
        for ra, rb in zip(a.representative_fibers, b.representative_fibers):
            assert np.array_equal(ra, rb)
        assert a.provenance == b.provenance

    def test_unlabeled_round_trip(self, small_atlas, tmp_path):
        save_atlas(small_atlas, tmp_path / "plain")
        loaded = load_atlas(tmp_path / "plain")
        assert loaded.labels == small_atlas.labels
        assert all(lab.category is None for lab in loaded.labels)

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(NotAnAtlasBundleError, match="no manifest"):
            load_atlas(tmp_path / "empty")

    def test_unparseable_manifest(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        (path / "manifest.json").write_bytes(b"{not json")
        with pytest.raises(NotAnAtlasBundleError, match="unreadable manifest"):
            load_atlas(path)

    def test_foreign_format(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        doc = json.loads((path / "manifest.json").read_text())
        doc["format"] = "something-else"
        (path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(NotAnAtlasBundleError, match="format is"):
            load_atlas(path)

    def test_newer_major_version_refused(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        doc = json.loads((path / "manifest.json").read_text())
        doc["version"]["major"] = 2
        (path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(AtlasVersionError, match="supports 1.x"):
            load_atlas(path)

    def test_version_checked_before_binary(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        doc = json.loads((path / "manifest.json").read_text())
        doc["version"]["major"] = 2
        (path / "manifest.json").write_text(json.dumps(doc))
        (path / "arrays.bin").unlink()
        with pytest.raises(AtlasVersionError):
            load_atlas(path)

    def test_newer_minor_version_readable(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        doc = json.loads((path / "manifest.json").read_text())
        doc["version"]["minor"] = 99
        (path / "manifest.json").write_text(json.dumps(doc))
        load_atlas(path)

    def test_missing_binary(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        (path / "arrays.bin").unlink()
        with pytest.raises(AtlasTruncatedError, match="missing"):
            load_atlas(path)

    def test_bad_magic(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        raw = bytearray((path / "arrays.bin").read_bytes())
        raw[0] ^= 0xFF
        (path / "arrays.bin").write_bytes(bytes(raw))
        with pytest.raises(NotAnAtlasBundleError, match="bad magic"):
            load_atlas(path)

    def test_truncated_binary(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        raw = (path / "arrays.bin").read_bytes()
        (path / "arrays.bin").write_bytes(raw[: len(raw) - 16])
        with pytest.raises(AtlasTruncatedError, match="bytes"):
            load_atlas(path)

    def test_corrupted_payload(self, saved_bundle, tmp_path):
        path = bundle_copy(saved_bundle, tmp_path)
        raw = bytearray((path / "arrays.bin").read_bytes())
        raw[len(raw) // 2] ^= 0x01
        (path / "arrays.bin").write_bytes(bytes(raw))
        with pytest.raises(AtlasChecksumError, match="checksum mismatch"):
            load_atlas(path)
