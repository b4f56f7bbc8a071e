"""Config parsing and validation: every problem reported, none fatal early."""

import pytest

from fiberatlas import (
    ConfigParseError,
    ConfigValidationError,
    build_pipeline_config,
    default_config_mapping,
    load_config_mapping,
    validate_config,
)
from fiberatlas.config import ConfigValidationError as CVE  # same class, import path check


def test_default_mapping_is_valid():
    assert validate_config(default_config_mapping()) == []


def test_default_mapping_builds_typed_config():
    cfg = build_pipeline_config(default_config_mapping())
    assert cfg.synth is not None and cfg.synth.subjects == 20
    assert cfg.atlas.k == 8
    assert cfg.atlas.registration is not None
    assert cfg.atlas.registration.sigma_schedule == (15.0, 8.0)
    assert cfg.atlas.registration.points_per_fiber == 10
    assert cfg.label_mode == "ground-truth"
    assert cfg.threshold == 10
    assert cfg.jobs == 1


def test_all_problems_reported_at_once():
    doc = default_config_mapping()
    doc["format_version"] = 99
    doc["atlas"]["k"] = 0
    doc["atlas"]["registration"]["sigma_schedule"] = [10.0, 20.0]
    doc["parcellate"]["threshold"] = 0
    doc["stats"]["response"] = "volume"
    problems = validate_config(doc)
    assert len(problems) >= 5
    text = "\n".join(problems)
    assert "format_version" in text
    assert "atlas.k" in text
    assert "decreasing" in text
    assert "threshold" in text
    assert "response" in text


def test_synth_and_input_are_exclusive():
    doc = default_config_mapping()
    doc["input"] = {"tractograms": ["/nonexistent/a.tck"]}
    problems = validate_config(doc)
    assert any("synth" in p and "input" in p for p in problems)

    del doc["synth"]
    del doc["input"]
    problems = validate_config(doc)
    assert any("synth" in p and "input" in p for p in problems)


def test_input_files_must_exist(tmp_path):
    doc = default_config_mapping()
    del doc["synth"]
    doc["input"] = {"tractograms": [str(tmp_path / "missing.tck")]}
    doc["label"] = {"mode": "reference", "reference": str(tmp_path / "noatlas")}
    problems = validate_config(doc)
    assert any("missing.tck" in p for p in problems)
    assert any("reference" in p for p in problems)


def test_ground_truth_labeling_requires_synth(tmp_path):
    doc = default_config_mapping()
    del doc["synth"]
    tck = tmp_path / "a.tck"
    tck.write_bytes(b"")
    doc["input"] = {"tractograms": [str(tck)]}
    problems = validate_config(doc)
    assert any("ground-truth" in p for p in problems)


def test_registration_section_checks():
    doc = default_config_mapping()
    reg = doc["atlas"]["registration"]
    reg["family"] = "projective"
    reg["fibers_per_subject_sample"] = 5
    reg["max_iters_per_scale"] = 0
    reg["points_per_fiber"] = 1
    problems = validate_config(doc)
    text = "\n".join(problems)
    assert "family" in text
    assert "fibers_per_subject_sample" in text
    assert "max_iters_per_scale" in text
    assert "points_per_fiber" in text


def test_registration_null_means_skip():
    doc = default_config_mapping()
    doc["atlas"]["registration"] = None
    doc["parcellate"]["registration"] = None
    assert validate_config(doc) == []
    cfg = build_pipeline_config(doc)
    assert cfg.atlas.registration is None
    assert cfg.parcellation.registration is None


def test_embedding_bounds():
    doc = default_config_mapping()
    doc["atlas"]["embedding_dims"] = 500
    problems = validate_config(doc)
    assert any("embedding_dims" in p for p in problems)


def test_build_raises_with_problem_list():
    doc = default_config_mapping()
    doc["atlas"]["k"] = -3
    with pytest.raises(ConfigValidationError) as err:
        build_pipeline_config(doc)
    assert any("atlas.k" in p for p in err.value.problems)
    assert err.value is not None and isinstance(err.value, CVE)


def test_load_yaml_mapping(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("format_version: 1\nsynth:\n  subjects: 4\n")
    doc = load_config_mapping(path)
    assert doc["synth"]["subjects"] == 4


def test_parse_error_carries_position(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("synth:\n  subjects: 4\n bad_indent: {\n")
    with pytest.raises(ConfigParseError) as err:
        load_config_mapping(path)
    assert err.value.line is not None
    assert err.value.line >= 1


def test_non_mapping_root_rejected(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigParseError):
        load_config_mapping(path)


def test_jobs_override_validation():
    doc = default_config_mapping()
    doc["run"]["jobs"] = 0
    assert any("jobs" in p for p in validate_config(doc))
    doc["run"]["jobs"] = 4
    assert validate_config(doc) == []
    assert build_pipeline_config(doc).jobs == 4
