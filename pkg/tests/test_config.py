import json

import numpy as np
import pytest

from flowsolve import ConfigError, GuidanceConfig, MaskOperator
from flowsolve.config import (
    apply_overrides,
    build_bundle,
    canonical_json,
    load_config,
    validate_config,
)


def test_unknown_keys_rejected_everywhere(workspace):
    _, cfg = workspace()
    for mutate in (
        lambda c: c.update(surprise=1),
        lambda c: c["path"].update(surprise=1),
        lambda c: c["model"].update(surprise=1),
        lambda c: c["guidance"].update(surprise=1),
        lambda c: c["solver"].update(surprise=1),
    ):
        bad = json.loads(json.dumps(cfg))
        mutate(bad)
        with pytest.raises(ConfigError):
            validate_config(bad)


def test_missing_required_keys():
    with pytest.raises(ConfigError):
        validate_config({"name": "x"})


def test_serialization_fixed_point(workspace):
    cfg_path, _ = workspace()
    cfg = load_config(cfg_path)
    text = canonical_json(cfg)
    again = json.loads(text)
    assert again == cfg
    assert canonical_json(again) == text


def test_build_bundle_materializes_objects(workspace, tmp_path):
    cfg_path, _ = workspace()
    bundle = build_bundle(load_config(cfg_path), tmp_path)
    assert isinstance(bundle.operator, MaskOperator)
    assert isinstance(bundle.guidance, GuidanceConfig)
    assert bundle.run.n_steps == 25
    assert bundle.run.seed == 3
    np.testing.assert_allclose(bundle.y, np.linspace(-0.5, 0.5, 2))
    assert bundle.output_dir == tmp_path / "out"


def test_seed_override(workspace, tmp_path):
    cfg_path, _ = workspace()
    bundle = build_bundle(load_config(cfg_path), tmp_path, seed_override=99)
    assert bundle.run.seed == 99


def test_missing_mixture_file_names_path(workspace, tmp_path):
    cfg_path, _ = workspace(model={"gmm": "nowhere.json"})
    with pytest.raises(ConfigError) as err:
        build_bundle(load_config(cfg_path), tmp_path)
    assert "nowhere.json" in str(err.value)


def test_missing_observation_file(workspace, tmp_path):
    cfg_path, _ = workspace(observation="gone.bin")
    with pytest.raises(ConfigError) as err:
        build_bundle(load_config(cfg_path), tmp_path)
    assert "gone.bin" in str(err.value)


def test_invalid_mixture_spec(workspace, tmp_path):
    cfg_path, _ = workspace(gmm_spec={"weights": [0.5], "means": [[0.0, 0.0]], "covariances": {"isotropic": [1.0]}})
    with pytest.raises(ConfigError):
        build_bundle(load_config(cfg_path), tmp_path)


def test_inline_mixture_spec(workspace, tmp_path):
    cfg_path, _ = workspace(model={"gmm": {"weights": [1.0], "means": [[0.0, 0.0]], "covariances": {"isotropic": [2.0]}}})
    bundle = build_bundle(load_config(cfg_path), tmp_path)
    assert bundle.gmm.covariances[0] == 2.0


def test_guidance_inconsistency_is_config_error(workspace, tmp_path):
    cfg_path, _ = workspace(guidance={"sigma_y": 0.05, "null_range": True})
    with pytest.raises(ConfigError):
        build_bundle(load_config(cfg_path), tmp_path)


def test_vector_field_parameterization(workspace, tmp_path):
    cfg_path, _ = workspace(model={"gmm": "prior.json", "parameterization": "vector_field"})
    bundle = build_bundle(load_config(cfg_path), tmp_path)
    from flowsolve import VectorFieldModel

    assert isinstance(bundle.run.model, VectorFieldModel)


def test_apply_overrides_maps_axes(workspace):
    _, cfg = workspace()
    out = apply_overrides(cfg, {"t0": 0.4, "gamma_rule": "vp_adaptive", "null_range": True})
    assert out["solver"]["t0"] == 0.4
    assert out["guidance"]["gamma"] == "vp_adaptive"
    assert out["guidance"]["null_range"] is True
    assert cfg["solver"]["t0"] == 0.2  # original untouched
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"end_epsilon": 1e-4})


def test_invalid_json_reports_path(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert "broken.json" in str(err.value)
