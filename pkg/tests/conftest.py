import json

import numpy as np
import pytest

from flowsolve.tensor_io import write_tensor


def write_gmm(path, spec):
    path.write_text(json.dumps(spec))


def unit_gaussian_spec(dim):
    return {
        "weights": [1.0],
        "means": [[0.0] * dim],
        "covariances": {"isotropic": [1.0]},
    }


@pytest.fixture
def workspace(tmp_path):
    """A minimal runnable job: N(0, I) prior in 2-D, identity-like mask."""

    def build(**overrides):
        d = overrides.pop("dim", 2)
        cfg = {
            "name": "demo",
            "output_dir": "out",
            "repeat": 2,
            "path": {"kind": "cond_ot"},
            "model": {"gmm": "prior.json"},
            "operator": {"kind": "mask", "keep": list(range(d))},
            "guidance": {"sigma_y": 0.05},
            "solver": {"t0": 0.2, "n_steps": 25, "seed": 3},
            "observation": "y.bin",
        }
        gmm_spec = overrides.pop("gmm_spec", unit_gaussian_spec(d))
        y = overrides.pop("y", np.linspace(-0.5, 0.5, d))
        for key, value in overrides.items():
            if key in ("guidance", "solver", "model") and isinstance(value, dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
        write_gmm(tmp_path / "prior.json", gmm_spec)
        write_tensor(tmp_path / "y.bin", np.asarray(y, dtype=float))
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(cfg, indent=2))
        return cfg_path, cfg

    return build
