import numpy as np
import pytest

from dense_rdn import config
from dense_rdn.experiment import Experiment


def small_config(preset="pattern", n_species=3, grid=(8, 8), T=6, **sections):
    raw = {
        "schema_version": 1,
        "seed": 1,
        "model": {"n_species": n_species, "grid": list(grid), "T": T},
        "generator": {"n_bits": 4, "base_width": 8, "min_width": 4},
        "loss": {"preset": preset},
        "optimizer": {"max_iterations": 5},
    }
    if preset.startswith("pattern"):
        raw["loss"]["target"] = {"builtin": "square"}
    for key, value in sections.items():
        raw.setdefault(key, {})
        if isinstance(value, dict) and isinstance(raw[key], dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return config.resolve(raw)


@pytest.fixture
def small_experiment():
    return Experiment(small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = mod.summary_lines() if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
