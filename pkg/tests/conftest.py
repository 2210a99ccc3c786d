from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from vistalab.pipeline import ExperimentConfig, Pipeline
from vistalab.synthworld import World, WorldConfig
from vistalab.toylm import LmConfig, ToyLm

settings.register_profile("repo", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def world() -> World:
    return World(WorldConfig())


@pytest.fixture(scope="session")
def tiny_lm() -> ToyLm:
    """Untrained, frozen, narrow model: cheap enough for finite differences."""
    return ToyLm(LmConfig(d_model=8, n_layers=2, n_heads=2, max_seq=40, seed=3)).freeze()


@dataclass
class Reference:
    pipe: Pipeline
    compare: dict
    encoders: dict
    out: Path

    def metrics(self, tag: str) -> dict:
        import json
        return json.loads((self.out / f"metrics_{tag}.json").read_text())

    def steering(self, tag: str) -> dict:
        import json
        return json.loads((self.out / f"steering_{tag}.json").read_text())


@pytest.fixture(scope="session")
def reference(tmp_path_factory) -> Reference:
    """The default-config experiment: paired compare plus the encoder-fidelity sweep.

    Set VISTALAB_REFERENCE_DIR to keep (and reuse) the run directory between sessions.
    """
    out = Path(os.environ.get("VISTALAB_REFERENCE_DIR") or tmp_path_factory.mktemp("ref"))
    pipe = Pipeline(ExperimentConfig(), out)
    joint = pipe.compare()
    enc = pipe.encoder_sweep()
    return Reference(pipe, joint, enc, out)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
