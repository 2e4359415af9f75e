from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pedefense import fixtures
from pedefense.assemble import DeskBuildSettings, build_desk_pipeline

# Corpus size for the shared desk build: the operating-point criterion needs
# at least 500 benign + 500 malware generated files.
DESK_BENIGN = 600
DESK_MALWARE = 600
DESK_SEED = 0


@pytest.fixture(scope="session")
def fixture_corpus():
    """Fifty deterministic PE32/PE32+ layout fixtures."""
    return fixtures.fixture_corpus(50, seed=1)


@pytest.fixture(scope="session")
def desk_build(tmp_path_factory):
    """One fully trained and calibrated pipeline per test session."""
    workdir = tmp_path_factory.mktemp("deskbuild")
    return build_desk_pipeline(
        workdir, DeskBuildSettings(n_benign=DESK_BENIGN, n_malware=DESK_MALWARE,
                                   seed=DESK_SEED))


@pytest.fixture()
def fresh_pipeline(desk_build):
    """The desk pipeline with an empty history buffer (per-test isolation)."""
    from pedefense.pipeline import Pipeline

    return Pipeline(desk_build.pipeline.config, desk_build.pipeline.ensembles,
                    desk_build.pipeline.ruleset)
