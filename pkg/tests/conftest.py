"""Shared fixtures: a seeded random-weight model file built once per session."""

import pytest

from slidereg.models import make_fixture_model


@pytest.fixture(scope="session")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "backbone.pt"
    make_fixture_model(path, seed=0)
    return path
