import copy
import sys
import json

import pytest

from dtcb.scenario import ScenarioConfig, build_world, bundled


def load_raw(name):
    return json.loads(bundled(name).read_text())


def config_from(raw):
    return ScenarioConfig.from_text(json.dumps(raw, indent=2))


@pytest.fixture
def s1_raw():
    return copy.deepcopy(load_raw("s1_happy_path"))


@pytest.fixture
def s1_world():
    return build_world(ScenarioConfig.load(bundled("s1_happy_path")))


@pytest.fixture
def s1_profiles(s1_world):
    return s1_world.nodes["G1"].profile, s1_world.nodes["G2"].profile, s1_world.directory


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
