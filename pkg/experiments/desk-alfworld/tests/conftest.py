"""
Shared fixtures for the desk-alfworld tests.

The bathroom scene mirrors the spraybottle episode used throughout the
protocol tests: spraybottle 2 sits in the closed cabinet 2, a second one in
the closed cabinet 4, and the task is to put one on toilet 1.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent.parent.parent))

from coplan.world import (
    OBJECT_KINDS,
    Goal,
    ObjectSpec,
    ReceptacleSpec,
    TaskSpec,
    WorldState,
)

FIXTURES = Path(__file__).parent / "fixtures"
UPDATE_GOLDEN = False


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")
    parser.addoption(
        "--update-golden", action="store_true", default=False, help="rewrite golden files from the current output"
    )


def pytest_configure(config):
    global UPDATE_GOLDEN
    UPDATE_GOLDEN = config.getoption("--update-golden")
    config.addinivalue_line("markers", "slow: long acceptance run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def assert_golden(name: str, text: str) -> None:
    """Compare text with fixtures/<name>; --update-golden rewrites the file instead."""
    path = FIXTURES / name
    if UPDATE_GOLDEN:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    if not path.exists():
        pytest.fail(f"Golden file {path} is missing; run with --update-golden to create it")
    expected = path.read_text()
    assert text == expected, f"Output differs from golden file {path}"


def _receptacle(rid, pos, contents=(), openable=False, is_open=False, stuck=False):
    kind = rid.rsplit(" ", 1)[0]
    return ReceptacleSpec(rid, kind, openable, is_open, tuple(contents), pos, stuck)


def _objects(*ids):
    return tuple(ObjectSpec(oid, oid.rsplit(" ", 1)[0], OBJECT_KINDS[oid.rsplit(" ", 1)[0]].properties) for oid in ids)


def make_bathroom(stuck_cabinet: bool = False) -> WorldState:
    receptacles = (
        _receptacle("cabinet 1", (0, 0), ("cloth 1", "soapbar 1", "soapbottle 1"), openable=True, is_open=True),
        _receptacle("cabinet 2", (0, 1), ("spraybottle 2",), openable=True, stuck=stuck_cabinet),
        _receptacle("cabinet 3", (0, 2), openable=True),
        _receptacle("cabinet 4", (0, 3), ("spraybottle 1",), openable=True),
        _receptacle("countertop 1", (0, 5), ("candle 1",)),
        _receptacle("garbagecan 1", (6, 0)),
        _receptacle("handtowelholder 1", (3, 0), ("handtowel 1",)),
        _receptacle("handtowelholder 2", (4, 0)),
        _receptacle("sinkbasin 1", (6, 2)),
        _receptacle("sinkbasin 2", (6, 3)),
        _receptacle("toilet 1", (6, 6)),
        _receptacle("toiletpaperhanger 1", (3, 6), ("toiletpaper 1",)),
        _receptacle("towelholder 1", (2, 6), ("towel 1",)),
    )
    objects = _objects(
        "candle 1", "cloth 1", "handtowel 1", "soapbar 1", "soapbottle 1",
        "spraybottle 1", "spraybottle 2", "toiletpaper 1", "towel 1",
    )
    return WorldState(grid_dims=(7, 7), receptacles=receptacles, objects=objects, agent_pos=(3, 3))


def make_spraybottle_task(stuck: bool = False) -> TaskSpec:
    return TaskSpec(
        "Pick&Place", "put some spraybottle on toilet", Goal("spraybottle", "toilet"), seed=0, stuck=stuck,
    )


@pytest.fixture
def bathroom():
    return make_bathroom()


@pytest.fixture
def spraybottle_task():
    return make_spraybottle_task()


@pytest.fixture
def stuck_bathroom():
    return make_bathroom(stuck_cabinet=True)
