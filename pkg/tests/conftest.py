import dataclasses

import numpy as np
import pytest

from demoedit.oracle import PickPlaceScript, pickplace_scene, simulate_demo


@pytest.fixture(scope="session")
def scene():
    return pickplace_scene()


@pytest.fixture(scope="session")
def script():
    return PickPlaceScript(frames=60)


@pytest.fixture(scope="session")
def oracle_run(scene, script):
    """60-frame pick-and-place demo at 320x240 with its ground truth."""
    return simulate_demo(scene, script, demo_id="oracle")


@pytest.fixture(scope="session")
def oracle_demo(oracle_run):
    return oracle_run[0]


@pytest.fixture(scope="session")
def small_scene():
    return pickplace_scene(160, 120)


@pytest.fixture(scope="session")
def small_run(small_scene):
    return simulate_demo(small_scene, PickPlaceScript(frames=16), demo_id="small")


@pytest.fixture(scope="session")
def small_demo(small_run):
    return small_run[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def without_relocation(ctx):
    return dataclasses.replace(ctx, spec=dataclasses.replace(ctx.spec, relocation_frames=0))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def emit(number, name, ok, detail):
        line = f"[{number}] {'PASS' if ok else 'FAIL'}\t{name}\t{detail}"
        print(line)
        lines.append(line)

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
