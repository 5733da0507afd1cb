import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from meshanim.mesh import TriangleMesh, icosphere  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def sphere2():
    return icosphere(2)


@pytest.fixture
def two_triangles():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.2]]
    return TriangleMesh(v, [[0, 1, 2], [1, 3, 2]])


@pytest.fixture
def toy_mesh():
    """12-vertex icosahedron."""
    return icosphere(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            key = props["criterion"]
            ok = outcome == "passed" and lines.get(key, (True,))[0]
            if rep.when == "call" or outcome != "passed":
                lines[key] = (ok, props.get("detail", ""))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        ok, detail = lines[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
