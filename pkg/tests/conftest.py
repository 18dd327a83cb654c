import sys

import pytest

from mdclab.allocator import assign_roles
from mdclab.codec import CtuGrid
from mdclab.encoder import MdcEncoder
from mdclab.source import SequenceSource, open_source


@pytest.fixture(scope="session")
def box_frames():
    return open_source(SequenceSource(frame_count=6))


@pytest.fixture(scope="session")
def golden(box_frames):
    """Three encoded frames (IDR, inter, inter), four CTUs per NALU."""
    grid = CtuGrid.for_frame(box_frames[0])
    roles = assign_roles(grid)
    enc = MdcEncoder(grid, roles, ctus_per_nalu=4)
    encoded = [enc.encode_frame(f, k, 0.1, 3600, k == 0) for k, f in enumerate(box_frames[:3])]
    return grid, enc, encoded


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])
