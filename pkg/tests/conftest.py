import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------

def pytest_terminal_summary(terminalreporter):
    from acceptance_log import ACCEPTANCE, ACCEPTANCE_TABLES

    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance")
    for num in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[num]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {num:02d}  {title}: {detail}")
    for block in ACCEPTANCE_TABLES:
        tr.write_line("")
        for line in block.splitlines():
            tr.write_line(line)
