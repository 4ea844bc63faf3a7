import pytest

from mrot import transport

MARGINAL_LIMIT = 1e-6
COUPLING_RESIDUALS = []
# criterion number -> (title, passed, detail), filled by test_acceptance
ACCEPTANCE = {}

_original_post_init = transport.Coupling.__post_init__


def _recording_post_init(self):
    _original_post_init(self)
    COUPLING_RESIDUALS.append(max(transport.marginal_residuals(self.plan)))


transport.Coupling.__post_init__ = _recording_post_init


@pytest.fixture(autouse=True)
def every_coupling_is_feasible():
    """Fail any test that produced a coupling with a marginal residual above 1e-6."""
    start = len(COUPLING_RESIDUALS)
    yield
    new = COUPLING_RESIDUALS[start:]
    worst = max(new, default=0.0)
    assert worst <= MARGINAL_LIMIT, f"coupling with marginal residual {worst:.3g} was returned"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        tr.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
    worst = max(COUPLING_RESIDUALS, default=0.0)
    ok = worst <= MARGINAL_LIMIT
    tr.write_line(f"[{'PASS' if ok else 'FAIL'}]  2. marginal feasibility, whole session: "
                  f"{len(COUPLING_RESIDUALS)} couplings, max residual {worst:.3g}")
