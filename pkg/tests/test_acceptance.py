"""All ten acceptance criteria at their stated tolerances.

Each test prints a single ``[PASS]``/``[FAIL]`` line, shown even under output
capture, and then asserts on the same verdict.
"""

import pytest

from sgdtail import verify


@pytest.mark.acceptance
class TestAcceptance:
    @pytest.mark.parametrize("check", verify.ALL, ids=lambda c: f"criterion{c.number:02d}")
    def test_criterion(self, check, capsys):
        result = check(seed=0)
        with capsys.disabled():
            print(f"\n{result.line()}")
        assert result.passed, f"criterion {result.number} failed: {result.details}"
