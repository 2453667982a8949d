import json

import pytest

from tled.errors import TledError
from tled.verify import SUITES, outlier_point_sets, run_verify


def test_suites_cover_every_area():
    assert set(SUITES) == {"patch", "constitutive", "locking", "hourglass", "dynamics", "equivalence",
                           "contact", "warp", "metrics"}


def test_unknown_suite():
    with pytest.raises(TledError, match="unknown"):
        run_verify("patch,bogus")


def test_report_excludes_timings():
    res = run_verify("metrics,dynamics")
    assert res.passed and set(res.timings) == {"metrics", "dynamics"}
    assert "time" not in res.report_json()
    assert json.loads(res.report_json()) == res.report


def test_outlier_sets():
    pts, moved = outlier_point_sets()
    assert len(pts) == 100 and (pts != moved).sum() == 1


def test_fault_injection_is_caught(monkeypatch):
    """Disabling hourglass control must fail the hourglass suite and nothing else."""
    monkeypatch.setenv("TLED_HOURGLASS_KAPPA", "0")
    res = run_verify("hourglass,patch")
    assert not res.report["suites"]["hourglass"]["passed"]
    assert res.report["suites"]["patch"]["passed"]
    assert not res.passed
