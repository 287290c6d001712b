import pytest

from weatherda.grad import engine
from weatherda.gradcheck import ALL_CHECKS, COMPOSED_TOL, SMOOTH_TOL, format_report, run_suite


def test_suite_passes_small():
    results = run_suite(instances=3)
    assert all(r.passed for r in results), format_report(results)
    names = {r.name for r in results}
    for required in ("exp", "log", "matmul", "relu", "softmax", "l2_normalize", "cosine_similarity",
                     "concat", "grl", "grl_composition", "qddm_objective", "detection_loss"):
        assert required in names


def test_report_lists_tolerances():
    report = format_report(run_suite(instances=1, checks=ALL_CHECKS[:2]))
    assert f"{SMOOTH_TOL:g}" in report and f"{COMPOSED_TOL:g}" in report


def test_corrupted_adjoint_is_named(monkeypatch):
    real = engine.Exp.backward

    def wrong(ctx, g):
        (d,) = real(ctx, g)
        return (1.5 * d,)

    monkeypatch.setattr(engine.Exp, "backward", staticmethod(wrong))
    results = run_suite(instances=2)
    failed = {r.name for r in results if not r.passed}
    assert "exp" in failed
    assert "FAIL exp" in format_report(results)
