"""Finite-difference gradient suite: a full k=1 run plus harness checks.
The k=2 run lives in the acceptance suite."""

import pytest

from vqmoe.errors import ConfigError
from vqmoe.gradcheck import GradcheckReport, micro_config, run_gradient_check


class TestGradcheck:
    def test_full_model_k1_passes(self):
        report = run_gradient_check(micro_config(k=1))
        assert report.passed
        assert report.max_rel_err < 1e-4
        # every parameter tensor of the full model is covered
        names = {p.name for p in report.params}
        assert "fusion.video.q.weight" in names
        assert "gate.perceptual.weight" in names
        assert "experts.alignment.1.w2" in names
        assert "head.overall.weight" in names
        assert sum(p.n_elements for p in report.params) > 600

    def test_report_shape(self):
        report = run_gradient_check(micro_config(k=1), batch_size=3)
        lines = report.format_lines()
        assert lines[-1].startswith("  -> PASS")
        d = report.to_dict()
        assert d["passed"] is True and d["k"] == 1
        assert report.worst().rel_err == report.max_rel_err

    def test_requires_float64(self):
        with pytest.raises(ConfigError):
            run_gradient_check(micro_config(k=1, dtype="float32"))

    def test_requires_batch(self):
        with pytest.raises(ConfigError):
            run_gradient_check(micro_config(k=1), batch_size=1)
