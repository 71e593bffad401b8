import pytest

from src.core import gradcheck
from src.core.model import tap
from tests.conftest import run_driver


def test_every_check_passes():
    results = gradcheck.run_suite(seed=0, max_coords=8)
    names = [r.name for r in results]
    assert names == ["l_ar", "l_mim", "l_step", "l_view", "masked_softmax", "rms_norm", "gelu", "l_total"]
    failed = {r.name: r.report.worst() for r in results if not r.passed}
    assert not failed, failed


def test_end_to_end_probes_every_parameter_tensor():
    result = gradcheck.run_suite(seed=1, max_coords=2)[-1]
    state, _ = gradcheck.end_to_end_inputs(1)
    assert set(result.report.checked) == {n for n, _ in state.student.named_parameters()}
    assert all(0 < count <= 2 for count in result.report.checked.values())


def test_row_fields():
    row = gradcheck.run_suite(seed=0, max_coords=2)[0].row()
    assert row["check"] == "l_ar"
    assert row["passed"] is True
    assert row["tolerance"] == gradcheck.COMPONENT_TOLERANCE


def test_command_exit_code(capsys):
    assert run_driver("gradcheck", "--max-coords", "4") == 0
    out = capsys.readouterr().out
    assert "l_total" in out
    assert "FAILED" not in out


@pytest.mark.parametrize("seed", [0, 1])
def test_total_objective_passes_at_the_command_default(seed):
    result = gradcheck.run_suite(seed=seed, max_coords=24)[-1]
    assert result.name == "l_total"
    assert result.report.checked["projector.linears.0.bias"] > 0
    assert result.passed, result.report.worst()


def test_micro_student_projector_sees_unit_scale_inputs():
    state, batch = gradcheck.end_to_end_inputs(0)
    tokens = batch.tokens.reshape(-1, batch.tokens.shape[-1])
    trace = state.student(tokens, batch.conditions.repeat_interleave(2))
    h = tap(trace, state.model_config.tap_depth, [0, 3])
    pre_norm = state.student.projector.linears[0](h)
    assert pre_norm.pow(2).mean().sqrt() > 0.1
