import numpy as np
import pytest

from edd import autodiff as ad
from edd import cli
from edd.autodiff import Tensor
from edd.gradcheck import TOLERANCE, format_report, run_suite


@pytest.fixture(scope="module")
def suite():
    return run_suite(seed=0, trials=1)


def test_every_group_is_covered(suite):
    prefixes = {r.name.split("/")[0] for r in suite}
    assert prefixes == {"primitive", "memory_read", "orthogonality", "alignment", "total_loss"}
    assert all(r.passed for r in suite), [r for r in suite if not r.passed]


def test_end_to_end_covers_every_parameter(suite):
    from edd.gradcheck import _parameter_owners, desk_model
    names = {r.name for r in suite if r.name.startswith("total_loss/")}
    model = desk_model(np.random.default_rng(0))
    assert names == {f"total_loss/{name}" for name, _, _ in _parameter_owners(model)}
    assert len(names) == len(model.parameters())


def test_report_summary_line(suite):
    text = format_report(suite)
    assert text.splitlines()[-1].startswith(f"{len(suite)} checks, max relative error")
    assert text.endswith("0 failed")


def _broken_softmax(x, axis=-1):
    """Correct forward pass, backward rule with the Jacobian's off-diagonal dropped."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = np.exp(z)
    y /= y.sum(axis=axis, keepdims=True)
    return Tensor._result(y, (x,), lambda g: (g * y * (1 - y),), "softmax")


def test_a_corrupted_rule_is_caught(monkeypatch, capsys):
    monkeypatch.setattr(ad, "softmax", _broken_softmax)
    results = run_suite(seed=0, trials=1)
    failed = {r.name for r in results if not r.passed}
    assert "primitive/softmax#0" in failed
    assert any(n.startswith("alignment") for n in failed)
    assert cli.main(["gradcheck"]) == cli.EXIT_CONTRACT
    assert "failed" in capsys.readouterr().out


def test_tolerance_is_the_documented_one():
    assert TOLERANCE == 1e-4
