import json

import numpy as np
import pytest

from deepnash.model import (
    AffineCost,
    GameSpec,
    ModelError,
    Space,
    TabularKernel,
    build_binary_coupled,
    build_example1,
    load,
    random_spec,
    save,
    spec_from_dict,
    validate,
)


def test_example1_defaults():
    spec = build_example1()
    assert spec.n == 100 and spec.beta == 0.9 and spec.horizon is None
    assert (spec.cost.alpha, spec.cost.gamma) == (30, 70)
    assert spec.decoupled
    K = spec.kernel.matrix(0, np.array([0.5, 0.5]))
    np.testing.assert_allclose(K.sum(axis=2), 1.0)
    # send: p = q = 0.3
    np.testing.assert_allclose(K[0, 0], [0.7, 0.3])
    np.testing.assert_allclose(K[1, 0], [0.3, 0.7])


def test_threshold_cost_band():
    spec = build_example1(100)
    D = np.zeros((2, 3))
    for k, expect in [(29, 5.0), (30, 0.0), (69, 0.0), (70, 1.0)]:
        D[:] = 0
        D[1, 0] = k / 100
        D[0, 0] = 1 - k / 100
        assert spec.cost.table(0, D)[1, 0] == expect


@pytest.mark.parametrize("coupling", ["d-only", "separable", "general"])
def test_round_trip(tmp_path, coupling):
    spec = random_spec(3, 4, 3, 2, horizon=3, coupling=coupling, time_homogeneous=False)
    path = save(spec, tmp_path / "m.json")
    back = load(path)
    assert back == spec
    assert back.digest() == spec.digest()
    D = np.full((3, 2), 1 / 6)
    np.testing.assert_array_equal(back.cost.table(1, D), spec.cost.table(1, D))


def test_validate_accepts_builtins():
    for spec in (build_example1(10), build_binary_coupled(8), random_spec(0, 3)):
        assert validate(spec).ok


def test_bad_kernel_rows_are_located():
    base = np.full((2, 2, 2), 0.5)
    base[1, 0] = [0.9, 0.3]
    spec = GameSpec(Space((0, 1)), Space((0, 1)), 3, TabularKernel(base),
                    AffineCost(np.zeros((2, 2))), np.array([0.5, 0.5]), horizon=2)
    report = validate(spec)
    assert not report.ok
    assert any("kernel" in loc for loc, _ in report.violations)


def test_structural_errors_raise():
    with pytest.raises(ModelError):
        build_example1(1)
    with pytest.raises(ModelError):
        build_example1(10, beta=1.5)
    with pytest.raises(ModelError):
        build_example1(10, beta=None, horizon=None)


def test_missing_field_reports_path():
    obj = build_example1(10).to_dict()
    del obj["kernel"]
    with pytest.raises(ModelError) as exc:
        spec_from_dict(obj)
    assert "kernel" in str(exc.value)


def test_json_is_plain():
    text = build_binary_coupled(4).canonical_json()
    assert json.loads(text)["cost"]["name"] == "congestion"
