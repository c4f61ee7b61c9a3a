import json

import numpy as np
import pytest

from gasforecast.models import (
    AnnBaseline, CheckpointError, HybridModel, LinearRegressionModel, SingularMatrixError,
    checkpoint_dict, checkpoint_from_dict, hybrid_forward, hybrid_parameter_count, linreg_fit,
    load_checkpoint, model_init, predict, same_parameters, save_checkpoint,
)
from gasforecast.rng import SeededRng
from gasforecast.tensor import ShapeError, Tensor

from oracles import gradcheck, ols_ref


def test_hybrid_output_shape():
    model = model_init("hybrid", 9, seed=0)
    out = predict(model, np.zeros((5, 1, 9)))
    assert out.shape == (5,)
    assert np.all(np.isfinite(out))


def test_hybrid_parameter_count():
    model = model_init("hybrid", 9, seed=0)
    assert model.num_parameters() == 31521 == hybrid_parameter_count(9)
    for f in (1, 3, 12):
        assert model_init("hybrid", f, seed=1).num_parameters() == 256 * f + 29217


def test_hybrid_zero_parameters_reduce_to_head_of_norm_shift():
    model = model_init("hybrid", 3, seed=0)
    shift = np.linspace(-1.0, 1.0, 32)
    head_w = np.random.default_rng(0).normal(size=(32, 1))
    values = {name: np.zeros(p.shape) for name, p in model.parameters().items()}
    values.update({"transformer.norm2.shift": shift, "head.weights": head_w, "head.bias": np.array([0.25])})
    model = model.with_parameters(values)
    x = np.random.default_rng(1).normal(size=(4, 1, 3))
    # every activation upstream of norm2 is zero, so norm2 emits its shift
    expected = float(shift @ head_w[:, 0] + 0.25)
    assert np.allclose(predict(model, x), expected, atol=1e-12)


def test_hybrid_gradcheck_small():
    model = HybridModel.init(SeededRng(5), 3, hidden=4, filters=4, kernel_size=2, heads=2, ffn_dim=4)
    x = np.random.default_rng(2).normal(size=(4, 1, 3))
    assert gradcheck(model, hybrid_forward, [x], max_coords=10) < 1e-4


def test_hybrid_rejects_wrong_input():
    model = model_init("hybrid", 3, seed=0)
    with pytest.raises(ShapeError):
        predict(model, np.zeros((2, 1, 4)))
    with pytest.raises(ShapeError):
        predict(model, np.zeros((2, 3)))


def test_batch_permutation_equivariance():
    model = model_init("hybrid", 4, seed=3)
    x = np.random.default_rng(3).normal(size=(6, 1, 4))
    perm = np.array([3, 0, 5, 1, 4, 2])
    assert np.allclose(predict(model, x)[perm], predict(model, x[perm]), atol=1e-14)


def test_no_state_leaks_between_calls():
    model = model_init("hybrid", 4, seed=3)
    x = np.random.default_rng(4).normal(size=(3, 1, 4))
    first = predict(model, x)
    predict(model, np.random.default_rng(5).normal(size=(7, 1, 4)))
    assert np.array_equal(first, predict(model, x))


def test_model_init_deterministic_and_validated():
    for kind in ("hybrid", "ann", "linreg"):
        assert same_parameters(model_init(kind, 5, 11), model_init(kind, 5, 11))
        assert not same_parameters(model_init(kind, 5, 11), model_init(kind, 5, 12))
    with pytest.raises(ValueError):
        model_init("svm", 3, 0)
    with pytest.raises(ValueError):
        model_init("ann", 0, 0)


def test_ann_baseline_topology():
    model = model_init("ann", 9, 0)
    assert [layer.weights.shape for layer in model.layers] == [(9, 32), (32, 32), (32, 1)]
    assert predict(model, np.zeros((3, 1, 9))).shape == (3,)


# ordinary least squares

def test_linreg_exact_line():
    x = np.arange(10.0).reshape(-1, 1)
    model = linreg_fit(x, 2 * x[:, 0] + 1)
    assert model.coefficients.data[0] == pytest.approx(2.0, abs=1e-10)
    assert model.intercept.data[0] == pytest.approx(1.0, abs=1e-10)


def test_linreg_constant_target():
    x = np.random.default_rng(0).normal(size=(20, 2))
    model = linreg_fit(x, np.full(20, 4.0))
    assert np.allclose(model.coefficients.data, 0.0, atol=1e-10)
    assert model.intercept.data[0] == pytest.approx(4.0, abs=1e-10)


def test_linreg_matches_elimination_oracle_and_residuals_orthogonal():
    r = np.random.default_rng(1)
    X, y = r.normal(size=(10, 3)), r.normal(size=10)
    model = linreg_fit(X, y)
    coef, icpt = ols_ref(X, y)
    assert np.allclose(model.coefficients.data, coef, atol=1e-10)
    assert model.intercept.data[0] == pytest.approx(icpt, abs=1e-10)
    resid = y - predict(model, X)
    A = np.hstack([X, np.ones((10, 1))])
    assert np.max(np.abs(A.T @ resid)) < 1e-9


def test_linreg_accepts_3d_input():
    r = np.random.default_rng(2)
    X, y = r.normal(size=(12, 1, 2)), r.normal(size=12)
    assert np.allclose(predict(linreg_fit(X, y), X), predict(linreg_fit(X[:, 0], y), X[:, 0]))


def test_linreg_singular_design_names_condition_number():
    x = np.random.default_rng(3).normal(size=(8, 1))
    X = np.hstack([x, 2 * x])
    with pytest.raises(SingularMatrixError, match="condition number"):
        linreg_fit(X, x[:, 0])
    with pytest.raises(SingularMatrixError):
        linreg_fit(np.ones((8, 1)), x[:, 0])


def test_linreg_too_few_rows():
    with pytest.raises(ValueError):
        linreg_fit(np.ones((2, 2)), np.ones(2))


# checkpoints

@pytest.mark.parametrize("kind", ["hybrid", "ann", "linreg"])
def test_checkpoint_round_trip_bit_exact(tmp_path, kind):
    model = model_init(kind, 4, seed=9)
    path = tmp_path / "m.json"
    save_checkpoint(path, model, seed=9, metadata={"feature_names": list("abcd")})
    loaded = load_checkpoint(path)
    assert type(loaded.model) is type(model)
    assert same_parameters(model, loaded.model)
    assert loaded.seed == 9 and loaded.metadata["feature_names"] == list("abcd")
    x = np.random.default_rng(0).normal(size=(3, 1, 4))
    assert np.array_equal(predict(model, x), predict(loaded.model, x))
    save_checkpoint(tmp_path / "again.json", loaded.model, seed=9, metadata=loaded.metadata)
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_nondefault_dims_round_trip():
    model = HybridModel.init(SeededRng(1), 2, hidden=4, filters=4, heads=2, ffn_dim=6)
    loaded = checkpoint_from_dict(json.loads(json.dumps(checkpoint_dict(model, 1))))
    assert same_parameters(model, loaded.model)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
    doc = checkpoint_dict(model_init("linreg", 3, 0), 0)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_dict({**doc, "version": 99})
    with pytest.raises(CheckpointError):
        checkpoint_from_dict({**doc, "format": "other"})
    broken = json.loads(json.dumps(doc))
    broken["parameters"]["coefficients"]["shape"] = [4]
    with pytest.raises(CheckpointError):
        checkpoint_from_dict(broken)
    del broken["parameters"]["intercept"]
    with pytest.raises(CheckpointError, match="missing"):
        checkpoint_from_dict(broken)


def test_linear_model_direct_prediction():
    model = LinearRegressionModel(Tensor([1.0, -2.0]), Tensor([0.5]))
    assert predict(model, np.array([[1.0, 1.0], [0.0, 2.0]])).tolist() == [-0.5, -3.5]
    assert isinstance(model_init("ann", 2, 0), AnnBaseline)
