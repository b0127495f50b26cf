import numpy as np
import pytest

from mmvmlab.data import MultimodalDataset
from mmvmlab.distributions import RngStream
from mmvmlab.errors import ConfigError, NumericError
from mmvmlab.model import ModelConfig, init_model
from mmvmlab.training import (
    ACCEPTANCE_BETAS,
    BETA_GRID,
    RunConfig,
    TrainingDiverged,
    build_and_train,
    dataset_mse_bound,
    dataset_objective,
    minibatches,
    train,
)


def cfg(**kw):
    base = dict(strategy="mmvm", beta=0.5, seed=0, epochs=2, batch_size=32, hidden=(8,))
    base.update(kw)
    return RunConfig(**base)


def test_beta_grids():
    assert BETA_GRID[0] == 2.0 ** -8 and BETA_GRID[-1] == 8.0 and len(BETA_GRID) == 12
    assert len(ACCEPTANCE_BETAS) == 6 and set(ACCEPTANCE_BETAS) <= set(BETA_GRID)


@pytest.mark.parametrize("kw", [dict(strategy="vamp"), dict(beta=-1.0), dict(epochs=-1), dict(lr=0.0),
                                dict(batch_size=0), dict(data={"n_classes": 1})])
def test_run_config_validation(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)


def test_run_config_round_trip():
    c = cfg(data={"n_train": 10})
    assert RunConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"colour": 1})


def test_minibatches_cover_every_index_once():
    idx = np.concatenate(list(minibatches(103, 10, RngStream(0), 0)))
    assert sorted(idx) == list(range(103))
    other = np.concatenate(list(minibatches(103, 10, RngStream(0), 1)))
    assert not np.array_equal(idx, other)


def test_one_trace_entry_per_step(small_data):
    train_ds, _ = small_data
    res = build_and_train(train_ds, cfg())
    steps_per_epoch = -(-len(train_ds) // 32)
    assert res.steps == len(res.trace) == 2 * steps_per_epoch
    assert [e["step"] for e in res.trace] == list(range(res.steps))
    assert res.state.step == res.steps


def test_beta_zero_rate_column_zero(small_data):
    res = build_and_train(small_data[0], cfg(beta=0.0))
    assert all(e["rate"] == 0.0 for e in res.trace)


def test_training_is_deterministic(small_data):
    a = build_and_train(small_data[0], cfg(strategy="moe"))
    b = build_and_train(small_data[0], cfg(strategy="moe"))
    assert a.model.params.to_bytes() == b.model.params.to_bytes()
    assert a.trace == b.trace


def test_training_improves_objective(small_data):
    train_ds, _ = small_data
    c = cfg(epochs=30, lr=5e-3)
    model = init_model(c.model_config(train_ds.dims), RngStream(0))
    before = dataset_objective(model, train_ds, c.beta, None)
    train(model, train_ds, c)
    assert dataset_objective(model, train_ds, c.beta, None) > before


def test_autoencoder_objective_has_no_rate(small_data):
    res = build_and_train(small_data[0], cfg(epochs=1), objective="autoencoder")
    assert all(e["rate"] == 0.0 and e["beta"] == 0.0 for e in res.trace)
    assert np.isfinite(dataset_mse_bound(res.model, small_data[0]))


def test_independent_equals_sum_of_unimodal_runs(small_data):
    train_ds, _ = small_data
    c = cfg(strategy="independent", epochs=3)
    joint = build_and_train(train_ds, c)
    parts = []
    for m, name in enumerate(("m0", "m1")):
        mc = ModelConfig(**{**c.model_config(train_ds.dims[m:m + 1]).to_dict(), "modality_names": [name]})
        model = init_model(mc, RngStream(c.seed))
        parts.append(train(model, train_ds.select([m]), c, RngStream(c.seed)).trace)
    for step, entry in enumerate(joint.trace):
        assert abs(entry["total"] - sum(p[step]["total"] for p in parts)) <= 1e-10


def test_divergence_keeps_last_finite_state(small_data):
    train_ds, _ = small_data
    bad = MultimodalDataset([f * 1e200 for f in train_ds.features], train_ds.labels, train_ds.n_classes)
    c = cfg(strategy="independent")
    model = init_model(c.model_config(bad.dims), RngStream(0))
    start = model.params.to_bytes()
    with pytest.raises(TrainingDiverged) as exc:
        with np.errstate(all="ignore"):
            train(model, bad, c)
    assert isinstance(exc.value, NumericError)
    assert exc.value.step == 0 and exc.value.model.params.to_bytes() == start


def test_dims_mismatch_rejected(small_data):
    c = cfg()
    model = init_model(ModelConfig(input_dims=(9, 9)), RngStream(0))
    with pytest.raises(ConfigError):
        train(model, small_data[0], c)
