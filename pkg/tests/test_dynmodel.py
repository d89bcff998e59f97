import numpy as np
import pytest

from contactdiff import data as D
from contactdiff import diffcore as dc
from contactdiff import dynmodel as M
from contactdiff import envs as E

from conftest import fd_grad, rel_err


@pytest.fixture(scope="module")
def hammer():
    demos = D.collect_demos(E.get_env("hammer1d"), 10, seed=0)
    model = M.train_dynamics(demos, M.DynTrainConfig(steps=400, hidden=(32, 32)))
    return demos, model


def test_training_fits_and_reports_holdout(hammer):
    demos, model = hammer
    assert np.isfinite(model.heldout_mse)
    assert model.loss_log[-1][1] < model.loss_log[0][1]
    # the held-out split is the last fifth of the episodes
    assert np.isclose(model.heldout_mse, M.one_step_mse(model, demos.episodes[8:]))


def test_predict_env_round_trips_units(hammer):
    demos, model = hammer
    ep = demos.episodes[0]
    n = model.normalizer
    direct = n.unnormalize_obs(model.predict(n.normalize_obs(ep.states), n.normalize_act(ep.actions)))
    assert np.allclose(model.predict_env(ep.states, ep.actions), direct)


def test_energy_gradient_matches_finite_differences(hammer):
    _, model = hammer
    rng = np.random.default_rng(0)
    traj = rng.uniform(-1, 1, size=(6, 4))
    g = M.dyn_energy_grad(model, traj)
    assert rel_err(g, fd_grad(lambda t: M.dyn_energy(model, t), traj.copy())) < 1e-6


def test_batched_energy_matches_single(hammer):
    _, model = hammer
    rng = np.random.default_rng(1)
    batch = rng.uniform(-1, 1, size=(3, 6, 4))
    e = M.dyn_energy(model, batch)
    assert e.shape == (3,)
    assert np.allclose(e, [M.dyn_energy(model, b) for b in batch])
    gb = M.dyn_energy_grad(model, batch)
    assert np.allclose(gb[1], M.dyn_energy_grad(model, batch[1]))


def test_energy_vanishes_on_model_rollouts(hammer):
    _, model = hammer
    s = np.zeros(3)
    rows = []
    for a in np.linspace(-0.5, 0.5, 5):
        rows.append(np.r_[a, s])
        s = model.predict(s, [a])[0]
    assert M.dyn_energy(model, np.array(rows)) < 1e-20


def test_shape_and_checkpoint_errors(tmp_path, hammer):
    _, model = hammer
    with pytest.raises(dc.ShapeError):
        M.dyn_energy(model, np.zeros((5, 3)))
    path = tmp_path / "dyn.cdm"
    model.save(path)
    back = M.DynamicsModel.load(path)
    assert back.heldout_mse == model.heldout_mse
    x = np.zeros((2, 3))
    assert np.array_equal(back.predict(x, np.zeros((2, 1))), model.predict(x, np.zeros((2, 1))))
    dc.save_model(tmp_path / "other.cdm", {"kind": "denoiser"}, model.params)
    with pytest.raises(dc.CheckpointError):
        M.DynamicsModel.load(tmp_path / "other.cdm")
