import numpy as np
import pytest

from tpidm import experiment
from tpidm.data import ScaleParams
from tpidm.diffusion import make_linear_schedule
from tpidm.errors import ContractError, NumericError
from tpidm.physics import LotkaVolterra, PhysicsTerm, WeightSchedule
from tpidm.seqnet import DenoiserConfig, init_params
from tpidm.training import DivergedError, TrainConfig, train


@pytest.fixture(scope="module")
def lv_windows():
    from tpidm import config as cfgmod
    from conftest import TINY_INI

    cfg = cfgmod.loads(TINY_INI)
    prep = experiment.prepare(experiment.build_series(cfg), cfg)
    return cfg, prep


def _run(cfg, prep, physics=True, epochs=2, seed=0, lr=1e-4):
    model = init_params(experiment.denoiser_config(cfg, 2), seed)
    term = experiment.physics_term(cfg, prep.scale, prep.series.dt) if physics else None
    rows = []
    result = train(
        model, prep.train.windows, experiment.noise_schedule(cfg), term, TrainConfig(epochs=epochs, lr=lr, seed=seed, batch_size=64),
        on_epoch=lambda *r: rows.append(r),
    )
    return result, rows


def test_training_is_bit_reproducible(lv_windows):
    cfg, prep = lv_windows
    a, rows_a = _run(cfg, prep)
    b, rows_b = _run(cfg, prep)
    np.testing.assert_array_equal(a.model.params, b.model.params)
    assert rows_a == rows_b
    c, _ = _run(cfg, prep, seed=1)
    assert not np.array_equal(a.model.params, c.model.params)


def test_epoch_log_and_physics_term(lv_windows):
    cfg, prep = lv_windows
    result, rows = _run(cfg, prep)
    assert [r[0] for r in rows] == [1, 2] and result.epochs == rows
    for _, l_dm, l_pi, total in rows:
        assert l_pi > 0 and total == pytest.approx(l_dm + l_pi) and total >= l_dm
    _, plain = _run(cfg, prep, physics=False)
    assert all(r[2] == 0.0 and r[3] == r[1] for r in plain)
    n_batches = -(-len(prep.train) // 64)
    assert result.steps == 2 * n_batches


def test_checkpointed_parameters_are_float32(lv_windows):
    cfg, prep = lv_windows
    result, _ = _run(cfg, prep, epochs=1)
    p = result.model.params
    np.testing.assert_array_equal(p, p.astype(np.float32).astype(np.float64))


def test_loss_decreases_with_training(lv_windows):
    cfg, prep = lv_windows
    _, rows = _run(cfg, prep, physics=False, epochs=15, lr=1e-2)
    assert rows[-1][1] < 0.8 * rows[0][1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_partial_result():
    cfg = DenoiserConfig(window=5, encoder=(3,), decoder=(2,))
    windows = np.full((4, 5, 2), 1e300)

    term = PhysicsTerm(LotkaVolterra(), WeightSchedule.default("log-sigmoid"), ScaleParams([0.0, 0.0], [1.0, 1.0]), 0.01)
    with pytest.raises(DivergedError) as info:
        train(init_params(cfg, 0), windows, make_linear_schedule(), term, TrainConfig(epochs=1))
    assert isinstance(info.value, NumericError)
    assert info.value.result.steps == 0


def test_bad_inputs():
    cfg = DenoiserConfig(window=5, encoder=(3,), decoder=(2,))
    with pytest.raises(ContractError):
        train(init_params(cfg, 0), np.zeros((0, 5, 2)), make_linear_schedule(), None, TrainConfig(epochs=1))
    with pytest.raises(ContractError):
        TrainConfig(lr=-1.0)
