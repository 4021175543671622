import numpy as np
import pytest

from bsdelab.errors import ConfigurationError
from bsdelab.noise import (JumpActivity, TimeGrid, compensated_increments,
                           load_ensemble, moment_checks, save_ensemble,
                           simulate, simulate_two_point)


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        TimeGrid(np.array([0.0, 0.5, 0.4]))
    with pytest.raises(ConfigurationError):
        TimeGrid(np.array([0.1, 0.5]))
    g = TimeGrid.uniform(4, 1.0)
    assert g.n_steps == 4 and g.horizon == 1.0 and g.max_step == pytest.approx(0.25)


def test_activity_validation():
    with pytest.raises(ConfigurationError):
        JumpActivity(np.array([[1.0]]), np.array([-0.5]))
    with pytest.raises(ConfigurationError):
        JumpActivity(np.array([[0.0]]), np.array([1.0]))       # zero mark
    with pytest.raises(ConfigurationError):
        JumpActivity(np.array([[1.0], [1.0]]), np.array([1.0, 2.0]))  # duplicate
    act = JumpActivity.from_list([(1.0, 0.5), (2.0, 1.5)])
    assert act.total_intensity == pytest.approx(2.0)


def test_empty_grid_gives_empty_arrays():
    ens = simulate(TimeGrid.uniform(0, 1.0), 2, JumpActivity.single(1.0), 7, seed=1)
    assert ens.dW.shape == (7, 0, 2)
    assert ens.jump_counts.shape == (7, 0, 1)


def test_empty_atoms_give_zero_counts():
    ens = simulate(TimeGrid.uniform(3, 1.0), 1, JumpActivity.empty(), 5, seed=1)
    assert ens.jump_counts.shape == (5, 3, 0)
    comp = compensated_increments(ens, JumpActivity.empty())
    assert comp.shape == (5, 3, 0)


def test_poisson_step_mean():
    # lambda = 2, dt = 0.5: mean count per step is 1.0; SE of the mean over
    # 1e5 paths is sqrt(var)/sqrt(n) = sqrt(1/1e5)
    act = JumpActivity.single(2.0)
    ens = simulate(TimeGrid.uniform(2, 1.0), 1, act, 100_000, seed=3)
    mean = ens.jump_counts[:, 0, 0].mean()
    assert abs(mean - 1.0) <= 5.0 * np.sqrt(1.0 / 100_000)


def test_compensated_increment_values():
    act = JumpActivity.single(1.0)
    grid = TimeGrid.uniform(1, 0.1)
    ens = simulate(grid, 1, act, 4, seed=9)
    comp = compensated_increments(ens, act)
    zero_mask = ens.jump_counts[:, 0, 0] == 0
    assert np.allclose(comp[zero_mask, 0, 0], -0.1)
    one_mask = ens.jump_counts[:, 0, 0] == 1
    assert np.allclose(comp[one_mask, 0, 0], 0.9)


def test_compensated_dimension_mismatch():
    ens = simulate(TimeGrid.uniform(2, 1.0), 1, JumpActivity.single(1.0), 3, seed=0)
    with pytest.raises(ConfigurationError):
        compensated_increments(ens, JumpActivity.empty())


def test_regeneration_is_bit_identical():
    act = JumpActivity.single(0.7)
    g = TimeGrid.uniform(5, 1.0)
    a = simulate(g, 2, act, 200, seed=42)
    b = simulate(g, 2, act, 200, seed=42)
    assert np.array_equal(a.dW, b.dW)
    assert np.array_equal(a.jump_counts, b.jump_counts)
    assert np.array_equal(a.aux, b.aux)


def test_path_prefix_sharing_across_sizes():
    act = JumpActivity.single(0.7)
    g = TimeGrid.uniform(5, 1.0)
    small = simulate(g, 1, act, 50, seed=11)
    big = simulate(g, 1, act, 120, seed=11)
    assert np.array_equal(big.dW[:50], small.dW)
    assert np.array_equal(big.aux[:50], small.aux)


def test_moments_and_independence_within_5_se():
    act = JumpActivity.single(1.0)
    ens = simulate(TimeGrid.uniform(4, 1.0), 1, act, 20_000, seed=5)
    checks = moment_checks(ens, act)
    assert checks["ok"], checks


def test_two_point_law():
    act = JumpActivity.single(0.8)
    grid = TimeGrid.uniform(4, 1.0)
    ens = simulate_two_point(grid, 1, act, 500, seed=2)
    assert set(np.unique(ens.jump_counts)) <= {0, 1}
    assert np.allclose(np.abs(ens.dW), 0.5)   # sqrt(0.25)
    with pytest.raises(ConfigurationError):
        simulate_two_point(TimeGrid.uniform(1, 2.0), 1, act, 10, seed=0)  # q >= 1


def test_file_round_trip(tmp_path):
    act = JumpActivity.single(0.6)
    ens = simulate(TimeGrid.uniform(3, 0.75), 2, act, 40, seed=77)
    path = tmp_path / "ens.bjl"
    save_ensemble(path, ens)
    assert path.read_bytes()[:4] == b"BJL1"
    back = load_ensemble(path)
    assert np.array_equal(back.dW, ens.dW)
    assert np.array_equal(back.jump_counts, ens.jump_counts)
    assert np.array_equal(back.aux, ens.aux)
    assert np.array_equal(back.grid.times, ens.grid.times)
    assert back.seed == ens.seed and back.law == ens.law


def test_truncated_file_rejected(tmp_path):
    act = JumpActivity.empty()
    ens = simulate(TimeGrid.uniform(2, 1.0), 1, act, 10, seed=1)
    path = tmp_path / "ens.bjl"
    save_ensemble(path, ens)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ConfigurationError):
        load_ensemble(path)
