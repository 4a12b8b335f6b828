import json
import math

import numpy as np
import pytest

from restraj.dataset import (
    DatasetFormatError,
    GridConfig,
    ResidualDataset,
    assign_split,
    build_dataset,
    enumerate_specs,
    load_dataset,
    load_grid,
    parse_number,
    samples_per_trajectory,
    save_dataset,
    unfiltered_count,
)
from restraj.dynamics import double_integrator, pendulum
from restraj.ocp import TranscriptionConfig, solve_ocp
from restraj.prior import ProblemSpec, cubic_prior


def test_parse_number_expressions():
    assert parse_number("3*pi/4") == pytest.approx(3 * math.pi / 4)
    assert parse_number("-pi/16") == pytest.approx(-math.pi / 16)
    assert parse_number(2) == 2.0
    with pytest.raises(ValueError):
        parse_number("__import__('os')")


def test_pendulum_grid_gives_eight_trajectories(configs):
    grid = load_grid(configs / "grid_pendulum.json")
    assert unfiltered_count(grid) == 2 * 4 * 4
    specs = enumerate_specs(grid)
    assert len(specs) == 8
    for s in specs:
        assert abs(s.qf[0]) > abs(s.q0[0])
        assert abs(s.qf[0] - s.q0[0]) > math.pi / 16


def test_two_link_grid_gives_144_trajectories(configs):
    grid = load_grid(configs / "grid_two_link.json")
    assert unfiltered_count(grid) == 3 * 1 * 4 * 4 * 4
    specs = enumerate_specs(grid)
    assert len(specs) == 144
    assert sum(samples_per_trajectory(s.tf, grid.rate) for s in specs) == 43344


def test_unfiltered_count_is_product_of_counts():
    grid = GridConfig.from_dict({"tf": {"range": [1, 2], "count": 3},
                                 "q0": [{"range": [0, 1], "count": 2}],
                                 "qf": [{"range": [0, 1], "count": 5}]})
    assert unfiltered_count(grid) == len(enumerate_specs(grid)) == 30


def test_empty_grid_after_filtering_is_an_error():
    grid = GridConfig.from_dict({"tf": {"range": [1, 1], "count": 1},
                                 "q0": [{"range": [0, 0], "count": 1}],
                                 "qf": [{"range": [0, 0], "count": 1}],
                                 "filters": [{"name": "increasing"}]})
    with pytest.raises(ValueError):
        enumerate_specs(grid)


def test_pendulum_dataset_layout(pendulum_dataset):
    ds = pendulum_dataset
    assert len(ds.specs) == 8
    assert len(ds) == 4 * 101 + 4 * 151
    assert ds.inputs().shape == (len(ds), 4)
    for i in range(8):
        xi, r = ds.residual_of(i)
        assert xi[0] == 0.0 and xi[-1] == 1.0
        assert np.abs(r[[0, -1]]).max() <= 1e-8
    assert not ds.meta["skipped"]


def test_split_is_by_trajectory_and_exhaustive(pendulum_dataset):
    ds = pendulum_dataset
    train, test = set(ds.trajectories("train")), set(ds.trajectories("test"))
    assert train.isdisjoint(test)
    assert train | test == set(range(len(ds.specs)))
    assert len(test) == 2
    for part in ("train", "test"):
        rows = ds.rows(part)
        assert set(ds.traj[rows]) == (train if part == "train" else test)


@pytest.mark.parametrize("n", [1, 2, 5, 10, 144])
def test_assign_split_fractions(n):
    split = assign_split(n, 0.2, seed=3)
    assert len(split) == n
    n_test = split.count("test")
    assert n_test == (0 if n == 1 else min(max(round(0.2 * n), 1), n - 1))
    assert assign_split(n, 0.2, seed=3) == split


def test_residual_plus_prior_reproduces_ocp_positions(pendulum_dataset):
    ds = pendulum_dataset
    spec = ds.specs[3]
    sol = solve_ocp(pendulum(), spec, TranscriptionConfig(rate=100))
    xi, r = ds.residual_of(3)
    np.testing.assert_allclose(cubic_prior(spec, xi) + r, sol.trajectory.q, rtol=0, atol=1e-12)


def test_free_model_residuals_are_tiny(configs):
    ds = build_dataset(double_integrator(), load_grid(configs / "grid_pendulum.json"))
    assert np.abs(ds.r).max() <= 1e-4


def test_dataset_is_deterministic(configs, pendulum_dataset):
    again = build_dataset(pendulum(), load_grid(configs / "grid_pendulum.json"))
    assert again == pendulum_dataset


def test_round_trip_is_bit_exact(tmp_path, pendulum_dataset):
    save_dataset(pendulum_dataset, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back == pendulum_dataset
    assert np.array_equal(back.r, pendulum_dataset.r)


def test_empty_dataset_round_trips(tmp_path):
    empty = ResidualDataset([], [], [], np.empty((0, 2)), [], {"n": 2})
    save_dataset(empty, tmp_path / "e")
    back = load_dataset(tmp_path / "e")
    assert back == empty and back.n == 2


def test_corrupted_files_raise_format_errors(tmp_path, pendulum_dataset):
    d = save_dataset(pendulum_dataset, tmp_path / "d")
    lines = (d / "data.csv").read_text().splitlines()
    (d / "data.csv").write_text("\n".join(["traj,xi,t_f,q0_1,qf_1,r_1"] + lines[1:]) + "\n")
    with pytest.raises(DatasetFormatError, match="header"):
        load_dataset(d)
    (d / "data.csv").write_text("\n".join(lines[:5] + ["0,0.5,oops"]) + "\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(d)
    (d / "data.csv").write_text("\n".join(lines) + "\n")
    meta = json.loads((d / "meta.json").read_text())
    del meta["specs"]
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetFormatError):
        load_dataset(d)


def test_subset_and_extension(pendulum_dataset):
    ds = pendulum_dataset
    test = ds.subset("test")
    assert len(test.specs) == 2 and set(test.split) == {"test"}
    assert len(test) == len(ds.rows("test"))
    spec = ProblemSpec(1.2, [0.0], [0.5])
    xi = np.linspace(0, 1, 5)
    bigger = ds.extended([spec], [xi], [np.zeros(5)])
    assert len(bigger.specs) == 9 and len(bigger) == len(ds) + 5
    assert bigger.split[-1] == "train"


def test_parallel_build_matches_serial(configs, pendulum_dataset):
    par = build_dataset(pendulum(), load_grid(configs / "grid_pendulum.json"), workers=2)
    assert par == pendulum_dataset
