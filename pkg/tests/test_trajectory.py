import csv

import numpy as np

from rnnopt.trajectory import Trajectory, TrajectoryStep


def make_traj(parallel=False):
    traj = Trajectory(dim=2, seed=3, parallel=parallel)
    ys = [0.5, -0.2, 0.1]
    for t, y in enumerate(ys, start=1):
        traj.steps.append(TrajectoryStep(
            step=t, x=np.array([0.1 * t, 0.2 * t]), x_eval=np.array([0.1 * t, 0.2 * t]),
            y=y, o=0 if t == 1 else 1, wall_ns=100 + t,
            worker_id=0 if parallel else None,
            complete_idx=t if parallel else None,
            sim_time=float(t) if parallel else None,
        ))
    return traj


class TestMinObserved:
    def test_non_increasing(self):
        mins = make_traj().min_observed()
        np.testing.assert_array_equal(mins, [0.5, -0.2, -0.2])

    def test_length(self):
        assert len(make_traj().min_observed()) == 3


class TestCsv:
    def test_header_sequential(self, tmp_path):
        p = tmp_path / "t.csv"
        make_traj().write_csv(p)
        rows = list(csv.reader(open(p)))
        assert rows[0] == ["step", "x_1", "x_2", "y", "min_so_far", "wall_ns"]
        assert len(rows) == 4

    def test_header_parallel(self, tmp_path):
        p = tmp_path / "t.csv"
        make_traj(parallel=True).write_csv(p)
        header = list(csv.reader(open(p)))[0]
        assert header[-4:] == ["worker_id", "issue_idx", "complete_idx", "sim_time"]

    def test_wall_zeroed_without_timing(self, tmp_path):
        p = tmp_path / "t.csv"
        make_traj().write_csv(p)
        for row in list(csv.reader(open(p)))[1:]:
            assert row[5] == "0"

    def test_wall_written_with_timing(self, tmp_path):
        p = tmp_path / "t.csv"
        make_traj().write_csv(p, timing=True)
        walls = [row[5] for row in list(csv.reader(open(p)))[1:]]
        assert walls == ["101", "102", "103"]

    def test_floats_round_trip(self, tmp_path):
        p = tmp_path / "t.csv"
        traj = make_traj()
        traj.steps[0].y = 0.1 + 0.2  # not exactly representable in decimal
        traj.write_csv(p)
        rows = list(csv.reader(open(p)))
        assert float(rows[1][3]) == traj.steps[0].y
