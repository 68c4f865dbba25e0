"""File formats: TUM trajectories, IMU CSV, observation CSV, dataset folders.

TUM lines are `timestamp tx ty tz qx qy qz qw` with 9 significant digits.
IMU and observation CSVs use shortest round-trip float formatting so a
re-imported dataset is bit-identical to the in-memory one.
"""
from __future__ import annotations

import csv
import os
from dataclasses import asdict

import yaml

from . import geometry as geo
from .imu import ImuSample
from .simulate import (Dataset, NoiseSpec, ObservationRecord, SceneSpec,
                       TrajectorySpec)

import numpy as np

GROUND_TRUTH_FILE = "ground_truth.tum"
IMU_FILE = "imu.csv"
OBSERVATIONS_FILE = "observations.csv"
DATASET_META_FILE = "dataset.yaml"


def write_tum(path, trajectory) -> None:
    """trajectory: iterable of (timestamp, Pose)."""
    with open(path, "w") as f:
        for t, pose in trajectory:
            q = geo.quat_canonical(pose.q)
            f.write("%.9g %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n"
                    % (t, pose.t[0], pose.t[1], pose.t[2], q[1], q[2], q[3], q[0]))


def read_tum(path) -> list[tuple[float, geo.Pose]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            out.append((t, geo.Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    return out


def write_imu_csv(path, samples) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "gx", "gy", "gz", "ax", "ay", "az"])
        for s in samples:
            w.writerow([repr(float(s.timestamp))]
                       + [repr(float(x)) for x in s.gyro]
                       + [repr(float(x)) for x in s.accel])


def read_imu_csv(path) -> list[ImuSample]:
    samples = []
    with open(path) as f:
        r = csv.reader(f)
        header = next(r, None)
        if header is None or header[0] != "timestamp":
            raise ValueError(f"{path}: missing IMU CSV header")
        for lineno, row in enumerate(r, 2):
            if not row:
                continue
            if len(row) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(row)}")
            vals = [float(x) for x in row]
            samples.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return samples


def write_observations_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kf_index", "timestamp", "landmark_id", "u", "v", "depth"])
        for rec in records:
            w.writerow([rec.kf_index, repr(float(rec.timestamp)), rec.landmark_id,
                        repr(float(rec.u)), repr(float(rec.v)),
                        "" if rec.depth is None else repr(float(rec.depth))])


def read_observations_csv(path) -> list[ObservationRecord]:
    records = []
    with open(path) as f:
        r = csv.reader(f)
        header = next(r, None)
        if header is None or header[0] != "kf_index":
            raise ValueError(f"{path}: missing observations CSV header")
        for lineno, row in enumerate(r, 2):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                depth = None if row[5] == "" else float(row[5])
                records.append(ObservationRecord(int(row[0]), float(row[1]),
                                                 int(row[2]), float(row[3]),
                                                 float(row[4]), depth))
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return records


def export_dataset(dataset: Dataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_tum(os.path.join(out_dir, GROUND_TRUTH_FILE), dataset.ground_truth)
    write_imu_csv(os.path.join(out_dir, IMU_FILE), dataset.imu)
    write_observations_csv(os.path.join(out_dir, OBSERVATIONS_FILE), dataset.observations)
    meta = {
        "trajectory": asdict(dataset.trajectory_spec),
        "scene": asdict(dataset.scene_spec),
        "noise": asdict(dataset.noise_spec),
        "landmarks": [[float(x) for x in p] for p in dataset.landmarks],
    }
    with open(os.path.join(out_dir, DATASET_META_FILE), "w") as f:
        yaml.safe_dump(meta, f, sort_keys=True)


def import_dataset(in_dir) -> Dataset:
    with open(os.path.join(in_dir, DATASET_META_FILE)) as f:
        meta = yaml.safe_load(f)
    scene = SceneSpec(**{**meta["scene"],
                         "box_min": tuple(meta["scene"]["box_min"]),
                         "box_max": tuple(meta["scene"]["box_max"])})
    return Dataset(
        ground_truth=read_tum(os.path.join(in_dir, GROUND_TRUTH_FILE)),
        imu=read_imu_csv(os.path.join(in_dir, IMU_FILE)),
        observations=read_observations_csv(os.path.join(in_dir, OBSERVATIONS_FILE)),
        landmarks=np.array(meta["landmarks"]),
        trajectory_spec=TrajectorySpec(**meta["trajectory"]),
        scene_spec=scene,
        noise_spec=NoiseSpec(**meta["noise"]),
    )
