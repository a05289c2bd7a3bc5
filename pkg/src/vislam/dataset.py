"""Dataset ingestion: EuRoC-style directory layout, GNSS CSV, and the merged
time-ordered sensor stream consumed by the pipeline.

Nanosecond integer timestamps are converted to seconds as 64-bit floats
relative to the stream's first timestamp, so large epochs lose no precision.
The raw nanosecond stamps are kept on the events for lossless re-export.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import MalformedRow, MissingFile, NonMonotonicTimestamp
from .evaluation import Trajectory
from .fusion import GnssMeasurement
from .geometry import CameraModel, RigidTransform, UnitQuaternion
from .tracker import CalibrationSet, ImuNoise, ImuSample


@dataclass(frozen=True)
class FrameObservation:
    """Ground-truth feature observation (simulator tier that bypasses images)."""

    landmark_id: int
    camera_index: int
    pixel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))


@dataclass
class StereoFramePair:
    """One stereo capture; images load lazily from disk, or the frame carries
    direct observations when produced by the simulator."""

    timestamp: float
    timestamp_ns: int | None = None
    left_path: str | None = None
    right_path: str | None = None
    left_image: np.ndarray | None = None
    right_image: np.ndarray | None = None
    observations: list | None = None

    def images(self):
        if self.left_image is None and self.left_path is not None:
            self.left_image = load_gray_image(self.left_path)
            self.right_image = load_gray_image(self.right_path)
        return self.left_image, self.right_image


def load_gray_image(path) -> np.ndarray:
    """8-bit grayscale regardless of the source channel layout."""
    from PIL import Image

    if not os.path.exists(path):
        raise MissingFile(str(path))
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


@dataclass
class SensorStream:
    """Merged, time-sorted IMU + stereo events. Ties release IMU first so
    propagation always precedes the visual update at the same instant."""

    imu: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    origin_ns: int = 0
    imu_ns: list | None = None  # raw stamps for lossless re-export

    @property
    def events(self):
        merged = [(s.timestamp, 0, i, s) for i, s in enumerate(self.imu)]
        merged += [(f.timestamp, 1, i, f) for i, f in enumerate(self.frames)]
        merged.sort(key=lambda e: e[:3])
        return [e[3] for e in merged]

    def __len__(self):
        return len(self.imu) + len(self.frames)


@dataclass
class LoadedDataset:
    stream: SensorStream
    calibration: CalibrationSet
    ground_truth: Trajectory | None
    root: str


def _read_csv_rows(path, expected_fields, kind):
    if not os.path.exists(path):
        raise MissingFile(str(path))
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != expected_fields:
                raise MalformedRow(path, lineno,
                                   f"{kind}: expected {expected_fields} fields, "
                                   f"got {len(parts)}")
            rows.append((lineno, parts))
    return rows


def _parse_ns(path, lineno, token):
    try:
        return int(token)
    except ValueError as exc:
        raise MalformedRow(path, lineno, f"bad timestamp {token!r}") from exc


def _parse_floats(path, lineno, tokens):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise MalformedRow(path, lineno, str(exc)) from exc


def _load_camera_yaml(path) -> tuple[CameraModel, RigidTransform]:
    if not os.path.exists(path):
        raise MissingFile(str(path))
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    fu, fv, cu, cv = doc["intrinsics"]
    width, height = doc["resolution"]
    dist = list(doc.get("distortion_coefficients", [0, 0, 0, 0]))[:4]
    while len(dist) < 4:
        dist.append(0.0)
    cam = CameraModel(fx=fu, fy=fv, cx=cu, cy=cv, width=int(width), height=int(height),
                      distortion=tuple(dist))
    t_bs = np.asarray(doc["T_BS"]["data"], dtype=float).reshape(4, 4)
    # T_BS maps sensor -> body; the tracker wants body(IMU) -> camera
    imu_to_cam = RigidTransform.from_matrix(t_bs).inverse()
    return cam, imu_to_cam


def _load_imu_yaml(path) -> ImuNoise:
    if not os.path.exists(path):
        return ImuNoise()
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return ImuNoise(
        gyro_density=float(doc.get("gyroscope_noise_density", 0.0)),
        gyro_walk=float(doc.get("gyroscope_random_walk", 0.0)),
        accel_density=float(doc.get("accelerometer_noise_density", 0.0)),
        accel_walk=float(doc.get("accelerometer_random_walk", 0.0)),
    )


def load_euroc(root) -> LoadedDataset:
    """Load an EuRoC-layout dataset: cam0/, cam1/, imu0/ with data.csv files,
    sensor.yaml calibration, and ground truth when present. Events come out
    merged and time-sorted; non-monotonic files are rejected."""
    root = Path(root)
    if (root / "mav0").is_dir():
        root = root / "mav0"
    if not root.is_dir():
        raise MissingFile(str(root))

    imu_csv = root / "imu0" / "data.csv"
    imu_rows = _read_csv_rows(imu_csv, 7, "imu")
    if not imu_rows:
        raise MalformedRow(imu_csv, 0, "no IMU rows")

    cam_rows = {}
    for cam in ("cam0", "cam1"):
        cam_rows[cam] = _read_csv_rows(root / cam / "data.csv", 2, cam)

    imu_ns = [_parse_ns(imu_csv, ln, parts[0]) for ln, parts in imu_rows]
    first_ns = imu_ns[0]
    for cam in ("cam0", "cam1"):
        if cam_rows[cam]:
            ln, parts = cam_rows[cam][0]
            first_ns = min(first_ns, _parse_ns(root / cam / "data.csv", ln, parts[0]))

    stream = SensorStream(origin_ns=first_ns)
    prev = None
    for (lineno, parts), ns in zip(imu_rows, imu_ns):
        if prev is not None and ns <= prev:
            raise NonMonotonicTimestamp(f"{imu_csv}:{lineno}: {ns} after {prev}")
        prev = ns
        vals = _parse_floats(imu_csv, lineno, parts[1:])
        stream.imu.append(ImuSample(
            timestamp=(ns - first_ns) * 1e-9,
            angular_velocity=vals[0:3],
            linear_acceleration=vals[3:6],
        ))
    stream.imu_ns = imu_ns

    right_by_ns = {}
    for lineno, parts in cam_rows["cam1"]:
        ns = _parse_ns(root / "cam1" / "data.csv", lineno, parts[0])
        right_by_ns[ns] = parts[1]
    prev = None
    for lineno, parts in cam_rows["cam0"]:
        ns = _parse_ns(root / "cam0" / "data.csv", lineno, parts[0])
        if prev is not None and ns <= prev:
            raise NonMonotonicTimestamp(f"cam0 data.csv:{lineno}: {ns} after {prev}")
        prev = ns
        if ns not in right_by_ns:
            continue  # unpaired capture
        stream.frames.append(StereoFramePair(
            timestamp=(ns - first_ns) * 1e-9,
            timestamp_ns=ns,
            left_path=str(root / "cam0" / "data" / parts[1]),
            right_path=str(root / "cam1" / "data" / right_by_ns[ns]),
        ))

    cam0, imu_to_cam0 = _load_camera_yaml(root / "cam0" / "sensor.yaml")
    cam1, imu_to_cam1 = _load_camera_yaml(root / "cam1" / "sensor.yaml")
    calibration = CalibrationSet(
        cameras=(cam0, cam1),
        imu_to_cam=(imu_to_cam0, imu_to_cam1),
        imu_noise=_load_imu_yaml(root / "imu0" / "sensor.yaml"),
    )

    ground_truth = None
    gt_csv = root / "state_groundtruth_estimate0" / "data.csv"
    if gt_csv.exists():
        ts, positions, quats = [], [], []
        with open(gt_csv) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) < 8:
                    raise MalformedRow(gt_csv, lineno, f"expected >= 8 fields, got {len(parts)}")
                ns = _parse_ns(gt_csv, lineno, parts[0])
                vals = _parse_floats(gt_csv, lineno, parts[1:8])
                ts.append((ns - first_ns) * 1e-9)
                positions.append(vals[0:3])
                quats.append(vals[3:7])  # EuRoC stores w,x,y,z
        if ts:
            ground_truth = Trajectory(np.array(ts), frame="world",
                                      positions=np.array(positions),
                                      quaternions_wxyz=np.array(quats))
    return LoadedDataset(stream=stream, calibration=calibration,
                         ground_truth=ground_truth, root=str(root))


def save_stream_csv(stream: SensorStream, out_dir):
    """Re-export a stream in the same CSV layout (no images); loading the
    result yields an identical stream."""
    out = Path(out_dir)
    (out / "imu0").mkdir(parents=True, exist_ok=True)
    (out / "cam0" / "data").mkdir(parents=True, exist_ok=True)
    (out / "cam1" / "data").mkdir(parents=True, exist_ok=True)
    imu_ns = stream.imu_ns
    with open(out / "imu0" / "data.csv", "w") as fh:
        fh.write("#timestamp [ns],w_x,w_y,w_z,a_x,a_y,a_z\n")
        for i, s in enumerate(stream.imu):
            ns = imu_ns[i] if imu_ns else stream.origin_ns + round(s.timestamp * 1e9)
            w, a = s.angular_velocity, s.linear_acceleration
            vals = ",".join(repr(float(v)) for v in (*w, *a))
            fh.write(f"{ns},{vals}\n")
    for cam, attr in (("cam0", "left_path"), ("cam1", "right_path")):
        with open(out / cam / "data.csv", "w") as fh:
            fh.write("#timestamp [ns],filename\n")
            for f in stream.frames:
                ns = f.timestamp_ns if f.timestamp_ns is not None \
                    else stream.origin_ns + round(f.timestamp * 1e9)
                name = os.path.basename(getattr(f, attr) or f"{ns}.png")
                fh.write(f"{ns},{name}\n")


# ------------------------------------------------------------------ GNSS CSV


def load_gnss_csv(path):
    """CSV lines: timestamp, px, py, pz, vx, vy, vz (seconds, meters, m/s)."""
    rows = _read_csv_rows(path, 7, "gnss")
    out = []
    prev = None
    for lineno, parts in rows:
        vals = _parse_floats(path, lineno, parts)
        if prev is not None and vals[0] <= prev:
            raise NonMonotonicTimestamp(f"{path}:{lineno}")
        prev = vals[0]
        out.append(GnssMeasurement(timestamp=vals[0], p=vals[1:4], v=vals[4:7]))
    if not out:
        raise MalformedRow(path, 0, "no GNSS rows")
    return out


def save_gnss_csv(measurements, path):
    with open(path, "w") as fh:
        fh.write("# timestamp,px,py,pz,vx,vy,vz\n")
        for m in measurements:
            vals = ",".join(repr(float(v)) for v in (m.timestamp, *m.p, *m.v))
            fh.write(vals + "\n")
