"""End-to-end orchestration: consumes a time-ordered sensor stream, runs IMU
propagation at sample rate and the visual update per frame, hands keyframes to
the mapper, and logs the estimated trajectory.

Two scheduling modes share the same numerical code paths:
  * deterministic: the mapper runs synchronously between frames; with a fixed
    seed the output trajectory is bit-for-bit reproducible.
  * concurrent: the mapper owns its thread and communicates through a queue
    and immutable map snapshots, so bundle adjustment never blocks tracking.

Per-stage wall-clock timing is collected with rows Image Processing /
Matching / Tracking / Mapping / End-To-End; the mapping row is the mapper's
total busy time amortized over the number of processed frames.
"""

from __future__ import annotations

import dataclasses
import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .dataset import LoadedDataset, SensorStream, StereoFramePair
from .errors import DataFormatError, ExcessiveGap, NonMonotonicTimestamp, SolverDiverged
from .evaluation import Trajectory
from .frontend import Feature, FrontendState, compute_descriptors, descriptor_from_id, \
    detect_features, match_to_map
from .fusion import MeasurementBuffer, SlamMeasurement, align_frames, exp_so3, \
    fusion_propagate, fusion_update_gnss, fusion_update_slam
from .geometry import RigidTransform, UnitQuaternion, WorldParams, log_so3
from .mapper import Keyframe, MapView, SparseMap, insert_keyframe, local_bundle_adjust, \
    prune, should_insert_keyframe
from .simulate import SimResult
from .tracker import CalibrationSet, Correspondence, FilterState, ImuSample, propagate, \
    update

log = logging.getLogger(__name__)

TIMING_ROWS = ("Image Processing", "Matching", "Tracking", "Mapping", "End-To-End")


@dataclass
class StageTiming:
    totals: dict = field(default_factory=lambda: {r: 0.0 for r in TIMING_ROWS[:-1]})
    frames: int = 0

    def add(self, stage, seconds):
        self.totals[stage] += seconds

    def per_frame_ms(self) -> dict:
        n = max(self.frames, 1)
        rows = {r: 1e3 * self.totals[r] / n for r in TIMING_ROWS[:-1]}
        rows["End-To-End"] = sum(rows.values())
        return rows

    def write_csv(self, path):
        rows = self.per_frame_ms()
        with open(path, "w") as fh:
            fh.write("stage,ms_per_frame\n")
            for name in TIMING_ROWS:
                fh.write(f"{name},{rows[name]:.6f}\n")


@dataclass
class RunResult:
    trajectory: Trajectory
    timing: StageTiming
    tracking_latencies: np.ndarray  # seconds per frame, tracking path only
    keyframes_submitted: int
    updates_rejected: int
    map_points: int


# ------------------------------------------------------------------ mapper side


@dataclass(frozen=True)
class KeyframeJob:
    keyframe: Keyframe
    associations: tuple
    right_image: np.ndarray | None


class MapSnapshot:
    """Immutable bundle published by the mapper after each cycle."""

    def __init__(self, view: MapView, associations: dict):
        self.view = view
        self.associations = dict(associations)


class MapperCore:
    """Owns the SparseMap; insert -> bundle adjust -> prune -> snapshot."""

    def __init__(self, config: PipelineConfig, calib: CalibrationSet, frontend_cfg=None):
        self.config = config.mapper.to_mapper_config()
        self.settings = config.mapper
        self.frontend_cfg = frontend_cfg or config.frontend
        self.calib = calib
        self.map = SparseMap()
        self.busy_seconds = 0.0
        self._descriptor_seed = 0

    def process(self, job: KeyframeJob) -> MapSnapshot:
        start = time.perf_counter()
        kf = job.keyframe
        if job.right_image is not None and not kf.features_right:
            kf.features_right = self._extract_right(job.right_image)
        insert_keyframe(self.map, kf, list(job.associations), self.calib, self.config)
        if self.map.num_observations():
            try:
                local_bundle_adjust(self.map, kf.id, self.config, self.calib)
            except SolverDiverged as exc:
                log.warning("bundle adjustment diverged at keyframe %d: %s", kf.id, exc)
        prune(self.map, self.config, self.calib)
        if self.settings.ba_delay_s > 0:
            time.sleep(self.settings.ba_delay_s)
        snapshot = MapSnapshot(self.map.snapshot(), self._feature_associations())
        self.busy_seconds += time.perf_counter() - start
        return snapshot

    def _extract_right(self, image):
        feats = detect_features(image, [], budget=self.frontend_cfg.budget,
                                next_id=0, grid_size=self.frontend_cfg.grid_size,
                                threshold=self.frontend_cfg.corner_threshold)
        compute_descriptors(image, feats)
        return [f for f in feats if f.descriptor is not None]

    def _feature_associations(self):
        assoc = {}
        for kf_id in sorted(self.map.keyframes):
            for feat in self.map.keyframes[kf_id].features_left:
                if feat.map_point_id is not None and feat.map_point_id in self.map.points:
                    assoc[feat.id] = feat.map_point_id
        return assoc


class MapperWorker(threading.Thread):
    """Runs MapperCore on its own thread; tracking never blocks on it."""

    def __init__(self, core: MapperCore):
        super().__init__(daemon=True, name="mapper")
        self.core = core
        self.jobs: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._snapshot = MapSnapshot(MapView(()), {})

    def run(self):
        while True:
            job = self.jobs.get()
            if job is None:
                return
            try:
                snap = self.core.process(job)
            except Exception:  # keep mapping failures off the tracking path
                log.exception("mapper job failed")
                continue
            with self._lock:
                self._snapshot = snap

    def submit(self, job: KeyframeJob):
        self.jobs.put(job)

    def snapshot(self) -> MapSnapshot:
        with self._lock:
            return self._snapshot

    def stop(self):
        self.jobs.put(None)
        self.join()


# ------------------------------------------------------------------ front-end adapters


class ImageFrontend:
    """Full image path: equalize, track, detect, describe."""

    def __init__(self, settings):
        self.state = FrontendState(
            budget=settings.budget, grid_size=settings.grid_size,
            per_bin_cap=settings.per_bin_cap, corner_threshold=settings.corner_threshold,
            lk_window=settings.lk_window, lk_levels=settings.lk_levels,
            lk_iterations=settings.lk_iterations, lk_eps=settings.lk_convergence_px,
            min_tracked=settings.min_tracked,
        )

    def process(self, frame: StereoFramePair):
        left, _ = frame.images()
        _, feats = self.state.process(left)
        return feats


class ObservationFrontend:
    """Simulator tier: ground-truth observations stand in for optical flow.

    Landmark ids act as track ids, so a landmark seen in consecutive frames
    keeps its feature object and its map-point association, exactly like a
    feature tracked by optical flow."""

    def __init__(self):
        self.features: dict[int, Feature] = {}

    def process(self, frame: StereoFramePair):
        current = {}
        for obs in frame.observations or []:
            if obs.camera_index != 0:
                continue
            feat = self.features.get(obs.landmark_id)
            if feat is None:
                feat = Feature(id=obs.landmark_id, pixel=obs.pixel,
                               descriptor=descriptor_from_id(obs.landmark_id))
            else:
                feat.pixel = np.asarray(obs.pixel, dtype=float)
                feat.track_age += 1
            current[obs.landmark_id] = feat
        self.features = current
        return list(current.values())

    @staticmethod
    def right_features(frame: StereoFramePair):
        out = []
        for obs in frame.observations or []:
            if obs.camera_index == 1:
                out.append(Feature(id=obs.landmark_id, pixel=obs.pixel,
                                   descriptor=descriptor_from_id(obs.landmark_id)))
        return out
