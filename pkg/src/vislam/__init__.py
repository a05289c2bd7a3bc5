"""Stereo visual-inertial SLAM engine with loosely-coupled sensor fusion.

Subsystems:
  geometry    rotation/pose algebra and camera projection
  frontend    histogram equalization, LK tracking, corner detection,
              binary descriptors, 2D-3D matching
  tracker     tightly-coupled iterated-EKF visual-inertial tracking
  mapper      keyframes, triangulation, local bundle adjustment, pruning
  fusion      loosely-coupled EKF fusing SLAM poses with a global sensor
  evaluation  trajectory alignment and ATE/RPE metrics
  dataset     EuRoC-style ingestion and stream types
  simulate    synthetic trajectory + sensor oracle
  pipeline    end-to-end orchestration
  cli         command-line entry points (run / evaluate / fuse / simulate)
"""

__version__ = "0.1.0"
