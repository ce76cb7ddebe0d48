"""Stochastic-cloning EKF for IMU-only odometry with displacement measurements."""

__version__ = "0.1.0"
