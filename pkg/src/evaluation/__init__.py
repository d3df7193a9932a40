"""Pose-error, objective and coverage metrics plus their report files."""
