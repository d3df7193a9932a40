"""Synthetic phantoms and ground-truth frame sequences."""
