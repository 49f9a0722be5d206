"""Deterministic seed derivation.

A master seed is expanded into labeled sub-streams (init, shuffle, augment,
per-patient, per-fold...) with a splitmix64 finalizer over the master seed
mixed with a CRC-32 of the label.  The scheme is fixed so runs are
reproducible bit-for-bit; any reimplementation that adopts the same
derivation and generator (numpy PCG64) reproduces the same streams.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x):
    """One splitmix64 mixing step (Steele et al.)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master, label):
    """64-bit sub-seed for a labeled stream under one master seed."""
    x = (int(master) & _MASK) ^ (zlib.crc32(str(label).encode()) << 32)
    return splitmix64(splitmix64(x))


def stream(master, label):
    """numpy Generator for the labeled sub-stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, label)))
