"""Radial basis expansions of scalar geometries and the cutoff envelope.

A bank of K Gaussians acts on exp(-x): centers are equally spaced between
exp(-a) and exp(-b) and share one width. 1-1 distance features are damped by
a smooth cosine envelope so they vanish continuously at the cutoff; 2-body
lengths and 2-2 angles are expanded undamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import HeteroMolGraph


@dataclass(frozen=True)
class RbfBank:
    """K Gaussian basis functions on exp(-x) for scalar inputs in [a, b]."""

    k: int
    a: float
    b: float
    centers: np.ndarray  # (k,), exp(-a) down to exp(-b)
    beta: float          # shared width


def make_bank(a: float, b: float, k: int) -> RbfBank:
    if k < 2:
        raise ValueError(f"need at least 2 basis functions, got {k}")
    if a >= b:
        raise ValueError(f"invalid input range [{a}, {b}]")
    hi, lo = math.exp(-a), math.exp(-b)
    centers = np.linspace(hi, lo, k)
    beta = (2.0 / k * (hi - lo)) ** -2
    return RbfBank(k, float(a), float(b), centers, beta)


def rbf_expand(x, bank: RbfBank) -> np.ndarray:
    """Expand scalars to (..., k) basis responses in (0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    arg = np.exp(-x)[..., None] - bank.centers
    return np.exp(-bank.beta * arg * arg)


def cutoff_envelope(d, c: float):
    """Smooth damping: 1 at d=0, 0 at d=c, flat derivative at both ends."""
    d = np.asarray(d, dtype=np.float64)
    out = 0.5 * (np.cos(np.pi * np.clip(d, 0.0, c) / c) + 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FeatureBanks:
    """Per-geometry banks: 1-1 distance, 2-body length, 2-2 angle."""

    distance: RbfBank
    length: RbfBank
    angle: RbfBank
    cutoff: float

    @classmethod
    def for_cutoff(cls, cutoff: float, k: int = 64) -> "FeatureBanks":
        return cls(
            distance=make_bank(0.0, cutoff, k),
            length=make_bank(0.0, cutoff, k),
            angle=make_bank(0.0, math.pi, k),
            cutoff=float(cutoff),
        )

    def to_meta(self) -> dict:
        return {"k_distance": self.distance.k, "k_length": self.length.k,
                "k_angle": self.angle.k, "cutoff": self.cutoff}

    @classmethod
    def from_meta(cls, meta: dict) -> "FeatureBanks":
        banks = cls.for_cutoff(meta["cutoff"], meta["k_distance"])
        if (meta["k_length"], meta["k_angle"]) != (banks.length.k, banks.angle.k):
            banks = cls(
                distance=make_bank(0.0, meta["cutoff"], meta["k_distance"]),
                length=make_bank(0.0, meta["cutoff"], meta["k_length"]),
                angle=make_bank(0.0, math.pi, meta["k_angle"]),
                cutoff=float(meta["cutoff"]),
            )
        return banks


@dataclass
class HmgFeatures:
    """Continuous feature tables aligned with a HeteroMolGraph's rows."""

    e11: np.ndarray  # (m11, k) enveloped distance expansion
    x2: np.ndarray   # (n2, k) length expansion
    e22: np.ndarray  # (m22, k) angle expansion


def featurize_hmg(hmg: HeteroMolGraph, banks: FeatureBanks) -> HmgFeatures:
    """Expand every geometric attribute; order-1 nodes carry no continuous
    feature, so only edge tables and the 2-body table are produced."""
    e11 = rbf_expand(hmg.e11_dist, banks.distance)
    e11 *= cutoff_envelope(hmg.e11_dist, banks.cutoff)[:, None]
    x2 = rbf_expand(hmg.lengths, banks.length)
    e22 = rbf_expand(hmg.e22_angle, banks.angle)
    return HmgFeatures(e11=e11, x2=x2, e22=e22)
