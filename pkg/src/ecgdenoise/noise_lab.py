"""Noise synthesis at exact target SNR, segmentation, and quality metrics.

Segments are ``[2, 256]`` float32 arrays in millivolts.  All mixing math and
metric reductions run in float64 so that the 1e-6 dB mixing tolerance is
meaningful despite float32 storage.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .signal_io import SignalRecord

SEGMENT_LENGTH = 256
SEGMENT_CHANNELS = 2

NOISE_TYPES = ("bw", "ma", "em", "combined")
_COMBINED_ALIASES = {"combined", "emb", "ebm"}

METRICS_COLUMNS = ("label", "noise_type", "input_snr_db", "output_snr_db", "rmse")


class DegenerateSegmentError(ValueError):
    """Raised when a segment has zero power where positive power is required."""


def normalize_noise_type(name: str) -> str:
    """Map a user-facing noise-type name to its canonical form.

    The combined class is accepted under both spellings 'emb' and 'ebm'.
    """
    name = name.strip().lower()
    if name in _COMBINED_ALIASES:
        return "combined"
    if name in ("bw", "ma", "em"):
        return name
    raise ValueError(f"unknown noise type {name!r} (expected bw, ma, em, emb/ebm/combined)")


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    noise_type: str
    seed: int

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError(f"target SNR must be finite, got {self.snr_db}")
        object.__setattr__(self, "noise_type", normalize_noise_type(self.noise_type))


@dataclass
class SegmentPair:
    clean: np.ndarray   # [2, 256] f32
    noisy: np.ndarray   # [2, 256] f32
    mix: MixSpec


def segment_record(
    record: SignalRecord,
    length: int = SEGMENT_LENGTH,
    duplicate_single_channel: bool = False,
) -> np.ndarray:
    """Cut a record into consecutive non-overlapping two-channel segments.

    Uses the first two channels; a one-channel record is accepted only with
    ``duplicate_single_channel`` and is duplicated onto both rows.  The
    trailing remainder shorter than ``length`` is dropped.  Returns an
    ``[n_segments, 2, length]`` float32 array.
    """
    channels = record.channels
    if channels.shape[0] >= SEGMENT_CHANNELS:
        channels = channels[:SEGMENT_CHANNELS]
    elif channels.shape[0] == 1 and duplicate_single_channel:
        channels = np.vstack([channels, channels])
    else:
        raise ValueError(
            f"record {record.header.record_name!r} has {channels.shape[0]} channel(s); "
            f"need {SEGMENT_CHANNELS} (or pass duplicate_single_channel)"
        )
    n_segments = channels.shape[1] // length
    if n_segments == 0:
        return np.zeros((0, SEGMENT_CHANNELS, length), dtype=np.float32)
    trimmed = channels[:, : n_segments * length]
    segments = trimmed.reshape(SEGMENT_CHANNELS, n_segments, length).transpose(1, 0, 2)
    return np.ascontiguousarray(segments, dtype=np.float32)


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def noise_scale(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Scale factor alpha so that clean + alpha*noise has exactly ``snr_db``.

    alpha = sqrt((P_clean / P_noise) * 10**(-snr_db / 10)).
    """
    if not math.isfinite(snr_db):
        raise ValueError(f"target SNR must be finite, got {snr_db}")
    p_clean = _power(clean)
    p_noise = _power(noise)
    if p_noise == 0.0:
        raise DegenerateSegmentError("noise segment has zero power")
    if p_clean == 0.0:
        raise DegenerateSegmentError("clean segment has zero power")
    return math.sqrt((p_clean / p_noise) * 10.0 ** (-snr_db / 10.0))


def snr_db(clean: np.ndarray, estimate: np.ndarray) -> float:
    """Signal-to-noise ratio in dB, pooled over all channels.

    ``10*log10(sum(clean^2) / sum((estimate - clean)^2))``.  A zero residual
    yields +inf; zero clean power yields -inf.
    """
    clean = np.asarray(clean, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if clean.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {estimate.shape}")
    signal_energy = float(np.sum(clean**2))
    residual_energy = float(np.sum((estimate - clean) ** 2))
    if signal_energy == 0.0:
        return float("-inf")
    if residual_energy == 0.0:
        return float("inf")
    return 10.0 * math.log10(signal_energy / residual_energy)


def rmse(clean: np.ndarray, estimate: np.ndarray) -> float:
    """Root mean squared error over all values, in float64."""
    clean = np.asarray(clean, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if clean.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {estimate.shape}")
    return float(np.sqrt(np.mean((estimate - clean) ** 2)))


_MIX_TOLERANCE_DB = 1e-6


def mix(clean: np.ndarray, noise: np.ndarray, spec: MixSpec) -> SegmentPair:
    """Add scaled noise to a clean segment, hitting the target SNR exactly.

    The mixing path runs in float64 and the achieved SNR is re-verified
    against the target to 1e-6 dB before the pair is stored as float32.
    """
    clean64 = np.asarray(clean, dtype=np.float64)
    noise64 = np.asarray(noise, dtype=np.float64)
    alpha = noise_scale(clean64, noise64, spec.snr_db)
    noisy64 = clean64 + alpha * noise64
    achieved = snr_db(clean64, noisy64)
    if abs(achieved - spec.snr_db) > _MIX_TOLERANCE_DB:
        raise ArithmeticError(
            f"mixing produced {achieved:.9f} dB, target {spec.snr_db:.9f} dB"
        )
    return SegmentPair(
        clean=clean64.astype(np.float32),
        noisy=noisy64.astype(np.float32),
        mix=spec,
    )


def _segment_pool(records: Sequence[SignalRecord], length: int) -> np.ndarray:
    pools = [segment_record(r, length) for r in records]
    pool = np.concatenate(pools, axis=0) if pools else np.zeros((0, 2, length), np.float32)
    if pool.shape[0] == 0:
        raise ValueError("no usable segments in the given records")
    return pool


def draw_noise_segment(
    pools: Mapping[str, np.ndarray], noise_type: str, rng: np.random.Generator
) -> np.ndarray:
    """Pick one noise segment (sampling with replacement).

    For the combined type, one segment from each of bw, ma, em is summed
    element-wise before the single SNR scaling happens downstream.
    """
    if noise_type == "combined":
        total = np.zeros((SEGMENT_CHANNELS, pools["bw"].shape[2]), dtype=np.float64)
        for part in ("bw", "ma", "em"):
            pool = pools[part]
            total += pool[rng.integers(0, pool.shape[0])]
        return total
    pool = pools[noise_type]
    return pools[noise_type][rng.integers(0, pool.shape[0])].astype(np.float64)


def build_dataset(
    clean_records: Sequence[SignalRecord],
    noise_records: Mapping[str, Sequence[SignalRecord]],
    spec: MixSpec,
    split: tuple[int, int] = (4, 1),
    length: int = SEGMENT_LENGTH,
    normalize: bool = False,
) -> tuple[list[SegmentPair], list[SegmentPair]]:
    """Pair every clean segment with random noise and split train/test.

    Pairing, shuffling, and the split are all driven by ``spec.seed`` and are
    reproducible bit for bit.  The test side takes ``floor(n * b / (a + b))``
    pairs for a split of ``a:b``.
    """
    if not clean_records:
        raise ValueError("need at least one clean record")
    wanted = ("bw", "ma", "em") if spec.noise_type == "combined" else (spec.noise_type,)
    pools = {}
    for kind in wanted:
        if not noise_records.get(kind):
            raise ValueError(f"no noise records of type {kind!r} given")
        pools[kind] = _segment_pool(noise_records[kind], length)

    clean_pool = _segment_pool(clean_records, length)
    if normalize:
        mu = float(np.mean(np.asarray(clean_pool, dtype=np.float64)))
        sigma = float(np.std(np.asarray(clean_pool, dtype=np.float64)))
        if sigma == 0.0:
            raise DegenerateSegmentError("cannot z-score a constant clean pool")
        clean_pool = ((clean_pool - mu) / sigma).astype(np.float32)

    rng = np.random.default_rng(spec.seed)
    pairs = []
    for clean in clean_pool:
        noise = draw_noise_segment(pools, spec.noise_type, rng)
        pairs.append(mix(clean, noise, spec))

    order = rng.permutation(len(pairs))
    n_test = (len(pairs) * split[1]) // (split[0] + split[1])
    test_idx = order[:n_test]
    train_idx = order[n_test:]
    return [pairs[i] for i in train_idx], [pairs[i] for i in test_idx]


def pairs_to_arrays(pairs: Sequence[SegmentPair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into (clean, noisy) arrays of shape [n, 2, length]."""
    clean = np.stack([p.clean for p in pairs]).astype(np.float32)
    noisy = np.stack([p.noisy for p in pairs]).astype(np.float32)
    return clean, noisy


def interleave_pairs(clean: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    """Interleave clean/noisy segments for the paired dataset file."""
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noisy.shape}")
    out = np.empty((2 * clean.shape[0],) + clean.shape[1:], dtype=np.float32)
    out[0::2] = clean
    out[1::2] = noisy
    return out


def deinterleave_pairs(segments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an interleaved paired dataset back into (clean, noisy)."""
    if segments.shape[0] % 2 != 0:
        raise ValueError(f"paired dataset must hold an even segment count, got {segments.shape[0]}")
    return segments[0::2], segments[1::2]


def append_metrics_row(
    path: str | os.PathLike,
    label: str,
    noise_type: str,
    input_snr_db: float,
    output_snr_db: float,
    rmse_value: float,
) -> None:
    """Append one row to the metrics CSV, writing the header on creation."""
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRICS_COLUMNS)
        writer.writerow(
            [label, noise_type, _fmt(input_snr_db), _fmt(output_snr_db), _fmt(rmse_value)]
        )


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6f}"
