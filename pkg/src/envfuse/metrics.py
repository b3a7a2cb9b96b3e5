"""Objective evaluation: mel-cepstral distortion and blind RT60 estimation.

MCD follows the dominant convention: DCT-II (orthonormal) cepstra of the
log-mel frames, coefficients c1..c13 (c0 excluded), dynamic time warping on
cepstral Euclidean distance, and the scale (10*sqrt(2)/ln 10) on the mean
aligned-pair distance.

RT60 uses Schroeder backward energy integration with a least-squares fit on
the -5 dB to -25 dB segment, extrapolated to 60 dB. This is a classical
estimator standing in for a learned one, so absolute values are comparable
only within this codebase.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fftpack import dct

from .audio import MelSpectrogram, Waveform

MCD_SCALE = 10.0 * math.sqrt(2.0) / math.log(10.0)
N_CEPSTRA = 13            # c1..c13

FIT_START_DB = -5.0
FIT_END_DB = -25.0
MIN_FIT_POINTS = 8
MAX_CROSSING_FRACTION = 0.95  # -25 dB later than this means no real decay


class EstimationFailure(Exception):
    """The decay curve does not support an RT60 estimate."""


def mel_cepstra(mel: MelSpectrogram) -> np.ndarray:
    """Per-frame cepstra (n_frames, 13): orthonormal DCT-II, c0 dropped."""
    coeffs = dct(mel.frames, type=2, norm="ortho", axis=1)
    return coeffs[:, 1 : N_CEPSTRA + 1]


def dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Monotone alignment path minimizing accumulated cost.

    Ties prefer the diagonal step, then shrinking the first axis, so the
    path is unique and deterministic.
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if j > 0 and acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = cost[i, j] + best
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            candidates = (
                (acc[i - 1, j - 1], (i - 1, j - 1)),
                (acc[i - 1, j], (i - 1, j)),
                (acc[i, j - 1], (i, j - 1)),
            )
            _, (i, j) = min(candidates, key=lambda c: c[0])
        path.append((i, j))
    path.reverse()
    return path


def dtw_alignment_cost(cost: np.ndarray) -> float:
    path = dtw_path(cost)
    return float(sum(cost[i, j] for i, j in path))


def mcd(reference: MelSpectrogram, synthesized: MelSpectrogram) -> float:
    """Mel-cepstral distortion in dB over the DTW-aligned frame pairs."""
    if not reference.same_config(synthesized):
        raise ValueError("mel configurations differ; recompute with shared settings")
    if reference.frames.shape[0] == 0 or synthesized.frames.shape[0] == 0:
        raise ValueError("empty mel spectrogram")
    c_ref = mel_cepstra(reference)
    c_syn = mel_cepstra(synthesized)
    diff = c_ref[:, None, :] - c_syn[None, :, :]
    cost = np.sqrt((diff**2).sum(axis=2))
    path = dtw_path(cost)
    mean_dist = float(np.mean([cost[i, j] for i, j in path]))
    return MCD_SCALE * mean_dist


def schroeder_decay_db(samples: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, normalized to 0 at t=0."""
    energy = np.asarray(samples, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    total = edc[0]
    if total <= 0.0:
        raise EstimationFailure("signal has no energy")
    return 10.0 * np.log10(np.maximum(edc / total, 1e-300))


def schroeder_rt60(w: Waveform) -> float:
    """RT60 in seconds from the -5..-25 dB Schroeder decay segment.

    Raises EstimationFailure when the curve never reaches -25 dB, reaches it
    only in the last few samples (stationary signals), offers too few fit
    points, or fits a non-negative slope.
    """
    db = schroeder_decay_db(w.samples)
    n = db.size
    below_start = np.nonzero(db <= FIT_START_DB)[0]
    below_end = np.nonzero(db <= FIT_END_DB)[0]
    if below_start.size == 0 or below_end.size == 0:
        raise EstimationFailure("decay never reaches the fit window")
    i5, i25 = int(below_start[0]), int(below_end[0])
    if i25 >= MAX_CROSSING_FRACTION * n:
        raise EstimationFailure("no decay: -25 dB crossing sits at the signal tail")
    if i25 - i5 < MIN_FIT_POINTS:
        raise EstimationFailure("fit window too short")
    t = np.arange(i5, i25 + 1) / w.sample_rate
    seg = db[i5 : i25 + 1]
    slope, _ = np.polyfit(t, seg, 1)
    if slope >= 0.0:
        raise EstimationFailure("non-decaying fit segment")
    return 60.0 / abs(float(slope))


def rte(reference: Waveform, synthesized: Waveform) -> float:
    """Absolute RT60 difference in seconds."""
    return abs(schroeder_rt60(synthesized) - schroeder_rt60(reference))


@dataclass
class MetricRow:
    sample_id: str
    rt60_ref: float
    rt60_syn: float
    rte: float
    mcd: float

    def __post_init__(self):
        if self.rte < 0 or self.mcd < 0:
            raise ValueError("rte and mcd must be nonnegative")


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)   # (sample_id, reason)
    unpaired: list[str] = field(default_factory=list)

    @property
    def mean_rte(self) -> float:
        return float(np.mean([r.rte for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_mcd(self) -> float:
        return float(np.mean([r.mcd for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["sample_id", "rt60_ref", "rt60_syn", "rte", "mcd"])
            for row in sorted(self.rows, key=lambda r: r.sample_id):
                writer.writerow(
                    [
                        row.sample_id,
                        f"{row.rt60_ref:.6f}",
                        f"{row.rt60_syn:.6f}",
                        f"{row.rte:.6f}",
                        f"{row.mcd:.6f}",
                    ]
                )
            if self.rows:
                mean_rte_ref = float(np.mean([r.rt60_ref for r in self.rows]))
                mean_rte_syn = float(np.mean([r.rt60_syn for r in self.rows]))
                writer.writerow(
                    [
                        "MEAN",
                        f"{mean_rte_ref:.6f}",
                        f"{mean_rte_syn:.6f}",
                        f"{self.mean_rte:.6f}",
                        f"{self.mean_mcd:.6f}",
                    ]
                )
