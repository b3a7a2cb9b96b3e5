"""Waveform I/O, STFT, mel spectrograms, and phase-reconstruction synthesis.

Fixed analysis configuration: FFT 1024, hop 256, window 1024 (periodic
Hann), 80 mel bands on an HTK-style mel scale spanning 0 Hz to Nyquist,
natural-log compression with floor 1e-5. Frames are centered: the signal is
padded by win//2 on the left and the frame count is ceil(len / hop).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

DEFAULT_SAMPLE_RATE = 16000
FFT_SIZE = 1024
HOP = 256
WIN = 1024
N_MELS = 80
LOG_FLOOR = 1e-5

AMPLITUDE_TOL = 1e-6


class AudioError(Exception):
    pass


@dataclass
class Waveform:
    samples: np.ndarray      # 1-D float64 in [-1, 1]
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise AudioError("empty waveform")
        if not np.isfinite(self.samples).all():
            raise AudioError("waveform contains NaN or Inf")
        peak = np.abs(self.samples).max()
        if peak > 1.0 + AMPLITUDE_TOL:
            raise AudioError(f"samples exceed [-1, 1] (peak {peak:.6g})")
        if peak > 1.0:
            self.samples = np.clip(self.samples, -1.0, 1.0)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray       # (n_frames, n_mels) natural-log mel energies
    sample_rate: int = DEFAULT_SAMPLE_RATE
    fft_size: int = FFT_SIZE
    hop: int = HOP
    win: int = WIN
    n_mels: int = N_MELS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise AudioError("mel frames must be 2-D (n_frames, n_mels)")
        if self.frames.shape[1] != self.n_mels:
            raise AudioError(
                f"frame width {self.frames.shape[1]} != n_mels {self.n_mels}"
            )
        if not np.isfinite(self.frames).all():
            raise AudioError("mel frames contain NaN or Inf")

    def same_config(self, other: "MelSpectrogram") -> bool:
        return (
            self.sample_rate == other.sample_rate
            and self.fft_size == other.fft_size
            and self.hop == other.hop
            and self.win == other.win
            and self.n_mels == other.n_mels
        )


def read_wav(path) -> Waveform:
    """Load a mono PCM16 or float WAV; stereo input is an error."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples=np.clip(samples, -1.0, 1.0), sample_rate=int(rate))


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def frame_count(n_samples: int, hop: int = HOP) -> int:
    """Number of analysis frames for a signal: ceil(len / hop)."""
    if n_samples < 1:
        raise AudioError("need at least one sample")
    return -(-n_samples // hop)


def _frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = samples.size
    frames = frame_count(n, hop)
    left = win // 2
    needed = (frames - 1) * hop + win
    right = max(0, needed - (n + left))
    padded = np.pad(samples, (left, right))
    idx = np.arange(frames)[:, None] * hop + np.arange(win)[None, :]
    return padded[idx]


def stft(samples: np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP, win: int = WIN) -> np.ndarray:
    """Complex STFT, shape (ceil(len/hop), fft_size//2 + 1)."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    window = get_window("hann", win, fftbins=True)
    framed = _frame_signal(samples, win, hop) * window[None, :]
    return np.fft.rfft(framed, n=fft_size, axis=1)


def istft(spec: np.ndarray, n_samples: int, fft_size: int = FFT_SIZE, hop: int = HOP, win: int = WIN) -> np.ndarray:
    """Overlap-add inverse of stft, trimmed back to n_samples."""
    window = get_window("hann", win, fftbins=True)
    frames = np.fft.irfft(spec, n=fft_size, axis=1)[:, :win]
    n_frames = frames.shape[0]
    total = (n_frames - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        start = i * hop
        out[start : start + win] += frames[i] * window
        norm[start : start + win] += window**2
    out = out / np.maximum(norm, 1e-10)
    left = win // 2
    return out[left : left + n_samples]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = DEFAULT_SAMPLE_RATE, fft_size: int = FFT_SIZE, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters (n_mels, fft_size//2 + 1), peaks 1.0, spanning 0 to Nyquist."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    fb = np.zeros((n_mels, bin_freqs.size))
    for j in range(n_mels):
        lo, center, hi = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        up = (bin_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[j] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_center_frequencies(sample_rate: int = DEFAULT_SAMPLE_RATE, n_mels: int = N_MELS) -> np.ndarray:
    """Center (peak) frequency in Hz of each triangular band."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    return mel_to_hz(mel_points)[1:-1]


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    """STFT magnitude through the mel filterbank, natural-log compressed."""
    spec = np.abs(stft(w.samples))
    fb = mel_filterbank(w.sample_rate)
    mel = spec @ fb.T
    frames = np.log(np.maximum(mel, LOG_FLOOR))
    return MelSpectrogram(frames=frames, sample_rate=w.sample_rate)


MEL_EXPORT_MAGIC = b"MELX"


def save_mel(path, mel: MelSpectrogram) -> None:
    """Raw f32 row-major export with a (frames u32, n_mels u32) header."""
    import struct

    with open(path, "wb") as fp:
        fp.write(MEL_EXPORT_MAGIC)
        fp.write(struct.pack("<II", mel.frames.shape[0], mel.frames.shape[1]))
        fp.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def load_mel(path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> MelSpectrogram:
    import struct

    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != MEL_EXPORT_MAGIC:
            raise AudioError(f"{path}: bad mel export magic {magic!r}")
        n_frames, n_mels = struct.unpack("<II", fp.read(8))
        raw = fp.read(n_frames * n_mels * 4)
        if len(raw) != n_frames * n_mels * 4:
            raise AudioError(f"{path}: truncated mel payload")
        frames = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n_frames, n_mels)
    return MelSpectrogram(frames=frames, sample_rate=sample_rate, n_mels=n_mels)


def griffin_lim(mel: MelSpectrogram, iterations: int = 32, seed: int = 0) -> Waveform:
    """Reconstruct audio from a log-mel spectrogram by iterative phase fitting.

    Magnitudes come from the pseudo-inverse of the mel filterbank; phase
    starts uniform-random from the given seed and is refined by alternating
    inverse/forward transforms. Output is peak-limited only if it exceeds 1.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    fb = mel_filterbank(mel.sample_rate, mel.fft_size, mel.n_mels)
    mel_mag = np.exp(mel.frames)
    # exact-floor cells are silence, not measured energy
    mel_mag[mel.frames <= math.log(LOG_FLOOR)] = 0.0
    target = np.clip(mel_mag @ np.linalg.pinv(fb).T, 0.0, None)

    n_samples = mel.frames.shape[0] * mel.hop
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF]))
    phase = rng.uniform(0.0, 2.0 * np.pi, target.shape)
    spec = target * np.exp(1j * phase)
    for _ in range(iterations):
        x = istft(spec, n_samples, mel.fft_size, mel.hop, mel.win)
        rebuilt = stft(x, mel.fft_size, mel.hop, mel.win)
        spec = target * np.exp(1j * np.angle(rebuilt))
    x = istft(spec, n_samples, mel.fft_size, mel.hop, mel.win)
    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak
    return Waveform(samples=x, sample_rate=mel.sample_rate)


def wav_paths(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.wav"))
