"""MFCC frontend for 16 kHz mono audio.

For one second of audio (16 000 samples) with the default configuration the
output is a [50, 13] feature map. The pipeline per frame is:

    frame (320 samples) -> Hamming window -> truncate to the first 256
    samples -> real FFT -> magnitude spectrum (129 bins) -> 32 triangular
    mel filters (0 Hz .. Nyquist) -> log with a 1e-12 floor -> orthonormal
    DCT-II -> first 13 coefficients

followed by per-coefficient sliding mean/variance normalization over a
101-frame window. The frame length (320 samples at 16 kHz) exceeds the FFT
length on purpose; the window is applied at full frame length and the FFT
keeps only the first 256 windowed samples, matching common embedded
front-ends. The tail of the signal that does not fill a whole frame is
dropped, and no pre-emphasis or liftering is applied.

Because the log turns amplitude scaling into a per-frame additive constant
and the mean normalization removes it, features are invariant to positive
scaling of the input wherever the variance floor does not bind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-12
VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    num_coefficients: int = 13
    frame_length: float = 0.02
    frame_stride: float = 0.02
    num_filters: int = 32
    fft_length: int = 256
    norm_window: int = 101

    def __post_init__(self):
        if self.fft_length < 2 or self.fft_length & (self.fft_length - 1):
            raise ValueError(f"fft_length must be a power of two, got {self.fft_length}")
        if self.num_coefficients > self.num_filters:
            raise ValueError("num_coefficients cannot exceed num_filters")
        if self.frame_length <= 0 or self.frame_stride <= 0:
            raise ValueError("frame_length and frame_stride must be positive")
        if self.sample_rate <= 0 or self.norm_window < 1:
            raise ValueError("sample_rate and norm_window must be positive")

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_length * self.sample_rate))

    @property
    def stride_samples(self) -> int:
        return int(round(self.frame_stride * self.sample_rate))

    @property
    def num_bins(self) -> int:
        return self.fft_length // 2 + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular mel filterbank, shape [num_filters, fft_length/2 + 1].

    Band edges run from 0 Hz to Nyquist. Edge frequencies map to FFT bins
    via floor((fft_length + 1) * hz / sample_rate); filter j rises over
    bins [bin[j], bin[j+1]) and falls over [bin[j+1], bin[j+2]), peaking
    at bin[j+1].
    """
    nyquist = cfg.sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), cfg.num_filters + 2)
    hz_points = mel_to_hz(mel_points)
    bins = np.floor((cfg.fft_length + 1) * hz_points / cfg.sample_rate).astype(int)
    fb = np.zeros((cfg.num_filters, cfg.num_bins), dtype=np.float64)
    for j in range(cfg.num_filters):
        left, center, right = bins[j], bins[j + 1], bins[j + 2]
        for i in range(left, center):
            fb[j, i] = (i - left) / (center - left)
        for i in range(center, right):
            fb[j, i] = (right - i) / (right - center)
        if center < cfg.num_bins:
            fb[j, center] = 1.0
    return fb


def filter_peak_bins(cfg: MfccConfig) -> np.ndarray:
    nyquist = cfg.sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), cfg.num_filters + 2)
    hz_points = mel_to_hz(mel_points)
    return np.floor((cfg.fft_length + 1) * hz_points / cfg.sample_rate).astype(int)[1:-1]


def _dct_matrix(num_coefficients: int, num_filters: int) -> np.ndarray:
    # orthonormal DCT-II: C[k, n] = s_k * cos(pi * (2n + 1) * k / (2N))
    n = np.arange(num_filters)
    k = np.arange(num_coefficients)[:, None]
    mat = np.cos(np.pi * (2 * n + 1) * k / (2 * num_filters))
    mat[0, :] *= np.sqrt(1.0 / num_filters)
    mat[1:, :] *= np.sqrt(2.0 / num_filters)
    return mat


def frame_count(num_samples: int, cfg: MfccConfig) -> int:
    if num_samples < cfg.frame_samples:
        raise ValueError(
            f"audio too short: {num_samples} samples, need at least {cfg.frame_samples}"
        )
    return (num_samples - cfg.frame_samples) // cfg.stride_samples + 1


def sliding_normalize(coeffs: np.ndarray, window: int) -> np.ndarray:
    """Per-coefficient mean/variance normalization over a centered sliding
    window of `window` frames, clamped at the signal edges. When the signal
    is shorter than the window every frame sees the whole signal."""
    n = coeffs.shape[0]
    out = np.empty_like(coeffs)
    half = window // 2
    for t in range(n):
        if n <= window:
            lo, hi = 0, n
        else:
            lo = max(0, t - half)
            hi = min(n, t + half + 1)
        block = coeffs[lo:hi]
        mu = block.mean(axis=0)
        var = block.var(axis=0)
        out[t] = (coeffs[t] - mu) / np.sqrt(np.maximum(var, VAR_FLOOR))
    return out


def mfcc_extract(audio: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Extract a [frames, num_coefficients] float32 feature map.

    `audio` is a 1-D array of PCM samples (int16 or float); amplitude units
    cancel in the normalization step.
    """
    audio = np.asarray(audio)
    if audio.ndim != 1:
        raise ValueError(f"audio must be mono (rank 1), got shape {audio.shape}")
    if audio.size == 0:
        raise ValueError("audio is empty")
    n_frames = frame_count(audio.size, cfg)
    signal = audio.astype(np.float64)
    window = np.hamming(cfg.frame_samples)
    fb = mel_filterbank(cfg)
    dct = _dct_matrix(cfg.num_coefficients, cfg.num_filters)
    coeffs = np.empty((n_frames, cfg.num_coefficients), dtype=np.float64)
    for t in range(n_frames):
        start = t * cfg.stride_samples
        frame = signal[start : start + cfg.frame_samples] * window
        spectrum = np.abs(np.fft.rfft(frame[: cfg.fft_length], n=cfg.fft_length))
        energies = fb @ spectrum
        coeffs[t] = dct @ np.log(np.maximum(energies, LOG_FLOOR))
    return sliding_normalize(coeffs, cfg.norm_window).astype(np.float32)
