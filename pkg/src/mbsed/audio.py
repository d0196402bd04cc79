"""WAV I/O and the log-mel feature frontend.

The pipeline operates at 22050 Hz; files at other rates are resampled by
linear interpolation on load. Features are 64 log-mel bands from 40 ms
Hann-windowed frames with 50% overlap, so a 10 second clip maps to a
500x64 matrix with one frame every 20 ms.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

PIPELINE_RATE = 22050
N_BANDS = 64
FRAME_MS = 40.0
FRAME_OVERLAP = 0.5
LOG_FLOOR = 1e-10


class AudioIOError(RuntimeError):
    """WAV file could not be read or has an unsupported encoding."""


@dataclass
class AudioClip:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LogMelClip:
    """T x F log-mel matrix plus the hop that maps frames to seconds."""

    features: np.ndarray
    frame_hop_seconds: float
    clip_id: str = ""


def load_wav(path) -> AudioClip:
    """Read a PCM-16 RIFF/WAVE file; stereo is averaged to mono.

    Integer samples are scaled by 1/32768 so the result lies in [-1, 1].
    """
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            if width != 2:
                raise AudioIOError(
                    f"{path}: only PCM 16-bit WAV is supported, got {8 * width}-bit samples"
                )
            if channels not in (1, 2):
                raise AudioIOError(f"{path}: expected mono or stereo, got {channels} channels")
            raw = fh.readframes(n)
    except wave.Error as exc:
        raise AudioIOError(f"{path}: not a readable PCM WAV file: {exc}") from None
    except EOFError:
        raise AudioIOError(f"{path}: truncated WAV file") from None
    data = np.frombuffer(raw, dtype="<i2")
    if channels == 2:
        if len(data) % 2:
            raise AudioIOError(f"{path}: truncated stereo frame")
        data = data.reshape(-1, 2).mean(axis=1)
    samples = np.asarray(data, dtype=np.float64) / 32768.0
    if len(samples) == 0:
        raise AudioIOError(f"{path}: contains no samples")
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write mono PCM-16; samples are rounded and clipped to int16 range."""
    q = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(q.tobytes())


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampling preserving clip duration."""
    if clip.sample_rate == target_rate:
        return clip
    n = len(clip.samples)
    n_out = int(round(n * target_rate / clip.sample_rate))
    positions = np.arange(n_out) * (clip.sample_rate / target_rate)
    samples = np.interp(positions, np.arange(n), clip.samples)
    return AudioClip(samples, target_rate)


def load_audio(path, rate: int = PIPELINE_RATE) -> AudioClip:
    return resample(load_wav(path), rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_bands: int = N_BANDS) -> np.ndarray:
    """Triangular filters (n_bands, n_fft//2 + 1), peak 1, spanning 0-Nyquist.

    Band centers are equally spaced on the mel scale; on any interval
    between adjacent centers the two overlapping triangles sum to 1, so
    per-bin weights across bands never exceed 1.
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_bands + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_bands, len(bin_freqs)))
    for b in range(n_bands):
        lo, center, hi = hz_points[b], hz_points[b + 1], hz_points[b + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def logmel(
    clip: AudioClip,
    bands: int = N_BANDS,
    frame_ms: float = FRAME_MS,
    overlap: float = FRAME_OVERLAP,
    clip_id: str = "",
) -> LogMelClip:
    """Log-power mel features: T = ceil(n_samples / hop) frames, one row each.

    Frames are centered by reflect padding of half a frame, Hann windowed,
    zero padded to the next power of two for the FFT, and projected onto
    the mel filterbank. Cells are ln(max(power, 1e-10)); the clamp keeps
    the exact +ln(4) shift under waveform doubling for above-floor cells.
    """
    sr = clip.sample_rate
    frame = int(round(frame_ms / 1000.0 * sr))
    hop = int(round(frame_ms / 1000.0 * (1.0 - overlap) * sr))
    samples = np.asarray(clip.samples, dtype=np.float64)
    n = len(samples)
    if n < hop:
        raise ValueError(f"clip of {n} samples is shorter than one hop ({hop} samples)")
    t_frames = -(-n // hop)  # ceil
    padded = np.pad(samples, frame // 2, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, frame)[::hop][:t_frames]
    n_fft = 1 << (frame - 1).bit_length()
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame) / frame)
    spectrum = np.fft.rfft(windows * hann, n=n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel_power = power @ mel_filterbank(sr, n_fft, bands).T
    features = np.log(np.maximum(mel_power, LOG_FLOOR))
    return LogMelClip(features, frame_hop_seconds=hop / sr, clip_id=clip_id)


# ---------------------------------------------------------------------------
# feature cache: uint32-LE T and F, then T*F float64-LE row-major


def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {features.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", features.shape[0], features.shape[1]))
        fh.write(features.astype("<f8").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise AudioIOError(f"{path}: truncated feature cache header")
        t, f = struct.unpack("<II", head)
        raw = fh.read(t * f * 8)
    if len(raw) != t * f * 8:
        raise AudioIOError(f"{path}: feature cache shorter than header claims")
    return np.frombuffer(raw, dtype="<f8").reshape(t, f).copy()
