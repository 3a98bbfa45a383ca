"""Signal processing: STFT/iSTFT, log-frequency resampling, masking, WAV I/O.

Everything here is a pure function of immutable numpy inputs. Audio is kept
in float64 so round trips are limited by FFT roundoff only.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import LengthError, ValidationError

SAMPLE_RATE = 11025
WINDOW_SIZE = 1022
HOP = 256
N_FRAMES = 256
N_LOG_BINS = 256
N_FREQ = WINDOW_SIZE // 2 + 1

# samples covered by a full 256-frame centered grid (~5.94 s at 11025 Hz)
CLIP_LENGTH = HOP * N_FRAMES - 1

# window-sum floor, relative to the peak window sum
_WSS_FLOOR = 1e-2


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise ValidationError("audio must be a non-empty 1-D array")
        if not np.all(np.isfinite(x)):
            raise ValidationError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValidationError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Complex one-sided STFT, shape ``(window_size // 2 + 1, n_frames)``."""

    bins: np.ndarray
    window_size: int = WINDOW_SIZE
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.complex128)
        if b.ndim != 2 or b.shape[0] != self.window_size // 2 + 1:
            raise ValidationError(
                f"spectrogram must have {self.window_size // 2 + 1} rows, got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValidationError("spectrogram contains non-finite entries")
        object.__setattr__(self, "bins", b)

    @property
    def shape(self):
        return self.bins.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


@dataclass(frozen=True)
class LogSpec:
    mag: np.ndarray
    bin_centers: np.ndarray

    def __post_init__(self):
        if np.any(self.mag < 0):
            raise ValidationError("log spectrogram magnitudes must be nonnegative")
        if np.any(np.diff(self.bin_centers) <= 0):
            raise ValidationError("bin centers must be strictly increasing")

    @property
    def shape(self):
        return self.mag.shape


@dataclass(frozen=True)
class FreqMap:
    """Resampling weights between the linear STFT grid and the log grid.

    ``forward`` has shape (n_log, n_freq) and maps magnitudes to the log grid;
    ``backward`` has shape (n_freq, n_log) and lifts log-grid masks back.
    """

    forward: np.ndarray
    backward: np.ndarray
    bin_centers: np.ndarray
    center_positions: np.ndarray = field(repr=False)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_clip(clip: AudioClip, window_size: int):
    if len(clip) < window_size:
        raise LengthError(f"clip has {len(clip)} samples, need at least {window_size}")


def stft(clip: AudioClip, window_size: int = WINDOW_SIZE, hop: int = HOP,
         n_frames: int | None = N_FRAMES) -> Spectrogram:
    """Centered STFT with a periodic Hann window.

    The clip is reflection-padded by half a window on both sides, zero-padded
    at the end if that still leaves fewer than ``n_frames`` frames, and the
    frame sequence is truncated to ``n_frames``. ``n_frames=None`` keeps every
    complete frame.
    """
    _check_clip(clip, window_size)
    half = window_size // 2
    x = np.pad(clip.samples, half, mode="reflect")
    if n_frames is not None:
        need = (n_frames - 1) * hop + window_size
        if x.size < need:
            x = np.pad(x, (0, need - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, window_size)[::hop]
    if n_frames is not None:
        frames = frames[:n_frames]
    bins = np.fft.rfft(frames * hann(window_size), axis=1).T
    return Spectrogram(bins, window_size, hop, clip.sample_rate)


def istft(spec: Spectrogram, length: int) -> AudioClip:
    """Weighted overlap-add inverse of :func:`stft`.

    The window-square sum is floored at 1% of its peak so samples that only
    the far tail of one window reaches are attenuated, not amplified. Samples
    beyond the span covered by the frames come back as zeros.
    """
    if length <= 0:
        raise ValidationError("length must be positive")
    n, hop = spec.window_size, spec.hop
    w = hann(n)
    frames = np.fft.irfft(spec.bins.T, n=n, axis=1) * w
    n_frames = frames.shape[0]
    total = (n_frames - 1) * hop + n
    y = np.zeros(total)
    wss = np.zeros(total)
    w2 = w * w
    for t in range(n_frames):
        y[t * hop:t * hop + n] += frames[t]
        wss[t * hop:t * hop + n] += w2
    y /= np.maximum(wss, _WSS_FLOOR * wss.max())
    y = y[n // 2:]
    out = np.zeros(length)
    m = min(length, y.size)
    out[:m] = y[:m]
    return AudioClip(out, spec.sample_rate)


@lru_cache(maxsize=8)
def build_freq_map(window_size: int = WINDOW_SIZE, sample_rate: int = SAMPLE_RATE,
                   n_log: int = N_LOG_BINS) -> FreqMap:
    """Hat-function resampling onto geometrically spaced centers.

    Centers run from linear bin 1 to the Nyquist bin. Each log bin's hat
    reaches out to its neighbouring centers but never less than one linear
    bin, so at low frequencies this reduces to plain linear interpolation and
    at high frequencies it averages instead of point-sampling.
    """
    n_freq = window_size // 2 + 1
    top = n_freq - 1
    pos = np.geomspace(1.0, float(top), n_log)
    pos[0], pos[-1] = 1.0, float(top)
    k = np.arange(n_freq, dtype=np.float64)

    gaps = np.diff(pos)
    left = np.maximum(np.concatenate([[gaps[0]], gaps]), 1.0)
    right = np.maximum(np.concatenate([gaps, [gaps[-1]]]), 1.0)
    d = k[None, :] - pos[:, None]
    fwd = np.where(d <= 0, 1.0 + d / left[:, None], 1.0 - d / right[:, None])
    fwd = np.clip(fwd, 0.0, None)
    fwd /= fwd.sum(axis=1, keepdims=True)

    bwd = np.zeros((n_freq, n_log))
    bwd[0, 0] = 1.0
    j = np.clip(np.searchsorted(pos, k[1:], side="right") - 1, 0, n_log - 2)
    frac = (k[1:] - pos[j]) / (pos[j + 1] - pos[j])
    rows = np.arange(1, n_freq)
    bwd[rows, j] = 1.0 - frac
    bwd[rows, j + 1] += frac

    centers_hz = pos * sample_rate / window_size
    for a in (fwd, bwd, centers_hz, pos):
        a.setflags(write=False)
    return FreqMap(fwd, bwd, centers_hz, pos)


def to_log_spec(spec: Spectrogram, fmap: FreqMap | None = None) -> LogSpec:
    fmap = fmap or build_freq_map(spec.window_size, spec.sample_rate)
    if spec.bins.shape[0] != fmap.forward.shape[1]:
        raise ValidationError(
            f"spectrogram has {spec.bins.shape[0]} bins, map expects {fmap.forward.shape[1]}")
    return LogSpec(fmap.forward @ spec.magnitude, fmap.bin_centers)


def compress(logspec: LogSpec) -> np.ndarray:
    """Network input: ``log(1 + mag)``."""
    return np.log1p(logspec.mag)


def lift_mask(mask: np.ndarray, fmap: FreqMap) -> np.ndarray:
    """Map a log-grid mask onto the linear STFT grid."""
    return fmap.backward @ mask


def apply_mask_and_reconstruct(mix: Spectrogram, mask: np.ndarray, fmap: FreqMap | None,
                               length: int) -> AudioClip:
    """Mask the mixture (keeping its phase) and invert to a waveform."""
    fmap = fmap or build_freq_map(mix.window_size, mix.sample_rate)
    mask = np.asarray(mask)
    if mask.shape != (fmap.forward.shape[0], mix.bins.shape[1]):
        raise ValidationError(
            f"mask shape {mask.shape} does not match ({fmap.forward.shape[0]}, {mix.bins.shape[1]})")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask entries must be 0 or 1")
    lifted = lift_mask(mask.astype(np.float64), fmap)
    return istft(Spectrogram(mix.bins * lifted, mix.window_size, mix.hop, mix.sample_rate),
                 length)


def read_wav(path) -> AudioClip:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValidationError(f"{path}: only 16-bit PCM is supported")
        if f.getnchannels() != 1:
            raise ValidationError(f"{path}: only mono audio is supported")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return AudioClip(x, rate)


def write_wav(path, clip: AudioClip) -> Path:
    path = Path(path)
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(clip.sample_rate)
        f.writeframes(pcm.tobytes())
    return path
