"""Log-mel frontend: WAV IO, framing, STFT power, HTK mel filterbank, batching.

All audio is reduced to 16 kHz mono float32. Features are 64-band log mel
spectrograms computed from 512-sample Hann-windowed frames with a 256-sample
hop, and can be cached in a small binary container (see write_mels).
"""

from __future__ import annotations

import functools
import struct
import wave
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFeatureFile,
    EmptyAudio,
    EmptyBatch,
    NotWav,
    ShapeMismatch,
    UnsupportedEncoding,
    VersionMismatch,
)

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 256
N_MELS = 64
FMIN_HZ = 0.0
FMAX_HZ = 8000.0
LOG_FLOOR = 1e-10
CROP_SECONDS = 5.0
CROP_SAMPLES = int(CROP_SECONDS * SAMPLE_RATE)

MELS_MAGIC = b"MELS"
MELS_VERSION = 1


# --- WAV IO -----------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM16 WAV file as (mono float32 in [-1, 1), native sample rate).

    Multi-channel audio is downmixed by averaging channels.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise UnsupportedEncoding(f"{path}: compressed WAV ({wf.getcomptype()})")
            if wf.getsampwidth() != 2:
                raise UnsupportedEncoding(
                    f"{path}: only 16-bit PCM supported, got {8 * wf.getsampwidth()}-bit"
                )
            n_frames = wf.getnframes()
            if n_frames == 0:
                raise EmptyAudio(f"{path}: zero audio frames")
            n_channels = wf.getnchannels()
            sr = wf.getframerate()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise NotWav(f"{path}: not a WAV file ({exc})") from exc
    except EOFError as exc:
        raise NotWav(f"{path}: truncated WAV header") from exc

    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    if n_channels > 1:
        samples = samples.reshape(-1, n_channels).mean(axis=1)
    return samples, sr


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono float audio in [-1, 1] as a PCM16 WAV file."""
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def probe_wav(path) -> float:
    """Duration in seconds from the WAV header, without decoding samples."""
    try:
        with wave.open(str(path), "rb") as wf:
            return wf.getnframes() / wf.getframerate()
    except (wave.Error, EOFError) as exc:
        raise NotWav(f"{path}: not a WAV file ({exc})") from exc


def resample(samples: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    """Linear-interpolation resampling onto a uniform sr_out grid."""
    if sr_in == sr_out:
        return samples
    n_out = int(round(len(samples) * sr_out / sr_in))
    t_out = np.arange(n_out, dtype=np.float64) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(len(samples)), samples).astype(np.float32)


def load_audio(path) -> np.ndarray:
    """Read a WAV file as 16 kHz mono float32."""
    samples, sr = read_wav(path)
    return resample(samples, sr)


# --- framing and spectra ------------------------------------------------------

def frame_count(n_samples: int) -> int:
    """Number of STFT frames for a signal of n_samples at 16 kHz.

    Signals shorter than one window are zero-padded to a single frame;
    otherwise only complete windows count.
    """
    return 1 + (max(n_samples, N_FFT) - N_FFT) // HOP


def hann_window(n: int = N_FFT) -> np.ndarray:
    # Periodic variant, suited to overlapped analysis.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(samples: np.ndarray) -> np.ndarray:
    """Power spectrogram [frames, 257] in float64.

    512-sample periodic Hann window, 256-sample hop, trailing samples that do
    not fill a window are dropped, inputs shorter than a window are
    zero-padded to one frame.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch(f"expected 1-d audio, got shape {x.shape}")
    if len(x) < N_FFT:
        x = np.pad(x, (0, N_FFT - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, N_FFT)[::HOP]
    spec = np.fft.rfft(frames * hann_window(), axis=1)
    return np.abs(spec) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_filterbank() -> np.ndarray:
    """64 triangular filters [64, 257] on an HTK mel grid over 0..8000 Hz.

    Grid: 66 points equally spaced in mel, triangles linear in Hz with peak
    1.0, evaluated at the FFT bin center frequencies.
    """
    grid_hz = mel_to_hz(np.linspace(hz_to_mel(FMIN_HZ), hz_to_mel(FMAX_HZ), N_MELS + 2))
    bins_hz = np.arange(N_FFT // 2 + 1, dtype=np.float64) * SAMPLE_RATE / N_FFT
    weights = np.zeros((N_MELS, N_FFT // 2 + 1))
    for j in range(N_MELS):
        lo, center, hi = grid_hz[j], grid_hz[j + 1], grid_hz[j + 2]
        rising = (bins_hz - lo) / (center - lo)
        falling = (hi - bins_hz) / (hi - center)
        weights[j] = np.maximum(0.0, np.minimum(rising, falling))
    return weights


def mel_band_centers() -> np.ndarray:
    """Peak frequency in Hz of each of the 64 filters."""
    grid_hz = mel_to_hz(np.linspace(hz_to_mel(FMIN_HZ), hz_to_mel(FMAX_HZ), N_MELS + 2))
    return grid_hz[1:-1]


def log_mel(samples: np.ndarray) -> np.ndarray:
    """Log mel spectrogram [frames, 64] float32 of a 16 kHz mono signal.

    Natural log with a 1e-10 power floor.
    """
    power = stft_power(samples)
    mel = power @ mel_filterbank().T
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


# --- crops and batching -------------------------------------------------------

def random_crop(samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform-random 5 s excerpt of longer signals; shorter pass through."""
    if len(samples) <= CROP_SAMPLES:
        return samples
    start = int(rng.integers(0, len(samples) - CROP_SAMPLES + 1))
    return samples[start : start + CROP_SAMPLES]


def center_crop(samples: np.ndarray) -> np.ndarray:
    """Deterministic central 5 s excerpt of longer signals."""
    if len(samples) <= CROP_SAMPLES:
        return samples
    start = (len(samples) - CROP_SAMPLES) // 2
    return samples[start : start + CROP_SAMPLES]


def pad_batch(features: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-sample [T_i, 64] features into ([B, 64, T_max, 1], lengths).

    Shorter items are zero-padded on the right along time; lengths holds the
    valid frame count of each item.
    """
    if not features:
        raise EmptyBatch("cannot batch zero feature arrays")
    for f in features:
        if f.ndim != 2 or f.shape[1] != N_MELS:
            raise ShapeMismatch(f"expected [T, {N_MELS}] features, got {f.shape}")
    lengths = np.array([f.shape[0] for f in features], dtype=np.int64)
    t_max = int(lengths.max())
    batch = np.zeros((len(features), N_MELS, t_max, 1), dtype=np.float32)
    for b, f in enumerate(features):
        batch[b, :, : f.shape[0], 0] = f.T
    return batch, lengths


# --- feature cache files ------------------------------------------------------

def write_mels(path, features: np.ndarray) -> None:
    """Serialize [frames, 64] float32 features: magic, version, bands, frames,
    then row-major little-endian float32 payload."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2 or feats.shape[1] != N_MELS:
        raise ShapeMismatch(f"expected [T, {N_MELS}] features, got {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(MELS_MAGIC)
        fh.write(struct.pack("<III", MELS_VERSION, feats.shape[1], feats.shape[0]))
        fh.write(feats.tobytes())


def read_mels(path) -> np.ndarray:
    """Read features written by write_mels; exact inverse."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MELS_MAGIC:
        raise CorruptFeatureFile(f"{path}: missing MELS header")
    version, bands, frames = struct.unpack("<III", blob[4:16])
    if version != MELS_VERSION:
        raise VersionMismatch(f"{path}: feature file version {version}, expected {MELS_VERSION}")
    expected = 16 + 4 * bands * frames
    if bands != N_MELS or len(blob) != expected:
        raise CorruptFeatureFile(
            f"{path}: payload mismatch (bands={bands}, frames={frames}, {len(blob)} bytes)"
        )
    return np.frombuffer(blob[16:], dtype="<f4").reshape(frames, bands).copy()
