"""Multichannel WAV files, 16-bit PCM or 32-bit float.

Signals are handled as float64 arrays of shape (channels, samples).
"""
import numpy as np
from scipy.io import wavfile

DEFAULT_RATE = 16000


def read_wav(path):
    """Return ``(signal, sample_rate)`` with ``signal`` of shape (channels, samples)."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        sig = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        sig = data.astype(np.float64) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        sig = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    if sig.ndim == 1:
        sig = sig[None, :]
    else:
        sig = sig.T
    return np.ascontiguousarray(sig), rate


def write_wav(path, signal, sample_rate=DEFAULT_RATE, subtype="float32"):
    """Write (channels, samples) or (samples,) data.

    ``subtype`` is ``"float32"`` or ``"pcm16"``; PCM data is clipped to [-1, 1).
    """
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim == 2:
        sig = sig.T
    if subtype == "float32":
        data = sig.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(sig * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(path, int(sample_rate), data)
