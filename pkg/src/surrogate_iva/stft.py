"""Half-overlap STFT analysis and weighted overlap-add synthesis.

Frames are taken without padding: a signal of length T gives
``N = (T - frame_size) // hop + 1`` frames and the synthesis output has
length ``frame_size + (N - 1) * hop``.  The same Hamming window is used for
analysis and synthesis, with per-sample normalization by the overlapped sum
of squared windows, so ``istft(stft(x))`` is exact wherever frames cover
the signal.

All functions accept arbitrary leading batch dimensions and are
differentiable through torch.
"""
from dataclasses import dataclass

import torch


class InputTooShort(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    frame_size: int = 4096
    window: str = "hamming"

    def __post_init__(self):
        n = self.frame_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"frame_size must be a power of two, got {n}")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def hop(self) -> int:
        return self.frame_size // 2

    @property
    def n_bins(self) -> int:
        return self.frame_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_size) // self.hop + 1

    def n_samples(self, n_frames: int) -> int:
        return self.frame_size + (n_frames - 1) * self.hop


def window(cfg: StftConfig) -> torch.Tensor:
    return torch.hamming_window(cfg.frame_size, periodic=True, dtype=torch.float64)


def stft(x, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Complex spectrogram of shape (..., F, N) of real signals (..., T)."""
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.shape[-1] < cfg.frame_size:
        raise InputTooShort(
            f"signal of length {x.shape[-1]} is shorter than one frame ({cfg.frame_size})"
        )
    frames = x.unfold(-1, cfg.frame_size, cfg.hop)  # (..., N, L)
    spec = torch.fft.rfft(frames * window(cfg), dim=-1)
    return spec.transpose(-1, -2)


def istft(Y, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Inverse of :func:`stft` by weighted overlap-add; returns (..., T)."""
    Y = torch.as_tensor(Y)
    if Y.shape[-2] != cfg.n_bins:
        raise ShapeMismatch(f"expected {cfg.n_bins} frequency bins, got {Y.shape[-2]}")
    n_frames = Y.shape[-1]
    win = window(cfg)
    frames = torch.fft.irfft(Y.transpose(-1, -2), n=cfg.frame_size, dim=-1) * win
    length = cfg.n_samples(n_frames)
    batch = frames.shape[:-2]
    # overlap-add through fold: (B, L, N) -> (B, 1, 1, T)
    cols = frames.reshape(-1, n_frames, cfg.frame_size).transpose(1, 2)
    out = torch.nn.functional.fold(
        cols, output_size=(1, length), kernel_size=(1, cfg.frame_size), stride=(1, cfg.hop)
    )
    norm = torch.nn.functional.fold(
        (win**2)[None, :, None].expand(1, -1, n_frames),
        output_size=(1, length),
        kernel_size=(1, cfg.frame_size),
        stride=(1, cfg.hop),
    )
    return (out / norm).reshape(*batch, length)
