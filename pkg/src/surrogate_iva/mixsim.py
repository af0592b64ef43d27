"""Synthetic multichannel mixtures for training and evaluation.

Sources are either drawn from a directory of WAV files or generated as
"speech-like" signals: a sequence of syllable-like segments, each either
voiced (a pulse train at a random pitch) or unvoiced (white noise), shaped
by random formant resonators and a heavy-tailed amplitude envelope with
pauses.  These signals are super-Gaussian, which is what classical IVA
models rely on, while carrying more spectral structure than a plain
Laplace prior describes.

Mixing is instantaneous or convolutive with short random FIR filters whose
envelope decays exponentially, the first tap being the dominant one.

Randomness comes from numpy's PCG64 generator; item ``i`` of a dataset with
seed ``s`` uses ``numpy.random.default_rng([s, i])`` so items are
independent of generation order.
"""
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .wavio import DEFAULT_RATE, read_wav, write_wav

MAX_COND = 20.0


class PoolTooSmall(ValueError):
    pass


@dataclass
class MixtureSpec:
    n_sources: int = 2
    mixing: str = "convolutive"  # or "instantaneous"
    taps: int = 32
    decay: float = 6.0  # envelope time constant of the FIR tail, in samples
    tail_gain: float = 0.3
    relative_snr_db: tuple = (-5.0, 5.0)
    noise_snr_db: tuple = (10.0, 30.0)
    source_kind: str = "synthetic"  # or "wavpool"
    wav_pool: str = ""
    duration_s: float = 2.0
    sample_rate: int = DEFAULT_RATE
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 2:
            raise ValueError("need at least two sources")
        if self.taps < 1:
            raise ValueError("FIR length must be at least one")
        if self.mixing not in ("instantaneous", "convolutive"):
            raise ValueError(f"unknown mixing {self.mixing!r}")
        if self.source_kind not in ("synthetic", "wavpool"):
            raise ValueError(f"unknown source kind {self.source_kind!r}")
        for lo, hi in (self.relative_snr_db, self.noise_snr_db or (0, 0)):
            if lo > hi:
                raise ValueError("SNR ranges must be ordered")

    @property
    def n_mics(self):
        return self.n_sources

    @property
    def n_samples(self):
        return int(round(self.duration_s * self.sample_rate))


def _resonator(freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    return np.array([1.0, -2 * r * np.cos(theta), r * r])


def speech_like(n_samples, rng, fs=DEFAULT_RATE):
    """One synthetic super-Gaussian source with speech-like structure."""
    out = np.zeros(n_samples)
    pos = int(rng.integers(0, int(0.15 * fs)))
    while pos < n_samples:
        seg = int(rng.uniform(0.08, 0.3) * fs)
        gap = int(rng.exponential(0.08) * fs)
        end = min(pos + seg, n_samples)
        length = end - pos
        if rng.random() < 0.7:
            f0 = rng.uniform(90, 260) * np.exp(np.cumsum(rng.normal(0, 2e-4, length)))
            phase = np.cumsum(f0 / fs)
            exc = (np.diff(np.floor(phase), prepend=0.0) > 0).astype(float)
            exc += 0.05 * rng.standard_normal(length)
        else:
            exc = rng.standard_normal(length) * 0.3
        sos_out = exc
        for lo, hi in ((250, 900), (800, 2500), (2000, 4500)):
            a = _resonator(rng.uniform(lo, hi), rng.uniform(60, 250), fs)
            sos_out = signal.lfilter([1.0 - a[2]], a, sos_out)
        env = np.hanning(length) ** 0.5 * np.exp(rng.normal(0.0, 0.8))
        chunk = sos_out * env
        out[pos:end] += chunk / (np.std(chunk) + 1e-12)
        pos = end + gap
    return out


def synth_sources(spec: MixtureSpec, rng):
    """Return an (M, T) array of sources, first source at unit average power."""
    n = spec.n_samples
    if spec.source_kind == "wavpool":
        files = sorted(Path(spec.wav_pool).glob("*.wav"))
        if len(files) < spec.n_sources:
            raise PoolTooSmall(f"{len(files)} files in pool, need {spec.n_sources}")
        picks = rng.choice(len(files), size=spec.n_sources, replace=False)
        srcs = []
        for i in picks:
            data, _ = read_wav(files[i])
            x = data[0]
            if len(x) < n:
                x = np.pad(x, (0, n - len(x)))
            srcs.append(x[:n])
        srcs = np.array(srcs)
    else:
        srcs = np.array([speech_like(n, rng, spec.sample_rate) for _ in range(spec.n_sources)])
    power = np.mean(srcs**2, axis=1, keepdims=True)
    srcs = srcs / np.sqrt(np.maximum(power, 1e-20))
    rel = rng.uniform(*spec.relative_snr_db, size=spec.n_sources - 1)
    srcs[1:] *= 10 ** (rel[:, None] / 20)
    return srcs


def random_mixing_matrix(m, rng, max_cond=MAX_COND):
    while True:
        a = rng.standard_normal((m, m))
        if np.linalg.cond(a) <= max_cond:
            return a


def mixing_filters(spec: MixtureSpec, rng):
    """FIR filters h[mic, src, tap] with h[:, :, 0] a well-conditioned matrix."""
    m = spec.n_sources
    taps = 1 if spec.mixing == "instantaneous" else spec.taps
    h = np.zeros((m, m, taps))
    h[:, :, 0] = random_mixing_matrix(m, rng)
    if taps > 1:
        t = np.arange(1, taps)
        env = spec.tail_gain * np.exp(-t / spec.decay)
        h[:, :, 1:] = rng.standard_normal((m, m, taps - 1)) * env
    return h


def mix(sources, spec: MixtureSpec, rng, filters=None, noise_snr_db=None):
    """Mix (M, T) sources.

    Returns ``(x, refs)``: the (M, T) microphone signals and the source
    images at microphone 0.  ``noise_snr_db`` fixes the noise level;
    otherwise it is drawn from ``spec.noise_snr_db`` (``None`` disables noise).
    """
    sources = np.asarray(sources, dtype=np.float64)
    m, n = sources.shape
    h = mixing_filters(spec, rng) if filters is None else np.asarray(filters, dtype=np.float64)
    images = np.zeros((m, m, n))  # mic, src, time
    for i in range(m):
        for j in range(m):
            images[i, j] = signal.lfilter(h[i, j], [1.0], sources[j])
    x = images.sum(axis=1)
    if noise_snr_db is None and spec.noise_snr_db is not None:
        noise_snr_db = rng.uniform(*spec.noise_snr_db)
    if noise_snr_db is not None:
        noise = rng.standard_normal(x.shape)
        p_sig = np.mean(x**2)
        noise *= np.sqrt(p_sig / np.mean(noise**2) * 10 ** (-noise_snr_db / 10))
        x = x + noise
    return x, images[0].copy()


@dataclass
class Item:
    id: str
    split: str
    mix_path: str
    ref_paths: list
    M: int
    seed: int
    mixing: dict = field(default_factory=dict)


def _split_counts(n_items, fractions):
    n_val = int(np.floor(n_items * fractions[1] + 1e-9))
    n_test = int(np.floor(n_items * fractions[2] + 1e-9))
    return n_items - n_val - n_test, n_val, n_test


def make_item(spec: MixtureSpec, index: int):
    rng = np.random.default_rng([spec.seed, index])
    srcs = synth_sources(spec, rng)
    h = mixing_filters(spec, rng)
    x, refs = mix(srcs, spec, rng, filters=h)
    return x, refs, h


def make_dataset(spec: MixtureSpec, n_items, out_dir, fractions=(0.9, 0.05, 0.05)):
    """Write mixtures, references and ``manifest.jsonl`` to ``out_dir``.

    Items are ordered train, then validation, then test.  Paths in the
    manifest are relative to ``out_dir``.  Returns the list of items.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = _split_counts(n_items, fractions)
    items = []
    for i in range(n_items):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        x, refs, _ = make_item(spec, i)
        iid = f"{i:06d}"
        mix_path = f"audio/{iid}_mix.wav"
        write_wav(out / mix_path, x, spec.sample_rate)
        ref_paths = []
        for k, ref in enumerate(refs):
            p = f"audio/{iid}_ref{k}.wav"
            write_wav(out / p, ref, spec.sample_rate)
            ref_paths.append(p)
        mixing = {
            "kind": spec.mixing,
            "taps": 1 if spec.mixing == "instantaneous" else spec.taps,
            "decay": spec.decay,
        }
        items.append(Item(iid, split, mix_path, ref_paths, spec.n_sources, spec.seed, mixing))
    with open(out / "manifest.jsonl", "w") as fh:
        for it in items:
            fh.write(json.dumps(asdict(it), sort_keys=True) + "\n")
    return items


def read_manifest(path):
    """Load manifest items; paths are resolved relative to the manifest's directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    base = path.parent
    items = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rec["mix_path"] = os.fspath(base / rec["mix_path"])
                rec["ref_paths"] = [os.fspath(base / p) for p in rec["ref_paths"]]
                items.append(Item(**rec))
    return items


def load_item(item: Item):
    """Return ``(mixture, references)`` as (M, T) float arrays."""
    x, rate = read_wav(item.mix_path)
    refs = np.concatenate([read_wav(p)[0] for p in item.ref_paths])
    return x, refs
