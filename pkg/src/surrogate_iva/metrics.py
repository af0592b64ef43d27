"""Output scaling, separation losses and evaluation metrics.

All functions are differentiable torch code; they are used both inside the
training graph and for evaluation.  Decibel values are capped at +-300 dB.
"""
import itertools
from typing import NamedTuple

import torch

from .numerics import as_complex

DB_CAP = 300.0
EPS = 1e-30


class ZeroReference(ValueError):
    pass


class SingularGram(ArithmeticError):
    pass


def minimal_distortion_scale(Y, x_ref):
    """Rescale each source so it best matches a reference mixture channel.

    Parameters
    ----------
    Y : complex tensor (M, F, N)
    x_ref : complex tensor (F, N)

    Returns
    -------
    (scaled Y, z) with ``z[k, f] = sum_n conj(y) x / sum_n |y|^2``.
    """
    Y = as_complex(Y)
    x_ref = as_complex(x_ref)
    num = (Y.conj() * x_ref).sum(-1)
    den = (Y.real**2 + Y.imag**2).sum(-1).clamp_min(EPS)
    z = num / den
    return z[..., None] * Y, z


def _db(num, den):
    return (10.0 * torch.log10(num / den)).clamp(-DB_CAP, DB_CAP)


def si_sdr(est, ref):
    """Scale-invariant SDR in dB along the last axis (broadcasts over the rest)."""
    est = torch.as_tensor(est, dtype=torch.float64)
    ref = torch.as_tensor(ref, dtype=torch.float64)
    if est.shape[-1] != ref.shape[-1]:
        raise ValueError("estimate and reference lengths differ")
    ref_energy = (ref * ref).sum(-1)
    if bool((ref_energy == 0).any()):
        raise ZeroReference("reference signal is all zeros")
    alpha = (est * ref).sum(-1, keepdim=True) / ref_energy[..., None]
    target = alpha * ref
    t_energy = (target * target).sum(-1)
    resid = ((target - est) ** 2).sum(-1)
    den = torch.maximum(resid, EPS * t_energy).clamp_min(1e-300)
    return _db(t_energy.clamp_min(1e-300), den)


def si_sir(est, refs, k):
    """Scale-invariant SIR of ``est`` (T,) for target ``k`` among ``refs`` (M, T)."""
    est = torch.as_tensor(est, dtype=torch.float64)
    refs = torch.as_tensor(refs, dtype=torch.float64)
    gram = refs @ refs.T
    scale = torch.sqrt(torch.diagonal(gram))
    if bool((scale == 0).any()):
        raise SingularGram("zero reference")
    corr = gram / (scale[:, None] * scale[None, :])
    if float(torch.linalg.eigvalsh(corr)[0]) < 1e-10:
        raise SingularGram("references are numerically linearly dependent")
    beta = torch.linalg.solve(gram, refs @ est)
    parts = beta[:, None] * refs
    target = parts[k]
    interf = parts.sum(0) - target
    t_energy = (target**2).sum()
    i_energy = (interf**2).sum()
    return _db(t_energy.clamp_min(1e-300), torch.maximum(i_energy, EPS * t_energy).clamp_min(1e-300))


def coherence_loss(Y_hat, S):
    """Frequency-averaged magnitude coherence of (..., F, N) spectrograms, in [0, 1]."""
    Y_hat = as_complex(Y_hat)
    S = as_complex(S)
    cross = (Y_hat * S.conj()).sum(-1).abs()
    py = (Y_hat.real**2 + Y_hat.imag**2).sum(-1).clamp_min(EPS)
    ps = (S.real**2 + S.imag**2).sum(-1).clamp_min(EPS)
    return (cross / torch.sqrt(py * ps)).mean(-1)


class PitResult(NamedTuple):
    value: torch.Tensor
    permutation: tuple  # permutation[m] = index of the estimate assigned to reference m
    per_pair: torch.Tensor  # metric of each reference under the permutation


def pit_from_matrix(scores):
    """Best assignment for a score matrix ``scores[i, j]`` = metric(est_i, ref_j).

    Exhaustive over all M! permutations; higher is better.
    """
    m = scores.shape[0]
    cols = torch.arange(m)
    best_perm, best_val = None, None
    for perm in itertools.permutations(range(m)):
        val = float(scores.detach()[list(perm), cols].sum())
        if best_val is None or val > best_val:
            best_perm, best_val = perm, val
    per_pair = scores[list(best_perm), cols]
    return PitResult(per_pair.mean(), best_perm, per_pair)


def pairwise(ests, refs, base):
    """Matrix metric(est_i, ref_j) of shape (M, M)."""
    if base == "si_sdr":
        return si_sdr(ests[:, None, :], refs[None, :, :])
    if base == "coherence":
        return coherence_loss(ests[:, None], refs[None, :])
    raise ValueError(f"unknown PIT base metric {base!r}")


def pit_wrap(ests, refs, base="si_sdr"):
    """Permutation invariant metric: max over assignments of the mean metric.

    ``ests`` and ``refs`` are (M, T) waveforms for ``"si_sdr"`` or (M, F, N)
    spectrograms for ``"coherence"``.  Gradients flow through the selected
    assignment only.
    """
    if len(ests) != len(refs):
        raise ValueError("need as many estimates as references")
    if len(ests) > 8:
        raise ValueError("exhaustive PIT is limited to 8 sources")
    return pit_from_matrix(pairwise(ests, refs, base))
