"""AuxIVA with iterative source steering (ISS) and pairwise IP2 updates.

Shape conventions: mixtures and estimates are (M, F, N) complex tensors,
demixing matrices are stacked per frequency as (F, M, M) so that
``Y[:, f] = W[f] @ X[:, f]``.

Every operation is written with out-of-place torch ops, so running the loop
with a GLU source model under autograd gives gradients through all
iterations.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import torch

from . import models
from .metrics import minimal_distortion_scale, pit_wrap, si_sdr
from .numerics import as_complex, gevd2, logdet_abs, rank1_row_update
from .stft import StftConfig, istft

log = logging.getLogger(__name__)

DEGENERATE_ENERGY = 1e-30


class NonFiniteError(ArithmeticError):
    """Separation produced NaN or Inf values."""


@dataclass
class SeparationState:
    X: torch.Tensor
    Y: torch.Tensor
    W: torch.Tensor
    iteration: int = 0
    skipped_bins: int = 0

    @classmethod
    def initial(cls, X):
        X = as_complex(X)
        m, n_freq, _ = X.shape
        W = torch.eye(m, dtype=X.dtype).expand(n_freq, m, m).clone()
        return cls(X=X, Y=X.clone(), W=W)


@dataclass
class AuxIvaConfig:
    algo: str = "iss"
    n_iters: int = 20
    model: object = "laplace"
    detach_weights: bool = False

    def __post_init__(self):
        if self.algo not in ("iss", "ip2"):
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.n_iters < 1:
            raise ValueError("n_iters must be positive")
        models.check_model(self.model)


def demix(W, X):
    return torch.einsum("fkm,mfn->kfn", W, X)


def iss_vector(Y, r, k):
    """Steering vectors v[:, f] for source k at every bin.

    Returns ``(v, degenerate)`` where ``v`` is (M, F) and ``degenerate`` marks
    bins where source k carries no energy; v is zero there.
    """
    n_frames = Y.shape[-1]
    yk = Y[k]
    pk = yk.real**2 + yk.imag**2
    degenerate = pk.sum(-1) < DEGENERATE_ENERGY
    den = (r * pk).sum(-1)
    den = torch.where(degenerate, torch.ones_like(den), den)
    num = (r * Y * yk.conj()).sum(-1)
    v = num / den
    own = 1.0 - torch.rsqrt(den[k] / n_frames)
    is_k = torch.arange(Y.shape[0])[:, None] == k
    v = torch.where(is_k, own.to(v.dtype), v)
    v = torch.where(degenerate, torch.zeros_like(v), v)
    return v, degenerate


def iss_update_source(state, r, k):
    v, degenerate = iss_vector(state.Y, r, k)
    Y = state.Y - v[:, :, None] * state.Y[k]
    W = rank1_row_update(state.W, v.T, k)
    return SeparationState(
        X=state.X,
        Y=Y,
        W=W,
        iteration=state.iteration,
        skipped_bins=state.skipped_bins + int(degenerate.sum()),
    )


def ip2_update(state, r):
    """Exact update of both rows of every W_f (two sources only).

    Bins whose weighted covariance is not positive definite are left
    unchanged and counted in ``skipped_bins``.
    """
    X = state.X
    if X.shape[0] != 2:
        raise ValueError("IP2 requires exactly two sources")
    n_frames = X.shape[-1]
    # The weighted covariances V_k = 1/N sum_n r x x^H are expressed in the
    # current output basis, P_k = W V_k W^H, which stays well conditioned
    # near convergence where V_k itself may not.  A solution u of the pencil
    # (P_0, P_1) maps back to the microphone domain as w^H = u^H W.
    Y = state.Y
    P = torch.einsum("kfn,afn,bfn->kfab", r.to(Y.dtype), Y, Y.conj()) / n_frames
    dec = gevd2(P[0], P[1], check=False)
    lam, vec = dec.eigenvalues, dec.eigenvectors
    small = vec[..., :, 1]
    large = vec[..., :, 0]
    # degenerate pairs keep the canonical order
    deg = dec.degenerate[:, None]
    w0 = torch.where(deg, large, small)
    w1 = torch.where(deg, small, large)
    lam0 = torch.where(dec.degenerate, lam[:, 0], lam[:, 1]).clamp_min(1e-300)
    w0 = w0 / torch.sqrt(lam0)[:, None]
    W_new = torch.stack([w0.conj(), w1.conj()], dim=-2) @ state.W
    ok = dec.valid & torch.isfinite(W_new.abs()).all(-1).all(-1)
    W = torch.where(ok[:, None, None], W_new, state.W)
    n_bad = int((~ok).sum())
    if n_bad:
        log.warning("IP2 skipped %d bins with non positive definite covariance", n_bad)
    return SeparationState(
        X=X,
        Y=demix(W, X),
        W=W,
        iteration=state.iteration,
        skipped_bins=state.skipped_bins + n_bad,
    )


def contrast(Y, model):
    """G(Y_k) for each source of Y (M, F, N), additive constants dropped."""
    power = (Y.abs() ** 2).detach()
    if model == "laplace":
        return torch.sqrt(power.sum(-2)).sum(-1)
    if model == "gauss":
        n_freq = Y.shape[-2]
        lam = power.mean(-2).clamp_min(models.POWER_FLOOR)
        return n_freq * torch.log(lam).sum(-1)
    raise ValueError("negative log-likelihood needs a classical source model")


def neg_log_likelihood(Y, W, model):
    """sum_k G(Y_k) - 2 N sum_f log|det W_f| for a classical model."""
    n_frames = Y.shape[-1]
    return float(contrast(Y, model).sum() - 2 * n_frames * logdet_abs(W.detach()).sum())


@dataclass
class Trace:
    """Per-iteration diagnostics; index 0 is the unprocessed mixture."""

    nll: list = field(default_factory=list)
    si_sdr: list = field(default_factory=list)  # per-iteration list of per-source dB
    permutation: list = field(default_factory=list)

    def __len__(self):
        return max(len(self.nll), len(self.si_sdr))

    def records(self):
        rows = []
        for t in range(len(self)):
            row = {"iteration": t}
            if self.nll:
                row["nll"] = self.nll[t]
            if self.si_sdr:
                row["si_sdr"] = list(self.si_sdr[t])
            rows.append(row)
        return rows


def _trace_sdr(state, refs, stft_cfg, ref_mic):
    with torch.no_grad():
        scaled, _ = minimal_distortion_scale(state.Y, state.X[ref_mic])
        est = istft(scaled, stft_cfg)
        res = pit_wrap(est, refs[..., : est.shape[-1]], "si_sdr")
    # per-reference values
    return [float(v) for v in res.per_pair], list(res.permutation)


def auxiva_run(
    X,
    cfg: AuxIvaConfig,
    refs=None,
    stft_cfg: Optional[StftConfig] = None,
    ref_mic: int = 0,
    rng=None,
):
    """Run ``cfg.n_iters`` AuxIVA iterations starting from W_f = I.

    Parameters
    ----------
    X : complex tensor (M, F, N)
        Mixture STFT.
    cfg : AuxIvaConfig
    refs : real tensor (M, T), optional
        Time-domain references; when given together with ``stft_cfg`` the
        trace records the PIT SI-SDR of the scaled output at every iteration.
    rng : torch.Generator, optional
        Dropout randomness for a GLU model in training mode.

    Returns
    -------
    (Y, W, trace)
    """
    X = as_complex(X)
    m, _, n_frames = X.shape
    if m < 2 or n_frames < 2:
        raise ValueError("need at least two sources and two frames")
    if cfg.algo == "ip2" and m != 2:
        raise ValueError("IP2 requires exactly two sources")
    classical = not isinstance(cfg.model, torch.nn.Module)
    state = SeparationState.initial(X)
    trace = Trace()
    want_sdr = refs is not None and stft_cfg is not None
    if want_sdr:
        refs = torch.as_tensor(refs, dtype=torch.float64)

    def record(state):
        if classical:
            trace.nll.append(neg_log_likelihood(state.Y, state.W, cfg.model))
        if want_sdr:
            vals, perm = _trace_sdr(state, refs, stft_cfg, ref_mic)
            trace.si_sdr.append(vals)
            trace.permutation.append(perm)

    record(state)
    for it in range(cfg.n_iters):
        Y_in = state.Y.detach() if cfg.detach_weights else state.Y
        r = models.model_weights(cfg.model, Y_in, rng=rng)
        if cfg.algo == "iss":
            for k in range(m):
                state = iss_update_source(state, r, k)
        else:
            state = ip2_update(state, r)
        state.iteration = it + 1
        if not bool(torch.isfinite(torch.view_as_real(state.Y)).all()):
            raise NonFiniteError(f"non-finite estimates at iteration {it + 1}")
        record(state)
    if state.skipped_bins:
        log.debug("%d degenerate bin updates skipped", state.skipped_bins)
    return state.Y, state.W, trace


def default_iters(n_sources):
    """Iteration counts used for 2, 3 and 4 source mixtures."""
    return {2: 20, 3: 50, 4: 80}.get(n_sources, 20 * n_sources)
