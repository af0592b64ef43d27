"""Learning the GLU surrogate by backpropagating through AuxIVA-ISS.

One training step for a two-source mixture::

    STFT -> n_iters ISS iterations with GLU weights -> minimal distortion
    scaling -> (iSTFT, PIT SI-SDR) or (PIT coherence) -> -loss -> backward

Gradients are accumulated over a batch of samples, clipped with autoclip
and applied with Adam (decoupled weight decay).
"""
import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .glu import init_glu, save_archive
from .iva import AuxIvaConfig, NonFiniteError, auxiva_run
from .metrics import minimal_distortion_scale, pit_wrap
from .mixsim import load_item, read_manifest
from .stft import StftConfig, istft, stft

log = logging.getLogger(__name__)


class NonFiniteGradient(ArithmeticError):
    pass


class EmptyHistory(ValueError):
    pass


class TrainingDegenerate(RuntimeError):
    """Too many samples had to be skipped in one epoch."""


@dataclass
class TrainConfig:
    loss: str = "sisdr"  # or "coherence"
    n_iters_unrolled: int = 20
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    autoclip_percentile: float = 10.0
    weight_decay: float = 5e-5
    batch_size: int = 4
    sample_length_s: float = 6.0
    max_epochs: int = 30
    seed: int = 0
    frame_size: int = 4096
    hidden: int = 128
    dropout: float = 0.5
    detach_weights: bool = False
    sample_rate: int = 16000
    max_skip_fraction: float = 0.1

    def __post_init__(self):
        if self.loss not in ("sisdr", "coherence"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.n_iters_unrolled < 1:
            raise ValueError("n_iters_unrolled must be positive")
        if not 0 < self.autoclip_percentile <= 100:
            raise ValueError("autoclip percentile must be in (0, 100]")


@dataclass
class GradClipState:
    percentile: float = 10.0
    history: list = field(default_factory=list)


def autoclip_threshold(state: GradClipState):
    """Linear-interpolation percentile of all gradient norms seen so far."""
    if not state.history:
        raise EmptyHistory("no gradient norms recorded yet")
    return float(np.percentile(state.history, state.percentile))


def autoclip(grads, state: GradClipState):
    """Record the global norm of ``grads`` and rescale them in place if above the threshold.

    Returns the norm before clipping.
    """
    norm = float(torch.sqrt(sum((g**2).sum() for g in grads.values())))
    state.history.append(norm)
    thr = autoclip_threshold(state)
    if norm > thr:
        for g in grads.values():
            g.mul_(thr / norm)
    return norm


def adam_step(params, grads, moments, t, cfg: TrainConfig):
    """One AdamW update, in place on ``params`` (dict of tensors).

    ``moments`` maps names to ``(m, v)`` pairs and is created on first use;
    ``t`` is the 1-based step count.
    """
    lr, wd = cfg.learning_rate, cfg.weight_decay
    b1, b2 = cfg.betas
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = moments.setdefault(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.mul_(1 - lr * wd)
            p.sub_(lr * m_hat / (torch.sqrt(v_hat) + cfg.eps))
    return params, moments


def backward(loss, params):
    """Gradients of a scalar ``loss`` with respect to a dict of parameter tensors."""
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        g = torch.zeros_like(params[n]) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient for {n}")
        out[n] = g
    return out


def separate(X, model, n_iters, algo="iss", ref_mic=0, rng=None, detach_weights=False):
    """Separated and scaled spectrograms (M, F, N)."""
    cfg = AuxIvaConfig(algo=algo, n_iters=n_iters, model=model, detach_weights=detach_weights)
    Y, _, _ = auxiva_run(X, cfg, rng=rng)
    scaled, _ = minimal_distortion_scale(Y, X[ref_mic])
    return scaled


def separation_loss(scaled, refs, stft_cfg, loss):
    """Negated PIT loss for one sample; ``refs`` are (M, T) waveforms."""
    if loss == "sisdr":
        est = istft(scaled, stft_cfg)
        res = pit_wrap(est, refs[:, : est.shape[-1]], "si_sdr")
    else:
        res = pit_wrap(scaled, stft(refs, stft_cfg), "coherence")
    return -res.value


@dataclass
class Sample:
    X: torch.Tensor
    refs: torch.Tensor


def prepare(x, refs, stft_cfg, n_samples=None):
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    refs = torch.as_tensor(np.asarray(refs), dtype=torch.float64)
    if n_samples is not None:
        x, refs = x[:, :n_samples], refs[:, :n_samples]
    return Sample(stft(x, stft_cfg), refs)


def evaluate_sisdr(model, samples, stft_cfg, n_iters, algo="iss"):
    """Mean PIT SI-SDR (dB) of each sample, model in inference mode."""
    if isinstance(model, torch.nn.Module):
        model.eval()
    out = []
    with torch.no_grad():
        for s in samples:
            scaled = separate(s.X, model, n_iters, algo=algo)
            est = istft(scaled, stft_cfg)
            out.append(float(pit_wrap(est, s.refs[:, : est.shape[-1]], "si_sdr").value))
    return out


def _set_bn_momentum(net, momentum):
    for mod in net.modules():
        if isinstance(mod, torch.nn.BatchNorm1d):
            mod.momentum = momentum


def train_samples(train, val, cfg: TrainConfig, log_fh=None):
    """Train on prepared samples; returns ``(best_net, records)``.

    Records are dicts ``{epoch, split, loss_name, value, wall_ms}``.  The
    network with the best validation median SI-SDR (epoch 0 being the
    random initialization) is returned.
    """
    stft_cfg = StftConfig(cfg.frame_size)
    torch.manual_seed(cfg.seed)
    net = init_glu(stft_cfg.n_bins, cfg.hidden, cfg.dropout, seed=cfg.seed)
    if cfg.learning_rate == 0:
        # a frozen model: running statistics do not move either
        _set_bn_momentum(net, 0.0)
    params = dict(net.named_parameters())
    order_rng = np.random.default_rng(cfg.seed)
    drop_rng = torch.Generator().manual_seed(cfg.seed)
    clip = GradClipState(cfg.autoclip_percentile)
    moments = {}
    step = 0
    records = []
    t_start = time.perf_counter()

    def emit(rec):
        rec["wall_ms"] = int(1000 * (time.perf_counter() - t_start))
        records.append(rec)
        log.info("%s", rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    def validate(epoch):
        vals = evaluate_sisdr(net, val, stft_cfg, cfg.n_iters_unrolled)
        score = float(np.median(vals))
        emit({"epoch": epoch, "split": "val", "loss_name": "si_sdr", "value": score})
        return score

    best_score = validate(0)
    best = copy.deepcopy(net)
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        order = order_rng.permutation(len(train))
        losses, skipped = [], 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = {n: torch.zeros_like(p) for n, p in params.items()}
            used = 0
            for idx in batch:
                s = train[idx]
                try:
                    scaled = separate(
                        s.X,
                        net,
                        cfg.n_iters_unrolled,
                        rng=drop_rng,
                        detach_weights=cfg.detach_weights,
                    )
                    loss = separation_loss(scaled, s.refs, stft_cfg, cfg.loss)
                    grads = backward(loss, params)
                except (NonFiniteError, NonFiniteGradient) as err:
                    log.warning("epoch %d: skipping sample %d (%s)", epoch, idx, err)
                    skipped += 1
                    continue
                for n in acc:
                    acc[n] += grads[n]
                losses.append(float(loss.detach()))
                used += 1
            if used == 0:
                continue
            for g in acc.values():
                g /= used
            autoclip(acc, clip)
            step += 1
            adam_step(params, acc, moments, step, cfg)
        if skipped > cfg.max_skip_fraction * len(train):
            raise TrainingDegenerate(f"epoch {epoch}: {skipped} of {len(train)} samples skipped")
        emit(
            {
                "epoch": epoch,
                "split": "train",
                "loss_name": f"neg_{cfg.loss}",
                "value": float(np.mean(losses)) if losses else float("nan"),
            }
        )
        score = validate(epoch)
        if score > best_score:
            best_score = score
            best = copy.deepcopy(net)
    best.eval()
    return best, records


def load_split(items, split, stft_cfg, n_samples=None):
    out = []
    for it in items:
        if it.split == split:
            x, refs = load_item(it)
            out.append(prepare(x, refs, stft_cfg, n_samples))
    return out


def train(manifest, cfg: TrainConfig, out_path, log_path: Optional[str] = None):
    """Train from a dataset manifest and write the best model to ``out_path``.

    Returns the list of log records.
    """
    stft_cfg = StftConfig(cfg.frame_size)
    items = read_manifest(manifest)
    if any(it.M != 2 for it in items):
        raise ValueError("training uses two-source mixtures only")
    n_samples = int(round(cfg.sample_length_s * cfg.sample_rate))
    train_set = load_split(items, "train", stft_cfg, n_samples)
    val_set = load_split(items, "val", stft_cfg, n_samples)
    if not train_set or not val_set:
        raise ValueError("manifest needs both train and val items")
    fh = open(log_path, "w") if log_path else None
    try:
        net, records = train_samples(train_set, val_set, cfg, log_fh=fh)
    finally:
        if fh is not None:
            fh.close()
    save_archive(out_path, net)
    return records


def config_dict(cfg: TrainConfig):
    return asdict(cfg)
