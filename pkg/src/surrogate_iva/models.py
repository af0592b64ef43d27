"""Surrogate weights r[m, f, n] for the auxiliary-function updates.

A source model is either the string ``"laplace"``, the string ``"gauss"``
or a :class:`~surrogate_iva.glu.GluNet`.  The same model is applied to
every source.
"""
import torch

from .glu import WEIGHT_FLOOR, GluNet

RADIUS_FLOOR = 1e-6
POWER_FLOOR = 1e-12
CLASSICAL = ("laplace", "gauss")


def laplace_weights(Y):
    """1 / (2 r_n), r_n the l2 norm of frame n; Y is (..., F, N)."""
    r = torch.sqrt((Y.abs() ** 2).sum(dim=-2, keepdim=True)).clamp_min(RADIUS_FLOOR)
    u = 0.5 / r
    return u.expand(Y.shape).clamp_min(WEIGHT_FLOOR)


def gauss_weights(Y):
    """Inverse mean power of each frame; Y is (..., F, N)."""
    lam = (Y.abs() ** 2).mean(dim=-2, keepdim=True).clamp_min(POWER_FLOOR)
    return (1.0 / lam).expand(Y.shape).clamp_min(WEIGHT_FLOOR)


def check_model(model):
    if isinstance(model, GluNet):
        return model
    if model not in CLASSICAL:
        raise ValueError(f"unknown source model {model!r}")
    return model


def model_weights(model, Y, rng=None):
    """Weights of shape (M, F, N) for the current estimates ``Y`` (M, F, N).

    With a GLU network the M sources form one batch; its mode (train/eval)
    is left as set by the caller.
    """
    check_model(model)
    if model == "laplace":
        return laplace_weights(Y)
    if model == "gauss":
        return gauss_weights(Y)
    return model(Y, rng=rng)
