"""Small dense linear algebra used by the IVA updates.

Everything works on complex128 torch tensors with arbitrary leading batch
dimensions, so a whole stack of per-frequency matrices is handled in one
call.  Matrices are tiny (M <= 4) and the routines are written out
explicitly rather than delegated to LAPACK.
"""
from typing import NamedTuple

import torch

TINY = 1e-300


class SingularMatrix(ArithmeticError):
    """A pivot vanished during elimination."""


class NotPositiveDefinite(ArithmeticError):
    """Cholesky factorization of the right-hand matrix failed."""


def as_complex(x) -> torch.Tensor:
    """Return ``x`` as a complex128 tensor (no copy when already one)."""
    x = torch.as_tensor(x)
    if x.dtype != torch.complex128:
        x = x.to(torch.complex128)
    return x


def logdet_abs(w) -> torch.Tensor:
    """log|det w| by LU decomposition with partial pivoting.

    Parameters
    ----------
    w : tensor (..., M, M)
        Complex (or real) square matrices.

    Returns
    -------
    Real tensor of shape ``w.shape[:-2]``.

    Raises
    ------
    SingularMatrix
        If any pivot magnitude falls below 1e-300.
    """
    a = as_complex(w).detach().clone()
    m = a.shape[-1]
    if a.shape[-2] != m:
        raise ValueError(f"expected square matrices, got shape {tuple(a.shape)}")
    batch = a.shape[:-2]
    a = a.reshape(-1, m, m)
    rows = torch.arange(a.shape[0])
    out = torch.zeros(a.shape[0], dtype=torch.float64)
    for col in range(m):
        piv = col + torch.argmax(a[:, col:, col].abs(), dim=1)
        # swap the pivot row into place
        top = a[rows, col].clone()
        a[rows, col] = a[rows, piv]
        a[rows, piv] = top
        p = a[:, col, col]
        mag = p.abs()
        if bool((mag < TINY).any()):
            raise SingularMatrix(f"pivot {col} vanished")
        out += torch.log(mag)
        if col + 1 < m:
            factor = a[:, col + 1 :, col] / p[:, None]
            a[:, col + 1 :, col:] -= factor[:, :, None] * a[:, None, col, col:]
    return out.reshape(batch)


class Gevd2(NamedTuple):
    eigenvalues: torch.Tensor  # (..., 2), descending
    eigenvectors: torch.Tensor  # (..., 2, 2), column i is v_i
    degenerate: torch.Tensor  # (...,) bool
    valid: torch.Tensor  # (...,) bool, False where b is not positive definite


def gevd2(a, b, check: bool = True) -> Gevd2:
    """Generalized eigendecomposition ``a v = lam b v`` of 2x2 Hermitian pairs.

    ``b`` is factored as ``L L^H`` and the standard problem for
    ``C = L^-1 a L^-H`` is solved in closed form.  Eigenvectors are
    normalized so that ``v^H b v = 1`` and eigenvalues are sorted in
    descending order.  When the two eigenvalues coincide (relative gap below
    1e-12) the pair is flagged as degenerate and the eigenvectors of ``C``
    are taken to be the canonical basis vectors.

    Raises
    ------
    NotPositiveDefinite
        If ``b`` fails the Cholesky factorization (only when ``check``).
    """
    a = as_complex(a)
    b = as_complex(b)
    b00 = b[..., 0, 0].real
    b10 = b[..., 1, 0]
    l00_sq = b00
    bad = l00_sq <= 0
    l00 = torch.sqrt(torch.where(bad, torch.ones_like(l00_sq), l00_sq))
    l10 = b10 / l00
    l11_sq = b[..., 1, 1].real - l10.abs() ** 2
    # l11^2 = b11 (1 - |rho|^2): reject near-unit correlation, independent of scale
    bad = bad | (l11_sq <= 1e-14 * b[..., 1, 1].real.abs())
    if check and bool(bad.any()):
        raise NotPositiveDefinite("right-hand matrix is not positive definite")
    l11 = torch.sqrt(torch.where(bad, torch.ones_like(l11_sq), l11_sq))

    # C = L^-1 a L^-H with L = [[l00, 0], [l10, l11]]
    a00 = a[..., 0, 0].real
    a11 = a[..., 1, 1].real
    a10 = a[..., 1, 0]
    c00 = a00 / l00**2
    # second row of L^-1 a: (a10 - l10 * a00 / l00) / l11, ...
    t10 = (a10 - l10 * a00 / l00) / l11
    t11 = (a11 - l10 * a10.conj() / l00) / l11
    c10 = t10 / l00
    c11 = (t11 - t10 * l10.conj() / l00).real / l11

    mean = 0.5 * (c00 + c11)
    half = 0.5 * (c00 - c11)
    rad = torch.sqrt(half**2 + c10.abs() ** 2)
    # the eigenvalue of smaller magnitude comes from the determinant to avoid
    # cancellation in mean - rad when the two differ by many orders
    det = c00 * c11 - c10.abs() ** 2
    big = torch.where(mean >= 0, mean + rad, mean - rad)
    other = torch.where(big != 0, det / torch.where(big != 0, big, torch.ones_like(big)), mean - rad)
    lam = torch.where(
        (mean >= 0)[..., None],
        torch.stack([big, other], dim=-1),
        torch.stack([other, big], dim=-1),
    )
    degenerate = rad <= 0.5e-12 * torch.maximum(lam[..., 0].abs(), lam[..., 1].abs())

    # eigenvector of C for the largest eigenvalue; two candidate formulas,
    # keep the better conditioned one
    lam1 = lam[..., 0]
    cand_a = torch.stack([(lam1 - c11).to(c10.dtype), c10], dim=-1)
    cand_b = torch.stack([c10.conj(), (lam1 - c00).to(c10.dtype)], dim=-1)
    use_a = (lam1 - c11).abs() >= (lam1 - c00).abs()
    u1 = torch.where(use_a[..., None], cand_a, cand_b)
    nrm = torch.linalg.vector_norm(u1, dim=-1, keepdim=True)
    e1 = torch.zeros_like(u1)
    e1[..., 0] = 1.0
    u1 = torch.where(degenerate[..., None] | (nrm[..., 0] == 0)[..., None], e1, u1 / nrm.clamp_min(TINY))
    # orthogonal complement
    u2 = torch.stack([-u1[..., 1].conj(), u1[..., 0].conj()], dim=-1)
    u = torch.stack([u1, u2], dim=-1)

    # v = L^-H u
    v1 = u[..., 1, :] / l11[..., None]
    v0 = (u[..., 0, :] - l10.conj()[..., None] * v1) / l00[..., None]
    v = torch.stack([v0, v1], dim=-2)
    return Gevd2(lam, v, degenerate & ~bad, ~bad)


def rank1_row_update(w, v, k: int) -> torch.Tensor:
    """Return ``(I - v e_k^T) w``: every row m loses ``v_m`` times row k.

    ``w`` is (..., M, M) and ``v`` is (..., M).  The determinant of the
    result is ``(1 - v_k) det(w)``.
    """
    w = as_complex(w)
    v = as_complex(v)
    m = w.shape[-1]
    if v.shape[-1] != m or not 0 <= k < m:
        raise ValueError("shape mismatch in rank-1 row update")
    return w - v[..., :, None] * w[..., k : k + 1, :]
