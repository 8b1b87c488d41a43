"""Gaussian reparameterization y = mu + L z and reverse-mode through Cholesky.

Base samples come from a counter-based Philox stream keyed on ``(seed, ...)``
so that a given key always yields the same variates regardless of call order.
Normals are produced from uniforms with the Box-Muller transform.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InputError, NotPositiveDefiniteError, NumericalError

BaseMode = Literal["deterministic", "stochastic"]

# Jitter ladder relative to the mean diagonal: 0, then 1e-10 .. 1e-4 in decades.
JITTER_LADDER = (0.0,) + tuple(10.0 ** -k for k in range(10, 3, -1))


def _philox_key(key) -> np.ndarray:
    """Reduce an arbitrary tuple of non-negative ints to a 128-bit Philox key."""
    words = np.random.SeedSequence([int(k) for k in np.atleast_1d(key)])
    return words.generate_state(2, dtype=np.uint64)


def uniform_stream(n: int, key) -> np.ndarray:
    """``n`` uniforms in [0, 1) from the stream identified by ``key``."""
    gen = np.random.Generator(np.random.Philox(key=_philox_key(key)))
    return gen.random(n)


def box_muller(u: np.ndarray) -> np.ndarray:
    """Map an even-length vector of uniforms in [0, 1) to standard normals."""
    u1 = 1.0 - u[0::2]  # (0, 1] so the log is finite
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(u.shape[0])
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out


def normal_stream(shape, key) -> np.ndarray:
    """Standard normals of the given shape keyed on ``key`` (a tuple of ints)."""
    shape = tuple(np.atleast_1d(shape).astype(int))
    n = int(np.prod(shape))
    u = uniform_stream(n + (n % 2), key)
    return box_muller(u)[:n].reshape(shape)


@dataclass(frozen=True)
class BaseSamples:
    z: np.ndarray
    mode: str = "deterministic"
    seed: int = 0

    @property
    def m(self) -> int:
        return self.z.shape[0]

    @property
    def q(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class SamplePaths:
    y: np.ndarray


def draw_base_samples(m: int, q: int, mode: BaseMode = "deterministic", seed: int = 0) -> BaseSamples:
    """Draw an ``m x q`` tensor of standard normal variates.

    Deterministic mode is keyed on ``(seed, q)``, so rows for a smaller ``m``
    are a prefix of those for a larger one. Stochastic mode mixes in fresh OS
    entropy and differs on every call.
    """
    if m < 1 or q < 1:
        raise InputError(f"need m >= 1 and q >= 1, got m={m}, q={q}")
    if mode == "deterministic":
        key = (seed, q)
    elif mode == "stochastic":
        fresh = np.random.SeedSequence().entropy % (2**63)
        key = (seed, q, fresh)
    else:
        raise InputError(f"unknown base-sample mode {mode!r}")
    z = normal_stream((m, q), key)
    z.setflags(write=False)
    return BaseSamples(z=z, mode=mode, seed=seed)


def reparameterize(mu, chol, z) -> SamplePaths:
    """Rows ``y_k = mu + L z_k``."""
    mu = np.asarray(mu, dtype=float)
    chol = np.asarray(chol, dtype=float)
    zz = z.z if isinstance(z, BaseSamples) else np.asarray(z, dtype=float)
    q = mu.shape[-1]
    if chol.shape[-2:] != (q, q) or zz.shape[-1] != q:
        raise InputError(
            f"shape mismatch: mu {mu.shape}, chol {chol.shape}, z {zz.shape}"
        )
    if np.any(np.triu(chol, 1) != 0.0):
        raise InputError("chol must be lower-triangular")
    return SamplePaths(y=mu + zz @ chol.T)


def stable_cholesky(cov, max_jitter: float | None = None):
    """Cholesky with an escalating diagonal jitter.

    Tries jitter 0 first, then ``c * tr(cov) / q`` for ``c`` in 1e-10 .. 1e-4.
    Returns ``(L, jitter_used)`` with ``L L^T = cov + jitter_used * I``.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise InputError(f"cov must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-8, rtol=0.0):
        raise InputError("cov is not symmetric within 1e-8")
    q = cov.shape[0]
    scale = np.trace(cov) / q
    if not scale > 0.0:
        scale = 1.0
    eye = np.eye(q)
    for c in JITTER_LADDER:
        jitter = c * scale
        if max_jitter is not None and jitter > max_jitter:
            break
        try:
            return np.linalg.cholesky(cov + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError(
        f"matrix of size {q} not positive definite up to jitter "
        f"{max_jitter if max_jitter is not None else JITTER_LADDER[-1] * scale:.3g}"
    )


def batch_cholesky(cov: np.ndarray):
    """Vectorized :func:`stable_cholesky` over leading batch dimensions.

    Never raises; members that fail at every jitter level come back as NaN.
    """
    cov = np.asarray(cov, dtype=float)
    q = cov.shape[-1]
    try:
        return np.linalg.cholesky(cov), np.zeros(cov.shape[:-2])
    except np.linalg.LinAlgError:
        pass
    flat = cov.reshape(-1, q, q)
    chol = np.empty_like(flat)
    jitter = np.empty(flat.shape[0])
    eye = np.eye(q)
    for i, c in enumerate(flat):
        scale = np.trace(c) / q
        if not scale > 0.0:
            scale = 1.0
        for level in JITTER_LADDER:
            try:
                chol[i] = np.linalg.cholesky(c + level * scale * eye)
                jitter[i] = level * scale
                break
            except np.linalg.LinAlgError:
                continue
        else:
            chol[i] = np.nan
            jitter[i] = np.nan
    return chol.reshape(cov.shape), jitter.reshape(cov.shape[:-2])


def cholesky_pullback(chol, chol_bar, check: bool = True) -> np.ndarray:
    """Sensitivity w.r.t. the covariance given sensitivity w.r.t. its Cholesky factor.

    Runs the unblocked (level-2) backward recurrence over columns, last to
    first, and returns the symmetric gradient ``Sigma_bar`` such that
    ``dF = sum(Sigma_bar * dSigma)`` for symmetric perturbations. Leading
    batch dimensions are supported.
    """
    L = np.asarray(chol, dtype=float)
    A = np.tril(np.asarray(chol_bar, dtype=float)).copy()
    if L.shape != A.shape or L.shape[-1] != L.shape[-2]:
        raise InputError(f"shape mismatch: chol {L.shape}, chol_bar {A.shape}")
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if check and (np.any(diag == 0.0) or not np.all(np.isfinite(diag))):
        raise NumericalError("Cholesky factor has a singular diagonal")
    n = L.shape[-1]
    for j in range(n - 1, -1, -1):
        d = L[..., j, j]
        r = L[..., j, :j]
        c = L[..., j + 1:, j]
        B = L[..., j + 1:, :j]
        cbar = A[..., j + 1:, j]
        dbar = A[..., j, j] - np.sum(c * cbar, axis=-1) / d
        dbar = dbar / d
        cbar = cbar / d[..., None]
        A[..., j + 1:, j] = cbar
        A[..., j, :j] -= dbar[..., None] * r
        A[..., j, :j] -= np.einsum("...k,...kl->...l", cbar, B)
        A[..., j + 1:, :j] -= cbar[..., :, None] * r[..., None, :]
        A[..., j, j] = 0.5 * dbar
    return 0.5 * (A + np.swapaxes(A, -1, -2))
