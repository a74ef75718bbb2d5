"""PCA whitening and symmetric fixed-point FastICA.

The data matrix is modelled as ``X = A S`` with ``A`` (m x k) the mixing
matrix whose columns are clinical signatures and ``S`` (k x n) the source
expressions. New standardized data is projected with the pseudoinverse of
``A``, realized as whitening followed by the orthonormal unmixing ``W``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import binio
from .errors import ConvergenceWarning, InputError, RankReductionWarning, SchemaError
from .sampling import DataMatrix

EIG_RTOL = 1e-10


@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray  # (m,)
    whitening: np.ndarray  # k x m
    dewhitening: np.ndarray  # m x k
    eigenvalues: np.ndarray  # all m, descending

    @property
    def k(self) -> int:
        return self.whitening.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.whitening @ (X - self.mean[:, None])


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    final_delta: float
    converged: bool


@dataclass(frozen=True)
class SourceMatrix:
    values: np.ndarray  # k x n
    patient_ids: tuple[str, ...] = ()
    dates: tuple[date, ...] = ()

    @property
    def k(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class IcaModel:
    mixing: np.ndarray  # m x k
    unmixing: np.ndarray  # k x k, orthonormal rows
    whitening: WhiteningTransform
    report: ConvergenceReport

    @property
    def k(self) -> int:
        return self.mixing.shape[1]

    @property
    def m(self) -> int:
        return self.mixing.shape[0]

    def save(self, path: str | Path) -> None:
        w = self.whitening
        binio.write(
            path,
            "ica-model",
            {
                "mixing": self.mixing,
                "unmixing": self.unmixing,
                "mean": w.mean,
                "whitening": w.whitening,
                "dewhitening": w.dewhitening,
                "eigenvalues": w.eigenvalues,
            },
            {
                "iterations": self.report.iterations,
                "final_delta": self.report.final_delta,
                "converged": self.report.converged,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "IcaModel":
        a, meta = binio.read(path, "ica-model")
        wt = WhiteningTransform(a["mean"], a["whitening"], a["dewhitening"], a["eigenvalues"])
        rep = ConvergenceReport(int(meta["iterations"]), float(meta["final_delta"]), bool(meta["converged"]))
        return cls(a["mixing"], a["unmixing"], wt, rep)


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=float)


def whiten(X, k: int) -> tuple[np.ndarray, WhiteningTransform]:
    """Project centered rows onto the top-k covariance eigenvectors with unit variance.

    Components whose eigenvalue is below ``EIG_RTOL`` times the largest are
    dropped and a RankReductionWarning is issued.
    """
    V = _values(X)
    m, n = V.shape
    if not 1 <= k <= min(m, n):
        raise InputError(f"k={k} must lie in [1, min(m, n)={min(m, n)}]")
    mean = V.mean(axis=1)
    Xc = V - mean[:, None]
    cov = Xc @ Xc.T / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = int(np.sum(evals[:k] > EIG_RTOL * max(evals[0], 0.0))) if evals[0] > 0 else 0
    if keep == 0:
        raise InputError("data matrix has zero variance")
    if keep < k:
        warnings.warn(f"requested k={k} exceeds numerical rank; using k={keep}", RankReductionWarning, stacklevel=2)
    E, lam = evecs[:, :keep], evals[:keep]
    wt = WhiteningTransform(
        mean=mean,
        whitening=(E / np.sqrt(lam)).T,
        dewhitening=E * np.sqrt(lam),
        eigenvalues=evals,
    )
    return wt.whitening @ Xc, wt


def _sym_decorrelate(W: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(W @ W.T)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def _contrast(name: str):
    if name == "logcosh":

        def f(y):
            t = np.tanh(y)
            return t, 1.0 - t * t

    elif name == "cube":

        def f(y):
            return y**3, 3.0 * y * y

    else:
        raise InputError(f"unknown nonlinearity {name!r}")
    return f


def fast_ica(
    Z: np.ndarray,
    nonlinearity: str = "logcosh",
    tol: float = 1e-4,
    max_iter: int = 200,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, ConvergenceReport]:
    """Symmetric fixed-point FastICA on whitened data ``Z`` (k x n).

    Returns ``(W, S, report)`` with ``S = W Z``. Non-convergence is reported
    (and warned about), not raised.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    Z = np.asarray(Z, dtype=float)
    k, n = Z.shape
    g = _contrast(nonlinearity)
    rng = np.random.default_rng(seed)
    W = _sym_decorrelate(rng.standard_normal((k, k)))
    delta = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        gy, dgy = g(W @ Z)
        W_new = _sym_decorrelate(gy @ Z.T / n - dgy.mean(axis=1)[:, None] * W)
        delta = float(np.max(np.abs(np.abs(np.sum(W_new * W, axis=1)) - 1.0)))
        W = W_new
        if delta < tol:
            break
    converged = delta < tol
    if not converged:
        warnings.warn(f"FastICA did not converge in {max_iter} iterations (delta={delta:.2e})", ConvergenceWarning, stacklevel=2)
    return W, W @ Z, ConvergenceReport(it, delta, converged)


def compose_mixing(whitening: WhiteningTransform, W: np.ndarray) -> np.ndarray:
    if W.shape != (whitening.k, whitening.k):
        raise SchemaError(f"unmixing shape {W.shape} does not match k={whitening.k}")
    return whitening.dewhitening @ W.T


def fit_ica(
    X,
    k: int,
    nonlinearity: str = "logcosh",
    tol: float = 1e-4,
    max_iter: int = 200,
    seed: int = 0,
) -> tuple[IcaModel, SourceMatrix]:
    """Whiten, unmix and fix source signs so each signature's largest weight is positive."""
    Z, wt = whiten(X, k)
    W, _, report = fast_ica(Z, nonlinearity, tol, max_iter, seed)
    A = compose_mixing(wt, W)
    flip = np.sign(A[np.argmax(np.abs(A), axis=0), np.arange(A.shape[1])])
    flip[flip == 0] = 1.0
    W = W * flip[:, None]
    A = A * flip[None, :]
    model = IcaModel(A, W, wt, report)
    return model, project(X, model)


def project(E, model: IcaModel) -> SourceMatrix:
    """Source expressions ``A^+ (E - mean)`` of standardized columns."""
    V = _values(E)
    if V.shape[0] != model.m:
        raise SchemaError(f"matrix has {V.shape[0]} rows, model expects {model.m}")
    S = model.unmixing @ model.whitening.apply(V)
    if isinstance(E, DataMatrix):
        return SourceMatrix(S, E.patient_ids, E.dates)
    return SourceMatrix(S)


def reconstruction_residual(X, model: IcaModel) -> float:
    """Relative Frobenius residual of ``A S`` against the centered data."""
    V = _values(X)
    Xc = V - model.whitening.mean[:, None]
    S = project(V, model).values
    return float(np.linalg.norm(Xc - model.mixing @ S) / np.linalg.norm(Xc))


def amari_index(A_est: np.ndarray, A_true: np.ndarray) -> float:
    """Normalized Amari divergence of ``pinv(A_est) @ A_true`` from a scaled permutation.

    Lies in [0, 1]; 0 iff the columns agree up to permutation, sign and scale.
    """
    A_est = np.asarray(A_est, float)
    A_true = np.asarray(A_true, float)
    if A_est.shape != A_true.shape:
        raise InputError("mixing matrices must have the same shape")
    k = A_true.shape[1]
    if np.linalg.matrix_rank(A_true) < k:
        raise InputError("A_true is rank deficient")
    if k == 1:
        return 0.0
    P = np.abs(np.linalg.pinv(A_est) @ A_true)
    rows = (P.sum(axis=1) / P.max(axis=1) - 1.0).sum()
    cols = (P.sum(axis=0) / P.max(axis=0) - 1.0).sum()
    return float((rows + cols) / (2.0 * k * (k - 1)))


def match_components(S_est: np.ndarray, S_true: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hungarian matching on |correlation|.

    Returns ``(perm, corr)`` where estimated row ``perm[i]`` is matched to true
    row ``i`` with signed correlation ``corr[i]``.
    """
    k = S_true.shape[0]
    C = np.corrcoef(S_est, S_true)[: S_est.shape[0], S_est.shape[0] :]
    r, c = linear_sum_assignment(-np.abs(C))
    perm = np.empty(k, dtype=int)
    perm[c] = r
    return perm, C[perm, np.arange(k)]
