"""Hopfield-energy and attention-entropy diagnostics plus toy distribution metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------- Hopfield

@dataclass
class HopfieldInstance:
    """Stored patterns ``X`` (d x N, one pattern per column) and a query ``zeta``."""

    X: np.ndarray
    zeta: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.zeta = np.asarray(self.zeta, dtype=np.float64)
        if self.X.ndim != 2 or self.zeta.shape != (self.X.shape[0],):
            raise ValueError(f"need X (d, N) and zeta (d,), got {self.X.shape}, {self.zeta.shape}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def M(self) -> float:
        return float(np.max(np.linalg.norm(self.X, axis=0)))


def _lse(beta: float, z: np.ndarray) -> float:
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(beta * (z - m)))) / beta)


def hopfield_energy(inst: HopfieldInstance, zeta: np.ndarray | None = None) -> float:
    """-lse(beta, X^T zeta) + zeta.zeta / 2 + log(N) / beta + M^2 / 2."""
    z = inst.zeta if zeta is None else np.asarray(zeta, dtype=np.float64)
    return (-_lse(inst.beta, inst.X.T @ z) + 0.5 * float(z @ z)
            + math.log(inst.N) / inst.beta + 0.5 * inst.M ** 2)


def hopfield_update(inst: HopfieldInstance, zeta: np.ndarray | None = None) -> np.ndarray:
    """One retrieval step ``X softmax(beta X^T zeta)``."""
    z = inst.zeta if zeta is None else np.asarray(zeta, dtype=np.float64)
    logits = inst.beta * (inst.X.T @ z)
    p = np.exp(logits - logits.max())
    return inst.X @ (p / p.sum())


# ---------------------------------------------------------------- entropy

def attention_entropy(attn: np.ndarray) -> float:
    """Mean row entropy in nats (``0 log 0 = 0``) over batch, heads and queries."""
    p = np.asarray(attn, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return float(np.mean(-np.sum(p * logp, axis=-1)))


# ---------------------------------------------------------------- Frechet

def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of the square root is taken from the eigenvalues of the
    symmetric matrix S1^{1/2} S2 S1^{1/2}, clamped at zero.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    w1, v1 = np.linalg.eigh(0.5 * (s1 + s1.T))
    root1 = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    inner = root1 @ s2 @ root1
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    scale = max(1.0, float(np.max(np.abs(eig))) if eig.size else 1.0)
    if np.min(eig) < -1e-8 * scale:
        raise NumericError(f"covariance product is not PSD (min eigenvalue {np.min(eig):.3e})")
    tr_sqrt = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)


def feature_moments(features: np.ndarray, ridge: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance; ``ridge`` is added only when n <= d (rank deficient)."""
    f = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    n, d = f.shape
    if n < 2:
        raise ValueError("need at least two samples")
    mu = f.mean(axis=0)
    cov = np.atleast_2d(np.cov(f, rowvar=False))
    if n < d + 1:
        cov = cov + ridge * np.eye(d)
    return mu, cov


def frechet_gaussian(real: np.ndarray, fake: np.ndarray) -> float:
    mu_r, s_r = feature_moments(real)
    mu_f, s_f = feature_moments(fake)
    return frechet_from_moments(mu_r, s_r, mu_f, s_f)


# ---------------------------------------------------------------- PRDC

def _pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 64) -> np.ndarray:
    # explicit differences (not the |a|^2 + |b|^2 - 2ab expansion) so identical
    # points are at distance exactly 0
    out = np.empty((len(a), len(b)))
    for i in range(0, len(a), chunk):
        diff = a[i:i + chunk, None, :] - b[None, :, :]
        out[i:i + chunk] = np.sqrt(np.sum(diff * diff, axis=-1))
    return out


def knn_radii(features: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    d = _pairwise(features, features)
    return np.sort(d, axis=1)[:, k]


def prdc(real: np.ndarray, fake: np.ndarray, k: int = 5) -> dict[str, float]:
    """Precision, recall, density and coverage from k-NN balls (strict ``<``)."""
    real = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    fake = np.asarray(fake, dtype=np.float64).reshape(len(fake), -1)
    if len(real) < k + 1 or len(fake) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points per set")
    r_real = knn_radii(real, k)
    r_fake = knn_radii(fake, k)
    d_rf = _pairwise(real, fake)                       # (n_real, n_fake)
    in_real = d_rf < r_real[:, None]
    return {
        "precision": float(in_real.any(axis=0).mean()),
        "recall": float((d_rf < r_fake[None, :]).any(axis=1).mean()),
        "density": float(int(in_real.sum()) / (k * len(fake))),
        "coverage": float((d_rf.min(axis=1) < r_real).mean()),
    }


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    frechet: float
    precision: float
    recall: float
    density: float
    coverage: float
    n_real: int = 0
    n_fake: int = 0
    entropy_trace: list[tuple[int, int, float]] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["entropy_trace"] = [list(r) for r in self.entropy_trace]
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(self.to_json())
        write_entropy_csv(self.entropy_trace, d / "entropy_trace.csv")


def write_entropy_csv(rows, path: str | Path) -> None:
    lines = ["step,layer,mean_entropy_nats"]
    lines += [f"{s},{layer},{format(v, '.17g')}" for s, layer, v in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_entropy_csv(path: str | Path) -> list[tuple[int, int, float]]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for r in rows:
        s, layer, v = r.split(",")
        out.append((int(s), int(layer), float(v)))
    return out


def evaluate(real: np.ndarray, fake: np.ndarray, k: int = 5,
             entropy_trace=None) -> MetricReport:
    return MetricReport(frechet=frechet_gaussian(real, fake), n_real=len(real), n_fake=len(fake),
                        entropy_trace=list(entropy_trace or []), **prdc(real, fake, k))
