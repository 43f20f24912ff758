"""State feature maps for controllers and value functions."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .errors import DimensionMismatch, DomainError


def monomial_exponents(d: int, degree: int) -> np.ndarray:
    """Exponent table in graded-lex order, constant term first."""
    rows = [np.zeros(d, dtype=int)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            e = np.zeros(d, dtype=int)
            for i in combo:
                e[i] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(-1, d)


@dataclass(frozen=True)
class FeatureMap:
    kind: str
    input_dim: int
    degree: int = 1
    count: int = 0
    bandwidth: np.ndarray | None = None
    seed: int | None = None
    frequencies: np.ndarray | None = field(default=None, repr=False)
    phases: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "polynomial":
            if self.degree < 0:
                raise DomainError("polynomial degree must be non-negative")
            object.__setattr__(self, "_exponents",
                               monomial_exponents(self.input_dim, self.degree))
        elif self.kind == "fourier":
            freqs = np.asarray(self.frequencies, dtype=float).reshape(self.count, self.input_dim)
            phases = np.asarray(self.phases, dtype=float).reshape(self.count)
            object.__setattr__(self, "frequencies", freqs)
            object.__setattr__(self, "phases", phases)
        else:
            raise DomainError(f"unknown feature kind {self.kind!r}")

    @property
    def size(self) -> int:
        return feature_count(self)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return eval_features(self, x)

    def to_dict(self) -> dict:
        if self.kind == "polynomial":
            return {"kind": "polynomial", "input_dim": self.input_dim, "degree": self.degree}
        return {"kind": "fourier", "input_dim": self.input_dim, "count": self.count,
                "bandwidth": np.asarray(self.bandwidth).tolist(), "seed": self.seed,
                "frequencies": self.frequencies.tolist(), "phases": self.phases.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMap":
        if data["kind"] == "polynomial":
            return polynomial(data["input_dim"], data["degree"])
        return cls(kind="fourier", input_dim=data["input_dim"], count=data["count"],
                   bandwidth=np.asarray(data["bandwidth"], dtype=float), seed=data.get("seed"),
                   frequencies=np.asarray(data["frequencies"], dtype=float),
                   phases=np.asarray(data["phases"], dtype=float))


def polynomial(input_dim: int, degree: int) -> FeatureMap:
    return FeatureMap(kind="polynomial", input_dim=input_dim, degree=degree)


def fourier(input_dim: int, count: int, bandwidth, seed: int = 0) -> FeatureMap:
    """Random Fourier features cos(W x + b) with W ~ N(0, diag(1/bandwidth^2))."""
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (input_dim,)).copy()
    if np.any(bw <= 0.0):
        raise DomainError("bandwidths must be positive")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(size=(count, input_dim)) / bw
    phases = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return FeatureMap(kind="fourier", input_dim=input_dim, count=count, bandwidth=bw,
                      seed=seed, frequencies=freqs, phases=phases)


def feature_count(fmap: FeatureMap) -> int:
    if fmap.kind == "polynomial":
        return comb(fmap.degree + fmap.input_dim, fmap.input_dim)
    return fmap.count


def eval_features(fmap: FeatureMap, x: np.ndarray) -> np.ndarray:
    """Evaluate features on ``x`` of shape (..., input_dim)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (fmap.input_dim,):
        raise DimensionMismatch(
            f"expected trailing dimension {fmap.input_dim}, got shape {x.shape}")
    if fmap.kind == "polynomial":
        exps = fmap._exponents
        if fmap.degree == 0:
            return np.ones(x.shape[:-1] + (1,))
        powers = x[..., None, :] ** exps
        return np.prod(powers, axis=-1)
    return np.cos(x @ fmap.frequencies.T + fmap.phases)
