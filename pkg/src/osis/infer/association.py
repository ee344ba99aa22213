"""Point-to-prototype association."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model.network import SIGMA2_MAX, SIGMA2_MIN


@dataclass(frozen=True)
class Prototype:
    mu: np.ndarray
    sigma2: float
    cls: int
    kind: str  # "thing" or "stuff"
    anchor: int | None = None  # index into the kept anchors for thing prototypes

    def __post_init__(self):
        if self.kind not in ("thing", "stuff"):
            raise ValueError(f"prototype kind must be 'thing' or 'stuff', got {self.kind!r}")
        if not SIGMA2_MIN <= self.sigma2 <= SIGMA2_MAX:
            raise ValueError(f"sigma2 {self.sigma2} outside [{SIGMA2_MIN}, {SIGMA2_MAX}]")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("prototype mean must be finite")


def association_score(phi: np.ndarray, proto: Prototype) -> float:
    """``-|phi - mu|^2 / (2 sigma^2) - (F / 2) ln sigma^2``."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != proto.mu.shape:
        raise ValueError(f"embedding shape {phi.shape} != prototype shape {proto.mu.shape}")
    d = phi - proto.mu
    return float(-(d @ d) / (2 * proto.sigma2) - 0.5 * len(phi) * np.log(proto.sigma2))


def score_matrix(phi: np.ndarray, mus: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    F = phi.shape[1]
    if len(mus) == 0:
        return np.zeros((len(phi), 0))
    d2 = ((phi[:, None, :] - mus[None, :, :]) ** 2).sum(-1)
    return -d2 / (2 * sigma2[None, :]) - 0.5 * F * np.log(sigma2)[None, :]


@dataclass
class Assignment:
    """``slot[i]`` indexes ``things ++ stuff``; ``len(things) + len(stuff)`` means unknown."""

    slot: np.ndarray
    scores: np.ndarray  # (N, K + 1) with -inf outside each point's candidate set
    n_things: int
    n_stuff: int

    @property
    def unknown_slot(self) -> int:
        return self.n_things + self.n_stuff


def assign_points(xyz: np.ndarray, phi: np.ndarray, things: list[Prototype], centers: np.ndarray,
                  stuff: list[Prototype], U: float, k: int) -> Assignment:
    """Argmax over each point's k nearest thing prototypes, all stuff prototypes and ``U``.

    ``centers`` holds the BEV anchor centers of ``things``; nearness is the
    Euclidean distance from the point's (x, y). Ties go to the lowest slot.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    N = len(phi)
    T, S = len(things), len(stuff)
    scores = np.full((N, T + S + 1), -np.inf)
    if T:
        mus = np.stack([p.mu for p in things])
        s2 = np.array([p.sigma2 for p in things])
        full = score_matrix(phi, mus, s2)
        if k >= T:
            scores[:, :T] = full
        else:
            d = np.hypot(xyz[:, None, 0] - centers[None, :, 0], xyz[:, None, 1] - centers[None, :, 1])
            near = np.argsort(d, axis=1, kind="stable")[:, :k]
            rows = np.arange(N)[:, None]
            scores[rows, near] = full[rows, near]
    if S:
        scores[:, T:T + S] = score_matrix(phi, np.stack([p.mu for p in stuff]), np.array([p.sigma2 for p in stuff]))
    scores[:, T + S] = U
    slot = np.argmax(scores, axis=1) if N else np.zeros(0, dtype=np.int64)
    return Assignment(slot, scores, T, S)
