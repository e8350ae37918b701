"""Dataset, hyperparameter and run-configuration types shared across the package."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed rating input. ``code`` is a stable machine-readable tag."""

    code = "DataError"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class DuplicatePair(DataError):
    code = "DuplicatePair"


class RatingOutOfRange(DataError):
    code = "RatingOutOfRange"


class InconsistentAspectCount(DataError):
    code = "InconsistentAspectCount"


class HyperparameterError(ValueError):
    code = "HyperparameterError"


@dataclass(frozen=True)
class Observation:
    user: int
    item: int
    ratings: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class RatingsDataset:
    """Sparse multi-aspect ordinal ratings with dense 0-based user/item indices.

    Observations are held column-wise: ``users`` and ``items`` are length-N
    index arrays and ``ratings`` is an N x A array of levels in 1..K.
    ``user_ids`` / ``item_ids`` list external ids in dense-index order.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    num_levels: int
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    aspect_names: tuple[str, ...]

    def __post_init__(self):
        for arr in (self.users, self.items, self.ratings):
            arr.setflags(write=False)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_aspects(self) -> int:
        return len(self.aspect_names)

    @property
    def num_observations(self) -> int:
        return len(self.users)

    def __len__(self) -> int:
        return self.num_observations

    @property
    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(int(u), int(i), tuple(int(x) for x in r))
            for u, i, r in zip(self.users, self.items, self.ratings)
        ]

    def rows(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """External-id rows, suitable for writing back out and re-validating."""
        return [
            (self.user_ids[o.user], self.item_ids[o.item], o.ratings)
            for o in self.observations
        ]

    def subset(self, index: np.ndarray) -> "RatingsDataset":
        """Observations at ``index``, keeping the full id maps so indices stay aligned."""
        index = np.asarray(index)
        return RatingsDataset(
            users=self.users[index].copy(),
            items=self.items[index].copy(),
            ratings=self.ratings[index].copy(),
            num_levels=self.num_levels,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            aspect_names=self.aspect_names,
        )

    def __eq__(self, other):
        if not isinstance(other, RatingsDataset):
            return NotImplemented
        return (
            self.num_levels == other.num_levels
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and self.aspect_names == other.aspect_names
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ratings, other.ratings)
        )

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)


def validate_dataset(
    raw: Iterable[tuple[object, object, Sequence]],
    num_levels: int,
    aspect_names: Sequence[str] | None = None,
) -> RatingsDataset:
    """Build a :class:`RatingsDataset` from ``(user_id, item_id, ratings)`` rows.

    Dense indices follow first appearance. Every row must carry all aspects.
    """
    raw = list(raw)
    if not raw:
        raise DataError("no ratings supplied")
    if num_levels < 1:
        raise DataError(f"num_levels must be >= 1, got {num_levels}")

    num_aspects = len(raw[0][2]) if aspect_names is None else len(aspect_names)
    if num_aspects < 1:
        raise InconsistentAspectCount("rows must contain at least one aspect rating")
    if aspect_names is None:
        aspect_names = [f"aspect{a + 1}" for a in range(num_aspects)]

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    users, items, ratings = [], [], []
    for row_no, (user, item, values) in enumerate(raw):
        values = list(values)
        if len(values) != num_aspects:
            raise InconsistentAspectCount(
                f"row {row_no} has {len(values)} ratings, expected {num_aspects}",
                row=row_no,
            )
        levels = []
        for value in values:
            if isinstance(value, (bool, np.bool_)) or not float(value).is_integer():
                raise DataError(f"rating {value!r} is not an integer", row=row_no)
            level = int(value)
            if not 1 <= level <= num_levels:
                raise RatingOutOfRange(
                    f"rating {level} outside 1..{num_levels}", value=level, row=row_no
                )
            levels.append(level)
        u = user_index.setdefault(str(user), len(user_index))
        i = item_index.setdefault(str(item), len(item_index))
        if (u, i) in seen:
            raise DuplicatePair(
                f"duplicate rating for user {user!r} item {item!r}", user=user, item=item
            )
        seen.add((u, i))
        users.append(u)
        items.append(i)
        ratings.append(levels)

    return RatingsDataset(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=np.int64).reshape(len(users), num_aspects),
        num_levels=int(num_levels),
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
        aspect_names=tuple(aspect_names),
    )


def _check_spd(name: str, matrix: np.ndarray, dim: int) -> None:
    if matrix.shape != (dim, dim):
        raise HyperparameterError(f"{name} must be {dim}x{dim}, got {matrix.shape}")
    if not np.allclose(matrix, matrix.T):
        raise HyperparameterError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        raise HyperparameterError(f"{name} is not positive definite") from None


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    """Fixed model constants.

    ``Lambda`` is the prior covariance of the group bias offsets, ``B`` the
    covariance of latent responses around ``z_i + m_g``; the ``niw_*`` fields
    parameterize the normal-inverse-Wishart prior on the item-quality mean and
    covariance.
    """

    alpha: np.ndarray
    Lambda: np.ndarray
    B: np.ndarray
    niw_mu0: np.ndarray
    niw_kappa0: float
    niw_nu0: float
    niw_Psi0: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "Lambda", "B", "niw_mu0", "niw_Psi0"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        dim = self.niw_mu0.shape[0]
        if self.alpha.ndim != 1 or self.alpha.size < 1:
            raise HyperparameterError("alpha must be a non-empty vector")
        if np.any(self.alpha <= 0):
            raise HyperparameterError("alpha entries must be positive")
        for name in ("Lambda", "B", "niw_Psi0"):
            _check_spd(name, getattr(self, name), dim)
        if self.niw_kappa0 <= 0:
            raise HyperparameterError("niw_kappa0 must be positive")
        if self.niw_nu0 <= dim - 1:
            raise HyperparameterError(f"niw_nu0 must exceed {dim - 1}")

    @property
    def num_groups(self) -> int:
        return self.alpha.size

    @property
    def num_aspects(self) -> int:
        return self.niw_mu0.size

    @classmethod
    def default(cls, num_aspects: int, num_groups: int = 10) -> "Hyperparameters":
        eye = np.eye(num_aspects)
        return cls(
            alpha=np.ones(num_groups),
            Lambda=eye,
            B=0.25 * eye,
            niw_mu0=np.zeros(num_aspects),
            niw_kappa0=1.0,
            niw_nu0=num_aspects + 2.0,
            niw_Psi0=eye,
        )

    def with_groups(self, num_groups: int) -> "Hyperparameters":
        """Same constants with a symmetric concentration over ``num_groups`` groups."""
        alpha = np.full(num_groups, float(self.alpha.mean()))
        return Hyperparameters(
            alpha, self.Lambda, self.B, self.niw_mu0, self.niw_kappa0, self.niw_nu0, self.niw_Psi0
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "Lambda": self.Lambda.tolist(),
            "B": self.B.tolist(),
            "niw_mu0": self.niw_mu0.tolist(),
            "niw_kappa0": float(self.niw_kappa0),
            "niw_nu0": float(self.niw_nu0),
            "niw_Psi0": self.niw_Psi0.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(**d)


def evenly_spaced_cutpoints(num_levels: int, low: float = -5.0, high: float = 7.0) -> tuple:
    if num_levels < 2:
        return ()
    return tuple(float(x) for x in np.linspace(low, high, num_levels - 1))


@dataclass(frozen=True)
class RunConfig:
    """Chain-length and reproducibility settings for one fit.

    ``cutpoint_rule`` selects the cut-point update: ``"mode"`` (default) or
    ``"literal"``; ``sample_cutpoints=False`` freezes them at ``init_cutpoints``.
    ``scan="plain"`` conditions the bias, group and quality updates on the
    latent responses; ``"collapsed"`` (default) integrates the responses out of
    those three updates given the Polya-Gamma variables and redraws them after.
    """

    seed: int = 0
    burn_in: int = 300
    num_samples: int = 200
    thinning: int = 1
    init_cutpoints: tuple = field(default_factory=lambda: evenly_spaced_cutpoints(5))
    parallel_blocks: bool = False
    workers: int = 1
    sample_cutpoints: bool = True
    cutpoint_rule: str = "mode"
    scan: str = "collapsed"
    keep_latent: bool = False

    def __post_init__(self):
        c = np.asarray(self.init_cutpoints, dtype=float)
        object.__setattr__(self, "init_cutpoints", tuple(float(x) for x in c))
        if c.size > 1 and np.any(np.diff(c) <= 0):
            raise ValueError("init_cutpoints must be strictly increasing")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.scan not in ("collapsed", "plain"):
            raise ValueError(f"unknown scan {self.scan!r}")
        if self.cutpoint_rule not in ("mode", "literal"):
            raise ValueError(f"unknown cutpoint_rule {self.cutpoint_rule!r}")
