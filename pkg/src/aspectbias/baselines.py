"""Comparison variants of the aspect-bias model.

All six variants share the Gibbs engine. Continuous variants treat the
observed levels as real-valued responses (no stick-breaking layer, no
Polya-Gamma variables, no cut-points); no-bias variants drop the bias term;
global-bias variants give every user the same offset (a single group).
"""

from __future__ import annotations

from .domain import Hyperparameters, RatingsDataset, RunConfig
from .engine import FULL_MODEL, ModelKind, PosteriorSamples, fit

BaselineKind = ModelKind

MODEL_KINDS: dict[str, ModelKind] = {
    "full": FULL_MODEL,
    "continuous-bias": ModelKind(False, "group"),
    "ordinal-no-bias": ModelKind(True, "none"),
    "continuous-no-bias": ModelKind(False, "none"),
    "ordinal-global": ModelKind(True, "global"),
    "continuous-global": ModelKind(False, "global"),
}


def kind_from_name(name: str) -> ModelKind:
    try:
        return MODEL_KINDS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_KINDS)}") from None


def kind_name(kind: ModelKind) -> str:
    for name, k in MODEL_KINDS.items():
        if k == kind:
            return name
    raise ValueError(f"unnamed model kind {kind}")


def fit_baseline(kind: ModelKind | str, data: RatingsDataset, hp: Hyperparameters, cfg: RunConfig,
                 callback=None) -> PosteriorSamples:
    """Fit one variant. ``kind`` may be a :class:`ModelKind` or its command-line name."""
    if isinstance(kind, str):
        kind = kind_from_name(kind)
    return fit(data, hp, cfg, kind, callback)
