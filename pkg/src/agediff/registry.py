"""Name-based construction of backends, estimators, and embedders.

Identifiers are plain strings so CLI flags and API payloads can pick
implementations; an id may carry one integer argument after a colon, e.g.
``constant:30``.
"""
from __future__ import annotations

from .errors import ConfigurationError


def _split(identifier: str) -> tuple[str, str | None]:
    name, _, arg = identifier.partition(":")
    return name, (arg or None)


def make_backend(identifier: str, seed: int = 0):
    name, arg = _split(identifier)
    if name in ("tiny", "fixture"):
        from .fixtures import TinyBackend

        return TinyBackend(seed=int(arg) if arg is not None else seed)
    raise ConfigurationError(f"unknown backend id {identifier!r} (available: tiny)")


def make_estimator(identifier: str):
    name, arg = _split(identifier)
    if name in ("mean-intensity", "mean_intensity"):
        from .fixtures import MeanIntensityAgeEstimator

        return MeanIntensityAgeEstimator()
    if name == "constant":
        from .fixtures import ConstantAgeEstimator

        if arg is None:
            raise ConfigurationError("constant estimator needs an age, e.g. constant:30")
        return ConstantAgeEstimator(int(arg))
    raise ConfigurationError(
        f"unknown estimator id {identifier!r} (available: mean-intensity, constant:<age>)"
    )


def make_embedder(identifier: str):
    name, arg = _split(identifier)
    if name in ("toy", "toy-face", "pixel"):
        from .fixtures import ToyFaceEmbedder

        return ToyFaceEmbedder(seed=int(arg) if arg is not None else 0)
    raise ConfigurationError(f"unknown embedder id {identifier!r} (available: toy)")
