"""Model-poisoning behaviours applied to malicious nodes' trained parameters.

Attacks run after local training and before the update is published, so only
the designated nodes' vectors are ever touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .nn import ParamVector
from .rng import StreamKey, stream


class AttackKind(str, Enum):
    NONE = "none"
    NOISE = "noise"
    SIGN_FLIP = "signflip"


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind = AttackKind.NONE
    noise_variance: float = 1.0
    flip_scale: float = 3.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        if self.flip_scale <= 0:
            raise ValueError("flip_scale must be > 0")


def noise_attack(
    update: ParamVector, variance: float, seed: StreamKey | tuple[StreamKey, ...]
) -> ParamVector:
    """Add i.i.d. zero-mean Gaussian noise with the given variance everywhere."""
    if variance < 0:
        raise ValueError("variance must be >= 0")
    scope = seed if isinstance(seed, tuple) else (seed,)
    noise = stream(*scope, "noise-attack").normal(0.0, np.sqrt(variance), len(update))
    values = (update.values + noise).astype(update.values.dtype)
    return ParamVector(values, update.shapes)


def sign_flip_attack(update: ParamVector, flip_scale: float) -> ParamVector:
    """Negate the parameters and enlarge their magnitude by ``flip_scale``."""
    if flip_scale <= 0:
        raise ValueError("flip_scale must be > 0")
    scale = update.values.dtype.type(flip_scale)
    return ParamVector(-scale * update.values, update.shapes)


def apply_attack(
    spec: AttackSpec, update: ParamVector, seed: StreamKey | tuple[StreamKey, ...]
) -> ParamVector:
    """Dispatch on the attack kind; NONE returns the update untouched."""
    if spec.kind is AttackKind.NONE:
        return update
    if spec.kind is AttackKind.NOISE:
        return noise_attack(update, spec.noise_variance, seed)
    return sign_flip_attack(update, spec.flip_scale)
