"""Role-scoped EMA transfer of parameters between models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .segmodel import ALL, ParamStore, Role

SCOPES = {"all": ALL, "extractor": Role.EXTRACTOR, "predictor": Role.PREDICTOR}


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.99
    scope: object = ALL  # ALL, a Role, or a collection of parameter names

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def _in_scope(store: ParamStore, scope):
    if scope == ALL:
        return list(store)
    if isinstance(scope, (Role, int)) and not isinstance(scope, bool):
        return list(store.subset(Role(scope)))
    names = set(scope)
    return [p for p in store if p.name in names]


def ema_update(target: ParamStore, source: ParamStore, cfg: EmaConfig) -> ParamStore:
    """In place, for parameters in scope: ``t = alpha * t + (1 - alpha) * s``.

    The blend is evaluated in float64 and rounded once, which keeps every
    result inside the closed interval between the old value and the source.
    """
    if target.names != source.names:
        raise ContractError("target and source parameter names differ")
    for t in target:
        s = source[t.name]
        if t.data.shape != s.data.shape or t.role != s.role or t.layer_index != s.layer_index:
            raise ContractError(f"structure mismatch for parameter {t.name!r}")
    a = float(cfg.alpha)
    for t in _in_scope(target, cfg.scope):
        s = source[t.name].data
        t.data[...] = (a * t.data.astype(np.float64) + (1.0 - a) * s.astype(np.float64)).astype(np.float32)
    return target


def transmit_representation(student: ParamStore, gta: ParamStore, alpha: float, scope=Role.EXTRACTOR) -> ParamStore:
    """Move the student's extractor toward the teaching assistant's."""
    return ema_update(student, gta, EmaConfig(alpha, scope))


def update_teacher(teacher: ParamStore, student: ParamStore, alpha: float) -> ParamStore:
    return ema_update(teacher, student, EmaConfig(alpha, ALL))
