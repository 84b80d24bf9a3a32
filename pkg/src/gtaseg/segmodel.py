"""Small constant-resolution conv net split into feature extractor and mask predictor.

Layers are conv blocks ``conv{i}`` (3x3 conv + ReLU) followed by a 1x1 ``head``.
A layer is part of the extractor when ``layer_index < partition_boundary``;
the head is always part of the predictor.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .numkernel import GradTape, Tensor, conv2d, relu, channels_first


class Role(enum.IntEnum):
    EXTRACTOR = 0
    PREDICTOR = 1


ALL = "all"

# fixed input normalisation applied inside forward (images live in [0, 1])
INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass
class Param:
    name: str
    role: Role
    layer_index: int
    data: np.ndarray


class ParamStore:
    """Ordered, uniquely named parameters tagged with role and layer index.

    ``subset`` returns a view: entries share arrays with the parent store, so
    in-place updates through the view are visible in the parent.
    """

    def __init__(self, params=()):
        self._params: dict[str, Param] = {}
        for p in params:
            if p.name in self._params:
                raise ContractError(f"duplicate parameter name {p.name!r}")
            self._params[p.name] = p

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    @property
    def names(self):
        return list(self._params)

    @property
    def num_layers(self):
        return 1 + max((p.layer_index for p in self), default=-1)

    def subset(self, role) -> ParamStore:
        if role == ALL:
            return ParamStore(self)
        role = Role(role)
        return ParamStore(p for p in self if p.role == role)

    def retag(self, boundary: int) -> ParamStore:
        """Same arrays, roles reassigned for ``boundary`` (0 = empty extractor)."""
        head = self.num_layers - 1
        if not 0 <= boundary <= self.num_layers:
            raise ConfigError(f"partition boundary {boundary} outside [0, {self.num_layers}]")
        return ParamStore(
            Param(p.name, role_for_layer(p.layer_index, boundary, head), p.layer_index, p.data)
            for p in self
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self}

    def num_values(self):
        return sum(p.data.size for p in self)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self:
            h.update(p.name.encode())
            h.update(bytes([int(p.role)]))
            h.update(p.data.tobytes())
        return h.hexdigest()


def role_for_layer(layer_index: int, boundary: int, head_index: int) -> Role:
    if layer_index < boundary and layer_index != head_index:
        return Role.EXTRACTOR
    return Role.PREDICTOR


def clone_params(params: ParamStore) -> ParamStore:
    return ParamStore(Param(p.name, p.role, p.layer_index, p.data.copy()) for p in params)


@dataclass(frozen=True)
class SegNetConfig:
    classes: int
    in_channels: int = 3
    hidden: tuple = (16, 32, 32)
    partition_boundary: int | None = None
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if not self.hidden:
            raise ConfigError("need at least one conv block")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        b = self.boundary
        if not 1 <= b <= self.num_layers:
            raise ConfigError(f"partition_boundary {b} outside [1, {self.num_layers}]")

    @property
    def num_layers(self):
        return len(self.hidden) + 1

    @property
    def boundary(self):
        return len(self.hidden) if self.partition_boundary is None else self.partition_boundary


def init_model(config: SegNetConfig, seed: int) -> ParamStore:
    """Fan-in scaled uniform init.

    Conv blocks draw from ``U(-b, b)`` with ``b = sqrt(6 / fan_in)`` (variance
    preserving through ReLU); the head uses ``b = sqrt(3 / fan_in)`` so initial
    logits stay O(1). All biases start at zero.
    """
    rng = np.random.default_rng(seed)
    head = config.num_layers - 1
    params = []
    cin = config.in_channels
    widths = list(config.hidden) + [config.classes]
    for i, cout in enumerate(widths):
        k = config.kernel_size if i < head else 1
        gain = 6.0 if i < head else 3.0
        bound = np.sqrt(gain / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        b = np.zeros(cout, dtype=np.float32)
        prefix = f"conv{i}" if i < head else "head"
        role = role_for_layer(i, config.boundary, head)
        params.append(Param(f"{prefix}.weight", role, i, w))
        params.append(Param(f"{prefix}.bias", role, i, b))
        cin = cout
    return ParamStore(params)


def _layers(params: ParamStore):
    layers: dict[int, list[Param]] = {}
    for p in params:
        layers.setdefault(p.layer_index, []).append(p)
    return [layers[i] for i in sorted(layers)]


def forward(params: ParamStore, images, tape: GradTape | None = None, watched=None) -> Tensor:
    """Per-pixel logits ``[B,K,H,W]``.

    With ``tape`` given, pass ``watched`` (from ``tape.watch_store(params)``)
    so gradients are recorded against the parameters.
    """
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    if data.ndim != 4:
        raise DimensionError(f"images must be [B,C,H,W], got {data.shape}")
    x = Tensor((data.transpose(0, 2, 3, 1) - np.float32(INPUT_MEAN)) / np.float32(INPUT_STD))  # pixel-major
    layers = _layers(params)
    for i, layer in enumerate(layers):
        w = next(p for p in layer if p.name.endswith(".weight"))
        b = next(p for p in layer if p.name.endswith(".bias"))
        wt = watched[w.name] if watched is not None else Tensor(w.data)
        bt = watched[b.name] if watched is not None else Tensor(b.data)
        x = conv2d(x, wt, bt, layout="BHWC")
        if i < len(layers) - 1:
            x = relu(x)
    return channels_first(x)


def predict(params: ParamStore, images, batch_size: int = 25) -> np.ndarray:
    """Argmax class map ``[N,H,W]`` computed in fixed-size chunks."""
    out = []
    for s in range(0, len(images), batch_size):
        logits = forward(params, images[s:s + batch_size]).data
        out.append(logits.argmax(axis=1))
    return np.concatenate(out).astype(np.int64)
