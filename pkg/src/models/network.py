"""
Network Module
Two-part convolutional classifier f = f^{L-r} o f^r with an exposed hidden layer r
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from src.autodiff.tensor import (Tensor, TensorLike, as_tensor, conv2d, global_avg_pool,
                                 matmul, no_grad, relu)
from src.utils.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NetworkConfig:
    """Sizes of the small network; layer r sits after conv_blocks_before_r blocks"""

    in_channels: int = 3
    hidden_channels: int = 8
    conv_blocks_before_r: int = 1
    conv_blocks_after_r: int = 1
    num_classes: int = 10
    image_side: int = 16

    def validate(self) -> 'NetworkConfig':
        for name in ('in_channels', 'hidden_channels', 'conv_blocks_before_r',
                     'conv_blocks_after_r', 'image_side'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"network.{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("network.num_classes must be >= 2")
        if self.image_side < 2:
            raise ConfigError("network.image_side must give a hidden map of at least 2x2")
        return self

    @property
    def hidden_shape(self) -> Tuple[int, int, int]:
        return (self.hidden_channels, self.image_side, self.image_side)

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Fixed parameter order: pre blocks, post blocks, then the linear head"""
        shapes = []
        channels = self.in_channels
        for i in range(self.conv_blocks_before_r):
            shapes.append((f"pre.{i}.weight", (self.hidden_channels, channels, 3, 3)))
            shapes.append((f"pre.{i}.bias", (1, self.hidden_channels, 1, 1)))
            channels = self.hidden_channels
        for i in range(self.conv_blocks_after_r):
            shapes.append((f"post.{i}.weight", (self.hidden_channels, self.hidden_channels, 3, 3)))
            shapes.append((f"post.{i}.bias", (1, self.hidden_channels, 1, 1)))
        shapes.append(("head.weight", (self.hidden_channels, self.num_classes)))
        shapes.append(("head.bias", (1, self.num_classes)))
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.parameter_shapes()))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetworkConfig':
        known = {k: int(v) for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


class Network:
    """Classifier with features(x) = f^r(x) and head(s) = f^{L-r}(s)"""

    def __init__(self, config: NetworkConfig, parameters: List[Tensor]):
        self.config = config.validate()
        expected = config.parameter_shapes()
        if len(parameters) != len(expected):
            raise ShapeError(f"expected {len(expected)} parameter tensors, got {len(parameters)}")
        for (name, shape), param in zip(expected, parameters):
            if param.shape != shape:
                raise ShapeError(f"{name} has shape {param.shape}, expected {shape}")
        self.parameters = parameters
        self.parameter_names = [name for name, _ in expected]

    @classmethod
    def init_parameters(cls, config: NetworkConfig, seed: int) -> 'Network':
        """Kaiming-style fan-in initialisation, deterministic per seed; biases start at zero"""
        rng = np.random.default_rng(seed)
        parameters = []
        for name, shape in config.parameter_shapes():
            if name.endswith('.bias'):
                values = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            parameters.append(Tensor(values, requires_grad=True))
        return cls(config, parameters)

    def _blocks(self, prefix: str) -> List[Tuple[Tensor, Tensor]]:
        named = dict(zip(self.parameter_names, self.parameters))
        count = self.config.conv_blocks_before_r if prefix == 'pre' else self.config.conv_blocks_after_r
        return [(named[f"{prefix}.{i}.weight"], named[f"{prefix}.{i}.bias"]) for i in range(count)]

    def features(self, x: TensorLike) -> Tensor:
        """Hidden representation s = f^r(x) of shape [N, C, H, W]"""
        x = as_tensor(x)
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_side, cfg.image_side)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"input shape {x.shape} does not match [N, {expected}]")
        s = x
        for weight, bias in self._blocks('pre'):
            s = relu(conv2d(s, weight) + bias)
        return s

    def head(self, s: TensorLike) -> Tensor:
        """Unscaled logits f^{L-r}(s) of shape [N, num_classes]"""
        s = as_tensor(s)
        if s.ndim != 4 or s.shape[1:] != self.config.hidden_shape:
            raise ShapeError(f"hidden shape {s.shape} does not match [N, {self.config.hidden_shape}]")
        for weight, bias in self._blocks('post'):
            s = relu(conv2d(s, weight) + bias)
        pooled = global_avg_pool(s)
        named = dict(zip(self.parameter_names, self.parameters))
        return matmul(pooled, named['head.weight']) + named['head.bias']

    def forward(self, x: TensorLike) -> Tensor:
        return self.head(self.features(x))

    __call__ = forward

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for a whole array without recording a graph"""
        chunks = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                chunks.append(self.forward(x[start:start + batch_size]).data)
        if not chunks:
            return np.zeros((0, self.config.num_classes))
        return np.concatenate(chunks, axis=0)

    def zero_grad(self) -> None:
        for param in self.parameters:
            param.zero_grad()

    def get_flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.config.parameter_count():
            raise ShapeError(f"flat vector has {flat.size} values, network needs "
                             f"{self.config.parameter_count()}")
        offset = 0
        for param in self.parameters:
            size = param.size
            param.data = flat[offset:offset + size].reshape(param.shape).copy()
            offset += size

    def copy(self) -> 'Network':
        """Independent snapshot, e.g. for parallel evaluation"""
        return Network(self.config, [Tensor(p.data, requires_grad=True) for p in self.parameters])
