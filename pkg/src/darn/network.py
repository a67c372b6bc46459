"""Attribute-aware sub-networks and the dual (shop / street) container.

Each sub-network is a Network-in-Network style conv stack (a spatial conv per
stage followed by 1x1 "MLPConv" convolutions), two fully connected layers and
one small fully connected branch per attribute category on top of FC2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DatasetIOError, DimensionError
from .schema import AttributeSchema, Domain
from .tnsr import load_bundle, save_bundle

CHECKPOINT_FORMAT = "darn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageConfig:
    filters: int
    kernel: int = 3
    stride: int = 1
    mlpconv_count: int = 1
    pool: int | None = None  # square max-pool window, stride = window


@dataclass(frozen=True)
class SubNetworkConfig:
    conv_stages: tuple[StageConfig, ...] = (
        StageConfig(16, 3, 1, 1, pool=2),
        StageConfig(16, 3, 1, 1, pool=2),
        StageConfig(16, 3, 1, 1),
        StageConfig(16, 3, 1, 2),  # C4, two MLPConv layers
        StageConfig(16, 3, 1, 1),  # C5
    )
    fc1_dim: int = 64
    fc2_dim: int = 64
    head_hidden_dim: int = 32
    in_channels: int = 3

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.conv_stages)
        object.__setattr__(self, "conv_stages", stages)

    def validate(self) -> None:
        if len(self.conv_stages) < 2:
            raise ConfigError(f"conv_stages: need at least 2 stages (C4, C5), got {len(self.conv_stages)}")
        for i, s in enumerate(self.conv_stages):
            for fname in ("filters", "kernel", "stride"):
                if getattr(s, fname) < 1:
                    raise ConfigError(f"conv_stages[{i}].{fname} must be >= 1, got {getattr(s, fname)}")
            if s.mlpconv_count < 0:
                raise ConfigError(f"conv_stages[{i}].mlpconv_count must be >= 0")
            if s.pool is not None and s.pool < 1:
                raise ConfigError(f"conv_stages[{i}].pool must be >= 1 or None")
        for fname in ("fc1_dim", "fc2_dim", "head_hidden_dim", "in_channels"):
            if getattr(self, fname) < 1:
                raise ConfigError(f"{fname} must be >= 1, got {getattr(self, fname)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SubNetworkConfig":
        d = dict(d)
        d["conv_stages"] = tuple(StageConfig(**s) for s in d["conv_stages"])
        return cls(**d)


@dataclass
class ForwardOutputs:
    fc1: Tensor
    fc2: Tensor
    c4_map: Tensor
    c5_map: Tensor
    branch_logits: dict[str, Tensor] = field(default_factory=dict)


class SubNetwork:
    """One domain's conv trunk, FC1/FC2 and tree-structured attribute heads."""

    def __init__(self, config: SubNetworkConfig, schema: AttributeSchema,
                 rng: np.random.Generator, input_hw: tuple[int, int] = (16, 16)):
        self.config = config
        self.schema = schema
        self.input_hw = tuple(input_hw)
        self.params: dict[str, Tensor] = {}
        in_ch = config.in_channels
        for i, stage in enumerate(config.conv_stages):
            self._conv(f"stage{i}.conv", stage.filters, in_ch, stage.kernel, rng)
            for j in range(stage.mlpconv_count):
                self._conv(f"stage{i}.mlp{j}", stage.filters, stage.filters, 1, rng)
            in_ch = stage.filters
        f, h, w = conv_output_shape(config, *self.input_hw)
        self._fc("fc1", f * h * w, config.fc1_dim, rng)
        self._fc("fc2", config.fc1_dim, config.fc2_dim, rng)
        for name, card in schema.categories:
            self._fc(f"head.{name}.hidden", config.fc2_dim, config.head_hidden_dim, rng)
            self._fc(f"head.{name}.out", config.head_hidden_dim, card, rng)

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _conv(self, name, f, c, k, rng):
        fan_in = c * k * k
        self._param(f"{name}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, c, k, k)))
        self._param(f"{name}.b", np.zeros(f))

    def _fc(self, name, d, m, rng):
        self._param(f"{name}.w", rng.normal(0.0, np.sqrt(2.0 / d), size=(d, m)))
        self._param(f"{name}.b", np.zeros(m))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, batch) -> ForwardOutputs:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected batch [N,{self.config.in_channels},H,W], got {x.shape}"
            )
        if tuple(x.shape[2:]) != self.input_hw:
            raise DimensionError(
                f"network built for {self.input_hw[0]}x{self.input_hw[1]} inputs, "
                f"got {x.shape[2]}x{x.shape[3]} (axes 2,3)"
            )
        p = self.params
        responses = []
        for i, s in enumerate(self.config.conv_stages):
            x = ad.relu(ad.conv2d(x, p[f"stage{i}.conv.w"], p[f"stage{i}.conv.b"], s.stride, s.kernel // 2))
            for j in range(s.mlpconv_count):
                x = ad.relu(ad.conv2d(x, p[f"stage{i}.mlp{j}.w"], p[f"stage{i}.mlp{j}.b"]))
            responses.append(x)
            if s.pool:
                x = ad.maxpool(x, s.pool, s.pool)
        fc1 = ad.relu(ad.fully_connected(ad.flatten(x), p["fc1.w"], p["fc1.b"]))
        fc2 = ad.relu(ad.fully_connected(fc1, p["fc2.w"], p["fc2.b"]))
        logits = {}
        for name, _ in self.schema.categories:
            hidden = ad.relu(ad.fully_connected(fc2, p[f"head.{name}.hidden.w"], p[f"head.{name}.hidden.b"]))
            logits[name] = ad.fully_connected(hidden, p[f"head.{name}.out.w"], p[f"head.{name}.out.b"])
        return ForwardOutputs(fc1=fc1, fc2=fc2, c4_map=responses[-2], c5_map=responses[-1], branch_logits=logits)

    __call__ = forward


def conv_output_shape(config: SubNetworkConfig, height: int, width: int) -> tuple[int, int, int]:
    """(filters, H, W) entering FC1 for an input of the given size."""
    h, w = height, width
    for i, s in enumerate(config.conv_stages):
        pad = s.kernel // 2
        h = (h + 2 * pad - s.kernel) // s.stride + 1
        w = (w + 2 * pad - s.kernel) // s.stride + 1
        if h < 1 or w < 1:
            raise DimensionError(f"input {height}x{width} too small for conv stage {i}")
        if s.pool:
            if s.pool > h or s.pool > w:
                raise DimensionError(f"input {height}x{width} too small for stage {i} pooling ({h}x{w} < {s.pool})")
            h = (h - s.pool) // s.pool + 1
            w = (w - s.pool) // s.pool + 1
    return config.conv_stages[-1].filters, h, w


def forward(net: SubNetwork, batch) -> ForwardOutputs:
    return net.forward(batch)


class DualNetwork:
    """Shop-domain and street-domain sub-networks with disjoint parameters.

    ``shared=True`` aliases both roles to one sub-network; the single-network
    ablation baselines use it.
    """

    def __init__(self, shop_net: SubNetwork, street_net: SubNetwork, schema: AttributeSchema,
                 config: SubNetworkConfig, shared: bool = False):
        self.shop_net = shop_net
        self.street_net = street_net
        self.schema = schema
        self.config = config
        self.shared = shared

    def net_for(self, domain) -> SubNetwork:
        return self.shop_net if Domain.parse(domain) is Domain.ONLINE else self.street_net

    def parameters(self) -> dict[str, Tensor]:
        out = {f"shop.{k}": v for k, v in self.shop_net.params.items()}
        if not self.shared:
            out.update({f"street.{k}": v for k, v in self.street_net.params.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def copy(self) -> "DualNetwork":
        return _from_state(self.config, self.schema, self.shared, self.state_dict(), self.input_hw)

    @property
    def input_hw(self) -> tuple[int, int]:
        return self.shop_net.input_hw

    def mirror_init(self) -> None:
        """Copy shop weights into the street network (separate arrays).

        Stands in for both sub-networks starting from one pre-trained model.
        """
        if self.shared:
            return
        for k, p in self.shop_net.params.items():
            self.street_net.params[k].data = p.data.copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ContractError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def build_dual_network(config: SubNetworkConfig, schema: AttributeSchema, seed: int,
                       input_hw: tuple[int, int] = (16, 16), shared: bool = False) -> DualNetwork:
    """Deterministic He-normal initialisation with zero biases.

    The shop network draws first, then the street network, so the two get
    distinct weights from one seeded stream.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    shop = SubNetwork(config, schema, rng, input_hw)
    street = shop if shared else SubNetwork(config, schema, rng, input_hw)
    return DualNetwork(shop, street, schema, config, shared)


@dataclass
class RoutedOutputs:
    """Per-domain forward outputs plus the batch positions each row came from."""

    outputs: dict[Domain, ForwardOutputs | None]
    positions: dict[Domain, np.ndarray]

    def rows(self, domain, batch_positions: Sequence[int]) -> np.ndarray:
        """Row indices inside ``domain``'s outputs for the given original positions."""
        domain = Domain.parse(domain)
        lookup = {int(p): r for r, p in enumerate(self.positions[domain])}
        try:
            return np.array([lookup[int(p)] for p in batch_positions], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"batch position {exc.args[0]} is not a {domain.value} sample") from None


def route_batch(dual: DualNetwork, images, domains: Sequence) -> RoutedOutputs:
    """Send ONLINE samples through shop_net and OFFLINE samples through street_net."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if len(domains) != images.shape[0]:
        raise ContractError(f"{len(domains)} domain tags for {images.shape[0]} images")
    parsed = []
    for i, d in enumerate(domains):
        if d is None:
            raise ContractError(f"sample {i} has no domain tag")
        parsed.append(Domain.parse(d))
    outputs, positions = {}, {}
    for domain in (Domain.ONLINE, Domain.OFFLINE):
        pos = np.array([i for i, d in enumerate(parsed) if d is domain], dtype=np.int64)
        positions[domain] = pos
        outputs[domain] = dual.net_for(domain).forward(images[pos]) if pos.size else None
    return RoutedOutputs(outputs, positions)


# checkpoints -----------------------------------------------------------------


def _from_state(config, schema, shared, state, input_hw) -> DualNetwork:
    dual = build_dual_network(config, schema, seed=0, input_hw=input_hw, shared=shared)
    dual.load_state_dict(state)
    return dual


def save_checkpoint(path, dual: DualNetwork, optimizer_state: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dual.config.to_dict(),
        "schema": dual.schema.to_dict(),
        "shared": dual.shared,
        "input_hw": list(dual.input_hw),
        "extra": extra or {},
    }
    tensors = {f"param/{k}": v.data for k, v in dual.parameters().items()}
    for k, v in (optimizer_state or {}).items():
        tensors[f"velocity/{k}"] = v
    save_bundle(path, header, tensors)


def load_checkpoint(path) -> tuple[DualNetwork, dict, dict[str, np.ndarray]]:
    """Returns ``(dual, extra header fields, optimizer velocity)``."""
    header, tensors = load_bundle(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DatasetIOError(f"{path}: not a checkpoint (format={header.get('format')!r})")
    config = SubNetworkConfig.from_dict(header["config"])
    schema = AttributeSchema.from_dict(header["schema"])
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    velocity = {k[len("velocity/"):]: v for k, v in tensors.items() if k.startswith("velocity/")}
    dual = _from_state(config, schema, header["shared"], state, tuple(header["input_hw"]))
    return dual, header.get("extra", {}), velocity
