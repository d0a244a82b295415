"""Small-network training: recipes, optimizers, the training loop and checkpoints."""
import json
import logging
import math
import re
import time
import tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from einconv.blocks import BLOCK_MAP, Block, Einconv, FullyConnected, MaxPool, Softmax
from einconv.blocks.models import Params
from einconv.config import OPTIMIZERS
from einconv.datasets import Dataset
from einconv.errors import ConfigError, DivergenceError, EinconvError
from einconv.graph import REQUIRED_RANKS, ConvGeometry, EinconvGraph, make_named

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preset:
    recipe: str
    kind: str = "standard"
    filter: int = 3
    ndim: int = 2
    ranks: Mapping[str, int] = field(default_factory=dict)


PRESETS = {
    "lenet-mini": Preset("Einconv(8)-MaxPool-Einconv(16)-MaxPool-FC(10)-Softmax"),
    "lenet-ga": Preset("Einconv(32)-MaxPool-Einconv(32)-MaxPool-FC(10)-Softmax"),
    "c3d-mini": Preset("Einconv(8)-MaxPool-Einconv(16)-GAP-FC(10)-Softmax", kind="standard3d", ndim=3),
    "separable-mini": Preset("Einconv(2)-GAP-FC(2)-Softmax", filter=1),
}

_TOKEN = re.compile(r"^\s*(\w+)\s*(?:\(([^)]*)\))?\s*$")


def layer_template(
    kind: str,
    filter: int = 3,
    ndim: int = 2,
    ranks: Optional[Mapping[str, int]] = None,
    nonlinear: bool = False,
) -> EinconvGraph:
    """A named layer on a placeholder geometry; blocks rebind it to their input."""
    spatial = (max(filter, 4),) * ndim
    geometry = ConvGeometry.same(spatial, (filter,) * ndim, 1, 1)
    return make_named(kind, geometry, ranks or {}, nonlinear)


def _default_ranks(kind: str) -> dict[str, int]:
    return {r: 4 for r in REQUIRED_RANKS.get(kind, ())} | ({"a": 4} if kind == "factoring" else {})


@dataclass
class NetworkSpec:
    blocks: tuple[Block, ...]
    input_shape: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        self.input_shape = tuple(self.input_shape)
        if not self.blocks or not isinstance(self.blocks[-1], Softmax):
            raise ConfigError("A network must end in Softmax")
        shapes = self.shapes()
        if shapes[-1] != (self.n_classes,):
            raise ConfigError(f"Network emits shape {shapes[-1]} but there are {self.n_classes} classes")

    @classmethod
    def from_recipe(
        cls,
        recipe: str,
        input_shape: Sequence[int],
        n_classes: int,
        template: Optional[EinconvGraph] = None,
        filter: int = 3,
    ) -> "NetworkSpec":
        """Parse ``"Einconv(8)-MaxPool-FC(10)-Softmax"``.

        ``Einconv(C)`` uses ``template``; ``Einconv(C,kind)`` builds the named
        layer ``kind`` with rank dims of 4.
        """
        ndim = len(input_shape) - 1
        blocks: list[Block] = []
        for token in recipe.split("-"):
            match = _TOKEN.match(token)
            if not match or match.group(1) not in BLOCK_MAP:
                raise ConfigError(f"Unknown block {token!r} in recipe {recipe!r}")
            name, raw = match.group(1), match.group(2)
            args = [a.strip() for a in raw.split(",")] if raw else []
            try:
                if name == "Einconv":
                    kind = args[1] if len(args) > 1 else None
                    graph = template if kind is None else layer_template(kind, filter, ndim, _default_ranks(kind))
                    if graph is None:
                        graph = layer_template("standard", filter, ndim)
                    blocks.append(Einconv(int(args[0]), graph, kind))
                elif name == "MaxPool":
                    blocks.append(MaxPool(int(args[0]) if args else 2))
                elif name == "FC":
                    blocks.append(FullyConnected(int(args[0])))
                else:
                    blocks.append(BLOCK_MAP[name]())
            except (IndexError, ValueError) as e:
                raise ConfigError(f"Bad arguments in recipe token {token!r}") from e
        return cls(tuple(blocks), tuple(input_shape), n_classes)

    @classmethod
    def from_preset(
        cls,
        name: str,
        input_shape: Sequence[int],
        n_classes: int,
        template: Optional[EinconvGraph] = None,
    ) -> "NetworkSpec":
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        preset = PRESETS[name]
        if template is None:
            template = layer_template(preset.kind, preset.filter, preset.ndim, preset.ranks)
        return cls.from_recipe(preset.recipe, input_shape, n_classes, template, preset.filter)

    @property
    def recipe(self) -> str:
        return "-".join(block.describe() for block in self.blocks)

    def shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        for block in self.blocks:
            try:
                shapes.append(block.output_shape(shapes[-1]))
            except EinconvError as e:
                raise ConfigError(f"{block.describe()} cannot take shape {shapes[-1]}: {e}") from e
        return shapes

    def init_params(self, seed: int = 0) -> list[Params]:
        rng = np.random.default_rng(seed)
        shapes = self.shapes()
        return [block.init_params(shape, rng) for block, shape in zip(self.blocks, shapes)]

    def einconv_blocks(self) -> list[int]:
        return [n for n, b in enumerate(self.blocks) if isinstance(b, Einconv)]

    def conv_param_count(self, params: Sequence[Params]) -> int:
        return sum(int(a.size) for n in self.einconv_blocks() for a in params[n].values())


def param_count(params: Sequence[Params]) -> int:
    return sum(int(a.size) for block in params for a in block.values())


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 2e-4
    weight_decay: float = 1e-6
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    momentum: float = 0.9
    # Halve the learning rate every this many epochs; 0 keeps it constant
    halve_every: int = 0
    # Desk-scale subsets; 0 keeps the whole split
    train_samples: int = 2000
    test_samples: int = 1000

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Invalid optimizer {self.optimizer!r}; choose from {', '.join(OPTIMIZERS)}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.halve_every < 0:
            raise ConfigError("batch_size must be positive; epochs and halve_every non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainConfig":
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        data = data.get("train", data)
        known = {f.name for f in fields(cls)}
        if unknown := set(data) - known:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        return cls(**data)

    def lr_at(self, epoch: int) -> float:
        if self.halve_every:
            return self.learning_rate * 0.5 ** (epoch // self.halve_every)
        return self.learning_rate


class Optimizer:
    def __init__(self, learning_rate: float, weight_decay: float = 0.0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.state: dict = {}

    def _update(self, key, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, params: list[Params], grads: list[Params]) -> list[Params]:
        updated = []
        for n, (block_params, block_grads) in enumerate(zip(params, grads)):
            new = {}
            for name, param in block_params.items():
                grad = block_grads[name] + self.weight_decay * param
                new[name] = self._update((n, name), param, grad)
            updated.append(new)
        return updated


class SGD(Optimizer):
    def _update(self, key, param, grad):
        return param - self.learning_rate * grad


class MomentumSGD(Optimizer):
    def __init__(self, learning_rate: float, weight_decay: float = 0.0, momentum: float = 0.9):
        super().__init__(learning_rate, weight_decay)
        self.momentum = momentum

    def _update(self, key, param, grad):
        velocity = self.momentum * self.state.get(key, 0.0) + grad
        self.state[key] = velocity
        return param - self.learning_rate * velocity


class Adam(Optimizer):
    def __init__(
        self,
        learning_rate: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(learning_rate, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        return super().step(params, grads)

    def _update(self, key, param, grad):
        m, v = self.state.get(key, (0.0, 0.0))
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[key] = (m, v)
        m_hat = m / (1 - self.beta1**self.t)
        v_hat = v / (1 - self.beta2**self.t)
        return param - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate, cfg.weight_decay)
    if cfg.optimizer == "momentum-sgd":
        return MomentumSGD(cfg.learning_rate, cfg.weight_decay, cfg.momentum)
    return Adam(cfg.learning_rate, cfg.weight_decay)


def forward_network(net: NetworkSpec, params: Sequence[Params], x: np.ndarray) -> tuple[np.ndarray, list]:
    caches = []
    for block, block_params in zip(net.blocks, params):
        x, cache = block.forward(block_params, x)
        caches.append(cache)
    return x, caches


def predict(net: NetworkSpec, params: Sequence[Params], x: np.ndarray) -> np.ndarray:
    return forward_network(net, params, x)[0]


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean())


def grad_network(
    net: NetworkSpec,
    params: Sequence[Params],
    batch: tuple[np.ndarray, np.ndarray],
) -> tuple[float, list[Params], np.ndarray]:
    """Mean cross-entropy, its gradient w.r.t. every parameter, and the probabilities."""
    x, labels = batch
    probs, caches = forward_network(net, params, x)
    loss = cross_entropy(probs, labels)

    # Softmax and cross-entropy together: d loss / d logits = (p - y) / N
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    grad /= len(labels)

    grads: list[Params] = [{} for _ in net.blocks]
    for n in range(len(net.blocks) - 2, -1, -1):
        grad, grads[n] = net.blocks[n].backward(params[n], caches[n], grad)
    return loss, grads, probs


def evaluate(net: NetworkSpec, params: Sequence[Params], data: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax prediction matches the label."""
    if len(data) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(data), batch_size):
        probs = predict(net, params, data.images[start:start + batch_size])
        correct += int((probs.argmax(axis=-1) == data.labels[start:start + batch_size]).sum())
    return correct / len(data)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainResult:
    params: list[Params]
    history: list[EpochRecord]

    def history_frame(self) -> pd.DataFrame:
        columns = [f.name for f in fields(EpochRecord)]
        return pd.DataFrame([asdict(r) for r in self.history], columns=columns)

    @property
    def final_test_acc(self) -> float:
        return self.history[-1].test_acc if self.history else math.nan


def train(
    net: NetworkSpec,
    data: Dataset,
    cfg: TrainConfig,
    test: Optional[Dataset] = None,
    params: Optional[list[Params]] = None,
    progress: bool = False,
) -> TrainResult:
    """Minibatch training; deterministic given ``cfg.seed``.

    Raises DivergenceError as soon as a batch loss is not finite.
    """
    if data.sample_shape != net.input_shape:
        raise ConfigError(f"Data samples are {data.sample_shape}, network expects {net.input_shape}")
    params = params if params is not None else net.init_params(cfg.seed)
    optimizer = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []

    for epoch in tqdm(range(cfg.epochs), desc="Training", unit="epoch", disable=not progress):
        optimizer.learning_rate = cfg.lr_at(epoch)
        started = time.perf_counter()
        loss_sum, correct = 0.0, 0
        for step, (x, y) in enumerate(data.batches(cfg.batch_size, rng)):
            loss, grads, probs = grad_network(net, params, (x, y))
            if not math.isfinite(loss):
                raise DivergenceError(f"Loss became {loss} at epoch {epoch}, step {step}", epoch, step)
            loss_sum += loss * len(y)
            correct += int((probs.argmax(axis=-1) == y).sum())
            params = optimizer.step(params, grads)

        test_acc = evaluate(net, params, test) if test is not None else math.nan
        record = EpochRecord(
            epoch=epoch,
            loss=loss_sum / max(len(data), 1),
            train_acc=correct / max(len(data), 1),
            test_acc=test_acc,
            seconds=time.perf_counter() - started,
        )
        logger.info("epoch %d loss %.4f train %.3f test %.3f", epoch, record.loss, record.train_acc, test_acc)
        history.append(record)
    return TrainResult(params, history)


def save_network(net: NetworkSpec, params: Sequence[Params], directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {f"b{n}_{name}": a for n, block in enumerate(params) for name, a in block.items()}
    np.savez(directory.joinpath("params.npz"), **arrays)
    meta = {
        "recipe": net.recipe,
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "layers": {
            str(n): net.blocks[n].template.to_dict()
            for n in net.einconv_blocks()
        },
    }
    directory.joinpath("network.json").write_text(json.dumps(meta, indent=2))


def load_network(directory: Union[str, Path]) -> tuple[NetworkSpec, list[Params]]:
    directory = Path(directory)
    meta = json.loads(directory.joinpath("network.json").read_text())
    net = NetworkSpec.from_recipe(meta["recipe"], meta["input_shape"], meta["n_classes"])
    for key, graph in meta["layers"].items():
        net.blocks[int(key)].template = EinconvGraph.from_dict(graph)
    params: list[Params] = [{} for _ in net.blocks]
    with np.load(directory.joinpath("params.npz")) as archive:
        for key in archive.files:
            block, name = key[1:].split("_", 1)
            params[int(block)][name] = archive[key]
    return net, params
