"""A small fully connected network with hand-written reverse mode.

Parameters live in one flat float64 vector; every layer's weight matrix and
bias are views into it, so optimizers, EMA updates and checkpoints all work on
``net.params`` directly.

Hidden layers use tanh. The output head is either ``identity`` or
``bounded``: ``scale / sqrt(d) * tanh(z)``, which caps the output norm at
``scale`` for every input without any clipping.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.exceptions import CheckpointError, ShapeMismatchError
from utils.seeding import Stream, make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "BCRLNET"
CHECKPOINT_VERSION = 1
HEADS = ("bounded", "identity")
INITS = ("orthogonal", "normal", "zeros")


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


class TrainableNet:
    def __init__(
        self,
        layer_sizes: Sequence[int],
        head: str = "bounded",
        head_scale: float = 1.0,
        init: str = "orthogonal",
        seed: int = 0,
        stream: int = Stream.INIT,
    ):
        self.layer_sizes: Tuple[int, ...] = tuple(int(n) for n in layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeMismatchError(f"need at least input and output sizes, got {layer_sizes}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        if init not in INITS:
            raise ValueError(f"unknown init {init!r}; expected one of {INITS}")
        self.head = head
        self.head_scale = float(head_scale)
        self.init = init
        self.seed = int(seed)
        self.stream = int(stream)

        self._layout: List[Tuple[slice, Tuple[int, int], slice]] = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w_slice = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b_slice = slice(offset, offset + fan_out)
            offset += fan_out
            self._layout.append((w_slice, (fan_in, fan_out), b_slice))

        self.params = np.zeros(offset)
        self.grad = np.zeros(offset)
        self._cache: Optional[Dict[str, Any]] = None
        self._initialize()

    def _initialize(self) -> None:
        if self.init == "zeros":
            return
        rng = make_rng(self.seed, self.stream)
        for layer, (_, (fan_in, fan_out), _) in enumerate(self._layout):
            if self.init == "orthogonal":
                weights = _orthogonal(rng, fan_in, fan_out)
            else:
                weights = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weight(layer)[...] = weights

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self._layout)

    def descriptor(self) -> Dict[str, Any]:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": "tanh",
            "head": self.head,
            "head_scale": self.head_scale,
        }

    def weight(self, layer: int) -> np.ndarray:
        w_slice, shape, _ = self._layout[layer]
        return self.params[w_slice].reshape(shape)

    def bias(self, layer: int) -> np.ndarray:
        return self.params[self._layout[layer][2]]

    def layer_slices(self, layer: int) -> Tuple[slice, slice]:
        w_slice, _, b_slice = self._layout[layer]
        return w_slice, b_slice

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise ShapeMismatchError(f"expected {self.params.shape} parameters, got {flat.shape}")
        self.params[...] = flat

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "TrainableNet":
        clone = TrainableNet(self.layer_sizes, self.head, self.head_scale, init="zeros", seed=self.seed, stream=self.stream)
        clone.init = self.init
        clone.params[...] = self.params
        return clone

    def ema_update(self, source: "TrainableNet", tau: float) -> None:
        """self <- tau * source + (1 - tau) * self."""
        if source.params.shape != self.params.shape:
            raise ShapeMismatchError("EMA source has a different architecture")
        if tau == 1.0:
            self.params[...] = source.params
        else:
            self.params *= 1.0 - tau
            self.params += tau * source.params

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"expected inputs with {self.input_dim} columns, got shape {np.shape(inputs)}")

        activations = [x]
        hidden = x
        head_tanh = None
        last = self.num_layers - 1
        for layer in range(self.num_layers):
            z = hidden @ self.weight(layer) + self.bias(layer)
            if layer < last:
                hidden = np.tanh(z)
            elif self.head == "bounded":
                head_tanh = np.tanh(z)
                hidden = self._head_factor() * head_tanh
            else:
                hidden = z
            activations.append(hidden)

        self._cache = {"activations": activations, "head_tanh": head_tanh, "single": single}
        return hidden[0] if single else hidden

    def _head_factor(self) -> float:
        return self.head_scale / np.sqrt(self.output_dim)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Gradient of sum(upstream * last_forward_output) w.r.t. params.

        The result is also accumulated into ``self.grad``.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        activations = self._cache["activations"]
        g = np.asarray(upstream, dtype=np.float64)
        if self._cache["single"] and g.ndim == 1:
            g = g[None, :]
        if g.shape != activations[-1].shape:
            raise ShapeMismatchError(f"upstream shape {g.shape} does not match output {activations[-1].shape}")

        if self.head == "bounded":
            t = self._cache["head_tanh"]
            dz = g * self._head_factor() * (1.0 - t * t)
        else:
            dz = g

        grad = np.zeros_like(self.params)
        for layer in range(self.num_layers - 1, -1, -1):
            w_slice, b_slice = self.layer_slices(layer)
            x_in = activations[layer]
            grad[w_slice] = (x_in.T @ dz).reshape(-1)
            grad[b_slice] = dz.sum(axis=0)
            if layer > 0:
                dz = (dz @ self.weight(layer).T) * (1.0 - x_in * x_in)

        self.grad += grad
        return grad

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {json.dumps(self.descriptor(), sort_keys=True)}\n"
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(header.encode("utf-8"))
            f.write(self.params.astype("<f8").tobytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path], expected: Optional[Dict[str, Any]] = None) -> "TrainableNet":
        raw = Path(path).read_bytes()
        newline = raw.find(b"\n")
        if newline < 0:
            raise CheckpointError(f"{path}: missing architecture descriptor line")
        parts = raw[:newline].decode("utf-8").split(" ", 2)
        if len(parts) != 3 or parts[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a network checkpoint")
        if int(parts[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {parts[1]} is not supported")
        descriptor = json.loads(parts[2])
        if expected is not None and json.dumps(expected, sort_keys=True) != json.dumps(descriptor, sort_keys=True):
            raise CheckpointError(f"{path}: architecture {descriptor} does not match expected {expected}")

        net = cls(descriptor["layer_sizes"], head=descriptor["head"], head_scale=descriptor["head_scale"], init="zeros")
        body = raw[newline + 1:]
        if len(body) != 8 * net.num_params:
            raise CheckpointError(f"{path}: expected {net.num_params} parameters, found {len(body) // 8}")
        net.params[...] = np.frombuffer(body, dtype="<f8")
        return net


def net_forward(net: TrainableNet, inputs: np.ndarray) -> np.ndarray:
    return net.forward(inputs)


def net_gradient(net: TrainableNet, upstream: np.ndarray) -> np.ndarray:
    return net.backward(upstream)
