"""Versioned text checkpoints for layers and full models.

Format: a header line ``gdu-checkpoint <version>``, then a sequence of
key-length-value blocks, then ``end``.

* ``field <key> <token>`` - one scalar or string field (floats are hex
  encoded so round-trips are bit-exact; ``-`` encodes None).
* ``block <key> <ndim> <dim...> <count>`` - a matrix block, followed by
  ``count`` whitespace-separated hex floats (wrapped across lines).

Readers reject unknown versions and truncated or malformed blocks.
"""

from __future__ import annotations

import numpy as np

from .kernel import KernelConfig
from .layer import DomainBasis, GduLayer, LearningMachine
from .training import ErmModel, FeatureExtractor, GduModel

__all__ = [
    "CheckpointError",
    "save_layer",
    "load_layer",
    "save_model",
    "load_model",
    "model_to_text",
    "model_from_text",
    "layer_to_text",
    "layer_from_text",
]

FORMAT_VERSION = 1
_VALUES_PER_LINE = 8


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint contents."""


def _encode_float(x: float) -> str:
    return float(x).hex()


def _field_token(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return value
    return _encode_float(value)


def _emit_block(lines: list, key: str, array: np.ndarray):
    array = np.asarray(array, dtype=np.float64)
    dims = " ".join(str(d) for d in array.shape)
    lines.append(f"block {key} {array.ndim} {dims} {array.size}".rstrip())
    flat = array.ravel()
    for start in range(0, flat.size, _VALUES_PER_LINE):
        lines.append(" ".join(_encode_float(v) for v in flat[start : start + _VALUES_PER_LINE]))


class _Reader:
    def __init__(self, text: str):
        self.tokens = text.split()
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.tokens):
            raise CheckpointError("unexpected end of checkpoint")
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, token: str):
        got = self.next()
        if got != token:
            raise CheckpointError(f"expected {token!r}, found {got!r}")

    def read_field(self, key: str) -> str:
        self.expect("field")
        got = self.next()
        if got != key:
            raise CheckpointError(f"expected field {key!r}, found {got!r}")
        return self.next()

    def read_float_field(self, key: str):
        tok = self.read_field(key)
        if tok == "-":
            return None
        return float.fromhex(tok)

    def read_block(self, key: str) -> np.ndarray:
        self.expect("block")
        got = self.next()
        if got != key:
            raise CheckpointError(f"expected block {key!r}, found {got!r}")
        ndim = int(self.next())
        shape = tuple(int(self.next()) for _ in range(ndim))
        count = int(self.next())
        expected = int(np.prod(shape)) if shape else 1
        if count != expected:
            raise CheckpointError(
                f"block {key!r} declares {count} values for shape {shape}"
            )
        values = [float.fromhex(self.next()) for _ in range(count)]
        return np.array(values, dtype=np.float64).reshape(shape)


def _emit_layer(lines: list, layer: GduLayer):
    lines.append(f"field mode {layer.mode}")
    lines.append(f"field sigma {_field_token(layer.kernel.sigma)}")
    lines.append(f"field kappa {_field_token(layer.kappa)}")
    lines.append(f"field activation {layer.machines[0].activation}")
    lines.append(f"field num_bases {layer.num_bases}")
    for j, basis in enumerate(layer.bases):
        _emit_block(lines, f"basis{j}", basis.vectors)
    for j, machine in enumerate(layer.machines):
        _emit_block(lines, f"mach_w{j}", machine.weights)
        _emit_block(lines, f"mach_b{j}", machine.bias)


def _read_layer(reader: _Reader) -> GduLayer:
    mode = reader.read_field("mode")
    sigma = reader.read_float_field("sigma")
    kappa = reader.read_float_field("kappa")
    activation = reader.read_field("activation")
    num_bases = int(reader.read_field("num_bases"))
    bases = [DomainBasis(reader.read_block(f"basis{j}")) for j in range(num_bases)]
    machines = []
    for j in range(num_bases):
        w = reader.read_block(f"mach_w{j}")
        b = reader.read_block(f"mach_b{j}")
        machines.append(LearningMachine(w, b, activation))
    return GduLayer(bases, machines, KernelConfig(sigma), mode, kappa)


def _emit_fe(lines: list, fe: FeatureExtractor | None):
    if fe is None:
        lines.append("field fe_layers 0")
        return
    lines.append(f"field fe_layers {len(fe.weights)}")
    lines.append(f"field fe_nonlinearity {fe.nonlinearity}")
    for i, (w, b) in enumerate(zip(fe.weights, fe.biases)):
        _emit_block(lines, f"fe_w{i}", w)
        _emit_block(lines, f"fe_b{i}", b)


def _read_fe(reader: _Reader) -> FeatureExtractor | None:
    n_layers = int(reader.read_field("fe_layers"))
    if n_layers == 0:
        return None
    nonlinearity = reader.read_field("fe_nonlinearity")
    weights, biases = [], []
    for i in range(n_layers):
        weights.append(reader.read_block(f"fe_w{i}"))
        biases.append(reader.read_block(f"fe_b{i}"))
    return FeatureExtractor(weights, biases, nonlinearity)


def layer_to_text(layer: GduLayer) -> str:
    lines = [f"gdu-checkpoint {FORMAT_VERSION}", "field kind layer"]
    _emit_layer(lines, layer)
    lines.append("end")
    return "\n".join(lines) + "\n"


def model_to_text(model) -> str:
    lines = [f"gdu-checkpoint {FORMAT_VERSION}"]
    if isinstance(model, GduModel):
        lines.append("field kind gdu-model")
        _emit_fe(lines, model.fe)
        _emit_layer(lines, model.layer)
    elif isinstance(model, ErmModel):
        lines.append("field kind erm-model")
        _emit_fe(lines, model.fe)
        lines.append(f"field activation {model.heads[0].activation}")
        lines.append(f"field num_heads {len(model.heads)}")
        for j, head in enumerate(model.heads):
            _emit_block(lines, f"head_w{j}", head.weights)
            _emit_block(lines, f"head_b{j}", head.bias)
    else:
        raise CheckpointError(f"cannot serialize object of type {type(model).__name__}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def _open_reader(text: str) -> tuple:
    reader = _Reader(text)
    reader.expect("gdu-checkpoint")
    version = int(reader.next())
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = reader.read_field("kind")
    return reader, kind


def layer_from_text(text: str) -> GduLayer:
    reader, kind = _open_reader(text)
    if kind != "layer":
        raise CheckpointError(f"expected a layer checkpoint, found {kind!r}")
    layer = _read_layer(reader)
    reader.expect("end")
    return layer


def model_from_text(text: str):
    reader, kind = _open_reader(text)
    if kind == "gdu-model":
        fe = _read_fe(reader)
        layer = _read_layer(reader)
        reader.expect("end")
        return GduModel(fe, layer)
    if kind == "erm-model":
        fe = _read_fe(reader)
        activation = reader.read_field("activation")
        num_heads = int(reader.read_field("num_heads"))
        heads = []
        for j in range(num_heads):
            w = reader.read_block(f"head_w{j}")
            b = reader.read_block(f"head_b{j}")
            heads.append(LearningMachine(w, b, activation))
        reader.expect("end")
        return ErmModel(fe, heads)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def save_layer(path, layer: GduLayer):
    with open(path, "w", newline="\n") as fh:
        fh.write(layer_to_text(layer))


def load_layer(path) -> GduLayer:
    with open(path) as fh:
        return layer_from_text(fh.read())


def save_model(path, model):
    with open(path, "w", newline="\n") as fh:
        fh.write(model_to_text(model))


def load_model(path):
    with open(path) as fh:
        return model_from_text(fh.read())
