"""Perceptrons, MLPs and the two recurrent cells used by the pipeline.

Weights are stored ``(out, in)`` and applied to the last axis of the input,
so every forward function accepts a leading batch dimension. Parameters may
be plain arrays or traced :class:`~trmflow.autodiff.Var` leaves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError
from .io_utils import atomic_write_bytes

ACTIVATIONS = {"sigmoid": ad.sigmoid, "tanh": ad.tanh, "identity": ad.identity}


@dataclass
class Perceptron:
    weights: object  # (out, in)
    biases: object  # (out,)
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        w, b = ad.value_of(self.weights), ad.value_of(self.biases)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionError(f"inconsistent perceptron shapes {w.shape} / {b.shape}")

    @property
    def n_in(self) -> int:
        return ad.value_of(self.weights).shape[1]

    @property
    def n_out(self) -> int:
        return ad.value_of(self.weights).shape[0]

    def arrays(self):
        return [self.weights, self.biases]

    def with_arrays(self, arrays):
        w, b = arrays
        return Perceptron(w, b, self.activation)


@dataclass
class Mlp:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer output {a.n_out} does not feed input {b.n_in}")

    def arrays(self):
        return [x for layer in self.layers for x in layer.arrays()]

    def with_arrays(self, arrays):
        return Mlp([layer.with_arrays(arrays[2 * i : 2 * i + 2]) for i, layer in enumerate(self.layers)])


@dataclass
class Lstm:
    """Four gate perceptrons acting on ``h || x`` plus the state activation."""

    p1: Perceptron
    p2: Perceptron
    p3: Perceptron
    p4: Perceptron
    state_activation: str = "sigmoid"

    def __post_init__(self):
        gates = (self.p1, self.p2, self.p3, self.p4)
        if len({(g.n_in, g.n_out) for g in gates}) != 1:
            raise DimensionError("LSTM gates must share input/output sizes")
        if self.p1.n_in <= self.p1.n_out:
            raise DimensionError("LSTM gate input must be hidden size + input size")

    @property
    def hidden_size(self) -> int:
        return self.p1.n_out

    @property
    def input_size(self) -> int:
        return self.p1.n_in - self.p1.n_out

    def arrays(self):
        return [x for g in (self.p1, self.p2, self.p3, self.p4) for x in g.arrays()]

    def with_arrays(self, arrays):
        gates = [g.with_arrays(arrays[2 * i : 2 * i + 2]) for i, g in enumerate((self.p1, self.p2, self.p3, self.p4))]
        return Lstm(*gates, state_activation=self.state_activation)


@dataclass
class Srnn:
    """Elman cell: ``s' = f1(s || x)``, ``y = f2(s')``."""

    f1: Perceptron
    f2: Perceptron

    def __post_init__(self):
        if self.f1.n_out != self.f2.n_in:
            raise DimensionError("readout input must equal state size")
        if self.f1.n_in < self.f1.n_out:
            raise DimensionError("recurrence input must be state size + input size")

    @property
    def state_size(self) -> int:
        return self.f1.n_out

    @property
    def input_size(self) -> int:
        return self.f1.n_in - self.f1.n_out

    def arrays(self):
        return self.f1.arrays() + self.f2.arrays()

    def with_arrays(self, arrays):
        return Srnn(self.f1.with_arrays(arrays[:2]), self.f2.with_arrays(arrays[2:]))


Block = Union[Perceptron, Mlp, Lstm, Srnn]


def init_perceptron(rng: np.random.Generator, n_in: int, n_out: int, activation="sigmoid") -> Perceptron:
    """Uniform weights in ``[-1/sqrt(n_in), 1/sqrt(n_in)]``, zero biases."""
    bound = 1.0 / np.sqrt(n_in)
    return Perceptron(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), activation)


def init_mlp(rng, sizes, activation="sigmoid") -> Mlp:
    return Mlp([init_perceptron(rng, a, b, activation) for a, b in zip(sizes, sizes[1:])])


def init_lstm(rng, n_in: int, hidden: int, activation="sigmoid") -> Lstm:
    gates = [init_perceptron(rng, hidden + n_in, hidden, activation) for _ in range(4)]
    return Lstm(*gates, state_activation=activation)


def init_srnn(rng, n_in: int, state: int, n_out: int, activation="sigmoid") -> Srnn:
    return Srnn(init_perceptron(rng, state + n_in, state, activation), init_perceptron(rng, state, n_out, activation))


def _check_last(x, n, what):
    got = ad.value_of(x).shape[-1]
    if got != n:
        raise DimensionError(f"{what}: expected last dimension {n}, got {got}")


def perceptron_forward(p: Perceptron, x):
    _check_last(x, p.n_in, "perceptron input")
    return ACTIVATIONS[p.activation](ad.add(ad.matvec(p.weights, x), p.biases))


def mlp_forward(m: Mlp, x):
    for layer in m.layers:
        x = perceptron_forward(layer, x)
    return x


def lstm_cell(p: Lstm, c, h, x):
    """One LSTM step; returns ``(c', h')`` and ``h'`` doubles as the output."""
    _check_last(c, p.hidden_size, "LSTM cell state")
    _check_last(h, p.hidden_size, "LSTM hidden state")
    _check_last(x, p.input_size, "LSTM input")
    hx = ad.concat([h, x], axis=-1)
    c_new = ad.add(
        ad.mul(perceptron_forward(p.p1, hx), c),
        ad.mul(perceptron_forward(p.p2, hx), perceptron_forward(p.p3, hx)),
    )
    h_new = ad.mul(perceptron_forward(p.p4, hx), ACTIVATIONS[p.state_activation](c_new))
    return c_new, h_new


def srnn_cell(p: Srnn, s, x):
    _check_last(s, p.state_size, "SRNN state")
    _check_last(x, p.input_size, "SRNN input")
    s_new = perceptron_forward(p.f1, ad.concat([s, x], axis=-1))
    return s_new, perceptron_forward(p.f2, s_new)


def count_params(block) -> int:
    """Number of scalar weights by enumeration."""
    if block is None:
        return 0
    return int(np.sum([ad.value_of(a).size for a in block.arrays()], dtype=np.int64))


def closed_form_counts(n_interfaces: int, n_observed: int) -> dict[str, int]:
    """Per-block parameter counts of the reference architecture.

    ``predictor_table`` is the count quoted for the Predictor in the
    reference size table; ``predictor`` is the Elman cell built here and
    ``predictor_delta`` their difference.
    """
    ni, no = n_interfaces, n_observed
    counts = {
        "mlp1": 2 * ni * (2 * ni + no + 2),
        "extractor": 4 * ni * (ni + no + 1),
        "mlp2": (ni - 1) * (ni + no + 1),
        "predictor": 3 * ni * ni + 2 * ni,
        "predictor_table": 3 * ni * (ni + 1),
    }
    counts["predictor_delta"] = counts["predictor_table"] - counts["predictor"]
    counts["total"] = counts["mlp1"] + counts["extractor"] + counts["mlp2"] + counts["predictor"]
    counts["total_table"] = 12 * ni * ni + 7 * ni * no + 11 * ni - no - 1
    return counts


# --- serialization -----------------------------------------------------------

MAGIC = b"TRMFLOW-ARRAYS 1\n"


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a JSON header followed by row-major little-endian float64 payloads."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.nbytes
    head = json.dumps({**header, "arrays": entries}, sort_keys=True).encode()
    blob = MAGIC + f"{len(head)}\n".encode() + head + b"".join(chunks)
    atomic_write_bytes(path, blob)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a parameter container")
    rest = blob[len(MAGIC) :]
    nl = rest.index(b"\n")
    n = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + n])
    payload = rest[nl + 1 + n :]
    arrays = {}
    for e in header.pop("arrays"):
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=size, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
    return header, arrays


def describe_block(block) -> dict:
    """Structure of a block without its weights (kind, activations, sizes)."""
    if isinstance(block, Perceptron):
        return {"kind": "perceptron", "activation": block.activation, "n_in": block.n_in, "n_out": block.n_out}
    if isinstance(block, Mlp):
        return {"kind": "mlp", "layers": [describe_block(x) for x in block.layers]}
    if isinstance(block, Lstm):
        return {
            "kind": "lstm",
            "state_activation": block.state_activation,
            "gates": [describe_block(g) for g in (block.p1, block.p2, block.p3, block.p4)],
        }
    if isinstance(block, Srnn):
        return {"kind": "srnn", "f1": describe_block(block.f1), "f2": describe_block(block.f2)}
    raise TypeError(type(block))


def build_block(desc: dict, arrays: list[np.ndarray]):
    """Inverse of :func:`describe_block` given the flat array list."""
    kind = desc["kind"]
    if kind == "perceptron":
        return Perceptron(arrays[0], arrays[1], desc["activation"])
    if kind == "mlp":
        return Mlp([build_block(d, arrays[2 * i : 2 * i + 2]) for i, d in enumerate(desc["layers"])])
    if kind == "lstm":
        gates = [build_block(d, arrays[2 * i : 2 * i + 2]) for i, d in enumerate(desc["gates"])]
        return Lstm(*gates, state_activation=desc["state_activation"])
    if kind == "srnn":
        return Srnn(build_block(desc["f1"], arrays[:2]), build_block(desc["f2"], arrays[2:]))
    raise DataError(f"unknown block kind {kind!r}")


def save_blocks(path, blocks: dict[str, Block], seed=None, extra_arrays=None, meta=None) -> None:
    arrays = {}
    for name, block in blocks.items():
        for i, a in enumerate(block.arrays()):
            arrays[f"{name}/{i}"] = ad.value_of(a)
    for name, a in (extra_arrays or {}).items():
        arrays[f"extra/{name}"] = a
    header = {
        "blocks": {name: describe_block(b) for name, b in blocks.items()},
        "order": list(blocks),
        "seed": seed,
        "meta": meta or {},
    }
    write_container(path, header, arrays)


def load_blocks(path):
    """Returns ``(blocks, seed, extra_arrays, meta)``."""
    header, arrays = read_container(path)
    blocks = {}
    for name in header["order"]:
        n = sum(1 for k in arrays if k.startswith(name + "/"))
        blocks[name] = build_block(header["blocks"][name], [arrays[f"{name}/{i}"] for i in range(n)])
    extra = {k[len("extra/") :]: v for k, v in arrays.items() if k.startswith("extra/")}
    return blocks, header["seed"], extra, header["meta"]
