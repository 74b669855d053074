"""The weight-sharing search space: per-layer adapt/fine-tune variants.

Each of the K chain layers carries three parameter sets: frozen pre-trained
weights, a trainable fine-tuned copy, and a trainable adapter initialized to
contribute exactly zero. A path picks one of four variants per layer via two
bits (adapt?, fine-tune?), so the space has 4^K members sharing weights.

Bit layout of a path: bit[2i] = adapter for layer i, bit[2i+1] = fine-tune
for layer i. This layout is fixed so cosine distances between encodings are
reproducible.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamBlock,
    Tape,
    Tensor,
    adapted_linear,
    forward_linear,
)

ADAPTER_KINDS = ("residual", "offset")

CHECKPOINT_MAGIC = b"ASCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerDecision:
    adapter: bool
    finetune: bool


@dataclass(frozen=True)
class PathEncoding:
    """2K bits over {0,1}; see module docstring for the layout."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bits) % 2 != 0 or not all(b in (0, 1) for b in self.bits):
            raise ValueError("path bits must be an even-length 0/1 sequence")

    @property
    def n_layers(self) -> int:
        return len(self.bits) // 2

    def decisions(self) -> list[LayerDecision]:
        return [
            LayerDecision(adapter=bool(self.bits[2 * i]), finetune=bool(self.bits[2 * i + 1]))
            for i in range(self.n_layers)
        ]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float64)

    def bit_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_bit_string(cls, s: str) -> "PathEncoding":
        if not set(s) <= {"0", "1"}:
            raise ValueError(f"invalid path bit string {s!r}")
        return cls(tuple(int(ch) for ch in s))


def encode_path(decisions: list[LayerDecision]) -> PathEncoding:
    bits: list[int] = []
    for d in decisions:
        bits.append(int(d.adapter))
        bits.append(int(d.finetune))
    return PathEncoding(tuple(bits))


def decode_path(p: PathEncoding) -> list[LayerDecision]:
    return p.decisions()


def zero_path(k: int) -> PathEncoding:
    return PathEncoding((0,) * (2 * k))


def all_paths(k: int):
    """All 4^k encodings, in lexicographic bit order."""
    for bits in itertools.product((0, 1), repeat=2 * k):
        yield PathEncoding(bits)


def sample_uniform_path(k: int, rng: np.random.Generator) -> PathEncoding:
    """Each bit an independent fair coin, so every path has probability 4^-k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return PathEncoding(tuple(int(b) for b in rng.integers(0, 2, size=2 * k)))


def _he_init(rng: np.random.Generator, d_in: int, d_out: int, gain: float) -> np.ndarray:
    return rng.standard_normal((d_in, d_out)) * np.sqrt(gain / d_in)


class Backbone:
    """A plain dense chain: the pre-training target the supernet is built from."""

    def __init__(self, weights: list[tuple[np.ndarray, np.ndarray]], activations: list[str], seed: int = 0):
        if len(weights) != len(activations):
            raise ValueError("one activation per layer required")
        self.seed = seed
        self.activations = list(activations)
        self.layers: list[tuple[ParamBlock, ParamBlock]] = []
        for i, (w, b) in enumerate(weights):
            self.layers.append(
                (
                    ParamBlock(f"layer{i:02d}.w", w, trainable=True),
                    ParamBlock(f"layer{i:02d}.b", b, trainable=True),
                )
            )

    @classmethod
    def init_random(
        cls, d_in: int, hidden_dim: int, embed_dim: int, n_layers: int, seed: int
    ) -> "Backbone":
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        from .seeding import rng_from

        rng = rng_from(seed, "backbone-init")
        dims = [d_in] + [hidden_dim] * (n_layers - 1) + [embed_dim]
        weights = []
        activations = []
        for i in range(n_layers):
            last = i == n_layers - 1
            gain = 1.0 if last else 2.0
            weights.append((_he_init(rng, dims[i], dims[i + 1], gain), np.zeros(dims[i + 1])))
            activations.append("identity" if last else "relu")
        return cls(weights, activations, seed=seed)

    @property
    def d_in(self) -> int:
        return self.layers[0][0].value.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].value.shape[1]

    def forward(self, x, tape: Tape | None = None) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.data.shape[1] != self.d_in:
            raise ValueError(f"input dim {h.data.shape[1]} != expected {self.d_in}")
        for (w, b), act in zip(self.layers, self.activations):
            h = forward_linear(h, w, b, act, tape)
        return h

    def blocks(self) -> list[ParamBlock]:
        return [blk for pair in self.layers for blk in pair]


class SupernetLayer:
    """One adaptable unit: frozen phi, trainable fine-tuned copy, zero-init adapter."""

    def __init__(
        self,
        index: int,
        phi_w: np.ndarray,
        phi_b: np.ndarray,
        activation: str,
        adapter_kind: str,
    ):
        if adapter_kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter kind {adapter_kind!r}")
        self.index = index
        self.activation = activation
        self.adapter_kind = adapter_kind
        prefix = f"layer{index:02d}"
        self.phi_w = ParamBlock(f"{prefix}.phi.w", phi_w, trainable=False)
        self.phi_b = ParamBlock(f"{prefix}.phi.b", phi_b, trainable=False)
        self.tuned_w = ParamBlock(f"{prefix}.tuned.w", phi_w.copy(), trainable=True)
        self.tuned_b = ParamBlock(f"{prefix}.tuned.b", phi_b.copy(), trainable=True)
        if adapter_kind == "residual":
            adapter_value = np.zeros_like(phi_w)
        else:
            adapter_value = np.zeros_like(phi_b)
        self.adapter = ParamBlock(f"{prefix}.adapter", adapter_value, trainable=True)

    @property
    def in_dim(self) -> int:
        return self.phi_w.value.shape[0]

    @property
    def out_dim(self) -> int:
        return self.phi_w.value.shape[1]

    def blocks(self) -> list[ParamBlock]:
        return [self.phi_w, self.phi_b, self.tuned_w, self.tuned_b, self.adapter]


class Supernet:
    """Ordered chain of SupernetLayers sharing weights across all 4^K paths."""

    def __init__(self, layers: list[SupernetLayer], seed: int = 0):
        if not layers:
            raise ValueError("supernet needs at least one layer")
        self.layers = layers
        self.seed = seed

    @classmethod
    def from_backbone(cls, backbone: Backbone, adapter_kind: str = "residual") -> "Supernet":
        layers = [
            SupernetLayer(
                i,
                w.value.copy(),
                b.value.copy(),
                activation=act,
                adapter_kind=adapter_kind,
            )
            for i, ((w, b), act) in enumerate(zip(backbone.layers, backbone.activations))
        ]
        return cls(layers, seed=backbone.seed)

    @property
    def k(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def adapter_kind(self) -> str:
        return self.layers[0].adapter_kind

    def _check_path(self, p: PathEncoding) -> None:
        if p.n_layers != self.k:
            raise ValueError(f"path has {p.n_layers} layers, supernet has {self.k}")

    def forward_path(
        self,
        p: PathEncoding,
        x,
        tape: Tape | None = None,
        overrides: dict[str, ParamBlock] | None = None,
        start_layer: int = 0,
        stop_layer: int | None = None,
    ) -> Tensor:
        """Path-conditioned embedding of ``x`` through layers [start_layer, stop_layer).

        ``overrides`` maps block ids to replacement blocks (episode-local
        clones); ``start_layer`` lets callers resume from cached activations
        of the frozen prefix.
        """
        self._check_path(p)
        stop = self.k if stop_layer is None else stop_layer
        if not 0 <= start_layer <= stop <= self.k:
            raise ValueError(f"bad layer range [{start_layer}, {stop})")
        h = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.layers[start_layer].in_dim if start_layer < self.k else self.embed_dim
        if h.data.ndim != 2 or h.data.shape[1] != expected:
            raise ValueError(f"input dim {h.data.shape} incompatible with layer dim {expected}")
        overrides = overrides or {}

        def resolve(block: ParamBlock) -> ParamBlock:
            return overrides.get(block.id, block)

        decisions = p.decisions()
        for layer, d in zip(self.layers[start_layer:stop], decisions[start_layer:stop]):
            w = resolve(layer.tuned_w) if d.finetune else layer.phi_w
            b = resolve(layer.tuned_b) if d.finetune else layer.phi_b
            adapter = resolve(layer.adapter) if d.adapter else None
            h = adapted_linear(h, w, b, layer.activation, adapter, layer.adapter_kind, tape)
        return h

    def clone_path_params(self, p: PathEncoding) -> dict[str, ParamBlock]:
        """Fresh trainable copies of the adapter/fine-tune blocks the path uses."""
        self._check_path(p)
        clones: dict[str, ParamBlock] = {}
        for layer, d in zip(self.layers, p.decisions()):
            if d.adapter:
                clones[layer.adapter.id] = layer.adapter.clone()
            if d.finetune:
                clones[layer.tuned_w.id] = layer.tuned_w.clone()
                clones[layer.tuned_b.id] = layer.tuned_b.clone()
        return clones

    def path_param_groups(
        self, p: PathEncoding, overrides: dict[str, ParamBlock] | None = None
    ) -> tuple[list[ParamBlock], list[ParamBlock]]:
        """(adapter blocks, fine-tune blocks) active on the path, override-resolved."""
        self._check_path(p)
        overrides = overrides or {}
        adapters: list[ParamBlock] = []
        tuned: list[ParamBlock] = []
        for layer, d in zip(self.layers, p.decisions()):
            if d.adapter:
                adapters.append(overrides.get(layer.adapter.id, layer.adapter))
            if d.finetune:
                tuned.append(overrides.get(layer.tuned_w.id, layer.tuned_w))
                tuned.append(overrides.get(layer.tuned_b.id, layer.tuned_b))
        return adapters, tuned

    def first_adapted_layer(self, p: PathEncoding) -> int:
        """Index of the first layer with any trainable block on the path; K if none."""
        self._check_path(p)
        for i, d in enumerate(p.decisions()):
            if d.adapter or d.finetune:
                return i
        return self.k

    def all_blocks(self) -> list[ParamBlock]:
        return [blk for layer in self.layers for blk in layer.blocks()]

    def phi_blocks(self) -> list[ParamBlock]:
        return [blk for layer in self.layers for blk in (layer.phi_w, layer.phi_b)]


# ---------------------------------------------------------------------------
# Checkpoint container: magic, length-prefixed JSON manifest, then the raw
# little-endian float64 arrays in declared order. Round trips are bit-exact.
# ---------------------------------------------------------------------------


def _declared_arrays(obj) -> list[tuple[str, np.ndarray]]:
    if isinstance(obj, Supernet):
        out = []
        for layer in obj.layers:
            for blk in layer.blocks():
                out.append((blk.id, blk.value))
        return out
    if isinstance(obj, Backbone):
        return [(blk.id, blk.value) for blk in obj.blocks()]
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def serialize(obj: Supernet | Backbone) -> bytes:
    arrays = _declared_arrays(obj)
    if isinstance(obj, Supernet):
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "supernet",
            "n_layers": obj.k,
            "d_in": obj.d_in,
            "embed_dim": obj.embed_dim,
            "adapter_kind": obj.adapter_kind,
            "activations": [layer.activation for layer in obj.layers],
            "layer_dims": [[layer.in_dim, layer.out_dim] for layer in obj.layers],
            "seed": obj.seed,
            "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        }
    else:
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "backbone",
            "n_layers": len(obj.layers),
            "d_in": obj.d_in,
            "embed_dim": obj.embed_dim,
            "activations": list(obj.activations),
            "layer_dims": [[w.value.shape[0], w.value.shape[1]] for w, _ in obj.layers],
            "seed": obj.seed,
            "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    parts.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    return b"".join(parts)


def deserialize(blob: bytes) -> Supernet | Backbone:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    manifest = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    offset = 8 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64, copy=True)
        offset += nbytes
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")

    n_layers = manifest["n_layers"]
    if manifest["kind"] == "backbone":
        weights = [
            (arrays[f"layer{i:02d}.w"], arrays[f"layer{i:02d}.b"]) for i in range(n_layers)
        ]
        return Backbone(weights, manifest["activations"], seed=manifest["seed"])

    layers = []
    for i in range(n_layers):
        prefix = f"layer{i:02d}"
        layer = SupernetLayer(
            i,
            arrays[f"{prefix}.phi.w"],
            arrays[f"{prefix}.phi.b"],
            activation=manifest["activations"][i],
            adapter_kind=manifest["adapter_kind"],
        )
        layer.tuned_w.value = arrays[f"{prefix}.tuned.w"].copy()
        layer.tuned_b.value = arrays[f"{prefix}.tuned.b"].copy()
        layer.adapter.value = arrays[f"{prefix}.adapter"].copy()
        layers.append(layer)
    return Supernet(layers, seed=manifest["seed"])


def save_checkpoint(obj: Supernet | Backbone, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(obj))


def load_checkpoint(path) -> Supernet | Backbone:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
