"""Declarative network specs, forward evaluation and MC-dropout.

Config grammar (one string per network):

    input-103 → conv3-32 → conv3-64 → recur-256 → fc-64 → softmax-9

Tokens are separated by "→" or "->". ``convK-F`` is a K x K convolution with
F filters, ``recur-D`` a gated recurrent layer with state size D, ``fc-U`` a
dense layer, ``softmax-C`` the classifier, ``dropout-R`` dropout with rate R.
A max pooling layer follows every conv implicitly; ``(conv4-128 +
maxpooling)`` spells it out.

Layer ids are stable: input, conv1, pool1, ..., recur1, fc1, dropout1,
softmax. Every layer's activation is returned as a tap under its id.

Tensor layout: batches are N x w x w x B (numpy or torch). Conv/pool taps are
channel-first N x C x H x W; recurrent taps are the final state N x D.
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from core.errors import ArgumentError, ParseError, ShapeError, StructureError, UnsupportedStructureError

logger = logging.getLogger(__name__)

CONV = "conv"
MAXPOOL = "maxpool"
RECURRENT = "recurrent"
DENSE = "dense"
SOFTMAX = "softmax"
DROPOUT = "dropout"
UPSAMPLE = "upsample"
UNFLATTEN = "unflatten"

PARAMETRIC = (CONV, RECURRENT, DENSE, SOFTMAX)
INPUT_ID = "input"

_ID_PREFIX = {
    CONV: "conv",
    MAXPOOL: "pool",
    RECURRENT: "recur",
    DENSE: "fc",
    DROPOUT: "dropout",
    UPSAMPLE: "upsample",
    UNFLATTEN: "unflatten",
}


# === Specs ===

@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``units`` is filters, state size, units or classes by kind."""

    kind: str
    units: int = 0
    kernel_size: int = 0
    rate: float = 0.0
    shape: tuple[int, ...] = ()  # unflatten target (C, H, W) / upsample target (H, W)
    linear: bool = False         # no activation (decoder output)

    def __post_init__(self):
        if self.kind not in (CONV, MAXPOOL, RECURRENT, DENSE, SOFTMAX, DROPOUT, UPSAMPLE, UNFLATTEN):
            raise StructureError(f"Unknown layer kind '{self.kind}'")
        if self.kind in PARAMETRIC and self.units < 1:
            raise StructureError(f"{self.kind} layer needs a positive width, got {self.units}")
        if self.kind == CONV and self.kernel_size < 1:
            raise StructureError(f"conv kernel size must be >= 1, got {self.kernel_size}")
        if self.kind == DROPOUT and not 0.0 <= self.rate < 1.0:
            raise StructureError(f"dropout rate must lie in [0, 1), got {self.rate}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def conv(cls, kernel_size: int, filters: int) -> "LayerSpec":
        return cls(CONV, units=filters, kernel_size=kernel_size)

    @classmethod
    def maxpool(cls) -> "LayerSpec":
        return cls(MAXPOOL)

    @classmethod
    def recurrent(cls, state_dim: int) -> "LayerSpec":
        return cls(RECURRENT, units=state_dim)

    @classmethod
    def dense(cls, units: int, linear: bool = False) -> "LayerSpec":
        return cls(DENSE, units=units, linear=linear)

    @classmethod
    def softmax(cls, classes: int) -> "LayerSpec":
        return cls(SOFTMAX, units=classes)

    @classmethod
    def dropout(cls, rate: float) -> "LayerSpec":
        return cls(DROPOUT, rate=rate)

    @property
    def is_parametric(self) -> bool:
        return self.kind in PARAMETRIC


def assign_ids(layers: Sequence[LayerSpec]) -> tuple[str, ...]:
    counters: dict[str, int] = {}
    ids = []
    for layer in layers:
        if layer.kind == SOFTMAX:
            ids.append("softmax")
            continue
        counters[layer.kind] = counters.get(layer.kind, 0) + 1
        ids.append(f"{_ID_PREFIX[layer.kind]}{counters[layer.kind]}")
    return tuple(ids)


@dataclass(frozen=True)
class NetworkSpec:
    """Input description plus an ordered layer list.

    ``window`` is the spatial side of input patches. With ``auto_pool`` every
    conv must be immediately followed by a maxpool.
    """

    input_bands: int
    layers: tuple[LayerSpec, ...]
    window: int = 1
    auto_pool: bool = True

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if self.input_bands < 1:
            raise StructureError(f"input needs at least one band, got {self.input_bands}")
        if self.window < 1:
            raise StructureError(f"window must be >= 1, got {self.window}")

        kinds = [layer.kind for layer in layers]
        if kinds.count(SOFTMAX) > 1:
            raise StructureError("At most one softmax layer is allowed")
        if SOFTMAX in kinds and kinds[-1] != SOFTMAX:
            raise StructureError("softmax must be the final layer")

        ids = assign_ids(layers)
        seen_recurrent = False
        seen_flat = False
        for i, (lid, kind) in enumerate(zip(ids, kinds)):
            if self.auto_pool and kind == CONV and (i + 1 >= len(kinds) or kinds[i + 1] != MAXPOOL):
                raise StructureError(f"layer '{lid}': conv must be followed by maxpool")
            if kind in (CONV, MAXPOOL) and seen_recurrent:
                raise StructureError(f"layer '{lid}': conv/maxpool after a recurrent layer")
            if kind == RECURRENT and seen_flat:
                raise StructureError(f"layer '{lid}': recurrent layer after a dense layer")
            seen_recurrent |= kind == RECURRENT
            seen_flat |= kind in (DENSE, SOFTMAX)

        object.__setattr__(self, "_ids", ids)

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return self._ids

    def layer(self, layer_id: str) -> LayerSpec:
        try:
            return self.layers[self._ids.index(layer_id)]
        except ValueError:
            raise ArgumentError(f"Unknown layer id '{layer_id}'. Known: {', '.join(self._ids)}") from None

    def index_of(self, layer_id: str) -> int:
        if layer_id == INPUT_ID:
            return -1
        self.layer(layer_id)
        return self._ids.index(layer_id)

    @property
    def parametric_ids(self) -> tuple[str, ...]:
        return tuple(lid for lid, layer in zip(self._ids, self.layers) if layer.is_parametric)

    @property
    def n_classes(self) -> Optional[int]:
        if self.layers and self.layers[-1].kind == SOFTMAX:
            return self.layers[-1].units
        return None

    @property
    def dropout_rates(self) -> tuple[float, ...]:
        return tuple(layer.rate for layer in self.layers if layer.kind == DROPOUT)

    @property
    def has_dropout(self) -> bool:
        return any(rate > 0 for rate in self.dropout_rates)

    def count(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)

    def unit_tap_ids(self) -> list[tuple[str, str]]:
        """(kind, tap id) per conv unit, recurrent and dense layer, in order.

        A conv unit's tap is its pooling layer when one follows.
        """
        units = []
        for i, (lid, layer) in enumerate(zip(self._ids, self.layers)):
            if layer.kind == CONV:
                nxt = i + 1
                tap = self._ids[nxt] if nxt < len(self.layers) and self.layers[nxt].kind == MAXPOOL else lid
                units.append((CONV, tap))
            elif layer.kind in (RECURRENT, DENSE):
                units.append((layer.kind, lid))
        return units


# === Grammar ===

_SEPARATOR = re.compile(r"→|->")
_TOKENS = [
    (re.compile(r"^input-(\d+)$"), "input"),
    (re.compile(r"^conv(\d+)-(\d+)$"), CONV),
    (re.compile(r"^recur-(\d+)$"), RECURRENT),
    (re.compile(r"^fc-(\d+)$"), DENSE),
    (re.compile(r"^softmax-(\d+)$"), SOFTMAX),
    (re.compile(r"^dropout-(\d*\.?\d+)$"), DROPOUT),
    (re.compile(r"^max\s*pool(?:ing)?$"), MAXPOOL),
]


def _split_tokens(text: str) -> list[tuple[str, int]]:
    """(token, character offset) pairs between separators."""
    pieces = []
    start = 0
    for match in list(_SEPARATOR.finditer(text)) + [None]:
        end = match.start() if match else len(text)
        raw = text[start:end]
        stripped = raw.strip()
        offset = start + (len(raw) - len(raw.lstrip()))
        pieces.append((stripped, offset))
        if match:
            start = match.end()
    return pieces


def _parse_token(token: str, position: int, text: str):
    lowered = re.sub(r"\s+", " ", token.lower())
    for pattern, kind in _TOKENS:
        m = pattern.match(lowered)
        if not m:
            continue
        if kind == "input":
            return kind, int(m.group(1))
        if kind == CONV:
            return kind, LayerSpec.conv(int(m.group(1)), int(m.group(2)))
        if kind == RECURRENT:
            return kind, LayerSpec.recurrent(int(m.group(1)))
        if kind == DENSE:
            return kind, LayerSpec.dense(int(m.group(1)))
        if kind == SOFTMAX:
            return kind, LayerSpec.softmax(int(m.group(1)))
        if kind == DROPOUT:
            return kind, LayerSpec.dropout(float(m.group(1)))
        return kind, LayerSpec.maxpool()
    raise ParseError(token, position, text)


def _parse_unit(token: str, position: int, text: str) -> list[tuple[str, object]]:
    """A token or a parenthesized '(a + b)' unit."""
    if not token:
        raise ParseError(token, position, text)
    if token.startswith("(") and token.endswith(")"):
        inner = token[1:-1]
        parts = []
        offset = position + 1
        for part in inner.split("+"):
            lead = len(part) - len(part.lstrip())
            parts.append(_parse_token(part.strip(), offset + lead, text))
            offset += len(part) + 1
        return parts
    return [_parse_token(token, position, text)]


def parse_config(text: str, window: int = 1, auto_pool: bool = True) -> NetworkSpec:
    """Parse a config string into a NetworkSpec."""
    input_bands = None
    layers: list[LayerSpec] = []

    for index, (token, position) in enumerate(_split_tokens(text)):
        for kind, value in _parse_unit(token, position, text):
            if kind == "input":
                if index != 0 or input_bands is not None:
                    raise StructureError(f"input token must come first (position {position})")
                input_bands = value
            else:
                if input_bands is None:
                    raise StructureError("Config must start with input-N")
                layers.append(value)

    if input_bands is None:
        raise StructureError("Config must start with input-N")

    if auto_pool:
        pooled: list[LayerSpec] = []
        for i, layer in enumerate(layers):
            pooled.append(layer)
            if layer.kind == CONV and (i + 1 >= len(layers) or layers[i + 1].kind != MAXPOOL):
                pooled.append(LayerSpec.maxpool())
        layers = pooled

    return NetworkSpec(input_bands=input_bands, layers=tuple(layers), window=window, auto_pool=auto_pool)


def _render_layer(layer: LayerSpec) -> str:
    if layer.kind == CONV:
        token = f"conv{layer.kernel_size}-{layer.units}"
    elif layer.kind == MAXPOOL:
        token = "maxpool"
    elif layer.kind == RECURRENT:
        token = f"recur-{layer.units}"
    elif layer.kind == DENSE:
        token = f"fc-{layer.units}"
    elif layer.kind == SOFTMAX:
        token = f"softmax-{layer.units}"
    elif layer.kind == DROPOUT:
        token = f"dropout-{layer.rate:g}"
    elif layer.kind == UPSAMPLE:
        token = "upsample-" + "x".join(map(str, layer.shape))
    else:
        token = "unflatten-" + "x".join(map(str, layer.shape))
    return token + (" (linear)" if layer.linear else "")


def render_config(spec: NetworkSpec) -> str:
    """Canonical config string; implicit pools are omitted."""
    tokens = [f"input-{spec.input_bands}"]
    for i, layer in enumerate(spec.layers):
        if layer.kind == MAXPOOL and spec.auto_pool and i > 0 and spec.layers[i - 1].kind == CONV:
            continue
        tokens.append(_render_layer(layer))
    return " → ".join(tokens)


def trunk(spec: NetworkSpec) -> NetworkSpec:
    """The spec without its softmax head."""
    if spec.n_classes is None:
        return spec
    return replace(spec, layers=spec.layers[:-1])


def with_head(spec: NetworkSpec, n_classes: int, head_units: Sequence[int] = ()) -> NetworkSpec:
    """Trunk of ``spec`` plus dense layers and a fresh softmax."""
    base = trunk(spec)
    extra = tuple(LayerSpec.dense(u) for u in head_units) + (LayerSpec.softmax(n_classes),)
    return replace(base, layers=base.layers + extra)


def with_dropout(spec: NetworkSpec, rate: float) -> NetworkSpec:
    """Insert dropout after every conv unit, replacing existing dropout layers."""
    layers = [layer for layer in spec.layers if layer.kind != DROPOUT]
    out: list[LayerSpec] = []
    for i, layer in enumerate(layers):
        out.append(layer)
        nxt = layers[i + 1].kind if i + 1 < len(layers) else None
        if layer.kind == MAXPOOL and i > 0 and layers[i - 1].kind == CONV:
            out.append(LayerSpec.dropout(rate))
        elif layer.kind == CONV and nxt != MAXPOOL:
            out.append(LayerSpec.dropout(rate))
    return replace(spec, layers=tuple(out))


# === Shapes ===

@dataclass(frozen=True)
class _Shape:
    """Per-sample activation shape. kind: spatial (C, H, W), seq (L, D) or flat (U,)."""
    kind: str
    dims: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True)
class _Step:
    layer_id: str
    layer: LayerSpec
    in_shape: _Shape
    out_shape: _Shape


def _next_parametric(layers: Sequence[LayerSpec], i: int) -> Optional[str]:
    for layer in layers[i + 1:]:
        if layer.kind != DROPOUT:
            return layer.kind
    return None


def _walk(spec: NetworkSpec) -> list[_Step]:
    shape = _Shape("spatial", (spec.input_bands, spec.window, spec.window))
    steps = []
    for i, (lid, layer) in enumerate(zip(spec.layer_ids, spec.layers)):
        kind = layer.kind
        if kind == CONV:
            if shape.kind != "spatial":
                raise StructureError(f"layer '{lid}': conv needs a spatial input")
            out = _Shape("spatial", (layer.units,) + shape.dims[1:])
        elif kind == MAXPOOL:
            if shape.kind != "spatial":
                raise StructureError(f"layer '{lid}': maxpool needs a spatial input")
            c, h, w = shape.dims
            out = shape if min(h, w) < 2 else _Shape("spatial", (c, h // 2, w // 2))
        elif kind == RECURRENT:
            length = shape.dims[0]
            keep_sequence = _next_parametric(spec.layers, i) == RECURRENT
            out = _Shape("seq", (length, layer.units)) if keep_sequence else _Shape("flat", (layer.units,))
        elif kind in (DENSE, SOFTMAX):
            out = _Shape("flat", (layer.units,))
        elif kind == UPSAMPLE:
            out = _Shape("spatial", (shape.dims[0],) + layer.shape)
        elif kind == UNFLATTEN:
            if shape.size != int(np.prod(layer.shape)):
                raise StructureError(f"layer '{lid}': cannot unflatten {shape.size} values to {layer.shape}")
            out = _Shape("spatial", layer.shape)
        else:
            out = shape
        steps.append(_Step(lid, layer, shape, out))
        shape = out
    return steps


def _recurrent_step_dim(shape: _Shape) -> int:
    if shape.kind == "spatial":
        return shape.dims[1] * shape.dims[2]
    return shape.dims[-1]


def infer_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Per-sample tap shape for every layer id, input included."""
    shapes = {INPUT_ID: (spec.window, spec.window, spec.input_bands)}
    for step in _walk(spec):
        if step.layer.kind == RECURRENT:
            shapes[step.layer_id] = (step.layer.units,)
        else:
            shapes[step.layer_id] = step.out_shape.dims
    return shapes


def feature_dim(spec: NetworkSpec, layer_id: str) -> int:
    """Flattened width of a layer's tap."""
    return int(np.prod(infer_shapes(spec)[layer_id]))


def param_shapes(spec: NetworkSpec) -> dict[str, dict[str, tuple[int, ...]]]:
    shapes: dict[str, dict[str, tuple[int, ...]]] = {}
    for step in _walk(spec):
        layer = step.layer
        if layer.kind == CONV:
            k = layer.kernel_size
            shapes[step.layer_id] = {
                "weight": (k, k, step.in_shape.dims[0], layer.units),
                "bias": (layer.units,),
            }
        elif layer.kind == RECURRENT:
            d = layer.units
            shapes[step.layer_id] = {
                "weight": (_recurrent_step_dim(step.in_shape), 3 * d),
                "recurrent_weight": (d, 3 * d),
                "bias": (3 * d,),
            }
        elif layer.kind in (DENSE, SOFTMAX):
            shapes[step.layer_id] = {
                "weight": (step.in_shape.size, layer.units),
                "bias": (layer.units,),
            }
    return shapes


# === Parameters ===

@dataclass
class ParamStore:
    """Weight tensors keyed by layer id, then by name (weight, bias, ...)."""

    tensors: dict[str, dict[str, torch.Tensor]]
    seed: Optional[int] = None

    def __getitem__(self, layer_id: str) -> dict[str, torch.Tensor]:
        return self.tensors[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.tensors

    @property
    def layer_ids(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self) -> torch.dtype:
        for group in self.tensors.values():
            for tensor in group.values():
                return tensor.dtype
        return torch.float32

    def parameters(self, layer_ids: Optional[Sequence[str]] = None) -> list[torch.Tensor]:
        ids = self.layer_ids if layer_ids is None else layer_ids
        return [t for lid in ids for t in self.tensors[lid].values()]

    def requires_grad_(self, flag: bool = True, layer_ids: Optional[Sequence[str]] = None) -> "ParamStore":
        for tensor in self.parameters(layer_ids):
            tensor.requires_grad_(flag)
        return self

    def clone(self) -> "ParamStore":
        return ParamStore(
            tensors={lid: {name: t.detach().clone() for name, t in group.items()} for lid, group in self.tensors.items()},
            seed=self.seed,
        )

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore(
            tensors={lid: {name: t.detach().to(dtype) for name, t in group.items()} for lid, group in self.tensors.items()},
            seed=self.seed,
        )

    def checksum(self, layer_ids: Optional[Sequence[str]] = None) -> str:
        """SHA-256 over the raw bytes of the selected layers."""
        digest = hashlib.sha256()
        ids = sorted(self.layer_ids if layer_ids is None else layer_ids)
        for lid in ids:
            for name in sorted(self.tensors[lid]):
                digest.update(f"{lid}.{name}".encode())
                digest.update(self.tensors[lid][name].detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.parameters())

    def update(self, other: "ParamStore", layer_ids: Sequence[str]) -> None:
        """Copy the given layers from ``other``."""
        for lid in layer_ids:
            self.tensors[lid] = {name: t.detach().clone() for name, t in other.tensors[lid].items()}

    def save(self, path: Union[str, Path], spec: Optional[NetworkSpec] = None, extra: Optional[dict] = None) -> Path:
        """Write ``path`` (torch checkpoint) and a JSON manifest next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({lid: {n: t.detach().cpu() for n, t in g.items()} for lid, g in self.tensors.items()}, path)

        manifest = {
            "seed": self.seed,
            "dtype": str(self.dtype).replace("torch.", ""),
            "shapes": {lid: {n: list(t.shape) for n, t in g.items()} for lid, g in self.tensors.items()},
        }
        if spec is not None:
            manifest.update(config=render_config(spec), window=spec.window, auto_pool=spec.auto_pool)
        if extra:
            manifest.update(extra)
        manifest_path = path.with_suffix(".json")
        manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return manifest_path

    @classmethod
    def load(cls, path: Union[str, Path]) -> tuple["ParamStore", dict]:
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        tensors = torch.load(path, weights_only=True)
        for lid, group in manifest["shapes"].items():
            for name, shape in group.items():
                if list(tensors[lid][name].shape) != shape:
                    raise ShapeError(f"{name} has shape {list(tensors[lid][name].shape)}, manifest says {shape}", lid)
        return cls(tensors=tensors, seed=manifest.get("seed")), manifest


def load_checkpoint(path: Union[str, Path]) -> tuple[NetworkSpec, ParamStore]:
    params, manifest = ParamStore.load(path)
    if "config" not in manifest:
        raise ArgumentError(f"Checkpoint {path} carries no network config")
    spec = parse_config(manifest["config"], window=manifest.get("window", 1), auto_pool=manifest.get("auto_pool", True))
    return spec, params


def init_params(spec: NetworkSpec, seed: int, dtype: torch.dtype = torch.float32) -> ParamStore:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    generator = torch.Generator().manual_seed(seed)
    tensors: dict[str, dict[str, torch.Tensor]] = {}
    for lid, shapes in param_shapes(spec).items():
        group = {}
        for name, shape in shapes.items():
            if name == "bias":
                group[name] = torch.zeros(shape, dtype=dtype)
                continue
            fan_in = int(np.prod(shape[:-1]))
            bound = float(np.sqrt(6.0 / fan_in))
            group[name] = (torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound
        tensors[lid] = group
    return ParamStore(tensors=tensors, seed=seed)


# === Forward ===

@dataclass
class ForwardResult:
    taps: dict[str, torch.Tensor]
    output: torch.Tensor
    logits: Optional[torch.Tensor] = None


def as_batch(batch, bands: int, window: int, dtype: torch.dtype) -> torch.Tensor:
    """N x w x w x B tensor; N x B input is accepted for window 1."""
    if isinstance(batch, torch.Tensor):
        x = batch.to(dtype)
    else:
        x = torch.tensor(np.asarray(batch), dtype=dtype)
    if x.ndim == 2 and window == 1:
        x = x.reshape(x.shape[0], 1, 1, x.shape[1])
    if x.ndim != 4 or tuple(x.shape[1:]) != (window, window, bands):
        raise ShapeError(f"expected batch of shape (N, {window}, {window}, {bands}), got {tuple(x.shape)}", INPUT_ID)
    return x


def _weights(params: ParamStore, layer_id: str, expected: dict[str, tuple[int, ...]]) -> dict[str, torch.Tensor]:
    if layer_id not in params:
        raise ShapeError("no parameters for layer", layer_id)
    group = params[layer_id]
    for name, shape in expected.items():
        if name not in group or tuple(group[name].shape) != shape:
            got = tuple(group[name].shape) if name in group else None
            raise ShapeError(f"{name} has shape {got}, expected {shape}", layer_id)
    return group


def _conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    k = weight.shape[0]
    # same padding; the extra row/column goes after for even kernels
    lo, hi = (k - 1) // 2, k // 2
    x = F.pad(x, (lo, hi, lo, hi))
    return F.conv2d(x, weight.permute(3, 2, 0, 1), bias)


def _gru(seq: torch.Tensor, group: dict[str, torch.Tensor]) -> torch.Tensor:
    """Gated recurrent scan over N x L x S; returns all states N x L x D."""
    w, u, b = group["weight"], group["recurrent_weight"], group["bias"]
    d = u.shape[0]
    projected = seq @ w + b
    h = seq.new_zeros(seq.shape[0], d)
    states = []
    for t in range(seq.shape[1]):
        xz, xr, xn = projected[:, t].split(d, dim=1)
        hz, hr, hn = (h @ u).split(d, dim=1)
        z = torch.sigmoid(xz + hz)
        r = torch.sigmoid(xr + hr)
        n = torch.tanh(xn + r * hn)
        h = (1.0 - z) * n + z * h
        states.append(h)
    return torch.stack(states, dim=1)


def _dropout(x: torch.Tensor, rate: float, generator: torch.Generator) -> torch.Tensor:
    if rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def forward(
    spec: NetworkSpec,
    params: ParamStore,
    batch,
    stochastic: bool = False,
    generator: Optional[torch.Generator] = None,
) -> ForwardResult:
    """Run the network. Dropout is active only when ``stochastic``."""
    x = as_batch(batch, spec.input_bands, spec.window, params.dtype)
    if stochastic and generator is None:
        generator = torch.Generator().manual_seed(0)

    shapes = param_shapes(spec)
    taps = {INPUT_ID: x}
    h = x.permute(0, 3, 1, 2)
    logits = None

    for step in _walk(spec):
        layer, lid = step.layer, step.layer_id
        if layer.kind == CONV:
            g = _weights(params, lid, shapes[lid])
            h = _conv(h, g["weight"], g["bias"])
            if not layer.linear:
                h = F.relu(h)
            tap = h
        elif layer.kind == MAXPOOL:
            if step.out_shape.dims != step.in_shape.dims:
                h = F.max_pool2d(h, kernel_size=2, stride=2)
            tap = h
        elif layer.kind == RECURRENT:
            g = _weights(params, lid, shapes[lid])
            seq = h.flatten(2) if h.ndim == 4 else h
            states = _gru(seq, g)
            tap = states[:, -1]
            h = states if step.out_shape.kind == "seq" else tap
        elif layer.kind in (DENSE, SOFTMAX):
            g = _weights(params, lid, shapes[lid])
            z = h.flatten(1) @ g["weight"] + g["bias"]
            if layer.kind == SOFTMAX:
                logits = z
                h = torch.softmax(z, dim=1)
            else:
                h = z if layer.linear else F.relu(z)
            tap = h
        elif layer.kind == DROPOUT:
            h = _dropout(h, layer.rate, generator) if stochastic else h
            tap = h
        elif layer.kind == UPSAMPLE:
            h = F.interpolate(h, size=layer.shape, mode="nearest")
            tap = h
        else:
            h = h.reshape(h.shape[0], *layer.shape)
            tap = h
        taps[lid] = tap

    output = h.permute(0, 2, 3, 1) if h.ndim == 4 else h
    return ForwardResult(taps=taps, output=output, logits=logits)


def tap_features(result: ForwardResult, layer_id: str) -> torch.Tensor:
    """A tap flattened to N x d."""
    if layer_id not in result.taps:
        raise ArgumentError(f"Unknown layer id '{layer_id}'")
    tap = result.taps[layer_id]
    return tap.reshape(tap.shape[0], -1)


# === MC dropout ===

@dataclass
class McResult:
    mean_probs: np.ndarray        # N x C
    entropy: np.ndarray           # N, entropy of the mean prediction
    mutual_information: np.ndarray  # N


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -torch.special.xlogy(p, p).sum(dim=-1)


def mc_forward(spec: NetworkSpec, params: ParamStore, batch, passes: int, seed: int = 0) -> McResult:
    """Average ``passes`` stochastic forward passes with resampled dropout masks."""
    if passes < 1:
        raise ArgumentError(f"passes must be >= 1, got {passes}")
    if spec.n_classes is None:
        raise StructureError("mc_forward needs a softmax head")

    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probs = torch.stack([
            forward(spec, params, batch, stochastic=True, generator=generator).output.to(torch.float64)
            for _ in range(passes)
        ])
    mean = probs.mean(dim=0)
    entropy = _entropy(mean)
    if passes == 1 or not spec.has_dropout:
        mutual = torch.zeros_like(entropy)
    else:
        mutual = torch.clamp(entropy - _entropy(probs).mean(dim=0), min=0.0)
    return McResult(mean_probs=mean.numpy(), entropy=entropy.numpy(), mutual_information=mutual.numpy())


# === Decoder ===

def mirrored_decoder(spec: NetworkSpec) -> NetworkSpec:
    """Decoder mapping the deepest activation back to the input patch.

    Dense layers mirror to dense, convs to convs back to the incoming channel
    count, pools to nearest-neighbour upsampling. The last layer is linear.
    The decoder's input is the encoder's last tap, channel-last for spatial
    taps.
    """
    if spec.n_classes is not None:
        raise StructureError("mirrored_decoder expects a spec without a softmax head")
    if spec.count(RECURRENT):
        raise UnsupportedStructureError("mirrored decoder is defined for feedforward trunks only")
    steps = _walk(spec)
    if not steps:
        raise StructureError("Cannot mirror an empty network")

    layers: list[LayerSpec] = []
    for step in reversed(steps):
        kind = step.layer.kind
        src = step.in_shape
        if kind == DENSE:
            layers.append(LayerSpec.dense(src.size))
            if src.kind == "spatial":
                layers.append(LayerSpec(UNFLATTEN, shape=src.dims))
        elif kind == CONV:
            layers.append(LayerSpec.conv(step.layer.kernel_size, src.dims[0]))
        elif kind == MAXPOOL and step.in_shape.dims != step.out_shape.dims:
            layers.append(LayerSpec(UPSAMPLE, shape=src.dims[1:]))

    # the final parametric layer is the reconstruction; drop its activation
    for i in range(len(layers) - 1, -1, -1):
        if layers[i].is_parametric:
            layers[i] = replace(layers[i], linear=True)
            break

    deepest = steps[-1].out_shape
    if deepest.kind == "spatial":
        bands, window = deepest.dims[0], deepest.dims[1]
    else:
        bands, window = deepest.size, 1
    return NetworkSpec(input_bands=bands, layers=tuple(layers), window=window, auto_pool=False)


def decoder_input(encoder_result: ForwardResult, encoder_spec: NetworkSpec) -> torch.Tensor:
    """The encoder's deepest tap arranged as a decoder batch."""
    last = encoder_spec.layer_ids[-1]
    tap = encoder_result.taps[last]
    if tap.ndim == 4:
        return tap.permute(0, 2, 3, 1)
    return tap.reshape(tap.shape[0], 1, 1, -1)


# === FANN ===

@dataclass(frozen=True)
class FannSpec:
    """Two branch trunks tied at aligned layer pairs, plus a fused head."""

    source_branch: NetworkSpec
    target_branch: NetworkSpec
    aligned_layer_ids: tuple[tuple[str, str], ...]
    head: tuple[LayerSpec, ...]

    def __post_init__(self):
        pairs = tuple((str(s), str(t)) for s, t in self.aligned_layer_ids)
        object.__setattr__(self, "aligned_layer_ids", pairs)
        object.__setattr__(self, "head", tuple(self.head))

        if not pairs:
            raise StructureError("FANN needs at least one aligned layer pair")
        for branch in (self.source_branch, self.target_branch):
            if branch.n_classes is not None:
                raise StructureError("FANN branches must not carry a softmax head")
        for side, branch, ids in (
            ("source", self.source_branch, [s for s, _ in pairs]),
            ("target", self.target_branch, [t for _, t in pairs]),
        ):
            positions = []
            for lid in ids:
                if lid not in branch.layer_ids:
                    raise StructureError(f"Aligned {side} layer '{lid}' does not exist")
                positions.append(branch.layer_ids.index(lid))
            if positions != sorted(set(positions)):
                raise StructureError(f"Aligned {side} layers must be distinct and in order")
        if not self.head or self.head[-1].kind != SOFTMAX:
            raise StructureError("FANN head must end in a softmax layer")
        if any(layer.kind not in (DENSE, DROPOUT, SOFTMAX) for layer in self.head):
            raise StructureError("FANN head may only hold dense, dropout and softmax layers")

    @property
    def n_classes(self) -> int:
        return self.head[-1].units

    @property
    def pair_ids(self) -> list[str]:
        return [f"FA-{k}" for k in range(1, len(self.aligned_layer_ids) + 1)]

    def head_spec(self, in_dim: int) -> NetworkSpec:
        return NetworkSpec(input_bands=in_dim, layers=self.head, window=1)


def _branch_from_units(bands: int, units: Sequence[str], window: int, auto_pool: bool) -> NetworkSpec:
    return trunk(parse_config(" → ".join([f"input-{bands}", *units]), window=window, auto_pool=auto_pool))


def build_fann_spec(
    source_config: Union[str, NetworkSpec],
    target_config: Union[str, NetworkSpec],
    n_classes: int,
    head_units: Sequence[int] = (),
    window: int = 1,
    auto_pool: bool = True,
) -> FannSpec:
    """Pair conv units and recurrent layers of two branches by position."""
    branches = []
    for config in (source_config, target_config):
        spec = parse_config(config, window=window, auto_pool=auto_pool) if isinstance(config, str) else config
        branches.append(trunk(spec))
    source, target = branches

    pairs = []
    for kind in (CONV, RECURRENT):
        src_taps = [tap for k, tap in source.unit_tap_ids() if k == kind]
        tgt_taps = [tap for k, tap in target.unit_tap_ids() if k == kind]
        pairs.extend(zip(src_taps, tgt_taps))

    head = tuple(LayerSpec.dense(u) for u in head_units) + (LayerSpec.softmax(n_classes),)
    return FannSpec(source_branch=source, target_branch=target, aligned_layer_ids=tuple(pairs), head=head)


_FANN_ROW = re.compile(r"^(?P<left>.*?)\s*(?:→|->)\s*DATL\s*(?:←|<-)\s*(?P<right>.*?)$")
_HEAD_ROW = re.compile(r"^(?:fully\s+connected|fc|softmax)-(\d+)$", re.IGNORECASE)
_BRANCH_TITLE = re.compile(r"^[A-Za-z][\w-]*\s*\(.*\)$")


def parse_fann_config(
    text: str,
    source_bands: int,
    target_bands: int,
    window: int = 1,
    auto_pool: bool = True,
) -> FannSpec:
    """Parse a row-per-alignment FANN description.

    Each row ``<source unit> → DATL ← <target unit>`` ties one layer of each
    branch. A title row (``FANN (...)``), a branch-name row such as
    ``CRNN (Street) → DATL ← CRNN (Aerial)`` and blank lines are skipped.
    Trailing ``fully connected-C`` / ``fc-U`` rows form the head; the last one
    is the classifier.
    """
    left_units: list[str] = []
    right_units: list[str] = []
    head_widths: list[int] = []
    offset = 0

    for line in text.splitlines(keepends=True):
        row = line.strip()
        position = offset + (len(line) - len(line.lstrip()))
        offset += len(line)
        if not row or row.upper().startswith("FANN"):
            continue
        match = _FANN_ROW.match(row)
        if match:
            left, right = match.group("left").strip(), match.group("right").strip()
            if _BRANCH_TITLE.match(left) and _BRANCH_TITLE.match(right) and not left.startswith("("):
                continue
            if head_widths:
                raise StructureError("Alignment rows must precede the head rows")
            left_units.append(left)
            right_units.append(right)
            continue
        head = _HEAD_ROW.match(row)
        if head:
            head_widths.append(int(head.group(1)))
            continue
        raise ParseError(row, position, text)

    if not left_units:
        raise StructureError("FANN config has no alignment rows")
    if not head_widths:
        raise StructureError("FANN config has no head row")

    source = _branch_from_units(source_bands, left_units, window, auto_pool)
    target = _branch_from_units(target_bands, right_units, window, auto_pool)
    src_taps = [tap for _, tap in source.unit_tap_ids()]
    tgt_taps = [tap for _, tap in target.unit_tap_ids()]
    if len(src_taps) != len(left_units) or len(tgt_taps) != len(right_units):
        raise StructureError("Each alignment row must describe exactly one layer unit per branch")

    head = tuple(LayerSpec.dense(u) for u in head_widths[:-1]) + (LayerSpec.softmax(head_widths[-1]),)
    return FannSpec(
        source_branch=source,
        target_branch=target,
        aligned_layer_ids=tuple(zip(src_taps, tgt_taps)),
        head=head,
    )


def _render_unit(spec: NetworkSpec, tap: str) -> str:
    index = spec.layer_ids.index(tap)
    layer = spec.layers[index]
    if layer.kind == MAXPOOL:
        conv = spec.layers[index - 1]
        return f"(conv{conv.kernel_size}-{conv.units} + maxpooling)"
    return _render_layer(layer)


def render_fann_config(fann: FannSpec) -> str:
    rows = [
        f"{_render_unit(fann.source_branch, s)} → DATL ← {_render_unit(fann.target_branch, t)}"
        for s, t in fann.aligned_layer_ids
    ]
    rows += [f"fc-{layer.units}" for layer in fann.head if layer.kind == DENSE]
    rows.append(f"fully connected-{fann.n_classes}")
    return "\n".join(rows)
