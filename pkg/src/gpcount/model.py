"""Fully convolutional encoder/decoder for density-map regression.

The encoder downsamples by 8x via three stride-2 3x3 conv+ReLU stages and a
1x1 linear projection to the latent channel count; flattening the projected
map row-major yields the latent vector used for kernel similarities.  The
decoder refines the latent map (3x3 conv+ReLU), projects to one channel
(1x1 conv), upsamples bilinearly back to the input resolution, and applies
a final ReLU so predicted densities are nonnegative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .errors import ConfigError, ParseError, ShapeError

# A LatentVector is a 1-D float64 ndarray of length latent_dim.
LatentVector = np.ndarray

DOWNSAMPLE = 8


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""
    input_hw: tuple[int, int] = (64, 64)
    hidden_channels: tuple[int, int, int] = (8, 16, 32)
    latent_channels: int = 16

    def __post_init__(self):
        h, w = self.input_hw
        if h % DOWNSAMPLE or w % DOWNSAMPLE or h < DOWNSAMPLE or w < DOWNSAMPLE:
            raise ConfigError(
                f"input extents must be positive multiples of {DOWNSAMPLE}, "
                f"got {self.input_hw}")
        if len(self.hidden_channels) != 3 or min(self.hidden_channels) < 1:
            raise ConfigError("hidden_channels must be three positive ints")
        if self.latent_channels < 1:
            raise ConfigError("latent_channels must be >= 1")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return (self.input_hw[0] // DOWNSAMPLE, self.input_hw[1] // DOWNSAMPLE)

    @property
    def latent_dim(self) -> int:
        lh, lw = self.latent_hw
        return self.latent_channels * lh * lw


@dataclass
class ModelParams:
    """Named convolution kernels and biases, in a stable order."""
    config: ModelConfig
    tensors: dict[str, Node] = field(default_factory=dict)

    def parameters(self) -> list[Node]:
        return list(self.tensors.values())

    def zero_grads(self):
        ad.zero_grads(self.tensors.values())


def _layer_shapes(config: ModelConfig):
    c1, c2, c3 = config.hidden_channels
    cl = config.latent_channels
    return [
        ("enc1.w", (c1, 1, 3, 3)), ("enc1.b", (c1,)),
        ("enc2.w", (c2, c1, 3, 3)), ("enc2.b", (c2,)),
        ("enc3.w", (c3, c2, 3, 3)), ("enc3.b", (c3,)),
        ("proj.w", (cl, c3, 1, 1)), ("proj.b", (cl,)),
        ("dec1.w", (cl, cl, 3, 3)), ("dec1.b", (cl,)),
        ("dec2.w", (1, cl, 1, 1)), ("dec2.b", (1,)),
    ]


# The output layer starts heavily damped with a slightly positive bias:
# densities integrate to tens of counts over thousands of pixels, so a
# full-scale initial output would be orders of magnitude too large, and
# driving it down through the nonnegativity ReLU kills the gradient for good.
# The damping is strong enough that the bias dominates every pre-activation,
# so every output position starts alive regardless of the weight draw.
OUTPUT_INIT_DAMPING = 0.0015
OUTPUT_INIT_BIAS = 0.01


def init_params(seed: int, config: ModelConfig | None = None) -> ModelParams:
    """Fan-in-scaled uniform initialization; biases start at zero except the
    output layer's, which starts slightly positive to keep the final ReLU
    alive."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Node] = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, shape)
            if name == "dec2.w":
                value = value * OUTPUT_INIT_DAMPING
        elif name == "dec2.b":
            value = np.full(shape, OUTPUT_INIT_BIAS)
        else:
            value = np.zeros(shape)
        tensors[name] = ad.parameter(value)
    return ModelParams(config, tensors)


def _as_batch(pixels) -> tuple[Array, bool]:
    x = ad.as_array(pixels)
    if x.ndim == 2:
        return x[None, None], True
    if x.ndim == 3:        # [N,H,W] grayscale batch
        return x[:, None], False
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [H,W], [N,H,W] or [N,1,H,W] pixels, got {x.shape}")


def _encoder_nodes(x: Node, params: ModelParams) -> Node:
    h, w = x.value.shape[-2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE or h < DOWNSAMPLE or w < DOWNSAMPLE:
        raise ShapeError(
            f"input extents must be positive multiples of {DOWNSAMPLE}, "
            f"got {(h, w)}")
    t = params.tensors
    h = ad.relu(ad.conv2d(x, t["enc1.w"], t["enc1.b"], stride=2, padding=1))
    h = ad.relu(ad.conv2d(h, t["enc2.w"], t["enc2.b"], stride=2, padding=1))
    h = ad.relu(ad.conv2d(h, t["enc3.w"], t["enc3.b"], stride=2, padding=1))
    return ad.conv2d(h, t["proj.w"], t["proj.b"], stride=1, padding=0)


def decode(latent_map: Node, params: ModelParams) -> Node:
    """Latent map [*,C,h,w] -> nonnegative density prediction [*,1,H,W]."""
    t = params.tensors
    h = ad.relu(ad.conv2d(latent_map, t["dec1.w"], t["dec1.b"],
                          stride=1, padding=1))
    h = ad.conv2d(h, t["dec2.w"], t["dec2.b"], stride=1, padding=0)
    lh, lw = latent_map.shape[-2], latent_map.shape[-1]
    h = ad.bilinear_upsample(h, (lh * DOWNSAMPLE, lw * DOWNSAMPLE))
    return ad.relu(h)


def encode(pixels, params: ModelParams) -> tuple[LatentVector, Node]:
    """Encode one image; returns (detached latent vector, latent map node).

    The detached vector is a row-major flattening of the node's value at the
    moment of the call.
    """
    x4, single = _as_batch(pixels)
    if not single and x4.shape[0] != 1:
        raise ShapeError("encode takes a single [H,W] image; use encode_batch")
    if x4.shape[-2:] != params.config.input_hw:
        raise ShapeError(
            f"input extent {x4.shape[-2:]} does not match the configured "
            f"{params.config.input_hw}")
    node = _encoder_nodes(ad.constant(x4), params)
    latent = node.value.reshape(-1).copy()
    return latent, node


def encode_batch(pixels_batch, params: ModelParams) -> tuple[Array, Node]:
    """Encode [N,H,W] images; returns (detached [N,M] latents, latent map node)."""
    x4, _ = _as_batch(pixels_batch)
    node = _encoder_nodes(ad.constant(x4), params)
    latents = node.value.reshape(node.value.shape[0], -1).copy()
    return latents, node


def forward_batch(pixels_batch, params: ModelParams):
    """Full differentiable pass: (detached latents [N,M], latent node, prediction node)."""
    latents, latent_node = encode_batch(pixels_batch, params)
    pred = decode(latent_node, params)
    return latents, latent_node, pred


# Value-only paths (no graph) reuse the same ops on constant leaves; the
# parameters' values are wrapped in fresh non-grad nodes so no gradient
# bookkeeping is attached anywhere.

def _detached_params(params: ModelParams) -> ModelParams:
    frozen = {name: ad.constant(node.value) for name, node in params.tensors.items()}
    return ModelParams(params.config, frozen)


def encode_values(pixels_batch, params: ModelParams) -> Array:
    """Latent vectors [N,M] with no graph construction."""
    latents, _ = encode_batch(pixels_batch, _detached_params(params))
    return latents


def predict_values(pixels_batch, params: ModelParams) -> Array:
    """Density predictions [N,1,H,W] with no graph construction."""
    frozen = _detached_params(params)
    _, latent_node = encode_batch(pixels_batch, frozen)
    return decode(latent_node, frozen).value


# ---------------------------------------------------------------------------
# checkpoints: versioned text header + shape table, then raw little-endian
# float64 tensor data in table order
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"gpcount-checkpoint v1"


def save_checkpoint(params: ModelParams, path: str):
    cfg = params.config
    header = {
        "input_hw": list(cfg.input_hw),
        "hidden_channels": list(cfg.hidden_channels),
        "latent_channels": cfg.latent_channels,
    }
    lines = [CHECKPOINT_MAGIC.decode(), json.dumps(header, sort_keys=True),
             str(len(params.tensors))]
    for name, node in params.tensors.items():
        dims = " ".join(str(d) for d in node.value.shape)
        lines.append(f"{name} {dims}")
    blob = b"".join(np.ascontiguousarray(node.value, dtype="<f8").tobytes()
                    for node in params.tensors.values())
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        f.write(blob)


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    try:
        magic, header_line, count_line, rest = data.split(b"\n", 3)
    except ValueError as exc:
        raise ParseError(f"{path}: truncated checkpoint header") from exc
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: unrecognized checkpoint magic {magic!r}")
    try:
        header = json.loads(header_line.decode())
        config = ModelConfig(tuple(header["input_hw"]),
                             tuple(header["hidden_channels"]),
                             int(header["latent_channels"]))
        n_tensors = int(count_line)
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: bad checkpoint header") from exc
    entries = []
    for _ in range(n_tensors):
        line, rest = rest.split(b"\n", 1)
        toks = line.decode().split()
        entries.append((toks[0], tuple(int(d) for d in toks[1:])))
    expected = _layer_shapes(config)
    if [(n, s) for n, s in entries] != expected:
        raise ParseError(f"{path}: shape table does not match architecture")
    tensors: dict[str, Node] = {}
    offset = 0
    for name, shape in entries:
        size = int(np.prod(shape)) * 8
        chunk = rest[offset:offset + size]
        if len(chunk) != size:
            raise ParseError(f"{path}: truncated tensor data for {name}")
        value = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        tensors[name] = ad.parameter(value)
        offset += size
    if offset != len(rest):
        raise ParseError(f"{path}: trailing bytes after tensor data")
    return ModelParams(config, tensors)
