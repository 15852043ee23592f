"""Residual embedding networks with a GAP + bias-free linear head.

The head contract (global average pooling followed by a linear map with no
additive term, nothing after it) is what lets cosine similarity between two
embeddings be decomposed over feature-map locations; ``audit_network``
enforces it structurally and the folding identity is covered by tests.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import jsonio
from .autodiff import (
    Tensor,
    batch_norm_train,
    channel_affine,
    conv2d,
    global_avg_pool,
    linear_no_bias,
    relu,
)

FORMAT_MAGIC = b"GSCM"
FORMAT_VERSION = 1

# stages of 2 residual blocks each; stem and every stage downsample by 2
DEPTH_PRESETS = {"tiny": 2, "small": 3, "medium": 4}


class ConfigurationError(ValueError):
    pass


class HeadContractError(ValueError):
    """Architecture descriptor deviates from GAP -> bias-free linear."""


@dataclass(frozen=True)
class ModelConfig:
    depth_preset: str = "tiny"
    base_channels: int = 8
    embedding_dim: int = 16
    input_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.depth_preset not in DEPTH_PRESETS:
            raise ConfigurationError(f"unknown depth preset {self.depth_preset!r}; valid: {sorted(DEPTH_PRESETS)}")
        if self.embedding_dim < 2:
            raise ConfigurationError("embedding_dim must be >= 2")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")
        ds = self.downsampling
        if self.input_size % ds != 0 or self.input_size < ds:
            valid = ", ".join(str(ds * k) for k in range(1, 6))
            raise ConfigurationError(
                f"input_size {self.input_size} not divisible by downsampling {ds}; valid sizes: {valid}, ..."
            )

    @property
    def stages(self):
        return DEPTH_PRESETS[self.depth_preset]

    @property
    def downsampling(self):
        return 2 ** (self.stages + 1)

    @property
    def feature_channels(self):
        return self.base_channels * 2 ** (self.stages - 1)

    def to_dict(self):
        return {
            "depth_preset": self.depth_preset,
            "base_channels": self.base_channels,
            "embedding_dim": self.embedding_dim,
            "input_size": self.input_size,
            "seed": self.seed,
        }


@dataclass
class FeatureField:
    """Pre-GAP activations (or head-folded activations) of one snippet."""

    values: np.ndarray  # [C, H', W']
    stride_to_input: int
    snippet_id: str = ""


@dataclass
class EmbeddingNetwork:
    config: ModelConfig
    params: dict  # name -> Tensor, in descriptor order
    descriptor: dict
    provenance: dict = field(default_factory=dict)

    def param_arrays(self):
        return {k: v.data for k, v in self.params.items()}


def _fan_in_uniform(rng, shape, fan_in):
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _block_layers(cin, cout, stride):
    layers = [
        {"op": "conv", "suffix": "conv1", "shape": [cout, cin, 3, 3], "stride": stride, "padding": 1},
        {"op": "affine", "suffix": "1", "channels": cout},
        {"op": "relu"},
        {"op": "conv", "suffix": "conv2", "shape": [cout, cout, 3, 3], "stride": 1, "padding": 1},
        {"op": "affine", "suffix": "2", "channels": cout},
    ]
    if cin != cout or stride != 1:
        layers.append({"op": "proj", "suffix": "proj", "shape": [cout, cin, 1, 1], "stride": stride})
    return layers


def build_descriptor(config: ModelConfig):
    stages = []
    cin = config.base_channels
    for s in range(config.stages):
        cout = config.base_channels * 2**s
        blocks = []
        for b in range(2):
            stride = 2 if b == 0 else 1
            blocks.append(_block_layers(cin, cout, stride))
            cin = cout
        stages.append(blocks)
    desc = {
        "format": FORMAT_VERSION,
        "config": config.to_dict(),
        "stem": {"shape": [config.base_channels, 1, 3, 3], "stride": 2, "padding": 1},
        "stages": stages,
        "head": {"kind": "gap_linear_no_bias", "bias": False, "in": cin, "out": config.embedding_dim},
    }
    desc["params"] = [{"name": n, "shape": list(s)} for n, s in _param_plan(desc)]
    return desc


def _param_plan(desc):
    cfg = desc["config"]
    plan = [
        ("stem.conv", tuple(desc["stem"]["shape"])),
        ("stem.scale", (cfg["base_channels"],)),
        ("stem.offset", (cfg["base_channels"],)),
    ]
    for si, blocks in enumerate(desc["stages"]):
        for bi, layers in enumerate(blocks):
            prefix = f"s{si}.b{bi}"
            for layer in layers:
                if layer["op"] == "conv" or layer["op"] == "proj":
                    plan.append((f"{prefix}.{layer['suffix']}", tuple(layer["shape"])))
                elif layer["op"] == "affine":
                    c = layer["channels"]
                    plan.append((f"{prefix}.scale{layer['suffix']}", (c,)))
                    plan.append((f"{prefix}.offset{layer['suffix']}", (c,)))
    plan.append(("head.w", (cfg["embedding_dim"], desc["head"]["in"])))
    return plan


def build_network(config: ModelConfig) -> EmbeddingNetwork:
    """Deterministically initialized residual embedding network."""
    desc = build_descriptor(config)
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _param_plan(desc):
        if ".scale" in name:
            params[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True, name=name)
        elif ".offset" in name:
            # small nonzero init keeps the all-white base image from embedding
            # to an exact zero vector (degenerate for cosine similarity)
            params[name] = Tensor(rng.uniform(-0.1, 0.1, size=shape).astype(np.float32), requires_grad=True, name=name)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = Tensor(_fan_in_uniform(rng, shape, fan_in), requires_grad=True, name=name)
    net = EmbeddingNetwork(config=config, params=params, descriptor=desc)
    audit_network(net)
    return net


def audit_network(net: EmbeddingNetwork):
    """Fail any network whose output stage is not GAP -> bias-free linear."""
    head = net.descriptor.get("head")
    if not head or head.get("kind") != "gap_linear_no_bias" or head.get("bias", True):
        raise HeadContractError(f"head contract violated: {head!r}")
    w = net.params.get("head.w")
    if w is None or w.data.shape != (head["out"], head["in"]):
        raise HeadContractError(f"head weights missing or mis-shaped: {None if w is None else w.data.shape}")
    extra = [k for k in net.descriptor if k not in {"format", "config", "stem", "stages", "head", "params"}]
    if extra:
        raise HeadContractError(f"unexpected architecture entries after head: {extra}")


# -- forward passes ---------------------------------------------------------


def _snippet_pixels(snippet):
    return snippet.pixels if hasattr(snippet, "pixels") else np.asarray(snippet, dtype=np.float32)


def forward_field(net: EmbeddingNetwork, x: Tensor) -> Tensor:
    """Last-conv feature maps for ``[1,S,S]`` or batched ``[N,1,S,S]`` input.

    Pixels arrive with 0 = ink, 1 = paper; the net sees ink as the positive
    signal (1 - x).
    """
    p = net.params
    h = 1.0 - x
    stem = net.descriptor["stem"]
    h = relu(channel_affine(conv2d(h, p["stem.conv"], stride=stem["stride"], padding=stem["padding"]),
                            p["stem.scale"], p["stem.offset"]))
    for si, blocks in enumerate(net.descriptor["stages"]):
        for bi, layers in enumerate(blocks):
            prefix = f"s{si}.b{bi}"
            conv1 = next(l for l in layers if l.get("suffix") == "conv1")
            conv2_ = next(l for l in layers if l.get("suffix") == "conv2")
            y = conv2d(h, p[f"{prefix}.conv1"], stride=conv1["stride"], padding=conv1["padding"])
            y = relu(channel_affine(y, p[f"{prefix}.scale1"], p[f"{prefix}.offset1"]))
            y = conv2d(y, p[f"{prefix}.conv2"], stride=1, padding=conv2_["padding"])
            y = channel_affine(y, p[f"{prefix}.scale2"], p[f"{prefix}.offset2"])
            if f"{prefix}.proj" in p:
                skip = conv2d(h, p[f"{prefix}.proj"], stride=conv1["stride"], padding=0)
            else:
                skip = h
            h = relu(y + skip)
    return h


def forward_embedding(net: EmbeddingNetwork, x: Tensor) -> Tensor:
    return linear_no_bias(global_avg_pool(forward_field(net, x)), net.params["head.w"])


# -- batch-normalized training forward --------------------------------------
#
# Training runs the norm sites with batch statistics (without that, every
# channel's pooled response shares one ink-mass component and triplet and
# contrastive training collapse to a constant function). The running stats
# are folded into the plain per-channel affine parameters afterwards, so
# trained/served networks are exactly the affine architecture above.

BN_EPS = 1e-5


class BnState:
    """Running mean/var per norm site, updated during training."""

    def __init__(self, momentum=0.1):
        self.momentum = momentum
        self.mean = {}
        self.var = {}

    def update(self, site, mu, var):
        if site not in self.mean:
            self.mean[site] = mu.copy()
            self.var[site] = var.copy()
        else:
            m = self.momentum
            self.mean[site] = (1 - m) * self.mean[site] + m * mu
            self.var[site] = (1 - m) * self.var[site] + m * var


def _bn_site(net, bn, x, site, scale_name, offset_name):
    out, mu, var = batch_norm_train(x, net.params[scale_name], net.params[offset_name], eps=BN_EPS)
    bn.update(site, mu, var)
    return out


def forward_field_train(net: EmbeddingNetwork, x: Tensor, bn: BnState) -> Tensor:
    p = net.params
    h = 1.0 - x
    stem = net.descriptor["stem"]
    h = conv2d(h, p["stem.conv"], stride=stem["stride"], padding=stem["padding"])
    h = relu(_bn_site(net, bn, h, "stem", "stem.scale", "stem.offset"))
    for si, blocks in enumerate(net.descriptor["stages"]):
        for bi, layers in enumerate(blocks):
            prefix = f"s{si}.b{bi}"
            stride = next(l for l in layers if l.get("suffix") == "conv1")["stride"]
            y = conv2d(h, p[f"{prefix}.conv1"], stride=stride, padding=1)
            y = relu(_bn_site(net, bn, y, f"{prefix}.1", f"{prefix}.scale1", f"{prefix}.offset1"))
            y = conv2d(y, p[f"{prefix}.conv2"], stride=1, padding=1)
            y = _bn_site(net, bn, y, f"{prefix}.2", f"{prefix}.scale2", f"{prefix}.offset2")
            if f"{prefix}.proj" in p:
                skip = conv2d(h, p[f"{prefix}.proj"], stride=stride, padding=0)
            else:
                skip = h
            h = relu(y + skip)
    return h


def forward_embedding_train(net: EmbeddingNetwork, x: Tensor, bn: BnState) -> Tensor:
    return linear_no_bias(global_avg_pool(forward_field_train(net, x, bn)), net.params["head.w"])


def bn_sites(net):
    sites = [("stem", "stem.scale", "stem.offset")]
    for si, blocks in enumerate(net.descriptor["stages"]):
        for bi in range(len(blocks)):
            prefix = f"s{si}.b{bi}"
            sites.append((f"{prefix}.1", f"{prefix}.scale1", f"{prefix}.offset1"))
            sites.append((f"{prefix}.2", f"{prefix}.scale2", f"{prefix}.offset2"))
    return sites


def fold_bn_params(net: EmbeddingNetwork, bn: BnState) -> dict:
    """Fold running statistics into the affine parameters.

    Returns a name -> array dict where each norm site's scale/offset are the
    inference-equivalent affine values; all other parameters are copied.
    """
    folded = {k: t.data.copy() for k, t in net.params.items()}
    for site, sname, oname in bn_sites(net):
        if site not in bn.mean:
            continue
        inv = 1.0 / np.sqrt(bn.var[site] + BN_EPS)
        gamma = net.params[sname].data
        beta = net.params[oname].data
        folded[sname] = (gamma * inv).astype(np.float32)
        folded[oname] = (beta - bn.mean[site] * gamma * inv).astype(np.float32)
    return folded


def with_params(net: EmbeddingNetwork, arrays: dict) -> EmbeddingNetwork:
    params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}
    return EmbeddingNetwork(config=net.config, params=params, descriptor=net.descriptor,
                            provenance=dict(net.provenance))


def embed(net: EmbeddingNetwork, snippet) -> np.ndarray:
    """Embedding vector of one snippet; not pre-normalized."""
    px = _snippet_pixels(snippet)
    _check_input_size(net, px)
    return forward_embedding(net, Tensor(px)).data.copy()


def embed_batch(net: EmbeddingNetwork, pixels: np.ndarray) -> np.ndarray:
    """Embeddings for a batch ``[N,1,S,S]`` of snippets."""
    if pixels.ndim != 4:
        raise ValueError(f"embed_batch: expected [N,1,S,S], got {pixels.shape}")
    _check_input_size(net, pixels[0])
    return forward_embedding(net, Tensor(pixels)).data.copy()


def feature_maps(net: EmbeddingNetwork, snippet) -> FeatureField:
    """Pre-GAP activations of the last conv layer, with stride metadata."""
    px = _snippet_pixels(snippet)
    _check_input_size(net, px)
    values = forward_field(net, Tensor(px)).data.copy()
    return FeatureField(values=values, stride_to_input=net.config.downsampling,
                        snippet_id=getattr(snippet, "snippet_id", ""))


def fold_head(net: EmbeddingNetwork, fld: FeatureField) -> FeatureField:
    """Apply the head weights at every spatial location of the field."""
    w = net.params["head.w"].data
    if fld.values.shape[0] != w.shape[1]:
        raise ValueError(f"fold_head: field has {fld.values.shape[0]} channels, head expects {w.shape[1]}")
    folded = np.tensordot(w, fld.values, axes=([1], [0]))
    return FeatureField(values=folded, stride_to_input=fld.stride_to_input, snippet_id=fld.snippet_id)


def _check_input_size(net, px):
    s = net.config.input_size
    if px.shape[-2:] != (s, s):
        raise ValueError(f"snippet size {px.shape[-2:]} != network input size {s}x{s}")


# -- serialization ----------------------------------------------------------


def save_network(net: EmbeddingNetwork, path):
    desc = dict(net.descriptor)
    desc["provenance"] = dict(net.provenance)
    desc_bytes = jsonio.dumps(desc).encode("utf-8")
    blob = bytearray()
    blob += FORMAT_MAGIC
    blob += struct.pack("<II", FORMAT_VERSION, len(desc_bytes))
    blob += desc_bytes
    for entry in net.descriptor["params"]:
        arr = net.params[entry["name"]].data
        blob += arr.astype("<f4", copy=False).tobytes(order="C")
    digest = hashlib.sha256(bytes(blob)).digest()[:8]
    blob += digest
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_network(path) -> EmbeddingNetwork:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FORMAT_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    version, desc_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    if hashlib.sha256(blob[:-8]).digest()[:8] != blob[-8:]:
        raise ValueError(f"{path}: checksum mismatch")
    desc = json.loads(blob[12 : 12 + desc_len].decode("utf-8"))
    provenance = desc.pop("provenance", {})
    config = ModelConfig(**desc["config"])
    offset = 12 + desc_len
    params = {}
    for entry in desc["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        offset += count * 4
    net = EmbeddingNetwork(config=config, params=params, descriptor=desc, provenance=provenance)
    audit_network(net)
    return net
