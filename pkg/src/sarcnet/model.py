"""Fusion regression network: residual image branch + feature branch + head.

The image branch is a compact residual CNN: a 7x7/stride-2 stem with max
pooling, four stages of 3x3 basic blocks (block counts 1,2,2,2) whose
downsampling transitions use 1x1 stride-2 projection shortcuts, a global
average pool, and a 3-layer linear stack down to the embedding width E.
Counting projections, the branch contains exactly 18 convolution layers.
The feature branch lifts the tabular vector through 3 linear layers to
the same width E; the two embeddings are concatenated and reduced to a
single unbounded score by a 4-layer head.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"SARC"
STAGE_BLOCKS = (1, 2, 2, 2)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

PROTOCOL_DIMS = {"p1": 5, "p2": 11}


@dataclass(frozen=True)
class SarcNetConfig:
    """Dimension plan of the network; every parameter name derives from it."""

    input_size: int = 224
    stage_widths: tuple = (64, 128, 256, 512)
    embed_dim: int = 32
    feature_dim: int = 11
    head_widths: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if len(self.stage_widths) != 4 or any(w <= 0 for w in self.stage_widths):
            raise ConfigError(f"stage_widths must be 4 positive ints, "
                              f"got {self.stage_widths}")
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.feature_dim not in (5, 11):
            raise ConfigError(f"feature_dim must be 5 or 11, got {self.feature_dim}")
        if self.input_size < 32:
            raise ConfigError(f"input_size must be >= 32, got {self.input_size}")
        if not self.head_widths:
            object.__setattr__(self, "head_widths",
                               (self.embed_dim, self.embed_dim // 2, 8, 1))
        head = tuple(self.head_widths)
        object.__setattr__(self, "head_widths", head)
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        if len(head) != 4 or head[-1] != 1 or any(w <= 0 for w in head):
            raise ConfigError(f"head_widths must be 4 positive ints ending "
                              f"in 1, got {head}")

    @property
    def protocol(self) -> str:
        return "p1" if self.feature_dim == 5 else "p2"


def scaled_config(feature_dim: int = 11, seed: int = 0,
                  embed_dim: int = 32) -> SarcNetConfig:
    """Small configuration for CPU-scale runs: 64px input, widths /8."""
    return SarcNetConfig(input_size=64, stage_widths=(8, 16, 32, 64),
                         embed_dim=embed_dim, feature_dim=feature_dim, seed=seed)


def config_for_protocol(protocol: str, **kwargs) -> SarcNetConfig:
    if protocol not in PROTOCOL_DIMS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    return SarcNetConfig(feature_dim=PROTOCOL_DIMS[protocol], **kwargs)


def _backbone_fc_dims(config: SarcNetConfig) -> list[int]:
    w3 = config.stage_widths[3]
    return [w3, max(w3 // 2, 1), 2 * config.embed_dim, config.embed_dim]


FEATURE_HIDDEN = 64


def parameter_specs(config: SarcNetConfig) -> list[tuple[str, tuple, str]]:
    """Fixed, ordered (name, shape, init-kind) list for the trainable set.

    Kinds: ``conv``/``linear`` (Kaiming-uniform fan-in), ``zero`` (biases
    and batchnorm beta), ``one`` (batchnorm gamma).
    """
    w = config.stage_widths
    specs = [("stem.conv.weight", (w[0], 3, 7, 7), "conv"),
             ("stem.conv.bias", (w[0],), "zero"),
             ("stem.bn.gamma", (w[0],), "one"),
             ("stem.bn.beta", (w[0],), "zero")]
    in_ch = w[0]
    for si, (width, blocks) in enumerate(zip(w, STAGE_BLOCKS), start=1):
        for bi in range(blocks):
            p = f"s{si}.b{bi}"
            cin = in_ch if bi == 0 else width
            specs += [(f"{p}.conv1.weight", (width, cin, 3, 3), "conv"),
                      (f"{p}.conv1.bias", (width,), "zero"),
                      (f"{p}.bn1.gamma", (width,), "one"),
                      (f"{p}.bn1.beta", (width,), "zero"),
                      (f"{p}.conv2.weight", (width, width, 3, 3), "conv"),
                      (f"{p}.conv2.bias", (width,), "zero"),
                      (f"{p}.bn2.gamma", (width,), "one"),
                      (f"{p}.bn2.beta", (width,), "zero")]
            if bi == 0 and si > 1:
                specs += [(f"{p}.proj.weight", (width, cin, 1, 1), "conv"),
                          (f"{p}.proj.bias", (width,), "zero"),
                          (f"{p}.projbn.gamma", (width,), "one"),
                          (f"{p}.projbn.beta", (width,), "zero")]
        in_ch = width
    fc_dims = _backbone_fc_dims(config)
    for i in range(3):
        specs += [(f"bfc.{i}.weight", (fc_dims[i + 1], fc_dims[i]), "linear"),
                  (f"bfc.{i}.bias", (fc_dims[i + 1],), "zero")]
    feat_dims = [config.feature_dim, FEATURE_HIDDEN, FEATURE_HIDDEN,
                 config.embed_dim]
    for i in range(3):
        specs += [(f"feat.{i}.weight", (feat_dims[i + 1], feat_dims[i]), "linear"),
                  (f"feat.{i}.bias", (feat_dims[i + 1],), "zero")]
    head_dims = [2 * config.embed_dim, *config.head_widths]
    for i in range(4):
        specs += [(f"head.{i}.weight", (head_dims[i + 1], head_dims[i]), "linear"),
                  (f"head.{i}.bias", (head_dims[i + 1],), "zero")]
    return specs


def buffer_specs(config: SarcNetConfig) -> list[tuple[str, tuple]]:
    """Batchnorm running-statistic buffers, in a fixed order."""
    out = []
    for name, shape, kind in parameter_specs(config):
        if kind == "one":  # one gamma per batchnorm
            prefix = name.rsplit(".", 1)[0]
            out.append((f"{prefix}.running_mean", shape))
            out.append((f"{prefix}.running_var", shape))
    return out


def conv_layer_count(config: SarcNetConfig) -> int:
    return sum(1 for name, _, kind in parameter_specs(config)
               if kind == "conv" and name.endswith(".weight"))


def linear_layer_count(config: SarcNetConfig) -> int:
    return sum(1 for name, _, kind in parameter_specs(config)
               if kind == "linear" and name.endswith(".weight"))


def parameter_count(config: SarcNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_specs(config))


@dataclass
class SarcNetParams:
    """All trainable tensors plus batchnorm buffers for one config."""

    config: SarcNetConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def grads(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self.tensors.items()}


def init_params(config: SarcNetConfig) -> SarcNetParams:
    """Seeded init: Kaiming-uniform fan-in weights, zero biases, unit gammas."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape, kind in parameter_specs(config):
        if kind in ("conv", "linear"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif kind == "one":
            data = np.ones(shape, dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    buffers = {}
    for name, shape in buffer_specs(config):
        init = np.ones if name.endswith("running_var") else np.zeros
        buffers[name] = init(shape, dtype=np.float32)
    return SarcNetParams(config, tensors, buffers)


# ---------------------------------------------------------------------------
# forward passes


def _bn(x: Tensor, params: SarcNetParams, prefix: str, mode: str) -> Tensor:
    return ad.batchnorm2d(x, params.tensors[f"{prefix}.gamma"],
                          params.tensors[f"{prefix}.beta"],
                          params.buffers[f"{prefix}.running_mean"],
                          params.buffers[f"{prefix}.running_var"],
                          mode=mode, momentum=BN_MOMENTUM, eps=BN_EPS)


def _basic_block(x: Tensor, params: SarcNetParams, prefix: str, stride: int,
                 project: bool, mode: str) -> Tensor:
    t = params.tensors
    y = ad.conv2d(x, t[f"{prefix}.conv1.weight"], t[f"{prefix}.conv1.bias"],
                  stride=stride, padding=1)
    y = ad.relu(_bn(y, params, f"{prefix}.bn1", mode))
    y = ad.conv2d(y, t[f"{prefix}.conv2.weight"], t[f"{prefix}.conv2.bias"],
                  stride=1, padding=1)
    y = _bn(y, params, f"{prefix}.bn2", mode)
    shortcut = x
    if project:
        shortcut = ad.conv2d(x, t[f"{prefix}.proj.weight"],
                             t[f"{prefix}.proj.bias"], stride=stride, padding=0)
        shortcut = _bn(shortcut, params, f"{prefix}.projbn", mode)
    return ad.relu(ad.add(y, shortcut))


def backbone_forward(images: Tensor, params: SarcNetParams, mode: str = "eval",
                     capture: dict | None = None) -> Tensor:
    """Image branch: residual CNN -> global average pool -> 3 linear layers.

    ``capture``, when given, receives the final convolution stage's
    activations under the key ``"final_stage"`` (used by the saliency map).
    """
    cfg = params.config
    if images.ndim != 4 or images.shape[1] != 3 \
            or images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
        raise DimensionError(
            f"backbone expects [B,3,{cfg.input_size},{cfg.input_size}] images, "
            f"got {images.shape}"
        )
    t = params.tensors
    x = ad.conv2d(images, t["stem.conv.weight"], t["stem.conv.bias"],
                  stride=2, padding=3)
    x = ad.relu(_bn(x, params, "stem.bn", mode))
    x = ad.max_pool2d(x, window=3, stride=2, padding=1)
    for si, blocks in enumerate(STAGE_BLOCKS, start=1):
        for bi in range(blocks):
            stride = 2 if (bi == 0 and si > 1) else 1
            project = bi == 0 and si > 1
            x = _basic_block(x, params, f"s{si}.b{bi}", stride, project, mode)
    if capture is not None:
        capture["final_stage"] = x
    x = ad.global_avg_pool2d(x)
    x = ad.reshape(x, (x.shape[0], x.shape[1]))
    for i in range(3):
        x = ad.linear(x, t[f"bfc.{i}.weight"], t[f"bfc.{i}.bias"])
        if i < 2:
            x = ad.relu(x)
    return x


def feature_branch_forward(features: Tensor, params: SarcNetParams) -> Tensor:
    """Tabular branch: 3 linear layers with ReLU after the first two."""
    cfg = params.config
    if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
        raise DimensionError(
            f"feature branch expects [B,{cfg.feature_dim}], got {features.shape}"
        )
    t = params.tensors
    x = features
    for i in range(3):
        x = ad.linear(x, t[f"feat.{i}.weight"], t[f"feat.{i}.bias"])
        if i < 2:
            x = ad.relu(x)
    return x


def fuse_and_head(img_emb: Tensor, feat_emb: Tensor,
                  params: SarcNetParams) -> Tensor:
    """Ordered concatenation then 4 linear layers to the scalar score."""
    e = params.config.embed_dim
    if img_emb.ndim != 2 or img_emb.shape[1] != e:
        raise DimensionError(f"image embedding must be [B,{e}], got {img_emb.shape}")
    if feat_emb.shape != img_emb.shape:
        raise DimensionError(
            f"embedding shapes differ: {img_emb.shape} vs {feat_emb.shape}"
        )
    t = params.tensors
    x = ad.concat([img_emb, feat_emb], axis=1)
    for i in range(4):
        x = ad.linear(x, t[f"head.{i}.weight"], t[f"head.{i}.bias"])
        if i < 3:
            x = ad.relu(x)
    return x


def sarcnet_forward(images: Tensor, features: Tensor, params: SarcNetParams,
                    mode: str = "eval", capture: dict | None = None) -> Tensor:
    if images.shape[0] != features.shape[0]:
        raise DimensionError(
            f"batch mismatch: {images.shape[0]} images vs "
            f"{features.shape[0]} feature rows"
        )
    img_emb = backbone_forward(images, params, mode, capture)
    feat_emb = feature_branch_forward(features, params)
    return fuse_and_head(img_emb, feat_emb, params)


# ---------------------------------------------------------------------------
# checkpoints


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(params: SarcNetParams, path, meta: dict | None = None) -> None:
    """Serialize config + all tensors (params then buffers) to ``path``.

    Layout: magic ``SARC``, u32 format version, length-prefixed UTF-8
    JSON block ({"config": ..., "meta": ...}), u32 tensor count, then per
    tensor a length-prefixed name, u32 rank, u32 extents, and row-major
    little-endian float32 values.
    """
    merged_meta = dict(params.meta)
    if meta:
        merged_meta.update(meta)
    header = json.dumps({"config": asdict(params.config), "meta": merged_meta},
                        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = [name for name, _, _ in parameter_specs(params.config)]
    buffer_names = [name for name, _ in buffer_specs(params.config)]
    buf.write(struct.pack("<I", len(names) + len(buffer_names)))
    for name in names:
        _write_tensor(buf, name, params.tensors[name].data)
    for name in buffer_names:
        _write_tensor(buf, name, params.buffers[name])
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def load_checkpoint(path) -> SarcNetParams:
    """Read a checkpoint; any corruption raises before state is built."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, "
                f"expected {FORMAT_VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            blob = json.loads(_read_exact(fh, hlen).decode("utf-8"))
            config = SarcNetConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in blob["config"].items()})
            meta = blob.get("meta", {})
        except (ValueError, KeyError, TypeError, ConfigError) as exc:
            raise CheckpointError(f"bad checkpoint header in {path}: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            nbytes = 4 * int(np.prod(shape)) if rank else 4
            raw = _read_exact(fh, nbytes)
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path} has trailing bytes after tensor data")

    tensors, buffers = {}, {}
    for name, shape, _ in parameter_specs(config):
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arrays[name].shape}, "
                f"config implies {shape}"
            )
        tensors[name] = Tensor(arrays[name], requires_grad=True)
    for name, shape in buffer_specs(config):
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing buffer {name!r}")
        buffers[name] = arrays[name]
    return SarcNetParams(config, tensors, buffers, version=FORMAT_VERSION,
                         meta=meta)
