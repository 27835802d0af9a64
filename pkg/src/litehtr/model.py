"""Encoder-decoder network for page-level text recognition.

Encoder: CNN backbone (overall stride 32) -> 1x1 projection to the hidden
size -> additive 2D sinusoidal positional encoding -> row-major flatten ->
pre-norm transformer layers. Decoder: scaled character embedding + 1D
sinusoidal positional encoding -> pre-norm transformer layers with causal
self-attention and cross-attention over the encoder memory -> linear head
with exactly ``nb_class`` logits (padding is outside the class range and can
never be predicted).

Every parameter belongs to exactly one named group (backbone,
projection_1x1, encoder_layer[i], decoder_layer[i], embedding, output_head)
so training can freeze or re-initialize groups independently. The final
norm of each pre-norm stack is accounted to that stack's last layer group.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet50

from .imaging import Batch
from .vocab import TokenSequence, Vocabulary

BACKBONE_STRIDE = 32


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2  # per stack (encoder and decoder each)
    num_heads: int = 1
    hidden_size: int = 256
    feedforward_size: int = 1024
    dropout: float = 0.1
    backbone_kind: str = "resnet50"  # "resnet50" | "tiny-residual"
    backbone_out_channels: int = 2048
    input_channels: int = 3
    max_decode_len: int = 1024

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ModelError("hidden_size must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.backbone_kind not in ("resnet50", "tiny-residual"):
            raise ModelError(f"unknown backbone kind: {self.backbone_kind}")


# Lite/large follow the published architecture table; tiny and small exist
# so gradient checks and CPU-scale experiments run in seconds.
PRESETS: dict[str, ModelConfig] = {
    "lite": ModelConfig(),
    "large": ModelConfig(num_layers=4, num_heads=8, hidden_size=512, feedforward_size=2048),
    "small": ModelConfig(
        num_layers=2, num_heads=1, hidden_size=64, feedforward_size=256,
        backbone_kind="tiny-residual", backbone_out_channels=64,
        input_channels=1, max_decode_len=256,
    ),
    "tiny": ModelConfig(
        num_layers=1, num_heads=1, hidden_size=16, feedforward_size=64,
        dropout=0.0, backbone_kind="tiny-residual", backbone_out_channels=32,
        input_channels=1, max_decode_len=64,
    ),
}


def positional_encoding_1d(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sinusoidal encoding, shape (length, dim), values in [-1, 1]."""
    if dim % 2 != 0:
        raise ModelError("1D positional encoding needs an even dimension")
    pos = torch.arange(length, dtype=dtype)[:, None]
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim)
    )
    pe = torch.zeros(length, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


def positional_encoding_2d(rows: int, cols: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal grid encoding, shape (rows, cols, dim).

    The first half of the channels encodes the row index and the second half
    the column index, each half with the standard alternating sin/cos
    frequency ladder; hence ``dim`` must be divisible by 4.
    """
    if dim % 4 != 0:
        raise ModelError("2D positional encoding needs dim divisible by 4")
    half = dim // 2
    row_pe = positional_encoding_1d(rows, half, dtype)  # (rows, half)
    col_pe = positional_encoding_1d(cols, half, dtype)  # (cols, half)
    pe = torch.zeros(rows, cols, dim, dtype=dtype)
    pe[:, :, :half] = row_pe[:, None, :]
    pe[:, :, half:] = col_pe[None, :, :]
    return pe


def flatten_grid(grid: torch.Tensor) -> torch.Tensor:
    """(..., H', W', h) feature grid -> (..., H'*W', h) sequence in
    row-major raster order: index k = r * W' + c."""
    return grid.reshape(*grid.shape[:-3], grid.shape[-3] * grid.shape[-2], grid.shape[-1])


class TinyResidualBackbone(nn.Module):
    """Three residual stages, overall stride 32, GroupNorm (no buffers).

    Exists so gradient checks and CPU experiments run quickly; the
    production backbone is the truncated ResNet-50.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        c1 = max(8, out_channels // 4)
        c2 = max(8, out_channels // 2)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, stride=2, padding=1),
            nn.GroupNorm(1, c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.GroupNorm(1, c2),
            nn.ReLU(inplace=True),
        )
        chans = [c2, out_channels, out_channels, out_channels]
        self.stages = nn.ModuleList(
            _ResidualBlock(chans[i], chans[i + 1]) for i in range(3)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


class _ResidualBlock(nn.Module):
    """conv3x3 stride 2 + conv3x3, with a strided 1x1 skip."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(1, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1)
        self.norm2 = nn.GroupNorm(1, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.skip(x))


class ResNet50Backbone(nn.Module):
    """ResNet-50 without its last two layers (average pool and linear
    projection), randomly initialized; output has 2048 channels at 1/32 of
    the input resolution."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        net = resnet50(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_size
        self.norm1 = nn.LayerNorm(h)
        self.attn = nn.MultiheadAttention(h, cfg.num_heads, dropout=cfg.dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(h)
        self.ff = nn.Sequential(
            nn.Linear(h, cfg.feedforward_size),
            nn.ReLU(inplace=True),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.feedforward_size, h),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None) -> torch.Tensor:
        y = self.norm1(x)
        y, _ = self.attn(y, y, y, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + self.drop(y)
        x = x + self.drop(self.ff(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_size
        self.norm1 = nn.LayerNorm(h)
        self.self_attn = nn.MultiheadAttention(h, cfg.num_heads, dropout=cfg.dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(h)
        self.cross_attn = nn.MultiheadAttention(h, cfg.num_heads, dropout=cfg.dropout, batch_first=True)
        self.norm3 = nn.LayerNorm(h)
        self.ff = nn.Sequential(
            nn.Linear(h, cfg.feedforward_size),
            nn.ReLU(inplace=True),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.feedforward_size, h),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        causal_mask: torch.Tensor,
        memory_key_padding_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        y = self.norm1(x)
        y, _ = self.self_attn(y, y, y, attn_mask=causal_mask, need_weights=False)
        x = x + self.drop(y)
        y = self.norm2(x)
        y, _ = self.cross_attn(
            y, memory, memory, key_padding_mask=memory_key_padding_mask, need_weights=False
        )
        x = x + self.drop(y)
        x = x + self.drop(self.ff(self.norm3(x)))
        return x


class Model(nn.Module):
    """The full recognizer; construct via :func:`build_model` for seeded,
    reproducible initialization."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.vocab = vocab
        h = config.hidden_size
        if config.backbone_kind == "resnet50":
            self.backbone = ResNet50Backbone(config.input_channels)
            backbone_out = 2048
        else:
            self.backbone = TinyResidualBackbone(config.input_channels, config.backbone_out_channels)
            backbone_out = config.backbone_out_channels
        self.backbone_out = backbone_out
        self.projection = nn.Conv2d(backbone_out, h, kernel_size=1)
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.encoder_norm = nn.LayerNorm(h)
        # pad row embeds to zero and stays zero
        self.embedding = nn.Embedding(vocab.nb_class + 1, h, padding_idx=vocab.pad_id)
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.num_layers))
        self.decoder_norm = nn.LayerNorm(h)
        self.output_head = nn.Linear(h, vocab.nb_class)

    # ---- parameter bookkeeping -------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "backbone": list(self.backbone.named_parameters(prefix="backbone")),
            "projection_1x1": list(self.projection.named_parameters(prefix="projection")),
            "embedding": list(self.embedding.named_parameters(prefix="embedding")),
            "output_head": list(self.output_head.named_parameters(prefix="output_head")),
        }
        n = self.config.num_layers
        for i, layer in enumerate(self.encoder_layers):
            params = list(layer.named_parameters(prefix=f"encoder_layers.{i}"))
            if i == n - 1:
                params += list(self.encoder_norm.named_parameters(prefix="encoder_norm"))
            groups[f"encoder_layer[{i}]"] = params
        for i, layer in enumerate(self.decoder_layers):
            params = list(layer.named_parameters(prefix=f"decoder_layers.{i}"))
            if i == n - 1:
                params += list(self.decoder_norm.named_parameters(prefix="decoder_norm"))
            groups[f"decoder_layer[{i}]"] = params
        return groups

    # ---- encoder ----------------------------------------------------------

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> raw feature grid (B, C_out, ceil(H/32), ceil(W/32))."""
        h, w = images.shape[-2:]
        if self.config.backbone_kind == "resnet50" and (h < 32 or w < 32):
            raise ModelError(f"image {h}x{w} too small for the resnet50 backbone")
        return self.backbone(images)

    def encode(
        self, images: torch.Tensor, pixel_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Images (B, C, H, W) -> (memory (B, S, h), memory_pad (B, S) or None).

        ``pixel_mask`` is True on content pixels; a feature cell counts as
        content if any pixel of its stride-32 cell is content.
        ``memory_pad`` is True on padded cells (key-padding convention).
        """
        raw = self.backbone_forward(images)
        grid = self.projection(raw)  # (B, h, H', W')
        b, hid, hp, wp = grid.shape
        pe = positional_encoding_2d(hp, wp, hid, dtype=grid.dtype).to(grid.device)
        grid = grid.permute(0, 2, 3, 1) + pe[None]  # (B, H', W', h)
        seq = grid.reshape(b, hp * wp, hid)  # row-major flatten
        memory_pad = None
        if pixel_mask is not None:
            expected = (images.shape[0], images.shape[2], images.shape[3])
            if tuple(pixel_mask.shape) != expected:
                raise ModelError(
                    f"pixel_mask shape {tuple(pixel_mask.shape)} does not match "
                    f"images (expected {expected})"
                )
            content = F.max_pool2d(
                pixel_mask.to(grid.dtype)[:, None],
                BACKBONE_STRIDE, BACKBONE_STRIDE, ceil_mode=True,
            )[:, 0]
            memory_pad = content.reshape(b, hp * wp) < 0.5
        return self.encoder_forward(seq, memory_pad), memory_pad

    def encoder_forward(
        self, seq: torch.Tensor, key_padding_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Transformer stack over a flattened feature sequence (B, S, h).
        Positions flagged True in ``key_padding_mask`` receive no attention
        weight from content positions."""
        if seq.shape[1] < 1:
            raise ModelError("empty encoder sequence")
        x = seq
        for layer in self.encoder_layers:
            x = layer(x, key_padding_mask)
        return self.encoder_norm(x)

    # ---- decoder ----------------------------------------------------------

    def embed_labels(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token ids (B, N) -> decoder input (B, N, h): scaled embedding plus
        1D positional encoding. The pad row embeds to zero, so a pad
        position carries the positional encoding only."""
        if tokens.numel() == 0:
            raise ModelError("empty token sequence")
        if int(tokens.max()) > self.vocab.pad_id:
            raise ModelError(f"token id {int(tokens.max())} out of range")
        h = self.config.hidden_size
        emb = self.embedding(tokens) * math.sqrt(h)
        pe = positional_encoding_1d(tokens.shape[1], h, dtype=emb.dtype).to(emb.device)
        return emb + pe[None]

    def decode(
        self,
        tokens: torch.Tensor,
        memory: torch.Tensor,
        memory_pad: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Teacher-forcing forward: (B, N) tokens -> (B, N, nb_class) logits.
        Causal: logits at position i depend only on tokens[0..i]."""
        x = self.embed_labels(tokens)
        n = tokens.shape[1]
        causal = torch.triu(
            torch.full((n, n), float("-inf"), dtype=x.dtype, device=x.device), diagonal=1
        )
        for layer in self.decoder_layers:
            x = layer(x, memory, causal, memory_pad)
        return self.output_head(self.decoder_norm(x))

    def forward(
        self,
        images: torch.Tensor,
        tokens: torch.Tensor,
        pixel_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        memory, memory_pad = self.encode(images, pixel_mask)
        return self.decode(tokens, memory, memory_pad)


def build_model(config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> Model:
    """Construct a model with reproducible random initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Model(config, vocab)


def batch_to_tensors(batch: Batch, device=None, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Imaging batch -> ((B, C, H, W) images, (B, H, W) content mask)."""
    images = torch.from_numpy(batch.images).permute(0, 3, 1, 2).to(dtype=dtype, device=device)
    mask = torch.from_numpy(batch.mask).to(device=device)
    return images, mask


@torch.no_grad()
def greedy_decode(
    model: Model,
    memory: torch.Tensor,
    memory_pad: torch.Tensor | None = None,
) -> list[TokenSequence]:
    """Argmax decoding from SOP until EOP or ``max_decode_len`` tokens.

    Operates on a batch of memories; each result starts with SOP and is
    flagged truncated if EOP was never produced.
    """
    model.eval()
    v = model.vocab
    b = memory.shape[0]
    max_len = model.config.max_decode_len
    seqs = torch.full((b, 1), v.sop_id, dtype=torch.long, device=memory.device)
    finished = torch.zeros(b, dtype=torch.bool, device=memory.device)
    while seqs.shape[1] < max_len and not bool(finished.all()):
        logits = model.decode(seqs, memory, memory_pad)
        nxt = logits[:, -1].argmax(dim=-1)
        nxt = torch.where(finished, torch.full_like(nxt, v.pad_id), nxt)
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        finished |= nxt == v.eop_id
    out = []
    for i in range(b):
        ids = []
        truncated = True
        for t in seqs[i].tolist():
            if t == v.pad_id:
                break
            ids.append(t)
            if t == v.eop_id and len(ids) > 1:
                truncated = False
                break
        out.append(TokenSequence(tuple(ids), truncated=truncated))
    return out


def replace_head(model: Model, target_vocab: Vocabulary, seed: int = 0) -> Model:
    """New model for ``target_vocab``: embedding and output head freshly
    initialized, every other parameter copied bit-exactly."""
    new = build_model(model.config, target_vocab, seed=seed)
    src = dict(model.named_parameters())
    with torch.no_grad():
        for name, param in new.named_parameters():
            if name.startswith(("embedding", "output_head")):
                continue
            param.copy_(src[name])
        for name, buf in new.named_buffers():
            buf.copy_(dict(model.named_buffers())[name])
    return new


def count_params(model: Model, scope: list[str] | None = None) -> int:
    """Exact parameter count over the selected groups (all by default)."""
    groups = model.parameter_groups()
    if scope is None:
        scope = list(groups)
    total = 0
    for g in scope:
        if g not in groups:
            raise ModelError(f"unknown parameter group: {g}")
        total += sum(p.numel() for _, p in groups[g])
    return total


def encoder_layer_param_count(cfg: ModelConfig) -> int:
    """Closed-form count for one pre-norm encoder layer: attention
    (4h^2 + 4h), feedforward (h*f + f + f*h + h), two LayerNorms (2h each)."""
    h, f = cfg.hidden_size, cfg.feedforward_size
    return (4 * h * h + 4 * h) + (h * f + f + f * h + h) + 2 * 2 * h


def decoder_layer_param_count(cfg: ModelConfig) -> int:
    """As the encoder layer plus one more attention block and LayerNorm."""
    h = cfg.hidden_size
    return encoder_layer_param_count(cfg) + (4 * h * h + 4 * h) + 2 * h


def transformer_param_count(cfg: ModelConfig) -> int:
    """Closed-form count of all encoder+decoder transformer layers,
    including the two final stack norms (2h each)."""
    h = cfg.hidden_size
    return cfg.num_layers * (
        encoder_layer_param_count(cfg) + decoder_layer_param_count(cfg)
    ) + 2 * 2 * h


# ---- checkpoint container -------------------------------------------------

_CKPT_MAGIC = b"LHTRCKPT"
_CKPT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Self-describing container: JSON header (config, vocabulary, tensor
    index with shapes/offsets) followed by raw row-major little-endian
    float32 tensor data."""
    entries = []
    blobs = []
    offset = 0
    state = model.state_dict()
    for name, tensor in state.items():
        if tensor.dtype != torch.float32:
            continue  # int bookkeeping buffers don't affect the forward pass
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": _CKPT_VERSION,
        "config": asdict(model.config),
        "visual_labels": list(model.vocab.visual_labels),
        "tensors": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ModelError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    config = ModelConfig(**header["config"])
    vocab = Vocabulary(tuple(header["visual_labels"]))
    model = Model(config, vocab)
    state = model.state_dict()
    for entry in header["tensors"]:
        name, shape, off = entry["name"], entry["shape"], entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model
