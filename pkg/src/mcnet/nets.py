"""Two-model, four-head embedding ensemble.

Each model is a small residual backbone feeding a CNN head and a
bottleneck-attention head.  Model 1 is trained against a bias-free cosine
classifier, model 2 against semantic class embeddings produced by a
two-layer network.  The composed feature used for prototypes is the
ordered concatenation of every active head's pooled output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import AblationConfig, ConfigError, ModelConfig


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """Stem convolution followed by residual blocks; returns every block output."""

    def __init__(self, channels: int, image_size: int, stem_width: int,
                 widths: tuple[int, ...], strides: tuple[int, ...]):
        super().__init__()
        self.in_shape = (channels, image_size, image_size)
        self.stem = nn.Sequential(conv3x3(channels, stem_width), nn.BatchNorm2d(stem_width), nn.ReLU())
        blocks, cin, size = [], stem_width, image_size
        for w, s in zip(widths, strides):
            blocks.append(ResBlock(cin, w, s))
            cin, size = w, (size - 1) // s + 1
        self.blocks = nn.ModuleList(blocks)
        self.out_shape = (cin, size, size)
        if size < 2:
            raise ConfigError(f"backbone output spatial size {size} < 2; attention maps need extent")

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ConfigError(f"expected images of shape {self.in_shape}, got {tuple(x.shape[1:])}")
        out = self.stem(x)
        acts = []
        for block in self.blocks:
            out = block(out)
            acts.append(out)
        return out, acts


def forward_backbone(backbone: Backbone, images: torch.Tensor):
    """Final feature map and the list of per-block activations."""
    return backbone(images)


def multi_head_attention(x, w_q, w_k, w_v, w_o, e, heads: int, return_heads: bool = False):
    """Content-position self-attention over tokens.

    x: (B, N, D); w_q, w_k, w_v: (heads*d_k, D); w_o: (D_out, heads*d_k);
    e: (heads, N, d_k) position encoding.  Per head the weights are
    softmax((q e^T + q k^T) / sqrt(d_k)); head outputs are concatenated and
    projected by ``w_o``.  Returns (out, attn[, concatenated head values]).
    """
    b, n, _ = x.shape
    inner = w_q.shape[0]
    if heads <= 0 or inner % heads:
        raise ConfigError(f"inner width {inner} is not divisible into {heads} heads")
    d_k = inner // heads
    if d_k == 0:
        raise ConfigError("d_k = 0")
    if e.shape != (heads, n, d_k):
        raise ConfigError(f"position encoding shape {tuple(e.shape)} != {(heads, n, d_k)}")

    def split(t):
        return t.view(b, n, heads, d_k).transpose(1, 2)  # (B, h, N, d_k)

    q, k, v = split(x @ w_q.T), split(x @ w_k.T), split(x @ w_v.T)
    logits = (q @ e.transpose(-1, -2).unsqueeze(0) + q @ k.transpose(-1, -2)) / math.sqrt(d_k)
    attn = logits.softmax(dim=-1)
    values = (attn @ v).transpose(1, 2).reshape(b, n, inner)
    out = values @ w_o.T
    if return_heads:
        return out, attn, values
    return out, attn


class PositionEncoding(nn.Module):
    """Learned encoding ``e`` of shape (heads, H*W, d_k).

    ``relative`` factors it into row and column components (summed);
    ``absolute`` learns one vector per position.
    """

    def __init__(self, heads: int, height: int, width: int, d_k: int, kind: str = "relative"):
        super().__init__()
        self.kind = kind
        scale = d_k ** -0.5
        if kind == "relative":
            self.rows = nn.Parameter(torch.randn(heads, height, d_k) * scale)
            self.cols = nn.Parameter(torch.randn(heads, width, d_k) * scale)
        elif kind == "absolute":
            self.pos = nn.Parameter(torch.randn(heads, height * width, d_k) * scale)
        else:
            raise ConfigError(f"unknown position encoding {kind!r}")

    def forward(self):
        if self.kind == "absolute":
            return self.pos
        h, w = self.rows.shape[1], self.cols.shape[1]
        return (self.rows[:, :, None, :] + self.cols[:, None, :, :]).reshape(self.rows.shape[0], h * w, -1)


class MHSA(nn.Module):
    def __init__(self, dim: int, heads: int, height: int, width: int, pos: str = "relative"):
        super().__init__()
        if heads <= 0 or dim % heads or dim // heads == 0:
            raise ConfigError(f"width {dim} cannot be split into {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)
        self.pos = PositionEncoding(heads, height, width, dim // heads, pos)
        self.last_attention = None

    def forward(self, x):  # (B, C, H, W)
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        out, attn = multi_head_attention(tokens, self.q.weight, self.k.weight, self.v.weight,
                                         self.proj.weight, self.pos(), self.heads)
        self.last_attention = attn.detach()
        return out.transpose(1, 2).reshape(b, c, h, w)


def mhsa(x: torch.Tensor, module: MHSA, return_heads: bool = False):
    """Apply an MHSA module to token features (B, N, D); see ``multi_head_attention``."""
    return multi_head_attention(x, module.q.weight, module.k.weight, module.v.weight,
                                module.proj.weight, module.pos(), module.heads, return_heads)


class AttentionBlock(nn.Module):
    """Bottleneck block whose 3x3 convolution is replaced by MHSA (1x1 MLPs around it)."""

    def __init__(self, cin: int, cout: int, size: int, stride: int, heads: int, pos: str):
        super().__init__()
        self.mlp1 = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.attn = MHSA(cout, heads, size, size, pos)
        self.pool = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()
        self.bn2 = nn.BatchNorm2d(cout)
        self.mlp2 = nn.Conv2d(cout, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.AvgPool2d(stride) if stride > 1 else nn.Identity(),
                nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.mlp1(x)))
        out = F.relu(self.bn2(self.pool(self.attn(out))))
        out = self.bn3(self.mlp2(out))
        return F.relu(out + self.shortcut(x))


class CnnHead(nn.Module):
    def __init__(self, cin: int, width: int, n_blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList([ResBlock(cin if i == 0 else width, width, 2 if i == 0 else 1)
                                     for i in range(n_blocks)])

    def forward(self, x):
        maps = []
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        return x.mean(dim=(2, 3)), maps


class AttentionHead(nn.Module):
    def __init__(self, cin: int, in_size: int, width: int, n_blocks: int, heads: int, pos: str):
        super().__init__()
        blocks, size = [], in_size
        for i in range(n_blocks):
            stride = 2 if i == 0 else 1
            blocks.append(AttentionBlock(cin if i == 0 else width, width, size, stride, heads, pos))
            size = size // stride
        self.blocks = nn.ModuleList(blocks)
        self.out_size = size

    def forward(self, x):
        maps = []
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        return x.mean(dim=(2, 3)), maps


class SemanticNet(nn.Module):
    """Two fully connected layers with a ReLU between them."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or out_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.in_dim = in_dim

    def forward(self, a):
        if a.shape[-1] != self.in_dim:
            raise ConfigError(f"semantic vector dim {a.shape[-1]} != {self.in_dim}")
        return self.fc2(F.relu(self.fc1(a)))


def forward_semantic(net: SemanticNet, a: torch.Tensor) -> torch.Tensor:
    return net(a)


class EmbeddingModel(nn.Module):
    """One backbone with a CNN head and (optionally) an attention head."""

    def __init__(self, channels: int, image_size: int, cfg: ModelConfig, attention_head: bool = True):
        super().__init__()
        self.backbone = Backbone(channels, image_size, cfg.stem_width, cfg.backbone_widths,
                                 cfg.backbone_strides)
        cb, hb, _ = self.backbone.out_shape
        self.cnn_head = CnnHead(cb, cfg.head_width, cfg.cnn_head_blocks)
        self.attn_head = None
        if attention_head:
            if hb % 2:
                raise ConfigError(f"attention head needs an even input size, got {hb}")
            self.attn_head = AttentionHead(cb, hb, cfg.head_width, cfg.attn_head_blocks,
                                           cfg.heads, cfg.position_encoding)
            cnn_size = (hb - 1) // 2 + 1
            if self.attn_head.out_size != cnn_size:
                raise ConfigError(f"head output sizes differ: CNN {cnn_size} vs attention "
                                  f"{self.attn_head.out_size}")

    def forward(self, x):
        feat, acts = self.backbone(x)
        return self.forward_heads(feat, acts)

    def forward_heads(self, feat, acts=None):
        zc, cmaps = self.cnn_head(feat)
        zt, tmaps = self.attn_head(feat) if self.attn_head is not None else (None, [])
        return {"zC": zc, "zT": zt, "blocks": acts or [], "cnn_maps": cmaps, "attn_maps": tmaps}


@dataclass
class FeatureBundle:
    z1C: torch.Tensor
    z1T: torch.Tensor | None
    z2C: torch.Tensor | None
    z2T: torch.Tensor | None
    blocks1: list
    blocks2: list
    heads1: dict
    heads2: dict

    @property
    def streams(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, getattr(self, n)) for n in ("z1C", "z1T", "z2C", "z2T") if getattr(self, n) is not None]

    @property
    def z(self) -> torch.Tensor:
        return compose_features(*[t for _, t in self.streams])


def compose_features(*streams: torch.Tensor) -> torch.Tensor:
    """Ordered concatenation of equal-width feature vectors along the last axis."""
    if not streams:
        raise ConfigError("no feature streams to compose")
    dims = {s.shape[-1] for s in streams}
    if len(dims) != 1:
        raise ConfigError(f"feature streams have different widths {sorted(dims)}")
    return torch.cat(streams, dim=-1)


def attention_map(m: torch.Tensor) -> torch.Tensor:
    """Activation-based spatial attention: sum over channels of squared activations.

    (C, H, W) -> (H*W,) or (B, C, H, W) -> (B, H*W).
    """
    if m.dim() not in (3, 4):
        raise ConfigError(f"attention_map expects (C,H,W) or (B,C,H,W), got {tuple(m.shape)}")
    return m.pow(2).sum(dim=-3).flatten(-2)


class Ensemble(nn.Module):
    """Both models plus the cosine classifier weights and the semantic network."""

    def __init__(self, cfg: ModelConfig, channels: int, image_size: int, n_base_classes: int,
                 semantic_dim: int, ablation: AblationConfig | None = None):
        super().__init__()
        ab = ablation or AblationConfig()
        self.ablation = ab
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.model1 = EmbeddingModel(channels, image_size, cfg, ab.use_attention_head)
            self.model2 = (EmbeddingModel(channels, image_size, cfg, ab.use_attention_head)
                           if ab.use_model2 else None)
            d_f = cfg.head_width
            self.phi = nn.Parameter(torch.randn(n_base_classes, d_f) / math.sqrt(d_f))
            self.semantic = SemanticNet(semantic_dim, d_f, cfg.semantic_hidden or None)
            self.discriminator = nn.Linear(d_f, 2, bias=False) if ab.regularizer == "CE" else None
        self.feature_dim = d_f

    @property
    def n_streams(self) -> int:
        per = 2 if self.ablation.use_attention_head else 1
        return per * (2 if self.model2 is not None else 1)

    def features(self, x) -> FeatureBundle:
        o1 = self.model1(x)
        o2 = self.model2(x) if self.model2 is not None else None
        return FeatureBundle(o1["zC"], o1["zT"], o2["zC"] if o2 else None, o2["zT"] if o2 else None,
                             o1["blocks"], o2["blocks"] if o2 else [], o1, o2 or {})

    def embed(self, x) -> torch.Tensor:
        return self.features(x).z

    def embedding_modules(self) -> dict[str, nn.Module]:
        mods = {"model1": self.model1}
        if self.model2 is not None:
            mods["model2"] = self.model2
        return mods

    def layer_groups(self) -> list[list[str]]:
        """Parameter-name prefixes grouped by depth (shallow to deep), across models."""
        groups: list[list[str]] = []
        n_back = len(self.model1.backbone.blocks)
        depth_heads = max(len(self.model1.cnn_head.blocks),
                          len(self.model1.attn_head.blocks) if self.model1.attn_head else 0)
        names = [["backbone.stem"]] + [[f"backbone.blocks.{i}"] for i in range(n_back)]
        for level in range(depth_heads):
            members = []
            for head in ("cnn_head", "attn_head"):
                mod = getattr(self.model1, head)
                if mod is None:
                    continue
                n = len(mod.blocks)
                j = n - depth_heads + level  # align heads at their last block
                if j >= 0:
                    members.append(f"{head}.blocks.{j}")
            names.append(members)
        for members in names:
            groups.append([f"{m}.{p}" for m in self.embedding_modules() for p in members])
        return groups

    def resolve_trainable(self, spec: tuple[str, ...]) -> list[str]:
        """Expand ``trainable_blocks`` entries into parameter-name prefixes.

        Entries: ``last`` (final block of every head), ``all``, ``layer:<k>``
        (1-based depth level from ``layer_groups``) or an explicit prefix.
        """
        groups = self.layer_groups()
        prefixes: list[str] = []
        for item in spec:
            if item == "last":
                prefixes += groups[-1]
            elif item == "all":
                prefixes += [p for g in groups for p in g]
            elif item.startswith("layer:"):
                k = int(item.split(":")[1])
                if not 1 <= k <= len(groups):
                    raise ConfigError(f"layer index {k} outside 1..{len(groups)}")
                prefixes += groups[k - 1]
            else:
                prefixes.append(item)
        names = [n for n, _ in self.named_parameters()]
        for p in prefixes:
            if not any(n.startswith(p + ".") for n in names):
                raise ConfigError(f"trainable block {p!r} matches no parameters")
        return sorted(set(prefixes))

    def trainable_parameters(self, spec: tuple[str, ...]) -> list[tuple[str, nn.Parameter]]:
        prefixes = self.resolve_trainable(spec)
        return [(n, p) for n, p in self.named_parameters()
                if any(n.startswith(pre + ".") for pre in prefixes)]
