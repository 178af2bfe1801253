"""Training objectives for the base and incremental sessions.

All reductions are arithmetic means over the batch.
"""
from __future__ import annotations

import logging

import torch
import torch.nn.functional as F

from .config import ConfigError, LossConfig, NumericError, ProtocolError
from .nets import FeatureBundle, attention_map

log = logging.getLogger(__name__)


def safe_norm(d: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient at the origin is 0 instead of NaN."""
    sq = (d * d).sum(dim)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _check_nonzero(x: torch.Tensor, what: str) -> None:
    norms = x.detach().norm(dim=-1)
    bad = torch.nonzero(norms == 0).flatten()
    if len(bad):
        raise NumericError(f"{what} at index {int(bad[0])} has zero norm; cosine undefined")


def cosine_logits(features: torch.Tensor, weights: torch.Tensor, tau: float) -> torch.Tensor:
    _check_nonzero(features, "feature")
    _check_nonzero(weights, "class weight")
    return tau * F.normalize(features, dim=-1) @ F.normalize(weights, dim=-1).T


def cosine_ce_loss(features: torch.Tensor, weights: torch.Tensor, labels: torch.Tensor,
                   tau: float = 16.0) -> torch.Tensor:
    """Mean cross-entropy over logits ``tau * cos(feature, weight_c)``.

    ``labels`` index rows of ``weights``.
    """
    return F.cross_entropy(cosine_logits(features, weights, tau), labels)


def attention_regularization(blocks1: list[torch.Tensor], blocks2: list[torch.Tensor]) -> torch.Tensor:
    """Mean over blocks of the cosine between paired attention maps.

    Maps are (H*W,) or (B, H*W); batched maps are averaged over the batch.
    Samples whose map is all zero are skipped, and a block with no valid
    sample is dropped from the average.
    """
    if len(blocks1) != len(blocks2):
        raise ConfigError(f"attention map lists differ in length: {len(blocks1)} vs {len(blocks2)}")
    if not blocks1:
        raise ConfigError("attention regularization needs at least one block")
    terms = []
    for j, (q1, q2) in enumerate(zip(blocks1, blocks2)):
        if q1.shape != q2.shape:
            raise ConfigError(f"block {j}: attention maps have shapes {tuple(q1.shape)} and {tuple(q2.shape)}")
        q1, q2 = q1.reshape(-1, q1.shape[-1]), q2.reshape(-1, q2.shape[-1])
        n1, n2 = safe_norm(q1), safe_norm(q2)
        ok = (n1 > 0) & (n2 > 0)
        if not bool(ok.all()):
            log.warning("attention regularization: block %d has %d zero map(s), skipped",
                        j, int((~ok).sum()))
        if not bool(ok.any()):
            continue
        cos = (q1[ok] * q2[ok]).sum(-1) / (n1[ok] * n2[ok])
        terms.append(cos.mean())
    if not terms:
        return blocks1[0].new_zeros(())
    return torch.stack(terms).mean()


def _regularizer(bundle: FeatureBundle, kind: str, discriminator, ar_on_heads: bool) -> torch.Tensor | None:
    if kind == "none" or bundle.z2C is None:
        return None
    if kind == "AR":
        maps1 = [attention_map(m) for m in bundle.blocks1]
        maps2 = [attention_map(m) for m in bundle.blocks2]
        if ar_on_heads:
            for key in ("cnn_maps", "attn_maps"):
                maps1 += [attention_map(m) for m in bundle.heads1[key]]
                maps2 += [attention_map(m) for m in bundle.heads2[key]]
        return attention_regularization(maps1, maps2)
    pairs = [(bundle.z1C, bundle.z2C)]
    if bundle.z1T is not None:
        pairs.append((bundle.z1T, bundle.z2T))
    if kind == "Cos":
        return torch.stack([F.cosine_similarity(a, b, dim=-1).mean() for a, b in pairs]).mean()
    if kind == "CE":
        if discriminator is None:
            raise ConfigError("CE regularizer needs a discriminator")
        feats = torch.cat([z for pair in pairs for z in pair])
        which = torch.cat([torch.full((len(z),), i % 2, dtype=torch.long)
                           for pair in pairs for i, z in enumerate(pair)])
        return F.cross_entropy(discriminator(feats), which)
    raise ConfigError(f"unknown regularizer {kind!r}")


def base_loss(bundle: FeatureBundle, labels: torch.Tensor, phi: torch.Tensor,
              semantic_weights: torch.Tensor, cfg: LossConfig, regularizer: str = "AR",
              model1_classifier: str = "CC", discriminator=None) -> tuple[torch.Tensor, dict]:
    """Sum of the per-stream classification losses plus ``alpha`` times the regularizer.

    Model 1 streams are scored against ``phi`` (or against the semantic
    weights when ``model1_classifier == "SC"``), model 2 streams against
    ``semantic_weights``.  Returns (total, breakdown) where breakdown maps
    L1C, L1T, L2C, L2T, reg and total to floats (absent terms are 0).
    """
    w1 = phi if model1_classifier == "CC" else semantic_weights
    terms = {}
    for name, z in bundle.streams:
        weights = w1 if name.startswith("z1") else semantic_weights
        terms["L" + name[1:]] = cosine_ce_loss(z, weights, labels, cfg.tau)
    total = sum(terms.values())
    reg = _regularizer(bundle, regularizer, discriminator, cfg.ar_on_heads)
    if reg is not None:
        total = total + cfg.alpha * reg
    breakdown = {k: 0.0 for k in ("L1C", "L1T", "L2C", "L2T")}
    breakdown.update({k: float(v.detach()) for k, v in terms.items()})
    breakdown["reg"] = float(reg.detach()) if reg is not None else 0.0
    breakdown["alpha"] = float(cfg.alpha) if reg is not None else 0.0
    breakdown["total"] = float(total.detach())
    return total, breakdown


def _pool(anchors, anchor_labels, extra, extra_labels):
    if extra is None or len(extra) == 0:
        return anchors, anchor_labels
    return (torch.cat([anchors, extra.detach().to(anchors.dtype)]),
            torch.cat([anchor_labels, extra_labels.to(anchor_labels.dtype)]))


def pairwise_distances(anchors: torch.Tensor, pool: torch.Tensor) -> torch.Tensor:
    return safe_norm(anchors[:, None, :] - pool[None, :, :])


def mine_hard(dist: torch.Tensor, anchor_labels: torch.Tensor, pool_labels: torch.Tensor):
    """Indices of the farthest positive and nearest negative per anchor (lowest index on ties)."""
    n = len(anchor_labels)
    same = anchor_labels[:, None] == pool_labels[None, :]
    self_mask = torch.zeros_like(same)
    self_mask[torch.arange(n), torch.arange(n)] = True
    pos_mask = same & ~self_mask
    neg_mask = ~same
    for i in range(n):
        if not bool(pos_mask[i].any()):
            raise ProtocolError(f"anchor {i} of class {int(anchor_labels[i])} has no positive in the pool")
        if not bool(neg_mask[i].any()):
            raise ProtocolError(f"anchor {i} of class {int(anchor_labels[i])} has no negative in the pool")
    d = dist.detach()
    pos = torch.where(pos_mask, d, torch.full_like(d, -torch.inf)).argmax(dim=1)
    neg = torch.where(neg_mask, d, torch.full_like(d, torch.inf)).argmin(dim=1)
    return pos, neg


def psht_loss(anchors: torch.Tensor, anchor_labels: torch.Tensor, extra: torch.Tensor | None = None,
              extra_labels: torch.Tensor | None = None, margin: float = 0.0) -> torch.Tensor:
    """Hard-mined triplet loss over a pool of anchors plus (detached) pseudo-features.

    Only ``anchors`` act as anchors.  For each, the farthest same-class and
    nearest other-class pool element are mined and the hinge
    ``max(0, d_pos - d_neg + margin)`` is averaged over anchors.
    """
    pool, pool_labels = _pool(anchors, anchor_labels, extra, extra_labels)
    dist = pairwise_distances(anchors, pool)
    pos, neg = mine_hard(dist, anchor_labels, pool_labels)
    rows = torch.arange(len(anchors))
    return F.relu(dist[rows, pos] - dist[rows, neg] + margin).mean()


def random_triplet_loss(anchors: torch.Tensor, anchor_labels: torch.Tensor, generator: torch.Generator,
                        extra: torch.Tensor | None = None, extra_labels: torch.Tensor | None = None,
                        margin: float = 0.0) -> torch.Tensor:
    """Triplet loss with a uniformly random positive and negative per anchor."""
    pool, pool_labels = _pool(anchors, anchor_labels, extra, extra_labels)
    n = len(anchors)
    same = anchor_labels[:, None] == pool_labels[None, :]
    same[torch.arange(n), torch.arange(n)] = False
    pos, neg = [], []
    for i in range(n):
        p_idx = torch.nonzero(same[i]).flatten()
        n_idx = torch.nonzero(anchor_labels[i] != pool_labels).flatten()
        if not len(p_idx) or not len(n_idx):
            raise ProtocolError(f"anchor {i} of class {int(anchor_labels[i])} lacks a positive or negative")
        pos.append(p_idx[torch.randint(len(p_idx), (1,), generator=generator)])
        neg.append(n_idx[torch.randint(len(n_idx), (1,), generator=generator)])
    pos, neg = torch.cat(pos), torch.cat(neg)
    d_pos = safe_norm(anchors - pool[pos])
    d_neg = safe_norm(anchors - pool[neg])
    return F.relu(d_pos - d_neg + margin).mean()


def kd_loss(z_current: torch.Tensor, z_previous: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean distance to the frozen previous-session features."""
    if z_current.shape != z_previous.shape:
        raise ConfigError(f"shape mismatch {tuple(z_current.shape)} vs {tuple(z_previous.shape)}")
    return safe_norm(z_current - z_previous.detach()).mean()


def novel_loss(psht: torch.Tensor, kd: torch.Tensor, lam: float) -> torch.Tensor:
    return psht + lam * kd
