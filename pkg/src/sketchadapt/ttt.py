"""Inference-time adaptation and retrieval.

Protocol: optionally adapt the encoder once to the test photo gallery via
edgemap reconstruction, freeze the gallery features, then for every query
adapt a private encoder copy on the query's own raster-to-vector
reconstruction loss and re-encode only the query. The snapshot is never
mutated, so queries are independent and order-insensitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from sketchadapt.dataio import SketchDataset, SketchPhotoPair
from sketchadapt.errors import ConfigError, ShapeError
from sketchadapt.losses import sketch_recon_loss
from sketchadapt.metrics import average_precision, mean_over_queries, precision_at_k
from sketchadapt.nets import RetrievalModel, fcall, l2_normalize, raster_to_tensor
from sketchadapt.strokes import edgemap


@dataclass(frozen=True)
class TTTConfig:
    lr_ttt: float = 1e-4  # test-time learning rate (alpha^T)
    tau_p: int = 4  # gallery-adaptation gradient steps
    tau_s: int = 4  # per-query gradient steps
    use_tpa: bool = True
    gallery_refresh: bool = False
    gallery_batch: int = 64
    max_queries: int = 0  # 0 = every unseen-category sketch
    k_precision: int = 200

    def validate(self) -> None:
        if self.lr_ttt <= 0:
            raise ConfigError("lr_ttt must be > 0")
        if self.tau_p < 0 or self.tau_s < 0:
            raise ConfigError("gradient step counts must be >= 0")
        if self.k_precision < 1:
            raise ConfigError("k_precision must be >= 1")


@dataclass
class GallerySnapshot:
    encoder_params: dict[str, torch.Tensor]  # model-level names, detached
    features: torch.Tensor  # (G, d_p) under the snapshot encoder
    categories: np.ndarray  # (G,)
    pre_loss: float = math.nan  # gallery edgemap loss before adaptation
    post_loss: float = math.nan


def _detached_params(model: RetrievalModel) -> dict[str, torch.Tensor]:
    return {k: v.detach() for k, v in model.named_parameters()}


def _encoder_copy(params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    out = dict(params)
    for k in params:
        if k.startswith("encoder."):
            out[k] = params[k].detach().clone().requires_grad_(True)
    return out


def _encoder_leaves(params: dict[str, torch.Tensor]) -> list[tuple[str, torch.Tensor]]:
    return [(k, v) for k, v in params.items() if k.startswith("encoder.")]


def _gallery_edge_targets(gallery: list[SketchPhotoPair], dtype) -> torch.Tensor:
    return torch.stack([raster_to_tensor(edgemap(p.photo), dtype) for p in gallery])


def _gallery_recon_loss(model, params, photos, edges, batch_size):
    """Mean edgemap-reconstruction loss over the whole gallery."""
    total = torch.zeros((), dtype=photos.dtype)
    n = photos.shape[0]
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        feats = fcall(model.encoder, params, "encoder", photos[lo:hi])
        pred = fcall(model.photo_decoder, params, "photo_decoder", feats)
        total = total + ((pred - edges[lo:hi]) ** 2).sum()
    return total / edges.numel()


def adapt_gallery(model: RetrievalModel, gallery: list[SketchPhotoPair], cfg: TTTConfig) -> GallerySnapshot:
    """One-time photo adaptation (when enabled) plus frozen gallery features."""
    if not gallery:
        raise ConfigError("cannot adapt to an empty gallery")
    cfg.validate()
    dtype = next(model.parameters()).dtype
    params = _encoder_copy(_detached_params(model))
    photos = torch.stack([raster_to_tensor(p.photo, dtype) for p in gallery])

    pre = post = math.nan
    if cfg.use_tpa and cfg.tau_p > 0:
        edges = _gallery_edge_targets(gallery, dtype)
        for step in range(cfg.tau_p):
            loss = _gallery_recon_loss(model, params, photos, edges, cfg.gallery_batch)
            if step == 0:
                pre = float(loss.detach())
            names, leaves = zip(*_encoder_leaves(params))
            grads = torch.autograd.grad(loss, leaves)
            with torch.no_grad():
                for k, leaf, g in zip(names, leaves, grads):
                    params[k] = (leaf - cfg.lr_ttt * g).requires_grad_(True)
        with torch.no_grad():
            post = float(_gallery_recon_loss(model, params, photos, edges, cfg.gallery_batch))

    with torch.no_grad():
        feats = []
        for lo in range(0, photos.shape[0], cfg.gallery_batch):
            f = fcall(model.encoder, params, "encoder", photos[lo : lo + cfg.gallery_batch])
            feats.append(l2_normalize(fcall(model.primary, params, "primary", f)))
        features = torch.cat(feats)
    snapshot_params = {k: v.detach() for k, v in params.items()}
    return GallerySnapshot(
        encoder_params=snapshot_params,
        features=features,
        categories=np.array([p.category_id for p in gallery]),
        pre_loss=pre,
        post_loss=post,
    )


def adapt_query(
    model: RetrievalModel,
    snapshot: GallerySnapshot,
    query: SketchPhotoPair,
    cfg: TTTConfig,
):
    """Adapt a private encoder copy on the query's own reconstruction loss.

    Returns (query feature, diagnostics). The snapshot's master parameters
    are never touched; a non-finite adaptation loss falls back to the
    unadapted feature and flags the incident.
    """
    dtype = next(model.parameters()).dtype
    sketch = raster_to_tensor(query.sketch_raster, dtype)
    target = torch.from_numpy(query.sketch_vec.points).to(dtype)
    params = _encoder_copy(snapshot.encoder_params)

    def recon(p):
        f = fcall(model.encoder, p, "encoder", sketch.unsqueeze(0))[0]
        psi = fcall(model.sketch_decoder, p, "sketch_decoder", f, target)
        return sketch_recon_loss(psi, target)

    pre = post = float(recon(params).detach())
    incident = False
    if cfg.tau_s > 0:
        for _ in range(cfg.tau_s):
            loss = recon(params)
            if not torch.isfinite(loss):
                incident = True
                break
            names, leaves = zip(*_encoder_leaves(params))
            grads = torch.autograd.grad(loss, leaves)
            with torch.no_grad():
                for k, leaf, g in zip(names, leaves, grads):
                    params[k] = (leaf - cfg.lr_ttt * g).requires_grad_(True)
        if incident:
            params = _encoder_copy(snapshot.encoder_params)
            post = pre
        else:
            post = float(recon(params).detach())

    with torch.no_grad():
        f = fcall(model.encoder, params, "encoder", sketch.unsqueeze(0))
        feature = l2_normalize(fcall(model.primary, params, "primary", f))[0]
    diagnostics = {
        "pre_loss": pre,
        "post_loss": post,
        "incident": incident,
        "adapted_params": params,
    }
    return feature, diagnostics


def retrieve(feature: torch.Tensor, snapshot: GallerySnapshot, query_category: int):
    """Rank the gallery by ascending squared distance; ties by gallery index."""
    if feature.shape != snapshot.features.shape[1:]:
        raise ShapeError(
            f"query feature dim {tuple(feature.shape)} vs gallery "
            f"{tuple(snapshot.features.shape[1:])}"
        )
    d = ((snapshot.features - feature.unsqueeze(0)) ** 2).sum(dim=1).numpy()
    order = np.argsort(d, kind="stable")
    relevance = (snapshot.categories[order] == query_category).astype(int)
    return order, relevance


def _query_order(dataset: SketchDataset, categories) -> list[int]:
    """Round-robin across categories so truncation stays balanced."""
    per_cat = [list(dataset.by_category.get(c, [])) for c in categories]
    out = []
    for depth in range(max((len(v) for v in per_cat), default=0)):
        for lst in per_cat:
            if depth < len(lst):
                out.append(lst[depth])
    return out


@dataclass
class EvalReport:
    map_ttt: float
    map_frozen: float
    p_at_k_ttt: float
    p_at_k_frozen: float
    k: int
    n_queries: int
    gallery_size: int
    use_tpa: bool
    tau_s: int
    tau_p: int
    incidents: int
    gallery_pre_loss: float
    gallery_post_loss: float
    per_query: list[dict] = field(repr=False, default_factory=list)


def evaluate_zs(model: RetrievalModel, dataset: SketchDataset, cfg: TTTConfig) -> EvalReport:
    """Zero-shot retrieval on the unseen-category split, TTT and frozen.

    Both variants are computed in one pass over identical queries: the
    frozen numbers are the tau_s = 0 features under the same snapshot.
    """
    cfg.validate()
    cats = dataset.split.unseen_test
    gallery = [p for c in cats for p in dataset.pairs_of(c)]
    if not gallery:
        raise ConfigError("dataset has no unseen-category pairs to evaluate on")
    snapshot = adapt_gallery(model, gallery, cfg)

    query_idx = _query_order(dataset, cats)
    if cfg.max_queries:
        query_idx = query_idx[: cfg.max_queries]

    k = min(cfg.k_precision, len(gallery))
    rows = []
    incidents = 0
    for qi in query_idx:
        pair = dataset.pairs[qi]
        feature, diag = adapt_query(model, snapshot, pair, cfg)
        incidents += int(diag["incident"])

        snap = snapshot
        if cfg.gallery_refresh:
            with torch.no_grad():
                dtype = next(model.parameters()).dtype
                photos = torch.stack([raster_to_tensor(p.photo, dtype) for p in gallery])
                feats = []
                for lo in range(0, photos.shape[0], cfg.gallery_batch):
                    f = fcall(model.encoder, diag["adapted_params"], "encoder",
                              photos[lo : lo + cfg.gallery_batch])
                    feats.append(l2_normalize(fcall(model.primary, diag["adapted_params"], "primary", f)))
                snap = GallerySnapshot(
                    encoder_params=snapshot.encoder_params,
                    features=torch.cat(feats),
                    categories=snapshot.categories,
                )
        _, rel = retrieve(feature, snap, pair.category_id)

        with torch.no_grad():
            f0 = fcall(model.encoder, snapshot.encoder_params, "encoder",
                       raster_to_tensor(pair.sketch_raster, feature.dtype).unsqueeze(0))
            frozen_feature = l2_normalize(fcall(model.primary, snapshot.encoder_params, "primary", f0))[0]
        _, rel0 = retrieve(frozen_feature, snapshot, pair.category_id)

        rows.append(
            {
                "query_index": int(qi),
                "category_id": int(pair.category_id),
                "style_id": int(pair.style_id),
                "pre_loss": diag["pre_loss"],
                "post_loss": diag["post_loss"],
                "incident": bool(diag["incident"]),
                "ap_ttt": average_precision(rel),
                "ap_frozen": average_precision(rel0),
                "p_at_k_ttt": precision_at_k(rel, k),
                "p_at_k_frozen": precision_at_k(rel0, k),
            }
        )

    return EvalReport(
        map_ttt=mean_over_queries([r["ap_ttt"] for r in rows]),
        map_frozen=mean_over_queries([r["ap_frozen"] for r in rows]),
        p_at_k_ttt=mean_over_queries([r["p_at_k_ttt"] for r in rows]),
        p_at_k_frozen=mean_over_queries([r["p_at_k_frozen"] for r in rows]),
        k=k,
        n_queries=len(rows),
        gallery_size=len(gallery),
        use_tpa=cfg.use_tpa,
        tau_s=cfg.tau_s,
        tau_p=cfg.tau_p,
        incidents=incidents,
        gallery_pre_loss=snapshot.pre_loss,
        gallery_post_loss=snapshot.post_loss,
        per_query=rows,
    )
