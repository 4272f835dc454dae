"""Meta-task sampling over the seen-category split.

An episode is one category's disjoint train/validation pair sets plus one
cross-category negative photo per anchor. Negatives are drawn from a small
candidate pool of other-category photos and ranked by distance in the
current retrieval space: the nearest (hardest) wins, ties broken by lowest
pool index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from sketchadapt.dataio import SketchDataset, SketchPhotoPair
from sketchadapt.errors import SamplingError
from sketchadapt.nets import RetrievalModel, raster_to_tensor
from sketchadapt.strokes import edgemap


@dataclass
class Episode:
    category_id: int
    trn_pairs: list[SketchPhotoPair]
    val_pairs: list[SketchPhotoPair]
    trn_negatives: list[SketchPhotoPair]  # photo providers from other categories
    val_negatives: list[SketchPhotoPair]

    def __post_init__(self):
        trn_ids = {id(p) for p in self.trn_pairs}
        if any(id(p) in trn_ids for p in self.val_pairs):
            raise SamplingError("train/validation pair sets overlap")
        for neg in self.trn_negatives + self.val_negatives:
            if neg.category_id == self.category_id:
                raise SamplingError("negative drawn from the episode's own category")


@dataclass
class EpisodeBatch:
    """Episode content as torch tensors, ready for loss computation."""

    category_id: int
    sketches: torch.Tensor
    photos: torch.Tensor
    negatives: torch.Tensor
    edgemaps: torch.Tensor
    targets: list[torch.Tensor]
    val_sketches: torch.Tensor
    val_photos: torch.Tensor
    val_negatives: torch.Tensor


def sample_task(
    dataset: SketchDataset,
    model: RetrievalModel,
    rng: np.random.Generator,
    n_train: int = 8,
    n_val: int = 4,
    pool_size: int = 8,
) -> Episode:
    """Draw one meta-task with pooled hard negatives under the current model."""
    cats = dataset.split.meta_train
    if not cats:
        raise SamplingError("no meta-train categories in the split")
    category = int(cats[int(rng.integers(len(cats)))])
    indices = dataset.by_category.get(category, [])
    need = n_train + n_val
    if len(indices) < need:
        raise SamplingError(
            f"category {category} has {len(indices)} pairs, need {need}"
        )
    chosen = rng.choice(len(indices), size=need, replace=False)
    pairs = [dataset.pairs[indices[int(i)]] for i in chosen]
    trn, val = pairs[:n_train], pairs[n_train:]

    neg_candidates = [
        i
        for c in cats
        if c != category
        for i in dataset.by_category.get(c, [])
    ]
    if not neg_candidates:
        raise SamplingError("no other-category photos available for negatives")

    pools = []
    for _ in range(need):
        k = min(pool_size, len(neg_candidates))
        picks = rng.choice(len(neg_candidates), size=k, replace=False)
        pools.append([dataset.pairs[neg_candidates[int(i)]] for i in picks])

    negatives = _hardest_from_pools(model, pairs, pools)
    return Episode(
        category_id=category,
        trn_pairs=trn,
        val_pairs=val,
        trn_negatives=negatives[:n_train],
        val_negatives=negatives[n_train:],
    )


def _hardest_from_pools(model, anchors, pools):
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        f_anchor = model.embed(
            torch.stack([raster_to_tensor(p.sketch_raster, dtype) for p in anchors])
        )
        picked = []
        for i, pool in enumerate(pools):
            f_pool = model.embed(
                torch.stack([raster_to_tensor(p.photo, dtype) for p in pool])
            )
            d = ((f_pool - f_anchor[i : i + 1]) ** 2).sum(dim=1)
            picked.append(pool[int(np.argmin(d.numpy()))])  # first min wins ties
    return picked


def to_tensors(episode: Episode, dtype=torch.float32) -> EpisodeBatch:
    def stack(pairs, attr):
        return torch.stack([raster_to_tensor(getattr(p, attr), dtype) for p in pairs])

    edges = torch.stack(
        [raster_to_tensor(edgemap(p.photo), dtype) for p in episode.trn_pairs]
    )
    targets = [
        torch.from_numpy(p.sketch_vec.points).to(dtype) for p in episode.trn_pairs
    ]
    return EpisodeBatch(
        category_id=episode.category_id,
        sketches=stack(episode.trn_pairs, "sketch_raster"),
        photos=stack(episode.trn_pairs, "photo"),
        negatives=stack(episode.trn_negatives, "photo"),
        edgemaps=edges,
        targets=targets,
        val_sketches=stack(episode.val_pairs, "sketch_raster"),
        val_photos=stack(episode.val_pairs, "photo"),
        val_negatives=stack(episode.val_negatives, "photo"),
    )
