"""Bilevel training loop.

Inner loop: plain gradient steps with the learnable rate alpha on the
combined triplet + reconstruction loss, updating only the encoder and
primary head but keeping the adapted parameters differentiable functions
of everything. Outer loop: Adam on the batch-mean validation triplet loss
through the inner step (higher-order), updating all parameter groups, the
stroke-weight net, and alpha.

Per-stroke weights come from gradient features: the gradient of each
step's reconstruction loss and of the anchor's triplet loss, both taken
against the encoder's final linear layer, flattened, concatenated, and
passed (detached) through the stroke-weight net.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from sketchadapt.dataio import SketchDataset
from sketchadapt.episodes import EpisodeBatch, sample_task, to_tensors
from sketchadapt.errors import ConfigError, NumericalError
from sketchadapt.losses import (
    LossConfig,
    sketch_recon_steps,
    triplet_loss,
)
from sketchadapt.metrics import average_precision
from sketchadapt.nets import (
    NetConfig,
    RetrievalModel,
    fcall,
    group_of,
    l2_normalize,
    raster_to_tensor,
    save_checkpoint,
)
from sketchadapt.seeding import derive_seed, rng_for

INNER_GROUPS = ("encoder", "primary")
ALPHA_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    inner_steps: int = 1
    meta_batch: int = 32
    outer_lr: float = 1e-4  # beta
    first_order: bool = False
    use_eta: bool = True
    use_meta: bool = True
    outer_iters: int = 1000
    seed: int = 0
    n_train_pairs: int = 8  # N_i
    n_val_pairs: int = 4  # r_i
    pool_size: int = 8
    eval_every: int = 0  # 0 disables periodic retrieval eval
    eval_queries: int = 32
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    frozen_groups: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.meta_batch < 1:
            raise ConfigError("meta_batch must be >= 1")
        if self.outer_lr <= 0:
            raise ConfigError("outer_lr must be > 0")
        if self.outer_iters < 0:
            raise ConfigError("outer_iters must be >= 0")
        if self.n_train_pairs < 1 or self.n_val_pairs < 1 or self.pool_size < 1:
            raise ConfigError("episode sizes must be >= 1")
        bad = [g for g in self.frozen_groups if g not in
               ("encoder", "primary", "sketch_decoder", "photo_decoder", "eta_net", "alpha")]
        if bad:
            raise ConfigError(f"unknown frozen groups: {bad}")


def model_params(model: RetrievalModel) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())


def embed_under(model, params, imgs):
    f = fcall(model.encoder, params, "encoder", imgs)
    return l2_normalize(fcall(model.primary, params, "primary", f))


def _phi_grad_rows(losses_vec, phi, retain=True):
    """Rows of flattened per-loss gradients against the phi block.

    One vmapped backward for the whole vector instead of one engine call
    per element; the per-element loop is an order of magnitude slower.
    """
    k = losses_vec.shape[0]
    eye = torch.eye(k, dtype=losses_vec.dtype)
    grads = torch.autograd.grad(
        losses_vec, phi, grad_outputs=eye, is_grads_batched=True, retain_graph=retain
    )
    return torch.cat([g.reshape(k, -1) for g in grads], dim=1)


def _eta_from_graph(model, params, step_losses, tri_grad_row):
    """Stroke weights from gradient features of an existing forward graph."""
    phi = [params[n] for n in model.phi_names]
    g_steps = _phi_grad_rows(step_losses, phi)
    features = torch.cat(
        [g_steps, tri_grad_row.unsqueeze(0).expand(g_steps.shape[0], -1)], dim=1
    ).detach()
    return fcall(model.eta_net, params, "eta_net", features)


def compute_eta(model, params, sketch, target, photo, negative, margin):
    """Per-step weights for one anchor: eta_t = g(concat(grad_rec_t, grad_tri))."""
    imgs = torch.stack([sketch, photo, negative])
    feats = fcall(model.encoder, params, "encoder", imgs)
    emb = l2_normalize(fcall(model.primary, params, "primary", feats))
    tri = triplet_loss(emb[0], emb[1], emb[2], margin)
    psi = fcall(model.sketch_decoder, params, "sketch_decoder", feats[0], target)
    steps = sketch_recon_steps(psi, target)
    phi = [params[n] for n in model.phi_names]
    tri_row = _phi_grad_rows(tri.unsqueeze(0), phi)[0]
    return _eta_from_graph(model, params, steps, tri_row)


def training_loss(model, params, batch: EpisodeBatch, loss_cfg: LossConfig, use_eta: bool):
    """L_trn on the episode's train pairs; returns (total, float parts)."""
    n = batch.sketches.shape[0]
    imgs = torch.cat([batch.sketches, batch.photos, batch.negatives])
    feats = fcall(model.encoder, params, "encoder", imgs)
    emb = l2_normalize(fcall(model.primary, params, "primary", feats))
    f_s, f_p, f_n = emb[:n], emb[n : 2 * n], emb[2 * n :]
    tri_each = triplet_loss(f_s, f_p, f_n, loss_cfg.margin)
    tri = tri_each.mean()

    rec_p = torch.zeros((), dtype=tri.dtype)
    rec_s = torch.zeros((), dtype=tri.dtype)
    if loss_cfg.lambda_rec > 0:
        pred_edges = fcall(model.photo_decoder, params, "photo_decoder", feats[n : 2 * n])
        rec_p = ((pred_edges - batch.edgemaps) ** 2).mean()

        tri_rows = None
        if use_eta:
            phi = [params[n_] for n_ in model.phi_names]
            tri_rows = _phi_grad_rows(tri_each, phi)
        rec_terms = []
        for i in range(n):
            psi = fcall(model.sketch_decoder, params, "sketch_decoder", feats[i], batch.targets[i])
            steps = sketch_recon_steps(psi, batch.targets[i])
            if use_eta:
                eta = _eta_from_graph(model, params, steps, tri_rows[i])
                rec_terms.append((eta * steps).mean())
            else:
                rec_terms.append(steps.mean())
        rec_s = torch.stack(rec_terms).mean()

    total = loss_cfg.lambda_tri * tri + loss_cfg.lambda_rec * (rec_s + rec_p)
    parts = {
        "loss": float(total.detach()),
        "triplet": float(tri.detach()),
        "rec_sketch": float(rec_s.detach()),
        "rec_photo": float(rec_p.detach()),
    }
    return total, parts


def validation_loss(model, params, batch: EpisodeBatch, margin: float):
    n = batch.val_sketches.shape[0]
    imgs = torch.cat([batch.val_sketches, batch.val_photos, batch.val_negatives])
    emb = embed_under(model, params, imgs)
    return triplet_loss(emb[:n], emb[n : 2 * n], emb[2 * n :], margin).mean()


def sgd_adapt(params, loss_fn, names, alpha, steps=1, first_order=False, on_step=None):
    """Differentiable plain-SGD adaptation of the named parameters.

    ``loss_fn(params) -> scalar`` is re-evaluated each step on the current
    adapted dict. Unless ``first_order``, the returned parameters stay
    connected to the originals, alpha, and everything else the loss
    touches, so a later backward produces higher-order meta-gradients.
    """
    adapted = dict(params)
    for step in range(steps):
        loss = loss_fn(adapted)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite inner loss at step {step}: {float(loss)}")
        if on_step is not None:
            on_step(step, loss)
        grads = torch.autograd.grad(
            loss,
            [adapted[n] for n in names],
            create_graph=not first_order,
            allow_unused=True,
        )
        for n, g in zip(names, grads):
            if g is None:
                g = torch.zeros_like(adapted[n])
            adapted = {**adapted, n: adapted[n] - alpha * g}
    return adapted


def inner_update(model, params, batch, loss_cfg, train_cfg):
    """Adapt (encoder, primary) on the episode's train split; Eq.-style SGD."""
    names = [
        n for n in params
        if group_of(n) in INNER_GROUPS and params[n].requires_grad
    ]
    records = []

    def loss_fn(p):
        total, parts = training_loss(model, p, batch, loss_cfg, train_cfg.use_eta)
        records.append(parts)
        return total

    adapted = sgd_adapt(
        params,
        loss_fn,
        names,
        alpha=params["alpha"],
        steps=train_cfg.inner_steps,
        first_order=train_cfg.first_order,
    )
    return adapted, records


def outer_step(model, optimizer, batches, loss_cfg, train_cfg):
    """One Adam update of (all groups, eta net, alpha) from a task batch."""
    params = model_params(model)
    trn_records, val_losses = [], []
    adapted_any = False

    if train_cfg.use_meta:
        for b in batches:
            adapted, recs = inner_update(model, params, b, loss_cfg, train_cfg)
            adapted_any = True
            trn_records.extend(recs)
            val_losses.append(validation_loss(model, adapted, b, loss_cfg.margin))
        objective = torch.stack(val_losses).mean()
    else:
        totals = []
        for b in batches:
            total, parts = training_loss(model, params, b, loss_cfg, train_cfg.use_eta)
            trn_records.append(parts)
            totals.append(total)
        objective = torch.stack(totals).mean()

    if not torch.isfinite(objective):
        raise NumericalError(f"non-finite outer objective: {float(objective)}")
    optimizer.zero_grad()
    objective.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in {name}")
    optimizer.step()
    with torch.no_grad():
        if model.alpha.item() < ALPHA_FLOOR:
            warnings.warn(
                f"inner learning rate underflow ({model.alpha.item():.3e}); clamping",
                stacklevel=2,
            )
            model.alpha.clamp_(min=ALPHA_FLOOR)

    record = {
        "l_trn": float(np.mean([r["loss"] for r in trn_records])),
        "l_val": float(objective.detach()) if train_cfg.use_meta else float("nan"),
        "alpha": float(model.alpha.detach()),
        "adapted": adapted_any,
    }
    return record


def frozen_retrieval_map(model, query_pairs, gallery_pairs):
    """mAP@all of the frozen model; used for periodic in-training eval."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        q = model.embed(torch.stack([raster_to_tensor(p.sketch_raster, dtype) for p in query_pairs]))
        g = model.embed(torch.stack([raster_to_tensor(p.photo, dtype) for p in gallery_pairs]))
    gallery_cats = np.array([p.category_id for p in gallery_pairs])
    aps = []
    for i, qp in enumerate(query_pairs):
        d = ((g - q[i : i + 1]) ** 2).sum(dim=1).numpy()
        order = np.argsort(d, kind="stable")
        rel = (gallery_cats[order] == qp.category_id).astype(int)
        aps.append(average_precision(rel))
    return float(np.mean(aps))


def train(
    dataset: SketchDataset,
    net_cfg: NetConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    fingerprint: str = "",
    log_every: int = 0,
):
    """Run the outer loop; returns (model, history rows).

    With ``use_meta`` off the same episode batches drive joint single-loop
    minimization of the training loss instead of the bilevel update. Writes
    ``metrics.csv`` plus checkpoints under ``out_dir`` when given.
    """
    net_cfg.validate()
    loss_cfg.validate()
    train_cfg.validate()

    torch.manual_seed(derive_seed(train_cfg.seed, "init"))
    model = RetrievalModel(net_cfg)
    for name, p in model.named_parameters():
        if group_of(name) in train_cfg.frozen_groups:
            p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=train_cfg.outer_lr)

    rng = rng_for(train_cfg.seed, "episodes")
    dtype = next(model.parameters()).dtype

    rows = []
    csv_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / "metrics.csv", "w", newline="")
        csv_file.write(f"# fingerprint: {fingerprint}\n")
        writer = csv.writer(csv_file)
        writer.writerow(["iteration", "l_trn", "l_val", "map_meta_test", "wall_clock"])
        csv_file.flush()

    meta_test_pairs = [
        p for c in dataset.split.meta_test for p in dataset.pairs_of(c)
    ]
    start = time.perf_counter()
    try:
        for it in range(1, train_cfg.outer_iters + 1):
            episodes = [
                sample_task(
                    dataset,
                    model,
                    rng,
                    n_train=train_cfg.n_train_pairs,
                    n_val=train_cfg.n_val_pairs,
                    pool_size=train_cfg.pool_size,
                )
                for _ in range(train_cfg.meta_batch)
            ]
            batches = [to_tensors(ep, dtype) for ep in episodes]
            record = outer_step(model, optimizer, batches, loss_cfg, train_cfg)

            map_mt = float("nan")
            if (
                train_cfg.eval_every
                and it % train_cfg.eval_every == 0
                and meta_test_pairs
            ):
                k = min(train_cfg.eval_queries, len(meta_test_pairs))
                map_mt = frozen_retrieval_map(model, meta_test_pairs[:k], meta_test_pairs)

            row = {
                "iteration": it,
                "l_trn": record["l_trn"],
                "l_val": record["l_val"],
                "map_meta_test": map_mt,
                "wall_clock": time.perf_counter() - start,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([row["iteration"], f"{row['l_trn']:.6f}", f"{row['l_val']:.6f}",
                                 f"{row['map_meta_test']:.6f}", f"{row['wall_clock']:.3f}"])
                csv_file.flush()
            if log_every and it % log_every == 0:
                print(
                    f"[{it}/{train_cfg.outer_iters}] l_trn={row['l_trn']:.4f} "
                    f"l_val={row['l_val']:.4f} alpha={record['alpha']:.2e} "
                    f"({row['wall_clock']:.0f}s)"
                )
            if (
                out_dir is not None
                and train_cfg.checkpoint_every
                and it % train_cfg.checkpoint_every == 0
            ):
                save_checkpoint(model, out_dir / f"ckpt_{it:06d}.pt", fingerprint,
                                extra={"iteration": it})
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.pt", fingerprint,
                        extra={"iteration": train_cfg.outer_iters})
    return model, rows
