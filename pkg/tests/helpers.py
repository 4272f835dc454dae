"""Shared fixtures for the model-level tests: a 16x16 desk-miniature setup."""

import numpy as np
import torch

from sketchadapt.episodes import sample_task, to_tensors
from sketchadapt.nets import NetConfig, RetrievalModel
from sketchadapt.synth import SynthConfig, synth_generate

TINY_NET = NetConfig(
    canvas=16,
    feature_dim=16,
    primary_dim=8,
    sketch_aux_dim=8,
    photo_aux_dim=8,
    hidden_size=8,
    channels=(8, 8, 8, 8),
    norm_groups=4,
    eta_hidden=(8, 8),
)


def tiny_dataset(samples=6, seed=0):
    return synth_generate(
        SynthConfig(samples_per_category=samples, canvas=16, t_max=8, n_meta_test_categories=1),
        seed=seed,
    )


def tiny_model(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return RetrievalModel(TINY_NET).to(dtype)


def tiny_batch(model, dataset, seed=0, n_train=3, n_val=2, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    ep = sample_task(dataset, model, rng, n_train=n_train, n_val=n_val, pool_size=3)
    return to_tensors(ep, dtype)
