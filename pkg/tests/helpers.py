"""Small models and data shared by several test modules."""

import numpy as np
import torch

from mdqf.datagen import SceneSpec, generate_dataset
from mdqf.detector import BranchDetector, DetectorConfig
from mdqf.fusion import FusionConfig
from mdqf.model import MdqfModel

TINY = dict(image_size=(16, 16), patch=8, d_model=16, num_queries=4, num_stages=2, num_heads=2,
            enc_layers=1, ffn_dim=32)


def tiny_branch(modality="rgb", seed=0, dtype=torch.float64, **kw):
    cfg = DetectorConfig(modality=modality, seed=seed, **{**TINY, **kw})
    return BranchDetector(cfg).to(dtype)


def tiny_model(k=6, seed=0, dtype=torch.float64, randomize_adapters=True, **kw):
    model = MdqfModel(tiny_branch("rgb", seed, dtype, **kw), tiny_branch("tir", seed + 1, dtype, **kw),
                      FusionConfig(k_train=k, k_test=k))
    model.to(dtype)
    if randomize_adapters:
        # fresh adapters are the identity; perturb them so their gradients are nontrivial
        g = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            for p in model.adapters.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
    return model


def tiny_images(batch, channels, seed=0, size=16):
    return np.random.default_rng(seed).uniform(0, 1, (batch, size, size, channels))


def small_scenes(count=6, size=32, start=0, seed=0):
    spec = SceneSpec(image_size=(size, size), object_size=(8, 12), seed=seed)
    return generate_dataset(spec, count, start)
