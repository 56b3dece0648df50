"""
Per-stage query fusion
======================

Two branch detectors run side by side. After every decoder stage their
proposals are pooled, the best k survive, and the matching queries (mapped
across modalities by small adapters) seed the next stage of both branches.
This script inspects that selection on an untrained model, then checks
that the missing-modality path is the surviving branch alone.
"""

import torch

from mdqf.datagen import SceneSpec, generate_scene
from mdqf.fusion import FusionConfig
from mdqf.model import MdqfModel

torch.manual_seed(0)
model = MdqfModel(fusion=FusionConfig(k_test=20)).eval()
n = model.rgb.config.num_queries
print(f"{n} queries per branch, pool of {2 * n}, keep k=20")

scene = generate_scene(SceneSpec(seed=3), 0)
rgb, tir = scene.rgb[None], scene.tir[None]

with torch.no_grad():
    out = model.forward_fused(rgb, tir)
for i, fused in enumerate(out.fused):
    # the RGB half of the pool is the initial queries at stage 0, then the previous k
    n_rgb = n if i == 0 else out.rgb[i - 1].proposals.boxes.shape[1]
    from_tir = int(fused.from_tir(n_rgb).sum())
    print(f"stage {i}: {fused.index.shape[1] - from_tir} selected from RGB, {from_tir} from TIR")

# fresh adapters are the identity map, so fusion starts from plain query exchange
q = torch.randn(1, 4, model.rgb.config.d_model)
print("adapter is identity at init:", torch.equal(model.adapters[0].to_tir(q), q))

# the missing-modality path is the surviving branch alone, bit for bit
with torch.no_grad():
    a = model.forward_missing("tir", tir)[-1].proposals.boxes
    b = model.tir.forward_single(tir)[-1].proposals.boxes
print("missing path equals standalone TIR branch:", torch.equal(a, b))

