"""End-to-end acceptance checks on the synthetic complementary dataset.

The training-based criteria share one desk-scale pipeline (session fixture);
the property criteria run their own randomized instances. Each test carries a
``criterion`` marker and the conftest prints one pass/fail line per criterion.
"""

import math
import time

import numpy as np
import pytest
import torch

from mdqf.datagen import SceneSpec, generate_dataset, single_modality
from mdqf.detector import BranchDetector, DetectorConfig, ProposalSet
from mdqf.evaluation import (
    COCO_THRESHOLDS,
    coco_map,
    run_decoupled_update,
    run_fusion_comparison,
    run_k_ablation,
    run_robustness,
)
from mdqf.fusion import select_topk
from mdqf.geometry import nms
from mdqf.model import MdqfModel
from mdqf.training import (
    Target,
    TrainConfig,
    assignment_from_cost,
    frozen_parameters,
    joint_loss,
    train_image_baseline,
    train_joint,
    train_separate,
)

from .helpers import tiny_images, tiny_model
from .oracles import brute_force_ap, brute_force_assignment_cost, reference_nms, topk_sort_oracle
from .test_evaluation import hand_example, random_instance

pytestmark = pytest.mark.slow

SEPARATE = dict(max_steps=800, lr=1e-3, batch_size=4, clip_norm=0.1, hflip=True)
JOINT = dict(max_steps=400, lr=5e-4, batch_size=4, clip_norm=0.1, hflip=True)


def desk_pipeline(seed=0):
    """Separate then joint training on 200 pairs, evaluated on 50 held-out pairs."""
    torch.set_num_threads(1)
    start = time.perf_counter()
    spec = SceneSpec(seed=seed)
    train, test = generate_dataset(spec, 200), generate_dataset(spec, 50, start=10000)
    branches = {}
    for i, mod in enumerate(("rgb", "tir")):
        branches[mod] = BranchDetector(DetectorConfig(modality=mod, seed=seed + i))
        train_separate(branches[mod], single_modality(train, mod), TrainConfig(seed=seed, **SEPARATE))
    model = MdqfModel(BranchDetector(branches["rgb"].config), BranchDetector(branches["tir"].config))
    for mod in ("rgb", "tir"):
        model.load_branch(mod, branches[mod])
    frozen_before = {k: v.detach().clone() for k, v in frozen_parameters(model).items()}
    train_joint(model, train, TrainConfig(seed=seed, **JOINT))
    rows = run_fusion_comparison(model, test, branches)
    return dict(train=train, test=test, branches=branches, model=model, rows=rows,
                frozen_before=frozen_before, seconds=time.perf_counter() - start,
                post_joint=run_fusion_comparison(model, test))


@pytest.fixture(scope="session")
def desk():
    return desk_pipeline()


def by_method(rows):
    return {r["method"]: r for r in rows}


# 1. fusion gain -------------------------------------------------------------

@pytest.mark.criterion(1)
def test_fusion_gain(desk):
    rows = by_method(desk["rows"])
    print("\n", desk["rows"], "\npost-joint branches:", desk["post_joint"][:2], f"\n{desk['seconds']:.0f}s")
    fused = rows["mdqf"]["mAP50"]
    for mod in ("rgb", "tir"):
        single = rows[f"branch-{mod}"]["mAP50"]
        assert fused >= single + 5, (mod, fused, single)
        assert single < 75, (mod, single)


@pytest.mark.criterion(1)
def test_fusion_gain_runtime(desk):
    assert desk["seconds"] <= 600


# 2. degraded-modality robustness -------------------------------------------

@pytest.fixture(scope="session")
def robustness(desk):
    torch.set_num_threads(1)
    image = BranchDetector(DetectorConfig(modality="rgb", seed=2))
    train_image_baseline(image, desk["train"], TrainConfig(**SEPARATE))
    rows = run_robustness(desk["model"], desk["test"], image_baseline=image, factor=0.0)
    print("\n", rows)
    return {(r["method"], r["path"]): r for r in rows}


@pytest.mark.criterion(2)
def test_degraded_fused_keeps_surviving_branch(robustness):
    fused, missing = robustness[("mdqf", "fused")], robustness[("mdqf", "missing")]
    # column name is the surviving modality
    for col in ("TIR-only", "RGB-only"):
        assert fused[col] >= 0.85 * missing[col], (col, fused[col], missing[col])


@pytest.mark.criterion(2)
def test_image_fusion_degrades_twice_as_much(robustness):
    fused, image = robustness[("mdqf", "fused")], robustness[("image-fusion", "fused")]
    for col in ("TIR-only drop%", "RGB-only drop%"):
        # drops are negative percentages
        assert image[col] < 0 and -image[col] >= 2 * -fused[col], (col, image[col], fused[col])


# 3. missing-modality equality ----------------------------------------------

@pytest.mark.criterion(3)
@pytest.mark.parametrize("modality,channels", [("rgb", 3), ("tir", 1)])
def test_missing_equals_single(modality, channels):
    model = MdqfModel()
    branch = model.branch(modality)
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.uniform(0, 1, (1, 64, 64, channels)).astype(np.float32)
        for a, b in zip(model.forward_missing(modality, x), branch.forward_single(x)):
            assert torch.equal(a.queries, b.queries)
            assert torch.equal(a.proposals.boxes, b.proposals.boxes)
            assert torch.equal(a.proposals.logits, b.proposals.logits)


# 4. freeze contract ----------------------------------------------------------

@pytest.mark.criterion(4)
def test_joint_leaves_backbone_and_encoder_bitwise(desk):
    after = frozen_parameters(desk["model"])
    assert after.keys() == desk["frozen_before"].keys() and len(after) > 0
    for name, before in desk["frozen_before"].items():
        a, b = before.numpy(), after[name].detach().numpy()
        assert a.tobytes() == b.tobytes(), name


# 5. top-k oracle ------------------------------------------------------------

def one_class(scores):
    logits = torch.logit(torch.as_tensor(scores, dtype=torch.float64))[None, :, None]
    return ProposalSet(torch.zeros(1, len(scores), 4, dtype=torch.float64), logits)


@pytest.mark.criterion(5)
def test_topk_matches_sort_oracle():
    rng = np.random.default_rng(5)
    for trial in range(1000):
        n = int(rng.integers(1, 51))
        if trial % 2:
            scores = rng.integers(1, 6, (2, n)) / 6  # coarse grid: many ties, across branches too
        else:
            scores = rng.uniform(0.01, 0.99, (2, n))
        p_rgb, p_tir = one_class(scores[0]), one_class(scores[1])
        # the oracle ranks the scores exactly as the proposal sets expose them
        s_rgb, s_tir = p_rgb.scores[0].tolist(), p_tir.scores[0].tolist()
        pooled = np.array(s_rgb + s_tir)
        pooled_logits = torch.cat([p_rgb.logits[0], p_tir.logits[0]])
        for k in range(1, 2 * n + 1):
            fused, index = select_topk(p_rgb, p_tir, k)
            expect = topk_sort_oracle(s_rgb, s_tir, k)
            assert index[0].tolist() == expect
            assert sorted(pooled[index[0].numpy()].tolist()) == sorted(pooled[expect].tolist())
            # selected rows are exact copies, so their logits match bit for bit
            assert torch.equal(fused.logits[0], pooled_logits[expect])


# 6. gradient check ----------------------------------------------------------

@pytest.mark.criterion(6)
def test_joint_loss_gradients_match_finite_differences():
    torch.set_num_threads(1)
    # gradient blocking through the box refinement is a training choice, not part of the loss
    model = tiny_model(k=6, detach_refine=False)
    rgb, tir = tiny_images(2, 3), tiny_images(2, 1, 1)
    targets = [Target(torch.tensor([[0.3, 0.3, 0.2, 0.2]], dtype=torch.float64), torch.tensor([1])),
               Target(torch.tensor([[0.6, 0.6, 0.3, 0.3], [0.2, 0.7, 0.2, 0.1]], dtype=torch.float64),
                      torch.tensor([0, 2]))]

    def loss():
        return joint_loss(model.forward_fused(rgb, tir), targets, num_stages=2)

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    eps, worst, checked = 1e-6, 0.0, 0
    for name, p in model.named_parameters():
        if not (name.startswith("adapters.") or ".decoders." in name or ".heads." in name):
            continue
        flat = p.data.view(-1)
        grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        for j in rng.choice(flat.numel(), min(3, flat.numel()), replace=False):
            old = flat[j].item()
            with torch.no_grad():
                flat[j] = old + eps
                up = loss().item()
                flat[j] = old - eps
                down = loss().item()
                flat[j] = old
            fd, an = (up - down) / (2 * eps), grad[j].item()
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
            checked += 1
    print(f"\nworst relative error {worst:.2e} over {checked} entries")
    assert checked > 100 and worst <= 1e-3


# 7. Hungarian optimality ----------------------------------------------------

@pytest.mark.criterion(7)
def test_hungarian_matches_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(500):
        n, m = (int(v) for v in rng.integers(1, 8, 2))
        # multiples of 1/64 sum exactly in float64, so "exact" is meaningful
        cost = rng.integers(0, 256, (n, m)) / 64
        a = assignment_from_cost(cost)
        assert len(a.pred) == min(n, m)
        assert math.fsum(cost[a.pred, a.gt]) == brute_force_assignment_cost(cost.tolist())


# 8. NMS and mAP oracles ----------------------------------------------------

@pytest.mark.criterion(8)
def test_nms_matches_reference():
    rng = np.random.default_rng(8)
    for _ in range(500):
        n = int(rng.integers(0, 40))
        boxes = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.4, (n, 2))])
        scores = rng.choice(np.linspace(0, 1, 11), n)
        classes = rng.integers(0, 3, n)
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        assert nms(boxes, scores, thr, classes) == reference_nms(boxes, scores, thr, classes)


@pytest.mark.criterion(8)
def test_map_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(200):
        dets, gts = random_instance(rng)
        got = coco_map(dets, gts, 2)
        mean, at50 = brute_force_ap(dets, gts, 2, COCO_THRESHOLDS)
        assert abs(got.map - mean) <= 1e-9 and abs(got.map50 - at50) <= 1e-9


@pytest.mark.criterion(8)
def test_hand_example_ap50():
    dets, gt = hand_example()
    assert coco_map(dets, gt, 1, iou_thresholds=[0.5]).map50 == 0.5


# 9. decoupled optimization ------------------------------------------------

@pytest.mark.criterion(9)
def test_decoupled_update(desk):
    torch.set_num_threads(1)
    half = desk["train"][:100]
    initial = MdqfModel()
    for mod in ("rgb", "tir"):
        branch = BranchDetector(initial.branch(mod).config)
        train_separate(branch, single_modality(half, mod), TrainConfig(**{**SEPARATE, "max_steps": 400}))
        initial.load_branch(mod, branch)
    joint = TrainConfig(**{**JOINT, "max_steps": 200})
    train_joint(initial, half, joint)
    # the fresh branches are the pipeline's separately trained ones, fit on all 200 scenes
    rows, _ = run_decoupled_update(initial, None, None, half, desk["test"], joint,
                                   high_branches=desk["branches"], swaps=("swap-both",))
    print("\n", rows)
    init, swapped = rows
    assert swapped["swap untouched"] is True
    assert swapped["mAP50"] >= init["mAP50"]


# 10. post-processing ablation ---------------------------------------------

@pytest.mark.criterion(10)
def test_nms_beats_topk(desk):
    rows = run_k_ablation(desk["model"], desk["test"], modes=("nms", "topk"))
    print("\n", rows)
    got = {r["postproc"]: r["mAP50"] for r in rows}
    assert got["nms"] >= got["topk"]


# 11. determinism ------------------------------------------------------------

@pytest.mark.criterion(11)
def test_pipeline_is_deterministic(desk):
    again = desk_pipeline()
    assert again["rows"] == desk["rows"]
    assert again["post_joint"] == desk["post_joint"]
    a, b = desk["model"].state_dict(), again["model"].state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
