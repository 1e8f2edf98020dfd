"""Shared desk-scale ablation protocol for the acceptance suite.

Five prompt-selection configurations are scored on the same synthetic
scenes with the oracle decoder: the full system, top-k with negatives but
no threshold, top-k only, a single argmax point, and the full system with
the cycle penalty disabled. Thresholds come from the training view with
untrained pass-through parameters, so the protocol isolates the sampling
machinery. Mean mIoU per configuration is the reported statistic.
"""

import numpy as np

from cyclematch import cycleselect as cs
from cyclematch.bridge import OracleMaskDecoder
from cyclematch.errors import DegenerateMask, EmptyForeground
from cyclematch.metrics import assemble_semantic, miou_nb
from cyclematch.multiscale import multiscale_cycleselect
from cyclematch.params import CycleParams
from cyclematch.prompts import compute_threshold, sample_prompts, single_point_mode
from cyclematch.synth import SynthConfig, synth_scene
from cyclematch.tensor import resize_nearest
from cyclematch.training import combine_masks

ABLATION_SCENE = dict(
    num_classes=3,
    extent=32,
    d_enc=24,
    noise=2.4,
    distractor_level=0.3,
    distractor_alpha=0.9,
    distractor_noise=0.5,
)

CONFIGS = [
    # name, single_point, negatives, learned threshold, lambda_scc
    ("full", False, True, True, 2.0),
    ("multi_neg", False, True, False, 2.0),
    ("multi_only", False, False, False, 2.0),
    ("single_point", True, False, False, 2.0),
    ("scc_off", False, True, True, 0.0),
]

NO_THRESHOLD = -1e9


def run_scene(seed: int, scene_kwargs: dict, k: int = 10) -> dict:
    cfg = SynthConfig(**scene_kwargs)
    scene = synth_scene(seed, cfg)
    n_classes = cfg.num_classes
    params = CycleParams.identity(n_classes, scene.ref.channels)
    d1 = scene.ref.extents[0]
    h, w = scene.test_mask.shape

    thresholds = np.zeros(n_classes)
    for c in range(1, n_classes + 1):
        try:
            s_train = multiscale_cycleselect(
                scene.ref, scene.train, scene.ref_mask, c, params
            )
            b1 = cs.binarize_mask(resize_nearest(scene.train_mask, d1, d1), c)
            thresholds[c - 1] = compute_threshold(s_train, b1)
        except (EmptyForeground, DegenerateMask):
            pass

    out = {}
    for name, single, negatives, learned_thr, lam in CONFIGS:
        decoder = OracleMaskDecoder(scene.test_mask)
        combined = np.full((n_classes, h, w), -10.0)
        scores = np.full(n_classes, -1e30)
        for c in range(1, n_classes + 1):
            try:
                s = multiscale_cycleselect(
                    scene.ref, scene.test, scene.ref_mask, c, params, lam_scc=lam
                )
            except EmptyForeground:
                continue
            if single:
                ps = single_point_mode(s, (w, h), class_id=c)
            else:
                thr = thresholds[c - 1] if learned_thr else NO_THRESHOLD
                ps = sample_prompts(
                    s, thr, k, (w, h), class_id=c, include_negatives=negatives
                )
            if ps.empty:
                continue
            cands = decoder.decode("", ps)
            combined[c - 1] = combine_masks(cands, params.w_mask[c - 1])
            scores[c - 1] = float(s.max())
        pred = assemble_semantic(combined, scores)
        out[name] = miou_nb(pred, scene.test_mask, n_classes).miou_nb
    return out


def run_ablation(n_seeds: int = 50, scene_kwargs: dict | None = None) -> dict:
    scene_kwargs = scene_kwargs or ABLATION_SCENE
    sums = {name: 0.0 for name, *_ in CONFIGS}
    for seed in range(n_seeds):
        result = run_scene(seed, scene_kwargs)
        for name, value in result.items():
            sums[name] += value
    return {name: sums[name] / n_seeds for name in sums}


if __name__ == "__main__":
    import json
    import os

    means = run_ablation()
    path = os.path.join(os.path.dirname(__file__), "fixtures", "ablation_margins.json")
    with open(path, "w") as fh:
        json.dump({"n_seeds": 50, "scene": ABLATION_SCENE, "mean_miou": means}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(means, indent=1))
