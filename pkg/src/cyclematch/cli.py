"""Command-line pipeline: scenes, matching, prompts, training, segmentation.

    cyclematch <command> --config <json> [--seed N] [--out DIR] [overrides]

Commands write their artifacts (CSTF-1 tensors, JSON, CSV, PNG figures)
atomically into --out and are deterministic given (config, seed); the one
exception is the measured milliseconds column of the bench CSV.

Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 numerics error, 4 decoder-bridge error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import report
from .bridge import BridgeError, DecoderBridge, OracleMaskDecoder
from .errors import (
    ArgumentError,
    CycleMatchError,
    DegenerateMask,
    EmptyForeground,
    FormatError,
    NumericsError,
)
from .metrics import assemble_semantic, miou_nb
from .multiscale import ScaleSet, multiscale_cycleselect
from .params import CycleParams
from .prompts import PromptSet, sample_prompts, single_point_mode
from .synth import SynthConfig, scene_manifest, synth_scene
from .tensor import read_tensor, resize_bilinear, write_tensor
from .training import (
    MaskTrainConfig,
    TrainView,
    WarmupConfig,
    combine_masks,
    train_mask_weights,
    train_warmup,
)

_SYNTH_KEYS = {
    "num_classes", "extent", "num_scales", "d_enc", "noise",
    "distractor_level", "distractor_alpha", "distractor_noise",
    "blob_area", "jitter",
}
_PATH_KEYS = {
    "scene", "ref_features", "test_features", "ref_mask", "test_mask",
    "train_features", "train_mask", "params", "test_image",
}


@dataclass
class RunConfig:
    k: int = 10
    n_points: int = 16
    lambda_scc: float = 2.0
    lambda_l1: float = 1.0
    seed: int = 0
    num_classes: int = 3
    scales: list = field(default_factory=list)  # d_match per scale; [] = native
    decoder: str = "oracle"
    single_point: bool = False
    no_negatives: bool = False
    no_scc: bool = False
    fixed_threshold: float | None = None
    warmup_epochs: int = 200
    warmup_lr: float = 1e-2
    mask_epochs: int = 100
    mask_lr: float = 5.0
    d_fpn: int = 32
    d_proj: int = 16
    paths: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ArgumentError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**obj)
            cfg.validate()
        except TypeError as exc:
            raise ArgumentError(f"bad config value: {exc}") from exc
        return cfg

    def validate(self) -> None:
        if self.k < 1 or self.n_points < 1:
            raise ArgumentError("k and n_points must be >= 1")
        if self.lambda_scc < 0:
            raise ArgumentError("lambda_scc must be nonnegative")
        if self.num_classes < 1:
            raise ArgumentError("num_classes must be >= 1")
        if not isinstance(self.scales, list) or any(
            not isinstance(d, int) or d < 1 for d in self.scales
        ):
            raise ArgumentError("scales must be a list of extents >= 1")
        if not (self.decoder == "oracle" or self.decoder.startswith("extern:")):
            raise ArgumentError("decoder must be 'oracle' or 'extern:<command>'")
        bad = set(self.synth) - _SYNTH_KEYS
        if bad:
            raise ArgumentError(f"unknown synth keys: {sorted(bad)}")
        bad = set(self.paths) - _PATH_KEYS
        if bad:
            raise ArgumentError(f"unknown path keys: {sorted(bad)}")

    @property
    def lam_scc_effective(self) -> float:
        return 0.0 if self.no_scc else self.lambda_scc

    def synth_config(self) -> SynthConfig:
        args = dict(self.synth)
        if args.setdefault("num_classes", self.num_classes) != self.num_classes:
            raise ArgumentError(
                f"synth.num_classes {args['num_classes']} != num_classes {self.num_classes}"
            )
        try:
            return SynthConfig(**args)
        except TypeError as exc:
            raise ArgumentError(f"bad synth config: {exc}") from exc


def _write_text(path, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(x) for x in row))
    _write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# data loading


def _load_scale_set(paths: list, target_extents: list) -> ScaleSet:
    if target_extents and len(target_extents) != len(paths):
        raise ArgumentError(
            f"config names {len(target_extents)} scales but {len(paths)} feature files given"
        )
    maps = []
    for i, p in enumerate(paths):
        arr = read_tensor(p)
        if arr.ndim != 3 or arr.dtype != np.float32:
            raise FormatError(f"{p}: expected f32 C x H x W feature map, got {arr.shape} {arr.dtype}")
        if target_extents:
            d = target_extents[i]
            if arr.shape[1:] != (d, d):
                arr = resize_bilinear(arr, d, d)
        maps.append(arr)
    return ScaleSet(maps)


def _load_mask(path) -> np.ndarray:
    arr = read_tensor(path)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"{path}: expected u8 H x W class mask, got {arr.shape} {arr.dtype}")
    return arr


@dataclass
class SceneData:
    ref: ScaleSet
    ref_mask: np.ndarray
    test: ScaleSet
    test_mask: np.ndarray | None
    train: ScaleSet | None = None
    train_mask: np.ndarray | None = None
    image_ref: str = ""


def _load_inputs(cfg: RunConfig, need_train: bool = False) -> SceneData:
    paths = cfg.paths
    if "scene" in paths:
        scene_dir = paths["scene"]
        with open(os.path.join(scene_dir, "scene.json")) as fh:
            manifest = json.load(fh)
        f = manifest["files"]

        def tensors(names):
            return [os.path.join(scene_dir, n) for n in names]

        ref = _load_scale_set(tensors(f["ref_features"]), cfg.scales)
        test = _load_scale_set(tensors(f["test_features"]), cfg.scales)
        data = SceneData(
            ref=ref,
            ref_mask=_load_mask(os.path.join(scene_dir, f["ref_mask"])),
            test=test,
            test_mask=_load_mask(os.path.join(scene_dir, f["test_mask"])),
            image_ref=os.path.join(scene_dir, f["test_mask"]),
        )
        if need_train:
            data.train = _load_scale_set(tensors(f["train_features"]), cfg.scales)
            data.train_mask = _load_mask(os.path.join(scene_dir, f["train_mask"]))
        return data
    required = {"ref_features", "test_features", "ref_mask"}
    missing = required - set(paths)
    if missing:
        raise ArgumentError(f"config paths missing {sorted(missing)} (or give paths.scene)")
    data = SceneData(
        ref=_load_scale_set(paths["ref_features"], cfg.scales),
        ref_mask=_load_mask(paths["ref_mask"]),
        test=_load_scale_set(paths["test_features"], cfg.scales),
        test_mask=_load_mask(paths["test_mask"]) if "test_mask" in paths else None,
        image_ref=paths.get("test_image", paths.get("test_mask", "")),
    )
    if need_train:
        if "train_features" not in paths or "train_mask" not in paths:
            raise ArgumentError("training needs paths.train_features and paths.train_mask")
        data.train = _load_scale_set(paths["train_features"], cfg.scales)
        data.train_mask = _load_mask(paths["train_mask"])
    return data


def _load_params(cfg: RunConfig, data: SceneData) -> CycleParams:
    if "params" in cfg.paths:
        params = CycleParams.load(cfg.paths["params"])
        if params.num_classes != cfg.num_classes:
            raise ArgumentError(
                f"params hold {params.num_classes} classes, config says {cfg.num_classes}"
            )
        return params
    return CycleParams.identity(cfg.num_classes, data.ref.channels)


def _make_decoder(cfg: RunConfig, data: SceneData):
    if cfg.decoder == "oracle":
        if data.test_mask is None:
            raise ArgumentError("oracle decoder needs paths.test_mask")
        return OracleMaskDecoder(data.test_mask)
    return DecoderBridge(cfg.decoder[len("extern:"):])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: str, args) -> int:
    scene = synth_scene(cfg.seed, cfg.synth_config())
    files: dict = {}
    for name in ("ref", "train", "test"):
        ss: ScaleSet = getattr(scene, name)
        names = []
        for s, m in enumerate(ss.maps):
            fn = f"{name}_s{s + 1}.cstf"
            write_tensor(os.path.join(out, fn), m)
            names.append(fn)
        files[f"{name}_features"] = names
        fn = f"{name}_mask.cstf"
        write_tensor(os.path.join(out, fn), getattr(scene, f"{name}_mask"))
        files[f"{name}_mask"] = fn
    _write_text(os.path.join(out, "scene.json"), scene_manifest(scene, files))
    report.save_label_mask(
        os.path.join(out, "scene_masks.png"),
        np.concatenate([scene.ref_mask, scene.test_mask], axis=1),
        scene.config.num_classes,
        title="reference | test",
    )
    print(f"scene seed={cfg.seed} classes={scene.config.num_classes} -> {out}")
    return 0


def _match_maps(cfg: RunConfig, data: SceneData, params: CycleParams) -> dict:
    maps = {}
    for c in range(1, cfg.num_classes + 1):
        try:
            maps[c] = multiscale_cycleselect(
                data.ref, data.test, data.ref_mask, c, params,
                n_points=cfg.n_points, lam_scc=cfg.lam_scc_effective,
            )
        except EmptyForeground:
            maps[c] = None
    return maps


def cmd_match(cfg: RunConfig, out: str, args) -> int:
    data = _load_inputs(cfg)
    params = _load_params(cfg, data)
    maps = _match_maps(cfg, data, params)
    rows = []
    for c, s in maps.items():
        if s is None:
            rows.append([c, "absent", "", "", ""])
            continue
        write_tensor(os.path.join(out, f"sim_class_{c}.cstf"), s.astype(np.float32))
        report.save_heatmap(
            os.path.join(out, f"sim_class_{c}.png"), s, title=f"class {c} similarity"
        )
        flat_arg = int(np.argmax(s))
        rows.append([c, "present", repr(float(s.min())), repr(float(s.max())), flat_arg])
    _write_csv(
        os.path.join(out, "similarity_stats.csv"),
        ["class", "status", "min", "max", "argmax_flat"],
        rows,
    )
    print(f"matched {sum(1 for s in maps.values() if s is not None)}/{cfg.num_classes} classes -> {out}")
    return 0


def _prompts_for_class(cfg: RunConfig, params: CycleParams, c: int, s_map, image_size) -> PromptSet:
    if s_map is None:
        return PromptSet(class_id=c, image_size=tuple(image_size))
    if cfg.single_point:
        return single_point_mode(s_map, image_size, class_id=c)
    if cfg.fixed_threshold is not None:
        threshold = cfg.fixed_threshold
    else:
        threshold = float(params.thresholds[c - 1])
    return sample_prompts(
        s_map, threshold, cfg.k, image_size, class_id=c,
        include_negatives=not cfg.no_negatives,
    )


def _image_size(cfg: RunConfig, data: SceneData) -> tuple:
    if data.test_mask is not None:
        h, w = data.test_mask.shape
    else:
        d = data.test.extents[0]
        h = w = d
    return (w, h)


def cmd_prompts(cfg: RunConfig, out: str, args) -> int:
    data = _load_inputs(cfg)
    params = _load_params(cfg, data)
    maps = _match_maps(cfg, data, params)
    image_size = _image_size(cfg, data)
    n_present = 0
    for c, s_map in maps.items():
        ps = _prompts_for_class(cfg, params, c, s_map, image_size)
        n_present += 0 if ps.empty else 1
        _write_json(os.path.join(out, f"prompts_class_{c}.json"), ps.to_json_dict())
    print(f"prompt sets for {n_present}/{cfg.num_classes} present classes -> {out}")
    return 0


def _train_views(cfg: RunConfig, data: SceneData) -> list:
    if data.train is None or data.train_mask is None:
        raise ArgumentError("training requires the scene's train view")
    return [
        TrainView(
            ref=data.ref, ref_mask=data.ref_mask,
            test=data.train, test_mask=data.train_mask,
            image_ref=data.image_ref,
        )
    ]


def cmd_train_warmup(cfg: RunConfig, out: str, args) -> int:
    data = _load_inputs(cfg, need_train=True)
    if "params" in cfg.paths:
        params = CycleParams.load(cfg.paths["params"])
    else:
        params = CycleParams.random_init(
            cfg.num_classes, data.ref.channels, cfg.d_fpn, cfg.d_proj, seed=cfg.seed
        )
    wcfg = WarmupConfig(
        epochs=cfg.warmup_epochs, lr=cfg.warmup_lr,
        lam_scc=cfg.lam_scc_effective, lam_l1=cfg.lambda_l1, n_points=cfg.n_points,
    )
    trained, trace = train_warmup(_train_views(cfg, data), params, wcfg)
    trained.save(os.path.join(out, "params.json"))
    _write_csv(
        os.path.join(out, "training_curve.csv"),
        ["epoch", "loss"],
        [[i + 1, repr(v)] for i, v in enumerate(trace)],
    )
    if trace:
        report.save_curve(os.path.join(out, "training_curve.png"), trace, title="warmup loss")
        print(f"warmup {len(trace)} epochs, loss {trace[0]:.4f} -> {trace[-1]:.4f}; params -> {out}")
    else:
        print(f"warmup 0 epochs; thresholds fitted; params -> {out}")
    return 0


def cmd_train_maskweights(cfg: RunConfig, out: str, args) -> int:
    data = _load_inputs(cfg, need_train=True)
    if "params" not in cfg.paths:
        raise ArgumentError("train-maskweights needs paths.params from the warmup stage")
    params = CycleParams.load(cfg.paths["params"])
    mcfg = MaskTrainConfig(
        epochs=cfg.mask_epochs, lr=cfg.mask_lr, k=cfg.k,
        n_points=cfg.n_points, lam_scc=cfg.lam_scc_effective,
    )
    if cfg.decoder == "oracle":
        factory = lambda view: OracleMaskDecoder(view.test_mask)
        trained = train_mask_weights(_train_views(cfg, data), params, factory, mcfg)
    else:
        with DecoderBridge(cfg.decoder[len("extern:"):]) as bridge:
            trained = train_mask_weights(
                _train_views(cfg, data), params, lambda view: bridge, mcfg
            )
    trained.save(os.path.join(out, "params.json"))
    print(f"mask weights trained -> {out}")
    return 0


def cmd_segment(cfg: RunConfig, out: str, args) -> int:
    data = _load_inputs(cfg)
    params = _load_params(cfg, data)
    maps = _match_maps(cfg, data, params)
    image_size = _image_size(cfg, data)
    w, h = image_size
    decoder = _make_decoder(cfg, data)
    combined = np.full((cfg.num_classes, h, w), -10.0, dtype=np.float64)
    scores = np.full(cfg.num_classes, -np.inf)
    summary = {}
    try:
        for c in range(1, cfg.num_classes + 1):
            ps = _prompts_for_class(cfg, params, c, maps[c], image_size)
            _write_json(os.path.join(out, f"prompts_class_{c}.json"), ps.to_json_dict())
            if ps.empty:
                summary[str(c)] = {"present": False, "positives": 0, "negatives": 0}
                continue
            cands = decoder.decode(data.image_ref, ps)
            combined[c - 1] = combine_masks(cands, params.w_mask[c - 1])
            scores[c - 1] = float(np.max(maps[c]))
            summary[str(c)] = {
                "present": True,
                "positives": len(ps.positives),
                "negatives": len(ps.negatives),
                "max_similarity": float(np.max(maps[c])),
            }
            write_tensor(
                os.path.join(out, f"logits_class_{c}.cstf"), combined[c - 1].astype(np.float32)
            )
            write_tensor(
                os.path.join(out, f"mask_class_{c}.cstf"),
                (combined[c - 1] > 0).astype(np.uint8),
            )
    finally:
        decoder.close()
    pred = assemble_semantic(combined, np.where(np.isfinite(scores), scores, -1e30))
    write_tensor(os.path.join(out, "pred_mask.cstf"), pred)
    _write_json(os.path.join(out, "segment_summary.json"), summary)
    report.save_label_mask(
        os.path.join(out, "pred_mask.png"), pred, cfg.num_classes, title="predicted classes"
    )
    present = sum(1 for v in summary.values() if v["present"])
    print(f"segmented {present}/{cfg.num_classes} classes -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, out: str, args) -> int:
    pred = _load_mask(args.pred)
    gt = _load_mask(args.gt)
    res = miou_nb(pred, gt, cfg.num_classes)
    _write_json(os.path.join(out, "eval_report.json"), res.to_json_dict())
    rows = [
        [c, repr(res.per_class_iou[c]), repr(res.per_class_dice[c])]
        for c in sorted(res.per_class_iou)
    ]
    rows.append(["mean", repr(res.miou_nb), repr(res.mdice)])
    _write_csv(os.path.join(out, "eval_report.csv"), ["class", "iou", "dice"], rows)
    if res.per_class_iou:
        report.save_metrics_bars(
            os.path.join(out, "eval_report.png"),
            res.per_class_iou, res.per_class_dice,
            title=f"mIoU {res.miou_nb:.3f}  mDice {res.mdice:.3f}",
        )
    print(f"mIoU_nb={res.miou_nb:.4f} mDice={res.mdice:.4f} skipped={res.skipped_classes}")
    return 0


def cmd_bench(cfg: RunConfig, out: str, args) -> int:
    from . import cycleselect as cs

    d_match = args.d_match
    d_enc = args.d_enc
    block = args.block
    n = d_match * d_match
    rng = np.random.default_rng(cfg.seed)
    t_rows = rng.standard_normal((n, d_enc)).astype(np.float32)
    r_rows = rng.standard_normal((n, d_enc)).astype(np.float32)
    t_rows /= np.linalg.norm(t_rows, axis=1, keepdims=True)
    r_rows /= np.linalg.norm(r_rows, axis=1, keepdims=True)

    t0 = time.perf_counter()
    s_blocked = cs.rematch_scores_blocked(t_rows, r_rows, block)
    blocked_ms = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    s_naive = cs.rematch_scores_naive(t_rows, r_rows)
    naive_ms = (time.perf_counter() - t0) * 1e3
    diff = float(np.abs(s_blocked - s_naive).max())
    arg_blocked = cs.rematch_argmax(
        t_rows.T.reshape(d_enc, d_match, d_match),
        r_rows.T.reshape(d_enc, d_match, d_match),
        block,
    )
    arg_naive = np.argmax(s_naive, axis=1)
    if not np.array_equal(arg_blocked, arg_naive):
        raise NumericsError("blocked and naive rematch argmax disagree")
    _write_csv(
        os.path.join(out, "bench.csv"),
        ["d_match", "d_enc", "kernel", "millis", "max_abs_diff"],
        [
            [d_match, d_enc, "blocked", f"{blocked_ms:.3f}", repr(diff)],
            [d_match, d_enc, "naive", f"{naive_ms:.3f}", repr(diff)],
        ],
    )
    print(
        f"rematch {n}x{n}x{d_enc}: blocked {blocked_ms:.1f} ms, "
        f"naive {naive_ms:.1f} ms, max|diff| {diff:.2e}"
    )
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--k", type=int, help="override prompt count")
    p.add_argument("--lambda-scc", type=float, dest="lambda_scc")
    p.add_argument("--decoder", help="oracle | extern:<command>")
    p.add_argument("--params", help="override paths.params")
    p.add_argument("--scene", help="override paths.scene")
    p.add_argument("--single-point", action="store_true", default=None)
    p.add_argument("--no-negatives", action="store_true", default=None)
    p.add_argument("--no-scc", action="store_true", default=None)
    p.add_argument("--fixed-threshold", type=float, dest="fixed_threshold")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cyclematch",
        description="one-shot segmentation prompting via cycle-consistent matching",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    specs = [
        ("synth", cmd_synth, "generate a synthetic scene"),
        ("match", cmd_match, "compute per-class similarity maps"),
        ("prompts", cmd_prompts, "emit decoder point prompts"),
        ("train-warmup", cmd_train_warmup, "stage 1: projectors/fpn/scale weights"),
        ("train-maskweights", cmd_train_maskweights, "stage 2: candidate mask weights"),
        ("segment", cmd_segment, "end-to-end segmentation"),
        ("eval", cmd_eval, "score a prediction against ground truth"),
        ("bench", cmd_bench, "time the rematch kernels"),
    ]
    for name, fn, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name == "train-warmup":
            p.add_argument("--epochs", type=int, help="override warmup epochs")
        if name == "eval":
            p.add_argument("--pred", required=True)
            p.add_argument("--gt", required=True)
            p.add_argument("--num-classes", type=int, dest="num_classes")
        if name == "bench":
            p.add_argument("--d-match", type=int, default=64, dest="d_match")
            p.add_argument("--d-enc", type=int, default=256, dest="d_enc")
            p.add_argument("--block", type=int, default=64)
    return ap


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for name in ("seed", "k", "lambda_scc", "decoder", "fixed_threshold"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    for name in ("single_point", "no_negatives", "no_scc"):
        if getattr(args, name, None):
            setattr(cfg, name, True)
    if getattr(args, "num_classes", None) is not None:
        cfg.num_classes = args.num_classes
    if getattr(args, "epochs", None) is not None:
        cfg.warmup_epochs = args.epochs
    if getattr(args, "params", None) is not None:
        cfg.paths["params"] = args.params
    if getattr(args, "scene", None) is not None:
        cfg.paths["scene"] = args.scene
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(RunConfig.from_json(args.config), args)
        os.makedirs(args.out, exist_ok=True)
        return args.fn(cfg, args.out, args)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BridgeError as exc:
        print(f"bridge error: {exc}", file=sys.stderr)
        return 4
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return 3
    except (FormatError, DegenerateMask, EmptyForeground, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except CycleMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
