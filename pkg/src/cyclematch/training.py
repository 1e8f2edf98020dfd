"""Two-stage one-shot training.

Stage 1 (warmup) trains the pyramid laterals, the per-class projectors and
the per-class scale weights with a feature-similarity contrastive loss plus
an L1 loss between the aggregated similarity map and the ground-truth mask.
Stage 2 freezes everything and trains only the per-class candidate-mask
weights with an equally weighted Dice + BCE loss on decoder outputs.

All arithmetic here runs in float64; parameters are cast back to float32
when stored. Gradients are analytic and hand-derived: at every max/argmax
the gradient flows only through the attained element (ties toward the
smallest index), and the piecewise-constant structures of the forward pass
(aggregation branch choices, cycle masks, sampled points) are treated as
constants. A central finite-difference oracle is provided for verification.

Optimization is plain fixed-step gradient descent over views and classes in
a fixed order, so runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cycleselect as cs
from .errors import ArgumentError, DegenerateMask, EmptyForeground, NumericsError
from .multiscale import ScaleSet, multiscale_cycleselect
from .params import CycleParams, softnorm
from .prompts import compute_threshold, sample_prompts
from .tensor import (
    NORM_EPS,
    resize_bilinear,
    resize_bilinear_adjoint,
    resize_nearest,
)


@dataclass
class TrainView:
    """A reference image paired with an augmented copy acting as the test."""

    ref: ScaleSet
    ref_mask: np.ndarray
    test: ScaleSet
    test_mask: np.ndarray
    image_ref: str = ""  # handle passed to external decoders

    def __post_init__(self):
        if len(self.ref) != len(self.test):
            raise ArgumentError("ref and test scale counts differ")
        if not (np.asarray(self.test_mask) > 0).any():
            raise ArgumentError("training view's test mask has no foreground")


@dataclass
class WarmupConfig:
    epochs: int = 200
    lr: float = 1e-2
    lam_scc: float = 2.0
    lam_l1: float = 1.0
    n_points: int = 16


@dataclass
class MaskTrainConfig:
    epochs: int = 100
    lr: float = 5.0
    k: int = 10
    n_points: int = 16
    lam_scc: float = 2.0


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(h_test: np.ndarray, m_test: np.ndarray, targets: np.ndarray) -> float:
    """Pull foreground cells toward the targets, push the worst background cell.

    term1 = 0.5 * (1 - mean over every (foreground cell, target row) cosine)
    term2 = 0.5 * (max over every (background cell, target row) cosine)

    ``h_test`` is the projected, normalized test map (C x d x d); ``m_test``
    the binary test mask at the same extent; ``targets`` the X x C target
    rows. Requires at least one foreground and one background cell.
    """
    flat = h_test.reshape(h_test.shape[0], -1).astype(np.float64)
    fg = np.flatnonzero(m_test.reshape(-1))
    bg = np.flatnonzero(m_test.reshape(-1) == 0)
    if fg.size == 0 or bg.size == 0:
        raise DegenerateMask("contrastive loss needs foreground and background cells")
    t = targets.astype(np.float64)
    term1 = 0.5 * (1.0 - float((t @ flat[:, fg]).mean()))
    term2 = 0.5 * float((t @ flat[:, bg]).max())
    return term1 + term2


def scale_weight_loss(s_agg: np.ndarray, m: np.ndarray) -> float:
    """Mean cell-wise absolute difference between a similarity map and a mask."""
    if s_agg.shape != m.shape:
        raise ArgumentError(f"map {s_agg.shape} != mask {m.shape}")
    return float(np.abs(s_agg.astype(np.float64) - m).mean())


def combine_masks(candidates: np.ndarray, w_row: np.ndarray) -> np.ndarray:
    """Softmax-weighted sum of the three candidate logit grids."""
    cands = np.asarray(candidates, dtype=np.float64)
    if cands.ndim != 3 or cands.shape[0] != 3:
        raise ArgumentError(f"expected 3 x H x W candidates, got {cands.shape}")
    a = softnorm(np.asarray(w_row, dtype=np.float64))
    return np.tensordot(a, cands, axes=1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dice_bce_loss(pred_logits: np.ndarray, gt: np.ndarray) -> float:
    """Equally weighted soft Dice and binary cross-entropy (smoothing 1.0)."""
    z = np.asarray(pred_logits, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if z.shape != g.shape:
        raise ArgumentError(f"pred {z.shape} != gt {g.shape}")
    p = _sigmoid(z)
    dice = 1.0 - (2.0 * (p * g).sum() + 1.0) / (p.sum() + g.sum() + 1.0)
    bce = float((np.logaddexp(0.0, z) - g * z).mean())
    return 0.5 * float(dice) + 0.5 * bce


def _dice_bce_grad(z: np.ndarray, g: np.ndarray) -> np.ndarray:
    p = _sigmoid(z)
    a = 2.0 * (p * g).sum() + 1.0
    b = p.sum() + g.sum() + 1.0
    d_dice_dp = -(2.0 * g * b - a) / (b * b)
    d_bce_dz = (p - g) / z.size
    return 0.5 * d_dice_dp * p * (1.0 - p) + 0.5 * d_bce_dz


# ---------------------------------------------------------------------------
# warmup forward/backward


def _unitize_cols(m: np.ndarray):
    """Normalize each column to unit length; zero columns below NORM_EPS."""
    norms = np.sqrt((m * m).sum(axis=0))
    guarded = norms < NORM_EPS
    safe = np.where(guarded, 1.0, norms)
    out = m / safe[None, :]
    out[:, guarded] = 0.0
    return out, norms, guarded


def _unitize_cols_bwd(d_out, out, norms, guarded):
    dots = (out * d_out).sum(axis=0)
    d_in = (d_out - out * dots[None, :]) / np.where(guarded, 1.0, norms)[None, :]
    d_in[:, guarded] = 0.0
    return d_in


@dataclass
class WarmupSlice:
    """The float64 parameter slice touched by one (view, class) warmup step."""

    fpn: list          # S x (d_fpn, d_enc_s)
    w_map: list        # S x (d_proj, d_fpn), class-specific
    w_feat: list       # S x (d_proj, d_fpn), class-specific
    theta: np.ndarray  # (S,) scale-weight logits

    def zeros_like(self) -> "WarmupSlice":
        return WarmupSlice(
            fpn=[np.zeros_like(m) for m in self.fpn],
            w_map=[np.zeros_like(m) for m in self.w_map],
            w_feat=[np.zeros_like(m) for m in self.w_feat],
            theta=np.zeros_like(self.theta),
        )

    def flatten(self) -> np.ndarray:
        parts = [m.ravel() for m in self.fpn]
        parts += [m.ravel() for m in self.w_map]
        parts += [m.ravel() for m in self.w_feat]
        parts.append(self.theta.ravel())
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> "WarmupSlice":
        out = self.zeros_like()
        off = 0
        for group_src, group_dst in (
            (self.fpn, out.fpn),
            (self.w_map, out.w_map),
            (self.w_feat, out.w_feat),
        ):
            for i, m in enumerate(group_src):
                n = m.size
                group_dst[i] = vec[off:off + n].reshape(m.shape).copy()
                off += n
        out.theta = vec[off:off + self.theta.size].reshape(self.theta.shape).copy()
        off += self.theta.size
        if off != vec.size:
            raise ArgumentError("flat vector length mismatch")
        return out


def _fpn_forward(maps, laterals):
    """Coarse-to-fine linear pyramid; returns pre-norm stacks plus norm tapes."""
    n_s = len(maps)
    pre = [None] * n_s
    for s in range(n_s - 1, -1, -1):
        a = maps[s].reshape(maps[s].shape[0], -1)
        p = laterals[s] @ a
        if s < n_s - 1:
            d_s = maps[s].shape[1]
            d_next = maps[s + 1].shape[1]
            coarse = pre[s + 1].reshape(-1, d_next, d_next)
            p = p + resize_bilinear(coarse, d_s, d_s).reshape(p.shape)
        pre[s] = p
    normed, tapes = [], []
    for p in pre:
        n, norms, guarded = _unitize_cols(p)
        normed.append(n)
        tapes.append((n, norms, guarded))
    return normed, tapes


def _fpn_backward(d_normed, tapes, maps, d_laterals):
    """Accumulate lateral gradients for one image's pyramid pass."""
    n_s = len(maps)
    carry = None
    for s in range(n_s):
        n, norms, guarded = tapes[s]
        d_p = _unitize_cols_bwd(d_normed[s], n, norms, guarded)
        if carry is not None:
            d_p = d_p + carry
        a = maps[s].reshape(maps[s].shape[0], -1)
        d_laterals[s] += d_p @ a.T
        if s < n_s - 1:
            d_s = maps[s].shape[1]
            d_next = maps[s + 1].shape[1]
            carry = resize_bilinear_adjoint(
                d_p.reshape(-1, d_s, d_s), d_next, d_next
            ).reshape(-1, d_next * d_next)
        else:
            carry = None


def warmup_loss_and_grads(
    sl: WarmupSlice,
    view: TrainView,
    c: int,
    cfg: WarmupConfig,
    want_grads: bool = True,
):
    """Loss (and analytic gradients) of L_sim + lam_l1 * L_scale for class c.

    Raises EmptyForeground when the class is absent from the reference at
    every scale.
    """
    n_s = len(view.ref)
    ref_maps = [m.astype(np.float64) for m in view.ref.maps]
    test_maps = [m.astype(np.float64) for m in view.test.maps]
    extents = view.ref.extents
    d1 = extents[0]

    nr, tapes_r = _fpn_forward(ref_maps, sl.fpn)
    nt, tapes_t = _fpn_forward(test_maps, sl.fpn)

    scales = []  # per-scale tape dicts, aggregation order
    sim_terms = []
    for s in range(n_s):
        d_s = extents[s]
        b_ref = cs.binarize_mask(resize_nearest(view.ref_mask, d_s, d_s), c)
        b_test = cs.binarize_mask(resize_nearest(view.test_mask, d_s, d_s), c)
        q_r = sl.w_feat[s] @ nr[s]
        g_r, qr_norms, qr_guard = _unitize_cols(q_r)
        q_t = sl.w_map[s] @ nt[s]
        g_t, qt_norms, qt_guard = _unitize_cols(q_t)
        fg_ref = np.flatnonzero(b_ref.reshape(-1))
        if fg_ref.size == 0:
            continue
        pt_idx = cs.sample_foreground_points(b_ref, cfg.n_points)
        u = g_r[:, fg_ref].mean(axis=1)
        u_norm = float(np.sqrt((u * u).sum()))
        if u_norm < NORM_EPS:
            t_mean = np.zeros_like(u)
        else:
            t_mean = u / u_norm
        targets = np.concatenate([g_r[:, pt_idx].T, t_mean[None, :]], axis=0)

        s_map, agg = cs._similarity_aggregate_full(
            targets, g_t.reshape(-1, d_s, d_s)
        )
        cyc = cs.cycle_consistency_mask(
            g_t.reshape(-1, d_s, d_s), g_r.reshape(-1, d_s, d_s), b_ref
        )
        s_scc = cs.apply_scc_penalty(s_map, cyc, cfg.lam_scc)
        z = (
            resize_bilinear(s_scc[None, :, :], d1, d1)[0]
            if d_s != d1
            else s_scc
        )

        fg_t = np.flatnonzero(b_test.reshape(-1))
        bg_t = np.flatnonzero(b_test.reshape(-1) == 0)
        tape = {
            "s": s, "d_s": d_s, "b_ref": b_ref,
            "g_r": g_r, "qr_norms": qr_norms, "qr_guard": qr_guard,
            "g_t": g_t, "qt_norms": qt_norms, "qt_guard": qt_guard,
            "fg_ref": fg_ref, "pt_idx": pt_idx,
            "u_norm": u_norm, "t_mean": t_mean, "targets": targets,
            "agg": agg, "z": z, "fg_t": fg_t, "bg_t": bg_t,
            "sim": None,
        }
        if fg_t.size and bg_t.size:
            s_fg = targets @ g_t[:, fg_t]
            s_bg = targets @ g_t[:, bg_t]
            term1 = 0.5 * (1.0 - float(s_fg.mean()))
            flat_at = int(np.argmax(s_bg))
            term2 = 0.5 * float(s_bg.reshape(-1)[flat_at])
            tape["sim"] = (term1 + term2, np.unravel_index(flat_at, s_bg.shape))
            sim_terms.append(term1 + term2)
        scales.append(tape)

    if not scales:
        raise EmptyForeground(f"class {c} absent from the reference at every scale")

    kept = [t["s"] for t in scales]
    weights = softnorm(sl.theta[kept])
    s_agg = np.zeros((d1, d1), dtype=np.float64)
    for w, t in zip(weights, scales):
        s_agg += w * t["z"]
    m1 = cs.binarize_mask(resize_nearest(view.test_mask, d1, d1), c).astype(np.float64)
    l_scale = float(np.abs(s_agg - m1).mean())
    l_sim = float(np.mean(sim_terms)) if sim_terms else 0.0
    loss = l_sim + cfg.lam_l1 * l_scale
    if not np.isfinite(loss):
        raise NumericsError(f"warmup loss non-finite for class {c}")
    if not want_grads:
        return loss, None

    grads = sl.zeros_like()
    n_sim = len(sim_terms)

    # L_scale -> aggregated map and scale-weight logits
    d_s_agg = cfg.lam_l1 * np.sign(s_agg - m1) / (d1 * d1)
    d_w = np.array([float((d_s_agg * t["z"]).sum()) for t in scales])
    d_theta_kept = weights * (d_w - float((weights * d_w).sum()))
    grads.theta[kept] = d_theta_kept

    d_nr = [np.zeros_like(n) for n in nr]
    d_nt = [np.zeros_like(n) for n in nt]

    for w, t in zip(weights, scales):
        s = t["s"]
        d_s = t["d_s"]
        n_cells = d_s * d_s
        d_z = w * d_s_agg
        if d_s != d1:
            d_scc = resize_bilinear_adjoint(d_z[None, :, :], d_s, d_s)[0]
        else:
            d_scc = d_z.copy()
        # penalty and cycle mask are constants; route into the attained rows
        agg = t["agg"]
        d_s_all = np.zeros_like(agg.s_all)
        cols = np.arange(n_cells)
        d_s_all[agg.attained, cols] = d_scc.reshape(-1)

        targets = t["targets"]
        g_t = t["g_t"]
        d_targets = d_s_all @ g_t.T
        d_g_t = targets.T @ d_s_all

        if t["sim"] is not None:
            _, (bx, bi) = t["sim"]
            fg_t, bg_t = t["fg_t"], t["bg_t"]
            coeff = -0.5 / (targets.shape[0] * fg_t.size * n_sim)
            d_targets += coeff * g_t[:, fg_t].sum(axis=1)[None, :]
            d_g_t[:, fg_t] += coeff * targets.sum(axis=0)[:, None]
            d_targets[bx] += (0.5 / n_sim) * g_t[:, bg_t[bi]]
            d_g_t[:, bg_t[bi]] += (0.5 / n_sim) * targets[bx]

        # targets -> reference map (sampled rows + normalized mean row)
        d_g_r = np.zeros_like(t["g_r"])
        np.add.at(d_g_r.T, t["pt_idx"], d_targets[:-1])
        if t["u_norm"] >= NORM_EPS:
            tm = t["t_mean"]
            d_u = (d_targets[-1] - tm * float(tm @ d_targets[-1])) / t["u_norm"]
            d_g_r[:, t["fg_ref"]] += (d_u / t["fg_ref"].size)[:, None]

        # projections
        d_q_r = _unitize_cols_bwd(d_g_r, t["g_r"], t["qr_norms"], t["qr_guard"])
        d_q_t = _unitize_cols_bwd(d_g_t, g_t, t["qt_norms"], t["qt_guard"])
        grads.w_feat[s] += d_q_r @ nr[s].T
        grads.w_map[s] += d_q_t @ nt[s].T
        d_nr[s] += sl.w_feat[s].T @ d_q_r
        d_nt[s] += sl.w_map[s].T @ d_q_t

    _fpn_backward(d_nr, tapes_r, ref_maps, grads.fpn)
    _fpn_backward(d_nt, tapes_t, test_maps, grads.fpn)
    return loss, grads


def params_slice(params: CycleParams, c: int) -> WarmupSlice:
    """Extract the float64 warmup slice for class c (shared fpn + class row)."""
    return WarmupSlice(
        fpn=[m.astype(np.float64) for m in params.fpn],
        w_map=[m.astype(np.float64) for m in params.w_feat_map[c - 1]],
        w_feat=[m.astype(np.float64) for m in params.w_feat[c - 1]],
        theta=params.w_scale[c - 1].astype(np.float64),
    )


def warmup_grads(params: CycleParams, view: TrainView, c: int, cfg: WarmupConfig | None = None):
    """Analytic warmup gradients for class c. Returns (loss, WarmupSlice)."""
    cfg = cfg or WarmupConfig()
    return warmup_loss_and_grads(params_slice(params, c), view, c, cfg, want_grads=True)


def finite_diff_grad(loss_fn, x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += eps
        xm = x0.copy()
        xm[i] -= eps
        g[i] = (loss_fn(xp) - loss_fn(xm)) / (2.0 * eps)
    return g


# ---------------------------------------------------------------------------
# training loops


def train_warmup(
    views: list,
    params: CycleParams,
    cfg: WarmupConfig | None = None,
) -> tuple:
    """Gradient-descend the warmup loss; fit per-class thresholds afterwards.

    Views and classes iterate in fixed order with an immediate step after
    each gradient, so results are bit-reproducible. Returns the trained
    CycleParams and the per-epoch loss trace.
    """
    cfg = cfg or WarmupConfig()
    if not views:
        raise ArgumentError("need at least one training view")
    out = params.copy()
    fpn64 = [m.astype(np.float64) for m in out.fpn]
    w_map64 = [[m.astype(np.float64) for m in row] for row in out.w_feat_map]
    w_feat64 = [[m.astype(np.float64) for m in row] for row in out.w_feat]
    theta64 = out.w_scale.astype(np.float64)

    trace = []
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        for view in views:
            for c in range(1, out.num_classes + 1):
                sl = WarmupSlice(
                    fpn=fpn64,
                    w_map=w_map64[c - 1],
                    w_feat=w_feat64[c - 1],
                    theta=theta64[c - 1],
                )
                try:
                    loss, g = warmup_loss_and_grads(sl, view, c, cfg)
                except EmptyForeground:
                    continue
                if loss > 1e6:
                    raise NumericsError(f"warmup diverged (loss {loss:.3g})")
                epoch_loss += loss
                for s in range(out.num_scales):
                    fpn64[s] -= cfg.lr * g.fpn[s]
                    w_map64[c - 1][s] -= cfg.lr * g.w_map[s]
                    w_feat64[c - 1][s] -= cfg.lr * g.w_feat[s]
                theta64[c - 1] -= cfg.lr * g.theta
        trace.append(epoch_loss)

    out.fpn = [m.astype(np.float32) for m in fpn64]
    out.w_feat_map = [[m.astype(np.float32) for m in row] for row in w_map64]
    out.w_feat = [[m.astype(np.float32) for m in row] for row in w_feat64]
    out.w_scale = theta64.astype(np.float32)
    _fit_thresholds(out, views, cfg)
    return out, trace


def _fit_thresholds(params: CycleParams, views: list, cfg: WarmupConfig) -> None:
    d1 = views[0].ref.extents[0]
    for c in range(1, params.num_classes + 1):
        vals = []
        for view in views:
            try:
                s_agg = multiscale_cycleselect(
                    view.ref, view.test, view.ref_mask, c, params,
                    n_points=cfg.n_points, lam_scc=cfg.lam_scc,
                )
                b1 = cs.binarize_mask(resize_nearest(view.test_mask, d1, d1), c)
                vals.append(compute_threshold(s_agg, b1))
            except (EmptyForeground, DegenerateMask):
                continue
        params.thresholds[c - 1] = np.float32(np.mean(vals)) if vals else np.float32(0.0)


def mask_weight_grad(candidates: np.ndarray, gt: np.ndarray, w_row: np.ndarray):
    """Loss and analytic gradient of dice+bce(combine(candidates, w)) in w."""
    cands = np.asarray(candidates, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    w = np.asarray(w_row, dtype=np.float64)
    a = softnorm(w)
    z = np.tensordot(a, cands, axes=1)
    loss = dice_bce_loss(z, g)
    d_z = _dice_bce_grad(z, g)
    d_a = np.array([(d_z * cands[i]).sum() for i in range(3)])
    d_w = a * (d_a - float((a * d_a).sum()))
    return loss, d_w


def fit_mask_weights(cases: list, w0: np.ndarray, lr: float, epochs: int) -> np.ndarray:
    """Descend dice+bce of softmax-combined candidates w.r.t. one weight row.

    ``cases`` is a list of (candidates 3xHxW, gt binary HxW) pairs sharing
    the weight row.
    """
    w = np.asarray(w0, dtype=np.float64).copy()
    for _ in range(epochs):
        for cands, gt in cases:
            _, d_w = mask_weight_grad(cands, gt, w)
            w -= lr * d_w
    return w


def gather_mask_cases(
    views: list,
    params: CycleParams,
    decoder_factory,
    cfg: MaskTrainConfig,
) -> dict:
    """Run the full prompt pipeline per (view, class) and collect candidates.

    ``decoder_factory(view)`` returns an object with
    ``decode(image_ref, prompts) -> 3 x H x W logits``. Classes with empty
    prompt sets are skipped. Returns {class_id: [(candidates, gt), ...]}.
    """
    cases: dict = {c: [] for c in range(1, params.num_classes + 1)}
    for view in views:
        h, w = view.test_mask.shape
        decoder = decoder_factory(view)
        for c in range(1, params.num_classes + 1):
            try:
                s_agg = multiscale_cycleselect(
                    view.ref, view.test, view.ref_mask, c, params,
                    n_points=cfg.n_points, lam_scc=cfg.lam_scc,
                )
            except EmptyForeground:
                continue
            ps = sample_prompts(
                s_agg, float(params.thresholds[c - 1]), cfg.k, (w, h), class_id=c
            )
            if ps.empty:
                continue
            cands = decoder.decode(view.image_ref, ps)
            gt = (view.test_mask == c).astype(np.float64)
            cases[c].append((np.asarray(cands, dtype=np.float64), gt))
    return cases


def train_mask_weights(
    views: list,
    params: CycleParams,
    decoder_factory,
    cfg: MaskTrainConfig | None = None,
) -> CycleParams:
    """Stage 2: train only w_mask; every other parameter is frozen."""
    cfg = cfg or MaskTrainConfig()
    out = params.copy()
    cases = gather_mask_cases(views, params, decoder_factory, cfg)
    for c, class_cases in cases.items():
        if not class_cases:
            continue
        w = fit_mask_weights(
            class_cases, out.w_mask[c - 1].astype(np.float64), cfg.lr, cfg.epochs
        )
        if not np.isfinite(w).all():
            raise NumericsError(f"mask-weight training diverged for class {c}")
        out.w_mask[c - 1] = w.astype(np.float32)
    return out
