"""Detection losses with closed-form gradients.

Every loss returns (value, gradient) where the gradient is with respect to the
first argument (logits or segment coordinates), so central finite differences
can check each term directly. Values and gradients are computed in f64.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Rng, gradcheck


@dataclasses.dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    lambda_cls: float = 1.0
    lambda_loc: float = 10.0
    lambda_q: float = 1.0
    clamp_eps: float = 1e-7


def loss_profile(name: str) -> LossConfig:
    if name == "thumos":
        return LossConfig(lambda_loc=10.0)
    if name == "anet":
        return LossConfig(lambda_loc=1.0)
    raise ConfigError(f"unknown loss profile {name!r}")


def _sigmoid64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def focal_loss(logits: np.ndarray, targets: np.ndarray, gamma: float = 2.0,
               alpha: float = 0.25, eps: float = 1e-7) -> tuple[float, np.ndarray]:
    """Mean focal binary cross-entropy over all entries.

    Positives contribute -alpha * (1-p)^gamma * log(p), negatives
    -(1-alpha) * p^gamma * log(1-p), with p the sigmoid of the logit clamped
    to [eps, 1-eps].
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ConfigError(f"focal_loss: shape mismatch {z.shape} vs {t.shape}")
    p = np.clip(_sigmoid64(z), eps, 1.0 - eps)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    loss = np.where(t > 0.5, pos, neg).mean()
    # d/dz of the positive term: alpha * (1-p)^gamma * (gamma*p*log(p) - (1-p));
    # the negative term is its mirror under p -> 1-p, z -> -z.
    gpos = alpha * (1.0 - p) ** gamma * (gamma * p * np.log(p) - (1.0 - p))
    gneg = (1.0 - alpha) * p ** gamma * (p - gamma * (1.0 - p) * np.log(1.0 - p))
    grad = np.where(t > 0.5, gpos, gneg) / z.size
    return float(loss), grad


def tiou_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - temporal IoU, averaged over segments; one-sided derivatives at kinks."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape != t.shape:
        raise ConfigError(f"tiou_loss expects (n, 2) segments, got {p.shape} vs {t.shape}")
    if p.size == 0:
        return 0.0, np.zeros_like(p)
    s, e = p[:, 0], p[:, 1]
    st, et = t[:, 0], t[:, 1]
    if (e <= s).any() or (et <= st).any():
        raise ConfigError("tiou_loss requires start < end on both sides")
    inter = np.maximum(0.0, np.minimum(e, et) - np.maximum(s, st))
    union = (e - s) + (et - st) - inter
    iou = inter / union
    n = p.shape[0]
    loss = float((1.0 - iou).mean())
    # dI/ds is -1 where the prediction's start is the binding one, dI/de is +1
    # where its end is; outside any overlap the loss is locally flat.
    overlap = inter > 0
    di_ds = np.where(overlap & (s > st), -1.0, 0.0)
    di_de = np.where(overlap & (e < et), 1.0, 0.0)
    du_ds = -1.0 - di_ds
    du_de = 1.0 - di_de
    diou_ds = np.where(overlap, (di_ds * union - inter * du_ds) / union ** 2, 0.0)
    diou_de = np.where(overlap, (di_de * union - inter * du_de) / union ** 2, 0.0)
    grad = np.stack([-diou_ds, -diou_de], axis=1) / n
    return loss, grad


def l1_offset_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over all offset components."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigError(f"l1_offset_loss: shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        return 0.0, np.zeros_like(p)
    d = p - t
    return float(np.abs(d).mean()), np.sign(d) / d.size


def quality_loss(logits: np.ndarray, target: np.ndarray, eps: float = 1e-7) -> tuple[float, np.ndarray]:
    """Binary cross-entropy between the quality probability and a tIoU target."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise ConfigError(f"quality_loss: shape mismatch {z.shape} vs {t.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ConfigError("quality_loss targets must lie in [0, 1]")
    if z.size == 0:
        return 0.0, np.zeros_like(z)
    p = np.clip(_sigmoid64(z), eps, 1.0 - eps)
    loss = float((-t * np.log(p) - (1.0 - t) * np.log(1.0 - p)).mean())
    grad = (_sigmoid64(z) - t) / z.size
    return loss, grad


def combine_losses(cls_loss: float, loc_loss: float, q_loss: float, cfg: LossConfig) -> float:
    return cfg.lambda_cls * cls_loss + cfg.lambda_loc * loc_loss + cfg.lambda_q * q_loss


def segment_tiou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise tIoU between (n, 2) segment arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = np.maximum(0.0, np.minimum(a[..., 1], b[..., 1]) - np.maximum(a[..., 0], b[..., 0]))
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


@dataclasses.dataclass(frozen=True)
class MatchedTargets:
    matched: np.ndarray      # (n,) bool
    class_ids: np.ndarray    # (n,) int, -1 where unmatched
    segments: np.ndarray     # (n, 2) matched ground-truth segments, zeros where unmatched


def match_anchors(anchor_times: np.ndarray, cell_spans: np.ndarray,
                  gt_segments: np.ndarray, gt_classes: np.ndarray) -> MatchedTargets:
    """Assign each anchor to the ground-truth instance containing its timestamp.

    Among containing instances, the one with the highest tIoU against the
    anchor's one-stride cell wins; ties go to the earliest instance index.
    """
    n = len(anchor_times)
    matched = np.zeros(n, dtype=bool)
    class_ids = np.full(n, -1, dtype=int)
    segments = np.zeros((n, 2), dtype=np.float64)
    if len(gt_segments) == 0:
        return MatchedTargets(matched, class_ids, segments)
    gt_segments = np.asarray(gt_segments, dtype=np.float64)
    for i, s in enumerate(anchor_times):
        inside = (gt_segments[:, 0] <= s) & (s < gt_segments[:, 1])
        if not inside.any():
            continue
        ious = segment_tiou(np.broadcast_to(cell_spans[i], gt_segments.shape), gt_segments)
        ious = np.where(inside, ious, -1.0)
        j = int(np.argmax(ious))  # argmax takes the earliest index on ties
        matched[i] = True
        class_ids[i] = int(gt_classes[j])
        segments[i] = gt_segments[j]
    return MatchedTargets(matched, class_ids, segments)


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    cls: float
    loc: float
    quality: float
    total: float


def total_loss(coarse_cls: np.ndarray, coarse_seg: np.ndarray, refined_cls: np.ndarray,
               refined_off: np.ndarray, quality_logits: np.ndarray,
               targets: MatchedTargets, cfg: LossConfig) -> LossBreakdown:
    """Multi-task objective over one clip's flattened anchors.

    Classification is focal loss on both rounds over all anchors; localization
    is tIoU loss on the coarse segments plus L1 on the refinement offsets of
    positive anchors; the quality branch regresses the tIoU of the refined
    segment against its matched instance (target treated as a constant).
    """
    n, k = coarse_cls.shape
    onehot = np.zeros((n, k), dtype=np.float64)
    pos = targets.matched
    onehot[pos, targets.class_ids[pos]] = 1.0
    cls_c, _ = focal_loss(coarse_cls, onehot, cfg.gamma, cfg.alpha, cfg.clamp_eps)
    cls_r, _ = focal_loss(refined_cls, onehot, cfg.gamma, cfg.alpha, cfg.clamp_eps)
    cls_loss = cls_c + cls_r

    if pos.any():
        seg_p = coarse_seg[pos]
        seg_t = targets.segments[pos]
        tiou_l, _ = tiou_loss(seg_p, seg_t)
        half = 0.5 * (seg_p[:, 1] - seg_p[:, 0])
        if (half <= 0).any():
            raise ConfigError("coarse segments must have positive length for offset targets")
        off_t = (seg_t - seg_p) / half[:, None]
        l1_l, _ = l1_offset_loss(refined_off[pos], off_t)
        refined_seg = np.stack([
            seg_p[:, 0] + half * refined_off[pos][:, 0],
            seg_p[:, 1] + half * refined_off[pos][:, 1],
        ], axis=1)
        q_target = np.clip(segment_tiou(refined_seg, seg_t), 0.0, 1.0)
        q_l, _ = quality_loss(quality_logits[pos], q_target, cfg.clamp_eps)
    else:
        tiou_l = l1_l = q_l = 0.0

    loc_loss = tiou_l + l1_l
    return LossBreakdown(cls=cls_loss, loc=loc_loss, quality=q_l,
                         total=combine_losses(cls_loss, loc_loss, q_l, cfg))


def _sample_smooth_segments(rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Overlapping (pred, target) segment pairs with margin from every kink.

    The tIoU loss has one-sided derivatives where a predicted boundary meets a
    target boundary and where the overlap vanishes; rejection sampling keeps a
    0.1 margin from those sets so central differences are trustworthy.
    """
    pred = np.zeros((n, 2))
    target = np.zeros((n, 2))
    row = 0
    draw = 0
    while row < n:
        r = rng.child(f"draw{draw}")
        draw += 1
        if draw > 1000 * n:
            raise ConfigError("segment sampler failed to find smooth configurations")
        st = float(r.child("st").uniform((), 0.0, 10.0))
        et = st + float(r.child("len").uniform((), 2.0, 5.0))
        s = st + float(r.child("ds").uniform((), -1.5, 1.5))
        e = et + float(r.child("de").uniform((), -1.5, 1.5))
        margins = (abs(s - st) > 0.1 and abs(e - et) > 0.1
                   and s < et - 0.1 and e > st + 0.1 and e - s > 0.2)
        if margins:
            pred[row] = (s, e)
            target[row] = (st, et)
            row += 1
    return pred, target


def gradient_check_report(seed: int = 0, points: int = 100, h: float = 1e-5) -> dict[str, float]:
    """Max relative error of each analytic gradient against central differences.

    Sample points stay away from the non-smooth sets: logits within [-8, 8]
    (far from the probability clamp), quality targets strictly inside (0, 1),
    offset residuals bounded away from zero, and segment pairs from
    _sample_smooth_segments.
    """
    rng = Rng(seed)
    worst = {"focal": 0.0, "tiou": 0.0, "offset_l1": 0.0, "quality": 0.0}
    for i in range(points):
        prng = rng.child(f"point{i}")

        z = np.clip(prng.child("fz").normal((6, 4), 0.0, 2.0), -8.0, 8.0)
        y = (prng.child("fy").uniform((6, 4)) < 0.3).astype(np.float64)
        err = gradcheck(lambda v: focal_loss(v, y)[0], lambda v: focal_loss(v, y)[1], z, h)
        worst["focal"] = max(worst["focal"], err)

        pred, target = _sample_smooth_segments(prng.child("seg"), 4)
        err = gradcheck(lambda v: tiou_loss(v, target)[0],
                        lambda v: tiou_loss(v, target)[1], pred, h)
        worst["tiou"] = max(worst["tiou"], err)

        ot = prng.child("ot").normal((5, 2), 0.0, 1.0)
        off = ot + np.where(prng.child("osign").uniform((5, 2)) < 0.5, -1.0, 1.0) \
            * prng.child("omag").uniform((5, 2), 0.05, 1.0)
        err = gradcheck(lambda v: l1_offset_loss(v, ot)[0],
                        lambda v: l1_offset_loss(v, ot)[1], off, h)
        worst["offset_l1"] = max(worst["offset_l1"], err)

        qz = np.clip(prng.child("qz").normal((6,), 0.0, 2.0), -8.0, 8.0)
        qt = prng.child("qt").uniform((6,), 0.05, 0.95)
        err = gradcheck(lambda v: quality_loss(v, qt)[0],
                        lambda v: quality_loss(v, qt)[1], qz, h)
        worst["quality"] = max(worst["quality"], err)
    for term, err in worst.items():
        if not np.isfinite(err):
            raise NumericError(f"gradient check for {term} produced non-finite values")
    return worst
