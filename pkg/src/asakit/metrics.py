"""Evaluation metrics: event read-out, localisation-aware detection scores,
the composite score, separation improvements, and the diagnostic series.

Detection matching convention (documented choice, validated against the
published score arithmetic): within each (frame, class), predictions and
references are paired greedily by smallest angular error. A pair within 20
degrees is a true positive; a pair beyond 20 degrees counts as both a false
positive and a false negative (so swapping prediction and reference swaps
FP and FN), but still counts as a class-matched pair for the localisation
error and recall. The error rate is computed over one-second segments from
substitutions/deletions/insertions. The localisation error is threshold-free
by default (every class-matched pair contributes) with an optional
threshold-conditioned switch, and is defined as 180 degrees when no pairs
exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from .errors import ShapeError

LOC_THRESHOLD_DEG = 20.0
ACTIVITY_THRESHOLD = 0.5

# one frame event: (class_id, unit direction or None when degenerate)
FrameEvents = list[list[tuple[int, np.ndarray | None]]]


def read_out_events(class_posterior: np.ndarray, activation: np.ndarray,
                    doa: np.ndarray, threshold: float = ACTIVITY_THRESHOLD) -> FrameEvents:
    """Decode per-frame events: an object is active at frame t iff its
    activation strictly exceeds the threshold; its class is the posterior
    argmax; its direction is the normalised DoA. Frames whose DoA norm is
    degenerate (< 1e-6) are skipped entirely, since such an event can never
    participate in location-aware scoring."""
    n_slots, n_frames = activation.shape
    events: FrameEvents = [[] for _ in range(n_frames)]
    classes = np.argmax(class_posterior, axis=1)
    for j in range(n_slots):
        for t in range(n_frames):
            if activation[j, t] > threshold:
                vec = doa[j, t]
                norm = np.linalg.norm(vec)
                if norm >= 1e-6:
                    events[t].append((int(classes[j]), vec / norm))
    return events


def reference_events(targets: obj.TrainingTargets) -> FrameEvents:
    """Ground-truth events from training targets (active slots only)."""
    n_frames = targets.activation.shape[1]
    events: FrameEvents = [[] for _ in range(n_frames)]
    for j in range(targets.n_slots):
        if not targets.active[j]:
            continue
        cid = int(np.argmax(targets.class_target[j]))
        for t in range(n_frames):
            if targets.activation[j, t] > ACTIVITY_THRESHOLD:
                vec = targets.doa[j, t]
                norm = np.linalg.norm(vec)
                if norm >= 1e-6:
                    events[t].append((cid, vec / norm))
    return events


def angular_error(u: np.ndarray, v: np.ndarray) -> float:
    """Great-circle angle between two unit vectors, in degrees.

    Evaluated as 2*arcsin(|u - v| / 2), which equals arccos(<u, v>) for unit
    vectors but is exact at 0 (identical vectors) instead of losing the
    clamped-dot-product's last bits."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise ShapeError("angular_error needs non-zero vectors")
    half_chord = np.linalg.norm(u / nu - v / nv) / 2.0
    return float(np.degrees(2.0 * np.arcsin(min(half_chord, 1.0))))


@dataclass
class SeldResult:
    er: float
    f1: float
    le_deg: float
    lr: float
    n_ref: int = 0
    n_pairs: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    er_errors: int = 0           # summed per-segment S + D + I
    pair_angles: list[float] = field(default_factory=list)
    le_pool: list[float] = field(default_factory=list)
    class_pairs: dict[int, int] = field(default_factory=dict)
    class_refs: dict[int, int] = field(default_factory=dict)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.er, self.f1, self.le_deg, self.lr)


def aggregate_seld(results: list[SeldResult]) -> SeldResult:
    """Micro-average detection results over scenes by summing counts."""
    n_ref = sum(r.n_ref for r in results)
    n_pred_like = sum(r.tp + r.fp for r in results)
    if n_ref == 0 and n_pred_like == 0:
        return SeldResult(er=0.0, f1=1.0, le_deg=0.0, lr=1.0)
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    errors = sum(r.er_errors for r in results)
    pairs = sum(r.n_pairs for r in results)
    le_pool = [a for r in results for a in r.le_pool]
    angles = [a for r in results for a in r.pair_angles]
    class_pairs: dict[int, int] = {}
    class_refs: dict[int, int] = {}
    for r in results:
        for c, v in r.class_pairs.items():
            class_pairs[c] = class_pairs.get(c, 0) + v
        for c, v in r.class_refs.items():
            class_refs[c] = class_refs.get(c, 0) + v
    denom = 2 * tp + fp + fn
    return SeldResult(
        er=errors / max(n_ref, 1), f1=(2 * tp / denom) if denom else 1.0,
        le_deg=float(np.mean(le_pool)) if le_pool else 180.0,
        lr=pairs / n_ref if n_ref else 1.0, n_ref=n_ref, n_pairs=pairs,
        tp=tp, fp=fp, fn=fn, er_errors=errors, pair_angles=angles,
        le_pool=le_pool, class_pairs=class_pairs, class_refs=class_refs)


def _greedy_pairs(preds, refs):
    """Greedy minimal-angle pairing between two event lists of one class.
    Events without a direction can never pair."""
    cands = []
    for i, (_, pu) in enumerate(preds):
        if pu is None:
            continue
        for j, (_, ru) in enumerate(refs):
            if ru is None:
                continue
            cands.append((angular_error(pu, ru), i, j))
    cands.sort(key=lambda c: c[0])
    used_p, used_r, pairs = set(), set(), []
    for ang, i, j in cands:
        if i in used_p or j in used_r:
            continue
        used_p.add(i)
        used_r.add(j)
        pairs.append(ang)
    return pairs


def seld_metrics(pred: FrameEvents, ref: FrameEvents, frames_per_segment: int,
                 loc_threshold_deg: float = LOC_THRESHOLD_DEG,
                 threshold_conditioned_le: bool = False) -> SeldResult:
    """Location-aware detection metrics over frame-level event sets."""
    if len(pred) != len(ref):
        raise ShapeError(f"frame counts differ: {len(pred)} vs {len(ref)}")
    n_ref = sum(len(f) for f in ref)
    n_pred = sum(len(f) for f in pred)
    if n_ref == 0 and n_pred == 0:
        return SeldResult(er=0.0, f1=1.0, le_deg=0.0, lr=1.0)

    tp = fp_total = fn_total = n_pairs = 0
    frame_fp = np.zeros(len(pred), dtype=int)
    frame_fn = np.zeros(len(pred), dtype=int)
    angles: list[float] = []
    le_pool: list[float] = []
    class_pairs: dict[int, int] = {}
    class_refs: dict[int, int] = {}

    for t, (p_events, r_events) in enumerate(zip(pred, ref)):
        for cid, _ in r_events:
            class_refs[cid] = class_refs.get(cid, 0) + 1
        classes = {c for c, _ in p_events} | {c for c, _ in r_events}
        for cid in classes:
            p_c = [e for e in p_events if e[0] == cid]
            r_c = [e for e in r_events if e[0] == cid]
            pairs = _greedy_pairs(p_c, r_c)
            n_pairs += len(pairs)
            class_pairs[cid] = class_pairs.get(cid, 0) + len(pairs)
            good = sum(1 for a in pairs if a <= loc_threshold_deg)
            bad = len(pairs) - good
            tp += good
            angles.extend(pairs)
            if threshold_conditioned_le:
                le_pool.extend(a for a in pairs if a <= loc_threshold_deg)
            else:
                le_pool.extend(pairs)
            frame_fp[t] += len(p_c) - len(pairs) + bad
            frame_fn[t] += len(r_c) - len(pairs) + bad

    fp_total = int(frame_fp.sum())
    fn_total = int(frame_fn.sum())
    n_seg = -(-len(pred) // frames_per_segment)
    err = 0
    for s in range(n_seg):
        sl = slice(s * frames_per_segment, (s + 1) * frames_per_segment)
        seg_fp, seg_fn = int(frame_fp[sl].sum()), int(frame_fn[sl].sum())
        err += min(seg_fn, seg_fp) + max(0, seg_fn - seg_fp) + max(0, seg_fp - seg_fn)
    er = err / max(n_ref, 1)
    denom = 2 * tp + fp_total + fn_total
    f1 = (2 * tp / denom) if denom else 1.0
    le = float(np.mean(le_pool)) if le_pool else 180.0
    lr = n_pairs / n_ref if n_ref else 1.0
    return SeldResult(er=er, f1=f1, le_deg=le, lr=lr, n_ref=n_ref,
                      n_pairs=n_pairs, tp=tp, fp=fp_total, fn=fn_total,
                      er_errors=err, pair_angles=angles, le_pool=le_pool,
                      class_pairs=class_pairs, class_refs=class_refs)


def seld_score(er: float, f1: float, le_deg: float, lr: float) -> float:
    """Composite score: (ER + (1 - F1) + LE/180 + (1 - LR)) / 4; lower is
    better, 0 is perfect."""
    return (er + (1.0 - f1) + le_deg / 180.0 + (1.0 - lr)) / 4.0


def si_sdri(est: np.ndarray, ref: np.ndarray, mixture: np.ndarray) -> float:
    """SI-SDR improvement of est over the unprocessed mixture, in dB."""
    return obj.si_sdr(est, ref).item() - obj.si_sdr(mixture, ref).item()


def sdri(est: np.ndarray, ref: np.ndarray, mixture: np.ndarray) -> float:
    """Plain SDR improvement (no optimal scaling), in dB."""
    return obj.sdr(est, ref).item() - obj.sdr(mixture, ref).item()


def per_class_recall(result: SeldResult, n_classes: int) -> np.ndarray:
    """Class-matched detections over reference counts; NaN marks classes with
    no reference events (undefined)."""
    out = np.full(n_classes, np.nan)
    for cid, refs in result.class_refs.items():
        out[cid] = result.class_pairs.get(cid, 0) / refs
    return out


def le_histogram(angles, bin_deg: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Counts of pair angles in [0, 180] degree bins; returns (edges, counts)."""
    edges = np.arange(0.0, 180.0 + bin_deg, bin_deg)
    counts, _ = np.histogram(np.asarray(list(angles), dtype=float), bins=edges)
    return edges, counts


def kernel_cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between channel-aligned first-layer conv kernels:
    a, b are (C_out, C_in, kh, kw); returns (C_out,)."""
    if a.shape != b.shape:
        raise ShapeError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    fa = a.reshape(a.shape[0], -1)
    fb = b.reshape(b.shape[0], -1)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    denom = np.where((na > 0) & (nb > 0), na * nb, 1.0)
    return np.sum(fa * fb, axis=1) / denom


@dataclass
class MetricsReport:
    """Per-scene (or aggregate) evaluation summary."""

    si_sdri: float
    sdri: float
    er: float
    f1: float
    le_deg: float
    lr: float
    seld: float
    si_sdr_s: float = np.nan     # dereverberation split: direct-part SI-SDR
    si_sdr_h: float = np.nan     # reverb-part SI-SDR
    n_objects: int = 0

    FIELDS = ("si_sdri", "sdri", "er", "f1", "le_deg", "lr", "seld",
              "si_sdr_s", "si_sdr_h", "n_objects")

    def as_row(self) -> list:
        return [getattr(self, k) for k in self.FIELDS]


def evaluate_estimate(est, targets: obj.TrainingTargets, mixture: np.ndarray,
                      frames_per_segment: int, weights: obj.LossWeights | None = None,
                      split_direct_reverb: bool = True) -> tuple[MetricsReport, SeldResult]:
    """Score one decoded estimate against its scene targets.

    Separation metrics pair slots to targets with the Hungarian assignment,
    score the reference channel of direct+reverb (or the single stack when
    the split is disabled), and average over active objects; mixture-level
    SI-SDR is the improvement baseline. Detection metrics are set-based and
    need no pairing.
    """
    w = weights or obj.LossWeights()
    assignment = obj.assign_objects(est, targets, w)
    tgt = targets.permuted(assignment)
    ref_ch = w.ref_channel

    si_vals, sdr_vals, si_s, si_h = [], [], [], []
    est_d = est.direct_wav.data
    est_r = est.reverb_wav.data if est.reverb_wav is not None else None
    mix = mixture[ref_ch]
    for j in range(tgt.n_slots):
        if not tgt.active[j]:
            continue
        ref_sum = tgt.direct[j, ref_ch] + tgt.reverb[j, ref_ch]
        if np.sum(ref_sum**2) == 0.0:
            continue
        est_sum = est_d[j, ref_ch] + (est_r[j, ref_ch] if est_r is not None else 0.0)
        si_vals.append(si_sdri(est_sum, ref_sum, mix))
        sdr_vals.append(sdri(est_sum, ref_sum, mix))
        if split_direct_reverb and est_r is not None:
            if np.sum(tgt.direct[j, ref_ch] ** 2) > 0:
                si_s.append(obj.si_sdr(est_d[j, ref_ch], tgt.direct[j, ref_ch]).item())
            if np.sum(tgt.reverb[j, ref_ch] ** 2) > 0:
                si_h.append(obj.si_sdr(est_r[j, ref_ch], tgt.reverb[j, ref_ch]).item())

    pred = read_out_events(est.class_posterior.data, est.activation.data, est.doa.data)
    ref = reference_events(targets)
    seld_res = seld_metrics(pred, ref, frames_per_segment)
    report = MetricsReport(
        si_sdri=float(np.mean(si_vals)) if si_vals else np.nan,
        sdri=float(np.mean(sdr_vals)) if sdr_vals else np.nan,
        er=seld_res.er, f1=seld_res.f1, le_deg=seld_res.le_deg, lr=seld_res.lr,
        seld=seld_score(*seld_res.as_tuple()),
        si_sdr_s=float(np.mean(si_s)) if si_s else np.nan,
        si_sdr_h=float(np.mean(si_h)) if si_h else np.nan,
        n_objects=int(targets.active.sum()))
    return report, seld_res
