"""Training losses, target construction, and object-slot assignment.

Audio losses are (negated) SDR ratios capped at +/-60 dB for stability; the
cap is a hard clip, so gradients vanish beyond it. SED losses are
cross-entropy (class), binary cross-entropy (activation) and MSE (event
map); DoA is plain MSE. Inactive slots are trained toward a uniform class
posterior, zero activation/event/DoA, and zero waveforms.

Slot-to-target pairing during training uses a Hungarian assignment on a cost
that blends the pairwise audio fit and the class cross-entropy; one
permutation is applied to every head (the shared-object contract).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError
from .scenes import SpatialScene

DB_CAP = 60.0
PROB_EPS = 1e-7
_LOG10 = float(np.log(10.0))


@dataclass(frozen=True)
class LossWeights:
    direct: float = 1.0
    reverb: float = 1.0
    noise: float = 0.01
    ref_channel: int = 0
    ref_channel_weight: float = 1.0
    other_channel_weight: float = 0.1
    assign_audio_weight: float = 1.0
    assign_class_weight: float = 1.0

    def __post_init__(self):
        for name in ("direct", "reverb", "noise", "ref_channel_weight",
                     "other_channel_weight"):
            if getattr(self, name) < 0:
                raise ShapeError(f"loss weight {name} must be >= 0")

    def channel_weights(self, n_mics: int) -> np.ndarray:
        w = np.full(n_mics, self.other_channel_weight)
        w[self.ref_channel] = self.ref_channel_weight
        return w


@dataclass
class TrainingTargets:
    """Per-slot supervision. Slots beyond the scene's object count are
    inactive: uniform class target, zeros everywhere else."""

    direct: np.ndarray        # (J, M, N)
    reverb: np.ndarray        # (J, M, N)
    noise: np.ndarray         # (M, N)
    class_target: np.ndarray  # (J, C)
    activation: np.ndarray    # (J, T_out) in {0, 1}
    event_map: np.ndarray     # (J, T_out, C) in {0, 1}
    doa: np.ndarray           # (J, T_out, 3) unit or zero vectors
    active: np.ndarray        # (J,) bool

    @property
    def n_slots(self) -> int:
        return self.direct.shape[0]

    def permuted(self, assignment: np.ndarray) -> "TrainingTargets":
        return TrainingTargets(
            direct=self.direct[assignment], reverb=self.reverb[assignment],
            noise=self.noise, class_target=self.class_target[assignment],
            activation=self.activation[assignment],
            event_map=self.event_map[assignment], doa=self.doa[assignment],
            active=self.active[assignment])


def targets_from_scene(scene: SpatialScene, n_slots: int, n_classes: int) -> TrainingTargets:
    if scene.n_objects > n_slots:
        raise ShapeError(f"scene has {scene.n_objects} objects but only {n_slots} slots")
    m, n = scene.n_mics, scene.n_samples
    t_out = scene.trajectories.shape[1]
    tgt = TrainingTargets(
        direct=np.zeros((n_slots, m, n)), reverb=np.zeros((n_slots, m, n)),
        noise=scene.noise.copy(),
        class_target=np.full((n_slots, n_classes), 1.0 / n_classes),
        activation=np.zeros((n_slots, t_out)),
        event_map=np.zeros((n_slots, t_out, n_classes)),
        doa=np.zeros((n_slots, t_out, 3)),
        active=np.zeros(n_slots, dtype=bool))
    for j in range(scene.n_objects):
        act = scene.activation_frames(j).astype(float)
        cid = int(scene.class_ids[j])
        tgt.direct[j] = scene.direct[j]
        tgt.reverb[j] = scene.reverb[j]
        tgt.class_target[j] = 0.0
        tgt.class_target[j, cid] = 1.0
        tgt.activation[j] = act
        tgt.event_map[j, :, cid] = act
        tgt.doa[j] = scene.trajectories[j] * act[:, None]
        tgt.active[j] = True
    return tgt


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _ratio_to_db(num: Tensor, den: Tensor) -> Tensor:
    ratio = ad.div(ad.clip(num, 1e-30, 1e30), ad.clip(den, 1e-30, 1e30))
    db = ad.mul(ad.log(ratio), 10.0 / _LOG10)
    return ad.clip(db, -DB_CAP, DB_CAP)


def si_sdr(est, ref) -> Tensor:
    """Scale-invariant SDR in dB, capped at +/-60; differentiable in est."""
    est, ref = _as_t(est), _as_t(ref)
    if est.shape != ref.shape:
        raise ShapeError(f"si_sdr shapes differ: {est.shape} vs {ref.shape}")
    ref_energy = float(np.sum(ref.data**2))
    if ref_energy == 0.0:
        raise NumericError("si_sdr is undefined for an all-zero reference")
    alpha = ad.mul(ad.tsum(ad.mul(est, ref)), 1.0 / ref_energy)
    target = ad.mul(ref, alpha)
    num = ad.tsum(ad.mul(target, target))
    err = ad.sub(target, est)
    den = ad.tsum(ad.mul(err, err))
    return _ratio_to_db(num, den)


def sdr(est, ref) -> Tensor:
    """Plain (non-scale-invariant) SDR in dB, capped at +/-60."""
    est, ref = _as_t(est), _as_t(ref)
    if est.shape != ref.shape:
        raise ShapeError(f"sdr shapes differ: {est.shape} vs {ref.shape}")
    num = ad.tsum(ad.mul(ref, ref))
    err = ad.sub(ref, est)
    den = ad.tsum(ad.mul(err, err))
    return _ratio_to_db(num, den)


def sa_sdr(ests, refs, weights: LossWeights) -> Tensor:
    """Source-aggregated SDR over (J, M, N) stacks with per-channel weights
    (reference channel 1.0, others 0.1 by default). A single ratio over the
    summed energies keeps all-zero individual targets well defined; if every
    target is zero the pair is excluded (constant 0, no gradient)."""
    ests, refs = _as_t(ests), _as_t(refs)
    if ests.shape != refs.shape or ests.ndim != 3:
        raise ShapeError(f"sa_sdr expects matching (J, M, N), got {ests.shape} vs {refs.shape}")
    if float(np.sum(refs.data**2)) == 0.0:
        return Tensor(0.0)
    c = Tensor(weights.channel_weights(ests.shape[1]).reshape(1, -1, 1))
    num = ad.tsum(ad.mul(c, ad.mul(refs, refs)))
    err = ad.sub(refs, ests)
    den = ad.tsum(ad.mul(c, ad.mul(err, err)))
    return _ratio_to_db(num, den)


def _clamped(p: Tensor) -> Tensor:
    return ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def cross_entropy(posterior, target) -> Tensor:
    """Mean over slots of -sum_c t_c log p_c."""
    p, t = _clamped(_as_t(posterior)), _as_t(target)
    per_slot = ad.neg(ad.tsum(ad.mul(t, ad.log(p)), axis=-1))
    return ad.tmean(per_slot)


def binary_cross_entropy(pred, target) -> Tensor:
    p, t = _clamped(_as_t(pred)), _as_t(target)
    pos = ad.mul(t, ad.log(p))
    negt = ad.mul(ad.sub(1.0, t), ad.log(ad.sub(1.0, p)))
    return ad.neg(ad.tmean(ad.add(pos, negt)))


def mse(pred, target) -> Tensor:
    d = ad.sub(_as_t(pred), _as_t(target))
    return ad.tmean(ad.mul(d, d))


def sed_losses(class_posterior, class_target, activation, activation_target,
               event_map, event_target) -> tuple[Tensor, Tensor, Tensor]:
    """(cross-entropy, binary cross-entropy, event-map MSE)."""
    return (cross_entropy(class_posterior, class_target),
            binary_cross_entropy(activation, activation_target),
            mse(event_map, event_target))


def doa_loss(doa, target) -> Tensor:
    """MSE over all frames and coordinates, active and inactive alike."""
    return mse(doa, target)


def _pair_audio_db(est_d, est_r, tgt_d, tgt_r, w: LossWeights) -> float:
    c = w.channel_weights(est_d.shape[0])[:, None]
    num = float(np.sum(c * tgt_d**2) + np.sum(c * tgt_r**2))
    err_d, err_r = tgt_d - est_d, tgt_r - est_r
    den = float(np.sum(c * err_d**2) + np.sum(c * err_r**2))
    db = 10.0 * np.log10(max(num, 1e-30) / max(den, 1e-30))
    return float(np.clip(db, -DB_CAP, DB_CAP))


def _pair_class_ce(p: np.ndarray, t: np.ndarray) -> float:
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    return float(-np.sum(t * np.log(pc)))


def assignment_cost(est, targets: TrainingTargets, w: LossWeights) -> np.ndarray:
    """cost[j, k]: slot j against target k — negated capped audio SDR plus
    class cross-entropy, blended by the assign_* weights."""
    j = targets.n_slots
    est_d = est.direct_wav.data
    est_r = est.reverb_wav.data if est.reverb_wav is not None else np.zeros_like(est_d)
    tgt_r = targets.reverb if est.reverb_wav is not None else np.zeros_like(targets.reverb)
    tgt_d = targets.direct if est.reverb_wav is not None \
        else targets.direct + targets.reverb
    post = est.class_posterior.data
    cost = np.zeros((j, j))
    for a in range(j):
        for b in range(j):
            cost[a, b] = -w.assign_audio_weight * _pair_audio_db(
                est_d[a], est_r[a], tgt_d[b], tgt_r[b], w)
            cost[a, b] += w.assign_class_weight * _pair_class_ce(
                post[a], targets.class_target[b])
    return cost


def assign_objects(est, targets: TrainingTargets, w: LossWeights | None = None) -> np.ndarray:
    """Hungarian assignment: returns a[j] = index of the target matched to
    slot j. The noise slot is fixed and not part of the assignment."""
    w = w or LossWeights()
    if est.class_posterior.shape[0] != targets.n_slots:
        raise ShapeError(
            f"slot count mismatch: estimate {est.class_posterior.shape[0]} "
            f"vs targets {targets.n_slots}")
    cost = assignment_cost(est, targets, w)
    if not np.all(np.isfinite(cost)):
        raise NumericError("slot-assignment cost is non-finite (bad audio or "
                           "class estimates)")
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(targets.n_slots, dtype=int)
    out[rows] = cols
    return out


def joint_loss(est, targets: TrainingTargets, w: LossWeights | None = None,
               assignment: np.ndarray | None = None,
               split_direct_reverb: bool = True,
               use_noise: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of all task losses under one slot permutation.

    Returns (total, components); components hold the raw per-term values for
    the step log. With split_direct_reverb=False the single audio stack in
    est.direct_wav is scored against direct+reverb and the reverb term is
    dropped; with use_noise=False the noise term is dropped.
    """
    w = w or LossWeights()
    if assignment is None:
        assignment = assign_objects(est, targets, w)
    tgt = targets.permuted(assignment)

    parts: dict[str, Tensor] = {}
    if split_direct_reverb:
        parts["direct"] = sa_sdr(est.direct_wav, Tensor(tgt.direct), w)
        parts["reverb"] = sa_sdr(est.reverb_wav, Tensor(tgt.reverb), w)
    else:
        parts["direct"] = sa_sdr(est.direct_wav, Tensor(tgt.direct + tgt.reverb), w)
        parts["reverb"] = Tensor(0.0)
    if use_noise and float(np.sum(tgt.noise**2)) > 0.0:
        per_ch = [si_sdr(est.noise_wav[m], Tensor(tgt.noise[m]))
                  for m in range(tgt.noise.shape[0])]
        parts["noise"] = ad.tmean(ad.stack(per_ch))
    else:
        parts["noise"] = Tensor(0.0)
    ce, bce, ev = sed_losses(est.class_posterior, tgt.class_target,
                             est.activation, tgt.activation,
                             est.event_map, tgt.event_map)
    parts["ce"], parts["bce"], parts["mse_event"] = ce, bce, ev
    parts["mse_doa"] = doa_loss(est.doa, Tensor(tgt.doa))

    total = ad.add(
        ad.add(ad.mul(parts["direct"], -w.direct), ad.mul(parts["reverb"], -w.reverb)),
        ad.mul(parts["noise"], -w.noise))
    for key in ("ce", "bce", "mse_event", "mse_doa"):
        total = ad.add(total, parts[key])

    components = {}
    for name, t in parts.items():
        val = float(t.data)
        if not np.isfinite(val):
            raise NumericError(f"loss component {name!r} is non-finite")
        components[name] = val
    components["total"] = float(total.data)
    if not np.isfinite(components["total"]):
        raise NumericError("total loss is non-finite")
    return total, components
