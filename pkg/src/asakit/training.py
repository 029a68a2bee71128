"""Two-stage training harness: Adam with global-norm clipping, the
halve-on-plateau learning-rate schedule, per-step loss logging, versioned
checkpoints, and dataset-level evaluation.

Stage 1 trains the encoder, aggregator, first splitter and first decoder
bank. Stage 2 restores a stage-1 checkpoint, freezes it (enforced: only
stage-2 parameters enter the optimiser, and stage-1 checksums are verified
every epoch), and trains the refinement modules on the second-pass outputs.

Determinism: with workers=1 the whole trajectory is a pure function of
(config, dataset, seed). With workers>1, scenes of a batch run on separate
threads as independent graphs and gradients are summed in scene order, so a
fixed worker count also reproduces bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics as mx
from . import objectives as obj
from .autodiff import GradGraph, Tensor
from .config import RunConfig, config_echo, model_from_echo
from .errors import ConfigError, DataError, NumericError
from .model import AsaEstimate, AsaModel
from .objectives import LossWeights, TrainingTargets, targets_from_scene
from .scenes import SceneDataset

CHECKPOINT_VERSION = 1
LOSS_LOG_HEADER = ("step", "total", "direct", "reverb", "noise", "ce", "bce",
                   "mse_event", "mse_doa")


def parameter_checksum(params: dict[str, Tensor]) -> str:
    """Order-independent digest of named parameter values."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


class Adam:
    """Standard first-order adaptive optimiser over named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m::{k}": v for k, v in self.m.items()}
        out.update({f"v::{k}": v for k, v in self.v.items()})
        out["t"] = np.asarray([self.t, 0])
        out["lr"] = np.asarray([self.lr])
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        self.lr = float(state["lr"][0])
        for k in self.m:
            self.m[k] = np.asarray(state[f"m::{k}"])
            self.v[k] = np.asarray(state[f"v::{k}"])


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm cap; returns the pre-clip
    norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: AsaModel, stage: int, epoch: int,
                    best_val: float, run: RunConfig,
                    optimizer: Adam | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = model.named_parameters()
    names = sorted(params)
    arrays = {f"p{i}": params[n].data for i, n in enumerate(names)}
    opt_names: list[str] = []
    if optimizer is not None:
        for i, (key, arr) in enumerate(sorted(optimizer.state().items())):
            arrays[f"o{i}"] = arr
            opt_names.append(key)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "epoch": epoch,
        "best_val": best_val,
        "param_names": names,
        "opt_names": opt_names,
        "config": config_echo(run),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        data = np.load(path)
        meta = json.loads(bytes(data["meta"]).decode())
    except Exception as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint format {meta.get('format_version')} unsupported")
    params = {n: data[f"p{i}"] for i, n in enumerate(meta["param_names"])}
    opt = {n: data[f"o{i}"] for i, n in enumerate(meta.get("opt_names", []))}
    return {"meta": meta, "params": params, "optimizer": opt}


def model_from_checkpoint(path: str | Path) -> tuple[AsaModel, dict]:
    ckpt = load_checkpoint(path)
    cfg = model_from_echo(ckpt["meta"]["config"])
    model = AsaModel(cfg, seed=0)
    have = model.named_parameters()
    missing = sorted(set(have) - set(ckpt["params"]))
    extra = sorted(set(ckpt["params"]) - set(have))
    if missing or extra:
        raise DataError(
            "checkpoint/model parameter mismatch; "
            f"missing={missing[:4]} extra={extra[:4]}")
    for name, tensor in have.items():
        arr = ckpt["params"][name]
        if arr.shape != tensor.data.shape:
            raise DataError(f"parameter {name}: checkpoint {arr.shape} != model "
                            f"{tensor.data.shape}")
        tensor.data = np.asarray(arr, dtype=np.float64).copy()
    return model, ckpt


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


class Trainer:
    def __init__(self, model: AsaModel, run: RunConfig, dataset: SceneDataset,
                 out_dir: str | Path, stage: int = 1,
                 loss_weights: LossWeights | None = None):
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        if stage == 2 and not model.cfg.use_coi:
            raise ConfigError("stage 2 requires a model built with the refinement stage")
        self.model = model
        self.run = run
        self.dataset = dataset
        self.stage = stage
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.weights = loss_weights or LossWeights()
        t = run.train
        seeds = [rec["seed"] for rec in dataset.records]
        if t.val_mod > 0:
            self.val_idx = [i for i, s in enumerate(seeds) if s % t.val_mod == 0]
            self.train_idx = [i for i, s in enumerate(seeds) if s % t.val_mod != 0]
        else:
            self.val_idx = []
            self.train_idx = list(range(len(dataset)))
        if not self.train_idx:
            raise ConfigError("training split is empty")
        trainable = (model.net1_parameters() if stage == 1
                     else model.net2_parameters())
        self.optimizer = Adam(trainable, lr=t.lr)
        self.frozen_checksum = (parameter_checksum(model.net1_parameters())
                                if stage == 2 else None)
        self._scene_cache: dict[int, tuple] = {}
        self._net1_cache: dict[int, object] = {}
        self.step = 0
        self.best_val = np.inf
        self._stall = 0
        self.loss_rows: list[tuple] = []
        self.epoch_rows: list[EpochStats] = []

    # data ------------------------------------------------------------
    def _scene(self, idx: int):
        if idx not in self._scene_cache:
            scene = self.dataset.load(idx)
            tgt = targets_from_scene(scene, self.model.cfg.n_slots,
                                     self.model.cfg.n_classes)
            self._scene_cache[idx] = (scene, tgt)
        return self._scene_cache[idx]

    # losses ------------------------------------------------------------
    def _net1_state(self, idx: int, mixture: np.ndarray):
        """Frozen stage-1 forward, cached per scene during stage-2 training
        (no graph: its outputs enter stage 2 as constants)."""
        if idx not in self._net1_cache:
            self._net1_cache[idx] = self.model.forward_net1(mixture)
        return self._net1_cache[idx]

    def scene_grads(self, idx: int, rng) -> tuple[dict[str, np.ndarray], dict]:
        scene, tgt = self._scene(idx)
        named = (self.model.net1_parameters() if self.stage == 1
                 else self.model.net2_parameters())
        if self.stage == 2:
            state = self._net1_state(idx, scene.mixture)
        with GradGraph() as graph:
            if self.stage == 1:
                est = self.model.forward_net1(scene.mixture, rng=rng).net1
            else:
                est = self.model.forward_net2(state, rng=rng).net2
            total, comps = obj.joint_loss(
                est, tgt, self.weights,
                split_direct_reverb=self.model.cfg.split_direct_reverb,
                use_noise=self.model.cfg.use_noise_decoder)
            grads = graph.backward(total)
        out = {name: grads[p] for name, p in named.items() if p in grads}
        return out, comps

    def scene_loss(self, idx: int) -> dict:
        scene, tgt = self._scene(idx)
        if self.stage == 1:
            est = self.model.forward_net1(scene.mixture).net1
        else:
            est = self.model.forward_net2(self._net1_state(idx, scene.mixture)).net2
        _, comps = obj.joint_loss(
            est, tgt, self.weights,
            split_direct_reverb=self.model.cfg.split_direct_reverb,
            use_noise=self.model.cfg.use_noise_decoder)
        return comps

    # steps ------------------------------------------------------------
    def train_step(self, batch: list[int], rngs) -> dict:
        t = self.run.train
        if t.workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=t.workers) as pool:
                results = list(pool.map(self.scene_grads, batch, rngs))
        else:
            results = [self.scene_grads(i, r) for i, r in zip(batch, rngs)]
        summed: dict[str, np.ndarray] = {}
        mean_comps: dict[str, float] = {}
        for grads, comps in results:
            for name, g in grads.items():
                summed[name] = summed.get(name, 0.0) + g
            for key, val in comps.items():
                mean_comps[key] = mean_comps.get(key, 0.0) + val / len(results)
        clip_gradients(summed, t.grad_clip)
        self.optimizer.step(summed)
        self.step += 1
        self.loss_rows.append((self.step,) + tuple(
            mean_comps.get(k, 0.0) for k in LOSS_LOG_HEADER[1:]))
        return mean_comps

    def _epoch_batches(self, epoch: int) -> list[list[int]]:
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=(0xBA7C, self.run.train.seed, epoch)))
        idx = list(np.array(self.train_idx)[order.permutation(len(self.train_idx))])
        bs = self.run.train.batch_size
        return [idx[i : i + bs] for i in range(0, len(idx), bs)]

    def validation_loss(self) -> float:
        return float(np.mean([self.scene_loss(i)["total"] for i in self.val_idx]))

    def run_training(self, on_step=None) -> list[EpochStats]:
        """Run the configured epochs (or until the step cap). ``on_step`` is
        called after every optimiser step; returning True stops training
        early (used by convergence-gated harnesses)."""
        t = self.run.train
        stop = False
        try:
            with threadpool_limits(limits=t.blas_threads):
                for epoch in range(t.epochs):
                    train_losses = []
                    for batch in self._epoch_batches(epoch):
                        rngs = [np.random.default_rng(np.random.SeedSequence(
                            entropy=(0xD20, t.seed, self.step, k)))
                            for k in range(len(batch))]
                        comps = self.train_step(batch, rngs)
                        train_losses.append(comps["total"])
                        if on_step is not None and on_step(self):
                            stop = True
                        if t.steps is not None and self.step >= t.steps:
                            stop = True
                        if stop:
                            break
                    self._end_epoch(epoch, float(np.mean(train_losses)))
                    if stop:
                        break
        except NumericError as exc:
            last_good = self.out_dir / "last_good.npz"
            self.save(last_good)
            raise NumericError(
                f"{exc}; aborted at step {self.step}, last-good checkpoint "
                f"written to {last_good}") from exc
        self._flush_logs()
        return self.epoch_rows

    def _end_epoch(self, epoch: int, train_loss: float) -> None:
        # without a validation split the schedule follows the training loss
        val = self.validation_loss() if self.val_idx else train_loss
        if self.stage == 2:
            now = parameter_checksum(self.model.net1_parameters())
            if now != self.frozen_checksum:
                raise ConfigError("stage-1 parameters changed during stage-2 training")
        if val < self.best_val:
            self.best_val = val
            self._stall = 0
            self.save(self.out_dir / "best.npz")
        else:
            self._stall += 1
            if self._stall >= self.run.train.lr_patience:
                self.optimizer.lr /= 2.0
                self._stall = 0
        self.save(self.out_dir / "last.npz")
        self.epoch_rows.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                          val_loss=val, lr=self.optimizer.lr))
        self._flush_logs()

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.model, self.stage,
                               epoch=len(self.epoch_rows), best_val=self.best_val,
                               run=self.run, optimizer=self.optimizer)

    def _flush_logs(self) -> None:
        step_log = self.out_dir / "train_log.csv"
        with open(step_log, "w") as fh:
            fh.write(",".join(LOSS_LOG_HEADER) + "\n")
            for row in self.loss_rows:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row) + "\n")
        epoch_log = self.out_dir / "val_log.csv"
        with open(epoch_log, "w") as fh:
            fh.write("epoch,train_loss,val_loss,lr\n")
            for st in self.epoch_rows:
                fh.write(f"{st.epoch},{st.train_loss!r},{st.val_loss!r},{st.lr!r}\n")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def oracle_estimate(tgt: TrainingTargets) -> AsaEstimate:
    """Ground truth wrapped as an estimate (oracle-injection mode)."""
    return AsaEstimate(
        class_posterior=Tensor(tgt.class_target), activation=Tensor(tgt.activation),
        event_map=Tensor(tgt.event_map), doa=Tensor(tgt.doa),
        direct_wav=Tensor(tgt.direct), reverb_wav=Tensor(tgt.reverb),
        noise_wav=Tensor(tgt.noise))


def evaluate_model(model: AsaModel | None, dataset: SceneDataset, run: RunConfig,
                   indices: list[int] | None = None, stage: int = 1,
                   oracle: bool = False,
                   weights: LossWeights | None = None):
    """Per-scene metric reports plus the micro-aggregated summary.

    stage=2 scores the refined outputs; oracle=True scores the ground truth
    against itself (metric-identity harness). Returns (rows, aggregate,
    seld_results) where rows are (scene_id, MetricsReport).
    """
    if indices is None:
        indices = list(range(len(dataset)))
    weights = weights or LossWeights()
    rows = []
    selds = []
    for idx in indices:
        scene = dataset.load(idx)
        tgt = targets_from_scene(scene, model.cfg.n_slots if model else scene.n_objects,
                                 run.model.n_classes)
        if oracle:
            est = oracle_estimate(tgt)
            split = True
        else:
            state = model.forward_net1(scene.mixture)
            if stage == 2:
                model.forward_net2(state)
                est = state.net2
            else:
                est = state.net1
            split = model.cfg.split_direct_reverb
        report, seld = mx.evaluate_estimate(
            est, tgt, scene.mixture, run.frames_per_segment, weights,
            split_direct_reverb=split)
        rows.append((dataset.records[idx]["scene_id"], report))
        selds.append(seld)
    agg_seld = mx.aggregate_seld(selds)
    si = [r.si_sdri for _, r in rows if np.isfinite(r.si_sdri)]
    sd = [r.sdri for _, r in rows if np.isfinite(r.sdri)]
    si_s = [r.si_sdr_s for _, r in rows if np.isfinite(r.si_sdr_s)]
    si_h = [r.si_sdr_h for _, r in rows if np.isfinite(r.si_sdr_h)]
    aggregate = mx.MetricsReport(
        si_sdri=float(np.mean(si)) if si else np.nan,
        sdri=float(np.mean(sd)) if sd else np.nan,
        er=agg_seld.er, f1=agg_seld.f1, le_deg=agg_seld.le_deg, lr=agg_seld.lr,
        seld=mx.seld_score(*agg_seld.as_tuple()),
        si_sdr_s=float(np.mean(si_s)) if si_s else np.nan,
        si_sdr_h=float(np.mean(si_h)) if si_h else np.nan,
        n_objects=sum(r.n_objects for _, r in rows))
    return rows, aggregate, agg_seld
