"""Command-line entry point: `asa synth|train|eval|diag`.

Every run writes its artifacts under --out together with run.json (argv +
full config echo), which is sufficient to reproduce the run from scratch.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .config import RunConfig, config_echo, load_config
from .errors import AsaError, ConfigError, DataError, NumericError
from .model import AsaModel
from .scenes import SceneDataset, dataset_read, dataset_write, synthesize_scene
from .training import (Trainer, evaluate_model, model_from_checkpoint,
                       save_checkpoint)
from . import reports

EXIT_CODES = {ConfigError: 2, DataError: 3, NumericError: 4}


def _write_run_manifest(out_dir: Path, args: argparse.Namespace, run: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool_version": __version__,
        "argv": [a for a in sys.argv[1:]] or [args.command],
        "config": config_echo(run),
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    run = load_config(args.config)
    out = _prepare_out(args.out, args.force)
    seeds = [args.seed + i for i in range(run.train.n_scenes)]
    scenes = [synthesize_scene(run.scene, s) for s in seeds]
    dataset_write(out, scenes, force=True)
    _write_run_manifest(out, args, run)
    hist = Counter(int(c) for scene in scenes for c in scene.class_ids)
    print(f"wrote {len(scenes)} scenes to {out}")
    print("class histogram:", dict(sorted(hist.items())))
    return 0


def _load_stage2_init(args, run: RunConfig) -> AsaModel:
    if not args.init:
        raise ConfigError("stage 2 requires --init pointing at a stage-1 checkpoint")
    model, ckpt = model_from_checkpoint(args.init)
    if ckpt["meta"]["stage"] != 1:
        raise ConfigError(
            f"--init checkpoint is stage {ckpt['meta']['stage']}, expected stage 1")
    if not model.cfg.use_coi:
        raise ConfigError("stage-1 checkpoint was built without the refinement stage")
    return model


def cmd_train(args) -> int:
    run = load_config(args.config)
    dataset = dataset_read(args.dataset)
    _check_dataset_matches(run, dataset)
    out = _prepare_out(args.out, args.force)
    if args.stage == 1:
        model = AsaModel(run.model, seed=run.train.seed)
    else:
        model = _load_stage2_init(args, run)
    trainer = Trainer(model, run, dataset, out, stage=args.stage)
    _write_run_manifest(out, args, run)
    stats = trainer.run_training()
    for st in stats:
        print(f"epoch {st.epoch}: train {st.train_loss:.4f} "
              f"val {st.val_loss:.4f} lr {st.lr:g}")
    print(f"best validation loss {trainer.best_val:.4f}; "
          f"checkpoints under {out}")
    return 0


def _eval_stages(model: AsaModel, stage: int) -> list[tuple[str, int]]:
    if stage == 2:
        return [("net1", 1), ("net2", 2)]
    return [("net1", 1)]


def _check_config_matches(run: RunConfig, ckpt_meta: dict) -> None:
    import dataclasses

    want = dataclasses.asdict(run.model)
    have = ckpt_meta["config"]["model"]
    diff = [f"  {key}: config {want[key]!r} != checkpoint {have.get(key)!r}"
            for key in want if want[key] != have.get(key)]
    if diff:
        raise ConfigError("model config does not match the checkpoint:\n"
                          + "\n".join(diff))


def _check_dataset_matches(run: RunConfig, dataset: SceneDataset) -> None:
    if not len(dataset):
        raise DataError("dataset is empty")
    rec = dataset.records[0]
    if rec["sample_rate"] != run.scene.sample_rate:
        raise DataError(f"dataset sample rate {rec['sample_rate']} != config "
                        f"{run.scene.sample_rate}")


def cmd_eval(args) -> int:
    run = load_config(args.config)
    dataset = dataset_read(args.dataset)
    out = _prepare_out(args.out, args.force)
    _check_dataset_matches(run, dataset)
    if args.oracle:
        rows, agg, seld = evaluate_model(None, dataset, run, oracle=True)
        scene_rows, aggregates = {"oracle": rows}, {"oracle": agg}
        model = None
        stage = 1
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        model, ckpt = model_from_checkpoint(args.checkpoint)
        _check_config_matches(run, ckpt["meta"])
        stage = args.stage if args.stage else ckpt["meta"]["stage"]
        scene_rows, aggregates = {}, {}
        for label, st in _eval_stages(model, stage):
            rows, agg, seld = evaluate_model(model, dataset, run, stage=st)
            scene_rows[label] = rows
            aggregates[label] = agg
    path = reports.metrics_table(out / "metrics.csv", scene_rows, aggregates)
    _write_run_manifest(out, args, run)
    for label, agg in aggregates.items():
        print(f"{label}: si_sdri {agg.si_sdri:.2f} dB, sdri {agg.sdri:.2f} dB, "
              f"er {agg.er:.3f}, f1 {agg.f1:.3f}, le {agg.le_deg:.1f} deg, "
              f"lr {agg.lr:.3f}, seld {agg.seld:.3f}")
    print(f"metrics written to {path}")
    return 0


def cmd_diag(args) -> int:
    run = load_config(args.config)
    dataset = dataset_read(args.dataset)
    _check_dataset_matches(run, dataset)
    out = _prepare_out(args.out, args.force)
    model, ckpt = model_from_checkpoint(args.checkpoint)
    _check_config_matches(run, ckpt["meta"])
    stage = ckpt["meta"]["stage"]
    scene = dataset.load(0)

    state = model.forward_net1(scene.mixture)
    if state.window_params is not None:
        reports.window_trace_report(out, state.window_params, model.cfg.stft)
    if stage == 2 and model.cfg.use_coi:
        model.forward_net2(state)
        reports.attention_map_report(out, state.attention_maps)
    else:
        print("attention maps skipped: checkpoint has no trained stage-2 "
              "parameters (stage 1)", file=sys.stderr)

    reverb_kernel = (model.dec1.reverb.conv1.w.data
                     if model.dec1.reverb is not None else None)
    reports.kernel_similarity_report(out, model.dec1.doa.stages[0].conv.w.data,
                                     model.dec1.direct.conv1.w.data, reverb_kernel)

    _, _, seld = evaluate_model(model, dataset, run, stage=stage)
    reports.le_histogram_report(out, seld.pair_angles)
    from .metrics import per_class_recall
    reports.recall_report(out, per_class_recall(seld, run.model.n_classes))
    _write_run_manifest(out, args, run)
    print(f"diagnostics written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asa",
        description="Synthetic-scene auditory analysis: dataset synthesis, "
                    "two-stage training, evaluation, diagnostics.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="JSON config file (defaults to the tiny profile)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true",
                        help="overwrite a non-empty output directory")

    p = sub.add_parser("synth", parents=[common], help="synthesise a dataset")
    p.add_argument("--seed", type=int, default=0, help="base scene seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--init", default=None,
                   help="stage-1 checkpoint (required for --stage 2)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--stage", type=int, choices=(1, 2), default=None,
                   help="override the checkpoint's stage for reporting")
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diag", parents=[common], help="emit diagnostics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_diag)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AsaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for klass, code in EXIT_CODES.items():
            if isinstance(exc, klass):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
