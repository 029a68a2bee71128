"""Shared fixtures: a micro-profile dataset and a briefly trained stage-1
checkpoint, built once per session for the harness-level tests."""

import pytest

from asakit.config import build_config
from asakit.model import AsaModel
from asakit.scenes import dataset_write, dataset_read, synthesize_scene
from asakit.training import Trainer


MICRO_RAW = {
    "profile": "micro",
    "train": {"epochs": 2, "n_scenes": 4, "batch_size": 2, "val_mod": 4,
              "seed": 0},
}


@pytest.fixture(scope="session")
def micro_run():
    return build_config(MICRO_RAW)


@pytest.fixture(scope="session")
def micro_dataset_dir(tmp_path_factory, micro_run):
    root = tmp_path_factory.mktemp("micro_ds")
    scenes = [synthesize_scene(micro_run.scene, s) for s in range(4)]
    dataset_write(root, scenes, force=True)
    return root


@pytest.fixture(scope="session")
def micro_stage1_run(tmp_path_factory, micro_run, micro_dataset_dir):
    """(out_dir, model) after two micro training epochs."""
    out = tmp_path_factory.mktemp("micro_stage1")
    model = AsaModel(micro_run.model, seed=0)
    trainer = Trainer(model, micro_run, dataset_read(micro_dataset_dir), out, stage=1)
    trainer.run_training()
    return out, model
