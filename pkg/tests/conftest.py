"""Shared tiny-scale fixtures: one small dataset and pipeline per session."""

import numpy as np
import pytest

from promptscene.config import RunConfig, config_from_dict, config_to_dict
from promptscene.model import Pipeline
from promptscene.scenegen import generate_dataset


def tiny_config(**train_over):
    data = config_to_dict(RunConfig())
    data["seed"] = 11
    data["scene"].update({
        "n_points_min": 320, "n_points_max": 360, "n_objects_min": 2,
        "n_objects_max": 3, "camera_width": 24, "camera_height": 18,
    })
    data["model"].update({
        "hidden_dim": 24, "decoder_layers": 1, "num_queries": 6,
        "fourier_freqs": 12, "class_emb_dim": 8, "points_per_segment": 24,
        "point_hidden": 12, "fh_min_size": 24, "gen_blocks": 1, "gen_max_len": 10,
    })
    data["train"].update({"steps": 4, "batch_size": 2, "log_every": 0})
    data["train"].update(train_over)
    return config_from_dict(data)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    return generate_dataset(tiny_cfg.seed, 2, tiny_cfg.scene)


@pytest.fixture(scope="session")
def tiny_pipeline(tiny_cfg, tiny_dataset):
    scenes, _tasks = tiny_dataset
    pipe = Pipeline(tiny_cfg)
    caches = pipe.build_caches(scenes)
    return pipe, caches
