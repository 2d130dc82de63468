"""Shared fixtures.

Unit tests run at micro scale (1/16 width, 16px inputs) so the fast suite
stays fast; the acceptance module uses the desk-scale fixtures below, which
train two width-0.25 nets once per session. Set STITCHLAB_TEST_CACHE to a
directory to reuse those trained nets across pytest invocations while
iterating locally.
"""

import os
from pathlib import Path

import pytest
import torch

import stitchlab as sl

torch.set_num_threads(2)

MICRO_WIDTH = 1 / 16
MICRO_RES = 16

DESK_WIDTH = 0.25
DESK_TRAIN_SIZE = 2000
DESK_TEST_SIZE = 1000
DESK_BASE_EPOCHS = 8
DESK_BASE_LR = 0.05


@pytest.fixture()
def micro_net():
    return sl.build_network("small-residual", 10, seed=0, width=MICRO_WIDTH,
                            input_hw=MICRO_RES)


@pytest.fixture()
def micro_pair():
    front = sl.build_network("small-residual", 10, seed=1, width=MICRO_WIDTH,
                             input_hw=MICRO_RES)
    end = sl.build_network("small-residual", 10, seed=2, width=MICRO_WIDTH,
                           input_hw=MICRO_RES)
    return front, end


@pytest.fixture(scope="session")
def micro_data():
    train = sl.load_dataset(sl.DatasetSpec("synthetic", "train", size=320,
                                           resolution=MICRO_RES))
    test = sl.load_dataset(sl.DatasetSpec("synthetic", "test", size=200,
                                          resolution=MICRO_RES))
    return train, test


def _cache_dir(tmp_path_factory):
    env = os.environ.get("STITCHLAB_TEST_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("netcache")


@pytest.fixture(scope="session")
def desk_data():
    train = sl.load_dataset(sl.DatasetSpec("synthetic", "train", size=DESK_TRAIN_SIZE))
    test = sl.load_dataset(sl.DatasetSpec("synthetic", "test", size=DESK_TEST_SIZE))
    return train, test


def _train_or_load(cache: Path, name: str, arch_id: str, seed: int, train_ds,
                   epochs=DESK_BASE_EPOCHS, width=DESK_WIDTH):
    path = cache / name
    if path.with_suffix(".pt").exists():
        return sl.load_network(path)
    recipe = sl.BaseTrainRecipe(epochs=epochs, lr=DESK_BASE_LR, eval_every=0)
    net, _ = sl.train_base(arch_id, train_ds, recipe, seed=seed, width=width)
    sl.save_network(net, path)
    return net


@pytest.fixture(scope="session")
def desk_nets(desk_data, tmp_path_factory):
    """Two independently seeded non-robust width-0.25 nets on the synthetic task."""
    cache = _cache_dir(tmp_path_factory)
    train, _ = desk_data
    front = _train_or_load(cache, "desk-front", "small-residual", 11, train)
    end = _train_or_load(cache, "desk-end", "small-residual", 22, train)
    return front, end
