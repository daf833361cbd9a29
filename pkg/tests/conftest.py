import numpy as np
import pytest
import torch

from patchseg.core import load_stack
from patchseg.sampler import BatchSpec, TrainingSet
from patchseg.synthdata import PhantomParams, generate_dataset
from patchseg.trainer import TrainConfig, train

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def small_params():
    return PhantomParams(height=64, width=64, lesion_radius_range=(5.0, 9.0), seed=11)


@pytest.fixture(scope="session")
def small_corpus(small_params, tmp_path_factory):
    """8 tiny stacks (H=64) for fast integration tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    manifest = generate_dataset(small_params, 8, out)
    stacks = [load_stack(out / e["stack_id"]) for e in manifest["stacks"]]
    labels = {e["stack_id"]: e["label"] for e in manifest["stacks"]}
    return {"dir": out, "manifest": manifest, "stacks": stacks, "labels": labels}


@pytest.fixture(scope="session")
def trained_tiny(small_corpus, tmp_path_factory):
    """A briefly trained tiny net: enough to be a real (non-constant) model."""
    out = tmp_path_factory.mktemp("trained_tiny")
    cfg = TrainConfig(
        spec=BatchSpec(32, 8, 1), total_steps=60, seed=3, width_preset="tiny"
    )
    model, records = train(TrainingSet(small_corpus["stacks"]), cfg, out)
    return {"model": model, "records": records, "out": out, "cfg": cfg}


@pytest.fixture()
def rng():
    return np.random.default_rng(123)
