import pytest
import torch

from semcom_backdoor.model import ChannelSpec, TrainConfig, train
from semcom_backdoor.data import ingest_dataset, default_target
from semcom_backdoor.attack import PoisonPlan, make_patch_trigger, poison_datasets


FAST_CHANNEL = ChannelSpec("awgn", 10.0)


def fast_train_config(seed=0, epochs=3, cr=0.25):
    return TrainConfig(epochs=epochs, batch_size=64, compression_ratio=cr,
                       seed=seed, channel=FAST_CHANNEL)


@pytest.fixture(scope="session")
def small_data():
    return ingest_dataset("synthetic", 200, seed=11)


@pytest.fixture(scope="session")
def small_model(small_data):
    d_t, d_r = small_data
    model, losses = train(d_t, d_r, fast_train_config())
    return model


@pytest.fixture(scope="session")
def small_trigger():
    return make_patch_trigger((28, 28, 1), 4, 4, (0, 0), 1.0)


@pytest.fixture(scope="session")
def small_poisoned(small_data, small_trigger):
    d_t, d_r = small_data
    target = default_target(d_t)
    plan = PoisonPlan(0.1, target)
    gen = torch.Generator().manual_seed(42)
    p_t, p_r, realized = poison_datasets(d_t, d_r, plan, small_trigger, gen)
    return p_t, p_r, realized, target
