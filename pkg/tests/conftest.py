import pytest

from gazenet.synth import SynthConfig, generate_dataset


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(seed=3, persons=4, samples_per_person=24)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_config):
    """Four persons, 24 samples each, desk image size."""
    return generate_dataset(small_config, tmp_path_factory.mktemp("small"))


@pytest.fixture(scope="session")
def overfit_run(small_dataset):
    """Desk network fitted to 8 samples; returns (net, curve, train records, seconds)."""
    import time

    from gazenet.models import get_preset
    from gazenet.training import evaluate, get_train_preset, train

    data = small_dataset.subset(range(0, 96, 12))
    # a memorization check: augmentation off, shorter schedule decayed twice
    cfg = get_train_preset("desk").replace(max_steps=1200, epochs=1200, lr_decay_every=500,
                                           translate_frac=0.0, scale_range=(1.0, 1.0))
    t0 = time.perf_counter()
    net, curve = train(data, get_preset("desk"), cfg)
    records = evaluate(net, data)
    return net, curve, records, time.perf_counter() - t0
