import numpy as np
import pytest
import torch

from cascadeseg.phantom import PhantomConfig, generate_phantom

# criterion number -> "PASS ..." / "FAIL ..." line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_phantom():
    """A 32^3, 4-class phantom shared by the fast tests."""
    return generate_phantom(PhantomConfig(shape=(32, 32, 32), num_foreground_classes=4, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_SCHEDULE = dict(epochs=1, iterations_per_epoch=3)


def tiny_parts(num_foreground_classes=2, K=3, seed=0):
    from cascadeseg.networks import Net1Config, Net2Config, build_net1, build_net2
    from cascadeseg.sampler import AugmentConfig, SamplerConfig, prepare_case
    from cascadeseg.trainer import TrainSchedule

    iv, lv = generate_phantom(PhantomConfig(shape=(32, 32, 32),
                                            num_foreground_classes=num_foreground_classes, seed=seed))
    n = num_foreground_classes + 1
    torch.manual_seed(seed)
    net1 = build_net1(Net1Config(num_classes=n, base_width=2))
    net2 = build_net2(Net2Config(num_classes=n, base_width=2, K=K))
    cases = [prepare_case(iv, lv, (3.0, 3.0, 3.0))]
    sampler = SamplerConfig(subvolume_sizes=(16,), augmentation=AugmentConfig(enabled=False))
    schedule = TrainSchedule.desk(**TINY_SCHEDULE, seed=seed, learning_rate=1e-3)
    return dict(iv=iv, lv=lv, net1=net1, net2=net2, cases=cases, sampler=sampler, schedule=schedule)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A tiny model trained through all four steps, with its output directory."""
    from cascadeseg.trainer import Trainer

    parts = tiny_parts()
    out = tmp_path_factory.mktemp("tiny_run")
    trainer = Trainer(parts["net1"], parts["net2"], parts["cases"], parts["schedule"],
                      sampler_cfg=parts["sampler"], out_dir=out)
    trainer.run_all()
    return dict(parts, trainer=trainer, out=out)
