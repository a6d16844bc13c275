import numpy as np
import pytest
from hypothesis import settings

from urolesion.dataset import generate_synthetic, uniform_composition

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_manifest():
    """48 synthetic 32x32 frames, 6 per (procedure, modality, label) cell."""
    return generate_synthetic(uniform_composition(6), 32, seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(tmp_path_factory, tiny_manifest):
    """Short VGG run over all three scenarios on the tiny manifest."""
    from urolesion.architectures import NetworkSpec
    from urolesion.dataset import Procedure, domain_filter
    from urolesion.trainer import TrainConfig, run_matrix

    manifests = {p: domain_filter(tiny_manifest, [p]) for p in Procedure}
    config = TrainConfig(warm_epochs=1, finetune_epochs=2, batch_size=8, folds=2)
    out = tmp_path_factory.mktemp("bundle")
    return run_matrix(["vgg16"], [1, 2, 3], manifests, config, NetworkSpec("vgg16", (32, 32), 0.125), out)


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the caller still asserts."""
    def record(name: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name:<28} {detail}")
