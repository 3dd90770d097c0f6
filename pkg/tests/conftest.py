import numpy as np
import pytest

from nessst import basedet, nessnet, stability, synth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def smoke_dataset():
    """Training samples from rendered corner/wedge/T-junction/blob/edge images."""
    det = basedet.DetectorConfig()
    cfg = stability.StabilityConfig()
    out = []
    for img in synth.pattern_images(150, seed=0):
        for g in stability.generate_ground_truth(img, det, 3, cfg):
            patch = stability.net_patches(img, [g.row], [g.col])[0]
            out.append(nessnet.TrainSample(patch, g.keypoint.s, g.lambda_gt))
    return out


@pytest.fixture(scope="session")
def smoke_training(smoke_dataset):
    cfg = nessnet.TrainConfig(epochs=200, seed=0)
    params, trace = nessnet.train(smoke_dataset, cfg)
    return params, trace, cfg


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def record_criterion(request):
    """Log one acceptance line; the summary is printed at the end of the run."""

    def rec(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_CRITERIA][number] = line
        print(line)
        return ok

    return rec


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
