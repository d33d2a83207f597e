import numpy as np
import pytest

from crowdsim.core import CameraMeta, HeadPoint, Manifest, Sample, SceneMeta


def make_sample(i=0, heads=((5.0, 5.0),), level=0, time=720, weather=0, loc=0, cam=0,
                size=(32, 32), roi=None):
    h, w = size
    roi = roi or ((0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0))
    scene = SceneMeta(loc, CameraMeta(cam), roi, level)
    return Sample.build(f"img/{i}.png", w, h, [HeadPoint(*p) for p in heads], time, weather, scene)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid_manifest():
    """10 locations x 4 cameras x 3 images, labels only."""
    samples = []
    k = 0
    for loc in range(10):
        for cam in range(4):
            for _ in range(3):
                samples.append(make_sample(k, loc=loc, cam=cam))
                k += 1
    return Manifest(tuple(samples), "grid", 0)


@pytest.fixture(scope="session")
def image_manifest(tmp_path_factory):
    """A handful of rendered 48x64 images on disk."""
    from crowdsim.synthgen import GeneratorSpec, generate_dataset

    spec = GeneratorSpec(n_locations=1, cameras_per_location=2, images_per_level={1: 2}, image_size=(48, 64),
                         levels=(1,), seed=3, person_scale=2.0)
    return generate_dataset(spec, tmp_path_factory.mktemp("rendered"))


@pytest.fixture(scope="session")
def shift_task(tmp_path_factory):
    """Small color-shift two-domain task: 8 synthetic, 16 real (8 unlabeled, 8 test)."""
    from crowdsim.toy import color_shift_task

    root = tmp_path_factory.mktemp("shift")
    task = color_shift_task(root, seed=0, per_scene=1)
    task.root = root
    return task


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(num, ok, detail):
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
