import os
import time

import numpy as np
import pytest

from amilab.model import NetworkSpec, TrainedModel, init_params
from amilab.pipeline import PipelineConfig, run_pipeline
from amilab.rng import Rng

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fixtures")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


@pytest.fixture(scope="session")
def reference():
    """The default pipeline run once per session: dataset, model, witnesses, 64 C&W examples."""
    t0 = time.perf_counter()
    run = run_pipeline(PipelineConfig())
    run.objects["wall_time"] = time.perf_counter() - t0
    return run


def random_network(seed: int) -> TrainedModel:
    """A small random CNN or MLP with at most 5 parametric/non-linear layers."""
    rng = Rng(seed)
    pick = lambda lo, hi: int(rng.integers(lo, hi, 1)[0])
    c, h = pick(1, 2), pick(5, 7)
    layers = []
    if seed % 3 != 2:
        layers += [{"type": "conv", "filters": pick(2, 3), "kh": pick(2, 3), "kw": pick(2, 3)}, {"type": "relu"}]
        if seed % 2 == 0:
            layers.append({"type": "maxpool"})
    layers.append({"type": "flatten"})
    if seed % 3 != 1:
        layers += [{"type": "dense", "out": pick(3, 6)}, {"type": "relu"}]
    layers.append({"type": "dense", "out": pick(2, 4)})
    spec = NetworkSpec((c, h, h), layers)
    params = init_params(spec, rng.spawn(1))
    # non-zero biases so every bias gradient is exercised
    params = {i: (w, rng.spawn(100 + i).uniform(-0.1, 0.1, b.shape)) for i, (w, b) in params.items()}
    return TrainedModel(spec, params)


BACKGROUND_SUPPORTS = {
    # channel -> (row, col, height, width) of the pixels its kernel reads
    3: (0, 0, 16, 2),   # left background columns only
    4: (0, 14, 16, 2),  # right background columns only
    5: (2, 2, 12, 12),  # spans every region plus background
}


def probe_model(num_classes: int = 8) -> TrainedModel:
    """One full-image conv layer, so each channel is a single unit with a planted support.

    Channels 0-2 are matched filters (variant 0 minus variant 1) over the
    eyes, nose and mouth regions of the jitter-free default layout; channels
    3-5 read the rectangles in ``BACKGROUND_SUPPORTS`` with random weights.
    """
    from amilab.datagen import default_attributes

    spec = NetworkSpec((1, 16, 16), [{"type": "conv", "filters": 6, "kh": 16, "kw": 16}, {"type": "relu"},
                                     {"type": "flatten"}, {"type": "dense", "out": num_classes}])
    rng = Rng(77)
    k = np.zeros((6, 1, 16, 16))
    for ch, attr in enumerate(default_attributes(jitter=0)):
        r, c, h, w = attr.region
        k[ch, 0, r:r + h, c:c + w] = attr.render(0) - attr.render(1)
    for ch, (r, c, h, w) in BACKGROUND_SUPPORTS.items():
        k[ch, 0, r:r + h, c:c + w] = rng.spawn(ch).uniform(-1.0, 1.0, (h, w))
    dense = rng.spawn(9).uniform(-1, 1, (num_classes, 6))
    return TrainedModel(spec, {0: (k, np.full(6, 0.5)), 3: (dense, np.zeros(num_classes))})


def receptive_field_overlap(model: TrainedModel, layer: int, region_mask: np.ndarray, bases) -> set[int]:
    """Units at ``layer`` that some pixel of ``region_mask`` can move, found by perturbing pixels one by one.

    Each pixel is pushed by +-0.25 around every base image; a unit overlaps the
    region if any such push changes its value.
    """
    from amilab.instrumentation import trace

    rows, cols = np.nonzero(region_mask)
    found = set()
    for base in np.asarray(bases):
        for step in (0.25, -0.25):
            batch = np.repeat(base[None], len(rows), axis=0)
            batch[np.arange(len(rows)), 0, rows, cols] += step
            ref = trace(model, base[None], [layer]).values[layer][0]
            moved = trace(model, batch, [layer]).values[layer]
            found |= {int(u) for u in np.flatnonzero(np.any(moved != ref, axis=0))}
    return found


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
