import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_tomography(angles=(0.0, 0.5, 1.1), refine_tilts=False, seed=0):
    """Small 8^3 tomography problem with four 4x4 tiles per projection."""
    from xrecon.models import Geometry, ModelConfig, TomographyModel
    from xrecon.optimizers import Adam
    from xrecon.params import ParamRegistry

    gen = np.random.default_rng(seed)
    truth = np.zeros((8, 8, 8, 2))
    truth[2:6, 2:6, 2:6, 0] = 1e-4
    truth[2:6, 2:6, 2:6, 1] = 2e-5
    truth += gen.uniform(0, 1e-5, truth.shape)
    wins = [(0, 4, 0, 4), (0, 4, 4, 8), (4, 8, 0, 4), (4, 8, 4, 8)]
    cfg = ModelConfig(1e-10, 1e-8, pure_projection=True)
    model = TomographyModel(cfg, Geometry(np.array(angles), tile_windows=wins), truth.shape)
    data = np.zeros((len(angles), 4, 4, 4))
    for a in range(len(angles)):
        for t, img in enumerate(model.forward(truth, {}, a, range(4))):
            data[a, t] = img

    def registry():
        reg = ParamRegistry()
        if refine_tilts:
            mask = np.zeros((3, len(angles)))
            mask[0, 1:] = 1
            reg.register("tilts", np.zeros((3, len(angles))), Adam(1e-3), 0, mask)
        return reg

    return model, data, truth, registry


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
