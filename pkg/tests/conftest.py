import pytest

from atsnas.config import config_from_dict, merge, toy_settings
from atsnas.genome import ConvOp, LayerSpec, SearchSpaceConfig, Skip, uniform_genome


def make_toy_space(**overrides) -> SearchSpaceConfig:
    base = dict(
        num_scales=1,
        conv_ops=(ConvOp.VANILLA,),
        kernel_sizes=(3,),
        se_ratios=(0.0,),
        skips=(Skip.NONE,),
        channels=(4, 8, 16),
        repeats=(1,),
        input_resolution=(8, 8, 3),
    )
    base.update(overrides)
    return SearchSpaceConfig(**base)


def make_toy_config(out, seed=0, **sections):
    data = merge(merge({"seed": seed, "output_dir": str(out)}, toy_settings()), sections)
    return config_from_dict(data)


@pytest.fixture
def toy_space():
    return make_toy_space()


@pytest.fixture
def fixture_genome():
    """Two-scale genome with a mix of operations; used for golden values."""
    g = uniform_genome(2, LayerSpec(ConvOp.VANILLA, 3, 0.0, Skip.NONE, 16), repeats=1, input_resolution=(16, 16, 3))
    g = g.with_layer(1, LayerSpec(ConvOp.DEPTHWISE, 5, 0.25, Skip.RESIDUAL, 16), repeats=2)
    g = g.with_layer(4, LayerSpec(ConvOp.INVERTED_BOTTLENECK, 3, 0.0, Skip.NONE, 8))
    g = g.with_layer(6, LayerSpec(ConvOp.VANILLA, 5, 0.25, Skip.NONE, 24), repeats=3)
    return g


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
