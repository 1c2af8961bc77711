import pytest

from latentcast.blocks import VitSpec
from latentcast.dataset import SyntheticConfig, generate_synthetic, split_field
from latentcast.model import ModelConfig
from latentcast.training import DataBundle, TrainConfig


def small_model_config(catalog, grid=(16, 32)):
    return ModelConfig(C=catalog.C, key_indices=catalog.key_indices, grid=grid, d=4,
                       encoder_widths=(8, 8), decoder_widths=(8, 8, 8),
                       vit=VitSpec(embed_dim=16, depth=1, heads=2))


def small_train_config(**kw):
    base = dict(epochs=2, curriculum=(2, 4), boundaries=(0, 1, 2), lr0=1e-3, batch_size=2,
                steps_per_epoch=3, val_batches=1)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="session")
def small_data():
    f, cat = generate_synthetic(SyntheticConfig(seed=5, T=240))
    tr, va, te = split_field(f)
    return DataBundle.from_fields(tr, cat, va), cat, te


# acceptance summary: one line per criterion, printed after the run

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    number, title = mark.args
    failed = call.excinfo is not None
    prev = _CRITERIA.get(number, (title, True))
    _CRITERIA[number] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
