import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthaudio import make_tree  # noqa: E402


@pytest.fixture
def wav_tree(tmp_path):
    """Three genres, two 30 s tracks each."""
    return make_tree(tmp_path / "wav", genres=3, tracks_per_genre=2)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Eight genres x one track, preprocessed to 64x64 images."""
    from eavit import dsp

    root = tmp_path_factory.mktemp("micro")
    make_tree(root / "wav", genres=8, tracks_per_genre=1)
    dsp.preprocess_dataset(root / "wav", root / "data", dsp.DspConfig(image_size=64))
    return root / "data" / "manifest.csv"
