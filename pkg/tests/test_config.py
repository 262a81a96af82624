import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wave3d.config import DEFAULTS, ExperimentConfig, fingerprint, seed_stream, seed_streams
from wave3d.errors import ConfigurationError


def _reversed(d):
    return {k: _reversed(v) if isinstance(v, dict) else v for k, v in reversed(list(d.items()))}


def test_defaults_validate():
    cfg = ExperimentConfig.from_dict()
    assert cfg.dt == 1 / 128
    assert cfg.window_lower == [1.3125] * 3


def test_fingerprint_ignores_key_order():
    assert fingerprint(_reversed(DEFAULTS)) == fingerprint(DEFAULTS)


@pytest.mark.parametrize(
    "override, changes",
    [
        ({"noise": {"beta": 0.5}}, True),
        ({"noise": {"seed": 1}}, True),
        ({"window": {"rho": 0.3}}, True),
        ({"levels": [3, 4, 5]}, True),
        ({"workers": 8}, False),
        ({"output": "elsewhere"}, False),
    ],
)
def test_fingerprint_tracks_semantic_keys(override, changes):
    base = ExperimentConfig.from_dict()
    assert (ExperimentConfig.from_dict(override).fingerprint != base.fingerprint) is changes


def test_load_and_dump_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict({"noise": {"beta": 1.5}})
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    assert ExperimentConfig.load(path) == cfg


@pytest.mark.parametrize("text", ["{not json", "[1, 2]"])
def test_load_rejects_bad_documents(tmp_path, text):
    path = tmp_path / "c.json"
    path.write_text(text)
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(path)


@pytest.mark.parametrize(
    "override",
    [
        {"noise": {"beta": 2.0}},
        {"noise": {"beta": 0.0}},
        {"noise": {"alpha": 1.0}},
        {"grid": {"steps": 100}},
        {"levels": [4, 3]},
        {"levels": [3, 8]},
        {"window": {"rho": 1.0}},
        {"window": {"t0": 1.0}},
        {"window": {"side": 2.0}},
        {"grid": {"L": 2.0}},
        {"window": {"lower": 0.1}},
        {"window": {"policy": "random"}},
        {"p": 0.0},
        {"replicas": 0},
        {"solver": {"wz_truncation": "half"}},
        {"solver": {"preset": "other"}},
        {"unknown": 1},
        {"grid": {"dx": 1}},
    ],
)
def test_invalid_configurations(override):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(override)


def test_seed_stream_is_deterministic():
    assert seed_stream(42, 7) == seed_stream(42, 7)
    assert seed_stream(42, 7) != seed_stream(43, 7)
    assert all(0 <= seed_stream(s, i) < 2**64 for s in (0, 2**64 - 1) for i in (0, 1, 10**12))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**64 - 1), st.lists(st.integers(0, 2**40), min_size=1, max_size=20))
def test_vectorised_stream_matches_scalar(master, indices):
    vec = seed_streams(master, indices)
    assert [int(x) for x in vec] == [seed_stream(master, i) for i in indices]


def test_no_collisions_in_a_million_seeds():
    seeds = seed_streams(20240611, np.arange(10**6))
    assert np.unique(seeds).size == 10**6


@pytest.mark.parametrize("a, b", [(0, 1), (1, 2), (20240611, 20240612)])
def test_streams_of_different_masters_are_disjoint(a, b):
    idx = np.arange(10**4)
    assert np.intersect1d(seed_streams(a, idx), seed_streams(b, idx)).size == 0


def test_config_json_is_sorted():
    cfg = ExperimentConfig.from_dict()
    assert list(json.loads(cfg.dumps())) == sorted(DEFAULTS)
