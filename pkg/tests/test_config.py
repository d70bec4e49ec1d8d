"""INI parsing, canonical hashing, seed derivation."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from stormcast.config import (
    ExperimentConfig,
    apply_overrides,
    canonical_text,
    config_hash,
    derive_seed,
    load_config,
    to_ini_text,
)
from stormcast.errors import ConfigError

REPO_ROOT = Path(__file__).resolve().parents[1]


def write_cfg(tmp_path, text: str) -> Path:
    p = tmp_path / "cfg.ini"
    p.write_text(text)
    return p


def test_default_round_trip(tmp_path):
    cfg = ExperimentConfig()
    p = write_cfg(tmp_path, to_ini_text(cfg))
    assert load_config(p) == cfg


def test_shipped_default_config_loads():
    cfg = load_config(REPO_ROOT / "configs" / "default.ini")
    assert cfg == ExperimentConfig()


def test_non_default_round_trip(tmp_path):
    cfg = ExperimentConfig(
        seed=9,
        threshold=1 / 3,                 # full-precision float survives
        synth=replace(ExperimentConfig().synth, events=4, frames=12),
        train=replace(ExperimentConfig().train, learning_rate=3e-4,
                      conv_channels=(16, 16, 8, 8)),
        train_events=3,
        test_events=1,
    )
    p = write_cfg(tmp_path, to_ini_text(cfg))
    assert load_config(p) == cfg


def test_partial_file_fills_defaults(tmp_path):
    p = write_cfg(tmp_path, "[run]\nseed = 5\n")
    cfg = load_config(p)
    assert cfg.seed == 5
    assert cfg.synth == ExperimentConfig().synth
    assert cfg.train == ExperimentConfig().train


def test_unknown_section_rejected(tmp_path):
    p = write_cfg(tmp_path, "[model]\nlr = 0.1\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert "unknown section" in str(e.value)


def test_unknown_key_rejected(tmp_path):
    p = write_cfg(tmp_path, "[run]\nseeed = 5\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert "seeed" in str(e.value)


def test_train_seed_is_not_a_key(tmp_path):
    # the training seed is derived from the run seed, never set directly
    p = write_cfg(tmp_path, "[train]\nseed = 5\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_bad_value_rejected(tmp_path):
    p = write_cfg(tmp_path, "[run]\nseed = five\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert "seed" in str(e.value)


def test_bad_tuple_rejected(tmp_path):
    p = write_cfg(tmp_path, "[train]\nconv_channels = 8, x, 8, 8\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_tuple_key_parses(tmp_path):
    p = write_cfg(
        tmp_path,
        "[run]\ntrain_events = 3\ntest_events = 1\n"
        "[synth]\nevents = 4\n"
        "[train]\nconv_channels = 8, 8, 8, 8\nkernel_sizes = 5, 3, 3, 3\n",
    )
    cfg = load_config(p)
    assert cfg.train.conv_channels == (8, 8, 8, 8)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.ini")


def test_unparseable_file(tmp_path):
    p = write_cfg(tmp_path, "[run\nbroken")
    with pytest.raises(ConfigError):
        load_config(p)


def test_invalid_combination_rejected(tmp_path):
    # synth event count must cover the requested split
    p = write_cfg(tmp_path, "[run]\ntrain_events = 6\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert "events" in str(e.value)


@pytest.mark.parametrize("bad", [
    dict(seed=-1),
    dict(threshold=1.5),
    dict(oversample_k=3),
    dict(val_fraction=0.6),
    dict(train_events=0),
])
def test_validate_rejects(bad):
    with pytest.raises(ConfigError):
        replace(ExperimentConfig(), **bad).validate()


# ---------------------------------------------------------------------------
# Canonical form and hash


def test_hash_is_16_hex():
    h = config_hash(ExperimentConfig())
    assert len(h) == 16
    int(h, 16)


def test_hash_ignores_directories():
    a = ExperimentConfig()
    b = replace(a, data_dir="/somewhere/else", out_dir="/tmp/x")
    assert config_hash(a) == config_hash(b)
    assert "data_dir" not in canonical_text(a)
    assert "out_dir" not in canonical_text(a)


def test_ini_text_keeps_directories():
    text = to_ini_text(ExperimentConfig(data_dir="dd", out_dir="oo"))
    assert "data_dir = dd" in text and "out_dir = oo" in text


@pytest.mark.parametrize("change", [
    lambda c: replace(c, seed=1),
    lambda c: replace(c, threshold=0.4),
    lambda c: replace(c, oversample_k=2),
    lambda c: replace(c, val_fraction=0.2),
    lambda c: replace(c, synth=replace(c.synth, frames=25)),
    lambda c: replace(c, synth=replace(c.synth, noise_sigma_r=1.9)),
    lambda c: replace(c, train=replace(c.train, learning_rate=2e-3)),
    lambda c: replace(c, train=replace(c.train, lstm_hidden=32)),
])
def test_hash_tracks_every_effective_knob(change):
    base = ExperimentConfig()
    assert config_hash(change(base)) != config_hash(base)


def test_canonical_text_is_stable():
    assert canonical_text(ExperimentConfig()) == canonical_text(ExperimentConfig())


def test_canonical_round_trip_preserves_hash(tmp_path):
    cfg = ExperimentConfig(seed=3, threshold=0.55)
    p = write_cfg(tmp_path, to_ini_text(cfg))
    assert config_hash(load_config(p)) == config_hash(cfg)


# ---------------------------------------------------------------------------
# Derived seeds


def test_derive_seed_deterministic():
    assert derive_seed(0, "train") == derive_seed(0, "train")


def test_derive_seed_separates_stages():
    seeds = {derive_seed(0, s) for s in ("synth", "split", "train")}
    assert len(seeds) == 3


def test_derive_seed_separates_base_seeds():
    assert derive_seed(0, "train") != derive_seed(1, "train")


def test_derive_seed_range():
    for s in range(20):
        v = derive_seed(s, "train")
        assert 0 <= v < 2 ** 63


def test_overrides_apply_and_validate():
    cfg = ExperimentConfig()
    got = apply_overrides(cfg, seed=4, out_dir="elsewhere", threshold=0.6)
    assert (got.seed, got.out_dir, got.threshold) == (4, "elsewhere", 0.6)
    assert got.synth == cfg.synth
    with pytest.raises(ConfigError):
        apply_overrides(cfg, oversample_k=5)
