import numpy as np
import pytest

from uwbloc.constants import SPEED_OF_LIGHT
from uwbloc.corpus import (
    ChannelState,
    CorpusConfig,
    WaveformRecord,
    draw_bias,
    generate_corpus,
    generate_waveform,
    load_corpus,
    save_corpus,
    single_path_config,
)
from uwbloc.errors import CorpusFormatError, CorpusVersionError

WALL_DELAY = 0.32 / SPEED_OF_LIGHT  # 1.0674 ns


def test_default_corpus_counts(default_split):
    los, nlos, _ = default_split
    assert len(los) == 105
    assert len(nlos) == 174


def test_los_records_have_zero_bias(default_split):
    los, _, _ = default_split
    assert all(r.true_bias == 0.0 for r in los)


def test_nlos_bias_support(default_split):
    _, nlos, config = default_split
    biases = np.array([r.true_bias for r in nlos])
    assert biases.min() >= WALL_DELAY
    assert biases.max() <= config.bias_max
    assert WALL_DELAY == pytest.approx(1.0674e-9, rel=1e-4)


def test_draw_bias_los_is_exactly_zero():
    rng = np.random.default_rng(0)
    config = CorpusConfig()
    assert all(draw_bias(config, ChannelState.LOS, rng) == 0.0 for _ in range(100))


def test_draw_bias_support_bound_on_many_draws():
    config = CorpusConfig()
    rng = np.random.default_rng(123)
    draws = np.array([draw_bias(config, ChannelState.NLOS, rng) for _ in range(100_000)])
    assert draws.min() >= WALL_DELAY
    assert draws.max() <= config.bias_max
    # zero mass below the support bound
    assert np.count_nonzero(draws < WALL_DELAY) == 0


def test_draw_bias_tail_decreases():
    config = CorpusConfig()
    rng = np.random.default_rng(321)
    draws = np.array([draw_bias(config, ChannelState.NLOS, rng) for _ in range(100_000)])
    counts, _ = np.histogram(draws, bins=25, range=(WALL_DELAY, config.bias_max))
    # strictly decreasing density: each bin below the previous within noise
    for a, b in zip(counts[:-1], counts[1:]):
        assert b <= a + 4.0 * np.sqrt(max(a, 1.0))


def test_generate_corpus_deterministic():
    config = CorpusConfig(n_los=3, n_nlos=4, seed=777)
    one = generate_corpus(config)
    two = generate_corpus(config)
    for a, b in zip(one, two):
        assert a.true_distance == b.true_distance
        assert a.true_bias == b.true_bias
        assert np.array_equal(a.samples, b.samples)


def test_zero_los_count_gives_pure_nlos_corpus():
    config = CorpusConfig(n_los=0, n_nlos=5, seed=1)
    records = generate_corpus(config)
    assert len(records) == 5
    assert all(r.channel_state is ChannelState.NLOS for r in records)


def test_generate_waveform_rejects_out_of_range_distance():
    config = CorpusConfig()
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        generate_waveform(config, ChannelState.LOS, 0.5, rng)
    with pytest.raises(ValueError):
        generate_waveform(config, ChannelState.LOS, 6.0, rng)


def test_los_first_energy_at_geometric_delay():
    config = single_path_config()
    rng = np.random.default_rng(5)
    w = generate_waveform(config, ChannelState.LOS, 3.0, rng)
    first = int(np.flatnonzero(w.samples)[0])
    assert first == round(3.0 / SPEED_OF_LIGHT * config.sample_rate)
    # arrivals snap to the sample grid: within half a sample of 10.0069 ns
    dt = 1.0 / config.sample_rate
    assert abs(w.times[first] - 10.0069e-9) <= dt / 2 + 1e-13


def test_los_direct_path_index_with_multipath():
    config = CorpusConfig(noise_floor=0.0, seed=8)
    rng = np.random.default_rng(9)
    for d in (1.5, 2.5, 4.0):
        w = generate_waveform(config, ChannelState.LOS, d, rng)
        first = int(np.flatnonzero(w.samples)[0])
        assert first == round((d / SPEED_OF_LIGHT - w.t0) * config.sample_rate)


def test_nlos_waveform_bias_above_wall_delay():
    config = CorpusConfig()
    rng = np.random.default_rng(17)
    for _ in range(20):
        w = generate_waveform(config, ChannelState.NLOS, 3.0, rng)
        assert w.true_bias >= WALL_DELAY


def test_record_invariants_enforced():
    with pytest.raises(ValueError):
        WaveformRecord(
            samples=np.ones(4), sample_rate=1.0, t0=0.0, true_distance=1.0,
            true_bias=1e-9, channel_state=ChannelState.LOS,
        )
    with pytest.raises(ValueError):
        WaveformRecord(
            samples=np.ones(4), sample_rate=1.0, t0=0.0, true_distance=1.0,
            true_bias=0.0, channel_state=ChannelState.NLOS,
        )
    with pytest.raises(ValueError):
        WaveformRecord(
            samples=np.empty(0), sample_rate=1.0, t0=0.0, true_distance=1.0,
            true_bias=0.0, channel_state=ChannelState.LOS,
        )


class TestPersistence:
    def test_round_trip_is_bit_exact(self, tmp_path):
        config = CorpusConfig(n_los=4, n_nlos=5, seed=2)
        records = generate_corpus(config)
        path = tmp_path / "corpus.uwb"
        save_corpus(path, records, config)
        loaded, loaded_config = load_corpus(path)
        assert loaded_config == config
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded):
            assert a.channel_state is b.channel_state
            assert a.t0 == b.t0
            assert a.true_distance == b.true_distance
            assert a.true_bias == b.true_bias
            assert np.array_equal(a.samples, b.samples)

    def test_empty_corpus_round_trips(self, tmp_path):
        config = CorpusConfig(n_los=0, n_nlos=0)
        path = tmp_path / "empty.uwb"
        save_corpus(path, [], config)
        loaded, _ = load_corpus(path)
        assert loaded == []

    def test_truncated_file_names_failing_record(self, tmp_path):
        config = CorpusConfig(n_los=2, n_nlos=1, seed=3)
        records = generate_corpus(config)
        path = tmp_path / "corpus.uwb"
        save_corpus(path, records, config)
        data = path.read_bytes()
        (tmp_path / "cut.uwb").write_bytes(data[: len(data) - 2000])
        with pytest.raises(CorpusFormatError, match="record 2"):
            load_corpus(tmp_path / "cut.uwb")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.uwb"
        path.write_bytes(b"not a corpus\n")
        with pytest.raises(CorpusFormatError):
            load_corpus(path)

    def test_version_mismatch_is_explicit(self, tmp_path):
        config = CorpusConfig(n_los=1, n_nlos=0, seed=4)
        records = generate_corpus(config)
        path = tmp_path / "corpus.uwb"
        save_corpus(path, records, config)
        data = path.read_bytes().replace(b"#uwb-corpus v1", b"#uwb-corpus v9", 1)
        (tmp_path / "v9.uwb").write_bytes(data)
        with pytest.raises(CorpusVersionError):
            load_corpus(tmp_path / "v9.uwb")
