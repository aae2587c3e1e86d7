import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamnet.datasets import (
    SYNTH_FREQS, EpochSet, bandpower_features, epoch_signal, load_epochs, make_split, save_epochs, synth_generate,
    zscore,
)
from kamnet.model import FormatError

from conftest import TINY_ELECTRODES, TINY_FS, tiny_data


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(6, 60), min_size=3, max_size=3), seed=st.integers(0, 2 ** 31))
def test_split_partitions_and_stratifies(counts, seed):
    labels = np.repeat(np.arange(3), counts)
    labels = labels[np.random.default_rng(seed).permutation(len(labels))]
    if len(labels) < 30:
        with pytest.raises(ValueError):
            make_split(labels, seed)
        return
    plan = make_split(labels, seed)
    allidx = np.concatenate([plan.validation, *plan.folds])
    assert np.array_equal(np.sort(allidx), np.arange(len(labels)))
    assert len(plan.validation) == round(len(labels) / 6)
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    for c in range(3):
        per_fold = [np.sum(labels[f] == c) for f in plan.folds]
        assert max(per_fold) - min(per_fold) <= 1
        expected = counts[c] * len(plan.validation) / len(labels)
        assert abs(np.sum(labels[plan.validation] == c) - expected) < 1
    for k in range(5):
        assert not set(plan.train_indices(k)) & set(plan.test_indices(k))
    again = make_split(labels, seed)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))


def test_split_rejects_rare_classes():
    with pytest.raises(ValueError):
        make_split(np.array([0] * 40 + [1] * 40 + [2] * 5), 0)


def test_epoch_signal_cuts_whole_seconds():
    rec = np.arange(3 * 25).reshape(3, 25).astype(float)
    ep = epoch_signal(rec, 10)
    assert ep.shape == (2, 3, 10)
    np.testing.assert_array_equal(ep[1, 2], rec[2, 10:20])
    with pytest.raises(ValueError):
        epoch_signal(rec[:, :5], 10)


def test_zscore_per_epoch_and_channel():
    x = np.random.default_rng(0).standard_normal((4, 3, 50)) * 5 + 2
    x[0, 0] = 7.0
    z = zscore(x)
    np.testing.assert_allclose(z[1:].mean(-1), 0, atol=1e-6)
    np.testing.assert_allclose(z[1:].std(-1), 1, atol=1e-5)
    assert np.all(z[0, 0] == 0)
    assert z.dtype == np.float32


def test_synthetic_spectrum_marks_the_class():
    ep = synth_generate(20, fs=TINY_FS, seed=1, snr=2.0, electrodes=TINY_ELECTRODES)
    feats = bandpower_features(ep)
    assert np.mean(feats.argmax(axis=1) == ep.labels) > 0.95
    assert sorted(np.bincount(ep.labels).tolist()) == [20, 20, 20]
    power = np.abs(np.fft.rfft(ep.data[ep.labels == 0][:, 0], axis=-1)).mean(0)
    assert np.argmax(power[1:]) + 1 == int(SYNTH_FREQS[0])


def test_synthetic_data_is_seeded():
    a, b = tiny_data(seed=4), tiny_data(seed=4)
    assert np.array_equal(a.data, b.data) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.data, tiny_data(seed=5).data)


def test_epoch_set_validation():
    with pytest.raises(ValueError):
        EpochSet(np.zeros((2, 3, 10)), [0, 1], fs=20, electrodes=("a", "b", "c"))
    with pytest.raises(ValueError):
        EpochSet(np.zeros((2, 3, 10)), [0, 5], fs=10, electrodes=("a", "b", "c"))


def test_epoch_file_round_trip_is_bit_exact(tmp_path):
    ep = tiny_data(n_per_class=6)
    save_epochs(ep, tmp_path / "a.epochs")
    back = load_epochs(tmp_path / "a.epochs")
    assert back.data.tobytes() == ep.data.tobytes()
    assert np.array_equal(back.labels, ep.labels)
    assert (back.fs, back.subject, back.electrodes) == (ep.fs, ep.subject, ep.electrodes)
    save_epochs(back, tmp_path / "b.epochs")
    assert (tmp_path / "a.epochs").read_bytes() == (tmp_path / "b.epochs").read_bytes()


@pytest.mark.parametrize("damage", ["magic", "truncate", "count", "garbage"])
def test_corrupted_epoch_files_are_rejected(tmp_path, damage):
    path = tmp_path / "a.epochs"
    save_epochs(tiny_data(n_per_class=6), path)
    raw = path.read_bytes()
    if damage == "magic":
        raw = raw.replace(b"KAM-EPOCHS", b"KAM-EPOCHZ", 1)
    elif damage == "truncate":
        raw = raw[:-4]
    elif damage == "count":
        raw = raw.replace(b"\"N\":18", b"\"N\":19", 1)
    else:
        raw = b"not a header at all\n" + raw
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        load_epochs(path)
