import json

import numpy as np
import pytest

from avsep.dsp import SAMPLE_RATE, AudioClip, build_freq_map, read_wav, stft, to_log_spec
from avsep.errors import ConfigError, DataError, ValidationError
from avsep.synthdata import (AvSample, Corpus, CorpusConfig, _sample_plan, file_checksum,
                             generate_sample, get_categories, make_corpus, make_mixture,
                             pair_indices, render_image, spectral_centroid, synth_audio)

IMG = np.zeros((3, 64, 64), np.float32)


def sample(audio, cat, sid="s"):
    return AvSample(sid, IMG, audio, cat, (0, 0, 10, 10))


def tone(freq, amp=0.4, n=65535):
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(n) / SAMPLE_RATE))


def test_synth_audio_is_deterministic():
    a = synth_audio(0, 7)
    b = synth_audio(0, 7)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, synth_audio(0, 8).samples)


def test_low_tone_energy_below_2khz():
    clip = synth_audio(0, 7)
    power = np.abs(np.fft.rfft(clip.samples)) ** 2
    freqs = np.fft.rfftfreq(len(clip), 1 / SAMPLE_RATE)
    assert power[freqs < 2000].sum() / power.sum() >= 0.9


def test_high_tone_centroid_above_low_tone():
    assert spectral_centroid(synth_audio(1, 7)) > spectral_centroid(synth_audio(0, 7))


@pytest.mark.parametrize("cat", range(6))
def test_peak_amplitude_bounded(cat):
    for seed in range(3):
        assert np.max(np.abs(synth_audio(cat, seed).samples)) <= 0.9


def test_unknown_category():
    with pytest.raises(KeyError):
        synth_audio(99, 0)
    with pytest.raises(KeyError):
        render_image(-1, 0)


def test_category_count_bounds():
    with pytest.raises(ConfigError):
        get_categories(1)
    assert len(get_categories(4)) == 4


def test_centroid_threshold_classifier_separates_categories():
    cfg = CorpusConfig(categories=4)
    def centroids(offset, n):
        return {c: [np.log(spectral_centroid(generate_sample(cfg, 11, offset + 100 * c + i, c)[0]))
                    for i in range(n)] for c in range(4)}
    train, test = centroids(0, 10), centroids(10_000, 40)
    order = sorted(range(4), key=lambda c: np.median(train[c]))
    meds = [np.median(train[c]) for c in order]
    thresholds = [(a + b) / 2 for a, b in zip(meds, meds[1:])]
    correct = total = 0
    for c, vals in test.items():
        for v in vals:
            correct += order[int(np.searchsorted(thresholds, v))] == c
            total += 1
    assert correct / total >= 0.95


def test_render_is_deterministic():
    a, bb_a = render_image(2, 5)
    b, bb_b = render_image(2, 5)
    assert np.array_equal(a, b) and bb_a == bb_b
    assert a.shape == (3, 64, 64) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1


def test_render_bbox_statistics():
    centers = np.zeros((4, 4), int)
    for seed in range(1000):
        _, (x0, y0, x1, y1) = render_image(seed % 4, seed)
        assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
        area = (x1 - x0) * (y1 - y0) / 64 ** 2
        assert 0.04 <= area <= 0.40
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        centers[min(int(cy // 16), 3), min(int(cx // 16), 3)] += 1
    assert (centers > 0).mean() >= 0.5


def test_bbox_is_tight_around_object_colour():
    img, (x0, y0, x1, y1) = render_image(0, 3)
    red = (img[0] > 0.7) & (img[1] < 0.35) & (img[2] < 0.35)
    ys, xs = np.nonzero(red)
    assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (x0, y0, x1, y1)


def test_mixture_with_silent_source():
    a = sample(synth_audio(0, 1), 0)
    b = sample(AudioClip(np.zeros(len(a.audio))), 1)
    m = make_mixture(a, b)
    assert np.all(m.gt_masks[0] == 1) and np.all(m.gt_masks[1] == 0)
    np.testing.assert_array_equal(m.mix.samples, a.audio.samples)


def test_disjoint_tones_give_complementary_masks():
    fmap = build_freq_map()
    a, b = sample(tone(400), 0), sample(tone(3000), 1)
    m = make_mixture(a, b, fmap)
    assert np.all(m.gt_masks.sum(axis=0) == 1)
    # within a semitone of each tone the mask belongs to that tone's source
    for n, f in enumerate((400, 3000)):
        near = np.abs(np.log2(fmap.bin_centers / f)) < 1 / 12
        assert np.all(m.gt_masks[n][near] == 1)
    mag_a = to_log_spec(stft(a.audio), fmap).mag
    mag_b = to_log_spec(stft(b.audio), fmap).mag
    np.testing.assert_array_equal(m.gt_masks[0], (mag_a >= mag_b).astype(np.uint8))


def test_masks_partition_random_pairs():
    for seed in range(5):
        a = sample(synth_audio(seed % 4, seed), seed % 4)
        b = sample(synth_audio((seed + 1) % 4, seed + 50), (seed + 1) % 4)
        m = make_mixture(a, b)
        assert np.array_equal(m.gt_masks.sum(axis=0), np.ones((256, 256)))


def test_mixture_errors():
    a = sample(synth_audio(0, 1), 0)
    with pytest.raises(ValidationError):
        make_mixture(a, sample(AudioClip(np.zeros(1000)), 1))
    with pytest.raises(ValidationError):
        make_mixture(a, sample(synth_audio(0, 2), 0))
    same = make_mixture(a, sample(synth_audio(0, 2), 0), require_distinct=False)
    assert same.pair_labels.tolist() == [[1, 1], [1, 1]]


def test_pairing_forms_two_positive_and_two_negative_pairs():
    m = make_mixture(sample(synth_audio(0, 1), 0), sample(synth_audio(2, 1), 2))
    labels = [lab for _, _, lab in m.pairs]
    assert sorted(labels) == [0, 0, 1, 1]
    assert all(lab == int(n == k) for n, k, lab in m.pairs)


def test_pair_indices_mix_categories():
    cats = [0] * 5 + [1] * 5 + [2] * 4
    pairs = pair_indices(cats, 3)
    assert len(pairs) == 7
    assert all(cats[i] != cats[j] for i, j in pairs)
    flat = [i for p in pairs for i in p]
    assert len(set(flat)) == len(flat)
    assert pairs == pair_indices(cats, 3)


def test_sample_plan_row_count():
    cfg = CorpusConfig(categories=4, train_per_category=200, val_per_category=40,
                       test_per_category=40)
    assert sum(1 for _ in _sample_plan(cfg)) == 4 * 280


SMALL = CorpusConfig(categories=3, train_per_category=3, val_per_category=1, test_per_category=2)


def test_corpus_round_trip(tmp_path):
    corpus = make_corpus(SMALL, 5, tmp_path / "c")
    assert len(corpus.rows) == 3 * 6
    train_ids = {r["id"] for r in corpus.split_rows("train")}
    test_ids = {r["id"] for r in corpus.split_rows("test")}
    assert train_ids and test_ids and not train_ids & test_ids
    row = corpus.split_rows("test")[0]
    s = corpus.load(row)
    audio, image, bbox = generate_sample(SMALL, 5, int(row["id"].split("-")[1]), row["category"])
    assert s.bbox == bbox
    assert np.max(np.abs(s.audio.samples - audio.samples)) <= 0.5 / 32767 + 1e-12
    assert np.max(np.abs(s.image - image)) <= 0.5 / 255 + 1e-6
    meta = json.loads((tmp_path / "c" / "corpus.json").read_text())
    assert meta["seed"] == 5 and meta["config"]["categories"] == 3


def test_corpus_is_reproducible(tmp_path):
    make_corpus(SMALL, 9, tmp_path / "a")
    make_corpus(SMALL, 9, tmp_path / "b")
    for name in ("manifest.jsonl", "corpus.json", "audio/test-00016.wav", "images/train-00000.png"):
        assert file_checksum(tmp_path / "a" / name) == file_checksum(tmp_path / "b" / name)


def test_corpus_overwrite_guard(tmp_path):
    make_corpus(SMALL, 1, tmp_path / "c")
    with pytest.raises(FileExistsError):
        make_corpus(SMALL, 1, tmp_path / "c")
    make_corpus(SMALL, 2, tmp_path / "c", overwrite=True)


def test_corrupt_manifest(tmp_path):
    make_corpus(SMALL, 1, tmp_path / "c")
    with open(tmp_path / "c" / "manifest.jsonl", "a") as f:
        f.write('{"id": "x"}\n')
    with pytest.raises(DataError):
        Corpus(tmp_path / "c")
    with pytest.raises(DataError):
        Corpus(tmp_path / "missing")


def test_config_validation():
    with pytest.raises(ConfigError):
        CorpusConfig(categories=1)
    with pytest.raises(ConfigError):
        CorpusConfig(train_per_category=0)
    with pytest.raises(ConfigError):
        CorpusConfig(image_size=50)
