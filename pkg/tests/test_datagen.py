import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from gandetect.datagen import (DEFAULT_FAMILIES, FAKE, REAL, DuplicateIdError, FingerprintSpec,
                               MalformedRecordError, ManifestNotFoundError, MissingImageError, SceneDistribution,
                               SceneSpec, build_corpus, fingerprint_signal, inject_fingerprint, load_manifest,
                               radial_low_frequency_fraction, read_image, synth_real, write_image)
from gandetect.tensorcore import ContractError, RngStream

PALETTE = [(0.2, 0.3, 0.4), (0.8, 0.7, 0.5)]
SMALL_SCENES = SceneDistribution(size=32)


def scene(alpha=1.5, size=64, **kw):
    return SceneSpec(size=size, spectral_exponent=alpha, palette=PALETTE, **kw)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    build_corpus(DEFAULT_FAMILIES, {"train": 20, "val": 10, "test": 30}, SMALL_SCENES, out, RngStream(3))
    return out


# --- scenes ------------------------------------------------------------------

def test_synth_real_deterministic_and_in_range():
    a = synth_real(scene(n_shapes=2, n_gradients=1), RngStream(1))
    b = synth_real(scene(n_shapes=2, n_gradients=1), RngStream(1))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (64, 64, 3) and a.min() >= 0 and a.max() <= 1


def test_spectral_exponent_controls_low_frequency_energy():
    for seed in range(5):
        smooth = radial_low_frequency_fraction(synth_real(scene(2.0), RngStream(seed)))
        rough = radial_low_frequency_fraction(synth_real(scene(0.5), RngStream(seed)))
        assert smooth > rough


def test_scene_spec_validation():
    with pytest.raises(ContractError):
        scene(alpha=3.0).validate()
    with pytest.raises(ContractError):
        SceneSpec(size=32, spectral_exponent=1.0, palette=[(0.1, 0.1, 0.1)]).validate()


def test_scene_distribution_roundtrip():
    d = SceneDistribution(size=48, n_shapes=(1, 2))
    assert SceneDistribution.from_dict(d.to_dict()) == d
    spec = d.sample(RngStream(2))
    assert 1 <= spec.n_shapes <= 2 and 2 <= len(spec.palette) <= 4


# --- fingerprints --------------------------------------------------------------

def test_zero_amplitude_is_identity():
    img = synth_real(scene(), RngStream(0))
    np.testing.assert_array_equal(inject_fingerprint(img, FingerprintSpec("Z", 4, 0.0)), img)


@pytest.mark.parametrize("fp", DEFAULT_FAMILIES, ids=lambda f: f.family_id)
def test_injection_on_gray_equals_signal(fp):
    img = np.full((40, 40, 3), 0.5)
    diff = inject_fingerprint(img, fp) - img
    sig = fingerprint_signal((40, 40), fp)
    for c in range(3):
        np.testing.assert_allclose(diff[..., c], sig, atol=1e-15)
    assert np.abs(sig).max() <= fp.amplitude + 1e-15


@pytest.mark.parametrize("period", [2, 3, 4, 5, 8])
def test_spectral_peak_at_fundamental(period):
    n = 120  # divisible by every period, so the lattice sits on exact DFT bins
    fp = FingerprintSpec("P", period, 0.03, orientation=0.0)
    mag = np.abs(np.fft.fft2(fingerprint_signal((n, n), fp)))
    mag[0, 0] = 0.0  # for period 2 the second harmonic aliases onto DC
    ky, kx = np.unravel_index(np.argmax(mag), mag.shape)
    fundamental = n // period
    assert {min(ky, n - ky), min(kx, n - kx)} == {0, fundamental}


def test_fingerprint_validation():
    for bad in (dict(period=1), dict(period=2.5), dict(amplitude=0.06), dict(harmonic_mix=(0.0,))):
        with pytest.raises(ContractError):
            FingerprintSpec(**{"family_id": "X", "period": 4, "amplitude": 0.03, **bad})
    with pytest.raises(ContractError):
        FingerprintSpec("real", 4, 0.03)


def test_image_io_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(9, 7, 3)) / 255.0
    for name in ("a.ppm", "a.png"):
        write_image(tmp_path / name, img)
        np.testing.assert_array_equal(read_image(tmp_path / name), img)


# --- corpus ------------------------------------------------------------------

def test_counts_and_unique_ids(corpus_dir):
    corpus = load_manifest(corpus_dir / "manifest.jsonl")
    assert corpus.manifest.counts() == {"train": 20, "val": 10, "test": 30}
    ids = [r.id for r in corpus.records]
    assert len(set(ids)) == len(ids)


def test_held_out_families_only_in_test(corpus_dir):
    corpus = load_manifest(corpus_dir / "manifest.jsonl", training_families=["A"])
    for r in corpus.records:
        if r.family in ("B", "C"):
            assert r.split == "test"
    assert corpus.manifest.families("test") == ["A", "B", "C"]
    assert corpus.manifest.families("train") == ["A"]


def test_splits_are_balanced(corpus_dir):
    corpus = load_manifest(corpus_dir / "manifest.jsonl")
    for s in ("train", "val", "test"):
        labels = [r.label for r in corpus.split(s)]
        assert labels.count(REAL) == labels.count(FAKE)


def test_same_seed_same_bytes(corpus_dir, tmp_path):
    build_corpus(DEFAULT_FAMILIES, {"train": 20, "val": 10, "test": 30}, SMALL_SCENES, tmp_path, RngStream(3))
    cmp = filecmp.dircmp(corpus_dir, tmp_path)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert (corpus_dir / "manifest.jsonl").read_bytes() == (tmp_path / "manifest.jsonl").read_bytes()
    for p in sorted((corpus_dir / "images").iterdir()):
        assert p.read_bytes() == (tmp_path / "images" / p.name).read_bytes()


def test_roundtrip_equal_manifest(tmp_path):
    built = build_corpus(DEFAULT_FAMILIES, {"train": 4, "val": 2, "test": 6}, SMALL_SCENES, tmp_path, RngStream(1))
    assert load_manifest(tmp_path / "manifest.jsonl").manifest == built


def test_build_rejects_bad_requests(tmp_path):
    with pytest.raises(ContractError):
        build_corpus(DEFAULT_FAMILIES, {"train": 0, "val": 1, "test": 1}, SMALL_SCENES, tmp_path, RngStream(1))
    with pytest.raises(ContractError):
        build_corpus(DEFAULT_FAMILIES[:1], {"train": 2, "val": 2, "test": 2}, SMALL_SCENES, tmp_path, RngStream(1))


# --- manifest errors ---------------------------------------------------------------

def _write(tmp_path, lines):
    (tmp_path / "images").mkdir(exist_ok=True)
    write_image(tmp_path / "images" / "x.ppm", np.zeros((4, 4, 3)))
    p = tmp_path / "manifest.jsonl"
    p.write_text("\n".join(json.dumps(line) if isinstance(line, dict) else line for line in lines) + "\n")
    return p


def rec(**kw):
    return {"id": "x", "path": "images/x.ppm", "label": 0, "family": "real", "split": "train", **kw}


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")


def test_missing_image_names_path(tmp_path):
    p = _write(tmp_path, [rec(path="images/gone.ppm")])
    with pytest.raises(MissingImageError, match="images/gone.ppm"):
        load_manifest(p)


def test_duplicate_id(tmp_path):
    p = _write(tmp_path, [rec(), rec()])
    with pytest.raises(DuplicateIdError):
        load_manifest(p)


@pytest.mark.parametrize("line", ["{not json", json.dumps(rec(label=2)), json.dumps(rec(split="dev")),
                                  json.dumps({"id": "x"}), json.dumps(rec(label=True))])
def test_malformed_records(tmp_path, line):
    with pytest.raises(MalformedRecordError):
        load_manifest(_write(tmp_path, [line]))


def test_training_family_leak_rejected(tmp_path):
    p = _write(tmp_path, [rec(label=1, family="B")])
    with pytest.raises(MalformedRecordError, match="not a training family"):
        load_manifest(p, training_families=["A"])
