"""Synthetic corpus: spectral shape, anomaly dissociation, manifest contract."""

import numpy as np
import numpy.testing as npt
import pytest

from eegtf.synthetic import (
    CorpusSpec,
    band_power,
    build_corpus,
    gen_background,
    inject_rhythm,
    inject_spikes,
    load_manifest,
)


def spectrum_slope(x, rate, lo=1.0, hi=50.0):
    """Log-log least-squares slope of the periodogram (the fit oracle)."""
    psd = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size, 1.0 / rate)
    mask = (freqs >= lo) & (freqs <= hi) & (psd > 0)
    return np.polyfit(np.log10(freqs[mask]), np.log10(psd[mask]), 1)[0]


class TestBackground:
    def test_same_seed_bit_identical(self):
        a = gen_background(2, 10.0, 200.0, seed=5)
        b = gen_background(2, 10.0, 200.0, seed=5)
        npt.assert_array_equal(a.samples, b.samples)

    def test_mean_near_zero(self):
        rec = gen_background(3, 10.0, 200.0, seed=6)
        assert np.all(np.abs(rec.samples.mean(axis=1)) < 0.05)

    def test_pink_slope(self):
        rec = gen_background(1, 30.0, 200.0, seed=7)
        slope = spectrum_slope(rec.samples[0], 200.0)
        assert -1.5 <= slope <= -0.5

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="2000"):
            gen_background(1, 5.0, 200.0, seed=0)


class TestSpikes:
    def test_zero_amplitude_is_noop(self):
        rec = gen_background(2, 10.0, 200.0, seed=8)
        out = inject_spikes(rec, rate=1.0, amplitude=0.0, seed=9)
        npt.assert_array_equal(out.samples, rec.samples)
        assert out.label == "abnormal"

    def test_event_count_matches_seeded_poisson_draw(self):
        rec = gen_background(1, 10.0, 200.0, seed=10)
        out = inject_spikes(rec, rate=1.0, amplitude=100.0, seed=11)
        expected = np.random.default_rng(11).poisson(1.0 * 10.0)
        # every event leaves samples above 50 background stds; merge the two
        # lobes of each biphasic pulse by dilating with the template width
        big = np.abs(out.samples[0] - rec.samples[0]) > 50 * rec.samples.std()
        width = round(0.07 * 200)
        merged = np.convolve(big.astype(int), np.ones(width, dtype=int), mode="same") > 0
        edges = np.diff(np.concatenate([[0], merged.astype(int)])) == 1
        assert edges.sum() == expected

    def test_peak_dominates_background(self):
        rec = gen_background(2, 10.0, 200.0, seed=12)
        out = inject_spikes(rec, rate=0.5, amplitude=8.0, seed=13)
        assert np.max(np.abs(out.samples)) >= np.max(np.abs(rec.samples))

    def test_nonpositive_rate_rejected(self):
        rec = gen_background(1, 10.0, 200.0, seed=14)
        with pytest.raises(ValueError, match="rate"):
            inject_spikes(rec, rate=0.0, amplitude=1.0, seed=0)


class TestRhythm:
    def test_gain_one_is_noop(self):
        rec = gen_background(2, 10.0, 200.0, seed=15)
        out = inject_rhythm(rec, gain=1.0, seed=16)
        ratio = band_power(out.samples[0], 200.0, (18, 25)) / band_power(
            rec.samples[0], 200.0, (18, 25))
        assert abs(ratio - 1.0) <= 0.05
        assert out.label == "disease"

    def test_gain_four_measured_by_periodogram(self):
        rec = gen_background(2, 10.0, 200.0, seed=17)
        out = inject_rhythm(rec, band=(18.0, 25.0), gain=4.0, seed=18)
        for c in range(2):
            ratio = band_power(out.samples[c], 200.0, (18, 25)) / band_power(
                rec.samples[c], 200.0, (18, 25))
            assert 3.0 <= ratio <= 5.0

    def test_stays_near_gaussian(self):
        from scipy.stats import kurtosis

        rec = gen_background(2, 10.0, 200.0, seed=19)
        out = inject_rhythm(rec, gain=4.0, seed=20)
        assert np.all(kurtosis(out.samples, axis=1) <= 1.0)

    def test_band_validation(self):
        rec = gen_background(1, 10.0, 200.0, seed=21)
        with pytest.raises(ValueError, match="Nyquist"):
            inject_rhythm(rec, band=(18.0, 120.0), gain=2.0, seed=0)
        with pytest.raises(ValueError, match="gain"):
            inject_rhythm(rec, gain=0.5, seed=0)


class TestBuildCorpus:
    def test_counts_and_manifest(self, tmp_path):
        spec = CorpusSpec(counts={"normal": 10, "abnormal": 10}, seed=1)
        rows = build_corpus(spec, tmp_path)
        assert len(rows) == 20
        files = sorted(p.name for p in tmp_path.glob("*.ndxr"))
        assert len(files) == 20
        assert len(load_manifest(tmp_path)) == 20

    def test_split_is_subject_disjoint_and_60_20_20(self, tmp_path):
        spec = CorpusSpec(counts={"disease": 100, "control": 100}, seed=2)
        rows = build_corpus(spec, tmp_path)
        seen = {}
        for r in rows:
            assert seen.setdefault(r.subject_id, r.split) == r.split
        for label in ("disease", "control"):
            per = [r.split for r in rows if r.label == label]
            assert per.count("train") == 60 and per.count("val") == 20 and per.count("test") == 20

    def test_same_seed_identical_bytes(self, tmp_path):
        spec = CorpusSpec(counts={"normal": 3, "abnormal": 3}, seed=3)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        build_corpus(spec, d1)
        build_corpus(spec, d2)
        for p1 in sorted(d1.iterdir()):
            assert p1.read_bytes() == (d2 / p1.name).read_bytes()

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError, match="unknown corpus label"):
            CorpusSpec(counts={"weird": 3})
        with pytest.raises(ValueError, match=">= 1"):
            CorpusSpec(counts={"normal": 0})


class TestSeparabilityByDesign:
    """The stage-2 task must be spectrally easy; the stage-1 task must not be.

    Both checks use the one pinned band-power feature (lower quartile of
    per-patch 18-25 Hz periodogram mass); sustained rhythms move it, sparse
    transients do not.
    """

    @staticmethod
    def corpus_scores(tmp_path, counts, spec_kwargs, split=None):
        from eegtf.metrics import roc_auc
        from eegtf.signal_pipeline import ingest_recording_file
        from eegtf.synthetic import band_power_feature

        spec = CorpusSpec(counts=counts, seed=40, **spec_kwargs)
        rows = build_corpus(spec, tmp_path)
        scores, labels = [], []
        positive = "disease" if "disease" in counts else "abnormal"
        for r in rows:
            if split is not None and r.split != split:
                continue
            rec = ingest_recording_file(tmp_path / r.path)
            scores.append(band_power_feature(rec))
            labels.append(1 if r.label == positive else 0)
        return roc_auc(np.array(scores), np.array(labels))

    def test_rhythm_task_separable_by_band_power(self, tmp_path):
        auc = self.corpus_scores(tmp_path, {"disease": 50, "control": 50},
                                 {"rhythm_gain": 4.0}, split="test")
        assert auc >= 0.95

    def test_spike_task_not_separable_by_band_power(self, tmp_path):
        # scored over the whole corpus: a 20-recording split is too noisy to
        # bound an AUC near 0.6
        auc = self.corpus_scores(tmp_path, {"abnormal": 50, "normal": 50},
                                 {"spike_amplitude": 8.0, "spike_rate": 0.5, "channels": 2})
        assert auc <= 0.7
