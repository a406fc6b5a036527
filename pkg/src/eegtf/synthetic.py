"""Seeded EEG-like signal synthesis with dissociated anomaly types.

Backgrounds are 1/f-shaped noise (spectral synthesis with random phases,
amplitude proportional to f^-0.5) plus a 10 Hz alpha component at equal
power. Two anomaly generators are deliberately orthogonal: ``inject_spikes``
adds large biphasic transients that are salient in the time domain, while
``inject_rhythm`` adds band-limited noise that raises spectral band power
without disturbing the amplitude distribution. A classifier restricted to
time-domain features can learn the first task but needs spectral features
for the second, which is what makes staged gate schedules measurable on this
corpus.

Determinism: every recording derives its own seed as ``corpus seed XOR
recording index``, so corpora are reproducible file-for-file and safe to
generate in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal_pipeline import RawRecording, write_recording_file

__all__ = [
    "CorpusSpec",
    "ManifestRow",
    "gen_background",
    "inject_spikes",
    "inject_rhythm",
    "build_corpus",
    "load_manifest",
    "band_power",
    "band_power_feature",
]

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
ALPHA_HZ = 10.0
SPIKE_WIDTH_S = 0.07


@dataclass
class CorpusSpec:
    counts: dict[str, int]
    channels: int = 1
    duration_s: float = 10.0
    sample_rate: float = 200.0
    spike_rate: float = 2.0          # events per second
    spike_amplitude: float = 8.0     # multiples of background std
    rhythm_band: tuple[float, float] = (18.0, 25.0)
    rhythm_gain: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for label, n in self.counts.items():
            if label not in ("normal", "abnormal", "disease", "control"):
                raise ValueError("unknown corpus label %r" % label)
            if n < 1:
                raise ValueError("count for %r must be >= 1" % label)
        lo, hi = self.rhythm_band
        if not 0.0 < lo < hi < self.sample_rate / 2:
            raise ValueError("rhythm band %s must lie inside (0, Nyquist)" % (self.rhythm_band,))


@dataclass
class ManifestRow:
    path: str
    label: str
    subject_id: str
    split: str


def gen_background(channels: int, duration: float, rate: float, seed: int) -> RawRecording:
    """1/f noise at unit variance plus a 10 Hz alpha tone at equal power.

    Shaping is applied to the spectrum of white Gaussian noise, so bin
    amplitudes are Rayleigh around the f^-0.5 profile and phases are uniform;
    periodograms vary recording to recording the way real noise does.
    """
    n = int(round(duration * rate))
    if n < 2000:
        raise ValueError("background needs at least 2000 samples, got %d" % n)
    rng = np.random.default_rng(seed)
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    shaping = np.zeros_like(freqs)
    shaping[1:] = freqs[1:] ** -0.5
    t = np.arange(n) / rate
    rows = np.empty((channels, n))
    for c in range(channels):
        white = rng.normal(size=n)
        spectrum = np.fft.rfft(white) * shaping
        noise = np.fft.irfft(spectrum, n)
        noise /= noise.std()
        alpha_phase = rng.uniform(0.0, 2.0 * np.pi)
        rows[c] = noise + np.sqrt(2.0) * np.sin(2.0 * np.pi * ALPHA_HZ * t + alpha_phase)
    return RawRecording(rows, float(rate))


def _spike_template(rate: float) -> np.ndarray:
    width = max(4, int(round(SPIKE_WIDTH_S * rate)))
    tau = np.linspace(0.0, 1.0, width)
    shape = np.sin(2.0 * np.pi * tau) * np.sin(np.pi * tau) ** 2  # biphasic, tapered
    return shape / np.max(np.abs(shape))


def inject_spikes(rec: RawRecording, rate: float, amplitude: float, seed: int) -> RawRecording:
    """Add biphasic ~70 ms transients at Poisson times on random channels."""
    if rate <= 0:
        raise ValueError("spike rate must be positive, got %r" % (rate,))
    rng = np.random.default_rng(seed)
    out = rec.samples.copy()
    duration = rec.duration
    n_events = rng.poisson(rate * duration)
    times = rng.uniform(0.0, duration, size=n_events)
    channels = rng.integers(0, rec.channels, size=n_events)
    template = _spike_template(rec.sample_rate)
    stds = rec.samples.std(axis=1)
    for t, c in zip(times, channels):
        start = int(t * rec.sample_rate)
        stop = min(start + template.size, rec.n_samples)
        out[c, start:stop] += amplitude * stds[c] * template[: stop - start]
    return replace(rec, samples=out, label="abnormal")


def band_power(x: np.ndarray, rate: float, band: tuple[float, float]) -> float:
    """Periodogram mass inside [low, high); the band-power oracle feature."""
    spectrum = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size, 1.0 / rate)
    mask = (freqs >= band[0]) & (freqs < band[1])
    return float(spectrum[mask].sum())


def band_power_feature(rec: RawRecording, band: tuple[float, float] = (18.0, 25.0)) -> float:
    """Robust band-power score: lower quartile over 1-second patch slots.

    Sustained rhythms raise band power in every slot, so the quartile rises
    with them; sparse broadband transients contaminate only a few slots and
    are ignored. A recording-level mean would not dissociate the two: a 70 ms
    transient necessarily leaks energy across the band.
    """
    patch = int(rec.sample_rate)
    count = rec.n_samples // patch
    vals = [band_power(ch[p * patch:(p + 1) * patch], rec.sample_rate, band)
            for ch in rec.samples for p in range(count)]
    return float(np.quantile(vals, 0.25))


def inject_rhythm(rec: RawRecording, band: tuple[float, float] = (18.0, 25.0),
                  gain: float = 4.0, seed: int = 0) -> RawRecording:
    """Raise band power by ~``gain`` with Gaussian band-limited noise.

    The addition keeps the amplitude distribution near-Gaussian, so the
    anomaly is visible in the spectrum but not in time-domain statistics.
    """
    lo, hi = band
    if not 0.0 < lo < hi < rec.sample_rate / 2:
        raise ValueError("band %s must lie inside (0, Nyquist)" % (band,))
    if gain < 1.0:
        raise ValueError("gain must be >= 1, got %r" % (gain,))
    rng = np.random.default_rng(seed)
    n = rec.n_samples
    freqs = np.fft.rfftfreq(n, 1.0 / rec.sample_rate)
    mask = (freqs >= lo) & (freqs < hi)
    out = rec.samples.copy()
    for c in range(rec.channels):
        p0 = band_power(rec.samples[c], rec.sample_rate, band)
        if gain == 1.0 or p0 == 0.0:
            continue
        spectrum = np.zeros(freqs.size, dtype=np.complex128)
        spectrum[mask] = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=int(mask.sum())))
        extra = np.fft.irfft(spectrum, n)
        p_extra = band_power(extra, rec.sample_rate, band)
        out[c] = out[c] + extra * np.sqrt((gain - 1.0) * p0 / p_extra)
    return replace(rec, samples=out, label="disease")


_GENERATORS = {
    "normal": lambda rec, spec, seed: replace(rec, label="normal"),
    "control": lambda rec, spec, seed: replace(rec, label="control"),
    "abnormal": lambda rec, spec, seed: inject_spikes(
        rec, spec.spike_rate, spec.spike_amplitude, seed),
    "disease": lambda rec, spec, seed: inject_rhythm(
        rec, spec.rhythm_band, spec.rhythm_gain, seed),
}

LABEL_ORDER = ("normal", "abnormal", "disease", "control")


def build_corpus(spec: CorpusSpec, out_dir) -> list[ManifestRow]:
    """Write one NDXR file per recording plus ``manifest.tsv``.

    Each recording is its own subject; splits are 60/20/20, stratified per
    label and disjoint by subject. Rerunning with the same spec reproduces
    identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []
    idx = 0
    split_rng = np.random.default_rng(spec.seed)
    for label in LABEL_ORDER:
        count = spec.counts.get(label, 0)
        if count == 0:
            continue
        order = split_rng.permutation(count)
        n_train = int(count * SPLIT_FRACTIONS[0])
        n_val = int(count * SPLIT_FRACTIONS[1])
        splits = np.empty(count, dtype=object)
        splits[order[:n_train]] = "train"
        splits[order[n_train:n_train + n_val]] = "val"
        splits[order[n_train + n_val:]] = "test"
        for i in range(count):
            rec_seed = spec.seed ^ idx
            rec = gen_background(spec.channels, spec.duration_s, spec.sample_rate, rec_seed)
            rec = _GENERATORS[label](rec, spec, rec_seed + 7919)
            subject = "s%05d" % idx
            rec = replace(rec, subject_id=subject)
            name = "rec%05d_%s.ndxr" % (idx, label)
            write_recording_file(out / name, rec)
            rows.append(ManifestRow(path=name, label=label, subject_id=subject,
                                    split=str(splits[i])))
            idx += 1
    manifest = "".join("%s\t%s\t%s\t%s\n" % (r.path, r.label, r.subject_id, r.split)
                       for r in rows)
    (out / "manifest.tsv").write_text(manifest, encoding="utf-8")
    return rows


def load_manifest(corpus_dir) -> list[ManifestRow]:
    path = Path(corpus_dir) / "manifest.tsv"
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rel, label, subject, split = line.split("\t")
        rows.append(ManifestRow(path=rel, label=label, subject_id=subject, split=split))
    return rows
