"""Recording preprocessing: filter, resample, window, patch.

The pipeline order is fixed: bandpass -> notch -> resample -> segment ->
patchify. Filtering is zero-phase (forward-backward) with a 4th-order
Butterworth bandpass and a Q=30 IIR notch; resampling uses 64-tap
Kaiser-windowed (beta 8.6) sinc interpolation with per-output weight
normalization so constants survive exactly. 10-second windows are cut
non-overlapping at 200 Hz; any trailing remainder is dropped, never padded.

Recordings live in a little-endian binary container (magic ``NDXR``):
  magic "NDXR" | version u16 = 1 | label u8 | channel count u16 |
  sample rate f32 | sample count u64 | subject-id length u16 + UTF-8 bytes |
  payload: channel-major f32 samples.
Label codes: 0 normal, 1 abnormal, 2 disease, 3 control, 255 unlabeled.
Converters from clinical formats (EDF and friends) are expected to emit this
layout; parsing those formats is out of scope here.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

__all__ = [
    "SEGMENT_SECONDS",
    "TARGET_RATE",
    "RawRecording",
    "Segment",
    "PatchBatch",
    "RecordingFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "bandpass",
    "notch",
    "resample",
    "segment_windows",
    "patchify",
    "standardize_segment",
    "preprocess_recording",
    "ingest_recording_file",
    "write_recording_file",
]

TARGET_RATE = 200.0
SEGMENT_SECONDS = 10.0
SEGMENT_SAMPLES = 2000
PATCHES = 10
PATCH_SAMPLES = 200

MAGIC = b"NDXR"
FORMAT_VERSION = 1
LABEL_CODES = {"normal": 0, "abnormal": 1, "disease": 2, "control": 3, None: 255}
CODE_LABELS = {v: k for k, v in LABEL_CODES.items()}


class RecordingFormatError(ValueError):
    """Malformed recording file."""


class BadMagicError(RecordingFormatError):
    pass


class TruncatedPayloadError(RecordingFormatError):
    pass


@dataclass
class RawRecording:
    samples: np.ndarray        # [C, N] float64
    sample_rate: float
    label: str | None = None
    subject_id: str = ""

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive, got %r" % (self.sample_rate,))
        if self.label not in LABEL_CODES:
            raise ValueError("unknown label %r" % (self.label,))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class Segment:
    samples: np.ndarray        # [C, 2000]
    label: str | None
    source_offset: float       # seconds into the recording


@dataclass
class PatchBatch:
    x: np.ndarray              # [C, 10, 200]
    label: str | None = None


def _nyquist_guard(freq: float, rate: float, what: str) -> None:
    if freq >= rate / 2:
        raise ValueError("%s frequency %.3g Hz is not below Nyquist (%.3g Hz)"
                         % (what, freq, rate / 2))


def bandpass(rec: RawRecording, low: float = 0.1, high: float = 75.0) -> RawRecording:
    """Zero-phase 4th-order Butterworth bandpass, per channel."""
    _nyquist_guard(high, rec.sample_rate, "bandpass upper")
    sos = sps.butter(4, [low, high], btype="bandpass", fs=rec.sample_rate, output="sos")
    filtered = sps.sosfiltfilt(sos, rec.samples, axis=-1)
    return replace(rec, samples=filtered)


def notch(rec: RawRecording, freq: float = 50.0, q: float = 30.0) -> RawRecording:
    """Zero-phase 2nd-order IIR notch, per channel."""
    _nyquist_guard(freq, rec.sample_rate, "notch")
    b, a = sps.iirnotch(freq, q, fs=rec.sample_rate)
    filtered = sps.filtfilt(b, a, rec.samples, axis=-1)
    return replace(rec, samples=filtered)


_KAISER_BETA = 8.6
_TAPS = 64
_HALF = _TAPS // 2
_RESAMPLE_PLANS: dict[tuple[int, float, float], tuple] = {}


def _resample_plan(n: int, src: float, target: float):
    """Tap weights and gather indices, cached per (length, src, target)."""
    key = (n, src, target)
    plan = _RESAMPLE_PLANS.get(key)
    if plan is None:
        n_out = int(n * target // src)
        pos = np.arange(n_out) * (src / target)
        base = np.floor(pos).astype(np.intp)
        taps = np.arange(-(_HALF - 1), _HALF + 1)
        idx = base[:, None] + taps[None, :]
        t = pos[:, None] - idx
        cutoff = min(1.0, target / src)
        frac = t / _HALF
        window = np.where(np.abs(frac) <= 1.0,
                          np.i0(_KAISER_BETA * np.sqrt(np.maximum(0.0, 1.0 - frac * frac))),
                          0.0) / np.i0(_KAISER_BETA)
        weights = cutoff * np.sinc(cutoff * t) * window
        weights /= weights.sum(axis=1, keepdims=True)
        valid = (idx >= 0) & (idx < n)
        plan = (n_out, weights * valid, np.clip(idx, 0, n - 1))
        _RESAMPLE_PLANS[key] = plan
    return plan


def resample(rec: RawRecording, target: float = TARGET_RATE) -> RawRecording:
    """Windowed-sinc interpolation to ``target`` Hz.

    Output length is floor(N * target / source). Each output sample is a
    64-tap Kaiser(8.6)-windowed sinc combination of nearby input samples,
    lowpassed at the output Nyquist when decimating; tap weights are
    normalized per output sample so a constant signal stays constant (samples
    beyond the edges are treated as zero).
    """
    src = rec.sample_rate
    if target <= 0:
        raise ValueError("target rate must be positive, got %r" % (target,))
    if src < 100.0:
        raise ValueError("source rate %.3g Hz is below the supported 100 Hz minimum" % src)
    n = rec.n_samples
    n_out, weights, idx = _resample_plan(n, src, float(target))
    if n_out < 1:
        raise ValueError("recording too short to resample")
    out = np.einsum("jt,cjt->cj", weights, rec.samples[:, idx])
    return replace(rec, samples=out, sample_rate=float(target))


def segment_windows(rec: RawRecording) -> list[Segment]:
    """Non-overlapping 10 s windows at 200 Hz; the trailing remainder is dropped."""
    if abs(rec.sample_rate - TARGET_RATE) > 1e-9:
        raise ValueError("segmentation expects %.0f Hz input, got %.3g Hz"
                         % (TARGET_RATE, rec.sample_rate))
    count = rec.n_samples // SEGMENT_SAMPLES
    return [
        Segment(
            samples=rec.samples[:, i * SEGMENT_SAMPLES:(i + 1) * SEGMENT_SAMPLES].copy(),
            label=rec.label,
            source_offset=i * SEGMENT_SECONDS,
        )
        for i in range(count)
    ]


def patchify(seg: Segment) -> PatchBatch:
    """[C, 2000] -> [C, 10, 200], preserving temporal order."""
    c, n = seg.samples.shape
    if n != SEGMENT_SAMPLES:
        raise ValueError("segment has %d samples per channel, expected %d" % (n, SEGMENT_SAMPLES))
    return PatchBatch(x=seg.samples.reshape(c, PATCHES, PATCH_SAMPLES), label=seg.label)


def standardize_segment(seg: Segment) -> Segment:
    """Per-channel zero mean, unit variance (constant channels pass through)."""
    m = seg.samples.mean(axis=1, keepdims=True)
    s = seg.samples.std(axis=1, keepdims=True)
    s = np.where(s > 0, s, 1.0)
    return replace(seg, samples=(seg.samples - m) / s)


def preprocess_recording(rec: RawRecording, standardize: bool = True,
                         channel_whitelist=None) -> list[PatchBatch]:
    """Full pipeline: bandpass -> notch -> resample -> segment -> patchify.

    ``channel_whitelist`` selects channels by index before filtering (the
    stand-in for montage-based channel exclusion).
    """
    if channel_whitelist is not None:
        rec = replace(rec, samples=rec.samples[list(channel_whitelist)])
    rec = bandpass(rec)
    rec = notch(rec)
    rec = resample(rec)
    segments = segment_windows(rec)
    if standardize:
        segments = [standardize_segment(s) for s in segments]
    return [patchify(s) for s in segments]


def write_recording_file(path, rec: RawRecording) -> None:
    sid = rec.subject_id.encode("utf-8")
    header = MAGIC + struct.pack(
        "<HBHfQH",
        FORMAT_VERSION,
        LABEL_CODES[rec.label],
        rec.channels,
        rec.sample_rate,
        rec.n_samples,
        len(sid),
    ) + sid
    payload = rec.samples.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def ingest_recording_file(path) -> RawRecording:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError("bad magic %r in %s (expected %r)" % (raw[:4], path, MAGIC))
    fixed = struct.calcsize("<HBHfQH")
    if len(raw) < 4 + fixed:
        raise TruncatedPayloadError("header truncated: %d bytes, need at least %d"
                                    % (len(raw), 4 + fixed))
    version, label_code, channels, rate, count, sid_len = struct.unpack_from("<HBHfQH", raw, 4)
    if version != FORMAT_VERSION:
        raise RecordingFormatError("unsupported version %d (expected %d)"
                                   % (version, FORMAT_VERSION))
    if channels == 0:
        raise RecordingFormatError("channel count is zero")
    if label_code not in CODE_LABELS:
        raise RecordingFormatError("unknown label code %d" % label_code)
    offset = 4 + fixed
    sid = raw[offset:offset + sid_len].decode("utf-8")
    offset += sid_len
    expected = channels * count * 4
    found = len(raw) - offset
    if found != expected:
        raise TruncatedPayloadError("payload has %d bytes, expected %d" % (found, expected))
    samples = np.frombuffer(raw, dtype="<f4", count=channels * count, offset=offset)
    samples = samples.reshape(channels, count).astype(np.float64)
    return RawRecording(samples=samples, sample_rate=float(rate),
                        label=CODE_LABELS[label_code], subject_id=sid)
