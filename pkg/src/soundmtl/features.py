"""WAV recordings to standardized log-mel spectrogram segment images.

Pipeline per channel: periodic-Hann STFT power (no centre padding) ->
HTK-mel triangular filterbank -> natural log with a floor -> fixed-length
frame windows.  Binaural recordings additionally yield sum/difference images
computed on the log-mel images themselves.
"""
from __future__ import annotations

import io
import json
import os
import struct
import wave
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ValidationError

VARIANT_CODES = {"left": 0, "right": 1, "sum": 2, "diff": 3, "mono": 4}
VARIANT_NAMES = {v: k for k, v in VARIANT_CODES.items()}
CHANNEL_MODES = ("mono", "triple", "quadruple")

ARCHIVE_MAGIC = b"SMT1"
ARCHIVE_VERSION = 1
LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    sample_rate: int
    samples: np.ndarray  # [channels, n]

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.shape[0] not in (1, 2):
            raise ValidationError(f"expected 1 or 2 channels, got {self.samples.shape[0]}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class SpectrogramImage:
    values: np.ndarray  # [bands, frames]
    variant: str
    recording_id: str
    segment_index: int

    def __post_init__(self):
        if self.variant not in VARIANT_CODES:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.segment_index < 0:
            raise ValidationError("segment_index must be non-negative")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.recording_id, self.segment_index, self.variant)


@dataclass
class MelFilterbank:
    n_mels: int
    n_fft: int
    sample_rate: int
    weights: np.ndarray  # [n_mels, n_fft // 2 + 1]
    center_hz: np.ndarray


@dataclass
class FeatureOptions:
    sample_rate: int = 44100
    n_fft: int = 2048
    hop_length: int = 1024
    n_mels: int = 128
    segment_frames: int = 128
    segment_hop: int = 32
    channels: str = "triple"
    fmin: float = 0.0
    fmax: Optional[float] = None
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if self.channels not in CHANNEL_MODES:
            raise ConfigurationError(f"channels must be one of {CHANNEL_MODES}, got {self.channels!r}")

    @classmethod
    def desk_scale(cls, channels: str = "triple") -> "FeatureOptions":
        """32-band, 32-frame images for the toy network; STFT settings unchanged."""
        return cls(n_mels=32, segment_frames=32, segment_hop=8, channels=channels)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- WAV I/O ------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """16-bit PCM WAV to floats in [-1, 1) (divided by 32768)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2 or w.getcomptype() != "NONE":
                raise DataError(f"{path}: only 16-bit PCM WAV is supported")
            n_ch, rate, n = w.getnchannels(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, n_ch).T
    return AudioClip(rate, pcm.astype(np.float64) / 32768.0)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(clip.channels)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.T.tobytes())


# -- DSP ----------------------------------------------------------------------

def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_stft_frames(n_samples: int, n_fft: int = 2048, hop: int = 1024) -> int:
    if n_samples < n_fft:
        raise DataError(f"clip of {n_samples} samples is shorter than one {n_fft}-point window")
    return 1 + (n_samples - n_fft) // hop


def stft_power(signal: np.ndarray, n_fft: int = 2048, hop: int = 1024) -> np.ndarray:
    """Power spectrogram ``[frames, n_fft // 2 + 1]``; no centre padding."""
    x = np.asarray(signal, dtype=np.float64)
    n_frames = n_stft_frames(len(x), n_fft, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hann_periodic(n_fft), axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                         fmax: Optional[float] = None) -> MelFilterbank:
    """Triangular filters with unit peak on HTK-mel-spaced centres."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2.0:
        raise ConfigurationError(f"need 0 <= fmin < fmax <= Nyquist; got fmin={fmin}, fmax={fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(n_mels, n_fft, sample_rate, weights, edges[1:-1].copy())


def log_mel(power: np.ndarray, filterbank: MelFilterbank, floor: float = LOG_FLOOR) -> np.ndarray:
    """``ln(max(power @ W.T, floor))`` -> ``[frames, n_mels]``."""
    if power.shape[1] != filterbank.weights.shape[1]:
        raise ValidationError(f"power has {power.shape[1]} bins, filterbank expects {filterbank.weights.shape[1]}")
    return np.log(np.maximum(power @ filterbank.weights.T, floor))


def n_segments(n_frames: int, win: int = 128, hop: int = 32) -> int:
    if n_frames < win:
        raise DataError(f"{n_frames} frames is shorter than one {win}-frame segment")
    return 1 + (n_frames - win) // hop


def segment(logmel: np.ndarray, recording_id: str, variant: str, win: int = 128,
            hop: int = 32) -> list[SpectrogramImage]:
    """Cut a ``[frames, n_mels]`` matrix into ``[bands, win]`` images; partial tails are dropped."""
    count = n_segments(logmel.shape[0], win, hop)
    return [SpectrogramImage(np.ascontiguousarray(logmel[k * hop:k * hop + win].T), variant, recording_id, k)
            for k in range(count)]


def channel_variants(left: SpectrogramImage, right: Optional[SpectrogramImage],
                     mode: str) -> list[SpectrogramImage]:
    """Binaural images for one segment: {L, R, L+R} or {L, R, L+R, L-R}."""
    if mode not in ("triple", "quadruple"):
        raise ConfigurationError(f"binaural variant mode must be triple or quadruple, got {mode!r}")
    if right is None or left.variant == "mono" or right.variant == "mono":
        raise ConfigurationError(f"{mode} channel variants need a stereo recording")
    if left.values.shape != right.values.shape:
        raise ValidationError(f"left/right image shapes differ: {left.values.shape} vs {right.values.shape}")
    rid, k = left.recording_id, left.segment_index
    out = [left, right, SpectrogramImage(left.values + right.values, "sum", rid, k)]
    if mode == "quadruple":
        out.append(SpectrogramImage(left.values - right.values, "diff", rid, k))
    return out


def fit_standardizer(images: Iterable) -> tuple[float, float]:
    """Global scalar mean/std over every pixel of the training images."""
    arrays = [np.asarray(getattr(im, "values", im), dtype=np.float64).reshape(-1) for im in images]
    if not arrays:
        raise DataError("cannot fit a standardizer on an empty image set")
    flat = np.concatenate(arrays)
    return float(flat.mean()), float(max(flat.std(), 1e-6))


def apply_standardizer(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    return ((np.asarray(values, dtype=np.float64) - mean) / std).astype(np.float32)


# -- per-recording extraction ---------------------------------------------------

def clip_images(clip: AudioClip, recording_id: str, options: FeatureOptions,
                filterbank: Optional[MelFilterbank] = None) -> list[SpectrogramImage]:
    """All segment images of one recording, variants of a segment adjacent."""
    if clip.sample_rate != options.sample_rate:
        raise ConfigurationError(
            f"{recording_id}: sample rate {clip.sample_rate} Hz != configured {options.sample_rate} Hz (no resampling)")
    fb = filterbank or build_mel_filterbank(options.n_mels, options.n_fft, options.sample_rate,
                                            options.fmin, options.fmax)

    def channel_segments(signal, variant):
        lm = log_mel(stft_power(signal, options.n_fft, options.hop_length), fb, options.log_floor)
        return segment(lm, recording_id, variant, options.segment_frames, options.segment_hop)

    if options.channels == "mono":
        return channel_segments(clip.samples.mean(axis=0), "mono")
    if clip.channels != 2:
        raise ConfigurationError(f"{recording_id}: {options.channels} mode needs a stereo recording")
    lefts = channel_segments(clip.samples[0], "left")
    rights = channel_segments(clip.samples[1], "right")
    out = []
    for left, right in zip(lefts, rights):
        out.extend(channel_variants(left, right, options.channels))
    return out


# -- archive ------------------------------------------------------------------

def write_archive(target, images: Sequence[SpectrogramImage]) -> None:
    """Binary little-endian feature archive; ``target`` is a path or a binary stream."""
    if isinstance(target, (str, os.PathLike)):
        with open(target, "wb") as fh:
            write_archive(fh, images)
        return
    target.write(ARCHIVE_MAGIC + struct.pack("<II", ARCHIVE_VERSION, len(images)))
    for im in images:
        rid = im.recording_id.encode("utf-8")
        target.write(struct.pack("<H", len(rid)) + rid)
        target.write(struct.pack("<IIBI", im.bands, im.frames, VARIANT_CODES[im.variant], im.segment_index))
        target.write(np.ascontiguousarray(im.values, dtype="<f4").tobytes())


def read_archive(source) -> list[SpectrogramImage]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return read_archive(fh)
    data = source.read()
    if data[:4] != ARCHIVE_MAGIC:
        raise DataError("not a feature archive (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != ARCHIVE_VERSION:
        raise DataError(f"unsupported feature archive version {version}")
    pos, out = 12, []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            rid = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            bands, frames, code, seg = struct.unpack_from("<IIBI", data, pos)
            pos += 13
            nbytes = 4 * bands * frames
            if pos + nbytes > len(data):
                raise DataError("feature archive truncated")
            values = np.frombuffer(data, dtype="<f4", count=bands * frames, offset=pos).reshape(bands, frames)
            pos += nbytes
            out.append(SpectrogramImage(values.astype(np.float32), VARIANT_NAMES[code], rid, seg))
    except struct.error as exc:
        raise DataError(f"feature archive truncated: {exc}") from exc
    return out


# -- manifests ------------------------------------------------------------------

def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _extract_entry(args):
    entry, base, options = args
    clip = read_wav(Path(base) / entry["wav_path"])
    return clip_images(clip, entry.get("recording_id", entry["id"]), options)


def extract_dataset(manifest: dict, options: FeatureOptions, base_dir=".", jobs: int = 1):
    """Extract every recording in a manifest.

    Returns ``(images, updated_manifest)``: images in manifest order, and a
    manifest with one entry per image whose ``feature_offset`` indexes the
    archive record.  Worker count does not affect the output order.
    """
    entries = manifest["entries"]
    work = [(e, str(base_dir), options) for e in entries]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_entry = list(pool.map(_extract_entry, work))
    else:
        per_entry = [_extract_entry(w) for w in work]

    images, out_entries = [], []
    for entry, imgs in zip(entries, per_entry):
        for im in imgs:
            rec = {k: v for k, v in entry.items() if k not in ("wav_path", "id")}
            rec.update(id=f"{im.recording_id}/{im.segment_index}/{im.variant}", feature_offset=len(images),
                       recording_id=im.recording_id, segment_index=im.segment_index, variant=im.variant)
            out_entries.append(rec)
            images.append(im)
    updated = {k: v for k, v in manifest.items() if k != "entries"}
    updated["entries"] = out_entries
    updated["features"] = options.to_dict()
    return images, updated


def archive_bytes(images: Sequence[SpectrogramImage]) -> bytes:
    buf = io.BytesIO()
    write_archive(buf, images)
    return buf.getvalue()
