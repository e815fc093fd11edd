"""Deterministic synthetic benchmark: feature-space videos with planted
manipulation artifacts, mechanism/domain tags, manifest and feature-file IO,
and the four protocol splits."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError

FEATURE_MAGIC = b"AFFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHII")

DOMAIN_A = "A"
DOMAIN_B = "B"
DOMAIN_OPEN = "open-world"
_DOMAINS = (DOMAIN_A, DOMAIN_B, DOMAIN_OPEN)

PROTOCOLS = ("intra", "cross-AB", "cross-BA", "open-world")


@dataclass(frozen=True)
class MechanismSignature:
    """Parameters of one forgery mechanism's feature-space artifact.

    All three cues (mean shift, high-frequency noise, boundary jumps) use
    per-segment random directions; a mechanism is identified by its
    magnitude/period signature, not by a fixed subspace, so detectors must
    key on artifact strength rather than memorizing directions.
    """

    name: str
    domain: str
    shift_magnitude: float
    noise_amplitude: float
    noise_period: int
    jump_magnitude: float

    def validate(self) -> None:
        if self.domain not in _DOMAINS:
            raise ConfigError(
                f"mechanism {self.name!r}: domain must be one of {_DOMAINS}, "
                f"got {self.domain!r}"
            )
        if min(self.shift_magnitude, self.noise_amplitude,
               self.jump_magnitude) < 0:
            raise ConfigError(
                f"mechanism {self.name!r}: magnitudes must be >= 0"
            )
        # a period-2 sinusoid sampled at integer frames collapses to
        # +/- sin(phase), which can be arbitrarily close to silent
        if self.noise_period < 3:
            raise ConfigError(
                f"mechanism {self.name!r}: noise_period must be >= 3, got "
                f"{self.noise_period}"
            )

def default_mechanisms() -> list[MechanismSignature]:
    """Two mechanisms per closed domain plus one held-out mechanism.

    The held-out mechanism's magnitude signature sits just outside the
    closed-domain range (weakest mean shift), so open-world performance
    measures generalization to an unseen cue mixture rather than recall of
    a training mechanism.
    """
    return [
        MechanismSignature("gen-alpha", DOMAIN_A, 2.0, 2.8, 3, 7.0),
        MechanismSignature("gen-beta", DOMAIN_A, 1.6, 2.4, 4, 6.2),
        MechanismSignature("edit-gamma", DOMAIN_B, 2.2, 2.2, 5, 7.4),
        MechanismSignature("edit-delta", DOMAIN_B, 1.8, 2.6, 4, 6.6),
        MechanismSignature("unseen-omega", DOMAIN_OPEN, 1.5, 2.4, 4, 6.6),
    ]


@dataclass
class SyntheticConfig:
    num_videos: int = 500
    t_min: int = 128
    t_max: int = 512
    feature_dim: int = 32
    fps: float = 8.0
    max_segments: int = 2
    # uniform ratios on [0.10, 0.40]: two thirds of planted segments take
    # under 30% of their video, and none get short enough that the top
    # overlap threshold demands sub-quarter-frame boundaries
    ratio_low: float = 0.10
    ratio_high: float = 0.40
    walk_increment_std: float = 0.01
    walk_smoothing: int = 9
    real_fraction: float = 0.0
    master_seed: int = 0
    mechanisms: list[MechanismSignature] = field(
        default_factory=default_mechanisms
    )

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ConfigError(
                f"data: num_videos must be >= 1, got {self.num_videos}"
            )
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(
                f"data: need 1 <= t_min <= t_max, got "
                f"({self.t_min}, {self.t_max})"
            )
        if self.feature_dim < 1:
            raise ConfigError(
                f"data: feature_dim must be >= 1, got {self.feature_dim}"
            )
        if self.fps <= 0:
            raise ConfigError(f"data: fps must be positive, got {self.fps}")
        if self.max_segments < 1:
            raise ConfigError(
                f"data: max_segments must be >= 1, got {self.max_segments}"
            )
        if not 0.0 < self.ratio_low <= self.ratio_high <= 1.0:
            raise ConfigError(
                f"data: segment ratio bounds must satisfy "
                f"0 < low <= high <= 1, got "
                f"({self.ratio_low}, {self.ratio_high})"
            )
        if self.walk_smoothing < 1:
            raise ConfigError(
                f"data: walk_smoothing must be >= 1, got "
                f"{self.walk_smoothing}"
            )
        if not 0.0 <= self.real_fraction < 1.0:
            raise ConfigError(
                f"data: real_fraction must lie in [0, 1), got "
                f"{self.real_fraction}"
            )
        if not self.mechanisms:
            raise ConfigError("data: at least one mechanism is required")
        names = [m.name for m in self.mechanisms]
        if len(set(names)) != len(names):
            raise ConfigError(f"data: duplicate mechanism names in {names}")
        for m in self.mechanisms:
            m.validate()


@dataclass(frozen=True)
class Segment:
    start_sec: float
    end_sec: float
    method: str
    domain: str


@dataclass
class VideoRecord:
    id: str
    duration_sec: float
    fps: float
    feature_file: str
    label: str
    segments: list[Segment]

    def validate(self) -> None:
        if self.label not in ("real", "fake"):
            raise DataError(
                f"video {self.id}: label must be real|fake, got {self.label!r}"
            )
        if self.label == "fake" and not self.segments:
            raise DataError(f"video {self.id}: fake video has no segments")
        prev_end = None
        for seg in sorted(self.segments, key=lambda s: s.start_sec):
            if not 0.0 <= seg.start_sec < seg.end_sec <= self.duration_sec + 1e-9:
                raise DataError(
                    f"video {self.id}: segment [{seg.start_sec}, "
                    f"{seg.end_sec}] outside [0, {self.duration_sec}]"
                )
            if prev_end is not None and seg.start_sec < prev_end - 1e-9:
                raise DataError(f"video {self.id}: overlapping segments")
            prev_end = seg.end_sec


# -- feature file format ----------------------------------------------------

def write_features(path: str, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise DataError(f"write_features: expected a TxC array, got {arr.shape}")
    t, c = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, c))
        fh.write(payload)


def load_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataError(
            f"{path}: truncated header, file ends at byte {len(blob)} "
            f"(need {_HEADER.size})"
        )
    magic, version, t, c = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise DataError(
            f"{path}: bad magic {magic!r} at byte 0 (expected "
            f"{FEATURE_MAGIC!r})"
        )
    if version != FEATURE_VERSION:
        raise DataError(
            f"{path}: unsupported version {version} at byte 4 (expected "
            f"{FEATURE_VERSION})"
        )
    expected = t * c * 4
    got = len(blob) - _HEADER.size
    if got != expected:
        raise DataError(
            f"{path}: payload of {got} bytes at offset {_HEADER.size} does "
            f"not match header {t}x{c} ({expected} bytes)"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(t, c).astype(np.float64)


# -- manifest IO -------------------------------------------------------------

def manifest_to_dict(videos: list[VideoRecord]) -> dict:
    return {
        "videos": [
            {
                "id": v.id,
                "duration_sec": v.duration_sec,
                "fps": v.fps,
                "feature_file": v.feature_file,
                "label": v.label,
                "segments": [
                    {
                        "start_sec": s.start_sec,
                        "end_sec": s.end_sec,
                        "method": s.method,
                        "domain": s.domain,
                    }
                    for s in v.segments
                ],
            }
            for v in videos
        ]
    }


def save_manifest(path: str, videos: list[VideoRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(videos), fh, indent=2)
        fh.write("\n")


def load_manifest(path: str) -> list[VideoRecord]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "videos" not in raw:
        raise DataError(f"{path}: manifest must be an object with 'videos'")
    videos = []
    for i, item in enumerate(raw["videos"]):
        try:
            segments = [
                Segment(
                    start_sec=float(s["start_sec"]),
                    end_sec=float(s["end_sec"]),
                    method=str(s["method"]),
                    domain=str(s["domain"]),
                )
                for s in item.get("segments", [])
            ]
            video = VideoRecord(
                id=str(item["id"]),
                duration_sec=float(item["duration_sec"]),
                fps=float(item["fps"]),
                feature_file=str(item["feature_file"]),
                label=str(item["label"]),
                segments=segments,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(
                f"{path}: malformed video entry at index {i} ({exc})"
            ) from exc
        video.validate()
        videos.append(video)
    return videos


# -- generation ---------------------------------------------------------------

def _smooth_walk(rng: np.random.Generator, t: int, dim: int,
                 inc_std: float, window: int) -> np.ndarray:
    inc = rng.standard_normal((t, dim)) * inc_std
    if window > 1:
        kernel = np.ones(window) / window
        pad = window // 2
        padded = np.pad(inc, ((pad, window - 1 - pad), (0, 0)), mode="edge")
        inc = np.stack(
            [np.convolve(padded[:, j], kernel, mode="valid") for j in range(dim)],
            axis=1,
        )
    return np.cumsum(inc, axis=0)


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _sample_segments(rng: np.random.Generator, t: int, cfg: SyntheticConfig,
                     video_index: int) -> list[tuple[int, int]]:
    count = int(rng.integers(1, cfg.max_segments + 1))
    placed: list[tuple[int, int]] = []
    for _ in range(count):
        ok = False
        for _attempt in range(200):
            ratio = rng.uniform(cfg.ratio_low, cfg.ratio_high)
            length = max(2, int(round(ratio * t)))
            if length >= t:
                continue
            start = int(rng.integers(0, t - length + 1))
            end = start + length
            if all(end <= a or start >= b for a, b in placed):
                placed.append((start, end))
                ok = True
                break
        if not ok and not placed:
            raise DataError(
                f"video index {video_index}: could not place any segment "
                f"after bounded retries (T={t})"
            )
        # a second segment that will not fit is silently skipped
    placed.sort()
    return placed


def apply_artifacts(features: np.ndarray, bounds: tuple[int, int],
                    mech: MechanismSignature,
                    rng: np.random.Generator) -> None:
    """Plant one mechanism's artifact inside ``bounds`` (in place).

    Mean shift, high-frequency periodic noise, and discontinuity jumps at
    the two boundary frames, each along its own segment-random direction.
    """
    a, b = bounds
    t_seg = b - a
    dim = features.shape[1]
    features[a:b] += mech.shift_magnitude * _unit(rng, dim)
    noise_dir = _unit(rng, dim)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * np.arange(t_seg) / mech.noise_period + phase)
    features[a:b] += mech.noise_amplitude * wave[:, None] * noise_dir[None, :]
    features[a] += mech.jump_magnitude * _unit(rng, dim)
    features[b - 1] += mech.jump_magnitude * _unit(rng, dim)


def generate_dataset(cfg: SyntheticConfig, out_dir: str) -> str:
    """Write feature files plus ``manifest.json`` under ``out_dir``.

    Video i derives every random draw from SeedSequence([master_seed, i]),
    so outputs are bit-identical for a given config regardless of
    generation order.  Returns the manifest path.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    n_real = int(round(cfg.num_videos * cfg.real_fraction))
    videos = []
    for i in range(cfg.num_videos):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.master_seed, i])
        )
        t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        features = _smooth_walk(rng, t, cfg.feature_dim,
                                cfg.walk_increment_std, cfg.walk_smoothing)
        vid = f"vid{i:05d}"
        is_real = i < n_real
        segments: list[Segment] = []
        if not is_real:
            mech = cfg.mechanisms[i % len(cfg.mechanisms)]
            for a, b in _sample_segments(rng, t, cfg, i):
                apply_artifacts(features, (a, b), mech, rng)
                segments.append(
                    Segment(start_sec=a / cfg.fps, end_sec=b / cfg.fps,
                            method=mech.name, domain=mech.domain)
                )
        rel = os.path.join("features", f"{vid}.afft")
        write_features(os.path.join(out_dir, rel), features)
        record = VideoRecord(
            id=vid, duration_sec=t / cfg.fps, fps=cfg.fps, feature_file=rel,
            label="real" if is_real else "fake", segments=segments,
        )
        record.validate()
        videos.append(record)
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest_path, videos)
    return manifest_path


# -- protocol splits ----------------------------------------------------------

def video_method(video: VideoRecord) -> str:
    return video.segments[0].method if video.segments else "real"


def video_domain(video: VideoRecord) -> str:
    return video.segments[0].domain if video.segments else "real"


def split_dataset(videos: list[VideoRecord], protocol: str,
                  train_fraction: float = 0.75, split_seed: int = 0
                  ) -> tuple[list[VideoRecord], list[VideoRecord]]:
    """Return (train, test) video lists for one evaluation protocol.

    intra: per-mechanism random split of non-held-out videos; cross-AB /
    cross-BA: one closed domain trains, the other tests; open-world: both
    closed domains train, held-out-tagged videos test.  Real videos join
    the training side except under intra, where they split like a stratum.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(
            f"split: unknown protocol {protocol!r}, expected one of "
            f"{PROTOCOLS}"
        )
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(
            f"split: train_fraction must lie in (0, 1), got {train_fraction}"
        )
    by_domain: dict[str, list[VideoRecord]] = {}
    for v in videos:
        by_domain.setdefault(video_domain(v), []).append(v)
    closed = [v for d in (DOMAIN_A, DOMAIN_B) for v in by_domain.get(d, [])]
    reals = by_domain.get("real", [])

    if protocol == "intra":
        if not closed:
            raise DataError(
                "split: intra protocol needs domain-A/B tagged videos"
            )
        strata: dict[str, list[VideoRecord]] = {}
        for v in closed + reals:
            strata.setdefault(video_method(v), []).append(v)
        train, test = [], []
        for method in sorted(strata):
            members = sorted(strata[method], key=lambda v: v.id)
            rng = np.random.default_rng(
                np.random.SeedSequence(
                    [split_seed, *method.encode("utf-8")]
                )
            )
            order = rng.permutation(len(members))
            cut = int(round(train_fraction * len(members)))
            train.extend(members[j] for j in order[:cut])
            test.extend(members[j] for j in order[cut:])
        if not train or not test:
            raise DataError(
                "split: intra split produced an empty side; add videos or "
                "adjust train_fraction"
            )
    elif protocol in ("cross-AB", "cross-BA"):
        a = by_domain.get(DOMAIN_A, [])
        b = by_domain.get(DOMAIN_B, [])
        if not a or not b:
            raise DataError(
                f"split: {protocol} needs videos in both domain A and B"
            )
        train, test = (a, b) if protocol == "cross-AB" else (b, a)
        train = train + reals
    else:
        ow = by_domain.get(DOMAIN_OPEN, [])
        if not ow:
            raise DataError(
                "split: open-world protocol needs held-out-tagged videos"
            )
        if not closed:
            raise DataError(
                "split: open-world protocol needs domain-A/B train videos"
            )
        train, test = closed + reals, ow
    train = sorted(train, key=lambda v: v.id)
    test = sorted(test, key=lambda v: v.id)
    return train, test
