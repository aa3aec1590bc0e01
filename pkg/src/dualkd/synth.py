"""Synthetic strong/weak/unlabeled SED data and a frozen mock embedding provider.

Each event class is a tone burst in its own carrier band with a class-specific
amplitude envelope, mixed over pink noise.  Generation is a pure function of
``(seed, config)``: every clip draws from its own RNG stream derived from the
dataset seed and the clip id.

On-disk layout of a dataset directory::

    dataset.json         class names, feature config, generation settings
    manifest.jsonl       one ClipRecord per line (labels as seen in training)
    ground_truth.jsonl   events of weak and unlabeled clips, evaluation only
    waves/<id>.f32       raw little-endian float32 mono samples
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .features import FeatureConfig, logmel_from_wave, mel_filterbank, read_wave, write_wave

SPLITS = ("strong", "weak", "unlabeled")
EMBEDDING_DIM = 768


@dataclass
class ClipRecord:
    id: str
    split: str
    duration: float = 10.0
    events: list = field(default_factory=list)  # [class_index, onset_s, offset_s]
    weak_labels: list = field(default_factory=list)
    wave_path: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InputError(f"clip {self.id}: unknown split {self.split!r}")
        for k, on, off in self.events:
            if not 0 <= on < off <= self.duration + 1e-9:
                raise InputError(f"clip {self.id}: event {(k, on, off)} outside [0, {self.duration}]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "ClipRecord":
        d = json.loads(line)
        d["events"] = [[int(k), float(a), float(b)] for k, a, b in d.get("events", [])]
        d["weak_labels"] = [int(k) for k in d.get("weak_labels", [])]
        return cls(**d)


@dataclass
class Manifest:
    records: list
    class_names: list
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    root: Path | None = None
    ground_truth: dict = field(default_factory=dict)  # id -> events, for weak/unlabeled

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise InputError("manifest clip ids are not unique")
        K = len(self.class_names)
        for r in self.records:
            if any(not 0 <= e[0] < K for e in r.events) or any(not 0 <= k < K for k in r.weak_labels):
                raise InputError(f"clip {r.id}: class index outside [0, {K})")

    @property
    def n_classes(self):
        return len(self.class_names)

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def counts(self):
        return {s: len(self.by_split(s)) for s in SPLITS}

    def truth_events(self, record):
        """Reference events for evaluation regardless of the training split."""
        if record.split == "strong":
            return record.events
        return self.ground_truth.get(record.id, [])

    def wave(self, record):
        base = self.root if self.root is not None else Path(".")
        return read_wave(base / record.wave_path)

    # persistence
    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        meta = {"class_names": self.class_names, "feature_config": self.feature_config.to_dict()}
        (root / "dataset.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
        with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")
        with open(root / "ground_truth.jsonl", "w", encoding="utf-8") as fh:
            for r in self.records:
                if r.id in self.ground_truth:
                    fh.write(json.dumps({"id": r.id, "events": self.ground_truth[r.id]}) + "\n")
        self.root = root

    @classmethod
    def load(cls, root):
        root = Path(root)
        try:
            meta = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
            lines = (root / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
            records = [ClipRecord.from_json(line) for line in lines if line.strip()]
        except (OSError, json.JSONDecodeError, TypeError, KeyError, ValueError) as e:
            raise FormatError(f"cannot read dataset at {root}: {e}") from None
        truth = {}
        gt = root / "ground_truth.jsonl"
        if gt.exists():
            for line in gt.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    d = json.loads(line)
                    truth[d["id"]] = [[int(k), float(a), float(b)] for k, a, b in d["events"]]
        return cls(records, list(meta["class_names"]), FeatureConfig.from_dict(meta["feature_config"]),
                   root=root, ground_truth=truth)


# -- signal generation --------------------------------------------------------

def clip_rng_seed(dataset_seed: int, clip_id: str) -> int:
    ss = np.random.SeedSequence([int(dataset_seed), zlib.crc32(clip_id.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def class_carrier(k: int, n_classes: int, sample_rate: int) -> float:
    """Centre frequencies spread log-uniformly between 300 Hz and 0.75 * Nyquist."""
    lo, hi = 300.0, 0.75 * sample_rate / 2
    return float(lo * (hi / lo) ** (k / max(1, n_classes - 1)))


def class_envelope(k: int, t: np.ndarray) -> np.ndarray:
    """Amplitude envelope over local event time ``t`` (seconds from onset)."""
    kind = k % 5
    if kind == 0:
        env = np.ones_like(t)
    elif kind == 1:
        env = 0.6 + 0.4 * np.sin(2 * np.pi * 8.0 * t)
    elif kind == 2:
        env = np.exp(-((t % 0.25) / 0.08))
    elif kind == 3:
        env = np.minimum(1.0, 0.3 + t / max(t[-1], 1e-3))
    else:
        env = 0.5 + 0.5 * (np.sin(2 * np.pi * 3.0 * t) > 0)
    ramp = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.01)  # 10 ms fades
    return env * np.clip(ramp, 0.0, 1.0)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.arange(spec.size)
    f[0] = 1
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / np.sqrt(np.mean(x**2))


def synthesize_clip(events, duration, n_classes, rng, sample_rate=16000, snr_db=6.0):
    n = int(round(duration * sample_rate))
    noise = pink_noise(n, rng) * 0.05
    noise_power = np.mean(noise**2)
    signal = np.zeros(n)
    for k, on, off in events:
        a, b = int(round(on * sample_rate)), int(round(off * sample_rate))
        t = np.arange(b - a) / sample_rate
        f = class_carrier(k, n_classes, sample_rate) * rng.uniform(0.97, 1.03)
        burst = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) * class_envelope(k, t)
        p = np.mean(burst**2)
        if p > 0:
            burst *= np.sqrt(noise_power * 10 ** (snr_db / 10) / p)
        signal[a:b] += burst
    return (signal + noise).astype(np.float32)


def draw_events(rng, n_classes, duration, max_events=3):
    count = int(rng.integers(1, max_events + 1))
    events = []
    for _ in range(count):
        k = int(rng.integers(n_classes))
        length = rng.uniform(0.15, 0.4) * duration
        on = rng.uniform(0.0, duration - length)
        events.append([k, round(float(on), 4), round(float(on + length), 4)])
    events.sort(key=lambda e: (e[1], e[0]))
    return events


def generate_dataset(
    out_dir,
    k_classes: int = 5,
    counts=None,
    seed: int = 0,
    duration: float = 10.0,
    snr_db: float = 6.0,
    feature_config: FeatureConfig | None = None,
    prefix: str = "clip",
) -> Manifest:
    """Write a synthetic dataset to ``out_dir`` and return its manifest.

    ``counts`` maps split name to clip count, e.g. ``{"strong": 20, "weak": 20,
    "unlabeled": 60}``.
    """
    if k_classes < 2:
        raise ConfigurationError("need at least two event classes")
    counts = dict(counts or {"strong": 20, "weak": 20, "unlabeled": 60})
    if any(v < 0 for v in counts.values()) or set(counts) - set(SPLITS):
        raise ConfigurationError(f"bad split counts {counts}")
    cfg = feature_config or FeatureConfig()
    out_dir = Path(out_dir)
    (out_dir / "waves").mkdir(parents=True, exist_ok=True)

    records, truth = [], {}
    for split in SPLITS:
        for i in range(counts.get(split, 0)):
            cid = f"{prefix}_{split}_{i:05d}"
            cseed = clip_rng_seed(seed, cid)
            rng = np.random.default_rng(cseed)
            events = draw_events(rng, k_classes, duration)
            wave = synthesize_clip(events, duration, k_classes, rng, cfg.sample_rate, snr_db)
            rel = f"waves/{cid}.f32"
            write_wave(out_dir / rel, wave)
            weak = sorted({e[0] for e in events})
            rec = ClipRecord(
                id=cid, split=split, duration=duration, wave_path=rel, seed=cseed,
                events=events if split == "strong" else [],
                weak_labels=weak if split in ("strong", "weak") else [],
            )
            if split != "strong":
                truth[cid] = events
            records.append(rec)
    manifest = Manifest(records, [f"class_{k}" for k in range(k_classes)], cfg, ground_truth=truth)
    manifest.save(out_dir)
    return manifest


# -- labels -------------------------------------------------------------------

def event_frames(onset, offset, cfg: FeatureConfig, n_frames: int):
    """Half-open frame range ``[start, stop)`` covering ``[onset, offset]`` on the hop grid."""
    fps = cfg.sample_rate / cfg.hop_size
    start = int(np.floor(onset * fps + 1e-9))
    stop = int(np.ceil(offset * fps - 1e-9))
    return max(0, start), min(n_frames, max(stop, start + 1))


def frame_labels(events, n_classes, cfg: FeatureConfig, n_frames: int) -> np.ndarray:
    y = np.zeros((n_frames, n_classes), dtype=np.float32)
    for k, on, off in events:
        a, b = event_frames(on, off, cfg, n_frames)
        y[a:b, int(k)] = 1.0
    return y


# -- mock embeddings ------------------------------------------------------------

class MockEmbeddingProvider:
    """Frozen stand-in for a large pre-trained audio encoder.

    Each output frame is ``tanh`` of a fixed random projection of four stacked
    log-mel frames (the clip is z-scored first), emitted at half the input
    frame rate.
    """

    context = 4

    def __init__(self, n_mels: int, seed: int = 0, dim: int = EMBEDDING_DIM):
        self.n_mels, self.seed, self.dim = n_mels, seed, dim
        rng = np.random.default_rng([int(seed), int(n_mels), int(dim), 0x5EDD])
        width = self.context * n_mels
        self.weight = rng.normal(scale=1.5 / np.sqrt(width), size=(width, dim))

    def output_frames(self, n_frames: int) -> int:
        return max(1, n_frames // 2)

    def __call__(self, logmel) -> np.ndarray:
        x = np.asarray(logmel, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_mels:
            raise InputError(f"embedding provider expects [T, {self.n_mels}], got {x.shape}")
        T = x.shape[0]
        x = (x - x.mean()) / (x.std() + 1e-8)
        Te = self.output_frames(T)
        centre = 2 * np.arange(Te)
        idx = np.clip(centre[:, None] + np.arange(-1, self.context - 1)[None, :], 0, T - 1)
        stacked = x[idx].reshape(Te, -1)
        return np.tanh(stacked @ self.weight).astype(np.float32)


def mock_embedding_provider(logmel, seed=0, dim=EMBEDDING_DIM):
    return MockEmbeddingProvider(np.shape(logmel)[1], seed, dim)(logmel)


def write_embedding(path, emb) -> None:
    emb = np.asarray(emb)
    if emb.ndim != 2:
        raise InputError(f"embedding must be [T_e, width], got {emb.shape}")
    header = struct.pack("<QQ", *emb.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(emb, dtype="<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"{path}: embedding header truncated")
    te, width = struct.unpack("<QQ", buf[:16])
    if len(buf) != 16 + 4 * te * width:
        raise FormatError(f"{path}: expected {te}x{width} values, file holds {(len(buf) - 16) // 4}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(te, width).copy()


# -- feature store and batches ----------------------------------------------------

@dataclass
class Batch:
    ids: list
    features: np.ndarray  # [B, 1, T, F]
    frame_labels: np.ndarray  # [B, T, K], zero rows for non-strong clips
    clip_labels: np.ndarray  # [B, K], zero rows for unlabeled clips
    strong_mask: np.ndarray  # [B]
    weak_mask: np.ndarray  # [B]
    unlabeled_mask: np.ndarray  # [B]
    embeddings: np.ndarray | None = None  # [B, T_e, E]

    def __len__(self):
        return len(self.ids)

    @property
    def labelled_mask(self):
        return self.strong_mask + self.weak_mask


class ClipStore:
    """Log-mel features, labels and embeddings for every clip of a manifest, computed once."""

    def __init__(self, manifest: Manifest, provider: MockEmbeddingProvider | None = None,
                 cache_dir=None, dtype=np.float32):
        self.manifest = manifest
        self.cfg = manifest.feature_config
        self.K = manifest.n_classes
        self.dtype = dtype
        fb = mel_filterbank(self.cfg)
        self.features, self.frame_y, self.clip_y, self.embeddings = {}, {}, {}, {}
        n_frames = None
        for r in manifest.records:
            feats = logmel_from_wave(manifest.wave(r), self.cfg, fb).astype(dtype)
            if n_frames is None:
                n_frames = feats.shape[0]
            elif feats.shape[0] != n_frames:
                raise InputError(f"clip {r.id} has {feats.shape[0]} frames, expected {n_frames}")
            self.features[r.id] = feats
            self.frame_y[r.id] = frame_labels(r.events, self.K, self.cfg, n_frames)
            y = np.zeros(self.K, dtype=np.float32)
            y[list(r.weak_labels)] = 1.0
            self.clip_y[r.id] = y
            if provider is not None:
                self.embeddings[r.id] = self._embedding(r.id, feats, provider, cache_dir)
        self.n_frames = n_frames
        self.ids = {s: [r.id for r in manifest.by_split(s)] for s in SPLITS}
        self.split_of = {r.id: r.split for r in manifest.records}

    @staticmethod
    def _embedding(cid, feats, provider, cache_dir):
        if cache_dir is None:
            return provider(feats)
        path = Path(cache_dir) / f"{cid}.emb"
        if path.exists():
            return read_embedding(path)
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        emb = provider(feats)
        write_embedding(path, emb)
        return emb

    def make_batch(self, ids) -> Batch:
        split = np.array([self.split_of[i] for i in ids])
        emb = np.stack([self.embeddings[i] for i in ids]) if self.embeddings else None
        return Batch(
            ids=list(ids),
            features=np.stack([self.features[i] for i in ids])[:, None],
            frame_labels=np.stack([self.frame_y[i] for i in ids]),
            clip_labels=np.stack([self.clip_y[i] for i in ids]),
            strong_mask=(split == "strong").astype(self.dtype),
            weak_mask=(split == "weak").astype(self.dtype),
            unlabeled_mask=(split == "unlabeled").astype(self.dtype),
            embeddings=emb,
        )


def compose_batch(store: ClipStore, composition, rng: np.random.Generator) -> Batch:
    """Draw ``composition = (n_strong, n_weak, n_unlabeled)`` clips without replacement."""
    ids = []
    for split, n in zip(SPLITS, composition):
        pool = store.ids[split]
        if n > len(pool):
            raise ConfigurationError(f"batch wants {n} {split} clips, dataset has {len(pool)}")
        if n:
            ids += [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    return store.make_batch(ids)


class BatchSampler:
    """Deterministic epoch-wise batches cycling each split through its own permutation."""

    def __init__(self, store: ClipStore, composition, rng: np.random.Generator):
        self.store, self.composition, self.rng = store, tuple(composition), rng
        for split, n in zip(SPLITS, self.composition):
            if n > len(store.ids[split]):
                raise ConfigurationError(f"batch wants {n} {split} clips, dataset has {len(store.ids[split])}")
        self._queues = {s: [] for s in SPLITS}

    def steps_per_epoch(self) -> int:
        return max(
            int(np.ceil(len(self.store.ids[s]) / n)) for s, n in zip(SPLITS, self.composition) if n > 0
        )

    def _take(self, split, n):
        q = self._queues[split]
        while len(q) < n:
            pool = self.store.ids[split]
            q.extend(pool[i] for i in self.rng.permutation(len(pool)))
        out, self._queues[split] = q[:n], q[n:]
        return out

    def next_batch(self) -> Batch:
        ids = []
        for split, n in zip(SPLITS, self.composition):
            if n:
                ids += self._take(split, n)
        return self.store.make_batch(ids)
