"""Synthetic audio-visual corpus: harmonic tones paired with rendered objects.

Each category owns a disjoint fundamental-frequency band and a shape/colour
recipe. Samples are generated from an RNG stream keyed on (seed, sample
index), so any sample can be regenerated alone and sharded generation gives
the same bytes as serial generation.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import ARTIFACT_SCHEMA_VERSION
from .dsp import (CLIP_LENGTH, SAMPLE_RATE, AudioClip, FreqMap, LogSpec, Spectrogram,
                  build_freq_map, read_wav, stft, to_log_spec, write_wav)
from .errors import ConfigError, DataError, ValidationError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    f0_band: tuple[float, float]
    harmonics: tuple[float, ...]
    shape: str
    color: tuple[float, float, float]


# Bands are chosen so that spectral centroids never overlap between categories.
CATEGORY_TABLE = (
    Category(0, "low-tone", (200.0, 400.0), (1.0, 0.3, 0.1), "disc", (0.9, 0.15, 0.1)),
    Category(1, "high-tone", (1500.0, 3000.0), (1.0, 0.15), "square", (0.1, 0.8, 0.2)),
    Category(2, "mid-tone", (600.0, 1000.0), (1.0, 0.2), "triangle", (0.15, 0.3, 0.95)),
    Category(3, "whistle", (3600.0, 5000.0), (1.0,), "cross", (0.95, 0.85, 0.1)),
    Category(4, "bass", (80.0, 150.0), (1.0, 0.5, 0.25), "ring", (0.85, 0.2, 0.85)),
    Category(5, "reed", (1100.0, 1400.0), (1.0,), "diamond", (0.1, 0.85, 0.9)),
)
MAX_CATEGORIES = len(CATEGORY_TABLE)


def get_categories(n: int) -> tuple[Category, ...]:
    if not 2 <= n <= MAX_CATEGORIES:
        raise ConfigError(f"number of categories must be in [2, {MAX_CATEGORIES}], got {n}")
    return CATEGORY_TABLE[:n]


def _category(category) -> Category:
    if isinstance(category, Category):
        return category
    try:
        cid = int(category)
        if cid < 0:
            raise IndexError(cid)
        return CATEGORY_TABLE[cid]
    except (IndexError, ValueError, TypeError):
        raise KeyError(f"unknown category {category!r}") from None


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def synth_audio(category, seed, duration: float | None = None,
                sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """A sequence of enveloped harmonic notes drawn from the category's band.

    ``duration`` in seconds; ``None`` gives the canonical ``CLIP_LENGTH``.
    """
    cat = _category(category)
    rng = _rng(seed)
    n = CLIP_LENGTH if duration is None else int(round(duration * sample_rate))
    if n <= 0:
        raise ValidationError("duration must be positive")
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    lo, hi = np.log(cat.f0_band[0]), np.log(cat.f0_band[1])
    nyq = sample_rate / 2

    start = 0
    while start < n:
        length = int(rng.uniform(0.3, 1.0) * sample_rate)
        stop = min(n, start + length)
        seg = t[:stop - start]
        f0 = np.exp(rng.uniform(lo, hi))
        vib_rate, vib_depth = rng.uniform(4.0, 6.0), rng.uniform(0.002, 0.006)
        # keep the vibrato inside the band
        f0 = float(np.clip(f0, cat.f0_band[0] * (1 + vib_depth), cat.f0_band[1] * (1 - vib_depth)))
        inst = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * seg))
        phase = 2 * np.pi * np.cumsum(inst) / sample_rate + rng.uniform(0, 2 * np.pi)
        attack = rng.uniform(0.01, 0.03)
        env = np.minimum(seg / attack, 1.0) * np.exp(-seg * rng.uniform(0.5, 2.0))
        note = np.zeros_like(seg)
        for h, amp in enumerate(cat.harmonics, start=1):
            if h * f0 * (1 + vib_depth) < 0.95 * nyq:
                note += amp * np.sin(h * phase)
        out[start:stop] += rng.uniform(0.6, 1.0) * env * note
        start = stop

    peak = np.max(np.abs(out))
    if peak > 0:
        out *= rng.uniform(0.3, 0.5) / peak
    return AudioClip(out, sample_rate)


def spectral_centroid(clip: AudioClip) -> float:
    power = np.abs(np.fft.rfft(clip.samples)) ** 2
    freqs = np.fft.rfftfreq(len(clip), 1.0 / clip.sample_rate)
    return float(np.sum(freqs * power) / max(np.sum(power), 1e-30))


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    dx, dy = xx - c, yy - c
    r = size / 2
    if shape == "disc":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "triangle":
        return (yy >= 0) & (np.abs(dx) <= yy / 2)
    if shape == "cross":
        arm = size / 6
        return (np.abs(dx) <= arm) | (np.abs(dy) <= arm)
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape!r}")


def render_image(category, seed, size: int = 64):
    """Render a category object on a cluttered background.

    Returns ``(image, bbox)`` with image float32 of shape (3, size, size) in
    [0, 1] and bbox ``(x0, y0, x1, y1)`` in pixels, end-exclusive, tight
    around the object's pixels.
    """
    cat = _category(category)
    rng = _rng(seed)
    base = rng.uniform(0.3, 0.5)
    img = np.full((3, size, size), base)
    for _ in range(rng.integers(3, 7)):
        w, h = rng.integers(size // 8, size // 2, size=2)
        x, y = rng.integers(0, size - w), rng.integers(0, size - h)
        img[:, y:y + h, x:x + w] += rng.uniform(-0.08, 0.08, size=(3, 1, 1))

    side = int(rng.integers(int(0.32 * size), int(0.53 * size) + 1))
    x0, y0 = rng.integers(0, size - side + 1, size=2)
    mask = _shape_mask(cat.shape, side)
    color = np.clip(np.asarray(cat.color) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    region = img[:, y0:y0 + side, x0:x0 + side]
    region[:, mask] = color[:, None]

    ys, xs = np.nonzero(mask)
    bbox = (int(x0 + xs.min()), int(y0 + ys.min()), int(x0 + xs.max() + 1), int(y0 + ys.max() + 1))
    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0, 1).astype(np.float32), bbox


@dataclass
class AvSample:
    id: str
    image: np.ndarray
    audio: AudioClip
    category: int
    bbox: tuple[int, int, int, int]

    def __post_init__(self):
        _, h, w = self.image.shape
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValidationError(f"bbox {self.bbox} outside a {w}x{h} image")


@dataclass
class MixtureExample:
    sources: list[AvSample]
    mix: AudioClip
    mix_spec: Spectrogram
    mix_logspec: LogSpec
    gt_masks: np.ndarray
    pair_labels: np.ndarray

    @property
    def pairs(self):
        """Every (embedding index, feature-map index, label) pairing."""
        n = len(self.sources)
        return [(i, j, int(self.pair_labels[i, j])) for i in range(n) for j in range(n)]


def dominance_masks(source_mags) -> np.ndarray:
    """Binary masks marking the dominant source per bin; ties go to the lower index."""
    mags = np.stack(source_mags)
    winner = np.argmax(mags, axis=0)
    return (winner[None] == np.arange(len(mags))[:, None, None]).astype(np.uint8)


def make_mixture(a: AvSample, b: AvSample, fmap: FreqMap | None = None,
                 require_distinct: bool = True, source_mags=None) -> MixtureExample:
    """Sum two samples and derive ground-truth dominance masks.

    ``source_mags`` optionally supplies precomputed log-grid magnitudes of the
    two sources.
    """
    if len(a.audio) != len(b.audio):
        raise ValidationError(f"length mismatch: {len(a.audio)} vs {len(b.audio)}")
    if a.audio.sample_rate != b.audio.sample_rate:
        raise ValidationError("sample rate mismatch")
    if require_distinct and a.category == b.category:
        raise ValidationError("training mixtures need sources of different categories")
    fmap = fmap or build_freq_map()
    mix = AudioClip(a.audio.samples + b.audio.samples, a.audio.sample_rate)
    mix_spec = stft(mix)
    if source_mags is None:
        source_mags = [to_log_spec(stft(s.audio), fmap).mag for s in (a, b)]
    cats = np.array([a.category, b.category])
    return MixtureExample(
        sources=[a, b],
        mix=mix,
        mix_spec=mix_spec,
        mix_logspec=to_log_spec(mix_spec, fmap),
        gt_masks=dominance_masks(source_mags),
        pair_labels=(cats[:, None] == cats[None, :]).astype(np.uint8),
    )


def pair_indices(categories, rng) -> list[tuple[int, int]]:
    """Pair items so that every pair mixes two different categories.

    Repeatedly draws from the two categories with the most items left
    (random tie-break); leftovers that cannot be paired are dropped.
    """
    rng = _rng(rng)
    pools: dict[int, list[int]] = {}
    for idx in rng.permutation(len(categories)):
        pools.setdefault(int(categories[idx]), []).append(int(idx))
    pairs = []
    while True:
        live = [c for c in sorted(pools) if pools[c]]
        if len(live) < 2:
            break
        order = rng.permutation(len(live))
        live = sorted((live[i] for i in order), key=lambda c: -len(pools[c]))
        ca, cb = live[0], live[1]
        pairs.append((pools[ca].pop(), pools[cb].pop()))
    return pairs


# -- corpus on disk ---------------------------------------------------------

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["id", "split", "category", "category_name", "audio", "image", "bbox"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string"},
        "split": {"enum": list(SPLITS)},
        "category": {"type": "integer", "minimum": 0},
        "category_name": {"type": "string"},
        "audio": {"type": "string"},
        "image": {"type": "string"},
        "bbox": {"type": "array", "items": {"type": "integer", "minimum": 0},
                 "minItems": 4, "maxItems": 4},
    },
}


@dataclass(frozen=True)
class CorpusConfig:
    categories: int = 4
    train_per_category: int = 200
    val_per_category: int = 40
    test_per_category: int = 40
    image_size: int = 64

    def __post_init__(self):
        get_categories(self.categories)
        for name in ("train_per_category", "val_per_category", "test_per_category"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")

    def per_split(self, split: str) -> int:
        return getattr(self, f"{split}_per_category")


def _sample_plan(config: CorpusConfig):
    index = 0
    for split in SPLITS:
        for cat in range(config.categories):
            for _ in range(config.per_split(split)):
                yield index, split, cat
                index += 1


def generate_sample(config: CorpusConfig, seed: int, index: int, category: int):
    audio_seq, image_seq = np.random.SeedSequence([seed, index]).spawn(2)
    audio = synth_audio(category, np.random.default_rng(audio_seq))
    image, bbox = render_image(category, np.random.default_rng(image_seq), config.image_size)
    return audio, image, bbox


def make_corpus(config: CorpusConfig, seed: int, out_dir, overwrite: bool = False) -> "Corpus":
    """Write WAV/PNG files plus ``manifest.jsonl`` and ``corpus.json``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} exists and is not empty; pass overwrite to replace it")
        shutil.rmtree(out)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)

    cats = get_categories(config.categories)
    rows = []
    for index, split, cat in _sample_plan(config):
        sid = f"{split}-{index:05d}"
        audio, image, bbox = generate_sample(config, seed, index, cat)
        write_wav(out / "audio" / f"{sid}.wav", audio)
        Image.fromarray(np.round(image.transpose(1, 2, 0) * 255).astype(np.uint8)).save(
            out / "images" / f"{sid}.png")
        rows.append({"id": sid, "split": split, "category": cat,
                     "category_name": cats[cat].name, "audio": f"audio/{sid}.wav",
                     "image": f"images/{sid}.png", "bbox": list(bbox)})

    with open(out / "manifest.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    meta = {"schema_version": ARTIFACT_SCHEMA_VERSION, "seed": seed, "config": asdict(config),
            "categories": [c.name for c in cats]}
    (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return Corpus(out)


def read_image(path) -> np.ndarray:
    """PNG as float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Corpus:
    """Read access to a corpus directory written by :func:`make_corpus`."""

    root: Path
    rows: list = field(init=False)
    meta: dict = field(init=False)

    def __post_init__(self):
        import jsonschema

        self.root = Path(self.root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.is_file():
            raise DataError(f"no manifest at {manifest}")
        try:
            self.meta = json.loads((self.root / "corpus.json").read_text())
            self.rows = [json.loads(line) for line in manifest.read_text().splitlines() if line]
            for row in self.rows:
                jsonschema.validate(row, MANIFEST_SCHEMA)
        except (OSError, ValueError, jsonschema.ValidationError) as exc:
            raise DataError(f"corrupt corpus at {self.root}: {exc}") from exc
        ids = [r["id"] for r in self.rows]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")

    @property
    def n_categories(self) -> int:
        return int(self.meta["config"]["categories"])

    def split_rows(self, split: str) -> list[dict]:
        return [r for r in self.rows if r["split"] == split]

    def load(self, row: dict) -> AvSample:
        try:
            audio = read_wav(self.root / row["audio"])
            image = read_image(self.root / row["image"])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load sample {row['id']}: {exc}") from exc
        return AvSample(row["id"], image, audio, int(row["category"]), tuple(row["bbox"]))

    def samples(self, split: str) -> list[AvSample]:
        return [self.load(r) for r in self.split_rows(split)]


def fixed_mixtures(samples: list[AvSample], seed: int) -> list[tuple[AvSample, AvSample]]:
    """Deterministic evaluation pairing of a split."""
    rng = np.random.default_rng([seed, 0x5EED])
    return [(samples[i], samples[j]) for i, j in pair_indices([s.category for s in samples], rng)]
