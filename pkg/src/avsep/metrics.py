"""bss_eval-style separation metrics, localization scoring and reports.

The decomposition is the time-invariant-gain variant: the estimate is
projected onto the target reference and onto the span of all references,
with no distortion filters.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ARTIFACT_SCHEMA_VERSION
from .errors import ConditioningError, DegenerateInputError, ValidationError

DB_CAP = 100.0
ENERGY_FLOOR = 1e-20
# smallest acceptable reciprocal condition number of the reference Gram matrix
_RCOND_MIN = 1e-10


@dataclass(frozen=True)
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def decompose(estimate, references, target: int = 0) -> Decomposition:
    """Split ``estimate`` into target, interference and artifact parts.

    ``references`` is a list of clean sources; ``target`` indexes the one the
    estimate is meant to recover.
    """
    est = _as_array(estimate)
    refs = np.stack([_as_array(r) for r in references])
    if refs.shape[1] != est.size:
        raise ValidationError(f"length mismatch: estimate {est.size}, references {refs.shape[1]}")
    energies = np.einsum("ij,ij->i", refs, refs)
    if energies[target] <= ENERGY_FLOOR:
        raise DegenerateInputError("target reference has zero energy")

    s = refs[target]
    s_target = (est @ s) / energies[target] * s

    gram = refs @ refs.T
    evals = np.linalg.eigvalsh(gram)
    if evals[0] <= _RCOND_MIN * evals[-1]:
        raise ConditioningError("reference signals are linearly dependent")
    coef = np.linalg.solve(gram, refs @ est)
    p_all = coef @ refs
    return Decomposition(s_target, p_all - s_target, est - p_all)


def _ratio_db(num: float, den: float) -> float:
    if num <= ENERGY_FLOOR and den <= ENERGY_FLOOR:
        return -DB_CAP
    val = 10.0 * math.log10(max(num, ENERGY_FLOOR) / max(den, ENERGY_FLOOR))
    return float(min(max(val, -DB_CAP), DB_CAP))


def sdr_sir_sar(d: Decomposition) -> tuple[float, float, float]:
    def energy(x):
        return float(x @ x)

    target = energy(d.s_target)
    sdr = _ratio_db(target, energy(d.e_interf + d.e_artif))
    sir = _ratio_db(target, energy(d.e_interf))
    sar = _ratio_db(energy(d.s_target + d.e_interf), energy(d.e_artif))
    return sdr, sir, sar


def bss_eval(estimate, references, target: int = 0) -> tuple[float, float, float]:
    return sdr_sir_sar(decompose(estimate, references, target))


def upsample_heatmap(heatmap: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling (half-pixel centers, edge clamped)."""
    h, w = heatmap.shape
    H, W = size
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = heatmap[y0][:, x0] * (1 - fx) + heatmap[y0][:, x1] * fx
    bot = heatmap[y1][:, x0] * (1 - fx) + heatmap[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def localization_score(heatmap: np.ndarray, bbox, image_size=None) -> tuple[bool, float]:
    """Pointing-game hit and distance (pixels) from the peak to the bbox center.

    The heatmap is bilinearly upsampled to ``image_size`` (H, W) first when it
    is smaller. Ties for the peak resolve to the first index in row-major
    order. ``bbox`` is ``(x0, y0, x1, y1)``, end-exclusive.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if image_size is not None and tuple(image_size) != hm.shape:
        hm = upsample_heatmap(hm, tuple(image_size))
    y, x = np.unravel_index(int(np.argmax(hm)), hm.shape)
    x0, y0, x1, y1 = bbox
    hit = bool(x0 <= x < x1 and y0 <= y < y1)
    cx, cy = (x0 + x1 - 1) / 2.0, (y0 + y1 - 1) / 2.0
    return hit, float(math.hypot(x - cx, y - cy))


@dataclass
class SeparationReport:
    rows: list[dict]
    config: dict
    localization: dict | None = None
    schema_version: int = ARTIFACT_SCHEMA_VERSION
    energy_floor: float = ENERGY_FLOOR
    db_cap: float = DB_CAP
    aggregate: dict = field(init=False)

    def __post_init__(self):
        self.aggregate = aggregate(self.rows)

    @property
    def mean_sdr(self) -> float:
        return self.aggregate["sdr"]["mean"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "SeparationReport":
        data = json.loads(Path(path).read_text())
        data.pop("aggregate", None)
        return cls(**data)

    def table(self) -> str:
        lines = ["metric  mean     median   n"]
        for key in ("sdr", "sir", "sar", "mix_sdr"):
            if key not in self.aggregate:
                continue
            a = self.aggregate[key]
            label = "SDRmix" if key == "mix_sdr" else key.upper()
            lines.append(f"{label:<6}  {a['mean']:7.3f}  {a['median']:7.3f}  {a['n']}")
        if self.localization:
            loc = self.localization
            lines.append(f"localization hit rate {loc['hit_rate']:.3f} over {loc['n']} images")
        return "\n".join(lines)


def aggregate(rows: list[dict]) -> dict:
    out = {}
    keys = ["sdr", "sir", "sar"]
    if rows and all("mix_sdr" in r for r in rows):
        keys.append("mix_sdr")
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[key] = {
            "mean": float(vals.mean()) if vals.size else float("nan"),
            "median": float(np.median(vals)) if vals.size else float("nan"),
            "n": int(vals.size),
        }
    return out


ORACLES = ("ibm",)


def _oracle_rows(mixtures) -> list[dict]:
    from .dsp import apply_mask_and_reconstruct, build_freq_map
    fmap = build_freq_map()
    rows = []
    for m in mixtures:
        refs = [s.audio for s in m.sources]
        for n, src in enumerate(m.sources):
            est = apply_mask_and_reconstruct(m.mix_spec, m.gt_masks[n].astype(np.float64), fmap,
                                             len(m.mix))
            sdr, sir, sar = bss_eval(est, refs, n)
            rows.append({"id": src.id, "mixture": f"{m.sources[0].id}+{m.sources[1].id}",
                         "source": n, "category": src.category, "sdr": sdr, "sir": sir,
                         "sar": sar, "mix_sdr": bss_eval(m.mix, refs, n)[0]})
    return rows


def evaluate(model, corpus, split: str = "test", oracle: str | None = None, seed: int = 0,
             batch_size: int = 8) -> SeparationReport:
    """Score every mixture of a split, both sources, and aggregate.

    ``model`` is an ``AvSepModel``, a checkpoint path, or ``None`` together
    with ``oracle="ibm"`` (ground-truth dominance masks in place of
    predictions). Mixtures are the deterministic ``fixed_mixtures`` pairing
    of the split under ``seed``; rows are sorted by (mixture, source).
    """
    from .separation import AvSepModel, load_model, score_mixtures, validation_mixtures, TrainConfig
    from .synthdata import Corpus

    corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
    if oracle is not None and oracle not in ORACLES:
        raise ValidationError(f"unknown oracle {oracle!r}; choose from {ORACLES}")
    if oracle is None and model is None:
        raise ValidationError("evaluate needs a model or an oracle")
    config = {"split": split, "pairing_seed": seed, "oracle": oracle,
              "corpus": corpus.meta.get("config"), "corpus_seed": corpus.meta.get("seed")}
    mixtures = validation_mixtures(corpus, TrainConfig(seed=seed, val_mixtures=0), split)
    localization = None
    if oracle == "ibm":
        rows = _oracle_rows(mixtures)
    else:
        if not isinstance(model, AvSepModel):
            model = load_model(model)
        if model.n_categories != corpus.n_categories:
            raise ValidationError(f"model trained on {model.n_categories} categories, "
                                  f"corpus has {corpus.n_categories}")
        config["model"] = asdict(model.config)
        rows, heatmaps = score_mixtures(model, mixtures, batch_size)
        samples = {s.id: s for m in mixtures for s in m.sources}
        if any(h is not None for h in heatmaps):
            for row, heat in zip(rows, heatmaps):
                sample = samples[row["id"]]
                hit, err = localization_score(heat, sample.bbox, sample.image.shape[1:])
                row["hit"], row["point_error"] = hit, err
            localization = {
                "hit_rate": float(np.mean([r["hit"] for r in rows])),
                "mean_point_error": float(np.mean([r["point_error"] for r in rows])),
                "positive_rate": float(np.mean([r["p_pos"] > 0.5 for r in rows])),
                "negative_rate": float(np.mean([r["p_neg"] < 0.5 for r in rows])),
                "n": len(rows),
            }
    rows.sort(key=lambda r: (r["mixture"], r["source"]))
    return SeparationReport(rows, config, localization)
