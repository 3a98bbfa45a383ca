"""Mask fusion, appearance attention, the joint objective, training and inference.

A conditioning embedding ``e`` (K-vector) weights the K sound feature maps;
the sigmoid of the weighted sum is the soft separation mask and its 0.5
threshold the binary mask. The same embedding scored against appearance
feature maps gives a location mask, supervised by whether embedding and
maps come from the same category.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ARTIFACT_SCHEMA_VERSION
from .dsp import (AudioClip, apply_mask_and_reconstruct, build_freq_map, compress, stft,
                  to_log_spec)
from .errors import ConfigError, DataError, TrainingDivergedError, ValidationError
from .metrics import bss_eval
from .nets import (SOUND_ARCHS, AppearanceNet, Checkpoint, Classifier, build_sound_net,
                   check_logspec_input, load_numpy_state, state_to_numpy)
from .synthdata import AvSample, Corpus, fixed_mixtures, make_mixture, pair_indices

log = logging.getLogger(__name__)

VARIANTS = ("plain", "attention", "classifier", "catemb")
PROVENANCE = {"plain": "learned", "attention": "attention", "classifier": "classifier",
              "catemb": "catemb"}
BCE_EPS = 1e-7


@dataclass
class AppearanceEmbedding:
    e: torch.Tensor
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCE.values():
            raise ValidationError(f"unknown provenance {self.provenance!r}")


@dataclass
class MaskPair:
    soft: torch.Tensor
    binary: torch.Tensor


@dataclass
class LocationMask:
    p_hat: torch.Tensor
    polarity: str


@dataclass
class LossBreakdown:
    sep_bce: torch.Tensor
    att_bce: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("sep_bce", "att_bce", "total")}


def _vec(e) -> torch.Tensor:
    return e.e if isinstance(e, AppearanceEmbedding) else torch.as_tensor(e)


def _maps(s) -> torch.Tensor:
    return getattr(s, "maps", s)


def weighted_sum(e: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """``sum_k e[..., k] * maps[..., k, :, :]`` with the shapes checked."""
    if e.shape[-1] != maps.shape[-3]:
        raise ValidationError(f"embedding length {e.shape[-1]} != channel count {maps.shape[-3]}")
    return (e[..., :, None, None] * maps).sum(dim=-3)


def fuse(e, s) -> MaskPair:
    """Separation mask from an embedding and sound feature maps."""
    soft = torch.sigmoid(weighted_sum(_vec(e), _maps(s)))
    return MaskPair(soft, (soft >= 0.5).to(soft.dtype))


def attend(e, feats, same_category: bool = True) -> LocationMask:
    """Location mask ``sigmoid(sum_k e_k * feats_k)`` for one pairing."""
    p = torch.sigmoid(weighted_sum(_vec(e), _maps(feats)))
    return LocationMask(p, "positive" if same_category else "negative")


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def _check_binary(t: torch.Tensor, what: str):
    if not torch.all((t == 0) | (t == 1)):
        raise ValidationError(f"{what} must be binary")


def joint_loss(soft, gt_mask, p_hats=()) -> LossBreakdown:
    """Separation BCE plus the attention BCE on globally max-pooled location masks.

    ``p_hats`` is a sequence of ``(LocationMask or tensor, label)`` pairs.
    """
    soft = getattr(soft, "soft", soft)
    gt = torch.as_tensor(gt_mask, dtype=soft.dtype)
    if soft.shape != gt.shape:
        raise ValidationError(f"mask shape {tuple(soft.shape)} != target {tuple(gt.shape)}")
    _check_binary(gt, "ground-truth mask")
    sep = bce(soft, gt)
    if len(p_hats):
        pooled = torch.stack([getattr(p, "p_hat", p).amax(dim=(-2, -1)) for p, _ in p_hats])
        labels = torch.as_tensor([lab for _, lab in p_hats], dtype=pooled.dtype)
        _check_binary(labels, "pair labels")
        att = bce(pooled, labels.view(-1, *([1] * (pooled.dim() - 1))).expand_as(pooled))
    else:
        att = torch.zeros((), dtype=soft.dtype)
    return LossBreakdown(sep, att, sep + att)


def make_catemb(category: int, k: int) -> AppearanceEmbedding:
    if not 0 <= int(category) < k:
        raise ValidationError(f"category {category} out of range for K={k}")
    e = torch.zeros(k)
    e[int(category)] = 1.0
    return AppearanceEmbedding(e, "catemb")


# -- model -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    variant: str = "catemb"
    k: int | None = None
    sound_arch: str = "unet-small"
    appearance: str = "small"
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 12
    seed: int = 0
    sep_weight: float = 1.0
    att_weight: float = 1.0
    classifier_epochs: int = 4
    val_mixtures: int = 40
    train_samples: int | None = None
    jitter: int = 8
    bce_weighting: str = "magnitude"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.sound_arch not in SOUND_ARCHS:
            raise ConfigError(f"unknown sound_arch {self.sound_arch!r}; choose from {SOUND_ARCHS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.bce_weighting not in ("none", "magnitude"):
            raise ConfigError("bce_weighting must be 'none' or 'magnitude'")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")

    def resolve(self, n_categories: int) -> "TrainConfig":
        """Fill in K: the category count for catemb/classifier, 16 otherwise."""
        if self.variant in ("catemb", "classifier"):
            if self.k not in (None, n_categories):
                raise ConfigError(f"variant {self.variant} requires K = C = {n_categories}, got {self.k}")
            return replace(self, k=n_categories)
        return replace(self, k=16 if self.k is None else self.k)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


class AvSepModel(nn.Module):
    """Sound network plus whichever conditioning branch the variant uses."""

    def __init__(self, config: TrainConfig, n_categories: int):
        super().__init__()
        if config.k is None:
            config = config.resolve(n_categories)
        self.config = config
        self.n_categories = n_categories
        self.sound = build_sound_net(config.sound_arch, config.k)
        self.appearance = None
        self.classifier = None
        if config.variant in ("plain", "attention"):
            self.appearance = AppearanceNet(config.k, config.appearance)
        elif config.variant == "classifier":
            self.classifier = Classifier(n_categories, config.appearance)
            self.classifier.requires_grad_(False)

    @property
    def variant(self) -> str:
        return self.config.variant

    def sound_features(self, x: torch.Tensor) -> torch.Tensor:
        check_logspec_input(x)
        return self.sound(x)

    def condition(self, images=None, categories=None):
        """Embeddings ``e`` (..., K) and appearance maps (or ``None``)."""
        if self.variant == "catemb":
            if categories is None:
                raise ValidationError("catemb model needs category ids")
            cats = torch.as_tensor(categories, dtype=torch.long)
            if cats.min() < 0 or cats.max() >= self.n_categories:
                raise ValidationError("category id out of range")
            return F.one_hot(cats, self.config.k).float(), None
        if images is None:
            raise ValidationError(f"{self.variant} model needs an image")
        images = torch.as_tensor(images, dtype=torch.float32)
        lead = images.shape[:-3]
        flat = images.reshape(-1, *images.shape[-3:])
        if self.variant == "classifier":
            with torch.no_grad():
                maps, logits = self.classifier.logits(flat)
                e = torch.softmax(logits, dim=-1)
        else:
            maps, e = self.appearance(flat)
        return e.reshape(*lead, -1), maps.reshape(*lead, *maps.shape[1:])

    def to_checkpoint(self, epoch: int = 0, rng_state=None, extra=None) -> Checkpoint:
        cfg = {"train": asdict(self.config), "n_categories": self.n_categories}
        return Checkpoint(cfg, state_to_numpy(self), epoch, rng_state, extra)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AvSepModel":
        model = cls(TrainConfig.from_dict(ckpt.config["train"]), ckpt.config["n_categories"])
        load_numpy_state(model, ckpt.tensors)
        model.eval()
        return model


def load_model(path) -> AvSepModel:
    return AvSepModel.from_checkpoint(Checkpoint.load(path))


# -- batching ------------------------------------------------------------------

def _jitter(image: np.ndarray, rng: np.random.Generator, amount: int) -> np.ndarray:
    if amount <= 0:
        return image
    dy, dx = rng.integers(-amount, amount + 1, size=2)
    padded = np.pad(image, ((0, 0), (amount, amount), (amount, amount)), mode="edge")
    h, w = image.shape[1:]
    return padded[:, amount + dy:amount + dy + h, amount + dx:amount + dx + w]


def _batch(mixtures, rng=None, jitter=0):
    x = np.stack([compress(m.mix_logspec) for m in mixtures])[:, None]
    imgs = np.stack([[_jitter(s.image, rng, jitter) if rng is not None else s.image
                      for s in m.sources] for m in mixtures])
    cats = np.array([[s.category for s in m.sources] for m in mixtures])
    gt = np.stack([m.gt_masks for m in mixtures])
    labels = np.stack([m.pair_labels for m in mixtures])
    return (torch.from_numpy(x.astype(np.float32)), torch.from_numpy(imgs.astype(np.float32)),
            torch.from_numpy(cats), torch.from_numpy(gt.astype(np.float32)),
            torch.from_numpy(labels.astype(np.float32)))


def batch_logits(model: AvSepModel, x, imgs, cats):
    """Fused mask logits (B, N, H, W), embeddings (B, N, K) and maps."""
    s = model.sound_features(x)
    e, maps = model.condition(imgs, cats)
    logits = torch.einsum("bnk,bkhw->bnhw", e, s)
    return logits, e, maps


def attention_logits(e: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """All pairings: out[b, n, m] = sum_k e[b, n, k] * maps[b, m, k] (spatial)."""
    return torch.einsum("bnk,bmkxy->bnmxy", e, maps)


def batch_loss(model, x, imgs, cats, gt, labels) -> LossBreakdown:
    """Training objective on logits; equals :func:`joint_loss` away from the clamp."""
    cfg = model.config
    logits, e, maps = batch_logits(model, x, imgs, cats)
    weight = None
    if cfg.bce_weighting == "magnitude":
        # normalized to mean 1 per example so the term stays on the plain-BCE scale
        w = x.clamp(1e-3, 10.0)
        weight = (w / w.mean(dim=(-2, -1), keepdim=True)).expand_as(gt)
    sep = F.binary_cross_entropy_with_logits(logits, gt, weight=weight)
    if cfg.variant == "attention":
        pooled = attention_logits(e, maps).amax(dim=(-2, -1))
        att = F.binary_cross_entropy_with_logits(pooled, labels)
    else:
        att = torch.zeros(())
    return LossBreakdown(sep, att, cfg.sep_weight * sep + cfg.att_weight * att)


# -- inference -----------------------------------------------------------------

@dataclass
class SeparationOutput:
    estimate: AudioClip
    masks: MaskPair
    heatmap: np.ndarray | None


@torch.no_grad()
def predict_masks(model: AvSepModel, logspec_inputs: np.ndarray, images=None, categories=None,
                  all_pairs: bool = False):
    """Soft masks for a batch of mixtures, one per conditioning source.

    The second return value holds the location masks of each source's own
    image, or of every (embedding, image) pairing when ``all_pairs`` is set.
    """
    model.eval()
    x = torch.from_numpy(np.asarray(logspec_inputs, dtype=np.float32))
    logits, e, maps = batch_logits(model, x, images, categories)
    soft = torch.sigmoid(logits)
    heat = None
    if maps is not None:
        if all_pairs:
            heat = torch.sigmoid(attention_logits(e, maps))
        else:
            heat = torch.sigmoid(torch.einsum("bnk,bnkxy->bnxy", e, maps))
    return soft, heat


def separate(model: AvSepModel, mixture: AudioClip, image=None, category=None) -> SeparationOutput:
    """Separate the source described by ``image`` (or ``category``) from ``mixture``."""
    from .dsp import SAMPLE_RATE
    if mixture.sample_rate != SAMPLE_RATE:
        raise ValidationError(f"mixture sample rate {mixture.sample_rate} != {SAMPLE_RATE}")
    if category is not None and model.variant != "catemb":
        raise ValidationError("a category id can only condition a catemb model")
    fmap = build_freq_map()
    spec = stft(mixture)
    x = compress(to_log_spec(spec, fmap))[None, None]
    imgs = None if image is None else np.asarray(image, dtype=np.float32)[None, None]
    cats = None if category is None else np.array([[int(category)]])
    soft, heat = predict_masks(model, x, imgs, cats)
    soft = soft[0, 0]
    binary = (soft >= 0.5).to(soft.dtype)
    est = apply_mask_and_reconstruct(spec, binary.numpy().astype(np.float64), fmap, len(mixture))
    return SeparationOutput(est, MaskPair(soft, binary),
                            None if heat is None else heat[0, 0].numpy().astype(np.float64))


def score_mixtures(model: AvSepModel, mixtures, batch_size: int = 8):
    """Per-source metric rows and own-image heatmaps for prepared mixtures.

    Rows carry SDR/SIR/SAR of the masked estimate, ``mix_sdr`` of the
    unprocessed mixture and, for models with appearance maps, the max-pooled
    location probability against the source's own image (``p_pos``) and the
    other image (``p_neg``).
    """
    fmap = build_freq_map()
    rows, heatmaps = [], []
    for start in range(0, len(mixtures), batch_size):
        chunk = mixtures[start:start + batch_size]
        x, imgs, cats, _, _ = _batch(chunk)
        use_imgs = None if model.variant == "catemb" else imgs
        soft, heat = predict_masks(model, x.numpy(), use_imgs, cats, all_pairs=True)
        binary = (soft >= 0.5).numpy().astype(np.float64)
        for b, m in enumerate(chunk):
            refs = [s.audio for s in m.sources]
            for n, src in enumerate(m.sources):
                est = apply_mask_and_reconstruct(m.mix_spec, binary[b, n], fmap, len(m.mix))
                sdr, sir, sar = bss_eval(est, refs, n)
                row = {"id": src.id, "mixture": f"{m.sources[0].id}+{m.sources[1].id}",
                       "source": n, "category": src.category,
                       "sdr": sdr, "sir": sir, "sar": sar,
                       "mix_sdr": bss_eval(m.mix, refs, n)[0]}
                if heat is None:
                    heatmaps.append(None)
                else:
                    pooled = heat[b, n].amax(dim=(-2, -1))
                    row["p_pos"] = float(pooled[n])
                    row["p_neg"] = float(pooled[1 - n])
                    heatmaps.append(heat[b, n, n].numpy().astype(np.float64))
                rows.append(row)
    return rows, heatmaps


# -- training ------------------------------------------------------------------

def _mean_metrics(rows):
    return {k: float(np.mean([r[k] for r in rows])) for k in ("sdr", "sir", "sar")}


def _source_mags(samples, fmap):
    return {s.id: to_log_spec(stft(s.audio), fmap).mag.astype(np.float32) for s in samples}


def _build_mixtures(pairs, mags, fmap, require_distinct=True):
    return [make_mixture(a, b, fmap, require_distinct, [mags[a.id], mags[b.id]]) for a, b in pairs]


def pretrain_classifier(classifier: Classifier, samples, config: TrainConfig, rng) -> float:
    """Cross-entropy training of the appearance classifier; returns final train accuracy."""
    opt = torch.optim.Adam(classifier.parameters(), lr=1e-3)
    images = np.stack([s.image for s in samples])
    labels = torch.tensor([s.category for s in samples])
    classifier.train()
    classifier.requires_grad_(True)
    acc = 0.0
    for _ in range(config.classifier_epochs):
        order = rng.permutation(len(samples))
        correct = 0
        for start in range(0, len(order), 32):
            idx = order[start:start + 32]
            x = torch.from_numpy(np.stack([_jitter(images[i], rng, config.jitter) for i in idx]))
            _, logits = classifier.logits(x)
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += int((logits.argmax(-1) == labels[idx]).sum())
        acc = correct / len(order)
    classifier.requires_grad_(False)
    classifier.eval()
    return acc


def classifier_accuracy(classifier: Classifier, samples) -> float:
    with torch.no_grad():
        x = torch.from_numpy(np.stack([s.image for s in samples]))
        pred = classifier(x).argmax(-1).numpy()
    return float(np.mean(pred == np.array([s.category for s in samples])))


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state().tolist()}


def _make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    return torch.optim.Adam(params, lr=config.lr)


def _dump_batch(out_dir: Path, epoch: int, step: int, tensors) -> Path:
    path = out_dir / f"diverged-epoch{epoch}-step{step}.npz"
    np.savez(path, **{k: v.detach().numpy() for k, v in tensors.items()})
    return path


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    history: list = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0


def validation_mixtures(corpus: Corpus, config: TrainConfig, split: str = "val"):
    samples = corpus.samples(split)
    pairs = fixed_mixtures(samples, config.seed)
    if config.val_mixtures and split == "val":
        pairs = pairs[:config.val_mixtures]
    fmap = build_freq_map()
    mags = _source_mags([s for p in pairs for s in p], fmap)
    return _build_mixtures(pairs, mags, fmap)


def train(corpus, config: TrainConfig, out_dir) -> TrainResult:
    """Train one variant and keep the checkpoint with the best validation SDR.

    Writes ``train_log.jsonl`` (a header record, then one record per epoch)
    and ``checkpoint.ckpt`` under ``out_dir``.
    """
    t0 = time.perf_counter()
    corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
    config = config.resolve(corpus.n_categories)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    fmap = build_freq_map()

    train_samples = corpus.samples("train")
    if config.train_samples:
        keep = np.sort(rng.permutation(len(train_samples))[:config.train_samples])
        train_samples = [train_samples[i] for i in keep]
    if len({s.category for s in train_samples}) < 2:
        raise DataError("training split needs at least two categories")
    mags = _source_mags(train_samples, fmap)
    val = validation_mixtures(corpus, config)

    model = AvSepModel(config, corpus.n_categories)
    header = {"type": "header", "schema_version": ARTIFACT_SCHEMA_VERSION,
              "config": asdict(config), "corpus_seed": corpus.meta.get("seed"),
              "n_train": len(train_samples), "n_val_mixtures": len(val)}
    if model.classifier is not None:
        header["classifier_train_acc"] = pretrain_classifier(model.classifier, train_samples,
                                                             config, rng)
        header["classifier_val_acc"] = classifier_accuracy(model.classifier, corpus.samples("val"))

    params = [p for p in model.parameters() if p.requires_grad]
    opt = _make_optimizer(params, config)
    steps_per_epoch = -(-(len(train_samples) // 2) // config.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.epochs * steps_per_epoch)
    log_path = out / "train_log.jsonl"
    ckpt_path = out / "checkpoint.ckpt"
    history, best, best_epoch = [], -np.inf, 0
    with open(log_path, "w") as logf:
        logf.write(json.dumps(header, sort_keys=True) + "\n")
        for epoch in range(1, config.epochs + 1):
            model.train()
            if model.classifier is not None:
                model.classifier.eval()
            ep_rng = np.random.default_rng([config.seed, epoch])
            pairs = pair_indices([s.category for s in train_samples], ep_rng)
            sums = {"sep_bce": 0.0, "att_bce": 0.0, "total": 0.0}
            n_batches = 0
            for step, start in enumerate(range(0, len(pairs), config.batch_size)):
                chunk = [(train_samples[i], train_samples[j])
                         for i, j in pairs[start:start + config.batch_size]]
                mixtures = _build_mixtures(chunk, mags, fmap)
                x, imgs, cats, gt, labels = _batch(mixtures, ep_rng, config.jitter)
                losses = batch_loss(model, x, imgs, cats, gt, labels)
                if not torch.isfinite(losses.total):
                    dump = _dump_batch(out, epoch, step, {"x": x, "images": imgs, "categories": cats,
                                                          "gt": gt, "labels": labels})
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step}: {losses.as_floats()}; "
                        f"batch dumped to {dump}")
                opt.zero_grad()
                losses.total.backward()
                opt.step()
                sched.step()
                for k, v in losses.as_floats().items():
                    sums[k] += v
                n_batches += 1
            rows, _ = score_mixtures(model, val)
            metrics = _mean_metrics(rows)
            record = {"type": "epoch", "epoch": epoch,
                      **{k: v / n_batches for k, v in sums.items()},
                      "val_sdr": metrics["sdr"], "val_sir": metrics["sir"], "val_sar": metrics["sar"]}
            history.append(record)
            logf.write(json.dumps(record, sort_keys=True) + "\n")
            logf.flush()
            log.info("epoch %d: loss %.4f val SDR %.2f dB", epoch, record["total"], metrics["sdr"])
            if metrics["sdr"] > best:
                best, best_epoch = metrics["sdr"], epoch
                model.to_checkpoint(epoch, _rng_state(rng),
                                    {"val": metrics, "corpus": str(corpus.root)}).save(ckpt_path)
    return TrainResult(ckpt_path, log_path, history, best_epoch, time.perf_counter() - t0)
