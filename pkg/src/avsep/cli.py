"""``avsep`` command line: gen-data, train, eval, separate, ablation."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import ARTIFACT_SCHEMA_VERSION, __version__
from .config import corpus_config, resolve, train_config
from .errors import AvsepError, ConfigError, ValidationError
from .separation import VARIANTS

log = logging.getLogger("avsep")

# plumbing keys left out of echoed configs so reruns into another directory compare equal
_NOT_ECHOED = ("out", "force", "resume")

ROW_FIELDS = ("id", "mixture", "source", "category", "sdr", "sir", "sar", "mix_sdr", "hit",
              "point_error", "p_pos", "p_neg")


def _echo(settings: dict) -> dict:
    return {k: v for k, v in sorted(settings.items()) if k not in _NOT_ECHOED}


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _require(settings: dict, *keys):
    missing = [k for k in keys if settings.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(f"--{k.replace('_', '-')}"
                                                                      for k in missing))


def _guard(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise FileExistsError(f"refusing to overwrite {', '.join(existing)}; pass --force")


def write_rows_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[f for f in ROW_FIELDS if any(f in r for r in rows)],
                                extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


# -- commands --------------------------------------------------------------------

def cmd_gen_data(s: dict) -> int:
    from .synthdata import make_corpus
    out = Path(s["out"] or "data")
    if out.exists() and any(out.iterdir()) and not s["force"]:
        raise FileExistsError(f"refusing to overwrite non-empty {out}; pass --force")
    corpus = make_corpus(corpus_config(s), s["seed"], out, overwrite=s["force"])
    print(f"wrote {len(corpus.rows)} samples to {out}")
    return 0


def cmd_train(s: dict) -> int:
    from .separation import train
    _require(s, "corpus")
    cfg = train_config(s)
    out = Path(s["out"] or f"runs/{cfg.variant}-seed{cfg.seed}")
    _guard([out / "checkpoint.ckpt", out / "train_log.jsonl"], s["force"])
    result = train(s["corpus"], cfg, out)
    _write_json(out / "run_config.json", {"schema_version": ARTIFACT_SCHEMA_VERSION,
                                         "command": "train", "config": _echo(s)})
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: val SDR {best['val_sdr']:.2f} dB; "
          f"checkpoint {result.checkpoint}")
    return 0


def _evaluate(s: dict, checkpoint, out: Path):
    from .metrics import evaluate
    from .plotting import save_sdr_histogram
    report = evaluate(checkpoint, s["corpus"], split=s["split"], oracle=s.get("oracle"),
                      seed=s["pairing_seed"], batch_size=s["batch_size"])
    report.config["run"] = _echo(s)
    report.save(out / "report.json")
    write_rows_csv(report.rows, out / "report.csv")
    save_sdr_histogram(report, out / "sdr_hist.png")
    return report


def cmd_eval(s: dict) -> int:
    _require(s, "corpus")
    if s["oracle"] is None:
        _require(s, "checkpoint")
        if not Path(s["checkpoint"]).is_file():
            raise FileNotFoundError(f"checkpoint not found: {s['checkpoint']}")
    out = Path(s["out"] or "eval")
    out.mkdir(parents=True, exist_ok=True)
    _guard([out / "report.json"], s["force"])
    report = _evaluate(s, s["checkpoint"], out)
    print(report.table())
    return 0


def cmd_separate(s: dict) -> int:
    from .dsp import read_wav, write_wav
    from .plotting import save_heatmap_overlay, save_mask
    from .separation import load_model, separate
    from .synthdata import read_image

    _require(s, "checkpoint", "mixture")
    if s["image"] is None and s["category"] is None:
        raise ConfigError("separate needs --image or --category")
    model = load_model(s["checkpoint"])
    if s["category"] is not None and model.variant != "catemb":
        raise ConfigError(f"--category needs a catemb checkpoint, this one is {model.variant}")
    out = Path(s["out"] or "separated")
    names = ["estimate.wav", "mask.png", "separate.json"]
    if model.variant != "catemb":
        names.append("heatmap.png")
    _guard([out / n for n in names], s["force"])
    out.mkdir(parents=True, exist_ok=True)
    mixture = read_wav(s["mixture"])
    image = None if s["image"] is None else read_image(s["image"])
    result = separate(model, mixture, image=None if model.variant == "catemb" else image,
                      category=s["category"])
    write_wav(out / "estimate.wav", result.estimate)
    save_mask(result.masks.binary.numpy(), out / "mask.png")
    outputs = ["estimate.wav", "mask.png"]
    if result.heatmap is not None:
        save_heatmap_overlay(image, result.heatmap, out / "heatmap.png")
        outputs.append("heatmap.png")
    _write_json(out / "separate.json", {"schema_version": ARTIFACT_SCHEMA_VERSION,
                                       "command": "separate", "config": _echo(s),
                                       "model": asdict(model.config), "outputs": outputs})
    print("wrote " + ", ".join(str(out / n) for n in outputs))
    return 0


def _cell_metrics(report) -> dict:
    cell = {"sdr": report.aggregate["sdr"]["mean"], "sir": report.aggregate["sir"]["mean"],
            "sar": report.aggregate["sar"]["mean"], "mix_sdr": report.aggregate["mix_sdr"]["mean"]}
    if report.localization:
        cell.update({k: report.localization[k]
                     for k in ("hit_rate", "positive_rate", "negative_rate")})
    return cell


def run_ablation(s: dict) -> tuple[dict, bool]:
    """Train and evaluate every (variant, seed) cell; returns (summary, all_ok).

    A failing cell is recorded with its error and does not stop the others.
    With ``resume`` a cell whose stored ``cell.json`` matches the requested
    model configuration is reused instead of retrained.
    """
    from .separation import train

    _require(s, "corpus")
    out = Path(s["out"] or "ablation")
    seeds = [int(v) for v in s["seeds"]]
    unknown = [v for v in s["variants"] if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; choose from {', '.join(VARIANTS)}")
    if (out / "ablation.json").exists() and not (s["force"] or s["resume"]):
        raise FileExistsError(f"{out} holds a finished ablation; pass --force or --resume")
    cells, all_ok = {}, True
    for variant in s["variants"]:
        cells[variant] = {}
        for seed in seeds:
            cell_dir = out / variant / f"seed-{seed}"
            cfg = train_config(s, variant=variant, seed=seed)
            cell_path = cell_dir / "cell.json"
            try:
                cell = None
                if s["resume"] and cell_path.exists():
                    stored = json.loads(cell_path.read_text())
                    if stored.get("model") == asdict(cfg.resolve(_n_categories(s))):
                        cell = stored["result"]
                        log.info("reusing %s", cell_dir)
                if cell is None:
                    log.info("training %s seed %d", variant, seed)
                    t0 = time.perf_counter()
                    result = train(s["corpus"], cfg, cell_dir)
                    t1 = time.perf_counter()
                    report = _evaluate({**s, "oracle": None}, result.checkpoint, cell_dir)
                    cell = {"status": "ok", **_cell_metrics(report), "train_seconds": t1 - t0,
                            "eval_seconds": time.perf_counter() - t1,
                            "best_epoch": result.best_epoch}
                    _write_json(cell_path, {"model": report.config["model"], "result": cell})
                cells[variant][seed] = cell
            except Exception as exc:  # fault isolation: record and continue
                all_ok = False
                log.error("cell %s seed %d failed: %s", variant, seed, exc)
                log.debug("%s", traceback.format_exc())
                cells[variant][seed] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    summary = {}
    for variant, per_seed in cells.items():
        ok = [c for c in per_seed.values() if c["status"] == "ok"]
        if len(ok) != len(per_seed):
            summary[variant] = {"status": "failed", "seeds": per_seed}
            continue
        summary[variant] = {"status": "ok", "seeds": per_seed,
                            **{k: float(np.median([c[k] for c in ok]))
                               for k in ("sdr", "sir", "sar", "mix_sdr")}}
    return {"schema_version": ARTIFACT_SCHEMA_VERSION, "config": _echo(s), "seeds": seeds,
            "variants": summary}, all_ok


def _n_categories(s: dict) -> int:
    from .synthdata import Corpus
    return Corpus(s["corpus"]).n_categories


def ablation_table(result: dict) -> str:
    lines = [f"seeds: {', '.join(map(str, result['seeds']))}",
             "variant     status   SDR      SIR      SAR      (median over seeds, dB)"]
    for variant, row in result["variants"].items():
        if row["status"] == "ok":
            lines.append(f"{variant:<11} ok      {row['sdr']:7.2f}  {row['sir']:7.2f}  "
                         f"{row['sar']:7.2f}")
        else:
            lines.append(f"{variant:<11} FAILED")
    return "\n".join(lines)


def cmd_ablation(s: dict) -> int:
    from .plotting import save_ablation_chart
    result, ok = run_ablation(s)
    out = Path(s["out"] or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", result)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "status", "sdr", "sir", "sar"])
        for variant, row in result["variants"].items():
            writer.writerow([variant, row["status"]] + [row.get(k, "") for k in ("sdr", "sir", "sar")])
    save_ablation_chart(result["variants"], out / "ablation.png")
    print(ablation_table(result))
    return 0 if ok else 1


# -- parser ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_const", const=True, help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--corpus", help="corpus directory from gen-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--sound-arch", choices=["unet-small", "mv2-small"])
    p.add_argument("--bce-weighting", choices=["none", "magnitude"])
    p.add_argument("--train-samples", type=int, help="subsample the training split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avsep", description="Appearance-conditioned "
                                     "audio-visual source separation on a synthetic corpus.")
    parser.add_argument("--version", action="version", version=f"avsep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _common(p)
    p.add_argument("--categories", type=int)
    p.add_argument("--train-per-category", type=int)
    p.add_argument("--val-per-category", type=int)
    p.add_argument("--test-per-category", type=int)
    p.add_argument("--image-size", type=int)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    _train_flags(p)
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the ideal-binary-mask oracle")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--oracle", choices=["ibm"])

    p = sub.add_parser("separate", help="separate one source from a mixture WAV")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mixture", help="mixture WAV (16-bit mono, 11025 Hz)")
    p.add_argument("--image", help="PNG of the source to extract")
    p.add_argument("--category", type=int, help="category id (catemb checkpoints only)")

    p = sub.add_parser("ablation", help="train and evaluate all variants over several seeds")
    _common(p)
    _train_flags(p)
    p.add_argument("--variants", type=lambda v: v.split(","), help="comma-separated subset")
    p.add_argument("--seeds", type=lambda v: v.split(","), help="comma-separated seeds")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--resume", action="store_const", const=True,
                   help="reuse finished cells with a matching configuration")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "separate": cmd_separate, "ablation": cmd_ablation}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        settings = resolve(args.command, args.config, flags)
        return COMMANDS[args.command](settings)
    except (ConfigError, ValidationError) as exc:
        print(f"avsep {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AvsepError, FileExistsError, FileNotFoundError, OSError) as exc:
        print(f"avsep {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
