"""Command-line pipeline: preprocess, augment, train, evaluate, explain,
visualize-filters, synth.

Every command is deterministic given the resolved config and seed; outputs
land under the command's --out directory and inputs are never modified.
Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from specxplain import audio as audio_mod
from specxplain import xai as xai_mod
from specxplain.audio import (
    MelImage,
    load_wav,
    mel_spectrogram,
    pixels_to_input_array,
    resize_width,
    save_wav,
    to_mel_image,
)
from specxplain.config import RunConfig, load_config
from specxplain.data import (
    Manifest,
    SyntheticSpec,
    class_histogram,
    load_manifest,
    save_manifest,
    stratified_split,
    synth_generate,
    write_histogram_csv,
)
from specxplain.lime import cnn_predict_fn, lime_explain
from specxplain.model import (
    LABELS,
    TrainConfig,
    build_cnn,
    evaluate,
    fit,
    history_to_csv,
    load_checkpoint,
    save_checkpoint,
)
from specxplain.render import (
    load_png,
    plot_class_histogram,
    plot_history,
    render_saliency,
    write_png,
)
from specxplain.tensor import Rng


def _resolve_config(args) -> RunConfig:
    overrides = dict(getattr(args, "_overrides", {}) or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    return load_config(getattr(args, "config", None), overrides)


def _maybe_print_config(args, config: RunConfig) -> bool:
    if getattr(args, "print_config", False):
        print(config.to_json())
        return True
    return False


def _scan_wavs(audio_dir: Path) -> list[Path]:
    files = sorted(p for p in Path(audio_dir).rglob("*.wav") if p.is_file())
    if not files:
        raise FileNotFoundError(f"no .wav files under {audio_dir}")
    return files


def _label_for(path: Path, fallback: str) -> str:
    parent = path.parent.name
    return parent if parent in LABELS else fallback


def _augmentation_record(provenance: dict) -> dict:
    return {"stretch": provenance.get("stretch"),
            "noise_amp": provenance.get("noise_amp", 0.0),
            "shift": provenance.get("shift", 0)}


def load_image_dataset(manifest: Manifest, target_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale PNGs from a manifest into ((N,H,W,3), labels) arrays."""
    images = []
    labels = []
    for path, label in manifest.records:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("L"), dtype=np.uint8)
        mel = MelImage(pixels)
        if mel.width != target_width:
            mel = resize_width(mel, target_width)
        images.append(pixels_to_input_array(mel.pixels))
        labels.append(LABELS.index(label))
    return np.stack(images), np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    config = _resolve_config(args)
    if _maybe_print_config(args, config):
        return 0
    out_dir = Path(args.out)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    wavs = _scan_wavs(args.audio_dir)
    records: list[tuple[str, str]] = []
    widths: list[tuple[str, int]] = []
    failures = 0
    for path in wavs:
        try:
            clip = load_wav(path)
            if clip.sample_rate != config.audio.sample_rate:
                raise ValueError(f"sample rate {clip.sample_rate} != configured "
                                 f"{config.audio.sample_rate} (resampling is not performed)")
            spec = mel_spectrogram(clip, n_mels=config.audio.n_mels,
                                   n_fft=config.audio.n_fft, hop=config.audio.hop)
            img = to_mel_image(spec, provenance=clip.provenance)
        except Exception as exc:
            failures += 1
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            continue
        widths.append((str(path), img.width))
        resized = resize_width(img, config.audio.target_width)

        stem = path.stem if path.parent == Path(args.audio_dir) else f"{path.parent.name}__{path.stem}"
        png_path = image_dir / f"{stem}.png"
        write_png(resized.pixels, png_path)
        sidecar = {
            "source": str(path),
            "sample_rate": clip.sample_rate,
            "augmentation": _augmentation_record(clip.provenance),
            "label": _label_for(path, args.label),
        }
        with open(image_dir / f"{stem}.json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
        records.append((str(png_path), sidecar["label"]))

    if not records:
        print("error: every input failed to preprocess", file=sys.stderr)
        return 1
    save_manifest(Manifest(records), out_dir / "manifest.csv")
    with open(out_dir / "width_distribution.csv", "w") as fh:
        fh.write("path,width\n")
        fh.writelines(f"{p},{w}\n" for p, w in widths)
    print(f"preprocessed {len(records)} file(s), {failures} failure(s); "
          f"manifest at {out_dir / 'manifest.csv'}")
    return 0


def cmd_augment(args) -> int:
    config = _resolve_config(args)
    if _maybe_print_config(args, config):
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = config.augment.plan()
    rng = Rng(config.seed)

    wavs = _scan_wavs(args.audio_dir)
    written = 0
    for index, path in enumerate(wavs):
        clip = load_wav(path)
        save_wav(clip, out_dir / f"{path.stem}__orig.wav")
        written += 1
        for v, variant in enumerate(audio_mod.augment_clip(clip, plan, rng.derive(index))):
            name = f"{path.stem}__v{v:03d}.wav"
            save_wav(variant, out_dir / name)
            with open(out_dir / f"{path.stem}__v{v:03d}.json", "w") as fh:
                json.dump(_augmentation_record(variant.provenance) | {"source": str(path)},
                          fh, indent=2, sort_keys=True)
            written += 1
    print(f"wrote {written} wav file(s) to {out_dir}")
    return 0


def _train_config(config: RunConfig) -> TrainConfig:
    cfg = config.train
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate,
                       early_stop_patience=cfg.early_stop_patience,
                       dropout_rate=cfg.dropout_rate, seed=cfg.seed)


def cmd_train(args) -> int:
    config = _resolve_config(args)
    if _maybe_print_config(args, config):
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = load_manifest(args.manifest)
    train_split, test_split = stratified_split(manifest, config.test_fraction, config.seed)
    for name, split in (("train", train_split), ("test", test_split)):
        counts = class_histogram(split)
        write_histogram_csv(counts, out_dir / f"class_distribution_{name}.csv")
        plot_class_histogram(counts, out_dir / f"class_distribution_{name}.png",
                             title=f"classes in {name} set")

    width = config.audio.target_width
    train_set = load_image_dataset(train_split, width)
    test_set = load_image_dataset(test_split, width)

    model = build_cnn(_train_config(config), Rng(config.train.seed),
                      input_height=128, input_width=width)
    history = fit(model, train_set, test_set, _train_config(config),
                  jobs=config.jobs)
    final = evaluate(model, test_set)
    model.metadata.update({
        "history_epochs": len(history),
        "best_val_acc": max(r["val_acc"] for r in history),
        "final_test": {"loss": final["loss"], "accuracy": final["accuracy"]},
        "config": config.to_dict(),
    })

    save_checkpoint(model, out_dir / "model.cnnx")
    history_to_csv(history, out_dir / "history.csv")
    plot_history(history, out_dir / "loss.png", out_dir / "accuracy.png")
    print(f"trained {len(history)} epoch(s); best val acc "
          f"{max(r['val_acc'] for r in history):.4f}; "
          f"test acc {final['accuracy']:.4f}; artifacts in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    if _maybe_print_config(args, config):
        return 0
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    dataset = load_image_dataset(manifest, model.input_shape[1])
    result = evaluate(model, dataset)
    payload = {"loss": result["loss"], "accuracy": result["accuracy"],
               "confusion": result["confusion"].tolist(), "labels": list(LABELS)}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return 0


def _parse_classes(value: str) -> list[int]:
    if value == "both":
        return [0, 1]
    if value in LABELS:
        return [LABELS.index(value)]
    if value in ("0", "1"):
        return [int(value)]
    raise ValueError(f"class must be 0, 1, covid, non_covid or both, got {value!r}")


def _load_explain_image(path, model) -> MelImage:
    pixels = load_png(path)
    if pixels.ndim == 3:
        pixels = pixels.mean(axis=2).astype(np.uint8)
    img = MelImage(pixels)
    expected = model.input_shape
    if (img.pixels.shape[0], img.width) != expected:
        raise ValueError(
            f"architecture mismatch: image is {img.pixels.shape[0]}x{img.width} "
            f"but the checkpoint expects {expected[0]}x{expected[1]}")
    return img


def cmd_explain(args) -> int:
    config = _resolve_config(args)
    if _maybe_print_config(args, config):
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    img = _load_explain_image(args.image, model)
    stem = Path(args.image).stem
    xcfg = config.xai

    for class_idx in _parse_classes(args.class_):
        base = out_dir / f"{stem}_{args.method}_class{class_idx}"
        sidecar: dict = {"method": args.method, "class": class_idx,
                         "class_label": LABELS[class_idx]}
        if args.method == "smoothgrad":
            result = xai_mod.smoothgrad(
                model, pixels_to_input_array(img.pixels), class_idx,
                n=xcfg.smoothgrad_samples, noise_level=xcfg.smoothgrad_noise,
                rng=Rng(config.seed), score=xcfg.score)
            render_saliency(result, img, base.with_suffix(".png"))
            xai_mod.save_map(result.values, base.with_suffix(".f64"))
            sidecar["params"] = result.params
            sidecar["stats"] = {"abs_max": float(np.abs(result.values).max()),
                                "mean": float(result.values.mean())}
        elif args.method == "gradcam":
            result = xai_mod.gradcam(model, pixels_to_input_array(img.pixels),
                                     class_idx, tap=xcfg.gradcam_tap, score=xcfg.score)
            render_saliency(result, img, base.with_suffix(".png"))
            xai_mod.save_map(result.values, base.with_suffix(".f64"))
            sidecar["params"] = result.params
            sidecar["stats"] = {"max": float(result.values.max()),
                                "mean": float(result.values.mean())}
        else:  # lime
            explanation = lime_explain(
                cnn_predict_fn(model), img, class_idx,
                n_features=xcfg.lime_features, n_samples=xcfg.lime_samples,
                rng=Rng(config.seed), kernel_size=xcfg.quickshift_kernel_size,
                max_dist=xcfg.quickshift_max_dist, ratio=xcfg.quickshift_ratio)
            write_png(explanation.masked_pixels, base.with_suffix(".png"))
            coef_map = explanation.coefficients[explanation.segments.labels]
            xai_mod.save_map(coef_map, base.with_suffix(".f64"))
            sidecar["params"] = explanation.params
            sidecar["top_segments"] = explanation.selected
            sidecar["coefficients"] = explanation.coefficients.tolist()
            sidecar["r_squared"] = explanation.r_squared
            sidecar["n_segments"] = explanation.segments.n_segments
        with open(base.with_suffix(".json"), "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
        print(f"wrote {base.with_suffix('.png')}")
    return 0


def _parse_filters(value: str | None, n_filters: int) -> list[int]:
    if value is None:
        return list(range(max(0, n_filters - 5), n_filters))  # last five
    if ":" in value:
        lo, hi = value.split(":", 1)
        return list(range(int(lo), int(hi)))
    return [int(v) for v in value.split(",")]


def cmd_visualize_filters(args) -> int:
    config = _resolve_config(args)
    if _maybe_print_config(args, config):
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    xcfg = config.xai
    steps = args.steps if args.steps is not None else xcfg.am_steps

    if args.layer == "dense":
        classes = [0, 1] if args.class_ is None else _parse_classes(args.class_)
        for class_idx in classes:
            am = xai_mod.maximize_class(model, class_idx, steps=steps,
                                        step_size=xcfg.am_step_size, rng=Rng(config.seed))
            path = out_dir / f"class_{class_idx}_{LABELS[class_idx]}.png"
            write_png(np.rint(am.image * 255).astype(np.uint8), path)
            with open(path.with_suffix(".json"), "w") as fh:
                json.dump({"class": class_idx, "objective": am.objective,
                           "initial_objective": am.trajectory[0], "steps": am.steps},
                          fh, indent=2, sort_keys=True)
            print(f"wrote {path}")
        return 0

    layer = f"conv{args.layer}"
    n_filters = model.conv_params[int(args.layer) - 1][0].shape[0]
    for f in _parse_filters(args.filters, n_filters):
        am = xai_mod.maximize_filter(model, layer, f, steps=steps,
                                     step_size=xcfg.am_step_size, rng=Rng(config.seed + f))
        path = out_dir / f"{layer}_filter{f:03d}.png"
        write_png(np.rint(am.image * 255).astype(np.uint8), path)
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump({"layer": layer, "filter": f, "objective": am.objective,
                       "initial_objective": am.trajectory[0], "steps": am.steps},
                      fh, indent=2, sort_keys=True)
        print(f"wrote {path}")
    return 0


def cmd_synth(args) -> int:
    config = _resolve_config(args)
    if _maybe_print_config(args, config):
        return 0
    out_dir = Path(args.out)
    image_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSpec(width=args.width, samples_per_class=args.per_class,
                         noise_level=args.noise_level, contrast=args.contrast,
                         texture_seed=config.seed)
    dataset = synth_generate(spec, Rng(config.seed))

    records = []
    for i, (img, label, mask) in enumerate(zip(dataset.images, dataset.labels, dataset.masks)):
        name = f"synthetic_{i:04d}_{LABELS[label]}"
        write_png(img.pixels, image_dir / f"{name}.png")
        write_png(mask, mask_dir / f"{name}_mask.png")
        records.append((str(image_dir / f"{name}.png"), LABELS[label]))
    save_manifest(Manifest(records), out_dir / "manifest.csv")
    with open(out_dir / "synthetic_spec.json", "w") as fh:
        json.dump({"width": spec.width, "samples_per_class": spec.samples_per_class,
                   "noise_level": spec.noise_level, "contrast": spec.contrast,
                   "texture_seed": spec.texture_seed,
                   "patches": [vars(r) for r in spec.class_patches]},
                  fh, indent=2, sort_keys=True)
    print(f"wrote {len(records)} synthetic image(s) to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, help="master seed (SPECXPLAIN_SEED overrides)")
    sub.add_argument("--jobs", type=int, help="worker cap for parallel sections")
    sub.add_argument("--print-config", action="store_true",
                     help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specxplain",
        description="Cough spectrogram CNN with four explanation methods")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("preprocess", help="WAV files to spectrogram PNGs")
    p.add_argument("audio_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="non_covid", choices=LABELS,
                   help="label for files whose directory is not a label name")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = commands.add_parser("augment", help="expand a WAV set with the default plan")
    p.add_argument("audio_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--no-variants", dest="no_variants", action="store_true",
                   help="copy originals only")
    _add_common(p)
    p.set_defaults(func=cmd_augment)

    p = commands.add_parser("train", help="train the CNN from a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--width", type=int, help="input image width")
    p.add_argument("--test-fraction", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("explain", help="explain one prediction")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("method", choices=("smoothgrad", "gradcam", "lime"))
    p.add_argument("--class", dest="class_", default="both",
                   help="0, 1, covid, non_covid or both")
    p.add_argument("--out", required=True)
    p.add_argument("--smoothgrad-samples", type=int)
    p.add_argument("--noise-level", type=float)
    p.add_argument("--tap", choices=("post_pool", "pre_pool"))
    p.add_argument("--lime-features", type=int)
    p.add_argument("--lime-samples", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_explain)

    p = commands.add_parser("visualize-filters", help="activation maximization images")
    p.add_argument("checkpoint")
    p.add_argument("--layer", required=True, choices=("1", "2", "3", "dense"))
    p.add_argument("--filters", help="index list '0,3,5' or range '59:64'; "
                                     "default: the last five filters")
    p.add_argument("--class", dest="class_", help="class for --layer dense")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_visualize_filters)

    p = commands.add_parser("synth", help="generate the planted-feature dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--width", type=int, default=205)
    p.add_argument("--noise-level", type=float, default=8.0)
    p.add_argument("--contrast", type=float, default=80.0)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    return parser


_OVERRIDE_MAP = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "learning_rate": "train.learning_rate",
    "patience": "train.early_stop_patience",
    "dropout": "train.dropout_rate",
    "width": "audio.target_width",
    "test_fraction": "test_fraction",
    "smoothgrad_samples": "xai.smoothgrad_samples",
    "noise_level": "xai.smoothgrad_noise",
    "tap": "xai.gradcam_tap",
    "lime_features": "xai.lime_features",
    "lime_samples": "xai.lime_samples",
    "no_variants": "augment.enabled",
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    for attr, key in _OVERRIDE_MAP.items():
        if hasattr(args, attr) and getattr(args, attr) is not None:
            value = getattr(args, attr)
            if attr == "no_variants":
                if not value:
                    continue
                value = False
            overrides[key] = value
    args._overrides = overrides
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
