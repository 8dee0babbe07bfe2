"""afenet command line: synth, train, infer, freqsep, eval, stats.

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import ast
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, metrics, network, plotting, spectral, training
from .network import CheckpointError, ModelConfig
from .tensor import Tensor
from .training import NumericalError, TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REF_PARAMS, REF_FLOPS = 20.23e6, 25.59e9

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def resolve_config(file_values: dict, overrides: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat key space into model and training configs; flags win over file."""
    vals = dict(file_values)
    vals.update({k: v for k, v in overrides.items() if v is not None})
    preset = vals.pop("preset", "desk")
    unknown = set(vals) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model_vals = {k: v for k, v in vals.items() if k in MODEL_KEYS}
    train_vals = {k: v for k, v in vals.items() if k in TRAIN_KEYS and k not in MODEL_KEYS}
    if "seed" in vals:
        train_vals["seed"] = vals["seed"]
    try:
        if preset == "full":
            mcfg = network.full_config(**model_vals)
        elif preset == "desk":
            mcfg = network.desk_config(**model_vals)
        else:
            raise UsageError(f"unknown preset {preset!r} (desk or full)")
        tcfg = TrainConfig.from_dict(train_vals)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return mcfg, tcfg


def print_config(cmd: str, **sections) -> None:
    for section, d in sections.items():
        for k in sorted(d):
            v = d[k]
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            print(f"config\t{cmd}.{section}.{k}\t{v}")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _load_dataset(root) -> list[data.Sample]:
    try:
        ds = data.read_dataset(root)
    except (OSError, data.ImageFormatError, ValueError) as exc:
        raise DataError(f"cannot read dataset {root}: {exc}") from exc
    return ds


def _load_model(path) -> tuple[network.AfeNet, network.Checkpoint]:
    try:
        ckpt = network.load_checkpoint(path)
        return network.model_from_checkpoint(ckpt), ckpt
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _load_image(path) -> np.ndarray:
    try:
        return data.load_image(path)
    except (OSError, data.ImageFormatError) as exc:
        raise DataError(str(exc)) from exc


def pad_to_multiple(images: np.ndarray, m: int = 32) -> tuple[np.ndarray, int, int]:
    h, w = images.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return images, h, w


def predict_any_size(model, images: np.ndarray, tta: bool, batch: int = 8) -> np.ndarray:
    padded, h, w = pad_to_multiple(images)
    out = [training.predict(model, padded[i:i + batch], tta=tta)
           for i in range(0, len(padded), batch)]
    return np.concatenate(out)[:, :h, :w]


def _mkdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc}") from exc
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(a) -> int:
    spec = data.SynthSpec(seed=a.seed, count=a.count, size=a.size, urban_fraction=a.urban_frac)
    print_config("synth", args=dict(out=a.out, count=a.count, size=a.size, seed=a.seed,
                                    urban_frac=a.urban_frac))
    _mkdir(a.out)
    try:
        data.write_dataset(a.out, data.synth_dataset(spec))
    except OSError as exc:
        raise DataError(f"cannot write dataset to {a.out}: {exc}") from exc
    print(f"wrote\t{a.count}\t{a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    file_vals = read_config_file(a.config) if a.config else {}
    flags = {"mask_mode": a.mask_mode, "width_multiplier": a.width_mult,
             "learning_rate": a.lr, "steps": a.steps, "seed": a.seed, "batch_size": a.batch_size}
    mcfg, tcfg = resolve_config(file_vals, flags)
    ds = _load_dataset(a.data)
    if not ds:
        raise DataError(f"dataset {a.data} is empty")
    out = Path(a.out)
    hist_path = out.with_suffix(out.suffix + ".history.csv")

    state, start = None, 0
    if a.resume:
        model, ckpt = _load_model(a.resume)
        if ckpt.config != mcfg:
            raise UsageError("resume checkpoint was written with a different model config")
        state = training.AdamState.from_table(ckpt.extra) if ckpt.extra else None
        start = ckpt.step
    else:
        model = network.build_model(mcfg)
    print_config("train", model=mcfg.__dict__, train=tcfg.to_dict())
    _mkdir(out.parent)
    history = training.train(model, ds, tcfg, state=state, start_step=start, checkpoint_path=out)
    training.write_history(hist_path, history, append=bool(a.resume))
    full = training.read_history(hist_path)
    if full:
        plotting.loss_curve(full, out.with_suffix(out.suffix + ".loss.png"))
    last = history[-1].loss_total if history else float("nan")
    print(f"trained\tsteps={tcfg.total_steps}\tfinal_loss={last:.6f}\tcheckpoint={out}")
    return EXIT_OK


def cmd_infer(a) -> int:
    model, ckpt = _load_model(a.ckpt)
    print_config("infer", model=ckpt.config.__dict__, args=dict(image=a.image, out=a.out, tta=a.tta))
    img = _load_image(a.image)
    if img.shape[0] != ckpt.config.in_channels:
        raise DataError(f"image has {img.shape[0]} channels, model expects {ckpt.config.in_channels}")
    pred = predict_any_size(model, img[None], a.tta)[0]
    data.save_label(a.out, pred)
    if a.color:
        data.save_image(a.color, data.colorize(pred))
    counts = np.bincount(pred.ravel(), minlength=ckpt.config.num_classes)
    print("class_pixels\t" + "\t".join(str(int(c)) for c in counts))
    return EXIT_OK


def freqsep_arrays(img: np.ndarray, ratios, mode: str, temperature: float = 1.0) -> dict:
    """Conv-free separation of a 3 x H x W image; float outputs before quantization."""
    x = Tensor(img[None].astype(np.float64))
    high, low, masks = spectral.separate_bands(x, tuple(float(r) for r in ratios), mode, temperature)
    spec = spectral.fft2d(Tensor(img.mean(axis=0)[None, None].astype(np.float64)))
    logm = spec.log_magnitude()[0, 0]
    rng = logm.max() - logm.min()
    return {"spectrum": (logm - logm.min()) / rng if rng > 0 else np.zeros_like(logm),
            "mask_low": np.asarray(masks.low.data), "mask_high": np.asarray(masks.high.data),
            "band_low": low.data[0], "band_high": high.data[0]}


def cmd_freqsep(a) -> int:
    manual = a.rh is not None or a.rw is not None
    if manual == (a.ckpt is not None):
        raise UsageError("give either --rh/--rw or --ckpt/--level, not both or neither")
    if manual and (a.rh is None or a.rw is None):
        raise UsageError("--rh and --rw must be given together")
    img = _load_image(a.image)
    mode = "soft" if a.soft is not None else "hard"
    tau = a.soft if a.soft is not None else 1.0
    if manual:
        if not (0 < a.rh < 1 and 0 < a.rw < 1):
            raise UsageError("--rh and --rw must lie strictly inside (0, 1)")
        ratios = (a.rh, a.rw)
    else:
        model, ckpt = _load_model(a.ckpt)
        if not 0 <= a.level < len(model.afeb) or not isinstance(model.afeb[a.level], network.Afeb):
            raise UsageError(f"level {a.level} has no adaptive window")
        if a.soft is None:
            mode = ckpt.config.infer_mask_mode
            tau = ckpt.config.temperature
        padded, _, _ = pad_to_multiple(img[None])
        training.infer(model, padded, mode)
        ratios = tuple(model.window_ratios()[a.level][0])
    print_config("freqsep", args=dict(image=a.image, out_dir=a.out_dir, mode=mode,
                                      temperature=tau, r_h=f"{ratios[0]:.6f}", r_w=f"{ratios[1]:.6f}"))
    out = _mkdir(a.out_dir)
    arrs = freqsep_arrays(img, ratios, mode, tau)
    data.save_image(out / "spectrum.ppm", plotting.plt.get_cmap("magma")(arrs["spectrum"])[..., :3])
    data.save_gray(out / "mask_low.pgm", arrs["mask_low"])
    data.save_gray(out / "mask_high.pgm", arrs["mask_high"])
    data.save_image(out / "band_low.ppm", arrs["band_low"])
    data.save_image(out / "band_high.ppm", np.abs(arrs["band_high"]))
    plotting.freqsep_panel(img, arrs["spectrum"], arrs["mask_low"], arrs["band_low"],
                           arrs["band_high"], out / "freqsep.png", ratios)
    area = float(np.mean(arrs["mask_low"]))
    print(f"freqsep\tr_h={ratios[0]:.6f}\tr_w={ratios[1]:.6f}\tlow_area={area:.6f}")
    return EXIT_OK


def cmd_eval(a) -> int:
    model, ckpt = _load_model(a.ckpt)
    print_config("eval", model=ckpt.config.__dict__,
                 args=dict(data=a.data, ignore_class=a.ignore_class, tta=a.tta))
    ds = _load_dataset(a.data)
    if not ds:
        raise DataError(f"evaluation set {a.data} is empty")
    k = ckpt.config.num_classes
    if a.ignore_class is not None and not 0 <= a.ignore_class < k:
        raise UsageError(f"--ignore-class must be in [0, {k})")
    cm = metrics.ConfusionMatrix(k)
    images = np.stack([s.image for s in ds])
    preds = predict_any_size(model, images, a.tta)
    try:
        for p, s in zip(preds, ds):
            cm.accumulate(p, s.label, a.ignore_class)
        names = data.CLASS_NAMES if k == len(data.CLASS_NAMES) else None
        rep = metrics.report(cm, names, exclude=a.ignore_class, macro_harmonic=a.macro_harmonic)
    except (ValueError, metrics.EmptyConfusionError) as exc:
        raise DataError(str(exc)) from exc
    sys.stdout.write(rep.to_text())
    if a.report:
        prefix = Path(a.report)
        _mkdir(prefix.parent)
        prefix.with_suffix(".txt").write_text(rep.to_text())
        prefix.with_suffix(".csv").write_text(rep.to_csv())
        plotting.class_scores(rep, prefix.with_suffix(".png"))
    return EXIT_OK


def cmd_stats(a) -> int:
    file_vals = read_config_file(a.config) if a.config else {}
    if a.preset:
        file_vals["preset"] = a.preset
    mcfg, _ = resolve_config(file_vals, {})
    print_config("stats", model=mcfg.__dict__, args=dict(input=f"1x{mcfg.in_channels}x{a.size}x{a.size}"))
    try:
        p = network.count_params(mcfg)
        f = network.count_flops(mcfg, (1, mcfg.in_channels, a.size, a.size))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print("metric\tvalue\treference\trelative_delta")
    print(f"params\t{p}\t{int(REF_PARAMS)}\t{(p - REF_PARAMS) / REF_PARAMS:+.4f}")
    print(f"flops\t{f}\t{int(REF_FLOPS)}\t{(f - REF_FLOPS) / REF_FLOPS:+.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="afenet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a procedural urban/rural corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--urban-frac", type=float, default=0.5)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--mask-mode", choices=["soft", "hard"])
    s.add_argument("--width-mult", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="predict a label map for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tta", action="store_true")
    s.add_argument("--color")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("freqsep", help="visualize the low/high frequency split of an image")
    s.add_argument("--image", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--rh", type=float)
    s.add_argument("--rw", type=float)
    s.add_argument("--ckpt")
    s.add_argument("--level", type=int, default=0)
    s.add_argument("--soft", type=float, metavar="TAU")
    s.set_defaults(fn=cmd_freqsep)

    s = sub.add_parser("eval", help="report F1/IoU/OA on a dataset directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ignore-class", type=int)
    s.add_argument("--tta", action="store_true")
    s.add_argument("--macro-harmonic", action="store_true")
    s.add_argument("--report", help="path prefix for .txt/.csv/.png outputs")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("stats", help="parameter and FLOP counts for a 512x512 input")
    s.add_argument("--config")
    s.add_argument("--preset", choices=["desk", "full"])
    s.add_argument("--size", type=int, default=512)
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, data.ImageFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
