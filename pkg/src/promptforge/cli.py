"""Command-line surface: train, eval, corrupt, bench, visualize, embed-check.

Configuration is flat key=value text (comments start with #); flags override
file values, and the carried seed falls back to the PROMPTFORGE_SEED
environment variable.  Every run writes its artifacts into one timestamped
directory under --out, including a manifest that echoes the resolved
configuration and is itself reusable as a --config file.

Exit codes are a stable contract: 0 success, 1 check failure, 2 usage or
configuration problem (including missing input files), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from .augment import CORRUPTION_KINDS
from .color import AdditivePrompt, ColorPrompt, generate_mask
from .data import Dataset, ShiftConfig, SPLITS, gen_shapes, shift_domain, split
from .errors import (
    BadClassCount,
    BadMagic,
    CheckFailure,
    ConfigError,
    PromptForgeError,
    TensorFileError,
)
from .evalbench import (
    bench_timing,
    corruption_csv,
    corruption_eval,
    default_bench_params,
    eval_csv,
    evaluate,
    format_corruption,
    format_eval,
    format_timing,
    timing_csv,
)
from .model import (
    FrozenModel,
    PretrainConfig,
    load_model,
    pretrain_source,
    save_model,
)
from .pipeline import (
    DEFAULT_EVP_SCALE,
    VARIANTS,
    BaselineConfig,
    PromptParams,
    acavp_forward,
    baseline_forward,
    embed_autovp_as_acavp,
    embed_evp_as_acavp,
    init_params,
    load_baseline,
    load_params,
    scaling_matrix,
)
from .rng import RngStream
from .tensorfile import load_tensors
from .train import AUGMENT_MODES, TrainConfig, train_prompt
from .warp import AffineRanges, AffineRaw, build_matrix, constrain_affine, warp_bilinear

__all__ = ["main", "parse_config_file", "write_ppm", "load_any_prompt"]

_VIZ_POOL = 8  # visualize draws its sample from a fixed-size generated set

# the failing stage, named in runtime error messages
_stage = "startup"


def _set_stage(name: str) -> None:
    global _stage
    _stage = name


def _to_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _to_float(key: str, raw: str) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if not np.isfinite(v):
        raise ConfigError(f"{key}: value must be finite, got {raw!r}")
    return v


def _to_bool(key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}")


def _to_str(key: str, raw: str) -> str:
    return raw.strip()


def _to_choice(options):
    def cast(key: str, raw: str) -> str:
        v = raw.strip()
        if v not in options:
            raise ConfigError(f"{key}: expected one of {options}, got {raw!r}")
        return v

    return cast


def _to_pad(key: str, raw: str) -> int | None:
    if raw.strip().lower() == "none":
        return None
    return _to_int(key, raw)


def _to_opt_path(key: str, raw: str) -> str | None:
    v = raw.strip()
    return None if v.lower() == "none" or not v else v


def _to_kinds(key: str, raw: str) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in raw.split(",") if k.strip())
    for k in kinds:
        if k not in CORRUPTION_KINDS:
            raise ConfigError(f"{key}: unknown corruption kind {k!r}")
    return kinds


_DATA_KEYS = {
    "classes": (_to_int, 4),
    "hw": (_to_int, 64),
    "n_train": (_to_int, 2000),
    "n_val": (_to_int, 200),
    "n_test": (_to_int, 500),
    "shift_hue": (_to_float, 1.5),
    "shift_tx": (_to_int, 6),
    "shift_ty": (_to_int, 4),
    "shift_background": (_to_float, -0.25),
}

_COMMON_KEYS = {
    "seed": (_to_int, None),
    "out": (_to_str, "runs"),
}

SCHEMAS: dict[str, dict] = {
    "train": {
        **_COMMON_KEYS,
        **_DATA_KEYS,
        "variant": (_to_choice(VARIANTS), "acavp"),
        "lr0": (_to_float, 40.0),
        "epochs": (_to_int, 200),
        "momentum": (_to_float, 0.9),
        "batch_size": (_to_int, 64),
        "clip_value": (_to_float, 0.001),
        "grad_normalize": (_to_bool, True),
        "weight_decay": (_to_float, 0.0),
        "mse_reg_weight": (_to_float, 0.0),
        "augment": (_to_choice(AUGMENT_MODES), "none"),
        "mask_mode": (_to_choice(("geometric", "zero-test")), "geometric"),
        "pad": (_to_pad, 28),
        "scale": (_to_float, DEFAULT_EVP_SCALE),
        "model": (_to_opt_path, None),
        "workers": (_to_int, 1),
    },
    "eval": {
        **_COMMON_KEYS,
        **_DATA_KEYS,
        "model": (_to_opt_path, None),
        "prompt": (_to_opt_path, None),
        "split": (_to_choice(SPLITS), "test"),
        "mask_mode": (_to_choice(("geometric", "zero-test")), "geometric"),
    },
    "corrupt": {
        **_COMMON_KEYS,
        **_DATA_KEYS,
        "model": (_to_opt_path, None),
        "prompt": (_to_opt_path, None),
        "split": (_to_choice(SPLITS), "test"),
        "kinds": (_to_kinds, CORRUPTION_KINDS),
        "mask_mode": (_to_choice(("geometric", "zero-test")), "geometric"),
    },
    "bench": {
        **_COMMON_KEYS,
        "model": (_to_opt_path, None),
        "prompt": (_to_opt_path, None),
        "hw": (_to_int, 224),
        "batch": (_to_int, 1),
        "reps": (_to_int, 20),
    },
    "visualize": {
        **_COMMON_KEYS,
        "classes": (_to_int, 4),
        "hw": (_to_int, 64),
        "index": (_to_int, 0),
        "prompt": (_to_str, "init"),
        "mask_mode": (_to_choice(("geometric", "zero-test")), "geometric"),
    },
    "embed-check": {
        "seed": (_to_int, None),
        "n": (_to_int, 20),
        "configs": (_to_int, 5),
        "hw": (_to_int, 64),
        "tol": (_to_float, 1e-5),
        "perturb": (_to_float, 0.0),
    },
}


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {s!r}")
        key, _, value = s.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config-file values, then explicit flags."""
    schema = SCHEMAS[command]
    values = {k: default for k, (_, default) in schema.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            values[key] = schema[key][0](key, raw)
    for key, (cast, _) in schema.items():
        raw = getattr(args, key.replace("-", "_"), None)
        if raw is not None:
            values[key] = cast(key, raw)
    if values.get("seed") is None:
        env = os.environ.get("PROMPTFORGE_SEED")
        values["seed"] = _to_int("PROMPTFORGE_SEED", env) if env else 0
    return values


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


def _git_blob_sha1(path) -> str:
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode("ascii"))
    h.update(data)
    return h.hexdigest()


def _make_out_dir(values: dict, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(values["out"]) / f"{command}-seed{values['seed']}-{stamp}"
    path = base
    suffix = 1
    while path.exists():
        path = Path(f"{base}-{suffix}")
        suffix += 1
    path.mkdir(parents=True)
    return path


def _write_manifest(out_dir: Path, command: str, values: dict, inputs: dict) -> None:
    lines = [f"# {command} run manifest; pass back via --config to reproduce"]
    for name, p in inputs.items():
        lines.append(f"# input {name} {p} blob-sha1 {_git_blob_sha1(p)}")
    for key in sorted(values):
        lines.append(f"{key}={_fmt_value(values[key])}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, maxval 255; a 2D plane is replicated to gray RGB."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ConfigError(f"ppm needs a (3, H, W) image, got {img.shape}")
    h, w = img.shape[1:]
    q = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


def _require_file(key: str, value) -> str:
    if not value:
        raise ConfigError(f"{key} file is required")
    if not Path(value).is_file():
        raise ConfigError(f"{key} file not found: {value}")
    return value


def load_any_prompt(path) -> PromptParams | BaselineConfig:
    """A prompt file is either full acavp params or a tagged baseline."""
    if "meta.variant" in load_tensors(path):
        return load_baseline(path)
    return load_params(path)


def _variant_of(prompt) -> str:
    return "acavp" if isinstance(prompt, PromptParams) else prompt.variant


def _build_target(values: dict, root: RngStream) -> Dataset:
    _set_stage("data generation")
    n = values["n_train"] + values["n_val"] + values["n_test"]
    hw = values["hw"]
    d = gen_shapes(n, hw, hw, values["classes"], root.child("target-data"))
    shift = ShiftConfig(
        hue=values["shift_hue"],
        tx=values["shift_tx"],
        ty=values["shift_ty"],
        background=values["shift_background"],
    )
    d = shift_domain(d, shift)
    fractions = (values["n_train"] / n, values["n_val"] / n, values["n_test"] / n)
    return split(d, fractions, root.child("target-split"))


def _build_source(values: dict, root: RngStream) -> Dataset:
    _set_stage("data generation")
    n = values["n_train"] + values["n_val"] + values["n_test"]
    hw = values["hw"]
    d = gen_shapes(n, hw, hw, values["classes"], root.child("source-data"))
    fractions = (values["n_train"] / n, values["n_val"] / n, values["n_test"] / n)
    return split(d, fractions, root.child("source-split"))


def _get_model(values: dict, root: RngStream, out_dir: Path, inputs: dict) -> FrozenModel:
    if values["model"]:
        _set_stage("model loading")
        path = _require_file("model", values["model"])
        inputs["model"] = path
        return load_model(path)
    _set_stage("source pretraining")
    source = _build_source(values, root)
    _set_stage("source pretraining")
    result = pretrain_source(source, PretrainConfig(), root.child("pretrain"))
    save_model(out_dir / "model.bin", result.model)
    return result.model


def cmd_train(values: dict) -> int:
    root = RngStream(values["seed"])
    # validate and build the target before any pretraining, so config
    # problems surface without paying for a source run
    target = _build_target(values, root)
    out_dir = _make_out_dir(values, "train")
    inputs: dict = {}
    model = _get_model(values, root, out_dir, inputs)
    _set_stage("prompt training")
    cfg = TrainConfig(
        lr0=values["lr0"],
        epochs=values["epochs"],
        momentum=values["momentum"],
        batch_size=values["batch_size"],
        clip_value=values["clip_value"],
        grad_normalize=values["grad_normalize"],
        weight_decay=values["weight_decay"],
        mse_reg_weight=values["mse_reg_weight"],
        augment=values["augment"],
        seed=values["seed"],
    )
    result = train_prompt(
        cfg,
        model,
        target,
        values["variant"],
        workers=values["workers"],
        pad=values["pad"],
        scale=values["scale"],
        mask_mode=values["mask_mode"],
    )
    _set_stage("writing outputs")
    result.metrics.write(out_dir / "metrics.csv")
    result.write_params(out_dir / "prompt.bin")
    _write_manifest(out_dir, "train", values, inputs)
    print(f"run directory {out_dir}")
    print(f"epoch 0 val accuracy {result.epoch0_val_accuracy:.4f}")
    print(f"best epoch {result.best_epoch} val accuracy {result.best_val_accuracy:.4f}")
    if values["n_test"] > 0:
        _set_stage("test evaluation")
        rep = evaluate(
            model,
            values["variant"],
            result.params,
            target.subset("test"),
            mask_mode=values["mask_mode"],
        )
        print(f"test accuracy {rep.overall:.4f}")
    return 0


def cmd_eval(values: dict) -> int:
    root = RngStream(values["seed"])
    inputs: dict = {}
    _set_stage("model loading")
    model = load_model(_require_file("model", values["model"]))
    inputs["model"] = values["model"]
    prompt = None
    if values["prompt"]:
        _set_stage("prompt loading")
        prompt = load_any_prompt(_require_file("prompt", values["prompt"]))
        inputs["prompt"] = values["prompt"]
    target = _build_target(values, root)
    _set_stage("evaluation")
    report = evaluate(
        model,
        _variant_of(prompt) if prompt is not None else None,
        prompt,
        target.subset(values["split"]),
        mask_mode=values["mask_mode"],
    )
    _set_stage("writing outputs")
    out_dir = _make_out_dir(values, "eval")
    (out_dir / "eval.csv").write_text(eval_csv(report))
    _write_manifest(out_dir, "eval", values, inputs)
    print(f"run directory {out_dir}")
    print(format_eval(report))
    return 0


def cmd_corrupt(values: dict) -> int:
    root = RngStream(values["seed"])
    inputs: dict = {}
    _set_stage("model loading")
    model = load_model(_require_file("model", values["model"]))
    inputs["model"] = values["model"]
    prompt = None
    if values["prompt"]:
        _set_stage("prompt loading")
        prompt = load_any_prompt(_require_file("prompt", values["prompt"]))
        inputs["prompt"] = values["prompt"]
    target = _build_target(values, root)
    _set_stage("corruption sweep")
    x, y = target.subset(values["split"])
    report = corruption_eval(
        model,
        prompt,
        (x, y),
        values["kinds"],
        root.child("corrupt"),
        mask_mode=values["mask_mode"],
    )
    _set_stage("writing outputs")
    out_dir = _make_out_dir(values, "corrupt")
    (out_dir / "corrupt.csv").write_text(corruption_csv(report))
    _write_manifest(out_dir, "corrupt", values, inputs)
    print(f"run directory {out_dir}")
    print(format_corruption(report))
    return 0


def cmd_bench(values: dict) -> int:
    inputs: dict = {}
    _set_stage("model loading")
    model = load_model(_require_file("model", values["model"]))
    inputs["model"] = values["model"]
    hw = values["hw"]
    params = default_bench_params(hw, hw)
    if values["prompt"]:
        _set_stage("prompt loading")
        prompt = load_any_prompt(_require_file("prompt", values["prompt"]))
        inputs["prompt"] = values["prompt"]
        params[_variant_of(prompt)] = prompt
    _set_stage("timing")
    reports = bench_timing(
        params,
        model,
        hw,
        hw,
        batch=values["batch"],
        reps=values["reps"],
        seed=values["seed"],
    )
    _set_stage("writing outputs")
    out_dir = _make_out_dir(values, "bench")
    (out_dir / "bench.csv").write_text(timing_csv(reports))
    _write_manifest(out_dir, "bench", values, inputs)
    print(f"run directory {out_dir}")
    print(format_timing(reports))
    return 0


def _identity_prompt(hw: int) -> PromptParams:
    # scale is squashed into the open interval (0, 1); saturated raws land
    # one float64 ulp short of an exact pass-through
    return PromptParams(
        affine=AffineRaw(sx=1e6, sy=1e6),
        ranges=AffineRanges(),
        color=ColorPrompt.identity(hw, hw),
        additive=AdditivePrompt.zeros(hw, hw),
    )


def cmd_visualize(values: dict) -> int:
    hw = values["hw"]
    if not 0 <= values["index"] < _VIZ_POOL:
        raise ConfigError(f"index must lie in [0, {_VIZ_POOL}), got {values['index']}")
    inputs: dict = {}
    spec = values["prompt"]
    if spec == "init":
        prompt: PromptParams | BaselineConfig = init_params(hw, hw)
    elif spec == "identity":
        prompt = _identity_prompt(hw)
    else:
        _set_stage("prompt loading")
        prompt = load_any_prompt(_require_file("prompt", spec))
        inputs["prompt"] = spec
    root = RngStream(values["seed"])
    _set_stage("data generation")
    pool = gen_shapes(_VIZ_POOL, hw, hw, values["classes"], root.child("viz"))
    x = pool.images[values["index"]]
    _set_stage("rendering")
    if isinstance(prompt, PromptParams):
        constrained = constrain_affine(prompt.affine, prompt.ranges)
        warped, wtape = warp_bilinear(x, build_matrix(constrained))
        mask = generate_mask(warped, wtape, values["mask_mode"])
        final = acavp_forward(x, prompt, values["mask_mode"])[0]
    else:
        final, tape = baseline_forward(x, prompt)
        mask = tape.mask
        if prompt.variant == "vp":
            warped = x
        else:
            warped = warp_bilinear(x, scaling_matrix(tape.scale_hat))[0]
    _set_stage("writing outputs")
    out_dir = _make_out_dir(values, "visualize")
    write_ppm(out_dir / "original.ppm", x)
    write_ppm(out_dir / "warped.ppm", warped)
    write_ppm(out_dir / "mask.ppm", mask)
    write_ppm(out_dir / "final.ppm", final)
    _write_manifest(out_dir, "visualize", values, inputs)
    print(f"run directory {out_dir}")
    print(f"mask fraction {float(np.asarray(mask).mean()):.4f}")
    for name in ("original.ppm", "warped.ppm", "mask.ppm", "final.ppm"):
        print(f"wrote {out_dir / name}")
    return 0


def cmd_embed_check(values: dict) -> int:
    if values["n"] <= 0:
        raise ConfigError(f"n must be positive, got {values['n']}")
    if values["configs"] <= 0:
        raise ConfigError(f"configs must be positive, got {values['configs']}")
    hw = values["hw"]
    root = RngStream(values["seed"]).child("embed")
    _set_stage("embedding check")
    worst = 0.0
    worst_image = 0
    for i in range(values["n"]):
        per_image = root.indexed(i)
        x = per_image.child("image").generator().random((3, hw, hw), dtype=np.float32)
        for j in range(values["configs"]):
            gen = per_image.child(f"cfg/{j}").generator()
            delta = gen.normal(0.0, 0.3, (3, hw, hw)).astype(np.float32)
            scale = float(gen.uniform(0.3, 0.95))
            raw = float(gen.normal(0.0, 1.5))
            evp = BaselineConfig("evp", delta, scale=scale)
            autovp = BaselineConfig("autovp", delta, scale_raw=raw)
            for cfg, embedded in (
                (evp, embed_evp_as_acavp(evp)),
                (autovp, embed_autovp_as_acavp(autovp)),
            ):
                base = baseline_forward(x, cfg)[0]
                emb = acavp_forward(x, embedded)[0] + values["perturb"]
                dev = float(np.abs(base - emb).max())
                if dev > worst:
                    worst, worst_image = dev, i
    print(
        f"max abs deviation {worst:.3e} over {values['n']} images x "
        f"{values['configs']} configs"
    )
    if worst > values["tol"]:
        print(f"deviation exceeds {values['tol']:g} at image seed {worst_image}")
        return 1
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "corrupt": cmd_corrupt,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
    "embed-check": cmd_embed_check,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptforge",
        description="Visual prompt training and evaluation for frozen classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key=value config file")
        for key in schema:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key.replace("-", "_"), default=None)
    return parser


def main(argv=None) -> int:
    _set_stage("startup")
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        values = resolve_config(args.command, args)
        return _COMMANDS[args.command](values)
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 1
    except (ConfigError, BadClassCount, BadMagic, TensorFileError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PromptForgeError as e:
        print(f"runtime error during {_stage}: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"runtime error during {_stage}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
