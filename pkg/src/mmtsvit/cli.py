"""Command-line entry point: dataset generation, training, evaluation,
and gradient verification.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .data import gen_synthetic_dataset, read_manifest
from .errors import ConfigError, MMTSViTError
from .fusion import MODES, init_mm_params, mm_forward
from .model import ModelConfig
from .tensor import Tensor
from .train import RunConfig, cross_entropy_loss, evaluate_params, load_split, train

# fixed tiny configuration used by grad-check
GRAD_CHECK_SHAPE = dict(t_len=4, size=4, channels=(2, 3), dates=(5, 15, 25, 35))
GRAD_CHECK_MODEL = dict(
    t=1, h=2, w=2, d=8, k=3, depth_temporal=2, depth_spatial=1, heads=2, max_spatial_tokens=16
)


def _fail_usage(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def cmd_gen_data(args) -> int:
    try:
        manifest = gen_synthetic_dataset(
            out_dir=args.out,
            seed=args.seed,
            n_samples=args.samples,
            m=args.modalities,
            k=args.classes,
            shapes=[(args.size, args.size)] * (args.modalities - 1) + [(3 * args.size, 3 * args.size)]
            if args.modalities > 1
            else [(args.size, args.size)],
            n_timesteps=args.timesteps,
            ambiguous=args.ambiguous,
        )
    except OSError as e:
        return _fail_usage(f"cannot write dataset: {e}")
    except MMTSViTError as e:
        return _fail_usage(str(e))
    print(manifest)
    return 0


_CONFIG_SCHEMA = {
    "seed": None,
    "fusion": {"mode"},
    "data": {"manifest", "out_dir", "modalities", "max_gap", "augment", "ignore_background"},
    "model": {
        "t", "h", "w", "d", "k", "depth_temporal", "depth_spatial",
        "heads", "mlp_ratio", "max_spatial_tokens",
    },
    "optim": {"lr", "beta1", "beta2", "eps", "epochs", "batch_size"},
}


def parse_run_config(payload: dict) -> tuple[RunConfig, str]:
    """Validate the nested JSON config; unknown keys are hard errors."""
    for key in payload:
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(_CONFIG_SCHEMA[key], set):
            for sub in payload[key]:
                if sub not in _CONFIG_SCHEMA[key]:
                    raise ConfigError(f"unknown config key {key}.{sub!r}")

    data = payload.get("data", {})
    if "manifest" not in data:
        raise ConfigError("config key data.manifest is required")
    model_kwargs = dict(payload.get("model", {}))
    optim = payload.get("optim", {})

    seed = payload.get("seed", 0)
    env_seed = os.environ.get("MMTSVIT_SEED")
    if env_seed is not None:
        seed = int(env_seed)

    run = RunConfig(
        mode=payload.get("fusion", {}).get("mode", "SM"),
        model=ModelConfig(**model_kwargs),
        modalities=data.get("modalities"),
        seed=seed,
        epochs=optim.get("epochs", 50),
        batch_size=optim.get("batch_size", 8),
        lr=optim.get("lr", 1e-4),
        beta1=optim.get("beta1", 0.9),
        beta2=optim.get("beta2", 0.999),
        eps=optim.get("eps", 1e-8),
        augment=data.get("augment", True),
        ignore_background=data.get("ignore_background", False),
        max_gap=data.get("max_gap", 5),
        out_dir=data.get("out_dir", "run"),
    )
    if run.mode not in MODES:
        raise ConfigError(f"unknown fusion mode {run.mode!r}, expected one of {MODES}")
    return run, data["manifest"]


def cmd_train(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as f:
            payload = json.load(f)
    except OSError as e:
        return _fail_usage(f"cannot read config: {e}")
    except json.JSONDecodeError as e:
        return _fail_usage(f"config is not valid JSON: {e}")
    try:
        run, manifest_path = parse_run_config(payload)
        manifest = read_manifest(manifest_path)
        n_modalities = len(run.modalities) if run.modalities is not None else None
        if n_modalities is None:
            first = manifest.paths()[0] if manifest.paths() else None
            if first is None:
                return _fail_usage("manifest lists no samples")
            from .data import read_container

            n_modalities = len(read_container(first).samples)
        if run.mode == "CAF" and n_modalities < 2:
            return _fail_usage("CAF requires >= 2 modalities")
        if run.mode == "SM" and n_modalities != 1:
            return _fail_usage("SM expects exactly one modality (use data.modalities)")
        result = train(manifest, run)
    except (MMTSViTError, TypeError) as e:
        return _fail_usage(str(e))
    print(json.dumps({"checkpoint": result["best"], "log": result["log"]}))
    return 0


def cmd_eval(args) -> int:
    try:
        params, cfg, meta = load_checkpoint(args.checkpoint)
        manifest = read_manifest(args.data)
        if manifest.k != cfg.k:
            return _fail_usage(
                f"checkpoint expects {cfg.k} classes but dataset has {manifest.k}"
            )
        run = RunConfig(
            mode=params.mode,
            model=cfg,
            modalities=meta.get("modalities"),
            ignore_background=bool(meta.get("ignore_background", False)),
        )
        sets = load_split(manifest, args.split, run)
        metrics = evaluate_params(params, cfg, sets, run.ignore)
    except FileNotFoundError as e:
        return _fail_usage(str(e))
    except MMTSViTError as e:
        return _fail_usage(str(e))
    print(json.dumps(metrics, sort_keys=True))
    return 0


def build_grad_check_problem(arch: str):
    """Fixed tiny seeded problem for one architecture: (loss fn, params dict)."""
    from .data import SITSSample

    shape = GRAD_CHECK_SHAPE
    cfg = ModelConfig(**GRAD_CHECK_MODEL)
    rng = np.random.default_rng(7)
    channels = [shape["channels"][0]] if arch == "SM" else list(shape["channels"])
    samples = [
        SITSSample(
            rng.normal(size=(shape["t_len"], shape["size"], shape["size"], c)).astype(np.float64),
            list(shape["dates"]),
            f"mod{j}",
        )
        for j, c in enumerate(channels)
    ]
    labels = rng.integers(0, cfg.k, size=(shape["size"], shape["size"]))
    mm = init_mm_params(arch, cfg, channels, seed=11)

    def loss_fn(_named):
        yhat = mm_forward(samples, mm, cfg)
        return cross_entropy_loss(yhat, labels)

    return loss_fn, mm.named()


def cmd_grad_check(args) -> int:
    archs = [args.arch] if args.arch else list(MODES)
    failed = False
    for arch in archs:
        loss_fn, named = build_grad_check_problem(arch)
        report = T.grad_check(
            loss_fn,
            named,
            step=1e-5,
            tol=args.tol,
            max_entries_per_tensor=args.max_entries,
            rng=np.random.default_rng(3),
            corrupt=args.corrupt,
        )
        status = "PASS" if report["passed"] else "FAIL"
        print(
            f"{arch}: {status} worst={report['worst']} "
            f"error={report['worst_error']:.3e} tol={report['tol']:.1e}"
        )
        failed = failed or not report["passed"]
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmtsvit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=16)
    g.add_argument("--modalities", type=int, default=2)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=8, help="coarse-modality grid size")
    g.add_argument("--timesteps", type=int, default=12)
    g.add_argument("--ambiguous", action="store_true",
                   help="split class signatures across modalities")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="manifest path")
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="verify gradients against finite differences")
    c.add_argument("--arch", choices=list(MODES))
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-entries", type=int, default=24,
                   help="entries probed per parameter tensor")
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
