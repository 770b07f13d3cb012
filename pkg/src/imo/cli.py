"""``imo`` command-line entry point.

Errors go to stderr as one line, ``error code=<n> kind=<type> msg=<text>``,
and set the exit code: 2 missing checkpoint, 3 malformed config, 4 bad IMOA
magic, 64 bad command-line usage, 1 anything else.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, _FIELDS, _format_value, _parse_value, apply_overrides, defaults_help, load_config
from .core.arrayio import atomic_write, load_array, save_array
from .errors import ConfigError, IMOError, MagicError, ValidationError

EXIT_MISSING_CKPT = 2
EXIT_CONFIG = 3
EXIT_MAGIC = 4
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    """Usage errors as one line with their own exit code (2 is taken)."""

    def error(self, message):
        print(_error_line(EXIT_USAGE, "UsageError", message), file=sys.stderr)
        sys.exit(EXIT_USAGE)

# keys persisted in checkpoints; everything needed to rebuild the network
MODEL_KEYS = ("image_size", "volume_size", "channels", "reduction", "fundus_widths", "oct_widths",
              "eps_width", "temb_dim", "T", "beta_start", "beta_end", "dtype",
              "no_oct", "no_grading", "no_segmentation", "no_cmfa", "no_ird")


class CLIError(Exception):
    def __init__(self, code, kind, msg):
        super().__init__(msg)
        self.code, self.kind = code, kind


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _config(args):
    overrides = {"seed": args.seed, "out": args.out, "ckpt": args.ckpt, "max_steps": args.steps,
                 "n": args.n, "data": args.data}
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        return apply_overrides(cfg, overrides)
    except FileNotFoundError:
        raise CLIError(EXIT_CONFIG, "ConfigError", f"config file not found: {args.config}") from None


def _require_ckpt(path):
    if not os.path.isfile(path):
        raise CLIError(EXIT_MISSING_CKPT, "MissingCheckpoint", f"checkpoint not found: {path}")


def _model_meta(cfg):
    return {k: _format_value(getattr(cfg, k)) for k in MODEL_KEYS}


def _load_model(cfg):
    from .model import IMOModel
    _require_ckpt(cfg.ckpt)
    state, meta = load_checkpoint(cfg.ckpt)
    if meta:
        cfg = apply_overrides(cfg, {k: _parse_value(k, v) for k, v in meta.items() if k in _FIELDS})
    model = IMOModel(cfg.model(), cfg.ablation(), dtype=cfg.np_dtype())
    model.params.load_state(state)
    return cfg, model


def _dataset(cfg, split):
    from .phantom import load_dataset, split_dataset
    if not os.path.isdir(cfg.data):
        raise ValidationError(f"data directory not found: {cfg.data} (run `imo gen-data` first)")
    samples = load_dataset(cfg.data)
    if not samples:
        raise ValidationError(f"no cases under {cfg.data}")
    if split == "all" or cfg.train_fraction >= 1:
        if split == "test" and cfg.train_fraction >= 1:
            raise ValidationError("train_fraction = 1 leaves no held-out cases")
        return samples
    train_idx, test_idx = split_dataset(len(samples), cfg.train_fraction, cfg.data_seed)
    idx = train_idx if split == "train" else test_idx
    if not idx:
        raise ValidationError(f"{split} split is empty")
    return [samples[i] for i in idx]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg, args):
    from .phantom import write_dataset
    out = args.out or cfg.data
    names = write_dataset(out, cfg.phantom(), cfg.n)
    print(f"wrote {len(names)} cases to {out}")


def cmd_train(cfg, args):
    from .train import init_state, train, write_history
    samples = _dataset(cfg, "train")
    state = init_state(cfg.model(), cfg.train(), cfg.ablation(), dtype=cfg.np_dtype())
    train(state, samples, log=_log)
    os.makedirs(cfg.out, exist_ok=True)
    ckpt_dir = os.path.dirname(os.path.abspath(cfg.ckpt))
    os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(state.model.params, cfg.ckpt, meta=_model_meta(cfg))
    write_history(os.path.join(cfg.out, "history.csv"), state.history)
    last = state.history[-1] if state.history else {"total": float("nan")}
    print(f"trained steps={state.step} final_loss={last['total']:.6f} ckpt={cfg.ckpt}")


def cmd_eval(cfg, args):
    from .train import evaluate
    cfg, model = _load_model(cfg)
    samples = _dataset(cfg, args.split)
    report = evaluate(model, samples, steps=cfg.sample_steps, seed=cfg.seed)
    text = report.to_text()
    os.makedirs(cfg.out, exist_ok=True)
    atomic_write(os.path.join(cfg.out, "metrics.txt"), text.encode())
    sys.stdout.write(text)


def cmd_segment(cfg, args):
    cfg, model = _load_model(cfg)
    case = args.input
    fundus = load_array(os.path.join(case, "fundus.imoa"))
    oct_vol = load_array(os.path.join(case, "oct.imoa"))
    labels, probs = model.predict(fundus[None], oct_vol[None], steps=cfg.sample_steps, seed=cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    if labels is not None:
        path = os.path.join(cfg.out, "mask.imoa")
        save_array(path, labels[0].astype(np.float32))
        counts = np.bincount(labels[0].reshape(-1), minlength=3)
        print(f"mask={path} unlabel={counts[0]} disc={counts[1]} cup={counts[2]}")
    if probs is not None:
        p = probs[0]
        print(f"grade={int(p.argmax())} " + " ".join(f"p{i}={v:.6f}" for i, v in enumerate(p)))


def cmd_ablate(cfg, args):
    from .train import run_ablation_grid
    train_s, eval_s = _dataset(cfg, "train"), _dataset(cfg, "test")
    _, _, text = run_ablation_grid(train_s, eval_s, cfg.model(), cfg.train(), eval_seed=cfg.seed,
                                   out_dir=cfg.out, log=_log)
    sys.stdout.write(text)


def cmd_gradcheck(cfg, args):
    from .gradsuite import DEFAULT_SEEDS, TOLERANCE, run_suite
    seeds = args.n if args.n is not None else DEFAULT_SEEDS
    bad = 0
    for name, worst, secs in run_suite(seeds=seeds):
        ok = worst < TOLERANCE
        bad += not ok
        print(f"block={name} worst_rel_err={worst:.3e} seeds={seeds} time={secs:.2f}s {'PASS' if ok else 'FAIL'}")
    if bad:
        raise CLIError(1, "GradcheckFailed", f"{bad} block(s) at or above {TOLERANCE:g}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a phantom dataset (n cases) to --out or the data path"),
    "train": (cmd_train, "train on the train split; writes the checkpoint and history.csv"),
    "eval": (cmd_eval, "evaluate a checkpoint and print a metrics report"),
    "segment": (cmd_segment, "segment one case directory given by --input"),
    "ablate": (cmd_ablate, "train and evaluate the six ablation arms"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every differentiable block"),
}


def build_parser():
    epilog = defaults_help() + "\nenvironment: IMO_THREADS caps kernel threads; IMO_KERNELS=numba|numpy\n"
    p = _Parser(prog="imo", description="Joint optic disc/cup segmentation and glaucoma grading.",
                                epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        s.add_argument("--config", help="key = value config file (see keys below)")
        s.add_argument("--seed", type=int, help="training / sampling seed (gen-data: the data seed)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--ckpt", help="checkpoint path")
        s.add_argument("--steps", type=int, help="training steps (max_steps)")
        s.add_argument("--n", type=int, help="number of cases (gen-data) or gradcheck seeds")
        s.add_argument("--data", help="dataset directory")
        if name == "segment":
            s.add_argument("--input", required=True, help="case directory with fundus.imoa and oct.imoa")
        if name == "eval":
            s.add_argument("--split", choices=("train", "test", "all"), default="all",
                           help="which cases to score (default: all)")
    return p


def _error_line(code, kind, msg):
    msg = " ".join(str(msg).split())
    return f"error code={code} kind={kind} msg={msg}"


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data" and args.seed is not None:
            # --seed names the phantom stream here
            args.seed, seed = None, args.seed
            cfg = apply_overrides(_config(args), {"data_seed": seed})
        else:
            cfg = _config(args)
        COMMANDS[args.command][0](cfg, args)
    except CLIError as e:
        print(_error_line(e.code, e.kind, e), file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(_error_line(EXIT_CONFIG, "ConfigError", e), file=sys.stderr)
        return EXIT_CONFIG
    except MagicError as e:
        print(_error_line(EXIT_MAGIC, "MagicError", e), file=sys.stderr)
        return EXIT_MAGIC
    except FileNotFoundError as e:
        print(_error_line(1, "FileNotFound", f"{e.filename}: {e.strerror}"), file=sys.stderr)
        return 1
    except IMOError as e:
        print(_error_line(1, type(e).__name__, e), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
