"""Command-line surface: synth, train, eval, gradcheck, adapt.

One experiment per invocation. A JSON run config with groups "model",
"train", and "data" mirrors the dataclass fields; any flag overrides the
matching key, unknown keys are rejected, and the merged result is dumped
to effective_config.json in the output directory so a run is always
reproducible from its artifacts.

Exit codes: 0 success, 2 configuration or usage error, 3 IO error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import adaptation
from . import data as dpipe
from . import gradcheck as gc
from .errors import (ConfigError, DataError, DivergenceError,
                     FileFormatError, NumericError, StructureError)
from .model import (ModelParams, config_from_dict, config_to_dict,
                    desk_config, load_checkpoint)
from .rng import keyed
from .training import TrainConfig, evaluate, fit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

DATA_DEFAULTS = {
    "seed": 0,
    "speakers": 4,
    "classes": 10,
    "utts": 64,
    "feat_dim": 16,
    "t_min": 20,
    "t_max": 40,
    "separation": 4.0,
    "warp_strength": 0.1,
    "speaker_offset": 0,
    "utt_offset": 0,
    "dev_every": 4,  # every n-th utterance goes to the dev split
}


def _train_defaults() -> dict:
    return {f.name: getattr(TrainConfig(), f.name)
            for f in dataclasses.fields(TrainConfig)}


def default_run_config() -> dict:
    return {"model": config_to_dict(desk_config()),
            "train": _train_defaults(),
            "data": dict(DATA_DEFAULTS)}


def _overlay(base: dict, user: dict, what: str) -> dict:
    unknown = sorted(set(user) - set(base))
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    out = dict(base)
    for k, v in user.items():
        if isinstance(base[k], dict):
            out[k] = _overlay(base[k], dict(v), f"{what}.{k}")
        else:
            out[k] = v
    return out


def load_run_config(path, overrides: dict | None = None) -> dict:
    """Defaults, then the config file, then CLI flag overrides."""
    cfg = default_run_config()
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError("run config must be a JSON object")
        user = dict(user)
        # a plain model config keeps working if the frontend geometry is
        # left implicit
        model = dict(user.get("model", {}))
        if model and "wrcnn" not in model:
            w = dict(cfg["model"]["wrcnn"])
            w["in_freq"] = model.get("feat_dim", cfg["model"]["feat_dim"])
            w["out_dim"] = model.get("d_attn", cfg["model"]["d_attn"])
            cfg["model"]["wrcnn"] = w
        cfg = _overlay(cfg, user, "config")
    for dotted, value in (overrides or {}).items():
        group, key = dotted.split(".", 1)
        if value is not None:
            cfg[group][key] = value
    config_from_dict(cfg["model"])  # validate early
    return cfg


def _split_dev(corpus: dpipe.Corpus, dev_every: int):
    if dev_every < 2:
        raise ConfigError(f"dev_every must be >= 2, got {dev_every}")
    train = [u for i, u in enumerate(corpus.utts)
             if i % dev_every != dev_every - 1]
    dev = corpus.utts[dev_every - 1::dev_every]
    if not train or not dev:
        raise ConfigError(f"corpus of {len(corpus)} utterances cannot "
                          f"fill a train/dev split with dev_every="
                          f"{dev_every}")
    return train, dev


def _check_compat(cfg_model: dict, corpus: dpipe.Corpus) -> None:
    if corpus.feat_dim != cfg_model["feat_dim"]:
        raise ConfigError(f"data has feat_dim={corpus.feat_dim} but the "
                          f"model expects {cfg_model['feat_dim']}")
    if corpus.n_classes > cfg_model["n_senones"]:
        raise ConfigError(f"data has {corpus.n_classes} classes but the "
                          f"model only emits {cfg_model['n_senones']}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    d = dict(DATA_DEFAULTS)
    for key in ("seed", "speakers", "classes", "utts", "feat_dim",
                "t_min", "t_max", "warp_strength", "speaker_offset",
                "utt_offset"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    corpus = dpipe.synth_corpus(
        seed=d["seed"], n_speakers=d["speakers"], n_classes=d["classes"],
        n_utts=d["utts"], feat_dim=d["feat_dim"],
        t_range=(d["t_min"], d["t_max"]), separation=d["separation"],
        warp_strength=d["warp_strength"],
        speaker_offset=d["speaker_offset"], utt_offset=d["utt_offset"])
    dpipe.write_features(args.out, corpus)
    print(f"wrote {len(corpus)} utterances ({d['speakers']} speakers, "
          f"{d['classes']} classes, F={d['feat_dim']}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"train.seed": args.seed, "train.steps": args.steps,
                 "train.batch_size": args.batch_size,
                 "train.eval_every": args.eval_every,
                 "train.finetune_steps": args.finetune_steps,
                 "data.dev_every": args.dev_every}
    cfg = load_run_config(args.config, overrides)
    corpus = dpipe.read_features(args.data)
    _check_compat(cfg["model"], corpus)
    train_utts, dev_utts = _split_dev(corpus, cfg["data"]["dev_every"])

    model_cfg = config_from_dict(cfg["model"])
    tcfg = TrainConfig(**cfg["train"])
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "effective_config.json"),
              "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")

    params = ModelParams.create(model_cfg, rng=keyed(tcfg.seed, "init"))
    report = fit(params, train_utts, dev_utts, tcfg, args.out_dir,
                 resume_from=args.resume)
    print(f"trained {report['steps']} steps; "
          f"best dev loss {report['best_dev']:.6f}; "
          f"artifacts in {args.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    corpus = dpipe.read_features(args.data)
    _check_compat(config_to_dict(ck.params.cfg), corpus)
    utts = corpus.utts
    if args.speaker is not None:
        utts = corpus.for_speaker(args.speaker).utts
        if not utts:
            raise DataError(f"no utterances for speaker '{args.speaker}'")
    loss, acc = evaluate(ck.params, utts, batch_size=args.batch_size)
    print(f"checkpoint {args.ckpt} (step {ck.step}): "
          f"loss {loss:.6f}, frame_acc {acc:.4f}, "
          f"frame_err {1.0 - acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        load_run_config(args.config)  # validated, then unused: the checks
        # carry their own miniature configs
    results = gc.run_gradcheck(seed=args.seed, mutate=args.mutate)
    worst = 0.0
    for name, err in results.items():
        status = "PASS" if err < gc.THRESHOLD else "FAIL"
        print(f"{status} {name:<16} max_rel_err {err:.3e}")
        worst = max(worst, err)
    if worst >= gc.THRESHOLD:
        print(f"gradcheck FAILED: worst {worst:.3e} >= {gc.THRESHOLD:g}")
        return EXIT_NUMERIC
    print(f"gradcheck passed: worst {worst:.3e} < {gc.THRESHOLD:g}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    ck = load_checkpoint(args.ckpt)
    corpus = dpipe.read_features(args.data)
    _check_compat(config_to_dict(ck.params.cfg), corpus)
    utts = corpus.for_speaker(args.speaker).utts
    if not utts:
        raise DataError(f"no utterances for speaker '{args.speaker}'")
    lin, report = adaptation.adapt_speaker(
        ck.params, utts, iterations=args.iterations, epochs=args.epochs,
        lr=args.lr, seed=args.seed)
    print(f"speaker {args.speaker}: unadapted frame_err "
          f"{report['initial_error']:.4f}")
    for entry in report["iterations"]:
        print(f"iteration {entry['iteration']}: frame_err "
              f"{entry['error']:.4f}")
    out = args.out or f"lin_{args.speaker}.ucam"
    adaptation.save_lin(lin, out)
    print(f"wrote LIN to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ucam", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic feature file")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=None)
    s.add_argument("--classes", type=int, default=None)
    s.add_argument("--utts", type=int, default=None)
    s.add_argument("--feat-dim", dest="feat_dim", type=int, default=None)
    s.add_argument("--t-min", dest="t_min", type=int, default=None)
    s.add_argument("--t-max", dest="t_max", type=int, default=None)
    s.add_argument("--warp-strength", dest="warp_strength", type=float,
                   default=None)
    s.add_argument("--speaker-offset", dest="speaker_offset", type=int,
                   default=None)
    s.add_argument("--utt-offset", dest="utt_offset", type=int,
                   default=None)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a model on a feature file")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", dest="out_dir", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int,
                   default=None)
    t.add_argument("--eval-every", dest="eval_every", type=int,
                   default=None)
    t.add_argument("--finetune-steps", dest="finetune_steps", type=int,
                   default=None)
    t.add_argument("--dev-every", dest="dev_every", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="frame error of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--speaker", default=None)
    e.add_argument("--batch-size", dest="batch_size", type=int, default=4)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck",
                       help="finite-difference audit of every module")
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mutate", action="store_true",
                   help=argparse.SUPPRESS)  # test hook: sign-flipped op
    g.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("adapt", help="LIN adaptation for one speaker")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--speaker", required=True)
    a.add_argument("--iterations", type=int, default=3)
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--lr", type=float, default=1e-4)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_adapt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileFormatError, StructureError, DataError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, NumericError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
