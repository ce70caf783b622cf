"""Command-line surface: train / eval / decode / gen-data / compare-modes.

Config precedence everywhere: explicit CLI flag > --config JSON file >
built-in default. The effective configuration is printed as key=value
lines before a command runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report
from .compare import run_compare_modes
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticTaskSpec, generate_dataset, load_dataset, save_dataset
from .metrics import bleu, token_error_rate
from .model import Model, ModelConfig, decode_greedy
from .position import ABSOLUTE, RELATIVE
from .training import TrainSchedule, average_checkpoints, train, validation_perplexity
from .data import batch_by_tokens

log = logging.getLogger(__name__)

MODEL_DEFAULTS = {
    "d_model": 64, "heads": 4, "enc_layers": 6, "dec_layers": 3, "ffn_dim": 256,
    "residual_dropout": 0.1, "word_dropout": 0.0, "layer_drop": 0.0,
    "position_mode": RELATIVE, "frame_stack": 1, "max_len": 512, "attn_dropout": None,
}
SCHEDULE_DEFAULTS = {
    "warmup_steps": 4096, "max_steps": 120000, "accum_target_tokens": 12000,
    "checkpoint_every": 500, "eval_every": 500, "keep_best": 10,
    "label_smoothing": 0.1, "grad_clip": None, "target_loss": None,
}
COMPARE_OVERRIDES = {
    "d_model": 32, "heads": 4, "enc_layers": 2, "dec_layers": 1, "ffn_dim": 128,
    "residual_dropout": 0.05, "warmup_steps": 150, "max_steps": 450,
    "accum_target_tokens": 96, "checkpoint_every": 10 ** 9, "eval_every": 10 ** 9,
    "label_smoothing": 0.0,
}


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--heads", dest="heads", type=int)
    p.add_argument("--enc-layers", dest="enc_layers", type=int)
    p.add_argument("--dec-layers", dest="dec_layers", type=int)
    p.add_argument("--ffn", dest="ffn_dim", type=int)
    p.add_argument("--dropout", dest="residual_dropout", type=float)
    p.add_argument("--word-dropout", dest="word_dropout", type=float)
    p.add_argument("--layer-drop", dest="layer_drop", type=float)
    p.add_argument("--position-mode", dest="position_mode", choices=[ABSOLUTE, RELATIVE])
    p.add_argument("--frame-stack", dest="frame_stack", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--attn-dropout", dest="attn_dropout", type=float)


def _add_schedule_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--warmup", dest="warmup_steps", type=int)
    p.add_argument("--max-updates", dest="max_steps", type=int)
    p.add_argument("--accum-tokens", dest="accum_target_tokens", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--keep-best", dest="keep_best", type=int)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--target-loss", dest="target_loss", type=float)


def _merge(args: argparse.Namespace, file_cfg: dict, defaults: dict,
           overrides: dict | None = None) -> dict:
    merged = dict(defaults)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if k in merged})
    for key in defaults:
        if key in file_cfg:
            merged[key] = file_cfg[key]
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
    return merged


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config file must hold a JSON object")
    return cfg


def _print_effective(pairs: dict) -> None:
    print(report.format_key_values(pairs))


def cmd_gen_data(args) -> int:
    spec = SyntheticTaskSpec(
        alphabet_size=args.alphabet, feature_dim=args.feature_dim,
        noise_sigma=args.noise, pad_range=(args.pad_min, args.pad_max),
        frames_per_symbol=(args.frames_min, args.frames_max),
        symbols_range=(args.symbols_min, args.symbols_max), seed=args.seed,
    )
    shifted = SyntheticTaskSpec(
        alphabet_size=args.alphabet, feature_dim=args.feature_dim,
        noise_sigma=args.noise, pad_range=(args.shifted_pad_min, args.shifted_pad_max),
        frames_per_symbol=(args.frames_min, args.frames_max),
        symbols_range=(args.symbols_min, args.symbols_max), seed=args.seed,
    )
    _print_effective({"alphabet": args.alphabet, "feature_dim": args.feature_dim,
                      "noise": args.noise, "pads": f"{args.pad_min}..{args.pad_max}",
                      "shifted_pads": f"{args.shifted_pad_min}..{args.shifted_pad_max}",
                      "n_train": args.n_train, "n_eval": args.n_eval, "seed": args.seed})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.txt", generate_dataset(spec, args.n_train, args.seed))
    save_dataset(out / "eval.txt", generate_dataset(spec, args.n_eval, args.seed + 1))
    save_dataset(out / "eval_shifted.txt",
                 generate_dataset(shifted, args.n_eval, args.seed + 2))
    print(f"wrote train.txt, eval.txt, eval_shifted.txt under {out}")
    return 0


def _build_model_config(model_cfg: dict, input_dim: int, vocab_size: int) -> ModelConfig:
    return ModelConfig(input_dim=input_dim, vocab_size=vocab_size, **model_cfg)


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args)
    model_cfg = _merge(args, file_cfg, MODEL_DEFAULTS)
    sched_cfg = _merge(args, file_cfg, SCHEDULE_DEFAULTS)
    train_set, vocab = load_dataset(args.data)
    val_set = []
    if args.val_data:
        val_set, _ = load_dataset(args.val_data)
    cfg = _build_model_config(model_cfg, train_set[0].features.shape[1], vocab.size)
    schedule = TrainSchedule(d_model=cfg.d_model, **sched_cfg)
    _print_effective({**model_cfg, **sched_cfg, "seed": args.seed,
                      "input_dim": cfg.input_dim, "vocab_size": cfg.vocab_size,
                      "data": args.data, "out": args.out})
    model = Model.create(cfg, seed=args.seed)
    result = train(model, train_set, val_set, vocab, schedule, args.seed, args.out)
    out = Path(args.out)
    if result.log_lines:
        figure = report.plot_training_curves(result.log_lines, out / "training_curve.png")
        print(f"training curve: {figure}")
    if args.average and len(result.checkpoints) >= args.average:
        averaged = average_checkpoints([c.path for c in result.checkpoints], args.average)
        save_checkpoint(averaged, out / "averaged.ckpt", vocab=vocab)
        print(f"averaged checkpoint: {out / 'averaged.ckpt'}")
    last = result.checkpoints[-1] if result.checkpoints else None
    print(report.format_key_values({
        "updates": len(result.log_lines),
        "final_loss": float(result.log_lines[-1].split("\t")[3]) if result.log_lines else float("nan"),
        "diverged": result.diverged,
        "last_checkpoint": last.path if last else "",
    }))
    return 1 if result.diverged else 0


def cmd_eval(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    model, vocab = loaded.model, loaded.vocab
    if vocab is None:
        raise ValueError(f"{args.checkpoint} stores no vocabulary; cannot evaluate text")
    utts, _ = load_dataset(args.data)
    batches = batch_by_tokens(utts, vocab, max(512, max(len(u.text) for u in utts)),
                              max(u.n_frames for u in utts) * 8)
    ppl = validation_perplexity(model, batches)
    max_out = args.max_out or (max(len(u.text) for u in utts) * 2 + 4)
    hyps = [vocab.detokenize(decode_greedy(model, u.features, max_out)) for u in utts]
    refs = [u.text for u in utts]
    pairs = {
        "utterances": len(utts),
        "val_ppl": ppl,
        "token_error_rate": token_error_rate(hyps, refs),
        "bleu": bleu([list(h) for h in hyps], [list(r) for r in refs]),
    }
    print(report.format_key_values(pairs))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.txt").write_text(report.format_key_values(pairs) + "\n",
                                      encoding="utf-8")
    return 0


def cmd_decode(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    model, vocab = loaded.model, loaded.vocab
    if vocab is None:
        raise ValueError(f"{args.checkpoint} stores no vocabulary; cannot decode text")
    utts, _ = load_dataset(args.data)
    rng = np.random.default_rng(args.seed) if args.sample else None
    max_out = args.max_out or (max(len(u.text) for u in utts) * 2 + 4)
    for u in utts:
        ids = decode_greedy(model, u.features, max_out, sample=args.sample, rng=rng)
        print(f"{vocab.detokenize(ids)}\t{u.text}")
    return 0


def cmd_compare_modes(args) -> int:
    file_cfg = _load_config_file(args)
    model_cfg = _merge(args, file_cfg, MODEL_DEFAULTS, COMPARE_OVERRIDES)
    sched_cfg = _merge(args, file_cfg, SCHEDULE_DEFAULTS, COMPARE_OVERRIDES)
    data_dir = Path(args.data_dir)
    train_set, vocab = load_dataset(data_dir / "train.txt")
    eval_std, _ = load_dataset(data_dir / "eval.txt")
    eval_shifted, _ = load_dataset(data_dir / "eval_shifted.txt")
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = _build_model_config(model_cfg, train_set[0].features.shape[1], vocab.size)
    schedule = TrainSchedule(d_model=cfg.d_model, **sched_cfg)
    _print_effective({**model_cfg, **sched_cfg, "seeds": args.seeds,
                      "data_dir": args.data_dir, "out": args.out})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_compare_modes(train_set, eval_std, eval_shifted, vocab,
                               cfg, schedule, seeds, out)
    summary = result.summary()
    table = report.format_table(
        ["mode", "ter_standard", "ter_shifted", "degradation"],
        [[m, row["ter_standard"], row["ter_shifted"], row["degradation"]]
         for m, row in summary.items()],
    )
    body = table + "\n\n" + report.format_key_values(result.key_values()) + "\n"
    (out / "report.txt").write_text(body, encoding="utf-8")
    figure = report.plot_mode_comparison(summary, out / "compare_modes.png")
    print(body)
    print(f"figure: {figure}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relspeech",
        description="Speech-to-text transformer with relative position encodings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic padded task")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--alphabet", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--pad-min", type=int, default=0)
    p.add_argument("--pad-max", type=int, default=4)
    p.add_argument("--shifted-pad-min", type=int, default=20)
    p.add_argument("--shifted-pad-max", type=int, default=40)
    p.add_argument("--frames-min", type=int, default=2)
    p.add_argument("--frames-max", type=int, default=4)
    p.add_argument("--symbols-min", type=int, default=3)
    p.add_argument("--symbols-max", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--average", type=int, default=0,
                   help="average the k best checkpoints at the end")
    _add_model_args(p)
    _add_schedule_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity, token error rate and BLEU")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--max-out", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="greedy decoding of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-out", type=int)
    p.add_argument("--sample", action="store_true")
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("compare-modes", help="absolute-vs-relative A/B on padded data")
    p.add_argument("--data-dir", required=True,
                   help="directory with train.txt, eval.txt, eval_shifted.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--seeds", default="1,2,3")
    _add_model_args(p)
    _add_schedule_args(p)
    p.set_defaults(func=cmd_compare_modes)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
