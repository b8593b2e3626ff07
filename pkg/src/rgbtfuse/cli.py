"""Command-line entry points: data generation, pretraining, training, evaluation, gradient checks, ablations."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .autodiff import ContractError
from .config import TrainConfig, apply_overrides, load_config
from .data import SUBSETS, Vocab, emit_dataset
from .tensor_io import ParseError


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgbtfuse", description="Gated thermal fusion experiments at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
        return sp

    g = add("gen-data", "write a synthetic paired dataset")
    g.add_argument("--n-scenes", type=int, help="total scenes (default: train_samples + eval_samples)")
    g.add_argument("--balance", default="1,1,1", help="relative rgb,ir,rgb+ir weights")

    add("pretrain-lm", "text-only pretraining of the toy decoder")
    m = add("pretrain-mae", "MAE pretraining of the thermal encoder")
    m.add_argument("--checkpoint", type=Path, help="start from this checkpoint (e.g. after pretrain-lm)")

    t = add("train", "fine-tune fusion and trailing thermal blocks")
    t.add_argument("--checkpoint", type=Path, help="pretrained components to start from")
    t.add_argument("--data", type=Path, help="dataset directory (default: generate in memory)")

    e = add("eval", "score a checkpoint on a dataset")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help="dataset directory (default: regenerate the held-out split)")
    e.add_argument("--subset", choices=[*SUBSETS, "all"], default="all")

    gc = add("gradcheck", "finite-difference gradient report")
    gc.add_argument("--per-param", type=int, default=3, help="elements checked per parameter tensor")

    a = add("ablate", "train fusion-design variants and tabulate accuracy")
    a.add_argument("--variant", action="append", default=[], help="variant name (repeatable; default: all)")
    a.add_argument("--checkpoint", type=Path, help="pretrained components to start from")
    a.add_argument("--data", type=Path)
    return p


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    pairs = list(args.override)
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    return apply_overrides(cfg, pairs).validate()


def _samples(cfg: TrainConfig, vocab: Vocab, data: Path | None):
    from .pipeline import load_samples, synthetic_splits

    if data is None and cfg.data_dir:
        data = Path(cfg.data_dir)
    if data is None:
        return synthetic_splits(cfg, vocab)
    return load_samples(data, "train", vocab), load_samples(data, "eval", vocab)


def _pretrained_model(cfg: TrainConfig, vocab: Vocab, checkpoint: Path | None):
    from .pipeline import apply_checkpoint, build_trained_components, init_model, load_checkpoint

    ckpt = checkpoint or (Path(cfg.mae_checkpoint) if cfg.mae_checkpoint else None)
    if ckpt is None:
        return build_trained_components(cfg, vocab, log=_log)
    model = init_model(cfg)
    apply_checkpoint(model, load_checkpoint(ckpt))
    _log(f"loaded pretrained components from {ckpt}")
    return model


def cmd_gen_data(args, cfg: TrainConfig) -> int:
    weights = [float(x) for x in args.balance.split(",")]
    if len(weights) != len(SUBSETS):
        raise ContractError(f"--balance needs {len(SUBSETS)} comma-separated weights")
    n = args.n_scenes or cfg.train_samples + cfg.eval_samples
    frac = cfg.eval_samples / (cfg.train_samples + cfg.eval_samples) if args.n_scenes is None else 0.2
    manifest = emit_dataset(n, dict(zip(SUBSETS, weights)), cfg.seed, args.out, eval_fraction=frac, size=cfg.image_size)
    _log(f"wrote {manifest.rows} items to {args.out}")
    return 0


def cmd_pretrain_lm(args, cfg: TrainConfig) -> int:
    from .pipeline import init_model, pretrain_language, save_checkpoint

    vocab = Vocab(size=cfg.vocab_size)
    model = init_model(cfg)
    hist = pretrain_language(model, cfg, vocab, log=_log)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "lm.ckpt", model, cfg)
    _write_curve(args.out / "lm_curve.jsonl", hist)
    return 0


def cmd_pretrain_mae(args, cfg: TrainConfig) -> int:
    from .pipeline import apply_checkpoint, init_model, load_checkpoint, pretrain_vision, save_checkpoint

    model = init_model(cfg)
    if args.checkpoint:
        apply_checkpoint(model, load_checkpoint(args.checkpoint))
    hist = pretrain_vision(model, cfg, log=_log)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "mae.ckpt", model, cfg)
    _write_curve(args.out / "mae_curve.jsonl", hist["thermal"])
    return 0


def _write_curve(path: Path, values) -> None:
    with open(path, "w") as fh:
        for i, v in enumerate(values, 1):
            fh.write(json.dumps({"step": i, "loss": v}) + "\n")


def cmd_train(args, cfg: TrainConfig) -> int:
    from .optim import verify_frozen
    from .pipeline import Trainer, evaluate, save_checkpoint

    vocab = Vocab(size=cfg.vocab_size)
    train, held = _samples(cfg, vocab, args.data)
    model = _pretrained_model(cfg, vocab, args.checkpoint)
    trainer = Trainer(model, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    start = time.time()
    with open(args.out / "metrics.jsonl", "w") as fh:
        trainer.fit(train, log_file=fh)
    frozen = verify_frozen(trainer.registry)
    if not frozen.ok:
        raise ContractError(f"frozen parameters drifted: {frozen.drifted[:5]}")
    save_checkpoint(args.out / "model.ckpt", model, cfg, trainer)
    report, _ = evaluate(model, held, cfg)
    (args.out / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    _log(f"trained {trainer.step} steps in {time.time() - start:.0f}s; held-out overall {report.overall:.3f}")
    return 0


def cmd_eval(args, cfg: TrainConfig) -> int:
    from .pipeline import evaluate, restore

    model, ck_cfg, _ = restore(args.checkpoint, cfg.fingerprint() if args.config else None)
    vocab = Vocab(size=ck_cfg.vocab_size)
    if args.data is not None:
        from .pipeline import load_samples

        held = load_samples(args.data, "eval", vocab)
    else:
        _, held = _samples(ck_cfg, vocab, None)
    if args.subset != "all":
        held = [s for s in held if s.modality == args.subset]
        if not held:
            raise ContractError(f"no {args.subset!r} items in the evaluation split")
    report, preds = evaluate(model, held, ck_cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    with open(args.out / "predictions.jsonl", "w") as fh:
        for k in sorted(preds):
            fh.write(json.dumps({"id": k, "answer": preds[k]}) + "\n")
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def cmd_gradcheck(args, cfg: TrainConfig) -> int:
    from .gradcheck import gradcheck_suite

    reports = gradcheck_suite(per_param=args.per_param, seed=cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in reports:
        print(r.summary())
        rows += [{"group": r.label, "param": c.param, "index": list(c.index), "analytic": c.analytic,
                  "numeric": c.numeric, "rel_err": c.rel_err, "passed": c.passed()} for c in r.checks]
    with open(args.out / "gradcheck.jsonl", "w") as fh:
        fh.writelines(json.dumps(row) + "\n" for row in rows)
    return 0 if all(r.ok for r in reports) else 1


def cmd_ablate(args, cfg: TrainConfig) -> int:
    from .ablation import VARIANTS, format_table, run_variants

    names = args.variant or list(VARIANTS)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ContractError(f"unknown ablation variant(s) {unknown}; choose from {', '.join(VARIANTS)}")
    vocab = Vocab(size=cfg.vocab_size)
    train, held = _samples(cfg, vocab, args.data)
    model = _pretrained_model(cfg, vocab, args.checkpoint)
    results = run_variants(cfg, model, train, held, names, vocab.yes, log=_log)
    args.out.mkdir(parents=True, exist_ok=True)
    table = format_table(results)
    (args.out / "ablation.csv").write_text(table)
    print(table, end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-lm": cmd_pretrain_lm,
    "pretrain-mae": cmd_pretrain_mae,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ContractError, ParseError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"rgbtfuse {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
