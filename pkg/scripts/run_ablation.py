"""Train fusion-design variants from one set of pretrained components and print an accuracy table.

    python3 scripts/run_ablation.py --variant full --variant no-text-attn
"""

import argparse
import sys
from pathlib import Path

from rgbtfuse.ablation import VARIANTS, format_table, run_variants
from rgbtfuse.config import load_config
from rgbtfuse.data import Vocab
from rgbtfuse.pipeline import build_trained_components, synthetic_splits


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/acceptance.cfg"))
    ap.add_argument("--variant", action="append", choices=list(VARIANTS), help="repeatable; default: all")
    ap.add_argument("--out", type=Path, default=Path("runs/ablation.csv"))
    args = ap.parse_args()

    cfg = load_config(args.config)
    vocab = Vocab(size=cfg.vocab_size)
    train, held = synthetic_splits(cfg, vocab)

    def log(msg):
        print(msg, file=sys.stderr, flush=True)

    model = build_trained_components(cfg, vocab, log=log)
    results = run_variants(cfg, model, train, held, args.variant or list(VARIANTS), vocab.yes, log=log)
    table = format_table(results)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
