"""Command-line surface: gen-data, train, eval, segment, intent, bank.

Every subcommand prints machine-readable JSON on stdout; failures print a
one-line {"error": ...} object on stderr and exit nonzero (2 for usage
errors). ASISEG_DATA_DIR supplies the default data root; flags override it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .bank import DescriptionBank, InstrumentDescription, default_bank, load_bank
from .data import SynthConfig, generate_dataset, load_image_png, load_split, save_mask_png
from .decoder import threshold
from .errors import AsisegError
from .model import AsiSegModel, ModelConfig, load_checkpoint, save_checkpoint
from .train_eval import TrainConfig, evaluate_intention, evaluate_semantic, train

DATA_DIR_ENV = "ASISEG_DATA_DIR"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="asiseg",
        description="Audio-driven intention-oriented instrument segmentation",
    )
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    gen.add_argument("--out", default=None, help=f"output root (default ${DATA_DIR_ENV})")
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--k", type=int, default=7, help="number of instrument classes")
    gen.add_argument("--image-size", type=int, default=64)
    gen.add_argument("--n-train", type=int, default=300)
    gen.add_argument("--n-val", type=int, default=60)
    gen.add_argument("--max-instruments", type=int, default=3)
    gen.add_argument("--noise-level", type=float, default=0.03)

    tr = sub.add_parser("train", help="train on a generated dataset")
    tr.add_argument("--data", default=None, help=f"data root (default ${DATA_DIR_ENV})")
    tr.add_argument("--out", default="asiseg.ckpt", help="checkpoint path")
    tr.add_argument("--epochs", type=int, default=30)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--tau", type=float, default=0.07)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--bank", default=None, help="description bank JSON (default: bundled)")
    tr.add_argument("--no-bank", action="store_true", help="ablation: skip text fusion")
    tr.add_argument("--dice-only", action="store_true",
                    help="ablation: drop the contrastive loss term")
    tr.add_argument("--no-freeze", action="store_true", help="also train the encoders")
    tr.add_argument("--log", default=None, help="per-epoch JSONL log path")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--data", default=None)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--mode", choices=["intention", "semantic"], default="intention")
    ev.add_argument("--split", default="val")
    ev.add_argument("--table", action="store_true", help="also print an aligned table to stderr")

    seg = sub.add_parser("segment", help="segment one image from one audio command")
    seg.add_argument("--image", required=True)
    seg.add_argument("--audio", required=True)
    seg.add_argument("--checkpoint", required=True)
    seg.add_argument("--out", required=True, help="output mask PNG (0/255)")
    seg.add_argument("--bank", default=None)

    it = sub.add_parser("intent", help="classify one audio command")
    it.add_argument("--audio", required=True)
    it.add_argument("--checkpoint", required=True)

    bank = sub.add_parser("bank", help="description bank utilities")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)
    bv = bank_sub.add_parser("validate", help="schema-check a bank file")
    bv.add_argument("path")
    return p


def _data_root(value) -> str:
    root = value or os.environ.get(DATA_DIR_ENV)
    if not root:
        raise ValueError(f"no data root given: pass --data/--out or set ${DATA_DIR_ENV}")
    return root


def _generic_bank(k: int) -> DescriptionBank:
    entries = [
        InstrumentDescription(i, f"class {i}", f"synthetic instrument category number {i}")
        for i in range(k)
    ]
    return DescriptionBank(entries=entries)


def _cmd_gen_data(args) -> int:
    root = _data_root(args.out)
    config = SynthConfig(
        num_classes=args.k,
        image_size=args.image_size,
        n_train=args.n_train,
        n_val=args.n_val,
        max_instruments_per_frame=args.max_instruments,
        noise_level=args.noise_level,
        seed=args.seed,
    )
    manifests = generate_dataset(config, root)
    print(json.dumps(
        {"root": root, "splits": {m.split: len(m.ids) for m in manifests}}, sort_keys=True
    ))
    return 0


def _cmd_train(args) -> int:
    root = _data_root(args.data)
    samples = load_split(root, "train")
    k = samples[0].num_classes
    if args.bank:
        bank = load_bank(args.bank, expected_classes=k)
    elif k == 7:
        bank = default_bank()
    else:
        bank = _generic_bank(k)
    model = AsiSegModel(
        ModelConfig(num_classes=k, seed=args.seed, use_bank=not args.no_bank), bank=bank
    )
    config = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        tau=args.tau,
        seed=args.seed,
        freeze_encoders=not args.no_freeze,
        use_contrastive=not args.dice_only,
    )
    log = train(model, samples, config, log_path=args.log)
    save_checkpoint(model, args.out)
    print(json.dumps(
        {"checkpoint": args.out, "epochs": len(log), "final": log[-1] if log else None},
        sort_keys=True,
    ))
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = load_split(_data_root(args.data), args.split)
    if args.mode == "intention":
        report = evaluate_intention(model, samples)
    else:
        report = evaluate_semantic(model, samples)
    print(report.to_json())
    if args.table:
        print(report.to_table(model.class_names), file=sys.stderr)
    return 0


def _cmd_segment(args) -> int:
    from .audio import read_wav

    bank = load_bank(args.bank) if args.bank else None
    model = load_checkpoint(args.checkpoint, bank=bank)
    image = load_image_png(args.image)
    clip = read_wav(args.audio)
    logits, label = model.segment_with_audio(image, clip)
    save_mask_png(args.out, threshold(logits))
    print(json.dumps(
        {"class_index": label.class_index, "class_name": label.class_name, "out": args.out},
        sort_keys=True,
    ))
    return 0


def _cmd_intent(args) -> int:
    from .audio import read_wav

    model = load_checkpoint(args.checkpoint)
    label = model.intent_from_clip(read_wav(args.audio))
    print(label.to_json())
    return 0


def _cmd_bank(args) -> int:
    bank = load_bank(args.path)
    print(json.dumps({"ok": True, "classes": bank.num_classes}, sort_keys=True))
    return 0


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code) if exc.code is not None else 0
    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "segment": _cmd_segment,
        "intent": _cmd_intent,
        "bank": _cmd_bank,
    }
    try:
        return handlers[args.command](args)
    except (AsisegError, ValueError, OSError) as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
