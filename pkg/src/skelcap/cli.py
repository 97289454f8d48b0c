"""Command-line entry points for every pipeline stage plus the HTTP service.

Every run writes its resolved configuration next to its outputs so an
artifact directory is self-describing. Failures print a single-line
`error: ...` to stderr and exit 1; usage problems exit 2 via argparse.
"""

import argparse
import json
import os
import sys

from .data import GenConfig, PivotSpec, add_pivot, generate_corpus, load_corpus, save_corpus
from .decode import generate
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    ExperimentContext,
    ExperimentPlan,
    evaluate_condition,
    gold_skeletons,
    iterative_refine_skeletons,
    load_skeletons,
    pivot_experiment,
    predict_skeletons,
    run_experiment,
    save_skeletons,
    train,
)
from .report import write_log_csv, write_report
from .skeletons import VARIANTS, load_lexicon


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(obj, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_plan(args):
    plan = ExperimentPlan.from_json(_read_json(args.config))
    if getattr(args, "out", None):
        plan.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        plan.seed = args.seed
    if getattr(args, "mode", None):
        plan.stage2_mode = args.mode
    if getattr(args, "no_image", False):
        plan.use_image = False
    ExperimentPlan.from_json(plan.to_json())  # re-validate after overrides
    return plan


def _find_example(corpus, image_id):
    for examples in corpus.values():
        for ex in examples:
            if ex.image_id == image_id:
                return ex
    raise ValueError(f"unknown image_id {image_id!r}")


def cmd_gen_data(args):
    cfg = GenConfig.from_json(_read_json(args.config)) if args.config else GenConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    corpus = generate_corpus(cfg)
    if args.pivot:
        corpus = add_pivot(corpus, PivotSpec(suffix=args.pivot, reorder=args.pivot_reorder))
    save_corpus(corpus, args.out, cfg)
    print(args.out)


def cmd_extract_skeletons(args):
    corpus = load_corpus(args.corpus)
    if args.split not in corpus:
        raise ValueError(f"corpus has no split {args.split!r}")
    entries = gold_skeletons(corpus[args.split], args.variant)
    save_skeletons(entries, args.out)
    _write_json(
        {"corpus": args.corpus, "split": args.split, "variant": args.variant},
        args.out + ".config.json",
    )
    print(args.out)


def cmd_train(args):
    plan = _load_plan(args)
    if not plan.out_dir:
        raise ValueError("train needs an output directory (--out or plan out_dir)")
    ctx = ExperimentContext(plan)
    skeleton_files = None
    if args.skeletons:
        skeleton_files = {
            os.path.splitext(name)[0]: load_skeletons(os.path.join(args.skeletons, name))
            for name in sorted(os.listdir(args.skeletons))
            if name.endswith(".jsonl")
        }
    model, log = train(plan, args.stage, ctx, skeleton_files=skeleton_files)
    ckpt_dir = os.path.join(plan.out_dir, "checkpoints", args.stage)
    save_checkpoint(model, ckpt_dir)
    _write_json(plan.to_json(), os.path.join(plan.out_dir, "plan.json"))
    write_log_csv(log, os.path.join(plan.out_dir, f"loss_{args.stage}.csv"))
    print(ckpt_dir)


def cmd_predict_skeletons(args):
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if args.split not in corpus:
        raise ValueError(f"corpus has no split {args.split!r}")
    if model.config.mode == "img2cap":
        entries = iterative_refine_skeletons(model, corpus[args.split])
    else:
        entries = predict_skeletons(model, corpus[args.split], beam=args.beam)
    save_skeletons(entries, args.out)
    _write_json(
        {"checkpoint": args.checkpoint, "corpus": args.corpus, "split": args.split,
         "beam": args.beam},
        args.out + ".config.json",
    )
    print(args.out)


def cmd_generate(args):
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    example = _find_example(corpus, args.image_id)
    skeleton = args.skeleton.split() if args.skeleton is not None else None
    result = generate(model, example.features, skeleton=skeleton, beam=args.beam)
    print(json.dumps(result.to_json(), sort_keys=True))


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if args.split not in corpus:
        raise ValueError(f"corpus has no split {args.split!r}")
    examples = corpus[args.split]
    lex_path = os.path.join(args.corpus, "lexicon.tsv")
    lexicon = load_lexicon(lex_path) if os.path.exists(lex_path) else {}
    skeletons = load_skeletons(args.skeletons) if args.skeletons else None
    label = args.label or model.config.mode
    row, per_example, _ = evaluate_condition(
        model, examples, lexicon, label=label, skeletons=skeletons
    )
    report = {
        "schema_version": 1,
        "config": {
            "checkpoint": args.checkpoint, "corpus": args.corpus, "split": args.split,
            "skeletons": args.skeletons, "label": label,
        },
        "rows": [row],
        "per_example": per_example,
    }
    write_report(report, {}, args.out)
    _write_json(report["config"], os.path.join(args.out, "config.json"))
    print(os.path.join(args.out, "report.json"))


def cmd_experiment(args):
    plan = _load_plan(args)
    if not plan.out_dir:
        raise ValueError("experiment needs an output directory (--out or plan out_dir)")
    if args.pivot:
        spec = PivotSpec(suffix=args.pivot, reorder=args.pivot_reorder)
        pivot_experiment(plan, spec)
    else:
        run_experiment(plan)
    print(os.path.join(plan.out_dir, "report.json"))


def cmd_serve(args):
    import uvicorn

    from .server import build_app

    app = build_app(args.experiment, corpus_dir=args.corpus)
    port = args.port if args.port is not None else int(os.environ.get("PORT", "8000"))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="skelcap",
        description="dual-stage skeleton captioning: data, training, evaluation, serving",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--pivot", metavar="SUFFIX", help="also attach pivot-language captions")
    p.add_argument("--pivot-reorder", choices=("reverse", "identity"), default="reverse")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract-skeletons", help="write gold skeletons for a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--variant", choices=[v for v in VARIANTS if v != "iterative_refinement"],
                   default="nouns_verbs")
    p.add_argument("--out", required=True, help="skeleton JSONL path")
    p.set_defaults(func=cmd_extract_skeletons)

    p = sub.add_parser("train", help="train one stage of a plan")
    p.add_argument("--config", required=True, help="experiment plan JSON")
    p.add_argument("--stage", choices=("baseline", "stage1", "stage2"), default="stage2")
    p.add_argument("--out", help="override plan output directory")
    p.add_argument("--seed", type=int, help="override plan seed")
    p.add_argument("--mode", choices=("ske_enc", "ske_dec", "ske_ae"),
                   help="override stage-2 mode")
    p.add_argument("--no-image", action="store_true", help="train the unpaired variant")
    p.add_argument("--skeletons", help="directory of per-split predicted-skeleton JSONL files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict-skeletons", help="run stage-1 inference over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True, help="skeleton JSONL path")
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_predict_skeletons)

    p = sub.add_parser("generate", help="caption one image, optionally skeleton-guided")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--skeleton", help='override skeleton, e.g. "person dog run"')
    p.add_argument("--beam", type=int, default=None, help="beam width (default: checkpoint)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score one checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--skeletons", help="condition on this skeleton JSONL file")
    p.add_argument("--label", help="row label in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a full plan and write the report bundle")
    p.add_argument("--config", required=True, help="experiment plan JSON")
    p.add_argument("--out", help="override plan output directory")
    p.add_argument("--seed", type=int, help="override plan seed")
    p.add_argument("--mode", choices=("ske_enc", "ske_dec", "ske_ae"),
                   help="override stage-2 mode")
    p.add_argument("--no-image", action="store_true", help="add the unpaired ablation")
    p.add_argument("--pivot", metavar="SUFFIX", help="run the pivot-language variant")
    p.add_argument("--pivot-reorder", choices=("reverse", "identity"), default="reverse")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("serve", help="serve the HTTP API over an experiment directory")
    p.add_argument("--experiment", required=True, help="experiment output directory")
    p.add_argument("--corpus", help="override the corpus path recorded in the plan")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        line = " ".join(f"{type(exc).__name__}: {exc}".split())
        print(f"error: {line}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
