"""Batch command-line interface: data generation, training, evaluation,
annotation and the service launcher.

Every subcommand seeds all randomness through --seed (or the seed embedded in
the relevant config file), so identical invocations produce identical
artifacts. Missing or invalid files exit non-zero with a message on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import annotate as annotate_mod
from . import data as data_mod
from . import hvae, train as train_mod
from .errors import DecodeError

DEFAULT_PORT_ENV = "GRIDINSIGHT_PORT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridinsight")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic pixel-map archive")
    p.add_argument("--spec", help="JSON file of generator settings (defaults used if omitted)")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--seed", type=int, default=None, help="overrides the spec seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON: {kind, model: {...}, train: {...}}")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the train-config seed")
    p.add_argument("--checkpoint-dir", default=None)

    p = sub.add_parser("eval-elbo", help="train/test ELBO table for checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", default=None, help="second checkpoint for comparison")
    p.add_argument("--k", type=int, default=None, help="Monte-Carlo samples (default: model config)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("annotate", help="annotation metrics or registry-based annotation")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--insights", default=None, help="registry JSONL for unsupervised mode")
    p.add_argument("--mode", choices=("unsupervised", "knn"), required=True)
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--knn-k", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write per-sample results (JSONL)")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--registry", default=None, help="insight registry persistence file")
    return parser


def cmd_gen_data(args) -> int:
    if args.spec:
        spec_doc = json.loads(Path(args.spec).read_text())
        spec = data_mod.SyntheticSpec.from_dict(spec_doc)
    else:
        spec = data_mod.SyntheticSpec()
    if args.seed is not None:
        spec = data_mod.SyntheticSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    dataset = data_mod.generate_synthetic(spec, args.n)
    data_mod.save_dataset(args.out, dataset)
    print(f"wrote {len(dataset)} samples ({spec.m}x{spec.t}, K={spec.k}) to {args.out}")
    return 0


def _load_train_setup(args):
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    kind = doc.get("kind", "conv")
    if kind not in hvae.MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    model_cfg = hvae.HvaeConfig.from_dict({**hvae.HvaeConfig().to_dict(),
                                           **doc.get("model", {})})
    train_doc = {**train_mod.TrainConfig().to_dict(), **doc.get("train", {})}
    if args.seed is not None:
        train_doc["seed"] = args.seed
    train_cfg = train_mod.TrainConfig.from_dict(train_doc)
    return kind, model_cfg, train_cfg


def cmd_train(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    kind, model_cfg, train_cfg = _load_train_setup(args)
    model = hvae.MODEL_KINDS[kind](model_cfg, seed=train_cfg.seed)
    print(f"training {kind} model ({model.param_count()} parameters, "
          f"{train_cfg.epochs} epochs, batch {train_cfg.batch_size})")
    history = train_mod.train(model, dataset, train_cfg,
                              checkpoint_dir=args.checkpoint_dir)
    train_mod.save_checkpoint(model, train_cfg, args.out)
    history_path = Path(args.out).with_suffix(".history.csv")
    history_path.write_text(history.to_csv())
    last = history.records[-1]
    print(f"done in {history.train_seconds:.1f}s; final eval ELBO {last.eval_elbo:.2f}, "
          f"eval MSE {last.eval_mse:.5f}")
    print(f"checkpoint: {args.out}\nhistory: {history_path}")
    return 0


def _elbo_row(checkpoint_path: str, grids: np.ndarray, k_override, seed: int):
    model = train_mod.load_checkpoint(checkpoint_path)
    cfg = getattr(model, "train_config", None) or train_mod.TrainConfig()
    train_grids, eval_grids = train_mod.split_train_eval(grids, cfg)
    k = k_override or model.config.mc_samples
    return {
        "name": f"{model.kind} ({Path(checkpoint_path).name})",
        "params": model.param_count(),
        "train_elbo": train_mod.evaluate_elbo(model, train_grids, k, seed),
        "test_elbo": train_mod.evaluate_elbo(model, eval_grids, k, seed),
    }


def cmd_eval_elbo(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    rows = [_elbo_row(args.model, dataset.grids, args.k, args.seed)]
    if args.baseline:
        rows.append(_elbo_row(args.baseline, dataset.grids, args.k, args.seed))
    name_w = max(len(r["name"]) for r in rows)
    print(f"{'model'.ljust(name_w)}  {'params':>8}  {'train_elbo':>12}  {'test_elbo':>12}")
    for r in rows:
        print(f"{r['name'].ljust(name_w)}  {r['params']:>8}  "
              f"{r['train_elbo']:>12.2f}  {r['test_elbo']:>12.2f}")
    if len(rows) == 2:
        better = "first" if rows[0]["test_elbo"] > rows[1]["test_elbo"] else "second"
        print(f"higher held-out ELBO: {better} model")
    return 0


def cmd_annotate(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    model = train_mod.load_checkpoint(args.model)
    from .latent import extract_batch
    reps = extract_batch(model, dataset.grids, ids=dataset.ids)
    if args.mode == "unsupervised" and args.insights:
        registry = annotate_mod.InsightRegistry.from_jsonl(
            Path(args.insights).read_text(), dim=reps[0].dim)
        results = annotate_mod.unsupervised_annotate(reps, registry)
        counts = np.sum([r.bits for r in results], axis=0)
        print("insight matches over the dataset:")
        for rec, c in zip(registry.list(), counts):
            print(f"  {rec.id} ({rec.name}): {int(c)} / {len(results)}")
        if args.out:
            Path(args.out).write_text(annotate_mod.annotation_results_to_jsonl(results))
            print(f"per-sample results: {args.out}")
        return 0
    result = annotate_mod.cross_validate(
        dataset, model, args.mode, folds=args.folds,
        label_fraction=args.label_fraction, seed=args.seed, knn_k=args.knn_k,
        reps=reps)
    print(result.format_table(dataset.insight_names))
    print(f"mA: {100 * result.ma_mean:.1f}+-{100 * result.ma_std:.1f}")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "map_mean": result.map_mean, "map_std": result.map_std,
            "per_class_mean": result.per_class_mean.tolist(),
            "fold_maps": result.fold_maps}, indent=2) + "\n")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import SessionState, create_app

    dataset = data_mod.load_dataset(args.data)
    model = train_mod.load_checkpoint(args.model)
    state = SessionState(model, dataset, registry_path=args.registry)
    port = args.port or int(os.environ.get(DEFAULT_PORT_ENV, "8008"))
    app = create_app(state)
    print(f"serving {len(dataset)} samples on {args.host}:{port}")
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-elbo": cmd_eval_elbo,
    "annotate": cmd_annotate,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, DecodeError, ValueError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
