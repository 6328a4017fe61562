"""Command-line entry point: generate, train, evaluate, inspect.

Every run resolves its configuration from an optional key=value file plus
flag overrides, writes a manifest into the output directory before any
computation, and fails with a one-line error and a command-specific exit
code.  Exit codes: 2 config, 3 dataset, 4 checkpoint, 5 training, 6 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, report, synth, training
from .config import (ConfigError, config_dict, parse_config_text,
                     resolve_configs)
from .heads import combined_loss
from .model import ActivityModel
from .synth import DatasetError
from .tensor import ContractError, grad_check
from .training import CheckpointError, TrainingError

_EXIT_CODES = (
    (ConfigError, "config", 2),
    (ContractError, "config", 2),
    (DatasetError, "dataset", 3),
    (CheckpointError, "checkpoint", 4),
    (TrainingError, "training", 5),
    (OSError, "io", 6),
)

# the gradcheck command defaults to a small shape so a full-model check
# finishes in seconds; any config file or flag still overrides these
_GRADCHECK_DEFAULTS = {
    "T": "4", "N": "4", "D": "16", "heads": "2", "C": "2", "blocks": "2",
    "dropout": "0.0", "n_clips": "4", "batch_size": "4",
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="groupact",
        description="Group activity recognition on synthetic clips with a "
                    "clustered spatial-temporal transformer.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=out_required,
                       help="output directory (created if missing)")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--workers", type=int, help="parallel fan-out cap")
        p.add_argument("--epochs", type=int)
        p.add_argument("--clusters", type=int, help="cluster count C")
        p.add_argument("--blocks", type=int)
        p.add_argument("--variant",
                       choices=["baseline", "spatial", "stacked", "parallel",
                                "ours"])
        p.add_argument("--no-grg", action="store_true",
                       help="replace the group token builder with a bare "
                            "learned query")
        p.add_argument("--intra", choices=["on", "off"],
                       help="within-cluster attention masking")
        p.add_argument("--inter", choices=["on", "off"],
                       help="centroid-level attention term")

    p_gen = sub.add_parser("gen", help="write a synthetic dataset")
    common(p_gen)
    p_gen.add_argument("--n-clips", type=int, help="dataset size override")

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)

    p_gc = sub.add_parser("gradcheck",
                          help="finite-difference check of the full model")
    common(p_gc)
    p_gc.add_argument("--tol", type=float, default=1e-5)
    p_gc.add_argument("--samples", type=int, default=3,
                      help="entries checked per parameter")

    p_abl = sub.add_parser("ablate", help="run an ablation plan")
    common(p_abl)
    p_abl.add_argument("--plan", default="variants",
                       choices=sorted(training.ABLATION_PLANS))

    p_exp = sub.add_parser("export-clusters",
                           help="dump cluster assignments for inspection")
    common(p_exp)
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--count", type=int, default=8,
                       help="number of clips to export")
    return parser


def _overrides_from_args(args):
    flags = {}
    mapping = {"seed": "seed", "workers": "workers", "epochs": "epochs",
               "clusters": "C", "blocks": "blocks", "variant": "variant"}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags[key] = value
    if getattr(args, "no_grg", False):
        flags["grg"] = False
    for toggle in ("intra", "inter"):
        value = getattr(args, toggle, None)
        if value is not None:
            flags[toggle] = value == "on"
    if getattr(args, "n_clips", None) is not None:
        flags["n_clips"] = args.n_clips
    return flags


def _resolve(args, defaults=None):
    raw = dict(defaults or {})
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text()))
    return resolve_configs(raw, _overrides_from_args(args))


def _write_manifest(args, gen_cfg, train_cfg, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "config": config_dict(gen_cfg, train_cfg),
        "seed": train_cfg.seed,
        "version": __version__,
        "out": str(out_dir),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _split_dataset(gen_cfg, train_cfg):
    clips = synth.dataset(gen_cfg, train_cfg.n_clips)
    return synth.train_val_split(clips)


def cmd_gen(args):
    gen_cfg, train_cfg = _resolve(args)
    out_dir = Path(args.out)
    _write_manifest(args, gen_cfg, train_cfg, out_dir)
    clips = synth.dataset(gen_cfg, train_cfg.n_clips)
    data_path, sidecar = synth.write_dataset(out_dir / "dataset.bin",
                                             gen_cfg, clips)
    print(f"wrote {len(clips)} clips to {data_path} (sidecar {sidecar})")
    return 0


def cmd_train(args):
    gen_cfg, train_cfg = _resolve(args)
    out_dir = Path(args.out)
    _write_manifest(args, gen_cfg, train_cfg, out_dir)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    train_clips, val_clips = _split_dataset(gen_cfg, train_cfg)
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        def log_row(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
                  f"group {row['group_acc']:.4f}  ind {row['ind_acc']:.4f}")

        history, best = training.train(gen_cfg, train_cfg, train_clips,
                                       val_clips, on_epoch=log_row)
    ck_path = out_dir / "checkpoints" / "best.ckpt"
    training.save_checkpoint(best, ck_path)
    figure = report.training_curves(history, out_dir / "training_curves.png")
    metrics = training.evaluate(best, val_clips)
    print(f"best epoch {best.epoch}: group_acc={metrics['group_acc']:.4f} "
          f"ind_acc={metrics['ind_acc']:.4f}")
    print(f"wrote {metrics_path}, {ck_path}, {figure}")
    return 0


def cmd_eval(args):
    ck = training.load_checkpoint(args.checkpoint)
    gen_cfg, train_cfg = ck.gen, ck.train
    if args.config or _overrides_from_args(args):
        file_gen, file_train = _resolve(args)
        if (file_gen, file_train) != (gen_cfg, train_cfg):
            raise CheckpointError(
                "checkpoint config differs from the requested config; "
                "evaluate without overrides or retrain")
    out_dir = Path(args.out)
    _write_manifest(args, gen_cfg, train_cfg, out_dir)
    _, val_clips = _split_dataset(gen_cfg, train_cfg)
    metrics = training.evaluate(ck, val_clips)
    (out_dir / "eval.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"group_acc={metrics['group_acc']:.4f} "
          f"ind_acc={metrics['ind_acc']:.4f} loss={metrics['loss']:.4f}")
    return 0


def cmd_gradcheck(args):
    gen_cfg, train_cfg = _resolve(args, defaults=_GRADCHECK_DEFAULTS)
    out_dir = Path(args.out)
    _write_manifest(args, gen_cfg, train_cfg, out_dir)
    model = ActivityModel(gen_cfg, train_cfg)
    clips = [synth.generate_clip(gen_cfg, i) for i in range(2)]
    feats = np.stack([c.individuals for c in clips])
    scenes = np.stack([c.scene for c in clips])
    seeds = [c.seed for c in clips]
    y_g = np.array([c.y_g for c in clips])
    y_a = np.stack([c.y_a for c in clips])
    frozen = model.forward(feats, scenes, seeds).cluster_labels

    def loss():
        out = model.forward(feats, scenes, seeds, assignments=frozen)
        g, a = model.logits(out)
        return combined_loss(g, y_g, a, y_a, train_cfg.lam)

    csprng = np.random.default_rng(train_cfg.seed)
    rep = grad_check(loss, model.parameters(), samples_per_param=args.samples,
                     rng=csprng)
    verdict = "PASS" if rep.passes(args.tol) else "FAIL"
    print(f"max_rel_err={rep.max_rel_err:.3e} worst={rep.worst_param} "
          f"checked={rep.checked} tol={args.tol:g} {verdict}")
    (out_dir / "gradcheck.json").write_text(json.dumps(
        {"max_rel_err": rep.max_rel_err, "worst_param": rep.worst_param,
         "checked": rep.checked, "tol": args.tol, "verdict": verdict},
        indent=2, sort_keys=True) + "\n")
    return 0 if verdict == "PASS" else 5


def cmd_ablate(args):
    gen_cfg, train_cfg = _resolve(args)
    out_dir = Path(args.out)
    _write_manifest(args, gen_cfg, train_cfg, out_dir)
    train_clips, val_clips = _split_dataset(gen_cfg, train_cfg)

    def show(row):
        print(f"{row['arm']:24s} group_acc={row['group_acc']:.4f} "
              f"ind_acc={row['ind_acc']:.4f}")

    rows = training.run_ablation(args.plan, gen_cfg, train_cfg, train_clips,
                                 val_clips, on_arm=show)
    csv_path = out_dir / "ablation.csv"
    csv_path.write_text("\n".join(training.ablation_csv_lines(rows)) + "\n")
    figure = report.ablation_chart(rows, out_dir / "ablation.png")
    print(f"wrote {csv_path}, {figure}")
    return 0


def cmd_export_clusters(args):
    ck = training.load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    _write_manifest(args, ck.gen, ck.train, out_dir)
    model = training.restore_model(ck)
    _, val_clips = _split_dataset(ck.gen, ck.train)
    chosen = val_clips[:args.count]
    feats = np.stack([c.individuals for c in chosen])
    scenes = np.stack([c.scene for c in chosen])
    seeds = [c.seed for c in chosen]
    out = model.forward(feats, scenes, seeds, collect_stats=True)
    clips_out = []
    for i, clip in enumerate(chosen):
        clips_out.append({
            "clip_seed": clip.seed,
            "y_g": int(clip.y_g),
            "boxes": clip.boxes.tolist(),
            "labels": [None if lab is None else lab[i].tolist()
                       for lab in out.cluster_labels],
        })
    payload = {
        "clusters": ck.train.C,
        "blocks": ck.train.blocks,
        "attention_stats": out.attention_stats,
        "clips": clips_out,
    }
    json_path = out_dir / "clusters.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    figure = None
    first_labels = next((lab for lab in out.cluster_labels if lab is not None),
                        None)
    if first_labels is not None:
        figure = report.cluster_scatter(chosen[0].boxes, first_labels[0],
                                        out_dir / "clusters.png")
    print(f"wrote {json_path}" + (f", {figure}" if figure else ""))
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-clusters": cmd_export_clusters,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except tuple(cls for cls, _, _ in _EXIT_CODES) as err:
        for cls, kind, code in _EXIT_CODES:
            if isinstance(err, cls):
                message = " ".join(str(err).split())
                print(f"error: {kind}: {message}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
