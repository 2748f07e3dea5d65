"""Command-line harness.

Subcommands:
    gen-data          write the synthetic corpus (PGM pairs + manifest)
    train             supervised baseline on the source domains
    adapt             mean-teacher adaptation toward an unlabeled domain
    ablate            adaptation machinery with consistency weight zero
    sweep             consistency loss x weight grid with a stability report
    evaluate          per-domain metrics for a saved checkpoint
    export-features   256-d logit features per slice as TSV

Every run directory gets the effective config, an epoch log, final and
best-validation checkpoints, and a per-domain evaluation CSV.  Outputs
are byte-identical across reruns with the same config and seed.
"""

import argparse
import csv
import os
import sys
from dataclasses import replace

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (CONSISTENCY_CHOICES, ConfigError, ExperimentConfig,
                     load_config, save_config)
from .data import (DataError, PgmError, generate_corpus, load_corpus,
                   make_split, save_corpus)
from .rng import derive_key
from .trainer import (EPOCH_LOG_COLUMNS, effective_config, evaluate_params,
                      train_loop)
from .unet import export_features

METRIC_FIELDS = ("dice", "miou", "recall", "precision", "specificity", "hausdorff")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _build_config(args, mode):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"mode": mode}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "consistency_loss", None):
        overrides["consistency_loss"] = args.consistency_loss
    if getattr(args, "consistency_weight", None) is not None:
        overrides["gamma_max"] = args.consistency_weight
    if getattr(args, "threshold", None) is not None:
        overrides["threshold_tau"] = args.threshold
    if getattr(args, "adaptation_domain", None) is not None:
        overrides["adaptation_domain"] = args.adaptation_domain
    if getattr(args, "repeats", None) is not None:
        overrides["repeats"] = args.repeats
    return replace(cfg, **overrides)


def _load_split(args):
    manifest = os.path.join(args.data_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.csv under {args.data_dir}")
    corpus = load_corpus(manifest)
    return corpus, make_split(corpus)


def _domain_eval_sets(corpus, split):
    """Labeled evaluation slices per domain; domain 4 is its test half."""
    return {1: corpus[1], 2: corpus[2], 3: split.validation, 4: split.test}


def _adaptation_label(cfg):
    if cfg.mode == "baseline":
        return "baseline"
    return f"adapt_d{cfg.adaptation_domain}"


def _eval_rows(student, teacher, corpus, split, cfg):
    label = _adaptation_label(cfg)
    tau = cfg.resolved_threshold()
    rows = []
    for domain_id, samples in sorted(_domain_eval_sets(corpus, split).items()):
        for model_name, params in (("student", student), ("teacher", teacher)):
            rec = evaluate_params(params, samples, tau, cfg.eval_batch)
            row = {"evaluation_domain": domain_id, "adaptation": label,
                   "model": model_name, "threshold": tau,
                   "n_slices": rec.n_slices,
                   "n_hausdorff_degenerate": rec.n_hausdorff_degenerate}
            for f in METRIC_FIELDS:
                row[f] = getattr(rec, f)
            rows.append(row)
    return rows


EVAL_COLUMNS = ("evaluation_domain", "adaptation", "model", "threshold",
                *METRIC_FIELDS, "n_slices", "n_hausdorff_degenerate")


def _write_run_outputs(run_dir, result, corpus, split):
    os.makedirs(run_dir, exist_ok=True)
    cfg = result.effective_config
    save_config(cfg, os.path.join(run_dir, "config_used.cfg"))
    _write_csv(os.path.join(run_dir, "epoch_log.csv"), EPOCH_LOG_COLUMNS, result.log_rows)
    state = result.state
    save_checkpoint(os.path.join(run_dir, "checkpoint_final.bin"),
                    state.student, state.teacher, state.adam,
                    state.epoch, state.global_step, cfg)
    save_checkpoint(os.path.join(run_dir, "checkpoint_best.bin"),
                    result.best_student, result.best_teacher, result.best_adam,
                    result.best_epoch, result.best_global_step, cfg)
    rows = _eval_rows(state.student, state.teacher, corpus, split, cfg)
    _write_csv(os.path.join(run_dir, "eval.csv"), EVAL_COLUMNS, rows)
    return rows


def _run_training(args, mode):
    cfg = _build_config(args, mode)
    corpus, split = _load_split(args)
    os.makedirs(args.out_dir, exist_ok=True)
    summaries = []
    for k in range(cfg.repeats):
        run_cfg = replace(cfg, seed=cfg.seed + k, repeats=1)
        run_dir = args.out_dir if cfg.repeats == 1 else os.path.join(
            args.out_dir, f"seed{run_cfg.seed}")
        result = train_loop(split, run_cfg)
        rows = _write_run_outputs(run_dir, result, corpus, split)
        last = result.log_rows[-1]
        status = "diverged" if result.diverged else "ok"
        print(f"[{mode}] seed={run_cfg.seed} epochs={len(result.log_rows)} "
              f"status={status} val_dice={last['val_dice']:.2f} "
              f"best_val_dice={result.best_val_dice:.2f} -> {run_dir}")
        summaries.append((run_cfg.seed, result, rows))
    return summaries


def cmd_gen_data(args):
    cfg = _build_config(args, "baseline")
    corpus = generate_corpus(cfg.seed, n_subjects=cfg.subjects_per_domain,
                             slices_per_subject=cfg.slices_per_subject,
                             size=cfg.image_size)
    manifest = save_corpus(corpus, args.out_dir)
    n = sum(len(v) for v in corpus.values())
    print(f"[gen-data] seed={cfg.seed} slices={n} -> {manifest}")
    return 0


def cmd_train(args):
    _run_training(args, "baseline")
    return 0


def cmd_adapt(args):
    _run_training(args, "adapt")
    return 0


def cmd_ablate(args):
    _run_training(args, "ablate_ema")
    return 0


SWEEP_COLUMNS = ("loss", "weight", "seed", "diverged", "collapsed", "epochs_run",
                 *[f"final_{m}" for m in METRIC_FIELDS],
                 *[f"best_{m}" for m in METRIC_FIELDS])


def sweep_cell_seed(base_seed, loss, weight):
    return derive_key(base_seed, "sweep", loss, weight) % (2 ** 31)


def _sweep_cell_row(loss, weight, cfg, split, corpus, out_dir):
    cell_cfg = replace(cfg, mode="adapt", consistency_loss=loss, gamma_max=float(weight),
                       seed=sweep_cell_seed(cfg.seed, loss, weight), repeats=1)
    result = train_loop(split, cell_cfg)
    cell_dir = os.path.join(out_dir, "cells", f"{loss}_w{weight:g}")
    _write_run_outputs(cell_dir, result, corpus, split)

    row = {"loss": loss, "weight": float(weight), "seed": cell_cfg.seed,
           "diverged": int(result.diverged), "epochs_run": len(result.log_rows)}
    val = {m: [r[f"val_{m}"] for r in result.log_rows] for m in METRIC_FIELDS}
    for m in METRIC_FIELDS:
        row[f"final_{m}"] = val[m][-1]
        row[f"best_{m}"] = min(val[m]) if m == "hausdorff" else max(val[m])
    row["collapsed"] = int(row["final_dice"] == 0.0)
    return row


def cmd_sweep(args):
    cfg = _build_config(args, "adapt")
    corpus, split = _load_split(args)
    os.makedirs(args.out_dir, exist_ok=True)
    weights = [float(w) for w in args.weights.split(",")]
    losses = [l.strip() for l in args.losses.split(",")]
    for loss in losses:
        if loss not in CONSISTENCY_CHOICES:
            raise ConfigError(f"unknown sweep loss {loss!r}")
    rows = []
    for loss in losses:
        for weight in weights:
            row = _sweep_cell_row(loss, weight, cfg, split, corpus, args.out_dir)
            status = "diverged" if row["diverged"] else (
                "collapsed" if row["collapsed"] else "ok")
            print(f"[sweep] loss={loss} weight={weight:g} status={status} "
                  f"final={row['final_dice']:.2f} best={row['best_dice']:.2f}")
            rows.append(row)
    _write_csv(os.path.join(args.out_dir, "sweep.csv"), SWEEP_COLUMNS, rows)
    return 0


def _consumed_models(args):
    student, teacher, _, _, _, cfg = load_checkpoint(args.checkpoint)
    if args.threshold is not None:
        cfg = replace(cfg, threshold_tau=args.threshold)
    return student, teacher, cfg


def cmd_evaluate(args):
    student, teacher, cfg = _consumed_models(args)
    corpus, split = _load_split(args)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = _eval_rows(student, teacher, corpus, split, cfg)
    _write_csv(os.path.join(args.out_dir, "eval.csv"), EVAL_COLUMNS, rows)
    consumed = "student" if cfg.mode == "baseline" else "teacher"
    for row in rows:
        if row["model"] == consumed:
            print(f"[evaluate] domain={row['evaluation_domain']} model={consumed} "
                  f"dice={row['dice']:.2f} miou={row['miou']:.2f}")
    return 0


def cmd_export_features(args):
    student, teacher, cfg = _consumed_models(args)
    params = student if cfg.mode == "baseline" else teacher
    corpus, _ = _load_split(args)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "features.tsv")
    with open(out_path, "w") as fh:
        header = ["domain_id", "subject_id", "slice_index"] + [f"f{i}" for i in range(256)]
        fh.write("\t".join(header) + "\n")
        for domain_id in sorted(corpus):
            samples = corpus[domain_id]
            for i in range(0, len(samples), cfg.eval_batch):
                chunk = samples[i:i + cfg.eval_batch]
                feats = export_features(params, _as_tensor(chunk))
                for s, vec in zip(chunk, feats):
                    cells = [str(domain_id), str(s.subject_id), str(s.slice_index)]
                    cells.extend(repr(float(v)) for v in vec)
                    fh.write("\t".join(cells) + "\n")
    print(f"[export-features] model={'student' if params is student else 'teacher'} "
          f"-> {out_path}")
    return 0


def _as_tensor(samples):
    from .data import batch_images
    from .tensor import Tensor
    return Tensor(batch_images(samples))


def build_parser():
    parser = argparse.ArgumentParser(prog="mtseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", metavar="PATH", help="config file (key = value lines)")
        p.add_argument("--seed", type=int, metavar="N")
        if data:
            p.add_argument("--data-dir", metavar="PATH", required=True,
                           help="corpus directory containing manifest.csv")
        if out:
            p.add_argument("--out-dir", metavar="PATH", required=True)

    def train_flags(p):
        p.add_argument("--consistency-loss", choices=CONSISTENCY_CHOICES)
        p.add_argument("--consistency-weight", type=float, metavar="R")
        p.add_argument("--threshold", type=float, metavar="R")
        p.add_argument("--adaptation-domain", type=int, choices=(3, 4))
        p.add_argument("--repeats", type=int, metavar="N")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    for name, fn in (("train", cmd_train), ("adapt", cmd_adapt), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        common(p)
        train_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("sweep", help="consistency loss/weight stability grid")
    common(p)
    train_flags(p)
    p.add_argument("--weights", default="5,10,15,20", metavar="W1,W2,...")
    p.add_argument("--losses", default="mse,dice,ce", metavar="L1,L2,...")
    p.set_defaults(func=cmd_sweep)

    for name, fn in (("evaluate", cmd_evaluate), ("export-features", cmd_export_features)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--checkpoint", metavar="PATH", required=True)
        p.add_argument("--threshold", type=float, metavar="R")
        p.set_defaults(func=fn)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, PgmError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
