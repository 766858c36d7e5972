"""Command-line entry point: ``ssfl {phantom,select,embed,train,predict,eval}``.

Results go to stdout as line-delimited JSON; diagnostics go to stderr.
Exit status is 0 on success and 2 on any input or processing failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from functools import partial

import numpy as np

from . import config as cfgmod
from .errors import SsflError, UnlabeledVolume
from .metrics import aggregate_runs, confusion, report
from .net import load_checkpoint, predict, predict_proba, save_checkpoint, train
from .phantom import generate_dataset, scaled_spec
from .pipeline import embed_selected, parallel_map, select_volume
from .preprocess import dump_stages, preprocess_volume
from .volume_io import (
    load_manifest,
    load_volume,
    manifest_to_dict,
    read_embeddings,
    write_embeddings,
    write_slice,
)


class CliError(Exception):
    """Failure reported on stderr with exit status 2."""


def _emit(doc, out=None):
    out = sys.stdout if out is None else out
    out.write(json.dumps(doc) + "\n")


def _diag(msg):
    sys.stderr.write(f"ssfl: {msg}\n")


def _open_volume(path):
    try:
        return load_volume(load_manifest(path))
    except (SsflError, OSError) as exc:
        raise CliError(str(exc)) from exc


# --------------------------------------------------------------------------
# input resolution for train / predict / eval

def _read_index(path):
    base = os.path.dirname(os.path.abspath(path))
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                emb_path = doc["path"]
                vid = doc["id"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CliError(f"{path}:{ln}: bad index entry ({exc})") from exc
            if not os.path.isabs(emb_path):
                emb_path = os.path.join(base, emb_path)
            items.append((vid, doc.get("label"), read_embeddings(emb_path)))
    return items


def _embed_manifest(path, cfg):
    vol = _open_volume(path)
    try:
        _, emb = embed_selected(vol, cfg.preprocess, cfg.n_c, cfg.embed)
    except SsflError as exc:
        raise CliError(f"volume {vol.id}: {exc}") from exc
    return vol.id, vol.label, emb


def load_inputs(paths, cfg):
    """Resolve manifests (.json), embedding indexes (.jsonl) and .emb files to (id, label, matrix)."""
    items = []
    manifests = []
    for p in paths:
        try:
            if p.endswith(".jsonl"):
                items.extend(_read_index(p))
            elif p.endswith(".emb"):
                items.append((os.path.splitext(os.path.basename(p))[0], None, read_embeddings(p)))
            else:
                manifests.append((len(items), p))
                items.append(None)
        except (SsflError, OSError) as exc:
            raise CliError(f"{p}: {exc}") from exc
    embedded = parallel_map(partial(_embed_manifest, cfg=cfg), [p for _, p in manifests], cfg.parallel)
    for (slot, _), item in zip(manifests, embedded):
        items[slot] = item
    return items


def _require_labels(items, what):
    missing = [vid for vid, lbl, _ in items if lbl not in (0, 1)]
    if missing:
        raise UnlabeledVolume(f"{what} needs labels; unlabeled: {', '.join(missing[:5])}")


# --------------------------------------------------------------------------
# subcommands

def cmd_phantom(args, cfg):
    spec = scaled_spec(args.size, args.slices)
    os.makedirs(os.path.join(args.out, "truth"), exist_ok=True)
    for vol, truth in generate_dataset(args.n_per_class, spec, seed=cfg.net.seed, prefix=args.prefix):
        vdir = os.path.join(args.out, vol.id)
        os.makedirs(vdir, exist_ok=True)
        rel = []
        for i, img in enumerate(vol.slices):
            name = os.path.join(vol.id, f"{i:04d}.png")
            write_slice(os.path.join(args.out, name), img, bit_depth=16)
            rel.append(name)
        manifest = manifest_to_dict(replace(vol.manifest, slice_paths=tuple(rel)))
        mpath = os.path.join(args.out, f"{vol.id}.json")
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)
        with open(os.path.join(args.out, "truth", f"{vol.id}.json"), "w", encoding="utf-8") as fh:
            json.dump({"id": vol.id, "label": truth.label,
                       "lung_counts": list(truth.lung_counts),
                       "hole_counts": truth.hole_counts(cfg.preprocess.k)}, fh)
        _emit({"id": vol.id, "label": truth.label, "manifest": mpath, "n_slices": len(vol)})


def _select_one(path, cfg, dump_dir):
    vol = _open_volume(path)
    try:
        sel = select_volume(vol, cfg.preprocess, cfg.n_c)
        if dump_dir:
            for i, (img, res) in enumerate(zip(vol.slices, preprocess_volume(vol.slices, cfg.preprocess))):
                dump_stages(dump_dir, vol.id, i, img, res)
    except SsflError as exc:
        raise CliError(f"volume {vol.id}: {exc}") from exc
    return sel.as_dict()


def cmd_select(args, cfg):
    fn = partial(_select_one, cfg=cfg, dump_dir=args.dump_stages)
    for doc in parallel_map(fn, args.inputs, cfg.parallel):
        _emit(doc)


def cmd_embed(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    results = parallel_map(partial(_embed_manifest, cfg=cfg), args.inputs, cfg.parallel)
    index = []
    for vid, label, emb in results:
        path = os.path.join(args.out, f"{vid}.emb")
        write_embeddings(emb, path)
        doc = {"id": vid, "label": label, "path": os.path.basename(path), "n_slices": int(emb.shape[0])}
        index.append(doc)
        _emit(doc)
    if args.index:
        with open(os.path.join(args.out, args.index), "w", encoding="utf-8") as fh:
            for doc in index:
                _emit(doc, fh)


def _train_run(run, data, val, net_cfg, out_dir):
    log_path = os.path.join(out_dir, f"run_{run:02d}.log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        def on_epoch(epoch, loss, metrics):
            _emit({"run": run, "epoch": epoch, "loss": loss, "val": metrics}, log)
        state, history = train(data, net_cfg, validation=val, on_epoch=on_epoch)
    ckpt = os.path.join(out_dir, f"run_{run:02d}.ckpt")
    save_checkpoint(state, ckpt)
    return {"run": run, "seed": net_cfg.seed, "checkpoint": os.path.basename(ckpt), "epochs": len(history),
            "final_loss": history.loss[-1] if history.loss else None}


def _train_run_star(job):
    return _train_run(*job)


def cmd_train(args, cfg):
    items = load_inputs(args.inputs, cfg)
    _require_labels(items, "train")
    data = [(m, lbl) for _, lbl, m in items]
    val = None
    if args.val:
        vitems = load_inputs(args.val, cfg)
        _require_labels(vitems, "validation")
        val = [(m, lbl) for _, lbl, m in vitems]
    net = replace(cfg.net, in_dim=int(data[0][0].shape[1]))
    os.makedirs(args.out, exist_ok=True)
    jobs = []
    for run in range(cfg.n_runs):
        seed = net.seed if args.same_seed else net.seed + run
        jobs.append((run, data, val, replace(net, seed=seed), args.out))
    for doc in parallel_map(_train_run_star, jobs, cfg.parallel):
        _emit(doc)


def _load_models(paths, cfg, threshold_flag):
    states = []
    for p in paths:
        try:
            st = load_checkpoint(p)
        except (SsflError, OSError) as exc:
            raise CliError(f"{p}: {exc}") from exc
        if threshold_flag is not None:
            st = replace(st, config=replace(st.config, threshold=threshold_flag))
        states.append(st)
    return states


def cmd_predict(args, cfg):
    states = _load_models(args.model, cfg, args.threshold)
    for vid, _, m in load_inputs(args.inputs, cfg):
        prob = float(np.mean([predict_proba(st, m) for st in states]))
        _emit({"id": vid, "prob": prob, "class": int(prob >= states[0].config.threshold)})


def cmd_eval(args, cfg):
    states = _load_models(args.model, cfg, args.threshold)
    items = load_inputs(args.inputs, cfg)
    _require_labels(items, "eval")
    labels = [lbl for _, lbl, _ in items]
    if args.average == "probs":
        probs = np.mean([[predict_proba(st, m) for _, _, m in items] for st in states], axis=0)
        thr = states[0].config.threshold
        agg = aggregate_runs([report(confusion([int(p >= thr) for p in probs], labels))])
    else:
        reports = [report(confusion([predict(st, m)[1] for _, _, m in items], labels))
                   for st in states]
        agg = aggregate_runs(reports)
    mean = agg.mean.as_dict()
    _emit({
        "se": mean["sensitivity"], "sp": mean["specificity"], "macro_f1": mean["macro_f1"],
        "runs": len(states), "average": args.average, "n_volumes": len(items),
        "mean": mean, "std": agg.std.as_dict(), "defined_runs": agg.counts,
    })


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: preprocess, select, embed, net, pipeline)")
    common.add_argument("--seed", type=int, help="random seed (training, phantom generation)")
    common.add_argument("--n-c", type=int, dest="n_c",
                        help="max index span e - s of the selected window (at most n_c + 1 slices)")
    common.add_argument("--threshold", type=float, help="decision threshold on the probability")
    common.add_argument("--runs", type=int, help="number of seeded training runs")
    common.add_argument("--parallel", type=int, help="worker processes for per-volume work")
    common.add_argument("--epochs", type=int, help="training epochs per run")

    parser = argparse.ArgumentParser(prog="ssfl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write synthetic phantom volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=5, dest="n_per_class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--slices", type=int, default=24)
    p.add_argument("--prefix", default="phantom")

    p = sub.add_parser("select", parents=[common], help="score slices and pick the window")
    p.add_argument("inputs", nargs="+", metavar="MANIFEST")
    p.add_argument("--dump-stages", nargs="?", const="stages", default=None, metavar="DIR",
                   help="write per-stage PNGs (default directory: ./stages)")

    p = sub.add_parser("embed", parents=[common], help="embed the selected slices of each volume")
    p.add_argument("inputs", nargs="+", metavar="MANIFEST")
    p.add_argument("--out", required=True)
    p.add_argument("--index", default="index.jsonl", help="index file written inside --out")

    p = sub.add_parser("train", parents=[common], help="train n seeded runs")
    p.add_argument("inputs", nargs="+", metavar="INPUT")
    p.add_argument("--out", required=True)
    p.add_argument("--val", nargs="+", metavar="INPUT")
    p.add_argument("--same-seed", action="store_true", help="use the same seed for every run")

    for name, helptext in (("predict", "per-volume probability and class"),
                           ("eval", "metric report averaged over runs")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("inputs", nargs="+", metavar="INPUT")
        p.add_argument("--model", nargs="+", required=True, metavar="CKPT")
        if name == "eval":
            p.add_argument("--average", choices=("metrics", "probs"), default="metrics")
    return parser


COMMANDS = {"phantom": cmd_phantom, "select": cmd_select, "embed": cmd_embed,
            "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config) if args.config else cfgmod.PipelineConfig()
        cfg = cfgmod.with_overrides(cfg, seed=args.seed, n_c=args.n_c, threshold=args.threshold,
                                    runs=args.runs, parallel=args.parallel, epochs=args.epochs)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        _diag(str(exc))
        return 2
    except (SsflError, OSError, ValueError) as exc:
        _diag(f"{type(exc).__name__}: {exc}")
        return 2
    sys.stdout.flush()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
