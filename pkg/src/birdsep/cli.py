"""Command-line entry points."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .activity import select_windows
from .audio import read_wav, write_wav
from .classifier import ClassifierEnsemble, load_clips, train_classifier
from .combine import CombineMode, evaluate_dataset, label_matrix, load_windows, separate_classify
from .config import load_config
from .labels import DatasetError, ManifestRecord, Taxonomy, read_manifest, read_path_list, write_manifest
from .metrics import EvalMatrix, evaluate, momi
from .mixit import build_mom_examples, separate_moms, train_separator
from .separator import Separator
from .synth import build_synth_dataset

logger = logging.getLogger("birdsep")


def _read_records(path) -> list[ManifestRecord]:
    """A labeled JSON-lines manifest, or a plain list of paths (no labels)."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return read_manifest(path)
    return [ManifestRecord(p) for p in read_path_list(path)]


def _write_report(report, path, table=None) -> None:
    Path(path).write_text(report.to_json())
    if table:
        Path(table).write_text(report.per_class_table())


def cmd_make_synth(args):
    cfg = load_config(args.config).synth
    if args.seed is not None:
        cfg.seed = args.seed
    ds = build_synth_dataset(cfg, args.out)
    print(f"wrote {len(ds.train)} training clips, {len(ds.eval)} eval segments, "
          f"{len(ds.mom_pairs)} MoM pairs to {ds.root}")


def cmd_select_windows(args):
    cfg = load_config(args.config)
    inputs = [ManifestRecord(p) for p in args.inputs] if args.inputs else _read_records(args.data)
    out_path = Path(args.out)
    extract = Path(args.extract) if args.extract else None
    if extract:
        extract.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in inputs:
        audio = read_wav(rec.path)
        for k, w in enumerate(select_windows(audio, args.max_windows, cfg.activity, cfg.classifier.frontend)):
            row = {"path": rec.path, "start_s": w.start_s, "duration_s": w.duration_s,
                   "peak_energy": w.peak_energy, "foreground": list(rec.foreground),
                   "background": list(rec.background)}
            if extract:
                start = int(round(w.start_s * audio.sample_rate_hz))
                n = min(int(round(w.duration_s * audio.sample_rate_hz)), len(audio) - start)
                clip_path = extract / f"{Path(rec.path).stem}_w{k}.wav"
                write_wav(clip_path, audio.crop(start, n))
                row["window_path"] = str(clip_path)
            rows.append(row)
    with open(out_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if extract:
        write_manifest(extract / "windows.jsonl",
                       [ManifestRecord(r["window_path"], tuple(r["foreground"]), tuple(r["background"])) for r in rows])
    print(f"{len(rows)} windows from {len(inputs)} recordings")


def cmd_train_separator(args):
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.separator_train.steps = args.steps
    recordings = [read_wav(r.path) for r in _read_records(args.data)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, history = train_separator(recordings, cfg.separator, cfg.separator_train, out, out / "train_log.jsonl")
    print(f"trained {len(history)} steps; final loss {history[-1]['loss']:.4f}; checkpoint {out / 'final.ckpt'}")


def cmd_separate(args):
    model = Separator.load(args.separator)
    out_dir = Path(args.out_dir) if args.out_dir else None
    for path in args.inputs:
        path = Path(path)
        sources = model.separate(read_wav(path))
        dest = (out_dir or path.parent)
        dest.mkdir(parents=True, exist_ok=True)
        for k, s in enumerate(sources.sources):
            write_wav(dest / f"{path.stem}_src{k}.wav", s)
        print(f"{path}: {len(sources)} sources")


def cmd_eval_momi(args):
    model = Separator.load(args.separator)
    base = Path(args.pairs).parent
    pairs = []
    for line in Path(args.pairs).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            pairs.append(tuple(read_wav(p if Path(p).is_absolute() else base / p) for p in (d["x1"], d["x2"])))
    examples = build_mom_examples(pairs)
    score = momi(examples, separate_moms(model, examples))
    Path(args.report).write_text(json.dumps({"momi_db": score, "n_examples": len(examples)},
                                            indent=2, sort_keys=True) + "\n")
    print(f"MoMi {score:.3f} dB over {len(examples)} examples")


def cmd_train_classifier(args):
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.classifier_train.steps = args.steps
    if args.n_models is not None:
        cfg.classifier_train.n_models = args.n_models
    targets = None
    if args.targets:
        targets = [t.strip() for t in Path(args.targets).read_text().splitlines() if t.strip()]
    taxonomy = Taxonomy.read(args.taxonomy, targets)
    clips = load_clips(_read_records(args.data), taxonomy)
    noise = [read_wav(p) for p in read_path_list(args.noise)] if args.noise else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ens, curves = train_classifier(clips, noise, taxonomy, cfg.classifier, cfg.classifier_train, out,
                                   out / "train_log.jsonl")
    for i, c in enumerate(curves):
        print(f"model {i}: final loss {c[-1]:.4f} -> {out / f'classifier_{i}.ckpt'}")


def _load_separator(args, mode):
    if mode is CombineMode.MixOnly:
        return None
    if not args.separator:
        raise ValueError(f"--separator is required for mode {mode.value}")
    return Separator.load(args.separator)


def cmd_infer(args):
    mode = CombineMode.parse(args.mode)
    ensemble = ClassifierEnsemble.load(args.classifiers)
    separator = _load_separator(args, mode)
    records = [ManifestRecord(p) for p in args.inputs] if args.inputs else _read_records(args.data)
    windows = load_windows(records)
    with open(args.out, "w") as fh:
        for rec, w in zip(records, windows):
            p = separate_classify(w, separator, ensemble, mode)
            fh.write(json.dumps({"path": rec.path, "scores": dict(zip(ensemble.species_names, p.tolist()))},
                                sort_keys=True) + "\n")
    print(f"wrote predictions for {len(records)} windows to {args.out}")


def read_predictions(path) -> dict[str, dict[str, float]]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            d = json.loads(line)
            out[d["path"]] = d["scores"]
    return out


def cmd_evaluate(args):
    preds = read_predictions(args.predictions)
    records = _read_records(args.labels)
    missing = [r.path for r in records if r.path not in preds]
    if missing:
        raise DatasetError(f"no prediction for: {', '.join(missing)}")
    species = tuple(preds[records[0].path])
    scores = np.array([[preds[r.path][s] for s in species] for r in records])
    report = evaluate(EvalMatrix(scores, label_matrix(records, species), species), args.min_count)
    _write_report(report, args.report, args.table)
    print(f"CMAP {report.cmap:.4f} lwlrap {report.lwlrap:.4f} d' {report.d_prime:.4f} top-1 {report.top1:.4f}")


def cmd_combine_eval(args):
    mode = CombineMode.parse(args.mode)
    ensemble = ClassifierEnsemble.load(args.classifiers)
    separator = _load_separator(args, mode)
    report = evaluate_dataset(_read_records(args.data), separator, ensemble, mode, args.min_count)
    _write_report(report, args.report, args.table)
    print(f"[{mode.value}] CMAP {report.cmap:.4f} lwlrap {report.lwlrap:.4f} "
          f"d' {report.d_prime:.4f} top-1 {report.top1:.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="birdsep", description="Bird audio separation and classification toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synth", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_make_synth)

    s = sub.add_parser("select-windows", help="pick high-energy windows from recordings")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="manifest (.jsonl) or path list")
    src.add_argument("--inputs", nargs="+", help="WAV files")
    s.add_argument("--out", required=True, help="window manifest to write")
    s.add_argument("--max-windows", type=int)
    s.add_argument("--extract", help="directory for window WAVs and a labeled manifest")
    s.add_argument("--config")
    s.set_defaults(func=cmd_select_windows)

    s = sub.add_parser("train-separator", help="train a separator with MixIT")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_separator)

    s = sub.add_parser("separate", help="write the separated sources of WAV files")
    s.add_argument("--separator", required=True)
    s.add_argument("--out-dir")
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("eval-momi", help="MoMi of a separator on reference pairs")
    s.add_argument("--separator", required=True)
    s.add_argument("--pairs", required=True, help='JSON lines with "x1" and "x2" paths')
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval_momi)

    s = sub.add_parser("train-classifier", help="train the classifier ensemble")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--taxonomy", required=True)
    s.add_argument("--targets", help="species codes the species head predicts, one per line")
    s.add_argument("--noise", help="noise pool path list")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--n-models", type=int)
    s.set_defaults(func=cmd_train_classifier)

    for name, func, helptext in (("infer", cmd_infer, "write per-window species probabilities"),
                                 ("combine-eval", cmd_combine_eval, "evaluate a labeled manifest")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--classifiers", nargs="+", required=True)
        s.add_argument("--separator")
        s.add_argument("--mode", default="mix", choices=[m.value for m in CombineMode])
        s.set_defaults(func=func)
        if name == "infer":
            src = s.add_mutually_exclusive_group(required=True)
            src.add_argument("--data")
            src.add_argument("--inputs", nargs="+")
            s.add_argument("--out", required=True)
        else:
            s.add_argument("--data", required=True)
            s.add_argument("--report", required=True)
            s.add_argument("--table")
            s.add_argument("--min-count", type=int, default=5)

    s = sub.add_parser("evaluate", help="score a predictions file against labels")
    s.add_argument("--predictions", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--table")
    s.add_argument("--min-count", type=int, default=5)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
