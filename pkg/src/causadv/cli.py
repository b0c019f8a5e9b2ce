"""Command-line workflow: gen-data, train, attack, ci, protos, detect, explain, report.

Stages communicate only through files in the output directory:

    weights.cadv            trained model (binary weight format)
    attacks/<name>/         adversarial tensors + manifest.json
    ci/clean/, ci/<name>/   per-image CI CSVs + sidecars
    registry.json           per-class prototype CI registry
    verdicts/<pop>.jsonl    per-strategy decisions
    reports/                CSV + aligned-text tables, histogram bins

Every stochastic component derives its seed from the single --seed flag
via fixed offsets, so reruns are bit-identical.
"""

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import attacks, causal, datasets, detectors, heatmap, model, prototypes, reporting, synth

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# seed offsets per pipeline stage
SEED_TRAIN = 1
SEED_EVALSET = 2
SEED_ATTACK = 3


class MissingArtifact(RuntimeError):
    def __init__(self, path, needed_command):
        super().__init__(f"missing artifact {path}; run '{needed_command}' first")


def _safe_id(image_id):
    return image_id.replace(":", "_").replace("/", "_")


def _load_split(data_dir, split):
    img = os.path.join(data_dir, f"{split}-images-idx3-ubyte")
    lbl = os.path.join(data_dir, f"{split}-labels-idx1-ubyte")
    for p in (img, lbl):
        if not os.path.exists(p):
            raise MissingArtifact(p, "gen-data (or point --data-dir at MNIST IDX files)")
    return datasets.load_mnist(img, lbl)


def _load_model(args):
    path = args.weights or os.path.join(args.out, "weights.cadv")
    if not os.path.exists(path):
        raise MissingArtifact(path, "train")
    spec, weights = model.load_weights(path)
    return spec, weights, model.weights_digest(weights)


def _eval_set(args, classes=10):
    test = _load_split(args.data_dir, "t10k")
    return datasets.build_eval_set(test, classes=classes, per_class=args.per_class,
                                   seed=args.seed + SEED_EVALSET)


def cmd_gen_data(args):
    paths = synth.write_corpus(args.data_dir, train_per_class=args.train_per_class,
                               test_per_class=args.test_per_class, seed=args.seed)
    print(f"wrote synthetic digit corpus to {args.data_dir}: "
          f"{args.train_per_class * 10} train / {args.test_per_class * 10} test images")
    return EXIT_OK


def cmd_train(args):
    train_set = _load_split(args.data_dir, "train")
    test_set = _load_split(args.data_dir, "t10k")
    spec = model.build_desknet(10, tuple(train_set[0].pixels.shape))
    cfg = model.TrainConfig(lr=args.lr, momentum=0.9, epochs=args.epochs,
                            batch=args.batch, seed=args.seed + SEED_TRAIN,
                            weight_decay=args.weight_decay, lr_decay=args.lr_decay,
                            label_smoothing=args.label_smoothing)
    weights = model.train(spec, train_set, cfg, verbose=args.verbose)
    os.makedirs(args.out, exist_ok=True)
    wpath = args.weights or os.path.join(args.out, "weights.cadv")
    model.save_weights(spec, weights, wpath)
    acc = model.accuracy(spec, weights, test_set)
    summary = {"test_accuracy": acc, "train_size": len(train_set), "epochs": args.epochs,
               "lr": args.lr, "batch": args.batch, "seed": args.seed,
               "weight_decay": args.weight_decay, "lr_decay": args.lr_decay,
               "label_smoothing": args.label_smoothing,
               "model_id": model.weights_digest(weights)}
    with open(os.path.join(args.out, "train_summary.json.tmp"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(os.path.join(args.out, "train_summary.json.tmp"),
               os.path.join(args.out, "train_summary.json"))
    print(f"trained weights -> {wpath}; test accuracy {acc:.4f}")
    return EXIT_OK


def _attack_name(args):
    return f"{args.attack}_{'targeted' if args.targeted else 'untargeted'}"


def cmd_attack(args):
    spec, weights, _ = _load_model(args)
    eval_set = _eval_set(args)
    cfg = attacks.AttackConfig(kind=args.attack, epsilon=args.eps, step_alpha=args.alpha,
                               iterations=args.iters, targeted=args.targeted,
                               random_start=(args.attack == "pgd"),
                               seed=args.seed + SEED_ATTACK)
    samples, summary = attacks.forge_set(spec, weights, eval_set, cfg)
    out_dir = os.path.join(args.out, "attacks", _attack_name(args))
    attacks.save_adversarial_set(samples, summary, out_dir)
    print(f"{_attack_name(args)}: success rate {summary['success_rate']:.2%} "
          f"({summary['successes']}/{summary['correctly_classified']}) -> {out_dir}")
    return EXIT_OK


def _write_ci_dir(spec, weights, model_id, items, out_dir, tau_zero):
    os.makedirs(out_dir, exist_ok=True)
    for image_id, pixels in items:
        ci = causal.compute_ci_cached(spec, weights, pixels, model_id=model_id,
                                      image_id=image_id)
        causal.ci_to_csv(ci, os.path.join(out_dir, _safe_id(image_id) + ".csv"),
                         tau_zero=tau_zero)


def cmd_ci(args):
    spec, weights, model_id = _load_model(args)
    eval_set = _eval_set(args)
    clean_items = [(img.id, img.pixels) for img in eval_set.all()]
    _write_ci_dir(spec, weights, model_id, clean_items,
                  os.path.join(args.out, "ci", "clean"), args.tau_zero)
    n_adv = 0
    for adv_dir in sorted(glob.glob(os.path.join(args.out, "attacks", "*"))):
        manifest, tensors_by_id = attacks.load_adversarial_set(adv_dir)
        items = [(e["id"], tensors_by_id[e["id"]]) for e in manifest["samples"] if e["success"]]
        name = os.path.basename(adv_dir)
        _write_ci_dir(spec, weights, model_id, items,
                      os.path.join(args.out, "ci", name), args.tau_zero)
        n_adv += len(items)
    print(f"CI CSVs written for {len(clean_items)} clean and {n_adv} adversarial samples")
    return EXIT_OK


def cmd_protos(args):
    spec, weights, model_id = _load_model(args)
    train_set = _load_split(args.data_dir, "train")
    registry = prototypes.build_registry(spec, weights, train_set, classes=10,
                                         model_id=model_id, tau_zero=args.tau_zero)
    path = os.path.join(args.out, "registry.json")
    prototypes.save_registry(registry, path)
    print(f"registry with {len(registry.prototypes)} prototypes -> {path}")
    return EXIT_OK


def _load_ci_dir(path):
    out = []
    for csv_path in sorted(glob.glob(os.path.join(path, "*.csv"))):
        out.append(causal.ci_from_csv(csv_path))
    return out


def _load_registry(args):
    path = os.path.join(args.out, "registry.json")
    if not os.path.exists(path):
        raise MissingArtifact(path, "protos")
    return prototypes.load_registry(path)


def _detector_config(args):
    if args.strategy_config:
        with open(args.strategy_config) as fh:
            doc = json.load(fh)
        if "strategy2_mode" in doc:
            doc["strategy2_mode"] = tuple(doc["strategy2_mode"])
        return detectors.DetectorConfig(**doc)
    return detectors.DetectorConfig(tau_zero=args.tau_zero)


def _ci_populations(args):
    clean_dir = os.path.join(args.out, "ci", "clean")
    if not os.path.isdir(clean_dir):
        raise MissingArtifact(clean_dir, "ci")
    clean = _load_ci_dir(clean_dir)
    adv = {}
    for path in sorted(glob.glob(os.path.join(args.out, "ci", "*"))):
        name = os.path.basename(path)
        if name != "clean" and os.path.isdir(path):
            adv[name] = _load_ci_dir(path)
    return clean, adv


def cmd_detect(args):
    registry = _load_registry(args)
    config = _detector_config(args)
    clean_cis, adv_cis = _ci_populations(args)
    verdict_dir = os.path.join(args.out, "verdicts")
    os.makedirs(verdict_dir, exist_ok=True)
    clean_verdicts = [v for ci in clean_cis for v in detectors.run_all(ci, registry, config)]
    detectors.verdicts_to_jsonl(clean_verdicts, os.path.join(verdict_dir, "clean.jsonl"))
    populations = []
    for name, cis in sorted(adv_cis.items()):
        adv_verdicts = [v for ci in cis for v in detectors.run_all(ci, registry, config)]
        detectors.verdicts_to_jsonl(adv_verdicts, os.path.join(verdict_dir, f"{name}.jsonl"))
        populations.append((name, detectors.evaluate(clean_verdicts, adv_verdicts)))
    reporting.write_reports(os.path.join(args.out, "reports"), populations,
                            clean_cis, adv_cis, registry, config.tau_zero)
    for name, report in populations:
        for s, row in report.strategies.items():
            print(f"{name:24s} {s:16s} tpr={row.tpr:.2f} fpr={row.fpr:.2f}")
    return EXIT_OK


def cmd_explain(args):
    spec, weights, model_id = _load_model(args)
    registry = _load_registry(args)
    eval_set = _eval_set(args)
    by_id = {img.id: img for img in eval_set.all()}
    wanted = args.ids.split(",") if args.ids else list(by_id)[:4]
    out_dir = os.path.join(args.out, "heatmaps")
    os.makedirs(out_dir, exist_ok=True)
    for image_id in wanted:
        if image_id not in by_id:
            raise RuntimeError(f"id {image_id!r} not in the evaluation set")
        img = by_id[image_id]
        pred = model.forward(spec, weights, img.pixels)
        proto = registry.get(pred.label, model_id=model_id)
        hm = heatmap.causal_heatmap(spec, weights, img.pixels, proto.ci, args.top_n,
                                    image_id=image_id)
        path = os.path.join(out_dir, _safe_id(image_id) + ".ppm")
        heatmap.export_ppm(path, hm, image=img.pixels)
        print(f"heatmap (class {pred.label}) -> {path}")
    return EXIT_OK


def cmd_report(args):
    registry = _load_registry(args)
    config = _detector_config(args)
    clean_cis, adv_cis = _ci_populations(args)
    verdict_dir = os.path.join(args.out, "verdicts")
    clean_path = os.path.join(verdict_dir, "clean.jsonl")
    if not os.path.exists(clean_path):
        raise MissingArtifact(clean_path, "detect")
    clean_verdicts = detectors.verdicts_from_jsonl(clean_path)
    populations = []
    for path in sorted(glob.glob(os.path.join(verdict_dir, "*.jsonl"))):
        name = os.path.splitext(os.path.basename(path))[0]
        if name == "clean":
            continue
        adv_verdicts = detectors.verdicts_from_jsonl(path)
        populations.append((name, detectors.evaluate(clean_verdicts, adv_verdicts)))
    reporting.write_reports(os.path.join(args.out, "reports"), populations,
                            clean_cis, adv_cis, registry, config.tau_zero)
    with open(os.path.join(args.out, "reports", "report.txt")) as fh:
        print(fh.read(), end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="causadv",
                                description="counterfactual-information adversarial detection")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, weights=True, out=True):
        if data:
            sp.add_argument("--data-dir", required=True)
        if weights:
            sp.add_argument("--weights", default=None)
        if out:
            sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=7)
        sp.add_argument("--tau-zero", type=float, default=causal.DEFAULT_TAU_ZERO)
        sp.add_argument("--per-class", type=int, default=10)

    sp = sub.add_parser("gen-data", help="write a synthetic digit corpus in MNIST IDX format")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--train-per-class", type=int, default=500)
    sp.add_argument("--test-per-class", type=int, default=100)
    sp.add_argument("--seed", type=int, default=7)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train DeskNet on the train split")
    common(sp)
    sp.add_argument("--epochs", type=int, default=16)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--weight-decay", type=float, default=2e-3)
    sp.add_argument("--lr-decay", type=float, default=0.85)
    sp.add_argument("--label-smoothing", type=float, default=0.0)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="forge an adversarial set against the eval samples")
    common(sp)
    sp.add_argument("--attack", choices=["fgsm", "bim", "pgd"], required=True)
    sp.add_argument("--eps", type=float, default=0.2)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--iters", type=int, default=None)
    sp.add_argument("--targeted", action="store_true")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("ci", help="compute CI CSVs for clean and adversarial samples")
    common(sp)
    sp.set_defaults(func=cmd_ci)

    sp = sub.add_parser("protos", help="build the per-class prototype registry")
    common(sp)
    sp.set_defaults(func=cmd_protos)

    sp = sub.add_parser("detect", help="run all four strategies and write verdicts + reports")
    common(sp, data=False, weights=False)
    sp.add_argument("--strategy-config", default=None)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("explain", help="emit causal heatmap PPMs for chosen image ids")
    common(sp)
    sp.add_argument("--ids", default=None, help="comma-separated image ids")
    sp.add_argument("--top-n", type=int, default=10)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("report", help="re-render tables from stored verdicts")
    common(sp, data=False, weights=False)
    sp.add_argument("--strategy-config", default=None)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MissingArtifact, Exception) as exc:  # noqa: BLE001 - CLI boundary
        if isinstance(exc, SystemExit):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
