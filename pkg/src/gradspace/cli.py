"""Command-line interface.

Every subcommand takes ``--seed``, ``--config FILE`` and ``--out DIR``.
Option values resolve as: command-line flag, then the JSON config file, then
the built-in default. Each run writes ``run_record.json`` into ``--out``
with the resolved configuration, where each value came from, the package
version and SHA-256 hashes of the input files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from gradspace import __version__
from gradspace.checkpoint import load_checkpoint, save_checkpoint
from gradspace.distort import CHALLENGES, KINDS, DistortionSpec, apply_distortion
from gradspace.errors import GradspaceError
from gradspace.gradients import finite_diff_check
from gradspace.imageio import atomic_write_text, load_image, save_image
from gradspace.iqa import ANCHORS, IqaConfig, evaluate_pairs, iqa_score
from gradspace.manifest import load_manifest
from gradspace.models import SaeModel, VaeModel, init_sae, init_vae
from gradspace.ood import OodExperimentConfig, run_experiment
from gradspace.pipelines import (
    SaeSettings,
    SyntheticOodSettings,
    VaeSettings,
    ood_datasets_from_manifest,
    run_synthetic_ood,
    train_sae_on_images,
    train_vae_on_images,
)
from gradspace.tensor import make_rng

log = logging.getLogger("gradspace")

GRADCHECK_LIMIT = 1e-4

DEFAULTS = {
    "common": {"seed": 0, "out": "."},
    "train-sae": {"manifest": None, **{k: v for k, v in vars(SaeSettings()).items()}},
    "train-vae": {"manifest": None, **vars(VaeSettings())},
    "gradcheck": {"checkpoint": None, "init": None, "epsilon": 1e-5, "term": "all",
                  "n_params": 200, "image": None},
    "distort": {"input": None, "kind": ["gaussian_noise"], "level": [1, 2, 3, 4, 5]},
    "iqa score": {"checkpoint": None, "ref": None, "dist": None},
    "iqa eval": {"checkpoint": None, "manifest": None},
    "ood run": {"checkpoint": None, "manifest": None, "synthetic": False,
                "challenges": list(CHALLENGES), "levels": [5],
                "n_train": 500, "n_test": 200, "image_size": 16, "hidden": 128, "latent": 16,
                "epochs": 150, "batch_size": 32, "learning_rate": 1e-3},
}
IQA_DEFAULTS = {"anchor": "self", "source": "decoder_total", "invert": True,
                "patch_size": 8, "patch_stride": 8}
DEFAULTS["iqa score"].update(IQA_DEFAULTS)
DEFAULTS["iqa eval"].update(IQA_DEFAULTS)


class Run:
    """Resolved options for one invocation plus its run-record bookkeeping."""

    def __init__(self, command: str, args: argparse.Namespace, argv: list[str]):
        self.command = command
        self.argv = argv
        file_cfg = {}
        if args.config:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
            if not isinstance(file_cfg, dict):
                raise GradspaceError(f"config file {args.config} must hold a JSON object")
        defaults = {**DEFAULTS["common"], **DEFAULTS[command]}
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise GradspaceError(f"config file has unknown keys for {command}: {unknown}")
        self.values, self.sources = {}, {}
        for key, default in defaults.items():
            flag = getattr(args, key, None)
            if flag is not None:
                self.values[key], self.sources[key] = flag, "flag"
            elif key in file_cfg:
                self.values[key], self.sources[key] = file_cfg[key], "config"
            else:
                self.values[key], self.sources[key] = default, "default"
        self.config_path = args.config
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.out = Path(self.values["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        if args.config:
            self.hash_input(args.config)

    def __getitem__(self, key):
        return self.values[key]

    def require(self, *keys):
        missing = [k for k in keys if self.values.get(k) in (None, "")]
        if missing:
            raise GradspaceError(f"{self.command}: missing required option(s): "
                                 + ", ".join("--" + k.replace("_", "-") for k in missing))

    def hash_input(self, path) -> None:
        self.inputs[str(path)] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        atomic_write_text(path, text)
        self.outputs.append(str(path))
        return path

    def finish(self, extra: dict | None = None) -> None:
        record = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "seed": self.values["seed"],
            "config": self.values,
            "config_sources": self.sources,
            "config_file": self.config_path,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        if extra:
            record.update(extra)
        atomic_write_text(self.out / "run_record.json", json.dumps(record, indent=2, default=str) + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, default=float) + "\n"


# ---------------------------------------------------------------------------
# commands


def _images_from_manifest(run: Run, role: str = "train"):
    run.hash_input(run["manifest"])
    manifest = load_manifest(run["manifest"])
    records = manifest.select(role) or manifest.records
    for r in records:
        run.hash_input(r.image_path)
    return [load_image(r.image_path) for r in records]


def cmd_train_sae(run: Run) -> int:
    run.require("manifest")
    images = _images_from_manifest(run)
    settings = SaeSettings(**{k: run[k] for k in vars(SaeSettings())})
    model, zca, report = train_sae_on_images(images, settings, seed=run["seed"])
    path = run.out / "sae_checkpoint.json"
    save_checkpoint(model, path, zca, metadata={"patch_size": settings.patch_size})
    run.outputs.append(str(path))
    run.write("train_report.json", _dump(report.to_dict()))
    run.finish({"final_loss": report.totals[-1]})
    print(path)
    return 0


def cmd_train_vae(run: Run) -> int:
    run.require("manifest")
    images = _images_from_manifest(run)
    settings = VaeSettings(**{k: run[k] for k in vars(VaeSettings())})
    model, report = train_vae_on_images(images, settings, seed=run["seed"])
    path = run.out / "vae_checkpoint.json"
    save_checkpoint(model, path, metadata={"input_shape": [settings.image_size, settings.image_size, 3]})
    run.outputs.append(str(path))
    run.write("train_report.json", _dump(report.to_dict()))
    run.finish({"final_loss": report.totals[-1]})
    print(path)
    return 0


def cmd_gradcheck(run: Run) -> int:
    seed = run["seed"]
    if run["checkpoint"]:
        run.hash_input(run["checkpoint"])
        model, _, meta = load_checkpoint(run["checkpoint"])
    elif run["init"] == "sae":
        model = init_sae(seed=seed)
    elif run["init"] == "vae":
        model = init_vae(seed=seed)
    else:
        raise GradspaceError("gradcheck needs --checkpoint or --init {sae,vae}")
    rng = make_rng(seed)
    if run["image"]:
        run.hash_input(run["image"])
        x = load_image(run["image"]).ravel()
    elif isinstance(model, VaeModel):
        x = rng.uniform(0, 1, model.d_x)
    else:
        x = rng.standard_normal(model.d_x)
    terms = ("recon", "reg", "total") if run["term"] == "all" else (run["term"],)
    reports = {t: finite_diff_check(model, x, run["epsilon"], t, seed=seed,
                                    n_params=run["n_params"], sample_seed=seed) for t in terms}
    worst = max(r.max_rel_error for r in reports.values())
    result = {t: {"max_rel_error": r.max_rel_error, "worst_parameter": r.worst_parameter,
                  "epsilon": r.epsilon, "n_checked": r.n_checked} for t, r in reports.items()}
    result["passed"] = worst < GRADCHECK_LIMIT
    text = _dump(result)
    run.write("gradcheck.json", text)
    run.finish({"max_rel_error": worst})
    print(text, end="")
    if worst >= GRADCHECK_LIMIT:
        print(f"gradcheck failed: max relative error {worst:.3g} >= {GRADCHECK_LIMIT}", file=sys.stderr)
        return 1
    return 0


def cmd_distort(run: Run) -> int:
    run.require("input")
    src = Path(run["input"])
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise GradspaceError(f"no .ppm/.pgm images in {src}")
    for f in files:
        run.hash_input(f)
        image = load_image(f)
        for kind in run["kind"]:
            for level in run["level"]:
                spec = DistortionSpec(kind, int(level), int(run["seed"]))
                out = run.out / f"{f.stem}__{spec.tag}{f.suffix}"
                save_image(out, apply_distortion(image, spec))
                run.outputs.append(str(out))
    run.finish()
    print(f"wrote {len(run.outputs)} images to {run.out}")
    return 0


def _iqa_config(run: Run) -> IqaConfig:
    return IqaConfig(patch_size=run["patch_size"], patch_stride=run["patch_stride"],
                     gradient_source=run["source"], gradient_anchor=run["anchor"],
                     invert_nonlinearity=bool(run["invert"]))


def _load_sae(run: Run):
    run.hash_input(run["checkpoint"])
    model, zca, _ = load_checkpoint(run["checkpoint"])
    if not isinstance(model, SaeModel) or zca is None:
        raise GradspaceError("IQA needs an SAE checkpoint that includes its ZCA transform")
    return model, zca


def cmd_iqa_score(run: Run) -> int:
    run.require("checkpoint", "ref", "dist")
    model, zca = _load_sae(run)
    run.hash_input(run["ref"])
    run.hash_input(run["dist"])
    score = iqa_score(model, zca, load_image(run["ref"]), load_image(run["dist"]), _iqa_config(run))
    run.finish({"score": score})
    print(repr(score))
    return 0


def cmd_iqa_eval(run: Run) -> int:
    run.require("checkpoint", "manifest")
    model, zca = _load_sae(run)
    run.hash_input(run["manifest"])
    manifest = load_manifest(run["manifest"], task="iqa")
    records = manifest.select("test")
    pairs = []
    for r in records:
        run.hash_input(r.image_path)
        pairs.append((load_image(r.reference_path), load_image(r.image_path)))
    mos = [r.subjective_score for r in records]
    stds = [r.subjective_std for r in records]
    std = None if any(s is None for s in stds) else stds
    raw, mapped, metrics, fit = evaluate_pairs(model, zca, pairs, mos, std, _iqa_config(run),
                                               seed=run["seed"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "raw_score", "mapped_score"])
    for r, s, m in zip(records, raw, mapped):
        w.writerow([r.image_id, repr(float(s)), repr(float(m))])
    run.write("iqa_scores.csv", buf.getvalue())
    block = {**metrics.to_dict(), "mapping": vars(fit)}
    run.write("iqa_metrics.json", _dump(block))
    run.finish({"metrics": metrics.to_dict()})
    print(_dump(metrics.to_dict()), end="")
    return 0


def cmd_ood_run(run: Run) -> int:
    cfg = OodExperimentConfig(challenge_types=tuple(run["challenges"]), levels=tuple(run["levels"]),
                              seed=int(run["seed"]))
    extra = {"experiment": cfg.to_dict()}
    if run["synthetic"]:
        settings = SyntheticOodSettings(
            n_train=run["n_train"], n_test=run["n_test"],
            vae=VaeSettings(image_size=run["image_size"], hidden=run["hidden"], latent=run["latent"],
                            epochs=run["epochs"], batch_size=run["batch_size"],
                            learning_rate=run["learning_rate"]))
        report, model, train_report = run_synthetic_ood(settings, cfg)
        extra["vae_final_loss"] = train_report.totals[-1]
    else:
        run.require("checkpoint", "manifest")
        run.hash_input(run["checkpoint"])
        run.hash_input(run["manifest"])
        model, _, meta = load_checkpoint(run["checkpoint"])
        if not isinstance(model, VaeModel):
            raise GradspaceError("ood run needs a VAE checkpoint")
        size = int(meta.get("input_shape", [run["image_size"]])[0])
        manifest = load_manifest(run["manifest"], task="ood")
        data = ood_datasets_from_manifest(manifest, size, cfg)
        report = run_experiment(cfg, model, data)
    csv_text = report.to_csv()
    run.write("ood_table.csv", csv_text)
    run.write("ood_report.json", _dump(report.to_dict()))
    run.finish(extra)
    print(csv_text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="base random seed (default 0)")
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--out", help="output directory (default: current directory)")


def _iqa_opts(p):
    p.add_argument("--checkpoint")
    p.add_argument("--anchor", choices=ANCHORS)
    p.add_argument("--source", choices=("decoder_total", "decoder_recon"))
    p.add_argument("--no-invert", dest="invert", action="store_false", default=None,
                   help="project the sigmoid latent instead of its logit")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--patch-stride", type=int)
    _common(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradspace", description="Autoencoder weight-gradient features for image quality and out-of-distribution tasks.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-sae", help="train an SAE on whitened patches")
    p.add_argument("--manifest")
    for name, typ in (("patch-size", int), ("patches-per-image", int), ("latent", int),
                      ("zca-epsilon", float), ("beta", float), ("lam", float), ("epochs", int),
                      ("batch-size", int), ("learning-rate", float)):
        p.add_argument("--" + name, type=typ)
    _common(p)
    p.set_defaults(handler=cmd_train_sae, key="train-sae")

    p = sub.add_parser("train-vae", help="train a VAE on resized images")
    p.add_argument("--manifest")
    for name, typ in (("image-size", int), ("hidden", int), ("latent", int), ("epochs", int),
                      ("batch-size", int), ("learning-rate", float)):
        p.add_argument("--" + name, type=typ)
    _common(p)
    p.set_defaults(handler=cmd_train_vae, key="train-vae")

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--checkpoint")
    p.add_argument("--init", choices=("sae", "vae"), help="check a freshly initialized model")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--term", choices=("recon", "reg", "total", "all"))
    p.add_argument("--n-params", type=int)
    p.add_argument("--image", help="input image instead of a seeded random vector")
    _common(p)
    p.set_defaults(handler=cmd_gradcheck, key="gradcheck")

    p = sub.add_parser("distort", help="write distorted copies of a folder of images")
    p.add_argument("--input", help="folder of .ppm/.pgm images")
    p.add_argument("--kind", nargs="+", choices=KINDS)
    p.add_argument("--level", nargs="+", type=int, choices=range(0, 6))
    _common(p)
    p.set_defaults(handler=cmd_distort, key="distort")

    iqa = sub.add_parser("iqa", help="image quality assessment").add_subparsers(dest="iqa_cmd", required=True)
    p = iqa.add_parser("score", help="score one reference/distorted pair")
    p.add_argument("--ref")
    p.add_argument("--dist")
    _iqa_opts(p)
    p.set_defaults(handler=cmd_iqa_score, key="iqa score")
    p = iqa.add_parser("eval", help="evaluate against subjective scores in a manifest")
    p.add_argument("--manifest")
    _iqa_opts(p)
    p.set_defaults(handler=cmd_iqa_eval, key="iqa eval")

    ood = sub.add_parser("ood", help="out-of-distribution classification").add_subparsers(dest="ood_cmd", required=True)
    p = ood.add_parser("run", help="accuracy table of feature kinds by challenge type")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--synthetic", action="store_true", default=None,
                   help="generate images, train a VAE and run the experiment end to end")
    p.add_argument("--challenges", nargs="+", choices=list(CHALLENGES))
    p.add_argument("--levels", nargs="+", type=int, choices=range(1, 6))
    for name, typ in (("n-train", int), ("n-test", int), ("image-size", int), ("hidden", int),
                      ("latent", int), ("epochs", int), ("batch-size", int), ("learning-rate", float)):
        p.add_argument("--" + name, type=typ)
    _common(p)
    p.set_defaults(handler=cmd_ood_run, key="ood run")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args.key, args, argv)
        return args.handler(run)
    except (GradspaceError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
