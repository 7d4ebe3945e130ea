"""
Command-line entry point.

Every subcommand reads its settings from built-in defaults, then an optional
``--config`` file, then command-line flags (later sources win). The fully
resolved settings are written next to the main output as ``<out>.cfg`` and
the run log as ``<out>.trace.jsonl``; the whole set of files appears
together or not at all.

Exit codes: 0 success, 1 target not reached, 2 input or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import distance_table, hop_trace, report
from .attack import FoolConfig, NormBound, Perturbation, filter_nonsource, make_rng, run_fool_attack, two_step_attack
from .errors import ClassfoolError, ConfigError, InputError
from .explain import ExplainConfig, GaussianSampler, InpaintSpec, run_explain
from .formats import (
    classifier_bytes,
    export_adversarial,
    export_visualization,
    idx_bytes,
    load_classifier,
    load_dataset,
    load_perturbation,
    load_sampler,
    perturbation_bytes,
    pnm_bytes,
    read_mask,
    read_pnm,
    sampler_bytes,
)
from .nn import LabeledDataset, TrainConfig, predict_with_confidence, reference_architecture, train

log = logging.getLogger("classfool")

EXIT_OK, EXIT_NOT_REACHED, EXIT_INPUT = 0, 1, 2


# ----------------------------------------------------------------------------
# settings
# ----------------------------------------------------------------------------

def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (type, help)
KEYS = {
    "data": (str, "dataset: directory with images.idx/labels.idx, or <label>/ subdirectories of PGM/PPM"),
    "test_data": (str, "held-out dataset reported during training"),
    "model": (str, "classifier checkpoint (.pfnn)"),
    "pert": (str, "perturbation file (.pfpt)"),
    "in": (str, "input perturbation file (.pfpt)"),
    "out": (str, "main output path"),
    "seed": (int, "random seed; every random draw derives from it"),
    "test_fraction": (float, "held-out share per class"),
    "epochs": (int, "training epochs"),
    "batch_size": (int, "mini-batch size"),
    "learning_rate": (float, "SGD step size"),
    "widths": (_int_list, "convolution channel counts, comma separated"),
    "source": (int, "source class"),
    "target": (int, "target class"),
    "mode": (str, "norm bound: linf, l2 or unbounded"),
    "eta": (float, "norm bound radius"),
    "gamma": (float, "fooling ratio to reach"),
    "max_iters": (int, "iteration cap"),
    "min_iters": (int, "iterations before the stopping test applies"),
    "eval_every": (int, "iterations between evaluations"),
    "conf_floor": (float, "minimum confidence for non-source samples"),
    "step1_iters": (int, "warm-start iterations"),
    "step1_batch_size": (int, "warm-start batch size"),
    "suppress_leakage": (_bool, "use non-source samples in the second step"),
    "seed_index": (int, "index of the seed image in the dataset"),
    "seed_image": (str, "seed image (.pgm/.ppm); overrides seed_index"),
    "sampler": (str, "Gaussian sampler (.pfgs); seed and pool are drawn from it"),
    "seed_weight": (float, "weight of the seed image's gradient"),
    "pool_size": (int, "number of pool images"),
    "refine_every": (int, "iterations between refinements after the first"),
    "refine_until": (int, "iterations run after the first refinement"),
    "mask": (str, "inpainting mask (.pgm/.ppm, nonzero marks the corrupt region)"),
    "beta": (float, "penalty weight outside the inpainting mask"),
    "classes": (_int_list, "classes, comma separated"),
    "repeats": (int, "runs per ordered pair"),
    "fool_target": (float, "training fooling ratio each run must reach"),
    "per_class": (int, "samples per class (default: smallest class count)"),
    "factor": (int, "downsampling factor"),
    "jitter": (float, "diagonal jitter added before Cholesky"),
    "count": (int, "number of samples drawn"),
    "index": (int, "sample index; with data, export the adversarial image instead"),
}

FOOL_KEYS = {
    "model": None, "data": None, "source": None, "target": None, "out": None,
    "mode": "linf", "eta": 80.0, "batch_size": 128, "gamma": 0.8, "max_iters": 5000, "min_iters": 100,
    "eval_every": 10, "conf_floor": 0.6, "seed": 0,
}

# subcommand -> (help, {key: default}); None marks a required key, ... an optional one
COMMANDS = {
    "prepare-data": ("write the bundled digits as 28x28 IDX train/test sets",
                     {"out": None, "test_fraction": 0.3, "seed": 0}),
    "train": ("train the reference classifier",
              {"data": None, "out": None, "test_data": ..., "epochs": 30, "batch_size": 64,
               "learning_rate": 0.05, "widths": [16, 32], "seed": 0}),
    "fool": ("single-run targeted universal perturbation", dict(FOOL_KEYS)),
    "fool2step": ("warm-started attack with leakage suppression",
                  {**FOOL_KEYS, "step1_iters": 100, "step1_batch_size": 64, "suppress_leakage": True}),
    "explain": ("explanation perturbation for a target class",
                {"model": None, "target": None, "out": None, "data": ..., "seed_index": ..., "seed_image": ...,
                 "sampler": ..., "seed_weight": 0.5, "gamma": 0.8, "mode": "linf", "eta": 10.0,
                 "batch_size": 64, "pool_size": 255, "refine_every": 50, "refine_until": 300,
                 "max_iters": 2000, "eval_every": 10, "mask": ..., "beta": 10.0, "seed": 0}),
    "refine": ("refine a perturbation with the model's activations",
               {"model": None, "pert": None, "out": None}),
    "eval": ("fooling ratio, leakage and per-class rates on a dataset",
             {"model": None, "pert": None, "data": None, "source": ..., "target": ..., "out": ...}),
    "hops": ("unbounded attack recording the modal non-source label",
             {"model": None, "data": None, "source": None, "target": None, "out": None, "gamma": 0.95,
              "batch_size": 128, "max_iters": 5000, "eval_every": 10, "conf_floor": 0.6, "seed": 0}),
    "distances": ("l2 distance table between class regions",
                  {"model": None, "data": None, "classes": None, "out": None, "repeats": 3,
                   "fool_target": 0.95, "batch_size": 128, "max_iters": 5000, "eval_every": 10,
                   "conf_floor": 0.6, "per_class": ..., "seed": 0}),
    "gen-gaussian": ("fit a Gaussian to a class's downsampled images",
                     {"data": None, "target": None, "out": None, "factor": 4, "jitter": 1e-6, "count": 16,
                      "seed": 0}),
    "viz": ("export a perturbation (or an adversarial image) as PGM/PPM",
            {"in": None, "out": None, "data": ..., "index": ...}),
}


def parse_config_text(text, allowed, origin="config"):
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        if key not in allowed:
            raise ConfigError(f"{origin}:{n}: key {key!r} does not apply to this command")
        if key in values:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        values[key] = _convert(key, value, f"{origin}:{n}")
    return values


def _convert(key, value, origin):
    kind = KEYS[key][0]
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: bad value for {key}: {value!r}") from exc


def resolve(command, config_path=None, flags=None):
    """Defaults, then the config file, then flags."""
    defaults = COMMANDS[command][1]
    settings = {k: v for k, v in defaults.items() if v is not None and v is not ...}
    if config_path is not None:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        settings.update(parse_config_text(text, defaults, str(config_path)))
    for key, value in (flags or {}).items():
        settings[key] = _convert(key, value, "flag") if isinstance(value, str) else value
    missing = [k for k, v in defaults.items() if v is None and k not in settings]
    if missing:
        raise ConfigError(f"{command}: missing required setting(s): {', '.join(missing)}")
    return settings


def config_text(command, settings):
    lines = [f"# classfool {__version__} {command}"]
    lines += [f"{k} = {_fmt(settings[k])}" for k in sorted(settings)]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# atomic output sets
# ----------------------------------------------------------------------------

class Outputs:
    """Files that are published together: each is staged to a temporary
    name in its destination directory and renamed only on :meth:`commit`."""

    def __init__(self):
        self.staged = []

    def _stage(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        os.close(fd)
        self.staged.append((tmp, path))
        return tmp

    def add_bytes(self, path, data):
        Path(self._stage(path)).write_bytes(data)

    def add_text(self, path, text):
        self.add_bytes(path, text.encode("utf-8"))

    def add_with(self, path, writer):
        """``writer(tmp_path)`` produces the file."""
        writer(self._stage(path))

    def commit(self):
        for tmp, path in self.staged:
            os.replace(tmp, path)
        self.staged = []

    def discard(self):
        for tmp, _ in self.staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        self.staged = []


def _json(obj):
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _trace_text(lines):
    return "".join(_json(line) + "\n" for line in lines)


def _sidecars(out, command, settings, trace_lines, outputs):
    out = Path(out)
    outputs.add_text(f"{out}.cfg", config_text(command, settings))
    outputs.add_text(f"{out}.trace.jsonl", _trace_text(trace_lines))


def _figure(outputs, path, plot, *args, **kwargs):
    from . import plotting

    outputs.add_with(path, lambda tmp: getattr(plotting, plot)(*args, tmp, **kwargs))


# ----------------------------------------------------------------------------
# shared loaders
# ----------------------------------------------------------------------------

def _load_model(settings):
    return load_classifier(settings["model"])


def _load_data(settings, clf=None, key="data"):
    ds = load_dataset(settings[key], num_classes=None if clf is None else clf.num_classes)
    if clf is not None and ds.input_shape != clf.input_shape:
        raise InputError(f"dataset images are {ds.input_shape}, model expects {clf.input_shape}")
    return ds


def _check_class(clf, label, name):
    if not 0 <= label < clf.num_classes:
        raise ConfigError(f"{name} {label} out of range for {clf.num_classes} classes")


def _fool_config(settings, **extra):
    return FoolConfig(
        target_label=settings["target"],
        source_label=settings["source"],
        bound=NormBound(settings.get("mode", "unbounded"), settings.get("eta", 1.0)),
        batch_size=settings["batch_size"],
        gamma=settings["gamma"],
        max_iters=settings["max_iters"],
        min_iters=settings.get("min_iters", 0),
        eval_every=settings["eval_every"],
        rng_seed=settings["seed"],
        nonsource_conf_floor=settings["conf_floor"],
        **extra,
    )


def _attack_sets(clf, data, config):
    _check_class(clf, config.source_label, "source")
    _check_class(clf, config.target_label, "target")
    source = data.of_class(config.source_label)
    if len(source) == 0:
        raise InputError(f"no samples of source class {config.source_label}")
    nonsource = filter_nonsource(clf, data.excluding(config.source_label), config)
    return source, nonsource


def _viz_name(out, shape):
    return f"{out}.viz.{'ppm' if shape[-1] == 3 else 'pgm'}"


# ----------------------------------------------------------------------------
# subcommands; each returns (exit code, Outputs)
# ----------------------------------------------------------------------------

def cmd_prepare_data(s, outputs):
    from .data import digits_28

    train_set, test_set = digits_28(s["test_fraction"], s["seed"])
    out = Path(s["out"])
    trace = []
    for name, ds in (("train", train_set), ("test", test_set)):
        outputs.add_bytes(out / name / "images.idx", idx_bytes(ds.images.astype(np.uint8)))
        outputs.add_bytes(out / name / "labels.idx", idx_bytes(ds.labels.astype(np.uint8)))
        counts = np.bincount(ds.labels, minlength=10)
        trace.append({"split": name, "count": len(ds), "per_class": [int(c) for c in counts]})
    _sidecars(out / "dataset", "prepare-data", s, trace, outputs)
    return EXIT_OK


def cmd_train(s, outputs):
    data = _load_data(s)
    test = _load_data(s, key="test_data") if "test_data" in s else None
    num_classes = int(max(data.labels.max(), -1 if test is None else test.labels.max())) + 1
    clf = reference_architecture(data.input_shape, num_classes, seed=s["seed"], widths=tuple(s["widths"]))
    config = TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                         seed=s["seed"])
    clf, history = train(clf, data, config, test)
    outputs.add_bytes(s["out"], classifier_bytes(clf))
    _sidecars(s["out"], "train", s, history, outputs)
    return EXIT_OK


def _finish_attack(s, command, clf, pert, trace, outputs):
    outputs.add_bytes(s["out"], perturbation_bytes(pert))
    outputs.add_bytes(_viz_name(s["out"], pert.p.shape), pnm_bytes(export_visualization(pert.p)))
    _figure(outputs, f"{s['out']}.png", "plot_trace", trace, gamma=s["gamma"],
            title=f"{s['source']} -> {s['target']}")
    _sidecars(s["out"], command, s, trace.lines(), outputs)
    return EXIT_OK if trace.reached else EXIT_NOT_REACHED


def cmd_fool(s, outputs):
    clf = _load_model(s)
    data = _load_data(s, clf)
    config = _fool_config(s)
    source, nonsource = _attack_sets(clf, data, config)
    pert, trace = run_fool_attack(clf, source, nonsource, config)
    return _finish_attack(s, "fool", clf, pert, trace, outputs)


def cmd_fool2step(s, outputs):
    clf = _load_model(s)
    data = _load_data(s, clf)
    config = _fool_config(s, step1_iters=s["step1_iters"], step1_batch_size=s["step1_batch_size"])
    source, nonsource = _attack_sets(clf, data, config)
    pert, trace = two_step_attack(clf, source, nonsource, config, suppress_leakage=s["suppress_leakage"])
    return _finish_attack(s, "fool2step", clf, pert, trace, outputs)


def cmd_explain(s, outputs):
    clf = _load_model(s)
    _check_class(clf, s["target"], "target")
    if "sampler" in s:
        sampler = load_sampler(s["sampler"])
        if sampler.input_shape != clf.input_shape:
            raise InputError("sampler shape does not match the model")
        draws = sampler.sample(s["pool_size"] + 1, make_rng(s["seed"], 2))
        seed = draws[0]
        # Gaussian pool images carry no class; mark them as "not the target"
        pool = LabeledDataset(draws[1:], np.full(len(draws) - 1, (s["target"] + 1) % clf.num_classes))
    else:
        if "data" not in s:
            raise ConfigError("explain needs data or sampler")
        pool = _load_data(s, clf)
        if "seed_image" in s:
            seed = read_pnm(s["seed_image"]).astype(np.float64)
        elif "seed_index" in s:
            if not 0 <= s["seed_index"] < len(pool):
                raise ConfigError(f"seed_index {s['seed_index']} out of range")
            seed = pool.take([s["seed_index"]])[0]
        else:
            raise ConfigError("explain needs seed_image or seed_index")
    if seed.shape != clf.input_shape:
        raise InputError(f"seed image is {seed.shape}, model expects {clf.input_shape}")
    inpaint = None
    if "mask" in s:
        inpaint = InpaintSpec(read_mask(s["mask"], clf.input_shape), s["beta"], seed)
    config = ExplainConfig(
        target_label=s["target"], seed=seed, seed_weight=s["seed_weight"], gamma=s["gamma"],
        bound=NormBound(s["mode"], s["eta"]), batch_size=s["batch_size"], pool_size=s["pool_size"],
        refine_every=s["refine_every"], refine_until=s["refine_until"], max_iters=s["max_iters"],
        eval_every=s["eval_every"], rng_seed=s["seed"],
    )
    result = run_explain(clf, pool, config, inpaint)
    p = result.perturbation.p
    label, conf = predict_with_confidence(clf, export_visualization(p).astype(np.float64)[None])
    trace = result.trace.lines() + [{"event": "visualization", "label": int(label[0]),
                                     "confidence": float(conf[0]), "phase_a_iters": result.phase_a_iters}]
    outputs.add_bytes(s["out"], perturbation_bytes(result.perturbation))
    outputs.add_bytes(_viz_name(s["out"], p.shape), pnm_bytes(export_visualization(p)))
    outputs.add_bytes(f"{s['out']}.adv{Path(_viz_name(s['out'], p.shape)).suffix}",
                      pnm_bytes(export_adversarial(seed, p)))
    _figure(outputs, f"{s['out']}.png", "plot_trace", result.trace, gamma=s["gamma"],
            title=f"explain {s['target']}")
    _sidecars(s["out"], "explain", s, trace, outputs)
    return EXIT_OK if result.trace.reached else EXIT_NOT_REACHED


def cmd_refine(s, outputs):
    from .attack import project
    from .refine import refine_details

    clf = _load_model(s)
    pert = load_perturbation(s["pert"])
    if pert.p.shape != clf.input_shape:
        raise InputError("perturbation does not match the model input shape")
    details = refine_details(clf, pert.p)
    refined = Perturbation(project(details.perturbation, pert.bound), pert.bound)
    outputs.add_bytes(s["out"], perturbation_bytes(refined))
    outputs.add_bytes(_viz_name(s["out"], refined.p.shape), pnm_bytes(export_visualization(refined.p)))
    _sidecars(s["out"], "refine", s, [details.event()], outputs)
    return EXIT_OK


def cmd_eval(s, outputs):
    clf = _load_model(s)
    pert = load_perturbation(s["pert"])
    data = _load_data(s, clf)
    if pert.p.shape != clf.input_shape:
        raise InputError("perturbation does not match the model input shape")
    source, target = s.get("source"), s.get("target")
    if source is None or target is None:
        raise ConfigError("eval needs source and target")
    _check_class(clf, source, "source")
    _check_class(clf, target, "target")
    rep = report(clf, pert.p, data, source, target)
    text = json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n"
    out = s.get("out")
    if out is None:
        sys.stdout.write(text)
        return EXIT_OK
    outputs.add_text(out, text)
    _figure(outputs, f"{out}.png", "plot_report", rep)
    _sidecars(out, "eval", s, [rep.to_dict()], outputs)
    return EXIT_OK


def cmd_hops(s, outputs):
    clf = _load_model(s)
    data = _load_data(s, clf)
    config = _fool_config({**s, "mode": "unbounded"})
    source, nonsource = _attack_sets(clf, data, config)
    pert, trace = run_fool_attack(clf, source, nonsource, config)
    hops = hop_trace(trace, config.source_label)
    outputs.add_with(s["out"], hops.write_csv)
    outputs.add_bytes(f"{s['out']}.pfpt", perturbation_bytes(pert))
    _figure(outputs, f"{s['out']}.png", "plot_hops", hops, target=config.target_label)
    _sidecars(s["out"], "hops", s, trace.lines() + [{"event": "hop_path", "labels": hops.labels()}], outputs)
    return EXIT_OK if trace.reached else EXIT_NOT_REACHED


def cmd_distances(s, outputs):
    clf = _load_model(s)
    data = _load_data(s, clf)
    for c in s["classes"]:
        _check_class(clf, c, "class")
    if len(set(s["classes"])) != len(s["classes"]):
        raise ConfigError("classes must be distinct")
    base = FoolConfig(target_label=s["classes"][1], source_label=s["classes"][0], batch_size=s["batch_size"],
                      max_iters=s["max_iters"], eval_every=s["eval_every"], rng_seed=s["seed"],
                      nonsource_conf_floor=s["conf_floor"])
    table = distance_table(clf, data, s["classes"], repeats=s["repeats"], fool_target=s["fool_target"],
                           base_config=base, per_class=s.get("per_class"))
    gap, pooled = table.asymmetry()
    outputs.add_with(s["out"], table.write_csv)
    _figure(outputs, f"{s['out']}.png", "plot_distance_table", table)
    runs = [{"source": a, "target": b, "l2": norms} for (a, b), norms in table.runs.items()]
    _sidecars(s["out"], "distances", s, runs + [{"event": "asymmetry", "max_gap": gap, "pooled_std": pooled}],
              outputs)
    complete = all(n is not None for norms in table.runs.values() for n in norms)
    return EXIT_OK if complete else EXIT_NOT_REACHED


def cmd_gen_gaussian(s, outputs):
    data = _load_data(s)
    images = data.of_class(s["target"]).images
    sampler = GaussianSampler.fit(images, s["factor"], s["jitter"])
    draws = sampler.sample(s["count"], make_rng(s["seed"], 2))
    outputs.add_bytes(s["out"], sampler_bytes(sampler))
    _figure(outputs, f"{s['out']}.png", "plot_image_grid", draws)
    trace = [{"event": "fit", "images": len(images), "dim": len(sampler.cov),
              "trace_cov": float(np.trace(sampler.cov))}]
    _sidecars(s["out"], "gen-gaussian", s, trace, outputs)
    return EXIT_OK


def cmd_viz(s, outputs):
    pert = load_perturbation(s["in"])
    p = pert.p
    if "data" in s or "index" in s:
        if not ("data" in s and "index" in s):
            raise ConfigError("adversarial export needs both data and index")
        data = load_dataset(s["data"])
        if not 0 <= s["index"] < len(data):
            raise ConfigError(f"index {s['index']} out of range")
        sample = data.take([s["index"]])[0]
        if sample.shape != p.shape:
            raise InputError("sample and perturbation shapes differ")
        image = export_adversarial(sample, p)
    else:
        image = export_visualization(p)
    if str(s["out"]).lower().endswith(".ppm") and image.shape[-1] == 1:
        image = np.repeat(image, 3, axis=-1)
    outputs.add_bytes(s["out"], pnm_bytes(image))
    _sidecars(s["out"], "viz", s, [{"min": int(image.min()), "max": int(image.max())}], outputs)
    return EXIT_OK


HANDLERS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "fool": cmd_fool,
    "fool2step": cmd_fool2step,
    "explain": cmd_explain,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "hops": cmd_hops,
    "distances": cmd_distances,
    "gen-gaussian": cmd_gen_gaussian,
    "viz": cmd_viz,
}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="classfool", description="Class-targeted universal perturbations.")
    parser.add_argument("--version", action="version", version=f"classfool {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="settings file of 'key = value' lines")
        for key, default in keys.items():
            note = "required" if default is None else ("optional" if default is ... else f"default {_fmt(default)}")
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=argparse.SUPPRESS, metavar="VALUE",
                           help=f"{KEYS[key][1]} ({note})")
    return parser


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    verbose = args.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")
    outputs = Outputs()
    try:
        settings = resolve(command, config_path, args)
        code = HANDLERS[command](settings, outputs)
        outputs.commit()
    except ClassfoolError as exc:
        outputs.discard()
        print(f"classfool {command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        outputs.discard()
        print(f"classfool {command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BaseException:
        outputs.discard()
        raise
    if code == EXIT_NOT_REACHED:
        print(f"classfool {command}: target not reached", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
