"""
Evaluation quantities: fooling ratio, leakage, per-class target rates,
max-label hopping for the unbounded attack, and pairwise l2 distance tables.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .attack import FoolConfig, NormBound, filter_nonsource, fooling_ratio, perturb_and_clip, run_fool_attack
from .errors import ConfigError, InputError
from .nn import LabeledDataset, predict

log = logging.getLogger(__name__)


@dataclass
class FoolingReport:
    source_label: int
    target_label: int
    fooling_ratio: float
    leakage: float
    per_class_target_rate: dict
    n_source: int
    n_nonsource: int
    linf: float
    l2: float

    def to_dict(self):
        d = asdict(self)
        d["per_class_target_rate"] = {str(k): v for k, v in self.per_class_target_rate.items()}
        return d


def per_class_target_rates(classifier, p, dataset, target, classes):
    rates = {}
    for c in classes:
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            raise InputError(f"no samples of class {c}")
        preds = predict(classifier, perturb_and_clip(dataset.take(idx), p))
        rates[int(c)] = float(np.mean(preds == target))
    return rates


def leakage(classifier, p, dataset, source, target):
    """Unweighted mean over non-source, non-target classes of the rate at
    which their samples are predicted as ``target`` after perturbation."""
    classes = [c for c in np.unique(dataset.labels) if c not in (source, target)]
    if not classes:
        raise InputError("no non-source classes to measure leakage on")
    rates = per_class_target_rates(classifier, p, dataset, target, classes)
    return float(np.mean([rates[c] for c in sorted(rates)]))


def report(classifier, p, dataset, source, target):
    """All FoolingReport fields on (held-out) ``dataset``."""
    p = np.asarray(p, dtype=np.float64)
    src_idx = np.flatnonzero(dataset.labels == source)
    if len(src_idx) == 0:
        raise InputError("dataset has no source-class samples")
    classes = [int(c) for c in np.unique(dataset.labels) if c not in (source, target)]
    if not classes:
        raise InputError("no non-source classes to measure leakage on")
    rates = per_class_target_rates(classifier, p, dataset, target, classes)
    return FoolingReport(
        source_label=int(source),
        target_label=int(target),
        fooling_ratio=fooling_ratio(classifier, p, dataset.take(src_idx), target),
        leakage=float(np.mean([rates[c] for c in classes])),
        per_class_target_rate=rates,
        n_source=len(src_idx),
        n_nonsource=int(np.sum(np.isin(dataset.labels, classes))),
        linf=float(np.max(np.abs(p))),
        l2=float(np.linalg.norm(p.ravel())),
    )


# ----------------------------------------------------------------------------
# max-label hopping
# ----------------------------------------------------------------------------

@dataclass
class HopTrace:
    source_label: int
    entries: list  # (t, max_label, count)

    def labels(self):
        """Distinct consecutive max labels, i.e. the hop path."""
        path = []
        for _, label, _ in self.entries:
            if not path or path[-1] != label:
                path.append(label)
        return path

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "max_label", "count"])
            w.writerows(self.entries)


def hop_trace(trace, source_label):
    """Modal non-source label at each evaluation of an attack trace.

    Evaluations where no source sample has left the source class are skipped.
    """
    entries = [(r["t"], r["hop_label"], r["hop_count"]) for r in trace.records if r["hop_count"] > 0]
    return HopTrace(source_label, entries)


# ----------------------------------------------------------------------------
# distance table
# ----------------------------------------------------------------------------

@dataclass
class DistanceTable:
    classes: list
    runs: dict  # (source, target) -> list of l2 norms (None when not converged)

    def cell(self, source, target):
        norms = [n for n in self.runs.get((source, target), []) if n is not None]
        if not norms or len(norms) < len(self.runs[(source, target)]):
            return None
        return float(np.mean(norms)), float(np.std(norms))

    def asymmetry(self):
        """Largest |d(A->B) - d(B->A)| and the pooled std over all runs."""
        gaps = []
        for i, a in enumerate(self.classes):
            for b in self.classes[i + 1:]:
                ab, ba = self.cell(a, b), self.cell(b, a)
                if ab is not None and ba is not None:
                    gaps.append(abs(ab[0] - ba[0]))
        stds = [c[1] for c in (self.cell(a, b) for a in self.classes for b in self.classes if a != b) if c]
        pooled = float(np.sqrt(np.mean(np.square(stds)))) if stds else 0.0
        return (max(gaps) if gaps else None), pooled

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "target", "mean_l2", "std_l2", "runs"])
            for a in self.classes:
                for b in self.classes:
                    if a == b:
                        continue
                    c = self.cell(a, b)
                    norms = ";".join("" if n is None else repr(n) for n in self.runs[(a, b)])
                    if c is None:
                        w.writerow([a, b, "", "", norms])
                    else:
                        w.writerow([a, b, repr(c[0]), repr(c[1]), norms])


def distance_table(classifier, dataset, classes, repeats=3, fool_target=0.95, base_config=None,
                   per_class=None):
    """Unbounded attack for every ordered pair of ``classes``; l2 norm of the
    perturbation that first reaches ``fool_target`` on the training samples.

    Non-source data for each pair are the other listed classes, filtered as
    for the fooling attack. ``per_class`` truncates every class to the same
    number of samples (defaults to the smallest class count).
    """
    classes = [int(c) for c in classes]
    if len(classes) < 2:
        raise InputError("distance table needs at least two classes")
    counts = [int(np.sum(dataset.labels == c)) for c in classes]
    n = min(counts) if per_class is None else per_class
    if n < 1 or n > min(counts):
        raise ConfigError(f"cannot take {n} samples per class from counts {counts}")
    subsets = {c: dataset.subset(np.flatnonzero(dataset.labels == c)[:n]) for c in classes}

    runs = {}
    for a in classes:
        for b in classes:
            if a == b:
                continue
            others = [subsets[c] for c in classes if c != a]
            nonsource_raw = _concat(others)
            norms = []
            for r in range(repeats):
                cfg = base_config or FoolConfig(target_label=b, source_label=a)
                cfg = replace(cfg, target_label=b, source_label=a, bound=NormBound("unbounded", 1.0),
                              gamma=fool_target, min_iters=0, rng_seed=(base_config.rng_seed if base_config else 0) + r)
                nonsource = filter_nonsource(classifier, nonsource_raw, cfg)
                pert, trace = run_fool_attack(classifier, subsets[a], nonsource, cfg)
                norms.append(pert.l2 if trace.reached else None)
                log.info("distance %d->%d repeat %d: %s", a, b, r, norms[-1])
            runs[(a, b)] = norms
    return DistanceTable(classes, runs)


def _concat(datasets):
    return LabeledDataset(np.concatenate([d.images for d in datasets]),
                          np.concatenate([d.labels for d in datasets]), datasets[0].split)
