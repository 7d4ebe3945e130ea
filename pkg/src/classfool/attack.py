"""
Class-targeted universal perturbation with leakage suppression.

A single perturbation ``p`` is *subtracted* from every source-class image so
that the classifier predicts ``target``; at the same time the gradients of
non-source images towards their own labels are mixed in so that ``p`` does
not drag unrelated classes into the target as well.

Each iteration draws b/2 source and b/2 non-source images, perturbs and clips
them, forms the balanced expected gradient, tracks its first and raw second
moments with exponential moving averages, takes an l-inf normalised step
along the bias-corrected moment ratio, and projects back onto the norm ball.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InputError
from .nn import DYNAMIC_RANGE, input_gradients, predict, predict_with_confidence

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
DELTA_FLOOR = 1e-12
DELTA_CLAMP = (1e-6, 1e6)
MODES = ("linf", "l2", "unbounded")


def make_rng(seed, stream=0):
    """Counter-based generator; ``stream`` separates independent consumers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class NormBound:
    mode: str = "linf"
    eta: float = 15.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown norm mode {self.mode!r}; expected one of {MODES}")
        if self.mode != "unbounded" and not self.eta > 0:
            raise ConfigError("eta must be positive for bounded modes")

    def norm(self, p):
        if self.mode == "linf":
            return float(np.max(np.abs(p))) if np.size(p) else 0.0
        return float(np.linalg.norm(np.ravel(p)))

    def satisfied(self, p, tol=1e-9):
        return self.mode == "unbounded" or self.norm(p) <= self.eta + tol


@dataclass(eq=False)
class Perturbation:
    p: np.ndarray
    bound: NormBound

    @property
    def linf(self):
        return float(np.max(np.abs(self.p)))

    @property
    def l2(self):
        return float(np.linalg.norm(self.p.ravel()))


@dataclass(eq=False)
class MomentState:
    upsilon: np.ndarray
    omega: np.ndarray
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


@dataclass
class FoolConfig:
    target_label: int
    source_label: int
    bound: NormBound = field(default_factory=NormBound)
    batch_size: int = 128
    gamma: float = 0.8
    max_iters: int = 5000
    min_iters: int = 100
    eval_every: int = 10
    rng_seed: int = 0
    nonsource_conf_floor: float = 0.6
    step1_iters: int = 100
    step1_batch_size: int = 64

    def __post_init__(self):
        if self.target_label == self.source_label:
            raise ConfigError("target label must differ from the source label")
        for name in ("batch_size", "step1_batch_size"):
            b = getattr(self, name)
            if b < 2 or b % 2:
                raise ConfigError(f"{name} must be an even positive integer")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.max_iters < 1 or self.eval_every < 1 or self.min_iters < 0:
            raise ConfigError("max_iters and eval_every must be positive, min_iters non-negative")


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------

def filter_nonsource(classifier, dataset, config):
    """Keep correctly classified non-source samples above the confidence floor."""
    if np.any(dataset.labels == config.source_label):
        raise InputError("non-source pool contains source-class samples")
    if len(dataset) == 0:
        raise ConfigError("non-source pool empty")
    labels, conf = predict_with_confidence(classifier, dataset.take(np.arange(len(dataset))))
    keep = np.flatnonzero((labels == dataset.labels) & (conf >= config.nonsource_conf_floor))
    if len(keep) == 0:
        raise ConfigError("non-source pool empty after filtering")
    return dataset.subset(keep)


def perturb_and_clip(batch, p):
    lo, hi = DYNAMIC_RANGE
    return np.clip(np.asarray(batch, dtype=np.float64) - p, lo, hi)


def _mean_norm(grads):
    return float(np.mean(np.linalg.norm(grads.reshape(len(grads), -1), axis=1)))


def delta_scale(source_grads, nonsource_grads):
    """Ratio of mean gradient l2 norms, source over non-source, guarded."""
    source_grads = np.asarray(source_grads, dtype=np.float64)
    nonsource_grads = np.asarray(nonsource_grads, dtype=np.float64)
    if len(source_grads) == 0 or len(nonsource_grads) == 0:
        raise InputError("delta_scale needs non-empty gradient sets")
    delta = _mean_norm(source_grads) / max(_mean_norm(nonsource_grads), DELTA_FLOOR)
    return float(np.clip(delta, *DELTA_CLAMP))


def expected_fooling_gradient(classifier, source_batch, nonsource_batch, nonsource_labels, target,
                              return_delta=False):
    """Balanced expected gradient of an already perturbed and clipped mini-batch.

    Source images are differentiated towards ``target``; non-source images
    towards their own labels, rescaled by the ratio of mean gradient norms.
    """
    g_src = input_gradients(classifier, source_batch, target)
    g_oth = input_gradients(classifier, nonsource_batch, nonsource_labels)
    delta = delta_scale(g_src, g_oth)
    xi = 0.5 * (g_src.mean(axis=0) + delta * g_oth.mean(axis=0))
    return (xi, delta) if return_delta else xi


def moment_update(state, xi):
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != state.upsilon.shape:
        raise InputError("gradient shape does not match the moment state")
    return MomentState(
        state.beta1 * state.upsilon + (1 - state.beta1) * xi,
        state.beta2 * state.omega + (1 - state.beta2) * (xi * xi),
        state.t + 1,
        state.beta1,
        state.beta2,
    )


def bias_corrected_step(state):
    """Bias-corrected first moment over the root of the bias-corrected second.

    Coordinates whose second moment is exactly zero (hence first moment zero
    as well) give a zero step. Gradient entries below about 1e-150 in
    magnitude square to zero in float64 and are treated the same way.
    """
    if state.t < 1:
        raise InputError("bias correction needs t >= 1")
    v_hat = state.upsilon / (1 - state.beta1 ** state.t)
    w_hat = state.omega / (1 - state.beta2 ** state.t)
    out = np.zeros_like(v_hat)
    np.divide(v_hat, np.sqrt(w_hat), out=out, where=w_hat > 0)
    return out


def step_and_normalize(p_prev, p_step):
    """Add ``p_step`` rescaled to unit l-inf norm. Returns ``(p, stalled)``."""
    scale = float(np.max(np.abs(p_step))) if np.size(p_step) else 0.0
    if scale == 0.0:
        log.warning("zero step direction; update skipped")
        return np.array(p_prev, dtype=np.float64), True
    return p_prev + p_step / scale, False


def _shrink_to_l2(q, eta):
    # rounding can leave ||q|| a hair above eta; nudge until it is not,
    # which also makes the projection idempotent bit for bit
    shrink = np.nextafter(1.0, 0.0)
    while np.linalg.norm(q.ravel()) > eta:
        q = q * shrink
    return q


def project(p, bound):
    p = np.asarray(p, dtype=np.float64)
    if bound.mode == "linf":
        return np.clip(p, -bound.eta, bound.eta)
    if bound.mode == "l2":
        norm = np.linalg.norm(p.ravel())
        if norm <= bound.eta:
            return p.copy()
        return _shrink_to_l2(p * (bound.eta / norm), bound.eta)
    return p.copy()


def fooling_ratio(classifier, p, source_samples, target):
    source_samples = np.asarray(source_samples, dtype=np.float64)
    if len(source_samples) == 0:
        raise InputError("fooling ratio of an empty set")
    return float(np.mean(predict(classifier, perturb_and_clip(source_samples, p)) == target))


def modal_nonsource_label(histogram, source):
    """Most frequent predicted label other than ``source`` (lowest on ties)."""
    counts = np.array(histogram, dtype=np.int64)
    counts[source] = -1
    label = int(counts.argmax())
    return label, int(counts[label])


# ----------------------------------------------------------------------------
# trace
# ----------------------------------------------------------------------------

@dataclass
class AttackTrace:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    reached: bool = False
    stalls: int = 0
    iterations: int = 0

    def best_ratio(self):
        return self.records[-1]["best_ratio"] if self.records else 0.0

    def extend(self, other, **tags):
        for rec in other.records:
            self.records.append({**tags, **rec})
        for ev in other.events:
            self.events.append({**tags, **ev})
        self.stalls += other.stalls
        self.iterations += other.iterations
        self.reached = other.reached

    def lines(self):
        """Records and events as dicts, in emission order, for JSON lines."""
        return sorted(self.records + self.events, key=lambda r: (r.get("phase", 0), r["t"], "event" in r))


def _evaluate(classifier, p, source_images, config, t, best_ratio, delta):
    preds = predict(classifier, perturb_and_clip(source_images, p))
    hist = np.bincount(preds, minlength=classifier.num_classes)
    ratio = float(hist[config.target_label] / len(preds))
    hop_label, hop_count = modal_nonsource_label(hist, config.source_label)
    return {
        "t": t,
        "ratio": ratio,
        "best_ratio": max(ratio, best_ratio),
        "linf": float(np.max(np.abs(p))),
        "l2": float(np.linalg.norm(p.ravel())),
        "histogram": [int(c) for c in hist],
        "hop_label": hop_label,
        "hop_count": hop_count,
        "delta": delta,
    }


def run_fool_attack(classifier, source, nonsource, config, init=None, target_only=False, on_eval=None):
    """Iterate the targeted universal update until the fooling ratio on the
    full source set reaches ``config.gamma`` (and ``t >= min_iters``) or
    ``max_iters`` is hit, in which case the best perturbation seen is returned
    and ``trace.reached`` is False.

    ``target_only`` replaces the non-source set with the source set and
    differentiates both halves towards the target (warm-up variant).
    Returns ``(Perturbation, AttackTrace)``.
    """
    for name in ("source_label", "target_label"):
        if not 0 <= getattr(config, name) < classifier.num_classes:
            raise ConfigError(f"{name} {getattr(config, name)} out of range for {classifier.num_classes} classes")
    if len(source) == 0:
        raise InputError("source set is empty")
    if np.any(source.labels != config.source_label):
        raise InputError("source set contains non-source samples")
    if not target_only and (nonsource is None or len(nonsource) == 0):
        raise ConfigError("non-source pool empty")
    shape = classifier.input_shape
    p = np.zeros(shape) if init is None else project(np.asarray(init, dtype=np.float64), config.bound)
    if p.shape != shape:
        raise InputError("initial perturbation has the wrong shape")

    rng = make_rng(config.rng_seed)
    half = config.batch_size // 2
    source_images = source.take(np.arange(len(source)))
    state = MomentState.zeros(shape)
    trace = AttackTrace()
    best_ratio, best_p, delta = -1.0, p.copy(), None

    def evaluate(t):
        nonlocal best_ratio, best_p
        rec = _evaluate(classifier, p, source_images, config, t, max(best_ratio, 0.0), delta)
        if rec["ratio"] > best_ratio:
            best_ratio, best_p = rec["ratio"], p.copy()
        trace.records.append(rec)
        if on_eval is not None:
            on_eval(rec, p)
        return rec["ratio"] >= config.gamma and t >= config.min_iters

    done = evaluate(0)
    t = 0
    while not done and t < config.max_iters:
        idx_s = rng.integers(0, len(source), half)
        batch_s = perturb_and_clip(source.take(idx_s), p)
        if target_only:
            idx_o = rng.integers(0, len(source), half)
            batch_o = perturb_and_clip(source.take(idx_o), p)
            labels_o = np.full(half, config.target_label)
        else:
            idx_o = rng.integers(0, len(nonsource), half)
            batch_o = perturb_and_clip(nonsource.take(idx_o), p)
            labels_o = nonsource.labels[idx_o]
        t += 1
        xi, delta = expected_fooling_gradient(classifier, batch_s, batch_o, labels_o, config.target_label,
                                              return_delta=True)
        state = moment_update(state, xi)
        p, stalled = step_and_normalize(p, bias_corrected_step(state))
        if stalled:
            trace.stalls += 1
            trace.events.append({"t": t, "event": "stall"})
        p = project(p, config.bound)
        if t % config.eval_every == 0 or t == config.min_iters or t == config.max_iters:
            done = evaluate(t)

    trace.iterations = t
    trace.reached = done
    if not done:
        log.info("target fooling ratio %.3f not reached after %d iterations (best %.3f)",
                 config.gamma, t, best_ratio)
        p = best_p
    return Perturbation(p, config.bound), trace


def step1_attack(classifier, source, config, on_eval=None):
    """The warm-start step alone: ``config.step1_iters`` target-only
    iterations with batch ``config.step1_batch_size``."""
    step1 = replace(config, batch_size=config.step1_batch_size, max_iters=config.step1_iters,
                    min_iters=config.step1_iters, gamma=1.0)
    return run_fool_attack(classifier, source, None, step1, target_only=True, on_eval=on_eval)


def two_step_attack(classifier, source, nonsource, config, suppress_leakage=True, on_eval=None):
    """Warm start with the target-only variant, then run the full attack.

    Step 1 runs ``config.step1_iters`` iterations with batch
    ``config.step1_batch_size`` and ignores non-source data. Step 2 starts
    from that perturbation with fresh moment estimates and uses the rest of
    ``config`` (batch, gamma, min_iters). With ``suppress_leakage=False``
    step 2 is target-only as well, which gives the no-suppression baseline.
    """
    pert1, trace1 = step1_attack(classifier, source, config, on_eval=on_eval)
    step2 = replace(config, rng_seed=int(make_rng(config.rng_seed, 1).integers(0, 2**31 - 1)))
    pert2, trace2 = run_fool_attack(classifier, source, nonsource, step2, init=pert1.p,
                                    target_only=not suppress_leakage, on_eval=on_eval)
    trace = AttackTrace()
    trace.extend(trace1, phase=1)
    trace.extend(trace2, phase=2)
    return pert2, trace
