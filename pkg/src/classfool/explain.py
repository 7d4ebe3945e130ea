"""
Explanation perturbations.

Same stochastic machinery as the fooling attack, but every input (a seed
image plus a pool of non-target images) is pushed towards the target label,
the seed's gradient carries its own weight, each new iterate is compared with
its sign-flipped twin, and the result is periodically passed through
model-driven refinement. Also: Gaussian input generation from a class's
image statistics and the masked (inpainting) objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attack import (
    AttackTrace,
    MomentState,
    NormBound,
    Perturbation,
    bias_corrected_step,
    make_rng,
    moment_update,
    perturb_and_clip,
    project,
    step_and_normalize,
)
from .errors import ConfigError, InputError, NumericError
from .nn import DYNAMIC_RANGE, forward, input_gradients, log_softmax, predict
from .refine import bicubic_upsample, refine_details

log = logging.getLogger(__name__)


@dataclass
class ExplainConfig:
    target_label: int
    seed: np.ndarray
    seed_weight: float = 0.5
    gamma: float = 0.8
    bound: NormBound = field(default_factory=lambda: NormBound("linf", 10.0))
    batch_size: int = 64
    pool_size: int = 255
    refine_every: int = 50
    refine_until: int = 300
    max_iters: int = 2000
    eval_every: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        self.seed = np.asarray(self.seed, dtype=np.float64)
        if not 0 <= self.seed_weight <= 1:
            raise ConfigError("seed_weight must lie in [0, 1]")
        if self.batch_size < 1 or self.pool_size < 1 or self.max_iters < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, pool_size, max_iters and eval_every must be positive")
        if self.refine_every < 1 or self.refine_until < 0:
            raise ConfigError("refine_every must be positive and refine_until non-negative")


@dataclass
class InpaintSpec:
    """Binary mask (1 marks the corrupt region), penalty weight, corrupted seed."""

    mask: np.ndarray
    beta: float = 10.0
    seed: np.ndarray | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise InputError("inpainting mask must be binary")
        if self.seed is not None:
            self.seed = np.asarray(self.seed, dtype=np.float64)
            try:
                ok = np.broadcast_shapes(self.mask.shape, self.seed.shape) == self.seed.shape
            except ValueError:
                ok = False
            if not ok:
                raise InputError("mask shape does not match the seed")


def explain_gradient(classifier, seed, pool_batch, p, target, alpha):
    g_seed = input_gradients(classifier, perturb_and_clip(seed, p)[None], target)[0]
    if alpha == 1:
        return g_seed
    g_pool = input_gradients(classifier, perturb_and_clip(pool_batch, p), target).mean(axis=0)
    return alpha * g_seed + (1 - alpha) * g_pool


def target_score(classifier, q, batch, target):
    """Mean log-probability of ``target`` over ``batch`` perturbed by ``q``."""
    logits = forward(classifier, perturb_and_clip(batch, q))
    return float(log_softmax(logits)[:, target].mean())


def direction_inversion_check(classifier, p_candidate, eval_batch, target):
    """Return ``-p`` when it scores at least as well as ``p``."""
    if len(eval_batch) == 0:
        raise InputError("direction check needs a non-empty batch")
    if not np.any(p_candidate):
        return p_candidate
    forward_score = target_score(classifier, p_candidate, eval_batch, target)
    inverted_score = target_score(classifier, -p_candidate, eval_batch, target)
    return -p_candidate if inverted_score >= forward_score else p_candidate


def masked_objective(classifier, samples, p, spec, target):
    """mean J(clip(s - p), target) + beta * ||p * (1 - F)||^2."""
    logits = forward(classifier, perturb_and_clip(samples, p))
    ce = -log_softmax(logits)[:, target].mean()
    outside = p * (1 - spec.mask)
    return float(ce + spec.beta * np.sum(outside * outside))


def masked_objective_gradient(classifier, samples, p, spec, target):
    """Gradient of :func:`masked_objective` with respect to ``p``.

    The clip passes gradient only where ``0 < s - p < 255``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    lo, hi = DYNAMIC_RANGE
    raw = samples - p
    x = np.clip(raw, lo, hi)
    g = input_gradients(classifier, x, target)
    g = np.where((raw > lo) & (raw < hi), g, 0.0)
    return -g.mean(axis=0) + 2 * spec.beta * p * (1 - spec.mask)


@dataclass
class ExplainResult:
    perturbation: Perturbation
    trace: AttackTrace
    phase_a_iters: int
    pool_indices: np.ndarray


def run_explain(classifier, pool, config, inpaint=None):
    """Seed-anchored explanation perturbation with interleaved refinement.

    Phase A iterates until the fraction of pool plus seed predicted as the
    target reaches ``gamma`` (or ``max_iters``); phase B refines once; phase C
    runs ``refine_until`` further iterations, refining every
    ``refine_every``. Each refinement is followed by projection onto the
    norm ball. Only non-target pool samples are ever read.

    With ``inpaint`` the step direction comes from the masked objective
    instead, weighted between seed and pool the same way.
    """
    target = config.target_label
    if config.seed.shape != classifier.input_shape:
        raise InputError("seed does not match the classifier input shape")
    rng = make_rng(config.rng_seed)
    candidates = np.flatnonzero(pool.labels != target)
    if len(candidates) == 0:
        raise ConfigError("explanation pool has no non-target samples")
    if len(candidates) > config.pool_size:
        candidates = np.sort(rng.choice(candidates, config.pool_size, replace=False))
    pool_x = pool.take(candidates)
    everything = np.concatenate([config.seed[None], pool_x])
    alpha = config.seed_weight

    p = np.zeros(classifier.input_shape)
    state = MomentState.zeros(p.shape)
    trace = AttackTrace()

    def evaluate(t, phase):
        preds = predict(classifier, perturb_and_clip(everything, p))
        rec = {
            "phase": phase,
            "t": t,
            "ratio": float(np.mean(preds == target)),
            "seed_label": int(preds[0]),
            "linf": float(np.max(np.abs(p))),
            "l2": float(np.linalg.norm(p.ravel())),
        }
        rec["best_ratio"] = max(rec["ratio"], trace.best_ratio())
        trace.records.append(rec)
        return rec["ratio"]

    def iterate(t):
        nonlocal p, state
        batch = pool_x[rng.integers(0, len(pool_x), config.batch_size)]
        if inpaint is None:
            xi = explain_gradient(classifier, config.seed, batch, p, target, alpha)
        else:
            xi = -(alpha * masked_objective_gradient(classifier, config.seed[None], p, inpaint, target)
                   + (1 - alpha) * masked_objective_gradient(classifier, batch, p, inpaint, target))
        state = moment_update(state, xi)
        p, stalled = step_and_normalize(p, bias_corrected_step(state))
        if stalled:
            trace.stalls += 1
            trace.events.append({"phase": phase, "t": t, "event": "stall"})
        p = direction_inversion_check(classifier, p, batch, target)
        p = project(p, config.bound)

    def refine(t):
        nonlocal p
        details = refine_details(classifier, p)
        trace.events.append({"phase": phase, "t": t, **details.event()})
        p = project(details.perturbation, config.bound)

    phase = "A"
    t = 0
    reached = evaluate(0, phase) >= config.gamma
    while not reached and t < config.max_iters:
        t += 1
        iterate(t)
        if t % config.eval_every == 0 or t == config.max_iters:
            reached = evaluate(t, phase) >= config.gamma
    phase_a_iters = t
    trace.reached = reached
    if not reached:
        log.info("explanation target ratio %.2f not reached in phase A", config.gamma)

    phase = "B"
    refine(t)
    evaluate(t, phase)

    phase = "C"
    for k in range(1, config.refine_until + 1):
        t += 1
        iterate(t)
        if k % config.refine_every == 0:
            refine(t)
        if k % config.eval_every == 0 or k == config.refine_until:
            evaluate(t, phase)
    trace.iterations = t
    return ExplainResult(Perturbation(p, config.bound), trace, phase_a_iters, candidates)


# ----------------------------------------------------------------------------
# Gaussian input generation
# ----------------------------------------------------------------------------

def average_pool(images, factor):
    n, h, w, c = images.shape
    if h % factor or w % factor:
        raise InputError(f"image size {h}x{w} not divisible by {factor}")
    return images.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


@dataclass(eq=False)
class GaussianSampler:
    mean: np.ndarray
    cov: np.ndarray
    input_shape: tuple
    factor: int = 4
    jitter: float = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not np.array_equal(self.cov, self.cov.T):
            raise InputError("covariance must be symmetric")
        try:
            self.chol = np.linalg.cholesky(self.cov + self.jitter * np.eye(len(self.cov)))
        except np.linalg.LinAlgError as exc:
            raise NumericError("Cholesky factorisation failed after jitter") from exc

    @classmethod
    def fit(cls, images, factor=4, jitter=1e-6):
        images = np.asarray(images, dtype=np.float64)
        if len(images) < 2:
            raise InputError("need at least two images to fit a Gaussian")
        small = average_pool(images, factor)
        flat = small.reshape(len(small), -1)
        mu = flat.mean(axis=0)
        centred = flat - mu
        cov = centred.T @ centred / len(flat)
        cov = 0.5 * (cov + cov.T)
        return cls(mu.reshape(small.shape[1:]), cov, images.shape[1:], factor, jitter)

    def sample_small(self, count, rng):
        z = rng.standard_normal((count, len(self.chol)))
        return (self.mean.ravel() + z @ self.chol.T).reshape((count,) + self.mean.shape)

    def sample(self, count, rng):
        small = self.sample_small(count, rng)
        h, w = self.input_shape[:2]
        big = np.stack([bicubic_upsample(s, (h, w)) for s in small])
        return np.clip(big, *DYNAMIC_RANGE)


def gaussian_inputs(target_class_images, count=256, rng_seed=0, factor=4, jitter=1e-6):
    """Sample ``count`` images from the class's downsampled Gaussian.

    Returns ``(seed, pool, sampler)``: the first draw is the seed, the rest the pool.
    """
    sampler = GaussianSampler.fit(target_class_images, factor, jitter)
    images = sampler.sample(count, make_rng(rng_seed))
    return images[0], images[1:], sampler
