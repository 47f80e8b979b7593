"""Perceptual-aware Lab attack and the PGD / C&W-style baselines.

All attacks take clean images in [0, 1] (``(..., H, W, 3)``; a leading batch
axis is attacked elementwise) and a :class:`ConditionalGenerator` that works
on [-1, 1] inputs. They minimise a shared objective over cycled attribute
labels and return the protected images together with an :class:`AttackTrace`.

Perturbation units: the Lab attack perturbs a/b normalised by 128; the RGB
baselines perturb pixels on the generator's [-1, 1] scale. The same epsilon
therefore bounds a range of width 2 in both cases.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import colorspace as cs
from .colorspace import ColorSpaceTag, RGBImage
from .seeding import substream
from .surrogate import ConditionalGenerator, forward_with_pullback
from .transforms import DifferentiableTransform

OBJECTIVE_MODES = ("toward_zero", "toward_one", "toward_noise", "away_from_translation")
LOSS_NORMS = ("L1", "L2")
INIT_MODES = ("zeros", "uniform")
DEFAULT_ITERATIONS = {"antiforge": 500, "cw": 500, "pgd": 10}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AttackDivergedError(RuntimeError):
    def __init__(self, iteration: int, what: str):
        super().__init__(f"attack diverged at iteration {iteration}: non-finite {what}")
        self.iteration = iteration


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    learning_rate: float = 1e-4
    iterations: int = 500
    objective_mode: str = "away_from_translation"
    labels: tuple[int, ...] | None = None  # None: every label of the model
    loss_norm: str = "L2"
    seed: int = 0
    # Zero-start is a saddle of the away-from-translation objective (its
    # gradient vanishes at x_adv = x), so the default start is a small
    # seeded uniform draw of init_scale * epsilon.
    init: str = "uniform"
    init_scale: float = 0.01
    step_size: float | None = None  # PGD only; default epsilon / iterations

    def __post_init__(self) -> None:
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError(f"iterations must be a non-negative integer, got {self.iterations}")
        if self.objective_mode not in OBJECTIVE_MODES:
            raise ValueError(f"objective_mode must be one of {OBJECTIVE_MODES}, got {self.objective_mode!r}")
        if self.loss_norm not in LOSS_NORMS:
            raise ValueError(f"loss_norm must be one of {LOSS_NORMS}, got {self.loss_norm!r}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(c) for c in self.labels))
            if not self.labels:
                raise ValueError("labels must be non-empty")
        object.__setattr__(self, "iterations", int(self.iterations))

    @classmethod
    def for_method(cls, method: str, **overrides) -> "AttackConfig":
        base = cls(iterations=DEFAULT_ITERATIONS.get(method, 500))
        return replace(base, **overrides) if overrides else base

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], method: str | None = None) -> "AttackConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        kw = dict(d)
        if "labels" in kw and kw["labels"] is not None:
            kw["labels"] = tuple(kw["labels"])
        if method is not None:
            return cls.for_method(method, **kw)
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["labels"] is not None:
            d["labels"] = list(d["labels"])
        return d


@dataclass
class Perturbation:
    """Lab a/b perturbation in normalised units."""

    theta_a: np.ndarray
    theta_b: np.ndarray

    def linf(self) -> float:
        return float(max(np.abs(self.theta_a).max(initial=0.0), np.abs(self.theta_b).max(initial=0.0)))


@dataclass
class AttackTrace:
    losses: np.ndarray  # (K, *batch); objective before each update
    clamp_counts: np.ndarray  # (K,) range clamps while rendering plus pixels pulled back into gamut
    linf: np.ndarray  # (K,) max |theta| after each clip
    labels: np.ndarray  # (K,) label used in each iteration
    final_distortion: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (*batch,)

    def __len__(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict[str, Any]:
        return {
            "losses": np.asarray(self.losses).tolist(),
            "clamp_counts": np.asarray(self.clamp_counts).tolist(),
            "linf": np.asarray(self.linf).tolist(),
            "labels": np.asarray(self.labels).tolist(),
            "final_distortion": np.asarray(self.final_distortion).tolist(),
        }


# -- objective -------------------------------------------------------------------


def _distance(y: np.ndarray, o: np.ndarray, norm: str) -> tuple[np.ndarray, np.ndarray]:
    diff = y - o
    n = np.prod(y.shape[-3:])
    if norm == "L2":
        return np.mean(diff * diff, axis=(-3, -2, -1)), 2.0 * diff / n
    return np.mean(np.abs(diff), axis=(-3, -2, -1)), np.sign(diff) / n


def objective_target(shape: tuple[int, ...], mode: str, seed: int = 0) -> np.ndarray | None:
    """The fixed target image o for toward-target modes (None for away mode)."""
    if mode == "toward_zero":
        return np.zeros(shape)
    if mode == "toward_one":
        return np.ones(shape)
    if mode == "toward_noise":
        return substream(seed, "noise-objective").standard_normal(shape)
    if mode == "away_from_translation":
        return None
    raise ValueError(f"objective_mode must be one of {OBJECTIVE_MODES}, got {mode!r}")


def objective_loss(
    y: np.ndarray,
    mode: str,
    norm: str = "L2",
    reference: np.ndarray | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-image loss to minimise and its gradient with respect to ``y``.

    Toward-target modes return L(y, o); ``away_from_translation`` returns
    -L(y, reference) where the reference is the clean translation G(x, c).
    The loss is a mean over the trailing H, W, 3 axes.
    """
    y = np.asarray(y, dtype=np.float64)
    if norm not in LOSS_NORMS:
        raise ValueError(f"loss_norm must be one of {LOSS_NORMS}, got {norm!r}")
    if mode == "away_from_translation":
        if reference is None:
            raise ValueError("away_from_translation needs the clean translation as reference")
        loss, grad = _distance(y, np.asarray(reference, dtype=np.float64), norm)
        return -loss, -grad
    return _distance(y, objective_target(y.shape, mode, seed), norm)


# -- perturbation parameterisations ---------------------------------------------------


class _Parameterization:
    """Maps theta (normalised units) to an RGB image in [0, 1].

    ``render(theta)`` returns ``(x_adv, n_clamped, pullback)`` where
    ``pullback`` maps a gradient on x_adv to a gradient on theta.
    """

    theta_channels = 3

    def __init__(self, x01: np.ndarray):
        self.x01 = x01

    def render(self, theta):
        raise NotImplementedError

    def project(self, theta):
        """Extra feasibility step after the box clip; returns (theta, n_adjusted)."""
        return theta, 0


class _RGBParam(_Parameterization):
    # theta lives on the [-1, 1] pixel scale
    def render(self, theta):
        raw = self.x01 + 0.5 * theta
        inside = (raw >= 0.0) & (raw <= 1.0)
        n = int(raw.size - np.count_nonzero(inside))
        return np.clip(raw, 0.0, 1.0), n, lambda g: 0.5 * np.where(inside, g, 0.0)


class _LabParam(_Parameterization):
    theta_channels = 2

    def __init__(self, x01):
        super().__init__(x01)
        # x is fixed, so its Lab decomposition is computed once for the loop
        self.lab = cs.rgb_to_lab_array(x01)

    def render(self, theta):
        lab = self.lab.copy()
        lab[..., 1:] += cs.AB_SCALE * theta
        rgb, n, pull = cs.lab_to_rgb_with_pullback(lab)
        return rgb, n, lambda g: cs.AB_SCALE * pull(g)[..., 1:]

    def project(self, theta):
        # Shrink out-of-gamut a/b shifts along their own direction instead of
        # letting the RGB clamp move L.
        scale = cs.ab_gamut_scale(self.lab, cs.AB_SCALE * theta)
        return theta * scale[..., None], int(np.count_nonzero(scale < 1.0))


class _UnitChannelParam(_Parameterization):
    """Perturbs selected [0, 1] channels of HSV or CMYK; theta scale is 1/2."""

    def __init__(self, x01, tag: ColorSpaceTag, channels: tuple[int, ...]):
        super().__init__(x01)
        self.tag = tag
        self.channels = list(channels)
        self.theta_channels = len(channels)
        self.base = cs.convert(x01, tag)

    def render(self, theta):
        raw = self.base.copy()
        sel = raw[..., self.channels] + 0.5 * theta
        sel_inside = (sel >= 0.0) & (sel <= 1.0)
        raw[..., self.channels] = np.clip(sel, 0.0, 1.0)
        unclamped = cs._INVERSE[self.tag](raw)
        n = int(sel.size - np.count_nonzero(sel_inside))
        n += int(np.count_nonzero((unclamped < -cs.CLAMP_TOL) | (unclamped > 1.0 + cs.CLAMP_TOL)))

        def pullback(g):
            g = cs.inverse_convert_vjp(raw, self.tag, g)[..., self.channels]
            return 0.5 * np.where(sel_inside, g, 0.0)

        return np.clip(unclamped, 0.0, 1.0), n, pullback


def make_parameterization(space: "ColorSpaceTag | str", x01: np.ndarray) -> _Parameterization:
    tag = ColorSpaceTag.parse(space)
    if tag is ColorSpaceTag.RGB:
        return _RGBParam(x01)
    if tag is ColorSpaceTag.LAB:
        return _LabParam(x01)
    if tag is ColorSpaceTag.HSV:
        return _UnitChannelParam(x01, tag, (1, 2))  # S, V
    return _UnitChannelParam(x01, tag, (0, 1, 2))  # C, M, Y


# -- shared optimisation loop ---------------------------------------------------------


def _as_unit(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, RGBImage):
        return x.unit(), True
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected image(s) of shape (..., H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise cs.InvalidInputError("input image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("input images must lie in [0, 1]")
    return arr, False


def _labels(model: ConditionalGenerator, cfg: AttackConfig) -> tuple[int, ...]:
    labels = cfg.labels if cfg.labels is not None else tuple(range(model.n_labels))
    for c in labels:
        if not 0 <= c < model.n_labels:
            raise ValueError(f"label {c} out of range for a model with {model.n_labels} labels")
    return labels


def output_distortion(model: ConditionalGenerator, x01, x_adv01, labels: Sequence[int]) -> np.ndarray:
    """Per-image mean over labels of the L2 distortion between G(x, c) and G(x_adv, c)."""
    xm, am = 2.0 * x01 - 1.0, 2.0 * x_adv01 - 1.0
    total = 0.0
    for c in labels:
        d = model.forward(xm, c) - model.forward(am, c)
        total = total + np.mean(d * d, axis=(-3, -2, -1))
    return np.asarray(total / len(labels))


def _run(
    x,
    model: ConditionalGenerator,
    cfg: AttackConfig,
    space: ColorSpaceTag,
    update: str,
    transform_sampler=None,
):
    x01, wrap = _as_unit(x)
    labels = _labels(model, cfg)
    param = make_parameterization(space, x01)
    theta_shape = x01.shape[:-1] + (param.theta_channels,)
    K = cfg.iterations
    eps = float(cfg.epsilon)
    batch = x01.shape[:-3]

    theta = np.zeros(theta_shape)
    if K > 0 and cfg.init == "uniform" and eps > 0:
        span = cfg.init_scale * eps
        theta = substream(cfg.seed, "attack").uniform(-span, span, theta_shape)
        theta = param.project(theta)[0]

    losses = np.zeros((K,) + batch)
    clamps = np.zeros(K, dtype=np.int64)
    linf = np.zeros(K)
    used = np.zeros(K, dtype=np.int64)

    target = objective_target(x01.shape, cfg.objective_mode, cfg.seed)
    eot_rng = substream(cfg.seed, "eot")
    ref_cache: dict[int, np.ndarray] = {}
    m = np.zeros(theta_shape)
    v = np.zeros(theta_shape)
    alpha = cfg.step_size if cfg.step_size is not None else (eps / K if K else 0.0)

    for i in range(K):
        c = labels[i % len(labels)]
        used[i] = c
        x_adv, clamps[i], pull_theta = param.render(theta)
        t: DifferentiableTransform | None = transform_sampler(eot_rng) if transform_sampler else None
        xt = t.forward(x_adv) if t is not None else x_adv
        xm = 2.0 * xt - 1.0
        y, pull_model = forward_with_pullback(model, xm, c)

        if target is None:
            if t is None or t.name == "identity":
                if c not in ref_cache:
                    ref_cache[c] = model.forward(2.0 * x01 - 1.0, c)
                ref = ref_cache[c]
            else:
                ref = model.forward(2.0 * t.forward(x01) - 1.0, c)
            loss, gy = objective_loss(y, cfg.objective_mode, cfg.loss_norm, reference=ref)
        else:
            loss, gy = _distance(y, target, cfg.loss_norm)
        if not np.all(np.isfinite(loss)):
            raise AttackDivergedError(i, "loss")
        losses[i] = loss

        g = 2.0 * pull_model(gy)
        if t is not None:
            g = t.vjp(x_adv, g)
        g = pull_theta(g)
        if not np.all(np.isfinite(g)):
            raise AttackDivergedError(i, "gradient")

        if update == "adam":
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
            mhat = m / (1.0 - ADAM_BETA1 ** (i + 1))
            vhat = v / (1.0 - ADAM_BETA2 ** (i + 1))
            theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
        else:
            theta = theta - alpha * np.sign(g)
        theta, n_adjusted = param.project(np.clip(theta, -eps, eps))
        clamps[i] += n_adjusted
        linf[i] = np.abs(theta).max(initial=0.0)

    x_adv = param.render(theta)[0]
    trace = AttackTrace(losses, clamps, linf, used, output_distortion(model, x01, x_adv, labels))
    out = RGBImage(x_adv) if wrap else x_adv
    return out, theta, trace


def colorspace_attack(x, model, cfg: AttackConfig, space="Lab", transform_sampler=None):
    """Adam attack on the channels of ``space`` (RGB, Lab a/b, HSV S/V, CMYK C/M/Y).

    Returns ``(x_adv, theta, trace)`` with theta in normalised channel units.
    """
    return _run(x, model, cfg, ColorSpaceTag.parse(space), "adam", transform_sampler)


def antiforge_attack(x, model: ConditionalGenerator, cfg: AttackConfig | None = None, transform_sampler=None):
    """Perceptual-aware perturbation of the Lab a/b channels.

    Each iteration adds theta to the normalised a/b channels of x, converts
    back to RGB, evaluates the objective on the next label of the
    round-robin, takes an Adam step on theta_a and theta_b and clips both to
    [-epsilon, epsilon]. ``iterations == 0`` returns the colour round trip
    of x with a zero perturbation.

    Returns ``(x_adv, Perturbation, AttackTrace)``.
    """
    cfg = cfg or AttackConfig.for_method("antiforge")
    x_adv, theta, trace = _run(x, model, cfg, ColorSpaceTag.LAB, "adam", transform_sampler)
    return x_adv, Perturbation(theta[..., 0], theta[..., 1]), trace


def pgd_attack(x, model: ConditionalGenerator, cfg: AttackConfig | None = None, transform_sampler=None):
    """Iterative sign-gradient attack on RGB pixels; step ``epsilon / K`` by default.

    Returns ``(x_adv, AttackTrace)``.
    """
    cfg = cfg or AttackConfig.for_method("pgd")
    x_adv, _, trace = _run(x, model, cfg, ColorSpaceTag.RGB, "sign", transform_sampler)
    return x_adv, trace


def cw_attack(x, model: ConditionalGenerator, cfg: AttackConfig | None = None, transform_sampler=None):
    """Adam on an RGB perturbation clipped to the epsilon box each step.

    Returns ``(x_adv, AttackTrace)``.
    """
    cfg = cfg or AttackConfig.for_method("cw")
    x_adv, _, trace = _run(x, model, cfg, ColorSpaceTag.RGB, "adam", transform_sampler)
    return x_adv, trace


ATTACKS: dict[str, Callable] = {"antiforge": antiforge_attack, "pgd": pgd_attack, "cw": cw_attack}


def eot_wrap(attack: Callable, transform_sampler) -> Callable:
    """Return ``attack`` taking each gradient through a freshly sampled transform."""
    if not callable(transform_sampler) or not getattr(transform_sampler, "differentiable", False):
        raise TypeError(
            f"EOT needs a sampler of differentiable transforms; got {type(transform_sampler).__name__}"
        )
    wrapped = functools.partial(attack, transform_sampler=transform_sampler)
    functools.update_wrapper(wrapped, attack)
    return wrapped
