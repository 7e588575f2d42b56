"""PGD attacks, gradient saliency, sparsity, the 1-D detector demo and the gradient audit."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import functional as F
from . import layers as L
from . import tensor as T
from .data import Dataset, iterate_batches, subset
from .errors import NonFiniteError
from .tensor import Tensor


@contextlib.contextmanager
def frozen(model):
    """Evaluate ``model`` in eval mode without building parameter gradients."""
    params = model.parameters() if hasattr(model, "parameters") else []
    flags = [p.requires_grad for p in params]
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
        if was_training:
            model.train()


# -- adversarial attacks ---------------------------------------------------------
def default_epsilons() -> list[float]:
    return [float(e) for e in np.geomspace(0.001, 0.030, 8)]


@dataclass
class AttackConfig:
    epsilons: list[float] = field(default_factory=default_epsilons)
    steps: int = 10
    step_scale: float = 2.5          # step size = eps * step_scale / steps
    random_start: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if any(e < 0 for e in self.epsilons):
            raise ValueError("epsilons must be non-negative")

    def step_size(self, eps: float) -> float:
        return eps * self.step_scale / self.steps


def _input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    loss = F.cross_entropy(model(xt), labels)
    loss.backward()
    if not np.all(np.isfinite(xt.grad)):
        where = model.find_finite_violation(x) if hasattr(model, "find_finite_violation") else None
        raise NonFiniteError(f"non-finite input gradient (layer {where or 'unknown'})",
                             where=where)
    return xt.grad


def pgd_attack(model, images: np.ndarray, labels: np.ndarray, eps: float,
               cfg: AttackConfig | None = None, step_size: float | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """L-inf projected gradient ascent on the cross-entropy loss.

    Each step moves by ``step_size * sign(grad)`` and projects back onto the
    ``eps`` ball around ``images`` and then onto the [0, 1] box.
    """
    cfg = cfg or AttackConfig()
    x0 = np.asarray(images)
    if eps == 0:
        return x0.copy()
    step = cfg.step_size(eps) if step_size is None else step_size
    lo, hi = np.maximum(x0 - eps, 0.0), np.minimum(x0 + eps, 1.0)
    x = x0.copy()
    if cfg.random_start:
        rng = rng or np.random.default_rng(0)
        x = np.clip(x + rng.uniform(-eps, eps, size=x.shape), lo, hi)
    with frozen(model):
        for _ in range(cfg.steps):
            g = _input_gradient(model, x, labels)
            x = np.clip(x + step * np.sign(g), lo, hi)
    return x


def robustness_sweep(model, ds: Dataset, cfg: AttackConfig | None = None,
                     n_eval: int | None = None, seed: int = 0, batch_size: int = 100,
                     out_csv: str | Path | None = None) -> list[tuple[float, float]]:
    """Adversarial accuracy at every epsilon over one fixed evaluation subset."""
    cfg = cfg or AttackConfig()
    if n_eval is not None and n_eval < len(ds):
        ds = subset(ds, n_eval, stratified=True, seed=seed)
    curve = []
    for eps in cfg.epsilons:
        correct = 0
        for k, idx in enumerate(iterate_batches(len(ds), batch_size)):
            rng = np.random.default_rng([seed, k])
            x_adv = pgd_attack(model, ds.images[idx], ds.labels[idx], eps, cfg, rng=rng)
            with frozen(model), T.no_grad():
                pred = np.argmax(model(x_adv).data, axis=1)
            correct += int(np.sum(pred == ds.labels[idx]))
        curve.append((float(eps), correct / len(ds)))
    if out_csv is not None:
        write_sweep_csv(curve, len(ds), out_csv)
    return curve


def write_sweep_csv(curve, n_eval: int, path: str | Path) -> None:
    lines = ["epsilon,accuracy,n_eval"] + [f"{e!r},{a!r},{n_eval}" for e, a in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- saliency ----------------------------------------------------------------------
@dataclass
class SaliencyMap:
    grid: np.ndarray                 # (H, W), values in [0, 1]
    target_class: int
    logit: float
    image_id: int | None = None
    normalization: str = "max"
    reduction: str = "max"


def saliency_map(model: Callable, image: np.ndarray, class_idx: int,
                 image_id: int | None = None, reduction: str = "max") -> SaliencyMap:
    """Vanilla gradient saliency of one class logit w.r.t. the input pixels.

    Channel reduction is the max (or mean) of absolute gradients; the map is
    divided by its maximum unless it is identically zero.
    """
    if reduction not in ("max", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    with frozen(model):
        x = Tensor(np.asarray(image)[None], requires_grad=True)
        logits = model(x)
        target = logits[0, class_idx]
        target.backward()
    g = np.abs(x.grad[0])
    grid = g.max(axis=0) if reduction == "max" else g.mean(axis=0)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return SaliencyMap(grid, int(class_idx), float(target.item()), image_id, "max", reduction)


def sparsity_index(smap: SaliencyMap | np.ndarray) -> float:
    """Gini coefficient of the attribution mass: 0 when uniform, (n-1)/n for a point mass."""
    v = np.sort(np.abs(np.ravel(smap.grid if isinstance(smap, SaliencyMap) else smap)))
    n, total = v.size, v.sum()
    if n == 0 or total == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    gini = 2.0 * np.sum(ranks * v) / (n * total) - (n + 1.0) / n
    return max(float(gini), 0.0)   # cancellation can dip below 0 for uniform maps


def write_pgm(grid: np.ndarray, path: str | Path) -> None:
    """Binary greyscale PGM (P5, maxval 255)."""
    h, w = grid.shape
    pixels = np.rint(np.clip(grid, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a PGM written by :func:`write_pgm` (single-newline separated header)."""
    magic, dims, _maxval, pixels = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)


def write_saliency(smap: SaliencyMap, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    pgm, side = stem.with_suffix(".pgm"), stem.with_suffix(".txt")
    write_pgm(smap.grid, pgm)
    side.write_text(
        f"image_id={smap.image_id}\nclass={smap.target_class}\nlogit={smap.logit!r}\n"
        f"sparsity={sparsity_index(smap)!r}\nreduction={smap.reduction}\n", encoding="utf-8")
    return pgm, side


# -- 1-D detector demo --------------------------------------------------------------
DEMO_Q = 1e-6
DEMO_P = 2.0


def detector_response_1d(kernel: np.ndarray, signal: np.ndarray, mode: str = "scs",
                         q: float = DEMO_Q, p: float = DEMO_P) -> np.ndarray:
    """Slide ``kernel`` over ``signal`` (valid positions) with a conv or SCS detector."""
    k = np.asarray(kernel, dtype=np.float64).reshape(1, 1, 1, -1)
    x = np.asarray(signal, dtype=np.float64).reshape(1, 1, 1, -1)
    with T.no_grad():
        if mode == "conv":
            out = F.conv2d(x, k)
        elif mode == "scs":
            out = F.scs2d(x, k, p, q)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return out.data.reshape(-1)


# -- gradient audit -----------------------------------------------------------------
SAFE_MARGIN = 1e-3
FD_STEP = 1e-5
GRADCHECK_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|).

    Normalising by the gradient's scale rather than per element keeps
    near-zero entries (where difference truncation dominates) from reading as
    failures. Two all-zero gradients give 0.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every element of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + h
        up = f()
        arr[i] = orig - h
        down = f()
        arr[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g


def check_gradients(fn: Callable[..., Tensor], inputs: dict[str, np.ndarray],
                    rng: np.random.Generator, h: float = FD_STEP) -> dict[str, float]:
    """Compare autodiff and central differences for ``sum(fn(**inputs) * R)``.

    ``R`` is a fixed random projection so that every output element matters.
    Returns the relative error per input.
    """
    with T.no_grad():
        shape = fn(**{k: Tensor(v) for k, v in inputs.items()}).shape
    proj = rng.normal(size=shape)

    def scalar() -> float:
        with T.no_grad():
            return float(np.sum(fn(**{k: Tensor(v) for k, v in inputs.items()}).data * proj))

    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    (fn(**leaves) * proj).sum().backward()
    return {k: relative_error(leaves[k].grad, numeric_gradient(scalar, inputs[k], h))
            for k in inputs}


def _layer_fn(layer: L.Module, names: list[str]):
    """Wrap ``layer`` so its parameters can be fed in as inputs."""
    def fn(x, **params):
        for n in names:
            object.__setattr__(layer, n, params[n])
        return layer(x)
    return fn


def _layer_case(layer: L.Module, x: np.ndarray):
    names = [n for n, _ in layer.named_parameters()]
    inputs = {"x": x, **{n: p.data.copy() for n, p in layer.named_parameters()}}
    return _layer_fn(layer, names), inputs


def _pool_gaps(x: np.ndarray, by_abs: bool) -> float:
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
    key = np.sort(np.abs(win) if by_abs else win, axis=1)
    return float(np.min(key[:, -1] - key[:, -2]))


def _sharpen_pre(layer, x) -> np.ndarray:
    """The value fed to signed_pow (u for SCS, s.k for SDP)."""
    with T.no_grad():
        cols, oh, ow = F.im2col(Tensor(x), layer.kernel_size, layer.kernel_size,
                                layer.stride, layer.padding)
        wmat = layer.weight.data.reshape(layer.out_channels, -1)
        dot = cols.data @ wmat.T
        if isinstance(layer, L.SharpenedSDP2d):
            return dot
        sn = np.linalg.norm(cols.data, axis=1, keepdims=True)
        kn = np.linalg.norm(wmat, axis=1)
        return dot / ((sn + layer.q.data) * kn)


def _sample_case(name: str, rng: np.random.Generator):
    """One randomised instance bounded away from non-smooth points."""
    while True:
        if name in ("conv2d", "scs2d", "cossim2d", "sdp2d"):
            cls = {"conv2d": L.Conv2d, "scs2d": L.SharpCosSim2d, "cossim2d": L.CosSim2d,
                   "sdp2d": L.SharpenedSDP2d}[name]
            stride = int(rng.integers(1, 3))
            layer = cls(3, 4, 3, stride, 1, rng=rng)
            if isinstance(layer, L.SharpCosSim2d | L.SharpenedSDP2d) and layer.p_raw is not None:
                layer.p_raw.data[:] = rng.normal(0.0, 0.3, size=layer.out_channels)
            if isinstance(layer, L.SharpCosSim2d) and layer.q_raw is not None:
                layer.q_raw.data[:] = rng.normal(-2.0, 0.5)
            x = rng.normal(size=(2, 3, 5, 5))
            if name != "conv2d" and np.min(np.abs(_sharpen_pre(layer, x))) <= SAFE_MARGIN:
                continue
            return _layer_case(layer, x)
        if name in ("maxpool2d", "maxabspool2d"):
            x = rng.normal(size=(2, 3, 4, 4))
            by_abs = name == "maxabspool2d"
            if _pool_gaps(x, by_abs) <= SAFE_MARGIN or (by_abs and np.min(np.abs(x)) <= SAFE_MARGIN):
                continue
            fn = F.maxabspool2d if by_abs else F.maxpool2d
            return (lambda x: fn(x, 2)), {"x": x}
        if name == "batchnorm2d":
            layer = L.BatchNorm2d(2)
            layer.weight.data[:] = rng.uniform(0.5, 1.5, size=2)
            layer.bias.data[:] = rng.normal(size=2)
            inner = _layer_case(layer, rng.normal(size=(4, 2, 3, 3)))
            return inner
        if name == "linear":
            return _layer_case(L.Linear(6, 4, rng=rng), rng.normal(size=(3, 6)))
        if name == "relu":
            x = rng.normal(size=(3, 7))
            if np.min(np.abs(x)) <= SAFE_MARGIN:
                continue
            return T.relu, {"a": x}
        if name == "signed_pow":
            u = rng.uniform(-2.0, 2.0, size=(3, 5))
            if np.min(np.abs(u)) <= SAFE_MARGIN:
                continue
            return T.signed_pow, {"u": u, "p": rng.uniform(0.5, 3.0, size=(1, 5))}
        raise KeyError(f"no gradient check defined for {name!r}")


GRADCHECK_TARGETS = ("conv2d", "scs2d", "cossim2d", "sdp2d", "maxpool2d", "maxabspool2d",
                     "batchnorm2d", "linear", "relu", "signed_pow")


@dataclass
class GradcheckReport:
    errors: dict[str, dict[str, float]]      # target -> input name -> worst rel. error
    tolerance: float = GRADCHECK_TOL

    def worst(self, target: str) -> float:
        return max(self.errors[target].values())

    @property
    def passed(self) -> bool:
        return all(self.worst(t) < self.tolerance for t in self.errors)

    def lines(self) -> list[str]:
        out = []
        for t, errs in self.errors.items():
            status = "PASS" if self.worst(t) < self.tolerance else "FAIL"
            detail = " ".join(f"{k}={v:.2e}" for k, v in errs.items())
            out.append(f"{status} {t:<13} max_rel_err={self.worst(t):.2e}  [{detail}]")
        return out


def gradcheck_suite(targets=GRADCHECK_TARGETS, instances: int = 20, seed: int = 0
                    ) -> GradcheckReport:
    """Analytic vs central-difference gradients on randomised safe instances.

    Pooling windows whose top two candidates lie within 1e-3 and inputs within
    1e-3 of a kink are resampled rather than checked.
    """
    rng = np.random.default_rng(seed)
    errors: dict[str, dict[str, float]] = {}
    for target in targets:
        worst: dict[str, float] = {}
        for _ in range(instances):
            fn, inputs = _sample_case(target, rng)
            for k, e in check_gradients(fn, inputs, rng).items():
                worst[k] = max(worst.get(k, 0.0), e)
        errors[target] = worst
    return GradcheckReport(errors)
