"""FGSM, BIM, C&W-L2 and a masked patch attack against a TrainedModel.

All attacks run batched; rows never interact, so attacking a batch gives the
same bytes as attacking each image alone. Every success flag is set from a
fresh forward pass over the returned images.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .datagen import Dataset, dataset_to_bytes, dataset_from_bytes
from .errors import ConfigurationError, FormatError
from .model import TrainedModel, argmax_labels

METHODS = ("fgsm", "bim", "cw", "patch")


@dataclass
class AttackConfig:
    method: str = "cw"
    target: str = "untargeted"  # untargeted | first | next | "<class id>"
    eps: float = 0.15  # L-inf budget for fgsm/bim
    steps: int = 10
    step_size: float = 0.03
    cw_c: float = 1.0
    cw_kappa: float = 0.0
    cw_search_rounds: int = 9
    cw_iterations: int = 200
    cw_lr: float = 0.2
    mask: tuple[int, int, int, int] = (6, 6, 4, 4)  # row, col, height, width
    patch_steps: int = 50
    patch_step_size: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if self.eps < 0 or self.step_size <= 0 or self.steps < 1:
            raise ConfigurationError("attack budget, steps and step size must be positive")
        if self.method == "bim" and self.step_size > self.eps:
            raise ConfigurationError("bim step size must not exceed eps")
        if self.cw_iterations < 1 or self.cw_search_rounds < 1 or self.cw_c < 0:
            raise ConfigurationError("cw needs iterations >= 1, rounds >= 1, c >= 0")
        self.mask = tuple(int(v) for v in self.mask)
        if self.target not in ("untargeted", "first", "next"):
            try:
                int(self.target)
            except ValueError:
                raise ConfigurationError(f"target must be untargeted, first, next or a class id, not {self.target!r}")


@dataclass
class AdversarialExample:
    index: int
    image: np.ndarray
    gold: int
    label: int
    target: int | None
    success: bool
    method: str
    l2: float
    linf: float
    iterations: int
    extra: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "image"}
        return d


def perturbation_norms(adv: np.ndarray, clean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = (adv - clean).reshape(len(adv), -1)
    return np.sqrt(T.ordered_sum(d * d, axis=1)), np.abs(d).max(axis=1)


def _sign(g: np.ndarray) -> np.ndarray:
    return np.sign(g) + 0.0  # sign(0) = 0; +0.0 clears negative zeros


def _ce_grad(model, x, labels):
    return model.input_gradient(x, lambda z: T.cross_entropy_backward(z, labels))


def resolve_targets(model: TrainedModel, images: np.ndarray, golds: np.ndarray, target: str) -> np.ndarray | None:
    """Target class per row, or ``None`` when untargeted.

    ``first``/``next`` pick the most / second-most likely non-gold class of the
    clean image (ties to the lower index).
    """
    if target == "untargeted":
        return None
    if target in ("first", "next"):
        z = model.logits(images).copy()
        z[np.arange(len(z)), golds] = -np.inf
        order = np.argsort(-z, axis=1, kind="stable")
        return order[:, 0 if target == "first" else 1].astype(np.int64)
    t = int(target)
    if not 0 <= t < model.spec.num_classes:
        raise ConfigurationError(f"target class {t} outside [0, {model.spec.num_classes})")
    return np.full(len(golds), t, dtype=np.int64)


def _success(labels, golds, targets):
    return labels != golds if targets is None else labels == targets


def fgsm_batch(model, images, golds, eps, targets=None) -> np.ndarray:
    if targets is None:
        _, g = _ce_grad(model, images, golds)
        return np.clip(images + eps * _sign(g), 0.0, 1.0)
    _, g = _ce_grad(model, images, targets)
    return np.clip(images - eps * _sign(g), 0.0, 1.0)


def bim_batch(model, images, golds, eps, steps, step_size, targets=None):
    """Iterated signed steps with L-inf and box projection; a row freezes once it succeeds."""
    x = images.copy()
    active = np.ones(len(x), dtype=bool)
    used = np.zeros(len(x), dtype=np.int64)
    lo, hi = images - eps, images + eps
    for _ in range(steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        xa = x[idx]
        if targets is None:
            _, g = _ce_grad(model, xa, golds[idx])
            step = xa + step_size * _sign(g)
        else:
            _, g = _ce_grad(model, xa, targets[idx])
            step = xa - step_size * _sign(g)
        x[idx] = np.clip(np.clip(step, lo[idx], hi[idx]), 0.0, 1.0)
        used[idx] += 1
        hit = _success(model.predict_labels(x[idx]), golds[idx], None if targets is None else targets[idx])
        active[idx[hit]] = False
    return x, used


def _cw_margin_grad(z, golds, kappa):
    """Objective term max(Z_gold - max_other, -kappa) and its logit gradient, per row."""
    rows = np.arange(len(z))
    other = z.copy()
    other[rows, golds] = -np.inf
    j = np.argmax(other, axis=1)
    margin = z[rows, golds] - z[rows, j]
    live = margin > -kappa
    g = np.zeros_like(z)
    g[rows[live], golds[live]] = 1.0
    g[rows[live], j[live]] -= 1.0
    return np.maximum(margin, -kappa), g


def cw_batch(model: TrainedModel, images, golds, config: AttackConfig):
    """Untargeted C&W-L2: plain gradient descent in tanh space with binary search over c."""
    n = len(images)
    clean = images
    start = np.arctanh(2.0 * np.clip(images, 1e-6, 1.0 - 1e-6) - 1.0)
    c = np.full(n, float(config.cw_c))
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    best_l2 = np.full(n, np.inf)
    best = np.array(clean, copy=True)
    last = np.array(clean, copy=True)
    iterations = np.zeros(n, dtype=np.int64)
    shape = (n,) + (1,) * (images.ndim - 1)
    for _ in range(config.cw_search_rounds):
        w = start.copy()
        found = np.zeros(n, dtype=bool)
        for _ in range(config.cw_iterations):
            x = (np.tanh(w) + 1.0) / 2.0
            z, gx = model.input_gradient(
                x, lambda z: _cw_margin_grad(z, golds, config.cw_kappa)[1] * c[:, None])
            # success bookkeeping on the iterate the gradient was taken at
            l2, _ = perturbation_norms(x, clean)
            hit = argmax_labels(z) != golds
            better = hit & (l2 < best_l2)
            best_l2 = np.where(better, l2, best_l2)
            best[better] = x[better]
            found |= hit
            grad_x = 2.0 * (x - clean) + gx
            w = w - config.cw_lr * grad_x * ((1.0 - np.tanh(w) ** 2) / 2.0)
        iterations += config.cw_iterations
        last = (np.tanh(w) + 1.0) / 2.0
        upper = np.where(found, np.minimum(upper, c), upper)
        lower = np.where(found, lower, np.maximum(lower, c))
        c = np.where(upper < 1e9, (lower + upper) / 2.0, c * 10.0)
    out = np.where(np.isfinite(best_l2).reshape(shape), best, last)
    return out, iterations


def patch_batch(model, images, golds, targets, mask, steps, step_size):
    """Targeted signed descent restricted to ``mask`` pixels; no L-inf cap inside the mask."""
    x = images.copy()
    active = np.ones(len(x), dtype=bool)
    used = np.zeros(len(x), dtype=np.int64)
    for _ in range(steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        _, g = _ce_grad(model, x[idx], targets[idx])
        moved = np.clip(x[idx] - step_size * _sign(g), 0.0, 1.0)
        x[idx] = np.where(mask, moved, x[idx])
        used[idx] += 1
        active[idx[model.predict_labels(x[idx]) == targets[idx]]] = False
    return x, used


def mask_array(shape, rect) -> np.ndarray:
    r, c, h, w = rect
    _, hh, ww = shape
    if h <= 0 or w <= 0:
        raise ConfigurationError("patch mask is empty")
    if r < 0 or c < 0 or r + h > hh or c + w > ww:
        raise ConfigurationError(f"patch mask {rect} leaves the {hh}x{ww} image")
    m = np.zeros(shape, dtype=bool)
    m[:, r:r + h, c:c + w] = True
    return m


def _run_chunk(model, images, golds, config) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    targets = resolve_targets(model, images, golds, config.target)
    if config.method == "fgsm":
        return fgsm_batch(model, images, golds, config.eps, targets), np.ones(len(images), dtype=np.int64), targets
    if config.method == "bim":
        x, used = bim_batch(model, images, golds, config.eps, config.steps, config.step_size, targets)
        return x, used, targets
    if config.method == "cw":
        if targets is not None:
            raise ConfigurationError("the C&W implementation is untargeted only")
        x, used = cw_batch(model, images, golds, config)
        return x, used, None
    if targets is None:
        raise ConfigurationError("patch attack needs a target strategy (first, next or a class id)")
    mask = mask_array(images.shape[1:], config.mask)
    x, used = patch_batch(model, images, golds, targets, mask, config.patch_steps, config.patch_step_size)
    return x, used, targets


def run_attack(model: TrainedModel, images: np.ndarray, golds, config: AttackConfig,
               indices=None, threads: int = 1, chunk: int = 64) -> list[AdversarialExample]:
    """Attack every row; results are ordered by input row whatever ``threads`` is."""
    images = np.asarray(images, dtype=np.float64)
    golds = np.asarray(golds, dtype=np.int64)
    indices = np.arange(len(images)) if indices is None else np.asarray(indices)
    spans = [(s, min(s + chunk, len(images))) for s in range(0, len(images), chunk)]
    work = lambda span: _run_chunk(model, images[span[0]:span[1]], golds[span[0]:span[1]], config)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(s) for s in spans]
    adv = np.concatenate([p[0] for p in parts]) if parts else images[:0]
    used = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    targets = None if not parts or parts[0][2] is None else np.concatenate([p[2] for p in parts])
    return finalize(model, images, adv, golds, targets, used, config.method, indices)


def finalize(model, clean, adv, golds, targets, used, method, indices) -> list[AdversarialExample]:
    labels = model.predict_labels(adv) if len(adv) else np.zeros(0, dtype=np.int64)
    ok = _success(labels, golds, targets)
    l2, linf = perturbation_norms(adv, clean) if len(adv) else (np.zeros(0), np.zeros(0))
    return [
        AdversarialExample(int(indices[i]), adv[i], int(golds[i]), int(labels[i]),
                           None if targets is None else int(targets[i]), bool(ok[i]), method,
                           float(l2[i]), float(linf[i]), int(used[i]))
        for i in range(len(adv))
    ]


def fgsm(model, image, gold, eps) -> AdversarialExample:
    return run_attack(model, image[None], [gold], AttackConfig(method="fgsm", eps=eps))[0]


def bim(model, image, gold, eps, steps, step_size) -> AdversarialExample:
    cfg = AttackConfig(method="bim", eps=eps, steps=steps, step_size=step_size)
    return run_attack(model, image[None], [gold], cfg)[0]


def cw_l2(model, image, gold, config: AttackConfig | None = None) -> AdversarialExample:
    cfg = config or AttackConfig(method="cw")
    return run_attack(model, image[None], [gold], cfg)[0]


def patch(model, image, gold, mask, target_strategy="first", steps=50, step_size=0.1) -> AdversarialExample:
    cfg = AttackConfig(method="patch", target=str(target_strategy), mask=tuple(mask),
                       patch_steps=steps, patch_step_size=step_size)
    return run_attack(model, image[None], [gold], cfg)[0]


# ---------------------------------------------------------------- adversarial set file


def adversarial_set(examples: list[AdversarialExample], source: Dataset, config: AttackConfig | None = None) -> Dataset:
    """Package examples as a Dataset whose labels are the gold labels."""
    images = np.stack([e.image for e in examples]) if examples else source.images[:0]
    idx = [e.index for e in examples]
    ds = Dataset(images, np.array([e.gold for e in examples], dtype=np.int64), source.attributes,
                 source.attribute_table, source.offsets[idx] if idx else source.offsets[:0],
                 source.seed, source.noise, source.jitter)
    ds.extra = {"attack": asdict(config) if config else {}, "examples": [e.metadata() for e in examples]}
    return ds


def save_adversarial(examples, source: Dataset, path, config: AttackConfig | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(adversarial_set(examples, source, config)))


def load_adversarial(path) -> tuple[Dataset, list[AdversarialExample]]:
    with open(path, "rb") as fh:
        ds, trailer = dataset_from_bytes(fh.read())
    meta = ds.extra.get("examples")
    if meta is None or len(meta) != len(ds):
        raise FormatError("file carries no per-example attack metadata")
    examples = [AdversarialExample(image=ds.images[i], **m) for i, m in enumerate(meta)]
    return ds, examples
