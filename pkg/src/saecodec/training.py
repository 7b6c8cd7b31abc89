"""Layer-by-layer rate-distortion training.

Layer ``i`` is trained on the residual left by the frozen layers ``0..i-1``
(using their quantized, decoder-side reconstruction).  Rounding is replaced
by additive uniform noise so the rate estimate stays differentiable.  The
autoencoder and the entropy model are updated by two separate Adam
optimizers; only the latter's learning rate decays.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .entropy_model import add_uniform_noise, quantize, rate_bits, rate_bits_backward
from .errors import ImageIOError, InvalidArgumentError, PreconditionError, TrainingDivergenceError
from .imageio import list_images, read_image
from .metrics import ms_ssim, ms_ssim_backward
from .network import (
    DOWNSAMPLE, ScalableModel, analysis_backward, analysis_forward, init_layer, synthesis,
    synthesis_backward, synthesis_forward)
from .numerics import BETA_MIN, AdamState, adam_step
from .pipeline import frozen_reconstruction

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    ae_learning_rate: float = 1e-4
    rate_learning_rate: float = 1e-3
    rate_lr_decay: float = 0.96
    rate_lr_decay_steps: int = 5000
    ae_lr_decay: float = 1.0  # per rate_lr_decay_steps; 1.0 keeps the autoencoder rate fixed
    epochs: int = 1000
    batch_size: int = 8
    crop: int = 256
    objective: str = "mse"
    seed: int = 0
    dataset: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    feature_maps: list = field(default_factory=lambda: [48, 48, 96, 144, 192])
    lambdas: list = field(default_factory=lambda: [3000.0, 1000.0, 300.0, 100.0, 30.0])
    max_iterations: int = 0  # 0 = bounded by epochs only
    validation_window: int = 5
    validation_tolerance: float = 0.01
    validate_every: int = 0  # iterations; 0 = once per epoch
    distortion_scale: float = 255.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("ae_learning_rate", "rate_learning_rate", "rate_lr_decay", "ae_lr_decay"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.crop % DOWNSAMPLE:
            raise InvalidArgumentError(f"crop {self.crop} must be divisible by {DOWNSAMPLE}")
        if self.objective.lower().replace("-", "") not in ("mse", "msssim"):
            raise InvalidArgumentError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch_size and epochs must be positive")

    @property
    def uses_msssim(self) -> bool:
        return self.objective.lower().replace("-", "") == "msssim"

    def rate_lr_at(self, iteration: int) -> float:
        return self.rate_learning_rate * self.rate_lr_decay ** (iteration / self.rate_lr_decay_steps)

    def ae_lr_at(self, iteration: int) -> float:
        return self.ae_learning_rate * self.ae_lr_decay ** (iteration / self.rate_lr_decay_steps)


def _parse_value(raw: str, kind):
    if kind is list:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        out = []
        for item in items:
            try:
                out.append(float(item) if "." in item or "e" in item.lower() else int(item))
            except ValueError:
                out.append(item)
        return out
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def load_config(path) -> TrainingConfig:
    """Read a ``key = value`` file; lists are comma separated, ``#`` starts a comment."""
    types = {f.name: (list if f.name in ("dataset", "validation", "feature_maps", "lambdas")
                      else type(f.default)) for f in fields(TrainingConfig)}
    values = {}
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise InvalidArgumentError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, types[key])
    for key in ("dataset", "validation"):
        if key in values:
            values[key] = [str(p) if Path(str(p)).is_absolute() else str(base / str(p)) for p in values[key]]
    if "lambdas" in values:
        values["lambdas"] = [float(v) for v in values["lambdas"]]
    return TrainingConfig(**values)


def save_config(cfg: TrainingConfig, path) -> None:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# data


def expand_paths(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        out.extend(list_images(p) if p.is_dir() else [p])
    return out


class CropDataset:
    """Seeded random crops; batch ``t`` is a pure function of (seed, t)."""

    def __init__(self, images, crop: int, batch_size: int = 8, seed: int = 0, scale: float = 255.0):
        self.images = list(images)
        if not self.images:
            raise InvalidArgumentError("dataset is empty")
        for img in self.images:
            if img.shape[0] < crop or img.shape[1] < crop:
                raise PreconditionError(f"image of shape {img.shape} is smaller than the {crop}px crop")
        self.crop = crop
        self.batch_size = batch_size
        self.seed = seed
        self.scale = scale
        self._plan = None

    def __len__(self):
        return len(self.images)

    @property
    def batches_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.images) / self.batch_size))

    def epoch_plan(self, epoch: int):
        """(image index, top, left) triples for one epoch, in visiting order."""
        if self._plan is not None and self._plan[0] == epoch:
            return self._plan[1]
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.images))
        plan = []
        for i in order:
            h, w = self.images[i].shape[:2]
            top = int(rng.integers(0, h - self.crop + 1))
            left = int(rng.integers(0, w - self.crop + 1))
            plan.append((int(i), top, left))
        self._plan = (epoch, plan)
        return plan

    def batch(self, iteration: int) -> np.ndarray:
        epoch, index = divmod(iteration, self.batches_per_epoch)
        plan = self.epoch_plan(epoch)[index * self.batch_size:(index + 1) * self.batch_size]
        c = self.crop
        crops = [self.images[i][t:t + c, l:l + c] for i, t, l in plan]
        return np.stack(crops).astype(np.float64).transpose(0, 3, 1, 2) / self.scale


def ingest_dataset(paths, crop: int, seed: int = 0, batch_size: int = 8, scale: float = 255.0) -> CropDataset:
    """Load images from files/directories; unreadable or undersized ones are skipped with a warning."""
    images = []
    files = expand_paths(paths)
    for p in files:
        try:
            img = read_image(p)
        except ImageIOError as exc:
            warnings.warn(f"skipping unreadable image {p}: {exc}")
            continue
        if img.shape[0] < crop or img.shape[1] < crop:
            warnings.warn(f"skipping {p}: {img.shape[1]}x{img.shape[0]} is smaller than the {crop}px crop")
            continue
        images.append(img)
    if not images:
        raise InvalidArgumentError(f"no usable images among {len(files)} paths")
    return CropDataset(images, crop, batch_size, seed, scale)


def center_crops(images, crop: int, scale: float = 255.0) -> np.ndarray:
    out = []
    for img in images:
        t = (img.shape[0] - crop) // 2
        l = (img.shape[1] - crop) // 2
        out.append(img[t:t + crop, l:l + crop])
    return np.stack(out).astype(np.float64).transpose(0, 3, 1, 2) / scale


# ---------------------------------------------------------------------------
# losses


def loss_rd_mse(x, x_hat, rate_bpp, lam, scale: float = 255.0):
    """``MSE + lam * rate``, MSE in ``scale``-units squared; returns ``(loss, mse, d loss / d x_hat)``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    diff = x_hat - x
    mse = float(np.mean(diff * diff)) * scale * scale
    grad = 2.0 * scale * scale * diff / diff.size
    return mse + lam * rate_bpp, mse, grad


def loss_rd_msssim(x, x_hat, rate_bpp, lam, data_range: float = 1.0):
    """``(1 - MS-SSIM) + lam * rate``; returns ``(loss, 1 - ms_ssim, d loss / d x_hat)``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    value, grad = ms_ssim_backward(x, x_hat, data_range)
    return (1.0 - value) + lam * rate_bpp, 1.0 - value, -grad


def validation_stable(history, window: int = 5, tolerance: float = 0.01) -> bool:
    """True when the last ``window`` losses span at most ``tolerance`` times their mean."""
    if len(history) < window:
        return False
    tail = np.asarray(history[-window:], dtype=np.float64)
    return float(tail.max() - tail.min()) <= tolerance * abs(float(tail.mean()))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingReport:
    layer_index: int
    iterations: list = field(default_factory=list)  # (iteration, loss, bpp, distortion)
    validation: list = field(default_factory=list)  # (iteration, loss, bpp, distortion)
    stop_reason: str = ""

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.iterations])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "bpp", "distortion"])
            for it, loss, bpp, dist in self.iterations:
                w.writerow([it, repr(loss), repr(bpp), repr(dist)])


@dataclass
class TrainerState:
    """Everything needed to continue a run bit-for-bit."""

    iteration: int
    ae_state: AdamState
    entropy_state: AdamState
    report: TrainingReport


def _gdn_bounds(names):
    out = {}
    for n in names:
        if n.endswith(".beta"):
            out[n] = BETA_MIN
        elif n.endswith(".gamma"):
            out[n] = 0.0
    return out


def _distortion(cfg, x, x_hat, rate, lam):
    if cfg.uses_msssim:
        return loss_rd_msssim(x, x_hat, rate, lam)
    return loss_rd_mse(x, x_hat, rate, lam, cfg.distortion_scale)


def loss_and_grads(model: ScalableModel, layer_index: int, x: np.ndarray, cfg: TrainingConfig,
                   rng: np.random.Generator):
    """Noisy-surrogate R-D loss of one batch and its gradients.

    Returns ``(loss, bpp, distortion, ae_grads, entropy_grads)``; entropy
    gradients already include the lambda weight.
    """
    layer = model.layers[layer_index]
    accum = frozen_reconstruction(x, model, layer_index)
    q, enc_cache = analysis_forward(x - accum, layer)
    noisy = add_uniform_noise(q, rng)
    y, dec_cache = synthesis_forward(noisy, layer)
    num_pixels = x.shape[0] * x.shape[2] * x.shape[3]
    rate, g_rate, g_entropy = rate_bits_backward(noisy, layer.entropy, num_pixels)
    loss, dist, g_xhat = _distortion(cfg, x, accum + y, rate, layer.lambda_rate)
    if not math.isfinite(loss):
        raise TrainingDivergenceError("non-finite loss")
    g_noisy, g_dec = synthesis_backward(dec_cache, layer, g_xhat)
    _, g_enc = analysis_backward(enc_cache, layer, g_noisy + layer.lambda_rate * g_rate)
    lam = layer.lambda_rate
    return loss, rate, dist, {**g_enc, **g_dec}, {k: lam * v for k, v in g_entropy.items()}


def train_step(model: ScalableModel, layer_index: int, x: np.ndarray, cfg: TrainingConfig,
               state: TrainerState, rng: np.random.Generator):
    """One Adam step on layer ``layer_index``; returns ``(loss, bpp, distortion)``."""
    layer = model.layers[layer_index]
    try:
        loss, rate, dist, g_ae, g_entropy = loss_and_grads(model, layer_index, x, cfg, rng)
        ae = layer.ae_params()
        adam_step(ae, g_ae, state.ae_state, learning_rate=cfg.ae_lr_at(state.iteration),
                  lower_bounds=_gdn_bounds(ae))
        adam_step(layer.entropy.params, g_entropy, state.entropy_state,
                  learning_rate=cfg.rate_lr_at(state.iteration))
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"{exc} at iteration {state.iteration}", exc.name, state.iteration) from exc
    layer.entropy.invalidate()
    return loss, rate, dist


def evaluate_layer(model: ScalableModel, layer_index: int, x: np.ndarray, cfg: TrainingConfig):
    """Loss with real rounding on a fixed batch; returns ``(loss, bpp, distortion)``."""
    layer = model.layers[layer_index]
    accum = frozen_reconstruction(x, model, layer_index)
    q = quantize(analysis_forward(x - accum, layer)[0]).astype(np.float64)
    y = synthesis(q, layer)
    num_pixels = x.shape[0] * x.shape[2] * x.shape[3]
    rate = rate_bits(q, layer.entropy, num_pixels)
    if cfg.uses_msssim:
        dist = 1.0 - ms_ssim(x, accum + y, data_range=1.0)
        loss = dist + layer.lambda_rate * rate
    else:
        loss, dist, _ = loss_rd_mse(x, accum + y, rate, layer.lambda_rate, cfg.distortion_scale)
    return loss, rate, dist


def new_trainer_state(cfg: TrainingConfig, layer_index: int) -> TrainerState:
    def adam(lr):
        return AdamState(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    return TrainerState(0, adam(cfg.ae_learning_rate), adam(cfg.rate_learning_rate), TrainingReport(layer_index))


def train_layer(model: ScalableModel, layer_index: int, data: CropDataset, cfg: TrainingConfig,
                validation: np.ndarray | None = None, state: TrainerState | None = None,
                max_iterations: int | None = None) -> TrainingReport:
    """Train one layer with all lower layers frozen.

    Stops at the epoch cap, at ``max_iterations`` (total, counting any
    resumed iterations) or once the validation loss is stable.  Pass a
    ``state`` from :func:`load_checkpoint` to resume.
    """
    if not 0 <= layer_index < model.num_layers:
        raise InvalidArgumentError(f"layer_index {layer_index} out of range")
    if cfg.uses_msssim and cfg.crop < 176:
        raise PreconditionError("the MS-SSIM objective needs crops of at least 176 pixels")
    state = new_trainer_state(cfg, layer_index) if state is None else state
    report = state.report
    cap = cfg.epochs * data.batches_per_epoch
    limit = max_iterations if max_iterations is not None else (cfg.max_iterations or cap)
    limit = min(limit, cap)
    every = cfg.validate_every or data.batches_per_epoch
    while state.iteration < limit:
        it = state.iteration
        x = data.batch(it)
        rng = np.random.default_rng([cfg.seed, layer_index, it])
        loss, bpp, dist = train_step(model, layer_index, x, cfg, state, rng)
        report.iterations.append((it, loss, bpp, dist))
        state.iteration += 1
        if validation is not None and state.iteration % every == 0:
            vloss, vbpp, vdist = evaluate_layer(model, layer_index, validation, cfg)
            report.validation.append((state.iteration, vloss, vbpp, vdist))
            log.info("layer %d iter %d: val loss %.4f bpp %.4f dist %.4f",
                     layer_index, state.iteration, vloss, vbpp, vdist)
            history = [v[1] for v in report.validation]
            if validation_stable(history, cfg.validation_window, cfg.validation_tolerance):
                report.stop_reason = "validation loss stable"
                return report
    report.stop_reason = "epoch cap" if state.iteration >= cap else "iteration limit"
    return report


def grid_sweep(model: ScalableModel, layer_index: int, data: CropDataset, cfg: TrainingConfig,
               feature_maps, lambdas, validation: np.ndarray, max_iterations: int | None = None):
    """Train a fresh layer for every (feature_maps, lambda) pair; returns result rows.

    Each row is ``dict(feature_maps, lambda_rate, loss, bpp, distortion, layer)``.
    """
    rows = []
    for fm in feature_maps:
        for lam in lambdas:
            trial = ScalableModel(model.layers[:layer_index]
                                  + [init_layer(fm, lam, layer_index, np.random.default_rng(cfg.seed))])
            train_layer(trial, layer_index, data, cfg, validation, max_iterations=max_iterations)
            loss, bpp, dist = evaluate_layer(trial, layer_index, validation, cfg)
            rows.append(dict(feature_maps=fm, lambda_rate=lam, loss=loss, bpp=bpp, distortion=dist,
                             layer=trial.layers[layer_index]))
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def _adam_arrays(prefix, st: AdamState):
    out = {}
    for name, arr in st.first_moment.items():
        out[f"{prefix}/m/{name}"] = arr
    for name, arr in st.second_moment.items():
        out[f"{prefix}/v/{name}"] = arr
    return out


def save_checkpoint(path, model: ScalableModel, layer_index: int, state: TrainerState) -> None:
    """Model bytes, both optimizer states and the partial report in one ``.npz``."""
    meta = dict(
        layer_index=layer_index, iteration=state.iteration,
        ae=dict(lr=state.ae_state.learning_rate, step=state.ae_state.step_count, b1=state.ae_state.beta1,
                b2=state.ae_state.beta2, eps=state.ae_state.epsilon),
        entropy=dict(lr=state.entropy_state.learning_rate, step=state.entropy_state.step_count,
                     b1=state.entropy_state.beta1, b2=state.entropy_state.beta2, eps=state.entropy_state.epsilon),
        stop_reason=state.report.stop_reason,
    )
    arrays = {**_adam_arrays("ae", state.ae_state), **_adam_arrays("entropy", state.entropy_state)}
    arrays["report/iterations"] = np.array(state.report.iterations, dtype=np.float64).reshape(-1, 4)
    arrays["report/validation"] = np.array(state.report.validation, dtype=np.float64).reshape(-1, 4)
    arrays["model"] = np.frombuffer(model.to_bytes(), dtype=np.uint8)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(model, layer_index, state)``."""
    from .network import model_from_bytes

    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        model = model_from_bytes(z["model"].tobytes())

        def adam(prefix):
            d = meta[prefix]
            st = AdamState(d["lr"], d["b1"], d["b2"], d["eps"], d["step"])
            for key in z.files:
                if key.startswith(f"{prefix}/m/"):
                    st.first_moment[key[len(prefix) + 3:]] = z[key].copy()
                elif key.startswith(f"{prefix}/v/"):
                    st.second_moment[key[len(prefix) + 3:]] = z[key].copy()
            return st

        report = TrainingReport(meta["layer_index"])
        report.iterations = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in z["report/iterations"]]
        report.validation = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in z["report/validation"]]
        report.stop_reason = meta["stop_reason"]
        state = TrainerState(meta["iteration"], adam("ae"), adam("entropy"), report)
    return model, meta["layer_index"], state


__all__ = [
    "CropDataset", "TrainerState", "TrainingConfig", "TrainingReport", "center_crops",
    "evaluate_layer", "grid_sweep", "ingest_dataset", "loss_and_grads", "load_checkpoint", "load_config", "loss_rd_mse",
    "loss_rd_msssim", "new_trainer_state", "save_checkpoint", "save_config", "train_layer", "train_step",
    "validation_stable",
]
