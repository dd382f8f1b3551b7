"""Reconstruction uncertainty: what input content a layer's feature can recover.

A decoder g is pre-trained to invert the layer (MSE of g(h(x)) against x),
then frozen. Perturbation scales sigma are learned exactly as for strict
information discarding, except the entropy being maximized is that of the
reconstructions: per unit, H_hat_i = 0.5*log(E[(x_i - g(h(x'))_i)^2]) + C with
the clean input as the reconstruction mean. A unit the decoder reproduces
exactly would send H_hat_i to -inf, so reported entropies are floored at
ln(1e-6) + C and such units flagged.

The reconstruction mean is the clean input x, following the estimator's
defining formula; a biased decoder therefore contributes bias^2 on top of
variance. (Centering on the empirical reconstruction mean instead would
remove the bias term; that variant is noted here but intentionally not
implemented.)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lltn
from . import tensor as T
from .data import train_val_split
from .model import ModelGraph, build, conv, dense, relu, reshape, residual_block
from .rng import RngStream, gaussian
from .sid import (
    GAUSSIAN_ENTROPY_CONST,
    LambdaSearch,
    SidConfig,
    SigmaField,
    _AdamState,
    _forward_chunked,
    certify_epsilon,
    default_sigma_cap,
    feature_baseline,
    find_dead_units,
)
from .tensor import Tensor
from .train import TrainConfig, train

RU_FLOOR = math.log(1e-6) + GAUSSIAN_ENTROPY_CONST  # clamp for zero-error units
_VAR_FLOOR = 1e-12  # matching floor on the per-unit empirical variance


@dataclass
class DecoderSpec:
    """A trained decoder: a graph mapping the layer's feature back to input shape."""

    graph: ModelGraph
    layer: str
    val_mse: float


@dataclass
class RuResult:
    H_hat_i: np.ndarray
    H_hat_total: float
    epsilon_achieved: float
    delta_f_sq: float
    lambda_final: float
    decoder_mse: float
    seed: int
    steps_used: int
    capped_units: list[int]
    clamped_units: list[int]  # units floored at RU_FLOOR
    conformant: bool
    sigma: np.ndarray = field(repr=False, default=None)

    def to_json(self) -> dict:
        return {
            "H_hat_total": self.H_hat_total,
            "epsilon_achieved": self.epsilon_achieved,
            "delta_f_sq": self.delta_f_sq,
            "lambda_final": self.lambda_final,
            "decoder_mse": self.decoder_mse,
            "seed": self.seed,
            "steps_used": self.steps_used,
            "capped_units": list(map(int, self.capped_units)),
            "clamped_units": list(map(int, self.clamped_units)),
            "conformant": self.conformant,
        }

    def save(self, directory, stem: str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"
        tmp = directory / f"{stem}.json.tmp"
        tmp.write_text(payload)
        os.replace(tmp, directory / f"{stem}.json")
        lltn.write(directory / f"{stem}_H_hat_i.lltn", self.H_hat_i)


# ---------------------------------------------------------------------------
# decoder construction and pre-training
# ---------------------------------------------------------------------------


def make_decoder(feature_shape: tuple, input_shape: tuple, seed: int = 0) -> ModelGraph:
    """Default desk-scale decoder for a layer's feature shape.

    Spatial features get three residual blocks (transposed-conv upsampling in
    the leading blocks when the feature map is smaller than the input) and a
    final 3x3 conv; flat features get a two-layer MLP reshaped to input shape.
    """
    feature_shape, input_shape = tuple(feature_shape), tuple(input_shape)
    if len(feature_shape) == 3 and len(input_shape) == 3:
        fc, fh, _ = feature_shape
        ic, ih, _ = input_shape
        if ih % fh or (ih // fh) & (ih // fh - 1):
            raise ValueError(
                f"feature {feature_shape} to input {input_shape}: spatial ratio must be a power of 2"
            )
        n_up = int(math.log2(ih // fh))
        if n_up > 3:
            raise ValueError("feature map more than 8x smaller than input; not desk scale")
        width = max(fc, 8)
        specs = []
        for i in range(3):
            specs.append(residual_block(f"dec_block{i + 1}", width, upsample=i < n_up))
        specs.append(conv("dec_out", ic, 3, padding=1))
        return build(specs, feature_shape, seed=seed)
    flat = int(np.prod(feature_shape))
    target = int(np.prod(input_shape))
    hidden = max(2 * target, 16)
    return build(
        [
            dense("dec_fc1", hidden),
            relu("dec_relu1"),
            dense("dec_fc2", target),
            reshape("dec_out", input_shape),
        ],
        (flat,) if len(feature_shape) != 1 else feature_shape,
        seed=seed,
    )


def train_decoder(
    model: ModelGraph,
    layer: str,
    dataset: np.ndarray,
    cfg: TrainConfig,
    decoder: ModelGraph | None = None,
) -> DecoderSpec:
    """Pre-train a decoder to reconstruct inputs from the layer's features.

    The 90/10 train/validation split is seeded by cfg.seed; the reported MSE
    comes from the held-out part. The returned decoder is frozen: estimators
    never touch its parameters again.
    """
    images = np.asarray(dataset, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("dataset is empty")
    feature_shape = model.layer_shape(layer)
    if decoder is None:
        decoder = make_decoder(feature_shape, model.input_shape, seed=cfg.seed)
    feats = _forward_chunked(model, images, layer)
    if feats.shape[1:] != tuple(feature_shape):
        raise ValueError(f"feature shape mismatch: {feats.shape[1:]} vs {feature_shape}")
    flat_feats = feats.reshape(len(images), -1) if len(feature_shape) == 1 else feats
    train_idx, val_idx = train_val_split(len(images), 0.1, seed=cfg.seed)
    ru_cfg = TrainConfig(
        optimizer=cfg.optimizer,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        loss="mse",
    )
    trained, _ = train(decoder, (flat_feats[train_idx], images[train_idx]), ru_cfg)
    with T.no_grad():
        recon = trained.forward(Tensor(flat_feats[val_idx]))
    val_mse = float(np.mean((recon.data - images[val_idx]) ** 2))
    return DecoderSpec(graph=trained, layer=layer, val_mse=val_mse)


# ---------------------------------------------------------------------------
# pixel-level reconstruction entropy
# ---------------------------------------------------------------------------


def _reconstruct_chunked(
    model: ModelGraph, decoder: ModelGraph, xs: np.ndarray, layer: str
) -> np.ndarray:
    feats = _forward_chunked(model, xs, layer)
    return _forward_chunked(decoder, feats, None)


def pixel_ru(
    model: ModelGraph,
    decoder: ModelGraph,
    layer: str,
    x: np.ndarray,
    sigma: SigmaField,
    samples: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit reconstruction entropies from `samples` Monte Carlo draws.

    Returns (H_hat_i shaped like x, flat indices of floor-clamped units).
    """
    x = np.asarray(x, dtype=np.float64)
    noise = rng.normal((samples,) + x.shape)
    recon = _reconstruct_chunked(model, decoder, x[None] + sigma.sigma * noise, layer)
    if recon.shape[1:] != x.shape:
        raise T.ShapeError(f"decoder output {recon.shape[1:]} does not match input {x.shape}")
    err_sq = ((recon - x) ** 2).mean(axis=0)
    clamped = np.flatnonzero(err_sq.reshape(-1) < _VAR_FLOOR)
    h = 0.5 * np.log(np.maximum(err_sq, _VAR_FLOOR)) + GAUSSIAN_ENTROPY_CONST
    return h, clamped


def ru_loss(
    model: ModelGraph,
    decoder: ModelGraph,
    layer: str,
    x: np.ndarray,
    sigma: SigmaField,
    lam: float,
    delta_f_sq: float,
    samples: int,
    rng: RngStream,
    normalize: bool = True,
) -> tuple[float, np.ndarray]:
    """Stochastic reconstruction-entropy loss and gradient w.r.t. log_sigma.

    One set of draws feeds both the feature-deviation term and the per-unit
    reconstruction variances (shared draws lower the gradient variance)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if delta_f_sq <= 0:
        raise ValueError("delta_f_sq must be positive")
    x = np.asarray(x, dtype=np.float64)
    with T.no_grad():
        f0 = model.forward(Tensor(x), to_layer=layer).data
    log_sigma = Tensor(sigma.log_sigma, requires_grad=True)
    sig = T.exp(log_sigma)
    noise = gaussian(rng, (samples,) + x.shape)
    x_perturbed = T.add(Tensor(x), T.mul(sig, noise))
    fp = model.forward(x_perturbed, to_layer=layer)
    diff = T.sub(fp, Tensor(f0))
    denom = delta_f_sq if normalize else 1.0
    fit = T.mul(T.reduce_sum(T.mul(diff, diff)), Tensor(1.0 / (samples * denom)))

    recon = decoder.forward(fp)
    err = T.sub(recon, Tensor(x))
    err_sq_mean = T.mul(T.reduce_sum(T.mul(err, err), axis=0), Tensor(1.0 / samples))
    floored = T.clip_min(err_sq_mean, _VAR_FLOOR)
    per_unit = T.add(T.log(floored), Tensor(GAUSSIAN_ENTROPY_CONST))
    entropy_half = T.mul(T.reduce_sum(per_unit), Tensor(0.5))
    loss = T.sub(fit, T.mul(entropy_half, Tensor(lam)))
    grads = T.backward(loss)
    return loss.item(), grads[log_sigma]


def estimate_ru(
    model: ModelGraph, decoder: DecoderSpec, layer: str, x, cfg: SidConfig
) -> RuResult:
    """Learn sigma maximizing reconstruction entropy under the same
    feature-variance budget as the strict estimator; report per-unit H_hat
    from held-out draws."""
    if decoder.layer != layer:
        raise ValueError(f"decoder was trained for layer {decoder.layer!r}, not {layer!r}")
    x = np.asarray(x, dtype=np.float64)
    dec = decoder.graph
    root = RngStream(cfg.seed)
    delta_f_sq = feature_baseline(
        model, layer, x, cfg.tau, cfg.baseline_samples, root.spawn("est/baseline")
    )
    target = cfg.alpha * delta_f_sq
    cap = cfg.sigma_cap if cfg.sigma_cap is not None else default_sigma_cap(x)
    log_cap = math.log(cap)
    sigma = SigmaField.constant(x.shape, cfg.tau)
    dead = find_dead_units(model, layer, x, cap)
    sigma.log_sigma.reshape(-1)[dead] = log_cap
    lam = cfg.lambda_init
    search = LambdaSearch()
    step_rng = root.spawn("est/steps")
    steps_used = 0
    conformant = False
    epsilon = math.nan
    tail_from = cfg.max_steps // 2
    rounds = cfg.max_rounds if cfg.normalize else 1
    for _ in range(rounds):
        adam = _AdamState(sigma.log_sigma.shape, cfg.sigma_lr, cfg.max_steps)
        tail_sum = np.zeros_like(sigma.log_sigma)
        tail_count = 0
        for step in range(cfg.max_steps):
            _, grad = ru_loss(
                model,
                dec,
                layer,
                x,
                sigma,
                lam,
                delta_f_sq,
                cfg.samples_per_step,
                step_rng,
                normalize=cfg.normalize,
            )
            sigma.log_sigma = np.minimum(adam.step(sigma.log_sigma, grad), log_cap)
            steps_used += 1
            if step >= tail_from:
                tail_sum += sigma.log_sigma
                tail_count += 1
        if tail_count:
            sigma.log_sigma = np.minimum(tail_sum / tail_count, log_cap)
        epsilon = certify_epsilon(
            model, layer, x, sigma, cfg.certify_samples, root.spawn("est/heldout")
        )
        if abs(epsilon - target) <= cfg.lambda_tolerance * target:
            conformant = True
            break
        if cfg.normalize:
            lam = search.update(lam, epsilon, target)
    if cfg.normalize and epsilon > 0:
        live = sigma.log_sigma < log_cap - 1e-12
        sigma.log_sigma = np.where(
            live,
            np.minimum(sigma.log_sigma + 0.5 * math.log(target / epsilon), log_cap),
            sigma.log_sigma,
        )
        epsilon = certify_epsilon(
            model, layer, x, sigma, cfg.certify_samples, root.spawn("est/heldout")
        )
        conformant = abs(epsilon - target) <= cfg.lambda_tolerance * target
    H_hat_i, clamped = pixel_ru(
        model, dec, layer, x, sigma, cfg.certify_samples, root.spawn("ru/pixel")
    )
    capped = np.flatnonzero(sigma.log_sigma >= log_cap - 1e-12)
    return RuResult(
        H_hat_i=H_hat_i,
        H_hat_total=float(H_hat_i.sum()),
        epsilon_achieved=epsilon,
        delta_f_sq=delta_f_sq,
        lambda_final=lam,
        decoder_mse=decoder.val_mse,
        seed=cfg.seed,
        steps_used=steps_used,
        capped_units=[int(i) for i in capped],
        clamped_units=[int(i) for i in clamped],
        conformant=conformant,
        sigma=sigma.sigma,
    )
