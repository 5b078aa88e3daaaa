"""Two-stage semi-supervised training loop.

Each epoch first fits the labeled batches with the supervised loss and
rebuilds the latent bank with the updated parameters; with the GP arm
enabled it then sweeps the unlabeled batches, querying the bank for a
detached pseudo target and a differentiable predictive variance per sample
and stepping on  lambda_un * (|y - mean|_2 / variance + log variance).
The ranking arm replaces that unlabeled pass with a count-containment
hinge on random sub-crops.  With neither arm enabled the loop reduces to
the labeled-only baseline.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import AnnotatedImage, crop
from .density import synthesize_density
from .errors import ConfigError, DivergenceError, StateError
from .gp import GPConfig, LatentBank, nearest, posterior, posterior_mean_node, \
    rebuild_bank, variance_node
from .losses import ranking_hinge_loss, supervised_loss, unsupervised_loss
from .model import ModelConfig, ModelParams, forward_batch, init_params

ENV_PREFIX = "GPCOUNT_"


@dataclass(frozen=True)
class TrainConfig:
    """Everything that controls one training run.

    Every field can be set in a key=value config file and overridden by an
    environment variable named GPCOUNT_<FIELD upper-cased>.
    """
    lambda_un: float = 0.6
    n_neighbors: int = 8
    noise_variance: float = 1.0
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    crop_size: int = 0          # 0 trains on full images
    seed: int = 0
    gp_enabled: bool = False
    ranking_enabled: bool = False
    gt_sigma: float = 2.0
    flip_augment: bool = True
    detach_pseudo: bool = True
    neighbor_metric: str = "cosine"
    interleave_batches: bool = False
    ranking_margin: float = 0.0
    latent_channels: int = 16

    def __post_init__(self):
        if self.gp_enabled and self.ranking_enabled:
            raise ConfigError("gp_enabled and ranking_enabled are exclusive")
        if not self.lambda_un >= 0.0:
            raise ConfigError(f"lambda_un must be >= 0, got {self.lambda_un}")
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate must be > 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if not self.adam_eps > 0.0:
            raise ConfigError("adam_eps must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.crop_size < 0 or (self.crop_size and self.crop_size % 8):
            raise ConfigError("crop_size must be 0 or a positive multiple of 8")
        if not self.gt_sigma > 0.0:
            raise ConfigError("gt_sigma must be > 0")
        if self.latent_channels < 1:
            raise ConfigError("latent_channels must be >= 1")
        # Delegates n_neighbors / noise_variance / metric checks.
        self.gp_config()

    def gp_config(self) -> GPConfig:
        return GPConfig(self.n_neighbors, self.noise_variance,
                        self.neighbor_metric)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _parse_value(name: str, raw: str, where: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            word = raw.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[word]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {name}: {raw!r}") from exc


def load_config_file(path: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a flat key=value config file ('#' starts a comment)."""
    overrides = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = text.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
            overrides[key] = _parse_value(key, raw, f"{path}:{ln}")
    return dataclasses.replace(base or TrainConfig(), **overrides)


def apply_env_overrides(cfg: TrainConfig, environ=None) -> TrainConfig:
    """Apply GPCOUNT_<FIELD> environment variables on top of ``cfg``."""
    environ = os.environ if environ is None else environ
    overrides = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in _FIELD_TYPES:
            raise ConfigError(f"${key}: unknown config field {name!r}")
        overrides[name] = _parse_value(name, environ[key], f"${key}")
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list[Node], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.value -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2)
                                                           + self.eps)

    def zero_grad(self):
        ad.zero_grads(self.params)


@dataclass
class TrainState:
    """Mutable loop state threaded through the stage functions."""
    params: ModelParams
    optimizer: Adam
    bank: LatentBank | None = None
    epoch: int = 0
    skipped_degenerate: int = 0
    history: list[dict] = field(default_factory=list)
    history_row: dict = field(default_factory=dict)


def _rng(cfg: TrainConfig, tag: int, epoch: int):
    return np.random.default_rng([cfg.seed, tag, epoch])


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _step(state: TrainState, loss_node: Node, what: str):
    value = float(loss_node.value)
    if not np.isfinite(value):
        raise DivergenceError(
            f"{what} became non-finite ({value}) at epoch {state.epoch}")
    ad.backward(loss_node)
    state.optimizer.step()
    state.optimizer.zero_grad()


def _maybe_crop(image: AnnotatedImage, size: int, rng) -> AnnotatedImage:
    h, w = image.pixels.shape
    if size == 0 or (size >= h and size >= w):
        return image
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return crop(image, y0, x0, size)


def _labeled_batch_arrays(images, targets_by_id, flips, cfg: TrainConfig,
                          crop_rng):
    pixels, targets = [], []
    for img, flip in zip(images, flips):
        if cfg.crop_size:
            img = _maybe_crop(img, cfg.crop_size, crop_rng)
            h, w = img.pixels.shape
            target = synthesize_density(img.points, h, w, cfg.gt_sigma).values
        else:
            target = targets_by_id[img.id]
        px = img.pixels
        if flip:
            px = px[:, ::-1]
            target = target[:, ::-1]
        pixels.append(np.ascontiguousarray(px))
        targets.append(np.ascontiguousarray(target))
    return np.stack(pixels), np.stack(targets)[:, None]


def labeled_stage(state: TrainState, labeled, cfg: TrainConfig,
                  targets_by_id=None) -> TrainState:
    """One supervised pass over the labeled set, then a bank rebuild.

    ``targets_by_id`` may carry precomputed ground-truth density maps keyed
    by image id; otherwise they are synthesized on the fly.
    """
    if targets_by_id is None:
        targets_by_id = {
            img.id: synthesize_density(img.points, *img.pixels.shape,
                                       cfg.gt_sigma).values
            for img in labeled
        }
    order = _rng(cfg, 100, state.epoch).permutation(len(labeled))
    flip_rng = _rng(cfg, 101, state.epoch)
    crop_rng = _rng(cfg, 104, state.epoch)
    losses = []
    for batch_idx in _batches(order, cfg.batch_size):
        images = [labeled[i] for i in batch_idx]
        flips = (flip_rng.random(len(images)) < 0.5) if cfg.flip_augment \
            else np.zeros(len(images), dtype=bool)
        pixels, targets = _labeled_batch_arrays(images, targets_by_id, flips,
                                                cfg, crop_rng)
        _, _, pred = forward_batch(pixels, state.params)
        loss = supervised_loss(pred, targets)
        losses.append(loss.value)
        _step(state, loss.scalar, "supervised loss")
    state.bank = rebuild_bank(labeled, state.params, gt_sigma=cfg.gt_sigma,
                              targets_by_id=targets_by_id)
    state.history_row["supervised"] = float(np.mean(losses)) if losses else 0.0
    return state


def _gp_batch_loss(state: TrainState, pixels, cfg: TrainConfig):
    """Build the unlabeled objective for one pixel batch.

    Returns (loss_node, diagnostics) or None when every latent in the batch
    is degenerate.
    """
    gp_cfg = cfg.gp_config()
    latents, latent_node, pred = forward_batch(pixels, state.params)
    n = latents.shape[0]
    flat = ad.reshape(latent_node, (n, latents.shape[1]))
    pseudos, var_nodes, mean_nodes = [], [], []
    variances, pseudo_counts = [], []
    for k in range(n):
        if np.linalg.norm(latents[k]) == 0.0:
            state.skipped_degenerate += 1
            pseudos.append(None)
            var_nodes.append(None)
            mean_nodes.append(None)
            continue
        z_node = ad.select(flat, k)
        neighbors = nearest(latents[k], state.bank, gp_cfg.n_neighbors,
                            gp_cfg.neighbor_metric)
        post = posterior(latents[k], state.bank, gp_cfg)
        pseudos.append(post)
        var_nodes.append(variance_node(z_node, neighbors, cfg.noise_variance))
        mean_nodes.append(None if cfg.detach_pseudo else
                          posterior_mean_node(z_node, neighbors,
                                              cfg.noise_variance))
        variances.append(post.variance)
        pseudo_counts.append(float(post.mean.sum()))
    if all(p is None for p in pseudos):
        return None

    if cfg.detach_pseudo:
        loss = unsupervised_loss(pred, pseudos, var_nodes)
        loss_node = loss.scalar
        unsup_value = loss.value
    else:
        # Study variant: gradients also flow through the posterior mean.
        shape = pred.value.shape[1:]
        total = None
        count = 0
        for k in range(n):
            if pseudos[k] is None:
                continue
            diff = ad.sub(ad.select(pred, k), ad.reshape(mean_nodes[k], shape))
            norm = ad.sqrt(ad.sum(ad.mul(diff, diff)))
            term = ad.add(ad.div(norm, var_nodes[k]), ad.log(var_nodes[k]))
            total = term if total is None else ad.add(total, term)
            count += 1
        loss_node = ad.scalar_mul(total, 1.0 / count)
        unsup_value = float(loss_node.value)
    return ad.scalar_mul(loss_node, cfg.lambda_un), {
        "unsupervised": unsup_value,
        "variances": variances,
        "pseudo_counts": pseudo_counts,
    }


def unlabeled_stage(state: TrainState, unlabeled, cfg: TrainConfig) -> TrainState:
    """One GP pseudo-label pass over the unlabeled set."""
    if state.bank is None or len(state.bank) == 0:
        raise StateError("unlabeled_stage: latent bank is empty")
    order = _rng(cfg, 200, state.epoch).permutation(len(unlabeled))
    flip_rng = _rng(cfg, 201, state.epoch)
    unsup_losses, variances = [], []
    for batch_idx in _batches(order, cfg.batch_size):
        images = [unlabeled[i] for i in batch_idx]
        flips = (flip_rng.random(len(images)) < 0.5) if cfg.flip_augment \
            else np.zeros(len(images), dtype=bool)
        pixels = np.stack([img.pixels[:, ::-1] if flip else img.pixels
                           for img, flip in zip(images, flips)])
        built = _gp_batch_loss(state, np.ascontiguousarray(pixels), cfg)
        if built is None:
            continue
        loss_node, diag = built
        unsup_losses.append(diag["unsupervised"])
        variances.extend(diag["variances"])
        # A zero objective weight means there is nothing to optimize; a warm
        # optimizer would still drift on stale momentum if stepped.
        if cfg.lambda_un > 0.0:
            _step(state, loss_node, "unsupervised loss")
    row = state.history_row
    if unsup_losses:
        row["unsupervised"] = float(np.mean(unsup_losses))
        row["mean_variance"] = float(np.mean(variances))
        row["min_variance"] = float(np.min(variances))
        row["max_variance"] = float(np.max(variances))
    row["skipped"] = state.skipped_degenerate
    return state


def _ranking_batch_loss(state: TrainState, images, cfg: TrainConfig,
                        crop_rng):
    """Count-containment hinge for one unlabeled batch: a random sub-crop of
    an image must not be predicted to hold more than the whole image.

    Returns (loss_node, per-sample hinge values)."""
    h, w = images[0].pixels.shape
    sub_size = max(8, (h // 2) // 8 * 8)
    subs = []
    for img in images:
        y0 = int(crop_rng.integers(0, h - sub_size + 1))
        x0 = int(crop_rng.integers(0, w - sub_size + 1))
        subs.append(img.pixels[y0:y0 + sub_size, x0:x0 + sub_size])
    _, _, full_pred = forward_batch(
        np.stack([img.pixels for img in images]), state.params)
    _, _, sub_pred = forward_batch(
        np.ascontiguousarray(np.stack(subs)), state.params)
    full_counts = ad.sum(full_pred, axis=(1, 2, 3))
    sub_counts = ad.sum(sub_pred, axis=(1, 2, 3))
    total = None
    hinge_values = []
    for k in range(len(images)):
        hinge = ranking_hinge_loss(ad.select(full_counts, k),
                                   ad.select(sub_counts, k),
                                   cfg.ranking_margin)
        hinge_values.append(hinge.value)
        total = hinge.scalar if total is None \
            else ad.add(total, hinge.scalar)
    return ad.scalar_mul(total, cfg.lambda_un / len(images)), hinge_values


def ranking_stage(state: TrainState, unlabeled, cfg: TrainConfig) -> TrainState:
    """One count-containment hinge pass over the unlabeled set (ablation arm)."""
    order = _rng(cfg, 300, state.epoch).permutation(len(unlabeled))
    crop_rng = _rng(cfg, 301, state.epoch)
    hinge_values = []
    for batch_idx in _batches(order, cfg.batch_size):
        images = [unlabeled[i] for i in batch_idx]
        loss_node, hinges = _ranking_batch_loss(state, images, cfg, crop_rng)
        hinge_values.extend(hinges)
        if cfg.lambda_un > 0.0:
            _step(state, loss_node, "ranking loss")
    state.history_row["ranking"] = float(np.mean(hinge_values)) \
        if hinge_values else 0.0
    return state


def train(labeled, unlabeled, cfg: TrainConfig,
          model_config: ModelConfig | None = None):
    """Run the full loop; returns (params, per-epoch history rows).

    Unlabeled images enter only through their pixels; their annotations are
    never read here.
    """
    if not labeled:
        raise ConfigError("train: labeled set is empty")
    h, w = labeled[0].pixels.shape
    if model_config is None:
        model_config = ModelConfig(input_hw=(h, w),
                                   latent_channels=cfg.latent_channels)
    params = init_params(cfg.seed, model_config)
    optimizer = Adam(params.parameters(), cfg.learning_rate,
                     cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state = TrainState(params=params, optimizer=optimizer)
    targets_by_id = {
        img.id: synthesize_density(img.points, *img.pixels.shape,
                                   cfg.gt_sigma).values
        for img in labeled
    }
    use_gp = cfg.gp_enabled and len(unlabeled) > 0
    use_ranking = cfg.ranking_enabled and len(unlabeled) > 0
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        state.history_row = {"epoch": epoch}
        if cfg.interleave_batches and (use_gp or use_ranking):
            _interleaved_epoch(state, labeled, unlabeled, cfg, targets_by_id)
        else:
            labeled_stage(state, labeled, cfg, targets_by_id)
            if use_gp:
                unlabeled_stage(state, unlabeled, cfg)
            elif use_ranking:
                ranking_stage(state, unlabeled, cfg)
        state.history.append(state.history_row)
    return params, state.history


def _interleaved_epoch(state: TrainState, labeled, unlabeled,
                       cfg: TrainConfig, targets_by_id):
    """Joint batches: each optimizer step minimizes the combined objective
    supervised + lambda_un * unsupervised on one labeled and one unlabeled
    batch together, so the mixture weight genuinely trades the two terms off
    (separate per-stage steps would let the optimizer renormalize it away).
    The unsupervised term is the pseudo-label loss or, for the ablation arm,
    the count-containment hinge.

    The labeled stream cycles so every step keeps its supervised anchor;
    the unlabeled stream is consumed exactly once per epoch, and any steps
    after it is exhausted are supervised-only.  The bank is rebuilt once at
    the start of the epoch, so unlabeled batches see parameters at most one
    epoch stale.
    """
    if cfg.gp_enabled:
        state.bank = rebuild_bank(labeled, state.params, gt_sigma=cfg.gt_sigma,
                                  targets_by_id=targets_by_id)
    l_order = _rng(cfg, 100, state.epoch).permutation(len(labeled))
    u_order = _rng(cfg, 200 if cfg.gp_enabled else 300,
                   state.epoch).permutation(len(unlabeled))
    flip_rng = _rng(cfg, 101, state.epoch)
    uflip_rng = _rng(cfg, 201, state.epoch)
    crop_rng = _rng(cfg, 104, state.epoch)
    ucrop_rng = _rng(cfg, 301, state.epoch)
    l_batches = list(_batches(l_order, cfg.batch_size))
    u_batches = list(_batches(u_order, cfg.batch_size))
    sup_losses, unsup_losses, variances, hinge_values = [], [], [], []
    for i in range(max(len(l_batches), len(u_batches))):
        images = [labeled[j] for j in l_batches[i % len(l_batches)]]
        flips = (flip_rng.random(len(images)) < 0.5) if cfg.flip_augment \
            else np.zeros(len(images), dtype=bool)
        pixels, targets = _labeled_batch_arrays(images, targets_by_id,
                                                flips, cfg, crop_rng)
        _, _, pred = forward_batch(pixels, state.params)
        sup = supervised_loss(pred, targets)
        sup_losses.append(sup.value)
        step_node = sup.scalar

        if i < len(u_batches):
            images = [unlabeled[j] for j in u_batches[i]]
            if cfg.gp_enabled:
                flips = (uflip_rng.random(len(images)) < 0.5) \
                    if cfg.flip_augment \
                    else np.zeros(len(images), dtype=bool)
                pixels = np.stack([img.pixels[:, ::-1] if flip else img.pixels
                                   for img, flip in zip(images, flips)])
                built = _gp_batch_loss(state, np.ascontiguousarray(pixels),
                                       cfg)
                if built is not None:
                    loss_node, diag = built
                    unsup_losses.append(diag["unsupervised"])
                    variances.extend(diag["variances"])
                    if cfg.lambda_un > 0.0:
                        step_node = ad.add(step_node, loss_node)
            else:
                loss_node, hinges = _ranking_batch_loss(state, images, cfg,
                                                        ucrop_rng)
                hinge_values.extend(hinges)
                if cfg.lambda_un > 0.0:
                    step_node = ad.add(step_node, loss_node)
        _step(state, step_node, "combined loss")
    row = state.history_row
    row["supervised"] = float(np.mean(sup_losses)) if sup_losses else 0.0
    if unsup_losses:
        row["unsupervised"] = float(np.mean(unsup_losses))
        row["mean_variance"] = float(np.mean(variances))
        row["min_variance"] = float(np.min(variances))
        row["max_variance"] = float(np.max(variances))
    if hinge_values:
        row["ranking"] = float(np.mean(hinge_values))
    row["skipped"] = state.skipped_degenerate
