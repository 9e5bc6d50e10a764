"""Trainable stack of visualization blocks.

Each block renders the current parameter estimate, concatenates the
render with the input image and the previous block's feature maps, runs
two convolution + batch-norm + rectifier stages and two fully connected
layers, and emits an additive parameter update.  Gradients flow between
blocks along both the feature path and the parameter path (the latter
through the renderer's analytic backward), enabling end-to-end training.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .camera import LandmarkSet, ParamVector, project_all
from .fitting import initialize_params
from .losses import LossWeights, landmark_loss, mape, nme, param_loss
from .model import ShapeModel, compute_mask2, default_feature_centers
from .raster import (RasterConfig, RasterError, rasterize_backward,
                     rasterize_forward, rerender_frozen)

CHECKPOINT_VERSION = 1

# per-block (filters, kernel) pairs for the two conv stages, full scale
_FILTER_TABLE = [
    [(12, 5), (16, 5)],
    [(20, 3), (24, 3)],
    [(28, 3), (32, 3)],
    [(36, 3), (40, 3)],
    [(40, 3), (40, 3)],
    [(40, 3), (40, 3)],
]


class TrainingError(RuntimeError):
    """Training diverged or was misconfigured."""


@dataclass
class BlockConfig:
    """Architecture of the visualization-block stack."""

    n_blocks: int = 2
    convs_per_block: int = 2
    filters: list = None            # per block: list of (count, kernel)
    fc_hidden: int = 0              # 0 selects the width from the parameter dim
    input_variant: str = "IFV"      # "IFV", "FV" or "IV" for blocks after the first
    mask_kind: str = "standard"     # "standard", "multi" or "none"
    image_size: int = 32
    sigma: float = 1.0
    support_radius: int = 2
    dropout_rate: float = 0.3
    loss_schedule: list = None      # per block: (kind, weight)


@dataclass
class TrainConfig:
    """Optimization hyperparameters for :func:`train_toy`."""

    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-7
    momentum: float = 0.99
    weight_decay: float = 0.005
    lr_drops: tuple = (0.6, 0.9)    # epoch fractions where the rate drops
    lr_drop_factor: float = 0.2
    seed: int = 0
    end_to_end: bool = True         # False detaches the parameter path between blocks
    verbose: bool = False


def default_block_config(model: ShapeModel, n_blocks: int = 2,
                         image_size: int = 32, scale_divisor: int = 4,
                         **overrides) -> BlockConfig:
    """Desk-scale defaults: table filter counts divided by ``scale_divisor``."""
    filters = []
    for i in range(n_blocks):
        row = _FILTER_TABLE[min(i, len(_FILTER_TABLE) - 1)]
        filters.append([(max(1, c // scale_divisor), k) for c, k in row])
    cfg = BlockConfig(n_blocks=n_blocks, filters=filters, image_size=image_size,
                      **overrides)
    return finalize_config(cfg, model)


def finalize_config(cfg: BlockConfig, model: ShapeModel) -> BlockConfig:
    """Fill derived defaults and validate the configuration."""
    if cfg.image_size % 2:
        raise TrainingError("image_size must be even (the first block pools by 2)")
    if cfg.n_blocks < 1:
        raise TrainingError("n_blocks must be at least 1")
    if cfg.input_variant not in ("IFV", "FV", "IV"):
        raise TrainingError("input_variant must be one of IFV, FV, IV")
    if cfg.mask_kind not in ("standard", "multi", "none"):
        raise TrainingError("mask_kind must be one of standard, multi, none")
    if cfg.filters is None:
        cfg.filters = default_block_config(model, cfg.n_blocks, cfg.image_size).filters
    if len(cfg.filters) != cfg.n_blocks:
        raise TrainingError("filters must list one conv stack per block")
    for row in cfg.filters:
        if len(row) != cfg.convs_per_block:
            raise TrainingError("each block needs convs_per_block filter entries")
    if cfg.fc_hidden <= 0:
        cfg.fc_hidden = max(32, round(800 * model.num_params / 236))
    if cfg.loss_schedule is None:
        first = cfg.n_blocks // 2
        cfg.loss_schedule = [
            ("param" if i < first else "landmark", float(i + 1))
            for i in range(cfg.n_blocks)
        ]
    if len(cfg.loss_schedule) != cfg.n_blocks:
        raise TrainingError("loss_schedule must have one entry per block")
    for kind, _ in cfg.loss_schedule:
        if kind not in ("param", "landmark"):
            raise TrainingError("loss kind must be 'param' or 'landmark'")
    return cfg


def _select_mask(model: ShapeModel, kind: str) -> np.ndarray:
    if kind == "standard":
        return model.mask
    if kind == "multi":
        return compute_mask2(model, default_feature_centers(model))
    return np.ones(model.num_vertices)


@dataclass
class _BlockCache:
    p_in: np.ndarray
    records: list
    v_images: np.ndarray
    conv_caches: list
    feat: np.ndarray
    fc1_cache: tuple
    fc1_mask: np.ndarray
    drop_mask: object
    fc2_cache: tuple
    delta: np.ndarray
    p_out: np.ndarray


@dataclass
class NetForward:
    """Cached activations of one network forward pass."""

    images: np.ndarray
    images_half: np.ndarray
    blocks: list
    train: bool

    @property
    def params_per_block(self):
        """Per-block parameter estimates, each (B, dim)."""
        return [b.p_out for b in self.blocks]

    @property
    def renders_per_block(self):
        """Per-block visualization images, each (B, h, w)."""
        return [b.v_images[:, 0] for b in self.blocks]


class _Block:
    def __init__(self, model, cfg, index, in_channels, rng):
        self.index = index
        self.has_pool = index == 0
        self.convs = []
        channels = in_channels
        for count, kernel in cfg.filters[index]:
            self.convs.append((nn.Conv2d(channels, count, kernel, rng),
                               nn.BatchNorm2d(count)))
            channels = count
        half = cfg.image_size // 2
        self.flat_dim = channels * half * half
        self.fc1 = nn.Dense(self.flat_dim, cfg.fc_hidden, rng)
        self.fc2 = nn.Dense(cfg.fc_hidden, model.num_params, rng, zero_init=True)
        self.out_channels = channels

    def layers(self):
        out = []
        for conv, bn in self.convs:
            out.extend([conv, bn])
        out.extend([self.fc1, self.fc2])
        return out


class VisualizationNetwork:
    """The full stack of visualization blocks with explicit backward."""

    def __init__(self, model: ShapeModel, cfg: BlockConfig, seed: int = 0):
        self.model = model
        self.cfg = finalize_config(cfg, model)
        self.mask_vec = _select_mask(model, self.cfg.mask_kind)
        size = self.cfg.image_size
        self.cfg_full = RasterConfig(size, size, self.cfg.sigma, self.cfg.support_radius)
        self.cfg_half = RasterConfig(size // 2, size // 2, self.cfg.sigma,
                                     self.cfg.support_radius)
        rng = np.random.default_rng(seed)
        self.blocks = []
        prev_channels = 0
        for i in range(self.cfg.n_blocks):
            if i == 0:
                in_ch = 2  # image + render; no features exist yet
            elif self.cfg.input_variant == "IFV":
                in_ch = 1 + prev_channels + 1
            elif self.cfg.input_variant == "FV":
                in_ch = prev_channels + 1
            else:
                in_ch = 2
            block = _Block(model, self.cfg, i, in_ch, rng)
            prev_channels = block.out_channels
            self.blocks.append(block)

    # -- parameter plumbing -------------------------------------------------

    def layers(self):
        out = []
        for block in self.blocks:
            out.extend(block.layers())
        return out

    def state_dict(self):
        state = {}
        for bi, block in enumerate(self.blocks):
            for si, (conv, bn) in enumerate(block.convs):
                state["b%d_conv%d_w" % (bi, si)] = conv.params["w"]
                state["b%d_conv%d_b" % (bi, si)] = conv.params["b"]
                state["b%d_bn%d_gamma" % (bi, si)] = bn.params["gamma"]
                state["b%d_bn%d_beta" % (bi, si)] = bn.params["beta"]
                state["b%d_bn%d_rmean" % (bi, si)] = bn.running_mean
                state["b%d_bn%d_rvar" % (bi, si)] = bn.running_var
            state["b%d_fc1_w" % bi] = block.fc1.params["w"]
            state["b%d_fc1_b" % bi] = block.fc1.params["b"]
            state["b%d_fc2_w" % bi] = block.fc2.params["w"]
            state["b%d_fc2_b" % bi] = block.fc2.params["b"]
        return state

    def load_state_dict(self, state):
        for key, target in self.state_dict().items():
            if key not in state:
                raise TrainingError("checkpoint missing array '%s'" % key)
            value = np.asarray(state[key])
            if value.shape != target.shape:
                raise TrainingError("checkpoint array '%s' has shape %s, expected %s"
                                    % (key, value.shape, target.shape))
            target[...] = value

    # -- forward ------------------------------------------------------------

    def _render_block(self, index, p_vec, frozen_record=None):
        """Render for one block; later blocks render at half resolution."""
        if index == 0:
            cfg, scale = self.cfg_full, 1.0
        else:
            cfg, scale = self.cfg_half, 0.5
        scaled = p_vec.copy()
        scaled[:8] *= scale
        params = ParamVector.from_vector(scaled, self.model.n_id, self.model.n_exp)
        if frozen_record is not None:
            return rerender_frozen(frozen_record, self.model, params, cfg), frozen_record
        out = rasterize_forward(self.model, params, cfg, mask=self.mask_vec)
        return out.image, out

    def forward(self, images: np.ndarray, p0: np.ndarray, train: bool = False,
                rng=None, frozen: NetForward | None = None) -> NetForward:
        """Run all blocks; ``frozen`` replays a cached pass with its
        discrete choices (render structure, rectifier and dropout masks)
        pinned, which keeps the mapping smooth for finite differences."""
        images = np.asarray(images, dtype=float)
        if images.ndim == 3:
            images = images[:, None]
        batch = images.shape[0]
        images_half = nn.avgpool2(images)
        update_bn = train and frozen is None

        p_cur = np.asarray(p0, dtype=float).copy()
        feat = None
        caches = []
        for bi, block in enumerate(self.blocks):
            fb = frozen.blocks[bi] if frozen is not None else None
            v_list, records = [], []
            for b in range(batch):
                image, record = self._render_block(
                    bi, p_cur[b], fb.records[b] if fb is not None else None)
                v_list.append(image)
                records.append(record)
            v_images = np.stack(v_list)[:, None]

            if bi == 0:
                x = np.concatenate([images, v_images], axis=1)
            elif self.cfg.input_variant == "IFV":
                x = np.concatenate([images_half, feat, v_images], axis=1)
            elif self.cfg.input_variant == "FV":
                x = np.concatenate([feat, v_images], axis=1)
            else:
                x = np.concatenate([images_half, v_images], axis=1)

            conv_caches = []
            cur = x
            for si, (conv, bn) in enumerate(block.convs):
                y, ccache = conv.forward(cur)
                if not train:
                    y, bcache = bn.forward(y, train=False)
                elif update_bn:
                    y, bcache = bn.forward(y, train=True)
                else:
                    y, bcache = _bn_forward_no_update(bn, y)
                mask_in = fb.conv_caches[si][2] if fb is not None else None
                y, rmask = nn.relu(y, mask=mask_in)
                pooled = block.has_pool and si == 0
                if pooled:
                    y = nn.avgpool2(y)
                conv_caches.append((ccache, bcache, rmask, pooled))
                cur = y
            feat_out = cur

            flat = feat_out.reshape(batch, -1)
            h1, fc1_cache = block.fc1.forward(flat)
            h1, fc1_mask = nn.relu(h1, mask=fb.fc1_mask if fb is not None else None)
            rate = self.cfg.dropout_rate if train else 0.0
            h1d, drop_mask = nn.dropout(h1, rate, rng=rng,
                                        mask=fb.drop_mask if fb is not None else None)
            delta, fc2_cache = block.fc2.forward(h1d)
            p_out = p_cur + delta

            caches.append(_BlockCache(
                p_in=p_cur, records=records, v_images=v_images,
                conv_caches=conv_caches, feat=feat_out, fc1_cache=fc1_cache,
                fc1_mask=fc1_mask, drop_mask=drop_mask, fc2_cache=fc2_cache,
                delta=delta, p_out=p_out))
            feat = feat_out
            p_cur = p_out
        return NetForward(images=images, images_half=images_half,
                          blocks=caches, train=train)

    # -- losses and backward --------------------------------------------------

    def _block_loss(self, index, cache, truth_params, truth_landmarks,
                    weights: LossWeights, want_grad: bool):
        """Weighted per-block loss (batch mean) and, optionally, its
        gradients w.r.t. the block's update and input parameters."""
        kind, lam = self.cfg.loss_schedule[index]
        batch = cache.delta.shape[0]
        total = 0.0
        d_delta = np.zeros_like(cache.delta) if want_grad else None
        d_pin = np.zeros_like(cache.delta) if want_grad else None
        for b in range(batch):
            if kind == "param":
                # the target update is truth - p_in, so the loss is the
                # weighted distance of the block output from ground truth
                # and its gradient flows through both summands
                target = truth_params[b] - cache.p_in[b]
                loss, grad = param_loss(cache.delta[b], target, weights)
                if want_grad:
                    d_delta[b] = grad
                    d_pin[b] = grad
            else:
                params_in = ParamVector.from_vector(cache.p_in[b], self.model.n_id,
                                                    self.model.n_exp)
                loss, grad = landmark_loss(self.model, params_in, cache.delta[b],
                                           truth_landmarks[b])
                if want_grad:
                    d_delta[b] = grad
                    d_pin[b] = grad
            total += loss
        total /= batch
        if want_grad:
            d_delta *= lam / batch
            d_pin *= lam / batch
        return total, lam, d_delta, d_pin

    def losses(self, fwd: NetForward, truth_params, truth_landmarks,
               weights: LossWeights):
        """Total weighted loss and the per-block unweighted losses."""
        per_block = []
        total = 0.0
        for i, cache in enumerate(fwd.blocks):
            loss, lam, _, _ = self._block_loss(i, cache, truth_params,
                                               truth_landmarks, weights, False)
            per_block.append(loss)
            total += lam * loss
        return total, per_block

    def backward(self, fwd: NetForward, truth_params, truth_landmarks,
                 weights: LossWeights, detach_params: bool = False,
                 detach_render: bool = False):
        """Accumulate weight gradients and return the input gradients.

        Gradients flow between blocks along the feature maps and, unless
        detached, along the parameter estimates into the upstream block's
        renderer.  Returns (total loss, per-block losses, d_p0, d_images).
        """
        batch = fwd.images.shape[0]
        total = 0.0
        per_block = []
        d_pout = np.zeros_like(fwd.blocks[0].p_in)
        d_pin = d_pout
        d_feat_next = None
        d_images = np.zeros_like(fwd.images)
        d_images_half = np.zeros_like(fwd.images_half)

        for i in range(len(self.blocks) - 1, -1, -1):
            block = self.blocks[i]
            cache = fwd.blocks[i]
            loss, lam, d_delta_loss, d_pin_loss = self._block_loss(
                i, cache, truth_params, truth_landmarks, weights, True)
            per_block.append(loss)
            total += lam * loss

            d_delta = d_delta_loss + d_pout
            d_pin = d_pin_loss + d_pout

            d_h1d = block.fc2.backward(d_delta, cache.fc2_cache)
            d_h1 = nn.dropout_backward(d_h1d, cache.drop_mask)
            d_h1 = nn.relu_backward(d_h1, cache.fc1_mask)
            d_flat = block.fc1.backward(d_h1, cache.fc1_cache)
            d_cur = d_flat.reshape(cache.feat.shape)
            if d_feat_next is not None:
                d_cur = d_cur + d_feat_next

            for si in range(len(block.convs) - 1, -1, -1):
                conv, bn = block.convs[si]
                ccache, bcache, rmask, pooled = cache.conv_caches[si]
                if pooled:
                    d_cur = nn.avgpool2_backward(d_cur)
                d_cur = nn.relu_backward(d_cur, rmask)
                d_cur = bn.backward(d_cur, bcache)
                d_cur = conv.backward(d_cur, ccache)

            if i == 0:
                d_img, d_v = d_cur[:, :1], d_cur[:, 1:]
                d_images += d_img
                d_feat_next = None
            elif self.cfg.input_variant == "IFV":
                d_images_half += d_cur[:, :1]
                d_feat_next = d_cur[:, 1:-1]
                d_v = d_cur[:, -1:]
            elif self.cfg.input_variant == "FV":
                d_feat_next = d_cur[:, :-1]
                d_v = d_cur[:, -1:]
            else:
                d_images_half += d_cur[:, :1]
                d_feat_next = None
                d_v = d_cur[:, -1:]

            if not (detach_render or detach_params):
                cfg = self.cfg_full if i == 0 else self.cfg_half
                scale = 1.0 if i == 0 else 0.5
                for b in range(batch):
                    scaled = cache.p_in[b].copy()
                    scaled[:8] *= scale
                    params = ParamVector.from_vector(scaled, self.model.n_id,
                                                     self.model.n_exp)
                    grad = rasterize_backward(cache.records[b], d_v[b, 0],
                                              self.model, params, cfg)
                    grad[:8] *= scale
                    d_pin[b] += grad

            d_pout = d_pin if not detach_params else np.zeros_like(d_pin)

        d_images += nn.avgpool2_backward(d_images_half)
        per_block.reverse()
        return total, per_block, d_pin, d_images


def _bn_forward_no_update(bn, y):
    """Train-mode batch norm without touching the running statistics."""
    mean = y.mean(axis=(0, 2, 3))
    var = y.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (y - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = (bn.params["gamma"][None, :, None, None] * xhat
           + bn.params["beta"][None, :, None, None])
    return out, (xhat, inv_std, True)


# ---------------------------------------------------------------------------
# Training, evaluation, checkpoints
# ---------------------------------------------------------------------------


def _dataset_p0(model, dataset):
    return np.stack([initialize_params(s.bbox, model).as_vector() for s in dataset])


def evaluate(net: VisualizationNetwork, dataset, p0=None):
    """Per-block validation metrics over a dataset.

    Returns a list of rows {block, nme, mape}; block 0 reports the metrics
    of the initialization itself.
    """
    model = net.model
    if p0 is None:
        p0 = _dataset_p0(model, dataset)
    images = np.stack([s.image for s in dataset])
    fwd = net.forward(images, p0, train=False)
    stages = [p0] + fwd.params_per_block
    rows = []
    for bi, stage in enumerate(stages):
        nmes, mapes = [], []
        for b, sample in enumerate(dataset):
            params = ParamVector.from_vector(stage[b], model.n_id, model.n_exp)
            pts = project_all(model, params)[:, model.landmark_indices]
            est = LandmarkSet(pts, np.ones(model.num_landmarks, dtype=bool))
            nmes.append(nme(est, sample.landmarks, sample.bbox))
            mapes.append(mape(est, sample.landmarks))
        rows.append({"block": bi, "nme": float(np.mean(nmes)),
                     "mape": float(np.mean(mapes))})
    return rows


def train_toy(model: ShapeModel, train_set, val_set, cfg: BlockConfig,
              hyper: TrainConfig, weights: LossWeights | None = None):
    """Train the stack on synthetic data; returns (network, metric rows).

    Momentum SGD with weight decay; the learning rate drops by the
    configured factor at the configured epoch fractions.  Deterministic
    for a fixed seed.  Metric rows hold per-epoch, per-block mean training
    loss and validation error.
    """
    if not train_set:
        raise TrainingError("training set is empty")
    net = VisualizationNetwork(model, cfg, seed=hyper.seed)
    if weights is None:
        from .losses import build_weights
        weights = build_weights(model, [s.params for s in train_set])

    rng = np.random.default_rng(hyper.seed)
    opt = nn.SGD(net.layers(), lr=hyper.lr, momentum=hyper.momentum,
                 weight_decay=hyper.weight_decay)
    images = np.stack([s.image for s in train_set])
    p0 = _dataset_p0(model, train_set)
    truth = np.stack([s.params.as_vector() for s in train_set])
    landmarks = [s.landmarks for s in train_set]
    drop_points = [int(f * hyper.epochs) for f in hyper.lr_drops]

    history = []
    for epoch in range(hyper.epochs):
        opt.lr = hyper.lr * hyper.lr_drop_factor ** sum(
            epoch >= d for d in drop_points)
        order = rng.permutation(len(train_set))
        epoch_losses = np.zeros(cfg.n_blocks)
        batches = 0
        for start in range(0, len(order), hyper.batch_size):
            sel = order[start:start + hyper.batch_size]
            try:
                fwd = net.forward(images[sel], p0[sel], train=True, rng=rng)
                opt.zero_grads()
                total, per_block, _, _ = net.backward(
                    fwd, truth[sel], [landmarks[j] for j in sel], weights,
                    detach_params=not hyper.end_to_end)
            except RasterError as exc:
                raise TrainingError(
                    "diverged at epoch %d batch %d: %s (lr too high?)"
                    % (epoch, batches, exc)) from exc
            if not np.isfinite(total):
                raise TrainingError(
                    "non-finite loss at epoch %d batch %d (lr too high?)"
                    % (epoch, batches))
            opt.step()
            epoch_losses += np.asarray(per_block)
            batches += 1
        epoch_losses /= max(batches, 1)
        try:
            val_rows = evaluate(net, val_set) if val_set else []
        except RasterError as exc:
            raise TrainingError(
                "diverged during validation after epoch %d: %s (lr too high?)"
                % (epoch, exc)) from exc
        for bi in range(cfg.n_blocks):
            row = {"epoch": epoch, "block": bi + 1,
                   "loss": float(epoch_losses[bi]),
                   "nme": val_rows[bi + 1]["nme"] if val_set else float("nan")}
            history.append(row)
        if hyper.verbose:
            tail = " ".join("b%d=%.2f" % (r["block"], r["nme"])
                            for r in history[-cfg.n_blocks:])
            print("epoch %d loss %.4g val NME %s"
                  % (epoch, float(epoch_losses.sum()), tail))
    return net, history


def save_checkpoint(net: VisualizationNetwork, path) -> None:
    """Write weights, batch-norm statistics and the architecture to .npz."""
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(net.cfg)}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **net.state_dict())


def load_checkpoint(path, model: ShapeModel) -> VisualizationNetwork:
    """Rebuild a network from a checkpoint file."""
    with np.load(path) as blob:
        if "__meta__" not in blob:
            raise TrainingError("checkpoint missing metadata")
        meta = json.loads(bytes(blob["__meta__"].tobytes()).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise TrainingError("unsupported checkpoint version %r" % meta.get("version"))
        cfg_dict = meta["config"]
        cfg_dict["filters"] = [[tuple(f) for f in row] for row in cfg_dict["filters"]]
        cfg_dict["loss_schedule"] = [tuple(e) for e in cfg_dict["loss_schedule"]]
        cfg = BlockConfig(**cfg_dict)
        net = VisualizationNetwork(model, cfg)
        net.load_state_dict({k: blob[k] for k in blob.files if k != "__meta__"})
    return net
