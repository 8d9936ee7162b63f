"""Blended conditional-process affordance model.

Observations ``(t, action, effect)`` are encoded by separate action and effect
encoders, blended with convex weights, averaged into one latent ``r`` and
concatenated with depth-image features and the query phase before a shared
dense layer feeds the action and effect decoders. Each decoder emits a mean
and a positive standard deviation per dimension.

All public methods take and return raw (un-normalised) channel values;
normalisation statistics live in :class:`~affordplan.dataset.ChannelConfig`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Node, Tape, read_checkpoint, write_checkpoint
from .core.tape import exact_mean_rows
from .dataset import ChannelConfig

IMAGE_CHANNELS = (32, 64, 64, 128, 128)
ENCODER_WIDTHS = (32, 64, 64, 128, 128, 256)
DECODER_WIDTHS = (512, 256, 128, 32)


@dataclass
class ModelConfig:
    action_dim: int = 2
    effect_dim: int = 2
    latent_dim: int = 128
    image_feat_dim: int = 16
    decoder_input_dim: int = 1024
    image_size: int = 48
    image_channels: tuple = IMAGE_CHANNELS
    encoder_widths: tuple = ENCODER_WIDTHS
    decoder_widths: tuple = DECODER_WIDTHS
    leaky_slope: float = 0.01
    std_floor: float = 1e-3  # added after softplus, normalised units
    depth_height_scale: float = 10.0
    decoder_output_activation: bool = False

    def __post_init__(self):
        self.image_channels = tuple(self.image_channels)
        self.encoder_widths = tuple(self.encoder_widths)
        self.decoder_widths = tuple(self.decoder_widths)
        if self.action_dim < 1 or self.effect_dim < 1:
            raise ValueError("action_dim and effect_dim must be >= 1")

    @property
    def merged_dim(self) -> int:
        return self.latent_dim + self.image_feat_dim + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_channels", "encoder_widths", "decoder_widths"):
            d[k] = list(d[k])
        return d

    def layer_shapes(self) -> dict[str, tuple]:
        """Parameter name -> shape, in a fixed order."""
        shapes: dict[str, tuple] = {}
        cin = 2
        for i, cout in enumerate(self.image_channels):
            shapes[f"img.conv{i}.k"] = (3, 3, cin, cout)
            shapes[f"img.conv{i}.b"] = (cout,)
            cin = cout
        side = self.image_size
        for _ in self.image_channels:
            side //= 2
        shapes["img.fc.w"] = (side * side * cin, self.image_feat_dim)
        shapes["img.fc.b"] = (self.image_feat_dim,)
        for prefix, dim in (("act", self.action_dim), ("eff", self.effect_dim)):
            widths = (1 + dim, *self.encoder_widths, self.latent_dim)
            for i in range(len(widths) - 1):
                shapes[f"{prefix}.l{i}.w"] = (widths[i], widths[i + 1])
                shapes[f"{prefix}.l{i}.b"] = (widths[i + 1],)
        shapes["merge.w"] = (self.merged_dim, self.decoder_input_dim)
        shapes["merge.b"] = (self.decoder_input_dim,)
        for prefix, dim in (("dec_a", self.action_dim), ("dec_e", self.effect_dim)):
            widths = (self.decoder_input_dim, *self.decoder_widths, 2 * dim)
            for i in range(len(widths) - 1):
                shapes[f"{prefix}.l{i}.w"] = (widths[i], widths[i + 1])
                shapes[f"{prefix}.l{i}.b"] = (widths[i + 1],)
        return shapes


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            fan_in, fan_out = 9 * shape[2], 9 * shape[3]
        else:
            fan_in, fan_out = shape
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return params


@dataclass
class BlendWeights:
    w1: float  # action channel
    w2: float  # effect channel

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or abs(self.w1 + self.w2 - 1.0) > 1e-9:
            raise ValueError(f"blend weights must be non-negative and sum to 1, got ({self.w1}, {self.w2})")

    def as_tuple(self):
        return (self.w1, self.w2)


ACTION_ONLY = BlendWeights(1.0, 0.0)
EFFECT_ONLY = BlendWeights(0.0, 1.0)
EVEN = BlendWeights(0.5, 0.5)


def as_weights(w) -> BlendWeights:
    return w if isinstance(w, BlendWeights) else BlendWeights(*w)


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class TrajectoryPrediction:
    phases: np.ndarray
    action: GaussianPrediction  # [T, action_dim]
    effect: GaussianPrediction  # [T, effect_dim]


class _Params:
    """Lazily wraps parameter arrays as tape leaves."""

    def __init__(self, tape: Tape, arrays: dict[str, np.ndarray], trainable: bool):
        self.tape, self.arrays, self.trainable = tape, arrays, trainable
        self.nodes: dict[str, Node] = {}

    def __getitem__(self, name) -> Node:
        node = self.nodes.get(name)
        if node is None:
            node = self.tape.leaf(self.arrays[name], requires_grad=self.trainable, name=name)
            self.nodes[name] = node
        return node

    def grads(self) -> dict[str, np.ndarray]:
        return {k: n.grad for k, n in self.nodes.items() if n.grad is not None}


@dataclass
class AffordanceModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    channels: ChannelConfig
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, channels: ChannelConfig | None = None, seed: int = 0, dtype=np.float32):
        if channels is None:
            channels = ChannelConfig(config.action_dim, config.effect_dim)
        if (channels.action_dim, channels.effect_dim) != (config.action_dim, config.effect_dim):
            raise ValueError("channel statistics do not match the model dims")
        return cls(config, init_params(config, seed, dtype), channels)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    # -- graph pieces (shared by training, inference and input gradients) --
    def _mlp(self, T: Tape, P: _Params, prefix: str, x: Node, n_layers: int, last_act: bool) -> Node:
        a = self.config.leaky_slope
        for i in range(n_layers):
            x = T.dense(x, P[f"{prefix}.l{i}.w"], P[f"{prefix}.l{i}.b"])
            if i < n_layers - 1 or last_act:
                x = T.leaky_relu(x, a)
        return x

    def _image_graph(self, T: Tape, P: _Params, depth) -> Node:
        img = self.prepare_image(depth)
        if img.shape != (self.config.image_size, self.config.image_size, 2):
            raise ValueError(f"depth image must be {self.config.image_size}x{self.config.image_size}x2, got {img.shape}")
        x = T.leaf(img)
        for i in range(len(self.config.image_channels)):
            x = T.conv3x3_pool(x, P[f"img.conv{i}.k"], P[f"img.conv{i}.b"], self.config.leaky_slope)
        x = T.reshape(x, (-1,))
        return T.dense(x, P["img.fc.w"], P["img.fc.b"])

    def _encoder_graph(self, T: Tape, P: _Params, ts, acts_n, effs_n, weights: BlendWeights) -> Node:
        """Blended per-observation latents [k, latent]; zero-weight channels are not evaluated."""
        n_layers = len(self.config.encoder_widths) + 1
        dt = self.dtype
        t_col = T.leaf(np.asarray(ts, dtype=dt).reshape(-1, 1))
        parts = []
        if weights.w1 > 0:
            x = T.concat([t_col, _node(T, acts_n, dt)], axis=1)
            parts.append(T.scale(self._mlp(T, P, "act", x, n_layers, last_act=True), weights.w1))
        if weights.w2 > 0:
            x = T.concat([t_col, _node(T, effs_n, dt)], axis=1)
            parts.append(T.scale(self._mlp(T, P, "eff", x, n_layers, last_act=False), weights.w2))
        return parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])

    def _decoder_graph(self, T: Tape, P: _Params, r: Node, feat: Node, tq) -> tuple[Node, Node, Node, Node]:
        tq = np.asarray(tq, dtype=self.dtype).reshape(-1, 1)
        n = tq.shape[0]
        merged = T.concat([T.tile_rows(r, n), T.tile_rows(feat, n), T.leaf(tq)], axis=1)
        h = T.dense(merged, P["merge.w"], P["merge.b"])
        n_layers = len(self.config.decoder_widths) + 1
        out = []
        for prefix, dim in (("dec_a", self.config.action_dim), ("dec_e", self.config.effect_dim)):
            y = self._mlp(T, P, prefix, h, n_layers, last_act=self.config.decoder_output_activation)
            mean = T.slice_last(y, 0, dim)
            raw = T.slice_last(y, dim, 2 * dim)
            std = T.affine_const(T.softplus(raw), 1.0, self.config.std_floor)
            out.extend([mean, std])
        return tuple(out)

    # -- inputs ---------------------------------------------------------------
    def prepare_image(self, depth) -> np.ndarray:
        img = np.array(depth, dtype=self.dtype, copy=True)
        img[..., 0] *= self.config.depth_height_scale
        return img

    def _check_obs(self, observations):
        if len(observations) == 0:
            raise ValueError("at least one conditioning observation is required")
        ts = np.array([o[0] for o in observations], dtype=np.float64)
        acts = np.array([np.asarray(o[1], dtype=np.float64).reshape(-1) for o in observations])
        effs = np.array([np.asarray(o[2], dtype=np.float64).reshape(-1) for o in observations])
        if acts.shape[1] != self.config.action_dim:
            raise ValueError(f"action observations have {acts.shape[1]} dims, model expects {self.config.action_dim}")
        if effs.shape[1] != self.config.effect_dim:
            raise ValueError(f"effect observations have {effs.shape[1]} dims, model expects {self.config.effect_dim}")
        return ts, self.channels.norm_action(acts), self.channels.norm_effect(effs)

    # -- inference API --------------------------------------------------------
    def encode_image(self, depth) -> np.ndarray:
        T = Tape(enabled=False)
        return self._image_graph(T, _Params(T, self.params, False), depth).value

    def encode_observation(self, obs, weights) -> np.ndarray:
        """Blended latent r_i of one (t, action, effect) observation."""
        weights = as_weights(weights)
        ts, a, e = self._check_obs([obs])
        T = Tape(enabled=False)
        return self._encoder_graph(T, _Params(T, self.params, False), ts, a, e, weights).value[0]

    @staticmethod
    def aggregate(latents) -> np.ndarray:
        latents = np.asarray(latents)
        if latents.ndim != 2 or latents.shape[0] == 0:
            raise ValueError("aggregate needs a non-empty list of latents")
        return exact_mean_rows(latents)

    def encode(self, observations, weights) -> np.ndarray:
        weights = as_weights(weights)
        ts, a, e = self._check_obs(observations)
        T = Tape(enabled=False)
        lat = self._encoder_graph(T, _Params(T, self.params, False), ts, a, e, weights)
        return T.mean_rows(lat).value

    def query(self, r, image_feat, t_q) -> tuple[GaussianPrediction, GaussianPrediction]:
        tq = np.atleast_1d(np.asarray(t_q, dtype=np.float64))
        if np.any((tq < 0) | (tq > 1)) or not np.all(np.isfinite(tq)):
            raise ValueError(f"query phase must lie in [0, 1], got {t_q}")
        T = Tape(enabled=False)
        P = _Params(T, self.params, False)
        ma, sa, me, se = self._decoder_graph(T, P, T.leaf(np.asarray(r, self.dtype)), T.leaf(np.asarray(image_feat, self.dtype)), tq)
        ch = self.channels
        act = GaussianPrediction(ch.denorm_action(ma.value.astype(np.float64)), sa.value.astype(np.float64) * ch.action_scale)
        eff = GaussianPrediction(ch.denorm_effect(me.value.astype(np.float64)), se.value.astype(np.float64) * ch.effect_scale)
        if np.ndim(t_q) == 0:
            act = GaussianPrediction(act.mean[0], act.std[0])
            eff = GaussianPrediction(eff.mean[0], eff.std[0])
        return act, eff

    def predict_trajectory(self, depth_or_feat, observations, weights, ts) -> TrajectoryPrediction:
        """Condition once, then query every phase in ``ts``."""
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        if ts.size == 0:
            raise ValueError("ts must be non-empty")
        feat = self._feat(depth_or_feat)
        r = self.encode(observations, weights)
        act, eff = self.query(r, feat, ts)
        return TrajectoryPrediction(ts, act, eff)

    def predict_effects_batch(self, depth_or_feat, observation_sets, weights, ts) -> np.ndarray:
        """Effect means [S, T, effect_dim] for S independent conditioning sets, all queried at ``ts``."""
        weights = as_weights(weights)
        feat = self._feat(depth_or_feat)
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        sizes = [len(s) for s in observation_sets]
        flat = [o for s in observation_sets for o in s]
        t_obs, a, e = self._check_obs(flat)
        T = Tape(enabled=False)
        P = _Params(T, self.params, False)
        lat = self._encoder_graph(T, P, t_obs, a, e, weights).value
        if all(k == 1 for k in sizes):
            r = lat
        else:
            bounds = np.cumsum([0, *sizes])
            r = np.stack([exact_mean_rows(lat[a:b]) for a, b in zip(bounds[:-1], bounds[1:])])
        S, n_t = len(sizes), len(ts)
        merged = np.concatenate(
            [
                np.repeat(r, n_t, axis=0),
                np.broadcast_to(feat, (S * n_t, feat.shape[0])),
                np.tile(ts, S)[:, None],
            ],
            axis=1,
        ).astype(self.dtype)
        h = T.dense(merged, P["merge.w"], P["merge.b"])
        y = self._mlp(T, P, "dec_e", h, len(self.config.decoder_widths) + 1, self.config.decoder_output_activation)
        mean = y.value[:, : self.config.effect_dim].astype(np.float64)
        return self.channels.denorm_effect(mean).reshape(S, n_t, self.config.effect_dim)

    def _feat(self, depth_or_feat) -> np.ndarray:
        arr = np.asarray(depth_or_feat)
        if arr.shape == (self.config.image_feat_dim,):
            return arr.astype(self.dtype)
        return self.encode_image(arr)

    # -- gradients ------------------------------------------------------------
    def effect_input_gradient(self, depth_or_feat, candidate_effect, loss_target, t: float = 1.0,
                              normalized: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
        """MSE between the predicted effect mean at phase ``t`` and ``loss_target``, and
        its gradient with respect to the effect-channel input, with the model
        conditioned on the single observation (t, candidate_effect) at weights (0, 1).

        With ``normalized=True`` inputs, target, loss and gradient are all in
        normalised effect units; otherwise meters (raw units).

        Returns (loss, gradient, predicted mean).
        """
        feat = self._feat(depth_or_feat)
        ch = self.channels
        cand = np.asarray(candidate_effect, dtype=np.float64).reshape(-1)
        target = np.asarray(loss_target, dtype=np.float64).reshape(-1)
        cand_n = cand if normalized else ch.norm_effect(cand)
        T = Tape()
        P = _Params(T, self.params, trainable=False)
        e_leaf = T.leaf(cand_n.astype(np.float64).reshape(1, -1).astype(self.dtype), requires_grad=True, name="effect_input")
        lat = self._encoder_graph(T, P, [t], np.zeros((1, self.config.action_dim)), e_leaf, EFFECT_ONLY)
        r = T.mean_rows(lat)
        _, _, mean, _ = self._decoder_graph(T, P, r, T.leaf(feat), [t])
        mean = T.reshape(mean, (-1,))
        if not normalized:
            mean = T.affine_const(mean, ch.effect_scale, ch.effect_mean)
        loss = T.mse(mean, target.astype(self.dtype))
        T.backward(loss)
        grad = e_leaf.grad.reshape(-1).astype(np.float64)
        if not normalized:
            grad = grad / ch.effect_scale
        return float(loss.value), grad, mean.value.astype(np.float64)

    def loss_graph(self, T: Tape, P: _Params, image, obs_t, obs_a, obs_e, weights: BlendWeights,
                   tgt_t, tgt_a, tgt_e) -> Node:
        """Summed Gaussian NLL of both decoders on normalised targets."""
        feat = self._image_graph(T, P, image)
        lat = self._encoder_graph(T, P, obs_t, obs_a, obs_e, weights)
        r = T.mean_rows(lat)
        ma, sa, me, se = self._decoder_graph(T, P, r, feat, tgt_t)
        dt = self.dtype
        la = T.gaussian_nll(T.leaf(np.asarray(tgt_a, dt).reshape(ma.shape)), ma, sa)
        le = T.gaussian_nll(T.leaf(np.asarray(tgt_e, dt).reshape(me.shape)), me, se)
        return T.sum_nodes([la, le])

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra_config: dict | None = None, adam=None) -> None:
        cfg = {
            "model": self.config.to_dict(),
            "channels": self.channels.to_dict(),
            "meta": self.meta,
        }
        if extra_config:
            cfg.update(extra_config)
        blobs = {f"param.{k}": v for k, v in self.params.items()}
        if adam is not None:
            cfg["adam"] = {
                "step": adam.step,
                "learning_rate": adam.learning_rate,
                "beta1": adam.beta1,
                "beta2": adam.beta2,
                "epsilon": adam.epsilon,
            }
            blobs.update({f"adam.m.{k}": v for k, v in adam.m.items()})
            blobs.update({f"adam.v.{k}": v for k, v in adam.v.items()})
        write_checkpoint(path, cfg, blobs)

    @classmethod
    def load(cls, path, with_adam: bool = False):
        cfg, blobs = read_checkpoint(path)
        config = ModelConfig(**cfg["model"])
        params = {k[len("param.") :]: v for k, v in blobs.items() if k.startswith("param.")}
        expected = config.layer_shapes()
        if set(params) != set(expected):
            raise ValueError(f"{path}: checkpoint parameters do not match the model config")
        for k, shape in expected.items():
            if params[k].shape != tuple(shape):
                raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, expected {shape}")
        model = cls(config, params, ChannelConfig.from_dict(cfg["channels"]), cfg.get("meta", {}))
        if not with_adam:
            return model
        from .core import AdamState

        state = None
        if "adam" in cfg:
            a = cfg["adam"]
            state = AdamState(a["learning_rate"], a["beta1"], a["beta2"], a["epsilon"], a["step"])
            state.m = {k[len("adam.m.") :]: v.copy() for k, v in blobs.items() if k.startswith("adam.m.")}
            state.v = {k[len("adam.v.") :]: v.copy() for k, v in blobs.items() if k.startswith("adam.v.")}
        return model, state, cfg


def _node(T: Tape, x, dtype) -> Node:
    if isinstance(x, Node):
        return x
    return T.leaf(np.asarray(x, dtype=dtype))


def shape_trace(model: AffordanceModel) -> list[tuple[str, tuple, tuple]]:
    """(layer, input shape, output shape) for one forward pass on zero inputs.

    Dense shapes are reported without the row axis.
    """
    cfg = model.config
    T = Tape(enabled=False)
    P = _Params(T, model.params, False)
    rows: list[tuple[str, tuple, tuple]] = []
    x = T.leaf(model.prepare_image(np.zeros((cfg.image_size, cfg.image_size, 2))))
    for i in range(len(cfg.image_channels)):
        y = T.conv3x3_pool(x, P[f"img.conv{i}.k"], P[f"img.conv{i}.b"], cfg.leaky_slope)
        rows.append((f"img.conv{i}", x.shape, y.shape))
        x = y
    flat = T.reshape(x, (-1,))
    feat = T.dense(flat, P["img.fc.w"], P["img.fc.b"])
    rows.append(("img.fc", flat.shape, feat.shape))
    for prefix, dim, last_act in (("act", cfg.action_dim, True), ("eff", cfg.effect_dim, False)):
        h = T.leaf(np.zeros((1, 1 + dim), model.dtype))
        n = len(cfg.encoder_widths) + 1
        for i in range(n):
            y = T.dense(h, P[f"{prefix}.l{i}.w"], P[f"{prefix}.l{i}.b"])
            rows.append((f"{prefix}.l{i}", h.shape[1:], y.shape[1:]))
            h = T.leaky_relu(y, cfg.leaky_slope) if (i < n - 1 or last_act) else y
    merged = T.concat([h, T.tile_rows(feat, 1), T.leaf(np.zeros((1, 1), model.dtype))], axis=1)
    rows.append(("concat", (h.shape[1], feat.shape[0], 1), merged.shape[1:]))
    h = T.dense(merged, P["merge.w"], P["merge.b"])
    rows.append(("merge", merged.shape[1:], h.shape[1:]))
    for prefix in ("dec_a", "dec_e"):
        x = h
        for i in range(len(cfg.decoder_widths) + 1):
            y = T.dense(x, P[f"{prefix}.l{i}.w"], P[f"{prefix}.l{i}.b"])
            rows.append((f"{prefix}.l{i}", x.shape[1:], y.shape[1:]))
            x = T.leaky_relu(y, cfg.leaky_slope)
    return rows
