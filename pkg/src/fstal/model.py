"""Task-specific snippet classifier and its query-adaptive transformer.

The classifier is a single weight row scored against every snippet by
temperature-scaled cosine similarity. It is built in three stages:

1. initialize from the mean of the support set's foreground embeddings;
2. adapt on the support set with a few Adam steps on a size-balanced
   binary cross entropy (per-video weight (l_fg + l_bg) / (eps + l_side),
   so the rarer side counts more);
3. adapt once more to each query video with a small pre-LN transformer
   block whose attention reads the classifier row as the query token and
   the query video's snippets as keys and values.

Stage 3's parameters are the only meta-learned state. Meta-training runs
one backward pass per episode, treating the stage-2 weights as a constant
(first-order), and applies a single Adam update to the transformer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Episode, rasterize_labels
from .optim import AdamState

DEFAULT_TEMPERATURE = 10.0
CHECKPOINT_FORMAT = "fstal-checkpoint"
CHECKPOINT_VERSION = 1


class AdaptationError(RuntimeError):
    """The inner adaptation loop hit a non-finite loss."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or from an unknown version."""


@dataclass
class ClassifierWeights:
    """One foreground-vs-background weight row plus its temperature."""

    weights: np.ndarray            # 1 x C
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.weights = ad.as_matrix(self.weights)
        if self.weights.shape[0] != 1:
            raise ValueError("classifier weights must be a single row")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClassifierWeights":
        return ClassifierWeights(self.weights.copy(), self.temperature)


@dataclass
class AdaptConfig:
    """Inner-loop settings for support-set adaptation."""

    iterations: int = 100
    learning_rate: float = 0.004
    epsilon: float = 1.0           # loss stabilizer, in snippets
    setting: str = "untrimmed"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.setting not in ("trimmed", "untrimmed"):
            raise ValueError(f"unknown setting {self.setting!r}")


@dataclass
class TransformerParams:
    """Weights of the query-adaptive transformer block.

    ``w_query/w_key/w_value`` hold one C x (d/m) projection per head,
    ``w_out`` maps the concatenated heads back to C, and the MLP is a
    single C x C layer with bias. Two layer norms (gain/bias rows) are
    applied before the attention and before the MLP.
    """

    w_query: list
    w_key: list
    w_value: list
    w_out: np.ndarray
    mlp_weight: np.ndarray
    mlp_bias: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    dropout: float = 0.1

    def __post_init__(self):
        self.w_query = [ad.as_matrix(w) for w in self.w_query]
        self.w_key = [ad.as_matrix(w) for w in self.w_key]
        self.w_value = [ad.as_matrix(w) for w in self.w_value]
        self.w_out = ad.as_matrix(self.w_out)
        self.mlp_weight = ad.as_matrix(self.mlp_weight)
        self.mlp_bias = ad.as_matrix(self.mlp_bias)
        self.ln1_gain = ad.as_matrix(self.ln1_gain)
        self.ln1_bias = ad.as_matrix(self.ln1_bias)
        self.ln2_gain = ad.as_matrix(self.ln2_gain)
        self.ln2_bias = ad.as_matrix(self.ln2_bias)
        m = len(self.w_query)
        if m < 1 or len(self.w_key) != m or len(self.w_value) != m:
            raise ValueError("w_query/w_key/w_value must be equal-length lists")
        dim, head_dim = self.w_query[0].shape
        for w in (*self.w_query, *self.w_key, *self.w_value):
            if w.shape != (dim, head_dim):
                raise ValueError("all head projections must share one shape")
        if self.w_out.shape != (m * head_dim, dim):
            raise ValueError(
                f"w_out must be {(m * head_dim, dim)}, got {self.w_out.shape}")
        if self.mlp_weight.shape != (dim, dim) or self.mlp_bias.shape != (1, dim):
            raise ValueError("mlp layer must be C x C with a 1 x C bias")
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            if getattr(self, name).shape != (1, dim):
                raise ValueError(f"{name} must be 1 x C")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for name, arr in self.as_dict().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} contains non-finite values")

    @property
    def num_heads(self) -> int:
        return len(self.w_query)

    @property
    def embed_dim(self) -> int:
        return self.w_query[0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_query[0].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.num_heads * self.head_dim

    def as_dict(self) -> dict:
        """Stable name -> array view of every learnable matrix."""
        out = {}
        for i in range(self.num_heads):
            out[f"w_query.{i}"] = self.w_query[i]
            out[f"w_key.{i}"] = self.w_key[i]
            out[f"w_value.{i}"] = self.w_value[i]
        out["w_out"] = self.w_out
        out["mlp_weight"] = self.mlp_weight
        out["mlp_bias"] = self.mlp_bias
        out["ln1_gain"] = self.ln1_gain
        out["ln1_bias"] = self.ln1_bias
        out["ln2_gain"] = self.ln2_gain
        out["ln2_bias"] = self.ln2_bias
        return out

    def copy(self) -> "TransformerParams":
        return TransformerParams(
            w_query=[w.copy() for w in self.w_query],
            w_key=[w.copy() for w in self.w_key],
            w_value=[w.copy() for w in self.w_value],
            w_out=self.w_out.copy(),
            mlp_weight=self.mlp_weight.copy(),
            mlp_bias=self.mlp_bias.copy(),
            ln1_gain=self.ln1_gain.copy(),
            ln1_bias=self.ln1_bias.copy(),
            ln2_gain=self.ln2_gain.copy(),
            ln2_bias=self.ln2_bias.copy(),
            dropout=self.dropout,
        )

    @classmethod
    def zeros(cls, embed_dim: int, latent_dim: int, heads: int,
              dropout: float = 0.0) -> "TransformerParams":
        """All-zero block: exactly the identity map on the classifier."""
        if latent_dim % heads:
            raise ValueError("head count must divide the latent dimension")
        head_dim = latent_dim // heads
        z = lambda *shape: np.zeros(shape)
        return cls(
            w_query=[z(embed_dim, head_dim) for _ in range(heads)],
            w_key=[z(embed_dim, head_dim) for _ in range(heads)],
            w_value=[z(embed_dim, head_dim) for _ in range(heads)],
            w_out=z(latent_dim, embed_dim),
            mlp_weight=z(embed_dim, embed_dim),
            mlp_bias=z(1, embed_dim),
            ln1_gain=z(1, embed_dim),
            ln1_bias=z(1, embed_dim),
            ln2_gain=z(1, embed_dim),
            ln2_bias=z(1, embed_dim),
            dropout=dropout,
        )

    @classmethod
    def random(cls, rng: np.random.Generator, embed_dim: int, latent_dim: int,
               heads: int, dropout: float = 0.1, scale: float = 0.1,
               identity_start: bool = True) -> "TransformerParams":
        """Random init. With ``identity_start`` the output projection and
        MLP weight begin at zero, so the untrained block is the identity
        and training walks away from the no-adaptation baseline."""
        if latent_dim % heads:
            raise ValueError("head count must divide the latent dimension")
        head_dim = latent_dim // heads
        r = lambda *shape: rng.normal(size=shape) * scale
        maybe = (lambda *shape: np.zeros(shape)) if identity_start else r
        return cls(
            w_query=[r(embed_dim, head_dim) for _ in range(heads)],
            w_key=[r(embed_dim, head_dim) for _ in range(heads)],
            w_value=[r(embed_dim, head_dim) for _ in range(heads)],
            w_out=maybe(latent_dim, embed_dim),
            mlp_weight=maybe(embed_dim, embed_dim),
            mlp_bias=np.zeros((1, embed_dim)),
            ln1_gain=np.ones((1, embed_dim)),
            ln1_bias=np.zeros((1, embed_dim)),
            ln2_gain=np.ones((1, embed_dim)),
            ln2_bias=np.zeros((1, embed_dim)),
            dropout=dropout,
        )


# ---------------------------------------------------------------------------
# classifier: init, scoring, loss
# ---------------------------------------------------------------------------

def init_from_support(support, temperature: float = DEFAULT_TEMPERATURE
                      ) -> ClassifierWeights:
    """Mean of all foreground snippet embeddings across the support set.

    ``support`` is a list of (features, mask) pairs. At least one
    foreground snippet must exist somewhere, else the class is
    unrepresentable and a ValueError is raised.
    """
    rows = []
    for features, mask in support:
        features = np.asarray(features, dtype=np.float64)
        mask = np.asarray(mask)
        rows.append(features[mask.astype(bool)])
    stacked = np.concatenate(rows, axis=0) if rows else np.empty((0, 0))
    if stacked.shape[0] == 0:
        raise ValueError("support set has no foreground snippets; "
                         "the class cannot be represented")
    return ClassifierWeights(stacked.mean(axis=0, keepdims=True), temperature)


def classify_snippets(weights: ClassifierWeights, features: np.ndarray
                      ) -> np.ndarray:
    """Per-snippet foreground probability, sigmoid(tau * cos(x_t, w)).

    Scale-invariant per snippet (cosine); output is a length-T vector with
    every value strictly inside (0, 1).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != weights.dim:
        raise ValueError(
            f"features must be T x {weights.dim}, got {features.shape}")
    cos = ad.cosine_rows_forward(features, weights.weights)
    return ad.sigmoid_forward(cos * weights.temperature).ravel()


def balanced_cross_entropy(scores: np.ndarray, mask: np.ndarray,
                           epsilon: float = 1.0,
                           setting: str = "untrimmed") -> float:
    """Size-balanced binary cross entropy for one video.

    Foreground and background sums are weighted by
    (l_fg + l_bg) / (epsilon + l_side) and the result is -(sum)/2, so the
    mean over K videos equals the episode-level loss. In the trimmed
    setting the background term is identically zero, whatever the mask.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    mask = np.asarray(mask).ravel()
    if scores.shape != mask.shape:
        raise ValueError("scores and mask must have equal length")
    p = np.clip(scores, ad.SIGMOID_CLAMP, 1.0 - ad.SIGMOID_CLAMP)
    fg = mask.astype(bool)
    l_fg = int(fg.sum())
    l_bg = mask.size - l_fg
    total = float(mask.size)
    w_fg = total / (epsilon + l_fg)
    fg_term = w_fg * float(np.sum(np.log(p[fg])))
    if setting == "trimmed":
        bg_term = 0.0
    else:
        w_bg = total / (epsilon + l_bg)
        bg_term = w_bg * float(np.sum(np.log(1.0 - p[~fg])))
    return -0.5 * (fg_term + bg_term)


def _ce_coefficients(mask: np.ndarray, epsilon: float, setting: str,
                     k_videos: int):
    """Constant multipliers so the taped loss is sum(c_fg * log p) +
    sum(c_bg * log(1 - p)) over the stacked snippets."""
    mask = np.asarray(mask, dtype=np.float64).ravel()
    l_fg = float(mask.sum())
    l_bg = mask.size - l_fg
    total = float(mask.size)
    coef = -1.0 / (2.0 * k_videos)
    c_fg = coef * (total / (epsilon + l_fg)) * mask
    if setting == "trimmed":
        c_bg = np.zeros_like(mask)
    else:
        c_bg = coef * (total / (epsilon + l_bg)) * (1.0 - mask)
    return c_fg.reshape(-1, 1), c_bg.reshape(-1, 1)


def _taped_ce(tape, probs, c_fg: np.ndarray, c_bg: np.ndarray):
    """Cross-entropy node from probability node + constant coefficients."""
    ones = tape.leaf(np.ones_like(probs.value))
    fg_part = ad.mul(tape.leaf(c_fg), ad.log(probs))
    bg_part = ad.mul(tape.leaf(c_bg), ad.log(ad.sub(ones, probs)))
    return ad.sum_all(ad.add(fg_part, bg_part))


def _taped_classify(tape, features_node, weights_node, temperature: float):
    cos = ad.cosine_rows(features_node, weights_node)
    return ad.sigmoid(ad.scale(cos, temperature))


def support_loss(weights: ClassifierWeights, support, cfg: AdaptConfig
                 ) -> float:
    """Episode-level adaptation loss at fixed weights (no gradient)."""
    per_video = [
        balanced_cross_entropy(classify_snippets(weights, feats), mask,
                               cfg.epsilon, cfg.setting)
        for feats, mask in support
    ]
    return float(np.mean(per_video))


def adapt_classifier(init: ClassifierWeights, support, cfg: AdaptConfig):
    """Inner loop: Adam on the balanced cross entropy over the support set.

    Returns ``(weights, loss_trace)`` where the trace holds the loss at
    each iteration before its update. The temperature never changes; only
    the weight row does. A non-finite loss aborts with the step index.
    """
    if not support:
        raise ValueError("support set is empty")
    weights = init.copy()
    if cfg.iterations == 0:
        return weights, []

    k_videos = len(support)
    feats = np.concatenate(
        [np.asarray(f, dtype=np.float64) for f, _ in support], axis=0)
    cfg_parts = [_ce_coefficients(m, cfg.epsilon, cfg.setting, k_videos)
                 for _, m in support]
    c_fg = np.concatenate([p[0] for p in cfg_parts], axis=0)
    c_bg = np.concatenate([p[1] for p in cfg_parts], axis=0)

    adam = AdamState()
    phi = weights.weights
    trace = []
    for step in range(cfg.iterations):
        tape = ad.Tape()
        w_node = tape.leaf(phi, requires_grad=True)
        x_node = tape.leaf(feats)
        probs = _taped_classify(tape, x_node, w_node, weights.temperature)
        loss = _taped_ce(tape, probs, c_fg, c_bg)
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise AdaptationError(
                f"non-finite adaptation loss at iteration {step}")
        trace.append(value)
        tape.backward(loss)
        adam.step({"phi": phi}, {"phi": w_node.grad}, cfg.learning_rate)
    return ClassifierWeights(phi, weights.temperature), trace


# ---------------------------------------------------------------------------
# query-adaptive transformer
# ---------------------------------------------------------------------------

def _transformer_block(tape, weights_node, query_node, param_nodes,
                       params: TransformerParams, drop_masks=None):
    """Pre-LN block: attention with the classifier row as the query token
    and the video's snippets as keys/values, then a one-layer MLP, each
    behind a residual connection."""
    ln1 = lambda node: ad.layer_norm(node, param_nodes["ln1_gain"],
                                     param_nodes["ln1_bias"])
    u = ln1(weights_node)
    keys_in = ln1(query_node)
    inv_sqrt = 1.0 / math.sqrt(params.head_dim)
    heads = []
    for i in range(params.num_heads):
        q = ad.matmul(u, param_nodes[f"w_query.{i}"])
        k = ad.matmul(keys_in, param_nodes[f"w_key.{i}"])
        v = ad.matmul(keys_in, param_nodes[f"w_value.{i}"])
        attn = ad.row_softmax(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt))
        if drop_masks is not None:
            attn = ad.dropout_mask(attn, drop_masks[f"attn.{i}"])
        heads.append(ad.matmul(attn, v))
    mixed = ad.matmul(ad.concat_cols(heads), param_nodes["w_out"])
    if drop_masks is not None:
        mixed = ad.dropout_mask(mixed, drop_masks["proj"])
    z = ad.add(weights_node, mixed)
    hidden = ad.layer_norm(z, param_nodes["ln2_gain"], param_nodes["ln2_bias"])
    mlp = ad.add(ad.matmul(hidden, param_nodes["mlp_weight"]),
                 param_nodes["mlp_bias"])
    if drop_masks is not None:
        mlp = ad.dropout_mask(mlp, drop_masks["mlp"])
    return ad.add(z, mlp)


def _draw_drop_masks(params: TransformerParams, t_count: int,
                     rng: np.random.Generator):
    rate = params.dropout
    if rate <= 0.0 or rng is None:
        return None
    keep = 1.0 - rate

    def mask(shape):
        return (rng.random(shape) < keep).astype(np.float64) / keep

    masks = {f"attn.{i}": mask((1, t_count)) for i in range(params.num_heads)}
    masks["proj"] = mask((1, params.embed_dim))
    masks["mlp"] = mask((1, params.embed_dim))
    return masks


def adapt_to_query(weights: ClassifierWeights, query_features: np.ndarray,
                   params: TransformerParams) -> ClassifierWeights:
    """Adapt support-trained weights to one query video (inference mode,
    dropout off). With all transformer weights at zero this is exactly the
    identity map on the weight row."""
    query_features = np.asarray(query_features, dtype=np.float64)
    if query_features.shape[1] != weights.dim:
        raise ValueError(
            f"query features must be T x {weights.dim}, got {query_features.shape}")
    if params.embed_dim != weights.dim:
        raise ValueError(
            f"transformer built for C={params.embed_dim}, classifier has C={weights.dim}")
    tape = ad.Tape()
    param_nodes = {k: tape.leaf(v) for k, v in params.as_dict().items()}
    w_node = tape.leaf(weights.weights)
    x_node = tape.leaf(query_features)
    out = _transformer_block(tape, w_node, x_node, param_nodes, params)
    return ClassifierWeights(out.value.copy(), weights.temperature)


def episode_loss_and_grads(params: TransformerParams,
                           phi_star: ClassifierWeights,
                           query_features: np.ndarray,
                           query_mask: np.ndarray,
                           cfg: AdaptConfig,
                           rng: np.random.Generator | None = None):
    """Forward + one backward pass of the meta objective.

    The support-adapted weights enter as a constant (first-order
    meta-gradient); only the transformer parameters receive gradients.
    Returns ``(loss_value, grads_by_name)``.
    """
    query_features = np.asarray(query_features, dtype=np.float64)
    tape = ad.Tape()
    param_nodes = {k: tape.leaf(v, requires_grad=True)
                   for k, v in params.as_dict().items()}
    w_node = tape.leaf(phi_star.weights)
    x_node = tape.leaf(query_features)
    masks = _draw_drop_masks(params, query_features.shape[0], rng)
    adapted = _transformer_block(tape, w_node, x_node, param_nodes, params,
                                 drop_masks=masks)
    probs = _taped_classify(tape, x_node, adapted, phi_star.temperature)
    c_fg, c_bg = _ce_coefficients(query_mask, cfg.epsilon, cfg.setting, 1)
    loss = _taped_ce(tape, probs, c_fg, c_bg)
    tape.backward(loss)
    grads = {k: n.grad for k, n in param_nodes.items() if n.grad is not None}
    return float(loss.value[0, 0]), grads


def meta_step(params: TransformerParams, episode: Episode, cfg: AdaptConfig,
              meta_lr: float, adam: AdamState | None = None,
              rng: np.random.Generator | None = None,
              temperature: float = DEFAULT_TEMPERATURE):
    """One meta-training step on one episode; training-only.

    Pipeline: init from support, adapt on support, transformer-adapt to
    the query, classify the query, balanced cross entropy against its
    labels, one backward pass, one Adam update to the transformer
    parameters in place. Returns ``(loss, adam_state)``.
    """
    if not any(s.label == episode.label for s in episode.query.segments):
        raise ValueError(
            f"episode query {episode.query.video_id!r} carries no "
            f"{episode.label!r} labels; meta_step is training-only")
    support_pairs = []
    for video in episode.support:
        mask, _, _ = rasterize_labels(video, episode.label)
        support_pairs.append((video.features, mask))
    init = init_from_support(support_pairs, temperature=temperature)
    phi_star, _ = adapt_classifier(init, support_pairs, cfg)
    query_mask, _, _ = rasterize_labels(episode.query, episode.label)
    loss, grads = episode_loss_and_grads(params, phi_star,
                                         episode.query.features, query_mask,
                                         cfg, rng=rng)
    if adam is None:
        adam = AdamState()
    adam.step(params.as_dict(), grads, meta_lr)
    return loss, adam


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode_array(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _decode_array(doc) -> np.ndarray:
    try:
        shape = tuple(doc["shape"])
        data = np.asarray(doc["data"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bad array record: {exc}") from exc
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"array data does not match shape {shape}")
    return data.reshape(shape)


def save_checkpoint(path, params: TransformerParams, temperature: float,
                    config: dict | None = None) -> None:
    """Write a versioned JSON checkpoint. Floats are serialized at full
    round-trip precision and keys are sorted, so identical state always
    produces identical bytes."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "temperature": float(temperature),
        "dropout": params.dropout,
        "num_heads": params.num_heads,
        "config": config or {},
        "arrays": {k: _encode_array(v) for k, v in params.as_dict().items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint -> (TransformerParams, temperature, config)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {doc.get('version')!r}")
    arrays = {k: _decode_array(v) for k, v in doc["arrays"].items()}
    heads = int(doc["num_heads"])
    try:
        params = TransformerParams(
            w_query=[arrays[f"w_query.{i}"] for i in range(heads)],
            w_key=[arrays[f"w_key.{i}"] for i in range(heads)],
            w_value=[arrays[f"w_value.{i}"] for i in range(heads)],
            w_out=arrays["w_out"],
            mlp_weight=arrays["mlp_weight"],
            mlp_bias=arrays["mlp_bias"],
            ln1_gain=arrays["ln1_gain"],
            ln1_bias=arrays["ln1_bias"],
            ln2_gain=arrays["ln2_gain"],
            ln2_bias=arrays["ln2_bias"],
            dropout=float(doc["dropout"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    return params, float(doc["temperature"]), doc.get("config", {})
