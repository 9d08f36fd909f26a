"""Experiment harness: configuration, training runs, evaluation sweeps.

A run is fully described by one flat ``RunConfig``. Values resolve in
three layers: dataset-profile defaults, then a key=value config file,
then explicit overrides (CLI flags). The resolved config is echoed into
the output directory so any report can be regenerated from (config echo,
seed, checkpoint).

Determinism contract: every random draw comes from a generator seeded by
(master seed, stream id, indices), so per-episode work is identical
whether it runs serially or on a worker pool (``FSTAL_WORKERS``), and two
identical invocations produce byte-identical reports and checkpoints.
Wall-clock timing is the one exception; it goes to a separate
``timing.json`` outside that contract.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as md
from .data import (AnnotatedVideo, SyntheticConfig, SyntheticWorld,
                   FormatError, load_annotations, load_feature_file,
                   load_split_manifest, rasterize_labels, sample_episode,
                   write_annotations, write_feature_file,
                   write_split_manifest)
from .localization import (EvalConfig, localize, map_report, report_to_csv,
                           score_episode)

logger = logging.getLogger(__name__)

WORKER_ENV_VAR = "FSTAL_WORKERS"

# rng stream ids (second element of the seed sequence)
STREAM_TRAIN = 1
STREAM_VAL = 2
STREAM_EVAL = 3
STREAM_INIT = 4


@dataclass
class RunConfig:
    """Every knob of a run, flat so config files and flags map 1:1.

    Defaults are the 100-snippet dataset profile; ``PROFILES`` holds the
    per-profile overrides.
    """

    profile: str = "activitynet-like"
    seed: int = 0
    out_dir: str = "runs/out"
    data_dir: str = ""
    k_shot: int = 5
    setting: str = "untrimmed"
    no_qva: bool = False

    # meta-training schedule
    epochs: int = 50
    episodes_per_epoch: int = 200
    val_episodes: int = 200
    meta_lr: float = 0.004

    # evaluation
    eval_tasks: int = 5000
    snippet_threshold: float = 0.5
    nms_sigma: float = 0.5
    nms_cutoff: float = 0.7
    top_n: int = 100
    tiou_grid: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)

    # classifier + inner loop
    temperature: float = 10.0
    inner_iterations: int = 100
    inner_lr: float = 0.004
    loss_epsilon: float = 1.0

    # query-adaptive transformer
    heads: int = 4
    latent_dim: int = 256
    dropout: float = 0.1

    # data model
    snippet_count: int = 100
    embedding_dim: int = 32

    # synthetic world
    train_classes: int = 20
    val_classes: int = 2
    test_classes: int = 3
    videos_per_class: int = 10
    video_duration: float = 120.0
    fg_noise: float = 0.3
    jitter_max_deg: float = 15.0
    bg_components: int = 6
    bg_scale: float = 1.0
    bg_noise: float = 0.5
    context_shift: float = 0.5
    component_concentration: float = 0.4
    distractor_min_deg: float = 25.0
    distractor_max_deg: float = 50.0
    segment_min_frac: float = 0.08
    segment_max_frac: float = 0.30
    single_instance: bool = False
    class_prefix: str = "cls"

    def adapt_config(self) -> md.AdaptConfig:
        return md.AdaptConfig(iterations=self.inner_iterations,
                              learning_rate=self.inner_lr,
                              epsilon=self.loss_epsilon,
                              setting=self.setting)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(snippet_threshold=self.snippet_threshold,
                          nms_sigma=self.nms_sigma,
                          nms_cutoff=self.nms_cutoff,
                          top_n=self.top_n,
                          tiou_grid=self.tiou_grid)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(embedding_dim=self.embedding_dim,
                               num_snippets=self.snippet_count,
                               duration=self.video_duration,
                               fg_noise=self.fg_noise,
                               jitter_max_deg=self.jitter_max_deg,
                               bg_components=self.bg_components,
                               bg_scale=self.bg_scale,
                               bg_noise=self.bg_noise,
                               context_shift=self.context_shift,
                               component_concentration=self.component_concentration,
                               distractor_deg_range=(self.distractor_min_deg,
                                                     self.distractor_max_deg),
                               segment_len_frac=(self.segment_min_frac,
                                                 self.segment_max_frac),
                               single_instance=self.single_instance)

    def as_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["tiou_grid"] = list(self.tiou_grid)
        return doc


PROFILES = {
    "activitynet-like": {},
    "thumos-like": {
        "snippet_count": 256,
        "nms_cutoff": 0.6,
        "top_n": 200,
    },
    # Desk-scale synthetic benchmark: smaller transformer and schedule so a
    # full train + ablation run stays in the minutes range on a laptop CPU.
    "synthetic": {
        "class_prefix": "syn",
        "heads": 2,
        "latent_dim": 16,
        "epochs": 4,
        "episodes_per_epoch": 150,
        "val_episodes": 80,
        "eval_tasks": 500,
        "inner_iterations": 30,
        "meta_lr": 0.002,
        "distractor_min_deg": 40.0,
        "distractor_max_deg": 40.0,
    },
    # Same structure, different prototypes and heavier background; used as
    # the second domain in cross-domain evaluation.
    "synthetic-shifted": {
        "class_prefix": "synb",
        "heads": 2,
        "latent_dim": 16,
        "epochs": 4,
        "episodes_per_epoch": 150,
        "val_episodes": 80,
        "eval_tasks": 500,
        "inner_iterations": 30,
        "meta_lr": 0.002,
        "distractor_min_deg": 40.0,
        "distractor_max_deg": 40.0,
        "bg_scale": 1.3,
        "context_shift": 0.8,
        "segment_min_frac": 0.04,
        "segment_max_frac": 0.14,
    },
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


class ConfigError(ValueError):
    """Bad config file contents or unknown keys/values."""


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines ('#' comments allowed) into overrides."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            overrides[key] = value
    return overrides


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    kind = _FIELD_TYPES[key]
    text = value.strip()
    if kind in ("int",):
        return int(text)
    if kind in ("float",):
        return float(text)
    if kind in ("bool",):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if kind in ("tuple",):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    return text


def resolve_config(profile: str | None = None, config_path=None,
                   overrides: dict | None = None) -> RunConfig:
    """Layer profile defaults, config file, then explicit overrides."""
    merged: dict = {}
    file_values = parse_config_file(config_path) if config_path else {}
    name = profile or file_values.get("profile") or (overrides or {}).get(
        "profile") or "activitynet-like"
    if name not in PROFILES:
        raise ConfigError(
            f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    merged["profile"] = name
    merged.update(PROFILES[name])
    merged.update(file_values)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    cleaned = {k: _coerce(k, v) for k, v in merged.items()}
    cfg = RunConfig(**cleaned)
    if cfg.k_shot not in (1, 5):
        raise ConfigError("k_shot must be 1 or 5")
    if cfg.latent_dim % cfg.heads:
        raise ConfigError("heads must divide latent_dim")
    return cfg


def _worker_count() -> int:
    raw = os.environ.get(WORKER_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring bad %s=%r", WORKER_ENV_VAR, raw)
        return 1


def _is_synthetic(cfg: RunConfig) -> bool:
    return cfg.profile.startswith("synthetic") and not cfg.data_dir


def _world_for(cfg: RunConfig) -> SyntheticWorld:
    return SyntheticWorld(cfg.train_classes, cfg.val_classes,
                          cfg.test_classes, cfg.synthetic_config(),
                          seed=cfg.seed, class_prefix=cfg.class_prefix)


def build_pools(cfg: RunConfig) -> dict:
    """Pools of annotated videos by split, from the synthetic world or a
    dataset directory (features + annotations + split manifest)."""
    if _is_synthetic(cfg):
        world = _world_for(cfg)
        return {split: world.build_pool(split, cfg.videos_per_class, cfg.seed)
                for split in ("train", "val", "test")}
    if not cfg.data_dir:
        raise ConfigError(
            f"profile {cfg.profile!r} needs --data (a dataset directory)")
    return load_dataset_dir(cfg.data_dir, expected_snippets=cfg.snippet_count)


def load_dataset_dir(path, expected_snippets: int | None = None) -> dict:
    """Load a dataset directory into per-split, class-indexed pools.

    Layout: ``splits.json``, ``annotations/<id>.json``,
    ``features/<id>.qatf``. Every failure names the file and reason.
    """
    ann_dir = os.path.join(path, "annotations")
    feat_dir = os.path.join(path, "features")
    manifest_path = os.path.join(path, "splits.json")
    if not os.path.isdir(ann_dir):
        raise FormatError(f"{ann_dir}: missing annotations directory")
    splits = load_split_manifest(manifest_path)
    pools: dict = {"train": {}, "val": {}, "test": {}}
    dim = None
    for fname in sorted(os.listdir(ann_dir)):
        if not fname.endswith(".json"):
            continue
        ann_path = os.path.join(ann_dir, fname)
        video_id, duration, segments = load_annotations(ann_path)
        feat_path = os.path.join(feat_dir, f"{video_id}.qatf")
        if not os.path.exists(feat_path):
            raise FormatError(f"{feat_path}: missing feature file for "
                              f"annotation {ann_path}")
        features = load_feature_file(feat_path)
        if expected_snippets and features.shape[0] != expected_snippets:
            raise FormatError(
                f"{feat_path}: has {features.shape[0]} snippets, profile "
                f"expects {expected_snippets}")
        if dim is None:
            dim = features.shape[1]
        elif features.shape[1] != dim:
            raise FormatError(
                f"{feat_path}: embedding dim {features.shape[1]} differs "
                f"from {dim} seen earlier")
        video = AnnotatedVideo(video_id, duration, features, segments)
        for label in video.labels():
            if label not in splits:
                raise FormatError(
                    f"{manifest_path}: class {label!r} (from {ann_path}) "
                    f"missing from the split manifest")
            pools[splits[label]].setdefault(label, []).append(video)
    if dim is None:
        raise FormatError(f"{path}: dataset directory holds no videos")
    return pools


def _infer_embedding_dim(pools: dict) -> int:
    for pool in pools.values():
        for videos in pool.values():
            for video in videos:
                return video.embedding_dim
    raise ValueError("no videos in any pool")


# ---------------------------------------------------------------------------
# episode evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArmSpec:
    """One way to run an episode: which transformer (possibly none) and
    how many of the sampled support videos to use."""

    params: md.TransformerParams | None
    use_qva: bool = True
    k_shot: int | None = None      # None: the episode's full support


def _prepare_classifier(support, label: str, cfg: RunConfig):
    pairs = []
    for video in support:
        mask, _, _ = rasterize_labels(video, label)
        pairs.append((video.features, mask))
    init = md.init_from_support(pairs, temperature=cfg.temperature)
    phi_star, _ = md.adapt_classifier(init, pairs, cfg.adapt_config())
    return phi_star


def _evaluate_episode(index: int, pool, cfg: RunConfig, arms: dict,
                      stream: int, k_shot: int):
    """Evaluate one sampled episode under one or more named arms.

    Arms requesting the same support subset share the adapted classifier,
    so paired comparisons (qva on/off, K subsets) see identical inputs.
    """
    rng = np.random.default_rng([cfg.seed, stream, index])
    episode = sample_episode(pool, k_shot, rng, cfg.setting)
    query = episode.query
    gts = [s for s in query.segments if s.label == episode.label]
    eval_cfg = cfg.eval_config()
    adapted = {}
    out = {}
    for name, arm in arms.items():
        k = arm.k_shot if arm.k_shot is not None else len(episode.support)
        if not 1 <= k <= len(episode.support):
            raise ValueError(f"arm {name!r} wants k={k}, episode has "
                             f"{len(episode.support)} support videos")
        if k not in adapted:
            adapted[k] = _prepare_classifier(episode.support[:k],
                                             episode.label, cfg)
        weights = adapted[k]
        if arm.use_qva:
            if arm.params is None:
                raise ValueError(f"arm {name!r} requests query adaptation "
                                 "without a trained transformer")
            weights = md.adapt_to_query(weights, query.features, arm.params)
        probs = md.classify_snippets(weights, query.features)
        predictions = localize(probs, query.duration, eval_cfg)
        out[name] = score_episode(f"task{index:05d}:{query.video_id}",
                                  episode.label, predictions, gts, eval_cfg)
    return out


_POOL_STATE: dict = {}


def _pool_init(pool, cfg, arms, stream, k_shot):
    _POOL_STATE.update(pool=pool, cfg=cfg, arms=arms, stream=stream,
                       k_shot=k_shot)


def _pool_task(index: int):
    s = _POOL_STATE
    return _evaluate_episode(index, s["pool"], s["cfg"], s["arms"],
                             s["stream"], s["k_shot"])


def run_arms(pool, cfg: RunConfig, arms: dict, tasks: int,
             stream: int = STREAM_EVAL, k_shot: int | None = None):
    """Evaluate ``tasks`` episodes under named arms; list of per-episode
    dicts (arm name -> EpisodeResult), in task order regardless of the
    worker count."""
    k = k_shot if k_shot is not None else cfg.k_shot
    workers = _worker_count()
    if workers > 1 and tasks > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers, initializer=_pool_init,
                      initargs=(pool, cfg, arms, stream, k)) as mp:
            return mp.map(_pool_task, range(tasks))
    return [_evaluate_episode(i, pool, cfg, arms, stream, k)
            for i in range(tasks)]


def evaluate_pool(params, pool, cfg: RunConfig, tasks: int, *,
                  no_qva: bool = False, stream: int = STREAM_EVAL,
                  k_shot: int | None = None):
    """Evaluate ``tasks`` episodes; returns a list of EpisodeResult.

    The transformer parameters are read-only here (the adaptation block is
    frozen at inference). With ``no_qva`` the support-adapted classifier
    is used directly.
    """
    use_qva = not no_qva and params is not None
    arms = {"main": ArmSpec(params=params if use_qva else None,
                            use_qva=use_qva)}
    rounds = run_arms(pool, cfg, arms, tasks, stream, k_shot)
    return [r["main"] for r in rounds]


def evaluate_pool_paired(params, pool, cfg: RunConfig, tasks: int, *,
                         stream: int = STREAM_EVAL, k_shot: int | None = None):
    """Evaluate each episode with and without query adaptation, sharing
    the support-side work. Returns ``(with_qva, without_qva)`` lists."""
    arms = {"qva": ArmSpec(params=params, use_qva=True),
            "noqva": ArmSpec(params=None, use_qva=False)}
    rounds = run_arms(pool, cfg, arms, tasks, stream, k_shot)
    return [r["qva"] for r in rounds], [r["noqva"] for r in rounds]


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: md.TransformerParams          # best by validation mAP
    final_params: md.TransformerParams
    log_rows: list = field(default_factory=list)   # (epoch, mean_loss, val_map)
    best_epoch: int = -1
    best_val_map: float = float("nan")


def meta_train(cfg: RunConfig, pools: dict) -> TrainResult:
    """Episodic meta-training with per-epoch validation selection.

    One transformer update per episode; validation episodes use a fixed
    stream so every epoch sees the same tasks. With ``epochs == 0`` the
    randomly initialized parameters are returned untrained.
    """
    dim = _infer_embedding_dim(pools)
    init_rng = np.random.default_rng([cfg.seed, STREAM_INIT])
    params = md.TransformerParams.random(init_rng, dim, cfg.latent_dim,
                                         cfg.heads, dropout=cfg.dropout)
    adapt_cfg = cfg.adapt_config()
    adam = None
    result = TrainResult(params=params.copy(), final_params=params)
    best_map = -math.inf
    if cfg.epochs > 0:
        # the untrained block competes in best-model selection, so a
        # training run that never helps on val falls back to it
        init_val = evaluate_pool(params, pools["val"], cfg,
                                 cfg.val_episodes, stream=STREAM_VAL)
        best_map = map_report(init_val, cfg.eval_config())["mean"]
        result.best_val_map = best_map
    for epoch in range(cfg.epochs):
        losses = []
        for i in range(cfg.episodes_per_epoch):
            rng = np.random.default_rng([cfg.seed, STREAM_TRAIN, epoch, i])
            episode = sample_episode(pools["train"], cfg.k_shot, rng,
                                     cfg.setting)
            loss, adam = md.meta_step(params, episode, adapt_cfg, cfg.meta_lr,
                                      adam, rng=rng,
                                      temperature=cfg.temperature)
            losses.append(loss)
        val_results = evaluate_pool(params, pools["val"], cfg,
                                    cfg.val_episodes, stream=STREAM_VAL)
        val_map = map_report(val_results, cfg.eval_config())["mean"]
        mean_loss = float(np.mean(losses))
        result.log_rows.append((epoch, mean_loss, val_map))
        logger.info("epoch %d mean_loss=%.4f val_map=%.4f",
                    epoch, mean_loss, val_map)
        if val_map > best_map:
            best_map = val_map
            result.params = params.copy()
            result.best_epoch = epoch
            result.best_val_map = val_map
    result.final_params = params
    return result


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _ensure_out(cfg: RunConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _echo_config(cfg: RunConfig, out_dir: str) -> None:
    path = os.path.join(out_dir, "config.resolved.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.as_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_report(out_dir: str, report: dict, results) -> None:
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report_to_csv(report))
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "predictions.jsonl"), "w",
              encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "episode_id": r.episode_id,
                "class": r.label,
                "candidates": [
                    {"start": c.start, "end": c.end, "score": c.score}
                    for c in r.predictions
                ],
            }, sort_keys=True))
            fh.write("\n")


def cmd_meta_train(cfg: RunConfig) -> dict:
    """Train, select by validation mAP, write checkpoint + log + echo."""
    out_dir = _ensure_out(cfg)
    _echo_config(cfg, out_dir)
    pools = build_pools(cfg)
    result = meta_train(cfg, pools)
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    md.save_checkpoint(ckpt_path, result.params, cfg.temperature, cfg.as_dict())
    log_path = os.path.join(out_dir, "training_log.csv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,val_map\n")
        for epoch, loss, val_map in result.log_rows:
            fh.write(f"{epoch},{loss:.6f},{val_map:.6f}\n")
    return {"checkpoint": ckpt_path, "log": log_path,
            "best_epoch": result.best_epoch,
            "best_val_map": result.best_val_map,
            "epochs": cfg.epochs}


def cmd_evaluate(cfg: RunConfig, checkpoint_path, tasks: int | None = None,
                 pools: dict | None = None) -> dict:
    """Evaluate a checkpoint on the test classes; Table-style report.

    The transformer is frozen; with ``cfg.no_qva`` the support-adapted
    classifier is used directly. Wall-clock seconds/task goes to
    ``timing.json`` and stdout only (it is machine-dependent and excluded
    from the byte-identical report contract).
    """
    params, temperature, _ = md.load_checkpoint(checkpoint_path)
    if cfg.temperature != temperature:
        cfg = dataclasses.replace(cfg, temperature=temperature)
    out_dir = _ensure_out(cfg)
    _echo_config(cfg, out_dir)
    if pools is None:
        pools = build_pools(cfg)
    dim = _infer_embedding_dim(pools)
    if params.embed_dim != dim:
        raise ConfigError(
            f"checkpoint built for embedding dim {params.embed_dim}, "
            f"dataset has {dim}")
    n_tasks = tasks if tasks is not None else cfg.eval_tasks
    started = time.perf_counter()
    results = evaluate_pool(params, pools["test"], cfg, n_tasks,
                            no_qva=cfg.no_qva)
    elapsed = time.perf_counter() - started
    report = map_report(results, cfg.eval_config())
    _write_report(out_dir, report, results)
    seconds_per_task = elapsed / max(1, n_tasks)
    with open(os.path.join(out_dir, "timing.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "tasks": n_tasks,
            "seconds_per_task": seconds_per_task,
            "note": "wall-clock on this host and backend; not comparable "
                    "to GPU pipelines",
        }, fh, sort_keys=True, indent=2)
        fh.write("\n")
    report = dict(report)
    report["seconds_per_task"] = seconds_per_task
    return report


def cmd_cross_eval(train_cfg: RunConfig, test_cfg: RunConfig,
                   checkpoint_path, tasks: int | None = None) -> dict:
    """Evaluate a checkpoint trained on one domain against another.

    With identical profiles this degenerates to plain evaluation;
    otherwise the two class pools must use disjoint identifiers.
    """
    if train_cfg.profile == test_cfg.profile and train_cfg.data_dir == test_cfg.data_dir:
        return cmd_evaluate(test_cfg, checkpoint_path, tasks)
    train_pools = build_pools(train_cfg)
    test_pools = build_pools(test_cfg)
    train_classes = {c for pool in train_pools.values() for c in pool}
    test_classes = {c for pool in test_pools.values() for c in pool}
    overlap = train_classes & test_classes
    if overlap:
        raise ConfigError(
            f"cross-domain pools share class identifiers: {sorted(overlap)[:5]}")
    return cmd_evaluate(test_cfg, checkpoint_path, tasks, pools=test_pools)


def cmd_gradcheck(cfg: RunConfig, tolerance: float = 1e-6,
                  step: float = 1e-5) -> dict:
    """Primitive-by-primitive checks plus a full-episode check (C=8, T=6,
    m=2, K=1). Returns per-block max relative errors and a pass flag."""
    rng = np.random.default_rng([cfg.seed, 0x6C])
    blocks = {}

    def run(name, build, point):
        report = ad.grad_check(build, point, step=step, tolerance=tolerance)
        blocks[name] = report.max_rel_error

    run("matmul",
        lambda t, n: ad.sum_all(ad.matmul(n["a"], n["b"])),
        {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))})
    run("row_softmax",
        lambda t, n: ad.sum_all(ad.mul(ad.row_softmax(n["a"]), n["m"])),
        {"a": rng.normal(size=(3, 5)), "m": rng.normal(size=(3, 5))})
    run("layer_norm",
        lambda t, n: ad.sum_all(ad.mul(
            ad.layer_norm(n["a"], n["g"], n["b"]), n["m"])),
        {"a": rng.normal(size=(4, 6)), "g": rng.normal(size=(1, 6)),
         "b": rng.normal(size=(1, 6)), "m": rng.normal(size=(4, 6))})
    run("sigmoid",
        lambda t, n: ad.sum_all(ad.log(ad.sigmoid(n["a"]))),
        {"a": rng.normal(size=(3, 3))})
    run("cosine_rows",
        lambda t, n: ad.sum_all(ad.cosine_rows(n["a"], n["w"])),
        {"a": rng.normal(size=(5, 4)), "w": rng.normal(size=(1, 4))})

    dim, t_count, heads = 8, 6, 2
    params = md.TransformerParams.random(rng, dim, dim, heads, dropout=0.0,
                                         identity_start=False)
    phi = md.ClassifierWeights(rng.normal(size=(1, dim)), cfg.temperature)
    query = rng.normal(size=(t_count, dim))
    mask = (rng.random(t_count) < 0.5).astype(np.int64)
    if mask.sum() == 0:
        mask[0] = 1
    adapt_cfg = md.AdaptConfig(setting="untrimmed",
                               epsilon=cfg.loss_epsilon)

    def build_episode(tape, nodes):
        param_nodes = {k: v for k, v in nodes.items() if k != "phi"}
        x_node = tape.leaf(query)
        adapted = md._transformer_block(tape, nodes["phi"], x_node,
                                        param_nodes, params)
        probs = md._taped_classify(tape, x_node, adapted, phi.temperature)
        c_fg, c_bg = md._ce_coefficients(mask, adapt_cfg.epsilon,
                                         adapt_cfg.setting, 1)
        return md._taped_ce(tape, probs, c_fg, c_bg)

    point = dict(params.as_dict())
    point["phi"] = phi.weights
    report = ad.grad_check(build_episode, point, step=step,
                           tolerance=tolerance)
    blocks["full_episode"] = report.max_rel_error
    for name, err in report.per_input.items():
        blocks[f"episode.{name}"] = err

    worst_name = max(blocks, key=blocks.get)
    return {
        "tolerance": tolerance,
        "step": step,
        "blocks": blocks,
        "max_rel_error": blocks[worst_name],
        "worst_block": worst_name,
        "passed": blocks[worst_name] < tolerance,
    }


def cmd_gen_synthetic(cfg: RunConfig, out_dir: str | None = None) -> dict:
    """Materialize the synthetic world in the on-disk dataset format."""
    out_dir = out_dir or cfg.out_dir
    ann_dir = os.path.join(out_dir, "annotations")
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(ann_dir, exist_ok=True)
    os.makedirs(feat_dir, exist_ok=True)
    world = _world_for(cfg)
    count = 0
    for split in ("train", "val", "test"):
        pool = world.build_pool(split, cfg.videos_per_class, cfg.seed)
        for videos in pool.values():
            for video in videos:
                write_feature_file(
                    os.path.join(feat_dir, f"{video.video_id}.qatf"),
                    video.features)
                write_annotations(
                    os.path.join(ann_dir, f"{video.video_id}.json"),
                    video.video_id, video.duration, video.segments)
                count += 1
    write_split_manifest(os.path.join(out_dir, "splits.json"), world.splits)
    return {"out_dir": out_dir, "videos": count,
            "classes": len(world.splits)}


# ---------------------------------------------------------------------------
# ablation experiment (query adaptation on/off)
# ---------------------------------------------------------------------------

def qva_ablation(cfg: RunConfig, seeds, tasks: int | None = None,
                 include_one_shot: bool = False) -> dict:
    """The with/without query adaptation experiment, optionally with a
    paired one-shot arm.

    Per seed: meta-train at ``cfg.k_shot``, then run every test episode
    with and without query adaptation on a shared support-adapted
    classifier. With ``include_one_shot`` a transformer is additionally
    trained at K=1 and each episode is re-run using only its first
    support video, so the K comparison is paired on identical queries.
    Returns per-seed mean mAPs and pooled per-episode series.
    """
    n_tasks = tasks if tasks is not None else cfg.eval_tasks
    pooled = {"qva_base_diffs": [], "k_full": [], "k_one": []}
    per_seed = []
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed)
        pools = build_pools(run_cfg)
        trained = meta_train(run_cfg, pools)
        arms = {"qva": ArmSpec(params=trained.params, use_qva=True),
                "base": ArmSpec(params=None, use_qva=False)}
        if include_one_shot:
            one_cfg = dataclasses.replace(run_cfg, k_shot=1)
            trained_one = meta_train(one_cfg, pools)
            arms["qva_k1"] = ArmSpec(params=trained_one.params,
                                     use_qva=True, k_shot=1)
        rounds = run_arms(pools["test"], run_cfg, arms, n_tasks)
        entry = {"seed": seed}
        for name in arms:
            entry[f"{name}_mean_map"] = float(
                np.mean([r[name].ap_mean for r in rounds]))
        per_seed.append(entry)
        pooled["qva_base_diffs"].extend(
            r["qva"].ap_mean - r["base"].ap_mean for r in rounds)
        if include_one_shot:
            pooled["k_full"].extend(r["qva"].ap_mean for r in rounds)
            pooled["k_one"].extend(r["qva_k1"].ap_mean for r in rounds)
    return {"per_seed": per_seed, **pooled}
