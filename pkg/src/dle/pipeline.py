"""Episode orchestration: localize, expand, propagate, score."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .attention import AttentionParams, attention_from_tensors, ffn_from_tensors, load_params
from .numerics import make_rng
from .pointcloud import Episode
from .sem import SEMParams, adapt_background, background_prototypes, run_sem, self_loss
from .slm import DEFAULT_ATTENTION_GAIN, SLMParams, feature_scale, run_slm
from .transduction import derive_prototypes, transductive_inference

# config-file key -> Config field, for keys whose file spelling differs
KEY_ALIASES = {"N_a": "n_agents", "L": "n_bg_proto", "k": "knn_k"}
KEY_ALIASES_INV = {v: k for k, v in KEY_ALIASES.items()}


@dataclass
class Config:
    tau: float = 0.7
    theta: float = 0.8
    n_agents: int = 100
    n_bg_proto: int = 5
    knn_k: int = 10
    alpha: float = 0.99
    n_fg_proto: int = 10
    points_per_block: int = 2048
    block_size: float = 1.0
    sigma: float = 0.0              # 0 selects the median pairwise node distance
    propagation_iters: int = 50
    kmeans_iters: int = 20
    feature_k: int = 16
    attention_init: str = "identity"
    attention_gain: float = DEFAULT_ATTENTION_GAIN
    params: str = ""                # optional parameter manifest of FMAT tensors
    defaults_used: list = field(default_factory=list, compare=False)

    def file_items(self) -> dict:
        return {KEY_ALIASES_INV.get(f.name, f.name): getattr(self, f.name)
                for f in fields(self) if f.name != "defaults_used"}


def parse_config(text: str) -> Config:
    """Flat ``key = value`` lines; ``#`` starts a comment. Missing keys keep defaults."""
    types = {f.name: f.type for f in fields(Config) if f.name != "defaults_used"}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        name = KEY_ALIASES.get(key, key)
        if name not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = types[name]
        try:
            values[name] = int(val) if kind == "int" else float(val) if kind == "float" else val
        except ValueError:
            raise ValueError(f"config line {lineno}: {key} expects {kind}, got {val!r}") from None
    cfg = Config(**values)
    cfg.defaults_used = sorted(KEY_ALIASES_INV.get(n, n) for n in types if n not in values)
    return cfg


def load_config(path) -> Config:
    if path is None:
        cfg = Config()
        cfg.defaults_used = sorted(cfg.file_items())
        return cfg
    return parse_config(Path(path).read_text())


@dataclass
class EpisodeResult:
    confident: np.ndarray
    expanded: np.ndarray
    filtered: np.ndarray
    final: np.ndarray
    prediction: np.ndarray
    baseline: np.ndarray
    report: dict


def _support_background(episode: Episode) -> np.ndarray:
    rows = []
    for n in range(episode.n_way):
        for F, M in zip(episode.support_features[n], episode.support_masks[n]):
            rows.append(np.asarray(F)[np.asarray(M) == 0])
    return np.concatenate(rows, axis=0)


def _slm_params(cfg: Config, d: int, scale: float, rng, tensors):
    def build(n_agents_total: int) -> SLMParams:
        if tensors is None:
            return SLMParams.default(d, n_agents_total, tau=cfg.tau, init=cfg.attention_init, rng=rng,
                                     feature_scale=scale, gain=cfg.attention_gain)
        p = SLMParams(attention_from_tensors(tensors, "slm.attention"), ffn_from_tensors(tensors, "slm.ffn"),
                      tensors["slm.fc.weight"], tensors["slm.fc.bias"].ravel(), cfg.tau)
        if p.fc_weight.shape[0] != n_agents_total:
            raise ValueError(f"parameter FC expects {p.fc_weight.shape[0]} agents, episode has {n_agents_total}")
        return p
    return build


def _sem_params(cfg: Config, d: int, scale: float, rng, tensors) -> SEMParams:
    if tensors is not None:
        mca = attention_from_tensors(tensors, "sem.mca")
    elif cfg.attention_init == "identity":
        mca = AttentionParams.identity(d, cfg.attention_gain, scale)
    else:
        mca = AttentionParams.random(d, rng)
    return SEMParams(mca, cfg.theta, cfg.n_bg_proto)


def run_pipeline(episode: Episode, cfg: Config, seed: int, episode_id: str = "episode") -> EpisodeResult:
    if episode.support_features is None or episode.query_features is None:
        raise ValueError("episode has no features attached")
    rng = make_rng(seed)
    F_q = np.asarray(episode.query_features, dtype=np.float32)
    d = F_q.shape[1]
    scale = feature_scale(F_q)
    tensors = load_params(cfg.params) if cfg.params else None

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        slm_out = run_slm(episode.support_features, episode.support_masks, F_q, n_agents=cfg.n_agents,
                          tau=cfg.tau, rng=rng, params=_slm_params(cfg, d, scale, rng, tensors),
                          kmeans_iters=cfg.kmeans_iters)
        sem_params = _sem_params(cfg, d, scale, rng, tensors)
        sem = run_sem(F_q, slm_out.confident, episode.n_way, theta=cfg.theta)
        bg = background_prototypes(_support_background(episode), cfg.n_bg_proto, rng, cfg.kmeans_iters)
        bg.adapted = adapt_background(bg.raw, F_q, sem.final, sem_params)
        protos = derive_prototypes(F_q, sem.final, episode.n_way, cfg.n_fg_proto, bg.adapted, rng,
                                   cfg.kmeans_iters)
        prediction = transductive_inference(F_q, protos, episode.n_way, k=cfg.knn_k,
                                            sigma=cfg.sigma or None, alpha=cfg.alpha,
                                            iters=cfg.propagation_iters)
    baseline = metrics.pointlevel_baseline(slm_out.prototypes, F_q, cfg.tau)
    warn_msgs = sorted({str(w.message) for w in caught} | set(slm_out.warnings))
    report = _report(episode, cfg, seed, episode_id, slm_out.confident, sem, prediction, baseline,
                     protos.empty_classes, warn_msgs)
    return EpisodeResult(slm_out.confident, sem.expanded, sem.filtered, sem.final, prediction, baseline, report)


def _stage(mask, gt):
    out = {"selected": int(np.sum(np.asarray(mask) > 0))}
    if gt is not None:
        cov, prec = metrics.fg_rates(mask, gt)
        out["coverage"] = metrics.format_float(cov)
        out["precision"] = metrics.format_float(prec)
    return out


def _report(episode, cfg, seed, episode_id, confident, sem, prediction, baseline, empty, warn_msgs) -> dict:
    gt = None if episode.query_gt is None else np.asarray(episode.query_gt)
    classes = list(range(1, episode.n_way + 1))
    rep = {
        "episode": episode_id,
        "n_way": episode.n_way,
        "k_shot": episode.k_shot,
        "class_ids": list(episode.class_ids),
        "seed": seed,
        "config": cfg.file_items(),
        "defaults_used": list(cfg.defaults_used),
        "n_points": int(len(prediction)),
        "no_seed_classes": list(sem.no_seed),
        "empty_classes": list(empty),
        "warnings": warn_msgs,
        "stages": {
            "baseline": _stage(baseline, gt),
            "confident": _stage(confident, gt),
            "expanded": _stage(sem.expanded, gt),
            "final": _stage(sem.final, gt),
            "prediction": _stage(prediction, gt),
        },
    }
    if gt is not None:
        cov, prec = metrics.fg_rates(sem.final, gt)
        rep["per_class_iou"] = {str(c): metrics.format_float(metrics.iou(prediction, gt, c)) for c in classes}
        rep["miou"] = metrics.format_float(metrics.mean_iou([(prediction, gt)], classes, include_absent=True))
        rep["coverage"] = metrics.format_float(cov)
        rep["precision"] = metrics.format_float(prec)
        rep["self_loss"] = metrics.format_float(self_loss(sem.final, gt)) if np.any(gt == 0) else None
    else:
        rep.update({"per_class_iou": None, "miou": None, "coverage": None, "precision": None,
                    "self_loss": None})
    return rep
