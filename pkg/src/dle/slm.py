"""Structural localization: agents, agent-level correlation, confident region."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionParams, FFNParams, cross_attention, ffn
from .numerics import as_matrix, linear_map, pairwise_cosine
from .sampling import fps_kmeans

DEFAULT_TAU = 0.7
DEFAULT_N_AGENTS = 100
DEFAULT_ATTENTION_GAIN = 10.0


def feature_scale(F) -> float:
    """Median squared row norm."""
    F = np.asarray(F, dtype=np.float64)
    return float(np.median(np.sum(F * F, axis=1)))


@dataclass(frozen=True)
class AgentSet:
    per_class: tuple
    refined: bool = False

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate(self.per_class, axis=0)

    @property
    def n_classes(self) -> int:
        return len(self.per_class)

    @property
    def total(self) -> int:
        return sum(a.shape[0] for a in self.per_class)


@dataclass(frozen=True)
class SLMParams:
    attention: AttentionParams
    ffn: FFNParams
    fc_weight: np.ndarray
    fc_bias: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")

    @classmethod
    def default(cls, d: int, n_agents_total: int, tau: float = DEFAULT_TAU,
                init: str = "identity", rng: np.random.Generator | None = None,
                feature_scale: float = 1.0, gain: float = DEFAULT_ATTENTION_GAIN) -> "SLMParams":
        """Untrained parameters.

        ``init="identity"`` uses gained identity projections and a zero FFN,
        so refinement is sharpened dot-product attention over the query
        features. ``init="random"`` draws projections and FFN weights from a
        seeded Gaussian with scale 1/sqrt(d). The FC layer is the identity
        either way.
        """
        if init == "identity":
            att, f = AttentionParams.identity(d, gain, feature_scale), FFNParams.zeros(d)
        elif init == "random":
            if rng is None:
                raise ValueError("random init needs an rng")
            att, f = AttentionParams.random(d, rng), FFNParams.random(d, rng)
        else:
            raise ValueError(f"unknown init {init!r}")
        return cls(att, f, np.eye(n_agents_total, dtype=np.float32),
                   np.zeros(n_agents_total, dtype=np.float32), tau)


def init_agents(support_fg: list, n_agents: int, rng: np.random.Generator,
                kmeans_iters: int = 20) -> AgentSet:
    """Cluster each class's pooled support foreground rows into agents.

    ``support_fg[n]`` holds the foreground feature rows of class ``n + 1``
    from all shots stacked together.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    agents = []
    for n, rows in enumerate(support_fg):
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise ValueError(f"class {n + 1} has no foreground points")
        k = n_agents
        if rows.shape[0] < n_agents:
            warnings.warn(f"class {n + 1}: {rows.shape[0]} foreground points < {n_agents} agents; "
                          f"using {rows.shape[0]}", RuntimeWarning, stacklevel=2)
            k = rows.shape[0]
        agents.append(fps_kmeans(rows, k, rng, max_iters=kmeans_iters).centroids)
    return AgentSet(tuple(agents), refined=False)


def refine_agents(agents: AgentSet, F_q, params: SLMParams) -> AgentSet:
    if agents.refined:
        raise ValueError("agents are already refined")
    F_q = as_matrix(F_q, "F_q")
    out = tuple(ffn(cross_attention(a, F_q, params.attention), params.ffn) for a in agents.per_class)
    return replace(agents, per_class=out, refined=True)


def class_prototype(features: list, masks: list, class_id: int) -> np.ndarray:
    """Masked average pooling over the rows labelled ``class_id``, pooled across shots."""
    if isinstance(masks, np.ndarray) and masks.ndim == 1:
        features, masks = [features], [masks]
    rows = [np.asarray(F, dtype=np.float64)[np.asarray(M) == class_id] for F, M in zip(features, masks)]
    rows = np.concatenate(rows, axis=0)
    if rows.shape[0] == 0:
        raise ValueError(f"no points of class {class_id} in the support masks")
    return rows.mean(axis=0).astype(np.float32)


def agent_correlation(X, agents: AgentSet) -> np.ndarray:
    if not agents.refined:
        raise ValueError("agent correlation needs refined agents")
    return pairwise_cosine(as_matrix(X, "X"), agents.concatenated)


def localization_scores(w1, w2, params: SLMParams) -> np.ndarray:
    w1 = as_matrix(w1, "W1")
    w2 = as_matrix(w2, "W2")
    if w1.shape[1] != params.fc_weight.shape[0] or w2.shape[1] != params.fc_weight.shape[0]:
        raise ValueError(f"FC expects {params.fc_weight.shape[0]} agent columns, "
                         f"got W1 {w1.shape}, W2 {w2.shape}")
    e1 = linear_map(w1, params.fc_weight, params.fc_bias)
    e2 = linear_map(w2, params.fc_weight, params.fc_bias)
    return pairwise_cosine(e1, e2)[0]


def threshold_argmax(scores, threshold: float) -> np.ndarray:
    """Label = 1 + argmax over class rows where the max beats ``threshold``, else 0.

    ``np.argmax`` returns the first maximum, which is the lowest class id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[None, :]
    best = np.argmax(scores, axis=0)
    top = scores[best, np.arange(scores.shape[1])]
    return np.where(top > threshold, best + 1, 0).astype(np.int64)


def localize(scores, tau: float = DEFAULT_TAU) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return threshold_argmax(scores, tau)


@dataclass
class SLMOutput:
    agents: AgentSet
    prototypes: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    scores: np.ndarray
    confident: np.ndarray
    warnings: list = field(default_factory=list)


def run_slm(support_features: list, support_masks: list, F_q, *, n_agents: int = DEFAULT_N_AGENTS,
            tau: float = DEFAULT_TAU, rng: np.random.Generator, params=None,
            init: str = "identity", gain: float = DEFAULT_ATTENTION_GAIN,
            kmeans_iters: int = 20) -> SLMOutput:
    """Full localization pass.

    ``support_features[n][k]`` / ``support_masks[n][k]`` are the features and
    label masks of shot ``k`` of way ``n``; rows labelled ``n + 1`` are that
    way's foreground. ``params`` may be an :class:`SLMParams` or a callable
    taking the total agent count, for parameters whose FC width depends on it.
    """
    F_q = as_matrix(F_q, "F_q")
    n_way = len(support_features)
    fg = []
    protos = []
    for n in range(n_way):
        cid = n + 1
        fg.append(np.concatenate([np.asarray(F)[np.asarray(M) == cid]
                                  for F, M in zip(support_features[n], support_masks[n])], axis=0))
        protos.append(class_prototype(support_features[n], support_masks[n], cid))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        agents = init_agents(fg, n_agents, rng, kmeans_iters=kmeans_iters)
    if params is None:
        params = SLMParams.default(F_q.shape[1], agents.total, tau=tau, init=init, rng=rng,
                                   feature_scale=feature_scale(F_q), gain=gain)
    elif callable(params):
        params = params(agents.total)
    agents = refine_agents(agents, F_q, params)
    protos = np.stack(protos)
    w1 = agent_correlation(protos, agents)
    w2 = agent_correlation(F_q, agents)
    scores = np.stack([localization_scores(w1[n:n + 1], w2, params) for n in range(n_way)])
    confident = localize(scores, params.tau)
    return SLMOutput(agents, protos, w1, w2, scores, confident, [str(w.message) for w in caught])
