"""Stream models: per-modality extractors, fusion, temporal relations, heads.

One stream is a full pipeline from per-modality frame features to verb/noun
logits: modality extractors, a fusion strategy, a multi-scale temporal
relation module (TRM), classifier heads, and three gradient-reversal domain
discriminators (frame, relation, video level). Multiple streams are combined
by score averaging at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import ContractError, normalized_entropy

# Exhaustive subset enumeration below this count; seeded sampling above it.
MAX_TRM_SUBSETS = 10

LEVELS = ("frame", "relation", "video")


@dataclass
class StreamConfig:
    """Architecture of one stream at desk scale."""

    modalities: list[str]
    input_dims: dict[str, int]
    frames_per_clip: int
    hidden_sizes: list[int] = field(default_factory=lambda: [32])
    embed_dim: int = 16
    trm_scales: list[int] = field(default_factory=lambda: [2, 3])
    relation_dim: int = 16
    trm_hidden: int = 32
    num_verbs: int = 4
    num_nouns: int = 4
    num_domains: int = 2
    disc_hidden: int = 16
    fusion: str = "mid"
    dropout: float = 0.0

    def __post_init__(self):
        if not self.modalities:
            raise ContractError("StreamConfig needs at least one modality")
        missing = [m for m in self.modalities if m not in self.input_dims]
        if missing:
            raise ContractError(f"input_dims missing for modalities: {missing}")
        if self.fusion not in ("mid", "late"):
            raise ContractError(f"fusion must be 'mid' or 'late', got {self.fusion!r}")
        for k in self.trm_scales:
            if k < 2 or k > self.frames_per_clip:
                raise ContractError(
                    f"TRM scale {k} outside [2, T={self.frames_per_clip}]"
                )
        if not (0.0 <= self.dropout < 1.0):
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "input_dims": dict(self.input_dims),
            "frames_per_clip": self.frames_per_clip,
            "hidden_sizes": list(self.hidden_sizes),
            "embed_dim": self.embed_dim,
            "trm_scales": list(self.trm_scales),
            "relation_dim": self.relation_dim,
            "trm_hidden": self.trm_hidden,
            "num_verbs": self.num_verbs,
            "num_nouns": self.num_nouns,
            "num_domains": self.num_domains,
            "disc_hidden": self.disc_hidden,
            "fusion": self.fusion,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StreamConfig":
        return cls(**doc)


@dataclass
class BranchOutput:
    """One classification branch: fused pipeline (mid) or one modality (late)."""

    name: str
    frames: Tensor                      # [(N*T), d_e]
    relations: dict[int, Tensor]        # scale -> [N, d_r], post-activation
    video: Tensor                       # [N, d_r]
    verb_logits: Tensor                 # [N, C_v]
    noun_logits: Tensor                 # [N, C_n]
    domain_frame: Tensor | None = None
    domain_relation: dict[int, Tensor] | None = None
    domain_video: Tensor | None = None


@dataclass
class ForwardPass:
    frame_embeddings: dict[str, Tensor]  # per modality, [(N*T), d_e]
    branches: list[BranchOutput]
    n_clips: int


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def _mlp2(x: Tensor, params: dict[str, Tensor], prefix: str, out_relu: bool) -> Tensor:
    h = ad.relu(_affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    out = _affine(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return ad.relu(out) if out_relu else out


class StreamModel:
    """Parameters plus forward logic for one stream.

    Every parameter (weights and biases) is drawn uniform in
    [-1/sqrt(fan_in), +1/sqrt(fan_in)] from the stream seed; nonzero biases
    keep pre-activations off the exact relu kink even for rows whose previous
    layer went fully dead. The TRM subset tables are fixed
    at construction (exhaustive when C(T, k) <= 10, otherwise a seeded sample
    of 10 ordered subsets), so a built model is a pure function of
    (config, seed).
    """

    def __init__(self, config: StreamConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._build_params()
        self.subsets: dict[int, list[tuple[int, ...]]] = {
            k: self._choose_subsets(k) for k in config.trm_scales
        }

    # -- construction -------------------------------------------------------

    def _build_params(self) -> None:
        rng = np.random.default_rng(self.seed)
        cfg = self.config

        def linear(name: str, fan_in: int, fan_out: int, w_key: str = "w", b_key: str = "b") -> None:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            self.params[f"{name}.{w_key}"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.{b_key}"] = Tensor(b, requires_grad=True)

        for m in cfg.modalities:
            dims = [cfg.input_dims[m]] + list(cfg.hidden_sizes) + [cfg.embed_dim]
            for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:]), start=1):
                linear(f"extractor.{m}.l{i}", din, dout)

        for k in cfg.trm_scales:
            linear(f"trm.g{k}", k * cfg.embed_dim, cfg.trm_hidden, "w1", "b1")
            linear(f"trm.g{k}", cfg.trm_hidden, cfg.relation_dim, "w2", "b2")

        linear("head.verb", cfg.relation_dim, cfg.num_verbs)
        linear("head.noun", cfg.relation_dim, cfg.num_nouns)

        disc_in = {"frame": cfg.embed_dim, "relation": cfg.relation_dim, "video": cfg.relation_dim}
        for level in LEVELS:
            linear(f"disc.{level}", disc_in[level], cfg.disc_hidden, "w1", "b1")
            linear(f"disc.{level}", cfg.disc_hidden, cfg.num_domains, "w2", "b2")

    def _choose_subsets(self, k: int) -> list[tuple[int, ...]]:
        t = self.config.frames_per_clip
        all_subsets = list(combinations(range(t), k))
        if len(all_subsets) <= MAX_TRM_SUBSETS:
            return all_subsets
        rng = np.random.default_rng((self.seed, k))
        chosen = rng.choice(len(all_subsets), size=MAX_TRM_SUBSETS, replace=False)
        return [all_subsets[i] for i in sorted(chosen)]

    # -- parameter management -------------------------------------------------

    def replace_params(self, new_params: dict[str, Tensor]) -> None:
        if set(new_params) != set(self.params):
            raise ContractError("replace_params: parameter name set changed")
        self.params = new_params

    def set_param(self, name: str, values: np.ndarray) -> None:
        current = self.params[name]
        values = np.asarray(values, dtype=np.float64)
        if values.shape != current.shape:
            raise ContractError(f"set_param {name}: shape {values.shape} != {current.shape}")
        self.params[name] = Tensor(values, requires_grad=True)

    def param_names(self) -> list[str]:
        return list(self.params)

    # -- forward pieces --------------------------------------------------------

    def extract_features(
        self,
        clips: dict[str, Tensor],
        training: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> dict[str, Tensor]:
        """Per-modality frame embeddings: each [n, input_dim] -> [n, d_e]."""
        cfg = self.config
        missing = [m for m in cfg.modalities if m not in clips]
        if missing:
            raise ContractError(f"extract_features: clip missing modalities {missing}")
        out: dict[str, Tensor] = {}
        n_layers = len(cfg.hidden_sizes) + 1
        for m in cfg.modalities:
            x = clips[m]
            for i in range(1, n_layers + 1):
                x = ad.relu(_affine(x, self.params[f"extractor.{m}.l{i}.w"], self.params[f"extractor.{m}.l{i}.b"]))
                if training and cfg.dropout > 0.0 and i < n_layers:
                    if dropout_rng is None:
                        raise ContractError("dropout requires a generator in training mode")
                    keep = (dropout_rng.random(x.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
                    x = x * Tensor(keep)
            out[m] = x
        return out

    def mid_fusion(self, embeddings: dict[str, Tensor]) -> Tensor:
        """Common frame embedding: elementwise sum over modalities, then relu."""
        acc = None
        for m in self.config.modalities:
            e = embeddings[m]
            if acc is not None and e.shape != acc.shape:
                raise ContractError(f"mid_fusion: embedding shape {e.shape} != {acc.shape}")
            acc = e if acc is None else acc + e
        return ad.relu(acc)

    def trm_forward(self, frames: Tensor, n_clips: int) -> tuple[dict[int, Tensor], Tensor]:
        """Multi-scale temporal relations over [(N*T), d_e] frame embeddings.

        For each scale k, applies the relation map g_k to every stored
        ordered k-subset of each clip's frames and averages; the video
        feature is the sum of per-scale relation features.
        """
        cfg = self.config
        t = cfg.frames_per_clip
        if frames.shape[0] != n_clips * t:
            raise ContractError(f"trm_forward: {frames.shape[0]} rows != {n_clips} clips x {t} frames")
        base = np.arange(n_clips) * t
        relations: dict[int, Tensor] = {}
        for k in cfg.trm_scales:
            acc = None
            for subset in self.subsets[k]:
                cols = [ad.gather_rows(frames, base + pos) for pos in subset]
                rel = _mlp2(ad.concat(cols, axis=1), self.params, f"trm.g{k}", out_relu=True)
                acc = rel if acc is None else acc + rel
            relations[k] = acc * (1.0 / len(self.subsets[k]))
        video = None
        for k in cfg.trm_scales:
            video = relations[k] if video is None else video + relations[k]
        return relations, video

    def classify(self, video: Tensor) -> tuple[Tensor, Tensor]:
        verb = _affine(video, self.params["head.verb.w"], self.params["head.verb.b"])
        noun = _affine(video, self.params["head.noun.w"], self.params["head.noun.b"])
        return verb, noun

    def discriminate_domain(self, features: Tensor, level: str, lambda_d: float) -> Tensor:
        """Gradient-reversed domain logits at one of the three levels."""
        if level not in LEVELS:
            raise ContractError(f"unknown discriminator level {level!r}")
        reversed_feats = ad.grad_reverse(features, lambda_d)
        return _mlp2(reversed_feats, self.params, f"disc.{level}", out_relu=False)

    def forward(
        self,
        clips: dict[str, Tensor],
        n_clips: int,
        lambda_d: float = 0.0,
        adversarial: bool = False,
        attention: bool = False,
        training: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> ForwardPass:
        """Run the full pipeline; attention requires adversarial logits."""
        if attention and not adversarial:
            raise ContractError("domain attention needs relation-level domain logits")
        embeddings = self.extract_features(clips, training=training, dropout_rng=dropout_rng)

        if self.config.fusion == "mid":
            branch_frames = [("fused", self.mid_fusion(embeddings))]
        else:
            branch_frames = [(m, embeddings[m]) for m in self.config.modalities]

        branches = []
        for name, frames in branch_frames:
            relations, _ = self.trm_forward(frames, n_clips)
            domain_frame = domain_video = None
            domain_relation = None
            if adversarial:
                domain_frame = self.discriminate_domain(frames, "frame", lambda_d)
                domain_relation = {
                    k: self.discriminate_domain(rel, "relation", lambda_d)
                    for k, rel in relations.items()
                }
            used = relations
            if attention:
                used = domain_attention(relations, domain_relation)
            video = None
            for k in self.config.trm_scales:
                video = used[k] if video is None else video + used[k]
            if adversarial:
                domain_video = self.discriminate_domain(video, "video", lambda_d)
            verb, noun = self.classify(video)
            branches.append(
                BranchOutput(
                    name=name,
                    frames=frames,
                    relations=relations,
                    video=video,
                    verb_logits=verb,
                    noun_logits=noun,
                    domain_frame=domain_frame,
                    domain_relation=domain_relation,
                    domain_video=domain_video,
                )
            )
        return ForwardPass(frame_embeddings=embeddings, branches=branches, n_clips=n_clips)

    def predict_scores(self, clips: dict[str, Tensor], n_clips: int) -> tuple[np.ndarray, np.ndarray]:
        """Fused softmax scores for one stream: late-fuses branches if needed."""
        fp = self.forward(clips, n_clips)
        verb = [softmax_scores(b.verb_logits.data) for b in fp.branches]
        noun = [softmax_scores(b.noun_logits.data) for b in fp.branches]
        return late_fusion(verb, noun)


def softmax_scores(logits_data: np.ndarray) -> np.ndarray:
    shifted = logits_data - logits_data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def domain_attention(
    relations: dict[int, Tensor], relation_domain_logits: dict[int, Tensor]
) -> dict[int, Tensor]:
    """Re-weight relation features by domain-discriminator uncertainty.

    Per sample and scale: w = 1 + H_hat(domain logits), H_hat the softmax
    entropy normalized to [0, 1]. The weight is a constant in the graph, so
    alignment pressure concentrates where the discriminator is unsure without
    feeding gradients back through its confidence.
    """
    out: dict[int, Tensor] = {}
    for k, rel in relations.items():
        logits = relation_domain_logits[k]
        if logits.shape[0] != rel.shape[0]:
            raise ContractError(f"domain_attention: {rel.shape[0]} rows but {logits.shape[0]} domain logits")
        w = 1.0 + normalized_entropy(logits.data)
        out[k] = rel * Tensor(np.repeat(w[:, None], rel.shape[1], axis=1))
    return out


def late_fusion(
    verb_scores: Sequence[np.ndarray], noun_scores: Sequence[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic mean of per-branch softmax scores, per head."""
    if not verb_scores or not noun_scores:
        raise ContractError("late_fusion needs at least one score array per head")
    if len({s.shape for s in verb_scores}) != 1 or len({s.shape for s in noun_scores}) != 1:
        raise ContractError("late_fusion: mismatched score shapes")
    return np.mean(verb_scores, axis=0), np.mean(noun_scores, axis=0)


@dataclass
class EnsemblePrediction:
    verb_scores: np.ndarray          # [N, C_v]
    noun_scores: np.ndarray          # [N, C_n]
    stream_verb_argmax: np.ndarray   # [b, N]
    stream_noun_argmax: np.ndarray   # [b, N]

    @property
    def verb_agreement(self) -> np.ndarray:
        return (self.stream_verb_argmax == self.stream_verb_argmax[0]).all(axis=0)

    @property
    def noun_agreement(self) -> np.ndarray:
        return (self.stream_noun_argmax == self.stream_noun_argmax[0]).all(axis=0)

    @property
    def action_agreement(self) -> np.ndarray:
        return self.verb_agreement & self.noun_agreement


def ensemble_predict(
    streams: Sequence[StreamModel], clips: dict[str, Tensor], n_clips: int
) -> EnsemblePrediction:
    """Mean of per-stream fused scores, plus per-stream argmax for agreement."""
    if not streams:
        raise ContractError("ensemble_predict needs at least one stream")
    verb_all, noun_all = [], []
    for s in streams:
        v, n = s.predict_scores(clips, n_clips)
        verb_all.append(v)
        noun_all.append(n)
    return EnsemblePrediction(
        verb_scores=np.mean(verb_all, axis=0),
        noun_scores=np.mean(noun_all, axis=0),
        stream_verb_argmax=np.stack([v.argmax(axis=1) for v in verb_all]),
        stream_noun_argmax=np.stack([n.argmax(axis=1) for n in noun_all]),
    )


def grl_lambda(progress: float) -> float:
    """DANN-style gradient reversal schedule over training progress in [0, 1]."""
    p = min(max(progress, 0.0), 1.0)
    return 2.0 / (1.0 + np.exp(-10.0 * p)) - 1.0
