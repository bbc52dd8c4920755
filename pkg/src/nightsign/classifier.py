"""Tri-modal crop classifier.

A frozen embedding provider supplies a unit image vector v and a bank of
prompt embeddings T. Branch 1 attends v over T (cross-attention, then
residual + LayerNorm + FFN). Branch 2 builds a 3-node graph — global,
shape, color — where the attribute nodes are softmax-weighted blends of
learnable embedding tables, refined by a small GCNN with symmetrically
normalized adjacency. A second cross-attention fuses the branches and an
MLP head emits class logits. Training uses a class-balanced focal loss
with inverse-sqrt-frequency weights.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .dataset import ClassCensus
from . import nn

SHAPE_CATEGORIES = ("circle", "rectangle", "octagon", "triangle")
COLOR_CATEGORIES = ("red", "blue", "green", "yellow", "white", "black", "other")

DEFAULT_PROMPTS = (
    "Describe the traffic sign in detail, including any visible text or numbers.",
    "What is the color and geometric shape of the sign and what does it convey "
    "(warning, mandatory, prohibition, information)?",
    "Is there an icon or pictogram? Describe the icon (car, truck, pedestrian, "
    "arrow, fuel pump, etc.).",
    "Extract any text, numbers or symbols from the sign and list them.",
    "Is this sign an advertisement, a regulatory sign, a warning sign, or an "
    "informational sign? If none apply or the image is unreadable/occluded, "
    "reply 'unclassifiable'. Keep your answer one word.",
)

ABLATION_VARIANTS = ("full", "no_cross_attention", "no_prompts", "no_gcnn",
                     "no_embedding_tables")


class EmbeddingProvider(Protocol):
    """Frozen encoder pair: deterministic, never trained by this toolkit."""

    dim: int
    provider_id: str

    def image_embed(self, crop: np.ndarray) -> np.ndarray: ...

    def text_embed(self, prompt: str) -> np.ndarray: ...


def _digest(arr: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class StubEmbeddingProvider:
    """Deterministic test provider: hash-seeded pseudo-random directions.

    Class structure can be injected two ways so synthetic experiments are
    linearly separable: registering crops explicitly (`register`), or a
    content-based `labeler` callable (crop -> class index or None). A
    known class contributes a fixed per-class direction blended with the
    hash direction by `cluster_strength`. There is nothing to train and
    outputs never change for a given input.
    """

    def __init__(self, dim: int = 64, seed: int = 0,
                 cluster_strength: float = 2.0,
                 labeler: Callable[[np.ndarray], int | None] | None = None,
                 labeler_kind: str | None = None):
        self.dim = dim
        self.seed = seed
        self.cluster_strength = cluster_strength
        self.labeler = labeler
        self.labeler_kind = labeler_kind if labeler is not None else None
        self.provider_id = f"stub-d{dim}-s{seed}"
        self._registry: dict[str, int] = {}
        self._class_dirs: dict[int, np.ndarray] = {}

    def register(self, crop: np.ndarray, class_index: int) -> None:
        self._registry[_digest(np.asarray(crop, dtype=np.float64))] = class_index

    def _class_direction(self, idx: int) -> np.ndarray:
        if idx not in self._class_dirs:
            rng = np.random.default_rng((self.seed, 7919, idx))
            d = rng.normal(size=self.dim)
            self._class_dirs[idx] = d / np.linalg.norm(d)
        return self._class_dirs[idx]

    def _hash_direction(self, payload: bytes) -> np.ndarray:
        h = hashlib.blake2b(payload, digest_size=8).digest()
        rng = np.random.default_rng((self.seed, int.from_bytes(h, "little")))
        d = rng.normal(size=self.dim)
        return d / np.linalg.norm(d)

    def image_embed(self, crop: np.ndarray) -> np.ndarray:
        crop = np.asarray(crop, dtype=np.float64)
        raw = self._hash_direction(str(crop.shape).encode()
                                   + np.ascontiguousarray(crop).tobytes())
        idx = self._registry.get(_digest(crop))
        if idx is None and self.labeler is not None:
            idx = self.labeler(crop)
        if idx is not None:
            raw = raw + self.cluster_strength * self._class_direction(int(idx))
        return raw

    def text_embed(self, prompt: str) -> np.ndarray:
        return self._hash_direction(b"text:" + prompt.encode())


def embed_crop(crop: np.ndarray, provider: EmbeddingProvider) -> np.ndarray:
    """L2-normalized image embedding of one crop."""
    raw = np.asarray(provider.image_embed(crop), dtype=np.float64)
    norm = np.linalg.norm(raw)
    if norm == 0:
        raise ValueError("provider returned a zero embedding")
    return raw / norm


@dataclass
class PromptBank:
    prompts: tuple[str, ...]
    matrix: np.ndarray  # (n_prompts, D), unit rows

    @classmethod
    def build(cls, provider: EmbeddingProvider,
              prompts: tuple[str, ...] = DEFAULT_PROMPTS,
              cache_dir: str | Path | None = None) -> "PromptBank":
        """Embed the prompts once (cached across runs when a cache dir is
        configured; LENS_CACHE_DIR overrides the location)."""
        cache_dir = os.environ.get("LENS_CACHE_DIR", cache_dir)
        cache_path = None
        if cache_dir is not None:
            key = hashlib.blake2b(
                json.dumps([provider.provider_id, list(prompts)]).encode(),
                digest_size=12).hexdigest()
            cache_path = Path(cache_dir) / f"prompts_{key}.npy"
            if cache_path.is_file():
                return cls(prompts=tuple(prompts), matrix=np.load(cache_path))
        rows = []
        for p in prompts:
            raw = np.asarray(provider.text_embed(p), dtype=np.float64)
            rows.append(raw / np.linalg.norm(raw))
        matrix = np.stack(rows)
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            np.save(cache_path, matrix)
        return cls(prompts=tuple(prompts), matrix=matrix)


@dataclass
class FusionConfig:
    dim: int = 64
    n_heads: int = 8
    ffn_hidden: int | None = None      # defaults to 4*dim
    gcnn_layers: int = 3
    self_loops: bool = True
    gcnn_relu: bool = False            # literal recurrence has no nonlinearity
    dropout: float = 0.2
    n_classes: int = 41
    attr_mlp_hidden: int = 64
    head_hidden: int = 128
    shape_categories: tuple[str, ...] = SHAPE_CATEGORIES
    color_categories: tuple[str, ...] = COLOR_CATEGORIES

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("dim must be divisible by n_heads")
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.dim


@dataclass
class GraphState:
    """Node-feature matrix flowing through the GCNN: rows are the global,
    shape, and color nodes, in that fixed order."""

    matrix: Tensor  # (3, D) or (B, 3, D)
    layer_index: int = 0

    def __post_init__(self):
        if self.matrix.shape[-2] != 3:
            raise ValueError("graph state must have exactly 3 node rows")


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric normalization D^{-1/2} A D^{-1/2} of a 3x3 adjacency."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError("adjacency must be 3x3")
    if not np.allclose(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if (a < 0).any():
        raise ValueError("adjacency must be non-negative")
    deg = a.sum(axis=1)
    if (deg == 0).any():
        raise ValueError("adjacency has a zero-degree node")
    return a / np.sqrt(np.outer(deg, deg))


def default_adjacency(self_loops: bool = True) -> np.ndarray:
    a = np.ones((3, 3))
    if not self_loops:
        a = a - np.eye(3)
    return a


class CrossAttentionBlock(nn.Module):
    """attend -> residual -> LayerNorm -> FFN (the FFN output is the
    block output; no second residual)."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        self.attn = nn.MultiheadCrossAttention(config.dim, config.n_heads, rng)
        self.ln = nn.LayerNorm(config.dim)
        self.ffn = nn.FeedForward(config.dim, config.ffn_hidden, config.dropout, rng)

    def __call__(self, query: Tensor, keys_values) -> Tensor:
        attended = self.attn(query, as_tensor(keys_values))
        return self.ffn(self.ln(query + attended))

    def attention_weights(self) -> np.ndarray:
        return self.attn.last_weights


class ConcatFusionBlock(nn.Module):
    """Cross-attention ablation: mean-pool the keys, concatenate with the
    query, project back to D, then the same LayerNorm + FFN."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        self.proj = nn.Linear(2 * config.dim, config.dim, rng)
        self.ln = nn.LayerNorm(config.dim)
        self.ffn = nn.FeedForward(config.dim, config.ffn_hidden, config.dropout, rng)

    def __call__(self, query: Tensor, keys_values) -> Tensor:
        kv = as_tensor(keys_values)
        pooled = kv.mean(axis=-2)
        if pooled.ndim == 1 and query.ndim == 2:
            pooled = pooled.reshape(1, -1) * Tensor(np.ones((query.shape[0], 1)))
        return self.ffn(self.ln(self.proj(ad.concatenate([query, pooled], axis=-1))))


class SelfFusionBlock(nn.Module):
    """Prompt ablation: no attention at all, just LayerNorm + FFN on v."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        self.ln = nn.LayerNorm(config.dim)
        self.ffn = nn.FeedForward(config.dim, config.ffn_hidden, config.dropout, rng)

    def __call__(self, query: Tensor, keys_values=None) -> Tensor:
        return self.ffn(self.ln(query))


class AttributeTables(nn.Module):
    """Predict-and-blend attribute nodes: an MLP scores the categories,
    softmax turns the scores into a convex blend of table rows."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        d = config.dim
        k_s = len(config.shape_categories)
        k_c = len(config.color_categories)
        self.table_shape = nn.parameter(rng.normal(0, 0.5, size=(k_s, d)))
        self.table_color = nn.parameter(rng.normal(0, 0.5, size=(k_c, d)))
        self.mlp_shape = nn.MLP([d, config.attr_mlp_hidden, k_s], rng)
        self.mlp_color = nn.MLP([d, config.attr_mlp_hidden, k_c], rng)

    def shape_distribution(self, v: Tensor) -> Tensor:
        return ad.softmax(self.mlp_shape(v), axis=-1)

    def color_distribution(self, v: Tensor) -> Tensor:
        return ad.softmax(self.mlp_color(v), axis=-1)


def build_nodes(v, tables: AttributeTables) -> tuple[Tensor, Tensor, Tensor]:
    """H0 = [global; shape; color] where shape/color are probability-
    weighted blends of the embedding tables. Returns (H0, p_shape, p_color);
    H0 is (3, D) for a single vector, (B, 3, D) for a batch."""
    t = as_tensor(v)
    single = t.ndim == 1
    if single:
        t = t.reshape(1, -1)
    p_s = tables.shape_distribution(t)
    p_c = tables.color_distribution(t)
    n_s = p_s @ tables.table_shape
    n_c = p_c @ tables.table_color
    h0 = ad.stack([t, n_s, n_c], axis=1)
    if single:
        return h0.reshape(3, -1), p_s.reshape(-1), p_c.reshape(-1)
    return h0, p_s, p_c


def gcnn_forward(h0, weights: list[tuple[Tensor, Tensor]],
                 a_hat: np.ndarray, n_layers: int | None = None):
    """n_layers applications of H <- A_hat (H W + b); literal linear
    recurrence, with an optional ReLU between layers when the weights
    carry one (see TriModalClassifier.gcnn_relu)."""
    state = h0.matrix if isinstance(h0, GraphState) else as_tensor(h0)
    if n_layers is None:
        n_layers = len(weights)
    a = Tensor(np.asarray(a_hat, dtype=np.float64))
    for layer in range(n_layers):
        w, b = weights[layer]
        state = a @ (state @ w + b)
    if isinstance(h0, GraphState):
        return GraphState(matrix=state, layer_index=h0.layer_index + n_layers)
    return state


def class_alpha_weights(counts, class_list: list[str]) -> np.ndarray:
    """Inverse-sqrt-frequency weights normalized to sum to the class count."""
    if isinstance(counts, ClassCensus):
        counts = counts.counts
    values = []
    for name in class_list:
        c = counts.get(name, 0)
        if c < 1:
            raise ValueError(f"class '{name}' has zero count")
        values.append(1.0 / np.sqrt(c))
    inv = np.asarray(values)
    return inv / inv.sum() * len(class_list)


_LOG_FLOOR = float(np.log(1e-12))


def focal_loss(logits, target, alpha_weights=None, gamma_focal: float = 2.0):
    """Class-balanced focal loss, mean over the batch.

    -alpha_t (1 - p_t)^gamma log(p_t) with p_t the softmax probability of
    the target class, log-probability floored at log(1e-12).
    """
    t = as_tensor(logits)
    single = t.ndim == 1
    if single:
        t = t.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(target, dtype=int))
    if targets.shape[0] != t.shape[0]:
        raise ValueError("target batch does not match logits batch")
    if (targets < 0).any() or (targets >= t.shape[1]).any():
        raise ValueError("target index out of range")
    logp = ad.log_softmax(t, axis=-1)
    logp_t = logp[np.arange(t.shape[0]), targets].clip(_LOG_FLOOR, None)
    p_t = logp_t.exp()
    if alpha_weights is None:
        alpha_t = np.ones(len(targets))
    else:
        alpha_w = np.asarray(alpha_weights, dtype=np.float64)
        alpha_t = alpha_w[targets] if alpha_w.ndim else np.full(len(targets), alpha_w)
    modulated = ((1.0 - p_t) ** float(gamma_focal)) if gamma_focal != 0.0 else 1.0
    loss = -(Tensor(alpha_t) * modulated * logp_t)
    out = loss.mean()
    return out


class TriModalClassifier(nn.Module):
    """Full fusion pipeline; `variant` swaps out one component at a time."""

    def __init__(self, config: FusionConfig, provider: EmbeddingProvider,
                 prompt_bank: PromptBank, rng: np.random.Generator,
                 variant: str = "full"):
        if variant not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant '{variant}' "
                             f"(choose from {ABLATION_VARIANTS})")
        if provider.dim != config.dim:
            raise ValueError(f"provider dim {provider.dim} != config dim {config.dim}")
        if prompt_bank.matrix.shape[1] != config.dim:
            raise ValueError("prompt bank dimension mismatch")
        self.config = config
        self.provider = provider
        self.prompt_bank = prompt_bank
        self.variant = variant
        d = config.dim
        if variant == "no_cross_attention":
            self.branch1 = ConcatFusionBlock(config, rng)
            self.fusion2 = ConcatFusionBlock(config, rng)
        elif variant == "no_prompts":
            self.branch1 = SelfFusionBlock(config, rng)
            self.fusion2 = CrossAttentionBlock(config, rng)
        else:
            self.branch1 = CrossAttentionBlock(config, rng)
            self.fusion2 = CrossAttentionBlock(config, rng)
        self.tables = AttributeTables(config, rng)
        if variant == "no_embedding_tables":
            self.proj_shape = nn.MLP([d, config.attr_mlp_hidden, d], rng)
            self.proj_color = nn.MLP([d, config.attr_mlp_hidden, d], rng)
        self.gcnn_weights = [
            (nn.parameter(np.eye(d) + rng.normal(0, 0.02, size=(d, d))),
             nn.parameter(np.zeros(d)))
            for _ in range(config.gcnn_layers)]
        self.a_hat = normalize_adjacency(default_adjacency(config.self_loops))
        self.head_fc1 = nn.Linear(d, config.head_hidden, rng)
        self.head_fc2 = nn.Linear(config.head_hidden, config.n_classes, rng)
        self._rng = rng

    # -- pipeline pieces -----------------------------------------------------

    def text_image_fusion(self, v) -> Tensor:
        return self.branch1(as_tensor(v), Tensor(self.prompt_bank.matrix))

    def graph_branch(self, v) -> Tensor:
        t = as_tensor(v)
        if self.variant == "no_embedding_tables":
            single = t.ndim == 1
            tt = t.reshape(1, -1) if single else t
            h0 = ad.stack([tt, self.proj_shape(tt), self.proj_color(tt)], axis=1)
            if single:
                h0 = h0.reshape(3, -1)
        else:
            h0, _, _ = build_nodes(t, self.tables)
        if self.variant == "no_gcnn":
            return h0
        state = h0
        for layer, (w, b) in enumerate(self.gcnn_weights):
            state = Tensor(self.a_hat) @ (state @ w + b)
            if self.config.gcnn_relu and layer < len(self.gcnn_weights) - 1:
                state = state.relu()
        return state

    def final_fusion(self, f_ca1: Tensor, h_l: Tensor) -> Tensor:
        return self.fusion2(f_ca1, h_l)

    def head_logits(self, f_final: Tensor) -> Tensor:
        h = self.head_fc1(f_final).gelu()
        h = ad.dropout(h, self.config.dropout, self._rng, self.training)
        return self.head_fc2(h)

    def forward_embeddings(self, v_batch) -> Tensor:
        """Logits from precomputed unit embeddings (B, D) or (D,)."""
        v = as_tensor(v_batch)
        f_ca1 = self.text_image_fusion(v)
        h_l = self.graph_branch(v)
        f_final = self.final_fusion(f_ca1, h_l)
        return self.head_logits(f_final)

    def classify_crop(self, crop: np.ndarray) -> np.ndarray:
        """Inference logits for one crop (dropout off, no graph built)."""
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                logits = self.forward_embeddings(embed_crop(crop, self.provider))
            return logits.data.copy()
        finally:
            if was_training:
                self.train()


def classify(crop: np.ndarray, model: TriModalClassifier) -> np.ndarray:
    """Full pipeline: embed -> fuse with prompts -> graph -> fuse -> logits."""
    return model.classify_crop(crop)


def text_image_fusion(v, prompt_matrix, block) -> Tensor:
    """Functional form of branch 1 for a caller-supplied block."""
    return block(as_tensor(v), as_tensor(prompt_matrix))


def final_fusion(f_ca1, h_l, block) -> Tensor:
    """Functional form of the second fusion stage."""
    return block(as_tensor(f_ca1), as_tensor(h_l))


def build_ablation_variant(name: str, config: FusionConfig,
                           provider: EmbeddingProvider, prompt_bank: PromptBank,
                           rng: np.random.Generator) -> TriModalClassifier:
    return TriModalClassifier(config, provider, prompt_bank, rng, variant=name)


@dataclass
class ClassifierTrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    gamma_focal: float = 2.0
    seed: int = 0


def train_classifier(model: TriModalClassifier, embeddings: np.ndarray,
                     labels: np.ndarray, alpha_weights: np.ndarray | None,
                     train_config: ClassifierTrainConfig,
                     ) -> dict[str, list[float]]:
    """Train on precomputed unit embeddings; returns per-epoch history."""
    rng = np.random.default_rng(train_config.seed)
    opt = nn.Adam(model.parameters(), lr=train_config.learning_rate,
                  weight_decay=train_config.weight_decay)
    n = len(labels)
    labels = np.asarray(labels, dtype=int)
    history = {"loss": [], "accuracy": []}
    model.train()
    for _epoch in range(train_config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            opt.zero_grad()
            logits = model.forward_embeddings(embeddings[idx])
            loss = focal_loss(logits, labels[idx], alpha_weights,
                              train_config.gamma_focal)
            if not np.isfinite(loss.data):
                raise FloatingPointError("non-finite classifier loss")
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
        model.eval()
        with ad.no_grad():
            pred = model.forward_embeddings(embeddings).data.argmax(axis=1)
        model.train()
        history["loss"].append(total_loss / n)
        history["accuracy"].append(float((pred == labels).mean()))
    model.eval()
    return history


def embed_crops(crops: list[np.ndarray],
                provider: EmbeddingProvider) -> np.ndarray:
    return np.stack([embed_crop(c, provider) for c in crops])


# -- checkpointing -------------------------------------------------------------


def save_classifier_checkpoint(path: str | Path, model: TriModalClassifier,
                               class_list: list[str]) -> None:
    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(model.config).items()},
        "variant": model.variant,
        "provider_id": model.provider.provider_id,
        "provider_labeler": getattr(model.provider, "labeler_kind", None),
        "prompts": list(model.prompt_bank.prompts),
        "class_list": class_list,
    }
    arrays = {f"param::{k}": v for k, v in model.state_dict().items()}
    arrays["prompt_matrix"] = model.prompt_bank.matrix
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_classifier_checkpoint(path: str | Path, provider: EmbeddingProvider,
                               ) -> tuple[TriModalClassifier, list[str]]:
    blob = np.load(path, allow_pickle=False)
    meta = json.loads(str(blob["meta"]))
    cfg_raw = meta["config"]
    for key in ("shape_categories", "color_categories"):
        cfg_raw[key] = tuple(cfg_raw[key])
    config = FusionConfig(**cfg_raw)
    bank = PromptBank(prompts=tuple(meta["prompts"]), matrix=blob["prompt_matrix"])
    model = TriModalClassifier(config, provider, bank,
                               np.random.default_rng(0), variant=meta["variant"])
    state = {k[len("param::"):]: blob[k] for k in blob.files
             if k.startswith("param::")}
    model.load_state_dict(state)
    model.eval()
    return model, list(meta["class_list"])
