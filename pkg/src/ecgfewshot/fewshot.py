"""Prototypical-network episodic learner.

An episode (task) draws a support set of k labeled images per class and a
disjoint query set; queries classify to the nearest class-mean embedding
under squared Euclidean distance, via a softmax over negative distances.
Training runs one optimizer step per episode on the query negative
log-likelihood.

Class indices are fixed: 0 = no risk, 1 = at risk (the positive class).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import Representation
from .errors import (
    DataError,
    EmptyClass,
    InsufficientClassMembers,
    NumericalOverflow,
    ShapeMismatch,
    TrainingDiverged,
)
from .nn import Adam, EmbeddingNet
from .render import decode_png

NEG_CLASS, POS_CLASS = 0, 1


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape of one N-way K-shot task."""

    n_way: int = 2
    k_shot: int = 5
    q_query: int = 10
    representation: Representation = Representation.RHYTHM_COLOR
    balanced_queries: bool = True

    def __post_init__(self):
        if self.n_way < 2:
            raise DataError("n_way must be >= 2")
        if self.k_shot < 1:
            raise DataError("k_shot must be >= 1")
        if self.q_query < self.n_way:
            raise DataError("q_query must be >= n_way")
        if self.balanced_queries and self.q_query % self.n_way:
            raise DataError("balanced queries require q_query divisible by n_way")


@dataclass
class EpisodeIds:
    support: list  # (record_id, class_index)
    query: list


@dataclass
class Episode:
    support_x: np.ndarray  # (n_way*k_shot, H, W, 3)
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_ids: list
    query_ids: list


@dataclass(frozen=True)
class TrainConfig:
    train_episodes: int = 500
    eval_episodes: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 7
    precision: str = "standard"  # "standard" (float32) | "high" (float64)
    single_input_hw: tuple = (64, 64)
    rhythm_input_hw: tuple = (32, 256)
    channels: tuple = (32, 32, 64, 64)
    embed_dim: int = 64

    def __post_init__(self):
        if self.train_episodes < 1 or self.eval_episodes < 1:
            raise DataError("episode counts must be positive")
        if self.precision not in ("standard", "high"):
            raise DataError("precision must be 'standard' or 'high'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "high" else np.float32

    def input_hw_for(self, representation: Representation) -> tuple:
        if representation.value.startswith("single"):
            return tuple(self.single_input_hw)
        return tuple(self.rhythm_input_hw)


def downscale_image(pixels: np.ndarray, target_hw: tuple, dtype=np.float32) -> np.ndarray:
    """Box-average an (H, W, 3) uint8 image down to target_hw, scaled to [0, 1].

    Grayscale renders carry identical RGB channels, so colored and uncolored
    inputs share one 3-channel network without capacity differences.
    """
    h, w = pixels.shape[:2]
    th, tw = target_hw
    if h % th or w % tw:
        raise ShapeMismatch(f"image {h}x{w} not divisible by target {th}x{tw}")
    fh, fw = h // th, w // tw
    out = pixels.reshape(th, fh, tw, fw, 3).mean(axis=(1, 3), dtype=np.float64)
    return (out / 255.0).astype(dtype)


class ImageStore:
    """Loads and caches downscaled image tensors for one representation."""

    def __init__(self, base_dir, representation: Representation, input_hw,
                 dtype=np.float32):
        self.base_dir = Path(base_dir)
        self.representation = representation
        self.input_hw = tuple(input_hw)
        self.dtype = dtype
        self._cache = {}

    def get(self, entry) -> np.ndarray:
        cached = self._cache.get(entry.record_id)
        if cached is None:
            pixels = decode_png(self.base_dir / entry.image_paths[self.representation])
            cached = downscale_image(pixels, self.input_hw, self.dtype)
            self._cache[entry.record_id] = cached
        return cached


def partition_by_class(entries) -> dict:
    """Catalog entries split into {0: negatives, 1: positives}, stable order."""
    members = {NEG_CLASS: [], POS_CLASS: []}
    for e in entries:
        members[POS_CLASS if e.label.positive else NEG_CLASS].append(e)
    return members


def sample_episode_ids(members: dict, spec: EpisodeSpec, rng) -> EpisodeIds:
    """Draw a support/query split, uniformly without replacement.

    Balanced mode draws q_query/n_way queries per class; unbalanced mode
    draws the query set uniformly from the pooled remainder.

    Raises:
        InsufficientClassMembers: naming the class that is too small.
    """
    classes = sorted(members)
    if len(classes) != spec.n_way:
        raise DataError(f"expected {spec.n_way} classes, got {len(classes)}")
    support = []
    leftovers = []
    q_per = spec.q_query // spec.n_way
    for c in classes:
        pool = members[c]
        need = spec.k_shot + (q_per if spec.balanced_queries else 0)
        if len(pool) < need:
            raise InsufficientClassMembers(
                f"class {c} has {len(pool)} member(s), needs {need}"
            )
        take = rng.choice(len(pool), size=need, replace=False)
        support += [(pool[i].record_id, c) for i in take[: spec.k_shot]]
        if spec.balanced_queries:
            leftovers += [(pool[i].record_id, c) for i in take[spec.k_shot :]]
        else:
            chosen = set(take)
            leftovers += [
                (pool[i].record_id, c) for i in range(len(pool)) if i not in chosen
            ]
    if spec.balanced_queries:
        query = leftovers
    else:
        if len(leftovers) < spec.q_query:
            raise InsufficientClassMembers(
                f"only {len(leftovers)} records left for {spec.q_query} queries"
            )
        take = rng.choice(len(leftovers), size=spec.q_query, replace=False)
        query = [leftovers[i] for i in take]
    return EpisodeIds(support=support, query=query)


def load_episode(ids: EpisodeIds, members: dict, store: ImageStore) -> Episode:
    by_id = {e.record_id: e for pool in members.values() for e in pool}
    sup_x = np.stack([store.get(by_id[rid]) for rid, _ in ids.support])
    qry_x = np.stack([store.get(by_id[rid]) for rid, _ in ids.query])
    return Episode(
        support_x=sup_x,
        support_y=np.array([c for _, c in ids.support]),
        query_x=qry_x,
        query_y=np.array([c for _, c in ids.query]),
        support_ids=[rid for rid, _ in ids.support],
        query_ids=[rid for rid, _ in ids.query],
    )


def sample_episode(members: dict, spec: EpisodeSpec, rng, store: ImageStore) -> Episode:
    return load_episode(sample_episode_ids(members, spec, rng), members, store)


# --- prototypical math ---

def embed(net: EmbeddingNet, image: np.ndarray) -> np.ndarray:
    """Embedding of a single (H, W, 3) image at the configured resolution."""
    if image.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, 3) image, got {image.shape}")
    return net.forward(image[None])[0]


def compute_prototypes(embeddings: np.ndarray, labels: np.ndarray, n_way: int = 2) -> np.ndarray:
    """Per-class arithmetic mean of support embeddings."""
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels)
    protos = np.empty((n_way, embeddings.shape[1]), embeddings.dtype)
    for c in range(n_way):
        mask = labels == c
        if not mask.any():
            raise EmptyClass(f"class {c} has no support embeddings")
        protos[c] = embeddings[mask].mean(axis=0)
    return protos


def _log_softmax_neg_sqdist(queries: np.ndarray, prototypes: np.ndarray):
    """(log-probabilities, probabilities) over classes for each query."""
    diff = queries[:, None, :] - prototypes[None, :, :]
    logits = -np.einsum("qkd,qkd->qk", diff, diff)
    shift = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - lse
    if not np.all(np.isfinite(logp)):
        raise NumericalOverflow("non-finite query log-probabilities")
    return logp, np.exp(logp)


def classify_query(query_embedding: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Class probabilities: softmax over negative squared distances.

    Accepts one embedding (D,) or a batch (N, D). The argmax row is the
    prediction; exact ties resolve to the lower class index.
    """
    single = query_embedding.ndim == 1
    q = query_embedding[None] if single else query_embedding
    _, probs = _log_softmax_neg_sqdist(q, prototypes)
    return probs[0] if single else probs


def proto_loss(embeddings: np.ndarray, support_y: np.ndarray, query_y: np.ndarray,
               n_way: int = 2):
    """Episode loss and its gradient wrt the stacked embeddings.

    embeddings stacks support rows first, then query rows. Returns
    (loss, d_embeddings, query_probs).
    """
    ns = len(support_y)
    sup, qry = embeddings[:ns], embeddings[ns:]
    protos = compute_prototypes(sup, support_y, n_way)
    logp, probs = _log_softmax_neg_sqdist(qry, protos)
    nq = len(query_y)
    loss = -float(logp[np.arange(nq), query_y].mean())

    g = probs.copy()
    g[np.arange(nq), query_y] -= 1.0
    g /= nq  # dL/dlogits
    row = g.sum(axis=1, keepdims=True)
    d_qry = -2.0 * (qry * row - g @ protos)
    d_protos = 2.0 * (g.T @ qry - protos * g.sum(axis=0)[:, None])
    d_sup = np.zeros_like(sup)
    for c in range(n_way):
        mask = support_y == c
        d_sup[mask] = d_protos[c] / mask.sum()
    return loss, np.concatenate([d_sup, d_qry], axis=0), probs


# --- training / evaluation ---

@dataclass
class ModelArtifact:
    """Trained parameters plus everything standalone inference needs.

    Prototypical inference conditions on support points, so a fixed
    reference support set (drawn once from the training partition) is frozen
    into the artifact.
    """

    params: dict
    spec: EpisodeSpec
    input_hw: tuple
    channels: tuple
    embed_dim: int
    precision: str
    seed: int
    config_hash: str
    ref_support_x: np.ndarray
    ref_support_y: np.ndarray
    ref_support_ids: list
    n_params: int

    _net: EmbeddingNet | None = field(default=None, repr=False)
    _prototypes: np.ndarray | None = field(default=None, repr=False)

    def build_net(self) -> EmbeddingNet:
        dtype = np.float64 if self.precision == "high" else np.float32
        net = EmbeddingNet(self.input_hw, self.channels, self.embed_dim, seed=0, dtype=dtype)
        net.set_params(self.params)
        return net

    def _ensure_net(self):
        if self._net is None:
            self._net = self.build_net()
            emb = self._net.forward(self.ref_support_x)
            self._prototypes = compute_prototypes(emb, self.ref_support_y, self.spec.n_way)

    def predict_proba(self, images: np.ndarray, batch: int = 32) -> np.ndarray:
        """Class probabilities for raw full-resolution or pre-scaled images."""
        self._ensure_net()
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:3] != tuple(self.input_hw):
            images = np.stack([downscale_image(im, self.input_hw) for im in images])
        out = []
        for i in range(0, len(images), batch):
            emb = self._net.forward(images[i : i + batch])
            out.append(classify_query(emb, self._prototypes))
        return np.concatenate(out, axis=0)

    def save(self, path):
        meta = {
            "format_version": 1,
            "spec": {
                "n_way": self.spec.n_way,
                "k_shot": self.spec.k_shot,
                "q_query": self.spec.q_query,
                "representation": self.spec.representation.value,
                "balanced_queries": self.spec.balanced_queries,
            },
            "input_hw": list(self.input_hw),
            "channels": list(self.channels),
            "embed_dim": self.embed_dim,
            "precision": self.precision,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "ref_support_ids": self.ref_support_ids,
            "n_params": self.n_params,
            "param_names": sorted(self.params),
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays["ref_support_x"] = self.ref_support_x
        arrays["ref_support_y"] = self.ref_support_y
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        save_npz_deterministic(path, arrays)

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = {k: data[f"param/{k}"] for k in meta["param_names"]}
            ref_x = data["ref_support_x"]
            ref_y = data["ref_support_y"]
        spec = EpisodeSpec(
            n_way=meta["spec"]["n_way"],
            k_shot=meta["spec"]["k_shot"],
            q_query=meta["spec"]["q_query"],
            representation=Representation(meta["spec"]["representation"]),
            balanced_queries=meta["spec"]["balanced_queries"],
        )
        return cls(
            params=params,
            spec=spec,
            input_hw=tuple(meta["input_hw"]),
            channels=tuple(meta["channels"]),
            embed_dim=meta["embed_dim"],
            precision=meta["precision"],
            seed=meta["seed"],
            config_hash=meta["config_hash"],
            ref_support_x=ref_x,
            ref_support_y=ref_y,
            ref_support_ids=meta["ref_support_ids"],
            n_params=meta["n_params"],
        )


def save_npz_deterministic(path, arrays: dict):
    """npz with fixed zip timestamps so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(arrays[name]), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def train(entries, spec: EpisodeSpec, config: TrainConfig, store: ImageStore,
          config_hash: str = "", log_fn=None):
    """Run episodic training; returns (ModelArtifact, loss_curve).

    One Adam step per episode. Deterministic given config.seed: the seed
    splits into independent streams for net init, the frozen reference
    support draw, and the episode sampler.

    Raises:
        TrainingDiverged: loss became non-finite.
    """
    members = partition_by_class(entries)
    net_ss, ref_ss, episode_ss = np.random.SeedSequence(config.seed).spawn(3)
    input_hw = config.input_hw_for(spec.representation)
    net = EmbeddingNet(
        input_hw, config.channels, config.embed_dim, seed=net_ss, dtype=config.dtype
    )
    if log_fn:
        log_fn(f"embedding net: {net.n_params} parameters, input {input_hw}")

    ref_rng = np.random.default_rng(ref_ss)
    ref_ids = sample_episode_ids(
        members, replace(spec, q_query=spec.n_way, balanced_queries=True), ref_rng
    ).support
    by_id = {e.record_id: e for pool in members.values() for e in pool}
    ref_x = np.stack([store.get(by_id[rid]) for rid, _ in ref_ids]).astype(np.float32)
    ref_y = np.array([c for _, c in ref_ids])

    params = net.params()
    adam = Adam(
        params,
        lr=config.learning_rate,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
    )
    rng = np.random.default_rng(episode_ss)
    losses = []
    for ep in range(config.train_episodes):
        episode = sample_episode(members, spec, rng, store)
        x = np.concatenate([episode.support_x, episode.query_x], axis=0)
        emb = net.forward(x)
        loss, d_emb, _ = proto_loss(emb, episode.support_y, episode.query_y, spec.n_way)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"loss became non-finite at episode {ep} "
                f"(lr={config.learning_rate}, seed={config.seed})"
            )
        grads = net.backward(d_emb)
        adam.step(params, grads)
        losses.append(loss)
        if log_fn and (ep + 1) % 100 == 0:
            recent = float(np.mean(losses[-100:]))
            log_fn(f"episode {ep + 1}/{config.train_episodes}: mean loss {recent:.4f}")

    artifact = ModelArtifact(
        params={k: v.copy() for k, v in params.items()},
        spec=spec,
        input_hw=tuple(input_hw),
        channels=tuple(config.channels),
        embed_dim=config.embed_dim,
        precision=config.precision,
        seed=config.seed,
        config_hash=config_hash,
        ref_support_x=ref_x,
        ref_support_y=ref_y,
        ref_support_ids=[rid for rid, _ in ref_ids],
        n_params=net.n_params,
    )
    return artifact, losses


def evaluate(artifact: ModelArtifact, entries, spec: EpisodeSpec, n_episodes: int,
             rng, store: ImageStore, embed_batch: int = 32):
    """Per-episode confusion counts, metrics and query NLL on held-out data.

    Embeddings are computed once per unique image (the network is frozen),
    then episodes index into them; results are identical to embedding per
    episode.
    """
    from .report import ConfusionCounts, metrics_from_counts

    members = partition_by_class(entries)
    net = artifact.build_net()
    emb_map = {}
    ordered = [e for pool in members.values() for e in pool]
    for i in range(0, len(ordered), embed_batch):
        chunk = ordered[i : i + embed_batch]
        emb = net.forward(np.stack([store.get(e) for e in chunk]))
        for e, v in zip(chunk, emb):
            emb_map[e.record_id] = v

    records, losses, counts = [], [], []
    for _ in range(n_episodes):
        ids = sample_episode_ids(members, spec, rng)
        sup = np.stack([emb_map[rid] for rid, _ in ids.support])
        sup_y = np.array([c for _, c in ids.support])
        qry = np.stack([emb_map[rid] for rid, _ in ids.query])
        qry_y = np.array([c for _, c in ids.query])
        protos = compute_prototypes(sup, sup_y, spec.n_way)
        logp, probs = _log_softmax_neg_sqdist(qry, protos)
        loss = -float(logp[np.arange(len(qry_y)), qry_y].mean())
        pred = probs.argmax(axis=1)
        tp = int(np.sum((pred == POS_CLASS) & (qry_y == POS_CLASS)))
        fp = int(np.sum((pred == POS_CLASS) & (qry_y != POS_CLASS)))
        tn = int(np.sum((pred != POS_CLASS) & (qry_y != POS_CLASS)))
        fn = int(np.sum((pred != POS_CLASS) & (qry_y == POS_CLASS)))
        c = ConfusionCounts(tp, fp, tn, fn)
        rec = metrics_from_counts(c)
        rec.values["loss"] = loss
        records.append(rec)
        losses.append(loss)
        counts.append(c)
    return records, losses, counts
