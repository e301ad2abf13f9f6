"""Pretraining, finetuning, inference and evaluation.

Pretraining draws (anchor, positive, negative) same-type batches, builds
one graph per batch with shared weights, and optimizes the triplet code
loss plus the weighted level-regression loss. Finetuning drops both heads
and regresses scores from node and self-loop edge embeddings. All
randomness flows through explicit generators seeded from the config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .backbone import ConvBackbone
from .checkpoint import check_fingerprint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .distortions import (DistortionSample, default_specs, make_sample,
                          patches_array, sample_mixed_batch, sample_triplet,
                          sample_type_batch)
from .graph import build_dgr
from .heads import (HyperPredictor, TripletCodes, combined_loss, fpn_predict,
                    level_loss, regression_score, score_loss, tdn_code,
                    triplet_loss)
from .metrics import DEGENERATE, clustering_metrics, kmeans, plcc, srcc
from .nn import GcnStack, Mlp
from .optim import Adam

# content-seed ranges keep held-out data disjoint from training data
TRAIN_SEED_RANGE = (0, 2 ** 31)
HELDOUT_SEED_RANGE = (2 ** 31, 2 ** 32)

# rng stream salts off the config seed
_SALT_MODEL = 11
_SALT_PRETRAIN = 22
_SALT_FINETUNE = 33
_SALT_EVAL = 44


class TrainingError(RuntimeError):
    pass


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), salt)))


class ModelBundle:
    """All learnable components, built reproducibly from one seed."""

    PARTS = ("backbone", "node_builder", "edge_builder", "tdn", "fpn", "regressor")

    def __init__(self, cfg: TrainConfig, seed: int | None = None):
        self.cfg = cfg
        rng = _rng(cfg.seed if seed is None else seed, _SALT_MODEL)
        c, ce, cv = cfg.feature_dim, cfg.edge_dim, cfg.code_dim
        self.backbone = ConvBackbone(c, cfg.backbone_channels, rng, name="backbone")
        self.node_builder = Mlp([c] * (cfg.node_builder_layers + 1), rng, name="node_builder")
        self.edge_builder = GcnStack([c] * cfg.edge_builder_layers + [ce], rng,
                                     name="edge_builder")
        self.tdn = GcnStack([c] * cfg.tdn_layers + [cv], rng, name="tdn")
        self.fpn = HyperPredictor(c, ce, cfg.fpn_hidden, rng, name="fpn")
        reg_in = {"both": c + ce, "nodes": c, "edges": ce}[cfg.finetune_inputs]
        self.regressor = Mlp([reg_in, cfg.regressor_hidden, 1], rng, name="regressor")
        # start level and score outputs mid-scale so the short desk-scale
        # budgets are not spent crawling the output bias up from zero
        self.fpn.net.layers[-1].b.data[0] = 3.0
        self.regressor.layers[-1].b.data[0] = 3.0
        self.specs = default_specs(cfg.types)

    def _part(self, name: str):
        return getattr(self, name)

    def parameters(self, parts=PARTS) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in parts:
            out.update(self._part(part).parameters())
        return out

    def pretrain_parameters(self) -> dict[str, Tensor]:
        return self.parameters(("backbone", "node_builder", "edge_builder", "tdn", "fpn"))

    def finetune_parameters(self) -> dict[str, Tensor]:
        return self.parameters(("backbone", "node_builder", "edge_builder", "regressor"))

    def build_graph(self, patches: np.ndarray, type_id: int | None = None):
        features = self.backbone.extract_features(patches)
        return build_dgr(features, self.node_builder, self.edge_builder, type_id=type_id)


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def pretrain_step(model: ModelBundle, cfg: TrainConfig, rng: np.random.Generator,
                  optimizer: Adam):
    """One triplet + level-regression update; returns the LossBundle."""
    if len(model.specs) < 2:
        raise TrainingError("pretraining needs at least 2 distortion types")
    anchor, positive, negative = sample_triplet(
        model.specs, cfg.graph_size, rng, patch_size=cfg.patch_size,
        seed_range=TRAIN_SEED_RANGE, jitter_std=cfg.jitter_std)
    graphs = [model.build_graph(patches_array(batch), batch[0].type_id)
              for batch in (anchor, positive, negative)]
    codes = TripletCodes(*(tdn_code(g, model.tdn) for g in graphs))
    l_dist = triplet_loss(codes, cfg.margin)
    # the level head sees only the anchor graph
    pred = fpn_predict(graphs[0], model.fpn, rng)
    l_level = level_loss(pred, np.array([s.level for s in anchor], dtype=np.float64))
    bundle = combined_loss(l_dist, l_level, cfg.level_weight)
    if not np.isfinite(bundle.total.data):
        raise TrainingError(
            f"non-finite pretrain loss (l_dist={bundle.l_dist.data}, "
            f"l_level={bundle.l_level.data})")
    optimizer.zero_grad()
    bundle.total.backward()
    optimizer.step()
    return bundle


def finetune_step(model: ModelBundle, batch: list[DistortionSample],
                  cfg: TrainConfig, optimizer: Adam) -> float:
    """One score-regression update on a (possibly mixed-type) batch."""
    dgr = model.build_graph(patches_array(batch))
    pred = regression_score(dgr, model.regressor, cfg.finetune_inputs)
    loss = score_loss(pred, np.array([s.proxy_mos for s in batch]))
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite finetune loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


def _cosine_lr(base: float, step: int, total: int) -> float:
    # decay to base/10 over the run; short budgets need the annealed tail
    floor = base / 10.0
    return floor + 0.5 * (base - floor) * (1.0 + np.cos(np.pi * (step - 1) / total))


def pretrain(model: ModelBundle, cfg: TrainConfig, steps: int | None = None,
             on_step=None) -> list[tuple[float, float, float]]:
    """Run the pretraining loop; returns (l_dist, l_level, total) per step."""
    steps = cfg.pretrain_steps if steps is None else steps
    rng = _rng(cfg.seed, _SALT_PRETRAIN)
    optimizer = Adam(model.pretrain_parameters(), lr=cfg.pretrain_lr)
    log = []
    for step in range(1, steps + 1):
        optimizer.lr = _cosine_lr(cfg.pretrain_lr, step, steps)
        bundle = pretrain_step(model, cfg, rng, optimizer)
        row = (float(bundle.l_dist.data), float(bundle.l_level.data),
               float(bundle.total.data))
        log.append(row)
        if on_step is not None:
            on_step(step, row)
    return log


def finetune(model: ModelBundle, cfg: TrainConfig, steps: int | None = None,
             on_step=None) -> list[float]:
    """Run the finetuning loop; returns the per-step loss."""
    steps = cfg.finetune_steps if steps is None else steps
    rng = _rng(cfg.seed, _SALT_FINETUNE)
    optimizer = Adam(model.finetune_parameters(), lr=cfg.finetune_lr)
    log = []
    for step in range(1, steps + 1):
        optimizer.lr = _cosine_lr(cfg.finetune_lr, step, steps)
        batch = sample_mixed_batch(model.specs, cfg.graph_size, rng,
                                   patch_size=cfg.patch_size,
                                   seed_range=TRAIN_SEED_RANGE,
                                   jitter_std=cfg.jitter_std)
        loss = finetune_step(model, batch, cfg, optimizer)
        log.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return log


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def score_patches(model: ModelBundle, patches: np.ndarray) -> np.ndarray:
    """Quality scores for a stack of patches run as one graph."""
    dgr = model.build_graph(patches)
    return regression_score(dgr, model.regressor, model.cfg.finetune_inputs).data.copy()


def infer_score(model: ModelBundle, image: np.ndarray, crops: int = 10,
                rng: np.random.Generator | None = None) -> float:
    """Average score over random patch-sized crops of one image."""
    rng = rng if rng is not None else np.random.default_rng(0)
    ps = model.cfg.patch_size
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h < ps or w < ps:
        raise ValueError(f"image {h}x{w} is smaller than the {ps}x{ps} patch size")
    ys = rng.integers(0, h - ps + 1, size=crops)
    xs = rng.integers(0, w - ps + 1, size=crops)
    stack = np.stack([image[y:y + ps, x:x + ps, :] for y, x in zip(ys, xs)])
    return float(score_patches(model, stack).mean())


def score_heldout(model: ModelBundle, heldout: list[DistortionSample],
                  rng: np.random.Generator, repeats: int = 5) -> np.ndarray:
    """Per-sample scores averaged over random graph contexts.

    Self-loop edge embeddings depend on the rest of the graph, so each
    held-out sample is scored in ``repeats`` shuffled training-shaped
    batches and the scores are averaged (the batch analogue of the
    crop-averaging done for single images).
    """
    n = len(heldout)
    size = model.cfg.graph_size
    total = np.zeros(n)
    for _ in range(repeats):
        perm = rng.permutation(n)
        for start in range(0, n, size):
            idx = perm[start:start + size]
            batch_idx = idx
            if len(idx) < size:  # pad the tail batch, keep only real scores
                batch_idx = np.concatenate([idx, perm[:size - len(idx)]])
            patches = np.stack([heldout[i].patch for i in batch_idx])
            total[idx] += score_patches(model, patches)[:len(idx)]
    return total / repeats


def make_heldout(cfg: TrainConfig, rng: np.random.Generator,
                 size: int | None = None) -> list[DistortionSample]:
    """Balanced held-out samples with content seeds disjoint from training."""
    size = cfg.heldout_size if size is None else size
    specs = default_specs(cfg.types)
    lo, hi = HELDOUT_SEED_RANGE
    samples = []
    seen: set[int] = set()
    for i in range(size):
        spec = specs[i % len(specs)]
        level = (i // len(specs)) % 5 + 1
        while True:
            seed = int(rng.integers(lo, hi))
            if seed not in seen:
                seen.add(seed)
                break
        samples.append(make_sample(spec, level, seed, cfg.patch_size,
                                   jitter_std=cfg.jitter_std))
    return samples


def triplet_accuracy(model: ModelBundle, cfg: TrainConfig, rng: np.random.Generator,
                     n_triplets: int) -> float:
    """Fraction of fresh triplets whose anchor code lies closer to the
    positive code than to the negative code."""
    hits = 0
    for _ in range(n_triplets):
        anchor, positive, negative = sample_triplet(
            model.specs, cfg.graph_size, rng, patch_size=cfg.patch_size,
            seed_range=HELDOUT_SEED_RANGE, jitter_std=cfg.jitter_std)
        a, p, n = (tdn_code(model.build_graph(patches_array(b)), model.tdn).data
                   for b in (anchor, positive, negative))
        if ((a - p) ** 2).sum() < ((a - n) ** 2).sum():
            hits += 1
    return hits / n_triplets


@dataclass
class EvalReport:
    step: int | None
    srcc: object
    plcc: object
    clustering: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    level_spearman: dict[int, object] = field(default_factory=dict)
    triplet_accuracy: float | None = None

    def to_dict(self) -> dict:
        def scalar(v):
            return "degenerate" if v is DEGENERATE else v

        return {
            "step": self.step,
            "srcc": scalar(self.srcc),
            "plcc": scalar(self.plcc),
            "clustering": {str(t): {"homogeneity": h, "completeness": c, "v_measure": v}
                           for t, (h, c, v) in sorted(self.clustering.items())},
            "level_spearman": {str(t): scalar(v)
                               for t, v in sorted(self.level_spearman.items())},
            "triplet_accuracy": self.triplet_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def per_type_eval_batches(model: ModelBundle, cfg: TrainConfig,
                          rng: np.random.Generator, per_type: int | None = None):
    """Held-out per-type node embeddings, FPN means, and level labels.

    Samples are drawn in graphs of the training graph size and concatenated
    until ``per_type`` rows exist for each distortion type.
    """
    per_type = cfg.eval_samples_per_type if per_type is None else per_type
    out = {}
    for spec in model.specs:
        rows, mus, levels = [], [], []
        while len(levels) < per_type:
            batch = sample_type_batch(spec, cfg.graph_size, rng,
                                      patch_size=cfg.patch_size,
                                      seed_range=HELDOUT_SEED_RANGE,
                                      jitter_std=cfg.jitter_std)
            dgr = model.build_graph(patches_array(batch), spec.type_id)
            pred = fpn_predict(dgr, model.fpn, rng, epsilon=np.zeros(dgr.n))
            rows.append(dgr.V.data.copy())
            mus.append(pred.mu.data.copy())
            levels.extend(s.level for s in batch)
        out[spec.type_id] = (np.concatenate(rows)[:per_type],
                             np.concatenate(mus)[:per_type],
                             np.array(levels[:per_type]))
    return out


def evaluate(model: ModelBundle, cfg: TrainConfig, step: int | None = None,
             heldout: list[DistortionSample] | None = None,
             triplets: int | None = None) -> EvalReport:
    """Score correlations, per-type clustering of node embeddings, per-type
    level Spearman of the FPN mean, and held-out triplet accuracy."""
    rng = _rng(cfg.seed, _SALT_EVAL)
    if heldout is None:
        heldout = make_heldout(cfg, rng)
    if not heldout:
        raise TrainingError("evaluation needs a non-empty held-out set")

    scores = score_heldout(model, heldout, rng)
    gt = np.array([s.proxy_mos for s in heldout])

    clustering: dict[int, tuple[float, float, float]] = {}
    level_sp: dict[int, object] = {}
    for type_id, (emb, mu, levels) in per_type_eval_batches(model, cfg, rng).items():
        labels = kmeans(emb, k=5, rng=rng, restarts=10)
        clustering[type_id] = clustering_metrics(levels, labels)
        level_sp[type_id] = srcc(mu, levels)

    n_triplets = cfg.eval_triplets if triplets is None else triplets
    acc = triplet_accuracy(model, cfg, rng, n_triplets) if n_triplets else None
    return EvalReport(step=step, srcc=srcc(scores, gt), plcc=plcc(scores, gt),
                      clustering=clustering, level_spearman=level_sp,
                      triplet_accuracy=acc)


# ---------------------------------------------------------------------------
# checkpoint glue
# ---------------------------------------------------------------------------


def save_model(model: ModelBundle, path, include_regressor: bool) -> None:
    parts = ModelBundle.PARTS if include_regressor else \
        ("backbone", "node_builder", "edge_builder", "tdn", "fpn")
    params = {name: t.data for name, t in model.parameters(parts).items()}
    save_checkpoint(params, model.cfg.model_fingerprint(include_regressor), path)


def load_model(path, cfg: TrainConfig) -> ModelBundle:
    """Build a fresh bundle from cfg and overwrite stored parameters."""
    params, fingerprint = load_checkpoint(path)
    check_fingerprint(fingerprint, cfg.model_fingerprint(with_regressor=True), path)
    model = ModelBundle(cfg)
    own = model.parameters()
    for name, arr in params.items():
        if name not in own:
            raise TrainingError(f"checkpoint parameter {name!r} has no home in this model")
        if own[name].data.shape != arr.shape:
            raise TrainingError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"model expects {own[name].data.shape}")
        own[name].data = arr.copy()
    return model
