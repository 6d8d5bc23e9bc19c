"""Hierarchical triplet selection and the triplet hinge objective.

Labels form a two-level hierarchy: a disease at the top, and within each
disease a set of human-similarity groups. Triplets (anchor, similar,
dissimilar) are sampled under one of four regimes:

  disease          similar = same disease; dissimilar = different disease
  hierarchical     similar = same disease AND same group; dissimilar must
                   come from a different disease (cousins are excluded)
  non_hierarchical similar = same group; dissimilar = any other group,
                   cousins included
  joint            a mixture of disease-rule triplets and group-rule
                   triplets drawn from an unconstrained annotation set

The objective pulls the similar pair together and pushes the dissimilar
sample away from both by a margin, using squared Euclidean distance:

    L = max(0, margin + D(a,b) - (D(a,c) + D(b,c)) / 2)
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field, replace

import numpy as np

from . import core, model
from .core import ParamSet
from .errors import DatasetStructureError, InputError, TrainingDiverged

MELANOMA = "melanoma"
SEBORRHEIC_KERATOSIS = "seborrheic_keratosis"
BENIGN_NEVUS = "benign_nevus"
DISEASES = (MELANOMA, SEBORRHEIC_KERATOSIS, BENIGN_NEVUS)

REGIMES = ("disease", "joint", "hierarchical", "non_hierarchical")


@dataclass(frozen=True)
class HierLabel:
    """Two-level annotation: disease and/or similarity group.

    In hierarchical annotation sets a group is only meaningful under its
    parent disease; unconstrained sets carry standalone groups and no
    disease.
    """
    disease: str | None = None
    group: str | None = None

    def group_key(self):
        """Identity of the similarity group (disease-qualified when nested)."""
        if self.group is None:
            return None
        return (self.disease or "", self.group)


@dataclass(frozen=True)
class Triplet:
    anchor_id: str
    similar_id: str
    dissimilar_id: str
    regime: str


@dataclass
class TrainConfig:
    """Knobs of the triplet training loop."""
    margin: float = 1.0
    batch_size: int = 128
    momentum: float = 0.9
    lr: float = 0.01
    lr_by_group: dict[str, float] | None = None
    lr_step_every: int = 10          # multiply rates by 0.1 every this many epochs
    lr_step_factor: float = 0.1
    n_train_triplets: int = 15000
    n_val_triplets: int = 5000
    joint_mix_ratio: float = 0.5     # fraction of group-source triplets in joint
    epochs: int = 5
    seed: int = 0
    precision: str = "f64"           # "f64" for verification, "f32" for speed

    def __post_init__(self):
        if self.margin <= 0:
            raise InputError(f"margin must be > 0, got {self.margin}")
        if not 0 <= self.joint_mix_ratio <= 1:
            raise InputError(f"joint_mix_ratio must be in [0,1], got {self.joint_mix_ratio}")
        if self.precision not in ("f32", "f64"):
            raise InputError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def save_train_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in ("margin", "batch_size", "momentum", "lr", "lr_step_every",
                    "lr_step_factor", "n_train_triplets", "n_val_triplets",
                    "joint_mix_ratio", "epochs", "seed", "precision"):
            fh.write(f"{key}={getattr(config, key)}\n")
        if config.lr_by_group:
            items = ",".join(f"{k}:{v}" for k, v in sorted(config.lr_by_group.items()))
            fh.write(f"lr_by_group={items}\n")


def load_train_config(path) -> TrainConfig:
    kwargs = {}
    casts = {"margin": float, "batch_size": int, "momentum": float, "lr": float,
             "lr_step_every": int, "lr_step_factor": float, "n_train_triplets": int,
             "n_val_triplets": int, "joint_mix_ratio": float, "epochs": int,
             "seed": int, "precision": str}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key == "lr_by_group":
                kwargs[key] = {k: float(v) for item in val.split(",")
                               for k, v in [item.split(":")]}
            elif key in casts:
                kwargs[key] = casts[key](val)
            else:
                raise InputError(f"unknown train config key {key!r}")
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _sqdist(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(d @ d)


def triplet_loss(fa: np.ndarray, fb: np.ndarray, fc: np.ndarray, margin: float = 1.0):
    """Hinge over embedding distances; returns (loss, hinge_active)."""
    if not (fa.shape == fb.shape == fc.shape):
        raise InputError(f"embedding shapes differ: {fa.shape}, {fb.shape}, {fc.shape}")
    if margin <= 0:
        raise InputError(f"margin must be > 0, got {margin}")
    raw = margin + _sqdist(fa, fb) - 0.5 * (_sqdist(fa, fc) + _sqdist(fb, fc))
    active = raw > 0
    return (raw if active else 0.0), active


def triplet_loss_backward(fa: np.ndarray, fb: np.ndarray, fc: np.ndarray,
                          margin: float = 1.0):
    """Exact gradients of the hinge w.r.t. the three embeddings.

    Zero everywhere when the hinge is inactive, including exactly at the
    kink (the conventional subgradient).
    """
    _, active = triplet_loss(fa, fb, fc, margin)
    if not active:
        z = np.zeros_like(fa)
        return z, z.copy(), z.copy()
    dfa = 2.0 * (fa - fb) - (fa - fc)
    dfb = 2.0 * (fb - fa) - (fb - fc)
    dfc = fa + fb - 2.0 * fc
    return dfa, dfb, dfc


def triplet_loss_batch(fa: np.ndarray, fb: np.ndarray, fc: np.ndarray, margin: float):
    """Row-wise hinge for (B,d) embedding batches; returns (losses, active)."""
    dab = np.sum((fa - fb) ** 2, axis=1)
    dac = np.sum((fa - fc) ** 2, axis=1)
    dbc = np.sum((fb - fc) ** 2, axis=1)
    raw = margin + dab - 0.5 * (dac + dbc)
    active = raw > 0
    return np.where(active, raw, 0.0), active


def triplet_loss_batch_backward(fa, fb, fc, active, grad_losses):
    """Gradients of the row-wise hinge given upstream per-row gradients."""
    scale = (grad_losses * active)[:, None]
    dfa = scale * (2.0 * (fa - fb) - (fa - fc))
    dfb = scale * (2.0 * (fb - fa) - (fb - fc))
    dfc = scale * (fa + fb - 2.0 * fc)
    return dfa, dfb, dfc


def mean_triplet_loss_on_tape(tape: core.Tape, na: core.Node, nb: core.Node,
                              nc: core.Node, margin: float) -> core.Node:
    """Record mean-over-batch hinge loss as a custom tape primitive."""
    fa, fb, fc = na.value, nb.value, nc.value
    losses, active = triplet_loss_batch(fa, fb, fc, margin)
    n = losses.shape[0]
    loss = losses.mean()

    def vjp(g):
        grad_losses = np.full(n, float(g) / n, dtype=fa.dtype)
        return triplet_loss_batch_backward(fa, fb, fc, active, grad_losses)

    return tape.custom(np.asarray(loss), (na, nb, nc), vjp)


# ---------------------------------------------------------------------------
# Triplet validity and sampling
# ---------------------------------------------------------------------------

def _lookup(labels, sample_id: str) -> HierLabel:
    try:
        return labels[sample_id]
    except KeyError:
        raise InputError(f"sample {sample_id!r} has no label") from None


def _check_disease_rule(la, lb, lc):
    if la.disease is None or lb.disease is None or lc.disease is None:
        return False, "disease rule needs disease labels on all three samples"
    if la.disease != lb.disease:
        return False, "similar pair spans diseases"
    if lc.disease == la.disease:
        return False, "dissimilar sample shares the anchor disease"
    return True, None


def _check_group_rule(la, lb, lc, cousins_allowed: bool):
    if la.group_key() is None or lb.group_key() is None:
        return False, "similar pair lacks group annotations"
    if la.group_key() != lb.group_key():
        return False, "similar pair spans groups"
    if lc.group_key() is None:
        return False, "dissimilar sample lacks a group annotation"
    if lc.group_key() == la.group_key():
        return False, "dissimilar sample is a sibling"
    if not cousins_allowed and lc.disease == la.disease:
        return False, "cousin as dissimilar"
    return True, None


def validate_triplet(t: Triplet, labels) -> tuple[bool, str | None]:
    """Check a triplet against its regime's rules; returns (ok, reason)."""
    if len({t.anchor_id, t.similar_id, t.dissimilar_id}) != 3:
        return False, "sample ids not distinct"
    la = _lookup(labels, t.anchor_id)
    lb = _lookup(labels, t.similar_id)
    lc = _lookup(labels, t.dissimilar_id)
    if t.regime == "disease":
        return _check_disease_rule(la, lb, lc)
    if t.regime == "hierarchical":
        if None in (la.disease, lb.disease, lc.disease):
            return False, "hierarchical rule needs disease labels on all three samples"
        if la.group is None or lb.group is None:
            return False, "similar pair lacks group annotations"
        if (la.disease, la.group) != (lb.disease, lb.group):
            return False, "similar pair is not a sibling pair"
        if lc.disease == la.disease:
            if lc.group == la.group:
                return False, "dissimilar sample is a sibling"
            return False, "cousin as dissimilar"
        return True, None
    if t.regime == "non_hierarchical":
        return _check_group_rule(la, lb, lc, cousins_allowed=True)
    if t.regime == "joint":
        ok_d, _ = _check_disease_rule(la, lb, lc)
        if ok_d:
            return True, None
        ok_g, _ = _check_group_rule(la, lb, lc, cousins_allowed=True)
        if ok_g:
            return True, None
        return False, "valid under neither the disease nor the group rule"
    raise InputError(f"unknown regime {t.regime!r}")


MAX_REJECTIONS = 1000


def _sample_one(ids, labels, regime: str, rng: random.Random) -> Triplet:
    for _ in range(MAX_REJECTIONS):
        a = rng.choice(ids)
        b = rng.choice(ids)
        c = rng.choice(ids)
        t = Triplet(a, b, c, regime)
        ok, _ = validate_triplet(t, labels)
        if ok:
            return t
    raise DatasetStructureError(
        f"could not sample a valid {regime!r} triplet in {MAX_REJECTIONS} tries; "
        "the label structure likely lacks the required similar/dissimilar pools")


def _structure_check(ids, labels, regime: str) -> None:
    disease_counts: dict[str, int] = {}
    group_counts: dict[tuple, int] = {}
    for i in ids:
        lab = labels[i]
        if lab.disease:
            disease_counts[lab.disease] = disease_counts.get(lab.disease, 0) + 1
        k = lab.group_key()
        if k is not None:
            group_counts[k] = group_counts.get(k, 0) + 1
    if regime == "disease":
        if len(disease_counts) < 2 or not any(v >= 2 for v in disease_counts.values()):
            raise DatasetStructureError(
                "disease regime needs two diseases and a pair within one")
    elif regime == "hierarchical":
        sibling_diseases = {k[0] for k, v in group_counts.items() if v >= 2}
        if not sibling_diseases:
            raise DatasetStructureError("no similarity group has two members")
        if len(disease_counts) < 2:
            raise DatasetStructureError(
                "hierarchical regime needs samples from at least two diseases")
    else:
        if not any(v >= 2 for v in group_counts.values()):
            raise DatasetStructureError("no similarity group has two members")
        if len(group_counts) < 2:
            raise DatasetStructureError("need at least two similarity groups")


def sample_triplets(labels, regime: str, count: int, seed: int,
                    group_ids=None, joint_mix_ratio: float = 0.5) -> list[Triplet]:
    """Draw `count` valid triplets, uniform over valid choices, seeded.

    labels maps sample id to HierLabel. For the joint regime, group_ids
    names the unconstrained annotation pool used for the group-rule share
    of the mixture (joint_mix_ratio); the rest comes from disease-rule
    sampling over the disease-labeled ids.
    """
    if regime not in REGIMES:
        raise InputError(f"unknown regime {regime!r}")
    rng = random.Random(seed)
    all_ids = sorted(labels)
    if regime == "joint":
        disease_ids = [i for i in all_ids if labels[i].disease is not None]
        group_pool = sorted(group_ids) if group_ids is not None else \
            [i for i in all_ids if labels[i].group_key() is not None]
        if joint_mix_ratio > 0:
            _structure_check(group_pool, labels, "non_hierarchical")
        if joint_mix_ratio < 1:
            _structure_check(disease_ids, labels, "disease")
        out = []
        for _ in range(count):
            if rng.random() < joint_mix_ratio:
                t = _sample_one(group_pool, labels, "non_hierarchical", rng)
            else:
                t = _sample_one(disease_ids, labels, "disease", rng)
            out.append(replace(t, regime="joint"))
        return out
    if regime == "non_hierarchical":
        ids = [i for i in all_ids if labels[i].group_key() is not None]
    else:  # disease / hierarchical: the dissimilar sample needs no group
        ids = [i for i in all_ids if labels[i].disease is not None]
    if not ids:
        raise DatasetStructureError(f"no samples carry the annotations the "
                                    f"{regime!r} regime requires")
    _structure_check(ids, labels, regime)
    return [_sample_one(ids, labels, regime, rng) for _ in range(count)]


TRIPLET_CSV_HEADER = ["anchor_id", "similar_id", "dissimilar_id", "regime"]


def triplets_to_csv(triplets) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRIPLET_CSV_HEADER)
    for t in triplets:
        writer.writerow([t.anchor_id, t.similar_id, t.dissimilar_id, t.regime])
    return buf.getvalue()


def triplets_from_csv(text: str) -> list[Triplet]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != TRIPLET_CSV_HEADER:
        raise InputError(f"bad triplet CSV header: {header}")
    return [Triplet(*row) for row in reader if row]


# ---------------------------------------------------------------------------
# Training loop: three shared-weight branches, SGD with momentum
# ---------------------------------------------------------------------------

@dataclass
class LossCurve:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)   # NaN where not evaluated
    val_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        for e, tr, va in zip(self.epochs, self.train_loss, self.val_loss):
            tr_s = "" if np.isnan(tr) else f"{tr:.6f}"
            lines.append(f"{e},{tr_s},{va:.6f}")
        return "\n".join(lines) + "\n"


def _batch_images(dataset, ids, dtype) -> np.ndarray:
    imgs = [dataset[i] for i in ids]
    return np.ascontiguousarray(
        np.stack(imgs).transpose(0, 2, 3, 1).astype(dtype, copy=False))


def evaluate_triplet_loss(params: ParamSet, mconfig: model.ModelConfig,
                          dataset, triplets, margin: float,
                          dtype=np.float64, batch_size: int = 256) -> float:
    """Mean hinge loss over a triplet list, forward only."""
    total = 0.0
    for start in range(0, len(triplets), batch_size):
        chunk = triplets[start:start + batch_size]
        emb = {}
        for role in range(3):
            ids = [(t.anchor_id, t.similar_id, t.dissimilar_id)[role] for t in chunk]
            x = _batch_images(dataset, ids, dtype)
            maps = model.forward_maps(params, mconfig, x)
            emb[role] = core.gap_nhwc(maps)
        losses, _ = triplet_loss_batch(emb[0], emb[1], emb[2], margin)
        total += float(losses.sum())
    return total / len(triplets)


def train(params: ParamSet | None, dataset, mconfig: model.ModelConfig,
          config: TrainConfig, regime: str, labels=None,
          triplets: list[Triplet] | None = None,
          val_triplets: list[Triplet] | None = None,
          stage_init: ParamSet | None = None,
          group_ids=None, progress=None):
    """Train the embedding with shared weights across the three branches.

    dataset maps sample id to a (C,H,W) image tensor. Either pass
    pre-sampled triplet lists or labels to sample from. stage_init warm
    starts from an earlier stage (e.g. fine-tune the hierarchical regime
    from the disease model). Returns (trained ParamSet, LossCurve).
    """
    dtype = config.dtype
    if stage_init is not None:
        params = model.assign_groups(stage_init.copy(), mconfig).astype(dtype)
    elif params is not None:
        params = params.copy().astype(dtype)
    else:
        params = model.init_model(mconfig).astype(dtype)

    if labels is not None:
        # only sample over images we can actually load
        labels = {k: v for k, v in labels.items() if k in dataset}
        if group_ids is not None:
            group_ids = [g for g in group_ids if g in dataset]
    if triplets is None:
        if labels is None:
            raise InputError("need labels to sample triplets")
        triplets = sample_triplets(labels, regime, config.n_train_triplets,
                                   config.seed, group_ids=group_ids,
                                   joint_mix_ratio=config.joint_mix_ratio)
    if val_triplets is None and labels is not None and config.n_val_triplets > 0:
        val_triplets = sample_triplets(labels, regime, config.n_val_triplets,
                                       config.seed + 1, group_ids=group_ids,
                                       joint_mix_ratio=config.joint_mix_ratio)
    val_triplets = val_triplets or []

    curve = LossCurve()
    if val_triplets:
        v0 = evaluate_triplet_loss(params, mconfig, dataset, val_triplets,
                                   config.margin, dtype)
        curve.epochs.append(0)
        curve.train_loss.append(float("nan"))
        curve.val_loss.append(v0)

    order = list(range(len(triplets)))
    shuffle_rng = random.Random(config.seed ^ 0x5EED)
    for epoch in range(1, config.epochs + 1):
        decay = config.lr_step_factor ** ((epoch - 1) // config.lr_step_every)
        if config.lr_by_group:
            lr = {g: r * decay for g, r in config.lr_by_group.items()}
            lr.setdefault("default", config.lr * decay)
        else:
            lr = config.lr * decay
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start:start + config.batch_size]]
            tape = core.Tape()
            pnodes = {name: tape.leaf(value, name=name)
                      for name, value in params.params.items()}
            branches = []
            for role in range(3):
                ids = [(t.anchor_id, t.similar_id, t.dissimilar_id)[role] for t in batch]
                x = model.prepare_input(mconfig, _batch_images(dataset, ids, dtype))
                branches.append(model.forward_on_tape(tape, pnodes, mconfig, tape.leaf(x)))
            loss_node = mean_triplet_loss_on_tape(tape, *branches, config.margin)
            loss = float(loss_node.value)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {loss}")
            grads = tape.backward(loss_node, seed=np.asarray(1.0, dtype=dtype))
            core.sgd_momentum_step(params, grads, lr, config.momentum)
            epoch_loss += loss
            n_batches += 1
        train_loss = epoch_loss / max(n_batches, 1)
        val_loss = evaluate_triplet_loss(params, mconfig, dataset, val_triplets,
                                         config.margin, dtype) if val_triplets else float("nan")
        curve.epochs.append(epoch)
        curve.train_loss.append(train_loss)
        curve.val_loss.append(val_loss)
        if progress:
            progress(epoch, train_loss, val_loss)
    return params, curve
