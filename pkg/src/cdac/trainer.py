"""Minimax training loop, baselines and analysis instrumentation.

Each iteration runs two phases. Phase 1 descends the supervised cross-entropy
on a labeled batch (source half, labeled-target half). Phase 2 works on an
unlabeled target batch: the adversarial term (clustering or entropy) is fed
through a gradient-reversal node placed between G and F and the whole phase
objective is ``-lam * adv + pl + con``. One backward sweep then gives F the
gradient of ``-lam * adv + pl + con`` and G the gradient of
``+lam * adv + pl + con``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import losses as L
from .data import AugmentConfig, LabeledSet, SsdaDataset, augment
from .model import HyperParams, ModelParams, extract, init_params

log = logging.getLogger(__name__)

METHODS = ("cdac", "s+t", "ent")
SETTINGS = ("ssda", "uda")
SCHEDULES = ("two_phase", "combined")


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    method: str = "cdac"
    use_aac: bool = True
    use_pl: bool = True
    use_con: bool = True
    setting: str = "ssda"
    epochs: int = 10
    steps_per_epoch: int = 100
    eval_every: int = 100
    reduction: str = "mean"
    schedule: str = "two_phase"
    hidden_dims: tuple[int, ...] = (64, 32)
    feature_dim: int = 32
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.eval_every < 1:
            raise ValueError("need epochs >= 0, steps_per_epoch >= 1, eval_every >= 1")

    @property
    def adversarial_term(self) -> str | None:
        if self.method == "cdac" and self.use_aac:
            return "aac"
        if self.method == "ent":
            return "ent"
        return None

    @property
    def pl_on(self) -> bool:
        return self.method != "s+t" and self.use_pl

    @property
    def con_on(self) -> bool:
        return self.method != "s+t" and self.use_con

    @property
    def any_unlabeled_term(self) -> bool:
        return self.adversarial_term is not None or self.pl_on or self.con_on

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def ramp_steps(self) -> int:
        if self.hp.ramp_steps is not None:
            return self.hp.ramp_steps
        return max(1, self.total_steps // 2)


# ------------------------------------------------------------------ optimizer


class SGD:
    """Momentum SGD with the inverse decay ``lr0 * (1 + gamma * i) ** -power``."""

    def __init__(self, params: list[dc.Tensor], lr: float, momentum: float = 0.9,
                 gamma: float = 1e-4, power: float = 0.75):
        self.params = params
        self.lr0 = lr
        self.momentum = momentum
        self.gamma = gamma
        self.power = power
        self.velocity = [np.zeros_like(p.data) for p in params]

    def lr_at(self, i: int) -> float:
        return self.lr0 * (1.0 + self.gamma * i) ** (-self.power)

    def step(self, i: int, only: set[int] | None = None) -> None:
        """Apply one update; ``only`` restricts it to parameters with those ``id``s."""
        lr = self.lr_at(i)
        for p, v in zip(self.params, self.velocity):
            if only is not None and id(p) not in only:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v


@dataclass
class PhaseOptimizers:
    """One momentum buffer set per phase, so a phase with zero gradient never moves weights."""

    supervised: SGD
    unlabeled: SGD

    @classmethod
    def create(cls, params: ModelParams, hp: HyperParams) -> "PhaseOptimizers":
        def make():
            return SGD(params.parameters(), hp.lr, hp.momentum, hp.lr_gamma, hp.lr_power)
        return cls(make(), make())


# ------------------------------------------------------------------ objectives


@dataclass
class UnlabeledTerms:
    total: dc.Tensor
    values: dict[str, float]
    pseudo: L.PseudoLabelBatch | None
    similarity: np.ndarray | None


def supervised_objective(params: ModelParams, x: np.ndarray, y: np.ndarray, reduction: str = "mean") -> dc.Tensor:
    p = params.F(extract(params.G, x))
    return L.cross_entropy(p, y, reduction)


def unlabeled_objective(params: ModelParams, x_u: np.ndarray, x1: np.ndarray, x2: np.ndarray,
                        cfg: TrainConfig, t: int, similarity: np.ndarray | None = None) -> UnlabeledTerms:
    """Build the phase-2 graph for originals ``x_u`` and their two augmented views.

    ``similarity`` overrides the top-k labels computed from the original
    features (used to re-evaluate a fixed batch after an update).
    """
    hp, G, F = cfg.hp, params.G, params.F
    red = cfg.reduction
    f_u = extract(G, x_u)
    f_1 = extract(G, x1)
    values: dict[str, float] = {}
    parts: list[dc.Tensor] = []
    pseudo = None
    s = None

    adv = cfg.adversarial_term
    if adv == "aac":
        s = L.pairwise_similarity(f_u.data, hp.k) if similarity is None else similarity
        p_adv = F(dc.grad_reverse(f_u))
        p1_adv = F(dc.grad_reverse(f_1))
        term = L.aac_loss(p_adv, p1_adv, s, red)
        values["aac"] = float(term.data)
        parts.append(dc.scale(term, -hp.lam))
    elif adv == "ent":
        term = L.entropy_loss(F(dc.grad_reverse(f_u)), red)
        values["ent"] = float(term.data)
        parts.append(dc.scale(term, -hp.lam))

    if cfg.pl_on or cfg.con_on:
        p2 = F(extract(G, x2))
        if cfg.pl_on:
            p_u = F(f_u).data
            term, pseudo = L.pseudo_label_loss(p_u, p2, hp.tau, red)
            values["pl"] = float(term.data)
            parts.append(term)
        if cfg.con_on:
            ramp = L.RampState(t, cfg.ramp_steps, hp.nu)
            term = L.consistency_loss(F(f_1), p2, ramp, red)
            values["con"] = float(term.data)
            parts.append(term)

    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDivergence(f"non-finite {name} loss at step {t}")
    total = parts[0] if parts else dc.Tensor(0.0)
    for part in parts[1:]:
        total = dc.add(total, part)
    return UnlabeledTerms(total, values, pseudo, s)


def _check_grads(params: ModelParams, where: str, t: int) -> None:
    for i, p in enumerate(params.parameters()):
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDivergence(f"non-finite gradient in parameter {i} during {where} at step {t}")


def train_step(params: ModelParams, opt: PhaseOptimizers, labeled: tuple[np.ndarray, np.ndarray],
               unlabeled_x: np.ndarray | None, cfg: TrainConfig, t: int,
               aug_rng: np.random.Generator | None = None,
               views: tuple[np.ndarray, np.ndarray] | None = None) -> dict[str, float]:
    """One iteration; updates ``params`` in place and returns the loss values.

    ``views`` supplies the two augmented copies of ``unlabeled_x`` directly,
    otherwise they are drawn from ``aug_rng``.
    """
    x_l, y_l = labeled
    if len(x_l) == 0:
        raise ValueError("labeled batch is empty")
    if cfg.any_unlabeled_term:
        if unlabeled_x is None or len(unlabeled_x) == 0:
            raise ValueError("unlabeled batch is empty")
        if views is None:
            views = (augment(unlabeled_x, cfg.augment, aug_rng), augment(unlabeled_x, cfg.augment, aug_rng))
    out: dict[str, float] = {}

    def phase2() -> dc.Tensor:
        terms = unlabeled_objective(params, unlabeled_x, views[0], views[1], cfg, t)
        out.update(terms.values)
        if terms.pseudo is not None:
            out["pl_retained"] = float(terms.pseudo.retained)
        return terms.total

    params.zero_grad()
    ce = supervised_objective(params, x_l, y_l, cfg.reduction)
    out["ce"] = float(ce.data)
    if not math.isfinite(out["ce"]):
        raise TrainingDivergence(f"non-finite ce loss at step {t}")

    if cfg.schedule == "combined" and cfg.any_unlabeled_term:
        dc.add(ce, phase2()).backward()
        _check_grads(params, "combined step", t)
        opt.supervised.step(t)
        return out

    ce.backward()
    _check_grads(params, "supervised phase", t)
    opt.supervised.step(t)
    if cfg.any_unlabeled_term:
        params.zero_grad()
        phase2().backward()
        _check_grads(params, "unlabeled phase", t)
        opt.unlabeled.step(t)
    return out


# ------------------------------------------------------------ instrumentation


def predict_probs(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return params.F(extract(params.G, x)).data


def unit_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return dc.l2_normalize_rows(extract(params.G, x)).data


def evaluate(params: ModelParams, test_set: LabeledSet) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = predict_probs(params, test_set.x).argmax(axis=1)
    return float(np.mean(pred == test_set.y))


def cluster_core_distance(params: ModelParams, source_x: np.ndarray, source_y: np.ndarray,
                          target_x: np.ndarray, target_y: np.ndarray, class_c: int) -> float:
    """Distance between the class-c centroids of l2-normalized source and target features."""
    src = source_x[source_y == class_c]
    tgt = target_x[target_y == class_c]
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError(f"class {class_c} is empty in the source or target samples")
    return _centroid_distance(unit_features(params, src), unit_features(params, tgt))


def _centroid_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def class_core_distances(params: ModelParams, dataset: SsdaDataset) -> list[float]:
    fs = unit_features(params, dataset.source.x)
    ft = unit_features(params, dataset.target_unlabeled.x)
    out = []
    for c in range(dataset.num_classes):
        a = fs[dataset.source.y == c]
        b = ft[dataset.unlabeled_truth == c]
        out.append(_centroid_distance(a, b) if len(a) and len(b) else float("nan"))
    return out


@dataclass
class PseudoLabelStats:
    coverage: float
    precision: float
    any_retained: bool


def pseudo_label_stats(params: ModelParams, x_u: np.ndarray, hidden_labels: np.ndarray,
                       tau: float) -> PseudoLabelStats:
    """Retained fraction of the pool and the accuracy of the retained pseudo labels.

    Precision is reported as 1.0 (with ``any_retained`` False) when nothing passes ``tau``.
    """
    probs = predict_probs(params, x_u)
    keep = probs.max(axis=1) >= tau
    n_keep = int(keep.sum())
    coverage = n_keep / len(x_u) if len(x_u) else 0.0
    if n_keep == 0:
        return PseudoLabelStats(coverage, 1.0, False)
    correct = probs.argmax(axis=1)[keep] == np.asarray(hidden_labels)[keep]
    return PseudoLabelStats(coverage, float(correct.mean()), True)


# --------------------------------------------------------------- experiments

LOSS_TERMS = ("ce", "aac", "ent", "pl", "con")


@dataclass
class RunMetrics:
    num_classes: int
    records: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        base = ["step", "epoch", "lr", "accuracy"] + [f"loss_{k}" for k in LOSS_TERMS]
        base += ["pl_coverage", "pl_precision", "pl_any_retained", "ccd_mean"]
        return base + [f"ccd_{c}" for c in range(self.num_classes)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: _fmt(rec[k]) for k in self.columns})
        return buf.getvalue()

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=np.float64)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1]["accuracy"]

    @property
    def best_accuracy(self) -> float:
        return max(r["accuracy"] for r in self.records)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _snapshot(params: ModelParams, dataset: SsdaDataset, cfg: TrainConfig, step: int,
              lr: float, loss_means: dict[str, float]) -> dict:
    stats = pseudo_label_stats(params, dataset.target_unlabeled.x, dataset.unlabeled_truth, cfg.hp.tau)
    ccd = class_core_distances(params, dataset)
    rec = {"step": step, "epoch": step // cfg.steps_per_epoch, "lr": lr,
           "accuracy": evaluate(params, dataset.target_test)}
    for k in LOSS_TERMS:
        rec[f"loss_{k}"] = loss_means.get(k, float("nan"))
    rec.update(pl_coverage=stats.coverage, pl_precision=stats.precision, pl_any_retained=stats.any_retained,
               ccd_mean=float(np.nanmean(ccd)))
    rec.update({f"ccd_{c}": v for c, v in enumerate(ccd)})
    return rec


def _labeled_batch(dataset: SsdaDataset, hp: HyperParams, rng: np.random.Generator):
    S, Lt = dataset.source, dataset.target_labeled
    idx_s = rng.choice(len(S), size=min(hp.batch_source, len(S)), replace=False)
    xs, ys = [S.x[idx_s]], [S.y[idx_s]]
    if len(Lt) and hp.batch_target:
        idx_t = rng.choice(len(Lt), size=hp.batch_target, replace=True)
        xs.append(Lt.x[idx_t])
        ys.append(Lt.y[idx_t])
    return np.concatenate(xs), np.concatenate(ys)


def run_experiment(cfg: TrainConfig, dataset: SsdaDataset, return_params: bool = False,
                   on_step: Callable[[int, ModelParams], None] | None = None,
                   ) -> RunMetrics | tuple[RunMetrics, ModelParams]:
    """Train from a seeded initialization; evaluate at step 0, every ``eval_every`` steps and at the end.

    ``on_step(t, params)`` is called after every update (read-only use).

    Separate random streams drive initialization, labeled batches, unlabeled
    batches and augmentation, so toggling unlabeled terms never changes the
    labeled batch sequence.
    """
    hp = cfg.hp
    if cfg.setting == "uda":
        dataset = dataset.without_target_labels()
    init_ss, lab_ss, unl_ss, aug_ss = np.random.SeedSequence(hp.seed).spawn(4)
    params = init_params(int(init_ss.generate_state(1)[0]), dataset.input_dim, dataset.num_classes,
                         cfg.hidden_dims, cfg.feature_dim, hp.temperature, hp.k)
    lab_rng = np.random.default_rng(lab_ss)
    unl_rng = np.random.default_rng(unl_ss)
    aug_rng = np.random.default_rng(aug_ss)
    opt = PhaseOptimizers.create(params, hp)
    metrics = RunMetrics(dataset.num_classes)
    metrics.records.append(_snapshot(params, dataset, cfg, 0, opt.supervised.lr_at(0), {}))

    pool = dataset.target_unlabeled.x
    sums: dict[str, float] = {}
    count = 0
    for t in range(cfg.total_steps):
        batch = _labeled_batch(dataset, hp, lab_rng)
        x_u = None
        if cfg.any_unlabeled_term:
            x_u = pool[unl_rng.choice(len(pool), size=min(hp.batch_unlabeled, len(pool)), replace=False)]
        step_losses = train_step(params, opt, batch, x_u, cfg, t, aug_rng)
        if on_step is not None:
            on_step(t, params)
        for k, v in step_losses.items():
            sums[k] = sums.get(k, 0.0) + v
        count += 1
        done = t + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            means = {k: v / count for k, v in sums.items()}
            metrics.records.append(_snapshot(params, dataset, cfg, done, opt.supervised.lr_at(t), means))
            log.debug("step %d accuracy %.4f", done, metrics.records[-1]["accuracy"])
            sums, count = {}, 0
    if return_params:
        return metrics, params
    return metrics


def feature_dump(params: ModelParams, dataset: SsdaDataset) -> str:
    """CSV of raw extractor features tagged with domain, split and class."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    dim = params.G.feature_dim
    writer.writerow(["domain", "split", "class"] + [f"f{i}" for i in range(dim)])
    groups = [("source", "labeled", dataset.source.x, dataset.source.y),
              ("target", "labeled", dataset.target_labeled.x, dataset.target_labeled.y),
              ("target", "unlabeled", dataset.target_unlabeled.x, dataset.unlabeled_truth),
              ("target", "test", dataset.target_test.x, dataset.target_test.y)]
    for domain, split, x, y in groups:
        if len(x) == 0:
            continue
        feats = extract(params.G, x).data
        for f, c in zip(feats, y):
            writer.writerow([domain, split, int(c)] + [repr(float(v)) for v in f])
    return buf.getvalue()
