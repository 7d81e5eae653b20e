"""Patient-grouped evaluation harness.

Fold plans that never split one patient's segments across partitions,
two-class metrics (accuracy, macro-F1, ROC/AUC), the model x stage x fold
run matrix, label-fraction sweeps, one-way ANOVA with Welch/Bonferroni
post-hoc tests, and an exact t-SNE embedding for inspecting learned
representations.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from . import hmm as hm
from . import smate as sm
from . import xcm as xc
from .errors import (ConfigValidation, DegenerateGroups, EmptyInput,
                     MissingStore, NonFiniteValue, PerplexityTooLarge,
                     SerializationError, ShapeMismatch, SingleClassLabels,
                     SomniumError, TooFewPatients)
from .features import segment_features
from .preprocess import SegmentBatch, load_store_dir

FOLD_COUNT = 5
VALIDATION_SHARE = 8          # remainder split train:validation = 7:1


# --- fold plans -------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: tuple
    validation: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    seed: int

    @property
    def fold_count(self) -> int:
        return len(self.folds)


def make_folds(patient_ids, labels, seed: int = 0) -> FoldPlan:
    """Partition patients into 5 folds: ~20% test each, remainder split
    7:1 into train:validation, class-stratified, deterministic in seed."""
    ids = list(patient_ids)
    labels = np.asarray(labels)
    if len(ids) != len(labels):
        raise ShapeMismatch("one label per patient required")
    if len(set(ids)) != len(ids):
        raise ShapeMismatch(f"duplicate patient ids in {ids}")
    if len(ids) < 2 * FOLD_COUNT:
        raise TooFewPatients(f"need >= {2 * FOLD_COUNT} patients, "
                             f"got {len(ids)}")
    classes = sorted(set(int(v) for v in labels))
    if len(classes) < 2:
        raise SingleClassLabels("fold plan needs both classes")

    order_by_class = {}
    test_sets: list[list] = [[] for _ in range(FOLD_COUNT)]
    for cls in classes:
        members = [p for p, l in zip(ids, labels) if int(l) == cls]
        rng = np.random.default_rng([seed, cls])
        order = [members[k] for k in rng.permutation(len(members))]
        order_by_class[cls] = order
        for f, chunk in enumerate(
                np.array_split(np.arange(len(order)), FOLD_COUNT)):
            test_sets[f].extend(order[k] for k in chunk)

    folds = []
    for f in range(FOLD_COUNT):
        test = set(test_sets[f])
        queues = [[p for p in order_by_class[cls] if p not in test]
                  for cls in classes]
        remainder = []
        for i in range(max(len(q) for q in queues)):
            for q in queues:
                if i < len(q):
                    remainder.append(q[i])
        n_val = max(1, round(len(remainder) / VALIDATION_SHARE))
        folds.append(Fold(train=tuple(remainder[:-n_val]),
                          validation=tuple(remainder[-n_val:]),
                          test=tuple(test_sets[f])))
    return FoldPlan(folds=tuple(folds), seed=seed)


# --- metrics ----------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    roc_points: list
    auc: float | None


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        i = j
    return ranks


def _class_counts(labels) -> tuple[int, int]:
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassLabels(
            "both classes must appear in the reference labels")
    return n_pos, n_neg


def auc_rank(labels, scores) -> float:
    """AUC as the probability a positive outscores a negative, ties 1/2."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = _class_counts(labels)
    ranks = average_ranks(scores)
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(labels, scores) -> list:
    """(FPR, TPR) points from a descending threshold sweep over the
    distinct scores, beginning at (0, 0) and ending at (1, 1)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = _class_counts(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(np.sum(sorted_labels[i:j] == 1))
        fp += int(np.sum(sorted_labels[i:j] == 0))
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def auc_trapezoid(points) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * 0.5 * (y0 + y1)
    return area


def _macro_f1(labels, predictions) -> float:
    f1_scores = []
    for cls in (0, 1):
        tp = int(np.sum((predictions == cls) & (labels == cls)))
        fp = int(np.sum((predictions == cls) & (labels != cls)))
        fn = int(np.sum((predictions != cls) & (labels == cls)))
        denom = 2 * tp + fp + fn
        f1_scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(f1_scores))


def metrics(labels, predictions, scores) -> Metrics:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    scores = np.asarray(scores, dtype=np.float64)
    if not len(labels) == len(predictions) == len(scores):
        raise ShapeMismatch("labels, predictions, scores must align")
    if len(labels) == 0:
        raise EmptyInput("metrics need at least one sample")
    accuracy = float(np.mean(predictions == labels))
    macro = _macro_f1(labels, predictions)
    try:
        roc = roc_curve(labels, scores)
        auc = auc_rank(labels, scores)
    except SingleClassLabels:
        roc, auc = [], None
    return Metrics(accuracy=accuracy, macro_f1=macro,
                   roc_points=roc, auc=auc)


def spearman(x, y) -> float:
    """Rank correlation (average ranks for ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ShapeMismatch("spearman inputs must align")
    if len(x) < 2:
        raise EmptyInput("spearman needs >= 2 points")
    rx = average_ranks(x) - (len(x) + 1) / 2.0
    ry = average_ranks(y) - (len(y) + 1) / 2.0
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0:
        return 0.0
    return float(np.sum(rx * ry) / denom)


# --- analysis of variance ---------------------------------------------------

def _as_groups(groups, minimum_size: int):
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise EmptyInput("need >= 2 groups")
    for g in arrays:
        if len(g) < minimum_size:
            raise EmptyInput(f"every group needs >= {minimum_size} samples")
        if not np.all(np.isfinite(g)):
            raise NonFiniteValue("group samples must be finite")
    return arrays


def anova_oneway(groups) -> tuple[float, float]:
    """Classical one-way F test; p from the regularized incomplete beta."""
    arrays = _as_groups(groups, 2)
    n_total = sum(len(g) for g in arrays)
    k = len(arrays)
    grand = sum(float(np.sum(g)) for g in arrays) / n_total
    ss_between = sum(len(g) * (float(np.mean(g)) - grand) ** 2
                     for g in arrays)
    ss_within = sum(float(np.sum((g - np.mean(g)) ** 2)) for g in arrays)
    df1 = k - 1
    df2 = n_total - k
    if ss_within == 0.0:
        if ss_between <= 1e-30:
            raise DegenerateGroups(
                "all groups constant with equal means: F undefined")
        return float("inf"), 0.0
    f_stat = (ss_between / df1) / (ss_within / df2)
    p = float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f_stat)))
    return float(f_stat), p


def welch_t(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    v1 = float(np.var(a, ddof=1))
    v2 = float(np.var(b, ddof=1))
    se_sq = v1 / n1 + v2 / n2
    mean_diff = float(np.mean(a) - np.mean(b))
    if se_sq == 0.0:
        return (0.0, 1.0) if mean_diff == 0.0 else (float("inf"), 0.0)
    t = mean_diff / np.sqrt(se_sq)
    df = se_sq ** 2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), p


@dataclass(frozen=True)
class PairTest:
    group_a: int
    group_b: int
    statistic: float
    raw_p: float
    corrected_p: float
    significant: bool


def posthoc_pairwise(groups, alpha: float = 0.05) -> list:
    """Welch t-test on every pair, Bonferroni-corrected."""
    arrays = _as_groups(groups, 2)
    pairs = [(i, j) for i in range(len(arrays))
             for j in range(i + 1, len(arrays))]
    table = []
    for i, j in pairs:
        t, raw = welch_t(arrays[i], arrays[j])
        corrected = min(1.0, raw * len(pairs))
        table.append(PairTest(group_a=i, group_b=j, statistic=t,
                              raw_p=raw, corrected_p=corrected,
                              significant=corrected < alpha))
    return table


def compare_groups(named_groups: dict, alpha: float = 0.05) -> dict:
    """ANOVA + post-hoc over named groups; flags significance at alpha."""
    names = list(named_groups)
    arrays = [named_groups[n] for n in names]
    f_stat, p = anova_oneway(arrays)
    return {
        "groups": names,
        "means": {n: float(np.mean(named_groups[n])) for n in names},
        "F": f_stat,
        "p": p,
        "alpha": alpha,
        "significant": p < alpha,
        "posthoc": [dataclasses.asdict(t)
                    for t in posthoc_pairwise(arrays, alpha)],
    }


# --- exact t-SNE ------------------------------------------------------------

def _pairwise_sq(points: np.ndarray) -> np.ndarray:
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _conditional_row(distances: np.ndarray, log_perplexity: float,
                     tol: float = 1e-5, max_iter: int = 50) -> np.ndarray:
    """Binary-search the Gaussian precision until the row entropy matches
    log(perplexity); returns the conditional probabilities."""
    beta, lo, hi = 1.0, 0.0, np.inf
    probs = np.zeros_like(distances)
    for _ in range(max_iter):
        weights = np.exp(-distances * beta)
        total = float(weights.sum())
        if total <= 0.0:
            entropy = 0.0
            probs = np.zeros_like(distances)
        else:
            probs = weights / total
            entropy = np.log(total) + beta * float(distances @ probs)
        if abs(entropy - log_perplexity) < tol:
            break
        if entropy > log_perplexity:
            lo = beta
            beta = beta * 2.0 if not np.isfinite(hi) else 0.5 * (lo + hi)
        else:
            hi = beta
            beta = 0.5 * (lo + hi) if lo > 0.0 else beta / 2.0
    return probs


def joint_probabilities(points: np.ndarray,
                        perplexity: float) -> np.ndarray:
    """Symmetrized affinity matrix P with per-point bandwidths matched to
    the target perplexity."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    d2 = _pairwise_sq(points)
    p_cond = np.zeros((n, n))
    log_perp = np.log(perplexity)
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        p_cond[i, mask[i]] = _conditional_row(d2[i, mask[i]], log_perp)
    p_joint = (p_cond + p_cond.T) / (2.0 * n)
    return np.maximum(p_joint, 1e-12)


def tsne(points, perplexity: float = 30.0, iterations: int = 1000,
         seed: int = 0, learning_rate: float = 200.0,
         exaggeration: float = 12.0, exaggeration_iters: int = 250,
         momentum_switch: int = 250) -> tuple[np.ndarray, list]:
    """Exact t-SNE to 2-D: early exaggeration, then momentum descent.

    Returns the embedding and the per-iteration KL divergence against the
    un-exaggerated affinities.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise EmptyInput("t-SNE expects a nonempty [N, D] array")
    if not np.all(np.isfinite(points)):
        raise NonFiniteValue("t-SNE input contains NaN/Inf")
    n = len(points)
    if n < 3 * perplexity:
        raise PerplexityTooLarge(
            f"perplexity {perplexity} needs >= {int(np.ceil(3 * perplexity))}"
            f" points, got {n}")

    p_joint = joint_probabilities(points, perplexity)
    log_p = np.log(p_joint)
    rng = np.random.default_rng(seed)
    embedding = rng.normal(scale=1e-4, size=(n, 2))
    velocity = np.zeros_like(embedding)
    kl_history = []

    for step in range(iterations):
        d2 = _pairwise_sq(embedding)
        kernel = 1.0 / (1.0 + d2)
        np.fill_diagonal(kernel, 0.0)
        q = np.maximum(kernel / kernel.sum(), 1e-12)
        p_eff = p_joint * exaggeration if step < exaggeration_iters \
            else p_joint
        weights = (p_eff - q) * kernel
        grad = 4.0 * (weights.sum(axis=1)[:, None] * embedding
                      - weights @ embedding)
        momentum = 0.5 if step < momentum_switch else 0.8
        velocity = momentum * velocity - learning_rate * grad
        embedding = embedding + velocity
        embedding = embedding - embedding.mean(axis=0)
        kl_history.append(float(np.sum(p_joint * (log_p - np.log(q)))))
    return embedding, kl_history


# --- batch plumbing ---------------------------------------------------------

def batch_for_patients(batch: SegmentBatch, patients) -> SegmentBatch:
    wanted = set(patients)
    idx = np.asarray([i for i, p in enumerate(batch.patient_ids)
                      if p in wanted], dtype=np.intp)
    return batch.subset(idx) if len(idx) else _empty_like(batch)


def _empty_like(batch: SegmentBatch) -> SegmentBatch:
    shape = (0,) + batch.values.shape[1:]
    return SegmentBatch(values=np.zeros(shape), patient_ids=[],
                        stage=batch.stage,
                        labels=None if batch.labels is None
                        else np.zeros(0, dtype=np.int64),
                        sampling_rate=batch.sampling_rate)


def subsample_batch(batch: SegmentBatch, max_segments: int) -> SegmentBatch:
    """Budget segments across patients proportionally (largest remainder),
    picking evenly spaced segments within each patient's night so class
    balance and night coverage survive. Deterministic."""
    if max_segments < 1:
        raise EmptyInput("max_segments must be >= 1")
    if batch.n <= max_segments:
        return batch
    by_patient: dict = {}
    for i, pid in enumerate(batch.patient_ids):
        by_patient.setdefault(pid, []).append(i)
    pids = list(by_patient)
    exact = np.array([len(by_patient[p]) for p in pids], dtype=np.float64)
    exact *= max_segments / batch.n
    quotas = np.floor(exact).astype(int)
    fractional_order = np.argsort(-(exact - quotas), kind="mergesort")
    for k in fractional_order[:max_segments - int(quotas.sum())]:
        quotas[k] += 1
    keep: list[int] = []
    for pid, quota in zip(pids, quotas):
        own = by_patient[pid]
        if quota == 0:
            continue
        # floor(x + 0.5) is strictly increasing at spacing >= 1, so the
        # evenly spaced picks are always distinct (np.round is not: its
        # ties-to-even rule can map 1.5 and 2.5 to the same index)
        pick = np.floor(np.linspace(0, len(own) - 1, quota) + 0.5)
        keep.extend(own[j] for j in pick.astype(int))
    return batch.subset(np.asarray(sorted(keep), dtype=np.intp))


def _with_mask(batch: SegmentBatch, mask: np.ndarray) -> SegmentBatch:
    return SegmentBatch(values=batch.values, patient_ids=batch.patient_ids,
                        stage=batch.stage, labels=batch.labels,
                        label_mask=mask, sampling_rate=batch.sampling_rate)


def fold_batches(batch: SegmentBatch, fold: Fold):
    """Train/validation/test sub-batches for one fold; an empty validation
    bucket falls back to the training batch."""
    train = batch_for_patients(batch, fold.train)
    val = batch_for_patients(batch, fold.validation)
    test = batch_for_patients(batch, fold.test)
    if train.n == 0:
        raise EmptyInput(f"no training segments for stage {batch.stage}")
    if test.n == 0:
        raise EmptyInput(f"no test segments for stage {batch.stage}")
    if val.n == 0:
        val = train
    return train, val, test


# --- run matrix -------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """One run-matrix entry: which trainer to use and a per-cell segment
    budget (None = use everything)."""
    kind: str                       # "smate" | "xcm" | "hmm"
    config: object
    subsample: int | None = None

    def __post_init__(self):
        if self.kind not in ("smate", "xcm", "hmm"):
            raise ConfigValidation(f"unknown model kind {self.kind!r}")
        expected = {"smate": sm.SmateConfig, "xcm": xc.XcmConfig,
                    "hmm": hm.HmmFitSpec}[self.kind]
        if not isinstance(self.config, expected):
            raise ConfigValidation(
                f"model kind {self.kind!r} needs a {expected.__name__}")


@dataclass
class CellResult:
    model: str
    stage: str
    fold: int
    metrics: Metrics
    seconds: float
    config_hash: str


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)
    stat_tests: list = field(default_factory=list)

    def fold_accuracies(self, model: str, stage: str) -> list:
        return [c.metrics.accuracy for c in self.cells
                if c.model == model and c.stage == stage]

    def mean_accuracy(self, model: str, stage: str | None = None) -> float:
        accs = [c.metrics.accuracy for c in self.cells
                if c.model == model and (stage is None or c.stage == stage)]
        if not accs:
            raise EmptyInput(f"no cells for model {model!r}, stage {stage!r}")
        return float(np.mean(accs))

    def summary(self) -> list:
        seen = []
        for c in self.cells:
            if (c.model, c.stage) not in seen:
                seen.append((c.model, c.stage))
        rows = []
        for model, stage in seen:
            accs = self.fold_accuracies(model, stage)
            rows.append({"model": model, "stage": stage,
                         "folds": len(accs),
                         "mean_accuracy": float(np.mean(accs)),
                         "std_accuracy": float(np.std(accs, ddof=1))
                         if len(accs) > 1 else 0.0})
        return rows


def config_digest(spec: ModelSpec) -> str:
    doc = {"kind": spec.kind, "subsample": spec.subsample,
           "config": dataclasses.asdict(spec.config)}
    blob = json.dumps(doc, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _train_smate_cell(spec: ModelSpec, train: SegmentBatch,
                      val: SegmentBatch, test: SegmentBatch) -> Metrics:
    cfg = spec.config
    mask = sm.visible_label_mask(train.labels, train.patient_ids,
                                 cfg.label_fraction, cfg.seed)
    train = _with_mask(train, mask)
    model, _ = sm.train(train, val, cfg)
    sm.fit_head(model, train)
    predicted, scores = sm.predict(model, test.values)
    return metrics(test.labels, predicted, scores)


def _train_xcm_cell(spec: ModelSpec, train: SegmentBatch,
                    val: SegmentBatch, test: SegmentBatch) -> Metrics:
    model, _ = xc.xcm_train(train, val, spec.config)
    predicted, scores = xc.predict(model, test.values)
    return metrics(test.labels, predicted, scores)


def patient_sequences(batch: SegmentBatch):
    """Chronological per-patient feature sequences and one label each."""
    features = segment_features(batch)
    rows_by_patient: dict = {}
    label_by_patient: dict = {}
    for i, pid in enumerate(batch.patient_ids):
        rows_by_patient.setdefault(pid, []).append(i)
        label_by_patient.setdefault(pid, int(batch.labels[i]))
    pids = list(rows_by_patient)
    sequences = [features[rows_by_patient[p]] for p in pids]
    labels = np.asarray([label_by_patient[p] for p in pids])
    return pids, sequences, labels


def _train_hmm_cell(spec: ModelSpec, train: SegmentBatch,
                    val: SegmentBatch, test: SegmentBatch) -> Metrics:
    _, train_seqs, train_labels = patient_sequences(train)
    _, test_seqs, test_labels = patient_sequences(test)
    fitted = hm.baum_welch(train_seqs, spec.config).model
    desc_train = np.stack([hm.hmm_embed(fitted, s) for s in train_seqs])
    desc_test = np.stack([hm.hmm_embed(fitted, s) for s in test_seqs])
    predicted, scores = hm.prototype_classify(desc_train, train_labels,
                                              desc_test)
    return metrics(test_labels, predicted, scores)


_CELL_TRAINERS = {"smate": _train_smate_cell, "xcm": _train_xcm_cell,
                  "hmm": _train_hmm_cell}


def _stage_batch(stores, stage: str) -> SegmentBatch:
    if isinstance(stores, dict):
        batch = stores.get(stage)
        if batch is None:
            raise MissingStore(f"no segment store for stage {stage}")
        return batch
    return load_store_dir(stores, stage)


def run_cell(spec: ModelSpec, batch: SegmentBatch, fold: Fold) -> Metrics:
    train, val, test = fold_batches(batch, fold)
    if spec.subsample is not None:
        train = subsample_batch(train, spec.subsample)
    return _CELL_TRAINERS[spec.kind](spec, train, val, test)


def run_matrix(model_names, stages, plan: FoldPlan, stores,
               configs: dict) -> EvalReport:
    """Train and test every (model, stage, fold) cell."""
    report = EvalReport()
    for name in model_names:
        if name not in configs:
            raise ConfigValidation(f"no config given for model {name!r}")
        spec = configs[name]
        digest = config_digest(spec)
        for stage in stages:
            batch = _stage_batch(stores, stage)
            for fold_idx, fold in enumerate(plan.folds):
                started = time.perf_counter()
                try:
                    cell_metrics = run_cell(spec, batch, fold)
                except SomniumError as exc:
                    raise type(exc)(
                        f"cell ({name}, {stage}, fold {fold_idx}): "
                        f"{exc}") from exc
                report.cells.append(CellResult(
                    model=name, stage=stage, fold=fold_idx,
                    metrics=cell_metrics,
                    seconds=time.perf_counter() - started,
                    config_hash=digest))
    return report


# --- label-fraction sweep ---------------------------------------------------

def label_fraction_sweep(batch: SegmentBatch, plan: FoldPlan,
                         cfg, fractions,
                         subsample: int | None = None) -> list:
    """Train the encoder per (fraction, fold) with nested label masks and
    report test accuracy. Fraction 1.0 matches the supervised run-matrix
    cell exactly (same seed, same code path)."""
    fractions = list(fractions)
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ConfigValidation("fractions must lie in [0, 1]")
    if fractions != sorted(fractions):
        raise ConfigValidation("fractions must be ascending")
    rows = []
    for fold_idx, fold in enumerate(plan.folds):
        train, val, test = fold_batches(batch, fold)
        if subsample is not None:
            train = subsample_batch(train, subsample)
        for fraction in fractions:
            spec = ModelSpec(
                kind="smate",
                config=dataclasses.replace(cfg, label_fraction=fraction))
            cell_metrics = _train_smate_cell(spec, train, val, test)
            rows.append({"fraction": fraction, "fold": fold_idx,
                         "accuracy": cell_metrics.accuracy,
                         "macro_f1": cell_metrics.macro_f1})
    return rows


def sweep_summary(rows) -> dict:
    """fraction -> mean accuracy over folds."""
    by_fraction: dict = {}
    for row in rows:
        by_fraction.setdefault(row["fraction"], []).append(row["accuracy"])
    return {f: float(np.mean(v)) for f, v in sorted(by_fraction.items())}


# --- serialization ----------------------------------------------------------

def report_json(report: EvalReport) -> str:
    doc = {
        "cells": [{
            "model": c.model, "stage": c.stage, "fold": c.fold,
            "accuracy": c.metrics.accuracy,
            "macro_f1": c.metrics.macro_f1,
            "auc": c.metrics.auc,
            "roc_points": [list(p) for p in c.metrics.roc_points],
            "seconds": c.seconds,
            "config_hash": c.config_hash,
        } for c in report.cells],
        "aggregates": report.summary(),
        "stat_tests": report.stat_tests,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def report_from_json(text: str) -> EvalReport:
    """Inverse of report_json, so artifacts can be re-rendered from a
    saved report without rerunning any training."""
    try:
        doc = json.loads(text)
        cells = [CellResult(
            model=c["model"], stage=c["stage"], fold=c["fold"],
            metrics=Metrics(accuracy=c["accuracy"],
                            macro_f1=c["macro_f1"],
                            roc_points=[tuple(p) for p in c["roc_points"]],
                            auc=c["auc"]),
            seconds=c["seconds"], config_hash=c["config_hash"],
        ) for c in doc["cells"]]
        stat_tests = doc.get("stat_tests") or []
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SerializationError(f"not a valid report document: {exc}") \
            from exc
    return EvalReport(cells=cells, stat_tests=stat_tests)


def report_csv(report: EvalReport) -> str:
    """Flat per-cell metric rows."""
    lines = ["model,stage,fold,metric,value"]
    for c in report.cells:
        values = [("accuracy", c.metrics.accuracy),
                  ("macro_f1", c.metrics.macro_f1)]
        if c.metrics.auc is not None:
            values.append(("auc", c.metrics.auc))
        values.append(("seconds", c.seconds))
        for key, value in values:
            lines.append(f"{c.model},{c.stage},{c.fold},{key},{value!r}")
    return "\n".join(lines) + "\n"


def roc_csv(report: EvalReport) -> str:
    lines = ["model,stage,fold,fpr,tpr"]
    for c in report.cells:
        for fpr, tpr in c.metrics.roc_points:
            lines.append(f"{c.model},{c.stage},{c.fold},{fpr!r},{tpr!r}")
    return "\n".join(lines) + "\n"


def tsne_csv(coordinates: np.ndarray, labels) -> str:
    lines = ["x,y,label"]
    for (x, y), label in zip(np.asarray(coordinates), labels):
        lines.append(f"{float(x)!r},{float(y)!r},{label}")
    return "\n".join(lines) + "\n"


def deterministic_digest(report: EvalReport) -> str:
    """Hash of every reported number except wall-clock timings."""
    doc = json.loads(report_json(report))
    for cell in doc["cells"]:
        cell.pop("seconds", None)
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
