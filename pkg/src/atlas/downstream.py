"""Supervised downstream protocols over frozen patch embeddings.

Covers grouped cross-validation planning, linear probing with a
regularization grid, attention-pooled multiple-instance learning with
classification and Cox survival heads, and the metric suite (macro-F1,
AUROC/AUPRC, concordance index, Kaplan-Meier curves, two-group log-rank).
Every optimizer here is deterministic given its seed; metric functions
are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .align import AdamW
from .errors import (
    ArgumentError,
    DegenerateLabelError,
    EmptyBagError,
    FoldPlanError,
    UndefinedMetricError,
)
from .retrieval import macro_f1

PROBE_C_GRID = (0.1, 1.0, 10.0)
PROBE_GRAD_TOL = 1e-6
PROBE_MAX_ITER = 1000

MIL_HIDDEN_DIM = 256
MIL_ATTENTION_DIM = 128


# ---------------------------------------------------------------------------
# Fold planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    level: str
    assignments: dict  # group id -> fold index
    seed: int

    def groups_in_fold(self, fold):
        return sorted(g for g, f in self.assignments.items() if f == fold)


def make_folds(groups, level, k=5, seed=0, strata=None):
    """Assign whole groups to k folds, optionally balancing strata.

    Groups sharing a stratum are spread round-robin with a fold cursor
    that continues across strata, keeping both per-stratum and overall
    fold sizes within one group of each other.
    """
    groups = list(groups)
    if len(set(groups)) != len(groups):
        raise ArgumentError("group ids must be unique")
    if len(groups) < k:
        raise FoldPlanError(f"cannot build {k} folds from {len(groups)} groups")
    if level not in ("slice", "patient"):
        raise ArgumentError("level must be 'slice' or 'patient'")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    if strata is None:
        strata_map = {g: "" for g in groups}
    elif isinstance(strata, dict):
        strata_map = {g: strata[g] for g in groups}
    else:
        strata_map = dict(zip(groups, strata))

    assignments = {}
    cursor = 0
    for stratum in sorted(set(strata_map.values())):
        members = [g for g in groups if strata_map[g] == stratum]
        order = rng.permutation(len(members))
        for i in order:
            assignments[members[i]] = cursor % k
            cursor += 1
    return FoldPlan(k, level, assignments, seed)


# ---------------------------------------------------------------------------
# Linear probing
# ---------------------------------------------------------------------------

@dataclass
class LinearProbe:
    weights: np.ndarray  # (n_classes, dim)
    biases: np.ndarray  # (n_classes,)
    classes: tuple
    c: float
    converged: bool
    n_iter: int
    grad_norm: float

    def decision(self, x):
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.biases

    def predict(self, x):
        return [self.classes[i] for i in np.argmax(self.decision(x), axis=1)]


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def probe_objective(weights, biases, x, y_idx, c):
    """Summed cross-entropy plus (1/C) * 0.5 * ||W||^2 and its gradients."""
    logits = x @ weights.T + biases
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    ce = float(np.sum(log_z - logits[np.arange(len(y_idx)), y_idx]))
    loss = ce + 0.5 / c * float(np.sum(weights**2))
    p = _softmax_rows(logits)
    p[np.arange(len(y_idx)), y_idx] -= 1.0
    grad_w = p.T @ x + weights / c
    grad_b = p.sum(axis=0)
    return loss, grad_w, grad_b


def fit_probe(x, y, c=1.0, grad_tol=PROBE_GRAD_TOL, max_iter=PROBE_MAX_ITER):
    """Multinomial logistic regression by full-batch descent.

    Deterministic: zero initialization and a backtracking (Armijo) line
    search with a doubling warm start.  Stops at gradient norm <=
    ``grad_tol`` or ``max_iter`` iterations, whichever first; the
    convergence status is part of the result.
    """
    x = np.asarray(x, dtype=np.float64)
    classes = tuple(sorted(set(y)))
    if len(classes) < 2:
        raise DegenerateLabelError("probe needs at least two classes present")
    class_to_idx = {cls: i for i, cls in enumerate(classes)}
    y_idx = np.array([class_to_idx[v] for v in y])
    weights = np.zeros((len(classes), x.shape[1]))
    biases = np.zeros(len(classes))

    step = 1.0
    loss, grad_w, grad_b = probe_objective(weights, biases, x, y_idx, c)
    n_iter = 0
    grad_norm = math.sqrt(float(np.sum(grad_w**2) + np.sum(grad_b**2)))
    while grad_norm > grad_tol and n_iter < max_iter:
        step = min(step * 2.0, 1e6)
        g2 = grad_norm**2
        while True:
            w_new = weights - step * grad_w
            b_new = biases - step * grad_b
            loss_new, gw_new, gb_new = probe_objective(w_new, b_new, x, y_idx, c)
            if loss_new <= loss - 0.5 * step * g2 or step < 1e-18:
                break
            step *= 0.5
        weights, biases, loss = w_new, b_new, loss_new
        grad_w, grad_b = gw_new, gb_new
        grad_norm = math.sqrt(float(np.sum(grad_w**2) + np.sum(grad_b**2)))
        n_iter += 1
    return LinearProbe(weights, biases, classes, c,
                       converged=grad_norm <= grad_tol,
                       n_iter=n_iter, grad_norm=grad_norm)


def probe_grid(x, y, sample_groups, plan, grid=PROBE_C_GRID):
    """Grid search for the probe regularization strength.

    For each C, fits on the out-of-fold samples and scores macro-F1 on the
    held fold; the best mean F1 wins and ties go to the smaller C.
    Returns (best_c, {c: [per-fold F1]}).
    """
    x = np.asarray(x, dtype=np.float64)
    y = list(y)
    if not grid:
        raise ArgumentError("C grid must be non-empty")
    sample_folds = np.array([plan.assignments[g] for g in sample_groups])
    results = {}
    for c in grid:
        scores = []
        for fold in range(plan.k):
            train = sample_folds != fold
            held = ~train
            if not held.any() or len(set(np.asarray(y, dtype=object)[train])) < 2:
                continue
            probe = fit_probe(x[train], [y[i] for i in np.flatnonzero(train)], c=c)
            pred = probe.predict(x[held])
            scores.append(macro_f1([y[i] for i in np.flatnonzero(held)], pred))
        results[c] = scores
    best_c, best_mean = None, -np.inf
    for c in grid:
        mean = float(np.mean(results[c])) if results[c] else -np.inf
        if mean > best_mean:
            best_c, best_mean = c, mean
    return best_c, results


def fuse_concat(z_he, z_mif):
    """Channel-wise concatenation, H&E block first."""
    z_he = np.asarray(z_he, dtype=np.float64)
    z_mif = np.asarray(z_mif, dtype=np.float64)
    if z_he.shape[:-1] != z_mif.shape[:-1]:
        raise ArgumentError("both modalities must be present for every patch")
    return np.concatenate([z_he, z_mif], axis=-1)


# ---------------------------------------------------------------------------
# Attention MIL
# ---------------------------------------------------------------------------

class MilModel:
    """Instance encoder, gated-tanh attention pooling and a scalar head."""

    def __init__(self, input_dim, hidden_dim=MIL_HIDDEN_DIM,
                 attention_dim=MIL_ATTENTION_DIM, rng=None):
        rng = rng or np.random.default_rng(0)
        b_enc = 1.0 / np.sqrt(input_dim)
        b_att = 1.0 / np.sqrt(hidden_dim)
        self.params = {
            "w_enc": rng.uniform(-b_enc, b_enc, size=(input_dim, hidden_dim)),
            "b_enc": np.zeros(hidden_dim),
            "v_att": rng.uniform(-b_att, b_att, size=(attention_dim, hidden_dim)),
            "w_att": rng.uniform(-1.0 / np.sqrt(attention_dim), 1.0 / np.sqrt(attention_dim),
                                 size=attention_dim),
            "w_head": rng.uniform(-b_att, b_att, size=hidden_dim),
            "b_head": np.zeros(1),
        }

    def forward(self, instances, mask=None):
        """Pooled representation, attention weights and a backward cache."""
        x = np.asarray(instances, dtype=np.float64)
        if x.ndim != 2:
            raise ArgumentError("bag must be a 2-D instance matrix")
        if mask is None:
            mask = np.ones(x.shape[0], dtype=bool)
        else:
            mask = np.asarray(mask).astype(bool)
        if not mask.any():
            raise EmptyBagError("bag has no valid instances")
        p = self.params
        a1 = x @ p["w_enc"] + p["b_enc"]
        h = np.maximum(a1, 0.0)
        t_pre = h @ p["v_att"].T
        t_act = np.tanh(t_pre)
        scores = t_act @ p["w_att"]
        shifted = np.where(mask, scores, -np.inf)
        shifted = shifted - shifted[mask].max()
        e = np.where(mask, np.exp(shifted), 0.0)
        attn = e / e.sum()
        pooled = attn @ h
        cache = {"x": x, "mask": mask, "a1": a1, "h": h, "t_act": t_act,
                 "attn": attn, "pooled": pooled}
        return pooled, attn, cache

    def head_value(self, pooled):
        return float(pooled @ self.params["w_head"] + self.params["b_head"][0])

    def predict(self, instances, mask=None):
        pooled, attn, _ = self.forward(instances, mask)
        return self.head_value(pooled), attn

    def backward(self, d_out, cache, grads):
        """Accumulate parameter gradients for one bag given d loss/d output."""
        p = self.params
        h, attn, mask = cache["h"], cache["attn"], cache["mask"]
        grads["w_head"] += d_out * cache["pooled"]
        grads["b_head"] += np.array([d_out])
        d_pooled = d_out * p["w_head"]
        d_attn = h @ d_pooled
        d_h = np.outer(attn, d_pooled)
        d_scores = attn * (d_attn - float(attn @ d_attn))
        d_scores = np.where(mask, d_scores, 0.0)
        d_tact = np.outer(d_scores, p["w_att"])
        grads["w_att"] += cache["t_act"].T @ d_scores
        d_tpre = d_tact * (1.0 - cache["t_act"]**2)
        grads["v_att"] += d_tpre.T @ h
        d_h += d_tpre @ p["v_att"]
        d_a1 = d_h * (cache["a1"] > 0.0)
        grads["w_enc"] += cache["x"].T @ d_a1
        grads["b_enc"] += d_a1.sum(axis=0)

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def mil_forward(model, instances, mask=None):
    """Pooled vector and attention weights (padded positions contribute 0)."""
    pooled, attn, _ = model.forward(instances, mask)
    return pooled, attn


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def pos_weight_from_labels(labels):
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0:
        raise DegenerateLabelError("no positive labels in this fold")
    return n_neg / n_pos


def bce_weighted(logits, labels, pos_weight=1.0):
    """Mean binary cross-entropy with the positive term scaled."""
    if pos_weight <= 0.0:
        raise ArgumentError("pos_weight must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    log_sig = -np.logaddexp(0.0, -logits)
    log_one_minus = -np.logaddexp(0.0, logits)
    per_item = -(pos_weight * labels * log_sig + (1.0 - labels) * log_one_minus)
    return float(per_item.mean())


def bce_weighted_grad(logits, labels, pos_weight=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    sig = 1.0 / (1.0 + np.exp(-logits))
    return (-pos_weight * labels * (1.0 - sig) + (1.0 - labels) * sig) / len(logits)


def cox_loss(risks, times, events):
    """Normalized negative partial log-likelihood (Breslow risk sets).

    Stabilized with a max shift inside the log-sum over each risk set.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(int)
    n_events = int(events.sum())
    if n_events == 0:
        raise UndefinedMetricError("partial likelihood undefined with zero events")
    shift = risks.max()
    exp_r = np.exp(risks - shift)
    loss = 0.0
    for i in np.flatnonzero(events == 1):
        in_set = times >= times[i]
        loss -= risks[i] - (np.log(exp_r[in_set].sum()) + shift)
    return float(loss / n_events)


def cox_loss_grad(risks, times, events):
    """Gradient of cox_loss with respect to the risk scores."""
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(int)
    n_events = int(events.sum())
    if n_events == 0:
        raise UndefinedMetricError("partial likelihood undefined with zero events")
    shift = risks.max()
    exp_r = np.exp(risks - shift)
    grad = -events.astype(np.float64)
    for i in np.flatnonzero(events == 1):
        in_set = times >= times[i]
        grad[in_set] += exp_r[in_set] / exp_r[in_set].sum()
    return grad / n_events


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def c_index(risks, times, events):
    """Concordance over comparable pairs (T_i < T_j with E_i = 1).

    Risk ties count one half; pairs tied in time are not comparable.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(int)
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1)
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    concordant = float(np.sum(comparable & higher)) + 0.5 * float(np.sum(comparable & tied))
    return concordant / n_comparable


def km_curve(times, events):
    """Product-limit survival estimate; returns (times, survival).

    The curve starts at (0, 1) and steps down at event times only.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(int)
    if times.size == 0:
        raise ArgumentError("empty group")
    out_t, out_s = [0.0], [1.0]
    s = 1.0
    for t in np.unique(times):
        at_risk = int(np.sum(times >= t))
        d = int(np.sum((times == t) & (events == 1)))
        if d > 0:
            s *= 1.0 - d / at_risk
            out_t.append(float(t))
            out_s.append(s)
    return np.asarray(out_t), np.asarray(out_s)


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    p_value: float
    curves: dict  # group label -> (times, survival)
    status: str


def km_logrank(times, events, groups):
    """Two-group log-rank test plus per-group Kaplan-Meier curves."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(int)
    groups = np.asarray(groups)
    labels = sorted(set(groups.tolist()))
    if len(labels) != 2:
        raise ArgumentError("log-rank requires exactly two groups")
    if any(int(np.sum(groups == g)) == 0 for g in labels):
        raise ArgumentError("both groups must be non-empty")
    curves = {g: km_curve(times[groups == g], events[groups == g]) for g in labels}
    if events.sum() == 0:
        return LogRankResult(float("nan"), float("nan"), curves,
                             "undefined: no events observed")
    g0 = groups == labels[0]
    observed = 0.0
    expected = 0.0
    variance = 0.0
    for t in np.unique(times[events == 1]):
        at_risk = times >= t
        n = int(at_risk.sum())
        n0 = int((at_risk & g0).sum())
        d = int(((times == t) & (events == 1)).sum())
        d0 = int(((times == t) & (events == 1) & g0).sum())
        observed += d0
        expected += d * n0 / n
        if n > 1:
            variance += d * (n0 / n) * (1 - n0 / n) * (n - d) / (n - 1)
    if variance == 0.0:
        return LogRankResult(0.0, 1.0, curves, "degenerate: zero variance")
    chi2 = (observed - expected) ** 2 / variance
    p = math.erfc(math.sqrt(chi2 / 2.0))
    return LogRankResult(float(chi2), float(p), curves, "ok")


def median_risk_groups(risks):
    """High/low split at the median; ties go to the low-risk group."""
    risks = np.asarray(risks, dtype=np.float64)
    return np.where(risks > np.median(risks), "high", "low")


def auroc_auprc(scores, labels):
    """Trapezoid AUROC and average-precision AUPRC with tie pooling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("both classes must be present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # threshold group boundaries: last index of each tied block
    boundary = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    cut = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[cut]
    fp = (cut + 1) - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    auroc = float(np.trapezoid(tpr, fpr))
    precision = tp / (tp + fp)
    recall = tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    auprc = float(np.sum((recall - recall_prev) * precision))
    return auroc, auprc


# ---------------------------------------------------------------------------
# MIL training protocol
# ---------------------------------------------------------------------------

@dataclass
class MilConfig:
    hidden_dim: int = MIL_HIDDEN_DIM
    attention_dim: int = MIL_ATTENTION_DIM
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 150
    seed: int = 0


@dataclass
class FoldMetrics:
    fold: int
    metrics: dict
    status: str
    predictions: dict = field(default_factory=dict)  # bag index -> held-out score


def _normalize_bags(bags):
    out = []
    for bag in bags:
        bag = np.asarray(bag, dtype=np.float64)
        norms = np.linalg.norm(bag, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        out.append(bag / norms)
    return out


def _train_mil_model(bags, target_grad_fn, input_dim, config):
    """Full-batch MIL training; target_grad_fn maps outputs to d loss/d out."""
    rng = np.random.default_rng(config.seed)
    model = MilModel(input_dim, config.hidden_dim, config.attention_dim, rng=rng)
    optimizer = AdamW({"mil": model}, config.weight_decay,
                      decay_filter=lambda name: name in ("w_enc", "v_att"))
    for _ in range(config.epochs):
        outputs, caches = [], []
        for bag in bags:
            pooled, _, cache = model.forward(bag)
            outputs.append(model.head_value(pooled))
            caches.append(cache)
        d_outputs = target_grad_fn(np.asarray(outputs))
        grads = model.zero_grads()
        for d_out, cache in zip(d_outputs, caches):
            model.backward(float(d_out), cache, grads)
        optimizer.step({"mil": model}, {"mil": grads}, config.learning_rate)
    return model


def train_mil(bags, targets, bag_groups, plan, head="bce", config=None):
    """Per-fold MIL training and evaluation at the patient level.

    ``targets`` is a 0/1 label list for the classification head or a
    (times, events) pair for the survival head.  Folds whose training
    split lacks events (Cox) or positives (fallback pos_weight 1) are
    handled per the documented conventions; metrics that are undefined on
    a held fold are reported as NaN with a status note.
    """
    config = config or MilConfig()
    if plan.level != "patient":
        raise ArgumentError("MIL protocol requires a patient-level fold plan")
    bags = _normalize_bags(bags)
    input_dim = bags[0].shape[1]
    fold_of = np.array([plan.assignments[g] for g in bag_groups])
    results = []
    for fold in range(plan.k):
        train_idx = np.flatnonzero(fold_of != fold)
        held_idx = np.flatnonzero(fold_of == fold)
        if held_idx.size == 0 or train_idx.size == 0:
            results.append(FoldMetrics(fold, {}, "skipped: empty split"))
            continue
        train_bags = [bags[i] for i in train_idx]
        if head == "bce":
            labels = np.asarray(targets)[train_idx].astype(float)
            try:
                pos_weight = pos_weight_from_labels(labels)
                status = "ok"
            except DegenerateLabelError:
                pos_weight = 1.0
                status = "fallback pos_weight=1 (no positives in train)"

            def grad_fn(outputs, labels=labels, pos_weight=pos_weight):
                return bce_weighted_grad(outputs, labels, pos_weight)

            model = _train_mil_model(train_bags, grad_fn, input_dim, config)
            held_scores = np.array([model.predict(bags[i])[0] for i in held_idx])
            held_labels = np.asarray(targets)[held_idx].astype(int)
            predictions = {int(i): float(s) for i, s in zip(held_idx, held_scores)}
            try:
                auroc, auprc = auroc_auprc(held_scores, held_labels)
                results.append(FoldMetrics(fold, {"auroc": auroc, "auprc": auprc},
                                           status, predictions))
            except UndefinedMetricError as exc:
                results.append(FoldMetrics(
                    fold, {"auroc": float("nan"), "auprc": float("nan")}, str(exc),
                    predictions))
        elif head == "cox":
            times, events = targets
            times = np.asarray(times, dtype=np.float64)
            events = np.asarray(events).astype(int)
            if events[train_idx].sum() == 0:
                results.append(FoldMetrics(fold, {}, "skipped: no events in train"))
                continue

            def grad_fn(outputs, t=times[train_idx], e=events[train_idx]):
                return cox_loss_grad(outputs, t, e)

            model = _train_mil_model(train_bags, grad_fn, input_dim, config)
            held_risks = np.array([model.predict(bags[i])[0] for i in held_idx])
            predictions = {int(i): float(s) for i, s in zip(held_idx, held_risks)}
            try:
                ci = c_index(held_risks, times[held_idx], events[held_idx])
                results.append(FoldMetrics(fold, {"c_index": ci}, "ok", predictions))
            except UndefinedMetricError as exc:
                results.append(FoldMetrics(fold, {"c_index": float("nan")}, str(exc),
                                           predictions))
        else:
            raise ArgumentError("head must be 'bce' or 'cox'")
    return results


def summarize_folds(results, metric):
    values = [r.metrics[metric] for r in results
              if metric in r.metrics and not np.isnan(r.metrics[metric])]
    if not values:
        return float("nan"), float("nan")
    return float(np.mean(values)), float(np.std(values))
