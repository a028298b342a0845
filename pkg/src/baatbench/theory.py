"""RBF kernel-regression model of sample-agnostic vs sample-specific poisoning.

The classifier is the normalized kernel smoother

    phi(q) = (sum_i K(q, x_i) onehot(y_i) + sum_j K(q, x'_j) onehot(y_t))
             / (sum_i K(q, x_i) + sum_j K(q, x'_j)),   K(a, b) = exp(-g ||a - b||^2)

trained on benign points plus additively triggered copies of selected benign
points. A paired construction shares benign points and victims and differs
only in whether the triggers are one shared ``t`` (agnostic) or one ``t_i``
per victim (specific).
"""
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .kernels import rbf_group_sums


class KernelUnderflowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class KernelInstance:
    benign_x: np.ndarray  # (N_b, d)
    benign_y: np.ndarray  # (N_b,)
    num_classes: int
    poison_indices: np.ndarray  # (N_p,) indices into the benign points
    triggers: np.ndarray  # (N_p, d) additive trigger of each poisoned point
    eval_trigger: np.ndarray  # (d,) trigger added to test points
    gamma_rbf: float
    trigger_mode: str = "agnostic"
    target_class: int = 1
    seed: int = 0

    @property
    def dim(self):
        return self.benign_x.shape[1]

    @property
    def poison_x(self):
        return self.benign_x[self.poison_indices] + self.triggers

    def points_and_groups(self):
        """All training points with group ids: benign class k -> k, poison -> K."""
        pts = np.concatenate([self.benign_x, self.poison_x])
        groups = np.concatenate([self.benign_y, np.full(len(self.poison_indices), self.num_classes)])
        return pts, groups


@dataclass(frozen=True)
class InstancePair:
    agnostic: KernelInstance
    specific: KernelInstance


@dataclass
class TheoremReport:
    mean_conf_agnostic: float
    mean_conf_specific: float
    gap: float
    gap_se: float
    lower_bound: float
    bound_negative_fraction: float
    num_queries: int
    seeds: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _group_sums(instance: KernelInstance, queries, log_space=True):
    pts, groups = instance.points_and_groups()
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != instance.dim:
        raise ValueError(f"query dimension {q.shape[1]} != instance dimension {instance.dim}")
    if instance.gamma_rbf <= 0:
        raise ValueError("gamma_rbf must be > 0")
    log_max, sums = rbf_group_sums(q, pts, groups, instance.num_classes + 1, instance.gamma_rbf)
    if not log_space:
        sums = sums * np.exp(log_max)[:, None]
        if np.any(sums.sum(axis=1) == 0):
            raise KernelUnderflowError(
                "all kernel weights underflow to 0; use a smaller gamma_rbf or log_space=True")
    if not np.all(np.isfinite(sums)):
        raise KernelUnderflowError("non-finite kernel sums")
    return sums


def kernel_predict(instance: KernelInstance, query, log_space=True):
    """Confidence vector over the K classes; a batch of queries gives (M, K)."""
    sums = _group_sums(instance, query, log_space)
    K = instance.num_classes
    num = sums[:, :K].copy()
    num[:, instance.target_class] += sums[:, K]
    total = sums[:, :K].sum(axis=1) + sums[:, K]
    out = num / total[:, None]
    return out[0] if np.ndim(query) == 1 else out


def target_confidence(instance: KernelInstance, query, log_space=True):
    """Target-class confidence in the even-split form.

    (sum over target-class benign + sum over poisons) / (sum over all benign +
    sum over poisons).
    """
    sums = _group_sums(instance, query, log_space)
    K, t = instance.num_classes, instance.target_class
    out = (sums[:, t] + sums[:, K]) / (sums[:, :K].sum(axis=1) + sums[:, K])
    return out[0] if np.ndim(query) == 1 else out


def build_paired_instances(N_b=200, N_p=20, K=10, d=64, gamma_rbf=0.01, trigger_scale=0.5, seed=0,
                           target_class=1, force_equal=False):
    """Agnostic/specific instances sharing benign points and victim indices.

    Benign points are uniform on [0, 1]^d with labels ``i % K``; triggers are
    uniform on [-scale, scale]^d. The benign set keeps the victims, so the
    even class split holds for both instances.
    """
    if N_b % K:
        raise ValueError("N_b must be divisible by K")
    if N_p > N_b:
        raise ValueError("N_p must not exceed N_b")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(N_b, d))
    y = np.arange(N_b) % K
    victims = np.sort(rng.choice(N_b, size=N_p, replace=False))
    t = rng.uniform(-trigger_scale, trigger_scale, size=d)
    t_i = rng.uniform(-trigger_scale, trigger_scale, size=(N_p, d))
    if force_equal:
        t_i = np.tile(t, (N_p, 1))
    agn = KernelInstance(x, y, K, victims, np.tile(t, (N_p, 1)), t, gamma_rbf, "agnostic", target_class, seed)
    spec = replace(agn, triggers=t_i, trigger_mode="specific")
    return InstancePair(agn, spec)


def per_query_gap(pair: InstancePair, queries):
    """phi_agnostic(x + t) - phi_specific(x + t) for test points x."""
    q = np.atleast_2d(queries) + pair.agnostic.eval_trigger
    return target_confidence(pair.agnostic, q) - target_confidence(pair.specific, q)


def confidence_gap(pair: InstancePair, num_queries=500, seed=0):
    """Monte Carlo estimate over x ~ U[0, 1]^d, evaluated at x + t."""
    if num_queries < 1:
        raise ValueError("num_queries must be >= 1")
    rng = np.random.default_rng([seed, 0xC0F])
    x = rng.uniform(0.0, 1.0, size=(num_queries, pair.agnostic.dim))
    q = x + pair.agnostic.eval_trigger
    a = target_confidence(pair.agnostic, q)
    s = target_confidence(pair.specific, q)
    g = a - s
    se = float(g.std(ddof=1) / np.sqrt(num_queries)) if num_queries > 1 else float("nan")
    bounds = np.array([lower_bound_term(pair, xi)["bound"] for xi in x[:min(num_queries, 200)]])
    return TheoremReport(float(a.mean()), float(s.mean()), float(g.mean()), se, float(bounds.mean()),
                         float(np.mean(bounds < 0)), num_queries, [pair.agnostic.seed, seed])


def lower_bound_term(pair: InstancePair, query):
    """Evaluate the kernel lower bound at one clean test point ``query``.

    With x'_t = x_t + t, C = sum_i K(x'_t, x_i) - sum_{i in target} K(x'_t, x_i),
    Dt_j = t - t_j and Dx_j = x_t - x_j over the victims j:

        bound = C * sum_j K(x_t, x_j) (1 - exp(-2 g Dt_j . Dx_j)) / (D_s * D_a)

    where D_s, D_a are the full kernel normalizers of the two instances at x'_t.
    ``exact`` is the same fraction with the exact numerator, equal to the
    per-query confidence gap.
    """
    agn, spe = pair.agnostic, pair.specific
    g = agn.gamma_rbf
    xt = np.asarray(query, dtype=np.float64)
    xpt = xt + agn.eval_trigger

    def k(a, b):
        return np.exp(-g * np.sum((a - b) ** 2, axis=-1))

    kb = k(xpt, agn.benign_x)
    C = kb.sum() - kb[agn.benign_y == agn.target_class].sum()
    victims = agn.benign_x[agn.poison_indices]
    ka = k(xpt, agn.poison_x)
    ks = k(xpt, spe.poison_x)
    D_a = ka.sum() + kb.sum()
    D_s = ks.sum() + kb.sum()
    dt = agn.eval_trigger - spe.triggers
    dx = xt - victims
    dtdx = np.sum(dt * dx, axis=1)
    terms = k(xt, victims) * (1.0 - np.exp(-2.0 * g * dtdx))
    denom = D_s * D_a
    return {
        "bound": float(C * terms.sum() / denom) if len(terms) else 0.0,
        "exact": float(C * (ka.sum() - ks.sum()) / denom) if len(terms) else 0.0,
        "C": float(C),
        "dt_dot_dx": dtdx,
        "terms": terms,
        "D_agnostic": float(D_a),
        "D_specific": float(D_s),
    }


def exhaustive_gap_oracle(pair: InstancePair, grid_resolution=200):
    """Midpoint-rule quadrature of the gap over [0, 1]^d, for d <= 2.

    Evaluates phi with plain dense sums (no log shift, no compensation) so it
    shares no code path with ``confidence_gap``. Returns ``(gap, error_estimate)``
    where the error estimate is the difference to the half-resolution rule.
    """
    d = pair.agnostic.dim
    if d > 2:
        raise ValueError("exhaustive oracle supports d <= 2 only")

    def quad(n):
        axis = (np.arange(n) + 0.5) / n
        grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), -1).reshape(-1, d)
        q = grid + pair.agnostic.eval_trigger
        vals = _dense_target_conf(pair.agnostic, q) - _dense_target_conf(pair.specific, q)
        return float(vals.mean())

    fine = quad(grid_resolution)
    coarse = quad(max(grid_resolution // 2, 1))
    return fine, abs(fine - coarse)


def _dense_target_conf(inst: KernelInstance, q):
    pts = np.concatenate([inst.benign_x, inst.poison_x])
    is_target = np.concatenate([inst.benign_y == inst.target_class, np.ones(len(inst.poison_indices), bool)])
    w = np.exp(-inst.gamma_rbf * ((q[:, None, :] - pts[None]) ** 2).sum(-1))
    return w[:, is_target].sum(1) / w.sum(1)


def theorem_sweep(seeds, num_queries=500, out_dir=None, **params):
    """Gap reports over seeds; failing seeds (gap < -3 SE) are written to ``out_dir``."""
    reports, failures = [], []
    for s in seeds:
        pair = build_paired_instances(seed=s, **params)
        r = confidence_gap(pair, num_queries, seed=s)
        reports.append(r)
        if r.gap < -3 * r.gap_se:
            failures.append({"seed": s, "params": params, "report": r.to_dict()})
    if out_dir is not None and failures:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "theorem_counterexamples.json", "w", encoding="utf-8") as f:
            json.dump(failures, f, indent=1)
    return reports, failures
