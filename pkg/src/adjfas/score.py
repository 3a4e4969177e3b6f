"""Scoring covariate-adjustment hypotheses against trial summaries.

Each hypothesis states either that a specific covariate set Z makes the
adjustment formula Σ_z P(Y|x,z)P(z) equal the interventional distribution, or
that no such set exists among the measured variables. A hypothesis is scored
by the marginal likelihood it assigns to the observed per-arm outcome counts:
for a concrete Z that likelihood is a Monte-Carlo average over CPT draws from
the observational posterior; for the no-set hypothesis it has a closed form
under a flat prior on the interventional parameters. Totals combine the
per-arm log marginals with a uniform hypothesis prior, and the best set (or
the no-set verdict) is returned together with an improved interventional
estimate.

All arm likelihoods are sequence likelihoods: the multinomial coefficient is
omitted everywhere (it is constant across hypotheses and cancels in the
argmax), so log scores are comparable only within a single run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .bayesnet import (BayesNetPosterior, fit_posterior, learn_structure,
                       product_marginal, sample_parameter_batch)
from .data import Arm, CategoricalTable, ExperimentSummary, ValidationError, g2_independence_test

POOL_ENUMERATION_LIMIT = 16
TIE_TOL = 1e-9

_BATCH = "\x00batch"  # reserved pseudo-variable naming the Monte-Carlo axis


class EnumerationLimitError(RuntimeError):
    """Candidate pool too large to enumerate without a subset-size cap."""


class ScoringError(RuntimeError):
    """Every sampling iteration was degenerate for some hypothesis/arm."""


@dataclass(frozen=True)
class Hypothesis:
    """Either 'z is an adjustment set' or 'no adjustment set exists'.

    ``z`` is a frozenset of variable names, or None for the no-set hypothesis.
    """

    z: frozenset[str] | None

    @classmethod
    def adjustment(cls, vars) -> "Hypothesis":
        return cls(frozenset(vars))

    @property
    def is_not_exists(self) -> bool:
        return self.z is None

    def label(self) -> str:
        if self.z is None:
            return "NOT_EXISTS"
        return "{" + ",".join(sorted(self.z)) + "}"

    def sort_key(self) -> tuple:
        if self.z is None:
            return (1, 0, ())
        return (0, len(self.z), tuple(sorted(self.z)))


NOT_EXISTS = Hypothesis(None)


@dataclass(frozen=True)
class FasConfig:
    alpha: float = 0.05
    niters: int = 100
    ess: float = 1.0
    seed: int = 0
    max_subset_size: int | None = None
    max_parents: int = 4
    restarts: int = 5
    selection_tol: float = 1e-6
    max_solver_sweeps: int = 10000


@dataclass(frozen=True)
class ArmScore:
    """Per-arm result: log P(arm counts | data, hypothesis) and estimates.

    ``id_estimate`` is the interventional distribution for the observational
    population; ``trial_estimate`` is the predictive distribution in the trial
    population (identical unless the trial was selection-biased). Either may
    be None for the no-set hypothesis.
    """

    log_marginal: float
    id_estimate: tuple[float, ...] | None
    trial_estimate: tuple[float, ...] | None


@dataclass(frozen=True)
class HypothesisRecord:
    hypothesis: Hypothesis
    prior_log: float
    arm_scores: tuple[ArmScore, ...]

    @property
    def total(self) -> float:
        return self.prior_log + sum(a.log_marginal for a in self.arm_scores)


@dataclass
class FasResult:
    """Outcome of a full search: best hypothesis, all scores, diagnostics."""

    best: Hypothesis
    scores: dict[Hypothesis, float]
    estimate: dict[int, tuple[float, ...]] | None
    pool: tuple[str, ...]
    records: dict[Hypothesis, HypothesisRecord]
    population: str
    config: FasConfig

    def ranked(self) -> list[tuple[Hypothesis, float]]:
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0].sort_key()))

    def to_dict(self) -> dict:
        return {
            "population": self.population,
            "pool": list(self.pool),
            "best": _hypothesis_dict(self.best),
            "estimate": (None if self.estimate is None
                         else {str(x): list(p) for x, p in self.estimate.items()}),
            "hypotheses": [
                {
                    **_hypothesis_dict(h),
                    "total_log_score": self.scores[h],
                    "prior_log": self.records[h].prior_log,
                    "arm_log_marginals": [a.log_marginal for a in self.records[h].arm_scores],
                    "arm_id_estimates": [None if a.id_estimate is None else list(a.id_estimate)
                                         for a in self.records[h].arm_scores],
                }
                for h, _ in self.ranked()
            ],
            "config": {
                "alpha": self.config.alpha, "niters": self.config.niters,
                "ess": self.config.ess, "seed": self.config.seed,
                "max_subset_size": self.config.max_subset_size,
                "max_parents": self.config.max_parents, "restarts": self.config.restarts,
                "selection_tol": self.config.selection_tol,
            },
        }


def _hypothesis_dict(h: Hypothesis) -> dict:
    return {"not_exists": h.is_not_exists,
            "z": None if h.is_not_exists else sorted(h.z)}


# --- candidate pool and prior


def candidate_pool(table: CategoricalTable, x: str, y: str, alpha: float = 0.05) -> tuple[str, ...]:
    """Variables marginally dependent on both treatment and outcome.

    Membership is decided by the G² test rejecting independence at ``alpha``
    against each of x and y. Returned in the table's column order.
    """
    if x == y:
        raise ValueError("treatment and outcome must differ")
    table.index(x), table.index(y)
    pool = []
    for v in table.variable_names:
        if v in (x, y):
            continue
        if (g2_independence_test(table, v, x) < alpha
                and g2_independence_test(table, v, y) < alpha):
            pool.append(v)
    return tuple(pool)


def prior_log_prob(h: Hypothesis, pool: Sequence[str]) -> float:
    """Uniform prior over all 2^|pool| subsets plus the no-set hypothesis."""
    if not h.is_not_exists and not h.z <= set(pool):
        raise ValueError(f"hypothesis {h.label()} is not a subset of the candidate pool")
    return -math.log(2 ** len(pool) + 1)


# --- per-arm scoring


def score_not_exists(arm: Arm) -> float:
    """Closed-form log marginal of the arm counts under a flat simplex prior.

    The Dirichlet(1)-multinomial compound:
    log Γ(|Y|) + Σ_y log Γ(N^y + 1) − log Γ(N + |Y|).
    """
    k = len(arm.outcome_counts)
    counts = np.asarray(arm.outcome_counts, dtype=float)
    return float(gammaln(k) + gammaln(counts + 1.0).sum() - gammaln(arm.total + k))


def _predictive_batch(batched: Mapping[str, np.ndarray], parents: Mapping[str, tuple[str, ...]],
                      x: str, y: str, zvars: tuple[str, ...], x_value: int,
                      tilts: Mapping[str, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Adjustment-formula predictive θ_{Y_x} for every draw in the batch.

    Returns (theta, degenerate): theta has shape (batch, |Y|); degenerate
    flags draws where some stratum (x, z) has probability zero while P(z) > 0,
    making the conditional undefined. With ``tilts`` the computation runs in
    the reweighted population (conditioning on inclusion), i.e. all three
    ingredients become P(·|S=1).
    """
    factors = [((_BATCH, *parents[v], v), batched[v]) for v in batched]
    if tilts:
        factors += [((v,), np.asarray(t, dtype=float)) for v, t in tilts.items()]
    keep = (_BATCH, y, x, *zvars)
    joint = product_marginal(factors, keep)

    pz = joint.sum(axis=(1, 2))  # (batch, *z)
    if tilts:
        qtot = pz.sum(axis=tuple(range(1, pz.ndim))) if zvars else pz
        if not (qtot > 0).all():
            raise ScoringError("selection weights annihilate the whole distribution")
        pz = pz / qtot.reshape((-1,) + (1,) * (pz.ndim - 1)) if zvars else pz / qtot
    sliced = np.take(joint, x_value, axis=2)  # (batch, |Y|, *z)
    denom = sliced.sum(axis=1)                # (batch, *z)
    safe = np.where(denom > 0, denom, 1.0)
    cond = np.where(denom[:, None] > 0, sliced / safe[:, None], 0.0)
    if zvars:
        theta = (cond * pz[:, None]).sum(axis=tuple(range(2, 2 + len(zvars))))
        degenerate = ((denom == 0) & (pz > 0)).any(axis=tuple(range(1, 1 + len(zvars))))
    else:
        theta = cond * pz[:, None]
        degenerate = (denom == 0) & (pz > 0)
    return theta, degenerate


def _loglik(theta: np.ndarray, counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    pos = counts > 0
    if not pos.any():
        return np.zeros(theta.shape[0])
    sub = theta[:, pos]
    with np.errstate(divide="ignore"):
        logs = np.where(sub > 0, np.log(np.where(sub > 0, sub, 1.0)), -np.inf)
    return logs @ counts[pos]


def _arm_score_from_batch(batched, parents, x, y, zvars, arm: Arm, niters: int,
                          tilts=None) -> ArmScore:
    theta_trial, degen_trial = _predictive_batch(batched, parents, x, y, zvars, arm.x_value,
                                                 tilts=tilts)
    if degen_trial.all():
        raise ScoringError(
            f"every sampling iteration degenerate for arm x={arm.x_value}, z={sorted(zvars)}")
    ll = _loglik(theta_trial, arm.outcome_counts)
    ll = np.where(degen_trial, -np.inf, ll)
    log_marginal = float(logsumexp(ll) - math.log(niters))

    if tilts:
        theta_id, degen_id = _predictive_batch(batched, parents, x, y, zvars, arm.x_value)
        if degen_id.all():
            raise ScoringError(
                f"every sampling iteration degenerate for arm x={arm.x_value}, z={sorted(zvars)}")
    else:
        theta_id, degen_id = theta_trial, degen_trial
    id_estimate = tuple(theta_id[~degen_id].mean(axis=0).tolist())
    trial_estimate = tuple(theta_trial[~degen_trial].mean(axis=0).tolist())
    return ArmScore(log_marginal, id_estimate, trial_estimate)


def score_exp_arm(x: str, y: str, z: Sequence[str], post: BayesNetPosterior, arm: Arm,
                  niters: int, rng: np.random.Generator | int | None,
                  tilts: Mapping[str, np.ndarray] | None = None) -> ArmScore:
    """Monte-Carlo marginal likelihood of one arm under the hypothesis 'z adjusts'.

    Per draw from the posterior: compute θ_{Y|x,z} and θ_z exactly, combine
    through the adjustment formula into θ_{Y_x}, and weigh the arm counts by
    ∏_y θ_{y_x}^{N^y}. The log marginal is logsumexp over draws minus
    log(niters); the estimate is the mean predictive over non-degenerate
    draws.
    """
    if niters < 1:
        raise ValueError("niters must be >= 1")
    nodes = set(post.dag.nodes)
    missing = (set(z) | {x, y}) - nodes
    if missing:
        raise ValueError(f"variables not in the network: {sorted(missing)}")
    if not 0 <= arm.x_value < post.cardinalities[x]:
        raise ValidationError(f"arm x value {arm.x_value} outside cardinality of {x!r}")
    rng = np.random.default_rng(rng)
    batched = sample_parameter_batch(post, rng, niters)
    zvars = tuple(v for v in post.dag.nodes if v in set(z))
    return _arm_score_from_batch(batched, post.parents, x, y, zvars, arm, niters, tilts=tilts)


# --- hypothesis enumeration and the search itself


def enumerate_hypotheses(pool: Sequence[str], max_subset_size: int | None = None) -> list[Hypothesis]:
    """All subset hypotheses in (size, lexicographic) order, then the no-set one."""
    if max_subset_size is None and len(pool) > POOL_ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f"candidate pool has {len(pool)} variables "
            f"(2^{len(pool)} subsets); set max_subset_size to proceed")
    names = sorted(pool)
    top = len(names) if max_subset_size is None else min(max_subset_size, len(names))
    hyps = [Hypothesis.adjustment(c) for size in range(top + 1)
            for c in combinations(names, size)]
    hyps.append(NOT_EXISTS)
    return hyps


@dataclass
class PreparedScoring:
    """Pool, restricted table and fitted posterior shared by every hypothesis."""

    table: CategoricalTable
    exp: ExperimentSummary
    pool: tuple[str, ...]
    sub: CategoricalTable
    post: BayesNetPosterior


def prepare_scoring(table: CategoricalTable, exp: ExperimentSummary, config: FasConfig,
                    extra_nodes: Sequence[str] = ()) -> PreparedScoring:
    x, y = exp.treatment, exp.outcome
    if exp.n_outcomes != table.cardinality(y):
        raise ValidationError(
            f"experiment reports {exp.n_outcomes} outcome categories, "
            f"table has {table.cardinality(y)} for {y!r}")
    for arm in exp.arms:
        if not 0 <= arm.x_value < table.cardinality(x):
            raise ValidationError(f"arm x value {arm.x_value} outside cardinality of {x!r}")
    pool = candidate_pool(table, x, y, config.alpha)
    enumerate_hypotheses(pool, config.max_subset_size)  # enforce the enumeration guard early
    keep = set(pool) | {x, y} | set(extra_nodes)
    sub = table.restrict(keep)
    learn_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    dag = learn_structure(sub, ess=config.ess, max_parents=config.max_parents,
                          restarts=config.restarts, rng=learn_rng)
    post = fit_posterior(dag, sub, config.ess)
    return PreparedScoring(table=table, exp=exp, pool=pool, sub=sub, post=post)


def _empirical(arm: Arm) -> tuple[float, ...]:
    if arm.total == 0:
        k = len(arm.outcome_counts)
        return tuple([1.0 / k] * k)
    return tuple(c / arm.total for c in arm.outcome_counts)


def score_hypotheses(prep: PreparedScoring, config: FasConfig,
                     tilts: Mapping[str, np.ndarray] | None = None,
                     hypotheses: Sequence[Hypothesis] | None = None
                     ) -> dict[Hypothesis, HypothesisRecord]:
    """Score every hypothesis over every arm.

    One parameter batch is drawn per arm (seed derived from (seed, arm)) and
    shared by every hypothesis: common random numbers make the score
    differences between near-equivalent hypotheses reflect their true gap
    instead of independent Monte-Carlo noise, and results stay
    schedule-independent under any parallel execution.
    """
    exp, post = prep.exp, prep.post
    x, y = exp.treatment, exp.outcome
    all_hyps = set(enumerate_hypotheses(prep.pool, config.max_subset_size))
    if hypotheses is None:
        hypotheses = sorted(all_hyps, key=Hypothesis.sort_key)
    selected_pop = tilts is not None

    batches = []
    for a_idx in range(len(exp.arms)):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1, a_idx)))
        batches.append(sample_parameter_batch(post, rng, config.niters))

    records = {}
    for h in hypotheses:
        if h not in all_hyps:
            raise ValueError(f"hypothesis {h.label()} outside the enumerated space")
        prior = prior_log_prob(h, prep.pool)
        arm_scores = []
        for a_idx, arm in enumerate(exp.arms):
            if h.is_not_exists:
                arm_scores.append(ArmScore(
                    log_marginal=score_not_exists(arm),
                    id_estimate=None if selected_pop else _empirical(arm),
                    trial_estimate=None))
            else:
                zvars = tuple(v for v in post.dag.nodes if v in h.z)
                arm_scores.append(_arm_score_from_batch(
                    batches[a_idx], post.parents, x, y, zvars, arm, config.niters, tilts=tilts))
        records[h] = HypothesisRecord(h, prior, tuple(arm_scores))
    return records


def pick_best(records: Mapping[Hypothesis, HypothesisRecord]) -> Hypothesis:
    """Highest total score; ties within 1e-9 go to smaller sets, then lexicographic."""
    totals = {h: r.total for h, r in records.items()}
    m = max(totals.values())
    ties = [h for h, t in totals.items() if t >= m - TIE_TOL]
    return min(ties, key=Hypothesis.sort_key)


def _assemble(prep: PreparedScoring, records, config: FasConfig, population: str) -> FasResult:
    best = pick_best(records)
    rec = records[best]
    if best.is_not_exists and population == "selected":
        estimate = None
    else:
        estimate = {arm.x_value: score.id_estimate
                    for arm, score in zip(prep.exp.arms, rec.arm_scores)}
    return FasResult(
        best=best,
        scores={h: r.total for h, r in records.items()},
        estimate=estimate,
        pool=prep.pool,
        records=dict(records),
        population=population,
        config=config)


def find_adjustment_set(table: CategoricalTable, exp: ExperimentSummary,
                        config: FasConfig | None = None) -> FasResult:
    """Search all candidate subsets plus the no-set hypothesis; return the best.

    Expects a trial drawn from the same population as the table (the
    selection-aware variant lives in the selection module). The estimate is
    the posterior-mean adjusted distribution of the winning set, or the raw
    per-arm frequencies when no set wins.
    """
    config = config or FasConfig()
    if exp.population != "same":
        raise ValidationError(
            "experiment flagged 'selected'; use the selection-aware search")
    prep = prepare_scoring(table, exp, config)
    records = score_hypotheses(prep, config)
    return _assemble(prep, records, config, population="same")


def kl_divergences(exp: ExperimentSummary,
                   records: Mapping[Hypothesis, HypothesisRecord]) -> dict[Hypothesis, float]:
    """Σ over arms of KL(empirical arm distribution ‖ predicted trial distribution)."""
    out = {}
    for h, rec in records.items():
        if h.is_not_exists:
            continue
        kl = 0.0
        for arm, score in zip(exp.arms, rec.arm_scores):
            pred = np.asarray(score.trial_estimate, dtype=float)
            for c, q in zip(arm.outcome_counts, pred):
                if c == 0 or arm.total == 0:
                    continue
                p = c / arm.total
                kl += p * (math.log(p) - (math.log(q) if q > 0 else -math.inf))
        out[h] = kl
    return out


def pick_min_kl(exp: ExperimentSummary,
                records: Mapping[Hypothesis, HypothesisRecord]) -> Hypothesis:
    kls = kl_divergences(exp, records)
    m = min(kls.values())
    ties = [h for h, v in kls.items() if v <= m + TIE_TOL]
    return min(ties, key=Hypothesis.sort_key)


def kl_select(table: CategoricalTable, exp: ExperimentSummary,
              config: FasConfig | None = None) -> Hypothesis:
    """Baseline: the subset whose predicted distribution is closest to the trial
    arms in KL divergence. By construction it can never return the no-set
    hypothesis.
    """
    config = config or FasConfig()
    if exp.population != "same":
        raise ValidationError(
            "experiment flagged 'selected'; use the selection-aware search")
    prep = prepare_scoring(table, exp, config)
    records = score_hypotheses(prep, config)
    return pick_min_kl(exp, records)
