"""Variance-standardized simulation designs for additivity studies.

Data are generated as ``g(x-) + c*beta1*f(x+) + beta2*f(x+)*h(x-)`` plus noise
(continuous) or through a logistic link with ``g`` scaled by ``beta0``
(binary). The coefficients are solved so that the noise fraction ``alpha``,
the ``x+`` fraction ``delta`` and the interaction fraction ``gamma`` of the
variance hit prescribed targets.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from .additive_models import AdditiveConfig
from .data import BINARY, CONTINUOUS, CovariateSplit, Dataset
from .model_comparison import compare_additivity
from .sampler_continuous import BartConfig

NU_BINARY = 1.5 ** 2
DEFAULT_N_MC = 10 ** 6
MIN_N_MC = 10 ** 5
MC_BLOCK = 1 << 16
LOG10_3 = math.log10(3.0)


class InfeasibleDesign(ValueError):
    """Raised when no real solution meets the variance targets."""


# ---------------------------------------------------------------------------
# scenarios


def _g1(x):
    return 3 + 3 * x[:, 0] - 3 * x[:, 1] - 2 * x[:, 2]


def _h1(x):
    return -2 * x[:, 0] - 7 * x[:, 1] - x[:, 2] + 3 * x[:, 1] * x[:, 2]


def _g2(x):
    return 2 - 3 * x[:, 0] ** 2 - 3 * x[:, 1] ** 2 + 3 * x[:, 0] * x[:, 1]


def _h2(x):
    return -x[:, 0] + x[:, 1] - 2.5 * x[:, 0] * x[:, 1]


def _g3(x):
    return 3.5 - x[:, 0] + x[:, 1] + 2 * (x[:, 2] < 1)


def _h3(x):
    return x[:, 0] - 0.5 * x[:, 1] - 3 * (x[:, 2] < 1)


def _g4(x):
    return (10 * np.sin(np.pi * x[:, 0] * x[:, 1]) + 20 * (x[:, 2] - 0.5) ** 2
            + 10 * x[:, 3] + 5 * x[:, 4])


def _h4(x):
    return 2.3 * x[:, 0] - 3 * x[:, 1] * x[:, 3]


def _normal(rng, n, p):
    return rng.standard_normal((n, p))


def _uniform(lo, hi):
    def draw(rng, n, p):
        return rng.uniform(lo, hi, (n, p))
    return draw


@dataclass(frozen=True)
class Scenario:
    """Functions ``g``, ``h`` of ``x-`` with their covariate law; ``f`` of ``x+``.

    ``f(x+) = (X6 + X7)^2`` with independent standard normal ``X6, X7``, or
    ``f(x+) = A`` with ``A ~ Bernoulli(0.5)`` for treatment designs.
    """

    id: str
    p_minus: int
    g: Callable
    h: Callable
    draw_minus: Callable
    treatment: bool = False

    @property
    def name(self) -> str:
        return self.id + ("-T" if self.treatment else "")

    @property
    def p_plus(self) -> int:
        return 1 if self.treatment else 2

    def draw_plus(self, rng, n):
        if self.treatment:
            return (rng.random((n, 1)) < 0.5).astype(float)
        return rng.standard_normal((n, 2))

    def f(self, xp):
        if self.treatment:
            return xp[:, 0].astype(float)
        return (xp[:, 0] + xp[:, 1]) ** 2

    def column_names(self) -> tuple[str, ...]:
        minus = tuple(f"X{j + 1}" for j in range(self.p_minus))
        return minus + (("A",) if self.treatment else ("X6", "X7"))

    def split(self) -> CovariateSplit:
        return CovariateSplit(tuple(range(self.p_minus)),
                              tuple(range(self.p_minus, self.p_minus + self.p_plus)))

    @property
    def treatment_column(self) -> int:
        if not self.treatment:
            raise ValueError("not a treatment scenario")
        return self.p_minus

    def as_treatment(self) -> "Scenario":
        return Scenario(self.id, self.p_minus, self.g, self.h, self.draw_minus, True)


SCENARIOS = {
    "SC1": Scenario("SC1", 3, _g1, _h1, _normal),
    "SC2": Scenario("SC2", 2, _g2, _h2, _uniform(-3.0, 3.0)),
    "SC3": Scenario("SC3", 3, _g3, _h3, _normal),
    "SC4": Scenario("SC4", 5, _g4, _h4, _uniform(0.0, 1.0)),
}


def get_scenario(name: str, treatment: bool = False) -> Scenario:
    key = name.upper()
    if key.endswith("-T"):
        key, treatment = key[:-2], True
    if key not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    sc = SCENARIOS[key]
    return sc.as_treatment() if treatment else sc


# ---------------------------------------------------------------------------
# moments


@dataclass(frozen=True)
class DesignTargets:
    alpha: Optional[float] = 0.2
    delta: float = 0.45
    gamma: float = 0.0
    nu: float = NU_BINARY

    def check(self, kind: str) -> None:
        if not 0.0 <= self.gamma:
            raise InfeasibleDesign("gamma must be >= 0")
        if self.gamma > self.delta:
            raise InfeasibleDesign(f"gamma={self.gamma} exceeds delta={self.delta}")
        if not 0.0 <= self.delta < 1.0:
            raise InfeasibleDesign("delta must lie in [0, 1)")
        if kind == CONTINUOUS and (self.alpha is None or not 0.0 < self.alpha < 1.0):
            raise InfeasibleDesign("alpha must lie in (0, 1)")
        if kind == BINARY and not self.nu > 0:
            raise InfeasibleDesign("nu must be positive")


@dataclass(frozen=True)
class MomentSet:
    V_g: float
    V_f: float
    V_fh: float
    C_g_fh: float
    C_f_fh: float
    mean_g: float
    mean_f: float
    mean_h: float
    centered: bool
    mc_sample_size: int
    seed: int


def _draw_block(scenario: Scenario, seq: np.random.SeedSequence, n: int):
    s_minus, s_plus = seq.spawn(2)
    xm = scenario.draw_minus(np.random.default_rng(s_minus), n, scenario.p_minus)
    xp = scenario.draw_plus(np.random.default_rng(s_plus), n)
    return xm, xp


def estimate_moments(scenario: Scenario, n_mc: int = DEFAULT_N_MC, seed: int = 0,
                     centered: bool = False) -> MomentSet:
    """Monte Carlo moments of ``g``, ``f`` and ``f*h`` over independent covariate draws.

    Draws come in blocks of ``MC_BLOCK`` rows seeded from ``SeedSequence(seed)``,
    so a larger ``n_mc`` extends rather than replaces the sample. With
    ``centered=True`` the functions are centered by their sample means first.
    """
    if n_mc < MIN_N_MC:
        raise ValueError(f"n_mc must be >= {MIN_N_MC}")
    n_blocks = -(-n_mc // MC_BLOCK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    gs, fs, hs = [], [], []
    for b, child in enumerate(children):
        size = min(MC_BLOCK, n_mc - b * MC_BLOCK)
        xm, xp = _draw_block(scenario, child, size)
        gs.append(scenario.g(xm))
        hs.append(scenario.h(xm))
        fs.append(scenario.f(xp))
    g, f, h = (np.concatenate(v).astype(float) for v in (gs, fs, hs))
    mg, mf, mh = g.mean(), f.mean(), h.mean()
    if centered:
        g, f, h = g - mg, f - mf, h - mh
    fh = f * h

    def cov(a, b):
        return float(np.mean((a - a.mean()) * (b - b.mean())))

    return MomentSet(V_g=cov(g, g), V_f=cov(f, f), V_fh=cov(fh, fh), C_g_fh=cov(g, fh),
                     C_f_fh=cov(f, fh), mean_g=float(mg), mean_f=float(mf), mean_h=float(mh),
                     centered=centered, mc_sample_size=int(n_mc), seed=int(seed))


# ---------------------------------------------------------------------------
# solvers


@dataclass(frozen=True)
class DesignSolution:
    kind: str
    targets: DesignTargets
    beta1: float
    c: float
    beta2: float
    sigma: Optional[float]
    beta0: Optional[float]
    achieved: dict
    moments: MomentSet

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nu"] = self.targets.nu if self.kind == BINARY else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _positive_root(a, b, c, what):
    """Larger root of ``a x^2 + b x + c = 0``."""
    disc = b * b - 4.0 * a * c
    if disc < 0:
        raise InfeasibleDesign(f"no real solution for {what} (negative discriminant)")
    return (-b + math.sqrt(disc)) / (2.0 * a)


def _solve_c(beta1, beta2, m: MomentSet, x_var, int_var):
    """Scale ``c`` giving ``x+`` block variance ``x_var`` at interaction variance ``int_var``."""
    # V_f b^2 + 2 beta2 C_f_fh b + (int_var - x_var) = 0 with b = c * beta1
    qa, qb, qc = m.V_f, 2.0 * beta2 * m.C_f_fh, int_var - x_var
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0:
        raise InfeasibleDesign("no real solution for c (negative discriminant)")
    roots = [(-qb + s * math.sqrt(disc)) / (2.0 * qa) / beta1 for s in (1.0, -1.0)]
    positive = [r for r in roots if r > 0]
    if not positive:
        raise InfeasibleDesign("no positive solution for c")
    return min(positive, key=lambda r: abs(r - 1.0))


def _check_moments(m: MomentSet, targets: DesignTargets):
    if m.V_f <= 0 or m.V_g <= 0:
        raise InfeasibleDesign("var(f) and var(g) must be positive")
    if targets.gamma > 0 and m.V_fh <= 0:
        raise InfeasibleDesign("var(f*h) is zero but gamma > 0")


def signal_variances(m: MomentSet, beta0, beta1, c, beta2) -> tuple[float, float, float]:
    """(total signal, x+ block, interaction) variances from the moment expansion."""
    b = c * beta1
    plus = b * b * m.V_f + beta2 * beta2 * m.V_fh + 2.0 * b * beta2 * m.C_f_fh
    total = beta0 * beta0 * m.V_g + plus + 2.0 * beta0 * beta2 * m.C_g_fh
    return total, plus, beta2 * beta2 * m.V_fh


def _verify(achieved: dict, targets: DesignTargets, keys, tol=1e-6):
    for key in keys:
        want = getattr(targets, key)
        got = achieved[key]
        if abs(got - want) > tol * max(1.0, abs(want)):
            raise InfeasibleDesign(f"solver residual for {key}: {got} vs {want}")


def solve_continuous(targets: DesignTargets, moments: MomentSet) -> DesignSolution:
    """Solve ``(sigma, beta1, c, beta2)`` for the continuous design.

    ``beta1`` is pinned by the additive model (``c = 1``, ``beta2 = 0``) at the
    same ``delta``; the noise level follows from ``alpha`` and the solved
    signal variance.
    """
    targets.check(CONTINUOUS)
    m = moments
    _check_moments(m, targets)
    alpha, delta, gamma = targets.alpha, targets.delta, targets.gamma
    beta1 = math.sqrt(delta * m.V_g / ((1.0 - delta) * m.V_f))
    if gamma == 0.0:
        total = m.V_g / (1.0 - delta)
        beta2, c = 0.0, 1.0
    else:
        kappa = math.sqrt(gamma / m.V_fh)
        # total = V_g + delta*total + 2*beta2*C_g_fh with beta2 = kappa*sqrt(total)
        u = _positive_root(1.0 - delta, -2.0 * kappa * m.C_g_fh, -m.V_g, "the signal variance")
        if u <= 0:
            raise InfeasibleDesign("no positive signal variance")
        total = u * u
        beta2 = kappa * u
        c = _solve_c(beta1, beta2, m, delta * total, gamma * total)
    sigma = math.sqrt(alpha * total / (1.0 - alpha))
    tot, plus, inter = signal_variances(m, 1.0, beta1, c, beta2)
    achieved = {"alpha": sigma ** 2 / (tot + sigma ** 2), "delta": plus / tot,
                "gamma": inter / tot}
    _verify(achieved, targets, ("alpha", "delta", "gamma"))
    return DesignSolution(CONTINUOUS, targets, beta1, c, beta2, sigma, None, achieved, m)


def solve_binary(targets: DesignTargets, moments: MomentSet) -> DesignSolution:
    """Solve ``(beta0, beta1, c, beta2)`` so the linear predictor has variance ``nu``.

    ``beta1`` is fixed by the additive model, ``beta2`` by ``gamma``, ``c`` by
    ``delta`` and ``beta0`` by the total-variance constraint.
    """
    targets.check(BINARY)
    m = moments
    if not m.centered:
        raise ValueError("binary designs need moments of centered functions")
    _check_moments(m, targets)
    nu, delta, gamma = targets.nu, targets.delta, targets.gamma
    beta1 = math.sqrt(delta * nu / m.V_f)
    if gamma == 0.0:
        beta2, c = 0.0, 1.0
        beta0 = math.sqrt((1.0 - delta) * nu / m.V_g)
    else:
        beta2 = math.sqrt(gamma * nu / m.V_fh)
        c = _solve_c(beta1, beta2, m, delta * nu, gamma * nu)
        beta0 = _positive_root(m.V_g, 2.0 * beta2 * m.C_g_fh, -(1.0 - delta) * nu, "beta0")
        if beta0 <= 0:
            raise InfeasibleDesign("no positive solution for beta0")
    tot, plus, inter = signal_variances(m, beta0, beta1, c, beta2)
    achieved = {"nu": tot, "delta": plus / tot, "gamma": inter / tot}
    _verify(achieved, targets, ("nu", "delta", "gamma"))
    return DesignSolution(BINARY, targets, beta1, c, beta2, None, beta0, achieved, m)


def solve_design(scenario: Scenario, kind: str, targets: DesignTargets,
                 n_mc: int = DEFAULT_N_MC, seed: int = 0) -> DesignSolution:
    moments = estimate_moments(scenario, n_mc, seed, centered=(kind == BINARY))
    return (solve_binary if kind == BINARY else solve_continuous)(targets, moments)


# ---------------------------------------------------------------------------
# data generation


def _components(scenario: Scenario, solution: DesignSolution, xm, xp):
    g, f, h = scenario.g(xm), scenario.f(xp), scenario.h(xm)
    if solution.kind == BINARY:
        m = solution.moments
        g, f, h = g - m.mean_g, f - m.mean_f, h - m.mean_h
        g = solution.beta0 * g
    plus = solution.c * solution.beta1 * f
    inter = solution.beta2 * f * h
    return g, plus, inter


def generate_dataset(scenario: Scenario, solution: DesignSolution, n: int, seed: int,
                     kind: str | None = None) -> Dataset:
    """Draw ``n`` observations of the designed model."""
    kind = solution.kind if kind is None else kind
    if kind != solution.kind:
        raise ValueError(f"solution was solved for {solution.kind} data, not {kind}")
    s_minus, s_plus, s_noise = np.random.SeedSequence(seed).spawn(3)
    xm = scenario.draw_minus(np.random.default_rng(s_minus), n, scenario.p_minus)
    xp = scenario.draw_plus(np.random.default_rng(s_plus), n)
    g, plus, inter = _components(scenario, solution, xm, xp)
    rng = np.random.default_rng(s_noise)
    if kind == CONTINUOUS:
        y = g + plus + inter + solution.sigma * rng.standard_normal(n)
    else:
        eta = g + plus + inter
        prob = special.expit(eta)
        y = (rng.random(n) < prob).astype(float)
    return Dataset(y, np.column_stack([xm, xp]), scenario.column_names(), kind)


def empirical_ratios(scenario: Scenario, solution: DesignSolution, n: int = DEFAULT_N_MC,
                     seed: int = 1) -> dict:
    """Variance ratios of freshly generated components (``alpha`` uses the realized noise)."""
    s_minus, s_plus, s_noise = np.random.SeedSequence(seed).spawn(3)
    xm = scenario.draw_minus(np.random.default_rng(s_minus), n, scenario.p_minus)
    xp = scenario.draw_plus(np.random.default_rng(s_plus), n)
    g, plus, inter = _components(scenario, solution, xm, xp)
    signal = g + plus + inter
    v_sig = float(np.var(signal))
    out = {"delta": float(np.var(plus + inter)) / v_sig, "gamma": float(np.var(inter)) / v_sig}
    if solution.kind == CONTINUOUS:
        e = solution.sigma * np.random.default_rng(s_noise).standard_normal(n)
        y = signal + e
        out["alpha"] = float(np.var(e)) / float(np.var(y))
        out["var_y"] = float(np.var(y))
    else:
        out["nu"] = v_sig
    return out


# ---------------------------------------------------------------------------
# replication study

CSV_COLUMNS = ("scenario", "kind", "n", "gamma", "replicate", "lpml_add", "lpml_nonadd",
               "log10_psbf_correct_oriented", "r_ospe", "decision")
SUMMARY_COLUMNS = ("scenario", "kind", "n", "gamma", "replicates", "p_correct_psbf",
                   "p_indiff_psbf", "p_incorrect_psbf", "p_correct_ospe", "p_incorrect_ospe",
                   "median_log10_psbf")


@dataclass(frozen=True)
class StudyPlan:
    scenarios: Sequence[str] = ("SC1",)
    gammas: Sequence[float] = (0.0, 0.25, 0.44)
    ns: Sequence[int] = (500,)
    reps: int = 20
    kind: str = CONTINUOUS
    treatment: bool = False
    alpha: float = 0.2
    delta: float = 0.45
    seed: int = 0
    n_mc: int = DEFAULT_N_MC

    def cells(self):
        for si, sc in enumerate(self.scenarios):
            for gi, gamma in enumerate(self.gammas):
                for ni, n in enumerate(self.ns):
                    yield (si, gi, ni), sc, float(gamma), int(n)


@dataclass
class ReplicateResult:
    scenario: str
    kind: str
    n: int
    gamma: float
    replicate: int
    lpml_add: float
    lpml_nonadd: float
    log10_psbf_correct_oriented: float
    r_ospe: Optional[float]
    decision: str

    @property
    def ospe_decision(self) -> Optional[str]:
        if self.r_ospe is None:
            return None
        return ospe_decision(self.r_ospe, self.gamma)


def oriented_log10_psbf(lpml_nonadd: float, lpml_add: float, gamma: float) -> float:
    """log10 PsBF oriented so positive values favor the true model."""
    diff = lpml_nonadd - lpml_add if gamma > 0 else lpml_add - lpml_nonadd
    return diff / math.log(10.0)


def psbf_decision(log10_oriented: float) -> str:
    if log10_oriented > LOG10_3:
        return "correct"
    if log10_oriented < -LOG10_3:
        return "incorrect"
    return "indifferent"


def ospe_decision(r: float, gamma: float) -> str:
    if r == 1.0:
        return "indifferent"
    favors_additive = r > 1.0
    return "correct" if favors_additive == (gamma == 0) else "incorrect"


def replicate_seed(master: int, cell: tuple, rep: int) -> int:
    return int(np.random.SeedSequence([master, *cell, rep]).generate_state(1)[0])


def _run_replicate(task):
    (scenario, solution, n, rep, seed, config, additive_config, with_ospe, kind,
     cell_name, gamma) = task
    data = generate_dataset(scenario, solution, n, seed)
    cfg = config.replace(seed=seed)
    acfg = additive_config.replace(seed=seed)
    target = scenario.treatment_column if scenario.treatment else scenario.split()
    report = compare_additivity(data, target, cfg, acfg, with_ospe=with_ospe)
    oriented = oriented_log10_psbf(report.lpml_nonadditive, report.lpml_additive, gamma)
    return ReplicateResult(cell_name, kind, n, gamma, rep, report.lpml_additive,
                           report.lpml_nonadditive, oriented, report.r_ospe,
                           psbf_decision(oriented))


@dataclass
class StudyResult:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (cell description, message)
    solutions: dict = field(default_factory=dict)


def run_replication_study(plan: StudyPlan, config: BartConfig = BartConfig(),
                          additive_config: BartConfig | None = None, *,
                          with_ospe: bool = False, jobs: int = 1,
                          progress: Callable[[ReplicateResult], None] | None = None) -> StudyResult:
    """Generate, compare and classify ``plan.reps`` datasets per cell."""
    if additive_config is None:
        additive_config = AdditiveConfig.from_dict(config.to_dict())
    result = StudyResult()
    tasks = []
    for cell, sc_name, gamma, n in plan.cells():
        scenario = get_scenario(sc_name, plan.treatment)
        targets = DesignTargets(alpha=plan.alpha, delta=plan.delta, gamma=gamma)
        key = (scenario.name, plan.kind, gamma)
        try:
            if key not in result.solutions:
                result.solutions[key] = solve_design(scenario, plan.kind, targets, plan.n_mc,
                                                     plan.seed)
        except (InfeasibleDesign, ValueError) as exc:
            result.failures.append((f"{scenario.name} gamma={gamma} n={n}", str(exc)))
            continue
        for rep in range(1, plan.reps + 1):
            tasks.append((scenario, result.solutions[key], n, rep,
                          replicate_seed(plan.seed, cell, rep), config, additive_config,
                          with_ospe, plan.kind, scenario.name, gamma))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(_run_replicate, tasks):
                result.rows.append(row)
                if progress:
                    progress(row)
    else:
        for t in tasks:
            row = _run_replicate(t)
            result.rows.append(row)
            if progress:
                progress(row)
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def replicates_csv(rows: Sequence[ReplicateResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def summarize(rows: Sequence[ReplicateResult]) -> list[dict]:
    """Per-cell decision probabilities for both criteria."""
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.scenario, r.kind, r.n, r.gamma), []).append(r)
    out = []
    for (sc, kind, n, gamma), rs in cells.items():
        k = len(rs)
        dec = [r.decision for r in rs]
        od = [r.ospe_decision for r in rs if r.ospe_decision is not None]
        row = {"scenario": sc, "kind": kind, "n": n, "gamma": gamma, "replicates": k,
               "p_correct_psbf": dec.count("correct") / k,
               "p_indiff_psbf": dec.count("indifferent") / k,
               "p_incorrect_psbf": dec.count("incorrect") / k,
               "p_correct_ospe": od.count("correct") / len(od) if od else None,
               "p_incorrect_ospe": od.count("incorrect") / len(od) if od else None,
               "median_log10_psbf": float(np.median([r.log10_psbf_correct_oriented
                                                     for r in rs]))}
        out.append(row)
    return out


def summary_csv(summary: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in summary:
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()
