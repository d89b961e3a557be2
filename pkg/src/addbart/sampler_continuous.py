"""Single-BART Gibbs sampler for continuous responses, posterior draw archives and prediction."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

from . import _gibbs
from .data import BINARY, CONTINUOUS, CovariateSplit, DataError, Dataset

SINGLE = "single"
TWO_BART = "two_bart"
TREATMENT = "treatment"
MODELS = (SINGLE, TWO_BART, TREATMENT)

LAMBDA_FLOOR = 1e-12  # prior scale used when the response has zero spread


@dataclass(frozen=True)
class BartConfig:
    """Prior and chain settings shared by all samplers."""

    m: int = 200
    k: float = 2.0
    nu: float = 3.0
    lambda_: Optional[float] = None  # None: calibrate from the data with default_lambda
    q: float = 0.9
    burn_in: int = 1000
    draws: int = 1000
    thin: int = 1
    seed: int = 0
    base: float = 0.95
    power: float = 2.0
    max_cuts: int = 100
    max_depth: int = 10
    move_probs: tuple = (0.25, 0.25, 0.5)
    keep_trees: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.lambda_ is not None and self.lambda_ <= 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.draws < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("need draws >= 1, thin >= 1, burn_in >= 0")
        if not 0.0 <= self.base < 1.0 or self.power < 0:
            raise ValueError("tree prior needs 0 <= base < 1 and power >= 0")
        if self.max_depth < 0 or self.max_cuts < 1:
            raise ValueError("max_depth must be >= 0 and max_cuts >= 1")
        mp = tuple(float(v) for v in self.move_probs)
        if len(mp) != 3 or min(mp) < 0 or mp[0] <= 0:
            raise ValueError("move_probs must be three nonnegative weights with grow > 0")
        object.__setattr__(self, "move_probs", mp)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["move_probs"] = list(d["move_probs"])
        return d

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "move_probs" in kw:
            kw["move_probs"] = tuple(kw["move_probs"])
        return cls(**kw)


def default_lambda(y, nu: float = 3.0, q: float = 0.9) -> float:
    """Scale ``lambda`` of the ``nu * lambda / chi2_nu`` prior with ``P(sigma < sd(y)) = q``."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 2:
        raise ValueError("need at least two responses")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    sd = float(np.std(y, ddof=1))
    if sd == 0.0:
        raise ValueError("response is constant (sd = 0); lambda cannot be calibrated")
    # sigma < sd  <=>  chi2_nu > nu * lambda / sd^2
    return sd * sd * float(stats.chi2.ppf(1.0 - q, nu)) / nu


@dataclass(eq=False)
class ModelFit:
    """Posterior draws of one fitted model.

    ``fit`` holds per-draw in-sample fits: the mean response for continuous
    models, the logit ``f(x)`` for binary ones. ``loglik[s, i]`` is
    ``log p(y_i | theta_s)``.
    """

    model: str
    response_kind: str
    config: dict
    fit: np.ndarray
    loglik: np.ndarray
    column_names: tuple = ()
    sigma2: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    components: dict = field(default_factory=dict)
    test_fit: Optional[np.ndarray] = None
    trees: Optional[dict] = None
    acceptance: dict = field(default_factory=dict)
    shift: float = 0.0
    scale: float = 1.0
    split: Optional[CovariateSplit] = None
    treatment_column: Optional[int] = None

    @property
    def n_draws(self) -> int:
        return self.fit.shape[0]

    @property
    def n(self) -> int:
        return self.fit.shape[1]

    @property
    def probabilities(self) -> np.ndarray:
        if self.response_kind != BINARY:
            raise ValueError("probabilities are defined for binary fits only")
        return logistic_cdf(self.fit)

    def posterior_mean(self) -> np.ndarray:
        """Posterior mean of ``E(Y | x)`` at the training rows."""
        if self.response_kind == BINARY:
            return self.probabilities.mean(axis=0)
        return self.fit.mean(axis=0)

    def test_mean(self) -> np.ndarray:
        if self.test_fit is None:
            raise ValueError("fit carries no held-out predictions")
        if self.response_kind == BINARY:
            return logistic_cdf(self.test_fit).mean(axis=0)
        return self.test_fit.mean(axis=0)

    def likelihood(self) -> np.ndarray:
        return np.exp(self.loglik)

    def save(self, path) -> None:
        save_fit(self, path)


class AdditiveFit(ModelFit):
    """Fit of a two-component or treatment model; ``components`` holds per-draw pieces."""

    def centered_components(self) -> dict:
        """Component fits with each draw's in-sample mean removed, the sum restored to the first."""
        out = {}
        names = list(self.components)
        total_shift = np.zeros((self.n_draws, 1))
        for name in names:
            c = self.components[name]
            mu = c.mean(axis=1, keepdims=True)
            out[name] = c - mu
            total_shift += mu
        out[names[0]] = out[names[0]] + total_shift
        return out


def logistic_cdf(f):
    return special.expit(np.asarray(f, dtype=float))


def leaf_sd(kind: str, k: float, total_trees: int) -> float:
    """Leaf prior scale giving the summed fit prior sd ``c / k`` (c = 0.5 or 3)."""
    c = 3.0 if kind == BINARY else 0.5
    return c / (k * math.sqrt(total_trees))


def _response_transform(y) -> tuple[float, float]:
    lo, hi = float(np.min(y)), float(np.max(y))
    span = hi - lo
    return 0.5 * (lo + hi), (span if span > 0 else 1.0)


def run_model(data: Dataset, config: BartConfig, model: str, block_spec: Sequence[tuple],
              *, treatment_column: int | None = None, treatment_prior=(0.0, None),
              split: CovariateSplit | None = None, x_test=None, monitor=None) -> ModelFit:
    """Fit ``data`` with the given blocks ``(name, columns, n_trees, leaf_sd)``."""
    if data.n < 2:
        raise DataError("need at least two observations")
    kind = data.response_kind
    cfg = config.to_dict()
    shift, scale = (0.0, 1.0) if kind == BINARY else _response_transform(data.y)
    lam = None
    if kind == CONTINUOUS:
        yt = (data.y - shift) / scale
        if config.lambda_ is not None:
            lam = config.lambda_ / (scale * scale)
        elif np.std(yt) == 0.0:
            lam = LAMBDA_FLOOR
        else:
            lam = default_lambda(yt, config.nu, config.q)
        cfg["lambda_used"] = lam * scale * scale
    if x_test is not None:
        x_test = np.asarray(x_test, dtype=float)
        if x_test.ndim != 2 or x_test.shape[1] != data.p:
            raise DataError(f"test rows must have {data.p} covariates")
    blocks = [_gibbs.make_block(name, data.x, cols, m, sd, config.max_depth, config.max_cuts,
                                x_test) for name, cols, m, sd in block_spec]
    cfg["blocks"] = [{"name": name, "columns": [int(c) for c in cols], "trees": int(m),
                      "leaf_sd": float(sd)} for name, cols, m, sd in block_spec]
    treatment = None
    if treatment_column is not None:
        a = data.x[:, treatment_column]
        ssa = float(a @ a)
        if ssa == 0.0:
            raise DataError("treatment column is identically zero")
        mu0, var0 = treatment_prior
        if var0 is None:
            spread = math.pi ** 2 / 3.0 if kind == BINARY else float(np.var(data.y, ddof=1))
            var0 = 100.0 * (spread if spread > 0 else 1.0) / ssa
        if var0 <= 0:
            raise ValueError("treatment prior variance must be positive")
        cfg["treatment_prior_mean"] = float(mu0)
        cfg["treatment_prior_var_used"] = float(var0)
        treatment = _gibbs.Treatment(a, float(mu0), float(var0),
                                     None if x_test is None else x_test[:, treatment_column])
    rng = np.random.default_rng(config.seed)
    out = _gibbs.run_chain(data.y, kind, blocks, burn_in=config.burn_in, draws=config.draws,
                           thin=config.thin, rng=rng, move_probs=config.move_probs,
                           base=config.base, power=config.power, nu=config.nu,
                           lam=1.0 if lam is None else lam, shift=shift, scale=scale,
                           treatment=treatment, keep_trees=config.keep_trees, monitor=monitor)
    cls = ModelFit if model == SINGLE else AdditiveFit
    return cls(model=model, response_kind=kind, config=cfg, fit=out.fit, loglik=out.loglik,
               column_names=data.column_names, sigma2=out.sigma2, beta=out.beta,
               components=out.components if model != SINGLE else {}, test_fit=out.test_fit,
               trees=out.trees, acceptance=out.acceptance, shift=shift, scale=scale,
               split=split, treatment_column=treatment_column)


def fit_bart(data: Dataset, config: BartConfig = BartConfig(), *, x_test=None,
             monitor=None) -> ModelFit:
    """Single sum-of-trees model ``y = f(x) + e`` with ``e ~ N(0, sigma^2)``."""
    if data.response_kind != CONTINUOUS:
        raise DataError("fit_bart needs a continuous response; use fit_logit_bart")
    spec = [("f", list(range(data.p)), config.m, leaf_sd(CONTINUOUS, config.k, config.m))]
    return run_model(data, config, SINGLE, spec, x_test=x_test, monitor=monitor)


def predict(fit: ModelFit, x_new) -> np.ndarray:
    """Per-draw fits (``S x n_new``) at new covariate rows, on the scale of ``fit.fit``."""
    if fit.trees is None:
        raise ValueError("fit was run without keep_trees; no trees to predict from")
    x_new = np.asarray(x_new, dtype=float)
    p = len(fit.column_names)
    if x_new.size == 0:
        return np.empty((fit.n_draws, 0))
    if x_new.ndim == 1:
        x_new = x_new[None, :]
    if x_new.ndim != 2 or x_new.shape[1] != p:
        raise DataError(f"expected rows with {p} covariates, got shape {x_new.shape}")
    order = [b["name"] for b in fit.config["blocks"]]
    a_new = None if fit.treatment_column is None else x_new[:, fit.treatment_column]
    return _gibbs.archive_predict(fit.trees, order, x_new, fit.shift, fit.scale,
                                  fit.response_kind == BINARY, fit.config["max_depth"],
                                  fit.beta, a_new)


# ---------------------------------------------------------------------------
# archives

_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def _write_npz(path, arrays: dict) -> None:
    """``np.savez``-compatible archive with fixed member order and timestamps."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_FIXED_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def save_fit(fit: ModelFit, path) -> None:
    meta = {
        "model": fit.model,
        "response_kind": fit.response_kind,
        "config": fit.config,
        "column_names": list(fit.column_names),
        "acceptance": fit.acceptance,
        "shift": fit.shift,
        "scale": fit.scale,
        "split": None if fit.split is None else [list(fit.split.minus_indices),
                                                 list(fit.split.plus_indices)],
        "treatment_column": fit.treatment_column,
        "components": list(fit.components),
        "trees": None if fit.trees is None else {k: {"m": v.m} for k, v in fit.trees.items()},
    }
    arrays = {"fit": fit.fit, "loglik": fit.loglik,
              "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, arr in (("sigma2", fit.sigma2), ("beta", fit.beta), ("test_fit", fit.test_fit)):
        if arr is not None:
            arrays[name] = arr
    for name, arr in fit.components.items():
        arrays[f"component.{name}"] = arr
    if fit.trees is not None:
        for name, arc in fit.trees.items():
            for f in ("columns", "draw_ptr", "tree", "node", "var", "cut", "value"):
                arrays[f"trees.{name}.{f}"] = getattr(arc, f)
            for j, c in enumerate(arc.cuts):
                arrays[f"trees.{name}.cuts.{j}"] = c
    _write_npz(path, arrays)


def load_fit(path) -> ModelFit:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays["meta"].tobytes().decode())
    trees = None
    if meta["trees"] is not None:
        trees = {}
        for name, info in meta["trees"].items():
            cols = arrays[f"trees.{name}.columns"]
            cuts = tuple(arrays[f"trees.{name}.cuts.{j}"] for j in range(len(cols)))
            trees[name] = _gibbs.TreeArchive(
                cols, cuts, info["m"], *(arrays[f"trees.{name}.{f}"] for f in
                                         ("draw_ptr", "tree", "node", "var", "cut", "value")))
    split = None if meta["split"] is None else CovariateSplit(*map(tuple, meta["split"]))
    cls = ModelFit if meta["model"] == SINGLE else AdditiveFit
    return cls(model=meta["model"], response_kind=meta["response_kind"], config=meta["config"],
               fit=arrays["fit"], loglik=arrays["loglik"],
               column_names=tuple(meta["column_names"]), sigma2=arrays.get("sigma2"),
               beta=arrays.get("beta"),
               components={c: arrays[f"component.{c}"] for c in meta["components"]},
               test_fit=arrays.get("test_fit"), trees=trees, acceptance=meta["acceptance"],
               shift=meta["shift"], scale=meta["scale"], split=split,
               treatment_column=meta["treatment_column"])
