"""Structural simulation model for test-negative-design studies.

The population model draws a confounder ``C ~ U(-3, 3)``, two unmeasured
binary factors ``U1, U2 ~ Bern(0.5)``, vaccination ``V``, two infections
(``I1`` other virus, ``I2`` SARS-CoV-2), symptoms ``W`` and hospitalisation
``H``. A subject enters the TND sample when infected, symptomatic and
hospitalised; cases are those whose infection is ``I2``.

Every linear predictor is a :class:`LinearPredictor` over a fixed set of named
terms, so presets and user overrides are plain coefficient maps.

All randomness is drawn in fixed-size chunks. Chunk ``k`` consumes its own
``SeedSequence(seed, spawn_key=(k,))`` stream, which makes every output
independent of how the work is spread over threads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.special import expit

from .core import TndDataset
from .errors import ConfigError, DegenerateTruth, InsufficientSample, ZeroDenominator

TERMS = ("intercept", "c", "abs_c", "sin_pi_c", "exp_c", "v", "v_c", "u1", "u2", "u2_v")
CHUNK_SIZE = 65536
# uniform columns: c, u1, u2, v, i1, i2, w_other, w_covid, h
_N_UNIFORMS = 9

LN15 = math.log(1.5)
LN3 = math.log(3.0)
LN35 = math.log(3.5)


def _check_terms(coefs: Mapping[str, float], where: str) -> dict:
    out = {}
    for k, val in dict(coefs).items():
        if k not in TERMS:
            raise ConfigError(f"unknown term {k!r} in {where}; allowed: {', '.join(TERMS)}")
        val = float(val)
        if not math.isfinite(val):
            raise ConfigError(f"non-finite coefficient for {k!r} in {where}")
        out[k] = val
    return out


def term_values(c, v, u1, u2) -> dict:
    """Evaluate every named term; arguments broadcast against each other."""
    c = np.asarray(c, dtype=float)
    v = np.asarray(v, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    return {
        "intercept": 1.0,
        "c": c,
        "abs_c": np.abs(c),
        "sin_pi_c": np.sin(np.pi * c),
        "exp_c": np.exp(c),
        "v": v,
        "v_c": v * c,
        "u1": np.asarray(u1, dtype=float),
        "u2": u2,
        "u2_v": u2 * v,
    }


@dataclass(frozen=True)
class LinearPredictor:
    """``base . terms + gate * (conditional . terms)``.

    ``gate`` is the indicator in front of the bracketed part of a structural
    equation (for instance ``I(I1 = 1)`` in the other-virus symptom model).
    """

    base: Mapping[str, float]
    conditional: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "base", _check_terms(self.base, "base"))
        object.__setattr__(self, "conditional", _check_terms(self.conditional, "conditional"))

    def evaluate(self, terms: dict, gate=1.0):
        out = 0.0
        for k, b in self.base.items():
            out = out + b * terms[k]
        if self.conditional:
            inner = 0.0
            for k, b in self.conditional.items():
                inner = inner + b * terms[k]
            out = out + np.asarray(gate, dtype=float) * inner
        return out

    def zero_vaccine_terms(self) -> "LinearPredictor":
        drop = ("v", "v_c", "u2_v")
        return LinearPredictor(
            {k: b for k, b in self.base.items() if k not in drop},
            {k: b for k, b in self.conditional.items() if k not in drop},
        )

    def to_dict(self) -> dict:
        return {"base": dict(sorted(self.base.items())), "conditional": dict(sorted(self.conditional.items()))}

    @classmethod
    def from_dict(cls, d) -> "LinearPredictor":
        if not isinstance(d, Mapping):
            raise ConfigError("a linear predictor must be an object with 'base'/'conditional'")
        extra = set(d) - {"base", "conditional"}
        if extra:
            raise ConfigError(f"unknown keys in linear predictor: {sorted(extra)}")
        return cls(d.get("base", {}), d.get("conditional", {}))


EQUATIONS = ("lambda_v", "lambda_i1", "lambda_covid", "lambda_w_other", "lambda_w_covid", "lambda_h")


def default_equations(beta_em: float = 0.0) -> dict:
    """Coefficient maps of the published simulation, with effect modifier ``beta_em``."""
    return {
        "lambda_v": LinearPredictor({"intercept": 0.5, "c": 0.3, "abs_c": -1.0, "sin_pi_c": -1.0}),
        "lambda_i1": LinearPredictor({"intercept": -5.0, "c": 0.5, "u1": 0.5}),
        # ln(3) U2 (1.5 - V) expands to 1.5 ln3 U2 - ln3 U2 V
        "lambda_covid": LinearPredictor(
            {
                "intercept": -4.0,
                "v": -LN15,
                "c": 2.0,
                "exp_c": -0.15,
                "v_c": beta_em,
                "u2": 1.5 * LN3,
                "u2_v": -LN3,
                "u1": -2.0,
            }
        ),
        "lambda_w_other": LinearPredictor({"intercept": 2.0}, {"c": 0.5, "u1": -0.5}),
        "lambda_w_covid": LinearPredictor(
            {"intercept": -5.0}, {"c": 1.0, "v": -LN35, "u1": -1.0, "u2": 0.5, "u2_v": -0.5}
        ),
        "lambda_h": LinearPredictor({"intercept": 1.0}, {"c": 0.5, "v": LN15, "u1": -0.5}),
    }


@dataclass(frozen=True)
class DgpConfig:
    """Structural-equation configuration.

    Parameters
    ----------
    beta_em : float
        Coefficient of ``V*C`` in the SARS-CoV-2 infection model. Only used
        when ``lambda_covid`` is not overridden.
    overrides : mapping
        Equation name -> :class:`LinearPredictor` replacing the default.
    seed : int
        Root seed for population draws.
    gate_symptoms : bool
        Symptoms of each infection type can only occur when that infection is
        present. Turning this off reproduces the literal logistic formulas.
    gate_hospitalization : bool
        Hospitalisation requires symptoms.
    max_population : int
        Hard cap on the population drawn while accumulating a TND sample.
    """

    beta_em: float = 0.0
    overrides: Mapping[str, LinearPredictor] = field(default_factory=dict)
    seed: int = 0
    gate_symptoms: bool = True
    gate_hospitalization: bool = True
    c_low: float = -3.0
    c_high: float = 3.0
    max_population: int = 50_000_000

    def __post_init__(self):
        bad = set(self.overrides) - set(EQUATIONS)
        if bad:
            raise ConfigError(f"unknown structural equation(s): {sorted(bad)}")
        if not math.isfinite(self.beta_em):
            raise ConfigError("beta_em must be finite")
        if not self.c_low < self.c_high:
            raise ConfigError("c_low must be below c_high")
        if self.max_population < 1:
            raise ConfigError("max_population must be positive")
        object.__setattr__(self, "seed", int(self.seed) & (2**64 - 1))

    @property
    def equations(self) -> dict:
        eq = default_equations(self.beta_em)
        eq.update(self.overrides)
        return eq

    def with_seed(self, seed: int) -> "DgpConfig":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "beta_em": self.beta_em,
            "equations": {k: p.to_dict() for k, p in sorted(self.equations.items())},
            "gate_symptoms": self.gate_symptoms,
            "gate_hospitalization": self.gate_hospitalization,
            "c_low": self.c_low,
            "c_high": self.c_high,
        }

    def fingerprint(self) -> str:
        """Hash of everything that determines the population law (not the seed)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def preset(name: str, seed: int = 0) -> DgpConfig:
    """Named configurations for the published simulation settings."""
    base = default_equations(0.0)
    if name == "study1-b025":
        return DgpConfig(beta_em=0.25, seed=seed)
    if name == "study1-b05":
        return DgpConfig(beta_em=0.5, seed=seed)
    if name == "study2":
        return DgpConfig(beta_em=0.0, seed=seed)
    if name == "appendix-II":
        covid = dict(base["lambda_covid"].base, intercept=-5.0)
        covid.pop("v_c")
        wo = base["lambda_w_other"]
        return DgpConfig(
            seed=seed,
            overrides={
                "lambda_covid": LinearPredictor(covid),
                "lambda_w_other": LinearPredictor({"intercept": -3.5}, wo.conditional),
            },
        )
    if name == "appendix-III":
        # the effect-modification coefficient is left unspecified for this setting; 0 is used
        covid = dict(base["lambda_covid"].base, exp_c=-0.25)
        wo = base["lambda_w_other"]
        return DgpConfig(
            seed=seed,
            overrides={
                "lambda_covid": LinearPredictor(covid),
                "lambda_w_other": LinearPredictor({"intercept": -2.25}, wo.conditional),
            },
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("study1-b025", "study1-b05", "study2", "appendix-II", "appendix-III")


# ---------------------------------------------------------------------------
# population draws


@dataclass(frozen=True)
class FullPopulationRow:
    c: float
    u1: int
    u2: int
    v: int
    i1: int
    i2: int
    w: int
    h: int
    s: int
    y: int


POPULATION_FIELDS = ("c", "u1", "u2", "v", "i1", "i2", "w", "h", "s", "y")


@dataclass(frozen=True, eq=False)
class Population:
    """Column-wise store of full-population draws."""

    c: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    v: np.ndarray
    i1: np.ndarray
    i2: np.ndarray
    w: np.ndarray
    h: np.ndarray
    s: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.c.shape[0]

    def __getitem__(self, k) -> FullPopulationRow:
        return FullPopulationRow(
            float(self.c[k]), *(int(getattr(self, f)[k]) for f in POPULATION_FIELDS[1:])
        )

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def columns(self) -> dict:
        return {f: getattr(self, f) for f in POPULATION_FIELDS}

    @staticmethod
    def concat(parts) -> "Population":
        parts = list(parts)
        return Population(
            **{f: np.concatenate([getattr(p, f) for p in parts]) for f in POPULATION_FIELDS}
        )

    def head(self, n) -> "Population":
        return Population(**{f: getattr(self, f)[:n] for f in POPULATION_FIELDS})


def _chunk_uniforms(seed: int, chunk: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(chunk,))
    return np.random.default_rng(ss).random((CHUNK_SIZE, _N_UNIFORMS))


def _structural(config: DgpConfig, U: np.ndarray, v_force: Optional[int] = None) -> dict:
    """Push uniforms through the structural equations."""
    eq = config.equations
    c = config.c_low + (config.c_high - config.c_low) * U[:, 0]
    u1 = U[:, 1] < 0.5
    u2 = U[:, 2] < 0.5
    t0 = term_values(c, 0.0, u1, u2)
    if v_force is None:
        v = U[:, 3] < expit(eq["lambda_v"].evaluate(t0))
    else:
        v = np.full(c.shape, bool(v_force))
    t = term_values(c, v, u1, u2)
    i1 = U[:, 4] < expit(eq["lambda_i1"].evaluate(t))
    i2 = U[:, 5] < expit(eq["lambda_covid"].evaluate(t))
    w_other = U[:, 6] < expit(eq["lambda_w_other"].evaluate(t, gate=i1))
    w_covid = U[:, 7] < expit(eq["lambda_w_covid"].evaluate(t, gate=i2))
    if config.gate_symptoms:
        w_other &= i1
        w_covid &= i2
    w = w_other | w_covid
    h = U[:, 8] < expit(eq["lambda_h"].evaluate(t, gate=w))
    if config.gate_hospitalization:
        h &= w
    s = (i1 | i2) & w & h
    y = i2 & w & h
    return dict(c=c, u1=u1, u2=u2, v=v, i1=i1, i2=i2, w=w, h=h, s=s, y=y)


def _population_chunk(config: DgpConfig, chunk: int) -> Population:
    cols = _structural(config, _chunk_uniforms(config.seed, chunk))
    return Population(
        c=cols["c"], **{f: cols[f].astype(np.int8) for f in POPULATION_FIELDS[1:]}
    )


def _map_chunks(fn, chunks, threads: int):
    if threads <= 1 or len(chunks) <= 1:
        return [fn(k) for k in chunks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, chunks))


def generate_population(config: DgpConfig, n_pop: int, threads: int = 1) -> Population:
    """Draw ``n_pop`` i.i.d. rows from the structural model.

    Row ``k`` depends only on ``(config, k)``; a longer draw extends a shorter
    one, and ``threads`` never changes the result.
    """
    if n_pop < 1:
        raise ConfigError("n_pop must be at least 1")
    n_chunks = -(-n_pop // CHUNK_SIZE)
    parts = _map_chunks(lambda k: _population_chunk(config, k), range(n_chunks), threads)
    return Population.concat(parts).head(n_pop)


def sample_tnd(population: Population, target_n: int, config: Optional[DgpConfig] = None) -> TndDataset:
    """Keep the first ``target_n`` sampled (``s = 1``) rows as a TND dataset.

    The result is not validated: small samples may lack an arm.
    """
    idx = np.flatnonzero(population.s == 1)
    if idx.size < target_n:
        raise InsufficientSample(int(idx.size), int(target_n))
    idx = idx[:target_n]
    return TndDataset(population.c[idx].reshape(-1, 1), population.v[idx], population.y[idx], ("c",))


def simulate_tnd(config: DgpConfig, target_n: int, threads: int = 1) -> TndDataset:
    """Draw population chunks until ``target_n`` TND rows accumulate.

    Equivalent to ``sample_tnd(generate_population(config, N), target_n)`` for
    any sufficiently large ``N``.
    """
    if target_n < 1:
        raise ConfigError("target_n must be at least 1")
    max_chunks = max(1, -(-config.max_population // CHUNK_SIZE))
    parts, have, k = [], 0, 0
    batch = max(1, threads)
    while have < target_n and k < max_chunks:
        ks = list(range(k, min(k + batch, max_chunks)))
        for j, p in zip(ks, _map_chunks(lambda j: _population_chunk(config, j), ks, threads)):
            sel = p.s == 1
            # rows beyond the population cap are never used
            sel[max(0, config.max_population - j * CHUNK_SIZE):] = False
            parts.append((p.c[sel], p.v[sel], p.y[sel]))
            have += int(sel.sum())
        k = ks[-1] + 1
    if have < target_n:
        raise InsufficientSample(have, target_n)
    c = np.concatenate([p[0] for p in parts])[:target_n]
    v = np.concatenate([p[1] for p in parts])[:target_n]
    y = np.concatenate([p[2] for p in parts])[:target_n]
    return TndDataset(c.reshape(-1, 1), v, y, ("c",))


# ---------------------------------------------------------------------------
# truth oracles


@dataclass(frozen=True)
class TruthResult:
    psi_mrr: float
    mc_se: float
    risk_v1: float
    risk_v0: float
    n_pop: int


def _truth_chunk(config: DgpConfig, chunk: int, rows: int) -> np.ndarray:
    U = _chunk_uniforms(config.seed, chunk)[:rows]
    y1 = _structural(config, U, v_force=1)["y"].astype(float)
    y0 = _structural(config, U, v_force=0)["y"].astype(float)
    return np.array([y1.sum(), y0.sum(), (y1 * y0).sum(), float(rows)])


def truth_mrr_monte_carlo(config: DgpConfig, n_pop: int = 10_000_000, threads: int = 1) -> TruthResult:
    """Marginal risk ratio under ``do(V=1)`` vs ``do(V=0)`` by simulation.

    Both arms reuse the same ``(C, U1, U2)`` and the same uniforms for every
    downstream Bernoulli, so their difference carries little Monte Carlo noise.
    The standard error comes from the delta method applied to the ratio of
    the two correlated means.

    Raises
    ------
    DegenerateTruth
        No outcome was observed under ``do(V=0)``.
    """
    if n_pop < 100_000:
        raise ConfigError("truth oracle needs n_pop >= 1e5")
    n_chunks = -(-n_pop // CHUNK_SIZE)
    rows = [min(CHUNK_SIZE, n_pop - k * CHUNK_SIZE) for k in range(n_chunks)]
    sums = _map_chunks(lambda k: _truth_chunk(config, k, rows[k]), range(n_chunks), threads)
    s1, s0, s10, n = np.sum(sums, axis=0)
    if s0 == 0:
        raise DegenerateTruth("no outcomes under do(V=0); risk ratio undefined")
    m1, m0 = s1 / n, s0 / n
    ratio = m1 / m0
    var1 = m1 * (1 - m1)
    var0 = m0 * (1 - m0)
    cov = s10 / n - m1 * m0
    var_r = (var1 / m0**2 + m1**2 * var0 / m0**4 - 2 * m1 * cov / m0**3) / n
    return TruthResult(float(ratio), float(math.sqrt(max(var_r, 0.0))), float(m1), float(m0), int(n))


def _conditional_probs(config: DgpConfig, c, v, u1, u2):
    """Closed-form P(I1), P(I2), P(W_other | I1), P(W_covid | I2), P(H | W)."""
    eq = config.equations
    t = term_values(c, v, u1, u2)
    p_i1 = expit(eq["lambda_i1"].evaluate(t))
    p_i2 = expit(eq["lambda_covid"].evaluate(t))
    p_wo = [expit(eq["lambda_w_other"].evaluate(t, gate=g)) for g in (0.0, 1.0)]
    p_wc = [expit(eq["lambda_w_covid"].evaluate(t, gate=g)) for g in (0.0, 1.0)]
    p_h = [expit(eq["lambda_h"].evaluate(t, gate=g)) for g in (0.0, 1.0)]
    if config.gate_symptoms:
        p_wo[0] = 0.0 * p_wo[0]
        p_wc[0] = 0.0 * p_wc[0]
    if config.gate_hospitalization:
        p_h[0] = 0.0 * p_h[0]
    return p_i1, p_i2, p_wo, p_wc, p_h


def _selection_probs(config: DgpConfig, c, v, u1, u2):
    """Exact P(S=1, Y=1) and P(S=1, Y=0) given (c, v, u1, u2) by enumeration."""
    p_i1, p_i2, p_wo, p_wc, p_h = _conditional_probs(config, c, v, u1, u2)
    case = 0.0
    ctrl = 0.0
    for i1 in (0, 1):
        pi1 = p_i1 if i1 else 1 - p_i1
        for i2 in (0, 1):
            if not (i1 or i2):
                continue
            pi = pi1 * (p_i2 if i2 else 1 - p_i2)
            # P(W=1) for the symptom union
            pw = 1 - (1 - p_wo[i1]) * (1 - p_wc[i2])
            sel = pi * pw * p_h[1]
            if i2:
                case = case + sel
            else:
                ctrl = ctrl + sel
    return case, ctrl


@dataclass(frozen=True)
class QuadratureTruth:
    psi_mrr: float
    risk_v1: float
    risk_v0: float
    q0: float
    case_fraction: float
    psi_mrr_tnd: float = float("nan")


def truth_mrr_quadrature(config: DgpConfig, n_grid: int = 6001) -> QuadratureTruth:
    """Deterministic counterpart of :func:`truth_mrr_monte_carlo`.

    Every binary node is summed out exactly and the uniform confounder is
    integrated with Simpson's rule on ``n_grid`` points. Also returns the
    selection probability, the case fraction of the TND population and
    ``psi_mrr_tnd``, the ratio of the TND functionals
    ``E_TND[mu_v omega_v]``. The last equals ``psi_mrr`` only when controls
    are exchangeable across arms.
    """
    from scipy.integrate import simpson

    if n_grid < 3:
        raise ConfigError("n_grid must be at least 3")
    c = np.linspace(config.c_low, config.c_high, n_grid)
    width = config.c_high - config.c_low
    p_v1 = expit(config.equations["lambda_v"].evaluate(term_values(c, 0.0, 0.0, 0.0)))

    def integrate(f):
        return float(simpson(f, x=c) / width)

    risk = {0: 0.0, 1: 0.0}
    # selection probabilities given (c, v) with the latent U summed out
    case_cv = {0: 0.0, 1: 0.0}
    ctrl_cv = {0: 0.0, 1: 0.0}
    for u1 in (0, 1):
        for u2 in (0, 1):
            for v in (0, 1):
                case, ctrl = _selection_probs(config, c, v, u1, u2)
                case_cv[v] = case_cv[v] + 0.25 * case
                ctrl_cv[v] = ctrl_cv[v] + 0.25 * ctrl
    pv = {1: p_v1, 0: 1 - p_v1}
    for v in (0, 1):
        risk[v] = integrate(case_cv[v])
    if risk[0] <= 0:
        raise DegenerateTruth("no outcomes under do(V=0); risk ratio undefined")
    sel_case = sum(integrate(pv[v] * case_cv[v]) for v in (0, 1))
    ctrl_bar = pv[0] * ctrl_cv[0] + pv[1] * ctrl_cv[1]
    q0 = sel_case + integrate(ctrl_bar)
    with np.errstate(divide="ignore", invalid="ignore"):
        tnd = [integrate(case_cv[v] * ctrl_bar / ctrl_cv[v]) for v in (0, 1)]
    mrr_tnd = tnd[1] / tnd[0] if tnd[0] > 0 else float("nan")
    return QuadratureTruth(risk[1] / risk[0], risk[1], risk[0], q0, sel_case / q0, mrr_tnd)


# ---------------------------------------------------------------------------
# finite-support oracle


@dataclass(frozen=True)
class DiscreteDgp:
    """Structural model with ``C`` restricted to a few atoms.

    Everything about the TND law can then be computed exactly by summing over
    the binary nodes.
    """

    support: tuple = (-1.0, 0.0, 1.0)
    probs: tuple = (0.3, 0.4, 0.3)
    config: DgpConfig = field(default_factory=DgpConfig)

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(float(s) for s in self.support))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.support) != len(self.probs) or len(self.support) == 0:
            raise ConfigError("support and probs must be non-empty and of equal length")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1) > 1e-12:
            raise ConfigError("probs must be non-negative and sum to 1")

    @classmethod
    def vaccine_independent(cls, **kw) -> "DiscreteDgp":
        """Every term involving ``V`` removed, so vaccination affects nothing."""
        eq = default_equations(0.0)
        over = {k: p.zero_vaccine_terms() for k, p in eq.items()}
        return cls(config=DgpConfig(overrides=over), **kw)

    @classmethod
    def control_exchangeable(cls, **kw) -> "DiscreteDgp":
        """Vaccine acts on COVID symptoms only.

        Infection and hospitalisation no longer depend on ``V``, so being a
        control is independent of vaccination given ``C``.
        """
        eq = default_equations(0.0)
        over = {
            "lambda_covid": eq["lambda_covid"].zero_vaccine_terms(),
            "lambda_h": eq["lambda_h"].zero_vaccine_terms(),
        }
        return cls(config=DgpConfig(overrides=over), **kw)


@dataclass(frozen=True, eq=False)
class ExactTables:
    """Exact population and TND-conditional quantities of a :class:`DiscreteDgp`.

    Arrays indexed ``[atom]`` or ``[atom, v]``; ``joint`` is ``[atom, v, y]``
    and holds ``P_TND(C=c, V=v, Y=y)``.
    """

    atoms: np.ndarray
    p_c: np.ndarray
    p_tnd_c: np.ndarray
    joint: np.ndarray
    pi: np.ndarray
    pi0: np.ndarray
    mu: np.ndarray
    m: np.ndarray
    omega_outcome: np.ndarray
    omega_propensity: np.ndarray
    psi_tnd: np.ndarray
    psi_pop: np.ndarray
    q0: float

    @property
    def mrr_tnd(self) -> float:
        return float(self.psi_tnd[1] / self.psi_tnd[0])

    @property
    def mrr_pop(self) -> float:
        return float(self.psi_pop[1] / self.psi_pop[0])

    def expect(self, f) -> float:
        """``E_TND[f(atom_index, v, y)]`` with ``f`` vectorised over atoms."""
        k = np.arange(self.atoms.size)
        total = 0.0
        for v in (0, 1):
            for y in (0, 1):
                total += float(np.sum(self.joint[:, v, y] * f(k, v, y)))
        return total


def enumerate_discrete(dgp: DiscreteDgp) -> ExactTables:
    """Compute the exact TND law of a discrete DGP and its nuisance functions.

    Raises
    ------
    ZeroDenominator
        Some conditioning event (``S=1``, an atom, an arm, or the control
        stratum at an atom) has probability zero.
    """
    cfg = dgp.config
    atoms = np.array(dgp.support)
    p_c = np.array(dgp.probs)
    K = atoms.size
    p_v1 = expit(cfg.equations["lambda_v"].evaluate(term_values(atoms, 0.0, 0.0, 0.0)))
    p_v1 = np.broadcast_to(p_v1, atoms.shape)
    # sel[k, v, y] = P(S=1, Y=y | C=c_k, V=v); risk[k, v] = P(Y=1 | C=c_k, do(V=v))
    sel = np.zeros((K, 2, 2))
    for v in (0, 1):
        for u1 in (0, 1):
            for u2 in (0, 1):
                case, ctrl = _selection_probs(cfg, atoms, v, u1, u2)
                sel[:, v, 1] += 0.25 * np.broadcast_to(case, atoms.shape)
                sel[:, v, 0] += 0.25 * np.broadcast_to(ctrl, atoms.shape)
    risk = sel[:, :, 1]
    pv = np.stack([1 - p_v1, p_v1], axis=1)
    full = p_c[:, None, None] * pv[:, :, None] * sel
    q0 = float(full.sum())
    if q0 <= 0:
        raise ZeroDenominator("S=1")
    joint = full / q0
    p_tnd_c = joint.sum(axis=(1, 2))
    for k in range(K):
        if p_tnd_c[k] <= 0:
            raise ZeroDenominator(f"C={atoms[k]:g}, S=1")
        for v in (0, 1):
            if joint[k, v].sum() <= 0:
                raise ZeroDenominator(f"C={atoms[k]:g}, V={v}, S=1")
        if joint[k, :, 0].sum() <= 0:
            raise ZeroDenominator(f"C={atoms[k]:g}, Y=0, S=1")
    pi = joint.sum(axis=2) / p_tnd_c[:, None]
    pi0 = joint[:, :, 0] / joint[:, :, 0].sum(axis=1, keepdims=True)
    mu = joint[:, :, 1] / joint.sum(axis=2)
    m = joint[:, :, 1].sum(axis=1) / p_tnd_c
    omega_outcome = (1 - m)[:, None] / (1 - mu)
    omega_propensity = pi / pi0
    psi_tnd = np.sum(p_tnd_c[:, None] * mu * omega_outcome, axis=0)
    psi_pop = np.sum(p_c[:, None] * risk, axis=0)
    return ExactTables(
        atoms=atoms,
        p_c=p_c,
        p_tnd_c=p_tnd_c,
        joint=joint,
        pi=pi,
        pi0=pi0,
        mu=mu,
        m=m,
        omega_outcome=omega_outcome,
        omega_propensity=omega_propensity,
        psi_tnd=psi_tnd,
        psi_pop=psi_pop,
        q0=q0,
    )


def sample_discrete(tables: ExactTables, n: int, seed: int) -> TndDataset:
    """Draw ``n`` i.i.d. records from the exact TND law ``tables.joint``."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    flat = tables.joint.ravel()
    cells = rng.choice(flat.size, size=n, p=flat / flat.sum())
    k, v, y = np.unravel_index(cells, tables.joint.shape)
    return TndDataset(tables.atoms[k].reshape(-1, 1), v, y, ("c",))
