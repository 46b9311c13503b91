"""
Ecological inference: recover party x ethnicity tables per region from
their margins, using a cost matrix as side information.

Pipeline: :func:`ingest` voter records into per-region margins and
ground-truth joints, :func:`build_cost_matrix`, :func:`cross_validate`
``(q, lam)`` on hold-in regions, then :func:`infer_all` and compare with
the baselines. :func:`synthesize_dataset` writes a synthetic record file
in the ingest schema.
"""

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional

import numpy as np
import pandas as pd

from . import qmath
from .core import QParams, TransportProblem
from .solvers import SolverConfig, solve, sinkhorn_knopp

PARTIES = ("Democrat", "Republican", "Other")
ETHNICITIES = ("White", "African-American", "Hispanic", "Asian", "Native", "Other")
GENDERS = ("F", "M")
CSV_COLUMNS = ["region_id", "district_id", "age", "gender", "party",
               "ethnicity", "prior_vote"]
KL_CAP = 50.0
DEFAULT_Q_GRID = (0.5, 0.8, 1.0, 1.5, 2.0, 2.8, 4.0)
DEFAULT_LAMBDA_GRID = tuple(float(x) for x in np.logspace(-2, 3, 11))


@dataclass(frozen=True)
class VoterRecord:
    region_id: str
    district_id: str
    age: float
    gender: str
    party: str
    ethnicity: str
    prior_vote: bool


@dataclass
class Region:
    region_id: str
    district_id: str
    r: np.ndarray
    c: np.ndarray
    truth: Optional[np.ndarray] = None
    n_records: int = 0


@dataclass
class RegionDataset:
    """Per-region margins and truths plus population-level profile vectors.

    ``mu_party`` (3 x 3) and ``mu_ethnicity`` (6 x 3) hold the mean of
    (normalized age, share male, share who voted last time) per category.
    """

    regions: list
    mu_party: Optional[np.ndarray] = None
    mu_ethnicity: Optional[np.ndarray] = None
    parties: tuple = PARTIES
    ethnicities: tuple = ETHNICITIES
    excluded_records: int = 0

    def region(self, region_id):
        for reg in self.regions:
            if reg.region_id == region_id:
                return reg
        raise KeyError(region_id)

    @property
    def region_ids(self):
        return [reg.region_id for reg in self.regions]


@dataclass(frozen=True)
class CostMatrixSpec:
    """How to build the party x ethnicity cost matrix.

    ``rbf``: ``sqrt(2 - 2 exp(-gamma * d))`` with ``d`` the squared
    Euclidean distance between profile vectors (``squared_norm=False``
    uses the plain distance instead). ``survey``: ``1 - proportions``.
    ``no_prior``: all ones.
    """

    kind: str = "rbf"
    gamma: float = 10.0
    survey_proportions: Optional[np.ndarray] = None
    squared_norm: bool = True

    def __post_init__(self):
        if self.kind not in ("rbf", "survey", "no_prior"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.survey_proportions is not None:
            sp = np.asarray(self.survey_proportions, dtype=float)
            if np.any(sp < 0) or np.any(sp > 1):
                raise ValueError("survey proportions must lie in [0, 1]")


@dataclass
class EvalReport:
    method: str
    region_ids: list
    per_region_kl: list
    per_region_abs_error: list
    mean_kl: float
    sd_kl: float
    mean_abs: float
    sd_abs: float
    best_params: Optional[tuple] = None
    capped_cells: int = 0
    failed_regions: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["best_params"] = None if self.best_params is None else list(self.best_params)
        return d


@dataclass
class CVResult:
    best_params: tuple
    scores: list

    def to_dict(self):
        return {"best_params": list(self.best_params), "scores": self.scores}


# ------------------------------------------------------------------ ingest

def ingest(records_path, parties=PARTIES, ethnicities=ETHNICITIES):
    """Read a voter-record CSV into a :class:`RegionDataset`.

    Rows with any empty field are dropped. Unknown category labels raise
    ``ValueError``. Age is min-max normalized over the whole file.
    Regions are ordered by id.
    """
    df = pd.read_csv(records_path, dtype=str, keep_default_na=False,
                     na_values=[""], encoding="utf-8")
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"records file lacks columns {missing}")
    df = df[CSV_COLUMNS]
    n_all = len(df)
    df = df.dropna()
    excluded = n_all - len(df)
    for col, levels in (("party", parties), ("ethnicity", ethnicities),
                        ("gender", GENDERS), ("prior_vote", ("0", "1"))):
        bad = sorted(set(df[col]) - set(levels))
        if bad:
            raise ValueError(f"unknown {col} value(s): {bad}")
    try:
        age = df["age"].astype(float).to_numpy()
    except ValueError as exc:
        raise ValueError(f"non-numeric age: {exc}") from None
    if len(df) == 0:
        raise ValueError("no complete records in file")
    span = age.max() - age.min()
    age = (age - age.min()) / span if span > 0 else np.zeros_like(age)
    feats = np.column_stack([age, (df["gender"] == "M").to_numpy(float),
                             (df["prior_vote"] == "1").to_numpy(float)])
    pi = pd.Categorical(df["party"], categories=parties).codes
    ej = pd.Categorical(df["ethnicity"], categories=ethnicities).codes
    mu_p = np.array([feats[pi == i].mean(0) if np.any(pi == i) else np.full(3, np.nan)
                     for i in range(len(parties))])
    mu_e = np.array([feats[ej == j].mean(0) if np.any(ej == j) else np.full(3, np.nan)
                     for j in range(len(ethnicities))])
    regions = []
    cell = pi * len(ethnicities) + ej
    for rid, idx in sorted(df.groupby("region_id").indices.items()):
        counts = np.bincount(cell[idx], minlength=len(parties) * len(ethnicities))
        joint = counts.reshape(len(parties), len(ethnicities)) / counts.sum()
        regions.append(Region(str(rid), str(df["district_id"].iloc[idx[0]]),
                              joint.sum(1), joint.sum(0), joint, int(len(idx))))
    dropped = sorted(set(pd.read_csv(records_path, dtype=str, usecols=["region_id"],
                                     keep_default_na=False)["region_id"])
                     - {reg.region_id for reg in regions} - {""})
    for rid in dropped:
        warnings.warn(f"region {rid} has no complete records; excluded",
                      RuntimeWarning, stacklevel=2)
    return RegionDataset(regions, mu_p, mu_e, tuple(parties), tuple(ethnicities),
                         excluded)


# ------------------------------------------------------------- cost matrix

def rbf_cost(mu_party, mu_ethnicity, gamma=10.0, squared_norm=True):
    """``sqrt(2 - 2 k)`` for the RBF kernel ``k`` between profile vectors."""
    diff = np.asarray(mu_party)[:, None, :] - np.asarray(mu_ethnicity)[None, :, :]
    d = np.sum(diff * diff, axis=-1)
    if not squared_norm:
        d = np.sqrt(d)
    return np.sqrt(2.0 - 2.0 * np.exp(-gamma * d))


def build_cost_matrix(spec, data=None):
    """Cost matrix (parties x ethnicities) for the requested kind."""
    if spec.kind == "no_prior":
        shape = ((len(data.parties), len(data.ethnicities)) if data is not None
                 else (len(PARTIES), len(ETHNICITIES)))
        return np.ones(shape)
    if spec.kind == "survey":
        if spec.survey_proportions is None:
            raise ValueError("survey cost needs survey_proportions")
        return 1.0 - np.asarray(spec.survey_proportions, dtype=float)
    if data is None or data.mu_party is None or data.mu_ethnicity is None:
        raise ValueError("rbf cost needs profile vectors")
    if np.isnan(data.mu_party).any() or np.isnan(data.mu_ethnicity).any():
        raise ValueError("profile vectors are undefined for an empty category")
    return rbf_cost(data.mu_party, data.mu_ethnicity, spec.gamma, spec.squared_norm)


def reference_cost_fixture():
    """Stored profile vectors fitted once to a 3 x 6 target cost table.

    Returns a dict with ``mu_party``, ``mu_ethnicity``, ``gamma``, the
    4-decimal ``target`` table and the ``matrix`` the vectors produce.
    """
    text = resources.files("trot").joinpath("data/reference_profiles.json").read_text()
    raw = json.loads(text)
    return {k: (np.array(v) if isinstance(v, list) else v) for k, v in raw.items()}


# -------------------------------------------------------------- evaluation

def capped_kl(truth, inferred, cap=KL_CAP):
    """Generalized KL(truth || inferred) with a per-cell cap.

    Cells where ``truth > 0`` but ``inferred == 0`` would be infinite; each
    adds ``cap`` instead. Returns ``(value, n_capped)``.
    """
    truth = np.asarray(truth, dtype=float)
    inferred = np.asarray(inferred, dtype=float)
    hole = (truth > 0) & (inferred <= 0)
    ok = ~hole
    val = qmath.tsallis_relative_entropy(truth[ok], inferred[ok], 1.0)
    return float(val + cap * hole.sum() + truth[hole].sum()), int(hole.sum())


def _score(truth, inferred, direction):
    if direction == "truth-first":
        return capped_kl(truth, inferred)
    if direction == "inferred-first":
        return capped_kl(inferred, truth)
    raise ValueError(f"unknown KL direction {direction!r}")


def _summarize(method, ids, joints, data, direction, best=None, failed=()):
    kls, abss, rids = [], [], []
    capped = 0
    for rid in ids:
        reg = data.region(rid)
        if reg.truth is None or rid in failed:
            continue
        kl, nc = _score(reg.truth, joints[rid], direction)
        capped += nc
        kls.append(kl)
        abss.append(float(np.abs(reg.truth - joints[rid]).mean()))
        rids.append(rid)
    k = np.array(kls)
    a = np.array(abss)
    sd = lambda v: float(v.std(ddof=1)) if v.size > 1 else 0.0
    return EvalReport(method, rids, kls, abss,
                      float(k.mean()) if k.size else float("nan"), sd(k),
                      float(a.mean()) if a.size else float("nan"), sd(a),
                      best, capped, sorted(failed))


def _solve_region(reg, M, params, cfg):
    prob = TransportProblem(reg.r, reg.c, M)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        plan, trace, _ = solve(prob, params, cfg)
    return plan.P, trace.converged or params.q == 0


def _map(fn, items, jobs):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def infer_joints(data, params, M, cfg=None, jobs=1, region_ids=None):
    """Solve one transport problem per region; returns (joints, failed ids)."""
    cfg = cfg or SolverConfig()
    ids = list(region_ids) if region_ids is not None else data.region_ids
    regs = [data.region(rid) for rid in ids]
    out = _map(lambda reg: _solve_region(reg, M, params, cfg), regs, jobs)
    joints = {rid: P for rid, (P, _) in zip(ids, out)}
    failed = [rid for rid, (_, ok) in zip(ids, out) if not ok]
    return joints, failed


def cross_validate(data, holdin_region_ids, grid, spec, cfg=None, jobs=1,
                   kl_direction="truth-first"):
    """Pick ``(q, lam)`` minimizing mean KL on the hold-in regions.

    Scores within ``1e-12`` (relative) of the minimum count as tied; ties go
    to the smaller ``lam``, then to the smaller ``|q - 1|``. Grid points
    where any hold-in solve fails to converge score ``inf``.
    """
    qs, lams = grid
    if len(qs) == 0 or len(lams) == 0:
        raise ValueError("empty (q, lambda) grid")
    ids = list(holdin_region_ids)
    if not ids:
        raise ValueError("no hold-in regions")
    for rid in ids:
        if data.region(rid).truth is None:
            raise ValueError(f"hold-in region {rid} has no ground truth")
    M = build_cost_matrix(spec, data)
    points = [(float(q), float(lam)) for q in qs for lam in lams]

    def run(point):
        joints, failed = infer_joints(data, QParams(*point), M, cfg, 1, ids)
        if failed:
            return float("inf"), len(failed)
        kls = [_score(data.region(rid).truth, joints[rid], kl_direction)[0]
               for rid in ids]
        return float(np.mean(kls)), 0

    results = _map(run, points, jobs)
    scores = [{"q": q, "lambda": lam, "mean_kl": s, "failed": f}
              for (q, lam), (s, f) in zip(points, results)]
    low = min(d["mean_kl"] for d in scores)
    tied = [d for d in scores if d["mean_kl"] <= low + 1e-12 * max(1.0, abs(low))]
    best = min(tied, key=lambda d: (d["lambda"], abs(d["q"] - 1.0)))
    return CVResult((best["q"], best["lambda"]), scores)


def infer_all(data, params, spec, cfg=None, jobs=1, kl_direction="truth-first"):
    """Infer every region's joint and score against available truths.

    Returns ``(report, joints)``; non-converged regions are listed in
    ``report.failed_regions`` and left out of the averages.
    """
    M = build_cost_matrix(spec, data)
    joints, failed = infer_joints(data, params, M, cfg, jobs)
    rep = _summarize(f"trot[{spec.kind}]", data.region_ids, joints, data,
                     kl_direction, (params.q, params.lam), set(failed))
    return rep, joints


def baseline_joints(data, kind):
    """``independence`` (``r c^T``) or ``population_average`` joints."""
    if kind == "independence":
        return {reg.region_id: np.outer(reg.r, reg.c) for reg in data.regions}
    if kind == "population_average":
        w = [(reg.truth, reg.n_records) for reg in data.regions if reg.truth is not None]
        if not w:
            raise ValueError("population average needs regions with ground truth")
        pooled = sum(t * n for t, n in w) / sum(n for _, n in w)
        return {reg.region_id: pooled for reg in data.regions}
    raise ValueError(f"unknown baseline {kind!r}")


def comparison_table(data, params, spec, cfg=None, jobs=1,
                     kl_direction="truth-first"):
    """Baselines, the exact-LP solve and the regularized solve, one row each."""
    rows = []
    for kind in ("independence", "population_average"):
        rows.append(_summarize(kind, data.region_ids, baseline_joints(data, kind),
                               data, kl_direction))
    M = build_cost_matrix(spec, data)
    lp, _ = infer_joints(data, QParams(0.0, 1.0), M, cfg, jobs)
    rows.append(_summarize(f"exact_lp[{spec.kind}]", data.region_ids, lp, data,
                           kl_direction))
    rep, _ = infer_all(data, params, spec, cfg, jobs, kl_direction)
    rows.append(rep)
    return rows


# ------------------------------------------------------------- synthesis

def synthetic_survey():
    """Composition table published with synthetic data: ``1 - reference matrix``."""
    return 1.0 - reference_cost_fixture()["matrix"]


_PARTY_SHARE = np.array([0.40, 0.37, 0.23])
_ETHNIC_SHARE = np.array([0.62, 0.14, 0.16, 0.03, 0.01, 0.04])


def synthesize_dataset(n_regions, records_per_region, coupling_strength, seed,
                       out_dir, noise=0.1, concentration=8.0):
    """Write a synthetic voter file and its true joints.

    Each region draws margins around population shares, couples them with
    a Sinkhorn plan on the hidden cost (the fixture table) at
    ``lam = 20 * coupling_strength``, perturbs it by log-normal noise of
    scale ``noise`` (re-balanced to the margins) and samples records from
    the result. Individual features are drawn around the average of the
    party and ethnicity profile vectors of the record's cell.

    Returns the paths ``(records.csv, truth.json)``.
    """
    if not 0 <= coupling_strength <= 1:
        raise ValueError("coupling_strength must lie in [0, 1]")
    if n_regions < 1 or records_per_region < 1:
        raise ValueError("need at least one region and one record")
    rng = np.random.default_rng(seed)
    fix = reference_cost_fixture()
    M = fix["matrix"]
    mu_p, mu_e = fix["mu_party"], fix["mu_ethnicity"]
    lam = 20.0 * coupling_strength
    K = np.exp(-lam * M)
    n, m = M.shape
    width = max(3, len(str(n_regions)))
    frames = []
    truths = {}
    for k in range(n_regions):
        rid = f"R{k + 1:0{width}d}"
        did = f"D{k % 3 + 1}"
        r = rng.dirichlet(concentration * _PARTY_SHARE * n)
        c = rng.dirichlet(concentration * _ETHNIC_SHARE * m)
        J, _ = sinkhorn_knopp(K, r, c, tol=1e-13, max_iters=100000)
        if noise:
            J, _ = sinkhorn_knopp(J * np.exp(noise * rng.standard_normal(J.shape)),
                                  r, c, tol=1e-13, max_iters=100000)
        truths[rid] = J
        counts = rng.multinomial(records_per_region, J.ravel() / J.sum())
        cells = np.repeat(np.arange(n * m), counts)
        rng.shuffle(cells)
        pi, ej = np.divmod(cells, m)
        mean = 0.5 * (mu_p[pi] + mu_e[ej])
        age = np.clip(18 + 77 * np.clip(mean[:, 0] + 0.15 * rng.standard_normal(cells.size),
                                         0, 1), 18, 95).round().astype(int)
        male = rng.random(cells.size) < mean[:, 1]
        voted = rng.random(cells.size) < mean[:, 2]
        frames.append(pd.DataFrame({
            "region_id": rid, "district_id": did, "age": age,
            "gender": np.where(male, "M", "F"),
            "party": np.array(PARTIES)[pi],
            "ethnicity": np.array(ETHNICITIES)[ej],
            "prior_vote": voted.astype(int),
        }))
    os.makedirs(out_dir, exist_ok=True)
    rec_path = os.path.join(out_dir, "records.csv")
    truth_path = os.path.join(out_dir, "truth.json")
    pd.concat(frames, ignore_index=True)[CSV_COLUMNS].to_csv(
        rec_path, index=False, lineterminator="\n")
    sidecar = {"manifest": {"rows": list(PARTIES), "columns": list(ETHNICITIES),
                            "seed": seed, "coupling_strength": coupling_strength,
                            "lambda": lam, "noise": noise,
                            "survey_proportions": synthetic_survey().tolist()}}
    sidecar.update({rid: J.tolist() for rid, J in truths.items()})
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=False)
        fh.write("\n")
    return rec_path, truth_path


def load_truth(path):
    """Read a truth sidecar; returns (manifest, {region_id: joint})."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    manifest = raw.pop("manifest", {})
    return manifest, {k: np.array(v) for k, v in raw.items()}


def kl_to_product(P):
    """KL of a plan to the product of its own margins."""
    P = np.asarray(P, dtype=float)
    return qmath.tsallis_relative_entropy(P, np.outer(P.sum(1), P.sum(0)), 1.0)


def default_grid():
    return DEFAULT_Q_GRID, DEFAULT_LAMBDA_GRID


def report_json(rows, best=None, cv=None):
    """Deterministic JSON text for a comparison table."""
    obj = {"methods": [r.to_dict() for r in rows]}
    if best is not None:
        obj["best_params"] = list(best)
    if cv is not None:
        obj["cv"] = cv.to_dict()
    return json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and math.isnan(x):
        return None
    raise TypeError(type(x))
