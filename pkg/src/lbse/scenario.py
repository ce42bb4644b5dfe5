"""Random operating states, noisy measurements and reproducible datasets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import AdmittanceMatrix
from .measurements import MeasurementPlan, StateVector, full_labels, full_outputs

SPLIT_STREAM = 0x5EED5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VariabilityScenario:
    name: str
    v_range: tuple[float, float]
    theta_range: tuple[float, float]  # radians

    def __post_init__(self):
        if self.v_range[0] > self.v_range[1] or self.theta_range[0] > self.theta_range[1]:
            raise ConfigError(f"scenario {self.name}: bounds not ordered")

    @classmethod
    def symmetric(cls, name: str, dv: float, dtheta_deg: float) -> "VariabilityScenario":
        th = float(np.radians(dtheta_deg))
        return cls(name, (1.0 - dv, 1.0 + dv), (-th, th))


PRESETS = {
    "low": VariabilityScenario.symmetric("low", 0.025, 7.5),
    "medium": VariabilityScenario.symmetric("medium", 0.05, 15.0),
    # the variability table quotes +-15.5 deg for the medium row
    "medium-15.5": VariabilityScenario.symmetric("medium-15.5", 0.05, 15.5),
    "high": VariabilityScenario.symmetric("high", 0.075, 22.5),
}


def get_scenario(name: str) -> VariabilityScenario:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown variability preset {name!r}; choose from {sorted(PRESETS)}") from None


def sample_state(scenario: VariabilityScenario, rng: np.random.Generator, n: int,
                 slack: int = 0) -> StateVector:
    v = rng.uniform(*scenario.v_range, size=n)
    theta = rng.uniform(*scenario.theta_range, size=n)
    theta[slack] = 0.0
    return StateVector(v, theta)


def simulate_measurements(x: StateVector, plan: MeasurementPlan, adm: AdmittanceMatrix,
                          rng: np.random.Generator):
    """Return ``(z_a, z_d, y_true)``; ``y_true`` is the noise-free full output vector."""
    y_true = full_outputs(x, adm)
    z = y_true[plan.rows(adm.n_bus, adm.n_branch)] + rng.normal(0.0, plan.sigmas)
    return z[: plan.m_a], z[plan.m_a:], y_true


@dataclass(frozen=True)
class Instance:
    x_true: StateVector
    z_a: np.ndarray
    z_d: np.ndarray
    y_true: np.ndarray


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for instance ``index``; reproducible in isolation."""
    return np.random.default_rng([seed, index])


def make_instance(index: int, seed: int, scenario: VariabilityScenario, plan: MeasurementPlan,
                  adm: AdmittanceMatrix) -> Instance:
    rng = instance_rng(seed, index)
    x = sample_state(scenario, rng, adm.n_bus, adm.slack)
    z_a, z_d, y = simulate_measurements(x, plan, adm, rng)
    return Instance(x, z_a, z_d, y)


@dataclass
class Dataset:
    """Instances stored column-wise: row ``k`` of every array is instance ``k``."""

    v: np.ndarray
    theta: np.ndarray
    z_a: np.ndarray
    z_d: np.ndarray
    y_true: np.ndarray
    train: np.ndarray
    test: np.ndarray
    seed: int
    plan: MeasurementPlan
    scenario: VariabilityScenario
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.v.shape[0]

    def __getitem__(self, k: int) -> Instance:
        return Instance(StateVector(self.v[k], self.theta[k]), self.z_a[k], self.z_d[k],
                        self.y_true[k])

    @property
    def instances(self) -> list[Instance]:
        return [self[k] for k in range(len(self))]


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng([seed, SPLIT_STREAM, n]).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def build_dataset(n: int, train_fraction: float, scenario: VariabilityScenario,
                  plan: MeasurementPlan, adm: AdmittanceMatrix, seed: int) -> Dataset:
    if n < 2:
        raise ConfigError(f"need at least 2 instances, got {n}")
    insts = [make_instance(k, seed, scenario, plan, adm) for k in range(n)]
    train, test = split_indices(n, train_fraction, seed)
    return Dataset(
        v=np.array([i.x_true.v for i in insts]),
        theta=np.array([i.x_true.theta for i in insts]),
        z_a=np.array([i.z_a for i in insts]).reshape(n, plan.m_a),
        z_d=np.array([i.z_d for i in insts]).reshape(n, plan.m_d),
        y_true=np.array([i.y_true for i in insts]),
        train=train, test=test, seed=seed, plan=plan, scenario=scenario,
    )


# ---------------------------------------------------------------------------
# persistence

def _columns(ds: Dataset) -> list[str]:
    n = ds.v.shape[1]
    nb = (ds.y_true.shape[1] - 4 * n) // 2
    plan = ds.plan
    return ([f"v_{k}" for k in range(1, n + 1)] + [f"th_{k}" for k in range(1, n + 1)]
            + [f"za_{s.label}" for s in plan.available.specs]
            + [f"zd_{s.label}" for s in plan.delayed.specs]
            + [f"y_{lab}" for lab in full_labels(n, nb)])


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    """Write ``path`` (CSV, one row per instance) plus ``path.meta.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.hstack([ds.v, ds.theta, ds.z_a, ds.z_d, ds.y_true])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_columns(ds))
        for row in data:
            w.writerow([repr(float(x)) for x in row])
    meta = {
        "seed": ds.seed,
        "n_instances": len(ds),
        "scenario": {"name": ds.scenario.name, "v_range": list(ds.scenario.v_range),
                     "theta_range": list(ds.scenario.theta_range)},
        "plan_hash": ds.plan.digest(),
        "plan_csv": ds.plan.to_csv(),
        "train": ds.train.tolist(),
        "test": ds.test.tolist(),
        **ds.meta,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    plan = MeasurementPlan.from_csv(meta["plan_csv"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = sum(1 for c in path.open().readline().split(",") if c.startswith("v_"))
    m_a, m_d = plan.m_a, plan.m_d
    cuts = np.cumsum([n, n, m_a, m_d])
    v, th, za, zd, y = np.split(data, cuts, axis=1)
    sc = meta["scenario"]
    extra = {k: val for k, val in meta.items()
             if k not in ("seed", "n_instances", "scenario", "plan_hash", "plan_csv", "train", "test")}
    return Dataset(v=v, theta=th, z_a=za, z_d=zd, y_true=y,
                   train=np.array(meta["train"], dtype=int), test=np.array(meta["test"], dtype=int),
                   seed=meta["seed"], plan=plan,
                   scenario=VariabilityScenario(sc["name"], tuple(sc["v_range"]), tuple(sc["theta_range"])),
                   meta=extra)
