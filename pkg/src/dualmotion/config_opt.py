"""Global search over the 15 configuration parameters by differential evolution."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curve import Curve, curve_derivatives, resample
from .kinematics import forward_kinematics, manipulability
from .relative_ik import DualConfig, IKError, place, solve_path, solve_pose_ik, within_config_limits
from .speedbound import SpeedBoundError, max_uniform_speed

PARAM_NAMES = [f"q1_{i}" for i in range(1, 7)] + [f"q2_{i}" for i in range(1, 7)] + ["base2_x", "base2_y", "base2_yaw"]

ROBOT1_SEEDS = (
    (0.0, 0.3, -0.3, 0.0, 0.5, 0.0),
    (0.0, 0.6, -0.6, 0.0, 0.3, 0.0),
    (0.0, 0.2, 0.0, 0.0, -0.2, 0.0),
    (0.0, 0.5, -1.0, 0.0, 0.5, 0.0),
)


@dataclass(frozen=True)
class SearchSpace:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.size == 0 or lo.shape != hi.shape:
            raise ValueError("search space bounds are empty or mismatched")
        if np.any(lo >= hi):
            raise ValueError("search space needs lower < upper for every parameter")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.size

    def contains(self, x):
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    @classmethod
    def around(cls, seed: DualConfig, models, joint_window=1.0, xy_window=500.0, yaw_window=0.6):
        """Box centred on ``seed``, clipped to the joint limits."""
        m1, m2 = models
        c = seed.as_vector()
        lo = np.concatenate([
            np.maximum(c[:6] - joint_window, m1.q_min),
            np.maximum(c[6:12] - joint_window, m2.q_min),
            c[12:14] - xy_window,
            [c[14] - yaw_window],
        ])
        hi = np.concatenate([
            np.minimum(c[:6] + joint_window, m1.q_max),
            np.minimum(c[6:12] + joint_window, m2.q_max),
            c[12:14] + xy_window,
            [c[14] + yaw_window],
        ])
        return cls(lo, hi)


@dataclass
class DEOptions:
    population: int = 30
    F: float = 0.8
    CR: float = 0.9
    max_gens: int = 300
    seed: int = 0
    stagnation_gens: int = 50
    stagnation_tol: float = 1e-3
    initial: list = field(default_factory=list)


@dataclass
class EvolutionReport:
    best_mu: list  # per generation, generation 0 is the initial population
    best_x: np.ndarray
    evaluations: int
    converged: bool

    @property
    def best_config(self):
        return DualConfig.from_vector(self.best_x)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("generation,best_mu\n")
            for g, v in enumerate(self.best_mu):
                fh.write(f"{g},{v!r}\n")


def reflect(x, lo, hi):
    """Fold values back into [lo, hi] by mirror reflection at the bounds."""
    w = hi - lo
    y = np.mod(x - lo, 2 * w)
    y = np.where(y > w, 2 * w - y, y)
    return lo + y


def evolve(space: SearchSpace, objective, options: DEOptions | None = None, callback=None) -> EvolutionReport:
    """Maximize ``objective`` with DE/rand/1/bin."""
    opt = options or DEOptions()
    NP, D = opt.population, space.dim
    if NP < 4:
        raise ValueError("population must be at least 4")
    rng = np.random.default_rng(opt.seed)
    lo, hi = space.lower, space.upper
    pop = lo + rng.random((NP, D)) * (hi - lo)
    for k, x0 in enumerate(opt.initial[:NP]):
        pop[k] = np.clip(np.asarray(x0, dtype=float), lo, hi)
    fit = np.array([objective(x) for x in pop], dtype=float)
    evals = NP
    best = int(np.argmax(fit))
    history = [float(fit[best])]
    converged = False
    for gen in range(1, opt.max_gens + 1):
        for i in range(NP):
            others = [j for j in range(NP) if j != i]
            a, b, c = rng.choice(others, 3, replace=False)
            mutant = reflect(pop[a] + opt.F * (pop[b] - pop[c]), lo, hi)
            mask = rng.random(D) < opt.CR
            mask[rng.integers(D)] = True
            trial = np.where(mask, mutant, pop[i])
            f = float(objective(trial))
            evals += 1
            if f >= fit[i]:
                pop[i] = trial
                fit[i] = f
        best = int(np.argmax(fit))
        history.append(float(fit[best]))
        if callback is not None:
            callback(gen, history[-1])
        w = opt.stagnation_gens
        if w and len(history) > w:
            ref = history[-1 - w]
            if history[-1] - ref <= opt.stagnation_tol * max(abs(ref), 1e-12):
                converged = True
                break
    return EvolutionReport(history, pop[best].copy(), evals, converged)


# ---------------------------------------------------------------------------
# the speed objective


def objective(config: DualConfig, curve: Curve, models) -> float:
    """Estimated uniform traversal speed mu (mm/s); 0 for infeasible configurations."""
    if not within_config_limits(models, config):
        return 0.0
    try:
        path = solve_path(config, curve, models)
        if len(path) < 3:
            return 0.0
        return max_uniform_speed(path, models).mu
    except (IKError, SpeedBoundError):
        return 0.0


def make_objective(curve: Curve, models, step=2.0):
    """Vector objective on a coarser resample of ``curve`` (cheap enough for DE)."""
    coarse = resample(curve, step) if step and step < curve.total_length / 2 else curve

    def f(x):
        return objective(DualConfig.from_vector(x), coarse, models)

    return f


def tool_frame_at_start(curve: Curve, R2, p2):
    """World pose robot 1's TCP must take at lambda=0: z against the normal, x along the tangent."""
    t = curve_derivatives(curve).dp[0]
    z = -R2 @ curve.n[0]
    x = R2 @ t
    x = x - (x @ z) * z
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(z, x), z]), p2 + R2 @ curve.p[0]


def baseline_seed(curve: Curve, models, q0_2, base2_planar, seeds=ROBOT1_SEEDS) -> DualConfig:
    """Single-arm starting point: robot 2 held at ``q0_2``, robot 1 solved onto the curve start.

    Among converged candidates the one with the largest manipulability wins.
    """
    cfg = DualConfig(np.zeros(6), q0_2, base2_planar)
    m1, m2 = place(models, cfg)
    T2 = forward_kinematics(m2, cfg.q0_2)
    Rt, pt = tool_frame_at_start(curve, T2.R, T2.p)
    best, best_w = None, -1.0
    for s in seeds:
        q, ok = solve_pose_ik(m1, Rt, pt, np.array(s, dtype=float))
        if ok:
            w = manipulability(m1, q)
            if w > best_w:
                best, best_w = q, w
    if best is None:
        raise IKError("robot 1 cannot reach the curve start from any seed", 0, 0.0)
    return DualConfig(best, q0_2, base2_planar)


def single_arm_speed(config: DualConfig, curve: Curve, models) -> float:
    """mu with robot 2 frozen at its seed (the conventional single-arm setup)."""
    try:
        path = solve_path(config, curve, models, lock_robot2=True)
        return max_uniform_speed(path, models).mu
    except (IKError, SpeedBoundError):
        return 0.0
