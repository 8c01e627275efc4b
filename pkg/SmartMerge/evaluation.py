"""Evaluation harness: method benchmark, representative scenes, profiles and the driver-type sweep.

Every reported number is a pure function of trajectory logs, so tables can be
recomputed from the CSVs written next to them.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from tqdm import tqdm

from .baselines import Controller, FsmIdmController, IdmController, MaskedRandomController
from .config import EvalConfig
from .errors import CheckpointError, ScenarioError, UnknownMethodError
from .networks import PolicyNet
from .rewards import MAX_FINISH_REWARD
from .rollout import PolicyController, run_episode
from .scenario import ScenarioSpec, VehicleEntry, build_world, generate_scenario
from .simulator import DT, MAIN_LANE, MERGE_LANE, MERGING_ZONE_RADIUS, RoadNetwork
from .trajectory import trajectory_frame, write_trajectory

log = logging.getLogger(__name__)

METHODS: Tuple[str, ...] = ("idas", "idas-v", "idas-direct", "idm", "fsm-idm", "masked-random")
LEARNED_METHODS: Dict[str, str] = {"idas": "stage2", "idas-v": "stage1", "idas-direct": "direct"}
CONTROLLER_TAGS: Dict[str, str] = {
    "idas": "policy", "idas-v": "policy", "idas-direct": "policy",
    "idm": "idm", "fsm-idm": "fsm_idm", "masked-random": "random",
}
SCENE_FAMILIES: Tuple[str, ...] = ("s1", "s2", "s3", "s4")

BENCHMARK_COLUMNS = [
    "method", "scenario", "seed", "ego", "n_agents", "success", "perfect", "avg_speed",
    "normalized_reward", "finish_time", "agent_rewards", "finish_times",
]
SUMMARY_COLUMNS = [
    "method", "scenarios", "success_rate", "perfect_success_rate", "avg_speed",
    "normalized_reward", "avg_finish_time",
]
PROFILE_COLUMNS = ["vehicle_id", "time_s", "d", "v", "in_merging_zone", "zone_start", "zone_end"]


def check_methods(methods: Iterable[str]) -> List[str]:
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UnknownMethodError(f"unknown method(s) {unknown}, valid names are {list(METHODS)}")
    return methods


def _sub_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def method_controller(method: str, policies: Mapping[str, PolicyNet], rng: np.random.Generator) -> Controller:
    """Controller implementing ``method``; learned methods need their policy."""
    check_methods([method])
    if method in LEARNED_METHODS:
        if method not in policies:
            raise CheckpointError(
                f"method '{method}' needs a {LEARNED_METHODS[method]} checkpoint, none was provided"
            )
        return PolicyController(policies[method], rng)
    if method == "idm":
        return IdmController()
    if method == "fsm-idm":
        return FsmIdmController()
    return MaskedRandomController(rng)


# --- metrics -------------------------------------------------------------------

def _has_event(events: pd.Series, tag: str) -> pd.Series:
    return events.fillna("").astype(str).map(lambda text: tag in text.split("|"))


def scenario_metrics(log_frame: pd.DataFrame, n_agents: Optional[int] = None,
                     ego: Optional[int] = None) -> Dict:
    """Success, perfect success, speed, reward and finish-time metrics of one episode log.

    Parameters
    ----------
    log_frame : pd.DataFrame
        Trajectory log of one episode.
    n_agents : int, optional
        Number of vehicles in the scenario, including any that never entered.
    ego : int, optional
        Vehicle under test; defaults to the row tagged ``role == "ego"``, or all vehicles.
    """
    vehicles = sorted(int(v) for v in log_frame["vehicle_id"].unique())
    n_agents = n_agents if n_agents is not None else len(vehicles)
    if ego is None and "role" in log_frame and (log_frame["role"] == "ego").any():
        ego = int(log_frame.loc[log_frame["role"] == "ego", "vehicle_id"].iloc[0])

    finish_rows = log_frame[_has_event(log_frame["events"], "finish")]
    finished = {int(v) for v in finish_rows["vehicle_id"]}
    finish_times = {
        int(row.vehicle_id): round(row.time_s + DT - row.entry_time_s, 10)
        for row in finish_rows.itertuples()
    }
    penalised = bool((log_frame["r_collide"] < 0).any() or (log_frame["r_impede"] < 0).any())
    success = ego in finished if ego is not None else len(finished) == n_agents
    perfect = len(finished) == n_agents and not penalised
    all_finished = n_agents > 0 and len(finished) == n_agents
    per_vehicle = log_frame.groupby("vehicle_id")
    rewards = per_vehicle["reward"].sum()
    speeds = per_vehicle["v"].mean()
    return {
        "ego": -1 if ego is None else ego,
        "n_agents": n_agents,
        "success": bool(success),
        "perfect": bool(perfect),
        "avg_speed": float(speeds.mean()) if len(speeds) else float("nan"),
        "normalized_reward": float(rewards.sum()) / (n_agents * MAX_FINISH_REWARD) if n_agents else float("nan"),
        "finish_time": float(np.mean(list(finish_times.values()))) if all_finished else float("nan"),
        "agent_rewards": ";".join(f"{vid}:{rewards.get(vid, 0.0):.6f}" for vid in vehicles),
        "finish_times": ";".join(f"{vid}:{finish_times[vid]:.6f}" if vid in finish_times else f"{vid}:"
                                 for vid in vehicles),
    }


def summarize(rows: pd.DataFrame) -> pd.DataFrame:
    """Per-method table: success rates in %, speed over perfect scenarios only."""
    table = []
    for method in dict.fromkeys(rows["method"]):
        part = rows[rows["method"] == method]
        perfect = part[part["perfect"].astype(bool)]
        finish = part["finish_time"].dropna()
        table.append({
            "method": method,
            "scenarios": len(part),
            "success_rate": 100.0 * part["success"].astype(bool).mean(),
            "perfect_success_rate": 100.0 * part["perfect"].astype(bool).mean(),
            "avg_speed": float(perfect["avg_speed"].mean()) if len(perfect) else float("nan"),
            "normalized_reward": float(part["normalized_reward"].mean()),
            "avg_finish_time": float(finish.mean()) if len(finish) else float("nan"),
        })
    return pd.DataFrame(table, columns=SUMMARY_COLUMNS)


# --- benchmark -----------------------------------------------------------------

def scenario_seeds(seed: int, count: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(count, dtype=np.uint64)]


def evaluate_scenario(spec: ScenarioSpec, ego: int, ego_controller: Controller, others: Controller,
                      max_steps: int = 600, ego_tag: Optional[str] = None) -> Tuple[Dict, pd.DataFrame]:
    """Run one scenario with ``ego_controller`` on the ego and ``others`` everywhere else."""
    if ego_tag is not None:
        spec = spec.with_controllers({ego: ego_tag})
    world = build_world(spec)
    controllers = {v.id: (ego_controller if v.id == ego else others) for v in world.vehicles}
    result = run_episode(world, controllers, max_steps, watch=[v.id for v in world.vehicles])
    roles = {v.id: ("ego" if v.id == ego else "other") for v in world.vehicles}
    frame = trajectory_frame(result, roles)
    return scenario_metrics(frame, n_agents=len(spec.vehicles), ego=ego), frame


def _benchmark_one(method: str, index: int, seed: int, policies: Mapping[str, PolicyNet],
                   config: EvalConfig) -> Tuple[Dict, pd.DataFrame]:
    spec = generate_scenario(seed, config.benchmark_scenarios)
    ego = int(_sub_rng(seed, 0).integers(len(spec.vehicles)))
    others = PolicyController(policies["idas"], _sub_rng(seed, 1))
    ego_controller = method_controller(method, policies, _sub_rng(seed, 2))
    metrics, frame = evaluate_scenario(spec, ego, ego_controller, others, config.max_steps, CONTROLLER_TAGS[method])
    return {"method": method, "scenario": index, "seed": seed, **metrics}, frame


def run_benchmark(policies: Mapping[str, PolicyNet], methods: Sequence[str], config: EvalConfig,
                  out_dir: Union[str, Path, None] = None, save_logs: bool = False,
                  progress: bool = False) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Benchmark each method as the ego of the same random scenarios; others drive with IDAS.

    Returns
    -------
    (pd.DataFrame, pd.DataFrame)
        Per-scenario rows and the per-method summary.
    """
    methods = check_methods(methods)
    if "idas" not in policies:
        raise CheckpointError("the benchmark needs the stage2 (idas) checkpoint to drive surrounding traffic")
    for method in methods:
        if method in LEARNED_METHODS and method not in policies:
            raise CheckpointError(f"method '{method}' needs a {LEARNED_METHODS[method]} checkpoint, none was provided")

    seeds = scenario_seeds(config.seed, config.scenarios)
    jobs = [(method, i, seed) for method in methods for i, seed in enumerate(seeds)]

    def run(job: Tuple[str, int, int]) -> Tuple[Dict, pd.DataFrame]:
        return _benchmark_one(*job, policies, config)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(tqdm(pool.map(run, jobs), total=len(jobs), desc="benchmark", disable=not progress))
    else:
        outcomes = [run(job) for job in tqdm(jobs, desc="benchmark", disable=not progress)]

    rows = pd.DataFrame([row for row, _ in outcomes], columns=BENCHMARK_COLUMNS)
    summary = summarize(rows)
    for record in summary.itertuples():
        log.info("%s: success %.1f%%, perfect %.1f%%, avg speed %.2f m/s", record.method,
                 record.success_rate, record.perfect_success_rate, record.avg_speed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows.to_csv(out_dir / "benchmark.csv", index=False)
        summary.to_csv(out_dir / "summary.csv", index=False)
        if save_logs:
            for (method, i, _), (_, frame) in zip(jobs, outcomes):
                write_trajectory(frame, out_dir / "trajectories" / f"{method}_{i:03d}.csv")
    return rows, summary


# --- representative scenes -------------------------------------------------------

def time_to_merge(s: float, v: float, road: RoadNetwork = RoadNetwork()) -> float:
    """Arrival time at the merge point holding speed ``v`` on an empty lane."""
    if v <= 0.0:
        return math.inf
    return (road.merge_point_s - s) / v


@dataclass(frozen=True)
class SceneFamily:
    tag: str
    epsilon_s: float = 2.0

    def __post_init__(self) -> None:
        if self.tag not in SCENE_FAMILIES:
            raise ScenarioError(f"scene family '{self.tag}' is not one of {list(SCENE_FAMILIES)}")
        if self.epsilon_s <= 0.0:
            raise ScenarioError(f"epsilon_s: {self.epsilon_s} must be positive")

    @property
    def equal_priority(self) -> bool:
        return self.tag == "s4"

    @property
    def equal_type(self) -> bool:
        return self.tag == "s3"

    def arrival_gap(self, rng: np.random.Generator) -> float:
        """t_mpt of the main-lane agent minus that of the merge-lane agent."""
        if self.tag in ("s3", "s4"):
            return 0.0
        low, high = 0.25 * self.epsilon_s, 0.75 * self.epsilon_s
        gap = float(rng.uniform(low, high))
        return gap if self.tag == "s1" else -gap


def build_scene(family: SceneFamily, seed: int, road: RoadNetwork = RoadNetwork(), attempts: int = 100) -> ScenarioSpec:
    """Two-vehicle scene: vehicle 0 on the main lane, vehicle 1 on the merge lane."""
    rng = np.random.default_rng(seed)
    priorities = (1, 1) if family.equal_priority else tuple(road.priorities)
    if not family.equal_priority and priorities[0] == priorities[1]:
        raise ScenarioError(f"family {family.tag} needs different lane priorities, road has {priorities}")

    b_main = float(rng.uniform(-2.0, 2.0))
    b_merge = b_main
    while not family.equal_type and abs(b_merge - b_main) < 0.25:
        b_merge = float(rng.uniform(-2.0, 2.0))

    for _ in range(attempts):
        v_main = float(rng.uniform(0.5, 0.9) * road.speed_limits[MAIN_LANE])
        v_merge = float(rng.uniform(0.5, 0.9) * road.speed_limits[MERGE_LANE])
        t_merge = float(rng.uniform(5.0, 9.0))
        t_main = t_merge + family.arrival_gap(rng)
        s_main = road.merge_point_s - v_main * t_main
        s_merge = road.merge_point_s - v_merge * t_merge
        if 0.0 <= s_main < road.merge_point_s and 0.0 <= s_merge < road.merge_point_s:
            break
    else:
        raise ScenarioError(f"could not satisfy the {family.tag} arrival relation after {attempts} attempts")

    return ScenarioSpec(
        seed=int(seed),
        vehicles=(
            VehicleEntry(lane=MAIN_LANE, entry_time_s=0.0, initial_s=s_main, initial_v=v_main, b_type=b_main),
            VehicleEntry(lane=MERGE_LANE, entry_time_s=0.0, initial_s=s_merge, initial_v=v_merge, b_type=b_merge),
        ),
        speed_limits=tuple(road.speed_limits),
        priorities=priorities,
    ).validate()


def run_scenes(policies: Mapping[str, PolicyNet], methods: Sequence[str], family: SceneFamily,
               seeds: Sequence[int], max_steps: int = 600, out_dir: Union[str, Path, None] = None) -> pd.DataFrame:
    """Both scene agents run the method; for FSM+IDM the main-lane agent runs IDAS."""
    methods = check_methods(methods)
    rows = []
    for method in methods:
        for index, seed in enumerate(seeds):
            spec = build_scene(family, seed)
            controller = method_controller(method, policies, _sub_rng(seed, 2))
            if method == "fsm-idm":
                if "idas" not in policies:
                    raise CheckpointError("fsm-idm scenes pair the baseline with the idas checkpoint")
                main = PolicyController(policies["idas"], _sub_rng(seed, 1))
                spec = spec.with_controllers({1: "fsm_idm"})
            else:
                main = controller
                spec = spec.with_controllers({0: CONTROLLER_TAGS[method], 1: CONTROLLER_TAGS[method]})
            world = build_world(spec)
            result = run_episode(world, {0: main, 1: controller}, max_steps, watch=[0, 1])
            frame = trajectory_frame(result)
            metrics = scenario_metrics(frame, n_agents=2)
            rows.append({"method": method, "family": family.tag, "scene": index, "seed": int(seed),
                         "success": metrics["success"], "perfect": metrics["perfect"],
                         "normalized_reward": metrics["normalized_reward"], "finish_time": metrics["finish_time"]})
            if out_dir is not None:
                scene_dir = Path(out_dir) / "scenes" / f"{family.tag}_{method}_{index}"
                write_trajectory(frame, scene_dir / "trajectory.csv")
                export_profiles(frame, scene_dir)
    table = pd.DataFrame(rows)
    if out_dir is not None:
        table.to_csv(Path(out_dir) / f"scenes_{family.tag}.csv", index=False)
    return table


# --- profiles and sweep ------------------------------------------------------------

def export_profiles(log_frame: pd.DataFrame, out_dir: Union[str, Path],
                    zone_radius: float = MERGING_ZONE_RADIUS) -> List[Path]:
    """Write position-time and velocity series: ``profiles.csv`` plus one file per vehicle."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profiles = pd.DataFrame({
        "vehicle_id": log_frame["vehicle_id"],
        "time_s": log_frame["time_s"],
        "d": log_frame["d"],
        "v": log_frame["v"],
        "in_merging_zone": log_frame["d"].abs() <= zone_radius,
        "zone_start": -zone_radius,
        "zone_end": zone_radius,
    }, columns=PROFILE_COLUMNS)
    written = [out_dir / "profiles.csv"]
    profiles.to_csv(written[0], index=False)
    for vid, part in profiles.groupby("vehicle_id"):
        path = out_dir / f"vehicle_{int(vid)}.csv"
        part.to_csv(path, index=False)
        written.append(path)
    return written


def merge_time(log_frame: pd.DataFrame, vehicle_id: int) -> float:
    """Time from entry until the vehicle is first seen at or past the merge point."""
    rows = log_frame[log_frame["vehicle_id"] == vehicle_id]
    crossed = rows[rows["d"] >= 0.0]
    if crossed.empty:
        return float("nan")
    first = crossed.iloc[0]
    return round(float(first["time_s"] - first["entry_time_s"]), 10)


def sweep_scene(base: ScenarioSpec, b_type_merge: float, b_type_main: float = -1.0) -> ScenarioSpec:
    """Copy of a two-vehicle scene with the drivers' types set."""
    vehicles = tuple(
        replace(entry, b_type=b_type_merge if entry.lane == MERGE_LANE else b_type_main)
        for entry in base.vehicles
    )
    return replace(base, vehicles=vehicles).validate()


def driver_type_sweep(policy: PolicyNet, base: ScenarioSpec, grid: Sequence[float], repetitions: int = 20,
                      seed: int = 0, max_steps: int = 600,
                      out_dir: Union[str, Path, None] = None) -> pd.DataFrame:
    """Merge time of the merge-lane agent per driver type, both agents running ``policy``.

    Repetition ``r`` uses the same sampling seed at every grid point.
    """
    merging = [i for i, entry in enumerate(base.vehicles) if entry.lane == MERGE_LANE]
    if not merging:
        raise ScenarioError("the sweep scene needs a merge-lane vehicle")
    rows = []
    for b_type in grid:
        spec = sweep_scene(base, float(b_type))
        for rep in range(repetitions):
            controller = PolicyController(policy, _sub_rng(seed, rep))
            world = build_world(spec)
            result = run_episode(world, {v.id: controller for v in world.vehicles}, max_steps,
                                 watch=[v.id for v in world.vehicles])
            frame = trajectory_frame(result)
            rows.append({"b_type": float(b_type), "repetition": rep, "merge_time": merge_time(frame, merging[0])})
            if out_dir is not None and rep == 0:
                export_profiles(frame, Path(out_dir) / "profiles" / f"btype_{b_type:+.2f}")
    return pd.DataFrame(rows, columns=["b_type", "repetition", "merge_time"])


def sweep_table(rows: pd.DataFrame) -> pd.DataFrame:
    grouped = rows.groupby("b_type")["merge_time"]
    return pd.DataFrame({
        "b_type": grouped.mean().index,
        "mean_merge_time": grouped.mean().values,
        "std_merge_time": grouped.std(ddof=0).values,
        "runs": grouped.count().values,
    })


def sweep_trend(rows: pd.DataFrame, samples: int = 1000, seed: int = 0) -> Dict[str, float]:
    """Spearman rank correlation of driver type against mean merge time, with a bootstrap interval."""
    clean = rows.dropna(subset=["merge_time"])
    groups = [part["merge_time"].to_numpy() for _, part in clean.groupby("b_type")]
    points = np.array(sorted(clean["b_type"].unique()))
    if len(points) < 3:
        return {"rho": float("nan"), "ci_low": float("nan"), "ci_high": float("nan"), "points": len(points)}

    def rho(means: np.ndarray) -> float:
        if np.all(means == means[0]):
            return float("nan")
        return float(spearmanr(points, means)[0])

    observed = rho(np.array([g.mean() for g in groups]))
    rng = np.random.default_rng(seed)
    draws = [
        rho(np.array([rng.choice(g, size=len(g), replace=True).mean() for g in groups]))
        for _ in range(samples)
    ]
    draws = np.array(draws, dtype=np.float64)
    finite = draws[np.isfinite(draws)]
    low, high = (np.percentile(finite, [2.5, 97.5]) if finite.size else (float("nan"), float("nan")))
    return {"rho": observed, "ci_low": float(low), "ci_high": float(high), "points": len(points)}
