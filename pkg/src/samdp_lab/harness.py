"""Experiment configuration, pipeline phases, sweeps and the command line.

Phases write into ``<out>/seed<N>/`` and read what earlier phases left
there.  Every artifact carries the hash of the configuration that produced
it; evaluation refuses a victim/attack pair whose hashes disagree unless
told otherwise.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .attacks import (ATTACK_KINDS, AttackArtifact, DiscConfig, EvalReport, RandomAdversary,
                      TargetedPgdAdversary, bia_train, config_hash, demo_keys, evaluate_attack,
                      make_victim, optimal_tabular_attack, reward_max_train)
from .defense import DEFENSE_COLUMNS, DefenseConfig, tdrt_train
from .diffnet import load_checkpoint, save_checkpoint
from .envs import (DEFAULT_LAYOUT, Demonstration, GridWorld, PointMass, RandomMdpSpec,
                   default_budget, generate_random_samdp, make_vec_env, random_tabular_policy,
                   record_demonstrations)
from .errors import ConfigError, DependencyError, StructuralError
from .exact_oracle import verify_lemma1, verify_theorem2
from .mdp_core import TabularAdversary, TabularPolicy, trajectories_from_jsonl
from .policy_opt import Policy, PpoConfig, metrics_to_csv, ppo_train

OUTPUT_ROOT_ENV = "SAMDP_LAB_OUT"
PHASES = ("train-victim", "gen-demos", "train-attack", "train-defense", "evaluate", "verify",
          "sweep")
DEFAULT_TIERS = {"bia_ilfd": "black_box", "bia_ilfo": "no_box", "reward_max": "black_box",
                 "random": "no_box", "targeted_pgd": "white_box", "optimal_tabular": "white_box"}


def _ppo(**kw):
    base = dict(optimizer="adam", iters=200, steps_per_iter=1024, n_envs=16, discount=0.9,
                lr_policy=1e-3, entropy_coef=0.01)
    base.update(kw)
    return lambda: PpoConfig(**base)


# ------------------------------------------------------------------ configuration


@dataclass
class EnvConfig:
    kind: str = "gridworld"  # gridworld | pointmass
    layout: list | None = None  # rows, top first; None: the default layout
    max_steps: int = 100
    step_reward: float = -0.01
    goal_reward: float = 1.0
    train_starts: str = "reachable"  # reachable: every cell that reaches both goals


@dataclass
class VictimConfig:
    ppo: PpoConfig = field(default_factory=_ppo())
    deterministic: bool = True  # greedy victim at evaluation and under attack


@dataclass
class TargetConfig:
    ppo: PpoConfig = field(default_factory=_ppo(iters=100))
    deterministic: bool = False


@dataclass
class AttackConfig:
    kind: str = "bia_ilfd"
    tier: str | None = None  # None: the least access the kind needs
    epsilon: float | None = None  # None: one cell (gridworld) or 0.3
    demo_count: int = 20
    demo_path: str | None = None
    victim: str = "victim"  # victim | defended
    init: str = "uniform"
    pgd_steps: int = 30
    ppo: PpoConfig = field(default_factory=_ppo(iters=40, discount=0.99, lr_policy=3e-3,
                                                 entropy_coef=0.0))
    disc: DiscConfig = field(default_factory=DiscConfig)


@dataclass
class DefenseBlock:
    lambda_reg: float = 1.0
    discount_reg: float | None = None
    inner_max: str = "pgd"
    pgd_steps: int = 5
    pgd_step_frac: float | None = None
    epsilon: float | None = None
    time_discounted: bool = True
    reduction: str = "mean"
    ppo: PpoConfig = field(default_factory=_ppo())


@dataclass
class EvalConfig:
    n_episodes: int = 50
    victim: str = "victim"
    attacks: list = field(default_factory=lambda: ["bia_ilfd"])
    allow_hash_mismatch: bool = False
    seed: int = 1000


@dataclass
class VerifyConfig:
    n_lemma1: int = 200
    n_theorem2: int = 500
    seed: int = 0


@dataclass
class SweepConfig:
    axis: str | None = None
    values: list = field(default_factory=list)
    phases: list = field(default_factory=lambda: ["train-victim", "gen-demos", "train-attack",
                                                  "evaluate"])


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseBlock = field(default_factory=DefenseBlock)
    eval: EvalConfig = field(default_factory=EvalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: list = field(default_factory=lambda: [0])
    out: str | None = None

    def __post_init__(self):
        if self.eval.n_episodes < 1:
            raise ConfigError("eval.n_episodes must be >= 1")
        if self.attack.epsilon is not None and self.attack.epsilon < 0:
            raise ConfigError("attack.epsilon must be >= 0")
        if self.attack.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack.kind: unknown attack {self.attack.kind!r}")
        for k in self.eval.attacks:
            if k not in ATTACK_KINDS:
                raise ConfigError(f"eval.attacks: unknown attack {k!r}")
        if self.env.kind not in ("gridworld", "pointmass"):
            raise ConfigError(f"env.kind: unknown environment {self.env.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _key_lines(text: str) -> dict:
    """Dotted key path -> 1-based line number in the YAML source."""
    out: dict = {}
    root = yaml.compose(text)

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[p] = k.start_mark.line + 1
                walk(v, p)
    if root is not None:
        walk(root, "")
    return out


def _coerce(default, value, path: str, lines: dict):
    where = f" (line {lines[path]})" if path in lines else ""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}{where}: expected a mapping")
        return _merge(default, value, path, lines)
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}{where}: expected a list, got {value!r}")
        return type(default)(value)
    return value


def _merge(instance, data: dict, prefix: str, lines: dict):
    names = {f.name for f in dataclasses.fields(instance)}
    updates = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            where = f" (line {lines[path]})" if path in lines else ""
            raise ConfigError(f"unknown key {path!r}{where}")
        updates[key] = _coerce(getattr(instance, key), value, path, lines)
    try:
        return dataclasses.replace(instance, **updates)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a mapping")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}") from e


def load_config(text: str | None = None, overrides=(), source: str = "<config>") -> ExperimentConfig:
    """Parse YAML text (or defaults) and apply ``key=value`` overrides."""
    tree: dict = {}
    lines: dict = {}
    if text:
        try:
            tree = yaml.safe_load(text) or {}
            lines = _key_lines(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            line = f" line {mark.line + 1}" if mark is not None else ""
            raise ConfigError(f"{source}:{line} cannot parse: {getattr(e, 'problem', e)}") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"{source}: top level must be a mapping")
    tree = copy.deepcopy(tree)
    for ov in overrides:
        key, value = parse_override(ov) if isinstance(ov, str) else ov
        _set_path(tree, key, value)
    try:
        return _merge(ExperimentConfig(), tree, "", lines)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config_file(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return load_config(p.read_text(), overrides, str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def with_override(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    tree = _plain(cfg.to_dict())
    _set_path(tree, key, value)
    return _merge(ExperimentConfig(), tree, "", {})


# ------------------------------------------------------------------ worlds and files


def build_world(env: EnvConfig):
    if env.kind == "pointmass":
        return PointMass()
    rows = env.layout if env.layout is not None else DEFAULT_LAYOUT
    try:
        return GridWorld.from_ascii(rows, step_reward=env.step_reward,
                                    goal_reward=env.goal_reward, max_steps=env.max_steps)
    except StructuralError as e:
        raise ConfigError(f"env.layout: {e}") from e


def training_world(world, env: EnvConfig):
    if isinstance(world, GridWorld) and env.train_starts == "reachable":
        dv = world.distances_to(world.goal_victim)
        da = world.distances_to(world.goal_adversary)
        return world.with_starts([c for c in world.nonterminal_cells if c in dv and c in da])
    return world


def attack_epsilon(world, eps: float | None) -> float:
    if eps is not None:
        return float(eps)
    return world.cell_size if isinstance(world, GridWorld) else 0.3


def output_root(cfg: ExperimentConfig, out: str | None = None) -> Path:
    return Path(out or cfg.out or os.environ.get(OUTPUT_ROOT_ENV, "runs"))


class RunDir:
    """Files of one seed's pipeline."""

    def __init__(self, root: Path, seed: int):
        self.path = Path(root) / f"seed{seed}"
        self.seed = seed

    def file(self, name: str) -> Path:
        return self.path / name

    def write(self, name: str, text: str) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        p = self.file(name)
        p.write_text(text)
        return p

    def read(self, name: str, phase: str) -> str:
        p = self.file(name)
        if not p.exists():
            raise DependencyError(f"{p} is missing; run the {phase!r} phase first")
        return p.read_text()

    def meta(self, name: str, phase: str) -> dict:
        return json.loads(self.read(name + ".meta.json", phase))


def _policy_kind(world) -> str:
    return "box" if isinstance(world, PointMass) else "discrete"


def _save_policy(run: RunDir, name: str, policy: Policy, meta: dict, metrics: list,
                 columns=None) -> None:
    run.write(name + ".json", save_checkpoint(policy.net))
    run.write(name + ".meta.json", json.dumps(meta, sort_keys=True, indent=1))
    run.write(name + "_metrics.csv", metrics_to_csv(metrics, columns))


def load_policy(run: RunDir, name: str, phase: str) -> tuple[Policy, dict]:
    meta = run.meta(name, phase)
    net = load_checkpoint(run.read(name + ".json", phase))
    return Policy(net, meta["policy_kind"]), meta


def _victim_phase(which: str) -> str:
    return "train-defense" if which == "defended" else "train-victim"


# ------------------------------------------------------------------ phases


def phase_train_victim(cfg: ExperimentConfig, run: RunDir) -> dict:
    world = build_world(cfg.env)
    ppo = dataclasses.replace(cfg.victim.ppo, seed=run.seed)
    res = ppo_train(make_vec_env(training_world(world, cfg.env), ppo.n_envs, "victim"), ppo)
    h = config_hash({"env": dataclasses.asdict(cfg.env), "victim": dataclasses.asdict(cfg.victim),
                     "seed": run.seed})
    meta = {"phase": "train-victim", "config_hash": h, "seed": run.seed,
            "policy_kind": _policy_kind(world)}
    _save_policy(run, "victim", res.policy, meta, res.metrics)
    return {"phase": "train-victim", "seed": run.seed,
            "final_return": res.metrics[-1]["mean_return"], "config_hash": h}


def phase_gen_demos(cfg: ExperimentConfig, run: RunDir) -> dict:
    """Train the target policy on the adversary's task and record demonstrations."""
    world = build_world(cfg.env)
    ppo = dataclasses.replace(cfg.target.ppo, seed=run.seed)
    res = ppo_train(make_vec_env(training_world(world, cfg.env), ppo.n_envs, "adversary"), ppo)
    h = config_hash({"env": dataclasses.asdict(cfg.env), "target": dataclasses.asdict(cfg.target),
                     "seed": run.seed})
    meta = {"phase": "gen-demos", "config_hash": h, "seed": run.seed,
            "policy_kind": _policy_kind(world)}
    _save_policy(run, "target", res.policy, meta, res.metrics)
    n = cfg.attack.demo_count
    for with_actions, name in ((True, "demos_ilfd.jsonl"), (False, "demos_ilfo.jsonl")):
        d = record_demonstrations(world, res.policy, n, with_actions, seed=run.seed,
                                  deterministic=cfg.target.deterministic)
        run.write(name, d.to_jsonl())
    return {"phase": "gen-demos", "seed": run.seed, "episodes": n, "config_hash": h}


def load_demos(cfg: ExperimentConfig, run: RunDir, mode: str, count: int | None = None):
    name = "demos_ilfd.jsonl" if mode == "ilfd" else "demos_ilfo.jsonl"
    if cfg.attack.demo_path is not None:
        p = Path(cfg.attack.demo_path)
        if p.is_dir():
            p = p / name
        if not p.exists():
            raise DependencyError(f"demonstrations {p} are missing; run 'gen-demos' first")
        text = p.read_text()
    else:
        text = run.read(name, "gen-demos")
    trajs = trajectories_from_jsonl(text)
    count = cfg.attack.demo_count if count is None else count
    if count > len(trajs):
        raise DependencyError(f"asked for {count} demonstration episodes, found {len(trajs)}")
    return Demonstration.from_trajectories(trajs[:count])


def build_attack(cfg: ExperimentConfig, run: RunDir, kind: str, victim_model: Policy,
                 victim_meta: dict) -> AttackArtifact:
    world = build_world(cfg.env)
    a = cfg.attack
    tier = a.tier or DEFAULT_TIERS[kind]
    handle = make_victim(victim_model, tier, cfg.victim.deterministic)
    eps = attack_epsilon(world, a.epsilon)
    budget = default_budget(world, eps)
    ppo = dataclasses.replace(a.ppo, seed=run.seed)
    if kind in ("bia_ilfd", "bia_ilfo"):
        mode = kind.split("_")[1]
        demos = load_demos(cfg, run, mode)
        art = bia_train(handle, world, demos, budget, ppo, a.disc, mode, a.init)
    elif kind == "reward_max":
        art = reward_max_train(handle, world, budget, ppo, init=a.init)
    elif kind == "random":
        art = AttackArtifact("random", RandomAdversary(eps), budget, {"seed": run.seed})
    elif kind == "targeted_pgd":
        target, _ = load_policy(run, "target", "gen-demos")
        adv = TargetedPgdAdversary(handle, target, eps, a.pgd_steps)
        art = AttackArtifact("targeted_pgd", adv, budget, {"seed": run.seed})
    elif kind == "optimal_tabular":
        if not isinstance(world, GridWorld):
            raise ConfigError("optimal_tabular attacks need a gridworld")
        art = optimal_tabular_attack(world, victim_model, ppo.discount, cfg.victim.deterministic)
    else:
        raise ConfigError(f"unknown attack kind {kind!r}")
    art.metadata["victim_hash"] = victim_meta["config_hash"]
    art.metadata["attack_hash"] = config_hash({"attack": dataclasses.asdict(a), "kind": kind,
                                               "seed": run.seed})
    art.metadata["tier"] = tier
    return art


def _attack_name(kind: str, victim: str) -> str:
    return f"attack_{kind}" + ("" if victim == "victim" else f"_{victim}")


def phase_train_attack(cfg: ExperimentConfig, run: RunDir, kind: str | None = None) -> dict:
    kind = kind or cfg.attack.kind
    which = cfg.attack.victim
    model, meta = load_policy(run, which, _victim_phase(which))
    art = build_attack(cfg, run, kind, model, meta)
    name = _attack_name(kind, which)
    run.write(name + ".json", art.to_json())
    if art.curves:
        run.write(name + "_curves.csv", metrics_to_csv(art.curves))
    last = art.curves[-1] if art.curves else {}
    return {"phase": "train-attack", "seed": run.seed, "kind": kind, "victim": which,
            "final_success": last.get("success", ""), "config_hash": art.metadata["attack_hash"]}


def phase_train_defense(cfg: ExperimentConfig, run: RunDir) -> dict:
    world = build_world(cfg.env)
    d = cfg.defense
    dcfg = DefenseConfig(lambda_reg=d.lambda_reg, discount_reg=d.discount_reg,
                         inner_max=d.inner_max, pgd_steps=d.pgd_steps,
                         pgd_step_frac=d.pgd_step_frac, epsilon=attack_epsilon(world, d.epsilon),
                         time_discounted=d.time_discounted, reduction=d.reduction)
    res = tdrt_train(training_world(world, cfg.env), d.ppo, dcfg, seed=run.seed)
    h = config_hash({"env": dataclasses.asdict(cfg.env), "defense": dataclasses.asdict(d),
                     "seed": run.seed})
    meta = {"phase": "train-defense", "config_hash": h, "seed": run.seed,
            "policy_kind": _policy_kind(world)}
    _save_policy(run, "defended", res.policy, meta, res.metrics)
    run.write("defense_metrics.csv",
              metrics_to_csv([{k: r[k] for k in DEFENSE_COLUMNS} for r in res.metrics],
                             DEFENSE_COLUMNS))
    return {"phase": "train-defense", "seed": run.seed, "lambda": d.lambda_reg,
            "final_clean_return": res.metrics[-1]["clean_return"], "config_hash": h}


def load_attack(cfg: ExperimentConfig, run: RunDir, kind: str, which: str, victim_model,
                victim_meta: dict) -> AttackArtifact:
    world = build_world(cfg.env)
    doc = json.loads(run.read(_attack_name(kind, which) + ".json", "train-attack"))
    if (doc["metadata"].get("victim_hash") != victim_meta["config_hash"]
            and not cfg.eval.allow_hash_mismatch):
        raise DependencyError(
            f"attack {kind!r} was trained against victim hash {doc['metadata'].get('victim_hash')}"
            f" but the {which} on disk has hash {victim_meta['config_hash']}; retrain it with"
            " 'train-attack' or set eval.allow_hash_mismatch=true")
    handle = make_victim(victim_model, doc["metadata"].get("tier", "white_box"),
                         cfg.victim.deterministic)
    return AttackArtifact.from_dict(doc, world, handle)


def phase_evaluate(cfg: ExperimentConfig, run: RunDir) -> dict:
    world = build_world(cfg.env)
    which = cfg.eval.victim
    model, meta = load_policy(run, which, _victim_phase(which))
    victim = make_victim(model, "no_box", cfg.victim.deterministic)
    target = None
    if run.file("demos_ilfo.jsonl").exists():
        target = demo_keys(world, Demonstration.from_trajectories(
            trajectories_from_jsonl(run.file("demos_ilfo.jsonl").read_text())))
    rows = []
    for kind in cfg.eval.attacks:
        art = load_attack(cfg, run, kind, which, model, meta)
        rep = evaluate_attack(victim, world, art, cfg.eval.n_episodes, cfg.eval.seed, target)
        rows.append({"seed": run.seed, "victim": which, **rep.row()})
    cols = ("seed", "victim") + EvalReport.COLUMNS
    run.write(f"eval_{which}.csv", metrics_to_csv(rows, cols))
    best = max(rows, key=lambda r: r["attack_reward_mean"])
    return {"phase": "evaluate", "seed": run.seed, "victim": which, "best_attack": best["kind"],
            "best_attack_reward": best["attack_reward_mean"],
            "clean_reward": best["clean_reward_mean"], "rows": rows}


# ------------------------------------------------------------------ verification suites


@dataclass
class SuiteResult:
    name: str
    total: int
    passed: int
    skipped: int = 0
    extra: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.total - self.skipped


def random_instance(rng: np.random.Generator, max_states: int = 4, min_policy_prob: float = 0.0):
    spec = RandomMdpSpec(n_states=int(rng.integers(1, max_states + 1)),
                         n_actions=int(rng.integers(1, 4)), max_budget=3,
                         discount=float(rng.uniform(0.5, 0.95)), seed=int(rng.integers(2**31)))
    samdp = generate_random_samdp(spec)
    pi = TabularPolicy(random_tabular_policy(rng, spec.n_states, spec.n_actions, min_policy_prob))
    return samdp, pi


def random_adversary(rng: np.random.Generator, samdp) -> TabularAdversary:
    n = samdp.mdp.n_states
    probs = np.zeros((n, n))
    for s, nb in enumerate(samdp.perturbation.neighbors):
        probs[s, list(nb)] = rng.dirichlet(np.ones(len(nb)))
    return TabularAdversary(probs)


def lemma1_suite(n: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng([seed, 1])
    reports = [verify_lemma1(*random_instance(rng)) for _ in range(n)]
    return SuiteResult("lemma1", n, sum(r.passed for r in reports),
                       extra={"max_residual": max(r.max_residual for r in reports)},
                       reports=reports)


def theorem2_suite(n: int = 500, seed: int = 0, horizon_tol: float = 1e-6) -> SuiteResult:
    rng = np.random.default_rng([seed, 2])
    reports = []
    for _ in range(n):
        samdp, pi = random_instance(rng, min_policy_prob=0.02)
        nu = random_adversary(rng, samdp)
        m = samdp.mdp
        r_tgt = rng.uniform(-1.0, 1.0, size=(m.n_states, m.n_actions, m.n_states))
        reports.append(verify_theorem2(samdp, pi, nu, r_tgt, 1.0, horizon_tol))
    applicable = [r for r in reports if r.applicable]
    tight = float(np.mean([r.holds_tight for r in applicable])) if applicable else float("nan")
    return SuiteResult("theorem2", n, sum(r.holds for r in applicable), n - len(applicable),
                       extra={"tight_fraction": tight}, reports=reports)


def phase_verify(cfg: ExperimentConfig, root: Path) -> dict:
    v = cfg.verify
    l1 = lemma1_suite(v.n_lemma1, v.seed)
    t2 = theorem2_suite(v.n_theorem2, v.seed)
    root.mkdir(parents=True, exist_ok=True)
    lines = [r.to_text() for r in l1.reports + t2.reports]
    (root / "verify_reports.jsonl").write_text("\n".join(lines) + "\n")
    return {"phase": "verify", "lemma1": f"{l1.passed}/{l1.total}",
            "lemma1_max_residual": l1.extra["max_residual"],
            "theorem2": f"{t2.passed}/{t2.total - t2.skipped}", "theorem2_skipped": t2.skipped,
            "theorem2_tight_fraction": t2.extra["tight_fraction"], "ok": l1.ok and t2.ok}


# ------------------------------------------------------------------ pipeline and sweeps


def run_phase(cfg: ExperimentConfig, phase: str, root: Path, seed: int) -> dict:
    run = RunDir(root, seed)
    if phase == "train-victim":
        return phase_train_victim(cfg, run)
    if phase == "gen-demos":
        return phase_gen_demos(cfg, run)
    if phase == "train-attack":
        return phase_train_attack(cfg, run)
    if phase == "train-defense":
        return phase_train_defense(cfg, run)
    if phase == "evaluate":
        return phase_evaluate(cfg, run)
    raise ConfigError(f"unknown phase {phase!r}")


def run_pipeline(cfg: ExperimentConfig, root: Path, phases=None) -> list:
    """Run ``phases`` for every seed; training every attack the evaluation needs."""
    phases = list(phases or cfg.sweep.phases)
    out = []
    for seed in cfg.seeds:
        for ph in phases:
            if ph == "train-attack":
                for kind in dict.fromkeys([cfg.attack.kind, *cfg.eval.attacks]):
                    out.append(phase_train_attack(cfg, RunDir(root, seed), kind))
            else:
                out.append(run_phase(cfg, ph, root, seed))
    return out


SWEEP_COLUMNS = ("axis", "value", "seed", "victim") + EvalReport.COLUMNS


def run_sweep(cfg: ExperimentConfig, root: Path, axis: str | None = None, values=None) -> str:
    """Run the pipeline once per axis value with paired seeds; return a wide CSV."""
    axis = axis or cfg.sweep.axis
    values = list(cfg.sweep.values if values is None else values)
    if not axis:
        raise ConfigError("sweep needs an axis (sweep.axis or --axis)")
    if not values:
        raise ConfigError("sweep needs at least one value")
    with_override(cfg, axis, values[0])  # resolves the axis before any work
    rows = []
    for v in values:
        point = with_override(cfg, axis, v)
        sub = Path(root) / "sweep" / f"{axis}={v}"
        for res in run_pipeline(point, sub):
            for r in res.get("rows", []):
                rows.append({"axis": axis, "value": v, **r})
    text = metrics_to_csv(rows, SWEEP_COLUMNS)
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / f"sweep_{axis}.csv").write_text(text)
    return text


def emit_plotdata(csv_text: str, metric: str, axis_column: str = "value") -> str:
    """Group rows by the axis column; emit axis, mean, std (sample), n."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["axis", "mean", "std", "n"])
    reader = csv.DictReader(io.StringIO(csv_text))
    rows = list(reader)
    if not rows:
        return out.getvalue()
    for col in (axis_column, metric):
        if col not in (reader.fieldnames or []):
            raise StructuralError(f"plot data needs column {col!r}")
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[axis_column], []).append(float(r[metric]))
    for key, vals in groups.items():
        a = np.asarray(vals)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        w.writerow([key, repr(float(a.mean())), repr(std), len(a)])
    return out.getvalue()


# ------------------------------------------------------------------ command line


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samdp-lab", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=PHASES)
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config entry (repeatable)")
    p.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    p.add_argument("--kind", help="attack kind for train-attack (default attack.kind)")
    p.add_argument("--axis", help="sweep axis as a dotted config key")
    p.add_argument("--values", help="comma-separated sweep values (YAML scalars)")
    p.add_argument("--plot-metric", default="attack_reward_mean",
                   help="metric summarized into plot data after a sweep")
    return p


def _summary(d: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in d.items() if k != "rows")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = load_config_file(args.config, args.overrides)
        else:
            cfg = load_config(None, args.overrides, "<defaults>")
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seeds=[args.seed])
        root = output_root(cfg, args.out)
        cmd = args.subcommand
        if cmd == "verify":
            res = phase_verify(cfg, root)
            print(_summary(res))
            return 0 if res["ok"] else 1
        if cmd == "sweep":
            values = None
            if args.values is not None:
                values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
            text = run_sweep(cfg, root, args.axis, values)
            axis = args.axis or cfg.sweep.axis
            plot = emit_plotdata(text, args.plot_metric)
            (root / f"sweep_{axis}_plot.csv").write_text(plot)
            print(f"phase=sweep axis={axis} rows={text.count(chr(10)) - 1} out={root}")
            return 0
        for seed in cfg.seeds:
            run = RunDir(root, seed)
            if cmd == "train-attack":
                res = phase_train_attack(cfg, run, args.kind)
            else:
                res = run_phase(cfg, cmd, root, seed)
            print(_summary(res))
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return 3
    except (StructuralError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
